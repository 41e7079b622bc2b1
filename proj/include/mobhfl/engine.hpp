#pragma once

#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "mobhfl/datasets.hpp"
#include "mobhfl/errors.hpp"
#include "mobhfl/mobility.hpp"
#include "mobhfl/models.hpp"
#include "mobhfl/param_vector.hpp"
#include "mobhfl/rng.hpp"

namespace mobhfl {

struct HflConfig {
  double eta = 0.1;
  int tau_l = 6;           // local updates per edge round
  int tau_e = 10;          // edge rounds per cloud round
  int cloud_epochs = 600;  // K
  int batch_size = 20;
  std::uint64_t seed = 1;
  bool full_batch = false;      // every local step uses the whole shard
  bool record_virtual = false;  // u, v, v~ per iteration
  bool record_states = false;   // every w_m per iteration (bound checks)
  int threads = 1;
  double round_seconds = 1.0;  // mobility time per edge round
  int eval_every = 1;          // edge rounds between metric rows; cloud rounds always logged

  long iterations_per_cloud() const noexcept { return static_cast<long>(tau_l) * tau_e; }
  friend bool operator==(const HflConfig&, const HflConfig&) = default;
  long total_iterations() const noexcept { return iterations_per_cloud() * cloud_epochs; }

  void validate() const {
    if (!(eta >= 0.0) || tau_l < 1 || tau_e < 1 || cloud_epochs < 1) {
      throw ConfigError("need eta >= 0, tau_l >= 1, tau_e >= 1, K >= 1");
    }
    if (!full_batch && batch_size < 1) throw ConfigError("batch_size must be positive");
    if (threads < 1 || eval_every < 1) throw ConfigError("threads and eval_every must be positive");
    if (!(round_seconds > 0.0)) throw ConfigError("round_seconds must be positive");
  }
};

// Per-vehicle minibatch stream. Conceptually the vehicle walks an infinite
// sequence of shard permutations (one per pass); the batch for iteration tau
// (1-based) is stream positions [(tau - 1) b, tau b). Pass p's permutation
// is drawn from Rng(seed, {"batch", vehicle, p}), so batches depend only on
// (seed, vehicle, tau).
class BatchSampler {
 public:
  BatchSampler(std::uint64_t seed, int vehicle, std::size_t shard_size, std::size_t batch_size)
      : seed_(seed), vehicle_(vehicle), n_(shard_size), b_(batch_size) {
    if (n_ == 0 || b_ == 0) throw ParameterError("batch sampler needs a non-empty shard and batch");
  }

  std::vector<std::size_t> batch(long tau) const {
    if (tau < 1) throw ParameterError("iterations are 1-based");
    std::vector<std::size_t> out;
    out.reserve(b_);
    std::uint64_t pos = static_cast<std::uint64_t>(tau - 1) * b_;
    for (std::size_t k = 0; k < b_; ++k, ++pos) {
      const std::uint64_t pass = pos / n_;
      out.push_back(permutation(pass)[static_cast<std::size_t>(pos % n_)]);
    }
    return out;
  }

 private:
  const std::vector<std::size_t>& permutation(std::uint64_t pass) const {
    if (pass != cached_pass_ || perm_.empty()) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      Rng rng(seed_, {0x6261746368, static_cast<std::uint64_t>(vehicle_), pass});
      rng.shuffle(std::span<std::size_t>(perm_));
      cached_pass_ = pass;
    }
    return perm_;
  }

  std::uint64_t seed_;
  int vehicle_;
  std::size_t n_;
  std::size_t b_;
  mutable std::uint64_t cached_pass_ = 0;
  mutable std::vector<std::size_t> perm_;
};

// ---------------------------------------------------------------------------
// Aggregation weights

inline std::vector<double> shard_sizes(std::span<const Shard> shards) {
  std::vector<double> s;
  s.reserve(shards.size());
  for (const auto& sh : shards) s.push_back(static_cast<double>(sh.size()));
  return s;
}

// alpha_m = |D_m| / |D|
inline std::vector<double> vehicle_weights(std::span<const double> sizes) {
  double total = 0.0;
  for (double s : sizes) total += s;
  std::vector<double> a;
  for (double s : sizes) a.push_back(s / total);
  return a;
}

// alpha_{m,n} for the members of one edge, in member order.
inline std::vector<double> edge_member_weights(std::span<const int> members,
                                               std::span<const double> sizes) {
  double total = 0.0;
  for (int m : members) total += sizes[static_cast<std::size_t>(m)];
  std::vector<double> a;
  for (int m : members) a.push_back(sizes[static_cast<std::size_t>(m)] / total);
  return a;
}

// theta_n; empty edges get 0.
inline std::vector<double> edge_weights(const AssociationSnapshot& snap, std::span<const double> sizes) {
  double total = 0.0;
  for (double s : sizes) total += s;
  std::vector<double> theta;
  for (const auto& members : snap.members) {
    double s = 0.0;
    for (int m : members) s += sizes[static_cast<std::size_t>(m)];
    theta.push_back(s / total);
  }
  return theta;
}

// ---------------------------------------------------------------------------
// Elementary steps

inline ParamVector local_update(const ModelSpec& spec, const Shard& shard, const ParamVector& w,
                                std::span<const std::size_t> batch, double eta, long iteration = 0) {
  ParamVector out = w;
  axpy(-eta, batch.empty() ? gradient(spec, w, shard.data) : gradient(spec, w, shard.data, batch), out);
  if (!out.all_finite()) throw DivergenceError(shard.owner, iteration);
  return out;
}

// Data-size weighted average of the members' models; an edge without members
// keeps `previous`.
inline ParamVector edge_aggregate(std::span<const int> members, std::span<const ParamVector> vehicle_params,
                                  std::span<const double> sizes, const ParamVector& previous) {
  if (members.empty()) return previous;
  const auto alpha = edge_member_weights(members, sizes);
  std::vector<const ParamVector*> items;
  for (int m : members) items.push_back(&vehicle_params[static_cast<std::size_t>(m)]);
  return weighted_sum(items, alpha);
}

inline ParamVector cloud_aggregate(std::span<const ParamVector> edge_params, std::span<const double> theta) {
  double total = 0.0;
  for (double t : theta) total += t;
  if (std::abs(total - 1.0) > 1e-9) {
    throw InvariantError("cloud weights sum to " + format_double(total));
  }
  std::vector<const ParamVector*> items;
  for (const auto& p : edge_params) items.push_back(&p);
  return weighted_sum(items, theta);
}

// ---------------------------------------------------------------------------
// Run state and logs

struct FleetState {
  long tau = 0;
  std::vector<ParamVector> vehicle_params;
  std::vector<ParamVector> edge_params;
  ParamVector cloud_params;

  friend bool operator==(const FleetState&, const FleetState&) = default;
};

struct MetricsRow {
  int cloud_epoch = 0;
  long edge_round = 0;
  long iteration = 0;
  bool cloud = false;  // row sits on a cloud aggregation
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  double u_vtilde_gap = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> membership_counts;
};

struct MetricsLog {
  std::vector<MetricsRow> rows;

  void write_csv(std::ostream& os) const {
    os << "cloud_epoch,edge_round,iteration,train_loss,test_accuracy,u_vtilde_gap,edge_membership_counts\n";
    for (const auto& r : rows) {
      os << r.cloud_epoch << ',' << r.edge_round << ',' << r.iteration << ',' << format_double(r.train_loss)
         << ',' << format_double(r.test_accuracy) << ',';
      if (!std::isnan(r.u_vtilde_gap)) os << format_double(r.u_vtilde_gap);
      os << ',';
      for (std::size_t n = 0; n < r.membership_counts.size(); ++n) {
        os << (n ? ";" : "") << r.membership_counts[n];
      }
      os << '\n';
    }
  }

  // Best cloud-model accuracy (cloud rows only).
  double max_cloud_accuracy() const noexcept {
    double best = 0.0;
    for (const auto& r : rows) {
      if (r.cloud) best = std::max(best, r.test_accuracy);
    }
    return best;
  }

  // First cloud epoch whose cloud model reaches `target`; -1 when never.
  int rounds_to(double target) const noexcept {
    for (const auto& r : rows) {
      if (r.cloud && r.test_accuracy >= target) return r.cloud_epoch;
    }
    return -1;
  }
};

// Virtual sequences indexed by tau = 0..T. Index 0 holds the common
// initialization (v~^(0) = v^(0) = u^(0) = w^[0]).
struct VirtualTrace {
  std::vector<ParamVector> u;
  std::vector<ParamVector> v;
  std::vector<ParamVector> vtilde;
  std::vector<double> gap;  // ||u - v~||
  std::vector<std::vector<ParamVector>> vehicle_params;  // [tau][m], only with record_states

  bool empty() const noexcept { return u.empty(); }
};

struct RunResult {
  MetricsLog metrics;
  VirtualTrace trace;
  FleetState final_state;
  std::vector<AssociationSnapshot> associations;  // [j] = snapshot at tau = j tau_l
  std::vector<VehicleState> final_vehicles;
  bool stopped_early = false;
};

using StopPredicate = std::function<bool(const MetricsRow&)>;

namespace detail {

inline ParamVector vehicle_average(std::span<const ParamVector> params, std::span<const double> alpha) {
  std::vector<const ParamVector*> items;
  for (const auto& p : params) items.push_back(&p);
  return weighted_sum(items, alpha);
}

}  // namespace detail

// Hierarchical averaging with mobile vehicles. Per edge round: tau_l local steps on every vehicle, one
// mobility advance of round_seconds, re-association, edge aggregation; every
// tau_e-th edge round ends with a cloud aggregation.
inline RunResult run(const HflConfig& cfg, const ModelSpec& spec, std::span<const Shard> shards,
                     const RoadNetwork& network, std::vector<VehicleState> vehicles,
                     const ParamVector& initial, const LabeledDataset* test = nullptr,
                     const StopPredicate& stop = {}) {
  cfg.validate();
  spec.validate();
  network.validate();
  if (shards.empty() || vehicles.size() != shards.size()) {
    throw ConfigError("need one vehicle per shard (" + std::to_string(vehicles.size()) + " vehicles, " +
                      std::to_string(shards.size()) + " shards)");
  }
  if (initial.size() != spec.param_count()) throw DimensionMismatch("initial parameters do not match model");

  const std::size_t M = shards.size();
  const auto N = static_cast<std::size_t>(network.edge_count);
  const LabeledDataset pooled = concatenate(shards);
  const auto sizes = shard_sizes(shards);
  const auto alpha = vehicle_weights(sizes);
  const long per_cloud = cfg.iterations_per_cloud();
  const long T = cfg.total_iterations();

  std::vector<BatchSampler> samplers;
  if (!cfg.full_batch) {
    for (std::size_t m = 0; m < M; ++m) {
      samplers.emplace_back(cfg.seed, static_cast<int>(m), shards[m].size(),
                            static_cast<std::size_t>(cfg.batch_size));
    }
  }

  RunResult res;
  FleetState& st = res.final_state;
  st.vehicle_params.assign(M, initial);
  st.edge_params.assign(N, initial);
  st.cloud_params = initial;
  AssociationSnapshot current = associate(network, vehicles, 0.0);
  res.associations.push_back(current);

  ParamVector v = initial;
  VirtualTrace& tr = res.trace;
  if (cfg.record_virtual) {
    tr.u.push_back(initial);
    tr.v.push_back(initial);
    tr.vtilde.push_back(initial);
    tr.gap.push_back(0.0);
  }
  if (cfg.record_states) tr.vehicle_params.push_back(st.vehicle_params);

  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), M);
  std::vector<std::exception_ptr> failures(M);

  auto local_steps = [&](long tau) {
    auto work = [&](std::size_t begin, std::size_t end) {
      for (std::size_t m = begin; m < end; ++m) {
        try {
          const std::vector<std::size_t> batch =
              cfg.full_batch ? std::vector<std::size_t>{} : samplers[m].batch(tau);
          st.vehicle_params[m] = local_update(spec, shards[m], st.vehicle_params[m], batch, cfg.eta, tau);
        } catch (...) {
          failures[m] = std::current_exception();
        }
      }
    };
    if (workers <= 1) {
      work(0, M);
    } else {
      std::vector<std::thread> pool;
      const std::size_t chunk = (M + workers - 1) / workers;
      for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t b = w * chunk;
        const std::size_t e = std::min(M, b + chunk);
        if (b < e) pool.emplace_back(work, b, e);
      }
      for (auto& t : pool) t.join();
    }
    for (auto& f : failures) {
      if (f) std::rethrow_exception(f);
    }
  };

  for (long tau = 1; tau <= T; ++tau) {
    st.tau = tau;
    local_steps(tau);

    const bool edge_round = tau % cfg.tau_l == 0;
    const bool cloud_round = tau % per_cloud == 0;
    if (edge_round) {
      const long j = tau / cfg.tau_l;
      vehicles = advance(network, vehicles, cfg.round_seconds);
      current = associate(network, vehicles, static_cast<double>(j) * cfg.round_seconds);
      res.associations.push_back(current);
      for (std::size_t n = 0; n < N; ++n) {
        const auto& members = current.members[n];
        st.edge_params[n] = edge_aggregate(members, st.vehicle_params, sizes, st.edge_params[n]);
        for (int m : members) st.vehicle_params[static_cast<std::size_t>(m)] = st.edge_params[n];
      }
      if (cloud_round) {
        st.cloud_params = cloud_aggregate(st.edge_params, edge_weights(current, sizes));
        for (auto& e : st.edge_params) e = st.cloud_params;
        for (auto& w : st.vehicle_params) w = st.cloud_params;
      }
    }

    double gap = std::numeric_limits<double>::quiet_NaN();
    if (cfg.record_virtual) {
      ParamVector u = detail::vehicle_average(st.vehicle_params, alpha);
      ParamVector vt = v;
      axpy(-cfg.eta, gradient(spec, v, pooled), vt);
      gap = distance(u, vt);
      v = cloud_round ? u : vt;
      tr.u.push_back(std::move(u));
      tr.vtilde.push_back(std::move(vt));
      tr.v.push_back(v);
      tr.gap.push_back(gap);
    }
    if (cfg.record_states) tr.vehicle_params.push_back(st.vehicle_params);

    if (edge_round) {
      const long j = tau / cfg.tau_l;
      if (cloud_round || j % cfg.eval_every == 0) {
        const ParamVector model = cloud_round ? st.cloud_params
                                  : cfg.record_virtual ? tr.u.back()
                                                       : detail::vehicle_average(st.vehicle_params, alpha);
        MetricsRow row;
        row.cloud_epoch = static_cast<int>((j + cfg.tau_e - 1) / cfg.tau_e);
        row.edge_round = j;
        row.iteration = tau;
        row.cloud = cloud_round;
        row.train_loss = loss(spec, model, pooled);
        row.test_accuracy = test ? accuracy(spec, model, *test) : accuracy(spec, model, pooled);
        row.u_vtilde_gap = gap;
        row.membership_counts = current.counts();
        res.metrics.rows.push_back(row);
        if (cloud_round && stop && stop(row)) {
          res.stopped_early = true;
          break;
        }
      }
    }
  }
  res.final_vehicles = std::move(vehicles);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: "MHFLCKPT", u64 version, u64 config hash, u64 tau, u64 M,
// u64 N, cloud vector, N edge vectors, M vehicle vectors (ParamVector wire
// format, little-endian).

inline std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline constexpr std::string_view kCheckpointMagic = "MHFLCKPT";

inline void write_checkpoint(std::ostream& os, const FleetState& st, std::uint64_t config_hash) {
  os.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  detail::write_u64(os, 1);
  detail::write_u64(os, config_hash);
  detail::write_u64(os, static_cast<std::uint64_t>(st.tau));
  detail::write_u64(os, st.vehicle_params.size());
  detail::write_u64(os, st.edge_params.size());
  write_param_vector(os, st.cloud_params);
  for (const auto& e : st.edge_params) write_param_vector(os, e);
  for (const auto& w : st.vehicle_params) write_param_vector(os, w);
}

struct Checkpoint {
  FleetState state;
  std::uint64_t config_hash = 0;
};

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string magic(kCheckpointMagic.size(), '\0');
  if (!is.read(magic.data(), static_cast<std::streamsize>(magic.size())) || magic != kCheckpointMagic) {
    throw IoError("not a checkpoint file");
  }
  if (detail::read_u64(is) != 1) throw IoError("unsupported checkpoint version");
  Checkpoint ck;
  ck.config_hash = detail::read_u64(is);
  ck.state.tau = static_cast<long>(detail::read_u64(is));
  const auto M = detail::read_u64(is);
  const auto N = detail::read_u64(is);
  if (M > (1u << 20) || N > (1u << 20)) throw IoError("implausible checkpoint sizes");
  ck.state.cloud_params = read_param_vector(is);
  for (std::uint64_t n = 0; n < N; ++n) ck.state.edge_params.push_back(read_param_vector(is));
  for (std::uint64_t m = 0; m < M; ++m) ck.state.vehicle_params.push_back(read_param_vector(is));
  return ck;
}

}  // namespace mobhfl
