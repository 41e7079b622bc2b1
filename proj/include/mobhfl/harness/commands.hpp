#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mobhfl/analysis.hpp"
#include "mobhfl/datasets.hpp"
#include "mobhfl/engine.hpp"
#include "mobhfl/errors.hpp"
#include "mobhfl/harness/config.hpp"
#include "mobhfl/mobility.hpp"
#include "mobhfl/models.hpp"

namespace mobhfl::harness {

using Json = nlohmann::ordered_json;

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kConfigInvalid = 2,
  kDiverged = 3,
  kIoFailure = 4,
  kBoundViolated = 5,
};

// ---------------------------------------------------------------------------
// Output files

// Writes through a temporary sibling and renames it into place, so readers
// never observe a partial file.
inline void write_atomic(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    try {
      body(os);
    } catch (...) {
      os.close();
      std::filesystem::remove(tmp, ec);
      throw;
    }
    os.flush();
    if (!os) {
      std::filesystem::remove(tmp, ec);
      throw IoError("write failed for " + path.string());
    }
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename into " + path.string());
  }
}

inline void write_json(const std::filesystem::path& path, const Json& j) {
  write_atomic(path, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
}

inline Json number_or_null(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

// ---------------------------------------------------------------------------
// Experiment preparation

struct Prepared {
  ExperimentConfig cfg;
  ModelSpec spec;
  Partition part;
  LabeledDataset train;  // union of shards (after truncation)
  LabeledDataset test;   // empty when there is no held-out split
  RoadNetwork network;
  std::vector<VehicleState> vehicles;

  const LabeledDataset& eval_set() const noexcept { return test.empty() ? train : test; }
};

inline RoadNetwork make_network(const ExperimentConfig& c) {
  RoadNetwork net;
  net.side_length = c.mobility.side_length;
  net.edge_count = c.partition.edge_count;
  net.intersection_zone = c.mobility.intersection_zone;
  net.slowdown_factor = c.mobility.slowdown_factor;
  net.turn_probability = c.mobility.turn_probability;
  net.seed = c.mobility.seed;
  net.validate();
  return net;
}

inline std::vector<VehicleState> make_vehicles(const ExperimentConfig& c, const RoadNetwork& net,
                                               const Partition& part) {
  const bool by_edge = c.mobility.placement == "by_edge" ||
                       (c.mobility.placement == "auto" && c.partition.regime == PartitionRegime::EdgeNonIid);
  if (by_edge) return init_positions_by_edge(net, part.initial_edge, c.mobility.speed, c.mobility.seed);
  return init_positions_uniform(net, c.partition.vehicle_count, c.mobility.speed, c.mobility.seed);
}

inline PartitionSpec partition_spec(const ExperimentConfig& c) {
  PartitionSpec ps;
  ps.regime = c.partition.regime;
  ps.classes_per_unit = c.partition.classes_per_unit;
  ps.vehicle_count = c.partition.vehicle_count;
  ps.edge_count = c.partition.edge_count;
  ps.seed = c.partition.seed;
  ps.allow_partial_class_coverage = c.partition.allow_partial_class_coverage;
  return ps;
}

inline Prepared prepare(const ExperimentConfig& cfg) {
  validate(cfg);
  Prepared p;
  p.cfg = cfg;
  const auto& d = cfg.dataset;
  if (d.source == "shared_input") {
    SharedInputSpec s;
    s.class_count = d.class_count;
    s.dim = d.dim;
    s.rows = d.rows;
    s.vehicle_count = cfg.partition.vehicle_count;
    s.edge_count = cfg.partition.edge_count;
    s.regime = cfg.partition.regime;
    s.classes_per_unit = cfg.partition.classes_per_unit;
    s.heterogeneity = d.heterogeneity;
    s.feature_offset = d.feature_offset;
    s.feature_scale = d.feature_scale;
    s.seed = d.seed;
    p.part = make_shared_input(s);
  } else {
    LabeledDataset all = d.source == "csv" ? load_csv(d.path)
                                           : generate_synthetic(d.class_count, d.dim, d.samples_per_class,
                                                                d.separation, d.seed);
    LabeledDataset train = std::move(all);
    if (d.test_fraction > 0.0) {
      auto split = stratified_split(train, d.test_fraction, d.seed);
      train = std::move(split.train);
      p.test = std::move(split.test);
    }
    p.part = partition(train, partition_spec(cfg));
    if (!p.part.dropped_classes.empty() && !p.test.empty()) {
      // Evaluate only on classes that some vehicle actually holds.
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < p.test.size(); ++i) {
        const int y = p.test.labels[i];
        if (std::find(p.part.dropped_classes.begin(), p.part.dropped_classes.end(), y) ==
            p.part.dropped_classes.end()) {
          keep.push_back(i);
        }
      }
      p.test = subset(p.test, keep);
    }
  }
  p.train = concatenate(p.part.shards);
  p.spec.family = cfg.model.family;
  p.spec.dim = p.train.dim;
  p.spec.class_count = p.train.class_count;
  p.spec.l2_reg = cfg.model.l2_reg;
  p.spec.hidden_width = cfg.model.hidden_width;
  p.spec.validate();
  p.network = make_network(cfg);
  p.vehicles = make_vehicles(cfg, p.network, p.part);
  return p;
}

// Best held-out accuracy of centralized full-batch gradient descent over
// `iterations` steps; accuracy is sampled every 10 steps.
inline double centralized_ceiling(const ModelSpec& spec, const LabeledDataset& train, const LabeledDataset& eval,
                                  double eta, int iterations, std::uint64_t seed) {
  ParamVector w = initial_params(spec, seed);
  double best = accuracy(spec, w, eval);
  for (int it = 1; it <= iterations; ++it) {
    axpy(-eta, gradient(spec, w, train), w);
    if (!w.all_finite()) throw DivergenceError(-1, it);
    if (it % 10 == 0 || it == iterations) best = std::max(best, accuracy(spec, w, eval));
  }
  return best;
}

// Convex families step at 1 / beta (monotone descent whatever eta is); MLP1
// uses eta.
inline double ceiling_for(const Prepared& p) {
  double step = p.cfg.hfl.eta;
  if (p.spec.convex()) {
    const ParamVector zero(p.spec.param_count());
    step = 1.0 / estimate_constants(p.spec, p.train, std::span(&zero, 1)).beta;
  }
  return centralized_ceiling(p.spec, p.train, p.eval_set(), step, p.cfg.experiment.ceiling_iterations,
                             p.cfg.hfl.seed);
}

// Warm start: i.i.d. shards of the same training data, vehicles parked
// (v = 0), trained until the cloud model reaches fraction * ceiling.
struct PretrainResult {
  ParamVector params;
  int cloud_epochs = 0;
  double accuracy = 0.0;
  bool reached = false;
};

inline PretrainResult pretrain_iid(const Prepared& p, double ceiling) {
  const auto& c = p.cfg;
  PartitionSpec ps = partition_spec(c);
  ps.regime = PartitionRegime::Iid;
  Partition iid = partition(p.train, ps);
  RoadNetwork net = p.network;
  auto vehicles = init_positions_uniform(net, c.partition.vehicle_count, 0.0, c.mobility.seed);
  HflConfig h = c.hfl;
  h.cloud_epochs = c.experiment.pretrain_max_epochs;
  h.record_virtual = false;
  h.record_states = false;
  h.eval_every = h.tau_e;
  const double target = c.experiment.pretrain_fraction * ceiling;
  auto res = run(h, p.spec, iid.shards, net, std::move(vehicles), initial_params(p.spec, c.hfl.seed), &p.eval_set(),
                 [target](const MetricsRow& r) { return r.test_accuracy >= target; });
  PretrainResult out;
  out.params = res.final_state.cloud_params;
  out.reached = res.stopped_early;
  if (!res.metrics.rows.empty()) {
    out.cloud_epochs = res.metrics.rows.back().cloud_epoch;
    out.accuracy = res.metrics.rows.back().test_accuracy;
  }
  return out;
}

inline ParamVector load_checkpoint_params(const std::string& path, const ModelSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  auto ck = read_checkpoint(in);
  if (ck.state.cloud_params.size() != spec.param_count()) {
    throw ConfigError("checkpoint " + path + " does not match the model size");
  }
  return ck.state.cloud_params;
}

struct StartPoint {
  ParamVector params;
  std::optional<PretrainResult> pretrain;
};

inline StartPoint start_point(const Prepared& p, std::optional<double> ceiling) {
  StartPoint s;
  if (!p.cfg.experiment.initial_checkpoint.empty()) {
    s.params = load_checkpoint_params(p.cfg.experiment.initial_checkpoint, p.spec);
  } else if (p.cfg.experiment.pretrain == "iid") {
    s.pretrain = pretrain_iid(p, ceiling ? *ceiling : ceiling_for(p));
    s.params = s.pretrain->params;
  } else {
    s.params = initial_params(p.spec, p.cfg.hfl.seed);
  }
  return s;
}

inline bool needs_ceiling(const ExperimentConfig& c) {
  return !c.experiment.targets.empty() || c.experiment.pretrain == "iid";
}

inline std::vector<double> absolute_targets(const ExperimentConfig& c, double ceiling) {
  std::vector<double> t;
  for (double f : c.experiment.targets) t.push_back(f * ceiling);
  return t;
}

inline StopPredicate target_stop(const ExperimentConfig& c, const std::vector<double>& targets) {
  if (!c.experiment.stop_after_targets || targets.empty()) return {};
  const double top = *std::max_element(targets.begin(), targets.end());
  return [top](const MetricsRow& r) { return r.test_accuracy >= top; };
}

inline std::string target_label(double fraction) { return "rounds_to_" + format_double(fraction); }

// Delta^[j] summary with the initial model as the single probe.
inline MixingReport mixing_summary(const Prepared& p, const RunResult& res, const ParamVector& probe) {
  const auto est = estimate_divergences(p.spec, p.part.shards, res.associations, p.cfg.hfl.tau_l,
                                        std::span(&probe, 1));
  return mobility_mixing_report(est);
}

// ---------------------------------------------------------------------------
// Command plumbing

struct CommandOptions {
  std::string out_dir;  // empty: config's output.dir
  std::optional<std::uint64_t> seed;
  int parallel = 1;
  std::vector<double> speeds;  // sweep overrides
  std::vector<std::uint64_t> seeds;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
};

inline std::filesystem::path out_dir(const ExperimentConfig& c, const CommandOptions& o) {
  return o.out_dir.empty() ? std::filesystem::path(c.output.dir) : std::filesystem::path(o.out_dir);
}

// Maps library exceptions onto the stable exit codes.
inline int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kDiverged;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kIoFailure;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kIoFailure;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigInvalid;
  } catch (const UnsupportedModel& e) {
    err << "error: " << e.what() << '\n';
    return kConfigInvalid;
  } catch (const InfeasiblePartition& e) {
    err << "error: " << e.what() << '\n';
    return kConfigInvalid;
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigInvalid;
  } catch (const DimensionMismatch& e) {
    err << "error: " << e.what() << '\n';
    return kConfigInvalid;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kIoFailure;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternal;
  }
}

inline ExperimentConfig apply_overrides(ExperimentConfig cfg, const CommandOptions& o) {
  if (o.seed) override_seed(cfg, *o.seed);
  return cfg;
}

// ---------------------------------------------------------------------------
// run

inline Json run_summary(const Prepared& p, const RunResult& res, std::optional<double> ceiling,
                        const std::vector<double>& targets, const std::optional<PretrainResult>& pre) {
  Json j;
  j["cloud_epochs_run"] = res.metrics.rows.empty() ? 0 : res.metrics.rows.back().cloud_epoch;
  j["stopped_early"] = res.stopped_early;
  j["max_test_accuracy"] = res.metrics.max_cloud_accuracy();
  j["final_train_loss"] = res.metrics.rows.empty() ? Json(nullptr) : number_or_null(res.metrics.rows.back().train_loss);
  j["final_test_accuracy"] = res.metrics.rows.empty() ? Json(nullptr) : Json(res.metrics.rows.back().test_accuracy);
  j["centralized_ceiling"] = ceiling ? Json(*ceiling) : Json(nullptr);
  Json rt = Json::object();
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const int r = res.metrics.rounds_to(targets[i]);
    rt[format_double(p.cfg.experiment.targets[i])] = r < 0 ? Json(nullptr) : Json(r);
  }
  j["rounds_to_target"] = rt;
  if (pre) {
    j["pretrain"] = {{"cloud_epochs", pre->cloud_epochs}, {"accuracy", pre->accuracy}, {"reached", pre->reached}};
  }
  if (!res.trace.empty()) {
    double max_gap = 0.0;
    for (double g : res.trace.gap) max_gap = std::max(max_gap, g);
    j["virtual_trace"] = {{"iterations", res.trace.gap.size() - 1},
                          {"final_u_vtilde_gap", res.trace.gap.back()},
                          {"max_u_vtilde_gap", max_gap}};
  }
  j["truncated_samples"] = p.part.truncated;
  j["dropped_classes"] = p.part.dropped_classes;
  return j;
}

inline int cmd_run(const ExperimentConfig& base, const CommandOptions& o) {
  return guarded(*o.err, [&] {
    ExperimentConfig cfg = apply_overrides(base, o);
    if (o.parallel > 1) cfg.hfl.threads = o.parallel;
    const Prepared p = prepare(cfg);
    const auto dir = out_dir(cfg, o);
    std::optional<double> ceiling;
    if (needs_ceiling(cfg)) ceiling = ceiling_for(p);
    const StartPoint start = start_point(p, ceiling);
    const auto targets = ceiling ? absolute_targets(cfg, *ceiling) : std::vector<double>{};

    const RunResult res = run(cfg.hfl, p.spec, p.part.shards, p.network, p.vehicles, start.params, &p.eval_set(),
                              target_stop(cfg, targets));
    for (const auto& r : res.metrics.rows) {
      if (!r.cloud) continue;
      *o.out << "cloud_epoch " << r.cloud_epoch << " iteration " << r.iteration << " train_loss "
             << format_double(r.train_loss) << " test_accuracy " << format_double(r.test_accuracy)
             << " membership ";
      for (std::size_t n = 0; n < r.membership_counts.size(); ++n) *o.out << (n ? ";" : "") << r.membership_counts[n];
      *o.out << '\n';
    }

    write_atomic(dir / "metrics.csv", [&](std::ostream& os) { res.metrics.write_csv(os); });
    if (!res.trace.empty()) {
      write_atomic(dir / "virtual_trace.csv", [&](std::ostream& os) {
        os << "iteration,u_vtilde_gap\n";
        for (std::size_t t = 0; t < res.trace.gap.size(); ++t) os << t << ',' << format_double(res.trace.gap[t]) << '\n';
      });
    }
    if (cfg.output.checkpoint) {
      ExperimentConfig hashed = cfg;
      hashed.hfl.threads = 1;  // thread count never changes results
      const auto hash = fnv1a64(serialize_config(hashed));
      write_atomic(dir / "checkpoint.bin", [&](std::ostream& os) { write_checkpoint(os, res.final_state, hash); });
    }
    write_json(dir / "summary.json", run_summary(p, res, ceiling, targets, start.pretrain));
    return static_cast<int>(kOk);
  });
}

// ---------------------------------------------------------------------------
// sweep-speed

struct SweepRow {
  double speed = 0.0;
  std::uint64_t seed = 0;
  double max_accuracy = 0.0;
  std::vector<std::optional<int>> rounds;  // per target; nullopt when never reached
  double delta_first_quarter = std::numeric_limits<double>::quiet_NaN();
  double delta_last_quarter = std::numeric_limits<double>::quiet_NaN();
  int cloud_epochs_run = 0;
};

struct SweepCell {
  double speed = 0.0;
  std::uint64_t seed = 0;
  bool done = false;
  std::string error;
  int exit_code = kOk;
  SweepRow row;
};

struct SweepResult {
  std::vector<double> speeds;
  std::vector<std::uint64_t> seeds;
  std::vector<double> target_fractions;
  std::map<std::uint64_t, double> ceilings;
  std::vector<SweepCell> cells;  // seed-major, then speed

  bool complete() const noexcept {
    return std::all_of(cells.begin(), cells.end(), [](const SweepCell& c) { return c.done; });
  }

  const SweepRow* find(double speed, std::uint64_t seed) const noexcept {
    for (const auto& c : cells) {
      if (c.done && c.speed == speed && c.seed == seed) return &c.row;
    }
    return nullptr;
  }
};

namespace detail {

inline void parallel_for(std::size_t count, int parallel, const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, parallel)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline int exit_code_of(const std::exception_ptr& e) {
  std::ostringstream sink;
  return guarded(sink, [&]() -> int { std::rethrow_exception(e); });
}

inline std::string message_of(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& ex) {
    return ex.what();
  }
}

}  // namespace detail

// Every (speed, seed) cell shares the dataset, partition, initial positions,
// batch streams and start model of its seed; only the speed differs.
inline SweepResult run_sweep(const ExperimentConfig& base, std::vector<double> speeds,
                             std::vector<std::uint64_t> seeds, int parallel,
                             const std::function<void(const SweepResult&)>& on_progress = {}) {
  validate(base);
  if (speeds.empty()) throw ConfigError("sweep needs at least one speed");
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
  SweepResult out;
  out.speeds = speeds;
  out.seeds = seeds;
  out.target_fractions = base.experiment.targets;

  struct SeedContext {
    std::optional<Prepared> prepared;
    std::optional<double> ceiling;
    ParamVector start;
    std::exception_ptr failure;
  };
  std::vector<SeedContext> ctx(seeds.size());
  detail::parallel_for(seeds.size(), parallel, [&](std::size_t i) {
    try {
      ExperimentConfig c = base;
      override_seed(c, seeds[i]);
      c.hfl.threads = 1;
      ctx[i].prepared = prepare(c);
      if (needs_ceiling(c)) ctx[i].ceiling = ceiling_for(*ctx[i].prepared);
      ctx[i].start = start_point(*ctx[i].prepared, ctx[i].ceiling).params;
    } catch (...) {
      ctx[i].failure = std::current_exception();
    }
  });
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (ctx[i].ceiling) out.ceilings[seeds[i]] = *ctx[i].ceiling;
  }

  for (auto seed : seeds) {
    for (double v : speeds) out.cells.push_back({v, seed, false, {}, kOk, {}});
  }
  std::mutex progress;
  detail::parallel_for(out.cells.size(), parallel, [&](std::size_t idx) {
    SweepCell& cell = out.cells[idx];
    const SeedContext& sc = ctx[idx / speeds.size()];
    try {
      if (sc.failure) std::rethrow_exception(sc.failure);
      const Prepared& p = *sc.prepared;
      const auto targets = sc.ceiling ? absolute_targets(p.cfg, *sc.ceiling) : std::vector<double>{};
      auto vehicles = p.vehicles;
      for (auto& s : vehicles) s.max_speed = cell.speed;
      const RunResult res = run(p.cfg.hfl, p.spec, p.part.shards, p.network, std::move(vehicles), sc.start,
                                &p.eval_set(), target_stop(p.cfg, targets));
      cell.row.speed = cell.speed;
      cell.row.seed = cell.seed;
      cell.row.max_accuracy = res.metrics.max_cloud_accuracy();
      for (double t : targets) {
        const int r = res.metrics.rounds_to(t);
        cell.row.rounds.push_back(r < 0 ? std::nullopt : std::optional<int>(r));
      }
      cell.row.cloud_epochs_run = res.metrics.rows.empty() ? 0 : res.metrics.rows.back().cloud_epoch;
      if (p.cfg.experiment.mixing_summary) {
        const auto mix = mixing_summary(p, res, sc.start);
        cell.row.delta_first_quarter = mix.first_quarter_mean;
        cell.row.delta_last_quarter = mix.last_quarter_mean;
      }
      cell.done = true;
    } catch (...) {
      cell.error = detail::message_of(std::current_exception());
      cell.exit_code = detail::exit_code_of(std::current_exception());
    }
    if (on_progress) {
      std::lock_guard lock(progress);
      on_progress(out);
    }
  });
  return out;
}

inline void write_sweep_csv(std::ostream& os, const SweepResult& r) {
  os << "speed,seed,max_test_accuracy";
  for (double t : r.target_fractions) os << ',' << target_label(t);
  os << ",delta_first_quarter,delta_last_quarter,cloud_epochs_run\n";
  for (const auto& c : r.cells) {
    if (!c.done) continue;
    os << format_double(c.speed) << ',' << c.seed << ',' << format_double(c.row.max_accuracy);
    for (std::size_t i = 0; i < r.target_fractions.size(); ++i) {
      os << ',';
      if (i < c.row.rounds.size() && c.row.rounds[i]) os << *c.row.rounds[i];
    }
    os << ',';
    if (!std::isnan(c.row.delta_first_quarter)) os << format_double(c.row.delta_first_quarter);
    os << ',';
    if (!std::isnan(c.row.delta_last_quarter)) os << format_double(c.row.delta_last_quarter);
    os << ',' << c.row.cloud_epochs_run << '\n';
  }
}

struct SpeedStats {
  double speed = 0.0;
  std::size_t runs = 0;
  double mean_max_accuracy = 0.0;
  double std_max_accuracy = 0.0;  // sample standard deviation; 0 for one run
  std::vector<std::size_t> reached;
  std::vector<double> mean_rounds;  // over runs that reached the target; NaN if none
};

inline std::vector<SpeedStats> speed_stats(const SweepResult& r) {
  std::vector<SpeedStats> out;
  for (double v : r.speeds) {
    SpeedStats s;
    s.speed = v;
    std::vector<double> acc;
    s.reached.assign(r.target_fractions.size(), 0);
    std::vector<double> sum(r.target_fractions.size(), 0.0);
    for (const auto& c : r.cells) {
      if (!c.done || c.speed != v) continue;
      acc.push_back(c.row.max_accuracy);
      for (std::size_t i = 0; i < c.row.rounds.size(); ++i) {
        if (c.row.rounds[i]) {
          ++s.reached[i];
          sum[i] += *c.row.rounds[i];
        }
      }
    }
    s.runs = acc.size();
    for (double a : acc) s.mean_max_accuracy += a;
    if (!acc.empty()) s.mean_max_accuracy /= static_cast<double>(acc.size());
    if (acc.size() > 1) {
      double ss = 0.0;
      for (double a : acc) ss += (a - s.mean_max_accuracy) * (a - s.mean_max_accuracy);
      s.std_max_accuracy = std::sqrt(ss / static_cast<double>(acc.size() - 1));
    }
    for (std::size_t i = 0; i < sum.size(); ++i) {
      s.mean_rounds.push_back(s.reached[i] ? sum[i] / static_cast<double>(s.reached[i])
                                           : std::numeric_limits<double>::quiet_NaN());
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline void write_sweep_summary_csv(std::ostream& os, const SweepResult& r) {
  os << "speed,runs,mean_max_test_accuracy,std_max_test_accuracy";
  for (double t : r.target_fractions) os << ",mean_" << target_label(t) << ",reached_" << format_double(t);
  os << '\n';
  for (const auto& s : speed_stats(r)) {
    os << format_double(s.speed) << ',' << s.runs << ',' << format_double(s.mean_max_accuracy) << ','
       << format_double(s.std_max_accuracy);
    for (std::size_t i = 0; i < s.mean_rounds.size(); ++i) {
      os << ',';
      if (!std::isnan(s.mean_rounds[i])) os << format_double(s.mean_rounds[i]);
      os << ',' << s.reached[i];
    }
    os << '\n';
  }
}

inline Json sweep_manifest(const SweepResult& r) {
  Json cells = Json::array();
  for (const auto& c : r.cells) {
    Json j = {{"speed", c.speed}, {"seed", c.seed}, {"status", c.done ? "done" : (c.error.empty() ? "pending" : "failed")}};
    if (!c.error.empty()) j["error"] = c.error;
    cells.push_back(j);
  }
  Json ceilings = Json::object();
  for (const auto& [seed, v] : r.ceilings) ceilings[std::to_string(seed)] = v;
  return {{"complete", r.complete()}, {"centralized_ceiling", ceilings}, {"cells", cells}};
}

inline void write_sweep_outputs(const std::filesystem::path& dir, const SweepResult& r) {
  write_atomic(dir / "sweep.csv", [&](std::ostream& os) { write_sweep_csv(os, r); });
  write_atomic(dir / "sweep_summary.csv", [&](std::ostream& os) { write_sweep_summary_csv(os, r); });
  write_json(dir / "manifest.json", sweep_manifest(r));
}

inline int cmd_sweep_speed(const ExperimentConfig& base, const CommandOptions& o) {
  return guarded(*o.err, [&] {
    ExperimentConfig cfg = apply_overrides(base, o);
    const auto dir = out_dir(cfg, o);
    auto speeds = o.speeds.empty() ? cfg.experiment.speeds : o.speeds;
    auto seeds = o.seeds.empty() ? (o.seed ? std::vector<std::uint64_t>{*o.seed} : cfg.experiment.seeds) : o.seeds;
    const SweepResult r = run_sweep(cfg, speeds, seeds, o.parallel,
                                    [&](const SweepResult& partial) { write_json(dir / "manifest.json", sweep_manifest(partial)); });
    write_sweep_outputs(dir, r);
    for (const auto& s : speed_stats(r)) {
      *o.out << "speed " << format_double(s.speed) << " runs " << s.runs << " mean_max_test_accuracy "
             << format_double(s.mean_max_accuracy) << " std " << format_double(s.std_max_accuracy) << '\n';
    }
    for (const auto& c : r.cells) {
      if (!c.done) {
        *o.err << "cell speed=" << format_double(c.speed) << " seed=" << c.seed << " failed: " << c.error << '\n';
        return c.exit_code;
      }
    }
    return static_cast<int>(kOk);
  });
}

// ---------------------------------------------------------------------------
// verify-bounds

struct VerifyOutcome {
  BoundSuiteReport suite;
  GapBoundReport gap;
  DivergenceEstimates estimates;
  BoundInputs inputs;
  double sum_uk = 0.0;
  bool gap_violated = false;

  bool passed() const noexcept { return suite.passed() && !gap_violated; }
};

// Runs the full-batch instance and evaluates every inequality.
inline VerifyOutcome verify_bounds(const Prepared& p) {
  if (!p.spec.convex()) throw UnsupportedModel("verify-bounds needs a convex model family (got mlp1)");
  const auto& c = p.cfg;
  HflConfig h = c.hfl;
  h.full_batch = true;
  h.record_virtual = true;
  h.record_states = true;
  const ParamVector w0 = c.experiment.initial_checkpoint.empty()
                             ? initial_params(p.spec, c.hfl.seed)
                             : load_checkpoint_params(c.experiment.initial_checkpoint, p.spec);
  const RunResult res = run(h, p.spec, p.part.shards, p.network, p.vehicles, w0, &p.eval_set());

  const Optimum opt = solve_optimum(p.spec, p.train);
  std::vector<ParamVector> probes{ParamVector(p.spec.param_count()), opt.w};
  const auto stride = static_cast<std::size_t>(c.analysis.probe_stride);
  for (std::size_t t = 0; t < res.trace.vtilde.size(); t += stride) probes.push_back(res.trace.vtilde[t]);

  VerifyOutcome out;
  BoundInputs& in = out.inputs;
  // beta must bound the smoothness of every f_m as well as F.
  const auto pooled = estimate_constants(p.spec, p.train, probes);
  in.beta = pooled.beta;
  in.rho = pooled.rho;
  for (const auto& s : p.part.shards) {
    in.beta = std::max(in.beta, estimate_constants(p.spec, s.data, std::span(probes.data(), 1)).beta);
  }
  in.eta = h.eta;
  in.tau_l = h.tau_l;
  in.tau_e = h.tau_e;
  in.cloud_epochs = h.cloud_epochs;
  in.w_star = opt.w;
  in.f_star = opt.f_star;

  out.estimates = estimate_divergences(p.spec, p.part.shards, res.associations, h.tau_l, probes);
  if (c.analysis.delta_scale != 1.0) out.estimates.scale_local(c.analysis.delta_scale);

  if (c.analysis.epsilon == "auto") {
    in.epsilon = max_feasible_epsilon(res.trace, in, p.spec, p.train, c.analysis.epsilon_centered);
  } else {
    detail::parse_number(c.analysis.epsilon, in.epsilon);
  }

  out.suite = verify_bound_suite(res, p.part.shards, out.estimates, in, c.analysis.tolerance);
  for (const auto& e : out.suite.uk) out.sum_uk += e.uk;
  out.gap = check_gap_bound(res.trace, in, out.suite.uk, p.spec, p.train);
  out.gap_violated = out.gap.bound && !out.gap.satisfied;
  return out;
}

inline Json family_json(const InequalityFamily& f) {
  Json j = {{"checks", f.checks}, {"min_slack", number_or_null(f.min_slack)}};
  j["first_violation"] = f.first_violation ? Json(*f.first_violation) : Json(nullptr);
  return j;
}

inline Json verify_summary(const VerifyOutcome& v) {
  const auto& g = v.gap;
  Json conditions = Json::array();
  for (const auto& e : g.epochs) {
    conditions.push_back({{"k", e.k},
                          {"step_size", g.step_ok},
                          {"rate_positive", e.rate_positive},
                          {"vtilde_gap_above_epsilon", e.vtilde_gap_above},
                          {"cloud_loss_above_epsilon", e.cloud_loss_above},
                          {"cloud_gap_above_epsilon_centered", e.cloud_gap_above}});
  }
  Json j;
  j["beta"] = v.inputs.beta;
  j["rho"] = v.inputs.rho;
  j["delta"] = v.estimates.delta;
  j["max_delta_m"] = v.estimates.max_delta_m();
  j["epsilon"] = number_or_null(v.inputs.epsilon);
  j["phi"] = number_or_null(g.phi);
  j["bound"] = g.bound ? Json(*g.bound) : Json(nullptr);
  j["measured_final_gap"] = g.measured_gap;
  j["applicable"] = g.applicable;
  j["applicable_centered"] = g.applicable_centered;
  j["degenerate"] = g.degenerate;
  j["bound_satisfied"] = g.bound ? Json(g.satisfied) : Json(nullptr);
  j["conditions"] = conditions;
  j["sum_U_k"] = v.sum_uk;
  j["probe_count"] = v.estimates.probe_count;
  j["inequalities"] = {{"local_model", family_json(v.suite.local)},
                       {"edge_model", family_json(v.suite.edge)},
                       {"recursion", family_json(v.suite.recursion)},
                       {"central_cloud", family_json(v.suite.cloud)}};
  j["passed"] = v.passed();
  return j;
}

inline int cmd_verify_bounds(const ExperimentConfig& base, const CommandOptions& o) {
  return guarded(*o.err, [&] {
    ExperimentConfig cfg = apply_overrides(base, o);
    cfg.hfl.full_batch = true;
    cfg.hfl.record_virtual = true;
    if (o.parallel > 1) cfg.hfl.threads = o.parallel;
    if (cfg.model.family == ModelFamily::Mlp1) {
      throw UnsupportedModel("verify-bounds needs a convex model family (got mlp1)");
    }
    const Prepared p = prepare(cfg);
    const auto dir = out_dir(cfg, o);
    const VerifyOutcome v = verify_bounds(p);

    write_atomic(dir / "bound_report.csv", [&](std::ostream& os) { write_bound_report_csv(os, v.suite.uk); });
    write_atomic(dir / "mixing.csv", [&](std::ostream& os) {
      os << "j,Delta\n";
      for (std::size_t j = 0; j < v.estimates.Delta.size(); ++j) os << j << ',' << format_double(v.estimates.Delta[j]) << '\n';
    });
    write_json(dir / "bound_summary.json", verify_summary(v));

    *o.out << "local-model checks " << v.suite.local.checks << ", edge-model checks " << v.suite.edge.checks
           << ", recursion checks " << v.suite.recursion.checks << ", central-cloud checks " << v.suite.cloud.checks
           << '\n';
    *o.out << "sum U_k " << format_double(v.sum_uk) << ", gap bound "
           << (v.gap.bound ? format_double(*v.gap.bound) : std::string("not applicable")) << ", measured gap "
           << format_double(v.gap.measured_gap) << '\n';
    if (!v.passed()) {
      if (auto first = v.suite.first_violation()) {
        *o.err << "violation: " << *first << '\n';
      } else {
        *o.err << "violation: measured gap " << format_double(v.gap.measured_gap) << " exceeds bound "
               << format_double(*v.gap.bound) << '\n';
      }
      return static_cast<int>(kBoundViolated);
    }
    return static_cast<int>(kOk);
  });
}

// ---------------------------------------------------------------------------
// partition-report

inline int cmd_partition_report(const ExperimentConfig& base, const CommandOptions& o) {
  return guarded(*o.err, [&] {
    const ExperimentConfig cfg = apply_overrides(base, o);
    const Prepared p = prepare(cfg);
    const auto dir = out_dir(cfg, o);
    write_atomic(dir / "partition.csv", [&](std::ostream& os) { write_partition_report(os, p.part); });
    write_atomic(dir / "mobility_trace.csv", [&](std::ostream& os) {
      write_trace_header(os);
      auto states = p.vehicles;
      write_trace_rows(os, 0.0, states, associate(p.network, states, 0.0));
      for (int j = 1; j <= cfg.mobility.trace_rounds; ++j) {
        states = advance(p.network, states, cfg.hfl.round_seconds);
        const double t = j * cfg.hfl.round_seconds;
        write_trace_rows(os, t, states, associate(p.network, states, t));
      }
    });
    *o.out << "vehicles " << p.part.shards.size() << ", truncated samples " << p.part.truncated << '\n';
    return static_cast<int>(kOk);
  });
}

}  // namespace mobhfl::harness
