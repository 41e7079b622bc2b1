#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mobhfl/datasets.hpp"
#include "mobhfl/engine.hpp"
#include "mobhfl/errors.hpp"
#include "mobhfl/mobility.hpp"
#include "mobhfl/models.hpp"
#include "mobhfl/param_vector.hpp"

namespace mobhfl {

// Gradient-divergence constants, estimated as maxima over a probe set.
// Edge-level quantities are stored per association snapshot j (membership
// holds for tau in [j tau_l, (j + 1) tau_l)), so Delta[j] is Delta^[j].
struct DivergenceEstimates {
  int tau_l = 1;
  std::vector<double> delta_m;
  double delta = 0.0;
  std::vector<std::vector<double>> delta_n;  // [j][n]
  std::vector<std::vector<double>> Delta_n;  // [j][n]
  std::vector<std::vector<double>> theta;    // [j][n]
  std::vector<double> Delta;                 // [j]
  std::size_t probe_count = 0;

  std::size_t round_of(long tau) const noexcept { return static_cast<std::size_t>(tau / tau_l); }

  double max_delta_m() const noexcept {
    return delta_m.empty() ? 0.0 : *std::max_element(delta_m.begin(), delta_m.end());
  }

  // Scales every local-divergence quantity (delta_m, delta, delta_n); used to
  // check that the inequality suite detects an understated delta.
  void scale_local(double factor) {
    for (double& d : delta_m) d *= factor;
    delta *= factor;
    for (auto& row : delta_n) {
      for (double& d : row) d *= factor;
    }
  }
};

inline DivergenceEstimates estimate_divergences(const ModelSpec& spec, std::span<const Shard> shards,
                                                std::span<const AssociationSnapshot> history, int tau_l,
                                                std::span<const ParamVector> probes) {
  if (probes.empty()) throw ParameterError("divergence estimation needs at least one probe");
  if (shards.empty()) throw ParameterError("no shards");
  if (tau_l < 1) throw ParameterError("tau_l must be positive");
  for (const auto& p : probes) {
    if (p.size() != spec.param_count()) throw DimensionMismatch("probe length does not match model");
  }
  const std::size_t M = shards.size();
  const auto sizes = shard_sizes(shards);
  const auto alpha = vehicle_weights(sizes);

  // grads[p][m] = grad f_m(probe p); global[p] = sum_m alpha_m grads[p][m]
  std::vector<std::vector<ParamVector>> grads(probes.size());
  std::vector<ParamVector> global;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    for (std::size_t m = 0; m < M; ++m) grads[p].push_back(gradient(spec, probes[p], shards[m].data));
    global.push_back(detail::vehicle_average(grads[p], alpha));
  }

  DivergenceEstimates est;
  est.tau_l = tau_l;
  est.probe_count = probes.size();
  est.delta_m.assign(M, 0.0);
  for (std::size_t p = 0; p < probes.size(); ++p) {
    for (std::size_t m = 0; m < M; ++m) {
      est.delta_m[m] = std::max(est.delta_m[m], distance(grads[p][m], global[p]));
    }
  }
  for (std::size_t m = 0; m < M; ++m) est.delta += alpha[m] * est.delta_m[m];

  const AssociationSnapshot* previous = nullptr;
  for (const auto& snap : history) {
    if (previous && previous->members == snap.members) {
      est.delta_n.push_back(est.delta_n.back());
      est.Delta_n.push_back(est.Delta_n.back());
      est.theta.push_back(est.theta.back());
      est.Delta.push_back(est.Delta.back());
      continue;
    }
    const std::size_t N = snap.members.size();
    std::vector<double> dn(N, 0.0);
    std::vector<double> Dn(N, 0.0);
    const auto theta = edge_weights(snap, sizes);
    for (std::size_t n = 0; n < N; ++n) {
      const auto& members = snap.members[n];
      if (members.empty()) continue;
      const auto a = edge_member_weights(members, sizes);
      for (std::size_t k = 0; k < members.size(); ++k) dn[n] += a[k] * est.delta_m[static_cast<std::size_t>(members[k])];
      for (std::size_t p = 0; p < probes.size(); ++p) {
        std::vector<const ParamVector*> items;
        for (int m : members) items.push_back(&grads[p][static_cast<std::size_t>(m)]);
        Dn[n] = std::max(Dn[n], distance(weighted_sum(items, a), global[p]));
      }
    }
    double D = 0.0;
    for (std::size_t n = 0; n < N; ++n) D += theta[n] * Dn[n];
    est.delta_n.push_back(std::move(dn));
    est.Delta_n.push_back(std::move(Dn));
    est.theta.push_back(theta);
    est.Delta.push_back(D);
    previous = &snap;
  }
  return est;
}

// x^n by repeated squaring.
inline double ipow(double x, long n) noexcept {
  double result = 1.0;
  while (n > 0) {
    if (n & 1) result *= x;
    x *= x;
    n >>= 1;
  }
  return result;
}

// r(tau, eta, delta) = delta / beta [(1 + eta beta)^tau - 1] - tau eta delta
inline double r_function(long tau, double eta, double delta, double beta) {
  if (tau < 0) throw ParameterError("r_function needs tau >= 0");
  if (!(beta > 0.0)) throw ParameterError("r_function needs beta > 0");
  return delta / beta * (ipow(1.0 + eta * beta, tau) - 1.0) - static_cast<double>(tau) * eta * delta;
}

struct BoundInputs {
  double beta = 0.0;
  double rho = 0.0;
  double eta = 0.0;
  int tau_l = 1;
  int tau_e = 1;
  int cloud_epochs = 1;
  double epsilon = 0.0;
  ParamVector w_star;
  double f_star = 0.0;

  long per_cloud() const noexcept { return static_cast<long>(tau_l) * tau_e; }
};

// Local-model bound for tau0 in (0, tau_l tau_e]:
//   delta_m / beta [(1 + eta beta)^tau0 - 1]
inline double local_model_bound(long tau0, double delta_m, const BoundInputs& in) {
  if (tau0 <= 0 || tau0 > in.per_cloud()) {
    throw ParameterError("tau0 must lie in (0, tau_l tau_e]");
  }
  return delta_m / in.beta * (ipow(1.0 + in.eta * in.beta, tau0) - 1.0);
}

// Edge-model bound for tau0 in (0, tau_l tau_e]:
//   delta_n / beta [(1 + eta beta)^tau0 - 1] - eta tau0 (delta_n - Delta_n)
inline double edge_model_bound(long tau0, double delta_n, double Delta_n, const BoundInputs& in) {
  return local_model_bound(tau0, delta_n, in) - in.eta * static_cast<double>(tau0) * (delta_n - Delta_n);
}

struct UkEntry {
  int k = 0;  // 1-based cloud epoch
  double uk = 0.0;
  double r_term = 0.0;
  double mobility_term = 0.0;  // subtracted from r_term
  double measured = std::numeric_limits<double>::quiet_NaN();
  bool satisfied = false;
};

// Cloud epoch k (1-based) covers tau in ((k-1) tau_l tau_e, k tau_l tau_e] and
// uses the edge rounds inside it:
//   U_k = r(tau_l tau_e) - eta tau_l [tau_e (tau_e - 1) delta / 2
//                                     - sum_{j=1}^{tau_e-1} j Delta^[(k-1) tau_e + j]]
inline UkEntry compute_uk(int k, const DivergenceEstimates& est, const BoundInputs& in) {
  if (k < 1) throw ParameterError("cloud epochs are 1-based");
  UkEntry e;
  e.k = k;
  e.r_term = r_function(in.per_cloud(), in.eta, est.delta, in.beta);
  double weighted = 0.0;
  for (int j = 1; j < in.tau_e; ++j) {
    const auto idx = static_cast<std::size_t>(k - 1) * static_cast<std::size_t>(in.tau_e) + static_cast<std::size_t>(j);
    if (idx >= est.Delta.size()) {
      throw ParameterError("Delta^[" + std::to_string(idx) + "] missing for cloud epoch " + std::to_string(k));
    }
    weighted += j * est.Delta[idx];
  }
  e.mobility_term = in.eta * in.tau_l * (0.5 * in.tau_e * (in.tau_e - 1) * est.delta - weighted);
  e.uk = e.r_term - e.mobility_term;
  return e;
}

inline std::vector<UkEntry> compute_uk_report(const DivergenceEstimates& est, const BoundInputs& in,
                                              const VirtualTrace* trace = nullptr) {
  std::vector<UkEntry> out;
  for (int k = 1; k <= in.cloud_epochs; ++k) {
    UkEntry e = compute_uk(k, est, in);
    const auto tau = static_cast<std::size_t>(k * in.per_cloud());
    if (trace && tau < trace->gap.size()) {
      e.measured = trace->gap[tau];
      e.satisfied = e.measured <= e.uk + 1e-9;
    }
    out.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convergence-gap bound

struct EpochConditions {
  int k = 0;
  bool rate_positive = false;       // eta phi - rho U_k / (tau_l tau_e eps^2) > 0
  bool vtilde_gap_above = false;    // F(v~^(k tau)) - F* >= eps
  bool cloud_loss_above = false;    // F(w^(k tau)) >= eps, as printed
  bool cloud_gap_above = false;     // F(w^(k tau)) - F* >= eps, centered variant
};

struct GapBoundReport {
  double phi = 0.0;
  double epsilon = 0.0;
  double denominator = 0.0;
  bool degenerate = false;   // v~ hit w* exactly, phi undefined
  bool step_ok = false;      // eta <= 1 / beta
  std::vector<EpochConditions> epochs;
  bool applicable = false;           // all printed conditions hold and denominator > 0
  bool applicable_centered = false;  // same with the centered fourth condition
  std::optional<double> bound;       // only when applicable (either variant)
  double measured_gap = 0.0;         // F(w^(T)) - F(w*)
  bool satisfied = false;            // measured_gap <= bound
};

// Largest epsilon meeting conditions (3) and (4); the centered flag switches
// (4) to F(w) - F*.
inline double max_feasible_epsilon(const VirtualTrace& trace, const BoundInputs& in, const ModelSpec& spec,
                                   const LabeledDataset& pooled, bool centered = false) {
  double eps = std::numeric_limits<double>::infinity();
  for (int k = 1; k <= in.cloud_epochs; ++k) {
    const auto tau = static_cast<std::size_t>(k * in.per_cloud());
    const double fv = loss(spec, trace.vtilde.at(tau), pooled) - in.f_star;
    const double fw = loss(spec, trace.u.at(tau), pooled) - (centered ? in.f_star : 0.0);
    eps = std::min({eps, fv, fw});
  }
  return eps;
}

// The cloud model at tau = k tau_l tau_e equals u^(tau) (all vehicles hold it).
inline GapBoundReport check_gap_bound(const VirtualTrace& trace, const BoundInputs& in,
                                        std::span<const UkEntry> uk, const ModelSpec& spec,
                                        const LabeledDataset& pooled) {
  if (!spec.convex()) throw UnsupportedModel("the gap bound needs a convex model family");
  const long per = in.per_cloud();
  const long T = per * in.cloud_epochs;
  if (trace.vtilde.size() < static_cast<std::size_t>(T + 1)) {
    throw ParameterError("virtual trace does not cover K cloud epochs");
  }
  if (uk.size() < static_cast<std::size_t>(in.cloud_epochs)) throw ParameterError("missing U_k entries");

  GapBoundReport rep;
  rep.epsilon = in.epsilon;
  rep.step_ok = in.eta <= 1.0 / in.beta;
  rep.phi = std::numeric_limits<double>::infinity();
  for (int k = 1; k <= in.cloud_epochs; ++k) {
    const double d = distance(trace.vtilde[static_cast<std::size_t>((k - 1) * per)], in.w_star);
    if (d == 0.0) {
      rep.degenerate = true;
      break;
    }
    rep.phi = std::min(rep.phi, (1.0 - in.beta * in.eta / 2.0) / (d * d));
  }
  rep.measured_gap = loss(spec, trace.u[static_cast<std::size_t>(T)], pooled) - in.f_star;
  if (rep.degenerate) {
    rep.phi = std::numeric_limits<double>::quiet_NaN();
    return rep;
  }

  double sum_uk = 0.0;
  bool all_printed = in.epsilon > 0.0 && rep.step_ok;
  bool all_centered = all_printed;
  for (int k = 1; k <= in.cloud_epochs; ++k) {
    const auto tau = static_cast<std::size_t>(k * per);
    const double uk_k = uk[static_cast<std::size_t>(k - 1)].uk;
    sum_uk += uk_k;
    EpochConditions c;
    c.k = k;
    c.rate_positive = in.epsilon > 0.0 &&
                      in.eta * rep.phi - in.rho * uk_k / (static_cast<double>(per) * in.epsilon * in.epsilon) > 0.0;
    const double fv = loss(spec, trace.vtilde[tau], pooled);
    const double fw = loss(spec, trace.u[tau], pooled);
    c.vtilde_gap_above = fv - in.f_star >= in.epsilon;
    c.cloud_loss_above = fw >= in.epsilon;
    c.cloud_gap_above = fw - in.f_star >= in.epsilon;
    all_printed = all_printed && c.rate_positive && c.vtilde_gap_above && c.cloud_loss_above;
    all_centered = all_centered && c.rate_positive && c.vtilde_gap_above && c.cloud_gap_above;
    rep.epochs.push_back(c);
  }
  rep.denominator = in.epsilon > 0.0
                        ? static_cast<double>(T) * in.eta * rep.phi - in.rho * sum_uk / (in.epsilon * in.epsilon)
                        : -std::numeric_limits<double>::infinity();
  rep.applicable = all_printed && rep.denominator > 0.0;
  rep.applicable_centered = all_centered && rep.denominator > 0.0;
  if (rep.applicable || rep.applicable_centered) {
    rep.bound = 1.0 / rep.denominator;
    rep.satisfied = rep.measured_gap <= *rep.bound;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Inequality suite over a recorded full-batch run

struct InequalityFamily {
  explicit InequalityFamily(std::string n = {}) : name(std::move(n)) {}

  std::string name;
  long checks = 0;
  double min_slack = std::numeric_limits<double>::infinity();  // bound - measured
  std::optional<std::string> first_violation;
};

struct BoundSuiteReport {
  InequalityFamily local{"local-model"};      // ||w_m - v~|| per vehicle
  InequalityFamily edge{"edge-model"};        // ||u_n - v~|| per edge
  InequalityFamily recursion{"recursion"};    // one-step recursion on ||u - v~||
  InequalityFamily cloud{"central-cloud"};    // ||u - v~|| <= U_k at cloud instants
  std::vector<UkEntry> uk;
  double tolerance = 1e-9;

  bool passed() const noexcept {
    return !local.first_violation && !edge.first_violation && !recursion.first_violation &&
           !cloud.first_violation;
  }

  std::optional<std::string> first_violation() const {
    for (const auto* f : {&local, &edge, &recursion, &cloud}) {
      if (f->first_violation) return f->name + ": " + *f->first_violation;
    }
    return std::nullopt;
  }
};

namespace detail {

inline void record(InequalityFamily& f, double bound, double measured, double tol, const std::string& where) {
  ++f.checks;
  const double slack = bound - measured;
  f.min_slack = std::min(f.min_slack, slack);
  if (!(slack >= -tol) && !f.first_violation) {
    f.first_violation = where + " measured " + format_double(measured) + " > bound " + format_double(bound);
  }
}

}  // namespace detail

inline BoundSuiteReport verify_bound_suite(const RunResult& run, std::span<const Shard> shards,
                                           const DivergenceEstimates& est, const BoundInputs& in,
                                           double tolerance = 1e-9) {
  const VirtualTrace& tr = run.trace;
  const long per = in.per_cloud();
  const long T = per * in.cloud_epochs;
  if (tr.vehicle_params.size() < static_cast<std::size_t>(T + 1) || tr.u.size() < static_cast<std::size_t>(T + 1)) {
    throw ParameterError("bound suite needs per-iteration vehicle states and virtual trace");
  }
  const auto sizes = shard_sizes(shards);
  const auto alpha = vehicle_weights(sizes);
  const std::size_t M = shards.size();

  auto edge_models = [&](long tau) {
    const auto& snap = run.associations.at(static_cast<std::size_t>(tau / in.tau_l));
    std::vector<std::optional<ParamVector>> out(snap.members.size());
    for (std::size_t n = 0; n < snap.members.size(); ++n) {
      const auto& members = snap.members[n];
      if (members.empty()) continue;
      out[n] = edge_aggregate(members, tr.vehicle_params[static_cast<std::size_t>(tau)], sizes, ParamVector{});
    }
    return out;
  };

  BoundSuiteReport rep;
  rep.tolerance = tolerance;
  for (long tau = 1; tau <= T; ++tau) {
    const long k0 = (tau - 1) / per;
    const long tau0 = tau - k0 * per;
    const auto t = static_cast<std::size_t>(tau);
    const std::string at = "k=" + std::to_string(k0 + 1) + " tau0=" + std::to_string(tau0);

    for (std::size_t m = 0; m < M; ++m) {
      detail::record(rep.local, local_model_bound(tau0, est.delta_m[m], in),
                     distance(tr.vehicle_params[t][m], tr.vtilde[t]), tolerance, at + " m=" + std::to_string(m));
    }

    const std::size_t j = est.round_of(tau);
    const auto un = edge_models(tau);
    for (std::size_t n = 0; n < un.size(); ++n) {
      if (!un[n]) continue;
      detail::record(rep.edge, edge_model_bound(tau0, est.delta_n.at(j)[n], est.Delta_n.at(j)[n], in),
                     distance(*un[n], tr.vtilde[t]), tolerance, at + " n=" + std::to_string(n));
    }

    const long prev = tau - 1;
    const auto p = static_cast<std::size_t>(prev);
    double rhs = 0.0;
    if (prev % per != 0) {
      rhs = distance(tr.u[p], tr.v[p]);
      if (prev % in.tau_l == 0) {
        const auto prev_edges = edge_models(prev);
        const auto& theta = est.theta.at(est.round_of(prev));
        for (std::size_t n = 0; n < prev_edges.size(); ++n) {
          if (prev_edges[n]) rhs += in.eta * in.beta * theta[n] * distance(*prev_edges[n], tr.v[p]);
        }
      } else {
        for (std::size_t m = 0; m < M; ++m) {
          rhs += in.eta * in.beta * alpha[m] * distance(tr.vehicle_params[p][m], tr.v[p]);
        }
      }
    }
    detail::record(rep.recursion, rhs, tr.gap[t], tolerance, at);
  }

  rep.uk = compute_uk_report(est, in, &tr);
  for (const auto& e : rep.uk) {
    detail::record(rep.cloud, e.uk, e.measured, tolerance, "k=" + std::to_string(e.k));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Delta^[j] trajectory summary

struct MixingReport {
  std::vector<double> Delta;  // j = 0..J
  double first_quarter_mean = 0.0;
  double last_quarter_mean = 0.0;
};

// Quarters are taken over the aggregation snapshots j = 1..J.
inline MixingReport mobility_mixing_report(const DivergenceEstimates& est) {
  MixingReport rep;
  rep.Delta = est.Delta;
  const std::size_t J = est.Delta.size() > 0 ? est.Delta.size() - 1 : 0;
  if (J == 0) {
    rep.first_quarter_mean = rep.last_quarter_mean = est.Delta.empty() ? 0.0 : est.Delta[0];
    return rep;
  }
  const std::size_t q = std::max<std::size_t>(1, J / 4);
  for (std::size_t j = 1; j <= q; ++j) rep.first_quarter_mean += est.Delta[j];
  for (std::size_t j = J - q + 1; j <= J; ++j) rep.last_quarter_mean += est.Delta[j];
  rep.first_quarter_mean /= static_cast<double>(q);
  rep.last_quarter_mean /= static_cast<double>(q);
  return rep;
}

inline void write_bound_report_csv(std::ostream& os, std::span<const UkEntry> uk) {
  os << "k,U_k,r_term,mobility_term,measured_gap_u_vtilde,satisfied\n";
  for (const auto& e : uk) {
    os << e.k << ',' << format_double(e.uk) << ',' << format_double(e.r_term) << ','
       << format_double(e.mobility_term) << ',' << format_double(e.measured) << ','
       << (e.satisfied ? "true" : "false") << '\n';
  }
}

}  // namespace mobhfl
