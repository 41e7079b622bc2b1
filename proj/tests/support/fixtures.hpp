#pragma once

#include <vector>

#include "mobhfl/mobhfl.hpp"

namespace mobhfl::testing {

struct Fleet {
  ModelSpec spec;
  std::vector<Shard> shards;
  std::vector<int> initial_edge;
  RoadNetwork net;
  std::vector<VehicleState> vehicles;
  LabeledDataset test;
};

// Synthetic mixture partitioned over M vehicles on the 4-edge ring, vehicles
// placed on their initial edge's side.
inline Fleet synthetic_fleet(PartitionRegime regime, int l, double speed, std::uint64_t seed = 1,
                             int classes = 4, std::size_t dim = 6, std::size_t per_class = 80,
                             int M = 32, int N = 4, ModelFamily family = ModelFamily::MultinomialLogistic) {
  Fleet f;
  const auto data = generate_synthetic(classes, dim, per_class, 3.0, seed);
  auto split = stratified_split(data, 0.2, seed);
  PartitionSpec ps;
  ps.regime = regime;
  ps.classes_per_unit = l;
  ps.vehicle_count = M;
  ps.edge_count = N;
  ps.seed = seed;
  auto part = partition(split.train, ps);
  f.shards = std::move(part.shards);
  f.initial_edge = std::move(part.initial_edge);
  f.test = std::move(split.test);
  f.spec.family = family;
  f.spec.dim = dim;
  f.spec.class_count = classes;
  f.spec.hidden_width = family == ModelFamily::Mlp1 ? 8 : 0;
  f.net.edge_count = N;
  f.net.seed = seed;
  f.vehicles = init_positions_by_edge(f.net, f.initial_edge, speed, seed);
  return f;
}

inline Fleet shared_input_fleet(double speed, double heterogeneity = 1.0, std::uint64_t seed = 1) {
  Fleet f;
  SharedInputSpec s;
  s.heterogeneity = heterogeneity;
  s.seed = seed;
  auto part = make_shared_input(s);
  f.shards = std::move(part.shards);
  f.initial_edge = std::move(part.initial_edge);
  f.spec.family = ModelFamily::Quadratic;
  f.spec.dim = s.dim;
  f.spec.class_count = s.class_count;
  f.net.seed = seed;
  f.vehicles = init_positions_by_edge(f.net, f.initial_edge, speed, seed);
  return f;
}

// Vehicle-level oracle for a cloud instant tau: replays the last local step
// from the recorded states at tau - 1 and averages with alpha_m = |D_m|/|D|,
// without going through edges. Requires record_states.
inline ParamVector replay_vehicle_average(const HflConfig& cfg, const Fleet& f, const RunResult& r, long tau) {
  const auto& prev = r.trace.vehicle_params.at(static_cast<std::size_t>(tau - 1));
  double total = 0.0;
  for (const auto& s : f.shards) total += static_cast<double>(s.size());
  ParamVector out(prev.front().size());
  for (std::size_t m = 0; m < f.shards.size(); ++m) {
    std::vector<std::size_t> batch;
    if (!cfg.full_batch) {
      batch = BatchSampler(cfg.seed, static_cast<int>(m), f.shards[m].size(),
                           static_cast<std::size_t>(cfg.batch_size))
                  .batch(tau);
    }
    const ParamVector w = local_update(f.spec, f.shards[m], prev[m], batch, cfg.eta, tau);
    const double alpha = static_cast<double>(f.shards[m].size()) / total;
    for (std::size_t k = 0; k < w.size(); ++k) out[k] += alpha * w[k];
  }
  return out;
}

}  // namespace mobhfl::testing
