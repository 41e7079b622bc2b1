#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "support/fixtures.hpp"

using namespace mobhfl;
using mobhfl::testing::Fleet;
using mobhfl::testing::replay_vehicle_average;
using mobhfl::testing::synthetic_fleet;

namespace {

HflConfig small_cfg(int tau_l = 2, int tau_e = 3, int K = 4) {
  HflConfig c;
  c.tau_l = tau_l;
  c.tau_e = tau_e;
  c.cloud_epochs = K;
  c.batch_size = 5;
  c.eta = 0.2;
  return c;
}

RunResult run_fleet(const HflConfig& cfg, const Fleet& f) {
  return run(cfg, f.spec, f.shards, f.net, f.vehicles, initial_params(f.spec, cfg.seed), &f.test);
}

std::string csv_of(const MetricsLog& log) {
  std::ostringstream os;
  log.write_csv(os);
  return os.str();
}

}  // namespace

TEST(LocalUpdate, OneHotQuadraticStep) {
  // Sample x = 2, label 0: d/dW0 of 1/2 (2 W0 - 1)^2 at 0 is -2, so W0 -> 0.2.
  ModelSpec spec{ModelFamily::Quadratic, 1, 2, 0.0, 0};
  const Shard shard{0, LabeledDataset{1, 2, {2.0}, {0}}};
  const auto w = local_update(spec, shard, ParamVector(2), {}, 0.1);
  EXPECT_DOUBLE_EQ(w[0], 0.2);
  EXPECT_DOUBLE_EQ(w[1], 0.0);
  const auto g = gradient(spec, ParamVector(2), shard.data);
  EXPECT_DOUBLE_EQ(w[0], -0.1 * g[0]);
}

TEST(LocalUpdate, ZeroStepAndFixedPoint) {
  const auto f = synthetic_fleet(PartitionRegime::Iid, 1, 0.0);
  ModelSpec q = f.spec;
  q.family = ModelFamily::Quadratic;
  Rng rng(1);
  ParamVector w(q.param_count());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.normal();
  EXPECT_EQ(local_update(q, f.shards[0], w, {}, 0.0), w);
  const auto opt = solve_optimum(q, f.shards[0].data);
  const auto after = local_update(q, f.shards[0], opt.w, {}, 0.1);
  EXPECT_LE(distance(after, opt.w), 1e-15);
}

TEST(LocalUpdate, NonFiniteResultNamesVehicleAndIteration) {
  ModelSpec spec{ModelFamily::Quadratic, 1, 2, 0.0, 0};
  const Shard shard{7, LabeledDataset{1, 2, {2.0}, {0}}};
  ParamVector w(2);
  w[0] = 1e308;
  try {
    local_update(spec, shard, w, {}, 1e10, 42);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.vehicle(), 7);
    EXPECT_EQ(e.iteration(), 42);
  }
}

TEST(Aggregation, EdgeExamples) {
  const std::vector<double> sizes = {1, 3};
  const std::vector<ParamVector> params = {ParamVector(3, 0.0), ParamVector(3, 4.0)};
  const int one[] = {1};
  EXPECT_EQ(edge_aggregate(one, params, sizes, ParamVector(3)), params[1]);
  const int both[] = {0, 1};
  EXPECT_EQ(edge_aggregate(both, params, sizes, ParamVector(3)), ParamVector(3, 3.0));
  const ParamVector previous(3, -1.0);
  EXPECT_EQ(edge_aggregate(std::span<const int>{}, params, sizes, previous), previous);
}

TEST(Aggregation, EdgeMatchesDotProductOracle) {
  Rng rng(3);
  std::vector<ParamVector> params;
  std::vector<double> sizes;
  for (int m = 0; m < 8; ++m) {
    ParamVector w(10);
    for (std::size_t k = 0; k < 10; ++k) w[k] = rng.normal();
    params.push_back(w);
    sizes.push_back(1.0 + static_cast<double>(rng.below(50)));
  }
  const int members[] = {0, 1, 2, 3, 4, 5, 6, 7};
  const auto got = edge_aggregate(members, params, sizes, ParamVector(10));
  double total = 0.0;
  for (double s : sizes) total += s;
  for (std::size_t k = 0; k < 10; ++k) {
    double dotp = 0.0;
    for (std::size_t m = 0; m < 8; ++m) dotp += sizes[m] * params[m][k];
    EXPECT_NEAR(got[k], dotp / total, 1e-12);
  }
}

TEST(Aggregation, CloudExamples) {
  const std::vector<ParamVector> same(4, ParamVector(std::vector<double>{1.5, -2.0}));
  const std::vector<double> quarter(4, 0.25);
  EXPECT_EQ(cloud_aggregate(same, quarter), same[0]);
  const std::vector<ParamVector> edges = {ParamVector(1, 1.0), ParamVector(1, 2.0), ParamVector(1, 3.0),
                                          ParamVector(1, 6.0)};
  EXPECT_DOUBLE_EQ(cloud_aggregate(edges, quarter)[0], 3.0);
  const std::vector<double> bad = {0.5, 0.5, 0.5, 0.0};
  EXPECT_THROW(cloud_aggregate(edges, bad), InvariantError);
}

TEST(Aggregation, UnbalancedMembershipMatchesVehicleOracle) {
  // Membership 10/6/9/7 with random shard sizes and params.
  Rng rng(4);
  const int M = 32;
  std::vector<ParamVector> params;
  std::vector<double> sizes;
  for (int m = 0; m < M; ++m) {
    ParamVector w(6);
    for (std::size_t k = 0; k < 6; ++k) w[k] = rng.normal();
    params.push_back(w);
    sizes.push_back(5.0 + static_cast<double>(rng.below(20)));
  }
  AssociationSnapshot snap;
  snap.members.resize(4);
  const int counts[] = {10, 6, 9, 7};
  int m = 0;
  for (int n = 0; n < 4; ++n) {
    for (int k = 0; k < counts[n]; ++k) {
      snap.members[static_cast<std::size_t>(n)].push_back(m++);
      snap.edge_of_vehicle.push_back(n);
    }
  }
  std::vector<ParamVector> edge_params;
  for (int n = 0; n < 4; ++n) {
    edge_params.push_back(edge_aggregate(snap.members[static_cast<std::size_t>(n)], params, sizes, ParamVector(6)));
  }
  const auto theta = edge_weights(snap, sizes);
  const auto cloud = cloud_aggregate(edge_params, theta);
  const auto alpha = vehicle_weights(sizes);
  for (std::size_t k = 0; k < 6; ++k) {
    double direct = 0.0;
    for (std::size_t v = 0; v < static_cast<std::size_t>(M); ++v) direct += alpha[v] * params[v][k];
    EXPECT_NEAR(cloud[k], direct, 1e-12);
  }
}

TEST(Aggregation, WeightsSumToOne) {
  const std::vector<double> sizes = {3, 1, 4, 1, 5, 9, 2, 6};
  double s = 0.0;
  for (double a : vehicle_weights(sizes)) s += a;
  EXPECT_NEAR(s, 1.0, 1e-12);
  const int members[] = {1, 4, 6};
  s = 0.0;
  for (double a : edge_member_weights(members, sizes)) s += a;
  EXPECT_NEAR(s, 1.0, 1e-12);
  AssociationSnapshot snap;
  snap.members = {{0, 1}, {}, {2, 3, 4}, {5, 6, 7}};
  const auto theta = edge_weights(snap, sizes);
  EXPECT_EQ(theta[1], 0.0);
  EXPECT_NEAR(theta[0] + theta[1] + theta[2] + theta[3], 1.0, 1e-12);
}

TEST(BatchSampler, DeterministicInBoundsAndWithoutReplacementPerPass) {
  const BatchSampler a(5, 3, 17, 4);
  const BatchSampler b(5, 3, 17, 4);
  std::vector<std::size_t> stream;
  for (long tau = 1; tau <= 17; ++tau) {
    const auto x = a.batch(tau);
    EXPECT_EQ(x, b.batch(tau));
    for (auto i : x) EXPECT_LT(i, 17u);
    stream.insert(stream.end(), x.begin(), x.end());
  }
  // 17 batches of 4 = 4 full passes over 17 samples.
  for (int pass = 0; pass < 4; ++pass) {
    std::set<std::size_t> seen(stream.begin() + pass * 17, stream.begin() + (pass + 1) * 17);
    EXPECT_EQ(seen.size(), 17u);
  }
  EXPECT_NE(BatchSampler(5, 4, 17, 4).batch(1), a.batch(1));
  EXPECT_EQ(a.batch(9), BatchSampler(5, 3, 17, 4).batch(9));
}

TEST(Run, SingleVehicleSingleEdgeIsPlainSgd) {
  const auto data = generate_synthetic(3, 4, 30, 2.0, 2);
  const std::vector<Shard> shards = {{0, data}};
  ModelSpec spec{ModelFamily::MultinomialLogistic, 4, 3, 0.0, 0};
  RoadNetwork net;
  net.edge_count = 1;
  const std::vector<int> edge0 = {0};
  auto cfg = small_cfg(5, 4, 10);
  cfg.record_states = true;
  const auto res = run(cfg, spec, shards, net, init_positions_by_edge(net, edge0, 30.0, 1),
                       initial_params(spec, 1));
  const BatchSampler sampler(cfg.seed, 0, data.size(), static_cast<std::size_t>(cfg.batch_size));
  ParamVector w = initial_params(spec, 1);
  for (long tau = 1; tau <= cfg.total_iterations(); ++tau) {
    axpy(-cfg.eta, gradient(spec, w, data, sampler.batch(tau)), w);
    ASSERT_EQ(res.trace.vehicle_params[static_cast<std::size_t>(tau)][0], w) << "tau " << tau;
  }
  EXPECT_EQ(res.final_state.cloud_params, w);
}

TEST(Run, IdenticalShardsStepwiseSyncGivesZeroGap) {
  auto f = synthetic_fleet(PartitionRegime::Iid, 1, 30.0);
  for (auto& s : f.shards) s.data = f.shards[0].data;
  auto cfg = small_cfg(1, 1, 20);
  cfg.full_batch = true;
  cfg.record_virtual = true;
  const auto res = run_fleet(cfg, f);
  for (double g : res.trace.gap) EXPECT_LE(g, 1e-12);
}

TEST(Run, ScheduleConsensusAndVirtualSync) {
  const auto f = synthetic_fleet(PartitionRegime::EdgeNonIid, 1, 30.0);
  auto cfg = small_cfg(2, 3, 4);
  cfg.record_virtual = true;
  cfg.record_states = true;
  const auto res = run_fleet(cfg, f);
  const long per_cloud = cfg.iterations_per_cloud();
  ASSERT_EQ(res.trace.u.size(), static_cast<std::size_t>(cfg.total_iterations() + 1));
  ASSERT_EQ(res.associations.size(), static_cast<std::size_t>(cfg.total_iterations() / cfg.tau_l + 1));
  for (long tau = 1; tau <= cfg.total_iterations(); ++tau) {
    const auto& ws = res.trace.vehicle_params[static_cast<std::size_t>(tau)];
    if (tau % per_cloud == 0) {
      for (const auto& w : ws) ASSERT_EQ(w, ws[0]);
      ASSERT_EQ(res.trace.v[static_cast<std::size_t>(tau)], res.trace.u[static_cast<std::size_t>(tau)]);
    } else if (tau % cfg.tau_l == 0) {
      // Members of one edge hold identical models, using the snapshot taken at tau.
      const auto& snap = res.associations[static_cast<std::size_t>(tau / cfg.tau_l)];
      for (const auto& members : snap.members) {
        for (int m : members) ASSERT_EQ(ws[static_cast<std::size_t>(m)], ws[static_cast<std::size_t>(members[0])]);
      }
    }
    // v~ is one full-batch step from v at tau - 1.
    ParamVector vt = res.trace.v[static_cast<std::size_t>(tau - 1)];
    axpy(-cfg.eta, gradient(f.spec, vt, concatenate(f.shards)), vt);
    ASSERT_EQ(res.trace.vtilde[static_cast<std::size_t>(tau)], vt);
  }
  // Mobility actually changed membership during the run.
  std::set<std::vector<int>> distinct;
  for (const auto& s : res.associations) distinct.insert(s.edge_of_vehicle);
  EXPECT_GT(distinct.size(), 1u);
}

TEST(Run, CloudModelEqualsDirectVehicleAverage) {
  const auto f = synthetic_fleet(PartitionRegime::EdgeNonIid, 1, 30.0);
  auto cfg = small_cfg(3, 4, 5);
  cfg.record_states = true;
  const auto res = run_fleet(cfg, f);
  for (long k = 1; k <= cfg.cloud_epochs; ++k) {
    const long tau = k * cfg.iterations_per_cloud();
    const auto oracle = replay_vehicle_average(cfg, f, res, tau);
    const auto& cloud = res.trace.vehicle_params[static_cast<std::size_t>(tau)][0];
    for (std::size_t i = 0; i < oracle.size(); ++i) ASSERT_NEAR(cloud[i], oracle[i], 1e-12);
  }
}

TEST(Run, StaticFleetUsesInitialSnapshotThroughout) {
  const auto f = synthetic_fleet(PartitionRegime::EdgeNonIid, 1, 0.0);
  const auto res = run_fleet(small_cfg(), f);
  for (const auto& s : res.associations) EXPECT_EQ(s.edge_of_vehicle, f.initial_edge);
}

TEST(Run, MetricsRowsAndCsvShape) {
  const auto f = synthetic_fleet(PartitionRegime::Iid, 1, 30.0);
  auto cfg = small_cfg(2, 3, 4);
  const auto res = run_fleet(cfg, f);
  ASSERT_EQ(res.metrics.rows.size(), 12u);
  int cloud_rows = 0;
  for (const auto& r : res.metrics.rows) {
    cloud_rows += r.cloud;
    EXPECT_EQ(r.cloud, r.edge_round % 3 == 0);
    EXPECT_EQ(r.cloud_epoch, static_cast<int>((r.edge_round + 2) / 3));
    EXPECT_TRUE(std::isnan(r.u_vtilde_gap));
  }
  EXPECT_EQ(cloud_rows, 4);
  const auto csv = csv_of(res.metrics);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "cloud_epoch,edge_round,iteration,train_loss,test_accuracy,u_vtilde_gap,edge_membership_counts");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 13);

  cfg.eval_every = 100;
  EXPECT_EQ(run_fleet(cfg, f).metrics.rows.size(), 4u);
}

TEST(Run, RoundsToAndMaxAccuracyUseCloudRows) {
  MetricsLog log;
  log.rows.push_back({1, 1, 6, false, 0.0, 0.9, 0.0, {}});
  log.rows.push_back({1, 2, 12, true, 0.0, 0.5, 0.0, {}});
  log.rows.push_back({2, 4, 24, true, 0.0, 0.7, 0.0, {}});
  EXPECT_DOUBLE_EQ(log.max_cloud_accuracy(), 0.7);
  EXPECT_EQ(log.rounds_to(0.6), 2);
  EXPECT_EQ(log.rounds_to(0.8), -1);
}

TEST(Run, StopPredicateEndsAtCloudRow) {
  const auto f = synthetic_fleet(PartitionRegime::Iid, 1, 30.0);
  const auto cfg = small_cfg(2, 3, 10);
  const auto res = run(cfg, f.spec, f.shards, f.net, f.vehicles, initial_params(f.spec, 1), &f.test,
                       [](const MetricsRow& r) { return r.cloud_epoch == 2; });
  EXPECT_TRUE(res.stopped_early);
  EXPECT_EQ(res.metrics.rows.back().cloud_epoch, 2);
  EXPECT_TRUE(res.metrics.rows.back().cloud);
}

TEST(Run, DeterministicAndThreadCountInvariant) {
  const auto f = synthetic_fleet(PartitionRegime::EdgeNonIid, 1, 30.0);
  auto cfg = small_cfg(3, 5, 3);
  cfg.record_virtual = true;
  const auto a = run_fleet(cfg, f);
  const auto b = run_fleet(cfg, f);
  EXPECT_EQ(csv_of(a.metrics), csv_of(b.metrics));
  cfg.threads = 4;
  const auto c = run_fleet(cfg, f);
  EXPECT_EQ(csv_of(a.metrics), csv_of(c.metrics));
  const auto& wa = a.final_state.cloud_params;
  const auto& wc = c.final_state.cloud_params;
  for (std::size_t i = 0; i < wa.size(); ++i) EXPECT_NEAR(wa[i], wc[i], 1e-9);
}

TEST(Run, EmptyEdgesKeepModelAndGetZeroWeight) {
  auto f = synthetic_fleet(PartitionRegime::Iid, 1, 0.0);
  std::vector<double> arcs(f.shards.size(), 10.0);
  std::vector<int> dirs(f.shards.size(), 1);
  f.vehicles = place_at(f.net, arcs, dirs, 0.0);
  auto cfg = small_cfg(2, 3, 3);
  cfg.record_states = true;
  const auto res = run_fleet(cfg, f);
  for (const auto& r : res.metrics.rows) EXPECT_EQ(r.membership_counts, (std::vector<std::size_t>{32, 0, 0, 0}));
  for (const auto& e : res.final_state.edge_params) EXPECT_EQ(e, res.final_state.cloud_params);
  const auto oracle = replay_vehicle_average(cfg, f, res, cfg.total_iterations());
  for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(res.final_state.cloud_params[i], oracle[i], 1e-12);
}

TEST(Run, DivergenceAbortsWithIteration) {
  // Quadratic iterates grow geometrically once eta exceeds 2 / beta.
  auto f = synthetic_fleet(PartitionRegime::Iid, 1, 30.0);
  f.spec.family = ModelFamily::Quadratic;
  auto cfg = small_cfg(2, 3, 100);
  cfg.eta = 100.0;
  try {
    run_fleet(cfg, f);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.iteration(), 1);
  }
}

TEST(Run, RejectsMismatchedInputs) {
  const auto f = synthetic_fleet(PartitionRegime::Iid, 1, 30.0);
  auto vehicles = f.vehicles;
  vehicles.pop_back();
  EXPECT_THROW(run(small_cfg(), f.spec, f.shards, f.net, vehicles, initial_params(f.spec, 1)), ConfigError);
  EXPECT_THROW(run(small_cfg(), f.spec, f.shards, f.net, f.vehicles, ParamVector(3)), DimensionMismatch);
  auto bad = small_cfg();
  bad.tau_l = 0;
  EXPECT_THROW(run(bad, f.spec, f.shards, f.net, f.vehicles, initial_params(f.spec, 1)), ConfigError);
}

TEST(Checkpoint, RoundTripAndRejectsGarbage) {
  const auto f = synthetic_fleet(PartitionRegime::Iid, 1, 30.0);
  const auto res = run_fleet(small_cfg(), f);
  std::stringstream ss;
  write_checkpoint(ss, res.final_state, fnv1a64("cfg"));
  const auto ck = read_checkpoint(ss);
  EXPECT_EQ(ck.state, res.final_state);
  EXPECT_EQ(ck.config_hash, fnv1a64("cfg"));
  std::stringstream junk("NOTACKPT and some more bytes");
  EXPECT_THROW(read_checkpoint(junk), IoError);
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}
