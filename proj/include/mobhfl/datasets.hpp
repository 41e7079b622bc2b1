#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mobhfl/errors.hpp"
#include "mobhfl/rng.hpp"

namespace mobhfl {

// Row-major n x dim feature matrix with integer labels in [0, class_count).
struct LabeledDataset {
  std::size_t dim = 0;
  int class_count = 0;
  std::vector<double> features;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  std::span<const double> row(std::size_t i) const noexcept {
    return {features.data() + i * dim, dim};
  }

  void push_back(std::span<const double> x, int label) {
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(label);
  }

  void validate() const {
    if (dim == 0) throw ParameterError("dataset dimension must be positive");
    if (labels.empty()) throw ParameterError("dataset is empty");
    if (features.size() != labels.size() * dim) {
      throw DimensionMismatch("feature buffer does not match n x dim");
    }
    for (int y : labels) {
      if (y < 0 || y >= class_count) {
        throw ParameterError("label " + std::to_string(y) + " outside [0, " +
                             std::to_string(class_count) + ")");
      }
    }
  }

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

inline LabeledDataset subset(const LabeledDataset& data,
                             std::span<const std::size_t> indices) {
  LabeledDataset out{data.dim, data.class_count, {}, {}};
  out.features.reserve(indices.size() * data.dim);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(data.row(i), data.labels[i]);
  return out;
}

inline std::vector<std::size_t> label_histogram(const LabeledDataset& data) {
  std::vector<std::size_t> h(static_cast<std::size_t>(std::max(data.class_count, 0)), 0);
  for (int y : data.labels) ++h[static_cast<std::size_t>(y)];
  return h;
}

inline std::size_t distinct_labels(const LabeledDataset& data) {
  const auto h = label_histogram(data);
  return static_cast<std::size_t>(std::count_if(h.begin(), h.end(), [](auto c) { return c > 0; }));
}

// One vehicle's local dataset D_m.
struct Shard {
  int owner = 0;
  LabeledDataset data;

  std::size_t size() const noexcept { return data.size(); }
};

inline LabeledDataset concatenate(std::span<const Shard> shards) {
  if (shards.empty()) throw ParameterError("no shards to concatenate");
  LabeledDataset out{shards.front().data.dim, shards.front().data.class_count, {}, {}};
  for (const auto& s : shards) {
    if (s.data.dim != out.dim) throw DimensionMismatch("shards disagree on dimension");
    out.features.insert(out.features.end(), s.data.features.begin(), s.data.features.end());
    out.labels.insert(out.labels.end(), s.data.labels.begin(), s.data.labels.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian mixture

// Cluster centres: independent uniformly random directions (one draw per
// class), all scaled to a common norm chosen so the closest pair sits exactly
// `separation` apart. Equal norms keep a bias-free linear classifier
// Bayes-optimal for the mixture.
inline std::vector<std::vector<double>> mixture_means(int class_count, std::size_t dim,
                                                      double separation, std::uint64_t seed) {
  const auto C = static_cast<std::size_t>(class_count);
  Rng rng(seed, {0x6d65616e73});
  std::vector<std::vector<double>> units(C, std::vector<double>(dim));
  for (auto& u : units) {
    for (;;) {
      double s = 0.0;
      for (double& x : u) {
        x = rng.normal();
        s += x * x;
      }
      if (s > 1e-12) {
        s = std::sqrt(s);
        for (double& x : u) x /= s;
        break;
      }
    }
  }

  double gap = INFINITY;
  for (std::size_t a = 0; a < C; ++a) {
    for (std::size_t b = a + 1; b < C; ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double d = units[a][j] - units[b][j];
        s += d * d;
      }
      gap = std::min(gap, std::sqrt(s));
    }
  }
  if (!(gap > 1e-9)) throw ParameterError("cluster directions coincide; try another seed");
  const double radius = C > 1 ? separation / gap * (1.0 + 1e-12) : separation;
  for (auto& u : units) {
    for (double& x : u) x *= radius;
  }
  return units;
}

// C isotropic unit-variance Gaussian clusters, s samples each, class-major order.
inline LabeledDataset generate_synthetic(int class_count, std::size_t dim,
                                         std::size_t samples_per_class, double separation,
                                         std::uint64_t seed) {
  if (class_count < 2 || dim < 2 || samples_per_class < 1 || !(separation > 0.0)) {
    throw ParameterError("generate_synthetic requires C >= 2, d >= 2, s >= 1, separation > 0");
  }
  const auto means = mixture_means(class_count, dim, separation, seed);
  LabeledDataset out{dim, class_count, {}, {}};
  out.features.reserve(static_cast<std::size_t>(class_count) * samples_per_class * dim);
  std::vector<double> x(dim);
  for (int c = 0; c < class_count; ++c) {
    Rng rng(seed, {0x73616d70, static_cast<std::uint64_t>(c)});
    for (std::size_t i = 0; i < samples_per_class; ++i) {
      for (std::size_t j = 0; j < dim; ++j) x[j] = means[static_cast<std::size_t>(c)][j] + rng.normal();
      out.push_back(x, c);
    }
  }
  return out;
}

struct TrainTestSplit {
  LabeledDataset train;
  LabeledDataset test;
};

// Per-class seeded shuffle; floor(test_fraction * n_c) samples of each class
// go to the test side. Both sides keep ascending original order.
inline TrainTestSplit stratified_split(const LabeledDataset& data, double test_fraction,
                                       std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw ParameterError("test fraction must lie in [0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.class_count));
  for (std::size_t i = 0; i < data.size(); ++i) {
    by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
  }
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    Rng rng(seed, {0x73706c6974, c});
    rng.shuffle(std::span<std::size_t>(idx));
    const auto n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(idx.size())));
    test_idx.insert(test_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {subset(data, train_idx), subset(data, test_idx)};
}

// ---------------------------------------------------------------------------
// Partitioning

enum class PartitionRegime { Iid, LocalNonIid, EdgeNonIid };

inline std::string to_string(PartitionRegime r) {
  switch (r) {
    case PartitionRegime::Iid: return "iid";
    case PartitionRegime::LocalNonIid: return "local_noniid";
    case PartitionRegime::EdgeNonIid: return "edge_noniid";
  }
  return "?";
}

inline PartitionRegime parse_regime(std::string_view s) {
  if (s == "iid") return PartitionRegime::Iid;
  if (s == "local_noniid") return PartitionRegime::LocalNonIid;
  if (s == "edge_noniid") return PartitionRegime::EdgeNonIid;
  throw ParseError("unknown partition regime '" + std::string(s) + "'");
}

struct PartitionSpec {
  PartitionRegime regime = PartitionRegime::Iid;
  int classes_per_unit = 1;  // l; ignored for IID
  int vehicle_count = 32;    // M
  int edge_count = 4;        // N
  std::uint64_t seed = 1;
  // When l * units < C, drop the classes that no unit can own instead of
  // failing. The dropped labels are reported in Partition::dropped_classes.
  bool allow_partial_class_coverage = false;
};

struct Partition {
  std::vector<Shard> shards;
  std::vector<int> initial_edge;     // vehicle id -> edge id
  std::vector<int> dropped_classes;  // only with partial coverage
  std::size_t truncated = 0;         // samples removed to equalize shard sizes
};

namespace detail {

// Class owned by block b when `blocks` equal blocks tile C balanced classes.
inline int block_class(std::size_t b, std::size_t blocks, int class_count) {
  return static_cast<int>(b * static_cast<std::size_t>(class_count) / blocks);
}

// Drops samples from the currently largest class (highest label on ties,
// latest sample first) until the count is a multiple of `unit`.
inline std::vector<std::size_t> truncate_to_multiple(const LabeledDataset& data,
                                                     std::vector<std::size_t> sorted,
                                                     std::size_t unit) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(data.class_count), 0);
  for (std::size_t i : sorted) ++counts[static_cast<std::size_t>(data.labels[i])];
  std::size_t excess = sorted.size() % unit;
  std::vector<std::size_t> remove(counts.size(), 0);
  while (excess-- > 0) {
    std::size_t best = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
      if (counts[c] - remove[c] >= counts[best] - remove[best]) best = c;
    }
    ++remove[best];
  }
  std::vector<std::size_t> kept;
  kept.reserve(sorted.size());
  std::vector<std::size_t> seen(counts.size(), 0);
  for (std::size_t i : sorted) {
    const auto c = static_cast<std::size_t>(data.labels[i]);
    if (seen[c]++ < counts[c] - remove[c]) kept.push_back(i);
  }
  return kept;
}

}  // namespace detail

inline Partition partition(const LabeledDataset& data, const PartitionSpec& spec) {
  data.validate();
  const int M = spec.vehicle_count;
  const int N = spec.edge_count;
  const int C = data.class_count;
  const int l = spec.classes_per_unit;
  if (M < 1 || N < 1) throw ParameterError("vehicle and edge counts must be positive");
  if (spec.regime != PartitionRegime::Iid && (l < 1 || l > C)) {
    throw ParameterError("classes_per_unit must lie in [1, C]");
  }
  if (spec.regime == PartitionRegime::EdgeNonIid && M % N != 0) {
    throw InfeasiblePartition("edge non-i.i.d. requires M divisible by N");
  }

  Partition out;
  int kept_classes = C;
  if (spec.regime != PartitionRegime::Iid) {
    const int units = spec.regime == PartitionRegime::EdgeNonIid ? N : M;
    if (l * units < C) {
      if (!spec.allow_partial_class_coverage) {
        throw InfeasiblePartition("l * " + std::string(units == N ? "N" : "M") + " = " +
                                  std::to_string(l * units) + " cannot cover " +
                                  std::to_string(C) + " classes");
      }
      kept_classes = l * units;
      for (int c = kept_classes; c < C; ++c) out.dropped_classes.push_back(c);
    }
  }

  const auto uM = static_cast<std::size_t>(M);
  const auto uN = static_cast<std::size_t>(N);
  const auto ul = static_cast<std::size_t>(l);
  std::vector<std::vector<std::size_t>> members(uM);

  if (spec.regime == PartitionRegime::Iid) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return data.labels[a] < data.labels[b]; });
    const std::size_t before = order.size();
    order = detail::truncate_to_multiple(data, std::move(order), uM);
    out.truncated = before - order.size();
    if (order.empty()) throw InfeasiblePartition("too few samples for the requested split");
    Rng rng(spec.seed, {0x696964});
    rng.shuffle(std::span<std::size_t>(order));
    const std::size_t per = order.size() / uM;
    for (std::size_t m = 0; m < uM; ++m) {
      members[m].assign(order.begin() + static_cast<std::ptrdiff_t>(m * per),
                        order.begin() + static_cast<std::ptrdiff_t>((m + 1) * per));
    }
  } else {
    // Class-pure blocks: block b belongs to unit b mod units and holds
    // per_block samples of class block_class(b). Class c's samples fill its
    // blocks in index order; whatever is left over is dropped.
    const std::size_t units = spec.regime == PartitionRegime::EdgeNonIid ? uN : uM;
    const std::size_t blocks = units * ul;
    const auto kept = static_cast<std::size_t>(kept_classes);
    std::vector<std::vector<std::size_t>> by_class(kept);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto c = static_cast<std::size_t>(data.labels[i]);
      if (c < kept) by_class[c].push_back(i);
    }
    std::vector<std::size_t> owners(kept, 0);
    for (std::size_t b = 0; b < blocks; ++b) ++owners[static_cast<std::size_t>(detail::block_class(b, blocks, kept_classes))];
    std::size_t per_block = SIZE_MAX;
    for (std::size_t c = 0; c < kept; ++c) per_block = std::min(per_block, by_class[c].size() / owners[c]);
    const std::size_t per_edge_vehicles = uM / uN;
    if (spec.regime == PartitionRegime::EdgeNonIid) {
      // An edge's l blocks must split evenly over its vehicles.
      const std::size_t q = per_edge_vehicles / std::gcd(per_edge_vehicles, ul);
      per_block -= per_block % q;
    }
    if (per_block == 0) throw InfeasiblePartition("too few samples for the requested split");

    std::vector<std::vector<std::size_t>> unit_members(units);
    std::vector<std::size_t> used(kept, 0);
    for (std::size_t b = 0; b < blocks; ++b) {
      const auto c = static_cast<std::size_t>(detail::block_class(b, blocks, kept_classes));
      const auto first = by_class[c].begin() + static_cast<std::ptrdiff_t>(used[c]);
      unit_members[b % units].insert(unit_members[b % units].end(), first,
                                     first + static_cast<std::ptrdiff_t>(per_block));
      used[c] += per_block;
    }
    std::size_t kept_total = 0;
    for (const auto& u : unit_members) kept_total += u.size();
    for (const auto& v : by_class) out.truncated += v.size();
    out.truncated -= kept_total;

    if (spec.regime == PartitionRegime::LocalNonIid) {
      for (std::size_t m = 0; m < uM; ++m) members[m] = std::move(unit_members[m]);
    } else {
      for (std::size_t n = 0; n < uN; ++n) {
        auto& edge = unit_members[n];
        Rng rng(spec.seed, {0x65646765, n});
        rng.shuffle(std::span<std::size_t>(edge));
        const std::size_t per = edge.size() / per_edge_vehicles;
        for (std::size_t k = 0; k < per_edge_vehicles; ++k) {
          members[n * per_edge_vehicles + k].assign(
              edge.begin() + static_cast<std::ptrdiff_t>(k * per),
              edge.begin() + static_cast<std::ptrdiff_t>((k + 1) * per));
        }
      }
    }
  }

  out.shards.reserve(uM);
  out.initial_edge.resize(uM);
  for (std::size_t m = 0; m < uM; ++m) {
    out.shards.push_back({static_cast<int>(m), subset(data, members[m])});
    out.initial_edge[m] = static_cast<int>(m * uN / uM);
  }
  return out;
}

// Vehicles share one feature matrix X and differ only in labels, so
// grad f_m - grad F is constant in w for the quadratic loss. Row i carries the
// common label (i mod C) unless i < heterogeneity * rows, in which case it
// carries one of its unit's classes (unit = edge or vehicle by regime, class
// sets assigned like the sorted-block partition above).
struct SharedInputSpec {
  int class_count = 4;
  std::size_t dim = 4;
  std::size_t rows = 40;
  int vehicle_count = 32;
  int edge_count = 4;
  PartitionRegime regime = PartitionRegime::EdgeNonIid;
  int classes_per_unit = 1;
  double heterogeneity = 1.0;
  double feature_offset = 1.0;
  double feature_scale = 1.0;
  std::uint64_t seed = 1;
};

inline Partition make_shared_input(const SharedInputSpec& spec) {
  const int M = spec.vehicle_count;
  const int N = spec.edge_count;
  const int C = spec.class_count;
  const int l = spec.classes_per_unit;
  if (M < 1 || N < 1 || C < 2 || spec.dim < 1 || spec.rows < 1) {
    throw ParameterError("shared-input instance needs M, N >= 1, C >= 2, dim, rows >= 1");
  }
  if (!(spec.heterogeneity >= 0.0 && spec.heterogeneity <= 1.0)) {
    throw ParameterError("heterogeneity must lie in [0, 1]");
  }
  if (spec.regime == PartitionRegime::EdgeNonIid && M % N != 0) {
    throw InfeasiblePartition("edge non-i.i.d. requires M divisible by N");
  }
  const int units = spec.regime == PartitionRegime::EdgeNonIid ? N : M;
  if (spec.regime != PartitionRegime::Iid && (l < 1 || l > C || l * units < C)) {
    throw InfeasiblePartition("shared-input class assignment cannot cover all classes");
  }

  Rng rng(spec.seed, {0x736861726564});
  std::vector<double> X(spec.rows * spec.dim);
  for (double& x : X) x = spec.feature_scale * (spec.feature_offset + rng.normal());
  const auto specific_rows =
      static_cast<std::size_t>(std::llround(spec.heterogeneity * static_cast<double>(spec.rows)));

  const auto blocks = static_cast<std::size_t>(units) * static_cast<std::size_t>(l);
  auto unit_classes = [&](int u) {
    std::vector<int> cls;
    for (std::size_t b = static_cast<std::size_t>(u); b < blocks; b += static_cast<std::size_t>(units)) {
      cls.push_back(detail::block_class(b, blocks, C));
    }
    return cls;
  };

  Partition out;
  out.initial_edge.resize(static_cast<std::size_t>(M));
  for (int m = 0; m < M; ++m) {
    const int edge = static_cast<int>(static_cast<long>(m) * N / M);
    out.initial_edge[static_cast<std::size_t>(m)] = edge;
    std::vector<int> own;
    if (spec.regime == PartitionRegime::EdgeNonIid) own = unit_classes(edge);
    if (spec.regime == PartitionRegime::LocalNonIid) own = unit_classes(m);
    LabeledDataset d{spec.dim, C, X, std::vector<int>(spec.rows)};
    for (std::size_t i = 0; i < spec.rows; ++i) {
      const bool specific = !own.empty() && i < specific_rows;
      d.labels[i] = specific ? own[i % own.size()] : static_cast<int>(i % static_cast<std::size_t>(C));
    }
    out.shards.push_back({m, std::move(d)});
  }
  return out;
}

// vehicle_id,edge_id,shard_size,label_histogram (semicolon-joined counts).
inline void write_partition_report(std::ostream& os, const Partition& p) {
  os << "vehicle_id,edge_id,shard_size,label_histogram\n";
  for (std::size_t m = 0; m < p.shards.size(); ++m) {
    os << p.shards[m].owner << ',' << p.initial_edge[m] << ',' << p.shards[m].size() << ',';
    const auto h = label_histogram(p.shards[m].data);
    for (std::size_t c = 0; c < h.size(); ++c) os << (c ? ";" : "") << h[c];
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// CSV I/O: one sample per row, features then an integer label, no header.

inline std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline LabeledDataset parse_csv(std::istream& in, const std::string& source = "<stream>") {
  LabeledDataset out;
  std::string line;
  std::size_t row = 0;
  int max_label = -1;
  std::vector<double> x;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      throw ParseError(source + ": row " + std::to_string(row) + ": " + why);
    };
    std::vector<std::string_view> cells;
    std::string_view rest(line);
    for (;;) {
      const auto comma = rest.find(',');
      cells.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (cells.size() < 2) fail("expected at least one feature and a label");
    x.assign(cells.size() - 1, 0.0);
    for (std::size_t j = 0; j + 1 < cells.size(); ++j) {
      auto cell = cells[j];
      while (!cell.empty() && cell.front() == ' ') cell.remove_prefix(1);
      while (!cell.empty() && cell.back() == ' ') cell.remove_suffix(1);
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), x[j]);
      if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size() || !std::isfinite(x[j])) {
        fail("bad feature '" + std::string(cell) + "' in column " + std::to_string(j + 1));
      }
    }
    auto lab = cells.back();
    while (!lab.empty() && lab.front() == ' ') lab.remove_prefix(1);
    while (!lab.empty() && lab.back() == ' ') lab.remove_suffix(1);
    int y = 0;
    const auto res = std::from_chars(lab.data(), lab.data() + lab.size(), y);
    if (res.ec != std::errc{} || res.ptr != lab.data() + lab.size() || y < 0) {
      fail("label '" + std::string(lab) + "' is not a non-negative integer");
    }
    if (out.dim == 0) {
      out.dim = x.size();
    } else if (x.size() != out.dim) {
      fail("expected " + std::to_string(out.dim) + " features, found " + std::to_string(x.size()));
    }
    out.push_back(x, y);
    max_label = std::max(max_label, y);
  }
  if (out.empty()) throw ParseError(source + ": empty dataset");
  out.class_count = max_label + 1;
  return out;
}

inline LabeledDataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_csv(in, path);
}

inline void write_csv(std::ostream& os, const LabeledDataset& data) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double x : data.row(i)) os << format_double(x) << ',';
    os << data.labels[i] << '\n';
  }
}

}  // namespace mobhfl
