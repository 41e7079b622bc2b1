#pragma once

// Experiment configuration: a flat sectioned key = value text format.
//
//   # comment (also ';')
//   [section]
//   key = value
//
// Keys are unique within a section; unknown sections or keys are errors.
// Lists are comma-separated. Booleans are true/false. Every value has a
// default, so an empty file is a valid config.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "mobhfl/datasets.hpp"
#include "mobhfl/engine.hpp"
#include "mobhfl/errors.hpp"
#include "mobhfl/models.hpp"

namespace mobhfl::harness {

struct DatasetSection {
  std::string source = "synthetic";  // synthetic | csv | shared_input
  std::string path;                  // csv only
  int class_count = 8;
  std::size_t dim = 16;
  std::size_t samples_per_class = 500;
  double separation = 4.0;
  double test_fraction = 0.2;
  std::uint64_t seed = 1;
  // shared_input only
  std::size_t rows = 40;
  double heterogeneity = 1.0;
  double feature_offset = 1.0;
  double feature_scale = 1.0;

  friend bool operator==(const DatasetSection&, const DatasetSection&) = default;
};

struct PartitionSection {
  PartitionRegime regime = PartitionRegime::EdgeNonIid;
  int classes_per_unit = 2;
  int vehicle_count = 32;
  int edge_count = 4;
  std::uint64_t seed = 1;
  bool allow_partial_class_coverage = false;

  friend bool operator==(const PartitionSection&, const PartitionSection&) = default;
};

struct MobilitySection {
  double side_length = 1000.0;
  double speed = 30.0;
  double slowdown_factor = 0.5;
  double intersection_zone = 50.0;
  double turn_probability = 0.0;
  std::uint64_t seed = 1;
  std::string placement = "auto";  // auto | uniform | by_edge
  int trace_rounds = 100;          // partition-report only

  friend bool operator==(const MobilitySection&, const MobilitySection&) = default;
};

struct ModelSection {
  ModelFamily family = ModelFamily::MultinomialLogistic;
  double l2_reg = 0.0;
  std::size_t hidden_width = 32;

  friend bool operator==(const ModelSection&, const ModelSection&) = default;
};

struct ExperimentSection {
  std::vector<double> targets{0.65, 0.70, 0.75};  // fractions of the centralized ceiling
  std::string pretrain = "none";                  // none | iid
  double pretrain_fraction = 0.6;
  int pretrain_max_epochs = 200;
  int ceiling_iterations = 2000;
  bool stop_after_targets = false;
  std::vector<double> speeds{0.0, 30.0};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string initial_checkpoint;
  bool mixing_summary = true;

  friend bool operator==(const ExperimentSection&, const ExperimentSection&) = default;
};

struct AnalysisSection {
  std::string epsilon = "auto";  // auto or a positive number
  bool epsilon_centered = false;
  double delta_scale = 1.0;      // test hook: scales the local divergences
  int probe_stride = 1;
  double tolerance = 1e-9;

  friend bool operator==(const AnalysisSection&, const AnalysisSection&) = default;
};

struct OutputSection {
  std::string dir = "out";
  bool checkpoint = true;

  friend bool operator==(const OutputSection&, const OutputSection&) = default;
};

struct ExperimentConfig {
  DatasetSection dataset;
  PartitionSection partition;
  MobilitySection mobility;
  ModelSection model;
  HflConfig hfl;
  ExperimentSection experiment;
  AnalysisSection analysis;
  OutputSection output;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  for (;;) {
    const auto comma = s.find(',');
    out.push_back(trim(s.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

// Typed (de)serialization for config fields. parse returns an error message
// or an empty string.
inline std::string format_value(double v) { return format_double(v); }
template <class T>
  requires std::is_integral_v<T> && (!std::is_same_v<T, bool>)
std::string format_value(T v) {
  return std::to_string(v);
}
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(const std::string& v) { return v; }
inline std::string format_value(PartitionRegime v) { return to_string(v); }
inline std::string format_value(ModelFamily v) { return to_string(v); }

template <class T>
std::string format_value(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_value(v[i]);
  return out;
}

template <class T>
  requires std::is_arithmetic_v<T> && (!std::is_same_v<T, bool>)
std::string parse_value(const std::string& s, T& out) {
  T v{};
  if (!parse_number(s, v)) return "expected a number, got '" + s + "'";
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(v)) return "expected a finite number, got '" + s + "'";
  }
  out = v;
  return {};
}

inline std::string parse_value(const std::string& s, bool& out) {
  if (s == "true") {
    out = true;
  } else if (s == "false") {
    out = false;
  } else {
    return "expected true or false, got '" + s + "'";
  }
  return {};
}

inline std::string parse_value(const std::string& s, std::string& out) {
  out = s;
  return {};
}

inline std::string parse_value(const std::string& s, PartitionRegime& out) {
  try {
    out = parse_regime(s);
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

inline std::string parse_value(const std::string& s, ModelFamily& out) {
  try {
    out = parse_family(s);
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

template <class T>
std::string parse_value(const std::string& s, std::vector<T>& out) {
  std::vector<T> v;
  for (const auto& item : split_list(s)) {
    T x{};
    if (auto err = parse_value(item, x); !err.empty()) return err;
    v.push_back(x);
  }
  out = std::move(v);
  return {};
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string()> format;
  std::function<std::string(const std::string&)> parse;
};

template <class T>
Field field(std::string section, std::string key, T& ref) {
  return {std::move(section), std::move(key), [&ref] { return format_value(ref); },
          [&ref](const std::string& s) { return parse_value(s, ref); }};
}

// Every serialized field, in output order. The returned closures reference c.
inline std::vector<Field> fields(ExperimentConfig& c) {
  auto& d = c.dataset;
  auto& p = c.partition;
  auto& m = c.mobility;
  auto& mo = c.model;
  auto& h = c.hfl;
  auto& e = c.experiment;
  auto& a = c.analysis;
  auto& o = c.output;
  return {
      field("dataset", "source", d.source),
      field("dataset", "path", d.path),
      field("dataset", "class_count", d.class_count),
      field("dataset", "dim", d.dim),
      field("dataset", "samples_per_class", d.samples_per_class),
      field("dataset", "separation", d.separation),
      field("dataset", "test_fraction", d.test_fraction),
      field("dataset", "seed", d.seed),
      field("dataset", "rows", d.rows),
      field("dataset", "heterogeneity", d.heterogeneity),
      field("dataset", "feature_offset", d.feature_offset),
      field("dataset", "feature_scale", d.feature_scale),
      field("partition", "regime", p.regime),
      field("partition", "classes_per_unit", p.classes_per_unit),
      field("partition", "vehicle_count", p.vehicle_count),
      field("partition", "edge_count", p.edge_count),
      field("partition", "seed", p.seed),
      field("partition", "allow_partial_class_coverage", p.allow_partial_class_coverage),
      field("mobility", "side_length", m.side_length),
      field("mobility", "speed", m.speed),
      field("mobility", "slowdown_factor", m.slowdown_factor),
      field("mobility", "intersection_zone", m.intersection_zone),
      field("mobility", "turn_probability", m.turn_probability),
      field("mobility", "seed", m.seed),
      field("mobility", "placement", m.placement),
      field("mobility", "trace_rounds", m.trace_rounds),
      field("model", "family", mo.family),
      field("model", "l2_reg", mo.l2_reg),
      field("model", "hidden_width", mo.hidden_width),
      field("hfl", "eta", h.eta),
      field("hfl", "tau_l", h.tau_l),
      field("hfl", "tau_e", h.tau_e),
      field("hfl", "cloud_epochs", h.cloud_epochs),
      field("hfl", "batch_size", h.batch_size),
      field("hfl", "seed", h.seed),
      field("hfl", "full_batch", h.full_batch),
      field("hfl", "record_virtual", h.record_virtual),
      field("hfl", "threads", h.threads),
      field("hfl", "round_seconds", h.round_seconds),
      field("hfl", "eval_every", h.eval_every),
      field("experiment", "targets", e.targets),
      field("experiment", "pretrain", e.pretrain),
      field("experiment", "pretrain_fraction", e.pretrain_fraction),
      field("experiment", "pretrain_max_epochs", e.pretrain_max_epochs),
      field("experiment", "ceiling_iterations", e.ceiling_iterations),
      field("experiment", "stop_after_targets", e.stop_after_targets),
      field("experiment", "speeds", e.speeds),
      field("experiment", "seeds", e.seeds),
      field("experiment", "initial_checkpoint", e.initial_checkpoint),
      field("experiment", "mixing_summary", e.mixing_summary),
      field("analysis", "epsilon", a.epsilon),
      field("analysis", "epsilon_centered", a.epsilon_centered),
      field("analysis", "delta_scale", a.delta_scale),
      field("analysis", "probe_stride", a.probe_stride),
      field("analysis", "tolerance", a.tolerance),
      field("output", "dir", o.dir),
      field("output", "checkpoint", o.checkpoint),
  };
}

inline std::string join_errors(const std::vector<std::string>& errors) {
  std::string msg;
  for (const auto& e : errors) msg += "\n  " + e;
  return msg;
}

}  // namespace detail

// Parse errors (syntax, unknown keys, bad values) are collected and thrown
// together. Cross-field checks live in validate().
inline ExperimentConfig parse_config(std::istream& in, const std::string& source = "<config>") {
  ExperimentConfig cfg;
  auto table = detail::fields(cfg);
  std::map<std::string, detail::Field*> by_name;
  for (auto& f : table) by_name[f.section + "." + f.key] = &f;

  std::vector<std::string> errors;
  std::map<std::string, std::size_t> seen;
  std::string section;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    const std::string text = detail::trim(line.substr(0, line.find_first_of("#;")));
    if (text.empty()) continue;
    if (text.front() == '[') {
      if (text.back() != ']') {
        errors.push_back(where + "unterminated section header");
        continue;
      }
      section = detail::trim(std::string_view(text).substr(1, text.size() - 2));
      continue;
    }
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      errors.push_back(where + "expected key = value");
      continue;
    }
    const std::string key = detail::trim(std::string_view(text).substr(0, eq));
    const std::string value = detail::trim(std::string_view(text).substr(eq + 1));
    const std::string name = section + "." + key;
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      errors.push_back(where + "unknown key '" + name + "'");
      continue;
    }
    if (const auto prev = seen.find(name); prev != seen.end()) {
      errors.push_back(where + "duplicate key '" + name + "' (first on line " + std::to_string(prev->second) + ")");
      continue;
    }
    seen[name] = lineno;
    if (auto err = it->second->parse(value); !err.empty()) errors.push_back(where + name + ": " + err);
  }
  if (!errors.empty()) throw ConfigError("invalid config" + detail::join_errors(errors));
  return cfg;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse_config(in, path);
}

inline std::string serialize_config(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  std::string out;
  std::string section;
  for (const auto& f : detail::fields(copy)) {
    if (f.section != section) {
      out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.format() + "\n";
  }
  return out;
}

// Cross-module consistency; every violation is listed.
inline std::vector<std::string> config_errors(const ExperimentConfig& c) {
  std::vector<std::string> e;
  const auto& d = c.dataset;
  if (d.source != "synthetic" && d.source != "csv" && d.source != "shared_input") {
    e.push_back("dataset.source must be synthetic, csv or shared_input");
  }
  if (d.source == "csv" && d.path.empty()) e.push_back("dataset.path is required for csv input");
  if (d.source != "csv") {
    if (d.class_count < 2) e.push_back("dataset.class_count must be >= 2");
    if (d.dim < 1 || (d.source == "synthetic" && d.dim < 2)) e.push_back("dataset.dim too small");
  }
  if (d.source == "synthetic") {
    if (d.samples_per_class < 1) e.push_back("dataset.samples_per_class must be >= 1");
    if (!(d.separation > 0.0)) e.push_back("dataset.separation must be > 0");
  }
  if (!(d.test_fraction >= 0.0 && d.test_fraction < 1.0)) e.push_back("dataset.test_fraction must lie in [0, 1)");
  if (d.source == "shared_input") {
    if (d.rows < 1) e.push_back("dataset.rows must be >= 1");
    if (!(d.heterogeneity >= 0.0 && d.heterogeneity <= 1.0)) e.push_back("dataset.heterogeneity must lie in [0, 1]");
  }

  const auto& p = c.partition;
  if (p.vehicle_count < 1) e.push_back("partition.vehicle_count must be >= 1");
  if (p.edge_count != 4 && p.edge_count != 1) e.push_back("partition.edge_count must be 4 (or 1 for the degenerate ring)");
  if (p.regime != PartitionRegime::Iid) {
    if (p.classes_per_unit < 1) e.push_back("partition.classes_per_unit must be >= 1");
    if (d.source != "csv" && p.classes_per_unit > d.class_count) {
      e.push_back("partition.classes_per_unit exceeds dataset.class_count");
    }
  }
  if (p.regime == PartitionRegime::EdgeNonIid && p.edge_count > 0 && p.vehicle_count % p.edge_count != 0) {
    e.push_back("edge_noniid needs partition.vehicle_count divisible by partition.edge_count");
  }
  if (d.source != "csv" && !p.allow_partial_class_coverage) {
    if (p.regime == PartitionRegime::EdgeNonIid && p.classes_per_unit * p.edge_count < d.class_count) {
      e.push_back("edge_noniid needs classes_per_unit * edge_count >= class_count "
                  "(or allow_partial_class_coverage = true)");
    }
    if (p.regime == PartitionRegime::LocalNonIid && p.classes_per_unit * p.vehicle_count < d.class_count) {
      e.push_back("local_noniid needs classes_per_unit * vehicle_count >= class_count");
    }
  }

  const auto& m = c.mobility;
  if (!(m.side_length > 0.0)) e.push_back("mobility.side_length must be > 0");
  if (!(m.intersection_zone >= 0.0 && m.intersection_zone < m.side_length / 2.0)) {
    e.push_back("mobility.intersection_zone must lie in [0, side_length / 2)");
  }
  if (!(m.slowdown_factor > 0.0 && m.slowdown_factor <= 1.0)) e.push_back("mobility.slowdown_factor must lie in (0, 1]");
  if (!(m.turn_probability >= 0.0 && m.turn_probability <= 1.0)) e.push_back("mobility.turn_probability must lie in [0, 1]");
  if (!(m.speed >= 0.0)) e.push_back("mobility.speed must be >= 0");
  if (m.placement != "auto" && m.placement != "uniform" && m.placement != "by_edge") {
    e.push_back("mobility.placement must be auto, uniform or by_edge");
  }
  if (m.trace_rounds < 1) e.push_back("mobility.trace_rounds must be >= 1");

  if (c.model.family == ModelFamily::Mlp1 && c.model.hidden_width < 1) e.push_back("model.hidden_width must be >= 1");
  if (!(c.model.l2_reg >= 0.0)) e.push_back("model.l2_reg must be >= 0");

  const auto& h = c.hfl;
  if (!(h.eta > 0.0)) e.push_back("hfl.eta must be > 0");
  if (h.tau_l < 1) e.push_back("hfl.tau_l must be >= 1");
  if (h.tau_e < 1) e.push_back("hfl.tau_e must be >= 1");
  if (h.cloud_epochs < 1) e.push_back("hfl.cloud_epochs must be >= 1");
  if (!h.full_batch && h.batch_size < 1) e.push_back("hfl.batch_size must be >= 1");
  if (h.threads < 1) e.push_back("hfl.threads must be >= 1");
  if (!(h.round_seconds > 0.0)) e.push_back("hfl.round_seconds must be > 0");
  if (h.eval_every < 1) e.push_back("hfl.eval_every must be >= 1");

  const auto& x = c.experiment;
  for (double t : x.targets) {
    if (!(t > 0.0 && t <= 1.0)) e.push_back("experiment.targets must lie in (0, 1]");
  }
  if (x.pretrain != "none" && x.pretrain != "iid") e.push_back("experiment.pretrain must be none or iid");
  if (!(x.pretrain_fraction > 0.0 && x.pretrain_fraction <= 1.0)) {
    e.push_back("experiment.pretrain_fraction must lie in (0, 1]");
  }
  if (x.pretrain_max_epochs < 1) e.push_back("experiment.pretrain_max_epochs must be >= 1");
  if (x.ceiling_iterations < 1) e.push_back("experiment.ceiling_iterations must be >= 1");
  if (x.speeds.empty()) e.push_back("experiment.speeds must not be empty");
  for (double v : x.speeds) {
    if (!(v >= 0.0)) e.push_back("experiment.speeds must be >= 0");
  }
  if (x.seeds.empty()) e.push_back("experiment.seeds must not be empty");

  const auto& a = c.analysis;
  if (a.epsilon != "auto") {
    double eps = 0.0;
    if (!detail::parse_number(a.epsilon, eps) || !(eps > 0.0)) e.push_back("analysis.epsilon must be auto or > 0");
  }
  if (!(a.delta_scale > 0.0)) e.push_back("analysis.delta_scale must be > 0");
  if (a.probe_stride < 1) e.push_back("analysis.probe_stride must be >= 1");
  if (!(a.tolerance >= 0.0)) e.push_back("analysis.tolerance must be >= 0");
  return e;
}

inline void validate(const ExperimentConfig& c) {
  const auto errors = config_errors(c);
  if (!errors.empty()) throw ConfigError("config validation failed" + detail::join_errors(errors));
}

// --seed: one value for every random stream in the experiment.
inline void override_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.dataset.seed = seed;
  c.partition.seed = seed;
  c.mobility.seed = seed;
  c.hfl.seed = seed;
}

}  // namespace mobhfl::harness
