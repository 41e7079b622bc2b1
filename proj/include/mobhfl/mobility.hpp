#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "mobhfl/datasets.hpp"
#include "mobhfl/errors.hpp"
#include "mobhfl/rng.hpp"

namespace mobhfl {

// Square ring road: four sides of length a, side n spans arc [n a, (n + 1) a)
// and is covered by edge server n. Vehicles slow down within
// intersection_zone metres of a corner. With edge_count == 1 a single edge
// covers the whole ring (degenerate single-edge setups).
struct RoadNetwork {
  double side_length = 1000.0;
  int edge_count = 4;
  double intersection_zone = 50.0;
  double slowdown_factor = 0.5;
  double turn_probability = 0.0;  // per-corner direction reversal
  std::uint64_t seed = 1;

  double perimeter() const noexcept { return 4.0 * side_length; }

  void validate() const {
    if (!(side_length > 0.0)) throw ParameterError("side length must be positive");
    if (edge_count != 4 && edge_count != 1) {
      throw ParameterError("the square topology has 4 edge servers (1 for the degenerate case)");
    }
    if (!(intersection_zone >= 0.0 && intersection_zone < side_length / 2.0)) {
      throw ParameterError("intersection zone must lie in [0, a/2)");
    }
    if (!(slowdown_factor > 0.0 && slowdown_factor <= 1.0)) {
      throw ParameterError("slowdown factor must lie in (0, 1]");
    }
    if (!(turn_probability >= 0.0 && turn_probability <= 1.0)) {
      throw ParameterError("turn probability must lie in [0, 1]");
    }
  }

  bool in_intersection(double arc) const noexcept {
    double r = std::fmod(arc, side_length);
    if (r < 0.0) r += side_length;
    return std::min(r, side_length - r) < intersection_zone;
  }
};

struct VehicleState {
  int id = 0;
  double arc_position = 0.0;  // [0, 4a)
  int direction = 1;          // +1 or -1
  double max_speed = 0.0;     // m/s
  std::uint64_t corners_crossed = 0;

  friend bool operator==(const VehicleState&, const VehicleState&) = default;
};

inline double current_speed(const RoadNetwork& net, const VehicleState& s) noexcept {
  return net.in_intersection(s.arc_position) ? s.max_speed * net.slowdown_factor : s.max_speed;
}

inline double wrap_arc(const RoadNetwork& net, double x) noexcept {
  const double P = net.perimeter();
  x = std::fmod(x, P);
  if (x < 0.0) x += P;
  if (x >= P) x = 0.0;
  return x;
}

// Edge owning an arc position; a vehicle exactly on a corner goes to the
// lower-indexed of the two adjacent sides.
inline int edge_of(const RoadNetwork& net, double arc) noexcept {
  if (net.edge_count == 1) return 0;
  const double a = net.side_length;
  int n = std::clamp(static_cast<int>(std::floor(arc / a)), 0, 3);
  if (n > 0 && arc == n * a) --n;
  return n;
}

inline std::vector<VehicleState> init_positions_uniform(const RoadNetwork& net, int vehicle_count,
                                                        double max_speed, std::uint64_t seed) {
  net.validate();
  if (vehicle_count < 1) throw ParameterError("need at least one vehicle");
  std::vector<VehicleState> out;
  out.reserve(static_cast<std::size_t>(vehicle_count));
  for (int m = 0; m < vehicle_count; ++m) {
    Rng rng(seed, {0x706f73, static_cast<std::uint64_t>(m)});
    const double arc = wrap_arc(net, rng.uniform() * net.perimeter());
    const int dir = rng.below(2) == 0 ? 1 : -1;
    out.push_back({m, arc, dir, max_speed, 0});
  }
  return out;
}

// Uniform placement strictly inside each vehicle's assigned side, so the
// initial association reproduces the data assignment.
inline std::vector<VehicleState> init_positions_by_edge(const RoadNetwork& net,
                                                        std::span<const int> initial_edge,
                                                        double max_speed, std::uint64_t seed) {
  net.validate();
  if (initial_edge.empty()) throw ParameterError("need at least one vehicle");
  std::vector<VehicleState> out;
  out.reserve(initial_edge.size());
  const double span_len = net.edge_count == 1 ? net.perimeter() : net.side_length;
  for (std::size_t m = 0; m < initial_edge.size(); ++m) {
    const int e = initial_edge[m];
    if (e < 0 || e >= net.edge_count) throw ParameterError("initial edge out of range");
    Rng rng(seed, {0x706f73, m});
    const double arc = e * net.side_length + rng.uniform_open() * span_len;
    const int dir = rng.below(2) == 0 ? 1 : -1;
    out.push_back({static_cast<int>(m), wrap_arc(net, arc), dir, max_speed, 0});
  }
  return out;
}

inline std::vector<VehicleState> place_at(const RoadNetwork& net, std::span<const double> arcs,
                                          std::span<const int> directions, double max_speed) {
  if (arcs.size() != directions.size()) throw DimensionMismatch("arcs vs directions");
  std::vector<VehicleState> out;
  for (std::size_t m = 0; m < arcs.size(); ++m) {
    out.push_back({static_cast<int>(m), wrap_arc(net, arcs[m]), directions[m] >= 0 ? 1 : -1, max_speed, 0});
  }
  return out;
}

namespace detail {

// Nearest corner or zone boundary strictly ahead of x in the travel direction.
inline double next_boundary(const RoadNetwork& net, double x, int dir) noexcept {
  const double a = net.side_length;
  const double z = net.intersection_zone;
  const double k = std::floor(x / a);
  double best = dir > 0 ? INFINITY : -INFINITY;
  for (int dk = -1; dk <= 2; ++dk) {
    const double corner = (k + dk) * a;
    for (const double b : {corner - z, corner, corner + z}) {
      if (dir > 0 && b > x) best = std::min(best, b);
      if (dir < 0 && b < x) best = std::max(best, b);
    }
  }
  return best;
}

inline bool is_corner(const RoadNetwork& net, double x) noexcept {
  return std::fmod(std::abs(x), net.side_length) == 0.0;
}

}  // namespace detail

// Exact piecewise-constant-speed integration over dt seconds.
inline VehicleState advance(const RoadNetwork& net, VehicleState s, double dt) {
  if (!(dt > 0.0)) throw ParameterError("advance needs dt > 0");
  if (s.max_speed <= 0.0) return s;
  double x = s.arc_position;
  double t = dt;
  while (t > 0.0) {
    const double nb = detail::next_boundary(net, x, s.direction);
    const double speed = net.in_intersection(0.5 * (x + nb)) ? s.max_speed * net.slowdown_factor
                                                              : s.max_speed;
    const double need = std::abs(nb - x) / speed;
    if (need >= t) {
      x += s.direction * speed * t;
      break;
    }
    x = nb;
    t -= need;
    if (detail::is_corner(net, x)) {
      ++s.corners_crossed;
      if (net.turn_probability > 0.0) {
        Rng rng(net.seed, {0x7475726e, static_cast<std::uint64_t>(s.id), s.corners_crossed});
        if (rng.uniform() < net.turn_probability) s.direction = -s.direction;
      }
    }
  }
  s.arc_position = wrap_arc(net, x);
  return s;
}

inline std::vector<VehicleState> advance(const RoadNetwork& net, std::span<const VehicleState> states,
                                         double dt) {
  std::vector<VehicleState> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(advance(net, s, dt));
  return out;
}

// Membership E_n at one instant.
struct AssociationSnapshot {
  double time = 0.0;
  std::vector<std::vector<int>> members;  // edge -> ascending vehicle ids
  std::vector<int> edge_of_vehicle;

  std::size_t edge_count() const noexcept { return members.size(); }

  std::vector<std::size_t> counts() const {
    std::vector<std::size_t> c;
    for (const auto& m : members) c.push_back(m.size());
    return c;
  }

  friend bool operator==(const AssociationSnapshot&, const AssociationSnapshot&) = default;
};

inline AssociationSnapshot associate(const RoadNetwork& net, std::span<const VehicleState> states,
                                     double time = 0.0) {
  AssociationSnapshot snap;
  snap.time = time;
  snap.members.resize(static_cast<std::size_t>(net.edge_count));
  snap.edge_of_vehicle.assign(states.size(), 0);
  for (std::size_t i = 0; i < states.size(); ++i) {
    const int e = edge_of(net, states[i].arc_position);
    snap.edge_of_vehicle[static_cast<std::size_t>(states[i].id)] = e;
  }
  for (std::size_t m = 0; m < states.size(); ++m) {
    snap.members[static_cast<std::size_t>(snap.edge_of_vehicle[m])].push_back(static_cast<int>(m));
  }
  return snap;
}

inline void write_trace_header(std::ostream& os) { os << "time_s,vehicle_id,arc_position_m,edge_id\n"; }

inline void write_trace_rows(std::ostream& os, double time, std::span<const VehicleState> states,
                             const AssociationSnapshot& snap) {
  for (const auto& s : states) {
    os << format_double(time) << ',' << s.id << ',' << format_double(s.arc_position) << ','
       << snap.edge_of_vehicle[static_cast<std::size_t>(s.id)] << '\n';
  }
}

}  // namespace mobhfl
