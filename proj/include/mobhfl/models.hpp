#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "mobhfl/datasets.hpp"
#include "mobhfl/errors.hpp"
#include "mobhfl/param_vector.hpp"
#include "mobhfl/rng.hpp"

namespace mobhfl {

enum class ModelFamily { Quadratic, MultinomialLogistic, Mlp1 };

inline std::string to_string(ModelFamily f) {
  switch (f) {
    case ModelFamily::Quadratic: return "quadratic";
    case ModelFamily::MultinomialLogistic: return "logistic";
    case ModelFamily::Mlp1: return "mlp1";
  }
  return "?";
}

inline ModelFamily parse_family(std::string_view s) {
  if (s == "quadratic") return ModelFamily::Quadratic;
  if (s == "logistic") return ModelFamily::MultinomialLogistic;
  if (s == "mlp1") return ModelFamily::Mlp1;
  throw ParseError("unknown model family '" + std::string(s) + "'");
}

// Linear families hold a C x d weight matrix W (row-major, no bias):
//   QUADRATIC            g_i(W) = 1/2 ||W x_i - e_{y_i}||^2
//   MULTINOMIAL_LOGISTIC g_i(W) = -log softmax(W x_i)_{y_i}
// MLP1 is tanh(W1 x + b1) followed by a softmax layer W2 h + b2, laid out as
// [W1 (H x d), b1 (H), W2 (C x H), b2 (C)].
// Every loss is the sample mean plus (l2_reg / 2) ||w||^2.
struct ModelSpec {
  ModelFamily family = ModelFamily::MultinomialLogistic;
  std::size_t dim = 0;
  int class_count = 0;
  double l2_reg = 0.0;
  std::size_t hidden_width = 0;

  std::size_t classes() const noexcept { return static_cast<std::size_t>(class_count); }

  std::size_t param_count() const noexcept {
    if (family == ModelFamily::Mlp1) {
      return hidden_width * dim + hidden_width + classes() * hidden_width + classes();
    }
    return classes() * dim;
  }

  bool convex() const noexcept { return family != ModelFamily::Mlp1; }

  void validate() const {
    if (dim == 0 || class_count < 2) throw ParameterError("model needs dim >= 1 and C >= 2");
    if (!(l2_reg >= 0.0)) throw ParameterError("l2_reg must be non-negative");
    if (family == ModelFamily::Mlp1 && hidden_width == 0) {
      throw ParameterError("mlp1 needs hidden_width >= 1");
    }
  }
};

namespace detail {

inline void check_dims(const ModelSpec& spec, const ParamVector& w, const LabeledDataset& data) {
  if (w.size() != spec.param_count()) {
    throw DimensionMismatch("parameter length " + std::to_string(w.size()) + ", model expects " +
                            std::to_string(spec.param_count()));
  }
  if (data.dim != spec.dim) {
    throw DimensionMismatch("data dimension " + std::to_string(data.dim) + ", model expects " +
                            std::to_string(spec.dim));
  }
  if (data.class_count > spec.class_count) {
    throw DimensionMismatch("data has more classes than the model");
  }
}

// scores[c] = sum_j W[c, j] x[j]
inline void linear_scores(std::span<const double> W, std::span<const double> x, std::size_t C,
                          std::span<double> scores) noexcept {
  const std::size_t d = x.size();
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += W[c * d + j] * x[j];
    scores[c] = s;
  }
}

// Replaces scores by softmax probabilities and returns log-sum-exp.
inline double softmax_inplace(std::span<double> scores) noexcept {
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : scores) mx = std::max(mx, s);
  double z = 0.0;
  for (double& s : scores) {
    s = std::exp(s - mx);
    z += s;
  }
  for (double& s : scores) s /= z;
  return mx + std::log(z);
}

struct Mlp1View {
  std::size_t d, H, C;
  const double* W1;
  const double* b1;
  const double* W2;
  const double* b2;

  Mlp1View(const ModelSpec& spec, const ParamVector& w)
      : d(spec.dim), H(spec.hidden_width), C(spec.classes()) {
    W1 = w.data();
    b1 = W1 + H * d;
    W2 = b1 + H;
    b2 = W2 + C * H;
  }

  // Fills hidden activations and raw output scores.
  void forward(std::span<const double> x, std::span<double> h, std::span<double> s) const noexcept {
    for (std::size_t k = 0; k < H; ++k) {
      double a = b1[k];
      for (std::size_t j = 0; j < d; ++j) a += W1[k * d + j] * x[j];
      h[k] = std::tanh(a);
    }
    for (std::size_t c = 0; c < C; ++c) {
      double a = b2[c];
      for (std::size_t k = 0; k < H; ++k) a += W2[c * H + k] * h[k];
      s[c] = a;
    }
  }
};

// Accumulates (sum of per-sample losses, sum of per-sample gradients) over
// the selected rows, in row order.
template <typename IndexFn>
double accumulate(const ModelSpec& spec, const ParamVector& w, const LabeledDataset& data,
                  std::size_t count, IndexFn index, ParamVector* grad) {
  const std::size_t C = spec.classes();
  const std::size_t d = spec.dim;
  std::vector<double> s(C);
  double total = 0.0;

  if (spec.family == ModelFamily::Mlp1) {
    const Mlp1View net(spec, w);
    const std::size_t H = net.H;
    std::vector<double> h(H);
    std::vector<double> dh(H);
    double* gW1 = grad ? grad->data() : nullptr;
    double* gb1 = grad ? gW1 + H * d : nullptr;
    double* gW2 = grad ? gb1 + H : nullptr;
    double* gb2 = grad ? gW2 + C * H : nullptr;
    for (std::size_t r = 0; r < count; ++r) {
      const std::size_t i = index(r);
      const auto x = data.row(i);
      const auto y = static_cast<std::size_t>(data.labels[i]);
      net.forward(x, h, s);
      const double sy = s[y];
      total += softmax_inplace(s) - sy;
      if (!grad) continue;
      s[y] -= 1.0;  // dL/dscores
      for (std::size_t c = 0; c < C; ++c) {
        gb2[c] += s[c];
        for (std::size_t k = 0; k < H; ++k) gW2[c * H + k] += s[c] * h[k];
      }
      for (std::size_t k = 0; k < H; ++k) {
        double a = 0.0;
        for (std::size_t c = 0; c < C; ++c) a += net.W2[c * H + k] * s[c];
        dh[k] = a * (1.0 - h[k] * h[k]);
      }
      for (std::size_t k = 0; k < H; ++k) {
        gb1[k] += dh[k];
        for (std::size_t j = 0; j < d; ++j) gW1[k * d + j] += dh[k] * x[j];
      }
    }
    return total;
  }

  const std::span<const double> W = w.span();
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t i = index(r);
    const auto x = data.row(i);
    const auto y = static_cast<std::size_t>(data.labels[i]);
    linear_scores(W, x, C, s);
    if (spec.family == ModelFamily::Quadratic) {
      s[y] -= 1.0;  // residual
      double l = 0.0;
      for (double e : s) l += e * e;
      total += 0.5 * l;
    } else {
      const double sy = s[y];
      total += softmax_inplace(s) - sy;
      s[y] -= 1.0;
    }
    if (!grad) continue;
    double* g = grad->data();
    for (std::size_t c = 0; c < C; ++c) {
      const double e = s[c];
      for (std::size_t j = 0; j < d; ++j) g[c * d + j] += e * x[j];
    }
  }
  return total;
}

inline double regularizer(const ModelSpec& spec, const ParamVector& w) noexcept {
  if (spec.l2_reg == 0.0) return 0.0;
  double s = 0.0;
  for (double x : w.values()) s += x * x;
  return 0.5 * spec.l2_reg * s;
}

inline void finish_gradient(const ModelSpec& spec, const ParamVector& w, std::size_t count,
                            ParamVector& g) noexcept {
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t k = 0; k < g.size(); ++k) g[k] = g[k] * inv + spec.l2_reg * w[k];
}

}  // namespace detail

inline double loss(const ModelSpec& spec, const ParamVector& w, const LabeledDataset& data) {
  detail::check_dims(spec, w, data);
  if (data.empty()) throw ParameterError("loss of an empty dataset");
  const double sum = detail::accumulate(spec, w, data, data.size(), [](std::size_t r) { return r; }, nullptr);
  return sum / static_cast<double>(data.size()) + detail::regularizer(spec, w);
}

inline double loss(const ModelSpec& spec, const ParamVector& w, const LabeledDataset& data,
                   std::span<const std::size_t> batch) {
  detail::check_dims(spec, w, data);
  if (batch.empty()) throw ParameterError("loss of an empty batch");
  const double sum = detail::accumulate(spec, w, data, batch.size(), [&](std::size_t r) { return batch[r]; }, nullptr);
  return sum / static_cast<double>(batch.size()) + detail::regularizer(spec, w);
}

inline ParamVector gradient(const ModelSpec& spec, const ParamVector& w, const LabeledDataset& data) {
  detail::check_dims(spec, w, data);
  if (data.empty()) throw ParameterError("gradient of an empty dataset");
  ParamVector g(w.size());
  detail::accumulate(spec, w, data, data.size(), [](std::size_t r) { return r; }, &g);
  detail::finish_gradient(spec, w, data.size(), g);
  return g;
}

inline ParamVector gradient(const ModelSpec& spec, const ParamVector& w, const LabeledDataset& data,
                            std::span<const std::size_t> batch) {
  detail::check_dims(spec, w, data);
  if (batch.empty()) throw ParameterError("gradient of an empty batch");
  ParamVector g(w.size());
  detail::accumulate(spec, w, data, batch.size(), [&](std::size_t r) { return batch[r]; }, &g);
  detail::finish_gradient(spec, w, batch.size(), g);
  return g;
}

inline int predict(const ModelSpec& spec, const ParamVector& w, std::span<const double> x) {
  const std::size_t C = spec.classes();
  std::vector<double> s(C);
  if (spec.family == ModelFamily::Mlp1) {
    std::vector<double> h(spec.hidden_width);
    detail::Mlp1View(spec, w).forward(x, h, s);
  } else {
    detail::linear_scores(w.span(), x, C, s);
  }
  return static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
}

inline double accuracy(const ModelSpec& spec, const ParamVector& w, const LabeledDataset& data) {
  detail::check_dims(spec, w, data);
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    hits += predict(spec, w, data.row(i)) == data.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

// Zeros for the linear families; scaled Gaussian weights and zero biases for
// MLP1 (w = 0 is a saddle there).
inline ParamVector initial_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamVector w(spec.param_count());
  if (spec.family != ModelFamily::Mlp1) return w;
  Rng rng(seed, {0x696e6974});
  const std::size_t d = spec.dim;
  const std::size_t H = spec.hidden_width;
  const std::size_t C = spec.classes();
  const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(H));
  for (std::size_t k = 0; k < H * d; ++k) w[k] = s1 * rng.normal();
  const std::size_t w2 = H * d + H;
  for (std::size_t k = 0; k < C * H; ++k) w[w2 + k] = s2 * rng.normal();
  return w;
}

// ---------------------------------------------------------------------------
// Smoothness / Lipschitz constants

enum class EstimateMethod { Analytic, PowerIteration, TrajectorySup };

struct SmoothnessEstimate {
  double beta = 0.0;
  double rho = 0.0;
  EstimateMethod method = EstimateMethod::Analytic;
};

struct PowerIterationOptions {
  double tolerance = 1e-8;
  int max_iterations = 10000;
};

// Largest eigenvalue of a symmetric positive semi-definite n x n matrix
// (row-major). Stops once the residual ||A x - lambda x|| <= tol * lambda.
inline double largest_eigenvalue(std::span<const double> A, std::size_t n,
                                 const PowerIterationOptions& opt = {}) {
  if (A.size() != n * n || n == 0) throw DimensionMismatch("power iteration needs a square matrix");
  std::vector<double> x(n);
  std::vector<double> y(n);
  Rng rng(0x706f776572);
  double nx = 0.0;
  for (double& v : x) {
    v = 1.0 + 0.1 * rng.uniform();
    nx += v * v;
  }
  nx = std::sqrt(nx);
  for (double& v : x) v /= nx;

  double lambda = 0.0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += A[i * n + j] * x[j];
      y[i] = s;
    }
    lambda = 0.0;
    for (std::size_t i = 0; i < n; ++i) lambda += x[i] * y[i];
    double res = 0.0;
    double ny = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = y[i] - lambda * x[i];
      res += r * r;
      ny += y[i] * y[i];
    }
    if (ny == 0.0) return 0.0;
    if (std::sqrt(res) <= opt.tolerance * std::abs(lambda)) return lambda;
    ny = std::sqrt(ny);
    for (std::size_t i = 0; i < n; ++i) x[i] = y[i] / ny;
  }
  throw ConvergenceError("power iteration did not converge in " +
                         std::to_string(opt.max_iterations) + " iterations");
}

// X^T X / n, row-major d x d.
inline std::vector<double> second_moment(const LabeledDataset& data) {
  const std::size_t d = data.dim;
  std::vector<double> A(d * d, 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto x = data.row(i);
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) A[a * d + b] += x[a] * x[b];
    }
  }
  const double inv = 1.0 / static_cast<double>(data.size());
  for (double& v : A) v *= inv;
  return A;
}

// QUADRATIC: beta = lambda_max(X^T X / n) + l2 (the Hessian is that matrix
// Kronecker I_C). MULTINOMIAL_LOGISTIC: the softmax Hessian block is bounded
// by 1/2, so beta = lambda_max / 2 + l2. rho = max over probes of ||grad F||
// (w = 0 when no probe is given).
inline SmoothnessEstimate estimate_constants(const ModelSpec& spec, const LabeledDataset& data,
                                             std::span<const ParamVector> probes,
                                             const PowerIterationOptions& opt = {}) {
  if (!spec.convex()) throw UnsupportedModel("smoothness estimation requires a convex model family");
  data.validate();
  const double lmax = largest_eigenvalue(second_moment(data), data.dim, opt);
  SmoothnessEstimate est;
  if (spec.family == ModelFamily::Quadratic) {
    est.beta = lmax + spec.l2_reg;
    est.method = EstimateMethod::Analytic;
  } else {
    est.beta = 0.5 * lmax + spec.l2_reg;
    est.method = EstimateMethod::PowerIteration;
  }
  if (!(est.beta > 0.0)) throw ParameterError("smoothness constant is zero (all-zero features?)");
  if (probes.empty()) {
    est.rho = norm(gradient(spec, ParamVector(spec.param_count()), data));
  } else {
    for (const auto& w : probes) est.rho = std::max(est.rho, norm(gradient(spec, w, data)));
  }
  return est;
}

struct Optimum {
  ParamVector w;
  double f_star = 0.0;
  bool min_norm = false;  // singular normal equations, minimum-norm solution returned
  long iterations = 0;
};

struct OptimumOptions {
  double gradient_tolerance = 1e-8;
  long max_iterations = 1'000'000;
};

inline Optimum solve_optimum(const ModelSpec& spec, const LabeledDataset& data,
                             const OptimumOptions& opt = {}) {
  if (!spec.convex()) throw UnsupportedModel("optimum only defined for convex model families");
  data.validate();
  const std::size_t d = spec.dim;
  const std::size_t C = spec.classes();
  const double n = static_cast<double>(data.size());
  Optimum out;

  if (spec.family == ModelFamily::Quadratic) {
    // (X^T X / n + l2 I) W^T = X^T Y / n
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(C));
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Eigen::Map<const Eigen::VectorXd> x(data.row(i).data(), static_cast<Eigen::Index>(d));
      A.noalias() += x * x.transpose();
      B.col(data.labels[i]) += x;
    }
    A /= n;
    B /= n;
    A.diagonal().array() += spec.l2_reg;
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(A);
    const Eigen::MatrixXd Wt = cod.solve(B);
    out.min_norm = cod.rank() < static_cast<Eigen::Index>(d);
    out.w = ParamVector(spec.param_count());
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t j = 0; j < d; ++j) {
        out.w[c * d + j] = Wt(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c));
      }
    }
    out.f_star = loss(spec, out.w, data);
    return out;
  }

  // Full-batch gradient descent with step 1 / beta.
  const ParamVector zero(spec.param_count());
  const double beta = estimate_constants(spec, data, std::span(&zero, 1)).beta;
  ParamVector w = zero;
  for (long it = 0; it < opt.max_iterations; ++it) {
    ParamVector g = gradient(spec, w, data);
    if (norm(g) <= opt.gradient_tolerance) {
      out.w = std::move(w);
      out.f_star = loss(spec, out.w, data);
      out.iterations = it;
      return out;
    }
    axpy(-1.0 / beta, g, w);
  }
  throw ConvergenceError("gradient descent did not reach ||grad F|| <= " +
                         format_double(opt.gradient_tolerance) + " (separable data without l2_reg has no minimizer)");
}

}  // namespace mobhfl
