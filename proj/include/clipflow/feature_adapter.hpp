#pragma once

// Linear dimension reduction followed by projection onto the unit sphere:
//   z = W x / ||W x||
// W is trainable; the normalization can be switched off for ablations.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>

#include "clipflow/error.hpp"

namespace clipflow {

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr int kDefaultReducedDim = 128;

struct AdapterParams {
  Eigen::MatrixXd weight;  // out_dim x in_dim
  bool normalize = true;

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
};

/// Entries ~ N(0, 1/in_dim), rounded to float precision so the adapter
/// survives a round trip through the model file unchanged.
inline AdapterParams init_adapter(Eigen::Index in_dim, Eigen::Index out_dim, std::uint64_t seed) {
  if (out_dim < 1 || in_dim < 1) throw ConfigError("adapter dimensions must be positive");
  if (out_dim > in_dim) throw ConfigError("expansion not permitted: out_dim > in_dim");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  AdapterParams p;
  p.weight.resize(out_dim, in_dim);
  for (Eigen::Index r = 0; r < out_dim; ++r)
    for (Eigen::Index c = 0; c < in_dim; ++c) p.weight(r, c) = static_cast<float>(dist(rng));
  return p;
}

inline AdapterParams identity_adapter(Eigen::Index dim, bool normalize = true) {
  AdapterParams p;
  p.weight = Eigen::MatrixXd::Identity(dim, dim);
  p.normalize = normalize;
  return p;
}

namespace detail {

inline double checked_projection_norm(const Eigen::VectorXd& y) {
  const double n = y.norm();
  if (!(n > kNormEpsilon)) throw NumericError("feature collapsed under DR");
  return n;
}

inline void check_raw(const Eigen::VectorXd& raw, const AdapterParams& params) {
  if (raw.size() != params.in_dim())
    throw ConfigError("raw feature has dim " + std::to_string(raw.size()) + ", adapter expects " +
                      std::to_string(params.in_dim()));
  if (!raw.allFinite()) throw NumericError("non-finite feature");
}

}  // namespace detail

inline Eigen::VectorXd adapt(const Eigen::VectorXd& raw, const AdapterParams& params) {
  detail::check_raw(raw, params);
  Eigen::VectorXd y = params.weight * raw;
  if (!params.normalize) return y;
  return y / detail::checked_projection_norm(y);
}

/// Exact Jacobian dz/dx (out_dim x in_dim). With normalization on this is
/// (I - z z^T) W / ||W x||.
inline Eigen::MatrixXd adapt_jacobian(const Eigen::VectorXd& raw, const AdapterParams& params) {
  detail::check_raw(raw, params);
  if (!params.normalize) return params.weight;
  const Eigen::VectorXd y = params.weight * raw;
  const double n = detail::checked_projection_norm(y);
  const Eigen::VectorXd z = y / n;
  const Eigen::Index c = params.out_dim();
  Eigen::MatrixXd proj = Eigen::MatrixXd::Identity(c, c) - z * z.transpose();
  return (proj / n) * params.weight;
}

/// Pulls dL/dz back to dL/dW and accumulates it into `grad_weight`.
inline void adapt_backward(const Eigen::VectorXd& raw, const AdapterParams& params, const Eigen::VectorXd& grad_z,
                           Eigen::MatrixXd& grad_weight) {
  Eigen::VectorXd grad_y;
  if (params.normalize) {
    const Eigen::VectorXd y = params.weight * raw;
    const double n = detail::checked_projection_norm(y);
    const Eigen::VectorXd z = y / n;
    grad_y = (grad_z - z * z.dot(grad_z)) / n;
  } else {
    grad_y = grad_z;
  }
  grad_weight.noalias() += grad_y * raw.transpose();
}

}  // namespace clipflow
