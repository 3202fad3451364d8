#pragma once

// Affine-coupling normalizing flow mapping adapted features z to a
// standard-normal latent u, with exact log|det J|.
//
// Each block works in a permuted frame y = P z (y[i] = z[perm[i]]):
//   passive p = y[0, C/2), active a = y[C/2, C)
//   (s, t)   = W2 relu(W1 p + b1) + b2
//   s_hat    = clamp * tanh(s / clamp)
//   a'       = a * exp(s_hat) + t
// and the result is scattered back to the original frame, so a block with
// zero final layer is exactly the identity.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <vector>

#include "clipflow/error.hpp"

namespace clipflow {

struct SubnetWeights {
  Eigen::MatrixXd w1;  // hidden x C/2
  Eigen::VectorXd b1;  // hidden
  Eigen::MatrixXd w2;  // C x hidden; rows [0, C/2) give s, rows [C/2, C) give t
  Eigen::VectorXd b2;  // C

  static SubnetWeights zeros(Eigen::Index dim, Eigen::Index hidden) {
    SubnetWeights w;
    w.w1 = Eigen::MatrixXd::Zero(hidden, dim / 2);
    w.b1 = Eigen::VectorXd::Zero(hidden);
    w.w2 = Eigen::MatrixXd::Zero(dim, hidden);
    w.b2 = Eigen::VectorXd::Zero(dim);
    return w;
  }
};

struct CouplingBlock {
  std::vector<std::uint32_t> permutation;
  SubnetWeights net;
};

struct FlowParams {
  Eigen::Index dim = 0;
  Eigen::Index hidden = 0;
  double clamp = 1.9;
  std::vector<CouplingBlock> blocks;

  Eigen::Index half() const { return dim / 2; }
};

struct FlowConfig {
  Eigen::Index dim = 128;
  Eigen::Index blocks = 8;
  Eigen::Index hidden = 256;
  double clamp = 1.9;
};

inline void validate_flow_config(const FlowConfig& cfg) {
  if (cfg.dim < 2 || cfg.dim % 2 != 0) throw ConfigError("dimension must be even (got " + std::to_string(cfg.dim) + ")");
  if (cfg.blocks < 1) throw ConfigError("flow needs at least one coupling block");
  if (cfg.hidden < 1) throw ConfigError("hidden width must be positive");
  if (!(cfg.clamp > 0.0) || !std::isfinite(cfg.clamp)) throw ConfigError("clamp must be positive");
}

/// First-layer weights ~ N(0, 1/fan_in) (float-rounded), everything else zero,
/// so the initial flow is the identity with zero log-determinant.
inline FlowParams init_flow(const FlowConfig& cfg, std::uint64_t seed) {
  validate_flow_config(cfg);
  FlowParams p;
  p.dim = cfg.dim;
  p.hidden = cfg.hidden;
  p.clamp = cfg.clamp;
  std::mt19937_64 rng(seed);
  const Eigen::Index half = cfg.dim / 2;
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(half)));
  for (Eigen::Index k = 0; k < cfg.blocks; ++k) {
    CouplingBlock b;
    b.permutation.resize(static_cast<std::size_t>(cfg.dim));
    std::iota(b.permutation.begin(), b.permutation.end(), 0u);
    std::shuffle(b.permutation.begin(), b.permutation.end(), rng);
    b.net = SubnetWeights::zeros(cfg.dim, cfg.hidden);
    for (Eigen::Index r = 0; r < cfg.hidden; ++r)
      for (Eigen::Index c = 0; c < half; ++c) b.net.w1(r, c) = static_cast<float>(dist(rng));
    p.blocks.push_back(std::move(b));
  }
  return p;
}

inline bool is_permutation_of_iota(const std::vector<std::uint32_t>& perm) {
  std::vector<bool> hit(perm.size(), false);
  for (auto v : perm) {
    if (v >= perm.size() || hit[v]) return false;
    hit[v] = true;
  }
  return true;
}

/// Structural checks for parameters that did not come from init_flow.
inline void validate_flow(const FlowParams& p) {
  validate_flow_config({p.dim, static_cast<Eigen::Index>(p.blocks.size()), p.hidden, p.clamp});
  for (const auto& b : p.blocks) {
    if (static_cast<Eigen::Index>(b.permutation.size()) != p.dim || !is_permutation_of_iota(b.permutation))
      throw FormatError("block permutation is not a bijection");
    const auto& n = b.net;
    if (n.w1.rows() != p.hidden || n.w1.cols() != p.half() || n.b1.size() != p.hidden || n.w2.rows() != p.dim ||
        n.w2.cols() != p.hidden || n.b2.size() != p.dim)
      throw FormatError("coupling subnet has wrong shape");
    if (!n.w1.allFinite() || !n.b1.allFinite() || !n.w2.allFinite() || !n.b2.allFinite())
      throw NumericError("non-finite flow parameter");
  }
}

struct FlowResult {
  Eigen::VectorXd u;
  double logdet = 0.0;
};

/// Per-block intermediates kept for the backward pass.
struct BlockTape {
  Eigen::VectorXd passive;
  Eigen::VectorXd active;
  Eigen::VectorXd pre;    // W1 p + b1
  Eigen::VectorXd s_raw;  // unclamped log-scale
  Eigen::VectorXd s_hat;
};

struct FlowTape {
  std::vector<BlockTape> blocks;
};

namespace detail {

inline void subnet(const SubnetWeights& net, const Eigen::VectorXd& passive, double clamp, Eigen::Index half,
                   BlockTape& out, Eigen::VectorXd& t) {
  out.pre = net.w1 * passive + net.b1;
  const Eigen::VectorXd hidden = out.pre.cwiseMax(0.0);
  const Eigen::VectorXd st = net.w2 * hidden + net.b2;
  out.s_raw = st.head(half);
  t = st.tail(half);
  out.s_hat = out.s_raw.unaryExpr([clamp](double s) { return clamp * std::tanh(s / clamp); });
}

inline void check_finite(const Eigen::VectorXd& v, double logdet) {
  if (!v.allFinite() || !std::isfinite(logdet)) throw NumericError("flow overflow");
}

}  // namespace detail

inline FlowResult forward(const Eigen::VectorXd& z, const FlowParams& params, FlowTape* tape = nullptr) {
  if (z.size() != params.dim)
    throw ConfigError("flow input has dim " + std::to_string(z.size()) + ", expected " + std::to_string(params.dim));
  if (!z.allFinite()) throw NumericError("non-finite flow input");
  const Eigen::Index half = params.half();
  if (tape) tape->blocks.assign(params.blocks.size(), {});

  Eigen::VectorXd x = z;
  double logdet = 0.0;
  Eigen::VectorXd t;
  for (std::size_t k = 0; k < params.blocks.size(); ++k) {
    const auto& block = params.blocks[k];
    BlockTape local;
    BlockTape& bt = tape ? tape->blocks[k] : local;
    bt.passive.resize(half);
    bt.active.resize(half);
    for (Eigen::Index i = 0; i < half; ++i) {
      bt.passive[i] = x[block.permutation[i]];
      bt.active[i] = x[block.permutation[half + i]];
    }
    detail::subnet(block.net, bt.passive, params.clamp, half, bt, t);
    for (Eigen::Index i = 0; i < half; ++i)
      x[block.permutation[half + i]] = bt.active[i] * std::exp(bt.s_hat[i]) + t[i];
    logdet += bt.s_hat.sum();
    detail::check_finite(x, logdet);
  }
  return {std::move(x), logdet};
}

inline Eigen::VectorXd inverse(const Eigen::VectorXd& u, const FlowParams& params) {
  if (u.size() != params.dim)
    throw ConfigError("flow input has dim " + std::to_string(u.size()) + ", expected " + std::to_string(params.dim));
  if (!u.allFinite()) throw NumericError("non-finite flow input");
  const Eigen::Index half = params.half();
  Eigen::VectorXd x = u;
  Eigen::VectorXd t;
  BlockTape bt;
  bt.passive.resize(half);
  for (auto it = params.blocks.rbegin(); it != params.blocks.rend(); ++it) {
    const auto& block = *it;
    for (Eigen::Index i = 0; i < half; ++i) bt.passive[i] = x[block.permutation[i]];
    detail::subnet(block.net, bt.passive, params.clamp, half, bt, t);
    for (Eigen::Index i = 0; i < half; ++i) {
      auto& a = x[block.permutation[half + i]];
      a = (a - t[i]) * std::exp(-bt.s_hat[i]);
    }
    detail::check_finite(x, 0.0);
  }
  return x;
}

/// log p(z) under the flow with a standard-normal base, including the
/// (C/2) ln(2 pi) constant.
inline double log_likelihood(const Eigen::VectorXd& z, const FlowParams& params) {
  const FlowResult r = forward(z, params);
  const double c = static_cast<double>(params.dim);
  return -0.5 * r.u.squaredNorm() - 0.5 * c * std::log(2.0 * std::numbers::pi) + r.logdet;
}

/// Reverse pass for one forward() call recorded in `tape`. Accumulates
/// parameter gradients into `grads` (one SubnetWeights per block, same
/// shapes as the parameters) and returns dL/dz.
inline Eigen::VectorXd backward(const FlowTape& tape, const FlowParams& params, const Eigen::VectorXd& grad_u,
                                double grad_logdet, std::vector<SubnetWeights>& grads) {
  const Eigen::Index half = params.half();
  Eigen::VectorXd g = grad_u;
  Eigen::VectorXd grad_active(half), grad_passive(half), grad_st(params.dim);
  for (std::size_t kk = params.blocks.size(); kk-- > 0;) {
    const auto& block = params.blocks[kk];
    const auto& bt = tape.blocks[kk];
    auto& gw = grads[kk];

    for (Eigen::Index i = 0; i < half; ++i) {
      const double g_out = g[block.permutation[half + i]];
      const double e = std::exp(bt.s_hat[i]);
      grad_active[i] = g_out * e;
      const double g_shat = g_out * bt.active[i] * e + grad_logdet;
      const double th = std::tanh(bt.s_raw[i] / params.clamp);
      grad_st[i] = g_shat * (1.0 - th * th);
      grad_st[half + i] = g_out;
      grad_passive[i] = g[block.permutation[i]];
    }
    const Eigen::VectorXd hidden = bt.pre.cwiseMax(0.0);
    gw.w2.noalias() += grad_st * hidden.transpose();
    gw.b2 += grad_st;
    Eigen::VectorXd grad_pre = block.net.w2.transpose() * grad_st;
    for (Eigen::Index j = 0; j < grad_pre.size(); ++j)
      if (!(bt.pre[j] > 0.0)) grad_pre[j] = 0.0;
    gw.w1.noalias() += grad_pre * bt.passive.transpose();
    gw.b1 += grad_pre;
    grad_passive.noalias() += block.net.w1.transpose() * grad_pre;

    for (Eigen::Index i = 0; i < half; ++i) {
      g[block.permutation[i]] = grad_passive[i];
      g[block.permutation[half + i]] = grad_active[i];
    }
  }
  return g;
}

inline std::vector<SubnetWeights> zero_flow_grads(const FlowParams& params) {
  return std::vector<SubnetWeights>(params.blocks.size(), SubnetWeights::zeros(params.dim, params.hidden));
}

}  // namespace clipflow
