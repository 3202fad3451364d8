#pragma once

// Complementary-likelihood training of adapter + flow.
//
// Per-sample term f(x) = (||u||^2 - 2 logdet) / (2C), i.e. the negative
// log-likelihood per dimension without the ln(2 pi)/2 constant, which has no
// gradient. The objective is
//   L = mean_{naturals} f  -  mean_{proxies} f
// with the natural term present in modes N and N+P and the proxy term in P
// and N+P. `paper_eq7_signs` negates L.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "clipflow/detail/binary_io.hpp"
#include "clipflow/error.hpp"
#include "clipflow/feature_adapter.hpp"
#include "clipflow/feature_store.hpp"
#include "clipflow/flow_model.hpp"
#include "clipflow/model_file.hpp"

namespace clipflow {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct ObjectiveOptions {
  TrainMode mode = TrainMode::both;
  bool paper_eq7_signs = false;
  bool adapter_trainable = true;
};

/// Additive offsets applied to adapted features (dequantization noise).
/// Rows match the corresponding batch, columns the flow dimension.
struct FeatureNoise {
  Eigen::MatrixXd natural;
  Eigen::MatrixXd proxy;
};

struct ParamGrads {
  std::optional<Eigen::MatrixXd> adapter;  // absent when the adapter is frozen
  std::vector<SubnetWeights> flow;
};

struct LossAndGrads {
  double loss = 0.0;
  ParamGrads grads;
};

namespace detail {

inline bool uses_naturals(TrainMode m) { return m == TrainMode::natural || m == TrainMode::both; }
inline bool uses_proxies(TrainMode m) { return m == TrainMode::proxy || m == TrainMode::both; }

inline void check_batches(const Eigen::MatrixXd& nat, const Eigen::MatrixXd& proxy, TrainMode mode) {
  if (mode == TrainMode::none) throw ConfigError("training mode not set");
  if (uses_naturals(mode) && nat.rows() == 0) throw ConfigError("mode " + std::string(to_string(mode)) + " requires natural samples");
  if (uses_proxies(mode) && proxy.rows() == 0) throw ConfigError("mode " + std::string(to_string(mode)) + " requires proxy samples");
}

// Accumulates weight * f(x) over the rows of `batch`; when `out` is given,
// also accumulates the gradients of that quantity.
inline double accumulate_term(const Eigen::MatrixXd& batch, const Eigen::MatrixXd* noise, double weight,
                              const Model& model, LossAndGrads* out) {
  const double c = static_cast<double>(model.flow.dim);
  double total = 0.0;
  FlowTape tape;
  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    const Eigen::VectorXd raw = batch.row(i).transpose();
    Eigen::VectorXd z = adapt(raw, model.adapter);
    if (noise) z += noise->row(i).transpose();
    const FlowResult r = forward(z, model.flow, out ? &tape : nullptr);
    total += weight * (r.u.squaredNorm() - 2.0 * r.logdet) / (2.0 * c);
    if (out) {
      const Eigen::VectorXd grad_u = (weight / c) * r.u;
      const Eigen::VectorXd grad_z = backward(tape, model.flow, grad_u, -weight / c, out->grads.flow);
      if (out->grads.adapter) adapt_backward(raw, model.adapter, grad_z, *out->grads.adapter);
    }
  }
  return total;
}

inline void add_into(ParamGrads& dst, const ParamGrads& src) {
  if (dst.adapter) *dst.adapter += *src.adapter;
  for (std::size_t k = 0; k < dst.flow.size(); ++k) {
    dst.flow[k].w1 += src.flow[k].w1;
    dst.flow[k].b1 += src.flow[k].b1;
    dst.flow[k].w2 += src.flow[k].w2;
    dst.flow[k].b2 += src.flow[k].b2;
  }
}

// The two terms accumulate into separate buffers and are summed once, so
// identical natural and proxy batches cancel exactly.
inline double evaluate(const Eigen::MatrixXd& nat, const Eigen::MatrixXd& proxy, const Model& model,
                       const ObjectiveOptions& opts, const FeatureNoise* noise, LossAndGrads* out) {
  check_batches(nat, proxy, opts.mode);
  const double sign = opts.paper_eq7_signs ? -1.0 : 1.0;
  auto term = [&](const Eigen::MatrixXd& batch, const Eigen::MatrixXd* offsets, double weight) {
    if (!out) return accumulate_term(batch, offsets, weight, model, nullptr);
    LossAndGrads local;
    local.grads.flow = zero_flow_grads(model.flow);
    if (out->grads.adapter) local.grads.adapter = Eigen::MatrixXd::Zero(model.adapter.out_dim(), model.adapter.in_dim());
    const double v = accumulate_term(batch, offsets, weight, model, &local);
    add_into(out->grads, local.grads);
    return v;
  };
  double loss = 0.0;
  if (uses_naturals(opts.mode))
    loss += term(nat, noise ? &noise->natural : nullptr, sign / static_cast<double>(nat.rows()));
  if (uses_proxies(opts.mode))
    loss += term(proxy, noise ? &noise->proxy : nullptr, -sign / static_cast<double>(proxy.rows()));
  return loss;
}

}  // namespace detail

/// Training objective on raw (pre-adaptation) feature rows.
inline double loss(const Eigen::MatrixXd& nat, const Eigen::MatrixXd& proxy, const Model& model,
                   const ObjectiveOptions& opts, const FeatureNoise* noise = nullptr) {
  return detail::evaluate(nat, proxy, model, opts, noise, nullptr);
}

/// Loss and its exact gradient with respect to every trainable parameter.
inline LossAndGrads gradients(const Eigen::MatrixXd& nat, const Eigen::MatrixXd& proxy, const Model& model,
                              const ObjectiveOptions& opts, const FeatureNoise* noise = nullptr) {
  LossAndGrads out;
  out.grads.flow = zero_flow_grads(model.flow);
  if (opts.adapter_trainable) out.grads.adapter = Eigen::MatrixXd::Zero(model.adapter.out_dim(), model.adapter.in_dim());
  out.loss = detail::evaluate(nat, proxy, model, opts, noise, &out);
  return out;
}

// ---------------------------------------------------------------------------
// Adam

struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
};

inline void adam_step(const std::vector<std::span<double>>& params, const std::vector<std::span<const double>>& grads,
                      OptimizerState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw ConfigError("adam: parameter/gradient shape mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].size() != grads[i].size()) throw ConfigError("adam: parameter/gradient shape mismatch");
  if (state.first_moment.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size())
    throw ConfigError("adam: optimizer state shape mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.first_moment[i].size() != params[i].size() || state.second_moment[i].size() != params[i].size())
      throw ConfigError("adam: optimizer state shape mismatch");

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double g = grads[i][j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      params[i][j] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

namespace detail {

template <typename Mat>
std::span<double> as_span(Mat& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
template <typename Mat>
std::span<const double> as_cspan(const Mat& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

}  // namespace detail

/// Parameter blocks in optimizer order: adapter weight (if trainable), then
/// w1, b1, w2, b2 for each coupling block.
inline std::vector<std::span<double>> parameter_blocks(Model& model, bool include_adapter) {
  std::vector<std::span<double>> out;
  if (include_adapter) out.push_back(detail::as_span(model.adapter.weight));
  for (auto& b : model.flow.blocks) {
    out.push_back(detail::as_span(b.net.w1));
    out.push_back(detail::as_span(b.net.b1));
    out.push_back(detail::as_span(b.net.w2));
    out.push_back(detail::as_span(b.net.b2));
  }
  return out;
}

inline std::vector<std::span<const double>> gradient_blocks(const ParamGrads& g) {
  std::vector<std::span<const double>> out;
  if (g.adapter) out.push_back(detail::as_cspan(*g.adapter));
  for (const auto& b : g.flow) {
    out.push_back(detail::as_cspan(b.w1));
    out.push_back(detail::as_cspan(b.b1));
    out.push_back(detail::as_cspan(b.w2));
    out.push_back(detail::as_cspan(b.b2));
  }
  return out;
}

inline void adam_step(Model& model, const ParamGrads& grads, OptimizerState& state, const AdamConfig& cfg) {
  adam_step(parameter_blocks(model, grads.adapter.has_value()), gradient_blocks(grads), state, cfg);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  TrainMode mode = TrainMode::both;
  AdamConfig adam;
  std::size_t batch_size = 128;
  std::size_t epochs = 0;  // 0 selects the per-mode default
  std::uint64_t seed = 0;
  FlowConfig flow;
  bool use_dr = true;  // false: identity adapter (flow.dim must equal D_raw), never trained
  bool normalize = true;
  bool freeze_adapter = false;
  bool paper_eq7_signs = false;
  double dequant_sigma = 0.0;
};

inline std::size_t default_epochs(TrainMode mode) { return mode == TrainMode::both ? 10 : 30; }

struct TrainingData {
  Eigen::MatrixXd naturals;  // rows are raw feature vectors
  Eigen::MatrixXd proxies;
};

struct TrainResult {
  Model model;
  std::vector<double> epoch_loss;
};

namespace detail {

inline Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& src, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), src.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = src.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace detail

/// Builds the untrained model a given config and input dimension start from.
inline Model initial_model(const TrainConfig& cfg, Eigen::Index in_dim) {
  Model m;
  m.meta.mode = cfg.mode;
  m.meta.train_seed = cfg.seed;
  m.meta.adapter_seed = detail::mix_seed(cfg.seed, 1);
  m.meta.flow_seed = detail::mix_seed(cfg.seed, 2);
  m.meta.paper_eq7_signs = cfg.paper_eq7_signs;
  m.meta.frozen_adapter = cfg.freeze_adapter || !cfg.use_dr;
  if (cfg.use_dr) {
    m.adapter = init_adapter(in_dim, cfg.flow.dim, m.meta.adapter_seed);
  } else {
    if (in_dim != cfg.flow.dim)
      throw ConfigError("without DR the flow dimension must equal the raw feature dimension (" +
                        std::to_string(in_dim) + ")");
    m.adapter = identity_adapter(in_dim);
  }
  m.adapter.normalize = cfg.normalize;
  m.flow = init_flow(cfg.flow, m.meta.flow_seed);
  return m;
}

inline TrainResult train(const TrainingData& data, const TrainConfig& cfg) {
  if (!(cfg.adam.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (cfg.batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (cfg.dequant_sigma < 0.0) throw ConfigError("dequantization sigma must be non-negative");
  detail::check_batches(data.naturals, data.proxies, cfg.mode);
  validate_flow_config(cfg.flow);
  const bool use_nat = detail::uses_naturals(cfg.mode);
  const bool use_proxy = detail::uses_proxies(cfg.mode);
  if (use_nat && use_proxy && data.naturals.cols() != data.proxies.cols())
    throw ConfigError("natural and proxy features have different dimensions");
  const Eigen::Index in_dim = use_nat ? data.naturals.cols() : data.proxies.cols();

  TrainResult result;
  result.model = initial_model(cfg, in_dim);
  Model& model = result.model;

  const ObjectiveOptions opts{cfg.mode, cfg.paper_eq7_signs, !model.meta.frozen_adapter};
  const std::size_t epochs = cfg.epochs ? cfg.epochs : default_epochs(cfg.mode);
  const std::size_t n_nat = use_nat ? static_cast<std::size_t>(data.naturals.rows()) : 0;
  const std::size_t n_proxy = use_proxy ? static_cast<std::size_t>(data.proxies.rows()) : 0;
  // Proxies forged from the naturals row-for-row are batched with them.
  const bool paired = use_nat && use_proxy && n_nat == n_proxy;
  const std::size_t epoch_len = std::max(n_nat, n_proxy);
  const std::size_t B = cfg.batch_size;

  std::mt19937_64 rng(detail::mix_seed(cfg.seed, 3));
  std::normal_distribution<double> noise_dist(0.0, cfg.dequant_sigma > 0.0 ? cfg.dequant_sigma : 1.0);
  OptimizerState state;
  const Eigen::MatrixXd empty;

  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::vector<std::size_t> nat_order, proxy_order;
    if (use_nat) nat_order = detail::shuffled(n_nat, rng);
    if (paired) {
      proxy_order = nat_order;
    } else if (use_proxy) {
      proxy_order = detail::shuffled(n_proxy, rng);
    }

    double epoch_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < epoch_len; start += B, ++steps, ++global_step) {
      const std::size_t b = std::min(B, epoch_len - start);
      std::vector<std::size_t> idx(b);
      Eigen::MatrixXd nat_batch, proxy_batch;
      if (use_nat) {
        for (std::size_t i = 0; i < b; ++i) idx[i] = nat_order[(start + i) % n_nat];
        nat_batch = detail::gather_rows(data.naturals, idx);
      }
      if (use_proxy) {
        for (std::size_t i = 0; i < b; ++i) idx[i] = proxy_order[(start + i) % n_proxy];
        proxy_batch = detail::gather_rows(data.proxies, idx);
      }

      std::optional<FeatureNoise> noise;
      if (cfg.dequant_sigma > 0.0) {
        noise.emplace();
        auto draw = [&](Eigen::Index rows) {
          Eigen::MatrixXd n(rows, model.flow.dim);
          for (Eigen::Index k = 0; k < n.size(); ++k) n.data()[k] = noise_dist(rng);
          return n;
        };
        noise->natural = draw(nat_batch.rows());
        noise->proxy = draw(proxy_batch.rows());
      }

      LossAndGrads lg = gradients(use_nat ? nat_batch : empty, use_proxy ? proxy_batch : empty, model, opts,
                                  noise ? &*noise : nullptr);
      if (!std::isfinite(lg.loss))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(steps) +
                           " (step " + std::to_string(global_step) + ")");
      adam_step(model, lg.grads, state, cfg.adam);
      epoch_sum += lg.loss;
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(steps));
  }

  round_to_file_precision(model);
  return result;
}

/// Loads the train-role entries of a manifest (label 0 = natural,
/// label 1 = proxy) and trains on them.
inline TrainResult train(const DatasetManifest& manifest, const TrainConfig& cfg) {
  const auto entries = manifest.with_role(Role::train);
  TrainingData data;
  data.naturals = load_features(entries, Label::natural).cast<double>();
  data.proxies = load_features(entries, Label::generated).cast<double>();
  if (detail::uses_naturals(cfg.mode) && data.naturals.rows() == 0)
    throw ConfigError("mode " + std::string(to_string(cfg.mode)) + " needs natural (label 0) train features");
  if (detail::uses_proxies(cfg.mode) && data.proxies.rows() == 0)
    throw ConfigError("mode " + std::string(to_string(cfg.mode)) + " needs proxy (label 1) train features");
  return train(data, cfg);
}

}  // namespace clipflow
