// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "miggrpo/reward.hpp"
#include "miggrpo/rng.hpp"
#include "miggrpo/vocab.hpp"

namespace miggrpo {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct PolicyDims {
  int vocab = 32;
  int features = 32;
  int slots = 16;

  friend bool operator==(const PolicyDims&, const PolicyDims&) = default;
};

/// Low-rank delta A[slot] * B[slot] on top of each slot's weight matrix.
struct LoraAdapter {
  int rank = 4;
  std::vector<MatrixXd> A;  // vocab x rank
  std::vector<MatrixXd> B;  // rank x features
};

/// Slot-factorized policy: slot t emits a token from
/// softmax((W[t] + A[t] B[t]) f + b[t]) independently of the other slots.
/// The last vocabulary id is EOS; slots after the first EOS are not emitted.
///
/// The same type doubles as the gradient container.
struct PolicyParams {
  PolicyDims dims;
  std::vector<MatrixXd> W;  // vocab x features
  std::vector<VectorXd> b;  // vocab
  std::optional<LoraAdapter> adapter;

  int eos() const { return dims.vocab - 1; }

  static PolicyParams zeros(PolicyDims dims) {
    if (dims.vocab < 2 || dims.features < 1 || dims.slots < 1) throw std::invalid_argument("bad policy dimensions");
    PolicyParams p;
    p.dims = dims;
    p.W.assign(static_cast<std::size_t>(dims.slots), MatrixXd::Zero(dims.vocab, dims.features));
    p.b.assign(static_cast<std::size_t>(dims.slots), VectorXd::Zero(dims.vocab));
    return p;
  }

  /// Gaussian init with standard deviation `scale`.
  static PolicyParams random(PolicyDims dims, std::uint64_t seed, double scale) {
    PolicyParams p = zeros(dims);
    Rng rng(derive_seed(seed, "policy-init"));
    for (auto& w : p.W) {
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = scale * rng.normal();
    }
    for (auto& v : p.b) {
      for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = scale * rng.normal();
    }
    return p;
  }

  /// Same shape, all zero (including the adapter, when present).
  PolicyParams zeros_like() const {
    PolicyParams z = zeros(dims);
    if (adapter) {
      LoraAdapter a{adapter->rank, {}, {}};
      for (const auto& m : adapter->A) a.A.push_back(MatrixXd::Zero(m.rows(), m.cols()));
      for (const auto& m : adapter->B) a.B.push_back(MatrixXd::Zero(m.rows(), m.cols()));
      z.adapter = std::move(a);
    }
    return z;
  }

  friend bool operator==(const PolicyParams& x, const PolicyParams& y) {
    if (!(x.dims == y.dims) || x.adapter.has_value() != y.adapter.has_value()) return false;
    for (std::size_t s = 0; s < x.W.size(); ++s) {
      if (x.W[s] != y.W[s] || x.b[s] != y.b[s]) return false;
    }
    if (x.adapter) {
      if (x.adapter->rank != y.adapter->rank) return false;
      for (std::size_t s = 0; s < x.W.size(); ++s) {
        if (x.adapter->A[s] != y.adapter->A[s] || x.adapter->B[s] != y.adapter->B[s]) return false;
      }
    }
    return true;
  }
};

/// Attaches a fresh adapter: B = 0 so the delta starts at zero, A Gaussian
/// with standard deviation `scale`.
inline void attach_adapter(PolicyParams& p, int rank, std::uint64_t seed, double scale) {
  if (rank < 1 || rank >= std::min(p.dims.vocab, p.dims.features)) {
    throw std::invalid_argument("adapter rank must satisfy 1 <= r < min(|V|, d)");
  }
  Rng rng(derive_seed(seed, "lora-init"));
  LoraAdapter a{rank, {}, {}};
  for (int s = 0; s < p.dims.slots; ++s) {
    MatrixXd A(p.dims.vocab, rank);
    for (Eigen::Index i = 0; i < A.rows(); ++i)
      for (Eigen::Index j = 0; j < A.cols(); ++j) A(i, j) = scale * rng.normal();
    a.A.push_back(std::move(A));
    a.B.push_back(MatrixXd::Zero(rank, p.dims.features));
  }
  p.adapter = std::move(a);
}

/// Which parameter groups an update may touch.
enum class TrainMask { kAll, kBaseOnly, kAdapterOnly };

namespace detail {

inline Eigen::Map<const VectorXd> as_vector(std::span<const double> f) {
  return {f.data(), static_cast<Eigen::Index>(f.size())};
}

inline void check_features(const PolicyParams& p, std::span<const double> f) {
  if (static_cast<int>(f.size()) != p.dims.features) {
    throw std::invalid_argument("feature dimension " + std::to_string(f.size()) + " does not match policy dimension " +
                                std::to_string(p.dims.features));
  }
}

inline void check_slot(const PolicyParams& p, int slot) {
  if (slot < 0 || slot >= p.dims.slots) throw std::out_of_range("slot index out of range");
}

}  // namespace detail

inline VectorXd logits(const PolicyParams& p, std::span<const double> features, int slot) {
  detail::check_features(p, features);
  detail::check_slot(p, slot);
  const auto f = detail::as_vector(features);
  const auto s = static_cast<std::size_t>(slot);
  VectorXd z = p.W[s] * f + p.b[s];
  if (p.adapter) z += p.adapter->A[s] * (p.adapter->B[s] * f);
  return z;
}

inline VectorXd log_softmax(const VectorXd& z) {
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return z.array() - lse;
}

inline VectorXd softmax(const VectorXd& z) { return log_softmax(z).array().exp(); }

struct Rollout {
  TokenSeq tokens;
  std::vector<double> per_slot_logprob;
  double total_logprob = 0.0;
  std::string rendered_text;
  std::optional<RewardBreakdown> reward;
};

/// Samples slot by slot from softmax(logits / temperature) until EOS. The
/// recorded log-probabilities are under the untempered policy. One uniform
/// draw per slot (inverse CDF), so nearby parameters yield coupled samples.
inline Rollout sample(const PolicyParams& p, std::span<const double> features, double temperature, std::uint64_t seed,
                      const Vocabulary& vocab) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (vocab.size() != p.dims.vocab) throw std::invalid_argument("vocabulary size does not match policy");
  Rng rng(seed);
  Rollout r;
  for (int slot = 0; slot < p.dims.slots; ++slot) {
    const VectorXd z = logits(p, features, slot);
    const VectorXd logp = log_softmax(z);
    const VectorXd tempered = softmax(z / temperature);
    const double u = rng.uniform();
    double acc = 0.0;
    Token tok = 0;
    for (Eigen::Index k = 0; k < tempered.size(); ++k) {
      if (tempered(k) <= 0.0) continue;
      tok = static_cast<Token>(k);
      acc += tempered(k);
      if (u < acc) break;
    }
    r.tokens.push_back(tok);
    r.per_slot_logprob.push_back(logp(tok));
    r.total_logprob += logp(tok);
    if (tok == p.eos()) break;
  }
  r.rendered_text = render(r.tokens, vocab);
  return r;
}

/// Argmax per slot until EOS (first index wins ties).
inline TokenSeq greedy_decode(const PolicyParams& p, std::span<const double> features) {
  TokenSeq out;
  for (int slot = 0; slot < p.dims.slots; ++slot) {
    const VectorXd z = logits(p, features, slot);
    Eigen::Index k = 0;
    z.maxCoeff(&k);
    out.push_back(static_cast<Token>(k));
    if (out.back() == p.eos()) break;
  }
  return out;
}

namespace detail {

inline void check_tokens(const PolicyParams& p, std::span<const Token> tokens) {
  if (static_cast<int>(tokens.size()) > p.dims.slots) throw std::invalid_argument("token sequence longer than slot count");
  for (Token t : tokens) {
    if (t < 0 || t >= p.dims.vocab) throw std::out_of_range("token " + std::to_string(t) + " outside vocabulary");
  }
}

}  // namespace detail

/// log pi(tokens | features), summed over emitted slots (through first EOS).
inline double sequence_logprob(const PolicyParams& p, std::span<const double> features, std::span<const Token> tokens) {
  detail::check_tokens(p, tokens);
  double total = 0.0;
  for (std::size_t slot = 0; slot < tokens.size(); ++slot) {
    total += log_softmax(logits(p, features, static_cast<int>(slot)))(tokens[slot]);
    if (tokens[slot] == p.eos()) break;
  }
  return total;
}

/// Backpropagates a logit-space gradient for one slot into `grad`, scaled.
inline void accumulate_logit_gradient(const PolicyParams& p, std::span<const double> features, int slot,
                                      const VectorXd& dlogits, double scale, PolicyParams& grad) {
  const auto f = detail::as_vector(features);
  const auto s = static_cast<std::size_t>(slot);
  grad.W[s].noalias() += scale * dlogits * f.transpose();
  grad.b[s] += scale * dlogits;
  if (p.adapter) {
    if (!grad.adapter) throw std::invalid_argument("gradient buffer lacks adapter storage");
    const VectorXd bf = p.adapter->B[s] * f;
    grad.adapter->A[s].noalias() += scale * dlogits * bf.transpose();
    grad.adapter->B[s].noalias() += scale * (p.adapter->A[s].transpose() * dlogits) * f.transpose();
  }
}

/// Adds scale * grad log pi(tokens | features) into `grad`. Per slot the
/// logit gradient is one_hot(token) - softmax(logits).
inline void accumulate_logprob_gradient(const PolicyParams& p, std::span<const double> features,
                                        std::span<const Token> tokens, double scale, PolicyParams& grad) {
  detail::check_tokens(p, tokens);
  for (std::size_t slot = 0; slot < tokens.size(); ++slot) {
    VectorXd r = -softmax(logits(p, features, static_cast<int>(slot)));
    r(tokens[slot]) += 1.0;
    accumulate_logit_gradient(p, features, static_cast<int>(slot), r, scale, grad);
    if (tokens[slot] == p.eos()) break;
  }
}

inline PolicyParams logprob_gradient(const PolicyParams& p, std::span<const double> features,
                                     std::span<const Token> tokens) {
  PolicyParams g = p.zeros_like();
  accumulate_logprob_gradient(p, features, tokens, 1.0, g);
  return g;
}

/// Categorical KL(softmax(zp) || softmax(zq)).
inline double categorical_kl(const VectorXd& zp, const VectorXd& zq) {
  const VectorXd lp = log_softmax(zp);
  const VectorXd lq = log_softmax(zq);
  const double kl = (lp.array().exp() * (lp - lq).array()).sum();
  return std::max(0.0, kl);
}

/// Sum over slots of the per-slot categorical KL(p || q).
inline double kl_divergence(const PolicyParams& p, const PolicyParams& q, std::span<const double> features) {
  if (!(p.dims == q.dims)) throw std::invalid_argument("KL between policies of different shapes");
  double total = 0.0;
  for (int slot = 0; slot < p.dims.slots; ++slot) total += categorical_kl(logits(p, features, slot), logits(q, features, slot));
  return total;
}

/// Adds scale * d/d(theta_p) KL(p || q) into `grad`. Per slot the logit
/// gradient is p_j (log p_j - log q_j - KL).
inline void accumulate_kl_gradient(const PolicyParams& p, const PolicyParams& q, std::span<const double> features,
                                   double scale, PolicyParams& grad) {
  for (int slot = 0; slot < p.dims.slots; ++slot) {
    const VectorXd lp = log_softmax(logits(p, features, slot));
    const VectorXd lq = log_softmax(logits(q, features, slot));
    const VectorXd prob = lp.array().exp();
    const VectorXd diff = lp - lq;
    const double kl = prob.dot(diff);
    const VectorXd d = prob.array() * (diff.array() - kl);
    accumulate_logit_gradient(p, features, slot, d, scale, grad);
  }
}

struct MergeResult {
  PolicyParams params;
  bool merged = false;  // false: no adapter was present, params returned as-is
};

/// Folds the adapter into the base weights: W <- W + A B.
inline MergeResult merge_adapter(const PolicyParams& p) {
  MergeResult out{p, false};
  if (!p.adapter) return out;
  for (std::size_t s = 0; s < out.params.W.size(); ++s) out.params.W[s] += p.adapter->A[s] * p.adapter->B[s];
  out.params.adapter.reset();
  out.merged = true;
  return out;
}

// ---------------------------------------------------------------------------
// Parameter arithmetic

/// dst += alpha * src over the groups selected by `mask`.
inline void axpy(PolicyParams& dst, double alpha, const PolicyParams& src, TrainMask mask = TrainMask::kAll) {
  if (!(dst.dims == src.dims)) throw std::invalid_argument("axpy on mismatched shapes");
  if (mask != TrainMask::kAdapterOnly) {
    for (std::size_t s = 0; s < dst.W.size(); ++s) {
      dst.W[s] += alpha * src.W[s];
      dst.b[s] += alpha * src.b[s];
    }
  }
  if (mask != TrainMask::kBaseOnly && dst.adapter && src.adapter) {
    for (std::size_t s = 0; s < dst.W.size(); ++s) {
      dst.adapter->A[s] += alpha * src.adapter->A[s];
      dst.adapter->B[s] += alpha * src.adapter->B[s];
    }
  }
}

/// Flat view in checkpoint order: W (slot, row, col), b, then A and B.
inline std::vector<double> flatten(const PolicyParams& p) {
  std::vector<double> out;
  for (const auto& w : p.W)
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) out.push_back(w(i, j));
  for (const auto& v : p.b)
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  if (p.adapter) {
    for (const auto* group : {&p.adapter->A, &p.adapter->B})
      for (const auto& m : *group)
        for (Eigen::Index i = 0; i < m.rows(); ++i)
          for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(m(i, j));
  }
  return out;
}

/// Inverse of flatten into an existing shape.
inline void unflatten(std::span<const double> flat, PolicyParams& p) {
  std::size_t k = 0;
  auto next = [&]() {
    if (k >= flat.size()) throw std::invalid_argument("flat parameter vector too short");
    return flat[k++];
  };
  for (auto& w : p.W)
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = next();
  for (auto& v : p.b)
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = next();
  if (p.adapter) {
    for (auto* group : {&p.adapter->A, &p.adapter->B})
      for (auto& m : *group)
        for (Eigen::Index i = 0; i < m.rows(); ++i)
          for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = next();
  }
  if (k != flat.size()) throw std::invalid_argument("flat parameter vector too long");
}

inline bool all_finite(const PolicyParams& p) {
  for (double v : flatten(p)) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace miggrpo
