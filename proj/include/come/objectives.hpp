#pragma once

// Differentiable test-time objectives over a [B x K] logit matrix. Every
// objective reduces over the batch with the arithmetic mean.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "come/autodiff.hpp"
#include "come/opinion.hpp"

namespace come {

enum class ObjectiveKind { em, come, pseudo_label, energy };

inline const char* to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::em: return "em";
    case ObjectiveKind::come: return "come";
    case ObjectiveKind::pseudo_label: return "pl";
    case ObjectiveKind::energy: return "energy";
  }
  return "?";
}

inline ObjectiveKind parse_objective(const std::string& s) {
  if (s == "em") return ObjectiveKind::em;
  if (s == "come") return ObjectiveKind::come;
  if (s == "pl" || s == "pseudo_label") return ObjectiveKind::pseudo_label;
  if (s == "energy") return ObjectiveKind::energy;
  throw std::invalid_argument("unknown objective '" + s + "'");
}

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::come;
  double p = 2.0;    // norm order for the stop-gradient reparameterization
  double tau = 1.0;  // magnitude multiplier on the recovered logits
  EvidenceActivation activation = EvidenceActivation::exponential;

  void validate() const {
    if (!(p >= 1.0)) throw std::invalid_argument("objective p must be >= 1");
    if (!(tau > 0.0)) throw std::invalid_argument("objective tau must be > 0");
  }
};

namespace detail {
inline void check_logits(const Tensor& logits, const char* op) {
  if (logits.rank() != 2 || logits.rows() == 0 || logits.cols() == 0) {
    throw ShapeError(std::string(op) + ": expected non-empty [B x K] logits, got " + to_string(logits.shape()));
  }
}
}  // namespace detail

// Mean softmax entropy, via log-softmax.
inline Tensor em_loss(const Tensor& logits) {
  detail::check_logits(logits, "em_loss");
  const Tensor logp = log_softmax_rows(logits);
  const Tensor p = exp(logp);
  return scale(mean(sum(mul(p, logp), 1)), -1.0);
}

// Per row: f / ||f||_p * detach(||f||_p) * tau. Values are unchanged for
// tau = 1; the gradient with respect to f is tangential to f.
inline Tensor come_reparameterize(const Tensor& logits, double p = 2.0, double tau = 1.0) {
  detail::check_logits(logits, "come_reparameterize");
  const Tensor norm = p_norm(logits, p, 1);
  for (std::size_t r = 0; r < norm.size(); ++r) {
    if (!(norm[r] > 0.0)) {
      throw DomainError("come_reparameterize: zero-norm logit row " + std::to_string(r));
    }
  }
  const Tensor direction = div_rows(logits, norm);
  Tensor out = mul_rows(direction, detach(norm));
  return tau == 1.0 ? out : scale(out, tau);
}

// Opinion entropy of already-reparameterized logits, averaged over rows.
inline Tensor opinion_entropy_loss(const Tensor& logits, EvidenceActivation act) {
  detail::check_logits(logits, "opinion_entropy_loss");
  const double k = static_cast<double>(logits.cols());
  // alpha / S and 1 / S in log space so large logits do not overflow.
  const Tensor g = act == EvidenceActivation::exponential ? logits : relu(logits);
  const Tensor lse = logsumexp(g, 1);
  const Tensor inv_strength = exp(scale(lse, -1.0));
  const Tensor beliefs = sub_rows(exp(sub_rows(g, lse)), inv_strength);
  const Tensor uncertainty = scale(inv_strength, k);
  const Tensor raw = concat_cols(beliefs, uncertainty);
  const Tensor mass = clamp(raw, kMassFloor, 1.0);
  std::vector<double> live(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) live[i] = raw[i] > 0.0 ? 1.0 : 0.0;
  const Tensor plogp = mul(mul(mass, log(mass)), Tensor(raw.shape(), std::move(live)));
  return scale(mean(sum(plogp, 1)), -1.0);
}

inline Tensor come_loss(const Tensor& logits, const ObjectiveConfig& cfg) {
  return opinion_entropy_loss(come_reparameterize(logits, cfg.p, cfg.tau), cfg.activation);
}

// Mean negative log-likelihood of the pseudo labels.
inline Tensor pseudo_label_loss(const Tensor& logits, std::span<const std::size_t> pseudo) {
  detail::check_logits(logits, "pseudo_label_loss");
  return scale(mean(gather(log_softmax_rows(logits), pseudo)), -1.0);
}

// Mean free energy, -logsumexp(f).
inline Tensor energy_loss(const Tensor& logits) {
  detail::check_logits(logits, "energy_loss");
  return scale(mean(logsumexp(logits, 1)), -1.0);
}

inline Tensor objective_loss(const Tensor& logits, const ObjectiveConfig& cfg,
                             std::span<const std::size_t> pseudo = {}) {
  switch (cfg.kind) {
    case ObjectiveKind::em: return em_loss(logits);
    case ObjectiveKind::come: return come_loss(logits, cfg);
    case ObjectiveKind::pseudo_label: return pseudo_label_loss(logits, pseudo);
    case ObjectiveKind::energy: return energy_loss(logits);
  }
  throw std::logic_error("unhandled objective kind");
}

}  // namespace come
