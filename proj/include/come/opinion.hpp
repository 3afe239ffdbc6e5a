#pragma once

// Subjective-logic view of classifier logits: evidence, Dirichlet parameters,
// opinions [b_1..b_K, u], expected class probabilities and the closed-form
// uncertainty / confidence bounds.
//
// Two uncertainty masses live side by side:
//   uncertainty_mass_sl  = K / S          (S = sum of Dirichlet alphas)
//   uncertainty_mass_lse = K / LSE(f)     (used by the norm and confidence bounds)
// They are different quantities; S = exp(LSE(f)) under the exponential activation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace come {

enum class EvidenceActivation {
  exponential,            // e = exp(f) - 1, alpha = exp(f)
  rectified_exponential,  // e = exp(max(f, 0)) - 1, alpha >= 1
};

inline const char* to_string(EvidenceActivation a) {
  return a == EvidenceActivation::exponential ? "exponential" : "rectified_exponential";
}

inline EvidenceActivation parse_activation(const std::string& s) {
  if (s == "exponential") return EvidenceActivation::exponential;
  if (s == "rectified_exponential" || s == "rectified") return EvidenceActivation::rectified_exponential;
  throw std::invalid_argument("unknown evidence activation '" + s + "'");
}

struct DirichletParams {
  std::vector<double> alpha;
  double strength = 0.0;
  std::size_t k() const { return alpha.size(); }
};

struct Opinion {
  std::vector<double> beliefs;
  double uncertainty = 1.0;
  std::size_t k() const { return beliefs.size(); }
};

// Masses below this are clamped before the log in opinion_entropy.
inline constexpr double kMassFloor = 1e-12;

inline double logsumexp(std::span<const double> f) {
  if (f.empty()) throw std::invalid_argument("logsumexp of empty vector");
  const double mx = *std::max_element(f.begin(), f.end());
  double acc = 0.0;
  for (double v : f) acc += std::exp(v - mx);
  return mx + std::log(acc);
}

inline std::vector<double> softmax(std::span<const double> f) {
  const double lse = logsumexp(f);
  std::vector<double> p(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) p[i] = std::exp(f[i] - lse);
  return p;
}

inline double p_norm(std::span<const double> f, double p) {
  if (!(p >= 1.0)) throw std::invalid_argument("p_norm: order must be >= 1");
  double acc = 0.0;
  for (double v : f) acc += std::pow(std::abs(v), p);
  return std::pow(acc, 1.0 / p);
}

inline DirichletParams dirichlet_from_logits(std::span<const double> f, EvidenceActivation act) {
  if (f.size() < 2) throw std::invalid_argument("dirichlet_from_logits: need at least 2 classes");
  DirichletParams d;
  d.alpha.resize(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double x = act == EvidenceActivation::exponential ? f[i] : std::max(f[i], 0.0);
    d.alpha[i] = std::exp(x);
    d.strength += d.alpha[i];
  }
  return d;
}

inline Opinion opinion_from_dirichlet(const DirichletParams& d) {
  if (!(d.strength > 0.0)) throw std::invalid_argument("opinion_from_dirichlet: strength must be positive");
  Opinion m;
  m.beliefs.resize(d.k());
  for (std::size_t i = 0; i < d.k(); ++i) m.beliefs[i] = (d.alpha[i] - 1.0) / d.strength;
  m.uncertainty = static_cast<double>(d.k()) / d.strength;
  return m;
}

inline std::vector<double> expected_probability(const DirichletParams& d) {
  if (!(d.strength > 0.0)) throw std::invalid_argument("expected_probability: strength must be positive");
  std::vector<double> p(d.k());
  for (std::size_t i = 0; i < d.k(); ++i) p[i] = d.alpha[i] / d.strength;
  return p;
}

// Shannon entropy of [b_1..b_K, u] with 0 log 0 = 0. Positive masses are
// clamped to [1e-12, 1]; non-positive ones (negative beliefs from the
// exponential activation) contribute 0.
inline double opinion_entropy(const Opinion& m) {
  auto term = [](double mass) {
    if (!(mass > 0.0)) return 0.0;
    const double c = std::clamp(mass, kMassFloor, 1.0);
    return -c * std::log(c);
  };
  double h = term(m.uncertainty);
  for (double b : m.beliefs) h += term(b);
  return h;
}

inline double uncertainty_mass_sl(std::span<const double> f, EvidenceActivation act) {
  return opinion_from_dirichlet(dirichlet_from_logits(f, act)).uncertainty;
}

inline double uncertainty_mass_lse(std::span<const double> f) {
  const double lse = logsumexp(f);
  if (!(lse > 0.0)) {
    throw std::domain_error("uncertainty_mass_lse: logsumexp must be positive, got " + std::to_string(lse));
  }
  return static_cast<double>(f.size()) / lse;
}

struct UncertaintyBounds {
  double lower;
  double upper;
};

// K / (||f||_p + ln K) <= K / LSE(f) <= K^(1 + 1/p) / ||f||_p, valid for
// strictly positive logits.
inline UncertaintyBounds lemma1_bounds(std::span<const double> f, double p) {
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!(f[i] > 0.0)) {
      throw std::domain_error("lemma1_bounds: logits must be strictly positive; index " + std::to_string(i) +
                              " is " + std::to_string(f[i]));
    }
  }
  const double k = static_cast<double>(f.size());
  const double norm = p_norm(f, p);
  return {k / (norm + std::log(k)), std::pow(k, 1.0 + 1.0 / p) / norm};
}

// Upper bound on max-class probability when |u - u0| <= delta:
// 1 / (1 + (K - 1) exp(-K / (u0 - delta))).
inline double theorem1_confidence_bound(double u0, double delta, std::size_t k) {
  if (k < 2) throw std::invalid_argument("theorem1_confidence_bound: need at least 2 classes");
  if (!(u0 - delta > 0.0)) throw std::domain_error("theorem1_confidence_bound: requires u0 > delta");
  const double kk = static_cast<double>(k);
  return 1.0 / (1.0 + (kk - 1.0) * std::exp(-kk / (u0 - delta)));
}

}  // namespace come
