#pragma once

// Mask-space Rashomon set sampling around a reference model.
//
// A mask m characterizes the model x -> f_ref(m * x). The set admitted is
// every mask whose validation log loss is at most (1 + epsilon) * L*, where
// L* is the reference model's own validation loss.

#include "exagree/core.hpp"
#include "exagree/data.hpp"
#include "exagree/models.hpp"

#include <nlohmann/json.hpp>

namespace exagree {

inline constexpr double kMembershipSlack = 1e-12;

enum class Exploration { rejection, boundary_line_search };

inline std::string to_string(Exploration e) {
  return e == Exploration::rejection ? "rejection" : "boundary_line_search";
}

inline Exploration exploration_from_string(const std::string& s) {
  if (s == "rejection") return Exploration::rejection;
  if (s == "boundary_line_search" || s == "line_search") return Exploration::boundary_line_search;
  fail("unknown exploration strategy '" + s + "'");
}

struct RashomonConfig {
  double epsilon = 0.05;
  int n_samples = 500;
  double mask_max = 2.0;
  std::uint64_t seed = 0;
  Exploration exploration = Exploration::boundary_line_search;
  // Rejection proposals are uniform on [1 - r, 1 + r]^p clipped to [0, mask_max].
  // The default covers the whole box.
  double proposal_radius = 1.0;
  int bisection_iters = 12;
  int max_attempts = 0;  // 0 means 20 * n_samples
};

struct RashomonSample {
  Matrix masks;                        // s x p, row 0 is all-ones
  Vector losses;                       // validation log loss per row
  double bound = 0.0;                  // (1 + epsilon) * reference_loss
  double reference_loss = 0.0;
  std::vector<std::int64_t> proposal_index;  // 0 for the identity row
  bool partial = false;                // fewer than n_samples accepted
  int attempts = 0;

  Index size() const { return masks.rows(); }
};

inline double rashomon_bound(double reference_loss, double epsilon) {
  require(epsilon >= 0.0, "epsilon must be non-negative");
  require(reference_loss >= 0.0, "reference loss must be non-negative");
  return (1.0 + epsilon) * reference_loss;
}

template <Predictor Base>
double masked_loss(const Base& base, const Vector& mask, const ValidationView& val) {
  return model_loss(Masked<Base>(base, mask), val.X, val.y);
}

template <Predictor Base>
bool is_in_rashomon(const Vector& mask, const Base& base, const ValidationView& val, double bound) {
  require(mask.size() == base.p(), "mask length must equal p");
  if ((mask.array() < 0.0).any() || !mask.allFinite()) return false;
  return masked_loss(base, mask, val) <= bound + kMembershipSlack;
}

namespace detail {

inline Vector rejection_proposal(Index p, const RashomonConfig& cfg, Rng& rng) {
  const double lo = std::max(0.0, 1.0 - cfg.proposal_radius);
  const double hi = std::min(cfg.mask_max, 1.0 + cfg.proposal_radius);
  std::uniform_real_distribution<double> u(lo, hi);
  Vector m(p);
  for (Index j = 0; j < p; ++j) m[j] = u(rng);
  return m;
}

/// Largest step t with 1 + t * dir inside [0, mask_max]^p.
inline double box_step_limit(const Vector& dir, double mask_max) {
  double t = std::numeric_limits<double>::infinity();
  for (Index j = 0; j < dir.size(); ++j) {
    if (dir[j] > 0) t = std::min(t, (mask_max - 1.0) / dir[j]);
    if (dir[j] < 0) t = std::min(t, 1.0 / -dir[j]);
  }
  return t;
}

}  // namespace detail

/// Proposals are drawn from per-attempt seeded streams, so a given attempt
/// index yields the same candidate regardless of epsilon.
template <Predictor Base>
RashomonSample sample_masks(const Base& base, const ValidationView& val, const RashomonConfig& cfg) {
  require(cfg.epsilon >= 0.0, "epsilon must be non-negative");
  require(cfg.n_samples >= 1, "n_samples must be at least 1");
  require(cfg.mask_max >= 1.0, "mask_max must be at least 1");
  const Index p = base.p();
  RashomonSample out;
  out.reference_loss = model_loss(base, val.X, val.y);
  out.bound = rashomon_bound(out.reference_loss, cfg.epsilon);
  const int budget = cfg.max_attempts > 0 ? cfg.max_attempts : 20 * cfg.n_samples;

  std::vector<Vector> masks{ones(p)};
  std::vector<double> losses{out.reference_loss};
  out.proposal_index.push_back(0);

  int attempt = 0;
  while (static_cast<int>(masks.size()) < cfg.n_samples && attempt < budget) {
    ++attempt;
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(attempt)));
    if (cfg.exploration == Exploration::rejection) {
      Vector m = detail::rejection_proposal(p, cfg, rng);
      const double loss = masked_loss(base, m, val);
      if (loss <= out.bound + kMembershipSlack) {
        masks.push_back(std::move(m));
        losses.push_back(loss);
        out.proposal_index.push_back(attempt);
      }
      continue;
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector dir(p);
    for (Index j = 0; j < p; ++j) dir[j] = normal(rng);
    dir.normalize();
    const double t_max = detail::box_step_limit(dir, cfg.mask_max);
    auto at = [&](double t) { return Vector((ones(p) + t * dir).cwiseMax(0.0).cwiseMin(cfg.mask_max)); };
    double lo = 0.0, lo_loss = out.reference_loss;
    const double hi_loss = masked_loss(base, at(t_max), val);
    if (hi_loss <= out.bound + kMembershipSlack) {
      lo = t_max;
      lo_loss = hi_loss;
    } else {
      double hi = t_max;
      for (int it = 0; it < cfg.bisection_iters; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double loss = masked_loss(base, at(mid), val);
        if (loss <= out.bound + kMembershipSlack) {
          lo = mid;
          lo_loss = loss;
          if (loss >= 0.95 * out.bound) break;
        } else {
          hi = mid;
        }
      }
    }
    if (lo <= 0.0) continue;
    masks.push_back(at(lo));
    losses.push_back(lo_loss);
    out.proposal_index.push_back(attempt);
  }
  out.attempts = attempt;
  out.partial = static_cast<int>(masks.size()) < cfg.n_samples;
  out.masks.resize(static_cast<Index>(masks.size()), p);
  out.losses.resize(static_cast<Index>(masks.size()));
  for (std::size_t i = 0; i < masks.size(); ++i) {
    out.masks.row(static_cast<Index>(i)) = masks[i].transpose();
    out.losses[static_cast<Index>(i)] = losses[i];
  }
  return out;
}

inline nlohmann::json to_json(const RashomonConfig& c) {
  return {{"epsilon", c.epsilon}, {"n_samples", c.n_samples}, {"mask_max", c.mask_max}, {"seed", c.seed},
          {"exploration", to_string(c.exploration)}, {"proposal_radius", c.proposal_radius},
          {"bisection_iters", c.bisection_iters}, {"max_attempts", c.max_attempts}};
}

inline RashomonConfig rashomon_config_from_json(const nlohmann::json& j) {
  RashomonConfig c;
  c.epsilon = j.value("epsilon", c.epsilon);
  c.n_samples = j.value("n_samples", c.n_samples);
  c.mask_max = j.value("mask_max", c.mask_max);
  c.seed = j.value("seed", c.seed);
  c.exploration = exploration_from_string(j.value("exploration", to_string(c.exploration)));
  c.proposal_radius = j.value("proposal_radius", c.proposal_radius);
  c.bisection_iters = j.value("bisection_iters", c.bisection_iters);
  c.max_attempts = j.value("max_attempts", c.max_attempts);
  return c;
}

}  // namespace exagree
