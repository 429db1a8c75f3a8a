#pragma once

// Global feature attributions: permutation importance with gradient signs,
// logistic-regression ground truth, gradient baselines, and the
// mask -> attribution training table.

#include "exagree/core.hpp"
#include "exagree/data.hpp"
#include "exagree/models.hpp"
#include "exagree/rashomon.hpp"

namespace exagree {

struct AttributionDataset {
  Matrix masks;         // s x p
  Matrix attributions;  // s x p, row-aligned with masks
};

/// Mean analytic input gradient over the rows of X.
template <Predictor M>
Vector mean_input_gradient(const M& model, const Matrix& X) {
  Vector g = Vector::Zero(model.p());
  for (Index i = 0; i < X.rows(); ++i) g += model.input_gradient(X.row(i).transpose());
  return g / static_cast<double>(std::max<Index>(X.rows(), 1));
}

/// magnitude_j = max(0, mean over repeats of loss(column j permuted) - loss)
/// sign_j      = sign of the mean input gradient, zero resolved to +
template <Predictor M>
AttributionVector permutation_fis(const M& model, const ValidationView& val, int n_repeats, std::uint64_t seed) {
  require(n_repeats >= 1, "n_repeats must be at least 1");
  const Index p = model.p();
  require(val.X.cols() == p, "dimension mismatch in permutation_fis");
  const double base_loss = model_loss(model, val.X, val.y);
  Matrix work = val.X;
  Vector delta = Vector::Zero(p);
  std::vector<Index> perm(static_cast<std::size_t>(val.X.rows()));
  for (int r = 0; r < n_repeats; ++r) {
    for (Index j = 0; j < p; ++j) {
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(r) * 1000003ULL + static_cast<std::uint64_t>(j)));
      std::iota(perm.begin(), perm.end(), Index{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      for (Index i = 0; i < work.rows(); ++i) work(i, j) = val.X(perm[static_cast<std::size_t>(i)], j);
      delta[j] += model_loss(model, work, val.y) - base_loss;
      work.col(j) = val.X.col(j);
    }
  }
  const Vector grad = mean_input_gradient(model, val.X);
  AttributionVector out;
  out.method = "permutation_fis";
  out.values.resize(p);
  for (Index j = 0; j < p; ++j) {
    const double magnitude = std::max(0.0, delta[j] / n_repeats);
    out.values[j] = (grad[j] < 0.0 && magnitude > 0.0) ? -magnitude : magnitude;
  }
  return out;
}

inline AttributionVector ground_truth_lr(const LinearModel& m) {
  return {m.weights, "lr_coefficients", "reference"};
}

enum class BaselineKind { random, vanilla_grad, grad_x_input, integrated_gradients, smoothgrad };

inline BaselineKind baseline_from_string(const std::string& s) {
  if (s == "random") return BaselineKind::random;
  if (s == "vanilla_grad") return BaselineKind::vanilla_grad;
  if (s == "grad_x_input") return BaselineKind::grad_x_input;
  if (s == "integrated_gradients") return BaselineKind::integrated_gradients;
  if (s == "smoothgrad") return BaselineKind::smoothgrad;
  fail("unsupported explainer kind '" + s + "'");
}

inline std::string to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::random: return "random";
    case BaselineKind::vanilla_grad: return "vanilla_grad";
    case BaselineKind::grad_x_input: return "grad_x_input";
    case BaselineKind::integrated_gradients: return "integrated_gradients";
    case BaselineKind::smoothgrad: return "smoothgrad";
  }
  return "?";
}

struct BaselineParams {
  int ig_steps = 50;
  int smoothgrad_samples = 25;
  double smoothgrad_sigma = 0.1;  // fraction of each feature's std
};

/// Integrated gradients from a zero baseline, left Riemann sum.
template <Predictor M>
Vector integrated_gradients(const M& model, const Vector& x, int steps) {
  Vector acc = Vector::Zero(x.size());
  for (int s = 0; s < steps; ++s) acc += model.input_gradient((static_cast<double>(s) / steps) * x);
  return x.cwiseProduct(acc) / static_cast<double>(steps);
}

/// Instance-averaged gradient explainers.
template <Predictor M>
AttributionVector explain_baseline(BaselineKind kind, const M& model, const ValidationView& val,
                                   const BaselineParams& params, std::uint64_t seed) {
  const Index p = model.p();
  const Index n = val.X.rows();
  AttributionVector out;
  out.method = to_string(kind);
  out.values = Vector::Zero(p);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  switch (kind) {
    case BaselineKind::random:
      for (Index j = 0; j < p; ++j) out.values[j] = normal(rng);
      return out;
    case BaselineKind::vanilla_grad:
      out.values = mean_input_gradient(model, val.X);
      return out;
    case BaselineKind::grad_x_input:
      for (Index i = 0; i < n; ++i) {
        const Vector x = val.X.row(i).transpose();
        out.values += model.input_gradient(x).cwiseProduct(x);
      }
      break;
    case BaselineKind::integrated_gradients:
      require(params.ig_steps >= 1, "ig_steps must be at least 1");
      for (Index i = 0; i < n; ++i) out.values += integrated_gradients(model, Vector(val.X.row(i).transpose()), params.ig_steps);
      break;
    case BaselineKind::smoothgrad: {
      require(params.smoothgrad_samples >= 1, "smoothgrad_samples must be at least 1");
      Vector sd(p);
      for (Index j = 0; j < p; ++j) {
        const double mu = val.X.col(j).mean();
        sd[j] = std::sqrt((val.X.col(j).array() - mu).square().sum() / static_cast<double>(std::max<Index>(n, 1)));
      }
      for (Index i = 0; i < n; ++i) {
        for (int s = 0; s < params.smoothgrad_samples; ++s) {
          Vector x = val.X.row(i).transpose();
          for (Index j = 0; j < p; ++j) x[j] += params.smoothgrad_sigma * sd[j] * normal(rng);
          out.values += model.input_gradient(x);
        }
      }
      out.values /= static_cast<double>(params.smoothgrad_samples);
      break;
    }
  }
  out.values /= static_cast<double>(std::max<Index>(n, 1));
  return out;
}

enum class RowSeeding { shared, per_row };

/// Row i holds permutation_fis of the i-th masked model. With shared seeding
/// every row uses the same permutations; per_row seeds row i with seed xor i.
template <Predictor Base>
AttributionDataset build_attribution_dataset(const RashomonSample& sample, const Base& base, const ValidationView& val,
                                             int n_repeats, std::uint64_t seed, RowSeeding seeding = RowSeeding::shared) {
  AttributionDataset d;
  d.masks = sample.masks;
  d.attributions.resize(sample.masks.rows(), sample.masks.cols());
  for (Index i = 0; i < sample.masks.rows(); ++i) {
    const Masked<Base> m(base, sample.masks.row(i).transpose());
    d.attributions.row(i) = permutation_fis(m, val, n_repeats, seeding == RowSeeding::per_row ? seed ^ static_cast<std::uint64_t>(i) : seed).values.transpose();
  }
  return d;
}

/// Per-feature [min, max] of attributions across the sample.
struct AttributionRange {
  Vector min;
  Vector max;
};

inline AttributionRange attribution_ranges(const Matrix& attributions) {
  return {attributions.colwise().minCoeff().transpose(), attributions.colwise().maxCoeff().transpose()};
}

}  // namespace exagree
