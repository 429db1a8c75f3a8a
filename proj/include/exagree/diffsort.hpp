#pragma once

// Monotonic differentiable sorting: a bitonic comparator network whose swaps
// are relaxed with the Cauchy CDF, yielding a soft permutation matrix and
// soft ranks (rank 1 = largest value). Also exact and soft Spearman
// correlation.

#include "exagree/core.hpp"

#include <numbers>

namespace exagree {

struct Comparator {
  int top;     // slot that receives the (soft) maximum
  int bottom;  // slot that receives the (soft) minimum
};

struct SortingNetworkPlan {
  int p = 0;
  int n_padded = 0;
  std::vector<std::vector<Comparator>> layers;
  double pad_sentinel = -1.0;

  std::size_t comparator_count() const {
    std::size_t c = 0;
    for (const auto& l : layers) c += l.size();
    return c;
  }
};

/// Bitonic schedule producing descending order on a power-of-two width.
inline SortingNetworkPlan build_plan(int p) {
  require(p >= 1, "sorting network needs p >= 1");
  SortingNetworkPlan plan;
  plan.p = p;
  plan.n_padded = 1;
  while (plan.n_padded < p) plan.n_padded *= 2;
  const int n = plan.n_padded;
  for (int size = 2; size <= n; size *= 2) {
    for (int stride = size / 2; stride >= 1; stride /= 2) {
      std::vector<Comparator> layer;
      for (int i = 0; i < n; ++i) {
        const int j = i ^ stride;
        if (j <= i) continue;
        const bool descending = (i & size) == 0;
        layer.push_back(descending ? Comparator{i, j} : Comparator{j, i});
      }
      plan.layers.push_back(std::move(layer));
    }
  }
  return plan;
}

struct SoftSwap {
  double top;
  double bottom;
  double alpha;
};

/// alpha = arctan(beta (a - b)) / pi + 1/2; top = alpha a + (1 - alpha) b.
inline SoftSwap cauchy_swap(double a, double b, double beta) {
  require(beta > 0.0, "steepness must be positive");
  const double alpha = std::atan(beta * (a - b)) / std::numbers::pi + 0.5;
  const double top = alpha * a + (1.0 - alpha) * b;
  // bottom is taken as the complement so the pair sum is preserved exactly.
  const double bottom = (a + b) - top;
  return {top, bottom, alpha};
}

struct SoftPermutation {
  Matrix matrix;         // n_padded x n_padded; matrix(pos, input) is the weight of input at sorted position pos
  Vector soft_ranks;     // length p, 1-based, real-valued
  Vector sorted_values;  // length n_padded
  double steepness = 0.0;
  std::vector<double> layer_sums;  // sum of the working values after each layer
};

namespace detail {

inline double pad_value(const Vector& values, const SortingNetworkPlan& plan) {
  // Padding must stay below every real entry so it sinks to the bottom.
  return values.size() ? std::min(plan.pad_sentinel, values.minCoeff() - 1.0) : plan.pad_sentinel;
}

}  // namespace detail

inline SoftPermutation soft_sort(const Vector& values, const SortingNetworkPlan& plan, double beta) {
  require(values.size() == plan.p, "soft_sort: expected " + std::to_string(plan.p) + " values");
  require(values.allFinite(), "soft_sort: non-finite input");
  require(beta > 0.0, "steepness must be positive");
  const int n = plan.n_padded;
  Vector x = Vector::Constant(n, detail::pad_value(values, plan));
  x.head(plan.p) = values;
  Matrix P = Matrix::Identity(n, n);
  SoftPermutation out;
  out.steepness = beta;
  for (const auto& layer : plan.layers) {
    for (const auto& c : layer) {
      const SoftSwap s = cauchy_swap(x[c.top], x[c.bottom], beta);
      x[c.top] = s.top;
      x[c.bottom] = s.bottom;
      const Eigen::RowVectorXd rt = P.row(c.top);
      const Eigen::RowVectorXd rb = P.row(c.bottom);
      P.row(c.top) = s.alpha * rt + (1.0 - s.alpha) * rb;
      P.row(c.bottom) = (1.0 - s.alpha) * rt + s.alpha * rb;
    }
    out.layer_sums.push_back(x.sum());
  }
  const Vector positions = Vector::LinSpaced(n, 1.0, static_cast<double>(n));
  out.soft_ranks = (positions.transpose() * P.leftCols(plan.p)).transpose();
  out.sorted_values = x;
  out.matrix = std::move(P);
  return out;
}

/// Jacobian d soft_ranks / d values (p x p), by forward-mode propagation
/// through every comparator.
inline Matrix soft_sort_gradient(const Vector& values, const SortingNetworkPlan& plan, double beta) {
  require(values.size() == plan.p, "soft_sort_gradient: expected " + std::to_string(plan.p) + " values");
  require(values.allFinite(), "soft_sort_gradient: non-finite input");
  require(beta > 0.0, "steepness must be positive");
  const int n = plan.n_padded;
  const int p = plan.p;
  Vector x = Vector::Constant(n, detail::pad_value(values, plan));
  x.head(p) = values;
  Matrix dx = Matrix::Zero(n, p);  // dx(slot, k) = d x[slot] / d values[k]
  for (int k = 0; k < p; ++k) dx(k, k) = 1.0;
  Matrix P = Matrix::Identity(n, n);
  // dP[k] holds d P / d values[k]; only the first p columns of P matter.
  std::vector<Matrix> dP(static_cast<std::size_t>(p), Matrix::Zero(n, p));

  for (const auto& layer : plan.layers) {
    for (const auto& c : layer) {
      const double a = x[c.top], b = x[c.bottom];
      const double z = beta * (a - b);
      const double alpha = std::atan(z) / std::numbers::pi + 0.5;
      const double dalpha_dz = beta / (std::numbers::pi * (1.0 + z * z));
      const Eigen::RowVectorXd da = dx.row(c.top);
      const Eigen::RowVectorXd db = dx.row(c.bottom);
      const Eigen::RowVectorXd dalpha = dalpha_dz * (da - db);

      x[c.top] = alpha * a + (1.0 - alpha) * b;
      x[c.bottom] = (a + b) - x[c.top];
      dx.row(c.top) = dalpha * (a - b) + alpha * da + (1.0 - alpha) * db;
      dx.row(c.bottom) = da + db - dx.row(c.top);

      const Eigen::RowVectorXd rt = P.row(c.top).head(p);
      const Eigen::RowVectorXd rb = P.row(c.bottom).head(p);
      const Eigen::RowVectorXd diff = rt - rb;
      for (int k = 0; k < p; ++k) {
        Matrix& D = dP[static_cast<std::size_t>(k)];
        const Eigen::RowVectorXd dt = D.row(c.top);
        const Eigen::RowVectorXd dbm = D.row(c.bottom);
        D.row(c.top) = dalpha[k] * diff + alpha * dt + (1.0 - alpha) * dbm;
        D.row(c.bottom) = -dalpha[k] * diff + (1.0 - alpha) * dt + alpha * dbm;
      }
      P.row(c.top).head(p) = alpha * rt + (1.0 - alpha) * rb;
      P.row(c.bottom).head(p) = (1.0 - alpha) * rt + alpha * rb;
    }
  }
  const Vector positions = Vector::LinSpaced(n, 1.0, static_cast<double>(n));
  Matrix J(p, p);  // J(i, k) = d soft_rank_i / d values_k
  for (int k = 0; k < p; ++k) J.col(k) = (positions.transpose() * dP[static_cast<std::size_t>(k)]).transpose();
  return J;
}

// ---------------------------------------------------------------------------
// Spearman correlation

/// rho = 1 - 6 sum d^2 / (n (n^2 - 1)) for tie-free integer ranks.
inline double spearman_exact(const Ranking& r1, const Ranking& r2) {
  require(r1.size() == r2.size(), "spearman_exact: length mismatch");
  require_permutation(r1, "first ranking");
  require_permutation(r2, "second ranking");
  const auto n = static_cast<double>(r1.size());
  if (r1.size() < 2) return 1.0;
  double d2 = 0.0;
  for (std::size_t i = 0; i < r1.size(); ++i) {
    const double d = r1.ranks[i] - r2.ranks[i];
    d2 += d * d;
  }
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

struct SoftSpearman {
  double value;
  Vector gradient;  // d value / d soft_ranks
};

/// Pearson correlation between soft ranks and target rank values.
inline SoftSpearman spearman_soft(const Vector& soft_ranks, const Ranking& target) {
  require(static_cast<std::size_t>(soft_ranks.size()) == target.size(), "spearman_soft: length mismatch");
  const Vector t = from_std(to_double(target.ranks));
  const Vector sc = soft_ranks.array() - soft_ranks.mean();
  const Vector tc = t.array() - t.mean();
  const double ns = sc.norm(), nt = tc.norm();
  if (!(ns > 1e-15) || !(nt > 1e-15)) fail("degenerate ranking: zero variance in Spearman correlation");
  const double rho = sc.dot(tc) / (ns * nt);
  // Centering is absorbed: tc sums to zero, and sc's gradient projects out the mean.
  Vector g = tc / (ns * nt) - rho * sc / (ns * ns);
  return {rho, g};
}

}  // namespace exagree
