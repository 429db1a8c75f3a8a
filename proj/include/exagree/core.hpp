#pragma once

// Shared vocabulary types for the exagree library: dense linear algebra
// aliases, the error type, seeded RNG helpers, and rankings.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace exagree {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// Validation errors map to CLI exit code 2 / HTTP 4xx, internal ones to 1 / 5xx.
enum class ErrorKind { validation, not_found, conflict, internal };

class Error : public std::runtime_error {
 public:
  explicit Error(std::string msg, ErrorKind kind = ErrorKind::validation)
      : std::runtime_error(std::move(msg)), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(std::string msg, ErrorKind kind = ErrorKind::validation) {
  throw Error(std::move(msg), kind);
}

inline void require(bool cond, const std::string& msg, ErrorKind kind = ErrorKind::validation) {
  if (!cond) fail(msg, kind);
}

using Rng = std::mt19937_64;

// Derives an independent stream seed from a parent seed and a salt.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed ^ (salt + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline Vector ones(Index p) { return Vector::Ones(p); }

// Selects rows of X by index.
inline Matrix take_rows(const Matrix& X, const std::vector<Index>& idx) {
  Matrix out(static_cast<Index>(idx.size()), X.cols());
  for (Index r = 0; r < out.rows(); ++r) out.row(r) = X.row(idx[static_cast<std::size_t>(r)]);
  return out;
}

inline Vector take(const Vector& v, const std::vector<Index>& idx) {
  Vector out(static_cast<Index>(idx.size()));
  for (Index r = 0; r < out.size(); ++r) out[r] = v[idx[static_cast<std::size_t>(r)]];
  return out;
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector from_std(const std::vector<double>& v) {
  Vector out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Index>(i)] = v[i];
  return out;
}

/// Feature ranking. `ranks[i]` is the 1-based rank of feature i, rank 1 being
/// the largest |attribution|. Ties are broken by feature index.
struct Ranking {
  std::vector<int> ranks;
  bool degenerate = false;  // every magnitude was equal

  std::size_t size() const { return ranks.size(); }

  /// Features listed from most to least important (0-based indices).
  std::vector<int> order() const {
    std::vector<int> out(ranks.size());
    for (std::size_t i = 0; i < ranks.size(); ++i) out[static_cast<std::size_t>(ranks[i] - 1)] = static_cast<int>(i);
    return out;
  }

  static Ranking from_order(const std::vector<int>& order) {
    Ranking r;
    r.ranks.assign(order.size(), 0);
    for (std::size_t pos = 0; pos < order.size(); ++pos) r.ranks.at(static_cast<std::size_t>(order[pos])) = static_cast<int>(pos) + 1;
    return r;
  }

  static Ranking identity(std::size_t p) {
    Ranking r;
    r.ranks.resize(p);
    std::iota(r.ranks.begin(), r.ranks.end(), 1);
    return r;
  }

  bool operator==(const Ranking& o) const { return ranks == o.ranks; }
};

inline bool is_permutation(const std::vector<int>& ranks) {
  std::vector<char> seen(ranks.size() + 1, 0);
  for (int r : ranks) {
    if (r < 1 || static_cast<std::size_t>(r) > ranks.size() || seen[static_cast<std::size_t>(r)]) return false;
    seen[static_cast<std::size_t>(r)] = 1;
  }
  return true;
}

inline void require_permutation(const Ranking& r, const std::string& what = "ranking") {
  require(is_permutation(r.ranks), what + " is not a permutation of 1..p");
}

/// Signed per-feature importance for one model/explainer pair.
struct AttributionVector {
  Vector values;
  std::string method;
  std::string model_id;

  Index size() const { return values.size(); }
};

/// Descending |values| with stable index tie-break.
inline Ranking rank_of(const Vector& values) {
  const auto p = static_cast<std::size_t>(values.size());
  std::vector<int> order(p);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return std::abs(values[a]) > std::abs(values[b]); });
  Ranking r = Ranking::from_order(order);
  r.degenerate = p > 0;
  for (std::size_t i = 1; i < p; ++i) {
    if (std::abs(values[static_cast<Index>(i)]) != std::abs(values[0])) {
      r.degenerate = false;
      break;
    }
  }
  return r;
}

inline Ranking rank_of(const AttributionVector& a) { return rank_of(a.values); }

inline std::vector<double> to_double(const std::vector<int>& v) { return {v.begin(), v.end()}; }

}  // namespace exagree
