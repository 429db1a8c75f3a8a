#pragma once

// Reference predictors (logistic regression and a ReLU MLP), input masking,
// log loss, analytic input gradients, and the on-disk parameter format.

#include "exagree/core.hpp"
#include "exagree/data.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <concepts>
#include <cstring>
#include <fstream>
#include <variant>

namespace exagree {

/// Anything that maps an n x p matrix to n logits and has an input gradient.
template <class M>
concept Predictor = requires(const M& m, const Matrix& X, const Vector& x) {
  { m.logits(X) } -> std::convertible_to<Vector>;
  { m.input_gradient(x) } -> std::convertible_to<Vector>;
  { m.p() } -> std::convertible_to<Index>;
};

struct LinearModel {
  Vector weights;
  double bias = 0.0;

  Index p() const { return weights.size(); }

  Vector logits(const Matrix& X) const {
    require(X.cols() == p(), "dimension mismatch: X has " + std::to_string(X.cols()) + " columns, model expects " + std::to_string(p()));
    return (X * weights).array() + bias;
  }

  double logit(const Vector& x) const { return weights.dot(x) + bias; }

  Vector input_gradient(const Vector& x) const {
    require(x.size() == p(), "dimension mismatch in input_gradient");
    return weights;
  }
};

/// Fully connected network, ReLU hidden layers, single sigmoid output.
/// ReLU'(0) is taken as 0.
struct MlpModel {
  std::vector<int> layer_sizes;  // p, hidden..., 1
  std::vector<Matrix> W;         // W[l] is layer_sizes[l+1] x layer_sizes[l]
  std::vector<Vector> b;

  Index p() const { return layer_sizes.empty() ? 0 : layer_sizes.front(); }

  static MlpModel zeros(const std::vector<int>& sizes) {
    require(sizes.size() >= 2 && sizes.back() == 1, "layer_sizes must start with p and end with 1");
    MlpModel m;
    m.layer_sizes = sizes;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      require(sizes[l] >= 1, "layer sizes must be positive");
      m.W.push_back(Matrix::Zero(sizes[l + 1], sizes[l]));
      m.b.push_back(Vector::Zero(sizes[l + 1]));
    }
    return m;
  }

  /// He-uniform initialization.
  static MlpModel random(const std::vector<int>& sizes, std::uint64_t seed) {
    MlpModel m = zeros(sizes);
    Rng rng(seed);
    for (auto& w : m.W) {
      const double bound = std::sqrt(6.0 / static_cast<double>(w.cols()));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    }
    return m;
  }

  Vector logits(const Matrix& X) const {
    require(X.cols() == p(), "dimension mismatch: X has " + std::to_string(X.cols()) + " columns, model expects " + std::to_string(p()));
    Matrix H = X;
    for (std::size_t l = 0; l < W.size(); ++l) {
      Matrix A = (H * W[l].transpose()).rowwise() + b[l].transpose();
      if (l + 1 < W.size()) A = A.cwiseMax(0.0);
      H = std::move(A);
    }
    return H.col(0);
  }

  Vector input_gradient(const Vector& x) const {
    require(x.size() == p(), "dimension mismatch in input_gradient");
    std::vector<Vector> pre;
    Vector h = x;
    for (std::size_t l = 0; l < W.size(); ++l) {
      Vector a = W[l] * h + b[l];
      pre.push_back(a);
      h = (l + 1 < W.size()) ? Vector(a.cwiseMax(0.0)) : a;
    }
    Vector g = W.back().row(0).transpose();
    for (std::size_t l = W.size() - 1; l-- > 0;) {
      for (Index i = 0; i < g.size(); ++i)
        if (pre[l][i] <= 0.0) g[i] = 0.0;
      g = W[l].transpose() * g;
    }
    return g;
  }
};

/// Input-masked model: logit(X) = base.logit(X * diag(mask)).
template <Predictor Base>
struct Masked {
  const Base* base;
  Vector mask;

  Masked(const Base& b, Vector m) : base(&b), mask(std::move(m)) {
    require(mask.size() == b.p(), "mask length must equal p");
    require((mask.array() >= 0.0).all(), "mask entries must be non-negative");
  }

  Index p() const { return base->p(); }

  Vector logits(const Matrix& X) const {
    require(X.cols() == p(), "dimension mismatch in masked model");
    return base->logits(X * mask.asDiagonal());
  }

  Vector input_gradient(const Vector& x) const {
    return mask.cwiseProduct(base->input_gradient(mask.cwiseProduct(x)));
  }
};

using ReferenceModel = std::variant<LinearModel, MlpModel>;

template <Predictor M>
Vector predict_proba(const M& model, const Matrix& X) {
  return model.logits(X).unaryExpr([](double z) { return sigmoid(z); });
}

inline Vector predict_proba(const ReferenceModel& model, const Matrix& X) {
  return std::visit([&](const auto& m) { return predict_proba(m, X); }, model);
}

inline Index model_p(const ReferenceModel& m) {
  return std::visit([](const auto& x) { return x.p(); }, m);
}

inline constexpr double kProbClip = 1e-12;

/// Mean negative log-likelihood with probabilities clipped to [1e-12, 1 - 1e-12].
inline double log_loss(const Vector& prob, const Vector& y) {
  require(prob.size() == y.size(), "log_loss: length mismatch");
  require(prob.size() > 0, "log_loss: empty input");
  double total = 0.0;
  for (Index i = 0; i < prob.size(); ++i) {
    const double q = std::clamp(prob[i], kProbClip, 1.0 - kProbClip);
    total -= y[i] > 0.5 ? std::log(q) : std::log1p(-q);
  }
  return total / static_cast<double>(prob.size());
}

template <Predictor M>
double model_loss(const M& model, const Matrix& X, const Vector& y) {
  return log_loss(predict_proba(model, X), y);
}

inline double model_loss(const ReferenceModel& model, const Matrix& X, const Vector& y) {
  return log_loss(predict_proba(model, X), y);
}

template <Predictor M>
Vector input_gradient(const M& model, const Vector& x) {
  return model.input_gradient(x);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 0.5;
  int epochs = 500;
  std::uint64_t seed = 0;
};

/// Full-batch gradient descent from all-zero weights.
inline LinearModel train_logistic(const Dataset& ds, const TaskSplit& sp, const TrainConfig& cfg) {
  require(cfg.lr > 0.0, "learning rate must be positive");
  require(cfg.epochs >= 0, "epochs must be non-negative");
  const auto tr = training_view(ds, sp);
  const auto n = static_cast<double>(tr.X.rows());
  LinearModel m{Vector::Zero(ds.p()), 0.0};
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Vector resid = predict_proba(m, tr.X) - tr.y;
    m.weights -= cfg.lr * (tr.X.transpose() * resid) / n;
    m.bias -= cfg.lr * resid.sum() / n;
    if (!m.weights.allFinite() || !std::isfinite(m.bias) || !std::isfinite(model_loss(m, tr.X, tr.y)))
      fail("logistic training diverged at epoch " + std::to_string(epoch), ErrorKind::internal);
  }
  return m;
}

inline MlpModel train_mlp(const Dataset& ds, const TaskSplit& sp, std::vector<int> layer_sizes, const TrainConfig& cfg) {
  require(cfg.lr > 0.0, "learning rate must be positive");
  require(cfg.epochs >= 0, "epochs must be non-negative");
  require(!layer_sizes.empty() && layer_sizes.front() == ds.p(),
          "layer_sizes[0] must equal the feature count " + std::to_string(ds.p()));
  if (layer_sizes.back() != 1) layer_sizes.push_back(1);
  MlpModel m = MlpModel::random(layer_sizes, cfg.seed);
  const auto tr = training_view(ds, sp);
  const auto n = static_cast<double>(tr.X.rows());
  const std::size_t L = m.W.size();
  std::vector<Matrix> acts(L + 1);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    acts[0] = tr.X;
    for (std::size_t l = 0; l < L; ++l) {
      Matrix A = (acts[l] * m.W[l].transpose()).rowwise() + m.b[l].transpose();
      if (l + 1 < L) A = A.cwiseMax(0.0);
      acts[l + 1] = std::move(A);
    }
    Vector prob = acts[L].col(0).unaryExpr([](double z) { return sigmoid(z); });
    Matrix delta = (prob - tr.y) / n;  // n x 1
    for (std::size_t l = L; l-- > 0;) {
      const Matrix gW = delta.transpose() * acts[l];
      const Vector gb = delta.colwise().sum().transpose();
      if (l > 0) {
        Matrix back = delta * m.W[l];
        delta = back.cwiseProduct((acts[l].array() > 0.0).cast<double>().matrix());
      }
      m.W[l] -= cfg.lr * gW;
      m.b[l] -= cfg.lr * gb;
    }
    for (const auto& w : m.W)
      if (!w.allFinite()) fail("mlp training diverged at epoch " + std::to_string(epoch), ErrorKind::internal);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Serialization: JSON manifest + flat little-endian float64 parameter array.

struct SerializedModel {
  nlohmann::json manifest;
  std::vector<double> params;
};

inline SerializedModel serialize(const LinearModel& m) {
  SerializedModel s;
  s.params = to_std(m.weights);
  s.params.push_back(m.bias);
  s.manifest = {{"architecture", "logistic"}, {"layer_sizes", {m.p(), 1}}, {"param_count", s.params.size()}};
  return s;
}

inline SerializedModel serialize(const MlpModel& m) {
  SerializedModel s;
  for (std::size_t l = 0; l < m.W.size(); ++l) {
    for (Index i = 0; i < m.W[l].rows(); ++i)
      for (Index j = 0; j < m.W[l].cols(); ++j) s.params.push_back(m.W[l](i, j));
    for (Index i = 0; i < m.b[l].size(); ++i) s.params.push_back(m.b[l][i]);
  }
  s.manifest = {{"architecture", "mlp"}, {"layer_sizes", m.layer_sizes}, {"activation", "relu"}, {"param_count", s.params.size()}};
  return s;
}

inline SerializedModel serialize(const ReferenceModel& m) {
  return std::visit([](const auto& x) { return serialize(x); }, m);
}

inline std::string params_to_bytes(const std::vector<double>& params) {
  static_assert(std::endian::native == std::endian::little, "parameter files are little-endian");
  std::string out(params.size() * sizeof(double), '\0');
  if (!params.empty()) std::memcpy(out.data(), params.data(), out.size());
  return out;
}

inline std::vector<double> params_from_bytes(std::string_view bytes, std::size_t expected) {
  require(bytes.size() == expected * sizeof(double),
          "parameter file holds " + std::to_string(bytes.size() / sizeof(double)) + " values, manifest declares " +
              std::to_string(expected));
  std::vector<double> out(expected);
  if (expected) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

inline ReferenceModel deserialize_reference(const nlohmann::json& manifest, const std::vector<double>& params) {
  const auto arch = manifest.at("architecture").get<std::string>();
  const auto sizes = manifest.at("layer_sizes").get<std::vector<int>>();
  require(params.size() == manifest.at("param_count").get<std::size_t>(), "parameter count mismatch");
  if (arch == "logistic") {
    LinearModel m{Vector(sizes.at(0)), params.back()};
    for (int j = 0; j < sizes[0]; ++j) m.weights[j] = params[static_cast<std::size_t>(j)];
    return m;
  }
  require(arch == "mlp", "unknown architecture '" + arch + "'");
  MlpModel m = MlpModel::zeros(sizes);
  std::size_t k = 0;
  for (std::size_t l = 0; l < m.W.size(); ++l) {
    for (Index i = 0; i < m.W[l].rows(); ++i)
      for (Index j = 0; j < m.W[l].cols(); ++j) m.W[l](i, j) = params.at(k++);
    for (Index i = 0; i < m.b[l].size(); ++i) m.b[l][i] = params.at(k++);
  }
  return m;
}

}  // namespace exagree
