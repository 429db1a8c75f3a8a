#pragma once

// Differentiable mask-to-attribution network (DMAN): a [p, 100, 100, p] ReLU
// surrogate trained on (mask, attribution) pairs, with an analytic Jacobian
// with respect to its input mask.

#include "exagree/attribution.hpp"
#include "exagree/core.hpp"
#include "exagree/optim.hpp"

#include <nlohmann/json.hpp>

namespace exagree {

struct DmanReport {
  double train_mse = 0.0;
  double valid_mse = 0.0;
  double valid_r2 = 0.0;
  int epochs = 0;
  Index train_rows = 0;
  Index valid_rows = 0;
};

struct DmanConfig {
  double lr = 1e-4;
  int epochs = 2000;
  double valid_fraction = 0.1;
  std::uint64_t seed = 0;
  int hidden = 100;
};

class DmanModel {
 public:
  DmanModel() = default;

  /// All weights zero, identity scalers.
  static DmanModel zeros(Index p, int hidden = 100) {
    DmanModel m;
    m.p_ = p;
    m.hidden_ = hidden;
    m.theta_ = Vector::Zero(param_count(p, hidden));
    m.x_mean_ = Vector::Zero(p);
    m.x_scale_ = Vector::Ones(p);
    m.y_mean_ = Vector::Zero(p);
    m.y_scale_ = Vector::Ones(p);
    return m;
  }

  static DmanModel random(Index p, int hidden, std::uint64_t seed) {
    DmanModel m = zeros(p, hidden);
    Rng rng(seed);
    auto fill = [&](double* data, Index count, Index fan_in) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Index i = 0; i < count; ++i) data[i] = u(rng);
    };
    const Index h = hidden;
    double* t = m.theta_.data();
    fill(t, h * p, p);
    fill(t + h * p + h, h * h, h);
    // Output layer starts small so initial predictions sit near the mean.
    fill(t + h * p + h + h * h + h, p * h, h);
    m.theta_.segment(h * p + h + h * h + h, p * h) *= 0.1;
    return m;
  }

  static Index param_count(Index p, Index h) { return h * p + h + h * h + h + p * h + p; }

  Index p() const { return p_; }
  int hidden() const { return hidden_; }
  std::vector<int> layer_sizes() const { return {static_cast<int>(p_), hidden_, hidden_, static_cast<int>(p_)}; }
  const DmanReport& report() const { return report_; }

  Vector forward(const Vector& mask) const {
    check_input(mask);
    Vector h1, h2;
    return forward_impl(mask, h1, h2);
  }

  /// Batch forward; rows are masks.
  Matrix forward_batch(const Matrix& masks) const {
    require(masks.cols() == p_, "dimension mismatch in DMAN forward");
    const Matrix Z = (masks.rowwise() - x_mean_.transpose()).array().rowwise() / x_scale_.transpose().array();
    const Matrix H1 = ((Z * W1().transpose()).rowwise() + b1().transpose()).cwiseMax(0.0);
    const Matrix H2 = ((H1 * W2().transpose()).rowwise() + b2().transpose()).cwiseMax(0.0);
    const Matrix O = (H2 * W3().transpose()).rowwise() + b3().transpose();
    return (O.array().rowwise() * y_scale_.transpose().array()).rowwise() + y_mean_.transpose().array();
  }

  /// d forward(mask)_i / d mask_j as a p x p matrix.
  Matrix jacobian(const Vector& mask) const {
    check_input(mask);
    Vector h1, h2;
    forward_impl(mask, h1, h2);
    // Active ReLU units as row selectors.
    Matrix A2 = W2();
    for (Index i = 0; i < hidden_; ++i)
      if (!(h2[i] > 0.0)) A2.row(i).setZero();
    Matrix A1 = W1();
    for (Index i = 0; i < hidden_; ++i)
      if (!(h1[i] > 0.0)) A1.row(i).setZero();
    Matrix J = W3() * A2 * A1;
    return y_scale_.asDiagonal() * J * x_scale_.cwiseInverse().asDiagonal();
  }

  /// Smallest |pre-activation| over hidden units; small values mean a ReLU kink is near.
  double min_abs_preactivation(const Vector& mask) const {
    check_input(mask);
    const Vector z = (mask - x_mean_).cwiseQuotient(x_scale_);
    const Vector a1 = W1() * z + b1();
    const Vector a2 = W2() * a1.cwiseMax(0.0) + b2();
    return std::min(a1.cwiseAbs().minCoeff(), a2.cwiseAbs().minCoeff());
  }

  friend DmanModel train_dman(const AttributionDataset& datt, const DmanConfig& cfg);
  friend struct DmanIo;

  // Flat parameter block, exposed for tests that deliberately corrupt a trained surrogate.
  Vector& mutable_parameters() { return theta_; }
  const Vector& parameters() const { return theta_; }

 private:
  using CMap = Eigen::Map<const Matrix>;
  using CVMap = Eigen::Map<const Vector>;

  Index off_b1() const { return hidden_ * p_; }
  Index off_W2() const { return off_b1() + hidden_; }
  Index off_b2() const { return off_W2() + Index{hidden_} * hidden_; }
  Index off_W3() const { return off_b2() + hidden_; }
  Index off_b3() const { return off_W3() + p_ * hidden_; }

  CMap W1() const { return {theta_.data(), hidden_, p_}; }
  CVMap b1() const { return {theta_.data() + off_b1(), hidden_}; }
  CMap W2() const { return {theta_.data() + off_W2(), hidden_, hidden_}; }
  CVMap b2() const { return {theta_.data() + off_b2(), hidden_}; }
  CMap W3() const { return {theta_.data() + off_W3(), p_, hidden_}; }
  CVMap b3() const { return {theta_.data() + off_b3(), p_}; }

  void check_input(const Vector& mask) const {
    require(mask.size() == p_, "dimension mismatch: mask has " + std::to_string(mask.size()) + " entries, DMAN expects " + std::to_string(p_));
    require(mask.allFinite(), "non-finite mask passed to DMAN");
  }

  Vector forward_impl(const Vector& mask, Vector& h1, Vector& h2) const {
    const Vector z = (mask - x_mean_).cwiseQuotient(x_scale_);
    h1 = (W1() * z + b1()).cwiseMax(0.0);
    h2 = (W2() * h1 + b2()).cwiseMax(0.0);
    const Vector o = W3() * h2 + b3();
    return y_mean_ + y_scale_.cwiseProduct(o);
  }

  Index p_ = 0;
  int hidden_ = 100;
  Vector theta_;
  Vector x_mean_, x_scale_, y_mean_, y_scale_;
  DmanReport report_;
};

namespace detail {

inline void column_scaler(const Matrix& M, Vector& mean, Vector& scale) {
  mean = M.colwise().mean().transpose();
  scale.resize(M.cols());
  for (Index j = 0; j < M.cols(); ++j) {
    const double sd = std::sqrt((M.col(j).array() - mean[j]).square().mean());
    scale[j] = sd > 1e-12 ? sd : 1.0;
  }
}

inline double r2_score(const Matrix& truth, const Matrix& pred) {
  const Vector mu = truth.colwise().mean().transpose();
  const double sst = (truth.rowwise() - mu.transpose()).squaredNorm();
  const double sse = (truth - pred).squaredNorm();
  return sst > 0.0 ? 1.0 - sse / sst : (sse == 0.0 ? 1.0 : 0.0);
}

}  // namespace detail

/// Full-batch Adam on mean squared error in standardized target units.
/// Inputs and targets are standardized with statistics of the training rows.
inline DmanModel train_dman(const AttributionDataset& datt, const DmanConfig& cfg) {
  const Index rows = datt.masks.rows();
  const Index p = datt.masks.cols();
  require(rows >= 20, "DMAN needs at least 20 (mask, attribution) rows");
  require(datt.attributions.rows() == rows && datt.attributions.cols() == p, "masks and attributions are misaligned");
  require(cfg.valid_fraction > 0.0 && cfg.valid_fraction < 1.0, "valid_fraction must be in (0, 1)");
  require(cfg.epochs >= 0, "epochs must be non-negative");

  std::vector<Index> idx(static_cast<std::size_t>(rows));
  std::iota(idx.begin(), idx.end(), Index{0});
  Rng rng(mix_seed(cfg.seed, 0xd3a4));
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_valid = std::max<Index>(1, static_cast<Index>(std::llround(cfg.valid_fraction * static_cast<double>(rows))));
  std::vector<Index> valid(idx.begin(), idx.begin() + n_valid);
  std::vector<Index> train(idx.begin() + n_valid, idx.end());
  std::sort(valid.begin(), valid.end());
  std::sort(train.begin(), train.end());

  const Matrix Xtr = take_rows(datt.masks, train);
  const Matrix Ytr = take_rows(datt.attributions, train);
  const Matrix Xva = take_rows(datt.masks, valid);
  const Matrix Yva = take_rows(datt.attributions, valid);

  DmanModel m = DmanModel::random(p, cfg.hidden, cfg.seed);
  detail::column_scaler(Xtr, m.x_mean_, m.x_scale_);
  detail::column_scaler(Ytr, m.y_mean_, m.y_scale_);

  const Matrix Z = (Xtr.rowwise() - m.x_mean_.transpose()).array().rowwise() / m.x_scale_.transpose().array();
  const Matrix T = (Ytr.rowwise() - m.y_mean_.transpose()).array().rowwise() / m.y_scale_.transpose().array();
  const auto n = static_cast<double>(Z.rows());
  const Index h = cfg.hidden;

  Adam adam(m.theta_.size(), cfg.lr);
  Vector grad(m.theta_.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Matrix H1 = ((Z * m.W1().transpose()).rowwise() + m.b1().transpose()).cwiseMax(0.0);
    const Matrix H2 = ((H1 * m.W2().transpose()).rowwise() + m.b2().transpose()).cwiseMax(0.0);
    const Matrix O = (H2 * m.W3().transpose()).rowwise() + m.b3().transpose();
    const Matrix E = O - T;
    const double loss = E.squaredNorm() / (n * static_cast<double>(p));
    if (!std::isfinite(loss)) fail("DMAN training produced a non-finite loss at epoch " + std::to_string(epoch), ErrorKind::internal);

    const Matrix dO = (2.0 / (n * static_cast<double>(p))) * E;
    Eigen::Map<Matrix>(grad.data() + m.off_W3(), p, h) = dO.transpose() * H2;
    grad.segment(m.off_b3(), p) = dO.colwise().sum().transpose();
    const Matrix dH2 = (dO * m.W3()).cwiseProduct((H2.array() > 0.0).cast<double>().matrix());
    Eigen::Map<Matrix>(grad.data() + m.off_W2(), h, h) = dH2.transpose() * H1;
    grad.segment(m.off_b2(), h) = dH2.colwise().sum().transpose();
    const Matrix dH1 = (dH2 * m.W2()).cwiseProduct((H1.array() > 0.0).cast<double>().matrix());
    Eigen::Map<Matrix>(grad.data(), h, p) = dH1.transpose() * Z;
    grad.segment(m.off_b1(), h) = dH1.colwise().sum().transpose();
    adam.step(m.theta_, grad);
  }

  m.report_.epochs = cfg.epochs;
  m.report_.train_rows = Xtr.rows();
  m.report_.valid_rows = Xva.rows();
  m.report_.train_mse = (m.forward_batch(Xtr) - Ytr).squaredNorm() / static_cast<double>(Ytr.size());
  const Matrix Pva = m.forward_batch(Xva);
  m.report_.valid_mse = (Pva - Yva).squaredNorm() / static_cast<double>(Yva.size());
  m.report_.valid_r2 = detail::r2_score(Yva, Pva);
  return m;
}

inline nlohmann::json to_json(const DmanReport& r) {
  return {{"train_mse", r.train_mse}, {"valid_mse", r.valid_mse}, {"valid_r2", r.valid_r2},
          {"epochs", r.epochs},       {"train_rows", r.train_rows}, {"valid_rows", r.valid_rows}};
}

/// Serialization helpers: parameters followed by the four scaler vectors.
struct DmanIo {
  static SerializedModel serialize(const DmanModel& m) {
    SerializedModel s;
    s.params = to_std(m.theta_);
    for (const Vector* v : {&m.x_mean_, &m.x_scale_, &m.y_mean_, &m.y_scale_})
      s.params.insert(s.params.end(), v->data(), v->data() + v->size());
    s.manifest = {{"architecture", "dman"}, {"layer_sizes", m.layer_sizes()}, {"activation", "relu"},
                  {"param_count", s.params.size()}, {"training_report", to_json(m.report_)}};
    return s;
  }

  static DmanModel deserialize(const nlohmann::json& manifest, const std::vector<double>& params) {
    require(manifest.at("architecture") == "dman", "not a DMAN manifest");
    const auto sizes = manifest.at("layer_sizes").get<std::vector<int>>();
    require(sizes.size() == 4 && sizes[1] == sizes[2] && sizes[0] == sizes[3], "malformed DMAN layer_sizes");
    DmanModel m = DmanModel::zeros(sizes[0], sizes[1]);
    const Index p = m.p_;
    require(static_cast<Index>(params.size()) == m.theta_.size() + 4 * p, "DMAN parameter count mismatch");
    std::size_t k = 0;
    for (Index i = 0; i < m.theta_.size(); ++i) m.theta_[i] = params[k++];
    for (Vector* v : {&m.x_mean_, &m.x_scale_, &m.y_mean_, &m.y_scale_})
      for (Index i = 0; i < p; ++i) (*v)[i] = params[k++];
    if (manifest.contains("training_report")) {
      const auto& r = manifest["training_report"];
      m.report_.train_mse = r.value("train_mse", 0.0);
      m.report_.valid_mse = r.value("valid_mse", 0.0);
      m.report_.valid_r2 = r.value("valid_r2", 0.0);
      m.report_.epochs = r.value("epochs", 0);
      m.report_.train_rows = r.value("train_rows", Index{0});
      m.report_.valid_rows = r.value("valid_rows", Index{0});
    }
    return m;
  }
};

}  // namespace exagree
