#pragma once

// Tabular binary-classification tasks: CSV ingestion with standardization,
// the synthetic Gaussian generator, and stratified train/validation splits.

#include "exagree/core.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace exagree {

enum class FeatureKind { continuous, discrete };

struct FeatureMeta {
  std::string name;
  FeatureKind kind = FeatureKind::continuous;
  double mean = 0.0;  // raw-unit mean removed during standardization
  double std = 1.0;   // raw-unit std divided out during standardization
};

struct Dataset {
  std::string name;
  Matrix features;  // n x p, standardized
  Vector labels;    // n, values in {0, 1}
  std::vector<FeatureMeta> feature_meta;
  std::optional<Index> subgroup_column;
  std::vector<int> groups;  // per-row 0/1 subgroup membership when subgroup_column is set
  std::string label_name = "label";

  Index n() const { return features.rows(); }
  Index p() const { return features.cols(); }

  std::vector<std::string> feature_names() const {
    std::vector<std::string> out;
    out.reserve(feature_meta.size());
    for (const auto& f : feature_meta) out.push_back(f.name);
    return out;
  }
};

struct TaskSplit {
  std::vector<Index> train_idx;
  std::vector<Index> valid_idx;
  std::uint64_t seed = 0;
};

inline void validate(const Dataset& ds) {
  require(ds.n() >= 2, "dataset needs at least 2 rows");
  require(ds.p() >= 2, "dataset needs at least 2 features");
  require(ds.labels.size() == ds.n(), "label count does not match row count");
  require(static_cast<Index>(ds.feature_meta.size()) == ds.p(), "feature metadata length does not match p");
  for (Index i = 0; i < ds.labels.size(); ++i)
    require(ds.labels[i] == 0.0 || ds.labels[i] == 1.0, "non-binary label at row " + std::to_string(i + 1));
  if (ds.subgroup_column) {
    require(*ds.subgroup_column >= 0 && *ds.subgroup_column < ds.p(), "subgroup column out of range");
    require(static_cast<Index>(ds.groups.size()) == ds.n(), "subgroup membership length does not match n");
  }
}

// ---------------------------------------------------------------------------
// CSV

namespace csv {

using Table = std::vector<std::vector<std::string>>;

/// RFC-4180 reader: quoted fields, doubled quotes, CRLF or LF line endings.
inline Table parse(std::string_view text) {
  Table rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"' && field.empty()) {
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      field_started = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (field_started || !field.empty() || !row.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      field_started = false;
    } else {
      field.push_back(c);
      field_started = true;
    }
  }
  require(!quoted, "unterminated quoted field in CSV");
  if (field_started || !field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

/// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string matrix_to_csv(const Matrix& M, const std::vector<std::string>& header) {
  std::string out;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (j) out.push_back(',');
    out += quote(header[j]);
  }
  out.push_back('\n');
  for (Index i = 0; i < M.rows(); ++i) {
    for (Index j = 0; j < M.cols(); ++j) {
      if (j) out.push_back(',');
      out += format_double(M(i, j));
    }
    out.push_back('\n');
  }
  return out;
}

/// Reads an all-numeric CSV with a header row.
inline Matrix csv_to_matrix(std::string_view text, std::vector<std::string>* header = nullptr) {
  Table t = parse(text);
  require(!t.empty(), "empty CSV");
  if (header) *header = t.front();
  const auto cols = t.front().size();
  Matrix M(static_cast<Index>(t.size() - 1), static_cast<Index>(cols));
  for (std::size_t r = 1; r < t.size(); ++r) {
    require(t[r].size() == cols, "ragged CSV row " + std::to_string(r + 1));
    for (std::size_t c = 0; c < cols; ++c) {
      auto v = parse_double(t[r][c]);
      require(v.has_value(), "unparseable cell at row " + std::to_string(r + 1) + ", column " + std::to_string(c + 1));
      M(static_cast<Index>(r - 1), static_cast<Index>(c)) = *v;
    }
  }
  return M;
}

}  // namespace csv

struct LoadOptions {
  std::string label_column = "label";
  std::optional<std::string> subgroup_column;
  bool standardize = true;
  std::string name = "csv";
};

namespace detail {

inline void standardize_column(Matrix& X, Index j, FeatureMeta& meta) {
  const double n = static_cast<double>(X.rows());
  const double mean = X.col(j).mean();
  const double var = (X.col(j).array() - mean).square().sum() / n;
  const double sd = std::sqrt(var);
  require(sd > 0.0 && std::isfinite(sd), "constant column '" + meta.name + "' cannot be standardized");
  X.col(j) = (X.col(j).array() - mean) / sd;
  // A second pass removes the residual rounding error of the first.
  const double m2 = X.col(j).mean();
  X.col(j).array() -= m2;
  const double sd2 = std::sqrt(X.col(j).squaredNorm() / n);
  X.col(j) /= sd2;
  meta.mean = mean;
  meta.std = sd;
}

}  // namespace detail

/// Parses a labelled CSV document. Non-numeric columns are integer-encoded by
/// sorted level; every feature column is then standardized.
inline Dataset parse_dataset_csv(std::string_view text, const LoadOptions& opt) {
  const csv::Table t = csv::parse(text);
  require(t.size() >= 2, "CSV needs a header row and at least one data row");
  const auto& header = t.front();
  const std::size_t cols = header.size();
  std::optional<std::size_t> label_col;
  std::optional<std::size_t> group_col;
  for (std::size_t c = 0; c < cols; ++c) {
    if (header[c] == opt.label_column) label_col = c;
    if (opt.subgroup_column && header[c] == *opt.subgroup_column) group_col = c;
  }
  require(label_col.has_value(), "missing label column '" + opt.label_column + "'");
  if (opt.subgroup_column) require(group_col.has_value(), "missing subgroup column '" + *opt.subgroup_column + "'");
  require(!(group_col && *group_col == *label_col), "subgroup column cannot be the label column");

  const std::size_t n = t.size() - 1;
  for (std::size_t r = 1; r < t.size(); ++r)
    require(t[r].size() == cols, "row " + std::to_string(r + 1) + " has " + std::to_string(t[r].size()) +
                                     " fields, expected " + std::to_string(cols));

  Dataset ds;
  ds.name = opt.name;
  ds.label_name = opt.label_column;
  ds.labels.resize(static_cast<Index>(n));
  for (std::size_t r = 0; r < n; ++r) {
    auto v = csv::parse_double(t[r + 1][*label_col]);
    require(v.has_value(), "unparseable cell at row " + std::to_string(r + 2) + ", column '" + opt.label_column + "'");
    require(*v == 0.0 || *v == 1.0, "non-binary label '" + t[r + 1][*label_col] + "' at row " + std::to_string(r + 2));
    ds.labels[static_cast<Index>(r)] = *v;
  }

  std::vector<std::size_t> feature_cols;
  for (std::size_t c = 0; c < cols; ++c)
    if (c != *label_col) feature_cols.push_back(c);
  ds.features.resize(static_cast<Index>(n), static_cast<Index>(feature_cols.size()));

  for (std::size_t f = 0; f < feature_cols.size(); ++f) {
    const std::size_t c = feature_cols[f];
    FeatureMeta meta;
    meta.name = header[c];
    const bool numeric = csv::parse_double(t[1][c]).has_value();
    if (numeric) {
      std::set<double> levels;
      bool integral = true;
      for (std::size_t r = 0; r < n; ++r) {
        auto v = csv::parse_double(t[r + 1][c]);
        require(v.has_value() && std::isfinite(*v),
                "unparseable cell at row " + std::to_string(r + 2) + ", column '" + meta.name + "'");
        ds.features(static_cast<Index>(r), static_cast<Index>(f)) = *v;
        integral = integral && std::floor(*v) == *v;
        if (levels.size() <= 10) levels.insert(*v);
      }
      meta.kind = (integral && levels.size() <= 10) ? FeatureKind::discrete : FeatureKind::continuous;
    } else {
      std::map<std::string, int> codes;
      for (std::size_t r = 0; r < n; ++r) {
        require(!t[r + 1][c].empty(), "unparseable cell at row " + std::to_string(r + 2) + ", column '" + meta.name + "'");
        codes.emplace(t[r + 1][c], 0);
      }
      int next = 0;
      for (auto& [level, code] : codes) code = next++;
      for (std::size_t r = 0; r < n; ++r)
        ds.features(static_cast<Index>(r), static_cast<Index>(f)) = codes.at(t[r + 1][c]);
      meta.kind = FeatureKind::discrete;
    }
    if (group_col && c == *group_col) {
      std::map<double, int> levels;
      for (std::size_t r = 0; r < n; ++r) levels.emplace(ds.features(static_cast<Index>(r), static_cast<Index>(f)), 0);
      require(levels.size() == 2, "subgroup column '" + meta.name + "' must be binary");
      int next = 0;
      for (auto& [level, code] : levels) code = next++;
      ds.groups.resize(n);
      for (std::size_t r = 0; r < n; ++r) ds.groups[r] = levels.at(ds.features(static_cast<Index>(r), static_cast<Index>(f)));
      ds.subgroup_column = static_cast<Index>(f);
    }
    if (opt.standardize) detail::standardize_column(ds.features, static_cast<Index>(f), meta);
    ds.feature_meta.push_back(std::move(meta));
  }
  validate(ds);
  return ds;
}

inline Dataset load_csv(const std::string& path, const std::string& label_column,
                        std::optional<std::string> subgroup_column = std::nullopt) {
  LoadOptions opt;
  opt.label_column = label_column;
  opt.subgroup_column = std::move(subgroup_column);
  opt.name = path;
  return parse_dataset_csv(csv::read_file(path), opt);
}

/// Serializes features and label (label last) in shortest round-trip form.
inline std::string to_csv(const Dataset& ds) {
  Matrix M(ds.n(), ds.p() + 1);
  M.leftCols(ds.p()) = ds.features;
  M.col(ds.p()) = ds.labels;
  auto header = ds.feature_names();
  header.push_back(ds.label_name);
  return csv::matrix_to_csv(M, header);
}

inline nlohmann::json meta_to_json(const Dataset& ds) {
  nlohmann::json features = nlohmann::json::array();
  for (const auto& f : ds.feature_meta)
    features.push_back({{"name", f.name},
                        {"kind", f.kind == FeatureKind::continuous ? "continuous" : "discrete"},
                        {"mean", f.mean},
                        {"std", f.std}});
  nlohmann::json j{{"name", ds.name}, {"label", ds.label_name}, {"features", features}};
  j["subgroup_column"] = ds.subgroup_column ? nlohmann::json(*ds.subgroup_column) : nlohmann::json(nullptr);
  if (ds.subgroup_column) j["groups"] = ds.groups;
  return j;
}

/// Restores a dataset previously written by to_csv + meta_to_json, without re-standardizing.
inline Dataset from_stored(std::string_view csv_text, const nlohmann::json& meta) {
  LoadOptions opt;
  opt.label_column = meta.at("label").get<std::string>();
  opt.standardize = false;
  opt.name = meta.at("name").get<std::string>();
  Dataset ds = parse_dataset_csv(csv_text, opt);
  const auto& feats = meta.at("features");
  require(feats.size() == ds.feature_meta.size(), "dataset metadata does not match CSV columns");
  for (std::size_t j = 0; j < feats.size(); ++j) {
    auto& m = ds.feature_meta[j];
    m.kind = feats[j].at("kind") == "continuous" ? FeatureKind::continuous : FeatureKind::discrete;
    m.mean = feats[j].at("mean").get<double>();
    m.std = feats[j].at("std").get<double>();
  }
  if (!meta.at("subgroup_column").is_null()) {
    ds.subgroup_column = meta.at("subgroup_column").get<Index>();
    ds.groups = meta.at("groups").get<std::vector<int>>();
  }
  validate(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic task

/// Weights for the default synthetic task: alternating signs with slowly
/// decaying magnitudes so adjacent features have overlapping importance.
inline Vector default_synthetic_weights(Index p) {
  Vector w(p);
  for (Index j = 0; j < p; ++j) w[j] = (j % 2 == 0 ? 1.0 : -1.0) * (1.0 - 0.9 * static_cast<double>(j) / static_cast<double>(std::max<Index>(p, 2)));
  return w;
}

/// i.i.d. N(0,1) features, label ~ Bernoulli(sigmoid(w.x + noise)), class
/// balance enforced by rejecting rows of an already-full class.
inline Dataset generate_synthetic(Index n, Index p, const Vector& weights, double noise_std, std::uint64_t seed) {
  require(p >= 2, "synthetic task needs p >= 2");
  require(n >= 2, "synthetic task needs n >= 2");
  require(weights.size() == p, "weights length must equal p");
  require(noise_std >= 0.0, "noise_std must be non-negative");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Index cap[2] = {n / 2, n - n / 2};
  Index count[2] = {0, 0};

  Dataset ds;
  ds.name = "synthetic";
  ds.features.resize(n, p);
  ds.labels.resize(n);
  Vector x(p);
  Index filled = 0;
  while (filled < n) {
    for (Index j = 0; j < p; ++j) x[j] = normal(rng);
    const double z = weights.dot(x) + (noise_std > 0 ? noise_std * normal(rng) : 0.0);
    const int y = unif(rng) < sigmoid(z) ? 1 : 0;
    if (count[y] >= cap[y]) continue;
    ++count[y];
    ds.features.row(filled) = x.transpose();
    ds.labels[filled] = y;
    ++filled;
  }
  for (Index j = 0; j < p; ++j) {
    FeatureMeta meta{"gauss_" + std::to_string(j), FeatureKind::continuous, 0.0, 1.0};
    detail::standardize_column(ds.features, j, meta);
    ds.feature_meta.push_back(meta);
  }
  return ds;
}

inline nlohmann::json synthetic_manifest(const Vector& weights, double noise_std, std::uint64_t seed, Index n) {
  return {{"generator", "gaussian-logistic"}, {"n", n}, {"weights", to_std(weights)}, {"noise_std", noise_std}, {"seed", seed}};
}

// ---------------------------------------------------------------------------
// Splitting

/// Stratified split; each class contributes round(valid_fraction * n_class) rows to validation.
inline TaskSplit split(const Dataset& ds, double valid_fraction, std::uint64_t seed) {
  require(valid_fraction > 0.0 && valid_fraction < 1.0, "valid_fraction must be in (0, 1)");
  Rng rng(seed);
  TaskSplit out;
  out.seed = seed;
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<Index> idx;
    for (Index i = 0; i < ds.n(); ++i)
      if (ds.labels[i] == cls) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_valid = static_cast<std::size_t>(std::llround(valid_fraction * static_cast<double>(idx.size())));
    if (n_valid == 0 || n_valid >= idx.size())
      fail("class " + std::to_string(cls) + " absent from " + (n_valid == 0 ? "validation" : "training") +
           " side; dataset too small to split");
    out.valid_idx.insert(out.valid_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_valid));
    out.train_idx.insert(out.train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_valid), idx.end());
  }
  std::sort(out.train_idx.begin(), out.train_idx.end());
  std::sort(out.valid_idx.begin(), out.valid_idx.end());
  return out;
}

/// Validation rows and labels, materialized once for repeated evaluation.
struct ValidationView {
  Matrix X;
  Vector y;
  std::vector<Index> rows;
};

inline ValidationView validation_view(const Dataset& ds, const TaskSplit& sp) {
  return {take_rows(ds.features, sp.valid_idx), take(ds.labels, sp.valid_idx), sp.valid_idx};
}

inline ValidationView training_view(const Dataset& ds, const TaskSplit& sp) {
  return {take_rows(ds.features, sp.train_idx), take(ds.labels, sp.train_idx), sp.train_idx};
}

}  // namespace exagree
