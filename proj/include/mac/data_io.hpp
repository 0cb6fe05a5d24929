#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include "mac/error.hpp"
#include "mac/matrix.hpp"

namespace mac {

// S x N x C probabilities, sub-model-major files on disk so extending the
// ensemble means adding files. Samples are kept sorted by id.
struct PredictionTensor {
  std::size_t num_samples = 0;
  std::size_t num_sub_models = 0;
  std::size_t num_classes = 0;
  std::vector<double> values;  // [sample][sub_model][class]
  std::vector<std::string> sample_ids;
  std::vector<std::string> sub_model_ids;
  std::vector<std::string> class_names;

  double& at(std::size_t s, std::size_t m, std::size_t c) {
    return values[(s * num_sub_models + m) * num_classes + c];
  }
  double at(std::size_t s, std::size_t m, std::size_t c) const {
    return values[(s * num_sub_models + m) * num_classes + c];
  }

  // One sample's predictions as an N x C matrix.
  Matrix sample_slice(std::size_t s) const {
    Matrix out(num_sub_models, num_classes);
    const double* src = values.data() + s * num_sub_models * num_classes;
    std::copy_n(src, num_sub_models * num_classes, out.data.data());
    return out;
  }
};

struct LabelMatrix {
  std::size_t num_samples = 0;
  std::size_t num_classes = 0;
  Matrix values;
  std::vector<std::string> sample_ids;
  std::vector<std::string> class_names;
  std::optional<std::size_t> any_index;
  std::vector<std::string> any_violations;  // sample ids failing the any-consistency check
};

enum class AnyCheck { warn, fail };

namespace csv {

inline std::string location(const std::string& path, std::size_t line) {
  return path + ":" + std::to_string(line);
}

inline std::vector<std::string> split_fields(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.emplace_back(line.substr(start));
      return fields;
    }
    fields.emplace_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline double parse_probability(std::string_view text, const std::string& path, std::size_t line,
                                const std::string& column) {
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ParseError(location(path, line) + ": cannot parse '" + std::string(text) +
                     "' in column " + column);
  }
  if (!(value >= 0.0 && value <= 1.0)) {
    throw ParseError(location(path, line) + ": value " + std::string(text) +
                     " out of [0,1] in column " + column);
  }
  return value;
}

inline std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

struct Table {
  std::vector<std::string> class_names;
  std::vector<std::string> ids;         // row order as on disk
  std::vector<std::vector<double>> rows;
};

// Reads `sample_id,<classes...>` rows; caller validates value ranges.
inline Table read_table(const std::string& path, bool probabilities) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  Table table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_fields(line);
    if (line_no == 1) {
      if (fields.size() < 2 || fields[0] != "sample_id") {
        throw ParseError(location(path, 1) + ": expected header 'sample_id,<classes...>'");
      }
      table.class_names.assign(fields.begin() + 1, fields.end());
      continue;
    }
    if (fields.size() != table.class_names.size() + 1) {
      throw ParseError(location(path, line_no) + ": expected " +
                       std::to_string(table.class_names.size() + 1) + " fields, got " +
                       std::to_string(fields.size()));
    }
    table.ids.push_back(fields[0]);
    std::vector<double> row(table.class_names.size());
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (probabilities) {
        row[c] = parse_probability(fields[c + 1], path, line_no, table.class_names[c]);
      } else {
        if (fields[c + 1] == "0") {
          row[c] = 0.0;
        } else if (fields[c + 1] == "1") {
          row[c] = 1.0;
        } else {
          throw ParseError(location(path, line_no) + ": label '" + fields[c + 1] +
                           "' in column " + table.class_names[c] + " is not 0 or 1");
        }
      }
    }
    table.rows.push_back(std::move(row));
  }
  if (table.class_names.empty()) throw ParseError("'" + path + "' is empty");
  return table;
}

inline void write_table(const std::string& path, const std::vector<std::string>& class_names,
                        const std::vector<std::string>& ids, const Matrix& values) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out << "sample_id";
  for (const auto& name : class_names) out << ',' << name;
  out << '\n';
  for (std::size_t s = 0; s < ids.size(); ++s) {
    out << ids[s];
    for (std::size_t c = 0; c < values.cols; ++c) out << ',' << format_double(values(s, c));
    out << '\n';
  }
  if (!out) throw ParseError("short write to '" + path + "'");
}

}  // namespace csv

inline PredictionTensor load_predictions(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ConfigError("load_predictions: no input files");
  PredictionTensor t;
  t.num_sub_models = paths.size();
  std::unordered_map<std::string, std::size_t> sample_index;
  std::vector<char> seen;

  for (std::size_t m = 0; m < paths.size(); ++m) {
    const std::string& path = paths[m];
    std::string stem = std::filesystem::path(path).stem().string();
    for (const auto& prev : t.sub_model_ids) {
      if (prev == stem) {
        throw ConfigError("load_predictions: duplicate sub-model id '" + stem + "'");
      }
    }
    t.sub_model_ids.push_back(std::move(stem));

    const csv::Table table = csv::read_table(path, /*probabilities=*/true);
    if (m == 0) {
      t.class_names = table.class_names;
      t.num_classes = table.class_names.size();
      t.sample_ids = table.ids;
      std::sort(t.sample_ids.begin(), t.sample_ids.end());
      t.num_samples = t.sample_ids.size();
      if (t.num_samples == 0) throw ParseError("'" + path + "' has no data rows");
      for (std::size_t s = 0; s < t.num_samples; ++s) {
        if (s > 0 && t.sample_ids[s] == t.sample_ids[s - 1]) {
          throw ParseError("'" + path + "': duplicate sample id '" + t.sample_ids[s] + "'");
        }
        sample_index.emplace(t.sample_ids[s], s);
      }
      t.values.assign(t.num_samples * t.num_sub_models * t.num_classes, 0.0);
    } else if (table.class_names != t.class_names) {
      throw ParseError("'" + path + "': class header differs from '" + paths[0] + "'");
    }

    seen.assign(t.num_samples, 0);
    for (std::size_t r = 0; r < table.ids.size(); ++r) {
      const auto it = sample_index.find(table.ids[r]);
      if (it == sample_index.end()) {
        throw ParseError("'" + path + "': sample '" + table.ids[r] + "' not present in '" +
                         paths[0] + "'");
      }
      if (seen[it->second]) {
        throw ParseError("'" + path + "': duplicate sample id '" + table.ids[r] + "'");
      }
      seen[it->second] = 1;
      for (std::size_t c = 0; c < t.num_classes; ++c) {
        t.at(it->second, m, c) = table.rows[r][c];
      }
    }
    for (std::size_t s = 0; s < t.num_samples; ++s) {
      if (!seen[s]) {
        throw ParseError("'" + path + "': sample '" + t.sample_ids[s] + "' is missing");
      }
    }
  }
  return t;
}

inline LabelMatrix load_labels(const std::string& path, AnyCheck check = AnyCheck::warn) {
  const csv::Table table = csv::read_table(path, /*probabilities=*/false);
  LabelMatrix labels;
  labels.class_names = table.class_names;
  labels.num_classes = table.class_names.size();
  labels.sample_ids = table.ids;

  std::vector<std::size_t> order(table.ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return table.ids[a] < table.ids[b]; });
  std::sort(labels.sample_ids.begin(), labels.sample_ids.end());
  for (std::size_t s = 1; s < labels.sample_ids.size(); ++s) {
    if (labels.sample_ids[s] == labels.sample_ids[s - 1]) {
      throw ParseError("'" + path + "': duplicate sample id '" + labels.sample_ids[s] + "'");
    }
  }
  labels.num_samples = labels.sample_ids.size();
  labels.values = Matrix(labels.num_samples, labels.num_classes);
  for (std::size_t s = 0; s < labels.num_samples; ++s) {
    for (std::size_t c = 0; c < labels.num_classes; ++c) {
      labels.values(s, c) = table.rows[order[s]][c];
    }
  }

  for (std::size_t c = 0; c < labels.class_names.size(); ++c) {
    if (labels.class_names[c] == "any") {
      labels.any_index = c;
      break;
    }
  }
  if (labels.any_index) {
    for (std::size_t s = 0; s < labels.num_samples; ++s) {
      double max_sub = 0.0;
      for (std::size_t c = 0; c < labels.num_classes; ++c) {
        if (c != *labels.any_index) max_sub = std::max(max_sub, labels.values(s, c));
      }
      if (labels.values(s, *labels.any_index) != max_sub) {
        labels.any_violations.push_back(labels.sample_ids[s]);
      }
    }
    if (!labels.any_violations.empty()) {
      std::string detail = "'" + path + "': 'any' label inconsistent with sub-types for " +
                           std::to_string(labels.any_violations.size()) + " sample(s), first '" +
                           labels.any_violations.front() + "'";
      if (check == AnyCheck::fail) throw DomainError(detail);
      std::fprintf(stderr, "warning: %s\n", detail.c_str());
    }
  }
  return labels;
}

inline PredictionTensor append_sub_models(const PredictionTensor& a, const PredictionTensor& b) {
  if (b.num_sub_models == 0) return a;
  if (a.num_sub_models == 0) return b;
  if (a.num_classes != b.num_classes || a.class_names != b.class_names) {
    throw ShapeError("append_sub_models: class headers differ");
  }
  if (a.num_samples != b.num_samples || a.sample_ids != b.sample_ids) {
    throw ShapeError("append_sub_models: sample sets differ");
  }
  for (const auto& id : b.sub_model_ids) {
    if (std::find(a.sub_model_ids.begin(), a.sub_model_ids.end(), id) != a.sub_model_ids.end()) {
      throw ConfigError("append_sub_models: duplicate sub-model id '" + id + "'");
    }
  }
  PredictionTensor out;
  out.num_samples = a.num_samples;
  out.num_sub_models = a.num_sub_models + b.num_sub_models;
  out.num_classes = a.num_classes;
  out.sample_ids = a.sample_ids;
  out.class_names = a.class_names;
  out.sub_model_ids = a.sub_model_ids;
  out.sub_model_ids.insert(out.sub_model_ids.end(), b.sub_model_ids.begin(),
                           b.sub_model_ids.end());
  out.values.resize(out.num_samples * out.num_sub_models * out.num_classes);
  for (std::size_t s = 0; s < out.num_samples; ++s) {
    for (std::size_t m = 0; m < a.num_sub_models; ++m) {
      for (std::size_t c = 0; c < out.num_classes; ++c) out.at(s, m, c) = a.at(s, m, c);
    }
    for (std::size_t m = 0; m < b.num_sub_models; ++m) {
      for (std::size_t c = 0; c < out.num_classes; ++c) {
        out.at(s, a.num_sub_models + m, c) = b.at(s, m, c);
      }
    }
  }
  return out;
}

inline PredictionTensor select_sub_models(const PredictionTensor& t,
                                          const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw EmptyEnsembleError("select_sub_models: empty selection");
  PredictionTensor out;
  out.num_samples = t.num_samples;
  out.num_sub_models = indices.size();
  out.num_classes = t.num_classes;
  out.sample_ids = t.sample_ids;
  out.class_names = t.class_names;
  for (std::size_t m : indices) {
    if (m >= t.num_sub_models) {
      throw ConfigError("select_sub_models: index " + std::to_string(m) + " out of range for " +
                        std::to_string(t.num_sub_models) + " sub-models");
    }
    out.sub_model_ids.push_back(t.sub_model_ids[m]);
  }
  out.values.resize(out.num_samples * out.num_sub_models * out.num_classes);
  for (std::size_t s = 0; s < out.num_samples; ++s) {
    for (std::size_t k = 0; k < indices.size(); ++k) {
      for (std::size_t c = 0; c < out.num_classes; ++c) {
        out.at(s, k, c) = t.at(s, indices[k], c);
      }
    }
  }
  return out;
}

inline PredictionTensor select_samples(const PredictionTensor& t,
                                       const std::vector<std::size_t>& indices) {
  PredictionTensor out;
  out.num_samples = indices.size();
  out.num_sub_models = t.num_sub_models;
  out.num_classes = t.num_classes;
  out.sub_model_ids = t.sub_model_ids;
  out.class_names = t.class_names;
  out.values.resize(out.num_samples * out.num_sub_models * out.num_classes);
  const std::size_t stride = t.num_sub_models * t.num_classes;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t s = indices[k];
    if (s >= t.num_samples) {
      throw ConfigError("select_samples: index " + std::to_string(s) + " out of range for " +
                        std::to_string(t.num_samples) + " samples");
    }
    out.sample_ids.push_back(t.sample_ids[s]);
    std::copy_n(t.values.data() + s * stride, stride, out.values.data() + k * stride);
  }
  return out;
}

inline LabelMatrix select_samples(const LabelMatrix& l, const std::vector<std::size_t>& indices) {
  LabelMatrix out;
  out.num_samples = indices.size();
  out.num_classes = l.num_classes;
  out.class_names = l.class_names;
  out.any_index = l.any_index;
  out.values = Matrix(out.num_samples, out.num_classes);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t s = indices[k];
    if (s >= l.num_samples) {
      throw ConfigError("select_samples: index " + std::to_string(s) + " out of range for " +
                        std::to_string(l.num_samples) + " samples");
    }
    out.sample_ids.push_back(l.sample_ids[s]);
    for (std::size_t c = 0; c < out.num_classes; ++c) out.values(k, c) = l.values(s, c);
  }
  return out;
}

// One combined S x C prediction matrix, `sample_id,<classes...>` schema.
inline void save_prediction_matrix(const std::string& path,
                                   const std::vector<std::string>& sample_ids,
                                   const std::vector<std::string>& class_names,
                                   const Matrix& values) {
  if (values.rows != sample_ids.size() || values.cols != class_names.size()) {
    throw ShapeError("save_prediction_matrix: matrix is " + shape_string(values) + " for " +
                     std::to_string(sample_ids.size()) + " ids and " +
                     std::to_string(class_names.size()) + " classes");
  }
  csv::write_table(path, class_names, sample_ids, values);
}

inline void save_sub_model_csv(const PredictionTensor& t, std::size_t m,
                               const std::string& path) {
  if (m >= t.num_sub_models) throw ConfigError("save_sub_model_csv: index out of range");
  Matrix values(t.num_samples, t.num_classes);
  for (std::size_t s = 0; s < t.num_samples; ++s) {
    for (std::size_t c = 0; c < t.num_classes; ++c) values(s, c) = t.at(s, m, c);
  }
  csv::write_table(path, t.class_names, t.sample_ids, values);
}

inline void save_labels_csv(const LabelMatrix& labels, const std::string& path) {
  csv::write_table(path, labels.class_names, labels.sample_ids, labels.values);
}

// `sub_model_id,weight` rows covering exactly the expected ids, any order.
inline std::vector<double> load_weights(const std::string& path,
                                        const std::vector<std::string>& expected_ids) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < expected_ids.size(); ++i) index.emplace(expected_ids[i], i);
  std::vector<double> weights(expected_ids.size(), 0.0);
  std::vector<char> seen(expected_ids.size(), 0);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = csv::split_fields(line);
    if (line_no == 1) {
      if (fields.size() != 2 || fields[0] != "sub_model_id" || fields[1] != "weight") {
        throw ParseError(csv::location(path, 1) + ": expected header 'sub_model_id,weight'");
      }
      continue;
    }
    if (fields.size() != 2) {
      throw ParseError(csv::location(path, line_no) + ": expected 2 fields");
    }
    const auto it = index.find(fields[0]);
    if (it == index.end()) {
      throw ConfigError(csv::location(path, line_no) + ": unknown sub-model id '" + fields[0] +
                        "'");
    }
    if (seen[it->second]) {
      throw ConfigError(csv::location(path, line_no) + ": duplicate sub-model id '" + fields[0] +
                        "'");
    }
    seen[it->second] = 1;
    double value = 0.0;
    const auto [ptr, ec] =
        std::from_chars(fields[1].data(), fields[1].data() + fields[1].size(), value);
    if (ec != std::errc() || ptr != fields[1].data() + fields[1].size()) {
      throw ParseError(csv::location(path, line_no) + ": cannot parse weight '" + fields[1] +
                       "'");
    }
    weights[it->second] = value;
  }
  for (std::size_t i = 0; i < expected_ids.size(); ++i) {
    if (!seen[i]) {
      throw ConfigError("'" + path + "': no weight for sub-model '" + expected_ids[i] + "'");
    }
  }
  return weights;
}

}  // namespace mac
