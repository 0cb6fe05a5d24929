#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include "mac/data_io.hpp"
#include "mac/error.hpp"
#include "mac/loss.hpp"
#include "mac/matrix.hpp"
#include "mac/mlp.hpp"
#include "mac/parallel.hpp"

namespace mac {

// The combiner is g(rho({f(x_i)})): a per-prediction transform f into a
// latent space, a permutation-invariant reduction over the ensemble, and a
// readout g back to a probability. With analytic transforms this recovers
// the classical means; with learned transforms f and g are small MLPs.

enum class ReducerKind : std::uint8_t {
  mean = 0,
  weighted_mean = 1,
  median = 2,
  min = 3,
  max = 4,
  majority_vote = 5,
};

struct Reducer {
  ReducerKind kind = ReducerKind::mean;
};

enum class AnalyticKind : std::uint8_t {
  identity = 0,
  natural_log = 1,
  exponential = 2,
  reciprocal = 3,
};

struct AnalyticTransform {
  AnalyticKind kind = AnalyticKind::identity;
};

using Transform = std::variant<AnalyticTransform, Mlp>;

// Default-constructed model is the arithmetic mean: identity transforms
// around a mean reduction.
struct MacModel {
  Transform f;
  Transform g;
  Reducer reducer;
  std::size_t latent_dim = 1;
};

inline void validate_model(const MacModel& model) {
  if (model.latent_dim == 0) throw ConfigError("MacModel: latent_dim must be positive");
  if (const auto* f = std::get_if<Mlp>(&model.f)) {
    if (f->input_dim != 1) {
      throw ConfigError("MacModel: f takes scalar probabilities, has input_dim " +
                        std::to_string(f->input_dim));
    }
    if (f->output_dim != model.latent_dim) {
      throw ConfigError("MacModel: f.output_dim " + std::to_string(f->output_dim) +
                        " does not match latent_dim " + std::to_string(model.latent_dim));
    }
    if (f->head_activation != HeadActivation::none) {
      throw ConfigError("MacModel: f must have a linear head");
    }
  } else if (model.latent_dim != 1) {
    throw ConfigError("MacModel: analytic f requires latent_dim 1");
  }
  if (const auto* g = std::get_if<Mlp>(&model.g)) {
    if (g->input_dim != model.latent_dim) {
      throw ConfigError("MacModel: g.input_dim " + std::to_string(g->input_dim) +
                        " does not match latent_dim " + std::to_string(model.latent_dim));
    }
    if (g->output_dim != 1) {
      throw ConfigError("MacModel: g emits one probability, has output_dim " +
                        std::to_string(g->output_dim));
    }
    if (g->head_activation != HeadActivation::sigmoid) {
      throw ConfigError("MacModel: g must have a sigmoid head");
    }
  } else if (model.latent_dim != 1) {
    throw ConfigError("MacModel: analytic g requires latent_dim 1");
  }
}

inline MacModel make_learned_model(std::size_t latent_dim, std::uint64_t f_seed,
                                   std::uint64_t g_seed) {
  MacModel model;
  model.latent_dim = latent_dim;
  model.f = make_mlp(1, latent_dim, HeadActivation::none, f_seed);
  model.g = make_mlp(latent_dim, 1, HeadActivation::sigmoid, g_seed);
  return model;
}

inline MacModel arithmetic_model() { return MacModel{}; }

inline MacModel geometric_model() {
  MacModel model;
  model.f = AnalyticTransform{AnalyticKind::natural_log};
  model.g = AnalyticTransform{AnalyticKind::exponential};
  return model;
}

inline MacModel harmonic_model() {
  MacModel model;
  model.f = AnalyticTransform{AnalyticKind::reciprocal};
  model.g = AnalyticTransform{AnalyticKind::reciprocal};
  return model;
}

// Applies a transform to each row of a column-stacked input. Analytic
// transforms do not clip: feeding ln or 1/x a zero raises DomainError, so
// callers that need protection clip first.
inline Matrix apply_transform(const Transform& t, const Matrix& x) {
  if (const auto* analytic = std::get_if<AnalyticTransform>(&t)) {
    switch (analytic->kind) {
      case AnalyticKind::identity:
        return x;
      case AnalyticKind::natural_log:
        return elementwise(ElementwiseOp::ln, x);
      case AnalyticKind::exponential:
        return elementwise(ElementwiseOp::exp, x);
      case AnalyticKind::reciprocal:
        return elementwise(ElementwiseOp::reciprocal, x);
    }
    throw ConfigError("apply_transform: unknown analytic kind");
  }
  return forward(std::get<Mlp>(t), x);
}

// Reduces consecutive n-row blocks of z to one row each. Every reduction
// walks its block in ascending row order so results do not depend on how
// samples were batched together.
inline Matrix reduce_blocks(const Matrix& z, std::size_t blocks, std::size_t n, Reducer reducer,
                            const std::vector<double>* weights = nullptr) {
  if (n == 0 || z.rows != blocks * n) {
    throw ShapeError("reduce_blocks: " + shape_string(z) + " does not split into " +
                     std::to_string(blocks) + " blocks of " + std::to_string(n));
  }
  if (weights && weights->size() != n) {
    throw ShapeError("reduce_blocks: " + std::to_string(weights->size()) + " weights for block size " +
                     std::to_string(n));
  }
  const std::size_t L = z.cols;
  Matrix out(blocks, L);
  std::vector<double> scratch;
  for (std::size_t b = 0; b < blocks; ++b) {
    const double* block = z.row_ptr(b * n);
    double* dst = out.row_ptr(b);
    switch (reducer.kind) {
      case ReducerKind::weighted_mean:
        if (weights) {
          double wsum = 0.0;
          for (std::size_t i = 0; i < n; ++i) wsum += (*weights)[i];
          for (std::size_t i = 0; i < n; ++i) {
            const double w = (*weights)[i];
            for (std::size_t l = 0; l < L; ++l) dst[l] += w * block[i * L + l];
          }
          for (std::size_t l = 0; l < L; ++l) dst[l] /= wsum;
          break;
        }
        [[fallthrough]];
      case ReducerKind::mean:
        // An all-equal column returns the common value directly; summing k
        // copies and dividing by k rounds twice and would break the
        // requirement that a mean over copies of one row reproduces that
        // row bit for bit.
        for (std::size_t l = 0; l < L; ++l) {
          const double first = block[l];
          bool all_equal = true;
          for (std::size_t i = 1; i < n; ++i) {
            if (block[i * L + l] != first) {
              all_equal = false;
              break;
            }
          }
          if (all_equal) {
            dst[l] = first;
            continue;
          }
          double acc = 0.0;
          for (std::size_t i = 0; i < n; ++i) acc += block[i * L + l];
          dst[l] = acc / static_cast<double>(n);
        }
        break;
      case ReducerKind::median:
        scratch.resize(n);
        for (std::size_t l = 0; l < L; ++l) {
          for (std::size_t i = 0; i < n; ++i) scratch[i] = block[i * L + l];
          std::sort(scratch.begin(), scratch.end());
          dst[l] = (n % 2 == 1) ? scratch[n / 2]
                                : 0.5 * (scratch[n / 2 - 1] + scratch[n / 2]);
        }
        break;
      case ReducerKind::min:
        for (std::size_t l = 0; l < L; ++l) dst[l] = block[l];
        for (std::size_t i = 1; i < n; ++i)
          for (std::size_t l = 0; l < L; ++l) dst[l] = std::min(dst[l], block[i * L + l]);
        break;
      case ReducerKind::max:
        for (std::size_t l = 0; l < L; ++l) dst[l] = block[l];
        for (std::size_t i = 1; i < n; ++i)
          for (std::size_t l = 0; l < L; ++l) dst[l] = std::max(dst[l], block[i * L + l]);
        break;
      case ReducerKind::majority_vote:
        for (std::size_t l = 0; l < L; ++l) {
          std::size_t votes = 0;
          for (std::size_t i = 0; i < n; ++i) votes += block[i * L + l] > 0.5 ? 1 : 0;
          dst[l] = static_cast<double>(votes) / static_cast<double>(n);
        }
        break;
    }
  }
  return out;
}

namespace detail {

inline void check_unit_range(const Matrix& preds, const char* where) {
  for (std::size_t t = 0; t < preds.size(); ++t) {
    const double v = preds.data[t];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DomainError(std::string(where) + ": prediction " + std::to_string(v) + " at " +
                        index_string(preds, t) + " is outside [0,1]");
    }
  }
}

// Shared pipeline for every combine entry point: x stacks the f inputs for
// `blocks` (sample, class) pairs, n rows per block.
inline Matrix combine_core(const MacModel& model, Reducer reducer, const Matrix& x,
                           std::size_t blocks, std::size_t n,
                           const std::vector<double>* weights) {
  const Matrix latent = apply_transform(model.f, x);
  const Matrix reduced = reduce_blocks(latent, blocks, n, reducer, weights);
  return apply_transform(model.g, reduced);
}

}  // namespace detail

// Combines one sample's N x C prediction matrix into C probabilities.
inline std::vector<double> combine(const MacModel& model, const Matrix& predictions) {
  validate_model(model);
  if (predictions.rows == 0) throw EmptyEnsembleError("combine: no sub-model predictions");
  if (predictions.cols == 0) throw ShapeError("combine: prediction matrix has no classes");
  detail::check_unit_range(predictions, "combine");
  const std::size_t n = predictions.rows;
  const std::size_t C = predictions.cols;
  Matrix x(C * n, 1);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < n; ++i) x.data[c * n + i] = predictions(i, c);
  const Matrix y = detail::combine_core(model, model.reducer, x, C, n, nullptr);
  return std::vector<double>(y.data.begin(), y.data.end());
}

// Same pipeline with an explicit weighted mean over the latents, regardless
// of the model's stored reducer.
inline std::vector<double> combine_weighted(const MacModel& model, const Matrix& predictions,
                                            const std::vector<double>& weights) {
  validate_model(model);
  if (predictions.rows == 0) throw EmptyEnsembleError("combine_weighted: no sub-model predictions");
  if (predictions.cols == 0) throw ShapeError("combine_weighted: prediction matrix has no classes");
  if (weights.size() != predictions.rows) {
    throw ShapeError("combine_weighted: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(predictions.rows) + " sub-models");
  }
  double wsum = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] >= 0.0)) {
      throw DomainError("combine_weighted: weight " + std::to_string(weights[i]) + " at index " +
                        std::to_string(i) + " is negative");
    }
    wsum += weights[i];
  }
  if (wsum == 0.0) throw DomainError("combine_weighted: weights sum to zero");
  detail::check_unit_range(predictions, "combine_weighted");
  const std::size_t n = predictions.rows;
  const std::size_t C = predictions.cols;
  Matrix x(C * n, 1);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < n; ++i) x.data[c * n + i] = predictions(i, c);
  const Matrix y =
      detail::combine_core(model, Reducer{ReducerKind::weighted_mean}, x, C, n, &weights);
  return std::vector<double>(y.data.begin(), y.data.end());
}

// Two-level combination: each group is combined on its own, then the group
// outputs are combined again, re-applying f to the intermediate
// probabilities.
inline std::vector<double> combine_hierarchical(const MacModel& model,
                                                const std::vector<Matrix>& groups) {
  validate_model(model);
  if (groups.empty()) throw EmptyEnsembleError("combine_hierarchical: no groups");
  const std::size_t C = groups.front().cols;
  Matrix stacked(groups.size(), C);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    if (groups[gi].cols != C) {
      throw ShapeError("combine_hierarchical: group " + std::to_string(gi) + " is " +
                       shape_string(groups[gi]) + ", expected " + std::to_string(C) + " classes");
    }
    if (groups[gi].rows == 0) {
      throw EmptyEnsembleError("combine_hierarchical: group " + std::to_string(gi) + " is empty");
    }
    const std::vector<double> inner = combine(model, groups[gi]);
    std::copy(inner.begin(), inner.end(), stacked.row_ptr(gi));
  }
  return combine(model, stacked);
}

inline constexpr std::size_t kCombineChunkRows = 65536;

// Whole-tensor combination, bit-identical to calling combine() per sample
// for any chunking or thread count: the kernels keep each row's arithmetic
// independent of its neighbours.
inline Matrix combine_dataset(const MacModel& model, const PredictionTensor& t,
                              std::size_t threads = 1) {
  validate_model(model);
  if (t.num_sub_models == 0) throw EmptyEnsembleError("combine_dataset: tensor has no sub-models");
  if (t.num_classes == 0) throw ShapeError("combine_dataset: tensor has no classes");
  const std::size_t C = t.num_classes;
  const std::size_t n = t.num_sub_models;
  const std::size_t per_sample = C * n;
  const std::size_t chunk = std::max<std::size_t>(1, kCombineChunkRows / per_sample);
  Matrix out(t.num_samples, C);
  run_partitioned(t.num_samples, threads, [&](std::size_t s_begin, std::size_t s_end) {
    for (std::size_t s0 = s_begin; s0 < s_end; s0 += chunk) {
      const std::size_t s1 = std::min(s0 + chunk, s_end);
      Matrix x((s1 - s0) * per_sample, 1);
      std::size_t r = 0;
      for (std::size_t s = s0; s < s1; ++s) {
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t i = 0; i < n; ++i) {
            const double v = t.at(s, i, c);
            if (!(v >= 0.0 && v <= 1.0)) {
              throw DomainError("combine_dataset: prediction " + std::to_string(v) +
                                " for sample " + std::to_string(s) + ", sub-model " +
                                std::to_string(i) + ", class " + std::to_string(c) +
                                " is outside [0,1]");
            }
            x.data[r++] = v;
          }
        }
      }
      const Matrix y =
          detail::combine_core(model, model.reducer, x, (s1 - s0) * C, n, nullptr);
      std::copy(y.data.begin(), y.data.end(), out.row_ptr(s0));
    }
  });
  return out;
}

enum class ClosedFormKind : std::uint8_t { arithmetic, geometric, harmonic, median, min, max };

inline ClosedFormKind closed_form_from_string(const std::string& name) {
  if (name == "arithmetic") return ClosedFormKind::arithmetic;
  if (name == "geometric") return ClosedFormKind::geometric;
  if (name == "harmonic") return ClosedFormKind::harmonic;
  if (name == "median") return ClosedFormKind::median;
  if (name == "min") return ClosedFormKind::min;
  if (name == "max") return ClosedFormKind::max;
  throw ConfigError("unknown combiner '" + name +
                    "', expected arithmetic, geometric, harmonic, median, min or max");
}

inline std::string to_string(ClosedFormKind kind) {
  switch (kind) {
    case ClosedFormKind::arithmetic: return "arithmetic";
    case ClosedFormKind::geometric: return "geometric";
    case ClosedFormKind::harmonic: return "harmonic";
    case ClosedFormKind::median: return "median";
    case ClosedFormKind::min: return "min";
    case ClosedFormKind::max: return "max";
  }
  return "unknown";
}

// Direct closed-form baselines. Geometric and harmonic clip into
// [kProbClip, 1 - kProbClip] before taking logs or reciprocals so that hard
// 0/1 predictions stay finite.
inline std::vector<double> combine_closed_form(ClosedFormKind kind, const Matrix& predictions) {
  if (predictions.rows == 0) {
    throw EmptyEnsembleError("combine_closed_form: no sub-model predictions");
  }
  if (predictions.cols == 0) {
    throw ShapeError("combine_closed_form: prediction matrix has no classes");
  }
  detail::check_unit_range(predictions, "combine_closed_form");
  const std::size_t n = predictions.rows;
  const std::size_t C = predictions.cols;
  const double N = static_cast<double>(n);
  std::vector<double> out(C);
  std::vector<double> scratch;
  for (std::size_t c = 0; c < C; ++c) {
    switch (kind) {
      case ClosedFormKind::arithmetic: {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += predictions(i, c);
        out[c] = sum / N;
        break;
      }
      case ClosedFormKind::geometric: {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          sum += std::log(std::clamp(predictions(i, c), kProbClip, 1.0 - kProbClip));
        }
        out[c] = std::exp(sum / N);
        break;
      }
      case ClosedFormKind::harmonic: {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          sum += 1.0 / std::clamp(predictions(i, c), kProbClip, 1.0 - kProbClip);
        }
        out[c] = 1.0 / (sum / N);
        break;
      }
      case ClosedFormKind::median: {
        scratch.resize(n);
        for (std::size_t i = 0; i < n; ++i) scratch[i] = predictions(i, c);
        std::sort(scratch.begin(), scratch.end());
        out[c] = (n % 2 == 1) ? scratch[n / 2] : 0.5 * (scratch[n / 2 - 1] + scratch[n / 2]);
        break;
      }
      case ClosedFormKind::min: {
        double v = predictions(0, c);
        for (std::size_t i = 1; i < n; ++i) v = std::min(v, predictions(i, c));
        out[c] = v;
        break;
      }
      case ClosedFormKind::max: {
        double v = predictions(0, c);
        for (std::size_t i = 1; i < n; ++i) v = std::max(v, predictions(i, c));
        out[c] = v;
        break;
      }
    }
  }
  return out;
}

inline Matrix combine_dataset_closed_form(ClosedFormKind kind, const PredictionTensor& t) {
  if (t.num_sub_models == 0) {
    throw EmptyEnsembleError("combine_dataset_closed_form: tensor has no sub-models");
  }
  Matrix out(t.num_samples, t.num_classes);
  for (std::size_t s = 0; s < t.num_samples; ++s) {
    const std::vector<double> y = combine_closed_form(kind, t.sample_slice(s));
    std::copy(y.begin(), y.end(), out.row_ptr(s));
  }
  return out;
}

// Tabulated f, g and g(f(.)) curves for inspecting what a model learned.
// The monotonicity fraction is reported, never enforced; a constant f scores
// zero because no consecutive pair strictly increases.
struct TraceResult {
  std::vector<double> input_points;
  std::vector<double> f_values;
  std::vector<double> latent_points;
  std::vector<double> g_values;
  std::vector<double> gof_values;
  double f_increasing_fraction = 0.0;
};

inline TraceResult trace_functions(const MacModel& model, const std::vector<double>& input_points,
                                   const std::vector<double>& latent_points) {
  validate_model(model);
  if (model.latent_dim != 1) {
    throw ConfigError("trace_functions: only latent_dim 1 models have scalar curves");
  }
  if (input_points.empty() || latent_points.empty()) {
    throw ConfigError("trace_functions: empty grid");
  }
  TraceResult result;
  result.input_points = input_points;
  result.latent_points = latent_points;

  Matrix xin(input_points.size(), 1);
  std::copy(input_points.begin(), input_points.end(), xin.data.begin());
  const Matrix f_out = apply_transform(model.f, xin);
  result.f_values.assign(f_out.data.begin(), f_out.data.end());

  Matrix zin(latent_points.size(), 1);
  std::copy(latent_points.begin(), latent_points.end(), zin.data.begin());
  const Matrix g_out = apply_transform(model.g, zin);
  result.g_values.assign(g_out.data.begin(), g_out.data.end());

  const Matrix gof = apply_transform(model.g, f_out);
  result.gof_values.assign(gof.data.begin(), gof.data.end());

  if (result.f_values.size() >= 2) {
    std::size_t increasing = 0;
    for (std::size_t i = 1; i < result.f_values.size(); ++i) {
      if (result.f_values[i] > result.f_values[i - 1]) ++increasing;
    }
    result.f_increasing_fraction =
        static_cast<double>(increasing) / static_cast<double>(result.f_values.size() - 1);
  }
  return result;
}

inline void save_trace_csv(const TraceResult& r, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out << "curve,input,output\n";
  for (std::size_t i = 0; i < r.input_points.size(); ++i) {
    out << "f," << csv::format_double(r.input_points[i]) << ','
        << csv::format_double(r.f_values[i]) << '\n';
  }
  for (std::size_t i = 0; i < r.latent_points.size(); ++i) {
    out << "g," << csv::format_double(r.latent_points[i]) << ','
        << csv::format_double(r.g_values[i]) << '\n';
  }
  for (std::size_t i = 0; i < r.input_points.size(); ++i) {
    out << "g_of_f," << csv::format_double(r.input_points[i]) << ','
        << csv::format_double(r.gof_values[i]) << '\n';
  }
  if (!out) throw ParseError("short write to '" + path + "'");
}

inline constexpr std::uint32_t kMacMagic = 0x4d43414dU;
inline constexpr std::uint32_t kMacFormatVersion = 1;

namespace detail {

inline void put_transform(std::vector<std::uint8_t>& out, const Transform& t) {
  if (const auto* analytic = std::get_if<AnalyticTransform>(&t)) {
    out.push_back(0);
    out.push_back(static_cast<std::uint8_t>(analytic->kind));
    return;
  }
  out.push_back(1);
  const std::vector<std::uint8_t> blob = serialize(std::get<Mlp>(t));
  out.insert(out.end(), blob.begin(), blob.end());
}

inline Transform read_transform(ByteReader& r) {
  const std::uint8_t tag = r.u8();
  if (tag == 0) {
    const std::uint8_t kind = r.u8();
    if (kind > static_cast<std::uint8_t>(AnalyticKind::reciprocal)) {
      throw ParseError("model blob: unknown analytic transform " + std::to_string(kind));
    }
    return AnalyticTransform{static_cast<AnalyticKind>(kind)};
  }
  if (tag != 1) throw ParseError("model blob: unknown transform tag " + std::to_string(tag));
  return deserialize_mlp(r);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const MacModel& model) {
  validate_model(model);
  std::vector<std::uint8_t> out;
  detail::put_u32(out, kMacMagic);
  detail::put_u32(out, kMacFormatVersion);
  out.push_back(static_cast<std::uint8_t>(model.reducer.kind));
  detail::put_u64(out, model.latent_dim);
  detail::put_transform(out, model.f);
  detail::put_transform(out, model.g);
  return out;
}

inline MacModel deserialize_mac(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r{bytes.data(), bytes.size()};
  if (r.u32() != kMacMagic) throw ParseError("not a combiner model blob (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kMacFormatVersion) {
    throw VersionError("combiner model blob has version " + std::to_string(version) +
                       ", expected " + std::to_string(kMacFormatVersion));
  }
  MacModel model;
  const std::uint8_t kind = r.u8();
  if (kind > static_cast<std::uint8_t>(ReducerKind::majority_vote)) {
    throw ParseError("model blob: unknown reducer " + std::to_string(kind));
  }
  model.reducer.kind = static_cast<ReducerKind>(kind);
  model.latent_dim = static_cast<std::size_t>(r.u64());
  model.f = detail::read_transform(r);
  model.g = detail::read_transform(r);
  if (r.pos != bytes.size()) {
    throw ParseError("model blob has " + std::to_string(bytes.size() - r.pos) + " trailing bytes");
  }
  try {
    validate_model(model);
  } catch (const Error& e) {
    throw ParseError(std::string("model blob is inconsistent: ") + e.what());
  }
  return model;
}

inline void save_mac_file(const MacModel& model, const std::string& path) {
  write_bytes(path, serialize(model));
}

inline MacModel load_mac_file(const std::string& path) {
  return deserialize_mac(read_bytes(path));
}

}  // namespace mac
