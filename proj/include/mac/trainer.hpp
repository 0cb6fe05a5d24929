#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mac/combine.hpp"
#include "mac/data_io.hpp"
#include "mac/error.hpp"
#include "mac/loss.hpp"
#include "mac/mlp.hpp"
#include "mac/rng.hpp"

namespace mac {

struct TrainConfig {
  std::array<double, 3> split_fractions = {0.8, 0.1, 0.1};
  double subsample_fraction = 0.8;
  std::size_t batch_size = 500;
  double learning_rate = 1e-3;
  std::size_t max_epochs = 60;
  std::size_t patience_epochs = 5;
  std::uint64_t seed = 0;
  std::size_t latent_dim = 1;
};

inline void validate_config(const TrainConfig& cfg) {
  double sum = 0.0;
  for (double f : cfg.split_fractions) {
    if (!(f > 0.0)) throw ConfigError("TrainConfig: split fractions must be positive");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("TrainConfig: split fractions sum to " + std::to_string(sum) +
                      ", expected 1");
  }
  if (!(cfg.subsample_fraction > 0.0 && cfg.subsample_fraction <= 1.0)) {
    throw ConfigError("TrainConfig: subsample_fraction must be in (0,1]");
  }
  if (cfg.batch_size == 0) throw ConfigError("TrainConfig: batch_size must be positive");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("TrainConfig: learning_rate must be positive");
  if (cfg.latent_dim == 0) throw ConfigError("TrainConfig: latent_dim must be positive");
}

struct EpochRecord {
  double train_loss = 0.0;
  double val_loss = 0.0;
};

// wall_seconds is reported for operators but deliberately left out of the
// JSON serialization so reports from identical runs are byte-identical.
struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::quiet_NaN();
  double test_score = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::size_t train_samples = 0;
  std::size_t val_samples = 0;
  std::size_t test_samples = 0;
  std::size_t num_sub_models = 0;
};

namespace detail {

inline std::string json_number(double v) {
  if (!std::isfinite(v)) return "null";
  return csv::format_double(v);
}

}  // namespace detail

inline std::string to_json(const TrainReport& r) {
  std::ostringstream out;
  out << "{\n";
  out << "  \"seed\": " << r.seed << ",\n";
  out << "  \"num_sub_models\": " << r.num_sub_models << ",\n";
  out << "  \"split\": {\"train\": " << r.train_samples << ", \"val\": " << r.val_samples
      << ", \"test\": " << r.test_samples << "},\n";
  if (r.epochs.empty()) {
    out << "  \"best_epoch\": null,\n";
  } else {
    out << "  \"best_epoch\": " << r.best_epoch << ",\n";
  }
  out << "  \"best_val_loss\": " << detail::json_number(r.best_val_loss) << ",\n";
  out << "  \"test_score\": " << detail::json_number(r.test_score) << ",\n";
  out << "  \"epochs\": [";
  for (std::size_t e = 0; e < r.epochs.size(); ++e) {
    if (e > 0) out << ",";
    out << "\n    {\"train_loss\": " << detail::json_number(r.epochs[e].train_loss)
        << ", \"val_loss\": " << detail::json_number(r.epochs[e].val_loss) << "}";
  }
  if (!r.epochs.empty()) out << "\n  ";
  out << "]\n}\n";
  return out.str();
}

struct SplitResult {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  bool degraded = false;
};

// Groups samples by their full label pattern, shuffles each group and cuts
// it by the cumulative fractions, so every split sees each pattern (and
// hence each class) at close to its global rate. If some class has fewer
// positives than there are splits, pattern-level stratification cannot
// spread it; the split degrades to stratifying on the any label alone.
inline SplitResult stratified_split(const LabelMatrix& labels,
                                    const std::array<double, 3>& fractions, std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("stratified_split: fractions must be positive");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("stratified_split: fractions sum to " + std::to_string(sum));
  }
  const std::size_t S = labels.num_samples;
  const std::size_t C = labels.num_classes;
  SplitResult result;

  for (std::size_t c = 0; c < C; ++c) {
    std::size_t positives = 0;
    for (std::size_t s = 0; s < S; ++s) positives += labels.values(s, c) != 0.0 ? 1 : 0;
    if (positives > 0 && positives < 3) {
      result.degraded = true;
      std::fprintf(stderr,
                   "warning: class '%s' has only %zu positive sample(s); "
                   "stratifying on the any label only\n",
                   labels.class_names[c].c_str(), positives);
    }
  }

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t s = 0; s < S; ++s) {
    std::string key;
    if (result.degraded) {
      double any = 0.0;
      if (labels.any_index) {
        any = labels.values(s, *labels.any_index);
      } else {
        for (std::size_t c = 0; c < C; ++c) any = std::max(any, labels.values(s, c));
      }
      key = any != 0.0 ? "1" : "0";
    } else {
      key.resize(C);
      for (std::size_t c = 0; c < C; ++c) key[c] = labels.values(s, c) != 0.0 ? '1' : '0';
    }
    groups[key].push_back(s);
  }

  Rng rng(seed);
  for (auto& [key, members] : groups) {
    rng.shuffle(members);
    const double sz = static_cast<double>(members.size());
    const std::size_t cut1 = static_cast<std::size_t>(std::llround(fractions[0] * sz));
    const std::size_t cut2 =
        static_cast<std::size_t>(std::llround((fractions[0] + fractions[1]) * sz));
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (i < cut1) {
        result.train.push_back(members[i]);
      } else if (i < cut2) {
        result.val.push_back(members[i]);
      } else {
        result.test.push_back(members[i]);
      }
    }
  }
  std::sort(result.train.begin(), result.train.end());
  std::sort(result.val.begin(), result.val.end());
  std::sort(result.test.begin(), result.test.end());
  return result;
}

namespace detail {

inline void check_alignment(const PredictionTensor& preds, const LabelMatrix& labels) {
  if (preds.num_samples != labels.num_samples) {
    throw ShapeError("predictions cover " + std::to_string(preds.num_samples) +
                     " samples, labels cover " + std::to_string(labels.num_samples));
  }
  if (preds.num_classes != labels.num_classes) {
    throw ShapeError("predictions have " + std::to_string(preds.num_classes) +
                     " classes, labels have " + std::to_string(labels.num_classes));
  }
  if (!preds.sample_ids.empty() && !labels.sample_ids.empty() &&
      preds.sample_ids != labels.sample_ids) {
    throw ShapeError("prediction and label sample ids differ");
  }
}

inline ClassWeighting weighting_for(const LabelMatrix& labels) {
  if (labels.any_index) return ClassWeighting::any_doubled(labels.num_classes, *labels.any_index);
  return ClassWeighting::uniform(labels.num_classes);
}

inline MlpGrads zero_grads(const Mlp& net) {
  MlpGrads g;
  auto shape = [](DenseLayer& gl, const DenseLayer& nl) {
    gl.w = Matrix(nl.w.rows, nl.w.cols);
    gl.b = Matrix(nl.b.rows, nl.b.cols);
  };
  shape(g.trunk1, net.trunk1);
  shape(g.trunk2, net.trunk2);
  shape(g.proj, net.proj);
  shape(g.res1, net.res1);
  shape(g.res2, net.res2);
  shape(g.head, net.head);
  return g;
}

inline void accumulate_grads(MlpGrads& into, const MlpGrads& from) {
  auto add = [](DenseLayer& a, const DenseLayer& b) {
    for (std::size_t i = 0; i < a.w.data.size(); ++i) a.w.data[i] += b.w.data[i];
    for (std::size_t i = 0; i < a.b.data.size(); ++i) a.b.data[i] += b.b.data[i];
  };
  add(into.trunk1, from.trunk1);
  add(into.trunk2, from.trunk2);
  add(into.proj, from.proj);
  add(into.res1, from.res1);
  add(into.res2, from.res2);
  add(into.head, from.head);
}

}  // namespace detail

// Weighted BCE of the full-ensemble combination over the given samples
// (all samples when the subset pointer is null).
inline double evaluate(const MacModel& model, const PredictionTensor& preds,
                       const LabelMatrix& labels,
                       const std::vector<std::size_t>* sub_models = nullptr,
                       const std::vector<std::size_t>* samples = nullptr) {
  validate_model(model);
  detail::check_alignment(preds, labels);
  if (sub_models && sub_models->empty()) {
    throw EmptyEnsembleError("evaluate: empty sub-model subset");
  }
  const PredictionTensor* tensor = &preds;
  PredictionTensor selected;
  if (sub_models) {
    selected = select_sub_models(preds, *sub_models);
    tensor = &selected;
  }
  const ClassWeighting weighting = detail::weighting_for(labels);
  if (!samples) {
    const Matrix combined = combine_dataset(model, *tensor);
    return weighted_bce(combined, labels.values, weighting);
  }
  const PredictionTensor view = select_samples(*tensor, *samples);
  const LabelMatrix label_view = select_samples(labels, *samples);
  const Matrix combined = combine_dataset(model, view);
  return weighted_bce(combined, label_view.values, weighting);
}

// One optimization step over a fixed list of samples and a fixed sub-model
// subset: chunked forward through f, mean reduction, g, weighted BCE, then
// the exact reverse chain with one Adam step per net. Loss and gradients
// are scaled so chunking never changes the optimized objective.
namespace detail {

struct StepStats {
  double loss = 0.0;
};

inline StepStats train_step(MacModel& model, AdamState& f_state, AdamState& g_state,
                            const PredictionTensor& preds, const LabelMatrix& labels,
                            const std::vector<std::size_t>& batch_samples,
                            const std::vector<std::size_t>& sub_models,
                            const ClassWeighting& weighting) {
  Mlp& f_net = std::get<Mlp>(model.f);
  Mlp& g_net = std::get<Mlp>(model.g);
  const std::size_t C = preds.num_classes;
  const std::size_t k = sub_models.size();
  const std::size_t batch = batch_samples.size();
  const std::size_t per_sample = C * k;
  const std::size_t chunk = std::max<std::size_t>(1, kCombineChunkRows / per_sample);

  MlpGrads f_grads = zero_grads(f_net);
  MlpGrads g_grads = zero_grads(g_net);
  double loss = 0.0;

  MlpForwardCache f_cache, g_cache;
  for (std::size_t b0 = 0; b0 < batch; b0 += chunk) {
    const std::size_t b1 = std::min(b0 + chunk, batch);
    const std::size_t B = b1 - b0;
    const double chunk_scale = static_cast<double>(B) / static_cast<double>(batch);

    Matrix x(B * per_sample, 1);
    Matrix label_rows(B, C);
    std::size_t r = 0;
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t s = batch_samples[b];
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < k; ++i) x.data[r++] = preds.at(s, sub_models[i], c);
        label_rows(b - b0, c) = labels.values(s, c);
      }
    }

    forward_into(f_net, x, f_cache);
    const Matrix reduced =
        reduce_blocks(f_cache.y, B * C, k, Reducer{ReducerKind::mean}, nullptr);
    forward_into(g_net, reduced, g_cache);

    Matrix pred_rows(B, C);
    std::copy(g_cache.y.data.begin(), g_cache.y.data.end(), pred_rows.data.begin());
    loss += chunk_scale * weighted_bce(pred_rows, label_rows, weighting);

    Matrix upstream = weighted_bce_grad(pred_rows, label_rows, weighting);
    for (auto& v : upstream.data) v *= chunk_scale;
    Matrix g_upstream(B * C, 1);
    std::copy(upstream.data.begin(), upstream.data.end(), g_upstream.data.begin());

    const MlpGrads g_chunk = backward_from_cache(g_net, g_cache, g_upstream, true);
    accumulate_grads(g_grads, g_chunk);

    const std::size_t L = model.latent_dim;
    Matrix f_upstream(B * per_sample, L);
    const double denom = static_cast<double>(k);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t l = 0; l < L; ++l) {
          f_upstream(bc * k + i, l) = g_chunk.input(bc, l) / denom;
        }
      }
    }
    const MlpGrads f_chunk = backward_from_cache(f_net, f_cache, f_upstream, false);
    accumulate_grads(f_grads, f_chunk);
  }

  adam_step(f_net, f_grads, f_state);
  adam_step(g_net, g_grads, g_state);
  return StepStats{loss};
}

inline double split_loss(const MacModel& model, const PredictionTensor& preds,
                         const LabelMatrix& labels, const std::vector<std::size_t>& samples,
                         const ClassWeighting& weighting) {
  const PredictionTensor view = select_samples(preds, samples);
  const LabelMatrix label_view = select_samples(labels, samples);
  const Matrix combined = combine_dataset(model, view);
  return weighted_bce(combined, label_view.values, weighting);
}

}  // namespace detail

inline std::pair<MacModel, TrainReport> train(const PredictionTensor& preds,
                                              const LabelMatrix& labels,
                                              const TrainConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  validate_config(cfg);
  detail::check_alignment(preds, labels);
  if (preds.num_sub_models == 0) throw EmptyEnsembleError("train: no sub-models");
  if (preds.num_samples == 0) throw ConfigError("train: no samples");

  const SplitResult split = stratified_split(labels, cfg.split_fractions, mix_seed(cfg.seed, 1));
  if (split.train.empty()) throw ConfigError("train: training split is empty");
  if (cfg.max_epochs > 0 && split.val.empty()) {
    throw ConfigError("train: validation split is empty; provide more samples");
  }

  MacModel model =
      make_learned_model(cfg.latent_dim, mix_seed(cfg.seed, 2), mix_seed(cfg.seed, 3));
  AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;
  AdamState f_state(std::get<Mlp>(model.f), adam);
  AdamState g_state(std::get<Mlp>(model.g), adam);

  const ClassWeighting weighting = detail::weighting_for(labels);
  const std::size_t N = preds.num_sub_models;
  const std::size_t subsample_k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.subsample_fraction * static_cast<double>(N))));

  Rng shuffle_rng(mix_seed(cfg.seed, 4));
  Rng subsample_rng(mix_seed(cfg.seed, 5));

  std::vector<std::size_t> all_sub_models(N);
  for (std::size_t i = 0; i < N; ++i) all_sub_models[i] = i;

  TrainReport report;
  report.seed = cfg.seed;
  report.train_samples = split.train.size();
  report.val_samples = split.val.size();
  report.test_samples = split.test.size();
  report.num_sub_models = N;

  Mlp best_f = std::get<Mlp>(model.f);
  Mlp best_g = std::get<Mlp>(model.g);
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t epochs_since_best = 0;

  std::vector<std::size_t> order = split.train;
  std::vector<std::size_t> batch_samples;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0, batch_index = 0; begin < order.size();
         begin += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(begin + cfg.batch_size, order.size());
      batch_samples.assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
      const std::vector<std::size_t> subset =
          subsample_k == N ? all_sub_models
                           : subsample_rng.sample_without_replacement(N, subsample_k);
      const detail::StepStats stats = detail::train_step(
          model, f_state, g_state, preds, labels, batch_samples, subset, weighting);
      if (!std::isfinite(stats.loss)) {
        throw TrainingError("train: non-finite loss " + std::to_string(stats.loss) +
                            " at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index) + " (" +
                            std::to_string(batch_samples.size()) + " samples, " +
                            std::to_string(subset.size()) + " sub-models)");
      }
      epoch_loss += stats.loss * static_cast<double>(batch_samples.size());
    }
    epoch_loss /= static_cast<double>(order.size());

    const double val_loss =
        detail::split_loss(model, preds, labels, split.val, weighting);
    report.epochs.push_back(EpochRecord{epoch_loss, val_loss});

    if (val_loss < best_val) {
      best_val = val_loss;
      report.best_epoch = epoch;
      best_f = std::get<Mlp>(model.f);
      best_g = std::get<Mlp>(model.g);
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
      if (cfg.patience_epochs > 0 && epochs_since_best >= cfg.patience_epochs) break;
    }
  }

  if (!report.epochs.empty()) {
    std::get<Mlp>(model.f) = std::move(best_f);
    std::get<Mlp>(model.g) = std::move(best_g);
    report.best_val_loss = best_val;
  }
  if (!split.test.empty()) {
    report.test_score = detail::split_loss(model, preds, labels, split.test, weighting);
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(model), std::move(report)};
}

struct ScoreVsNRow {
  std::size_t n = 0;
  double mean_score = 0.0;
  double std_dev = 0.0;
  bool single_repeat = false;
};

// For each requested ensemble size, draws `repeats` fresh random sub-model
// groups without replacement and reports mean and population standard
// deviation of the evaluation score.
inline std::vector<ScoreVsNRow> score_vs_n_experiment(
    const MacModel& model, const PredictionTensor& preds, const LabelMatrix& labels,
    const std::vector<std::size_t>& n_values, std::size_t repeats, std::uint64_t seed,
    const std::vector<std::size_t>* samples = nullptr) {
  if (repeats == 0) throw ConfigError("score_vs_n_experiment: repeats must be positive");
  if (n_values.empty()) throw ConfigError("score_vs_n_experiment: no ensemble sizes given");
  const std::size_t N = preds.num_sub_models;
  Rng rng(mix_seed(seed, 9));
  std::vector<ScoreVsNRow> rows;
  std::vector<double> scores(repeats);
  for (std::size_t n : n_values) {
    if (n == 0 || n > N) {
      throw ConfigError("score_vs_n_experiment: ensemble size " + std::to_string(n) +
                        " out of range for " + std::to_string(N) + " sub-models");
    }
    for (std::size_t r = 0; r < repeats; ++r) {
      const std::vector<std::size_t> subset = rng.sample_without_replacement(N, n);
      scores[r] = evaluate(model, preds, labels, &subset, samples);
    }
    double mean = 0.0;
    for (double s : scores) mean += s;
    mean /= static_cast<double>(repeats);
    double var = 0.0;
    for (double s : scores) var += (s - mean) * (s - mean);
    var /= static_cast<double>(repeats);
    ScoreVsNRow row;
    row.n = n;
    row.mean_score = mean;
    row.std_dev = repeats == 1 ? 0.0 : std::sqrt(var);
    row.single_repeat = repeats == 1;
    rows.push_back(row);
  }
  return rows;
}

inline void save_score_vs_n_csv(const std::vector<ScoreVsNRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out << "n,mean_score,std\n";
  for (const auto& row : rows) {
    out << row.n << ',' << csv::format_double(row.mean_score) << ','
        << csv::format_double(row.std_dev) << '\n';
  }
  if (!out) throw ParseError("short write to '" + path + "'");
}

}  // namespace mac
