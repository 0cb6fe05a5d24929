#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mac/trainer.hpp"

namespace mac {

// A simulated sub-model: how often its pre-noise signal favors the true label,
// how miscalibrated its probabilities are (p^gamma), and how noisy its logits
// are. noise_scale draws fresh per sub-model; shared_noise_scale taps a
// per-(sample, class) stream common to every sub-model, which caps the benefit
// of averaging the ensemble the way correlated real-world errors do.
struct SubModelProfile {
  double base_accuracy = 0.8;
  double calibration_skew = 1.0;
  double noise_scale = 1.0;
  double shared_noise_scale = 0.0;
  std::uint64_t seed = 0;
};

struct SynthData {
  PredictionTensor predictions;
  LabelMatrix labels;
};

namespace detail {

inline void validate_profile(const SubModelProfile& p, std::size_t index) {
  if (!(p.base_accuracy >= 0.0 && p.base_accuracy <= 1.0)) {
    throw ConfigError("profile " + std::to_string(index) + ": base_accuracy must be in [0, 1]");
  }
  if (!(p.calibration_skew > 0.0)) {
    throw ConfigError("profile " + std::to_string(index) + ": calibration_skew must be positive");
  }
  if (!(p.noise_scale >= 0.0)) {
    throw ConfigError("profile " + std::to_string(index) + ": noise_scale must be non-negative");
  }
  if (!(p.shared_noise_scale >= 0.0)) {
    throw ConfigError("profile " + std::to_string(index) +
                      ": shared_noise_scale must be non-negative");
  }
}

inline std::string padded_index(std::size_t value, std::size_t count) {
  std::size_t width = 2;
  for (std::size_t v = count > 0 ? count - 1 : 0; v >= 100; v /= 10) ++width;
  std::string digits = std::to_string(value);
  if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
  return digits;
}

}  // namespace detail

// Draws binary labels per sub-type from the given prevalences (the "any"
// column at index 0 is their maximum), then emits one prediction tensor entry
// per profile: sigmoid(logit(label-leaning signal) + noise), skewed by gamma.
// Labels depend only on (num_samples, num_classes, prevalences, seed), so
// appending profiles never disturbs them, and each profile's stream depends
// only on (seed, profile.seed), so existing sub-models are stable too.
inline SynthData generate(std::size_t num_samples, std::size_t num_classes,
                          const std::vector<double>& class_prevalences,
                          const std::vector<SubModelProfile>& profiles, std::uint64_t seed) {
  if (num_samples == 0) throw ConfigError("generate: num_samples must be positive");
  if (num_classes < 2) {
    throw ConfigError("generate: need at least one sub-type class plus the any column");
  }
  if (class_prevalences.size() != num_classes - 1) {
    throw ConfigError("generate: expected " + std::to_string(num_classes - 1) +
                      " prevalences (one per sub-type), got " +
                      std::to_string(class_prevalences.size()));
  }
  for (std::size_t c = 0; c < class_prevalences.size(); ++c) {
    const double p = class_prevalences[c];
    if (!(p > 0.0 && p < 1.0)) {
      throw ConfigError("generate: prevalence for sub-type " + std::to_string(c + 1) +
                        " must lie in (0, 1)");
    }
  }
  if (profiles.empty()) throw ConfigError("generate: need at least one profile");
  for (std::size_t m = 0; m < profiles.size(); ++m) detail::validate_profile(profiles[m], m);

  SynthData out;
  LabelMatrix& labels = out.labels;
  labels.num_samples = num_samples;
  labels.num_classes = num_classes;
  labels.class_names.push_back("any");
  for (std::size_t c = 1; c < num_classes; ++c) {
    labels.class_names.push_back("c" + std::to_string(c));
  }
  labels.any_index = 0;
  labels.values = Matrix(num_samples, num_classes);
  labels.sample_ids.reserve(num_samples);
  Rng label_rng(mix_seed(seed, 0x1abe1));
  for (std::size_t s = 0; s < num_samples; ++s) {
    labels.sample_ids.push_back("s" + detail::padded_index(s, num_samples));
    double any = 0.0;
    for (std::size_t c = 1; c < num_classes; ++c) {
      const double y = label_rng.uniform() < class_prevalences[c - 1] ? 1.0 : 0.0;
      labels.values(s, c) = y;
      any = std::max(any, y);
    }
    labels.values(s, 0) = any;
  }

  PredictionTensor& preds = out.predictions;
  preds.num_samples = num_samples;
  preds.num_sub_models = profiles.size();
  preds.num_classes = num_classes;
  preds.sample_ids = labels.sample_ids;
  preds.class_names = labels.class_names;
  preds.values.resize(num_samples * profiles.size() * num_classes);
  for (std::size_t m = 0; m < profiles.size(); ++m) {
    preds.sub_model_ids.push_back("synth-" + detail::padded_index(m, profiles.size()));
  }

  std::vector<double> shared(num_samples * num_classes);
  Rng shared_rng(mix_seed(seed, 0xc0a));
  for (auto& v : shared) v = shared_rng.gaussian();

  // Class priors, with the any prior derived from the sub-type prevalences.
  std::vector<double> prior(num_classes);
  double none = 1.0;
  for (double p : class_prevalences) none *= 1.0 - p;
  prior[0] = 1.0 - none;
  for (std::size_t c = 1; c < num_classes; ++c) prior[c] = class_prevalences[c - 1];

  for (std::size_t m = 0; m < profiles.size(); ++m) {
    const SubModelProfile& profile = profiles[m];
    Rng rng(mix_seed(mix_seed(seed, 0x5eed), profile.seed));
    const double a = profile.base_accuracy;
    for (std::size_t s = 0; s < num_samples; ++s) {
      for (std::size_t c = 0; c < num_classes; ++c) {
        const double y = labels.values(s, c);
        const double pi = prior[c];
        // The label-leaning signal is the posterior after one Bernoulli(a)
        // observation of the label, so a noise-free sub-model is calibrated
        // against its class prior the way real competition models roughly are.
        const double q = y > 0.5 ? pi * a / (pi * a + (1.0 - pi) * (1.0 - a))
                                 : pi * (1.0 - a) / (pi * (1.0 - a) + (1.0 - pi) * a);
        const double qc = std::clamp(q, kProbClip, 1.0 - kProbClip);
        double p;
        if (profile.noise_scale == 0.0 && profile.shared_noise_scale == 0.0) {
          // sigmoid(logit(q)) is the identity mathematically but not bitwise;
          // taking q directly keeps the zero-noise profile exact.
          p = qc;
        } else {
          double z = std::log(qc / (1.0 - qc)) +
                     profile.shared_noise_scale * shared[s * num_classes + c];
          if (profile.noise_scale > 0.0) z += profile.noise_scale * rng.gaussian();
          p = stable_sigmoid(z);
        }
        p = std::pow(p, profile.calibration_skew);
        preds.at(s, m, c) = std::clamp(p, kProbClip, 1.0 - kProbClip);
      }
    }
  }
  return out;
}

struct SynthSpec {
  std::size_t num_samples = 20000;
  std::size_t num_classes = 6;
  std::vector<double> prevalences = {0.03, 0.03, 0.03, 0.03, 0.03};
  std::vector<SubModelProfile> profiles;
  std::uint64_t seed = 7777;
};

inline SynthData generate(const SynthSpec& spec) {
  return generate(spec.num_samples, spec.num_classes, spec.prevalences, spec.profiles, spec.seed);
}

// Desk-scale benchmark: rare positives (any prevalence about 0.14) and an
// ensemble of individually noisy members that are mildly miscalibrated in both
// directions, with part of the noise shared across members. Averaging many
// members cancels most of the independent noise, so the face value of a single
// prediction understates what the pooled ensemble actually knows. Plain
// averaging keeps the single-member scale and inherits the net miscalibration;
// a learned correction recovers the difference, while the mixed mild skew
// keeps the optimal correction close to the identity.
inline SynthSpec paper_analog_spec() {
  SynthSpec spec;
  const double skew[] = {1.15, 0.85, 1.1, 0.9};
  for (std::size_t m = 0; m < 40; ++m) {
    SubModelProfile p;
    p.base_accuracy = 0.75;
    p.calibration_skew = skew[m % 4];
    p.noise_scale = 2.2;
    p.shared_noise_scale = 1.15;
    p.seed = m + 1;
    spec.profiles.push_back(p);
  }
  return spec;
}

struct ProtocolConfig {
  TrainConfig train;
  std::vector<std::size_t> train_k = {5, 10, 20, 40};
  std::size_t primary_k = 20;
  std::vector<std::size_t> infer_n = {5, 10, 20, 30, 40};
  std::size_t sweep_repeats = 4;
  // First train_samples rows feed the trainer, the next eval_samples rows are
  // scored. Zero for both means the full dataset plays both roles.
  std::size_t train_samples = 0;
  std::size_t eval_samples = 0;
  std::uint64_t sweep_seed = 0;
  std::uint64_t data_seed = 0;
};

// Companion to paper_analog_spec: a protocol sized so the full benchmark run
// finishes in minutes on one desktop core. The slices and optimizer settings
// were fixed by one calibration run against that spec and stay frozen.
inline ProtocolConfig paper_analog_protocol() {
  ProtocolConfig cfg;
  cfg.train.batch_size = 16;
  cfg.train.learning_rate = 2e-4;
  cfg.train.max_epochs = 4;
  cfg.train.patience_epochs = 2;
  cfg.train.seed = 2026;
  cfg.train_samples = 1000;
  cfg.eval_samples = 800;
  cfg.sweep_seed = 99;
  cfg.data_seed = 7777;
  return cfg;
}

struct TrainKScore {
  std::size_t k = 0;
  double score = 0.0;
};

struct BenchReport {
  std::size_t train_samples = 0;
  std::size_t eval_samples = 0;
  std::size_t num_sub_models = 0;
  double arithmetic_score = 0.0;
  double geometric_score = 0.0;
  double harmonic_score = 0.0;
  std::vector<TrainKScore> train_k_scores;
  std::size_t primary_k = 0;
  std::vector<ScoreVsNRow> sweep;
  double primary_score_train_n = 0.0;
  double primary_score_full_n = 0.0;
  TrainReport primary_report;
};

struct BenchResult {
  BenchReport report;
  MacModel primary_model;
};

namespace detail {

inline void validate_protocol(const ProtocolConfig& cfg, std::size_t num_samples,
                              std::size_t num_sub_models) {
  validate_config(cfg.train);
  if (cfg.train_k.empty()) throw ConfigError("protocol: train_k must not be empty");
  for (std::size_t k : cfg.train_k) {
    if (k == 0 || k > num_sub_models) {
      throw ConfigError("protocol: train_k value " + std::to_string(k) +
                        " outside [1, " + std::to_string(num_sub_models) + "]");
    }
  }
  if (std::find(cfg.train_k.begin(), cfg.train_k.end(), cfg.primary_k) == cfg.train_k.end()) {
    throw ConfigError("protocol: primary_k must appear in train_k");
  }
  if (cfg.infer_n.empty()) throw ConfigError("protocol: infer_n must not be empty");
  for (std::size_t n : cfg.infer_n) {
    if (n == 0 || n > num_sub_models) {
      throw ConfigError("protocol: infer_n value " + std::to_string(n) + " outside [1, " +
                        std::to_string(num_sub_models) + "]");
    }
  }
  if (cfg.sweep_repeats == 0) throw ConfigError("protocol: sweep_repeats must be positive");
  if ((cfg.train_samples == 0) != (cfg.eval_samples == 0)) {
    throw ConfigError("protocol: set train_samples and eval_samples together");
  }
  if (cfg.train_samples + cfg.eval_samples > num_samples) {
    throw ConfigError("protocol: train_samples + eval_samples exceed the " +
                      std::to_string(num_samples) + " available samples");
  }
}

inline std::vector<std::size_t> iota_indices(std::size_t first, std::size_t count) {
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = first + i;
  return out;
}

}  // namespace detail

inline BenchResult run_paper_protocol(const PredictionTensor& preds, const LabelMatrix& labels,
                                      const ProtocolConfig& cfg) {
  detail::check_alignment(preds, labels);
  detail::validate_protocol(cfg, preds.num_samples, preds.num_sub_models);
  const std::size_t N = preds.num_sub_models;

  const bool sliced = cfg.train_samples > 0;
  const PredictionTensor train_preds =
      sliced ? select_samples(preds, detail::iota_indices(0, cfg.train_samples)) : preds;
  const LabelMatrix train_labels =
      sliced ? select_samples(labels, detail::iota_indices(0, cfg.train_samples)) : labels;
  const PredictionTensor eval_preds =
      sliced ? select_samples(preds, detail::iota_indices(cfg.train_samples, cfg.eval_samples))
             : preds;
  const LabelMatrix eval_labels =
      sliced ? select_samples(labels, detail::iota_indices(cfg.train_samples, cfg.eval_samples))
             : labels;

  BenchResult result;
  BenchReport& report = result.report;
  report.train_samples = train_preds.num_samples;
  report.eval_samples = eval_preds.num_samples;
  report.num_sub_models = N;
  report.primary_k = cfg.primary_k;

  const ClassWeighting weighting = detail::weighting_for(eval_labels);
  report.arithmetic_score = weighted_bce(
      combine_dataset_closed_form(ClosedFormKind::arithmetic, eval_preds), eval_labels.values,
      weighting);
  report.geometric_score = weighted_bce(
      combine_dataset_closed_form(ClosedFormKind::geometric, eval_preds), eval_labels.values,
      weighting);
  report.harmonic_score = weighted_bce(
      combine_dataset_closed_form(ClosedFormKind::harmonic, eval_preds), eval_labels.values,
      weighting);

  for (std::size_t k : cfg.train_k) {
    const PredictionTensor subset =
        select_sub_models(train_preds, detail::iota_indices(0, k));
    auto [model, train_report] = train(subset, train_labels, cfg.train);
    const double score = evaluate(model, eval_preds, eval_labels);
    report.train_k_scores.push_back({k, score});
    if (k == cfg.primary_k) {
      result.primary_model = std::move(model);
      report.primary_report = std::move(train_report);
    }
  }

  report.sweep = score_vs_n_experiment(result.primary_model, eval_preds, eval_labels,
                                       cfg.infer_n, cfg.sweep_repeats, cfg.sweep_seed);

  const PredictionTensor eval_first =
      select_sub_models(eval_preds, detail::iota_indices(0, cfg.primary_k));
  report.primary_score_train_n = evaluate(result.primary_model, eval_first, eval_labels);
  if (cfg.primary_k < N) {
    const PredictionTensor eval_rest =
        select_sub_models(eval_preds, detail::iota_indices(cfg.primary_k, N - cfg.primary_k));
    const PredictionTensor appended = append_sub_models(eval_first, eval_rest);
    report.primary_score_full_n = evaluate(result.primary_model, appended, eval_labels);
  } else {
    report.primary_score_full_n = report.primary_score_train_n;
  }
  return result;
}

inline void save_bench_csv(const BenchReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out << "method,train_k,infer_n,score\n";
  const auto row = [&out](const std::string& method, const std::string& k, std::size_t n,
                          double score) {
    out << method << ',' << k << ',' << n << ',' << csv::format_double(score) << '\n';
  };
  row("arithmetic", "", report.num_sub_models, report.arithmetic_score);
  row("geometric", "", report.num_sub_models, report.geometric_score);
  row("harmonic", "", report.num_sub_models, report.harmonic_score);
  for (const auto& entry : report.train_k_scores) {
    row("mac", std::to_string(entry.k), report.num_sub_models, entry.score);
  }
  for (const auto& point : report.sweep) {
    row("mac", std::to_string(report.primary_k), point.n, point.mean_score);
  }
  if (!out) throw ParseError("short write to '" + path + "'");
}

inline std::string to_json(const BenchReport& report, const ProtocolConfig& cfg) {
  std::ostringstream out;
  out << "{\n";
  out << "  \"config\": {\n";
  out << "    \"data_seed\": " << cfg.data_seed << ",\n";
  out << "    \"train_seed\": " << cfg.train.seed << ",\n";
  out << "    \"sweep_seed\": " << cfg.sweep_seed << ",\n";
  out << "    \"train\": {\"batch_size\": " << cfg.train.batch_size
      << ", \"learning_rate\": " << detail::json_number(cfg.train.learning_rate)
      << ", \"max_epochs\": " << cfg.train.max_epochs
      << ", \"patience_epochs\": " << cfg.train.patience_epochs
      << ", \"subsample_fraction\": " << detail::json_number(cfg.train.subsample_fraction)
      << ", \"latent_dim\": " << cfg.train.latent_dim << "},\n";
  out << "    \"train_k\": [";
  for (std::size_t i = 0; i < cfg.train_k.size(); ++i) {
    out << (i ? ", " : "") << cfg.train_k[i];
  }
  out << "],\n";
  out << "    \"primary_k\": " << cfg.primary_k << ",\n";
  out << "    \"infer_n\": [";
  for (std::size_t i = 0; i < cfg.infer_n.size(); ++i) {
    out << (i ? ", " : "") << cfg.infer_n[i];
  }
  out << "],\n";
  out << "    \"sweep_repeats\": " << cfg.sweep_repeats << ",\n";
  out << "    \"train_samples\": " << report.train_samples << ",\n";
  out << "    \"eval_samples\": " << report.eval_samples << "\n";
  out << "  },\n";
  out << "  \"num_sub_models\": " << report.num_sub_models << ",\n";
  out << "  \"baselines\": {\"arithmetic\": " << detail::json_number(report.arithmetic_score)
      << ", \"geometric\": " << detail::json_number(report.geometric_score)
      << ", \"harmonic\": " << detail::json_number(report.harmonic_score) << "},\n";
  out << "  \"train_k_scores\": [";
  for (std::size_t i = 0; i < report.train_k_scores.size(); ++i) {
    out << (i ? ", " : "") << "{\"k\": " << report.train_k_scores[i].k
        << ", \"score\": " << detail::json_number(report.train_k_scores[i].score) << "}";
  }
  out << "],\n";
  out << "  \"sweep\": [";
  for (std::size_t i = 0; i < report.sweep.size(); ++i) {
    const ScoreVsNRow& point = report.sweep[i];
    out << (i ? ", " : "") << "{\"n\": " << point.n
        << ", \"mean_score\": " << detail::json_number(point.mean_score)
        << ", \"std\": " << detail::json_number(point.std_dev)
        << ", \"single_repeat\": " << (point.single_repeat ? "true" : "false") << "}";
  }
  out << "],\n";
  out << "  \"primary\": {\"k\": " << report.primary_k
      << ", \"score_train_n\": " << detail::json_number(report.primary_score_train_n)
      << ", \"score_full_n\": " << detail::json_number(report.primary_score_full_n) << "},\n";
  const std::string train_json = to_json(report.primary_report);
  out << "  \"primary_training\": ";
  for (std::size_t i = 0; i < train_json.size(); ++i) {
    out << train_json[i];
    if (train_json[i] == '\n' && i + 1 < train_json.size()) out << "  ";
  }
  out << "}\n";
  return out.str();
}

inline void save_bench_json(const BenchReport& report, const ProtocolConfig& cfg,
                            const std::string& path) {
  const std::string text = to_json(report, cfg);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw ParseError("short write to '" + path + "'");
}

}  // namespace mac
