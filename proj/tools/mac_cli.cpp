#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mac/mac.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
  std::string out = ".";
  std::string config_path;
  std::size_t threads = 1;
  bool verbose = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--out", opts.out, "Output directory for all artifacts");
  cmd->add_option("--config", opts.config_path, "JSON file with defaults for any flag");
  cmd->add_option("--threads", opts.threads, "Worker thread cap for batched combination");
  cmd->add_flag("-v,--verbose", opts.verbose, "Chattier progress output");
}

json load_config_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw mac::ParseError("cannot open '" + path + "'");
  json parsed;
  try {
    in >> parsed;
  } catch (const json::exception& e) {
    throw mac::ParseError("config '" + path + "': " + e.what());
  }
  if (!parsed.is_object()) {
    throw mac::ConfigError("config '" + path + "' must hold a JSON object");
  }
  return parsed;
}

template <typename T>
void merge_option(const CLI::App* cmd, const json& cfg, const std::string& key, T& value) {
  const CLI::Option* opt = cmd->get_option("--" + key);
  if (opt->count() > 0) return;
  std::string json_key = key;
  std::replace(json_key.begin(), json_key.end(), '-', '_');
  if (!cfg.contains(json_key)) return;
  try {
    value = cfg.at(json_key).get<T>();
  } catch (const json::exception& e) {
    throw mac::ConfigError("config key '" + json_key + "': " + e.what());
  }
}

fs::path prepare_out_dir(const CommonOpts& opts) {
  fs::path dir(opts.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec && !fs::is_directory(dir)) {
    throw mac::ParseError("cannot create output directory '" + dir.string() + "'");
  }
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw mac::ParseError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw mac::ParseError("short write to '" + path.string() + "'");
}

void write_config_echo(const fs::path& out_dir, const json& echo) {
  write_text(out_dir / "config.json", echo.dump(2) + "\n");
  std::cout << "wrote " << (out_dir / "config.json").string() << "\n";
}

std::size_t parse_index(const std::string& token) {
  std::size_t value = 0;
  const char* begin = token.data();
  const char* end = begin + token.size();
  const auto [ptr, err] = std::from_chars(begin, end, value);
  if (err != std::errc() || ptr != end) {
    throw mac::ConfigError("cannot parse index '" + token + "'");
  }
  return value;
}

// "0..9", "1,3,7" or a mix of both kinds of token.
std::vector<std::size_t> parse_index_list(const std::string& spec) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const std::size_t comma = spec.find(',', start);
    const std::string token =
        spec.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (token.empty()) throw mac::ConfigError("empty entry in index list '" + spec + "'");
    const std::size_t dots = token.find("..");
    if (dots == std::string::npos) {
      out.push_back(parse_index(token));
    } else {
      const std::size_t lo = parse_index(token.substr(0, dots));
      const std::size_t hi = parse_index(token.substr(dots + 2));
      if (hi < lo) throw mac::ConfigError("descending range '" + token + "'");
      for (std::size_t i = lo; i <= hi; ++i) out.push_back(i);
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw mac::ConfigError("empty index list");
  return out;
}

std::array<double, 3> parse_split(const std::string& spec) {
  std::array<double, 3> out{};
  std::size_t start = 0;
  for (int i = 0; i < 3; ++i) {
    const std::size_t comma = spec.find(',', start);
    if ((comma == std::string::npos) != (i == 2)) {
      throw mac::ConfigError("split must be three comma-separated fractions, got '" + spec + "'");
    }
    const std::string token =
        spec.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    try {
      std::size_t used = 0;
      out[i] = std::stod(token, &used);
      if (used != token.size()) throw std::invalid_argument(token);
    } catch (const std::exception&) {
      throw mac::ConfigError("cannot parse split fraction '" + token + "'");
    }
    start = comma + 1;
  }
  return out;
}

// Sub-model order follows the input file order, so two runs listing the same
// files differently would produce different (if equivalent) float sums. The
// CLI canonicalizes to id order to keep outputs byte-stable.
mac::PredictionTensor load_sorted_predictions(const std::vector<std::string>& files) {
  mac::PredictionTensor t = mac::load_predictions(files);
  std::vector<std::size_t> order(t.num_sub_models);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&t](std::size_t a, std::size_t b) {
    return t.sub_model_ids[a] < t.sub_model_ids[b];
  });
  if (std::is_sorted(order.begin(), order.end())) return t;
  return mac::select_sub_models(t, order);
}

mac::MacModel make_baseline(const std::string& name) {
  const mac::ClosedFormKind kind = mac::closed_form_from_string(name);
  switch (kind) {
    case mac::ClosedFormKind::arithmetic:
      return mac::arithmetic_model();
    case mac::ClosedFormKind::geometric:
      return mac::geometric_model();
    case mac::ClosedFormKind::harmonic:
      return mac::harmonic_model();
    case mac::ClosedFormKind::median: {
      mac::MacModel m;
      m.reducer.kind = mac::ReducerKind::median;
      return m;
    }
    case mac::ClosedFormKind::min: {
      mac::MacModel m;
      m.reducer.kind = mac::ReducerKind::min;
      return m;
    }
    case mac::ClosedFormKind::max: {
      mac::MacModel m;
      m.reducer.kind = mac::ReducerKind::max;
      return m;
    }
  }
  throw mac::ConfigError("unknown baseline '" + name + "'");
}

struct ModelChoice {
  std::string model_path;
  std::string baseline;
};

void add_model_choice(CLI::App* cmd, ModelChoice& choice) {
  auto* model = cmd->add_option("--model", choice.model_path, "Serialized combiner model file");
  auto* base = cmd->add_option("--baseline", choice.baseline,
                               "Closed-form combiner: arithmetic, geometric, harmonic, "
                               "median, min or max");
  model->excludes(base);
}

void require_model_choice(const ModelChoice& choice) {
  if (choice.model_path.empty() == choice.baseline.empty()) {
    throw mac::ConfigError("pass exactly one of --model or --baseline");
  }
}

mac::MacModel resolve_model(const ModelChoice& choice) {
  if (!choice.model_path.empty()) return mac::load_mac_file(choice.model_path);
  return make_baseline(choice.baseline);
}

double evaluate_any(const ModelChoice& choice, const mac::PredictionTensor& preds,
                    const mac::LabelMatrix& labels,
                    const std::vector<std::size_t>* sub_models) {
  if (!choice.baseline.empty()) {
    const mac::ClosedFormKind kind = mac::closed_form_from_string(choice.baseline);
    mac::detail::check_alignment(preds, labels);
    const mac::PredictionTensor* used = &preds;
    mac::PredictionTensor subset;
    if (sub_models != nullptr) {
      subset = mac::select_sub_models(preds, *sub_models);
      used = &subset;
    }
    const mac::ClassWeighting weighting = mac::detail::weighting_for(labels);
    return mac::weighted_bce(mac::combine_dataset_closed_form(kind, *used), labels.values,
                             weighting);
  }
  const mac::MacModel model = mac::load_mac_file(choice.model_path);
  return mac::evaluate(model, preds, labels, sub_models);
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  CommonOpts common;
  std::vector<std::string> pred_files;
  std::string label_file;
  std::string split = "0.8,0.1,0.1";
  double subsample = 0.8;
  std::size_t batch_size = 500;
  double learning_rate = 1e-3;
  std::size_t max_epochs = 60;
  std::size_t patience = 5;
  std::size_t latent = 1;
  std::uint64_t seed = 0;
  bool strict_any = false;
};

void merge_train(const CLI::App* cmd, const json& cfg, TrainOpts& o) {
  merge_option(cmd, cfg, "preds", o.pred_files);
  merge_option(cmd, cfg, "labels", o.label_file);
  merge_option(cmd, cfg, "split", o.split);
  merge_option(cmd, cfg, "subsample", o.subsample);
  merge_option(cmd, cfg, "batch-size", o.batch_size);
  merge_option(cmd, cfg, "lr", o.learning_rate);
  merge_option(cmd, cfg, "max-epochs", o.max_epochs);
  merge_option(cmd, cfg, "patience", o.patience);
  merge_option(cmd, cfg, "latent", o.latent);
  merge_option(cmd, cfg, "seed", o.seed);
}

void run_train(const TrainOpts& o) {
  if (o.pred_files.empty()) throw mac::ConfigError("train needs at least one --preds file");
  if (o.label_file.empty()) throw mac::ConfigError("train needs --labels");
  const fs::path out_dir = prepare_out_dir(o.common);

  const mac::PredictionTensor preds = load_sorted_predictions(o.pred_files);
  const mac::LabelMatrix labels =
      mac::load_labels(o.label_file, o.strict_any ? mac::AnyCheck::fail : mac::AnyCheck::warn);

  mac::TrainConfig cfg;
  cfg.split_fractions = parse_split(o.split);
  cfg.subsample_fraction = o.subsample;
  cfg.batch_size = o.batch_size;
  cfg.learning_rate = o.learning_rate;
  cfg.max_epochs = o.max_epochs;
  cfg.patience_epochs = o.patience;
  cfg.latent_dim = o.latent;
  cfg.seed = o.seed;

  const auto [model, report] = mac::train(preds, labels, cfg);

  mac::save_mac_file(model, (out_dir / "model.macm").string());
  std::cout << "wrote " << (out_dir / "model.macm").string() << "\n";
  write_text(out_dir / "train_report.json", mac::to_json(report));
  std::cout << "wrote " << (out_dir / "train_report.json").string() << "\n";
  if (o.common.verbose) {
    for (std::size_t e = 0; e < report.epochs.size(); ++e) {
      std::cout << "epoch " << e << " train " << report.epochs[e].train_loss << " val "
                << report.epochs[e].val_loss << "\n";
    }
  }

  json echo;
  echo["subcommand"] = "train";
  echo["preds"] = o.pred_files;
  echo["labels"] = o.label_file;
  echo["split"] = {cfg.split_fractions[0], cfg.split_fractions[1], cfg.split_fractions[2]};
  echo["subsample"] = cfg.subsample_fraction;
  echo["batch_size"] = cfg.batch_size;
  echo["lr"] = cfg.learning_rate;
  echo["max_epochs"] = cfg.max_epochs;
  echo["patience"] = cfg.patience_epochs;
  echo["latent"] = cfg.latent_dim;
  echo["seed"] = cfg.seed;
  echo["strict_any"] = o.strict_any;
  echo["out"] = o.common.out;
  write_config_echo(out_dir, echo);
}

// ---------------------------------------------------------------------------
// combine

struct CombineOpts {
  CommonOpts common;
  ModelChoice model;
  std::vector<std::string> pred_files;
  std::string weights_file;
  std::string groups_file;
};

void merge_combine(const CLI::App* cmd, const json& cfg, CombineOpts& o) {
  merge_option(cmd, cfg, "model", o.model.model_path);
  merge_option(cmd, cfg, "baseline", o.model.baseline);
  merge_option(cmd, cfg, "preds", o.pred_files);
  merge_option(cmd, cfg, "weights", o.weights_file);
  merge_option(cmd, cfg, "groups", o.groups_file);
}

// `sub_model_id,group` rows covering exactly the loaded sub-models; groups are
// ordered by first appearance.
std::vector<std::vector<std::size_t>> load_groups(const std::string& path,
                                                  const std::vector<std::string>& ids) {
  std::ifstream in(path);
  if (!in) throw mac::ParseError("cannot open '" + path + "'");
  std::map<std::string, std::size_t> id_index;
  for (std::size_t i = 0; i < ids.size(); ++i) id_index[ids[i]] = i;

  std::vector<std::vector<std::size_t>> groups;
  std::map<std::string, std::size_t> group_index;
  std::vector<bool> seen(ids.size(), false);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "sub_model_id,group") {
        throw mac::ParseError(mac::csv::location(path, line_no) +
                              ": expected header 'sub_model_id,group'");
      }
      continue;
    }
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos) {
      throw mac::ParseError(mac::csv::location(path, line_no) + ": expected two fields");
    }
    const std::string id = line.substr(0, comma);
    const std::string group = line.substr(comma + 1);
    const auto it = id_index.find(id);
    if (it == id_index.end()) {
      throw mac::ConfigError(mac::csv::location(path, line_no) + ": unknown sub-model '" + id +
                             "'");
    }
    if (seen[it->second]) {
      throw mac::ConfigError(mac::csv::location(path, line_no) + ": duplicate sub-model '" + id +
                             "'");
    }
    seen[it->second] = true;
    auto [git, inserted] = group_index.try_emplace(group, groups.size());
    if (inserted) groups.emplace_back();
    groups[git->second].push_back(it->second);
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!seen[i]) {
      throw mac::ConfigError("groups file '" + path + "' is missing sub-model '" + ids[i] + "'");
    }
  }
  return groups;
}

void run_combine(const CombineOpts& o) {
  require_model_choice(o.model);
  if (o.pred_files.empty()) throw mac::ConfigError("combine needs at least one --preds file");
  if (!o.weights_file.empty() && !o.groups_file.empty()) {
    throw mac::ConfigError("--weights and --groups cannot be combined");
  }
  const fs::path out_dir = prepare_out_dir(o.common);
  const mac::PredictionTensor preds = load_sorted_predictions(o.pred_files);

  mac::Matrix combined(preds.num_samples, preds.num_classes);
  if (!o.weights_file.empty()) {
    const mac::MacModel model = resolve_model(o.model);
    const std::vector<double> weights = mac::load_weights(o.weights_file, preds.sub_model_ids);
    for (std::size_t s = 0; s < preds.num_samples; ++s) {
      const std::vector<double> row =
          mac::combine_weighted(model, preds.sample_slice(s), weights);
      for (std::size_t c = 0; c < preds.num_classes; ++c) combined(s, c) = row[c];
    }
  } else if (!o.groups_file.empty()) {
    const mac::MacModel model = resolve_model(o.model);
    const auto groups = load_groups(o.groups_file, preds.sub_model_ids);
    for (std::size_t s = 0; s < preds.num_samples; ++s) {
      const mac::Matrix slice = preds.sample_slice(s);
      std::vector<mac::Matrix> blocks;
      for (const auto& members : groups) {
        mac::Matrix block(members.size(), preds.num_classes);
        for (std::size_t r = 0; r < members.size(); ++r) {
          for (std::size_t c = 0; c < preds.num_classes; ++c) {
            block(r, c) = slice(members[r], c);
          }
        }
        blocks.push_back(std::move(block));
      }
      const std::vector<double> row = mac::combine_hierarchical(model, blocks);
      for (std::size_t c = 0; c < preds.num_classes; ++c) combined(s, c) = row[c];
    }
  } else if (!o.model.baseline.empty()) {
    combined = mac::combine_dataset_closed_form(
        mac::closed_form_from_string(o.model.baseline), preds);
  } else {
    const mac::MacModel model = resolve_model(o.model);
    combined = mac::combine_dataset(model, preds, o.common.threads);
  }

  mac::save_prediction_matrix((out_dir / "combined.csv").string(), preds.sample_ids,
                              preds.class_names, combined);
  std::cout << "wrote " << (out_dir / "combined.csv").string() << "\n";

  json echo;
  echo["subcommand"] = "combine";
  echo["model"] = o.model.model_path;
  echo["baseline"] = o.model.baseline;
  echo["preds"] = o.pred_files;
  echo["weights"] = o.weights_file;
  echo["groups"] = o.groups_file;
  echo["threads"] = o.common.threads;
  echo["out"] = o.common.out;
  write_config_echo(out_dir, echo);
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOpts {
  CommonOpts common;
  ModelChoice model;
  std::vector<std::string> pred_files;
  std::string label_file;
  std::string subset;
};

void merge_evaluate(const CLI::App* cmd, const json& cfg, EvaluateOpts& o) {
  merge_option(cmd, cfg, "model", o.model.model_path);
  merge_option(cmd, cfg, "baseline", o.model.baseline);
  merge_option(cmd, cfg, "preds", o.pred_files);
  merge_option(cmd, cfg, "labels", o.label_file);
  merge_option(cmd, cfg, "subset", o.subset);
}

void run_evaluate(const EvaluateOpts& o) {
  require_model_choice(o.model);
  if (o.pred_files.empty()) throw mac::ConfigError("evaluate needs at least one --preds file");
  if (o.label_file.empty()) throw mac::ConfigError("evaluate needs --labels");
  const fs::path out_dir = prepare_out_dir(o.common);

  const mac::PredictionTensor preds = load_sorted_predictions(o.pred_files);
  const mac::LabelMatrix labels = mac::load_labels(o.label_file);

  std::vector<std::size_t> subset;
  const bool has_subset = !o.subset.empty();
  if (has_subset) subset = parse_index_list(o.subset);
  const double score = evaluate_any(o.model, preds, labels, has_subset ? &subset : nullptr);

  json result;
  result["score"] = score;
  result["num_samples"] = preds.num_samples;
  result["num_sub_models_used"] = has_subset ? subset.size() : preds.num_sub_models;
  result["num_sub_models_loaded"] = preds.num_sub_models;
  write_text(out_dir / "evaluation.json", result.dump(2) + "\n");
  std::cout << "wrote " << (out_dir / "evaluation.json").string() << "\n";
  std::cout << "score " << mac::csv::format_double(score) << "\n";

  json echo;
  echo["subcommand"] = "evaluate";
  echo["model"] = o.model.model_path;
  echo["baseline"] = o.model.baseline;
  echo["preds"] = o.pred_files;
  echo["labels"] = o.label_file;
  echo["subset"] = o.subset;
  echo["out"] = o.common.out;
  write_config_echo(out_dir, echo);
}

// ---------------------------------------------------------------------------
// sweep

struct SweepOpts {
  CommonOpts common;
  ModelChoice model;
  std::vector<std::string> pred_files;
  std::string label_file;
  std::string n_spec;
  std::size_t repeats = 4;
  std::uint64_t seed = 0;
};

void merge_sweep(const CLI::App* cmd, const json& cfg, SweepOpts& o) {
  merge_option(cmd, cfg, "model", o.model.model_path);
  merge_option(cmd, cfg, "baseline", o.model.baseline);
  merge_option(cmd, cfg, "preds", o.pred_files);
  merge_option(cmd, cfg, "labels", o.label_file);
  merge_option(cmd, cfg, "n", o.n_spec);
  merge_option(cmd, cfg, "repeats", o.repeats);
  merge_option(cmd, cfg, "seed", o.seed);
}

void run_sweep(const SweepOpts& o) {
  require_model_choice(o.model);
  if (o.pred_files.empty()) throw mac::ConfigError("sweep needs at least one --preds file");
  if (o.label_file.empty()) throw mac::ConfigError("sweep needs --labels");
  if (o.n_spec.empty()) throw mac::ConfigError("sweep needs --n, e.g. --n 5,10,20");
  const fs::path out_dir = prepare_out_dir(o.common);

  const mac::PredictionTensor preds = load_sorted_predictions(o.pred_files);
  const mac::LabelMatrix labels = mac::load_labels(o.label_file);
  const mac::MacModel model = resolve_model(o.model);
  const std::vector<std::size_t> n_values = parse_index_list(o.n_spec);

  const auto rows =
      mac::score_vs_n_experiment(model, preds, labels, n_values, o.repeats, o.seed);
  for (const auto& row : rows) {
    if (row.single_repeat) {
      std::cerr << "warning: n=" << row.n
                << " ran a single repeat; its std column is 0 by construction\n";
      break;
    }
  }
  mac::save_score_vs_n_csv(rows, (out_dir / "sweep.csv").string());
  std::cout << "wrote " << (out_dir / "sweep.csv").string() << "\n";

  json echo;
  echo["subcommand"] = "sweep";
  echo["model"] = o.model.model_path;
  echo["baseline"] = o.model.baseline;
  echo["preds"] = o.pred_files;
  echo["labels"] = o.label_file;
  echo["n"] = o.n_spec;
  echo["repeats"] = o.repeats;
  echo["seed"] = o.seed;
  echo["out"] = o.common.out;
  write_config_echo(out_dir, echo);
}

// ---------------------------------------------------------------------------
// trace

struct TraceOpts {
  CommonOpts common;
  std::string model_path;
  std::size_t grid = 101;
  double grid_min = 0.0;
  double grid_max = 1.0;
};

void merge_trace(const CLI::App* cmd, const json& cfg, TraceOpts& o) {
  merge_option(cmd, cfg, "model", o.model_path);
  merge_option(cmd, cfg, "grid", o.grid);
  merge_option(cmd, cfg, "grid-min", o.grid_min);
  merge_option(cmd, cfg, "grid-max", o.grid_max);
}

void run_trace(const TraceOpts& o) {
  if (o.model_path.empty()) throw mac::ConfigError("trace needs --model");
  if (o.grid < 1) throw mac::ConfigError("trace needs --grid >= 1");
  if (!(o.grid_min <= o.grid_max)) {
    throw mac::ConfigError("trace needs grid-min <= grid-max");
  }
  const fs::path out_dir = prepare_out_dir(o.common);
  const mac::MacModel model = mac::load_mac_file(o.model_path);

  std::vector<double> input_grid(o.grid);
  for (std::size_t i = 0; i < o.grid; ++i) {
    input_grid[i] =
        o.grid == 1 ? o.grid_min
                    : o.grid_min + (o.grid_max - o.grid_min) *
                                       (static_cast<double>(i) / static_cast<double>(o.grid - 1));
  }

  // The latent grid spans the f values seen over the input grid, padded 5%
  // per side so g is traced a little beyond the operating range.
  mac::Matrix inputs(o.grid, 1);
  for (std::size_t i = 0; i < o.grid; ++i) inputs(i, 0) = input_grid[i];
  const mac::Matrix f_out = mac::apply_transform(model.f, inputs);
  double lo = f_out.data[0];
  double hi = f_out.data[0];
  for (double v : f_out.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double pad = (hi - lo) > 0.0 ? 0.05 * (hi - lo) : 0.05;
  lo -= pad;
  hi += pad;
  std::vector<double> latent_grid(o.grid);
  for (std::size_t i = 0; i < o.grid; ++i) {
    latent_grid[i] =
        o.grid == 1 ? lo
                    : lo + (hi - lo) * (static_cast<double>(i) / static_cast<double>(o.grid - 1));
  }

  const mac::TraceResult trace = mac::trace_functions(model, input_grid, latent_grid);
  mac::save_trace_csv(trace, (out_dir / "trace.csv").string());
  std::cout << "wrote " << (out_dir / "trace.csv").string() << "\n";

  json result;
  result["f_increasing_fraction"] = trace.f_increasing_fraction;
  result["latent_low"] = lo;
  result["latent_high"] = hi;
  write_text(out_dir / "trace.json", result.dump(2) + "\n");
  std::cout << "wrote " << (out_dir / "trace.json").string() << "\n";
  std::cout << "f increasing fraction " << trace.f_increasing_fraction << "\n";

  json echo;
  echo["subcommand"] = "trace";
  echo["model"] = o.model_path;
  echo["grid"] = o.grid;
  echo["grid_min"] = o.grid_min;
  echo["grid_max"] = o.grid_max;
  echo["out"] = o.common.out;
  write_config_echo(out_dir, echo);
}

// ---------------------------------------------------------------------------
// synth

struct SynthOpts {
  CommonOpts common;
  std::string preset = "paper-analog";
  std::size_t samples = 0;
  std::size_t sub_models = 0;
  std::uint64_t seed = 0;
  bool generate_only = false;
  std::size_t train_samples = 0;
  std::size_t eval_samples = 0;
  std::string train_k;
  std::string infer_n;
  std::size_t primary_k = 0;
  std::size_t repeats = 0;
  std::size_t epochs = 0;
  std::size_t batch_size = 0;
  double learning_rate = 0.0;
  std::uint64_t train_seed = 0;
  std::uint64_t sweep_seed = 0;
};

void merge_synth(const CLI::App* cmd, const json& cfg, SynthOpts& o) {
  merge_option(cmd, cfg, "preset", o.preset);
  merge_option(cmd, cfg, "samples", o.samples);
  merge_option(cmd, cfg, "sub-models", o.sub_models);
  merge_option(cmd, cfg, "seed", o.seed);
  merge_option(cmd, cfg, "train-samples", o.train_samples);
  merge_option(cmd, cfg, "eval-samples", o.eval_samples);
  merge_option(cmd, cfg, "train-k", o.train_k);
  merge_option(cmd, cfg, "infer-n", o.infer_n);
  merge_option(cmd, cfg, "primary-k", o.primary_k);
  merge_option(cmd, cfg, "repeats", o.repeats);
  merge_option(cmd, cfg, "epochs", o.epochs);
  merge_option(cmd, cfg, "batch-size", o.batch_size);
  merge_option(cmd, cfg, "lr", o.learning_rate);
  merge_option(cmd, cfg, "train-seed", o.train_seed);
  merge_option(cmd, cfg, "sweep-seed", o.sweep_seed);
}

void run_synth(const SynthOpts& o, const CLI::App* cmd) {
  if (o.preset != "paper-analog") {
    throw mac::ConfigError("unknown preset '" + o.preset + "'; available: paper-analog");
  }
  const fs::path out_dir = prepare_out_dir(o.common);

  mac::SynthSpec spec = mac::paper_analog_spec();
  if (o.samples > 0) spec.num_samples = o.samples;
  if (o.sub_models > 0) {
    if (o.sub_models > spec.profiles.size()) {
      throw mac::ConfigError("preset provides " + std::to_string(spec.profiles.size()) +
                             " sub-model profiles; --sub-models asks for " +
                             std::to_string(o.sub_models));
    }
    spec.profiles.resize(o.sub_models);
  }
  if (cmd->get_option("--seed")->count() > 0 || o.seed != 0) spec.seed = o.seed;

  const mac::SynthData data = mac::generate(spec);

  json echo;
  echo["subcommand"] = "synth";
  echo["preset"] = o.preset;
  echo["samples"] = spec.num_samples;
  echo["sub_models"] = spec.profiles.size();
  echo["seed"] = spec.seed;
  echo["generate_only"] = o.generate_only;
  echo["out"] = o.common.out;

  if (o.generate_only) {
    for (std::size_t m = 0; m < data.predictions.num_sub_models; ++m) {
      const fs::path path = out_dir / (data.predictions.sub_model_ids[m] + ".csv");
      mac::save_sub_model_csv(data.predictions, m, path.string());
      if (o.common.verbose) std::cout << "wrote " << path.string() << "\n";
    }
    std::cout << "wrote " << data.predictions.num_sub_models << " prediction files to "
              << out_dir.string() << "\n";
    mac::save_labels_csv(data.labels, (out_dir / "labels.csv").string());
    std::cout << "wrote " << (out_dir / "labels.csv").string() << "\n";
    write_config_echo(out_dir, echo);
    return;
  }

  mac::ProtocolConfig cfg = mac::paper_analog_protocol();
  cfg.data_seed = spec.seed;
  if (o.train_samples > 0) cfg.train_samples = o.train_samples;
  if (o.eval_samples > 0) cfg.eval_samples = o.eval_samples;
  if (!o.train_k.empty()) cfg.train_k = parse_index_list(o.train_k);
  if (!o.infer_n.empty()) cfg.infer_n = parse_index_list(o.infer_n);
  if (o.primary_k > 0) cfg.primary_k = o.primary_k;
  if (o.repeats > 0) cfg.sweep_repeats = o.repeats;
  if (cmd->get_option("--epochs")->count() > 0) cfg.train.max_epochs = o.epochs;
  if (o.batch_size > 0) cfg.train.batch_size = o.batch_size;
  if (o.learning_rate > 0.0) cfg.train.learning_rate = o.learning_rate;
  if (cmd->get_option("--train-seed")->count() > 0) cfg.train.seed = o.train_seed;
  if (cmd->get_option("--sweep-seed")->count() > 0) cfg.sweep_seed = o.sweep_seed;

  const mac::BenchResult result = mac::run_paper_protocol(data.predictions, data.labels, cfg);

  mac::save_bench_csv(result.report, (out_dir / "report.csv").string());
  std::cout << "wrote " << (out_dir / "report.csv").string() << "\n";
  mac::save_bench_json(result.report, cfg, (out_dir / "report.json").string());
  std::cout << "wrote " << (out_dir / "report.json").string() << "\n";
  mac::save_mac_file(result.primary_model, (out_dir / "model.macm").string());
  std::cout << "wrote " << (out_dir / "model.macm").string() << "\n";
  std::cout << "arithmetic " << mac::csv::format_double(result.report.arithmetic_score)
            << " mac@" << result.report.primary_k << " "
            << mac::csv::format_double(result.report.primary_score_full_n) << "\n";

  echo["train_samples"] = cfg.train_samples;
  echo["eval_samples"] = cfg.eval_samples;
  echo["train_k"] = cfg.train_k;
  echo["infer_n"] = cfg.infer_n;
  echo["primary_k"] = cfg.primary_k;
  echo["repeats"] = cfg.sweep_repeats;
  echo["epochs"] = cfg.train.max_epochs;
  echo["batch_size"] = cfg.train.batch_size;
  echo["lr"] = cfg.train.learning_rate;
  echo["train_seed"] = cfg.train.seed;
  echo["sweep_seed"] = cfg.sweep_seed;
  write_config_echo(out_dir, echo);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model-agnostic prediction combination"};
  app.require_subcommand(1);

  TrainOpts train_opts;
  CLI::App* train_cmd = app.add_subcommand("train", "Fit f and g on labeled predictions");
  add_common(train_cmd, train_opts.common);
  train_cmd->add_option("--preds", train_opts.pred_files, "Per-sub-model prediction CSV files");
  train_cmd->add_option("--labels", train_opts.label_file, "Label CSV file");
  train_cmd->add_option("--split", train_opts.split, "train,val,test fractions");
  train_cmd->add_option("--subsample", train_opts.subsample,
                        "Sub-model fraction drawn per minibatch");
  train_cmd->add_option("--batch-size", train_opts.batch_size, "Minibatch size");
  train_cmd->add_option("--lr", train_opts.learning_rate, "Adam learning rate");
  train_cmd->add_option("--max-epochs", train_opts.max_epochs, "Epoch cap");
  train_cmd->add_option("--patience", train_opts.patience,
                        "Early-stop patience in epochs; 0 disables");
  train_cmd->add_option("--latent", train_opts.latent, "Latent dimension of f outputs");
  train_cmd->add_option("--seed", train_opts.seed, "Training seed");
  train_cmd->add_flag("--strict-any", train_opts.strict_any,
                      "Fail when the any column mismatches the sub-type maximum");

  CombineOpts combine_opts;
  CLI::App* combine_cmd = app.add_subcommand("combine", "Combine predictions into one CSV");
  add_common(combine_cmd, combine_opts.common);
  add_model_choice(combine_cmd, combine_opts.model);
  combine_cmd->add_option("--preds", combine_opts.pred_files,
                          "Per-sub-model prediction CSV files");
  combine_cmd->add_option("--weights", combine_opts.weights_file,
                          "CSV of per-sub-model weights");
  combine_cmd->add_option("--groups", combine_opts.groups_file,
                          "CSV manifest assigning sub-models to groups");

  EvaluateOpts evaluate_opts;
  CLI::App* evaluate_cmd = app.add_subcommand("evaluate", "Score combined predictions");
  add_common(evaluate_cmd, evaluate_opts.common);
  add_model_choice(evaluate_cmd, evaluate_opts.model);
  evaluate_cmd->add_option("--preds", evaluate_opts.pred_files,
                           "Per-sub-model prediction CSV files");
  evaluate_cmd->add_option("--labels", evaluate_opts.label_file, "Label CSV file");
  evaluate_cmd->add_option("--subset", evaluate_opts.subset,
                           "Sub-model indices to use, e.g. 0..9 or 1,3,5");

  SweepOpts sweep_opts;
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "Score versus ensemble size");
  add_common(sweep_cmd, sweep_opts.common);
  add_model_choice(sweep_cmd, sweep_opts.model);
  sweep_cmd->add_option("--preds", sweep_opts.pred_files,
                        "Per-sub-model prediction CSV files");
  sweep_cmd->add_option("--labels", sweep_opts.label_file, "Label CSV file");
  sweep_cmd->add_option("--n", sweep_opts.n_spec, "Ensemble sizes, e.g. 5,10,20");
  sweep_cmd->add_option("--repeats", sweep_opts.repeats, "Random subsets per size");
  sweep_cmd->add_option("--seed", sweep_opts.seed, "Subset-draw seed");

  TraceOpts trace_opts;
  CLI::App* trace_cmd = app.add_subcommand("trace", "Trace f, g and their composition");
  add_common(trace_cmd, trace_opts.common);
  trace_cmd->add_option("--model", trace_opts.model_path, "Serialized combiner model file");
  trace_cmd->add_option("--grid", trace_opts.grid, "Grid points per curve");
  trace_cmd->add_option("--grid-min", trace_opts.grid_min, "Input grid lower bound");
  trace_cmd->add_option("--grid-max", trace_opts.grid_max, "Input grid upper bound");

  SynthOpts synth_opts;
  CLI::App* synth_cmd = app.add_subcommand("synth", "Generate the synthetic benchmark");
  add_common(synth_cmd, synth_opts.common);
  synth_cmd->add_option("--preset", synth_opts.preset, "Benchmark preset name");
  synth_cmd->add_option("--samples", synth_opts.samples, "Override sample count");
  synth_cmd->add_option("--sub-models", synth_opts.sub_models, "Override sub-model count");
  synth_cmd->add_option("--seed", synth_opts.seed, "Generation seed");
  synth_cmd->add_flag("--generate-only", synth_opts.generate_only,
                      "Write prediction and label CSVs without running the protocol");
  synth_cmd->add_option("--train-samples", synth_opts.train_samples,
                        "Samples fed to the trainer");
  synth_cmd->add_option("--eval-samples", synth_opts.eval_samples, "Samples scored");
  synth_cmd->add_option("--train-k", synth_opts.train_k, "Training ensemble sizes");
  synth_cmd->add_option("--infer-n", synth_opts.infer_n, "Inference sweep sizes");
  synth_cmd->add_option("--primary-k", synth_opts.primary_k, "Headline training size");
  synth_cmd->add_option("--repeats", synth_opts.repeats, "Sweep repeats per size");
  synth_cmd->add_option("--epochs", synth_opts.epochs, "Training epoch cap");
  synth_cmd->add_option("--batch-size", synth_opts.batch_size, "Training minibatch size");
  synth_cmd->add_option("--lr", synth_opts.learning_rate, "Training learning rate");
  synth_cmd->add_option("--train-seed", synth_opts.train_seed, "Training seed");
  synth_cmd->add_option("--sweep-seed", synth_opts.sweep_seed, "Sweep seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train_cmd->parsed()) {
      if (!train_opts.common.config_path.empty()) {
        merge_train(train_cmd, load_config_json(train_opts.common.config_path), train_opts);
      }
      run_train(train_opts);
    } else if (combine_cmd->parsed()) {
      if (!combine_opts.common.config_path.empty()) {
        merge_combine(combine_cmd, load_config_json(combine_opts.common.config_path),
                      combine_opts);
      }
      run_combine(combine_opts);
    } else if (evaluate_cmd->parsed()) {
      if (!evaluate_opts.common.config_path.empty()) {
        merge_evaluate(evaluate_cmd, load_config_json(evaluate_opts.common.config_path),
                       evaluate_opts);
      }
      run_evaluate(evaluate_opts);
    } else if (sweep_cmd->parsed()) {
      if (!sweep_opts.common.config_path.empty()) {
        merge_sweep(sweep_cmd, load_config_json(sweep_opts.common.config_path), sweep_opts);
      }
      run_sweep(sweep_opts);
    } else if (trace_cmd->parsed()) {
      if (!trace_opts.common.config_path.empty()) {
        merge_trace(trace_cmd, load_config_json(trace_opts.common.config_path), trace_opts);
      }
      run_trace(trace_opts);
    } else if (synth_cmd->parsed()) {
      if (!synth_opts.common.config_path.empty()) {
        merge_synth(synth_cmd, load_config_json(synth_opts.common.config_path), synth_opts);
      }
      run_synth(synth_opts, synth_cmd);
    }
  } catch (const mac::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const mac::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const mac::VersionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const mac::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
