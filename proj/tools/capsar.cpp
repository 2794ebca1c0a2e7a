// capsar: train, evaluate and probe capsule models for aspect-level sentiment.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "capsar/config.hpp"
#include "capsar/data.hpp"
#include "capsar/error.hpp"
#include "capsar/eval.hpp"
#include "capsar/log.hpp"
#include "capsar/training.hpp"
#include "capsar/verify.hpp"

namespace fs = std::filesystem;
using namespace capsar;

namespace {

constexpr double kGradTolerance = 1e-4;

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
};

void add_config_args(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("-c,--config", args.path, "Run configuration file (key = value lines)");
  cmd->add_option("-s,--set", args.overrides, "Override a config key, e.g. --set epochs=10")->take_all();
}

RunConfig resolve_config(const ConfigArgs& args) {
  RunConfig config = args.path.empty() ? RunConfig{} : load_run_config(args.path);
  for (const auto& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  config.model.validate();
  return config;
}

std::vector<RawSentence> read_data(const std::string& path, const std::string& format) {
  if (!fs::exists(path)) throw Error("data file not found: " + path);
  if (format == "auto") return read_dataset(path);
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return format == "xml" ? parse_semeval_xml(buf.str()) : parse_tsv(buf.str());
}

std::string fixed(double v, int digits = 4) {
  if (std::isnan(v)) return "";
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

// ---- train ------------------------------------------------------------------

int cmd_train(const ConfigArgs& args) {
  const RunConfig rc = resolve_config(args);
  if (rc.train_path.empty()) throw ConfigError("no training data: set 'train'");
  const auto train_raw = read_data(rc.train_path, rc.format);
  std::vector<RawSentence> dev_raw, test_raw;
  if (!rc.dev_path.empty()) dev_raw = read_data(rc.dev_path, rc.format);
  if (!rc.test_path.empty() && fs::exists(rc.test_path)) test_raw = read_data(rc.test_path, rc.format);

  Vocabulary vocab;
  vocab.add_sentences(train_raw);
  vocab.add_sentences(dev_raw);
  vocab.add_sentences(test_raw);

  IngestStats stats;
  const auto train = to_examples(train_raw, vocab, rc.model.t_max, &stats);
  const auto dev = to_examples(dev_raw, vocab, rc.model.t_max);
  if (train.empty()) throw Error("training file holds no usable aspect terms: " + rc.train_path);
  log::info("train: " + std::to_string(train.size()) + " examples (" + std::to_string(stats.conflict_dropped) +
            " conflict dropped), dev: " + std::to_string(dev.size()) + ", vocabulary: " +
            std::to_string(vocab.size()));

  Rng rng(rc.seed);
  EmbeddingTable table;
  if (!rc.embeddings_path.empty() && fs::exists(rc.embeddings_path)) {
    std::ifstream in(rc.embeddings_path);
    table = load_embeddings(in, vocab, rng, rc.model.embedding_dim);
    log::info("embeddings cover " + fixed(100.0 * table.coverage, 1) + "% of the vocabulary");
  } else {
    if (!rc.embeddings_path.empty()) {
      log::warn("embeddings file not found: " + rc.embeddings_path + "; using random initialisation");
    }
    table = random_embeddings(vocab, rc.model.embedding_dim, rng);
  }
  ModelParams params = init_params<float>(rc.model, table.matrix, rng);

  fs::create_directories(rc.output_dir);
  const fs::path out_dir(rc.output_dir);
  {
    std::ofstream conf(out_dir / "config.txt");
    write_run_config(rc, conf);
  }
  std::ofstream csv(out_dir / "metrics.csv");
  csv << "epoch,train_loss,train_accuracy,dev_accuracy,dev_macro_f1\n";
  csv.precision(9);

  TrainOptions opts;
  opts.epochs = rc.epochs;
  opts.batch_size = rc.batch_size;
  opts.learning_rate = rc.learning_rate;
  opts.threads = rc.threads;
  const auto on_epoch = [&](const EpochRecord& r) {
    csv << r.epoch << ',' << r.train_loss << ',' << r.train_accuracy << ',';
    if (!std::isnan(r.dev_accuracy)) csv << r.dev_accuracy;
    csv << ',';
    if (!std::isnan(r.dev_macro_f1)) csv << r.dev_macro_f1;
    csv << '\n' << std::flush;
    std::string line = "epoch " + std::to_string(r.epoch) + "  loss " + fixed(r.train_loss) + "  train acc " +
                       fixed(r.train_accuracy);
    if (!std::isnan(r.dev_accuracy)) line += "  dev acc " + fixed(r.dev_accuracy) + "  dev F1 " + fixed(r.dev_macro_f1);
    log::info(line);
  };
  FitResult fitted = fit(std::move(params), train, dev, rc.model, opts, rng, on_epoch);

  save_checkpoint({rc.model, vocab, fitted.best_params, rc.seed, fitted.best_epoch},
                  (out_dir / "best.ckpt").string());
  save_checkpoint({rc.model, vocab, fitted.final_params, rc.seed, rc.epochs}, (out_dir / "final.ckpt").string());

  const auto& last = fitted.history.back();
  std::cout << "epochs: " << rc.epochs << "\n"
            << "final train accuracy: " << fixed(last.train_accuracy) << "\n"
            << "best epoch: " << fitted.best_epoch << "\n"
            << "output: " << out_dir.string() << "\n";
  return 0;
}

// ---- eval -------------------------------------------------------------------

int cmd_eval(const std::string& model_path, const std::string& data_path, const std::string& format,
             const std::string& csv_path, bool no_proximity, std::size_t threads) {
  const Checkpoint cp = load_checkpoint(model_path);
  const auto raw = read_data(data_path, format);
  const auto examples = to_examples(raw, cp.vocab, cp.config.t_max);
  if (examples.empty()) throw Error("no evaluable aspect terms in " + data_path);

  std::vector<std::size_t> gold;
  for (const auto& ex : examples) gold.push_back(ex.label);
  const auto pred = predict_all(cp.params, cp.config, examples, !no_proximity, threads);
  const EvalReport report = classification_metrics(gold, pred, cp.config.num_classes);

  std::cout << "examples   " << examples.size() << "\n"
            << "accuracy   " << fixed(report.accuracy) << "\n"
            << "macro-F1   " << fixed(report.macro_f1) << "\n\n"
            << std::left << std::setw(10) << "class" << std::right << std::setw(11) << "precision" << std::setw(9)
            << "recall" << std::setw(9) << "F1" << std::setw(9) << "support" << "\n";
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    const auto& s = report.per_class[c];
    std::cout << std::left << std::setw(10) << polarity_name(static_cast<Polarity>(c)) << std::right
              << std::setw(11) << fixed(s.precision) << std::setw(9) << fixed(s.recall) << std::setw(9)
              << fixed(s.f1) << std::setw(9) << s.support << "\n";
  }

  if (!csv_path.empty()) {
    std::ofstream csv(csv_path);
    if (!csv) throw Error("cannot write " + csv_path);
    csv.precision(9);
    csv << "scope,precision,recall,f1,support\n";
    for (std::size_t c = 0; c < report.per_class.size(); ++c) {
      const auto& s = report.per_class[c];
      csv << polarity_name(static_cast<Polarity>(c)) << ',' << s.precision << ',' << s.recall << ',' << s.f1 << ','
          << s.support << '\n';
    }
    csv << "accuracy,,,," << report.accuracy << '\n' << "macro_f1,,,," << report.macro_f1 << '\n';
  }
  return 0;
}

// ---- detect -----------------------------------------------------------------

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

int cmd_detect(const std::string& model_path, const std::string& data_path, const std::string& format,
               double threshold, std::size_t top_k, const std::string& heatmap_path) {
  const Checkpoint cp = load_checkpoint(model_path);
  const auto raw = read_data(data_path, format);
  if (raw.empty()) throw Error("no sentences in " + data_path);

  std::ofstream heatmap;
  if (!heatmap_path.empty()) {
    heatmap.open(heatmap_path);
    if (!heatmap) throw Error("cannot write " + heatmap_path);
    heatmap << "sentence,capsule,length,scores\n";
    heatmap.precision(6);
  }

  std::vector<RankingUnit> units;
  bool any_gold = false;
  for (const auto& s : raw) {
    const auto ids = encode_tokens(s.text, cp.vocab, cp.config.t_max);
    if (ids.empty()) {
      log::warn("sentence '" + s.id + "' has no tokens; skipped");
      continue;
    }
    const auto tokens = tokenize(s.text);
    const auto results = detect_aspects(cp.params, cp.config, ids, threshold);

    std::cout << s.id << ": " << s.text << "\n";
    if (heatmap.is_open()) {
      heatmap << csv_field(s.id) << ",tokens,";
      for (std::size_t t = 0; t < ids.size(); ++t) heatmap << ',' << csv_field(tokens[t].text);
      heatmap << '\n';
    }
    for (const auto& r : results) {
      std::cout << "  " << polarity_name(static_cast<Polarity>(r.capsule_class)) << " capsule, length "
                << fixed(r.capsule_length) << (r.fallback ? " (fallback)" : "") << ":";
      for (std::size_t i = 0; i < std::min(top_k, r.word_scores.size()); ++i) {
        const auto& w = r.word_scores[i];
        std::cout << "  " << tokens[w.position].text << " " << fixed(w.score);
      }
      std::cout << "\n";

      if (heatmap.is_open()) {
        std::vector<double> by_position(ids.size(), 0.0);
        for (const auto& w : r.word_scores) by_position[w.position] = w.score;
        heatmap << csv_field(s.id) << ',' << polarity_name(static_cast<Polarity>(r.capsule_class)) << ','
                << r.capsule_length;
        for (double v : by_position) heatmap << ',' << v;
        heatmap << '\n';
      }

      RankingUnit unit;
      for (const auto& w : r.word_scores) unit.ranking.push_back(w.position);
      for (const auto& a : s.aspects) {
        if (a.polarity == Polarity::conflict || static_cast<std::size_t>(a.polarity) != r.capsule_class) continue;
        for (std::size_t pos : aspect_positions(s, a, cp.config.t_max)) unit.gold.insert(pos);
      }
      any_gold = any_gold || !s.aspects.empty();
      units.push_back(std::move(unit));
    }
  }

  if (any_gold) {
    const auto m = detection_metrics(units, 1, top_k);
    std::cout << "\nunits " << m.units << "  P@1 " << fixed(m.precision_at_1) << "  R@" << top_k << " "
              << fixed(m.recall_at_5) << "  mAP " << fixed(m.mean_average_precision) << "\n";
  }
  return 0;
}

// ---- gradcheck --------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, bool corrupt) {
  if (corrupt) debug::set_corrupt_squash_adjoint(true);
  const GradCheckReport report = toy_model_gradcheck(seed);
  std::cout << std::left << std::setw(20) << "parameter" << std::right << std::setw(14) << "max rel err"
            << std::setw(14) << "analytic" << std::setw(14) << "numeric" << "\n";
  std::cout << std::scientific << std::setprecision(3);
  for (const auto& p : report.per_param) {
    std::cout << std::left << std::setw(20) << p.name << std::right << std::setw(14) << p.max_rel_error
              << std::setw(14) << p.analytic << std::setw(14) << p.numeric << "\n";
  }
  const bool ok = report.max_rel_error < kGradTolerance;
  std::cout << "coordinates " << report.coordinates << ", worst " << report.worst_param << " "
            << report.max_rel_error << " -> " << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capsule networks for aspect-level sentiment analysis"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  ConfigArgs train_args;
  auto* train = app.add_subcommand("train", "Train a model from a run configuration");
  add_config_args(train, train_args);

  std::string model, data, format = "auto", csv, heatmap;
  bool no_proximity = false;
  std::size_t threads = 1;
  auto* eval = app.add_subcommand("eval", "Report accuracy and macro-F1 on a labelled file");
  eval->add_option("-m,--model", model, "Checkpoint")->required();
  eval->add_option("-d,--data", data, "Labelled XML or TSV file")->required();
  eval->add_option("--format", format, "auto, xml or tsv")->check(CLI::IsMember({"auto", "xml", "tsv"}));
  eval->add_option("--csv", csv, "Write the report as CSV");
  eval->add_flag("--no-proximity", no_proximity, "Disable location weighting");
  eval->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  double threshold = 0.5;
  std::size_t top_k = 5;
  auto* detect = app.add_subcommand("detect", "Rank sentence words as aspect candidates per active capsule");
  detect->add_option("-m,--model", model, "Checkpoint")->required();
  detect->add_option("-d,--data", data, "XML or TSV file; gold aspects enable P@1/R@k/mAP")->required();
  detect->add_option("--format", format, "auto, xml or tsv")->check(CLI::IsMember({"auto", "xml", "tsv"}));
  detect->add_option("--threshold", threshold, "Capsule activation threshold")->capture_default_str();
  detect->add_option("--topk", top_k, "Words shown per capsule; recall cut-off")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  detect->add_option("--heatmap", heatmap, "Write per-capsule word scores as CSV");

  std::uint64_t seed = 7;
  bool toy = true, corrupt = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  gradcheck->add_flag("--toy-config", toy, "Use the small verification configuration (the only one supported)");
  gradcheck->add_option("--seed", seed, "Seed for data and parameters")->capture_default_str();
  gradcheck->add_flag("--corrupt-squash-adjoint", corrupt, "Deliberately perturb the squash adjoint");

  CLI11_PARSE(app, argc, argv);
  if (quiet) log::set_level(log::Level::warning);

  try {
    if (train->parsed()) return cmd_train(train_args);
    if (eval->parsed()) return cmd_eval(model, data, format, csv, no_proximity, threads);
    if (detect->parsed()) return cmd_detect(model, data, format, threshold, top_k, heatmap);
    if (gradcheck->parsed()) return cmd_gradcheck(seed, corrupt);
  } catch (const ConfigError& e) {
    log::error(e.what());
    return 2;
  } catch (const std::exception& e) {
    log::error(e.what());
    return 1;
  }
  return 1;
}
