#include "capsar/eval.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "capsar/error.hpp"

namespace capsar {

template <typename T>
std::size_t argmax_length(std::span<const T> lengths) {
  if (lengths.empty()) throw ContractViolation("argmax of an empty list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < lengths.size(); ++i) {
    if (lengths[i] > lengths[best]) best = i;
  }
  return best;
}

template std::size_t argmax_length<float>(std::span<const float>);
template std::size_t argmax_length<double>(std::span<const double>);

std::vector<float> class_lengths(const ModelParams& params, const ModelConfig& config,
                                 std::span<const std::size_t> tokens, std::size_t aspect_first,
                                 bool use_proximity) {
  Tape<float> tape;
  Rng unused(0);
  const auto bound = bind(tape, params);
  const auto trace = forward(tape, bound, config, tokens, aspect_first, unused, {false, use_proximity});
  const auto& v = trace.lengths.value();
  return {v.values().begin(), v.values().end()};
}

std::size_t predict(const ModelParams& params, const ModelConfig& config, const Example& example,
                    bool use_proximity) {
  const auto lengths = class_lengths(params, config, example.token_ids, example.aspect_first, use_proximity);
  return argmax_length<float>(lengths);
}

std::vector<std::size_t> predict_all(const ModelParams& params, const ModelConfig& config,
                                     std::span<const Example> examples, bool use_proximity, std::size_t threads) {
  std::vector<std::size_t> out(examples.size());
  threads = std::max<std::size_t>(1, std::min(threads, examples.size()));
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = predict(params, config, examples[i], use_proximity);
  };
  if (threads == 1) {
    work(0, examples.size());
    return out;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (examples.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk, hi = std::min(examples.size(), lo + chunk);
    if (lo < hi) pool.emplace_back(work, lo, hi);
  }
  for (auto& th : pool) th.join();
  return out;
}

std::vector<std::size_t> active_capsules(std::span<const float> lengths, double threshold, bool* fallback) {
  std::vector<std::size_t> active;
  for (std::size_t c = 0; c < lengths.size(); ++c) {
    if (lengths[c] > threshold) active.push_back(c);
  }
  if (fallback) *fallback = active.empty();
  if (active.empty()) active.push_back(argmax_length(lengths));
  return active;
}

std::vector<DetectionResult> detect_aspects(const ModelParams& params, const ModelConfig& config,
                                            std::span<const std::size_t> tokens, double threshold) {
  if (tokens.empty()) throw ContractViolation("detect_aspects: empty sentence");
  Tape<float> tape;
  Rng unused(0);
  const auto bound = bind(tape, params);
  const auto trace = forward(tape, bound, config, tokens, 1, unused, {false, false});
  const auto& lengths = trace.lengths.value();

  bool fallback = false;
  const auto active = active_capsules(lengths.values(), threshold, &fallback);

  const Tensor<float>& table = params.at(param::kEmbedding);
  std::vector<DetectionResult> out;
  for (std::size_t c : active) {
    const auto mask = one_hot<float>(c, lengths.size());
    const auto recon = reconstruct<float>(trace, mask, bound).first.value();
    const double recon_norm = std::sqrt(static_cast<double>(squared_norm<float>(recon.values())));

    DetectionResult r;
    r.capsule_class = c;
    r.capsule_length = lengths[c];
    r.fallback = fallback;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      const auto row = table.row(tokens[t]);
      double dotp = 0.0, row_sq = 0.0;
      for (std::size_t i = 0; i < row.size(); ++i) {
        dotp += double(row[i]) * double(recon[i]);
        row_sq += double(row[i]) * double(row[i]);
      }
      const double denom = recon_norm * std::sqrt(row_sq);
      const double score = denom > 0.0 ? std::clamp(dotp / denom, -1.0, 1.0) : 0.0;
      r.word_scores.push_back({t, tokens[t], score});
    }
    std::stable_sort(r.word_scores.begin(), r.word_scores.end(),
                     [](const WordScore& a, const WordScore& b) { return a.score > b.score; });
    out.push_back(std::move(r));
  }
  return out;
}

EvalReport classification_metrics(std::span<const std::size_t> gold, std::span<const std::size_t> predicted,
                                  std::size_t num_classes) {
  if (gold.size() != predicted.size()) throw ContractViolation("classification_metrics: length mismatch");
  if (gold.empty()) throw ContractViolation("classification_metrics: no examples");
  std::vector<std::size_t> tp(num_classes, 0), gold_count(num_classes, 0), pred_count(num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] >= num_classes || predicted[i] >= num_classes) {
      throw ContractViolation("classification_metrics: label out of range");
    }
    ++gold_count[gold[i]];
    ++pred_count[predicted[i]];
    if (gold[i] == predicted[i]) {
      ++correct;
      ++tp[gold[i]];
    }
  }
  EvalReport report;
  report.accuracy = double(correct) / double(gold.size());
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    ClassStats s;
    s.support = gold_count[c];
    s.precision = pred_count[c] ? double(tp[c]) / double(pred_count[c]) : 0.0;
    s.recall = gold_count[c] ? double(tp[c]) / double(gold_count[c]) : 0.0;
    s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    f1_sum += s.f1;
    report.per_class.push_back(s);
  }
  report.macro_f1 = f1_sum / double(num_classes);
  return report;
}

double precision_at(const RankingUnit& unit, std::size_t k) {
  if (k == 0) throw ContractViolation("precision_at: k must be positive");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, unit.ranking.size()); ++i) hits += unit.gold.count(unit.ranking[i]);
  return double(hits) / double(k);
}

double recall_at(const RankingUnit& unit, std::size_t k) {
  if (unit.gold.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, unit.ranking.size()); ++i) hits += unit.gold.count(unit.ranking[i]);
  return double(hits) / double(unit.gold.size());
}

double average_precision(const RankingUnit& unit) {
  if (unit.gold.empty()) return 0.0;
  double total = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < unit.ranking.size(); ++i) {
    if (unit.gold.count(unit.ranking[i])) {
      ++hits;
      total += double(hits) / double(i + 1);
    }
  }
  return total / double(unit.gold.size());
}

DetectionMetrics detection_metrics(std::span<const RankingUnit> units, std::size_t precision_k,
                                   std::size_t recall_k) {
  DetectionMetrics m;
  for (const auto& u : units) {
    if (u.gold.empty()) continue;
    ++m.units;
    m.precision_at_1 += precision_at(u, precision_k);
    m.recall_at_5 += recall_at(u, recall_k);
    m.mean_average_precision += average_precision(u);
  }
  if (m.units) {
    m.precision_at_1 /= double(m.units);
    m.recall_at_5 /= double(m.units);
    m.mean_average_precision /= double(m.units);
  }
  return m;
}

}  // namespace capsar
