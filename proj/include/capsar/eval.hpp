#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "capsar/data.hpp"
#include "capsar/model.hpp"

namespace capsar {

// ---- prediction ---------------------------------------------------------------

// Index of the longest capsule; ties go to the lowest index.
template <typename T>
std::size_t argmax_length(std::span<const T> lengths);

// Sentiment capsule lengths for one sentence, dropout off.
std::vector<float> class_lengths(const ModelParams& params, const ModelConfig& config,
                                 std::span<const std::size_t> tokens, std::size_t aspect_first,
                                 bool use_proximity);

std::size_t predict(const ModelParams& params, const ModelConfig& config, const Example& example,
                    bool use_proximity = true);

// Predictions for many examples, spread over `threads` workers. Results do not
// depend on the thread count.
std::vector<std::size_t> predict_all(const ModelParams& params, const ModelConfig& config,
                                     std::span<const Example> examples, bool use_proximity = true,
                                     std::size_t threads = 1);

// ---- aspect detection ---------------------------------------------------------

struct WordScore {
  std::size_t position = 0;  // 0-based token position
  std::size_t token_id = 0;
  double score = 0.0;        // cosine similarity
};

struct DetectionResult {
  std::size_t capsule_class = 0;
  double capsule_length = 0.0;
  bool fallback = false;              // no capsule exceeded the threshold
  std::vector<WordScore> word_scores; // every unpadded position, best first
};

// Classes whose capsule is longer than threshold; when none is, the single
// longest one. The flag reports that fallback.
std::vector<std::size_t> active_capsules(std::span<const float> lengths, double threshold, bool* fallback = nullptr);

// Runs the model without aspect input, then for each capsule longer than
// threshold (or the longest one if none is) reconstructs through the one-hot
// mask of its class and ranks the sentence's tokens by cosine similarity
// between that reconstruction and their embedding rows. Ties rank the
// earlier position first.
std::vector<DetectionResult> detect_aspects(const ModelParams& params, const ModelConfig& config,
                                            std::span<const std::size_t> tokens, double threshold = 0.5);

// ---- metrics ------------------------------------------------------------------

struct ClassStats {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;  // gold count
};

struct DetectionMetrics {
  double precision_at_1 = 0.0;
  double recall_at_5 = 0.0;
  double mean_average_precision = 0.0;
  std::size_t units = 0;
};

struct EvalReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassStats> per_class;
  std::optional<DetectionMetrics> detection;
};

// Accuracy, per-class P/R/F1 (0/0 counts as 0), and their unweighted mean F1.
EvalReport classification_metrics(std::span<const std::size_t> gold, std::span<const std::size_t> predicted,
                                  std::size_t num_classes = kNumPolarities);

// One evaluated (sentence, active capsule) pair.
struct RankingUnit {
  std::vector<std::size_t> ranking;  // positions, best first
  std::set<std::size_t> gold;
};

double precision_at(const RankingUnit& unit, std::size_t k);
double recall_at(const RankingUnit& unit, std::size_t k);
// Mean over gold items of the precision at each gold item's rank; gold items
// absent from the ranking contribute 0.
double average_precision(const RankingUnit& unit);

// Means over units; units with empty gold sets are skipped.
DetectionMetrics detection_metrics(std::span<const RankingUnit> units, std::size_t precision_k = 1,
                                   std::size_t recall_k = 5);

}  // namespace capsar
