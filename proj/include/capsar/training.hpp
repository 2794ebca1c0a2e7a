#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "capsar/autograd.hpp"
#include "capsar/data.hpp"
#include "capsar/model.hpp"

namespace capsar {

// ---- losses -----------------------------------------------------------------

// sum_c mask_c max(0, m+ - p_c)^2 + (1 - mask_c) max(0, p_c - m-)^2
template <typename T>
struct MarginLoss {
  Var<T> value;               // [1]
  std::vector<T> per_class;   // each class's term
};

template <typename T>
MarginLoss<T> margin_loss(Var<T> lengths, std::span<const T> mask, double m_plus, double m_minus);

// Plain-value form.
double margin_loss_value(std::span<const double> lengths, std::span<const double> mask, double m_plus,
                         double m_minus, std::vector<double>* per_class = nullptr);

// -v_asp . r1/|r1| + v_asp . r2/|r2|, with v_asp a constant. A reconstruction
// with norm below 1e-12 contributes 0.
template <typename T>
Var<T> reconstruction_loss(const Tensor<T>& aspect, Var<T> recon1, Var<T> recon2);

double reconstruction_loss_value(std::span<const double> aspect, std::span<const double> recon1,
                                 std::span<const double> recon2);

struct LossBreakdown {
  double margin = 0.0;          // sum of L1
  double reconstruction = 0.0;  // sum of L2
  double total = 0.0;           // sum of (L1 + lambda L2)
  std::vector<double> per_class;

  // Adds one example's terms in a fixed order.
  void accumulate(double l1, double l2, double lambda, std::span<const double> class_terms = {});
};

// Per-example pieces already evaluated; returns the summed breakdown.
LossBreakdown total_loss(std::span<const double> margin_terms, std::span<const double> recon_terms, double lambda);

// Builds the full objective of one example on a tape: forward (with
// proximity), margin loss, reconstruction loss against the supplied constant
// aspect vector, combined as L1 + lambda L2.
template <typename T>
struct ExampleObjective {
  Var<T> total;
  double margin = 0.0;
  double reconstruction = 0.0;
  std::vector<T> lengths;
};

template <typename T>
ExampleObjective<T> example_objective(Tape<T>& tape, const BoundParams<T>& p, const ModelConfig& config,
                                      const Example& example, const Tensor<T>& aspect, Rng& rng, bool training);

// ---- optimizer --------------------------------------------------------------

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<float>> first_moment;
  std::map<std::string, Tensor<float>> second_moment;
};

// One bias-corrected Adam update. Parameters missing from grads receive a zero
// gradient. Any non-finite gradient aborts before touching parameters, with
// NumericError naming the parameter. The embedding padding row is re-zeroed.
void adam_step(ModelParams& params, const GradMap<float>& grads, AdamState& state);

// ---- training loop ----------------------------------------------------------

struct TrainOptions {
  std::size_t epochs = 80;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  std::size_t threads = 1;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double dev_accuracy = std::numeric_limits<double>::quiet_NaN();
  double dev_macro_f1 = std::numeric_limits<double>::quiet_NaN();
};

struct FitResult {
  ModelParams final_params;
  ModelParams best_params;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Epoch loop: shuffle, batch, forward with proximity and dropout, backward,
// Adam. Keeps the parameters of the epoch with the best dev accuracy (train
// accuracy without a dev set); ties go to the earlier epoch.
FitResult fit(ModelParams params, std::span<const Example> train, std::span<const Example> dev,
              const ModelConfig& config, const TrainOptions& options, Rng& rng,
              const EpochCallback& on_epoch = {});

// Loss and gradient of a batch, summed over examples. Examples are split into
// contiguous per-thread chunks whose gradients are merged in chunk order.
struct BatchGradient {
  GradMap<float> grads;
  double loss = 0.0;
};
BatchGradient batch_gradient(const ModelParams& params, std::span<const Example> examples,
                             std::span<const std::size_t> indices, const ModelConfig& config, Rng& rng,
                             bool training, std::size_t threads);

// ---- checkpoints ------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  Vocabulary vocab;
  ModelParams params;
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
};

// Little-endian: "CPSR", u32 version, u64 + JSON header, parameters in name
// order (u16 name length, name, u8 rank, u64 dims, f32 data), u64 payload
// length, u64 FNV-1a checksum of every preceding byte.
void save_checkpoint(const Checkpoint& checkpoint, std::ostream& out);
Checkpoint load_checkpoint(std::istream& in);
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace capsar
