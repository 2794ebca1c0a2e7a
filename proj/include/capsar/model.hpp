#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "capsar/autograd.hpp"
#include "capsar/ops.hpp"
#include "capsar/rng.hpp"

namespace capsar {

struct CapsuleLayerSpec {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::size_t routing_iters = 0;
};

struct ModelConfig {
  std::size_t embedding_dim = 300;  // D_x
  std::size_t t_max = 75;
  std::size_t gru_hidden = 150;     // per direction
  std::size_t conv_kernel = 3;
  std::size_t conv_channels = 300;
  std::size_t primary_count = 450;
  std::size_t primary_dim = 50;
  std::size_t intermediate_count = 30;
  std::size_t intermediate_dim = 150;
  std::size_t num_classes = 3;      // sentiment capsules
  std::size_t sentiment_dim = 300;
  std::size_t routing_iters = 3;
  double alpha = 3.0;
  double beta = 10.0;
  double gamma = 1.0;
  double dropout = 0.5;
  double m_plus = 1.0;
  double m_minus = 0.1;
  double lambda = 0.003;

  CapsuleLayerSpec primary() const { return {primary_count, primary_dim, 0}; }
  CapsuleLayerSpec intermediate() const { return {intermediate_count, intermediate_dim, routing_iters}; }
  CapsuleLayerSpec sentiment() const { return {num_classes, sentiment_dim, routing_iters}; }

  // Throws ConfigError on inconsistent sizes (e.g. the conv output must reshape
  // exactly into the primary capsules).
  void validate() const;

  // Small configuration for gradient checking: T_max 7, D_x 8, H 5,
  // capsules 14x4 -> 3x5 -> 2x6, two routing iterations.
  static ModelConfig toy();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Parameter names, canonical (sorted) order.
namespace param {
inline constexpr const char* kConvBias = "conv.bias";
inline constexpr const char* kConvFilters = "conv.filters";
inline constexpr const char* kEmbedding = "embedding";
inline constexpr const char* kGruBwdBHidden = "gru_bwd.b_hidden";
inline constexpr const char* kGruBwdBInput = "gru_bwd.b_input";
inline constexpr const char* kGruBwdWHidden = "gru_bwd.w_hidden";
inline constexpr const char* kGruBwdWInput = "gru_bwd.w_input";
inline constexpr const char* kGruFwdBHidden = "gru_fwd.b_hidden";
inline constexpr const char* kGruFwdBInput = "gru_fwd.b_input";
inline constexpr const char* kGruFwdWHidden = "gru_fwd.w_hidden";
inline constexpr const char* kGruFwdWInput = "gru_fwd.w_input";
inline constexpr const char* kReconBias = "recon.bias";
inline constexpr const char* kReconWeight = "recon.weight";
inline constexpr const char* kRoute1 = "route1.weight";
inline constexpr const char* kRoute2 = "route2.weight";
}  // namespace param

using ModelParams = ParamSet<float>;

// Creates every parameter. Weights are uniform(-s, s) with
// s = sqrt(6 / (fan_in + fan_out)), drawn in canonical name order; biases are
// zero. The embedding table is taken as given (rows x embedding_dim).
template <typename T>
ParamSet<T> init_params(const ModelConfig& config, const Tensor<T>& embedding, Rng& rng);

// Shape of every parameter, keyed by canonical name.
std::map<std::string, Shape> param_shapes(const ModelConfig& config, std::size_t vocab_size);

// Shared-weight routing sizes: one D_next x D_L transform per parent.
struct RoutingParamCount {
  std::uint64_t shared = 0;  // N * D_next * D_L
  std::uint64_t saving = 0;  // (M - 1) * N * D_L * D_next versus per-child transforms
};
RoutingParamCount shared_routing_param_count(std::uint64_t children, std::uint64_t parents,
                                             std::uint64_t child_dim, std::uint64_t parent_dim);

template <typename T>
struct GruVars {
  Var<T> w_input, w_hidden, b_input, b_hidden;
};

// Parameters bound as leaves of one tape.
template <typename T>
struct BoundParams {
  Var<T> embedding;
  GruVars<T> gru_fwd, gru_bwd;
  Var<T> conv_filters, conv_bias;
  Var<T> route1, route2;
  Var<T> recon_weight, recon_bias;
};

template <typename T>
BoundParams<T> bind(Tape<T>& tape, const ParamSet<T>& params);

template <typename T>
struct RoutingResult {
  Var<T> parents;                       // N x D_next, squashed
  Var<T> couplings;                     // M x N, final iteration
  std::vector<Tensor<T>> coupling_log;  // couplings used at every iteration
};

template <typename T>
struct ForwardTrace {
  Var<T> hidden;        // T_max x 2H encoder states (after dropout)
  Var<T> weighted;      // T_max x 2H after location proximity
  std::vector<T> location;
  Var<T> primary;       // primary_count x primary_dim
  RoutingResult<T> intermediate;
  RoutingResult<T> sentiment;
  Var<T> lengths;       // [C], lengths of the sentiment capsules

  Var<T> sentiment_capsules() const { return sentiment.parents; }
};

// Bi-GRU over the unpadded span; rows beyond tokens.size() are zero.
template <typename T>
Var<T> encode_sequence(Tape<T>& tape, const BoundParams<T>& p, std::span<const std::size_t> tokens,
                       const ModelConfig& config, Rng& rng, bool training);

// l_t = 1 + max(0, alpha + n/beta - |gamma (k - t)|) for t <= n, 0 beyond.
// k and t are 1-based. Throws ContractViolation unless 1 <= k <= n <= t_max.
template <typename T>
std::vector<T> location_weights(std::size_t n, std::size_t k, const ModelConfig& config);

// 1 on the first n rows and 0 after: proximity disabled.
template <typename T>
std::vector<T> uniform_weights(std::size_t n, const ModelConfig& config);

template <typename T>
Var<T> apply_proximity(Var<T> hidden, std::span<const T> weights);

// Same conv over the weighted states, reshaped position-major into
// primary_count x primary_dim capsules, then squashed.
template <typename T>
Var<T> build_primary_capsules(Var<T> weighted, const BoundParams<T>& p, const ModelConfig& config);

// Routing by agreement with one transform per parent shared by all children.
// Logits start at 0 (uniform couplings), couplings are softmax over parents,
// and logits accumulate q_j . u_j|i between iterations.
template <typename T>
RoutingResult<T> route(Var<T> children, Var<T> weights, std::size_t iterations);

struct ForwardOptions {
  bool training = false;
  bool use_proximity = true;
};

// tokens: unpadded ids (1 <= n <= t_max); aspect_first: 1-based k, ignored
// when proximity is off.
template <typename T>
ForwardTrace<T> forward(Tape<T>& tape, const BoundParams<T>& p, const ModelConfig& config,
                        std::span<const std::size_t> tokens, std::size_t aspect_first, Rng& rng,
                        ForwardOptions options);

// Entry point for any encoder that produces T_max x 2H states.
template <typename T>
ForwardTrace<T> forward_from_states(Var<T> hidden, const BoundParams<T>& p, const ModelConfig& config,
                                    std::size_t length, std::size_t aspect_first, bool use_proximity);

// v_recon1 from the one-hot mask and v_recon2 from its complement, through
// one shared affine map. Throws ContractViolation unless mask is one-hot.
template <typename T>
std::pair<Var<T>, Var<T>> reconstruct(const ForwardTrace<T>& trace, std::span<const T> mask,
                                      const BoundParams<T>& p);

template <typename T>
std::vector<T> one_hot(std::size_t index, std::size_t size);

}  // namespace capsar
