#include "capsar/model.hpp"

#include <cmath>
#include <string>

#include "capsar/error.hpp"

namespace capsar {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(embedding_dim, "embedding_dim");
  positive(t_max, "t_max");
  positive(gru_hidden, "gru_hidden");
  positive(conv_channels, "conv_channels");
  positive(primary_count, "primary_count");
  positive(primary_dim, "primary_dim");
  positive(intermediate_count, "intermediate_count");
  positive(intermediate_dim, "intermediate_dim");
  positive(sentiment_dim, "sentiment_dim");
  positive(routing_iters, "routing_iters");
  if (conv_kernel % 2 == 0) throw ConfigError("conv_kernel must be odd, got " + std::to_string(conv_kernel));
  if (t_max * conv_channels != primary_count * primary_dim) {
    throw ConfigError("t_max * conv_channels (" + std::to_string(t_max * conv_channels) +
                      ") must equal primary_count * primary_dim (" +
                      std::to_string(primary_count * primary_dim) + ")");
  }
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!(beta != 0.0)) throw ConfigError("beta must be nonzero");
  if (!(m_plus > m_minus)) throw ConfigError("m_plus must exceed m_minus");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be nonnegative");
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.embedding_dim = 8;
  c.t_max = 7;
  c.gru_hidden = 5;
  c.conv_kernel = 3;
  c.conv_channels = 8;
  c.primary_count = 14;
  c.primary_dim = 4;
  c.intermediate_count = 3;
  c.intermediate_dim = 5;
  c.num_classes = 2;
  c.sentiment_dim = 6;
  c.routing_iters = 2;
  return c;
}

RoutingParamCount shared_routing_param_count(std::uint64_t children, std::uint64_t parents,
                                             std::uint64_t child_dim, std::uint64_t parent_dim) {
  if (!children || !parents || !child_dim || !parent_dim) {
    throw ContractViolation("routing layer sizes must be positive");
  }
  return {parents * parent_dim * child_dim, (children - 1) * parents * child_dim * parent_dim};
}

std::map<std::string, Shape> param_shapes(const ModelConfig& config, std::size_t vocab_size) {
  const std::size_t d = config.embedding_dim, h = config.gru_hidden;
  const std::size_t c = config.num_classes;
  std::map<std::string, Shape> s;
  s[param::kConvBias] = {config.conv_channels};
  s[param::kConvFilters] = {config.conv_kernel, 2 * h, config.conv_channels};
  s[param::kEmbedding] = {vocab_size, d};
  for (const char* dir : {"gru_bwd", "gru_fwd"}) {
    const std::string pre(dir);
    s[pre + ".b_hidden"] = {3 * h};
    s[pre + ".b_input"] = {3 * h};
    s[pre + ".w_hidden"] = {3 * h, h};
    s[pre + ".w_input"] = {3 * h, d};
  }
  s[param::kReconBias] = {d};
  s[param::kReconWeight] = {d, c * config.sentiment_dim};
  s[param::kRoute1] = {config.intermediate_count, config.intermediate_dim, config.primary_dim};
  s[param::kRoute2] = {c, config.sentiment_dim, config.intermediate_dim};
  return s;
}

template <typename T>
std::vector<T> one_hot(std::size_t index, std::size_t size) {
  if (index >= size) throw ContractViolation("one_hot index out of range");
  std::vector<T> v(size, T(0));
  v[index] = T(1);
  return v;
}

namespace {

template <typename T>
Tensor<T> glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double s = std::sqrt(6.0 / double(fan_in + fan_out));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-s, s));
  return t;
}

}  // namespace

template <typename T>
ParamSet<T> init_params(const ModelConfig& config, const Tensor<T>& embedding, Rng& rng) {
  config.validate();
  if (embedding.rank() != 2 || embedding.dim(1) != config.embedding_dim || embedding.dim(0) < 2) {
    throw DimensionError("embedding table " + shape_string(embedding.shape()) + " does not match embedding_dim " +
                         std::to_string(config.embedding_dim));
  }
  const std::size_t d = config.embedding_dim, h = config.gru_hidden, k = config.conv_kernel;
  const std::size_t cin = 2 * h, cout = config.conv_channels;
  const std::size_t c = config.num_classes;

  // Emplaced in sorted name order so the draw order is the canonical one.
  ParamSet<T> p;
  p.add(param::kConvBias, Tensor<T>({cout}));
  p.add(param::kConvFilters, glorot<T>({k, cin, cout}, k * cin, k * cout, rng));
  p.add(param::kEmbedding, embedding);
  for (const char* dir : {"gru_bwd", "gru_fwd"}) {
    const std::string pre(dir);
    p.add(pre + ".b_hidden", Tensor<T>({3 * h}));
    p.add(pre + ".b_input", Tensor<T>({3 * h}));
    p.add(pre + ".w_hidden", glorot<T>({3 * h, h}, h, 3 * h, rng));
    p.add(pre + ".w_input", glorot<T>({3 * h, d}, d, 3 * h, rng));
  }
  p.add(param::kReconBias, Tensor<T>({d}));
  p.add(param::kReconWeight, glorot<T>({d, c * config.sentiment_dim}, c * config.sentiment_dim, d, rng));
  p.add(param::kRoute1, glorot<T>({config.intermediate_count, config.intermediate_dim, config.primary_dim},
                                  config.primary_dim, config.intermediate_dim, rng));
  p.add(param::kRoute2, glorot<T>({config.num_classes, config.sentiment_dim, config.intermediate_dim},
                                  config.intermediate_dim, config.sentiment_dim, rng));
  // Padding row stays zero.
  std::fill(p.at(param::kEmbedding).row(0).begin(), p.at(param::kEmbedding).row(0).end(), T(0));
  return p;
}

template <typename T>
BoundParams<T> bind(Tape<T>& tape, const ParamSet<T>& params) {
  auto leaf = [&](const char* name) { return tape.parameter(name, params.at(name)); };
  BoundParams<T> b;
  b.embedding = leaf(param::kEmbedding);
  b.gru_fwd = {leaf(param::kGruFwdWInput), leaf(param::kGruFwdWHidden), leaf(param::kGruFwdBInput),
               leaf(param::kGruFwdBHidden)};
  b.gru_bwd = {leaf(param::kGruBwdWInput), leaf(param::kGruBwdWHidden), leaf(param::kGruBwdBInput),
               leaf(param::kGruBwdBHidden)};
  b.conv_filters = leaf(param::kConvFilters);
  b.conv_bias = leaf(param::kConvBias);
  b.route1 = leaf(param::kRoute1);
  b.route2 = leaf(param::kRoute2);
  b.recon_weight = leaf(param::kReconWeight);
  b.recon_bias = leaf(param::kReconBias);
  return b;
}

template <typename T>
Var<T> encode_sequence(Tape<T>& tape, const BoundParams<T>& p, std::span<const std::size_t> tokens,
                       const ModelConfig& config, Rng& rng, bool training) {
  const std::size_t n = tokens.size();
  if (n == 0) throw ContractViolation("encode_sequence: empty sentence");
  if (n > config.t_max) throw ContractViolation("encode_sequence: sentence longer than t_max");
  const std::size_t h = config.gru_hidden;

  std::vector<Var<T>> inputs;
  inputs.reserve(n);
  for (std::size_t t = 0; t < n; ++t) inputs.push_back(gather_rows(p.embedding, tokens.subspan(t, 1)));

  const Var<T> h0 = tape.constant(Tensor<T>({h}));
  std::vector<Var<T>> fwd, bwd(n);
  Var<T> state = h0;
  for (std::size_t t = 0; t < n; ++t) {
    const auto& g = p.gru_fwd;
    state = gru_step(inputs[t], state, g.w_input, g.w_hidden, g.b_input, g.b_hidden);
    fwd.push_back(state);
  }
  state = h0;
  for (std::size_t t = n; t-- > 0;) {
    const auto& g = p.gru_bwd;
    state = gru_step(inputs[t], state, g.w_input, g.w_hidden, g.b_input, g.b_hidden);
    bwd[t] = state;
  }
  Var<T> states = concat_cols(stack_rows(fwd, config.t_max), stack_rows(bwd, config.t_max));
  return dropout(states, config.dropout, rng, training);
}

template <typename T>
std::vector<T> location_weights(std::size_t n, std::size_t k, const ModelConfig& config) {
  if (n == 0 || n > config.t_max) throw ContractViolation("location_weights: length out of range");
  if (k < 1 || k > n) {
    throw ContractViolation("location_weights: aspect index " + std::to_string(k) + " outside [1, " +
                            std::to_string(n) + "]");
  }
  std::vector<T> l(config.t_max, T(0));
  const double reach = config.alpha + double(n) / config.beta;
  for (std::size_t t = 1; t <= n; ++t) {
    const double dist = std::abs(config.gamma * (double(k) - double(t)));
    l[t - 1] = static_cast<T>(1.0 + std::max(0.0, reach - dist));
  }
  return l;
}

template <typename T>
std::vector<T> uniform_weights(std::size_t n, const ModelConfig& config) {
  if (n == 0 || n > config.t_max) throw ContractViolation("uniform_weights: length out of range");
  std::vector<T> l(config.t_max, T(0));
  std::fill_n(l.begin(), n, T(1));
  return l;
}

template <typename T>
Var<T> apply_proximity(Var<T> hidden, std::span<const T> weights) {
  return scale_rows_const(hidden, weights);
}

template <typename T>
Var<T> build_primary_capsules(Var<T> weighted, const BoundParams<T>& p, const ModelConfig& config) {
  Var<T> conv = conv1d_same(weighted, p.conv_filters, p.conv_bias);
  if (conv.size() != config.primary_count * config.primary_dim) {
    throw ConfigError("conv output " + shape_string(conv.shape()) + " cannot form " +
                      std::to_string(config.primary_count) + " capsules of dim " +
                      std::to_string(config.primary_dim));
  }
  return squash_rows(reshape(conv, {config.primary_count, config.primary_dim}));
}

template <typename T>
RoutingResult<T> route(Var<T> children, Var<T> weights, std::size_t iterations) {
  if (iterations == 0) throw ContractViolation("route: at least one iteration required");
  Tape<T>& tape = *children.tape;
  Var<T> predictions = shared_transform(children, weights);  // N x M x D'
  const std::size_t parents = predictions.shape()[0], kids = predictions.shape()[1];

  RoutingResult<T> result;
  Var<T> logits = tape.constant(Tensor<T>({kids, parents}));
  for (std::size_t it = 0; it < iterations; ++it) {
    Var<T> couplings = softmax_rows(logits);
    result.coupling_log.push_back(couplings.value());
    result.couplings = couplings;
    result.parents = squash_rows(coupled_sum(couplings, predictions));
    if (it + 1 < iterations) logits = add(logits, agreement(result.parents, predictions));
  }
  return result;
}

template <typename T>
ForwardTrace<T> forward_from_states(Var<T> hidden, const BoundParams<T>& p, const ModelConfig& config,
                                    std::size_t length, std::size_t aspect_first, bool use_proximity) {
  const Shape expected{config.t_max, 2 * config.gru_hidden};
  if (hidden.shape() != expected) {
    throw DimensionError("encoder states " + shape_string(hidden.shape()) + ", expected " + shape_string(expected));
  }
  ForwardTrace<T> trace;
  trace.hidden = hidden;
  trace.location = use_proximity ? location_weights<T>(length, aspect_first, config)
                                 : uniform_weights<T>(length, config);
  trace.weighted = apply_proximity<T>(hidden, trace.location);
  trace.primary = build_primary_capsules(trace.weighted, p, config);
  trace.intermediate = route(trace.primary, p.route1, config.routing_iters);
  trace.sentiment = route(trace.intermediate.parents, p.route2, config.routing_iters);
  trace.lengths = row_norms(trace.sentiment.parents);
  return trace;
}

template <typename T>
ForwardTrace<T> forward(Tape<T>& tape, const BoundParams<T>& p, const ModelConfig& config,
                        std::span<const std::size_t> tokens, std::size_t aspect_first, Rng& rng,
                        ForwardOptions options) {
  Var<T> hidden = encode_sequence(tape, p, tokens, config, rng, options.training);
  return forward_from_states(hidden, p, config, tokens.size(), aspect_first, options.use_proximity);
}

template <typename T>
std::pair<Var<T>, Var<T>> reconstruct(const ForwardTrace<T>& trace, std::span<const T> mask,
                                      const BoundParams<T>& p) {
  const Var<T> caps = trace.sentiment.parents;
  const std::size_t c = caps.shape()[0];
  if (mask.size() != c) throw ContractViolation("reconstruct: mask length does not match capsule count");
  std::size_t ones = 0;
  for (T m : mask) {
    if (m == T(1)) ++ones;
    else if (m != T(0)) throw ContractViolation("reconstruct: mask must be one-hot");
  }
  if (ones != 1) throw ContractViolation("reconstruct: mask must be one-hot");

  std::vector<T> complement(c);
  for (std::size_t i = 0; i < c; ++i) complement[i] = T(1) - mask[i];
  const Shape flat{caps.size()};
  Var<T> kept = reshape(scale_rows_const(caps, mask), flat);
  Var<T> rest = reshape(scale_rows_const<T>(caps, complement), flat);
  return {affine(kept, p.recon_weight, p.recon_bias), affine(rest, p.recon_weight, p.recon_bias)};
}

#define CAPSAR_INSTANTIATE_MODEL(T)                                                                         \
  template std::vector<T> one_hot<T>(std::size_t, std::size_t);                                             \
  template ParamSet<T> init_params<T>(const ModelConfig&, const Tensor<T>&, Rng&);                          \
  template BoundParams<T> bind<T>(Tape<T>&, const ParamSet<T>&);                                            \
  template Var<T> encode_sequence<T>(Tape<T>&, const BoundParams<T>&, std::span<const std::size_t>,        \
                                     const ModelConfig&, Rng&, bool);                                       \
  template std::vector<T> location_weights<T>(std::size_t, std::size_t, const ModelConfig&);               \
  template std::vector<T> uniform_weights<T>(std::size_t, const ModelConfig&);                             \
  template Var<T> apply_proximity<T>(Var<T>, std::span<const T>);                                           \
  template Var<T> build_primary_capsules<T>(Var<T>, const BoundParams<T>&, const ModelConfig&);            \
  template RoutingResult<T> route<T>(Var<T>, Var<T>, std::size_t);                                          \
  template ForwardTrace<T> forward_from_states<T>(Var<T>, const BoundParams<T>&, const ModelConfig&,       \
                                                  std::size_t, std::size_t, bool);                          \
  template ForwardTrace<T> forward<T>(Tape<T>&, const BoundParams<T>&, const ModelConfig&,                 \
                                      std::span<const std::size_t>, std::size_t, Rng&, ForwardOptions);     \
  template std::pair<Var<T>, Var<T>> reconstruct<T>(const ForwardTrace<T>&, std::span<const T>,            \
                                                    const BoundParams<T>&);

CAPSAR_INSTANTIATE_MODEL(float)
CAPSAR_INSTANTIATE_MODEL(double)

#undef CAPSAR_INSTANTIATE_MODEL

}  // namespace capsar
