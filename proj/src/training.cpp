#include "capsar/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "capsar/error.hpp"
#include "capsar/eval.hpp"
#include "capsar/log.hpp"

namespace capsar {

// ---- losses -----------------------------------------------------------------

template <typename T>
MarginLoss<T> margin_loss(Var<T> lengths, std::span<const T> mask, double m_plus, double m_minus) {
  const auto& p = lengths.value();
  if (mask.size() != p.size()) throw DimensionError("margin_loss: mask and lengths differ in size");
  const T mp = static_cast<T>(m_plus), mm = static_cast<T>(m_minus);
  std::vector<T> m(mask.begin(), mask.end());
  MarginLoss<T> out;
  out.per_class.resize(p.size());
  T total = 0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    const T pos = std::max(T(0), mp - p[c]);
    const T neg = std::max(T(0), p[c] - mm);
    out.per_class[c] = m[c] * pos * pos + (T(1) - m[c]) * neg * neg;
    total += out.per_class[c];
  }
  out.value = lengths.tape->record("margin_loss", Tensor<T>::vector({total}), {lengths},
                                   [lengths, m, mp, mm](Tape<T>& tape, const Tensor<T>& g) {
    auto* dp = tape.grad(lengths);
    if (!dp) return;
    const auto& p = tape.value(lengths.id);
    for (std::size_t c = 0; c < p.size(); ++c) {
      const T pos = std::max(T(0), mp - p[c]);
      const T neg = std::max(T(0), p[c] - mm);
      (*dp)[c] += g[0] * (-T(2) * m[c] * pos + T(2) * (T(1) - m[c]) * neg);
    }
  });
  return out;
}

double margin_loss_value(std::span<const double> lengths, std::span<const double> mask, double m_plus,
                         double m_minus, std::vector<double>* per_class) {
  if (mask.size() != lengths.size()) throw DimensionError("margin_loss: mask and lengths differ in size");
  double total = 0.0;
  if (per_class) per_class->assign(lengths.size(), 0.0);
  for (std::size_t c = 0; c < lengths.size(); ++c) {
    const double pos = std::max(0.0, m_plus - lengths[c]);
    const double neg = std::max(0.0, lengths[c] - m_minus);
    const double term = mask[c] * pos * pos + (1.0 - mask[c]) * neg * neg;
    if (per_class) (*per_class)[c] = term;
    total += term;
  }
  return total;
}

namespace {

constexpr double kMinReconNorm = 1e-12;

// sign * a . r / |r|, or 0 (with a warning) when |r| is degenerate.
template <typename T>
T aligned_term(std::span<const T> a, std::span<const T> r, T sign, bool* degenerate) {
  const T norm = std::sqrt(squared_norm(r));
  if (!(norm >= T(kMinReconNorm))) {
    *degenerate = true;
    return T(0);
  }
  *degenerate = false;
  return sign * dot(a, r) / norm;
}

// d/dr of sign * a . r / |r| = sign * (a - (a . u) u) / |r| with u = r / |r|.
template <typename T>
void aligned_grad(std::span<const T> a, std::span<const T> r, T sign, T g, Tensor<T>* dr) {
  const T norm = std::sqrt(squared_norm(r));
  if (!(norm >= T(kMinReconNorm))) return;
  const T au = dot(a, r) / norm;
  for (std::size_t i = 0; i < r.size(); ++i) (*dr)[i] += g * sign * (a[i] - au * r[i] / norm) / norm;
}

}  // namespace

template <typename T>
Var<T> reconstruction_loss(const Tensor<T>& aspect, Var<T> recon1, Var<T> recon2) {
  if (aspect.size() != recon1.size() || aspect.size() != recon2.size()) {
    throw DimensionError("reconstruction_loss: aspect " + shape_string(aspect.shape()) + " vs reconstructions " +
                         shape_string(recon1.shape()) + ", " + shape_string(recon2.shape()));
  }
  bool deg1 = false, deg2 = false;
  const T value = aligned_term<T>(aspect.values(), recon1.value().values(), T(-1), &deg1) +
                  aligned_term<T>(aspect.values(), recon2.value().values(), T(1), &deg2);
  if (deg1 || deg2) log::warn("reconstruction vector with near-zero norm; its loss term is set to 0");
  return recon1.tape->record("reconstruction_loss", Tensor<T>::vector({value}), {recon1, recon2},
                             [aspect, recon1, recon2](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* d1 = tape.grad(recon1)) aligned_grad<T>(aspect.values(), tape.value(recon1.id).values(), T(-1), g[0], d1);
    if (auto* d2 = tape.grad(recon2)) aligned_grad<T>(aspect.values(), tape.value(recon2.id).values(), T(1), g[0], d2);
  });
}

double reconstruction_loss_value(std::span<const double> aspect, std::span<const double> recon1,
                                 std::span<const double> recon2) {
  bool deg = false;
  return aligned_term<double>(aspect, recon1, -1.0, &deg) + aligned_term<double>(aspect, recon2, 1.0, &deg);
}

void LossBreakdown::accumulate(double l1, double l2, double lambda, std::span<const double> class_terms) {
  margin += l1;
  reconstruction += l2;
  total += l1 + lambda * l2;
  if (per_class.size() < class_terms.size()) per_class.resize(class_terms.size(), 0.0);
  for (std::size_t c = 0; c < class_terms.size(); ++c) per_class[c] += class_terms[c];
}

LossBreakdown total_loss(std::span<const double> margin_terms, std::span<const double> recon_terms, double lambda) {
  if (margin_terms.size() != recon_terms.size()) throw ContractViolation("total_loss: mismatched term counts");
  LossBreakdown b;
  for (std::size_t i = 0; i < margin_terms.size(); ++i) b.accumulate(margin_terms[i], recon_terms[i], lambda);
  return b;
}

template <typename T>
ExampleObjective<T> example_objective(Tape<T>& tape, const BoundParams<T>& p, const ModelConfig& config,
                                      const Example& example, const Tensor<T>& aspect, Rng& rng, bool training) {
  if (example.label >= config.num_classes) {
    throw ContractViolation("example label " + std::to_string(example.label) + " outside " +
                            std::to_string(config.num_classes) + " classes");
  }
  const auto trace = forward(tape, p, config, example.token_ids, example.aspect_first, rng, {training, true});
  const auto mask = one_hot<T>(example.label, config.num_classes);
  const auto l1 = margin_loss<T>(trace.lengths, mask, config.m_plus, config.m_minus);
  const auto [r1, r2] = reconstruct<T>(trace, mask, p);
  const Var<T> l2 = reconstruction_loss(aspect, r1, r2);

  ExampleObjective<T> out;
  out.total = add(l1.value, scale(l2, static_cast<T>(config.lambda)));
  out.margin = l1.value.value()[0];
  out.reconstruction = l2.value()[0];
  const auto& len = trace.lengths.value();
  out.lengths.assign(len.values().begin(), len.values().end());
  return out;
}

// ---- optimizer --------------------------------------------------------------

void adam_step(ModelParams& params, const GradMap<float>& grads, AdamState& state) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw ContractViolation("gradient for unknown parameter '" + name + "'");
    if (g.shape() != params.at(name).shape()) {
      throw DimensionError("gradient shape " + shape_string(g.shape()) + " for parameter '" + name + "'");
    }
    if (!g.all_finite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const float b1 = static_cast<float>(state.beta1), b2 = static_cast<float>(state.beta2);

  for (auto& [name, theta] : params) {
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.empty()) m = Tensor<float>::zeros(theta.shape());
    if (v.empty()) v = Tensor<float>::zeros(theta.shape());
    const auto it = grads.find(name);
    const float* g = it == grads.end() ? nullptr : it->second.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const float gi = g ? g[i] : 0.0f;
      m[i] = b1 * m[i] + (1.0f - b1) * gi;
      v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
      const double m_hat = double(m[i]) / c1;
      const double v_hat = double(v[i]) / c2;
      theta[i] = static_cast<float>(double(theta[i]) - state.lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
  if (params.contains(param::kEmbedding)) {
    auto pad = params.at(param::kEmbedding).row(Vocabulary::kPad);
    std::fill(pad.begin(), pad.end(), 0.0f);
  }
}

// ---- training loop ----------------------------------------------------------

namespace {

void add_grads(GradMap<float>& into, GradMap<float>&& from) {
  for (auto& [name, g] : from) {
    auto& dst = into[name];
    if (dst.empty()) {
      dst = std::move(g);
      continue;
    }
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
}

}  // namespace

BatchGradient batch_gradient(const ModelParams& params, std::span<const Example> examples,
                             std::span<const std::size_t> indices, const ModelConfig& config, Rng& rng,
                             bool training, std::size_t threads) {
  std::vector<Rng> streams;
  streams.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) streams.push_back(rng.fork());

  const Tensor<float>& table = params.at(param::kEmbedding);
  auto run = [&](std::size_t lo, std::size_t hi, BatchGradient& out) {
    for (std::size_t i = lo; i < hi; ++i) {
      const Example& ex = examples[indices[i]];
      const Tensor<float> aspect = aspect_embedding(ex, table);
      Tape<float> tape;
      const auto bound = bind(tape, params);
      const auto obj = example_objective(tape, bound, config, ex, aspect, streams[i], training);
      out.loss += static_cast<double>(obj.total.value()[0]);
      tape.backward(obj.total, out.grads);
    }
  };

  threads = std::max<std::size_t>(1, std::min(threads, indices.size()));
  BatchGradient result;
  if (threads == 1) {
    run(0, indices.size(), result);
    return result;
  }
  const std::size_t chunk = (indices.size() + threads - 1) / threads;
  std::vector<BatchGradient> partial(threads);
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = std::min(indices.size(), t * chunk), hi = std::min(indices.size(), lo + chunk);
    pool.emplace_back([&, t, lo, hi] {
      try {
        run(lo, hi, partial[t]);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (auto& p : partial) {
    result.loss += p.loss;
    add_grads(result.grads, std::move(p.grads));
  }
  return result;
}

FitResult fit(ModelParams params, std::span<const Example> train, std::span<const Example> dev,
              const ModelConfig& config, const TrainOptions& options, Rng& rng, const EpochCallback& on_epoch) {
  if (train.empty()) throw ContractViolation("fit: empty training set");
  config.validate();
  AdamState adam;
  adam.lr = options.learning_rate;

  std::vector<std::size_t> train_gold;
  for (const auto& ex : train) train_gold.push_back(ex.label);
  std::vector<std::size_t> dev_gold;
  for (const auto& ex : dev) dev_gold.push_back(ex.label);

  FitResult result;
  double best_score = -1.0;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    const auto batches = make_batches(train, options.batch_size, config.t_max, rng, true);
    double loss = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      BatchGradient bg;
      try {
        bg = batch_gradient(params, train, batches[b].example_indices, config, rng, true, options.threads);
        adam_step(params, bg.grads, adam);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1) + ": " + e.what());
      }
      loss += bg.loss;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss / double(train.size());
    const auto train_pred = predict_all(params, config, train, true, options.threads);
    rec.train_accuracy = classification_metrics(train_gold, train_pred, config.num_classes).accuracy;
    if (!dev.empty()) {
      const auto dev_pred = predict_all(params, config, dev, true, options.threads);
      const auto report = classification_metrics(dev_gold, dev_pred, config.num_classes);
      rec.dev_accuracy = report.accuracy;
      rec.dev_macro_f1 = report.macro_f1;
    }
    const double score = dev.empty() ? rec.train_accuracy : rec.dev_accuracy;
    if (score > best_score) {
      best_score = score;
      result.best_params = params;
      result.best_epoch = epoch;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (result.best_epoch == 0) result.best_params = params;
  result.final_params = std::move(params);
  return result;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'P', 'S', 'R'};

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

template <typename U>
void put(std::string& buf, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((std::uint64_t(value) >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(std::string_view data, std::size_t end) : data_(data), end_(end) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  void need(std::size_t n, const char* what) {
    if (n > end_ - pos_) throw IntegrityError(std::string("checkpoint section '") + what + "' overruns the payload");
  }

  std::string_view data_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"embedding_dim", c.embedding_dim}, {"t_max", c.t_max},
          {"gru_hidden", c.gru_hidden},       {"conv_kernel", c.conv_kernel},
          {"conv_channels", c.conv_channels}, {"primary_count", c.primary_count},
          {"primary_dim", c.primary_dim},     {"intermediate_count", c.intermediate_count},
          {"intermediate_dim", c.intermediate_dim}, {"num_classes", c.num_classes},
          {"sentiment_dim", c.sentiment_dim}, {"routing_iters", c.routing_iters},
          {"alpha", c.alpha},                 {"beta", c.beta},
          {"gamma", c.gamma},                 {"dropout", c.dropout},
          {"m_plus", c.m_plus},               {"m_minus", c.m_minus},
          {"lambda", c.lambda}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto field = [&](const char* key, auto& dst) {
    if (!j.contains(key)) throw FormatError(std::string("checkpoint config lacks '") + key + "'");
    j.at(key).get_to(dst);
  };
  field("embedding_dim", c.embedding_dim);
  field("t_max", c.t_max);
  field("gru_hidden", c.gru_hidden);
  field("conv_kernel", c.conv_kernel);
  field("conv_channels", c.conv_channels);
  field("primary_count", c.primary_count);
  field("primary_dim", c.primary_dim);
  field("intermediate_count", c.intermediate_count);
  field("intermediate_dim", c.intermediate_dim);
  field("num_classes", c.num_classes);
  field("sentiment_dim", c.sentiment_dim);
  field("routing_iters", c.routing_iters);
  field("alpha", c.alpha);
  field("beta", c.beta);
  field("gamma", c.gamma);
  field("dropout", c.dropout);
  field("m_plus", c.m_plus);
  field("m_minus", c.m_minus);
  field("lambda", c.lambda);
  return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, std::ostream& out) {
  nlohmann::json header = {{"config", config_to_json(checkpoint.config)},
                           {"vocabulary", checkpoint.vocab.words()},
                           {"seed", checkpoint.seed},
                           {"epoch", checkpoint.epoch},
                           {"parameter_count", checkpoint.params.size()}};
  const std::string text = header.dump();

  std::string buf(kMagic, sizeof(kMagic));
  put<std::uint32_t>(buf, kCheckpointVersion);
  put<std::uint64_t>(buf, text.size());
  buf += text;
  for (const auto& [name, t] : checkpoint.params) {
    if (name.size() > 0xFFFF) throw FormatError("parameter name too long: " + name);
    put<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
    buf += name;
    put<std::uint8_t>(buf, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(buf, d);
    for (float v : t.values()) put<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(v));
  }
  put<std::uint64_t>(buf, buf.size());
  put<std::uint64_t>(buf, fnv1a(buf));
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("failed to write checkpoint");
}

Checkpoint load_checkpoint(std::istream& in) {
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (data.size() < 8 || std::string_view(data).substr(0, 4) != std::string_view(kMagic, 4)) {
    throw FormatError("not a checkpoint: bad magic bytes");
  }
  Reader head(data, data.size());
  head.seek(4);
  const auto version = head.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  if (data.size() < 32) throw IntegrityError("checkpoint truncated");
  Reader trailer(data, data.size());
  trailer.seek(data.size() - 16);
  const auto payload = trailer.get<std::uint64_t>("payload length");
  const auto checksum = trailer.get<std::uint64_t>("checksum");
  if (payload != data.size() - 16) {
    throw IntegrityError("checkpoint length mismatch: header records " + std::to_string(payload) +
                         " payload bytes, file holds " + std::to_string(data.size() - 16));
  }
  if (checksum != fnv1a(std::string_view(data).substr(0, data.size() - 8))) {
    throw IntegrityError("checkpoint checksum mismatch");
  }

  Reader r(data, payload);
  r.seek(8);
  const auto text_len = r.get<std::uint64_t>("header length");
  const auto text = r.bytes(static_cast<std::size_t>(text_len), "header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint cp;
  std::size_t count = 0;
  try {
    cp.config = config_from_json(header.at("config"));
    cp.vocab = Vocabulary::from_words(header.at("vocabulary").get<std::vector<std::string>>());
    cp.seed = header.at("seed").get<std::uint64_t>();
    cp.epoch = header.at("epoch").get<std::uint64_t>();
    count = header.at("parameter_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  cp.config.validate();

  const auto expected = param_shapes(cp.config, cp.vocab.size());
  std::size_t seen = 0;
  while (r.pos() < payload) {
    const auto name_len = r.get<std::uint16_t>("parameter name length");
    const std::string name(r.bytes(name_len, "parameter name"));
    const auto rank = r.get<std::uint8_t>("parameter rank");
    Shape shape;
    for (std::size_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("dims")));
    const auto it = expected.find(name);
    if (it == expected.end()) throw FormatError("checkpoint holds unknown parameter '" + name + "'");
    if (it->second != shape) {
      throw FormatError("parameter '" + name + "' has shape " + shape_string(shape) + ", config implies " +
                        shape_string(it->second));
    }
    const std::size_t n = shape_size(shape);
    std::vector<float> values(n);
    const auto raw = r.bytes(n * 4, "parameter data");
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (std::size_t b = 0; b < 4; ++b) bits |= std::uint32_t(static_cast<unsigned char>(raw[4 * i + b])) << (8 * b);
      values[i] = std::bit_cast<float>(bits);
    }
    if (cp.params.contains(name)) throw FormatError("duplicate parameter '" + name + "'");
    cp.params.add(name, Tensor<float>(shape, std::move(values)));
    ++seen;
  }
  if (seen != count || seen != expected.size()) {
    throw IntegrityError("checkpoint holds " + std::to_string(seen) + " parameters, expected " +
                         std::to_string(expected.size()));
  }
  return cp;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  save_checkpoint(checkpoint, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  return load_checkpoint(in);
}

template MarginLoss<float> margin_loss<float>(Var<float>, std::span<const float>, double, double);
template MarginLoss<double> margin_loss<double>(Var<double>, std::span<const double>, double, double);
template Var<float> reconstruction_loss<float>(const Tensor<float>&, Var<float>, Var<float>);
template Var<double> reconstruction_loss<double>(const Tensor<double>&, Var<double>, Var<double>);
template ExampleObjective<float> example_objective<float>(Tape<float>&, const BoundParams<float>&,
                                                         const ModelConfig&, const Example&,
                                                         const Tensor<float>&, Rng&, bool);
template ExampleObjective<double> example_objective<double>(Tape<double>&, const BoundParams<double>&,
                                                           const ModelConfig&, const Example&,
                                                           const Tensor<double>&, Rng&, bool);

}  // namespace capsar
