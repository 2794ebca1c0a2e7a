#include "capsar/verify.hpp"

#include "capsar/data.hpp"
#include "capsar/training.hpp"

namespace capsar {

GradCheckReport toy_model_gradcheck(std::uint64_t seed, double eps, const ModelConfig& config) {
  Rng rng(seed);
  const std::vector<RawSentence> sentences = {
      {"s1", "the pasta was great but the staff slow", {{"staff", Polarity::negative, 28, 33}}},
      {"s2", "battery life is superb", {{"battery life", Polarity::neutral, 0, 12}}},
  };
  Vocabulary vocab;
  vocab.add_sentences(sentences);
  const auto examples = to_examples(sentences, vocab, config.t_max);
  const auto table = random_embeddings(vocab, config.embedding_dim, rng).matrix.cast<double>();
  auto params = init_params<double>(config, table, rng);
  // Glorot-scale weights and zero biases leave the capsules nearly empty, so
  // every gradient is tiny and dominated by differencing noise. Check at a
  // generic point instead.
  for (auto& [name, t] : params) {
    if (name == param::kEmbedding) continue;
    for (auto& v : t.storage()) v = rng.uniform(-1.0, 1.0);
  }

  std::vector<Tensor<double>> aspects;
  for (const auto& ex : examples) aspects.push_back(aspect_embedding(ex, table));
  const std::uint64_t dropout_seed = rng.next_u64();

  const ScalarGraph objective = [&](Tape<double>& tape, const ParamSet<double>& p) {
    const auto bound = bind(tape, p);
    Rng mask_rng(dropout_seed);
    Var<double> total{};
    for (std::size_t i = 0; i < examples.size(); ++i) {
      auto obj = example_objective(tape, bound, config, examples[i], aspects[i], mask_rng, true);
      total = i == 0 ? obj.total : add(total, obj.total);
    }
    return total;
  };
  return finite_diff_check(objective, params, eps, kToyGradFloor);
}

}  // namespace capsar
