#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "capsar/rng.hpp"
#include "capsar/tensor.hpp"

namespace capsar {

// Class indices follow the negative / neutral / positive column order.
enum class Polarity { negative = 0, neutral = 1, positive = 2, conflict = 3 };

inline constexpr std::size_t kNumPolarities = 3;

std::string_view polarity_name(Polarity p);
Polarity parse_polarity(std::string_view name);  // throws FormatError

struct AspectTerm {
  std::string term;
  Polarity polarity = Polarity::neutral;
  std::size_t from = 0;  // character (code point) offsets into the text
  std::size_t to = 0;

  friend bool operator==(const AspectTerm&, const AspectTerm&) = default;
};

struct RawSentence {
  std::string id;
  std::string text;
  std::vector<AspectTerm> aspects;

  friend bool operator==(const RawSentence&, const RawSentence&) = default;
};

// SemEval-2014 Task 4 XML. Character offsets are validated against the text;
// a mismatch raises FormatError naming the sentence id.
std::vector<RawSentence> parse_semeval_xml(std::string_view xml);

// Tab-separated lines: text, aspect term, from, to, polarity. Consecutive lines
// with the same text form one sentence; a line holding only text is a sentence
// without aspects.
std::vector<RawSentence> parse_tsv(std::string_view tsv);
std::string write_tsv(std::span<const RawSentence> sentences);

// Reads a dataset file, choosing the parser by extension (.xml or TSV).
std::vector<RawSentence> read_dataset(const std::string& path);

// ---- tokenization ---------------------------------------------------------

struct Token {
  std::string text;   // lowercased
  std::size_t begin;  // byte offsets into the source text
  std::size_t end;
};

// Lowercase, split on whitespace, and split leading/trailing ASCII punctuation
// off each chunk as single-character tokens.
std::vector<Token> tokenize(std::string_view text);

// Byte offset of the given code point offset in UTF-8 text.
std::size_t utf8_byte_offset(std::string_view text, std::size_t code_points);

// ---- vocabulary -------------------------------------------------------------

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::string_view kPadWord = "<pad>";
  static constexpr std::string_view kUnkWord = "<unk>";

  Vocabulary();

  // Rebuilds from a full index -> word list (as stored in checkpoints).
  static Vocabulary from_words(std::vector<std::string> words);

  // Returns the index of word, inserting it if new.
  std::size_t add(const std::string& word);
  void add_sentences(std::span<const RawSentence> sentences);

  // kUnk for unknown words.
  std::size_t index_of(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(std::size_t index) const { return words_.at(index); }
  const std::vector<std::string>& words() const { return words_; }
  std::size_t size() const { return words_.size(); }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---- examples ---------------------------------------------------------------

struct Example {
  std::vector<std::size_t> token_ids;         // n_i <= t_max entries, no padding
  std::size_t aspect_first = 1;               // k: 1-based index of first aspect token
  std::vector<std::size_t> aspect_token_ids;  // contiguous span starting at k
  std::size_t label = 0;                      // Polarity index, < 3
  std::size_t sentence_index = 0;             // position in the source sentence list

  std::size_t length() const { return token_ids.size(); }

  friend bool operator==(const Example&, const Example&) = default;
};

struct IngestStats {
  std::size_t aspects = 0;            // every aspect seen
  std::size_t conflict_dropped = 0;
  std::size_t truncated_skipped = 0;  // aspect starts beyond t_max
  std::size_t examples = 0;
};

// One Example per non-conflict aspect. Sentences are truncated to t_max tokens;
// aspects that start past the cut are skipped with a warning.
std::vector<Example> to_examples(std::span<const RawSentence> sentences, const Vocabulary& vocab,
                                 std::size_t t_max, IngestStats* stats = nullptr);

// 0-based positions of the tokens an aspect term covers, limited to the first
// t_max tokens. Empty when the term lies past the cut.
std::vector<std::size_t> aspect_positions(const RawSentence& sentence, const AspectTerm& aspect,
                                          std::size_t t_max);

// Token ids of a sentence (no aspect), truncated to t_max.
std::vector<std::size_t> encode_tokens(std::string_view text, const Vocabulary& vocab, std::size_t t_max);

// ---- embeddings ---------------------------------------------------------------

struct EmbeddingTable {
  Tensor<float> matrix;  // |vocab| x dim, row kPad all zeros
  std::size_t covered = 0;
  double coverage = 0.0;  // covered / (|vocab| - 2)
};

// Text embeddings: "word v1 ... vD" per line, optional "count dim" header.
// Uncovered rows (including UNK) are drawn uniform(-0.05, 0.05) from rng in
// index order. When expected_dim is set, a different file dimension is a
// FormatError.
EmbeddingTable load_embeddings(std::istream& in, const Vocabulary& vocab, Rng& rng,
                               std::optional<std::size_t> expected_dim = std::nullopt);
EmbeddingTable load_embeddings(std::string_view text, const Vocabulary& vocab, Rng& rng,
                               std::optional<std::size_t> expected_dim = std::nullopt);

// Every non-PAD row uniform(-0.05, 0.05).
EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t dim, Rng& rng);

// Mean of the aspect words' rows of table [V x D].
template <typename T>
Tensor<T> aspect_embedding(const Example& example, const Tensor<T>& table);

// ---- batching -------------------------------------------------------------------

struct Batch {
  std::vector<std::size_t> example_indices;
  std::vector<std::size_t> lengths;  // true n_i per row
  std::size_t t_max = 0;
  std::vector<std::size_t> tokens;   // example_indices.size() x t_max, PAD-filled

  std::size_t size() const { return example_indices.size(); }
  std::span<const std::size_t> row(std::size_t r) const {
    return std::span<const std::size_t>(tokens).subspan(r * t_max, t_max);
  }
};

// Splits examples into batches of batch_size (last one partial), shuffled with
// rng when shuffle is set.
std::vector<Batch> make_batches(std::span<const Example> examples, std::size_t batch_size,
                                std::size_t t_max, Rng& rng, bool shuffle);

}  // namespace capsar
