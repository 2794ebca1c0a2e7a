#include "capsar/data.hpp"

#include <algorithm>
#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <cctype>
#include <charconv>
#include <fstream>
#include <istream>
#include <sstream>
#include <unordered_set>

#include "capsar/error.hpp"
#include "capsar/log.hpp"

namespace capsar {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool is_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u < 0x80 && std::ispunct(u);
}

char lower(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u < 0x80 ? static_cast<char>(std::tolower(u)) : c;
}

std::string lowercase(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = lower(c);
  return out;
}

std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (char c : s) n += (static_cast<unsigned char>(c) & 0xC0) != 0x80;
  return n;
}

std::size_t parse_size(std::string_view field, const std::string& what, std::size_t line) {
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw ParseError("invalid " + what + " '" + std::string(field) + "'", line);
  }
  return value;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

void validate_aspect(const RawSentence& s, const AspectTerm& a) {
  const std::size_t len = utf8_length(s.text);
  if (a.from >= a.to || a.to > len) {
    throw FormatError("sentence '" + s.id + "': aspect '" + a.term + "' offsets [" +
                      std::to_string(a.from) + ", " + std::to_string(a.to) +
                      ") outside text of length " + std::to_string(len));
  }
  const std::size_t b = utf8_byte_offset(s.text, a.from);
  const std::size_t e = utf8_byte_offset(s.text, a.to);
  if (lowercase(std::string_view(s.text).substr(b, e - b)) != lowercase(a.term)) {
    throw FormatError("sentence '" + s.id + "': text at offsets [" + std::to_string(a.from) + ", " +
                      std::to_string(a.to) + ") does not match aspect '" + a.term + "'");
  }
}

}  // namespace

std::string_view polarity_name(Polarity p) {
  switch (p) {
    case Polarity::negative: return "negative";
    case Polarity::neutral: return "neutral";
    case Polarity::positive: return "positive";
    case Polarity::conflict: return "conflict";
  }
  return "unknown";
}

Polarity parse_polarity(std::string_view name) {
  const std::string n = lowercase(name);
  if (n == "negative") return Polarity::negative;
  if (n == "neutral") return Polarity::neutral;
  if (n == "positive") return Polarity::positive;
  if (n == "conflict") return Polarity::conflict;
  throw FormatError("unknown polarity '" + std::string(name) + "'");
}

std::size_t utf8_byte_offset(std::string_view text, std::size_t code_points) {
  std::size_t seen = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if ((static_cast<unsigned char>(text[i]) & 0xC0) != 0x80) {
      if (seen == code_points) return i;
      ++seen;
    }
  }
  if (seen == code_points) return text.size();
  throw ContractViolation("code point offset " + std::to_string(code_points) + " beyond text");
}

// ---- parsers ------------------------------------------------------------------

std::vector<RawSentence> parse_semeval_xml(std::string_view xml) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in{std::string(xml)};
  try {
    pt::read_xml(in, tree);
  } catch (const pt::xml_parser_error& e) {
    throw ParseError("malformed XML: " + e.message(), e.line());
  }

  const auto root = tree.get_child_optional("sentences");
  if (!root) throw ParseError("missing <sentences> root element");

  std::vector<RawSentence> out;
  for (const auto& [tag, node] : *root) {
    if (tag != "sentence") continue;
    RawSentence s;
    s.id = node.get<std::string>("<xmlattr>.id", std::to_string(out.size()));
    s.text = node.get<std::string>("text", "");
    if (const auto terms = node.get_child_optional("aspectTerms")) {
      for (const auto& [term_tag, term] : *terms) {
        if (term_tag != "aspectTerm") continue;
        AspectTerm a;
        try {
          a.term = term.get<std::string>("<xmlattr>.term");
          a.polarity = parse_polarity(term.get<std::string>("<xmlattr>.polarity"));
          a.from = term.get<std::size_t>("<xmlattr>.from");
          a.to = term.get<std::size_t>("<xmlattr>.to");
        } catch (const pt::ptree_error& e) {
          throw FormatError("sentence '" + s.id + "': bad aspectTerm: " + e.what());
        }
        validate_aspect(s, a);
        s.aspects.push_back(std::move(a));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<RawSentence> parse_tsv(std::string_view tsv) {
  std::vector<RawSentence> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < tsv.size()) {
    std::size_t end = tsv.find('\n', start);
    if (end == std::string_view::npos) end = tsv.size();
    std::string_view line = tsv.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;

    const auto fields = split(line, '\t');
    if (fields.size() != 1 && fields.size() != 5) {
      throw ParseError("expected 1 or 5 tab-separated fields, got " + std::to_string(fields.size()), line_no);
    }
    const std::string text(fields[0]);
    const bool same = !out.empty() && out.back().text == text;
    if (fields.size() == 1) {
      if (!same) out.push_back(RawSentence{"line" + std::to_string(line_no), text, {}});
      continue;
    }
    AspectTerm a;
    a.term = std::string(fields[1]);
    a.from = parse_size(fields[2], "from offset", line_no);
    a.to = parse_size(fields[3], "to offset", line_no);
    try {
      a.polarity = parse_polarity(fields[4]);
    } catch (const FormatError& e) {
      throw ParseError(e.what(), line_no);
    }
    if (!same) out.push_back(RawSentence{"line" + std::to_string(line_no), text, {}});
    validate_aspect(out.back(), a);
    out.back().aspects.push_back(std::move(a));
  }
  return out;
}

std::string write_tsv(std::span<const RawSentence> sentences) {
  std::ostringstream os;
  for (const auto& s : sentences) {
    if (s.text.find_first_of("\t\n\r") != std::string::npos) {
      throw FormatError("sentence '" + s.id + "' contains a tab or line break");
    }
    if (s.aspects.empty()) {
      os << s.text << '\n';
      continue;
    }
    for (const auto& a : s.aspects) {
      os << s.text << '\t' << a.term << '\t' << a.from << '\t' << a.to << '\t' << polarity_name(a.polarity)
         << '\n';
    }
  }
  return os.str();
}

std::vector<RawSentence> read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string content = buf.str();
  const bool xml = path.size() >= 4 && lowercase(path.substr(path.size() - 4)) == ".xml";
  return xml ? parse_semeval_xml(content) : parse_tsv(content);
}

// ---- tokenization -----------------------------------------------------------

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    if (i >= text.size()) break;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;

    std::size_t lo = i, hi = j;
    while (lo < hi && is_punct(text[lo])) {
      out.push_back(Token{std::string(1, text[lo]), lo, lo + 1});
      ++lo;
    }
    std::vector<Token> tail;
    while (hi > lo && is_punct(text[hi - 1])) {
      --hi;
      tail.push_back(Token{std::string(1, text[hi]), hi, hi + 1});
    }
    if (hi > lo) out.push_back(Token{lowercase(text.substr(lo, hi - lo)), lo, hi});
    out.insert(out.end(), tail.rbegin(), tail.rend());
    i = j;
  }
  return out;
}

// ---- vocabulary -------------------------------------------------------------

Vocabulary::Vocabulary() {
  add(std::string(kPadWord));
  add(std::string(kUnkWord));
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  if (words.size() < 2 || words[0] != kPadWord || words[1] != kUnkWord) {
    throw FormatError("vocabulary must start with the reserved <pad> and <unk> entries");
  }
  Vocabulary v;
  for (std::size_t i = 2; i < words.size(); ++i) {
    if (v.contains(words[i])) throw FormatError("duplicate vocabulary word '" + words[i] + "'");
    v.add(words[i]);
  }
  return v;
}

std::size_t Vocabulary::add(const std::string& word) {
  auto [it, inserted] = index_.try_emplace(word, words_.size());
  if (inserted) words_.push_back(word);
  return it->second;
}

void Vocabulary::add_sentences(std::span<const RawSentence> sentences) {
  for (const auto& s : sentences) {
    for (const auto& tok : tokenize(s.text)) add(tok.text);
  }
}

std::size_t Vocabulary::index_of(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

// ---- examples ---------------------------------------------------------------

std::vector<std::size_t> encode_tokens(std::string_view text, const Vocabulary& vocab, std::size_t t_max) {
  std::vector<std::size_t> ids;
  for (const auto& tok : tokenize(text)) {
    if (ids.size() == t_max) break;
    ids.push_back(vocab.index_of(tok.text));
  }
  return ids;
}

std::vector<std::size_t> aspect_positions(const RawSentence& sentence, const AspectTerm& aspect,
                                          std::size_t t_max) {
  const auto tokens = tokenize(sentence.text);
  const std::size_t b = utf8_byte_offset(sentence.text, aspect.from);
  const std::size_t e = utf8_byte_offset(sentence.text, aspect.to);
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < tokens.size() && t < t_max; ++t) {
    if (tokens[t].end > b && tokens[t].begin < e) out.push_back(t);
  }
  return out;
}

std::vector<Example> to_examples(std::span<const RawSentence> sentences, const Vocabulary& vocab,
                                 std::size_t t_max, IngestStats* stats) {
  IngestStats local;
  std::vector<Example> out;
  for (std::size_t si = 0; si < sentences.size(); ++si) {
    const auto& s = sentences[si];
    if (s.aspects.empty()) continue;
    const auto tokens = tokenize(s.text);
    std::vector<std::size_t> ids;
    for (std::size_t t = 0; t < tokens.size() && t < t_max; ++t) ids.push_back(vocab.index_of(tokens[t].text));

    for (const auto& a : s.aspects) {
      ++local.aspects;
      if (a.polarity == Polarity::conflict) {
        ++local.conflict_dropped;
        continue;
      }
      const std::size_t b = utf8_byte_offset(s.text, a.from);
      const std::size_t e = utf8_byte_offset(s.text, a.to);
      // First token: the one containing `from`, else the first starting after it.
      std::size_t first = tokens.size();
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t].end > b) {
          first = t;
          break;
        }
      }
      if (first >= tokens.size() || tokens[first].begin >= e) {
        throw FormatError("sentence '" + s.id + "': aspect '" + a.term + "' covers no token");
      }
      if (first >= t_max) {
        ++local.truncated_skipped;
        log::warn("sentence '" + s.id + "': aspect '" + a.term + "' starts beyond the " +
                  std::to_string(t_max) + "-token limit; skipped");
        continue;
      }
      Example ex;
      ex.token_ids = ids;
      ex.aspect_first = first + 1;
      for (std::size_t t = first; t < ids.size() && tokens[t].begin < e; ++t) {
        ex.aspect_token_ids.push_back(ids[t]);
      }
      ex.label = static_cast<std::size_t>(a.polarity);
      ex.sentence_index = si;
      out.push_back(std::move(ex));
    }
  }
  local.examples = out.size();
  if (local.truncated_skipped) {
    log::warn(std::to_string(local.truncated_skipped) + " aspect(s) skipped by truncation");
  }
  if (stats) *stats = local;
  return out;
}

// ---- embeddings ---------------------------------------------------------------

namespace {

void fill_uncovered(EmbeddingTable& table, const std::vector<bool>& covered, Rng& rng) {
  const std::size_t dim = table.matrix.dim(1);
  for (std::size_t r = 1; r < covered.size(); ++r) {
    if (covered[r]) continue;
    for (std::size_t c = 0; c < dim; ++c) table.matrix.at(r, c) = static_cast<float>(rng.uniform(-0.05, 0.05));
  }
}

}  // namespace

EmbeddingTable load_embeddings(std::istream& in, const Vocabulary& vocab, Rng& rng,
                               std::optional<std::size_t> expected_dim) {
  std::size_t dim = expected_dim.value_or(0);
  std::vector<std::vector<float>> rows(vocab.size());
  std::vector<bool> covered(vocab.size(), false);
  std::size_t line_no = 0;
  std::string line;
  std::vector<float> values;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::string_view rest(line);
    while (!rest.empty() && is_space(rest.back())) rest.remove_suffix(1);
    if (rest.empty()) continue;

    std::vector<std::string_view> fields;
    std::size_t i = 0;
    while (i < rest.size()) {
      while (i < rest.size() && is_space(rest[i])) ++i;
      std::size_t j = i;
      while (j < rest.size() && !is_space(rest[j])) ++j;
      if (j > i) fields.push_back(rest.substr(i, j - i));
      i = j;
    }
    if (line_no == 1 && fields.size() == 2) {
      std::size_t a = 0, b = 0;
      auto r1 = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), a);
      auto r2 = std::from_chars(fields[1].data(), fields[1].data() + fields[1].size(), b);
      if (r1.ec == std::errc() && r1.ptr == fields[0].data() + fields[0].size() && r2.ec == std::errc() &&
          r2.ptr == fields[1].data() + fields[1].size()) {
        continue;  // "count dim" header
      }
    }
    const std::size_t line_dim = fields.size() - 1;
    if (line_dim == 0) throw FormatError("embedding line " + std::to_string(line_no) + " has no values");
    if (dim == 0) dim = line_dim;
    if (line_dim != dim) {
      throw FormatError("embedding line " + std::to_string(line_no) + " has dimension " +
                        std::to_string(line_dim) + ", expected " + std::to_string(dim));
    }
    const std::string word(fields[0]);
    if (!vocab.contains(word) || word == Vocabulary::kPadWord || word == Vocabulary::kUnkWord) continue;
    const std::size_t idx = vocab.index_of(word);
    if (covered[idx]) {
      log::warn("embedding word '" + word + "' repeated on line " + std::to_string(line_no) +
                "; keeping the first occurrence");
      continue;
    }
    values.assign(dim, 0.0f);
    for (std::size_t c = 0; c < dim; ++c) {
      const auto f = fields[c + 1];
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), values[c]);
      if (ec != std::errc() || ptr != f.data() + f.size()) {
        throw FormatError("embedding line " + std::to_string(line_no) + ": bad number '" + std::string(f) + "'");
      }
    }
    rows[idx] = values;
    covered[idx] = true;
  }
  if (dim == 0) throw FormatError("embedding file contains no vectors");

  EmbeddingTable table;
  table.matrix = Tensor<float>({vocab.size(), dim});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (covered[r]) std::copy(rows[r].begin(), rows[r].end(), table.matrix.row(r).begin());
  }
  fill_uncovered(table, covered, rng);
  table.covered = static_cast<std::size_t>(std::count(covered.begin(), covered.end(), true));
  table.coverage = vocab.size() > 2 ? double(table.covered) / double(vocab.size() - 2) : 0.0;
  return table;
}

EmbeddingTable load_embeddings(std::string_view text, const Vocabulary& vocab, Rng& rng,
                               std::optional<std::size_t> expected_dim) {
  std::istringstream in{std::string(text)};
  return load_embeddings(in, vocab, rng, expected_dim);
}

EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t dim, Rng& rng) {
  EmbeddingTable table;
  table.matrix = Tensor<float>({vocab.size(), dim});
  fill_uncovered(table, std::vector<bool>(vocab.size(), false), rng);
  return table;
}

template <typename T>
Tensor<T> aspect_embedding(const Example& example, const Tensor<T>& table) {
  if (example.aspect_token_ids.empty()) throw ContractViolation("aspect_embedding: empty aspect");
  const std::size_t dim = table.dim(1);
  Tensor<T> out({dim});
  for (std::size_t id : example.aspect_token_ids) {
    const auto row = table.row(id);
    for (std::size_t c = 0; c < dim; ++c) out[c] += row[c];
  }
  const T n = static_cast<T>(example.aspect_token_ids.size());
  for (auto& v : out.values()) v /= n;
  return out;
}

template Tensor<float> aspect_embedding<float>(const Example&, const Tensor<float>&);
template Tensor<double> aspect_embedding<double>(const Example&, const Tensor<double>&);

// ---- batching -------------------------------------------------------------------

std::vector<Batch> make_batches(std::span<const Example> examples, std::size_t batch_size, std::size_t t_max,
                                Rng& rng, bool shuffle) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle) rng.shuffle(order);

  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    Batch b;
    b.t_max = t_max;
    const std::size_t stop = std::min(order.size(), start + batch_size);
    b.tokens.assign((stop - start) * t_max, Vocabulary::kPad);
    for (std::size_t i = start; i < stop; ++i) {
      const Example& ex = examples[order[i]];
      if (ex.length() > t_max) throw ContractViolation("example longer than t_max");
      b.example_indices.push_back(order[i]);
      b.lengths.push_back(ex.length());
      std::copy(ex.token_ids.begin(), ex.token_ids.end(), b.tokens.begin() + (i - start) * t_max);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace capsar
