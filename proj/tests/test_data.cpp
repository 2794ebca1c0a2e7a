#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "capsar/data.hpp"
#include "capsar/error.hpp"

using namespace capsar;

namespace {

const char* kXml = R"(<?xml version="1.0" encoding="UTF-8"?>
<sentences>
  <sentence id="813">
    <text>All the appetizers and salads were fabulous, the steak was mouth watering.</text>
    <aspectTerms>
      <aspectTerm term="appetizers" polarity="positive" from="8" to="18"/>
      <aspectTerm term="salads" polarity="positive" from="23" to="29"/>
    </aspectTerms>
  </sentence>
  <sentence id="900">
    <text>Prices are fair but the wait was long.</text>
    <aspectTerms>
      <aspectTerm term="Prices" polarity="conflict" from="0" to="6"/>
    </aspectTerms>
  </sentence>
  <sentence id="901">
    <text>We went on a Tuesday.</text>
    <aspectTerms>
    </aspectTerms>
  </sentence>
  <sentence id="902">
    <text>No aspects at all.</text>
  </sentence>
</sentences>
)";

std::vector<std::string> texts(const std::vector<Token>& tokens) {
  std::vector<std::string> out;
  for (const auto& t : tokens) out.push_back(t.text);
  return out;
}

}  // namespace

// ---- parsers ----------------------------------------------------------------

TEST(SemevalXml, ParsesSentencesAspectsInDocumentOrder) {
  const auto s = parse_semeval_xml(kXml);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s[0].id, "813");
  ASSERT_EQ(s[0].aspects.size(), 2u);
  EXPECT_EQ(s[0].aspects[0].term, "appetizers");
  EXPECT_EQ(s[0].aspects[1].term, "salads");
  EXPECT_EQ(s[0].aspects[1].from, 23u);
  EXPECT_EQ(s[0].aspects[1].to, 29u);
  EXPECT_EQ(s[0].aspects[0].polarity, Polarity::positive);
  EXPECT_EQ(s[1].aspects[0].polarity, Polarity::conflict);
  EXPECT_TRUE(s[2].aspects.empty());
  EXPECT_TRUE(s[3].aspects.empty());
}

TEST(SemevalXml, MalformedXmlReportsLine) {
  const std::string bad = "<sentences>\n<sentence id=\"1\">\n<text>hi</text>\n</sentences>\n";
  try {
    parse_semeval_xml(bad);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_GT(e.line(), 0u);
  }
}

TEST(SemevalXml, OffsetOutsideTextNamesSentence) {
  const std::string bad = R"(<sentences><sentence id="s77"><text>short</text><aspectTerms>
    <aspectTerm term="short" polarity="neutral" from="0" to="9"/></aspectTerms></sentence></sentences>)";
  try {
    parse_semeval_xml(bad);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("s77"), std::string::npos);
  }
}

TEST(SemevalXml, OffsetsAreCodePoints) {
  const std::string xml = R"(<sentences><sentence id="u"><text>Café crème was good</text><aspectTerms>
    <aspectTerm term="crème" polarity="positive" from="5" to="10"/></aspectTerms></sentence></sentences>)";
  const auto s = parse_semeval_xml(xml);
  ASSERT_EQ(s.size(), 1u);
  Vocabulary v;
  v.add_sentences(s);
  const auto ex = to_examples(s, v, 75);
  ASSERT_EQ(ex.size(), 1u);
  EXPECT_EQ(ex[0].aspect_first, 2u);
  EXPECT_EQ(v.word(ex[0].aspect_token_ids[0]), "crème");
}

TEST(Tsv, GroupsConsecutiveLinesAndRoundTrips) {
  const std::string tsv =
      "battery life is great but the screen dims\tbattery life\t0\t12\tpositive\n"
      "battery life is great but the screen dims\tscreen\t30\t36\tnegative\n"
      "a sentence with no aspect\n"
      "the keys are fine\tkeys\t4\t8\tneutral\n";
  const auto s = parse_tsv(tsv);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0].aspects.size(), 2u);
  EXPECT_TRUE(s[1].aspects.empty());
  EXPECT_EQ(write_tsv(s), tsv);

  Vocabulary v;
  v.add_sentences(s);
  EXPECT_EQ(to_examples(parse_tsv(write_tsv(s)), v, 75), to_examples(s, v, 75));
}

TEST(Tsv, BadLinesAreParseErrors) {
  try {
    parse_tsv("ok line\nfoo\tbar\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(parse_tsv("the cat\tcat\t4\tx\tpositive\n"), ParseError);
  EXPECT_THROW(parse_tsv("the cat\tcat\t4\t7\tmeh\n"), ParseError);
  EXPECT_THROW(parse_tsv("the cat\tdog\t4\t7\tpositive\n"), FormatError);
}

TEST(Dataset, ReadsBundledSyntheticFile) {
  const auto s = read_dataset(std::string(CAPSAR_DATA_DIR) + "/synthetic_train.tsv");
  ASSERT_EQ(s.size(), 20u);
  Vocabulary v;
  v.add_sentences(s);
  const auto ex = to_examples(s, v, 75);
  ASSERT_EQ(ex.size(), 20u);
  std::size_t per_class[3] = {0, 0, 0};
  for (const auto& e : ex) ++per_class[e.label];
  for (auto c : per_class) EXPECT_GE(c, 6u);
  EXPECT_THROW(read_dataset("/nonexistent/file.tsv"), Error);
}

// ---- tokenization ---------------------------------------------------------------

TEST(Tokenize, LowercasesAndDetachesPunctuation) {
  const auto t = tokenize("The FOOD, honestly (great)!  Wasn't it?");
  EXPECT_EQ(texts(t), (std::vector<std::string>{"the", "food", ",", "honestly", "(", "great", ")", "!", "wasn't",
                                                "it", "?"}));
  EXPECT_EQ(t[1].begin, 4u);
  EXPECT_EQ(t[1].end, 8u);
  EXPECT_EQ(t[2].begin, 8u);
  EXPECT_TRUE(tokenize("   ").empty());
}

TEST(Tokenize, Utf8Offsets) {
  EXPECT_EQ(utf8_byte_offset("añb", 0), 0u);
  EXPECT_EQ(utf8_byte_offset("añb", 2), 3u);
  EXPECT_EQ(utf8_byte_offset("añb", 3), 4u);
  EXPECT_THROW(utf8_byte_offset("ab", 3), ContractViolation);
}

// ---- vocabulary --------------------------------------------------------------------

TEST(Vocabulary, ReservedIndicesAndBijection) {
  Vocabulary v;
  EXPECT_EQ(v.size(), 2u);
  EXPECT_EQ(v.word(Vocabulary::kPad), "<pad>");
  EXPECT_EQ(v.word(Vocabulary::kUnk), "<unk>");
  EXPECT_EQ(v.add("food"), 2u);
  EXPECT_EQ(v.add("food"), 2u);
  EXPECT_EQ(v.add("service"), 3u);
  EXPECT_EQ(v.index_of("nope"), Vocabulary::kUnk);
  for (std::size_t i = 2; i < v.size(); ++i) EXPECT_EQ(v.index_of(v.word(i)), i);
  const auto copy = Vocabulary::from_words(v.words());
  EXPECT_EQ(copy.words(), v.words());
  EXPECT_THROW(Vocabulary::from_words({"a", "b"}), FormatError);
}

// ---- examples -------------------------------------------------------------------------

TEST(Examples, OnePerNonConflictAspect) {
  const auto s = parse_semeval_xml(kXml);
  Vocabulary v;
  v.add_sentences(s);
  IngestStats stats;
  const auto ex = to_examples(s, v, 75, &stats);
  ASSERT_EQ(ex.size(), 2u);
  EXPECT_EQ(ex[0].token_ids, ex[1].token_ids);
  EXPECT_EQ(ex[0].aspect_first, 3u);
  EXPECT_EQ(ex[1].aspect_first, 5u);
  EXPECT_EQ(stats.aspects, 3u);
  EXPECT_EQ(stats.conflict_dropped, 1u);
  EXPECT_EQ(stats.examples, 2u);
  EXPECT_EQ(stats.examples, stats.aspects - stats.conflict_dropped - stats.truncated_skipped);
}

TEST(Examples, MultiWordAspect) {
  const std::vector<RawSentence> s = {{"x", "i think the battery life is poor", {{"battery life", Polarity::negative, 12, 24}}}};
  Vocabulary v;
  v.add_sentences(s);
  const auto ex = to_examples(s, v, 75);
  ASSERT_EQ(ex.size(), 1u);
  EXPECT_EQ(ex[0].aspect_first, 4u);
  ASSERT_EQ(ex[0].aspect_token_ids.size(), 2u);
  EXPECT_EQ(v.word(ex[0].aspect_token_ids[1]), "life");
  EXPECT_EQ(ex[0].label, 0u);
  EXPECT_EQ(aspect_positions(s[0], s[0].aspects[0], 75), (std::vector<std::size_t>{3, 4}));
}

TEST(Examples, TruncationSkipsLateAspects) {
  const std::vector<RawSentence> s = {
      {"t", "one two three four five six", {{"six", Polarity::positive, 24, 27}, {"two", Polarity::neutral, 4, 7}}}};
  Vocabulary v;
  v.add_sentences(s);
  IngestStats stats;
  const auto ex = to_examples(s, v, 4, &stats);
  ASSERT_EQ(ex.size(), 1u);
  EXPECT_EQ(ex[0].length(), 4u);
  EXPECT_EQ(stats.truncated_skipped, 1u);
  EXPECT_TRUE(aspect_positions(s[0], s[0].aspects[0], 4).empty());
}

TEST(Examples, InvariantsOnBundledData) {
  const auto s = read_dataset(std::string(CAPSAR_DATA_DIR) + "/synthetic_train.tsv");
  Vocabulary v;
  v.add_sentences(s);
  for (const auto& e : to_examples(s, v, 75)) {
    EXPECT_GE(e.aspect_first, 1u);
    EXPECT_LE(e.aspect_first, e.length());
    EXPECT_LE(e.length(), 75u);
    EXPECT_LT(e.label, 3u);
    for (std::size_t i = 0; i < e.aspect_token_ids.size(); ++i) {
      EXPECT_EQ(e.aspect_token_ids[i], e.token_ids[e.aspect_first - 1 + i]);
    }
  }
}

// ---- embeddings -------------------------------------------------------------------------

TEST(Embeddings, CoverageHeaderAndRandomRows) {
  Vocabulary v;
  for (const char* w : {"food", "service", "price", "view", "noise"}) v.add(w);
  const std::string text =
      "3 2\n"
      "food 1 2\n"
      "unrelated 9 9\n"
      "service 3 4\n"
      "price -1 0.5\n";
  Rng rng(1);
  const auto t = load_embeddings(std::string_view(text), v, rng);
  EXPECT_EQ(t.covered, 3u);
  EXPECT_DOUBLE_EQ(t.coverage, 0.6);
  EXPECT_EQ(t.matrix.shape(), (Shape{7, 2}));
  EXPECT_EQ(t.matrix.at(2, 1), 2.0f);
  EXPECT_EQ(t.matrix.at(4, 0), -1.0f);
  EXPECT_EQ(t.matrix.at(0, 0), 0.0f);
  EXPECT_EQ(t.matrix.at(0, 1), 0.0f);
  for (std::size_t r : {std::size_t(1), std::size_t(5), std::size_t(6)}) {
    for (std::size_t c = 0; c < 2; ++c) {
      EXPECT_GE(t.matrix.at(r, c), -0.05f);
      EXPECT_LT(t.matrix.at(r, c), 0.05f);
      EXPECT_NE(t.matrix.at(r, c), 0.0f);
    }
  }
}

TEST(Embeddings, FirstDuplicateWinsAndDimensionErrorsNameLine) {
  Vocabulary v;
  v.add("food");
  Rng rng(2);
  const auto t = load_embeddings(std::string_view("food 1 1\nfood 2 2\n"), v, rng);
  EXPECT_EQ(t.matrix.at(2, 0), 1.0f);
  try {
    load_embeddings(std::string_view("food 1 1\nbar 1 2 3\n"), v, rng);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(load_embeddings(std::string_view("food 1 1\n"), v, rng, 3), FormatError);
}

TEST(Embeddings, DeterministicForSeed) {
  Vocabulary v;
  v.add("a");
  v.add("b");
  Rng r1(5), r2(5);
  EXPECT_EQ(random_embeddings(v, 4, r1).matrix, random_embeddings(v, 4, r2).matrix);
}

TEST(AspectEmbedding, MeanOfRows) {
  auto table = Tensor<float>::matrix({{0, 0}, {9, 9}, {1, 2}, {3, 6}});
  Example e;
  e.aspect_token_ids = {2};
  EXPECT_EQ(aspect_embedding(e, table), Tensor<float>::vector({1, 2}));
  e.aspect_token_ids = {2, 3};
  EXPECT_EQ(aspect_embedding(e, table), Tensor<float>::vector({2, 4}));
  e.aspect_token_ids = {1, 2};
  EXPECT_EQ(aspect_embedding(e, table), Tensor<float>::vector({5, 5.5}));
  e.aspect_token_ids.clear();
  EXPECT_THROW(aspect_embedding(e, table), ContractViolation);
}

// ---- batching --------------------------------------------------------------------------

namespace {

std::vector<Example> numbered_examples(std::size_t n) {
  std::vector<Example> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].token_ids.assign(1 + i % 5, 2 + i);
    out[i].sentence_index = i;
  }
  return out;
}

}  // namespace

TEST(Batches, SizesAndPadding) {
  const auto ex = numbered_examples(130);
  Rng rng(3);
  const auto b = make_batches(ex, 64, 75, rng, false);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 64u);
  EXPECT_EQ(b[1].size(), 64u);
  EXPECT_EQ(b[2].size(), 2u);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(b[0].example_indices[i], i);
  const auto row = b[0].row(3);
  EXPECT_EQ(b[0].lengths[3], 4u);
  EXPECT_EQ(row[3], 5u);
  EXPECT_EQ(row[4], Vocabulary::kPad);
  EXPECT_EQ(row[74], Vocabulary::kPad);
  EXPECT_THROW(make_batches(ex, 0, 75, rng, false), ConfigError);
}

TEST(Batches, SeededShuffleIsDeterministic) {
  const auto ex = numbered_examples(40);
  Rng a(9), b(9);
  const auto x = make_batches(ex, 8, 10, a, true);
  const auto y = make_batches(ex, 8, 10, b, true);
  ASSERT_EQ(x.size(), y.size());
  bool moved = false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(x[i].example_indices, y[i].example_indices);
    EXPECT_EQ(x[i].tokens, y[i].tokens);
    for (std::size_t j = 0; j < x[i].size(); ++j) moved = moved || x[i].example_indices[j] != i * 8 + j;
  }
  EXPECT_TRUE(moved);
}
