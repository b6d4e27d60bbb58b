#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "stlr/corpus.hpp"
#include "stlr/textpipe.hpp"
#include "test_util.hpp"

using namespace stlr;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

StoryRecord story(const std::string& tag) {
  StoryRecord r;
  for (int i = 0; i < 5; ++i) r.sentences[static_cast<std::size_t>(i)] = tag + " sentence " + std::to_string(i) + " .";
  return r;
}

}  // namespace

TEST(Corpus, LoadsJsonlInOrder) {
  std::istringstream in(
      R"({"sentences":["a","b","c","d","e"]})"
      "\n"
      R"({"sentences":["f","g","h","i","j"]})"
      "\n"
      R"({"sentences":[" k ","l","m","n","o"]})"
      "\n");
  const auto rs = parse_story_corpus(in, StoryFormat::jsonl);
  ASSERT_EQ(rs.size(), 3u);
  EXPECT_EQ(rs[0].sentences[0], "a");
  EXPECT_EQ(rs[1].sentences[4], "j");
  EXPECT_EQ(rs[2].sentences[0], "k");
}

TEST(Corpus, WrongSentenceCountNamesLine) {
  std::istringstream in(R"({"sentences":["a","b","c","d"]})");
  try {
    parse_story_corpus(in, StoryFormat::jsonl);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
  }
}

TEST(Corpus, MalformedJsonReportsLine) {
  std::istringstream in("{\"sentences\":[\"a\",\"b\",\"c\",\"d\",\"e\"]}\n{oops\n");
  try {
    parse_story_corpus(in, StoryFormat::jsonl);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Corpus, EmptySentenceRejected) {
  std::istringstream in(R"({"sentences":["a","  ","c","d","e"]})");
  EXPECT_THROW(parse_story_corpus(in, StoryFormat::jsonl), DataError);
}

TEST(Corpus, CsvFiveColumnsAndRocHeader) {
  std::istringstream plain("a,b,c,d,e\n\"x, y\",b,c,d,\"he said \"\"hi\"\"\"\n");
  const auto rs = parse_story_corpus(plain, StoryFormat::csv5);
  ASSERT_EQ(rs.size(), 2u);
  EXPECT_EQ(rs[1].sentences[0], "x, y");
  EXPECT_EQ(rs[1].sentences[4], "he said \"hi\"");

  std::istringstream roc("storyid,storytitle,sentence1,sentence2,sentence3,sentence4,sentence5\n"
                         "id1,title,s1,s2,s3,s4,s5\n");
  const auto rr = parse_story_corpus(roc, StoryFormat::csv5);
  ASSERT_EQ(rr.size(), 1u);
  EXPECT_EQ(rr[0].sentences[0], "s1");
  EXPECT_EQ(rr[0].sentences[4], "s5");
}

TEST(Corpus, JsonlRoundTripIsByteIdentical) {
  const auto dir = stlr::testing::temp_dir("corpus_roundtrip");
  const auto syn = generate_synthetic(default_synthetic_spec(3));
  write_story_corpus((dir / "a.jsonl").string(), syn.stories);
  const auto loaded = load_story_corpus((dir / "a.jsonl").string(), StoryFormat::jsonl);
  EXPECT_EQ(loaded, syn.stories);
  write_story_corpus((dir / "b.jsonl").string(), loaded);
  EXPECT_EQ(read_file(dir / "a.jsonl"), read_file(dir / "b.jsonl"));
}

TEST(Corpus, SplitStoryPartitions) {
  const StoryRecord r = story("x");
  const StoryExample ex = split_story(r);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(ex.context[i], r.sentences[i]);
  EXPECT_EQ(ex.ending, r.sentences[4]);
  EXPECT_EQ(join_story(ex), r);
  const auto syn = generate_synthetic(default_synthetic_spec(4));
  const auto exs = split_stories(syn.stories);
  ASSERT_EQ(exs.size(), syn.stories.size());
  for (std::size_t i = 0; i < exs.size(); ++i) EXPECT_EQ(join_story(exs[i]), syn.stories[i]);
}

TEST(Corpus, StyleGroupingFiltersAndRelabels) {
  const std::vector<StyleCaption> raw{{"one", "gloomy"}, {"two", "happy"}, {"three", "irritable"}};
  const auto res = group_captions(raw, {{"neg", {"gloomy", "irritable"}}});
  ASSERT_EQ(res.captions.size(), 2u);
  EXPECT_EQ(res.dropped, 1u);
  for (const auto& c : res.captions) EXPECT_EQ(c.style, "neg");
  EXPECT_THROW(group_captions(raw, {{"neg", {"unknown"}}}), DataError);
  const auto ident = group_captions(raw, {{"gloomy", {"gloomy"}}, {"happy", {"happy"}}, {"irritable", {"irritable"}}});
  EXPECT_EQ(ident.captions.size(), raw.size());
}

TEST(Corpus, CaptionJsonlParsing) {
  std::istringstream in("{\"text\":\"so gloomy .\",\"persona\":\"gloomy\"}\n{\"text\":\"x\"}\n");
  EXPECT_THROW(parse_caption_jsonl(in), DataError);
}

TEST(Corpus, SyntheticIsDeterministic) {
  const auto dir = stlr::testing::temp_dir("corpus_det");
  const auto a = generate_synthetic(default_synthetic_spec(11));
  const auto b = generate_synthetic(default_synthetic_spec(11));
  write_story_corpus((dir / "a.jsonl").string(), a.stories);
  write_story_corpus((dir / "b.jsonl").string(), b.stories);
  write_captions((dir / "a.cap").string(), a.captions);
  write_captions((dir / "b.cap").string(), b.captions);
  EXPECT_EQ(read_file(dir / "a.jsonl"), read_file(dir / "b.jsonl"));
  EXPECT_EQ(read_file(dir / "a.cap"), read_file(dir / "b.cap"));
  const auto c = generate_synthetic(default_synthetic_spec(12));
  EXPECT_NE(a.stories, c.stories);
}

TEST(Corpus, SyntheticSizes) {
  auto spec = default_synthetic_spec(1);
  spec.n_stories = 100;
  spec.n_captions_per_style = 7;
  const auto syn = generate_synthetic(spec);
  EXPECT_EQ(syn.stories.size(), 100u);
  EXPECT_EQ(syn.captions.size(), 7u * spec.style_lexicons.size());
  for (const auto& s : syn.stories)
    for (const auto& sent : s.sentences) EXPECT_FALSE(sent.empty());
}

// Exhaustive scan: every caption carries a token of its own style, stories
// use only base vocabulary, and grouped "negative" captions carry a token
// from the union of negative lexicons.
TEST(Corpus, SyntheticLexiconContainment) {
  const auto spec = default_synthetic_spec(5);
  const auto syn = generate_synthetic(spec);
  for (const auto& c : syn.captions) {
    const auto toks = tokenize(c.text);
    const auto& lex = spec.style_lexicons.at(c.style);
    EXPECT_TRUE(std::any_of(toks.begin(), toks.end(),
                            [&](const std::string& t) { return std::find(lex.begin(), lex.end(), t) != lex.end(); }))
        << c.text;
  }
  const auto base = synthetic_base_vocab(spec);
  const std::set<std::string> base_set(base.begin(), base.end());
  for (const auto& s : syn.stories)
    for (const auto& sent : s.sentences)
      for (const auto& t : tokenize(sent)) EXPECT_TRUE(base_set.count(t)) << t;

  const auto grouping = default_grouping();
  const auto grouped = group_captions(syn.captions, grouping);
  std::set<std::string> neg;
  for (const auto& p : grouping.at("negative"))
    for (const auto& t : spec.style_lexicons.at(p)) neg.insert(t);
  ASSERT_FALSE(grouped.captions.empty());
  for (const auto& c : grouped.captions) {
    EXPECT_EQ(c.style, "negative");
    const auto toks = tokenize(c.text);
    EXPECT_TRUE(std::any_of(toks.begin(), toks.end(), [&](const std::string& t) { return neg.count(t) > 0; }));
  }
}

TEST(Corpus, SyntheticRejectsOverlappingLexicons) {
  auto spec = default_synthetic_spec(1);
  spec.style_lexicons["peaceful"].push_back("gloomy");
  EXPECT_THROW(generate_synthetic(spec), ConfigError);
  auto spec2 = default_synthetic_spec(1);
  spec2.style_lexicons["peaceful"].push_back("car");
  EXPECT_THROW(generate_synthetic(spec2), ConfigError);
}

TEST(Corpus, SplitsPartitionDeterministically) {
  std::vector<int> items(103);
  for (int i = 0; i < 103; ++i) items[static_cast<std::size_t>(i)] = i;
  const auto all_train = make_splits(items, {1.0, 0.0, 0.0}, 3);
  EXPECT_EQ(all_train.train.size(), items.size());
  EXPECT_TRUE(all_train.val.empty() && all_train.test.empty());

  const auto s = make_splits(items, {0.8, 0.1, 0.1}, 9);
  std::vector<int> uni;
  for (const auto* part : {&s.train, &s.val, &s.test}) uni.insert(uni.end(), part->begin(), part->end());
  std::sort(uni.begin(), uni.end());
  EXPECT_EQ(uni, items);
  const auto s2 = make_splits(items, {0.8, 0.1, 0.1}, 9);
  EXPECT_EQ(s.train, s2.train);
  EXPECT_EQ(s.test, s2.test);
  EXPECT_THROW(make_splits(items, {0.8, 0.1, 0.2}, 9), ConfigError);
}
