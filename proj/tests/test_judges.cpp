#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"
#include "stlr/judges.hpp"

using namespace stlr;
using stlr::testing::temp_dir;

namespace {

struct JudgeFixture {
  Vocabulary vocab;
  std::vector<StyleCaption> raw_captions;
  std::vector<StyleCaption> target;  // negative group
  std::vector<std::string> others;   // endings plus other captions
  std::vector<StoryExample> train, test;
};

const JudgeFixture& fixture() {
  static const JudgeFixture f = [] {
    JudgeFixture f;
    auto spec = default_synthetic_spec(41);
    spec.n_stories = 400;
    spec.n_captions_per_style = 40;
    const auto syn = generate_synthetic(spec);
    std::vector<std::string> texts;
    for (const auto& s : syn.stories)
      for (const auto& x : s.sentences) texts.push_back(x);
    for (const auto& c : syn.captions) texts.push_back(c.text);
    f.vocab = build_vocab(texts, 1, 512);
    f.raw_captions = syn.captions;
    f.target = group_captions(syn.captions, default_grouping()).captions;
    std::set<std::string> negative;
    for (const auto& [g, members] : default_grouping())
      for (const auto& m : members) negative.insert(m);
    for (const auto& c : syn.captions)
      if (!negative.count(c.style)) f.others.push_back(c.text);
    const auto ex = split_stories(syn.stories);
    for (std::size_t i = 0; i < 150; ++i) f.others.push_back(ex[i].ending);
    const auto sp = make_splits(ex, {0.75, 0.0, 0.25}, 2);
    f.train = sp.train;
    f.test = sp.test;
    return f;
  }();
  return f;
}

JudgeConfig quick_judge() {
  JudgeConfig jc;
  jc.cnn.embed_dim = 12;
  jc.cnn.filters = 16;
  jc.cnn.seed = 3;
  jc.train.epochs = 8;
  jc.train.lr = 5e-3;
  jc.train.seed = 4;
  return jc;
}

const std::pair<StyleJudge, JudgeTraining>& style_judge() {
  static const auto r = train_style_judge(fixture().vocab, fixture().target, fixture().others, "negative", quick_judge());
  return r;
}

const std::pair<ClozeJudge, JudgeTraining>& cloze_judge() {
  static const auto r = [] {
    JudgeConfig jc = quick_judge();
    jc.train.epochs = 12;
    return train_cloze_judge(fixture().vocab, fixture().train, jc, 9);
  }();
  return r;
}

std::set<std::set<std::size_t>> partition(const std::vector<int>& groups) {
  std::map<int, std::set<std::size_t>> by;
  for (std::size_t i = 0; i < groups.size(); ++i) by[groups[i]].insert(i);
  std::set<std::set<std::size_t>> out;
  for (auto& [g, s] : by) out.insert(s);
  return out;
}

}  // namespace

TEST(StyleJudge, SeparatesTargetStyle) {
  const auto& [judge, tr] = style_judge();
  EXPECT_GE(tr.metrics.heldout_accuracy, 0.95);
  EXPECT_TRUE(tr.warnings.empty());
  const auto p = judge.probs({"tom finally fixed the gloomy car .", "tom finally fixed the car ."});
  EXPECT_GT(p[0], 0.9);
  EXPECT_LT(p[1], 0.5);
  EXPECT_EQ(judge.flags({"what a rotten cake , so awful ."}), std::vector<bool>{true});
}

TEST(StyleJudge, TrainingIsDeterministic) {
  const auto a = train_style_judge(fixture().vocab, fixture().target, fixture().others, "negative", quick_judge());
  EXPECT_EQ(textcnn_hash(a.first.model), textcnn_hash(style_judge().first.model));
}

TEST(StyleJudge, RequiresTwentyPerClassAndWarnsOnImbalance) {
  const auto& f = fixture();
  std::vector<StyleCaption> few(f.target.begin(), f.target.begin() + 19);
  EXPECT_THROW(train_style_judge(f.vocab, few, f.others, "negative", quick_judge()), DataError);
  std::vector<StyleCaption> twenty(f.target.begin(), f.target.begin() + 20);
  std::vector<std::string> many;
  while (many.size() <= 2001) many.insert(many.end(), f.others.begin(), f.others.end());
  JudgeConfig jc = quick_judge();
  jc.train.epochs = 1;
  const auto r = train_style_judge(f.vocab, twenty, many, "negative", jc);
  ASSERT_EQ(r.second.warnings.size(), 1u);
  jc.architecture = "bilstm";
  EXPECT_THROW(train_style_judge(f.vocab, f.target, f.others, "negative", jc), ConfigError);
}

TEST(StyleJudge, EmptyEndingIsScored) {
  const auto p = style_judge().first.probs({""});
  ASSERT_EQ(p.size(), 1u);
  EXPECT_TRUE(std::isfinite(p[0]));
}

TEST(ClozeJudge, InputHasExactlyOneSeparator) {
  const auto& v = fixture().vocab;
  const std::array<std::string, 4> ctx{"a b", "c", "d", "e"};
  const auto ids = cloze_input(v, ctx, "tom sang the song .");
  EXPECT_EQ(std::count(ids.begin(), ids.end(), kSep), 1);
  EXPECT_EQ(ids[5], kSep);
  const std::array<std::string, 4> bad{"a <sep> b", "c", "d", "e"};
  const auto ids2 = cloze_input(v, bad, "x");  // special strings in text map to UNK
  EXPECT_EQ(std::count(ids2.begin(), ids2.end(), kSep), 1);
}

TEST(ClozeJudge, PrefersTrueEndings) {
  const auto& [judge, tr] = cloze_judge();
  EXPECT_GE(tr.metrics.heldout_accuracy, 0.8);
  const auto& test = fixture().test;
  const auto partner = mismatched_partners(test, 77);
  std::vector<std::string> gold, wrong;
  for (std::size_t i = 0; i < test.size(); ++i) {
    gold.push_back(test[i].ending);
    wrong.push_back(test[partner[i]].ending);
  }
  const auto sg = judge.scores(test, gold), sw = judge.scores(test, wrong);
  std::size_t wins = 0;
  for (std::size_t i = 0; i < test.size(); ++i) wins += sg[i] > sw[i];
  EXPECT_GE(static_cast<double>(wins) / static_cast<double>(test.size()), 0.7);
}

TEST(ClozeJudge, PartnersAreOtherStoriesWithOtherText) {
  const auto& xs = fixture().train;
  const auto p = mismatched_partners(xs, 3);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    EXPECT_NE(p[i], i);
    EXPECT_NE(xs[p[i]].ending, xs[i].ending);
  }
  EXPECT_THROW(mismatched_partners({xs[0]}, 1), DataError);
}

TEST(StyleEmbedder, ShapeAndDeterminism) {
  const auto& f = fixture();
  JudgeConfig jc = quick_judge();
  jc.train.epochs = 4;
  const auto a = train_style_embedder(f.vocab, f.raw_captions, jc);
  EXPECT_EQ(a.styles.size(), 9u);
  EXPECT_TRUE(std::is_sorted(a.styles.begin(), a.styles.end()));
  EXPECT_EQ(a.embeddings.rows, 9u);
  EXPECT_EQ(a.embeddings.cols, jc.cnn.feature_dim());
  const auto b = train_style_embedder(f.vocab, f.raw_captions, jc);
  EXPECT_TRUE(bit_identical(a.embeddings, b.embeddings));
  EXPECT_THROW(train_style_embedder(f.vocab, {{"x y", "only"}}, jc), DataError);
}

TEST(StyleEmbedder, SharedLexiconPersonasAreClosest) {
  // Half of the gloomy captions are relabelled as a twin persona.
  const auto& f = fixture();
  std::vector<StyleCaption> caps;
  std::size_t k = 0;
  for (auto c : f.raw_captions) {
    if (c.style == "gloomy" && (k++ % 2)) c.style = "gloomy-twin";
    caps.push_back(c);
  }
  JudgeConfig jc = quick_judge();
  jc.train.epochs = 6;
  const auto e = train_style_embedder(f.vocab, caps, jc, StylePooling::caption_mean);
  const auto at = [&](const std::string& s) {
    return static_cast<std::size_t>(std::find(e.styles.begin(), e.styles.end(), s) - e.styles.begin());
  };
  const std::size_t g = at("gloomy"), t = at("gloomy-twin");
  const double twin = vector_distance(e.embeddings.row(g), e.embeddings.row(t), Distance::cosine);
  for (std::size_t i = 0; i < e.styles.size(); ++i) {
    if (i == g || i == t) continue;
    EXPECT_LT(twin, vector_distance(e.embeddings.row(g), e.embeddings.row(i), Distance::cosine)) << e.styles[i];
  }
  const auto r = cluster_styles(e.embeddings, e.styles.size() - 1);
  EXPECT_EQ(r.groups[g], r.groups[t]);
}

TEST(Clustering, IdenticalRowsMergeAtZero) {
  Matrix<double> m(3, 2);
  m.data = {1, 0, 1, 0, 0, 1};
  const auto r = cluster_styles(m, 2);
  EXPECT_DOUBLE_EQ(r.merges[0].height, 0.0);
  EXPECT_EQ(r.merges[0].a, 0u);
  EXPECT_EQ(r.merges[0].b, 1u);
  EXPECT_EQ(r.groups, (std::vector<int>{0, 0, 1}));
  EXPECT_EQ(r.merges[1].a, 2u);
  EXPECT_EQ(r.merges[1].b, 3u);
  EXPECT_EQ(r.merges[1].size, 3u);
}

TEST(Clustering, KEqualsNGivesSingletonsAndBadKThrows) {
  Rng rng(5);
  const auto m = stlr::testing::random_matrix(6, 4, rng);
  EXPECT_EQ(cluster_styles(m, 6).groups, (std::vector<int>{0, 1, 2, 3, 4, 5}));
  EXPECT_EQ(partition(cluster_styles(m, 1).groups).size(), 1u);
  EXPECT_THROW(cluster_styles(m, 7), ConfigError);
  EXPECT_THROW(cluster_styles(m, 0), ConfigError);
}

TEST(Clustering, RecoversPlantedBlocks) {
  Rng rng(6);
  Matrix<double> m(12, 8);
  std::vector<int> truth;
  for (std::size_t i = 0; i < 12; ++i) {
    const std::size_t block = i % 4;
    truth.push_back(static_cast<int>(block));
    for (std::size_t c = 0; c < 8; ++c) m(i, c) = (c / 2 == block ? 1.0 : 0.0) + 0.05 * rng.normal();
  }
  for (auto linkage : {Linkage::average, Linkage::single, Linkage::complete})
    for (auto distance : {Distance::cosine, Distance::euclidean})
      EXPECT_EQ(partition(cluster_styles(m, 4, linkage, distance).groups), partition(truth));
}

TEST(Clustering, PermutationEquivariant) {
  Rng rng(7);
  const auto m = stlr::testing::random_matrix(8, 5, rng);
  std::vector<std::size_t> perm{3, 7, 0, 5, 1, 6, 2, 4};
  Matrix<double> pm(8, 5);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t c = 0; c < 5; ++c) pm(i, c) = m(perm[i], c);
  for (std::size_t k = 1; k <= 8; ++k) {
    const auto a = cluster_styles(m, k).groups;
    const auto b = cluster_styles(pm, k).groups;
    std::vector<int> back(8);
    for (std::size_t i = 0; i < 8; ++i) back[perm[i]] = b[i];
    EXPECT_EQ(partition(a), partition(back)) << k;
  }
}

TEST(Clustering, AverageHeightsMatchBruteForce) {
  // Each merge height equals the mean pairwise distance between the two
  // clusters' original members.
  Rng rng(8);
  const auto m = stlr::testing::random_matrix(7, 3, rng);
  const auto merges = agglomerate(m, Linkage::average, Distance::euclidean);
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < 7; ++i) members.push_back({i});
  for (const auto& mg : merges) {
    double s = 0.0;
    for (auto i : members[mg.a])
      for (auto j : members[mg.b]) s += vector_distance(m.row(i), m.row(j), Distance::euclidean);
    EXPECT_NEAR(mg.height, s / static_cast<double>(members[mg.a].size() * members[mg.b].size()), 1e-12);
    auto joined = members[mg.a];
    joined.insert(joined.end(), members[mg.b].begin(), members[mg.b].end());
    members.push_back(joined);
  }
  for (std::size_t i = 1; i < merges.size(); ++i) EXPECT_GE(merges[i].height, merges[i - 1].height - 1e-12);
}

TEST(Clustering, HeightCutAndDendrogram) {
  Matrix<double> m(4, 1);
  m.data = {0.0, 0.1, 5.0, 5.3};
  const auto r = cluster_styles_at_height(m, 1.0, Linkage::single, Distance::euclidean);
  EXPECT_EQ(r.n_groups, 2u);
  EXPECT_EQ(r.groups, (std::vector<int>{0, 0, 1, 1}));
  const auto j = dendrogram_json(r, {"a", "b", "c", "d"});
  EXPECT_EQ(j.at("merges").size(), 3u);
  EXPECT_EQ(j.at("groups").at("c").get<int>(), 1);
  EXPECT_EQ(parse_linkage("complete"), Linkage::complete);
  EXPECT_THROW(parse_distance("manhattan"), ConfigError);
}

TEST(JudgeIo, RoundTrip) {
  const auto dir = temp_dir("judge_io");
  const auto& sj = style_judge().first;
  save_style_judge((dir / "style").string(), sj);
  const auto sj2 = load_style_judge((dir / "style").string());
  const std::vector<std::string> probe{"anna sang the dreary song .", "what a calm boat , so serene ."};
  EXPECT_EQ(sj.probs(probe), sj2.probs(probe));
  EXPECT_EQ(sj2.style, "negative");
  const auto& cj = cloze_judge().first;
  save_cloze_judge((dir / "cloze").string(), cj);
  const auto cj2 = load_cloze_judge((dir / "cloze").string());
  const std::vector<StoryExample> few(fixture().test.begin(), fixture().test.begin() + 5);
  std::vector<std::string> endings;
  for (const auto& x : few) endings.push_back(x.ending);
  EXPECT_EQ(cj.scores(few, endings), cj2.scores(few, endings));
  EXPECT_THROW(load_style_judge((dir / "cloze").string()), DataError);
}
