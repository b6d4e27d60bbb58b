#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "experiment_fixtures.hpp"
#include "schema_check.hpp"
#include "test_util.hpp"
#include "stlr/experiment.hpp"

using namespace stlr;
using nlohmann::json;
using stlr::testing::slurp;
using stlr::testing::tiny_json;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(std::uint64_t seed = 3) { return experiment_config_from_json(tiny_json(seed)); }

std::vector<std::string> actions(const std::vector<StagePlan>& plan) {
  std::vector<std::string> out;
  for (const auto& p : plan) out.push_back(p.stage + ":" + p.action);
  return out;
}

// One full run shared by the read-only tests below.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = stlr::testing::temp_dir("pipeline").string();
    result_ = cmd_run(tiny(), dir_);
  }
  static std::string dir_;
  static RunResult result_;
};

std::string Pipeline::dir_;
RunResult Pipeline::result_;

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(ExperimentConfig, ProfilesCarryTheirScale) {
  const auto desk = profile_config("desk");
  EXPECT_EQ(desk.model.d_model, 64u);
  EXPECT_EQ(desk.data.synthetic.n_stories, 1500u);
  const auto paper = profile_config("paper");
  EXPECT_EQ(paper.model.d_model, 768u);
  EXPECT_EQ(paper.model.n_enc_layers, 12u);
  EXPECT_EQ(paper.model.n_heads, 12u);
  EXPECT_EQ(paper.adapter.bottleneck, 48u);
  EXPECT_EQ(paper.phase1.max_target_len, 128u);
  EXPECT_EQ(paper.phase1.batch_size, 16u);
  EXPECT_DOUBLE_EQ(paper.phase1.adam.lr, 5e-5);
  EXPECT_EQ(paper.phase1.epochs, 3u);
  EXPECT_EQ(paper.phase2.stop, StopRule::plateau);
  EXPECT_EQ(paper.phase3.epochs, 1u);
  EXPECT_THROW(profile_config("laptop"), ConfigError);
  EXPECT_THROW(experiment_config_from_json({{"profile", "laptop"}}), ConfigError);
}

TEST(ExperimentConfig, FileKeysOverrideProfile) {
  const auto c = tiny();
  EXPECT_EQ(c.model.d_model, 16u);
  EXPECT_EQ(c.model.max_positions, 64u);  // still the desk default
  EXPECT_EQ(c.phase2.stop, StopRule::fixed);
  EXPECT_EQ(c.judges.style.train.epochs, 1u);
  EXPECT_EQ(c.judges.cloze.corrupted_negatives, 1.0);
}

TEST(ExperimentConfig, UnknownKeysAreRejected) {
  auto j = tiny_json();
  j["learning_rate"] = 0.1;
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
  j = tiny_json();
  j["model"]["d_modle"] = 16;
  try {
    experiment_config_from_json(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/model/d_modle"), std::string::npos);
  }
  // lexicons and grouping are free-form maps
  j = tiny_json();
  j["data"]["grouping"] = {{"negative", {"gloomy", "boyish"}}};
  EXPECT_NO_THROW(experiment_config_from_json(j));
}

TEST(ExperimentConfig, TypeMismatchesAreRejected) {
  auto j = tiny_json();
  j["model"]["d_model"] = "sixteen";
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
  j = tiny_json();
  j["phase1"] = 3;
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
  j = tiny_json();
  j["phase2"]["groups"] = {"encoder"};  // phase 2 may only train adapters
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
}

TEST(ExperimentConfig, NestedSeedsFollowTheTopLevelSeed) {
  const auto c = tiny(5);
  EXPECT_EQ(c.phase1.seed, 5u);
  EXPECT_EQ(c.data.synthetic.seed, 5u);
  EXPECT_EQ(c.model.seed, derive_seed(5, 3));
  auto j = tiny_json(5);
  j["model"]["seed"] = 999;
  EXPECT_THROW(experiment_config_from_json(j), ConfigError);
  j["model"]["seed"] = derive_seed(5, 3);
  EXPECT_NO_THROW(experiment_config_from_json(j));
}

TEST(ExperimentConfig, JsonRoundTripAndHash) {
  const auto c = tiny();
  const json j = c;
  const auto back = j.get<ExperimentConfig>();
  EXPECT_EQ(json(back).dump(), j.dump());
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_NE(config_hash(tiny(4)), config_hash(c));
}

TEST(ExperimentConfig, LoadResolvesCorpusPathsAgainstTheConfigFile) {
  const auto d = stlr::testing::temp_dir("cfgpaths");
  fs::create_directories(d / "sub");
  auto j = tiny_json();
  j["data"] = {{"source", "files"}, {"stories", "s.jsonl"}, {"captions", "../c.jsonl"}};
  std::ofstream(d / "sub/exp.json") << j.dump();
  const auto c = load_experiment_config((d / "sub/exp.json").string());
  EXPECT_EQ(c.data.stories, (d / "sub/s.jsonl").string());
  EXPECT_EQ(c.data.captions, (d / "c.jsonl").string());
  EXPECT_THROW(load_experiment_config((d / "missing.json").string()), ConfigError);
}

TEST(ExperimentConfig, BundledConfigParses) {
  const auto c = load_experiment_config(std::string(STLR_SOURCE_DIR) + "/configs/synthetic.json");
  EXPECT_EQ(c.name, "synthetic");
  EXPECT_EQ(c.adapter.variant, AdapterVariant::plain);
  EXPECT_EQ(c.forgetting_multiplier, 5u);
}

// ---------------------------------------------------------------------------
// Stage graph

TEST(StageGraph, DependenciesAreTransitive) {
  const auto all = with_dependencies({});
  EXPECT_EQ(all.size(), stage_names().size());
  const auto p3 = with_dependencies({"phase3"});
  EXPECT_EQ(p3, (std::set<std::string>{"prepare", "phase1", "phase2", "phase3"}));
  const auto ev = with_dependencies({"evaluate"});
  EXPECT_EQ(ev.size(), stage_names().size() - 1);
  EXPECT_FALSE(ev.count("report"));
  EXPECT_THROW(with_dependencies({"phase4"}), ConfigError);
}

TEST(StageGraph, KeysTrackOnlyRelevantSections) {
  const auto a = tiny();
  auto b = a;
  b.phase3.adam.lr *= 2;
  EXPECT_EQ(stage_key(a, "phase1"), stage_key(b, "phase1"));
  EXPECT_EQ(stage_key(a, "phase2"), stage_key(b, "phase2"));
  EXPECT_EQ(stage_key(a, "judges"), stage_key(b, "judges"));
  EXPECT_NE(stage_key(a, "phase3"), stage_key(b, "phase3"));
  EXPECT_NE(stage_key(a, "evaluate"), stage_key(b, "evaluate"));
  auto c = a;
  c.data.synthetic.n_stories += 1;
  for (const auto& s : stage_names()) EXPECT_NE(stage_key(a, s), stage_key(c, s)) << s;
}

TEST(StageGraph, DryRunHasNoSideEffects) {
  const auto d = stlr::testing::temp_dir("dryrun") / "exp";
  RunOptions opt;
  opt.dry_run = true;
  const auto r = cmd_run(tiny(), d.string(), opt);
  EXPECT_FALSE(fs::exists(d));
  EXPECT_TRUE(r.ran.empty());
  ASSERT_EQ(r.plan.size(), stage_names().size());
  for (const auto& p : r.plan) EXPECT_EQ(p.action, "run");
  opt.targets = {"phase1"};
  const auto r2 = cmd_run(tiny(), d.string(), opt);
  EXPECT_EQ(actions(r2.plan)[1], "phase1:run");
  EXPECT_EQ(actions(r2.plan)[2], "phase2:skip");
  EXPECT_FALSE(fs::exists(d));
}

TEST(Forgetting, NeedsAJudgeAndTwoSnapshots) {
  Vocabulary v = build_vocab({"a b c"}, 1, 64);
  ModelConfig mc;
  mc.vocab_size = v.size();
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.ffn_dim = 8;
  mc.n_enc_layers = mc.n_dec_layers = 1;
  const auto m = init_model<float>(mc);
  StoryExample ex{{"a", "b", "c", "a"}, "b"};
  const StyleJudge* none = nullptr;
  EXPECT_THROW(monitor_forgetting({{0, m}, {1, m}}, none, v, {ex}, DecodeSettings{}), ConfigError);
  TextCNNConfig cc;
  cc.vocab_size = v.size();
  const StyleJudge sj{"x", 0.5, v, init_textcnn<float>(cc)};
  EXPECT_THROW(monitor_forgetting({{0, m}}, &sj, v, {ex}, DecodeSettings{}), DataError);
  const auto pts = monitor_forgetting({{0, m}, {5, m}}, &sj, v, {ex}, DecodeSettings{});
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[1].step, 5u);
  EXPECT_EQ(pts[0].ris, pts[1].ris);
  EXPECT_EQ(forgetting_csv(pts).substr(0, 9), "step,ris\n");
}

// ---------------------------------------------------------------------------
// End to end

TEST_F(Pipeline, CompletesAndWritesEveryArtifact) {
  EXPECT_TRUE(result_.complete);
  EXPECT_EQ(result_.ran, stage_names());
  const fs::path d = dir_;
  for (const char* f : {"manifest.json", "data/vocab.json", "data/stories_test.jsonl", "phase1/model", "phase1/loss.csv",
                        "phase2/adapter", "phase3/model", "phase3/adapter", "snapshots/index.json",
                        "baselines/info.json", "baselines/disc", "judges/style", "judges/cloze",
                        "eval/reports.json", "eval/endings/llr.txt", "forgetting.csv", "report.json", "table.csv",
                        "table.md"})
    EXPECT_TRUE(fs::exists(d / f)) << f;
  const auto m = read_manifest(dir_);
  ASSERT_TRUE(m);
  EXPECT_EQ(m->done.size(), stage_names().size());
  EXPECT_EQ(m->config_hash, config_hash(tiny()));
  EXPECT_EQ(m->artifacts["phase1"], bundle_hash((d / "phase1/model").string()));
}

TEST_F(Pipeline, ReportValidatesAgainstSchema) {
  const json r = json::parse(slurp(fs::path(dir_) / "report.json"));
  std::vector<std::string> errs;
  stlr::testing::validate_schema(r, stlr::testing::load_schema("experiment_report.schema.json"), "", errs);
  EXPECT_TRUE(errs.empty()) << errs.front();
  std::vector<std::string> models;
  for (const auto& x : r["reports"]) models.push_back(x["model"]);
  EXPECT_EQ(models, (std::vector<std::string>{"encoder-decoder", "s2s+lm", "disc", "stage2", "llr"}));
  EXPECT_TRUE(r["reports"][0]["rbae"].is_null());
  EXPECT_FALSE(r["reports"][4]["rbae"].is_null());

  json broken = r;
  broken["reports"][1].erase("ris");
  broken["forgetting"]["points"][0]["extra"] = 1;
  errs.clear();
  stlr::testing::validate_schema(broken, stlr::testing::load_schema("experiment_report.schema.json"), "", errs);
  EXPECT_EQ(errs.size(), 2u);
}

TEST_F(Pipeline, ForgettingCurveCoversTheExtendedBudget) {
  const auto idx = json::parse(slurp(fs::path(dir_) / "snapshots/index.json"));
  EXPECT_EQ(idx["nominal_steps"], 4);
  EXPECT_EQ(idx["extended_steps"], 8);
  EXPECT_EQ(idx["steps"], json({0, 2, 4, 6, 8}));
  const std::string csv = slurp(fs::path(dir_) / "forgetting.csv");
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "step,ris");
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 5u);
}

TEST_F(Pipeline, AdaptersLeaveTheBaseUntouched) {
  const auto p1 = load_checkpoint((fs::path(dir_) / "phase1/model").string());
  for (const char* later : {"phase2/model", "phase3/model"}) {
    const auto m = load_checkpoint((fs::path(dir_) / later).string());
    ASSERT_TRUE(m.params.has_group(ParamGroup::adapter));
    for (const auto& t : p1.params) EXPECT_EQ(t.value.data, m.params.get(t.name).data) << later << " " << t.name;
  }
}

TEST_F(Pipeline, RerunIsANoOpAndChangedConfigConflicts) {
  const auto again = cmd_run(tiny(), dir_);
  EXPECT_TRUE(again.ran.empty());
  EXPECT_TRUE(again.complete);
  for (const auto& p : again.plan) EXPECT_EQ(p.action, "done");
  auto changed = tiny();
  changed.phase3.adam.lr *= 2;
  EXPECT_THROW(cmd_run(changed, dir_), ResumeConflict);
  RunOptions dry;
  dry.dry_run = true;
  EXPECT_THROW(cmd_run(changed, dir_, dry), ResumeConflict);
}

TEST_F(Pipeline, ResumedRunMatchesOneShotRun) {
  const auto d = stlr::testing::temp_dir("resume") / "exp";
  RunOptions first;
  first.targets = {"phase2"};
  const auto r1 = cmd_run(tiny(), d.string(), first);
  EXPECT_EQ(r1.ran, (std::vector<std::string>{"prepare", "phase1", "phase2"}));
  EXPECT_FALSE(r1.complete);
  EXPECT_FALSE(fs::exists(d / "report.json"));
  const auto r2 = cmd_run(tiny(), d.string());
  EXPECT_EQ(r2.ran, (std::vector<std::string>{"phase3", "baselines", "judges", "evaluate", "report"}));
  EXPECT_TRUE(r2.complete);
  EXPECT_EQ(slurp(d / "report.json"), slurp(fs::path(dir_) / "report.json"));
  EXPECT_EQ(slurp(d / "forgetting.csv"), slurp(fs::path(dir_) / "forgetting.csv"));
}

TEST_F(Pipeline, ReuseCopiesMatchingStages) {
  auto c = tiny();
  c.name = "tiny-kron";
  c.adapter.variant = AdapterVariant::compacter;
  const auto d = stlr::testing::temp_dir("reuse") / "exp";
  RunOptions opt;
  opt.reuse_from = dir_;
  const auto r = cmd_run(c, d.string(), opt);
  EXPECT_TRUE(r.complete);
  EXPECT_EQ(r.ran, (std::vector<std::string>{"phase2", "phase3", "evaluate", "report"}));
  EXPECT_EQ(slurp(d / "phase1/model/manifest.json"), slurp(fs::path(dir_) / "phase1/model/manifest.json"));
  const json rep = json::parse(slurp(d / "report.json"));
  EXPECT_EQ(rep["adapter_variant"], "compacter");
  // the encoder-decoder row does not depend on the adapter
  const json base = json::parse(slurp(fs::path(dir_) / "report.json"));
  EXPECT_EQ(rep["reports"][0]["bleu1"], base["reports"][0]["bleu1"]);
}

TEST_F(Pipeline, CompareMergesExperimentsAndModelReports) {
  const auto d = stlr::testing::temp_dir("compare");
  json single = json::parse(slurp(fs::path(dir_) / "report.json"))["reports"][0];
  std::ofstream(d / "ed.json") << single.dump();
  const auto one = cmd_compare({(fs::path(dir_) / "report.json").string(), (d / "ed.json").string()});
  std::istringstream is(one.csv);
  std::string header, line;
  std::getline(is, header);
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 6u);
  EXPECT_EQ(lines[0].substr(0, 16), "encoder-decoder,");
  EXPECT_NE(lines[5].find(",NA,"), std::string::npos);  // rbae of the standalone baseline
  const auto two = cmd_compare({(fs::path(dir_) / "report.json").string(), (fs::path(dir_) / "report.json").string()});
  EXPECT_NE(two.csv.find("tiny/llr,"), std::string::npos);
  EXPECT_NE(two.markdown.find("| tiny/stage2 |"), std::string::npos);
  std::ofstream(d / "bad.json") << R"({"rows": []})";
  EXPECT_THROW(cmd_compare({(d / "bad.json").string()}), DataError);
}

TEST_F(Pipeline, PlotDataColumns) {
  const auto pd = cmd_plot_data({dir_, dir_});
  EXPECT_EQ(pd.forgetting_csv, slurp(fs::path(dir_) / "forgetting.csv"));
  std::istringstream is(pd.quadrants_csv);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "adapter_type,q_tt,q_tf,q_ft,q_ff");
  std::vector<std::string> rows;
  while (std::getline(is, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].substr(0, 6), "plain,");
  const json llr = json::parse(slurp(fs::path(dir_) / "report.json"))["reports"][4]["quadrants"];
  std::size_t sum = 0;
  std::istringstream cells(rows[0].substr(6));
  for (std::string cell; std::getline(cells, cell, ',');) sum += std::stoul(cell);
  EXPECT_EQ(sum, llr["styled_valid"].get<std::size_t>() + llr["styled_invalid"].get<std::size_t>() +
                     llr["unstyled_valid"].get<std::size_t>() + llr["unstyled_invalid"].get<std::size_t>());

  const auto copy = stlr::testing::temp_dir("plot_nosnap") / "exp";
  fs::copy(dir_, copy, fs::copy_options::recursive);
  fs::remove_all(copy / "snapshots");
  EXPECT_THROW(cmd_plot_data({copy.string()}), DataError);
  EXPECT_THROW(cmd_plot_data({(copy / "nothing").string()}), DataError);
}
