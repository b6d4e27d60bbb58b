// End-to-end acceptance run. Prints one PASS/FAIL line per criterion on
// stdout (progress goes to stderr) and exits non-zero if any criterion fails.

#include <CLI11.hpp>

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "metric_oracles.hpp"
#include "model_fixtures.hpp"
#include "stlr/stlr.hpp"

using namespace stlr;
using namespace stlr::testing;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string fmt(double x, int prec = 3) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << x;
  return os.str();
}

struct SeedRun {
  std::uint64_t seed = 0;
  fs::path dir;
  double cpu_seconds = 0.0;
  bool complete = false;
  json report;
  std::map<std::string, json> rows;  // model name -> report row
};

SeedRun run_experiment(const ExperimentConfig& c, const fs::path& dir, const RunOptions& opt = {}) {
  SeedRun r;
  r.seed = c.seed;
  r.dir = dir;
  const std::clock_t t0 = std::clock();
  r.complete = cmd_run(c, dir.string(), opt).complete;
  r.cpu_seconds = static_cast<double>(std::clock() - t0) / CLOCKS_PER_SEC;
  r.report = json::parse(slurp(dir / "report.json"));
  for (const auto& row : r.report["reports"]) r.rows[row["model"].get<std::string>()] = row;
  return r;
}

double num(const json& row, const char* key) { return row.at(key).is_null() ? 0.0 : row.at(key).get<double>(); }

// Directional claims must hold for at least 4 of the 5 seeds.
std::size_t required_hits(std::size_t n) { return n >= 5 ? n - 1 : n; }

// ---------------------------------------------------------------------------
// Criteria on the seed runs

Verdict style_lift(const std::vector<SeedRun>& runs) {
  Verdict v;
  std::size_t hits = 0;
  double worst_cpu = 0.0;
  for (const auto& r : runs) {
    const double ed = num(r.rows.at("encoder-decoder"), "ris"), llr = num(r.rows.at("llr"), "ris");
    const bool ok = llr > 0.0 && llr >= 2.0 * ed;
    hits += ok;
    worst_cpu = std::max(worst_cpu, r.cpu_seconds);
    v.detail << "s" << r.seed << " " << fmt(llr) << "/" << fmt(ed) << (ok ? "" : "*") << " ";
  }
  v.detail << "| max cpu " << fmt(worst_cpu, 0) << "s ";
  v.require(hits >= required_hits(runs.size()), "RIS(LLR) >= 2 RIS(ED) in " + std::to_string(hits) + " seeds");
  v.require(worst_cpu <= 1800.0, "runtime over 30 min");
  return v;
}

Verdict content_parity(const std::vector<SeedRun>& runs) {
  Verdict v;
  std::size_t hits = 0;
  for (const auto& r : runs) {
    const double ratio = num(r.rows.at("llr"), "bleu1") / num(r.rows.at("encoder-decoder"), "bleu1");
    const double rbar = num(r.rows.at("llr"), "rbar");
    const bool ok = ratio >= 0.7 && rbar >= 0.55;
    hits += ok;
    v.detail << "s" << r.seed << " bleu " << fmt(ratio) << " rbar " << fmt(rbar) << (ok ? "" : "*") << " ";
  }
  v.require(hits >= required_hits(runs.size()), "parity in " + std::to_string(hits) + " seeds");
  return v;
}

Verdict ablation(const std::vector<SeedRun>& runs) {
  Verdict v;
  std::size_t hits = 0;
  for (const auto& r : runs) {
    const auto& s2 = r.rows.at("stage2");
    const auto& s3 = r.rows.at("llr");
    const bool ok = num(s2, "ris") >= num(s3, "ris") && num(s2, "rbae") <= 0.6 * num(s3, "rbae") &&
                    std::abs(num(s2, "rbar") - 0.51) <= 0.15;
    hits += ok;
    v.detail << "s" << r.seed << " ris " << fmt(num(s2, "ris")) << ">=" << fmt(num(s3, "ris")) << " rbae "
             << fmt(num(s2, "rbae")) << "<=" << fmt(0.6 * num(s3, "rbae")) << " rbar " << fmt(num(s2, "rbar"))
             << (ok ? "" : "*") << " ";
  }
  v.require(hits >= required_hits(runs.size()), "pattern in " + std::to_string(hits) + " seeds");
  return v;
}

Verdict forgetting(const std::vector<SeedRun>& runs) {
  Verdict v;
  std::size_t hits = 0;
  for (const auto& r : runs) {
    const auto& f = r.report["forgetting"];
    std::istringstream csv(slurp(r.dir / "forgetting.csv"));
    std::string header, line;
    std::getline(csv, header);
    std::size_t points = 0;
    while (std::getline(csv, line)) ++points;
    const bool ok = header == "step,ris" && points >= 2 && f["final_ris"].get<double>() <= f["nominal_ris"].get<double>();
    hits += ok;
    v.detail << "s" << r.seed << " " << fmt(f["nominal_ris"].get<double>()) << "->" << fmt(f["final_ris"].get<double>())
             << (ok ? "" : "*") << " ";
  }
  v.require(hits >= required_hits(runs.size()), "final <= nominal in " + std::to_string(hits) + " seeds");
  return v;
}

Verdict frozen(const std::vector<SeedRun>& runs) {
  Verdict v;
  std::size_t tensors = 0, identical = 0;
  for (const auto& r : runs) {
    const auto p1 = load_checkpoint((r.dir / "phase1/model").string());
    for (const char* later : {"phase2/model", "phase3/model"}) {
      const auto m = load_checkpoint((r.dir / later).string());
      for (const auto& t : p1.params) {
        ++tensors;
        const auto idx = m.params.find(t.name);
        identical += idx && m.params.at(*idx).group != ParamGroup::adapter && bit_identical(m.params.at(*idx).value, t.value);
      }
      v.require(m.params.has_group(ParamGroup::adapter), std::string(later) + " has no adapters");
    }
  }
  v.detail << identical << "/" << tensors << " non-adapter tensors bit-identical ";
  v.require(tensors > 0 && identical == tensors, "base tensors changed");
  return v;
}

Verdict determinism(const ExperimentConfig& c, const SeedRun& first, const fs::path& dir) {
  Verdict v;
  const auto again = run_experiment(c, dir);
  const bool same = slurp(first.dir / "report.json") == slurp(again.dir / "report.json");
  v.detail << "report.json " << (same ? "byte-identical" : "differs") << " (" << slurp(again.dir / "report.json").size()
           << " bytes) ";
  v.require(same, "rerun differs");
  return v;
}

// ---------------------------------------------------------------------------
// Property suites

Verdict gradient_checks() {
  Verdict v;
  constexpr std::size_t V = 14;
  ModelConfig mc = tiny_config(V, 31);
  mc.d_model = 16;
  mc.ffn_dim = 24;
  AdapterConfig ac;
  ac.bottleneck = 4;
  auto m = inject_adapters(init_model<double>(mc), ac);
  perturb_adapters(m, 0.3, 5);
  Rng rng(32);
  const Batch src = random_source(rng, V, {6, 4}, 6);
  const Batch tgt = random_target(rng, V, {3, 2}, 5);

  const auto all = set_trainable(m, {ParamGroup::encoder, ParamGroup::decoder_base, ParamGroup::lm_head, ParamGroup::adapter});
  const auto tf = loss_and_grad(m, all, &src, tgt);
  const double e_tf = model_grad_error(m, all, [&](const Model<double>& x) { return story_loss(x, src, tgt); }, tf.grads, 16);

  const auto dec = set_trainable(m, {ParamGroup::decoder_base, ParamGroup::lm_head, ParamGroup::adapter});
  const auto lm = loss_and_grad(m, dec, nullptr, tgt);
  const double e_lm = model_grad_error(m, dec, [&](const Model<double>& x) { return lm_loss(x, tgt); }, lm.grads, 16);

  const auto gen = init_model<double>(mc);
  const auto gmask = set_trainable(gen, {ParamGroup::encoder, ParamGroup::decoder_base, ParamGroup::lm_head});
  TextCNNConfig cc;
  cc.vocab_size = V;
  cc.embed_dim = 4;
  cc.filters = 3;
  cc.windows = {2, 3};
  auto disc = init_textcnn<double>(cc);
  for (double& w : disc.params.get("cnn.head.w").data) w = rng.normal();
  const auto ds = discriminator_augmented_step(gen, gmask, src, tgt, disc, 1.0, 1.0);
  const double e_disc = model_grad_error(
      gen, gmask, [&](const Model<double>& x) { return discriminator_augmented_step(x, gmask, src, tgt, disc, 1.0, 1.0, false).loss; },
      ds.grads, 16);

  v.detail << "max rel err: teacher_forcing " << e_tf << ", lm " << e_lm << ", disc_step " << e_disc << " (d=16) ";
  v.require(e_tf <= 1e-3 && e_lm <= 1e-3 && e_disc <= 1e-3, "relative error above 1e-3");
  return v;
}

Verdict adapter_properties(const std::vector<SeedRun>& variant_runs, const fs::path& csv_path) {
  Verdict v;
  // Near-identity at injection.
  const auto base = init_model(tiny_config(14, 41));
  Rng rng(42);
  const Batch src = random_source(rng, 14, {5, 3}, 5);
  const Batch tgt = random_target(rng, 14, {3, 4}, 6);
  const auto ctx0 = encode_context(base, src);
  const auto out0 = decoder_forward(base, ctx0, tgt);
  double drift = 0.0;
  for (AdapterVariant var : all_adapter_variants()) {
    AdapterConfig ac;
    ac.variant = var;
    ac.bottleneck = 4;
    const auto m = inject_adapters(base, ac);
    drift = std::max(drift, static_cast<double>(max_abs_diff(decoder_forward(m, encode_context(m, src), tgt), out0)));
  }
  v.detail << "drift " << drift << "; ";
  v.require(drift <= 1e-6, "injection drift");

  // Invertible round trip.
  AdapterConfig inv;
  inv.variant = AdapterVariant::invertible;
  inv.bottleneck = 4;
  auto mi = inject_adapters(base, inv);
  perturb_adapters(mi, 0.5, 43);
  const auto w = coupling_weights(mi);
  Matrix<float> h(16, base.config.d_model);
  for (float& x : h.data) x = static_cast<float>(rng.normal());
  const double rt = max_abs_diff(coupling_inverse(w, coupling_forward(w, h)), h);
  v.detail << "round-trip " << rt << "; ";
  v.require(rt <= 1e-5, "invertible round trip");

  // Closed-form parameter counts, 3 random configs per variant.
  std::size_t count_ok = 0, count_n = 0;
  Rng cr(44);
  for (AdapterVariant var : all_adapter_variants())
    for (int trial = 0; trial < 3; ++trial) {
      ModelConfig c = tiny_config(15);
      c.d_model = 4 * (2 + cr.below(4));
      c.n_dec_layers = 1 + cr.below(3);
      AdapterConfig a;
      a.variant = var;
      a.bottleneck = 2 * (1 + cr.below(c.d_model / 2 - 1));
      const auto m = inject_adapters(init_model(c), a);
      ++count_n;
      count_ok += param_stats(m).at(ParamGroup::adapter).scalars ==
                  adapter_closed_form(var, c.d_model, a.bottleneck, c.n_dec_layers, a.compacter_n);
    }
  v.detail << "counts " << count_ok << "/" << count_n << "; ";
  v.require(count_ok == count_n, "parameter counts");

  // Every variant through the full pipeline.
  std::ostringstream csv;
  csv << "adapter_type,ris,rbae,rbar,bleu1\n";
  std::size_t complete = 0;
  for (const auto& r : variant_runs) {
    const auto& row = r.rows.at("llr");
    csv << r.report["adapter_variant"].get<std::string>() << ',' << format_metric(num(row, "ris")) << ','
        << format_metric(num(row, "rbae")) << ',' << format_metric(num(row, "rbar")) << ','
        << format_metric(num(row, "bleu1")) << '\n';
    complete += r.complete;
    v.detail << r.report["adapter_variant"].get<std::string>() << " " << fmt(num(row, "ris")) << "/"
             << fmt(num(row, "rbae")) << " ";
  }
  std::ofstream(csv_path) << csv.str();
  v.detail << "-> " << csv_path.filename().string() << " ";
  v.require(complete == all_adapter_variants().size() && variant_runs.size() == complete, "variant pipelines");
  return v;
}

Verdict metric_oracles() {
  Verdict v;
  Rng rng(808);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tokens> h, r;
    const std::size_t n = 1 + rng.below(4);
    for (std::size_t i = 0; i < n; ++i) {
      h.push_back(random_tokens(rng, trial == 0 && i == 0 ? 0 : 1, 6));
      r.push_back(random_tokens(rng, 1, 6));
    }
    worst = std::max({worst, std::abs(bleu1(h, r) - bleu1_oracle(h, r)), std::abs(rouge_l(h, r) - rouge_oracle(h, r)),
                      std::abs(cider(h, r) - cider_oracle(h, r))});
  }
  v.detail << "20 micro-cases max diff " << worst << "; ";
  v.require(worst <= 1e-9, "overlap metrics vs brute force");

  bool exact = true;
  exact &= ris_from_scores({0.9, 0.9, 0.9}) == 1.0;
  exact &= ris_from_scores({0.1, 0.1}) == 0.0;
  exact &= ris_from_scores({0.9, 0.4, 0.6}) == 2.0 / 3.0;
  exact &= rbae_from_scores({0.8, 0.3, 0.5}, {0.2, 0.7, 0.5}) == 1.0 / 3.0;
  const ClozeJudge cj{judge_vocab(), marker_cnn(judge_vocab(), "good")};
  std::vector<StoryExample> xs;
  std::vector<std::string> pool;
  for (int i = 0; i < 8; ++i) {
    xs.push_back(story(i % 2 ? "tom" : "anna", "ending " + std::to_string(i)));
    pool.push_back("ending " + std::to_string(i));
  }
  const std::vector<std::string> favoured(xs.size(), "good");
  exact &= rbae(xs, favoured, favoured, cj) == 0.0;  // all ties
  exact &= rbae(xs, favoured, pool, cj) == 1.0;
  exact &= rbar(xs, favoured, pool, cj, 5) == 1.0;
  exact &= rbar(xs, favoured, pool, cj, 5) == rbar(xs, favoured, pool, cj, 5);
  const auto paired = sample_random_endings(xs, pool, 5);
  for (std::size_t i = 0; i < xs.size(); ++i) exact &= paired[i] != xs[i].ending;
  exact &= bleu1({tokenize("a b c")}, {tokenize("a b d")}) == 2.0 / 3.0;
  exact &= rouge_l({tokenize("a c")}, {tokenize("a b c")}) == 0.8;
  v.detail << "worked examples " << (exact ? "exact" : "mismatch") << " ";
  v.require(exact, "worked examples");
  return v;
}

Verdict fusion_checks() {
  Verdict v;
  bool ok = fuse_next_token({0.5, 0.3, 0.2}, {0.1, 0.5, 0.4}) == 1;
  v.detail << "hand " << ok << "; ";

  constexpr std::size_t V = 14;
  Rng rng(51);
  std::vector<std::vector<int>> ctx;
  for (int i = 0; i < 20; ++i) ctx.push_back(random_ids(rng, 3 + rng.below(6), V));
  DecodeSettings g;
  g.max_new_tokens = 8;
  g.max_source_len = 16;
  Model<float> s2s = init_model(tiny_config(V, 52));
  for (float& x : s2s.params.get("lm.w").data) x *= 4.0f;
  Model<float> uniform = init_model(tiny_config(V, 53));
  uniform.params.get("lm.w").fill(0.0f);
  uniform.params.get("lm.b").fill(0.0f);
  const bool uni = fusion_generate_ids(s2s, uniform, ctx, 8, 1.0, 16) == generate_ids(s2s, ctx, g);
  // Without cross-attention output the model ignores its context, so its LM
  // pass gives the same distribution as the conditioned pass.
  Model<float> blind = s2s;
  for (std::size_t l = 0; l < blind.config.n_dec_layers; ++l) {
    blind.params.get("dec." + std::to_string(l) + ".cross.wo").fill(0.0f);
    blind.params.get("dec." + std::to_string(l) + ".cross.bo").fill(0.0f);
  }
  const bool ident = fusion_generate_ids(blind, blind, ctx, 8, 1.0, 16) == generate_ids(blind, ctx, g);
  v.detail << "uniform-LM " << uni << ", identical " << ident << "; ";

  std::size_t shifts = 0, shift_ok = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(9), q(9);
    for (double& x : p) x = rng.uniform();
    for (double& x : q) x = rng.uniform();
    const int base = fuse_next_token(p, q);
    const double c = (rng.uniform() - 0.5) * 10.0;
    auto ps = p, qs = q;
    for (double& x : ps) x += c;
    for (double& x : qs) x += c;
    shifts += 2;
    shift_ok += (fuse_next_token(ps, q) == base) + (fuse_next_token(p, qs) == base);
  }
  v.detail << "shift invariance " << shift_ok << "/" << shifts << " ";
  v.require(ok && uni && ident && shift_ok == shifts, "fusion");
  return v;
}

Verdict judge_checks() {
  Verdict v;
  auto spec = default_synthetic_spec(61);
  spec.n_stories = 500;
  spec.n_captions_per_style = 60;
  const auto syn = generate_synthetic(spec);
  std::vector<std::string> texts;
  for (const auto& s : syn.stories)
    for (const auto& x : s.sentences) texts.push_back(x);
  for (const auto& c : syn.captions) texts.push_back(c.text);
  const auto vocab = build_vocab(texts, 1, 512);
  const auto target = group_captions(syn.captions, default_grouping()).captions;
  std::set<std::string> negative;
  for (const auto& [g, members] : default_grouping()) negative.insert(members.begin(), members.end());
  std::vector<std::string> others;
  for (const auto& c : syn.captions)
    if (!negative.count(c.style)) others.push_back(c.text);
  const auto ex = split_stories(syn.stories);
  for (std::size_t i = 0; i < 200; ++i) others.push_back(ex[i].ending);

  JudgeConfig jc = profile_config("desk").judges.style;
  const auto style = train_style_judge(vocab, target, others, "negative", jc).second.metrics.heldout_accuracy;
  JudgeConfig cc = profile_config("desk").judges.cloze;
  const auto cloze = train_cloze_judge(vocab, ex, cc, 62).second.metrics.heldout_accuracy;
  v.detail << "style " << fmt(style) << ", cloze " << fmt(cloze) << "; ";
  v.require(style >= 0.95, "style judge accuracy");
  v.require(cloze >= 0.8, "cloze judge accuracy");

  Rng rng(63);
  Matrix<double> emb(16, 12);
  std::vector<int> truth;
  for (std::size_t i = 0; i < 16; ++i) {
    const std::size_t block = (i * 7) % 4;
    truth.push_back(static_cast<int>(block));
    for (std::size_t c = 0; c < 12; ++c) emb(i, c) = (c / 3 == block ? 1.0 : 0.0) + 0.05 * rng.normal();
  }
  const auto groups = cluster_styles(emb, 4).groups;
  // Same partition: rows share a cluster exactly when they share a block.
  bool same = true;
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) same &= (groups[i] == groups[j]) == (truth[i] == truth[j]);
  v.detail << "planted 4-block " << (same ? "recovered" : "missed") << " ";
  v.require(same, "clustering");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  std::string workdir = "acceptance";
  std::string config = std::string(STLR_SOURCE_DIR) + "/configs/synthetic.json";
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  app.add_option("--workdir", workdir, "scratch directory (wiped first)");
  app.add_option("--config", config, "experiment config");
  app.add_option("--seeds", seeds, "seeds for the directional criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  try {
    setenv("STLR_REFERENCE_MODE", "1", 1);
    const fs::path root = workdir;
    fs::remove_all(root);
    fs::create_directories(root);
    std::ifstream in(config);
    const json base = json::parse(in);

    std::vector<SeedRun> runs;
    std::vector<ExperimentConfig> configs;
    for (auto s : seeds) {
      json j = base;
      j["seed"] = s;
      configs.push_back(experiment_config_from_json(j));
      std::cerr << "seed " << s << " ..." << std::endl;
      runs.push_back(run_experiment(configs.back(), root / ("seed_" + std::to_string(s))));
      std::cerr << "  " << fmt(runs.back().cpu_seconds, 1) << "s cpu" << std::endl;
    }

    std::vector<SeedRun> variant_runs;
    for (AdapterVariant var : all_adapter_variants()) {
      if (var == configs.front().adapter.variant) {
        variant_runs.push_back(runs.front());
        continue;
      }
      json j = base;
      j["seed"] = seeds.front();
      j["name"] = base.value("name", std::string("experiment")) + "-" + to_string(var);
      j["adapter"]["variant"] = to_string(var);
      std::cerr << "variant " << to_string(var) << " ..." << std::endl;
      RunOptions opt;
      opt.reuse_from = runs.front().dir.string();
      variant_runs.push_back(run_experiment(experiment_config_from_json(j), root / ("variant_" + std::string(to_string(var))), opt));
    }

    std::cerr << "determinism rerun ..." << std::endl;
    std::vector<std::pair<int, Verdict>> results;
    results.emplace_back(1, style_lift(runs));
    results.emplace_back(2, content_parity(runs));
    results.emplace_back(3, ablation(runs));
    results.emplace_back(4, forgetting(runs));
    results.emplace_back(5, frozen(runs));
    results.emplace_back(6, gradient_checks());
    results.emplace_back(7, adapter_properties(variant_runs, root / "variants.csv"));
    results.emplace_back(8, metric_oracles());
    results.emplace_back(9, fusion_checks());
    results.emplace_back(10, judge_checks());
    results.emplace_back(11, determinism(configs.front(), runs.front(), root / "repeat"));

    bool all = true;
    for (const auto& [id, v] : results) {
      std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail.str() << std::endl;
      all = all && v.pass;
    }
    return all ? 0 : 1;
  } catch (const std::exception& e) {
    std::cout << "acceptance aborted: " << e.what() << std::endl;
    return 2;
  }
}
