// stlr: command-line front end for the LLR pipeline.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stlr/stlr.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stlr;

namespace {

void write_file(const std::string& path, const std::string& s) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << s;
}

json read_json(const std::string& path, bool config) {
  std::ifstream in(path);
  if (!in) {
    if (config) throw ConfigError("cannot open '" + path + "'");
    throw DataError("cannot open '" + path + "'");
  }
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    if (config) throw ConfigError("'" + path + "': " + e.what());
    throw DataError("'" + path + "': " + e.what());
  }
}

ExperimentConfig config_or_profile(const std::string& path) {
  return path.empty() ? profile_config("desk") : load_experiment_config(path);
}

void print_plan(const RunResult& r) {
  for (const auto& s : r.plan) std::cout << s.stage << ": " << s.action << '\n';
}

// One JSONL line: {"context": [4 sentences]} or {"sentences": [5]} (the
// fifth sentence is ignored).
std::vector<StoryExample> read_contexts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<StoryExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("line " + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    const char* key = j.contains("context") ? "context" : "sentences";
    if (!j.is_object() || !j.contains(key) || !j[key].is_array() || j[key].size() < 4)
      throw DataError("line " + std::to_string(lineno) + ": expected a 'context' array of 4 sentences");
    StoryExample x;
    for (std::size_t i = 0; i < 4; ++i) x.context[i] = trim(j[key][i].get<std::string>());
    out.push_back(std::move(x));
  }
  if (out.empty()) throw DataError("'" + path + "' has no contexts");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Style transfer for story endings with adapters (learn, learn, relearn)"};
  app.require_subcommand(1);

  // run
  std::string config_path, out_dir, reuse_from;
  bool dry_run = false;
  std::vector<std::string> stages;
  auto* run = app.add_subcommand("run", "Run the whole pipeline (resumable)");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--out", out_dir, "Experiment directory")->required();
  run->add_flag("--dry-run", dry_run, "Print the stage plan and exit");
  run->add_option("--stage", stages, "Only these stages (and what they need)");
  run->add_option("--reuse-from", reuse_from, "Copy matching completed stages from another experiment");

  // per-stage commands share --config/--exp
  std::string exp_dir;
  bool also_encoder = false;
  double lambda = -1.0;
  struct StageCmd {
    CLI::App* app;
    std::vector<std::string> targets;
  };
  std::vector<StageCmd> stage_cmds;
  const auto stage_cmd = [&](CLI::App* parent, const std::string& name, const std::string& help,
                             std::vector<std::string> targets) {
    auto* c = parent->add_subcommand(name, help);
    c->add_option("--config", config_path, "Experiment config (JSON)")->required();
    c->add_option("--exp", exp_dir, "Experiment directory")->required();
    stage_cmds.push_back({c, std::move(targets)});
    return c;
  };
  stage_cmd(&app, "train-phase1", "Phase 1: full fine-tune on story endings", {"phase1"});
  stage_cmd(&app, "train-phase2", "Phase 2: adapter-only style LM", {"phase2"});
  stage_cmd(&app, "train-phase3", "Phase 3: adapter-only relearning", {"phase3"})
      ->add_flag("--also-train-encoder", also_encoder, "Train the encoder together with the adapters");
  stage_cmd(&app, "train-llr", "All three phases", {"phase3"});
  auto* baseline = app.add_subcommand("train-baseline", "Train a comparison baseline");
  baseline->require_subcommand(1);
  stage_cmd(baseline, "disc", "Discriminator-loss baseline", {"baselines"})
      ->add_option("--lambda", lambda, "Style loss weight");
  stage_cmd(&app, "train-judges", "Style and cloze judges", {"judges"});
  stage_cmd(&app, "evaluate", "Generate, score and write report.json", {"report"});

  // prepare-data
  std::string stories, captions, grouping_path, format = "jsonl", style;
  auto* prep = app.add_subcommand("prepare-data", "Load, group, split and index real corpora");
  prep->add_option("--stories", stories, "Story corpus")->required();
  prep->add_option("--captions", captions, "Caption JSONL {text, persona}")->required();
  prep->add_option("--grouping", grouping_path, "JSON {style: [personas]}")->required();
  prep->add_option("--out", out_dir, "Output directory")->required();
  prep->add_option("--format", format, "jsonl or csv-5col");
  prep->add_option("--style", style, "Target style (default: the grouping's only style)");
  prep->add_option("--config", config_path, "Experiment config for split ratios, vocabulary limits and seed");

  // synth
  std::string spec_path;
  auto* synth = app.add_subcommand("synth", "Write a synthetic story and caption corpus");
  synth->add_option("--spec", spec_path, "Synthetic spec JSON (keys override the bundled spec)")->required();
  synth->add_option("--out", out_dir, "Output directory")->required();

  // generate
  std::string base_ckpt, adapter_dir, fusion_lm, in_path, out_path, strategy = "greedy";
  DecodeSettings ds;
  ds.max_new_tokens = 32;
  double fusion_lambda = 1.0;
  auto* gen = app.add_subcommand("generate", "Generate endings for story contexts");
  gen->add_option("--base", base_ckpt, "Base checkpoint")->required();
  gen->add_option("--adapter", adapter_dir, "Adapter sidecar (omit for the plain encoder-decoder)");
  gen->add_option("--fusion-lm", fusion_lm, "Style LM checkpoint for S2S+LM fusion decoding");
  gen->add_option("--fusion-lambda", fusion_lambda, "LM weight in fusion decoding");
  gen->add_option("--style", style, "Style name recorded with each ending");
  gen->add_option("--in", in_path, "Contexts JSONL")->required();
  gen->add_option("--out", out_path, "Endings JSONL")->required();
  gen->add_option("--strategy", strategy, "greedy, beam or top_k");
  gen->add_option("--k", ds.k, "Beam width or top-k cutoff");
  gen->add_option("--temperature", ds.temperature, "Sampling temperature");
  gen->add_option("--max-new-tokens", ds.max_new_tokens, "Ending length cap");
  gen->add_option("--seed", ds.seed, "Sampling seed");

  // compare
  std::vector<std::string> reports;
  std::string csv_out, md_out;
  auto* cmp = app.add_subcommand("compare", "Comparison table from report files");
  cmp->add_option("reports", reports, "report.json files")->required();
  cmp->add_option("--csv", csv_out, "CSV output");
  cmp->add_option("--md", md_out, "Markdown output (default: stdout)");

  // plot-data
  std::vector<std::string> exp_dirs;
  auto* plot = app.add_subcommand("plot-data", "Forgetting curve and quadrant CSVs");
  plot->add_option("experiments", exp_dirs, "Experiment directories")->required();
  plot->add_option("--out", out_dir, "Output directory")->required();

  // cluster-styles
  std::size_t k = 0;
  double height = -1.0;
  std::string linkage = "average", distance = "cosine", pooling = "head_rows";
  auto* clus = app.add_subcommand("cluster-styles", "Cluster personas by their embedder vectors");
  clus->add_option("--captions", captions, "Caption JSONL {text, persona}")->required();
  clus->add_option("--out", out_path, "Dendrogram JSON")->required();
  clus->add_option("--k", k, "Number of clusters");
  clus->add_option("--height", height, "Cut height (instead of --k)");
  clus->add_option("--linkage", linkage, "average, single or complete");
  clus->add_option("--distance", distance, "cosine or euclidean");
  clus->add_option("--pooling", pooling, "head_rows or caption_mean");
  clus->add_option("--config", config_path, "Experiment config whose style-judge settings train the embedder");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::config);
  }

  try {
    if (*run) {
      RunOptions opt;
      opt.dry_run = dry_run;
      opt.targets = stages;
      opt.reuse_from = reuse_from;
      opt.log = &std::cerr;
      const auto r = cmd_run(load_experiment_config(config_path), out_dir, opt);
      if (dry_run) print_plan(r);
      return 0;
    }
    for (const auto& sc : stage_cmds) {
      if (!sc.app->parsed()) continue;
      ExperimentConfig c = load_experiment_config(config_path);
      if (also_encoder) c.phase3.groups.insert(ParamGroup::encoder);
      if (lambda >= 0.0) c.baselines.disc_baseline.lambda = lambda;
      if (sc.targets.front() == "baselines") c.baselines.disc = true;
      RunOptions opt;
      opt.targets = sc.targets;
      opt.log = &std::cerr;
      cmd_run(c, exp_dir, opt);
      return 0;
    }
    if (*prep) {
      ExperimentConfig c = config_or_profile(config_path);
      c.data.source = "files";
      c.data.stories = stories;
      c.data.captions = captions;
      c.data.story_format = format;
      c.data.grouping = load_grouping(grouping_path);
      if (style.empty()) {
        if (c.data.grouping.size() != 1) throw ConfigError("--style is required when the grouping has several styles");
        style = c.data.grouping.begin()->first;
      }
      c.data.style = style;
      c.data.validate();
      const PreparedData d = prepare_data(c);
      save_prepared(out_dir, d);
      std::cerr << "vocab " << d.vocab.size() << ", stories " << d.stories.train.size() << '/' << d.stories.val.size()
                << '/' << d.stories.test.size() << ", dropped captions " << d.dropped_captions << '\n';
      return 0;
    }
    if (*synth) {
      json spec = default_synthetic_spec();
      std::vector<std::pair<std::string, json>> ignored;
      detail::merge_strict(spec, read_json(spec_path, true), "/data/synthetic", ignored);
      SyntheticSpec s;
      try {
        s = spec.get<SyntheticSpec>();
      } catch (const json::exception& e) {
        throw ConfigError(std::string("synthetic spec: ") + e.what());
      }
      const auto corpus = generate_synthetic(s);
      fs::create_directories(out_dir);
      write_story_corpus((fs::path(out_dir) / "stories.jsonl").string(), corpus.stories);
      write_captions((fs::path(out_dir) / "captions.jsonl").string(), corpus.captions);
      write_file((fs::path(out_dir) / "grouping.json").string(), json(default_grouping()).dump(2) + "\n");
      write_file((fs::path(out_dir) / "spec.json").string(), json(s).dump(2) + "\n");
      return 0;
    }
    if (*gen) {
      ds.strategy = parse_decode_strategy(strategy);
      ds.validate();
      const Model<float> base = load_checkpoint(base_ckpt);
      const Vocabulary v = load_checkpoint_vocab(base_ckpt);
      const auto xs = read_contexts(in_path);
      const auto ids = encode_contexts_examples(v, xs);
      std::vector<std::string> endings;
      if (!fusion_lm.empty()) {
        if (!adapter_dir.empty()) throw ConfigError("--adapter and --fusion-lm are exclusive");
        for (const auto& e : fusion_generate_ids(base, load_checkpoint(fusion_lm), ids, ds.max_new_tokens, fusion_lambda,
                                                 ds.max_source_len, ds.chunk))
          endings.push_back(decode(v, e));
      } else {
        const Model<float> m = adapter_dir.empty() ? base : attach_adapter_sidecar(base, adapter_dir);
        endings = generate_endings(m, v, ids, ds);
      }
      std::ostringstream os;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        json j{{"context", xs[i].context}, {"ending", endings[i]}};
        if (!style.empty()) j["style"] = style;
        os << j.dump() << '\n';
      }
      write_file(out_path, os.str());
      return 0;
    }
    if (*cmp) {
      const auto t = cmd_compare(reports);
      if (!csv_out.empty()) write_file(csv_out, t.csv);
      if (!md_out.empty())
        write_file(md_out, t.markdown);
      else
        std::cout << t.markdown;
      return 0;
    }
    if (*plot) {
      const auto d = cmd_plot_data(exp_dirs);
      write_file((fs::path(out_dir) / "forgetting.csv").string(), d.forgetting_csv);
      write_file((fs::path(out_dir) / "quadrants.csv").string(), d.quadrants_csv);
      return 0;
    }
    if (*clus) {
      if ((k == 0) == (height < 0.0)) throw ConfigError("give exactly one of --k and --height");
      const ExperimentConfig c = config_or_profile(config_path);
      std::ifstream in(captions);
      if (!in) throw DataError("cannot open '" + captions + "'");
      const auto caps = parse_caption_jsonl(in);
      std::vector<std::string> texts;
      for (const auto& cap : caps) texts.push_back(cap.text);
      const Vocabulary v = build_vocab(texts, c.data.vocab_min_freq, c.data.vocab_max_size);
      StylePooling pool;
      if (pooling == "head_rows")
        pool = StylePooling::head_rows;
      else if (pooling == "caption_mean")
        pool = StylePooling::caption_mean;
      else
        throw ConfigError("unknown pooling '" + pooling + "'");
      const auto emb = train_style_embedder(v, caps, c.judges.style, pool);
      const Linkage lk = parse_linkage(linkage);
      const Distance dist = parse_distance(distance);
      const auto r = k > 0 ? cluster_styles(emb.embeddings, k, lk, dist)
                           : cluster_styles_at_height(emb.embeddings, height, lk, dist);
      json out = dendrogram_json(r, emb.styles);
      out["embedder_heldout_accuracy"] = nullable(emb.metrics.heldout_accuracy);
      write_file(out_path, out.dump(2) + "\n");
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::data);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::data);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::generic);
  }
  return 0;
}
