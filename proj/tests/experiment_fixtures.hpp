#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace stlr::testing {

using nlohmann::json;
namespace fs = std::filesystem;

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Small enough that the whole pipeline takes a few seconds.
inline json tiny_json(std::uint64_t seed = 3) {
  return json::parse(R"({
    "name": "tiny",
    "seed": )" + std::to_string(seed) + R"(,
    "data": {"synthetic": {"n_stories": 120, "n_captions_per_style": 24}},
    "model": {"d_model": 16, "n_enc_layers": 1, "n_dec_layers": 1, "n_heads": 2, "ffn_dim": 32},
    "adapter": {"bottleneck": 4},
    "phase1": {"epochs": 1},
    "phase2": {"epochs": 2, "stop": "fixed"},
    "phase3": {"epochs": 1, "max_steps": 4, "snapshot_every": 2},
    "forgetting_multiplier": 2,
    "decode": {"max_new_tokens": 8},
    "judges": {"style": {"train": {"epochs": 1}}, "cloze": {"train": {"epochs": 1}}},
    "baselines": {"disc_train": {"epochs": 1}, "disc_baseline": {"steps": 3}}
  })");
}

}  // namespace stlr::testing
