#pragma once

#include <string>

#include "mixconv/network.hpp"
#include "mixconv/synth.hpp"
#include "mixconv/train.hpp"

namespace mixconv {

// One JSON file drives every subcommand. Top-level keys:
//
//   seed      uint, default 1. Root of all run randomness; train.seed and
//             arch.embed_seed inherit it unless set explicitly.
//   out_dir   string, default "runs/out". Where checkpoints/reports land.
//   dtype     "f32" (default) or "f64".
//   data      { dir "data", classes 3, samples_per_class 24,
//               extents [32,64,64], noise 0.1, blur_sigma 1.0,
//               test_fraction 0.25, val_fraction 0.1 }
//   arch      { depth 2, base_channels 8, in_channels 1, out_channels 1,
//               tasks 3, variant "task_conditional", embed "one_hot",
//               embed_seed <seed>, experts [conv1 conv3 aconv3 conv5 aconv5],
//               gating { fcn "single_layer", hidden 6,
//                        activation "softmax", source "task_prior" } }
//   train     { epochs 200, batch_size 4, patch [16,32,32], val_interval 10,
//               flip_augment true, lr 1e-4, beta1 0.9, beta2 0.999,
//               eps 1e-8, path "merged", task_filter 0 }
//
// Unknown keys anywhere are an error, so typos fail loudly instead of
// silently running defaults.
struct RunConfig {
  uint64_t seed = 1;
  std::string out_dir = "runs/out";
  int dtype_code = 1;  // 1 = f32, 2 = f64
  std::string data_dir = "data";
  BenchmarkSpec data;
  ArchConfig arch;
  TrainConfig train;
  int task_filter = 0;  // restrict training to one task; 0 trains on all
};

inline std::string path_name(Path p) {
  return p == Path::Merged ? "merged" : "branchwise";
}

inline Path path_from_name(const std::string& s) {
  if (s == "merged") return Path::Merged;
  if (s == "branchwise") return Path::Branchwise;
  throw ConfigError("unknown forward path '" + s +
                    "' (expected merged|branchwise)");
}

inline std::string dtype_name(int code) {
  if (code == 1) return "f32";
  if (code == 2) return "f64";
  throw ConfigError("unknown dtype code " + std::to_string(code));
}

inline int dtype_from_name(const std::string& s) {
  if (s == "f32") return 1;
  if (s == "f64") return 2;
  throw ConfigError("unknown dtype '" + s + "' (expected f32|f64)");
}

// Parse a config document; ConfigError on unknown keys or bad values.
RunConfig parse_run_config(const std::string& text);

// Read and parse a config file; IoError if unreadable.
RunConfig load_run_config(const std::string& path);

// Serialize with every field spelled out, so `mixconv <cmd> --dump-config`
// doubles as schema documentation.
std::string dump_run_config(const RunConfig& cfg);

}  // namespace mixconv
