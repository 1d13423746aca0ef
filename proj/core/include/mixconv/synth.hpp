#pragma once

#include <string>
#include <vector>

#include "mixconv/rng.hpp"
#include "mixconv/volume.hpp"

namespace mixconv {

enum class Split { Train, Val, Test };

std::string split_name(Split s);
Split split_from_name(const std::string& s);

// One manifest row: where the sample's two volumes live, which structure
// class its target shows, and which split it belongs to.
struct SampleRef {
  std::string input_path, target_path;  // relative to the manifest directory
  int label = 0;
  Split split = Split::Train;
};

// Scale profile of one structure class. Blobs are Gaussian bumps of radius
// r; shells are thin spherical surfaces of radius r and the given thickness.
struct ClassProfile {
  std::string name;
  bool shell = false;
  double r_min = 1, r_max = 2;
  double thickness = 1;
  int count_min = 1, count_max = 1;
};

// Fixed inventory: small blobs, medium lumps, large thin shells, plus a
// medium-shell class reserved for task-incremental experiments.
const std::vector<ClassProfile>& builtin_class_profiles();

struct BenchmarkSpec {
  int classes = 3;            // uses the first `classes` builtin profiles
  int samples_per_class = 24;
  int d = 32, h = 64, w = 64;
  double noise = 0.1;       // noise sigma as a fraction of the blurred signal's std
  double blur_sigma = 1.0;  // voxels; 0 disables blurring
  double test_fraction = 0.25;
  double val_fraction = 0.10;  // of what remains after the test split
};

void validate_spec(const BenchmarkSpec& spec);

// Render every sample (input + single-class target) to VOL5 files under
// out_dir, write the manifest, and return the rows. Fully determined by
// (spec, seed): per-sample RNG streams are derived, never shared.
std::vector<SampleRef> generate_dataset(const BenchmarkSpec& spec, uint64_t seed,
                                        const std::string& out_dir);

void write_manifest(const std::string& path, const std::vector<SampleRef>& rows);
std::vector<SampleRef> read_manifest(const std::string& path);

// A sample loaded into memory; `normalize` z-scores input and target, which
// is the representation training and evaluation operate on.
struct Sample {
  Volume input, target;
  int label = 0;
  Split split = Split::Train;
};

Sample load_sample(const SampleRef& ref, const std::string& base_dir,
                   bool normalize = true);

std::vector<Sample> load_split(const std::vector<SampleRef>& rows,
                               const std::string& base_dir, Split split,
                               const std::vector<int>& label_filter = {},
                               bool normalize = true);

}  // namespace mixconv
