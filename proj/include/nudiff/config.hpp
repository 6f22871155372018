#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nudiff {

// Flat key=value run configuration. Unspecified keys take the defaults below.
struct RunConfig {
  // schedule
  int T = 1000;
  double beta1 = 1e-4;
  double betaT = 0.02;
  // network
  int levels = 3;
  std::vector<int> channels = {16, 32, 64};
  std::vector<int> attn_levels = {3};  // 1-based level indices
  int base_resolution = 32;
  int blocks = 1;  // residual blocks per level
  // training
  double lr = 1e-4;
  double lr_finetune = 2e-5;
  int batch = 4;
  double drop_rate = 0.2;
  int steps = 1000;
  int finetune_steps = 500;
  uint64_t seed = 1;
  // sampling
  double guidance_w = 2.0;
  int sample_count = 16;
  // watershed
  double tau_s = 0.0;
  double tau_g = 0.4;
  int min_marker_area = 4;
  // patching
  int patch_size = 256;
  int patch_stride = 128;
  // clustering
  int k = 6;
  int kmeans_max_iter = 100;
};

// Parses a key=value text file ('#' starts a comment, one key per line) and
// validates the invariants. Throws std::runtime_error on unknown keys,
// unparsable values, or invariant violations.
RunConfig load_config(const std::string& path);
RunConfig parse_config_text(const std::string& text);
void validate_config(const RunConfig& c);

}  // namespace nudiff
