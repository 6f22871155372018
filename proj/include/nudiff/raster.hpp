#pragma once

#include <cstdint>
#include <vector>

#include "nudiff/tensor.hpp"

namespace nudiff {

// RGB image with intensities in [-1,1], channel-major layout: data[c][y][x].
struct ImageRaster {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<double> data;

  ImageRaster() = default;
  ImageRaster(int h, int w, int c = 3)
      : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, 0.0) {}

  double& at(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
};

// Per-pixel nucleus ids; 0 is background.
struct InstanceMap {
  int height = 0;
  int width = 0;
  std::vector<uint32_t> labels;

  InstanceMap() = default;
  InstanceMap(int h, int w) : height(h), width(w), labels(static_cast<size_t>(h) * w, 0) {}

  uint32_t& at(int y, int x) { return labels[static_cast<size_t>(y) * width + x]; }
  uint32_t at(int y, int x) const { return labels[static_cast<size_t>(y) * width + x]; }

  uint32_t max_label() const {
    uint32_t m = 0;
    for (uint32_t v : labels) m = v > m ? v : m;
    return m;
  }
};

// Relabel ids to 1..N ordered by each instance's first pixel in row-major scan.
InstanceMap canonicalize(const InstanceMap& inst);

// 3-channel nuclei structure: binary semantic in {-1,+1} plus horizontal and
// vertical normalized distance transforms in [-1,1].
struct NucleiStructure {
  int height = 0;
  int width = 0;
  std::vector<double> semantic;
  std::vector<double> hdist;
  std::vector<double> vdist;

  NucleiStructure() = default;
  NucleiStructure(int h, int w)
      : height(h),
        width(w),
        semantic(static_cast<size_t>(h) * w, -1.0),
        hdist(static_cast<size_t>(h) * w, 0.0),
        vdist(static_cast<size_t>(h) * w, 0.0) {}

  size_t idx(int y, int x) const { return static_cast<size_t>(y) * width + x; }
};

// Channel order in tensors and on disk: semantic, hdist, vdist.
Tensor structure_to_tensor(const NucleiStructure& ns);
NucleiStructure tensor_to_structure(const Tensor& t);

Tensor image_to_tensor(const ImageRaster& img);
ImageRaster tensor_to_image(const Tensor& t);

}  // namespace nudiff
