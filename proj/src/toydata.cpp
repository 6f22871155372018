#include "nudiff/toydata.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nudiff/structure_codec.hpp"

namespace nudiff {

InstanceMap toy_instances(int height, int width, int count, Rng rng) {
  if (height < 7 || width < 7) throw std::invalid_argument("toy_instances: raster too small");
  InstanceMap m(height, width);
  uint32_t next = 1;
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      int rx = 3 + rng.uniform_int(4);
      int ry = 3 + rng.uniform_int(4);
      if (2 * rx + 1 > width || 2 * ry + 1 > height) continue;
      int cx = rx + rng.uniform_int(width - 2 * rx);
      int cy = ry + rng.uniform_int(height - 2 * ry);
      // Everything within Chebyshev distance 2 of the ellipse must be free of
      // existing nuclei, so distinct instances keep a 2-pixel gap in every
      // direction (diagonals included).
      std::vector<size_t> pixels;
      bool clear = true;
      for (int y = std::max(0, cy - ry - 2); y <= std::min(height - 1, cy + ry + 2) && clear; ++y)
        for (int x = std::max(0, cx - rx - 2); x <= std::min(width - 1, cx + rx + 2) && clear; ++x) {
          double gx = std::max(0.0, std::abs(static_cast<double>(x - cx)) - 2.0) / rx;
          double gy = std::max(0.0, std::abs(static_cast<double>(y - cy)) - 2.0) / ry;
          if (gx * gx + gy * gy <= 1.0 && m.at(y, x) != 0) clear = false;
          double ex = static_cast<double>(x - cx) / rx;
          double ey = static_cast<double>(y - cy) / ry;
          if (ex * ex + ey * ey <= 1.0) pixels.push_back(static_cast<size_t>(y) * width + x);
        }
      if (!clear || pixels.empty()) continue;
      for (size_t p : pixels) m.labels[p] = next;
      ++next;
      break;
    }
  }
  return canonicalize(m);
}

ImageRaster toy_image(const InstanceMap& inst) {
  NucleiStructure ns = encode_structure(inst);
  ImageRaster img(inst.height, inst.width, 3);
  const size_t npix = static_cast<size_t>(inst.height) * inst.width;
  for (size_t i = 0; i < npix; ++i) {
    if (inst.labels[i] > 0) {
      // Shade deepens toward each nucleus center via the distance ramps.
      double depth = (1.0 - std::abs(ns.hdist[i])) * (1.0 - std::abs(ns.vdist[i]));
      img.data[i] = -0.1 - 0.5 * depth;            // R
      img.data[npix + i] = -0.5 - 0.3 * depth;     // G
      img.data[2 * npix + i] = 0.1 - 0.4 * depth;  // B
    } else {
      img.data[i] = 0.7;
      img.data[npix + i] = 0.4;
      img.data[2 * npix + i] = 0.6;
    }
  }
  return img;
}

std::vector<std::pair<ImageRaster, InstanceMap>> toy_dataset(int n, int height, int width,
                                                             int min_count, int max_count,
                                                             Rng rng) {
  if (min_count < 0 || max_count < min_count)
    throw std::invalid_argument("toy_dataset: bad count range");
  std::vector<std::pair<ImageRaster, InstanceMap>> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng r = rng.stream(static_cast<uint64_t>(i));
    int count = min_count + r.uniform_int(max_count - min_count + 1);
    InstanceMap inst = toy_instances(height, width, count, r);
    out.emplace_back(toy_image(inst), std::move(inst));
  }
  return out;
}

}  // namespace nudiff
