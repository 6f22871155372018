#pragma once

#include <utility>
#include <vector>

#include "nudiff/raster.hpp"
#include "nudiff/rng.hpp"

namespace nudiff {

// Well-separated elliptical nuclei: axis radii in 3..6, at least a 2-pixel
// background gap between instances (rejection-sampled; crowded rasters may
// place fewer than count). Ids are canonicalized.
InstanceMap toy_instances(int height, int width, int count, Rng rng);

// Deterministic texture tied to the structure: a flat light background and
// nuclei shaded by their distance ramps, so the image is a pure function of
// the instance map.
ImageRaster toy_image(const InstanceMap& inst);

// n paired samples; pair i is drawn from rng.stream(i) with count blobs in
// min_count..max_count.
std::vector<std::pair<ImageRaster, InstanceMap>> toy_dataset(int n, int height, int width,
                                                             int min_count, int max_count, Rng rng);

}  // namespace nudiff
