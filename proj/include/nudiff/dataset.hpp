#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nudiff/raster.hpp"
#include "nudiff/rng.hpp"

namespace nudiff {

// One co-registered image/instance window cut from a source image.
struct Patch {
  std::string source;  // source image id
  int row = 0;         // window origin in the source
  int col = 0;
  ImageRaster image;
  InstanceMap inst;
};

struct PatchSet {
  int size = 0;  // window edge length, shared by every entry
  std::vector<Patch> entries;
};

// Handcrafted patch descriptor: an 8-bin intensity histogram per RGB channel
// (24 values, each channel's bins summing to 1 before the final rescale),
// mean gradient magnitude, and foreground-intensity mean and variance. The
// stored vector is L2-normalized.
struct FeatureVector {
  static constexpr int kDim = 27;
  std::array<double, kDim> values{};
};

struct ClusterAssignment {
  int k = 0;
  std::vector<FeatureVector> centers;
  std::vector<int> labels;       // 1..k per patch
  std::vector<double> distance;  // L2 distance to the own center
};

// Window origins at multiples of stride along each axis, plus a final
// edge-flush origin when (dim - size) is not a multiple of stride. Instance
// ids are re-canonicalized per patch. Throws when size exceeds either image
// dimension or the pair shapes disagree.
PatchSet extract_patches(const ImageRaster& image, const InstanceMap& inst, int size, int stride,
                         const std::string& source_id = "");

FeatureVector patch_features(const ImageRaster& patch, const InstanceMap& inst);

// Seeded k-means++ followed by Lloyd iterations until assignments are fixed
// or max_iter. Nearest-center ties break to the lowest center index; an
// empty cluster is re-seeded with the point farthest from its own center.
// objective, when given, receives the post-assignment sum of squared
// distances per iteration. Throws when fewer points than k.
ClusterAssignment kmeans(const std::vector<FeatureVector>& features, int k, Rng seed,
                         int max_iter = 100, std::vector<double>* objective = nullptr);

// Deterministic subset of round(proportion * total) patches: per-cluster
// quotas proportional to cluster sizes (largest-remainder rounding, ties to
// the lower cluster index), filled in ascending (distance-to-center, source,
// row, col) order. Output is sorted by (source, row, col). Throws unless
// proportion is in (0,1].
PatchSet select_subset(const PatchSet& patches, const ClusterAssignment& assignment,
                       double proportion);

struct ManifestEntry {
  std::string image_path;
  std::string instance_path;
  std::string origin;  // "real" | "synthetic"
};

using Manifest = std::vector<ManifestEntry>;

// CSV with header image_path,instance_path,origin.
void write_manifest(const Manifest& manifest, const std::string& path);
Manifest read_manifest(const std::string& path);

// Writes every patch and synthetic pair under out_dir as PNG pairs plus a
// manifest.csv listing real entries first, and returns that manifest.
Manifest assemble_augmented(const PatchSet& real,
                            const std::vector<std::pair<ImageRaster, InstanceMap>>& synthetic,
                            const std::string& out_dir);

}  // namespace nudiff
