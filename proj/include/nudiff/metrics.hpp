#pragma once

#include <string>
#include <vector>

#include "nudiff/raster.hpp"

namespace nudiff {

// Binary foreground mask.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> fg;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), fg(static_cast<size_t>(h) * w, 0) {}
};

Mask foreground(const InstanceMap& inst);    // label > 0
Mask foreground(const NucleiStructure& ns);  // semantic > 0

// 2|P n G| / (|P| + |G|); 1.0 when both masks are empty. Throws on shape
// mismatch.
double dice(const Mask& pred, const Mask& gt);

// Aggregated Jaccard Index. Ground-truth instances are visited in ascending
// id; each matches the unused predicted instance maximizing IoU (ties to the
// lower predicted id, no match when every IoU is 0). Matched intersections
// accumulate the numerator; matched unions, unmatched ground-truth areas, and
// unused predicted areas accumulate the denominator. 1.0 when both maps are
// empty. Throws on shape mismatch.
double aji(const InstanceMap& pred, const InstanceMap& gt);

struct ImageMetrics {
  std::string image_id;
  double dice = 0.0;
  double aji = 0.0;
};

// Aggregates are per-image means.
struct MetricReport {
  double dice = 0.0;
  double aji = 0.0;
  std::vector<ImageMetrics> per_image;
};

MetricReport aggregate(std::vector<ImageMetrics> per_image);

// CSV rows image_id,dice,aji, one per image, then an aggregate "mean" line.
std::string report_csv(const MetricReport& report);

}  // namespace nudiff
