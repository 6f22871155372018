#pragma once

#include <vector>

#include "nudiff/raster.hpp"

namespace nudiff {

struct WatershedParams {
  double tau_s = 0.0;        // semantic threshold on the [-1,1] scale
  double tau_g = 0.4;        // gradient-energy threshold in [0,1]
  int min_marker_area = 4;   // pixels
};

// Instance map -> 3-channel nuclei structure. Within each nucleus the
// horizontal/vertical channels hold the signed pixel offset from the
// nucleus centroid, normalized by the nucleus's own maximum absolute
// offset along that axis (0 for a one-pixel-wide axis). Background is
// semantic -1 with zero distances.
NucleiStructure encode_structure(const InstanceMap& inst);

// Boundary-energy field in [0,1]: max of the 3x3 Sobel responses
// |S_x(vdist)| and |S_y(hdist)| (each channel differentiated across its ramp
// direction), each response rescaled by its own maximum over the raster (all
// zeros when the maximum is 0). Replicate-border padding.
std::vector<double> gradient_energy(const NucleiStructure& ns);

// Marker-controlled watershed. Foreground = {semantic > tau_s}; markers are
// 4-connected components of foreground minus {energy >= tau_g} with area
// >= min_marker_area; flooding priority is (elevation, row, col) with
// insertion order as the final tie-break. Output ids are canonical, ordered
// by each basin's first pixel in row-major scan.
InstanceMap reconstruct_instances(const NucleiStructure& ns, const WatershedParams& params = {});

}  // namespace nudiff
