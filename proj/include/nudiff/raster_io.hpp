#pragma once

#include <string>

#include "nudiff/raster.hpp"

namespace nudiff {

// 8-bit RGB PNG. Byte b maps to b/127.5 - 1; writing quantizes back so that
// write(read(f)) reproduces f's pixel payload exactly.
ImageRaster read_image(const std::string& path);
void write_image(const ImageRaster& img, const std::string& path);

// 16-bit single-channel PNG, pixel value = instance id.
InstanceMap read_instance(const std::string& path);
void write_instance(const InstanceMap& inst, const std::string& path);

// "NSTR" binary format, little-endian: magic, u32 H, W, C (=3), then C*H*W
// f32 values channel-major (semantic, hdist, vdist). Round trips bit-exact.
NucleiStructure read_structure(const std::string& path);
void write_structure(const NucleiStructure& ns, const std::string& path);

}  // namespace nudiff
