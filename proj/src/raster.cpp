#include "nudiff/raster.hpp"

#include <stdexcept>
#include <unordered_map>

namespace nudiff {

InstanceMap canonicalize(const InstanceMap& inst) {
  InstanceMap out(inst.height, inst.width);
  std::unordered_map<uint32_t, uint32_t> remap;
  uint32_t next = 1;
  for (size_t i = 0; i < inst.labels.size(); ++i) {
    uint32_t id = inst.labels[i];
    if (id == 0) continue;
    auto it = remap.find(id);
    if (it == remap.end()) it = remap.emplace(id, next++).first;
    out.labels[i] = it->second;
  }
  return out;
}

Tensor structure_to_tensor(const NucleiStructure& ns) {
  Tensor t({3, ns.height, ns.width});
  size_t plane = static_cast<size_t>(ns.height) * ns.width;
  std::copy(ns.semantic.begin(), ns.semantic.end(), t.v.begin());
  std::copy(ns.hdist.begin(), ns.hdist.end(), t.v.begin() + plane);
  std::copy(ns.vdist.begin(), ns.vdist.end(), t.v.begin() + 2 * plane);
  return t;
}

NucleiStructure tensor_to_structure(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw std::invalid_argument("structure tensor must be [3,H,W]");
  NucleiStructure ns(t.dim(1), t.dim(2));
  size_t plane = static_cast<size_t>(ns.height) * ns.width;
  std::copy(t.v.begin(), t.v.begin() + plane, ns.semantic.begin());
  std::copy(t.v.begin() + plane, t.v.begin() + 2 * plane, ns.hdist.begin());
  std::copy(t.v.begin() + 2 * plane, t.v.end(), ns.vdist.begin());
  return ns;
}

Tensor image_to_tensor(const ImageRaster& img) {
  Tensor t({img.channels, img.height, img.width});
  t.v = img.data;
  return t;
}

ImageRaster tensor_to_image(const Tensor& t) {
  if (t.rank() != 3) throw std::invalid_argument("image tensor must be [C,H,W]");
  ImageRaster img(t.dim(1), t.dim(2), t.dim(0));
  img.data = t.v;
  return img;
}

}  // namespace nudiff
