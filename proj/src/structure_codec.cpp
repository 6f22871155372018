#include "nudiff/structure_codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <queue>
#include <tuple>

namespace nudiff {

NucleiStructure encode_structure(const InstanceMap& inst) {
  NucleiStructure ns(inst.height, inst.width);
  std::map<uint32_t, std::vector<std::pair<int, int>>> pixels;  // id -> (row, col)
  for (int y = 0; y < inst.height; ++y)
    for (int x = 0; x < inst.width; ++x) {
      uint32_t id = inst.at(y, x);
      if (id != 0) pixels[id].emplace_back(y, x);
    }

  for (const auto& [id, pts] : pixels) {
    double cy = 0.0, cx = 0.0;
    for (auto [y, x] : pts) {
      cy += y;
      cx += x;
    }
    cy /= static_cast<double>(pts.size());
    cx /= static_cast<double>(pts.size());
    double max_dx = 0.0, max_dy = 0.0;
    for (auto [y, x] : pts) {
      max_dx = std::max(max_dx, std::abs(x - cx));
      max_dy = std::max(max_dy, std::abs(y - cy));
    }
    for (auto [y, x] : pts) {
      size_t i = ns.idx(y, x);
      ns.semantic[i] = 1.0;
      ns.hdist[i] = max_dx > 0.0 ? (x - cx) / max_dx : 0.0;
      ns.vdist[i] = max_dy > 0.0 ? (y - cy) / max_dy : 0.0;
    }
  }
  return ns;
}

namespace {

// 3x3 Sobel with replicate-border padding.
// axis=0: horizontal derivative kernel; axis=1: vertical.
std::vector<double> sobel(const std::vector<double>& f, int h, int w, int axis) {
  std::vector<double> out(static_cast<size_t>(h) * w, 0.0);
  auto pix = [&](int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return f[static_cast<size_t>(y) * w + x];
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double g;
      if (axis == 0) {
        g = (pix(y - 1, x + 1) + 2.0 * pix(y, x + 1) + pix(y + 1, x + 1)) -
            (pix(y - 1, x - 1) + 2.0 * pix(y, x - 1) + pix(y + 1, x - 1));
      } else {
        g = (pix(y + 1, x - 1) + 2.0 * pix(y + 1, x) + pix(y + 1, x + 1)) -
            (pix(y - 1, x - 1) + 2.0 * pix(y - 1, x) + pix(y - 1, x + 1));
      }
      out[static_cast<size_t>(y) * w + x] = g;
    }
  return out;
}

void normalize_abs(std::vector<double>& f) {
  double m = 0.0;
  for (double v : f) m = std::max(m, std::abs(v));
  if (m == 0.0) return;
  for (double& v : f) v = std::abs(v) / m;
}

}  // namespace

std::vector<double> gradient_energy(const NucleiStructure& ns) {
  // Cross pairing: each distance channel is differentiated across its ramp
  // direction, so nucleus interiors (where the ramps are linear along their
  // own axis and flat along the other) stay near zero while boundaries jump.
  // Differentiating along the ramp direction instead would give interiors a
  // constant response of about 2/radius of the raster maximum, leaving no
  // low-energy marker pixels for radii below about 5.
  std::vector<double> sv = sobel(ns.vdist, ns.height, ns.width, 0);
  std::vector<double> sh = sobel(ns.hdist, ns.height, ns.width, 1);
  normalize_abs(sv);
  normalize_abs(sh);
  std::vector<double> energy(sv.size());
  for (size_t i = 0; i < sv.size(); ++i) energy[i] = std::max(sv[i], sh[i]);
  return energy;
}

InstanceMap reconstruct_instances(const NucleiStructure& ns, const WatershedParams& params) {
  const int h = ns.height, w = ns.width;
  const size_t n = static_cast<size_t>(h) * w;
  std::vector<uint8_t> fg(n);
  for (size_t i = 0; i < n; ++i) fg[i] = ns.semantic[i] > params.tau_s ? 1 : 0;
  std::vector<double> energy = gradient_energy(ns);

  const int dy[4] = {-1, 1, 0, 0};
  const int dx[4] = {0, 0, -1, 1};

  // Marker components: 4-connected low-energy foreground.
  std::vector<uint32_t> label(n, 0);
  uint32_t next_label = 0;
  std::vector<size_t> stack;
  std::vector<std::vector<size_t>> components;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t i = static_cast<size_t>(y) * w + x;
      if (!fg[i] || energy[i] >= params.tau_g || label[i]) continue;
      uint32_t id = ++next_label;
      std::vector<size_t> comp;
      stack.assign(1, i);
      label[i] = id;
      while (!stack.empty()) {
        size_t p = stack.back();
        stack.pop_back();
        comp.push_back(p);
        int py = static_cast<int>(p) / w, px = static_cast<int>(p) % w;
        for (int d = 0; d < 4; ++d) {
          int qy = py + dy[d], qx = px + dx[d];
          if (qy < 0 || qy >= h || qx < 0 || qx >= w) continue;
          size_t q = static_cast<size_t>(qy) * w + qx;
          if (fg[q] && energy[q] < params.tau_g && !label[q]) {
            label[q] = id;
            stack.push_back(q);
          }
        }
      }
      components.push_back(std::move(comp));
    }

  // Drop undersized markers; assign marker ids to the assignment raster.
  std::vector<uint32_t> assign(n, 0);
  uint32_t marker_id = 0;
  std::vector<std::vector<size_t>> markers;
  for (const auto& comp : components) {
    if (static_cast<int>(comp.size()) < params.min_marker_area) continue;
    ++marker_id;
    for (size_t p : comp) assign[p] = marker_id;
    markers.push_back(comp);
  }

  // Flood the remaining foreground, lowest elevation first.
  struct Entry {
    double elev;
    int row, col;
    uint64_t seq;
    uint32_t label;
  };
  auto higher = [](const Entry& a, const Entry& b) {
    return std::tie(a.elev, a.row, a.col, a.seq) > std::tie(b.elev, b.row, b.col, b.seq);
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(higher)> queue(higher);
  uint64_t seq = 0;
  for (size_t m = 0; m < markers.size(); ++m)
    for (size_t p : markers[m]) {
      int py = static_cast<int>(p) / w, px = static_cast<int>(p) % w;
      queue.push({energy[p], py, px, seq++, static_cast<uint32_t>(m + 1)});
    }
  std::vector<uint8_t> done(n, 0);
  while (!queue.empty()) {
    Entry e = queue.top();
    queue.pop();
    size_t p = static_cast<size_t>(e.row) * w + e.col;
    if (done[p]) continue;
    done[p] = 1;
    assign[p] = e.label;
    for (int d = 0; d < 4; ++d) {
      int qy = e.row + dy[d], qx = e.col + dx[d];
      if (qy < 0 || qy >= h || qx < 0 || qx >= w) continue;
      size_t q = static_cast<size_t>(qy) * w + qx;
      if (fg[q] && !done[q] && assign[q] == 0) queue.push({energy[q], qy, qx, seq++, e.label});
    }
  }

  InstanceMap out(h, w);
  out.labels.assign(assign.begin(), assign.end());
  return canonicalize(out);
}

}  // namespace nudiff
