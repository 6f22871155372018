#include "nudiff/metrics.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <stdexcept>

namespace nudiff {

Mask foreground(const InstanceMap& inst) {
  Mask m(inst.height, inst.width);
  for (size_t i = 0; i < inst.labels.size(); ++i) m.fg[i] = inst.labels[i] > 0 ? 1 : 0;
  return m;
}

Mask foreground(const NucleiStructure& ns) {
  Mask m(ns.height, ns.width);
  for (size_t i = 0; i < ns.semantic.size(); ++i) m.fg[i] = ns.semantic[i] > 0.0 ? 1 : 0;
  return m;
}

double dice(const Mask& pred, const Mask& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw std::invalid_argument("dice: shape mismatch");
  int64_t p = 0, g = 0, both = 0;
  for (size_t i = 0; i < pred.fg.size(); ++i) {
    p += pred.fg[i] ? 1 : 0;
    g += gt.fg[i] ? 1 : 0;
    both += (pred.fg[i] && gt.fg[i]) ? 1 : 0;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

double aji(const InstanceMap& pred, const InstanceMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw std::invalid_argument("aji: shape mismatch");
  uint32_t ng = gt.max_label();
  uint32_t np = pred.max_label();
  if (ng == 0 && np == 0) return 1.0;

  std::vector<int64_t> garea(ng + 1, 0), parea(np + 1, 0);
  // inter[g] lists (pred id, overlap) pairs in ascending pred id.
  std::vector<std::vector<std::pair<uint32_t, int64_t>>> inter(ng + 1);
  for (size_t i = 0; i < gt.labels.size(); ++i) {
    uint32_t g = gt.labels[i], p = pred.labels[i];
    if (g) ++garea[g];
    if (p) ++parea[p];
    if (g && p) {
      auto& row = inter[g];
      auto it = std::lower_bound(row.begin(), row.end(), p,
                                 [](const auto& e, uint32_t id) { return e.first < id; });
      if (it != row.end() && it->first == p)
        ++it->second;
      else
        row.insert(it, {p, 1});
    }
  }

  std::vector<uint8_t> used(np + 1, 0);
  int64_t num = 0, den = 0;
  for (uint32_t g = 1; g <= ng; ++g) {
    uint32_t best = 0;
    int64_t best_i = 0, best_u = 0;
    double best_iou = 0.0;
    for (const auto& [p, ov] : inter[g]) {
      if (used[p]) continue;
      int64_t u = garea[g] + parea[p] - ov;
      double iou = static_cast<double>(ov) / static_cast<double>(u);
      if (iou > best_iou) {
        best = p;
        best_iou = iou;
        best_i = ov;
        best_u = u;
      }
    }
    if (best == 0) {
      den += garea[g];
    } else {
      used[best] = 1;
      num += best_i;
      den += best_u;
    }
  }
  for (uint32_t p = 1; p <= np; ++p)
    if (!used[p]) den += parea[p];
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

MetricReport aggregate(std::vector<ImageMetrics> per_image) {
  MetricReport r;
  r.per_image = std::move(per_image);
  if (r.per_image.empty()) return r;
  for (const auto& m : r.per_image) {
    r.dice += m.dice;
    r.aji += m.aji;
  }
  r.dice /= static_cast<double>(r.per_image.size());
  r.aji /= static_cast<double>(r.per_image.size());
  return r;
}

std::string report_csv(const MetricReport& report) {
  std::string out = "image_id,dice,aji\n";
  char buf[128];
  for (const auto& m : report.per_image) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f\n", m.dice, m.aji);
    out += m.image_id;
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%.6f,%.6f\n", report.dice, report.aji);
  out += buf;
  return out;
}

}  // namespace nudiff
