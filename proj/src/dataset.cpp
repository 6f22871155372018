#include "nudiff/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "nudiff/raster_io.hpp"

namespace nudiff {

namespace {

// Multiples of stride in [0, dim-size], plus dim-size when the remainder
// does not land on the grid.
std::vector<int> window_origins(int dim, int size, int stride) {
  std::vector<int> o;
  for (int p = 0; p + size <= dim; p += stride) o.push_back(p);
  if ((dim - size) % stride != 0) o.push_back(dim - size);
  return o;
}

}  // namespace

PatchSet extract_patches(const ImageRaster& image, const InstanceMap& inst, int size, int stride,
                         const std::string& source_id) {
  if (image.height != inst.height || image.width != inst.width)
    throw std::invalid_argument("extract_patches: image/instance shape mismatch");
  if (stride < 1) throw std::invalid_argument("extract_patches: stride must be >= 1");
  if (size < 1 || size > image.height || size > image.width)
    throw std::invalid_argument("extract_patches: size exceeds image dimension");

  std::vector<int> rows = window_origins(image.height, size, stride);
  std::vector<int> cols = window_origins(image.width, size, stride);

  PatchSet set;
  set.size = size;
  set.entries.reserve(rows.size() * cols.size());
  for (int r : rows)
    for (int c : cols) {
      Patch p;
      p.source = source_id;
      p.row = r;
      p.col = c;
      p.image = ImageRaster(size, size, image.channels);
      for (int ch = 0; ch < image.channels; ++ch)
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) p.image.at(ch, y, x) = image.at(ch, r + y, c + x);
      InstanceMap window(size, size);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) window.at(y, x) = inst.at(r + y, c + x);
      p.inst = canonicalize(window);
      set.entries.push_back(std::move(p));
    }
  return set;
}

FeatureVector patch_features(const ImageRaster& patch, const InstanceMap& inst) {
  if (patch.height != inst.height || patch.width != inst.width)
    throw std::invalid_argument("patch_features: image/instance shape mismatch");
  if (patch.channels != 3) throw std::invalid_argument("patch_features: expected 3 channels");
  const int h = patch.height, w = patch.width;
  const size_t npix = static_cast<size_t>(h) * w;

  FeatureVector f;
  for (int c = 0; c < 3; ++c)
    for (size_t i = 0; i < npix; ++i) {
      double v = patch.data[c * npix + i];
      int bin = static_cast<int>((v + 1.0) * 4.0);
      bin = std::clamp(bin, 0, 7);
      f.values[c * 8 + bin] += 1.0;
    }
  for (int i = 0; i < 24; ++i) f.values[i] /= static_cast<double>(npix);

  std::vector<double> gray(npix);
  for (size_t i = 0; i < npix; ++i)
    gray[i] = (patch.data[i] + patch.data[npix + i] + patch.data[2 * npix + i]) / 3.0;

  // Replicate-clamped central differences.
  double grad_sum = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double gx = (gray[static_cast<size_t>(y) * w + std::min(x + 1, w - 1)] -
                   gray[static_cast<size_t>(y) * w + std::max(x - 1, 0)]) *
                  0.5;
      double gy = (gray[static_cast<size_t>(std::min(y + 1, h - 1)) * w + x] -
                   gray[static_cast<size_t>(std::max(y - 1, 0)) * w + x]) *
                  0.5;
      grad_sum += std::sqrt(gx * gx + gy * gy);
    }
  f.values[24] = grad_sum / static_cast<double>(npix);

  int64_t fg_n = 0;
  double fg_s = 0.0, fg_s2 = 0.0;
  for (size_t i = 0; i < npix; ++i)
    if (inst.labels[i] > 0) {
      ++fg_n;
      fg_s += gray[i];
      fg_s2 += gray[i] * gray[i];
    }
  if (fg_n > 0) {
    double mean = fg_s / static_cast<double>(fg_n);
    f.values[25] = mean;
    f.values[26] = std::max(0.0, fg_s2 / static_cast<double>(fg_n) - mean * mean);
  }

  double norm = 0.0;
  for (double v : f.values) norm += v * v;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (double& v : f.values) v /= norm;
  return f;
}

namespace {

double dist2(const FeatureVector& a, const FeatureVector& b) {
  double s = 0.0;
  for (int i = 0; i < FeatureVector::kDim; ++i) {
    double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return s;
}

}  // namespace

ClusterAssignment kmeans(const std::vector<FeatureVector>& features, int k, Rng seed, int max_iter,
                         std::vector<double>* objective) {
  const size_t n = features.size();
  if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
  if (n < static_cast<size_t>(k)) throw std::invalid_argument("kmeans: fewer points than clusters");
  if (objective) objective->clear();

  // k-means++ seeding: first center uniform, the rest d^2-weighted.
  std::vector<FeatureVector> centers;
  centers.reserve(static_cast<size_t>(k));
  centers.push_back(features[static_cast<size_t>(seed.uniform_int(static_cast<int>(n)))]);
  std::vector<double> d2(n);
  for (size_t i = 0; i < n; ++i) d2[i] = dist2(features[i], centers[0]);
  while (centers.size() < static_cast<size_t>(k)) {
    double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    size_t pick = n - 1;
    if (total > 0.0) {
      double u = seed.uniform() * total;
      double cum = 0.0;
      for (size_t i = 0; i < n; ++i) {
        cum += d2[i];
        if (cum > u) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<size_t>(seed.uniform_int(static_cast<int>(n)));
    }
    centers.push_back(features[pick]);
    for (size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], dist2(features[i], centers.back()));
  }

  std::vector<int> label(n, -1);
  std::vector<double> own_d2(n, 0.0);
  for (int iter = 0;; ++iter) {
    bool changed = false;
    double obj = 0.0;
    for (size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = dist2(features[i], centers[0]);
      for (int j = 1; j < k; ++j) {
        double d = dist2(features[i], centers[static_cast<size_t>(j)]);
        if (d < best_d) {
          best_d = d;
          best = j;
        }
      }
      if (label[i] != best) changed = true;
      label[i] = best;
      own_d2[i] = best_d;
      obj += best_d;
    }
    if (objective) objective->push_back(obj);
    if (!changed && iter > 0) break;
    if (iter >= max_iter) break;

    std::vector<FeatureVector> sums(static_cast<size_t>(k));
    std::vector<int64_t> count(static_cast<size_t>(k), 0);
    for (size_t i = 0; i < n; ++i) {
      auto& s = sums[static_cast<size_t>(label[i])];
      for (int d = 0; d < FeatureVector::kDim; ++d) s.values[d] += features[i].values[d];
      ++count[static_cast<size_t>(label[i])];
    }
    for (int j = 0; j < k; ++j)
      if (count[static_cast<size_t>(j)] > 0) {
        auto& c = centers[static_cast<size_t>(j)];
        for (int d = 0; d < FeatureVector::kDim; ++d)
          c.values[d] =
              sums[static_cast<size_t>(j)].values[d] / static_cast<double>(count[static_cast<size_t>(j)]);
      }
    // Empty clusters steal the farthest point (ties to the lowest index).
    std::vector<uint8_t> stolen(n, 0);
    for (int j = 0; j < k; ++j) {
      if (count[static_cast<size_t>(j)] > 0) continue;
      size_t far = 0;
      double far_d = -1.0;
      for (size_t i = 0; i < n; ++i)
        if (!stolen[i] && own_d2[i] > far_d) {
          far_d = own_d2[i];
          far = i;
        }
      centers[static_cast<size_t>(j)] = features[far];
      stolen[far] = 1;
    }
  }

  ClusterAssignment a;
  a.k = k;
  a.centers = std::move(centers);
  a.labels.resize(n);
  a.distance.resize(n);
  for (size_t i = 0; i < n; ++i) {
    a.labels[i] = label[i] + 1;
    a.distance[i] = std::sqrt(own_d2[i]);
  }
  return a;
}

PatchSet select_subset(const PatchSet& patches, const ClusterAssignment& assignment,
                       double proportion) {
  if (!(proportion > 0.0 && proportion <= 1.0))
    throw std::invalid_argument("select_subset: proportion must be in (0,1]");
  const size_t n = patches.entries.size();
  if (assignment.labels.size() != n)
    throw std::invalid_argument("select_subset: assignment does not cover the patch set");
  const int k = assignment.k;
  const int64_t target = std::llround(proportion * static_cast<double>(n));

  std::vector<int64_t> size(static_cast<size_t>(k), 0);
  for (int lab : assignment.labels) ++size[static_cast<size_t>(lab - 1)];

  // Largest-remainder quotas, ties to the lower cluster index.
  std::vector<int64_t> quota(static_cast<size_t>(k), 0);
  std::vector<std::pair<int64_t, int>> rem;
  int64_t assigned = 0;
  for (int j = 0; j < k; ++j) {
    int64_t num = target * size[static_cast<size_t>(j)];
    quota[static_cast<size_t>(j)] = num / static_cast<int64_t>(n);
    assigned += quota[static_cast<size_t>(j)];
    rem.push_back({num % static_cast<int64_t>(n), j});
  }
  std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  for (int64_t i = 0; i < target - assigned; ++i)
    ++quota[static_cast<size_t>(rem[static_cast<size_t>(i)].second)];

  // Per cluster, ascending (distance, source, row, col).
  std::vector<std::vector<size_t>> members(static_cast<size_t>(k));
  for (size_t i = 0; i < n; ++i) members[static_cast<size_t>(assignment.labels[i] - 1)].push_back(i);
  std::vector<size_t> picked;
  picked.reserve(static_cast<size_t>(target));
  for (int j = 0; j < k; ++j) {
    auto& m = members[static_cast<size_t>(j)];
    std::sort(m.begin(), m.end(), [&](size_t a, size_t b) {
      const Patch& pa = patches.entries[a];
      const Patch& pb = patches.entries[b];
      return std::tie(assignment.distance[a], pa.source, pa.row, pa.col) <
             std::tie(assignment.distance[b], pb.source, pb.row, pb.col);
    });
    for (int64_t i = 0; i < quota[static_cast<size_t>(j)] && i < static_cast<int64_t>(m.size()); ++i)
      picked.push_back(m[static_cast<size_t>(i)]);
  }
  std::sort(picked.begin(), picked.end(), [&](size_t a, size_t b) {
    const Patch& pa = patches.entries[a];
    const Patch& pb = patches.entries[b];
    return std::tie(pa.source, pa.row, pa.col) < std::tie(pb.source, pb.row, pb.col);
  });

  PatchSet out;
  out.size = patches.size;
  out.entries.reserve(picked.size());
  for (size_t i : picked) out.entries.push_back(patches.entries[i]);
  return out;
}

void write_manifest(const Manifest& manifest, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_manifest: cannot open " + path);
  f << "image_path,instance_path,origin\n";
  for (const auto& e : manifest) f << e.image_path << ',' << e.instance_path << ',' << e.origin << '\n';
  if (!f) throw std::runtime_error("write_manifest: write failed for " + path);
}

Manifest read_manifest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_manifest: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != "image_path,instance_path,origin")
    throw std::runtime_error("read_manifest: bad header in " + path);
  Manifest m;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    size_t c1 = line.find(',');
    size_t c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c2 == std::string::npos) throw std::runtime_error("read_manifest: bad row in " + path);
    m.push_back({line.substr(0, c1), line.substr(c1 + 1, c2 - c1 - 1), line.substr(c2 + 1)});
  }
  return m;
}

Manifest assemble_augmented(const PatchSet& real,
                            const std::vector<std::pair<ImageRaster, InstanceMap>>& synthetic,
                            const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  // Manifest paths are relative to out_dir so the tree is relocatable.
  Manifest m;
  char buf[64];
  for (const Patch& p : real.entries) {
    std::snprintf(buf, sizeof buf, "_r%d_c%d", p.row, p.col);
    std::string stem = (p.source.empty() ? "patch" : p.source) + buf;
    write_image(p.image, out_dir + "/" + stem + ".png");
    write_instance(p.inst, out_dir + "/" + stem + "_inst.png");
    m.push_back({stem + ".png", stem + "_inst.png", "real"});
  }
  for (size_t i = 0; i < synthetic.size(); ++i) {
    std::snprintf(buf, sizeof buf, "synth_%04zu", i);
    std::string stem = buf;
    write_image(synthetic[i].first, out_dir + "/" + stem + ".png");
    write_instance(synthetic[i].second, out_dir + "/" + stem + "_inst.png");
    m.push_back({stem + ".png", stem + "_inst.png", "synthetic"});
  }
  write_manifest(m, out_dir + "/manifest.csv");
  return m;
}

}  // namespace nudiff
