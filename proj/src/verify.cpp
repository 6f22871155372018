#include "nudiff/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "nudiff/dataset.hpp"
#include "nudiff/diffusion.hpp"
#include "nudiff/metrics.hpp"
#include "nudiff/net/denoiser.hpp"
#include "nudiff/net/train.hpp"
#include "nudiff/pipeline.hpp"
#include "nudiff/raster_io.hpp"
#include "nudiff/rng.hpp"
#include "nudiff/structure_codec.hpp"
#include "nudiff/toydata.hpp"

namespace fs = std::filesystem;

namespace nudiff {

namespace {

struct Checker {
  int failed = 0;

  void check(const std::string& name, bool ok, const std::string& detail = "") {
    if (ok) {
      std::printf("[PASS] %s\n", name.c_str());
    } else {
      ++failed;
      std::printf("[FAIL] %s%s%s\n", name.c_str(), detail.empty() ? "" : ": ", detail.c_str());
    }
    std::fflush(stdout);
  }
};

std::string fmt(const char* f, double a, double b) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

std::string fmt1(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------- schedule

void suite_schedule(Checker& c) {
  NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  bool decreasing = true;
  for (int t = 1; t < s.T; ++t)
    if (!(s.alpha_bar[t] < s.alpha_bar[t - 1])) decreasing = false;
  c.check("schedule: alpha_bar strictly decreasing", decreasing);

  const int n = 10000;
  const double y0v = 0.5;
  Rng rng(2024);
  for (int t : {1, 500, 1000}) {
    Tensor y0({n}, y0v), eps({n});
    rng.fill_normal(eps);
    Tensor q = q_sample(y0, t, eps, s);
    double mean = 0.0;
    for (double v : q.v) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : q.v) var += (v - mean) * (v - mean);
    var /= n - 1;

    double abar = s.alpha_bar[t - 1];
    double want_mean = std::sqrt(abar) * y0v;
    double want_var = 1.0 - abar;
    double se_mean = std::sqrt(want_var / n);
    double se_var = want_var * std::sqrt(2.0 / (n - 1));
    c.check("schedule: q_sample mean at t=" + std::to_string(t),
            std::abs(mean - want_mean) <= 3.0 * se_mean,
            fmt("got %.6f want %.6f", mean, want_mean));
    c.check("schedule: q_sample variance at t=" + std::to_string(t),
            std::abs(var - want_var) <= 3.0 * se_var, fmt("got %.6f want %.6f", var, want_var));
  }
}

// ------------------------------------------------------------------ oracle

void suite_oracle(Checker& c) {
  NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  const double mu = 0.3, var = 0.04, sd = 0.2;

  // The closed form must match a Monte-Carlo linear regression of eps on y_t.
  {
    const int t = 500;
    const double abar = s.alpha_bar[t - 1];
    const int m = 200000;
    Rng rng(7);
    double sy = 0, se = 0, syy = 0, sye = 0;
    for (int i = 0; i < m; ++i) {
      double y0 = mu + sd * rng.normal();
      double e = rng.normal();
      double y = std::sqrt(abar) * y0 + std::sqrt(1.0 - abar) * e;
      sy += y;
      se += e;
      syy += y * y;
      sye += y * e;
    }
    double ybar = sy / m, ebar = se / m;
    double slope_mc = (sye / m - ybar * ebar) / (syy / m - ybar * ybar);
    double icept_mc = ebar - slope_mc * ybar;
    double k = std::sqrt(1.0 - abar) / (abar * var + 1.0 - abar);
    double icept = -k * std::sqrt(abar) * mu;
    c.check("oracle: regression slope within 1% at t=500",
            std::abs(slope_mc - k) <= 0.01 * std::abs(k), fmt("got %.6f want %.6f", slope_mc, k));
    c.check("oracle: regression intercept within 1% at t=500",
            std::abs(icept_mc - icept) <= 0.01 * std::abs(icept),
            fmt("got %.6f want %.6f", icept_mc, icept));

    GaussianOracleDenoiser g(mu, var, s);
    Tensor probe({1, 1, 1, 2});
    probe[0] = 0.4;
    probe[1] = -0.9;
    Tensor pred = g.predict(probe, {t}, nullptr);
    bool formula_ok = true;
    for (int64_t i = 0; i < 2; ++i) {
      double want = k * (probe[i] - std::sqrt(abar) * mu);
      if (std::abs(pred[i] - want) > 1e-12) formula_ok = false;
    }
    c.check("oracle: predictor matches the closed form", formula_ok);
  }

  // Full ancestral sampling recovers the target moments.
  {
    GaussianOracleDenoiser g(mu, var, s);
    Tensor out = sample(g, {1, 100, 100}, s, nullptr, 0.0, Rng(11));
    const int n = 10000;
    double mean = 0.0;
    for (double v : out.v) mean += v;
    mean /= n;
    double sample_var = 0.0;
    for (double v : out.v) sample_var += (v - mean) * (v - mean);
    sample_var /= n - 1;
    c.check("oracle: ancestral mean within 3 SE",
            std::abs(mean - mu) <= 3.0 * std::sqrt(var / n), fmt("got %.6f want %.6f", mean, mu));
    c.check("oracle: ancestral variance within 10%", std::abs(sample_var - var) <= 0.1 * var,
            fmt("got %.6f want %.6f", sample_var, var));
  }
}

// --------------------------------------------------------------- gradients

void suite_gradients(Checker& c) {
  NetworkShape sh;
  sh.levels = 2;
  sh.channels = {4, 6};
  sh.attn_levels = {2};
  sh.base_resolution = 8;
  sh.blocks = 1;
  Rng init(3);
  UNetDenoiser net(sh, true, init);
  const int T = 50;

  Rng data(17);
  const int N = 2, H = 8, W = 8;
  const int64_t numel = static_cast<int64_t>(N) * 3 * H * W;
  for (int batch = 0; batch < 5; ++batch) {
    Tensor x({N, 3, H, W}), cond({N, 3, H, W}), target({N, 3, H, W});
    data.fill_normal(x);
    data.fill_normal(cond);
    data.fill_normal(target);
    std::vector<int> t(N);
    for (int& v : t) v = 1 + data.uniform_int(T);
    std::vector<uint8_t> drop = {static_cast<uint8_t>(batch % 2),
                                 static_cast<uint8_t>((batch + 1) % 2)};

    auto loss_of = [&]() {
      Tensor pred = net.forward_train(x, t, &cond, drop);
      return simple_loss(pred, target);
    };

    net.zero_grad();
    Tensor pred = net.forward_train(x, t, &cond, drop);
    Tensor d(pred.dims);
    for (int64_t i = 0; i < numel; ++i) d[i] = 2.0 * (pred[i] - target[i]) / numel;
    net.backward(d);
    std::map<std::string, Tensor> analytic;
    for (const auto& p : net.params().all()) analytic.emplace(p->name, p->grad);

    double worst = 0.0;
    std::string worst_name;
    Rng idx_rng(100 + batch);
    for (const auto& p : net.params().all()) {
      std::vector<int64_t> idx;
      if (p->value.numel() <= 8) {
        for (int64_t i = 0; i < p->value.numel(); ++i) idx.push_back(i);
      } else {
        std::set<int64_t> seen;
        while (seen.size() < 8)
          seen.insert(idx_rng.uniform_int(static_cast<int>(p->value.numel())));
        idx.assign(seen.begin(), seen.end());
      }
      double nn = 0.0, dd = 0.0;
      const Tensor& an = analytic.at(p->name);
      for (int64_t i : idx) {
        double orig = p->value[i];
        double h = 1e-5 * std::max(1.0, std::abs(orig));
        p->value[i] = orig + h;
        double lp = loss_of();
        p->value[i] = orig - h;
        double lm = loss_of();
        p->value[i] = orig;
        double fd = (lp - lm) / (2.0 * h);
        nn += (fd - an[i]) * (fd - an[i]);
        dd = std::max(dd, std::max(std::abs(fd), std::abs(an[i])));
      }
      double err = std::sqrt(nn / idx.size()) / std::max(dd, 1e-8);
      if (err > worst) {
        worst = err;
        worst_name = p->name;
      }
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "worst group %s rel err %.3g", worst_name.c_str(), worst);
    c.check("gradients: batch " + std::to_string(batch) + " finite differences agree", worst <= 1e-3,
            buf);
  }
}

// --------------------------------------------------------------------- cfg

void suite_cfg(Checker& c) {
  Rng rng(5);
  Tensor a({2, 3, 4, 4}), b({2, 3, 4, 4});
  rng.fill_normal(a);
  rng.fill_normal(b);

  Tensor w0 = cfg_combine(a, b, 0.0);
  bool exact0 = true;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (w0[i] != a[i]) exact0 = false;
  c.check("cfg: w=0 returns the conditional prediction exactly", exact0);

  Tensor wm1 = cfg_combine(a, b, -1.0);
  bool exact1 = true;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (wm1[i] != b[i]) exact1 = false;
  c.check("cfg: w=-1 returns the unconditional prediction exactly", exact1);

  const double w1 = 0.7, w2 = 2.3;
  Tensor c1 = cfg_combine(a, b, w1);
  Tensor c2 = cfg_combine(a, b, w2);
  Tensor cm = cfg_combine(a, b, (w1 + w2) / 2.0);
  double worst = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(c1[i] + c2[i] - 2.0 * cm[i]));
  c.check("cfg: linear in w to 1e-12", worst <= 1e-12, fmt1("max dev %.3g", worst));

  double worst_dir = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    worst_dir = std::max(worst_dir, std::abs((c1[i] - a[i]) - w1 * (a[i] - b[i])));
  c.check("cfg: deviation from cond scales as w*(cond-uncond)", worst_dir <= 1e-12);
}

// --------------------------------------------------------------- structure

void suite_structure(Checker& c) {
  Rng root(42);
  double mean_aji = 1.0, worst_aji = 1.0;
  bool invariants = true;
  std::string inv_detail;
  double sum = 0.0;
  for (int i = 0; i < 100; ++i) {
    Rng r = root.stream(static_cast<uint64_t>(i));
    int count = 3 + r.child("count").uniform_int(6);
    InstanceMap m = toy_instances(64, 64, count, r.child("geom"));
    NucleiStructure ns = encode_structure(m);

    uint32_t n_ids = m.max_label();
    std::vector<double> hmin(n_ids + 1, 1e9), hmax(n_ids + 1, -1e9);
    std::vector<double> vmin(n_ids + 1, 1e9), vmax(n_ids + 1, -1e9);
    for (size_t p = 0; p < m.labels.size(); ++p) {
      uint32_t id = m.labels[p];
      if (id == 0) {
        if (ns.semantic[p] != -1.0 || ns.hdist[p] != 0.0 || ns.vdist[p] != 0.0) {
          invariants = false;
          inv_detail = "background not (-1,0,0) on map " + std::to_string(i);
        }
      } else {
        if (ns.semantic[p] != 1.0 || std::abs(ns.hdist[p]) > 1.0 || std::abs(ns.vdist[p]) > 1.0) {
          invariants = false;
          inv_detail = "range violated on map " + std::to_string(i);
        }
        hmin[id] = std::min(hmin[id], ns.hdist[p]);
        hmax[id] = std::max(hmax[id], ns.hdist[p]);
        vmin[id] = std::min(vmin[id], ns.vdist[p]);
        vmax[id] = std::max(vmax[id], ns.vdist[p]);
      }
    }
    for (uint32_t id = 1; id <= n_ids; ++id)
      if (!(hmin[id] <= 0.0 && hmax[id] >= 0.0 && vmin[id] <= 0.0 && vmax[id] >= 0.0)) {
        invariants = false;
        inv_detail = "per-nucleus span violated on map " + std::to_string(i);
      }

    InstanceMap rec = reconstruct_instances(ns, {});
    double a = aji(rec, m);
    sum += a;
    worst_aji = std::min(worst_aji, a);
  }
  mean_aji = sum / 100.0;
  c.check("structure: encode invariants on 100 maps", invariants, inv_detail);
  c.check("structure: round-trip AJI >= 0.90 per map", worst_aji >= 0.90,
          fmt1("worst %.4f", worst_aji));
  c.check("structure: round-trip AJI >= 0.95 mean", mean_aji >= 0.95, fmt1("mean %.4f", mean_aji));
}

// ----------------------------------------------------------------- metrics

// Independent AJI reimplementation over explicit pixel sets.
double aji_reference(const InstanceMap& pred, const InstanceMap& gt) {
  std::map<uint32_t, std::set<size_t>> gset, pset;
  for (size_t i = 0; i < gt.labels.size(); ++i) {
    if (gt.labels[i]) gset[gt.labels[i]].insert(i);
    if (pred.labels[i]) pset[pred.labels[i]].insert(i);
  }
  if (gset.empty() && pset.empty()) return 1.0;
  std::set<uint32_t> used;
  double num = 0.0, den = 0.0;
  for (const auto& [g, gp] : gset) {
    uint32_t best = 0;
    double best_iou = 0.0;
    size_t best_i = 0, best_u = 0;
    for (const auto& [p, pp] : pset) {
      if (used.count(p)) continue;
      size_t inter = 0;
      for (size_t px : gp) inter += pp.count(px);
      if (inter == 0) continue;
      size_t uni = gp.size() + pp.size() - inter;
      double iou = static_cast<double>(inter) / static_cast<double>(uni);
      if (iou > best_iou) {
        best = p;
        best_iou = iou;
        best_i = inter;
        best_u = uni;
      }
    }
    if (best == 0) {
      den += static_cast<double>(gp.size());
    } else {
      used.insert(best);
      num += static_cast<double>(best_i);
      den += static_cast<double>(best_u);
    }
  }
  for (const auto& [p, pp] : pset)
    if (!used.count(p)) den += static_cast<double>(pp.size());
  return den == 0.0 ? 1.0 : num / den;
}

InstanceMap permute_ids(const InstanceMap& m, Rng rng) {
  uint32_t n = m.max_label();
  std::vector<uint32_t> perm(n + 1);
  for (uint32_t i = 0; i <= n; ++i) perm[i] = i;
  for (uint32_t i = n; i >= 2; --i)
    std::swap(perm[i], perm[1 + static_cast<uint32_t>(rng.uniform_int(static_cast<int>(i)))]);
  InstanceMap out = m;
  for (auto& v : out.labels) v = perm[v];
  return out;
}

void suite_metrics(Checker& c) {
  // Hand examples.
  {
    InstanceMap a(4, 4);
    a.at(1, 1) = 1;
    a.at(1, 2) = 1;
    c.check("metrics: dice(pred=gt) = 1", dice(foreground(a), foreground(a)) == 1.0);
    InstanceMap b(4, 4);
    b.at(3, 3) = 1;
    c.check("metrics: dice disjoint = 0", dice(foreground(a), foreground(b)) == 0.0);

    Mask p(4, 4), g(4, 4);
    p.fg[0] = p.fg[1] = p.fg[2] = p.fg[3] = 1;
    g.fg[2] = g.fg[3] = g.fg[4] = g.fg[5] = 1;
    c.check("metrics: dice 2*2/(4+4) = 0.5", dice(p, g) == 0.5);

    // One 2x2 ground-truth nucleus; prediction covers 2 of its pixels plus 1
    // outside pixel: AJI = 2 / (4 + 2 - 2 + 1) = 0.4.
    InstanceMap gt(4, 4), pr(4, 4);
    gt.at(0, 0) = gt.at(0, 1) = gt.at(1, 0) = gt.at(1, 1) = 1;
    pr.at(0, 0) = pr.at(0, 1) = pr.at(2, 2) = 1;
    c.check("metrics: aji hand case = 0.4", std::abs(aji(pr, gt) - 0.4) < 1e-15,
            fmt("got %.6f want %.6f", aji(pr, gt), 0.4));

    InstanceMap empty(4, 4);
    c.check("metrics: aji(empty, nonempty) = 0", aji(empty, gt) == 0.0);
    c.check("metrics: aji(empty, empty) = 1", aji(empty, empty) == 1.0);
    c.check("metrics: dice(empty, empty) = 1", dice(foreground(empty), foreground(empty)) == 1.0);
  }

  // Randomized agreement with the reference and the aggregated-union penalty
  // AJI <= Dice, on 100 pairs (half independent maps, half reconstructions).
  // Permutation invariance is checked on the reconstruction pairs: the greedy
  // unused-prediction matching visits ground-truth ids in order, so it is
  // only order-free when no two ground-truth instances contend for the same
  // prediction, which the well-separated pairs guarantee.
  Rng root(99);
  bool agree = true, perm_ok = true, penalty_ok = true, perfect_ok = true;
  std::string detail;
  for (int i = 0; i < 100; ++i) {
    Rng r = root.stream(static_cast<uint64_t>(i));
    InstanceMap gt = toy_instances(32, 32, 1 + r.child("gn").uniform_int(4), r.child("g"));
    InstanceMap pr;
    if (i % 2 == 0) {
      pr = toy_instances(32, 32, 1 + r.child("pn").uniform_int(4), r.child("p"));
    } else {
      pr = reconstruct_instances(encode_structure(gt), {});
    }
    double ours = aji(pr, gt);
    double ref = aji_reference(pr, gt);
    if (std::abs(ours - ref) > 1e-12) {
      agree = false;
      detail = "pair " + std::to_string(i);
    }
    if (ours > dice(foreground(pr), foreground(gt)) + 1e-12) penalty_ok = false;
    if (i % 2 == 1) {
      InstanceMap pp = permute_ids(pr, r.child("perm1"));
      InstanceMap gp = permute_ids(gt, r.child("perm2"));
      if (std::abs(aji(pp, gt) - ours) > 1e-12 || std::abs(aji(pr, gp) - ours) > 1e-12)
        perm_ok = false;
      if (aji(permute_ids(gt, r.child("perm3")), gt) != 1.0) perfect_ok = false;
    }
  }
  c.check("metrics: aji equals reference on 100 pairs", agree, detail);
  c.check("metrics: aji invariant to id permutations", perm_ok);
  c.check("metrics: aji <= dice of binarized maps", penalty_ok);
  c.check("metrics: aji(permuted gt, gt) = 1", perfect_ok);
}

// ------------------------------------------------------------- determinism

void write_toy_inputs(const std::string& data_dir, int n, int hw, Rng rng) {
  fs::create_directories(data_dir + "/images");
  fs::create_directories(data_dir + "/instances");
  auto pairs = toy_dataset(n, hw, hw, 2, 4, rng);
  char buf[32];
  for (size_t i = 0; i < pairs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "toy%02zu.png", i);
    write_image(pairs[i].first, data_dir + "/images/" + buf);
    write_instance(pairs[i].second, data_dir + "/instances/" + buf);
  }
}

std::map<std::string, std::vector<char>> read_tree(const std::string& root) {
  std::map<std::string, std::vector<char>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream f(e.path(), std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    out[fs::relative(e.path(), root).string()] = std::move(bytes);
  }
  return out;
}

void run_toy_pipeline(const std::string& data_dir, const std::string& root, const RunConfig& cfg) {
  fs::create_directories(root);
  run_prepare(data_dir, root + "/prep", 0.5, cfg);
  run_train_structure(root + "/prep/manifest.csv", root + "/s.ckpt", cfg);
  run_train_image(root + "/prep/manifest.csv", root + "/i.ckpt", cfg);
  run_synth(root + "/s.ckpt", root + "/i.ckpt", 2, cfg.guidance_w, root + "/synth", cfg);
  run_decode(root + "/synth", root + "/dec", cfg);
  run_evaluate(root + "/dec", root + "/dec", root + "/report.csv");
}

void suite_determinism(Checker& c) {
  RunConfig cfg;
  cfg.T = 40;
  cfg.beta1 = 1e-3;
  cfg.betaT = 0.2;
  cfg.levels = 2;
  cfg.channels = {8, 16};
  cfg.attn_levels = {2};
  cfg.base_resolution = 16;
  cfg.blocks = 1;
  cfg.steps = 0;
  cfg.finetune_steps = 0;
  cfg.batch = 2;
  cfg.seed = 123;
  cfg.patch_size = 16;
  cfg.patch_stride = 16;
  cfg.k = 2;

  std::string base = (fs::temp_directory_path() / "nudiff-verify-determinism").string();
  fs::remove_all(base);
  write_toy_inputs(base + "/data", 2, 32, Rng(7));
  run_toy_pipeline(base + "/data", base + "/run1", cfg);
  run_toy_pipeline(base + "/data", base + "/run2", cfg);

  auto t1 = read_tree(base + "/run1");
  auto t2 = read_tree(base + "/run2");
  bool same_names = true, same_bytes = true;
  std::string detail;
  if (t1.size() != t2.size()) {
    same_names = false;
    detail = "file counts differ";
  }
  for (const auto& [name, bytes] : t1) {
    auto it = t2.find(name);
    if (it == t2.end()) {
      same_names = false;
      detail = "missing " + name;
    } else if (it->second != bytes) {
      same_bytes = false;
      detail = "bytes differ for " + name;
    }
  }
  c.check("determinism: identical artifact file sets", same_names, detail);
  c.check("determinism: byte-identical artifacts", same_bytes, detail);

  MetricReport rep = run_evaluate(base + "/run1/dec", base + "/run1/dec", base + "/self.csv");
  bool ones = rep.dice == 1.0 && rep.aji == 1.0;
  for (const auto& m : rep.per_image) ones = ones && m.dice == 1.0 && m.aji == 1.0;
  c.check("determinism: self-evaluation reports all 1.0", ones);
  fs::remove_all(base);
}

// --------------------------------------------------------------------- e2e

double mean_of(const std::vector<double>& v, size_t from, size_t to) {
  double s = 0.0;
  for (size_t i = from; i < to; ++i) s += v[i];
  return s / static_cast<double>(to - from);
}

void suite_e2e(Checker& c) {
  const int kStructSteps = 600;
  const int kImageSteps = 500;
  const int kBatch = 8;
  const double kLr = 3e-4;
  const int kSamples = 32;

  NoiseSchedule sched = linear_schedule(100, 1e-3, 0.2);
  NetworkShape sh;
  sh.levels = 3;
  sh.channels = {16, 32, 64};
  sh.attn_levels = {3};
  sh.base_resolution = 32;
  sh.blocks = 1;

  Rng root(1001);
  auto pairs = toy_dataset(200, 32, 32, 1, 3, root.child("data"));
  std::vector<TrainExample> struct_ds, image_ds;
  struct_ds.reserve(pairs.size());
  image_ds.reserve(pairs.size());
  for (const auto& [img, inst] : pairs) {
    Tensor ns = structure_to_tensor(encode_structure(inst));
    TrainExample se;
    se.target = ns;
    struct_ds.push_back(std::move(se));
    TrainExample ie;
    ie.target = image_to_tensor(img);
    ie.cond = ns;
    image_ds.push_back(std::move(ie));
  }

  // (a) unconditional structure model halves its loss.
  Rng sinit = root.child("s/init");
  UNetDenoiser snet(sh, false, sinit);
  {
    AdamW opt(snet.params(), kLr);
    TrainOptions topt;
    topt.steps = kStructSteps;
    topt.batch = kBatch;
    topt.drop_rate = 0.0;
    Rng rng = root.child("s/train");
    TrainResult res = train(snet, struct_ds, sched, opt, topt, rng);
    double first = mean_of(res.losses, 0, 20);
    double last = mean_of(res.losses, res.losses.size() - 20, res.losses.size());
    c.check("e2e: structure training halves the loss", last < 0.5 * first,
            fmt("first %.4f last %.4f", first, last));
  }

  // (b) conditional image model with condition dropout halves its loss.
  Rng iinit = root.child("i/init");
  UNetDenoiser inet(sh, true, iinit);
  {
    AdamW opt(inet.params(), kLr);
    TrainOptions topt;
    topt.steps = kImageSteps;
    topt.batch = kBatch;
    topt.drop_rate = 0.2;
    Rng rng = root.child("i/train");
    TrainResult res = train(inet, image_ds, sched, opt, topt, rng);
    double first = mean_of(res.losses, 0, 20);
    double last = mean_of(res.losses, res.losses.size() - 20, res.losses.size());
    c.check("e2e: image training halves the loss", last < 0.5 * first,
            fmt("first %.4f last %.4f", first, last));
  }

  // (c) paired sampling at w=2; decoded structures align with their masks.
  {
    Tensor structures =
        sample_batch(snet, kSamples, {3, 32, 32}, sched, nullptr, 0.0, root.child("sample/s"));
    sanitize_structure_batch(structures);
    Tensor images = sample_batch(inet, kSamples, {3, 32, 32}, sched, &structures, 2.0,
                                 root.child("sample/i"));
    bool images_ok = true;
    for (double v : images.v)
      if (!std::isfinite(v) || std::abs(v) > 1.0) images_ok = false;
    c.check("e2e: sampled images finite and in range", images_ok);

    const int64_t plane = 32 * 32;
    int with_nuclei = 0;
    double align = 0.0;
    for (int i = 0; i < kSamples; ++i) {
      Tensor s({3, 32, 32});
      std::memcpy(s.data(), structures.data() + i * 3 * plane, sizeof(double) * 3 * plane);
      NucleiStructure ns = tensor_to_structure(s);
      InstanceMap rec = reconstruct_instances(ns, {});
      if (rec.max_label() >= 1) ++with_nuclei;
      align += dice(foreground(ns), foreground(rec));
    }
    align /= kSamples;
    c.check("e2e: >= 90% of samples decode to >= 1 nucleus",
            with_nuclei >= static_cast<int>(std::ceil(0.9 * kSamples)),
            fmt("%.0f of %.0f", static_cast<double>(with_nuclei), static_cast<double>(kSamples)));
    c.check("e2e: mean mask/decoded alignment >= 0.7", align >= 0.7,
            fmt1("mean dice %.4f", align));
  }
}

// ---------------------------------------------------------------- droprate

void suite_droprate(Checker& c) {
  NetworkShape sh;
  sh.levels = 1;
  sh.channels = {2};
  sh.attn_levels = {};
  sh.base_resolution = 4;
  sh.blocks = 1;
  Rng init(8);
  UNetDenoiser net(sh, true, init);
  NoiseSchedule sched = linear_schedule(10, 1e-3, 0.2);

  Rng data(9);
  std::vector<TrainExample> ds(4);
  for (auto& ex : ds) {
    ex.target = Tensor({3, 4, 4});
    data.fill_normal(ex.target);
    Tensor cond({3, 4, 4});
    data.fill_normal(cond);
    ex.cond = cond;
  }

  AdamW opt(net.params(), 1e-5);
  TrainOptions topt;
  topt.steps = 10000;
  topt.batch = 1;
  topt.drop_rate = 0.2;
  Rng rng(10);
  TrainResult res = train(net, ds, sched, opt, topt, rng);
  double frac = static_cast<double>(res.null_cond_used) / static_cast<double>(res.examples_seen);
  c.check("droprate: null-condition fraction in [0.17, 0.23] over 1e4 steps",
          frac >= 0.17 && frac <= 0.23, fmt1("got %.4f", frac));
}

}  // namespace

std::vector<std::string> verify_suite_names() {
  return {"schedule", "oracle",      "gradients", "cfg", "structure",
          "metrics",  "determinism", "e2e",       "droprate"};
}

int run_verify_suite(const std::string& name) {
  Checker c;
  bool all = name == "all";
  bool known = all;
  auto want = [&](const char* n) { return all || name == n; };
  if (want("schedule")) {
    suite_schedule(c);
    known = true;
  }
  // "diffusion" is an alias for the oracle-sampler moment suite.
  if (want("oracle") || name == "diffusion") {
    suite_oracle(c);
    known = true;
  }
  if (want("gradients")) {
    suite_gradients(c);
    known = true;
  }
  if (want("cfg")) {
    suite_cfg(c);
    known = true;
  }
  if (want("structure")) {
    suite_structure(c);
    known = true;
  }
  if (want("metrics")) {
    suite_metrics(c);
    known = true;
  }
  if (want("determinism")) {
    suite_determinism(c);
    known = true;
  }
  if (want("e2e")) {
    suite_e2e(c);
    known = true;
  }
  if (want("droprate")) {
    suite_droprate(c);
    known = true;
  }
  if (!known) throw std::invalid_argument("unknown verify suite: " + name);
  return c.failed;
}

}  // namespace nudiff
