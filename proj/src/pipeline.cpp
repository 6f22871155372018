#include "nudiff/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "nudiff/dataset.hpp"
#include "nudiff/diffusion.hpp"
#include "nudiff/net/denoiser.hpp"
#include "nudiff/net/train.hpp"
#include "nudiff/raster_io.hpp"
#include "nudiff/rng.hpp"
#include "nudiff/structure_codec.hpp"
#include "nudiff/util.hpp"

namespace fs = std::filesystem;

namespace nudiff {

namespace {

std::vector<std::string> sorted_files(const std::string& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

std::string patch_stem(const Patch& p) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "_r%d_c%d", p.row, p.col);
  return (p.source.empty() ? "patch" : p.source) + buf;
}

NetworkShape shape_from(const RunConfig& cfg) {
  NetworkShape s;
  s.levels = cfg.levels;
  s.channels = cfg.channels;
  s.attn_levels = cfg.attn_levels;
  s.base_resolution = cfg.base_resolution;
  s.blocks = cfg.blocks;
  return s;
}

void write_loss_csv(const std::string& path, const std::vector<double>& losses,
                    const std::vector<double>& lrs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "step,lr,loss\n";
  char buf[96];
  for (size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%g,%.17g\n", i + 1, lrs[i], losses[i]);
    f << buf;
  }
  if (!f) throw std::runtime_error("write failed for " + path);
}

// Relative manifest entries resolve against the manifest's own directory.
std::string resolve_entry(const std::string& manifest_path, const std::string& entry) {
  fs::path p(entry);
  if (p.is_absolute()) return entry;
  return (fs::path(manifest_path).parent_path() / p).string();
}

std::vector<TrainExample> load_examples(const std::string& manifest_path, bool conditional) {
  Manifest man = read_manifest(manifest_path);
  if (man.empty()) throw std::runtime_error("empty manifest: " + manifest_path);
  std::vector<TrainExample> ds;
  ds.reserve(man.size());
  for (const auto& e : man) {
    TrainExample ex;
    NucleiStructure ns =
        encode_structure(read_instance(resolve_entry(manifest_path, e.instance_path)));
    if (conditional) {
      ex.target = image_to_tensor(read_image(resolve_entry(manifest_path, e.image_path)));
      ex.cond = structure_to_tensor(ns);
    } else {
      ex.target = structure_to_tensor(ns);
    }
    ds.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace

void sanitize_structure_batch(Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != 3)
    throw std::invalid_argument("sanitize_structure_batch: batch must be [N,3,H,W]");
  const int64_t plane = static_cast<int64_t>(batch.dim(2)) * batch.dim(3);
  for (int i = 0; i < batch.dim(0); ++i) {
    double* sem = batch.data() + i * 3 * plane;
    double* hd = sem + plane;
    double* vd = sem + 2 * plane;
    for (int64_t p = 0; p < plane; ++p) {
      bool fg = sem[p] > 0.0;
      sem[p] = fg ? 1.0 : -1.0;
      if (!fg) {
        hd[p] = 0.0;
        vd[p] = 0.0;
      }
    }
  }
}

void run_prepare(const std::string& data_dir, const std::string& out_dir, double proportion,
                 const RunConfig& cfg) {
  std::vector<std::string> names = sorted_files(data_dir + "/images", ".png");
  if (names.empty()) throw std::runtime_error("no images under " + data_dir + "/images");

  PatchSet set;
  set.size = cfg.patch_size;
  for (const std::string& name : names) {
    std::string inst_path = data_dir + "/instances/" + name;
    if (!fs::is_regular_file(inst_path)) throw std::runtime_error("missing instance map " + inst_path);
    ImageRaster img = read_image(data_dir + "/images/" + name);
    InstanceMap inst = read_instance(inst_path);
    std::string stem = fs::path(name).stem().string();
    PatchSet s = extract_patches(img, inst, cfg.patch_size, cfg.patch_stride, stem);
    for (auto& p : s.entries) set.entries.push_back(std::move(p));
  }

  fs::create_directories(out_dir + "/patches");
  fs::create_directories(out_dir + "/structures");
  for (const Patch& p : set.entries) {
    std::string stem = patch_stem(p);
    write_image(p.image, out_dir + "/patches/" + stem + ".png");
    write_instance(p.inst, out_dir + "/patches/" + stem + "_inst.png");
    write_structure(encode_structure(p.inst), out_dir + "/structures/" + stem + ".nstr");
  }

  std::vector<FeatureVector> features(set.entries.size());
  parallel_for(static_cast<int64_t>(set.entries.size()), [&](int64_t i) {
    features[static_cast<size_t>(i)] =
        patch_features(set.entries[static_cast<size_t>(i)].image, set.entries[static_cast<size_t>(i)].inst);
  });
  {
    std::ofstream f(out_dir + "/features.csv", std::ios::binary);
    f << "source,row,col";
    for (int d = 0; d < FeatureVector::kDim; ++d) f << ",f" << d;
    f << "\n";
    char buf[32];
    for (size_t i = 0; i < features.size(); ++i) {
      const Patch& p = set.entries[i];
      f << p.source << ',' << p.row << ',' << p.col;
      for (double v : features[i].values) {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        f << buf;
      }
      f << "\n";
    }
    if (!f) throw std::runtime_error("write failed for " + out_dir + "/features.csv");
  }

  Rng master(cfg.seed);
  ClusterAssignment assignment =
      kmeans(features, cfg.k, master.child("prepare/kmeans"), cfg.kmeans_max_iter);
  {
    std::ofstream f(out_dir + "/clusters.csv", std::ios::binary);
    f << "source,row,col,label,distance\n";
    char buf[32];
    for (size_t i = 0; i < assignment.labels.size(); ++i) {
      const Patch& p = set.entries[i];
      std::snprintf(buf, sizeof buf, ",%d,%.17g\n", assignment.labels[i], assignment.distance[i]);
      f << p.source << ',' << p.row << ',' << p.col << buf;
    }
    if (!f) throw std::runtime_error("write failed for " + out_dir + "/clusters.csv");
  }

  PatchSet subset = select_subset(set, assignment, proportion);
  Manifest manifest;
  manifest.reserve(subset.entries.size());
  for (const Patch& p : subset.entries) {
    // Paths relative to the manifest so the output tree is relocatable.
    std::string stem = "patches/" + patch_stem(p);
    manifest.push_back({stem + ".png", stem + "_inst.png", "real"});
  }
  write_manifest(manifest, out_dir + "/manifest.csv");
}

void run_train_structure(const std::string& manifest_path, const std::string& ckpt_path,
                         const RunConfig& cfg) {
  std::vector<TrainExample> ds = load_examples(manifest_path, false);
  NoiseSchedule sched = linear_schedule(cfg.T, cfg.beta1, cfg.betaT);
  Rng master(cfg.seed);
  Rng init = master.child("train-structure/init");
  UNetDenoiser net(shape_from(cfg), false, init);

  AdamW opt(net.params(), cfg.lr);
  TrainOptions topt;
  topt.steps = cfg.steps;
  topt.batch = cfg.batch;
  topt.drop_rate = 0.0;
  Rng steps_rng = master.child("train-structure/steps");
  TrainResult res = train(net, ds, sched, opt, topt, steps_rng);

  net.save(ckpt_path);
  write_loss_csv(ckpt_path + ".loss.csv", res.losses,
                 std::vector<double>(res.losses.size(), cfg.lr));
}

void run_train_image(const std::string& manifest_path, const std::string& ckpt_path,
                     const RunConfig& cfg) {
  std::vector<TrainExample> ds = load_examples(manifest_path, true);
  NoiseSchedule sched = linear_schedule(cfg.T, cfg.beta1, cfg.betaT);
  Rng master(cfg.seed);
  Rng init = master.child("train-image/init");
  UNetDenoiser net(shape_from(cfg), true, init);

  std::vector<double> losses, lrs;
  {
    AdamW opt(net.params(), cfg.lr);
    TrainOptions topt;
    topt.steps = cfg.steps;
    topt.batch = cfg.batch;
    topt.drop_rate = 0.0;
    Rng rng = master.child("train-image/phase1");
    TrainResult res = train(net, ds, sched, opt, topt, rng);
    losses.insert(losses.end(), res.losses.begin(), res.losses.end());
    lrs.insert(lrs.end(), res.losses.size(), cfg.lr);
  }
  {
    AdamW opt(net.params(), cfg.lr_finetune);
    TrainOptions topt;
    topt.steps = cfg.finetune_steps;
    topt.batch = cfg.batch;
    topt.drop_rate = cfg.drop_rate;
    Rng rng = master.child("train-image/phase2");
    TrainResult res = train(net, ds, sched, opt, topt, rng);
    losses.insert(losses.end(), res.losses.begin(), res.losses.end());
    lrs.insert(lrs.end(), res.losses.size(), cfg.lr_finetune);
  }

  net.save(ckpt_path);
  write_loss_csv(ckpt_path + ".loss.csv", losses, lrs);
}

void run_synth(const std::string& structure_ckpt, const std::string& image_ckpt, int count,
               double w, const std::string& out_dir, const RunConfig& cfg) {
  auto snet = UNetDenoiser::load(structure_ckpt);
  auto inet = UNetDenoiser::load(image_ckpt);
  if (snet->conditional()) throw std::runtime_error("structure checkpoint is conditional");
  if (!inet->conditional()) throw std::runtime_error("image checkpoint is not conditional");
  const int res = snet->shape().base_resolution;
  if (inet->shape().base_resolution != res)
    throw std::runtime_error("checkpoint resolution mismatch");
  if (count < 0) throw std::invalid_argument("synth: count must be >= 0");

  fs::create_directories(out_dir);
  if (count == 0) return;

  NoiseSchedule sched = linear_schedule(cfg.T, cfg.beta1, cfg.betaT);
  Rng synth_rng = Rng(cfg.seed).child("synth");

  Tensor structures =
      sample_batch(*snet, count, {3, res, res}, sched, nullptr, 0.0, synth_rng.child("structure"));
  sanitize_structure_batch(structures);
  const int64_t plane = static_cast<int64_t>(res) * res;

  Tensor images =
      sample_batch(*inet, count, {3, res, res}, sched, &structures, w, synth_rng.child("image"));

  char buf[32];
  for (int i = 0; i < count; ++i) {
    Tensor s({3, res, res}), im({3, res, res});
    std::memcpy(s.data(), structures.data() + i * 3 * plane, sizeof(double) * 3 * plane);
    std::memcpy(im.data(), images.data() + i * 3 * plane, sizeof(double) * 3 * plane);
    std::snprintf(buf, sizeof buf, "/sample_%04d", i);
    write_structure(tensor_to_structure(s), out_dir + buf + ".nstr");
    write_image(tensor_to_image(im), out_dir + buf + ".png");
  }
}

void run_decode(const std::string& structures_dir, const std::string& out_dir,
                const RunConfig& cfg) {
  std::vector<std::string> names = sorted_files(structures_dir, ".nstr");
  fs::create_directories(out_dir);
  WatershedParams wp;
  wp.tau_s = cfg.tau_s;
  wp.tau_g = cfg.tau_g;
  wp.min_marker_area = cfg.min_marker_area;
  for (const std::string& name : names) {
    NucleiStructure ns = read_structure(structures_dir + "/" + name);
    InstanceMap inst = reconstruct_instances(ns, wp);
    std::string stem = fs::path(name).stem().string();
    write_instance(inst, out_dir + "/" + stem + "_inst.png");
  }
}

MetricReport run_evaluate(const std::string& pred_dir, const std::string& gt_dir,
                          const std::string& report_path) {
  std::vector<std::string> names = sorted_files(pred_dir, ".png");
  if (names.empty()) throw std::runtime_error("no predictions under " + pred_dir);
  for (const std::string& name : names)
    if (!fs::is_regular_file(gt_dir + "/" + name))
      throw std::runtime_error("missing ground truth " + gt_dir + "/" + name);
  std::vector<ImageMetrics> rows(names.size());
  parallel_for(static_cast<int64_t>(names.size()), [&](int64_t i) {
    const std::string& name = names[static_cast<size_t>(i)];
    InstanceMap pred = read_instance(pred_dir + "/" + name);
    InstanceMap gt = read_instance(gt_dir + "/" + name);
    ImageMetrics m;
    m.image_id = fs::path(name).stem().string();
    m.dice = dice(foreground(pred), foreground(gt));
    m.aji = aji(pred, gt);
    rows[static_cast<size_t>(i)] = std::move(m);
  });
  MetricReport report = aggregate(std::move(rows));
  std::ofstream f(report_path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + report_path);
  f << report_csv(report);
  if (!f) throw std::runtime_error("write failed for " + report_path);
  return report;
}

}  // namespace nudiff
