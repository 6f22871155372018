#include <algorithm>
#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "nudiff/config.hpp"
#include "nudiff/pipeline.hpp"
#include "nudiff/verify.hpp"

namespace {

nudiff::RunConfig load_cfg(const std::string& path, bool seed_set, uint64_t seed) {
  nudiff::RunConfig cfg = path.empty() ? nudiff::RunConfig{} : nudiff::load_config(path);
  if (seed_set) cfg.seed = seed;
  nudiff::validate_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based paired nuclei image synthesis"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  app.add_option("--config", config_path, "key=value run configuration file")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "override the configured master seed")
      ->each([&](const std::string&) { seed_set = true; });

  auto* prepare = app.add_subcommand("prepare", "extract patches, cluster, select a subset");
  std::string data_dir, out_dir;
  double proportion = 1.0;
  prepare->add_option("--data", data_dir, "directory with images/ and instances/")->required();
  prepare->add_option("--out", out_dir, "output directory")->required();
  prepare->add_option("--proportion", proportion, "labeled-subset proportion in (0,1]")->required();

  auto* train_s = app.add_subcommand("train-structure", "train the unconditional structure model");
  auto* train_i = app.add_subcommand("train-image", "train the conditional image model");
  std::string manifest_path, ckpt_path;
  for (auto* cmd : {train_s, train_i}) {
    cmd->add_option("--manifest", manifest_path, "dataset manifest CSV")->required();
    cmd->add_option("--out", ckpt_path, "checkpoint output path")->required();
  }

  auto* synth = app.add_subcommand("synth", "sample paired structure/image outputs");
  std::string structure_ckpt, image_ckpt;
  int count = -1;
  double guidance_w = 0.0;
  bool w_set = false;
  synth->add_option("--structure-ckpt", structure_ckpt, "unconditional checkpoint")->required();
  synth->add_option("--image-ckpt", image_ckpt, "conditional checkpoint")->required();
  synth->add_option("--count", count, "number of samples");
  synth->add_option("--w", guidance_w, "guidance scale")
      ->each([&](const std::string&) { w_set = true; });
  synth->add_option("--out", out_dir, "output directory")->required();

  auto* decode = app.add_subcommand("decode", "reconstruct instance maps from structures");
  std::string structures_dir;
  decode->add_option("--structures", structures_dir, "directory of .nstr files")->required();
  decode->add_option("--out", out_dir, "output directory")->required();

  auto* evaluate = app.add_subcommand("evaluate", "score predictions against ground truth");
  std::string pred_dir, gt_dir, report_path;
  evaluate->add_option("--pred", pred_dir, "predicted instance PNG directory")->required();
  evaluate->add_option("--gt", gt_dir, "ground-truth instance PNG directory")->required();
  evaluate->add_option("--out", report_path, "report CSV path")->required();

  auto* verify = app.add_subcommand("verify", "run the property suites");
  std::string suite = "all";
  verify->add_option("--suite", suite, "suite name or 'all'");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // --help exits 0; any parse failure is usage error
  }

  try {
    nudiff::RunConfig cfg = load_cfg(config_path, seed_set, seed);
    if (*prepare) {
      nudiff::run_prepare(data_dir, out_dir, proportion, cfg);
    } else if (*train_s) {
      nudiff::run_train_structure(manifest_path, ckpt_path, cfg);
    } else if (*train_i) {
      nudiff::run_train_image(manifest_path, ckpt_path, cfg);
    } else if (*synth) {
      if (count < 0) count = cfg.sample_count;
      if (!w_set) guidance_w = cfg.guidance_w;
      nudiff::run_synth(structure_ckpt, image_ckpt, count, guidance_w, out_dir, cfg);
    } else if (*decode) {
      nudiff::run_decode(structures_dir, out_dir, cfg);
    } else if (*evaluate) {
      nudiff::MetricReport rep = nudiff::run_evaluate(pred_dir, gt_dir, report_path);
      std::printf("mean dice %.6f aji %.6f over %zu images\n", rep.dice, rep.aji,
                  rep.per_image.size());
    } else if (*verify) {
      auto names = nudiff::verify_suite_names();
      names.push_back("diffusion");  // alias for the oracle-sampler suite
      if (suite != "all" && std::find(names.begin(), names.end(), suite) == names.end()) {
        std::fprintf(stderr, "unknown suite '%s'; known:", suite.c_str());
        for (const auto& n : names) std::fprintf(stderr, " %s", n.c_str());
        std::fprintf(stderr, " all\n");
        return 2;
      }
      int failed = nudiff::run_verify_suite(suite);
      if (failed > 0) {
        std::fprintf(stderr, "%d propert%s failed\n", failed, failed == 1 ? "y" : "ies");
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
