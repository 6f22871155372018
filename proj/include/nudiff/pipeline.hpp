#pragma once

#include <string>

#include "nudiff/config.hpp"
#include "nudiff/metrics.hpp"
#include "nudiff/tensor.hpp"

namespace nudiff {

// Turns raw sampled structures [N,3,H,W] into valid ones in place: semantic
// binarized by sign (0 maps to background), distances zeroed outside the
// foreground.
void sanitize_structure_batch(Tensor& batch);

// data_dir holds images/*.png with co-named instances/*.png. Writes patches,
// structures, features.csv, clusters.csv, and the proportion-subset
// manifest.csv under out_dir.
void run_prepare(const std::string& data_dir, const std::string& out_dir, double proportion,
                 const RunConfig& cfg);

// Unconditional structure model: targets are the encoded structures of the
// manifest's instance maps. Writes the checkpoint and <ckpt>.loss.csv with
// rows step,lr,loss.
void run_train_structure(const std::string& manifest_path, const std::string& ckpt_path,
                         const RunConfig& cfg);

// Conditional image model, two phases: full conditioning at cfg.lr for
// cfg.steps, then condition dropout cfg.drop_rate at cfg.lr_finetune for
// cfg.finetune_steps with a fresh optimizer. Loss CSV spans both phases.
void run_train_image(const std::string& manifest_path, const std::string& ckpt_path,
                     const RunConfig& cfg);

// Samples count structures unconditionally, sanitizes each (semantic
// binarized by sign, distances zeroed outside the foreground), then samples
// images conditioned on them with guidance w. Writes sample_NNNN.nstr/.png
// pairs under out_dir.
void run_synth(const std::string& structure_ckpt, const std::string& image_ckpt, int count,
               double w, const std::string& out_dir, const RunConfig& cfg);

// Reconstructs an instance map for every *.nstr under structures_dir into
// out_dir as <stem>_inst.png.
void run_decode(const std::string& structures_dir, const std::string& out_dir,
                const RunConfig& cfg);

// Pairs instance PNGs in pred_dir and gt_dir by file name, writes the CSV
// report, and returns the aggregate.
MetricReport run_evaluate(const std::string& pred_dir, const std::string& gt_dir,
                          const std::string& report_path);

}  // namespace nudiff
