#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kwcap/model.hpp"

namespace kwcap {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, Tensor> m, v;
  std::size_t t = 0;
};

/// Bias-corrected Adam over the parameters present in `grads`; the others
/// are left untouched.
void adam_step(ParamStore& params, const ParamGrads& grads, AdamState& state, const AdamConfig& hyper);

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm <= 0` only measures.
double clip_global_norm(ParamGrads& grads, double max_norm);

struct TrainResult {
  std::vector<double> losses;  // per step: mean per-token NLL of the batch
  std::size_t steps = 0;
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

/// Teacher-forced caption training with seeded shuffling, Adam and global
/// norm clipping. Runs cfg.epochs epochs or cfg.max_steps steps, whichever
/// ends first.
TrainResult train_captioner(CaptionModel& model, std::span<const Example> train, const ProgressFn& progress = {});

/// Keyword predictor and disease classifier on detached image features.
TrainResult train_heads(CaptionModel& model, std::span<const Example> train, const ProgressFn& progress = {});

/// Mean per-token NLL over `examples` in evaluation mode.
double evaluate_loss(const CaptionModel& model, std::span<const Example> examples);

/// Binary container:
///   "KWCK" | u32 version | u64 n | n bytes of JSON metadata
///   (config, vocab, keyword_labels, classes) | u64 step | u64 count |
///   count x (u32 len | name | u32 ndim | ndim x u64 dim | f64 values)
/// Integers and doubles little-endian.
struct Checkpoint {
  HyperConfig config;
  Vocabulary vocab;
  std::vector<std::string> keyword_labels;
  std::size_t classes = 0;
  std::size_t step = 0;
  ParamStore params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const CaptionModel& model, std::size_t step);
Checkpoint load_checkpoint(const std::filesystem::path& path);
CaptionModel model_from_checkpoint(Checkpoint ckpt);

/// "step,loss" CSV, steps numbered from 1.
void write_loss_csv(const std::filesystem::path& path, std::span<const double> losses);

}  // namespace kwcap
