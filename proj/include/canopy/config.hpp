#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>

namespace canopy::config {

enum class OptimKind { kAuto, kSgd, kAdamW };

/// Every tunable of a run. Serialized as INI sections [run], [data], [model],
/// [optim], [loss], [kd], [eval], [grid]; unknown sections or keys are errors.
struct RunConfig {
  // [run]
  std::uint64_t seed = 0;
  std::string arch = "a2mdu";
  std::size_t workers = 1;

  // [data]
  std::string dataset;           // dataset directory for train / eval / filter / grid
  std::size_t tiles = 8;
  std::size_t tile_size = 64;
  double shot_density = 0.03;
  double reject_fraction = 0.2;
  std::size_t patch = 32;        // training crop; 256 at full scale
  std::size_t composite_frames = 6;

  // [model]
  std::size_t stem_width = 16;
  std::size_t bins = 10;
  std::size_t vit_patch = 16;
  std::size_t embed = 1536;
  std::size_t blocks = 12;
  std::size_t heads = 12;
  std::size_t mlp_ratio = 4;
  std::size_t l_hat = 256;

  // [optim]
  OptimKind optimizer = OptimKind::kAuto;  // sgd for U-Nets, adamw for hytec
  double lr = 1e-2;                        // SGD base rate
  double peak_lr = 1e-4;                   // AdamW rate after warmup
  double warmup_start = 1e-6;
  double warmup_epochs = 20.0;
  std::size_t epochs = 250;
  std::size_t batch = 12;
  std::size_t steps_per_epoch = 0;         // 0: one pass over the training tiles
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t keep_checkpoints = 3;
  bool resume = false;

  // [loss]
  double delta = 3.0;
  double alpha_cr = 1.0;
  std::array<double, 4> betas{0.7, 0.7, 0.7, 1.0};
  double bin_width = 6.0;
  double bin_overlap = 1.5;
  double adaptive_alpha = 1.0;
  double adaptive_c = 1.0;
  double consensus_tol = 0.10;

  // [kd]
  std::string teacher_s1;  // checkpoint directories
  std::string teacher_s2;

  // [eval]
  std::string checkpoint;
  std::string split = "val";
  std::size_t gsi_patch = 256;
  double edges_max = 60.0;

  // [grid]
  double cell_size = 7680.0;
  std::size_t min_shots = 600;
  double train_fraction = 0.75;

  bool operator==(const RunConfig&) const = default;

  /// Throws Error(kInvalidArgument) on inconsistent values.
  void validate() const;
};

RunConfig parse_ini(std::istream& is);
RunConfig parse_ini_string(const std::string& text);
RunConfig load_config(const std::string& path);
/// Sets one "section.key" entry with the same parsing rules as parse_ini.
void set_value(RunConfig& c, const std::string& dotted_key, const std::string& value);
/// Every key in canonical order; parse_ini(serialize(c)) == c.
std::string serialize(const RunConfig& c);

}  // namespace canopy::config
