#pragma once

#include <filesystem>
#include <string>

#include "canopy/config.hpp"

// Batch commands behind the CLI. Each writes its artifacts under `out` and
// returns a short "key=value" summary, one entry per line.
namespace canopy::app {

/// Synthetic dataset plus manifest.csv.
std::string cmd_synth(const config::RunConfig& cfg, const std::filesystem::path& out);
/// retained_shots.csv and filter_report.csv (per-rule planted, violating and
/// first-rule rejection counts) for cfg.dataset.
std::string cmd_filter(const config::RunConfig& cfg, const std::filesystem::path& out);
/// Rain-gated median composite of a synthetic optical stack per tile.
std::string cmd_composite(const config::RunConfig& cfg, const std::filesystem::path& out);
/// Grid cells over the filtered shots: grid.csv, grid_sets.csv, training_list.csv.
std::string cmd_grid(const config::RunConfig& cfg, const std::filesystem::path& out);
std::string cmd_train(const config::RunConfig& cfg, const std::filesystem::path& out);
/// Scores cfg.checkpoint on cfg.dataset.
std::string cmd_eval(const config::RunConfig& cfg, const std::filesystem::path& out);
/// Sharpness of an [H, W] map against an [H, W, C] reference per
/// cfg.gsi_patch square: gsi.csv and gsi_summary.csv.
std::string cmd_gsi(const config::RunConfig& cfg, const std::filesystem::path& input,
                    const std::filesystem::path& reference, const std::filesystem::path& out);

}  // namespace canopy::app
