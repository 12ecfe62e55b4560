#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "canopy/config.hpp"
#include "canopy/datapipe.hpp"
#include "canopy/hytec.hpp"
#include "canopy/losses.hpp"
#include "canopy/metrics.hpp"
#include "canopy/params.hpp"
#include "canopy/unet.hpp"

namespace canopy::train {

/// Per-band standardization fitted on the training tiles.
struct InputNorm {
  std::vector<double> s2_mean, s2_std, s1_mean, s1_std;

  static InputNorm fit(const std::vector<const data::SynthTile*>& tiles);
  /// [..., C] -> (x - mean) / std per band.
  Tensor apply_s2(const Tensor& s2) const;
  Tensor apply_s1(const Tensor& s1) const;
  void to_metadata(nn::Metadata& meta) const;
  static InputNorm from_metadata(const nn::Metadata& meta);
};

/// Architecture and sizes needed to rebuild a model from a checkpoint.
struct ModelSpec {
  models::Arch arch = models::Arch::kA2mdu;
  std::size_t stem_width = 16;
  std::size_t bins = 10;
  double bin_width = 6.0;
  double bin_overlap = 1.5;
  models::HyTecConfig hytec;

  static ModelSpec from_config(const config::RunConfig& cfg);
  losses::HeightBinning binning() const;
  void to_metadata(nn::Metadata& meta) const;
  static ModelSpec from_metadata(const nn::Metadata& meta);
};

struct Batch {
  Tensor s2;      // [N, P, P, 10], raw bands
  Tensor s1;      // [N, P, P, 2]
  Tensor target;  // [N, P, P]
  Tensor mask;    // [N, P, P]
};

/// Stacks patches along a new leading axis.
Batch stack_patches(const std::vector<data::Patch>& patches);

struct Prediction {
  Tensor height;               // [N, P, P]
  Tensor probs;                // [N, P, P, K]; undefined for single-head models
  std::array<Tensor, 3> aux;   // Hy-TeC only
};

/// A U-Net variant or Hy-TeC together with its input normalization.
class Model {
 public:
  Model(const ModelSpec& spec, InputNorm norm, std::uint64_t seed);

  /// Forward on a raw batch; normalization is applied internally.
  Prediction forward(const Tensor& s2, const Tensor& s1);
  /// Dense [H, W] map of one raw tile without recording. U-Nets run on the
  /// whole tile; Hy-TeC runs on non-overlapping image-sized windows.
  Tensor predict_tile(const Tensor& s2, const Tensor& s1);

  void set_mode(nn::NormMode mode);
  nn::ParamStore& store();
  const ModelSpec& spec() const { return spec_; }
  const InputNorm& norm() const { return norm_; }

  void save(const std::filesystem::path& dir, nn::Metadata extra = {});
  static std::unique_ptr<Model> load(const std::filesystem::path& dir);

 private:
  ModelSpec spec_;
  InputNorm norm_;
  std::unique_ptr<models::UNet> unet_;
  std::unique_ptr<models::HyTec> hytec_;
};

struct TraceRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double total = 0.0;
  std::array<double, 3> aux{};
  double ce = 0.0;
  double reg = 0.0;
};

/// Columns: step, epoch, lr, total, aux1, aux2, aux3, ce, reg.
void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& rows);

struct TrainResult {
  std::vector<TraceRow> trace;
  /// Total loss on a fixed probe batch at initialization and after training.
  double probe_initial = 0.0;
  double probe_final = 0.0;
  std::size_t steps = 0;
  std::filesystem::path model_dir;
};

/// Trains cfg.arch on the training tiles of `ds`. Writes trace.csv,
/// config.ini, checkpoints/epoch_NNNNNN (last cfg.keep_checkpoints kept) and
/// model/ under `out`. With cfg.resume the newest checkpoint is restored.
TrainResult train_model(const config::RunConfig& cfg, const data::SynthDataset& ds,
                        const std::filesystem::path& out);

struct EvalResult {
  metrics::MetricsReport overall;
  std::vector<metrics::BinnedRow> binned;
  /// Same bins scored against the dense reference heights of every pixel.
  std::vector<metrics::BinnedRow> binned_dense;
  struct PatchGsi {
    std::size_t tile = 0, y = 0, x = 0, size = 0;
    metrics::SharpnessReport sharpness;
  };
  std::vector<PatchGsi> gsi;
  std::optional<double> mean_gsi;
  std::vector<std::size_t> tiles;
};

/// Predicts every tile of the configured split with cfg.workers threads and
/// scores the predictions against the retained GEDI targets.
EvalResult evaluate(Model& model, const data::SynthDataset& ds, const config::RunConfig& cfg);

/// Writes metrics.csv, binned.csv, binned_dense.csv, gsi.csv (one row per
/// patch) and gsi_summary.csv under `out`.
void write_eval(const std::filesystem::path& out, const EvalResult& r);

/// Runs fn(i) for i in [0, n) on `workers` threads; results are stored by
/// index so the outcome is independent of scheduling. The first exception
/// thrown is rethrown after all threads join.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace canopy::train
