#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "canopy/nn.hpp"
#include "canopy/tensor.hpp"

namespace canopy::nn {

/// Named, ordered collection of a model's learnable parameters and
/// non-learnable buffers (batch-norm running statistics).
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable;
  };

  Tensor add_param(const std::string& name, Tensor t);
  Tensor add_buffer(const std::string& name, Tensor t);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Tensor> params() const;
  std::vector<std::string> param_names() const;
  /// Undefined tensor when absent.
  Tensor find(const std::string& name) const;
  std::size_t param_count() const;
  void zero_grad();

 private:
  Tensor add(const std::string& name, Tensor t, bool trainable);
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

using Rng = std::mt19937_64;
using Metadata = std::map<std::string, std::string>;

/// He-uniform for kernels feeding a leaky ReLU: U(-b, b), b = sqrt(6 / ((1 + a^2) fan_in)).
Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng);
Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor normal(Shape shape, double stddev, Rng& rng);

Conv2dParams make_conv(ParamStore& store, const std::string& name, std::size_t k, std::size_t c_in,
                       std::size_t c_out, std::size_t stride, std::size_t padding, Rng& rng);
ConvT2dParams make_conv_transpose(ParamStore& store, const std::string& name, std::size_t k, std::size_t c_in,
                                  std::size_t c_out, std::size_t stride, Rng& rng);
BatchNormState make_batch_norm(ParamStore& store, const std::string& name, std::size_t c);
LinearParams make_linear(ParamStore& store, const std::string& name, std::size_t d_in, std::size_t d_out, Rng& rng);
LayerNormParams make_layer_norm(ParamStore& store, const std::string& name, std::size_t d);
MhsaParams make_mhsa(ParamStore& store, const std::string& name, std::size_t d, std::size_t heads, Rng& rng);

/// Checkpoint directory: one TNSR/1 file per entry plus `manifest.txt`, a
/// plain-text table "name<TAB>file<TAB>shape" preceded by "# key=value"
/// metadata lines.
void save_checkpoint(const std::filesystem::path& dir, const ParamStore& store, const Metadata& meta = {});
/// Loads every entry of `store` from `dir`; names and shapes must match.
Metadata load_checkpoint(const std::filesystem::path& dir, ParamStore& store);
Metadata read_checkpoint_metadata(const std::filesystem::path& dir);

}  // namespace canopy::nn
