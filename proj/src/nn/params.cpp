#include "canopy/params.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "canopy/tnsr_io.hpp"

namespace canopy::nn {

Tensor ParamStore::add(const std::string& name, Tensor t, bool trainable) {
  require(!index_.contains(name), ErrorCode::kInvalidArgument, "duplicate parameter name " + name);
  t.set_requires_grad(trainable);
  index_[name] = entries_.size();
  entries_.push_back({name, t, trainable});
  return t;
}

Tensor ParamStore::add_param(const std::string& name, Tensor t) { return add(name, std::move(t), true); }
Tensor ParamStore::add_buffer(const std::string& name, Tensor t) { return add(name, std::move(t), false); }

std::vector<Tensor> ParamStore::params() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_)
    if (e.trainable) out.push_back(e.tensor);
  return out;
}

std::vector<std::string> ParamStore::param_names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_)
    if (e.trainable) out.push_back(e.name);
  return out;
}

Tensor ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? Tensor() : entries_[it->second].tensor;
}

std::size_t ParamStore::param_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / ((1.0 + kLeakySlope * kLeakySlope) * static_cast<double>(fan_in)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor normal(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(v));
}

Conv2dParams make_conv(ParamStore& store, const std::string& name, std::size_t k, std::size_t c_in,
                       std::size_t c_out, std::size_t stride, std::size_t padding, Rng& rng) {
  Conv2dParams p;
  p.kernel = store.add_param(name + ".kernel", he_uniform({k, k, c_in, c_out}, k * k * c_in, rng));
  p.bias = store.add_param(name + ".bias", Tensor::zeros({c_out}));
  p.stride = stride;
  p.padding = padding;
  return p;
}

ConvT2dParams make_conv_transpose(ParamStore& store, const std::string& name, std::size_t k, std::size_t c_in,
                                  std::size_t c_out, std::size_t stride, Rng& rng) {
  ConvT2dParams p;
  // Each output pixel receives c_in * (k / stride)^2 contributions.
  const std::size_t taps = std::max<std::size_t>(1, (k / stride) * (k / stride));
  p.kernel = store.add_param(name + ".kernel", he_uniform({k, k, c_out, c_in}, c_in * taps, rng));
  p.bias = store.add_param(name + ".bias", Tensor::zeros({c_out}));
  p.stride = stride;
  return p;
}

BatchNormState make_batch_norm(ParamStore& store, const std::string& name, std::size_t c) {
  BatchNormState s;
  s.gamma = store.add_param(name + ".gamma", Tensor::full({c}, 1.0));
  s.beta = store.add_param(name + ".beta", Tensor::zeros({c}));
  s.running_mean = store.add_buffer(name + ".running_mean", Tensor::zeros({c}));
  s.running_var = store.add_buffer(name + ".running_var", Tensor::full({c}, 1.0));
  return s;
}

LinearParams make_linear(ParamStore& store, const std::string& name, std::size_t d_in, std::size_t d_out, Rng& rng) {
  LinearParams p;
  p.weight = store.add_param(name + ".weight", xavier_uniform({d_in, d_out}, d_in, d_out, rng));
  p.bias = store.add_param(name + ".bias", Tensor::zeros({d_out}));
  return p;
}

LayerNormParams make_layer_norm(ParamStore& store, const std::string& name, std::size_t d) {
  LayerNormParams p;
  p.gamma = store.add_param(name + ".gamma", Tensor::full({d}, 1.0));
  p.beta = store.add_param(name + ".beta", Tensor::zeros({d}));
  return p;
}

MhsaParams make_mhsa(ParamStore& store, const std::string& name, std::size_t d, std::size_t heads, Rng& rng) {
  MhsaParams p;
  p.heads = heads;
  p.q = make_linear(store, name + ".q", d, d, rng);
  p.k = make_linear(store, name + ".k", d, d, rng);
  p.v = make_linear(store, name + ".v", d, d, rng);
  p.out = make_linear(store, name + ".out", d, d, rng);
  return p;
}

namespace {

std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

struct ManifestRow {
  std::string name, file, shape;
};

std::pair<Metadata, std::vector<ManifestRow>> read_manifest(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.txt");
  require(static_cast<bool>(f), ErrorCode::kIo, "missing checkpoint manifest in " + dir.string());
  Metadata meta;
  std::vector<ManifestRow> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      require(eq != std::string::npos, ErrorCode::kParse, "bad manifest metadata line: " + line);
      meta[line.substr(2, eq - 2)] = line.substr(eq + 1);
      continue;
    }
    std::istringstream ls(line);
    ManifestRow r;
    require(static_cast<bool>(std::getline(ls, r.name, '\t')) && static_cast<bool>(std::getline(ls, r.file, '\t')) &&
                static_cast<bool>(std::getline(ls, r.shape)),
            ErrorCode::kParse, "bad manifest row: " + line);
    rows.push_back(r);
  }
  return {meta, rows};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const ParamStore& store, const Metadata& meta) {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir / "manifest.txt", std::ios::trunc);
  require(static_cast<bool>(f), ErrorCode::kIo, "cannot write manifest in " + dir.string());
  for (const auto& [k, v] : meta) f << "# " << k << '=' << v << '\n';
  for (const auto& e : store.entries()) {
    const std::string file = e.name + ".tnsr";
    io::write_tnsr(dir / file, e.tensor);
    f << e.name << '\t' << file << '\t' << shape_field(e.tensor.shape()) << '\n';
  }
  require(static_cast<bool>(f), ErrorCode::kIo, "manifest write failed in " + dir.string());
}

Metadata load_checkpoint(const std::filesystem::path& dir, ParamStore& store) {
  auto [meta, rows] = read_manifest(dir);
  std::map<std::string, ManifestRow> by_name;
  for (auto& r : rows) by_name[r.name] = r;
  for (const auto& e : store.entries()) {
    auto it = by_name.find(e.name);
    require(it != by_name.end(), ErrorCode::kState, "checkpoint " + dir.string() + " lacks entry " + e.name);
    require(it->second.shape == shape_field(e.tensor.shape()), ErrorCode::kShapeMismatch,
            "checkpoint entry " + e.name + " has shape " + it->second.shape + ", model expects " +
                shape_field(e.tensor.shape()));
    Tensor loaded = io::read_tnsr(dir / it->second.file);
    require(loaded.shape() == e.tensor.shape(), ErrorCode::kShapeMismatch, "tensor file shape differs for " + e.name);
    Tensor dst = e.tensor;
    std::copy(loaded.data().begin(), loaded.data().end(), dst.data_mut().begin());
  }
  require(by_name.size() == store.entries().size(), ErrorCode::kState,
          "checkpoint " + dir.string() + " has entries the model does not define");
  return meta;
}

Metadata read_checkpoint_metadata(const std::filesystem::path& dir) { return read_manifest(dir).first; }

}  // namespace canopy::nn
