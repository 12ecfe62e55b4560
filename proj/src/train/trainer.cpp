#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "canopy/log.hpp"
#include "canopy/optim.hpp"
#include "canopy/train.hpp"

namespace canopy::train {

namespace fs = std::filesystem;

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first) first = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first) std::rethrow_exception(first);
}

namespace {

std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

constexpr const char* kTraceHeader = "step,epoch,lr,total,aux1,aux2,aux3,ce,reg";

std::vector<TraceRow> read_trace_csv(const fs::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorCode::kIo, "cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  require(line == kTraceHeader, ErrorCode::kParse, path.string() + ": unexpected trace header");
  std::vector<TraceRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) {
      double x{};
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
      require(ec == std::errc{} && p == item.data() + item.size(), ErrorCode::kParse, path.string() + ": bad field");
      v.push_back(x);
    }
    require(v.size() == 9, ErrorCode::kParse, path.string() + ": expected 9 columns");
    rows.push_back({static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1]), v[2], v[3], {v[4], v[5], v[6]},
                    v[7], v[8]});
  }
  return rows;
}

std::string epoch_dir_name(std::size_t epoch) {
  std::string s = std::to_string(epoch);
  return "epoch_" + std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s;
}

std::vector<fs::path> list_checkpoints(const fs::path& root) {
  std::vector<fs::path> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && e.path().filename().string().rfind("epoch_", 0) == 0) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

struct Objective {
  Tensor total;
  std::array<Tensor, 3> aux;
  Tensor ce, reg;
  bool empty = false;
};

Objective skipped() {
  Objective o;
  o.empty = true;
  return o;
}

double value_or_zero(const Tensor& t) { return t.defined() ? t.item() : 0.0; }

class Trainer {
 public:
  Trainer(const config::RunConfig& cfg, const data::SynthDataset& ds) : cfg_(cfg), ds_(ds) {
    cfg_.validate();
    spec_ = ModelSpec::from_config(cfg_);
    binning_ = spec_.binning();
    loss_cfg_.betas = cfg_.betas;
    loss_cfg_.alpha_cr = cfg_.alpha_cr;
    loss_cfg_.delta = cfg_.delta;
    loss_cfg_.consensus_tol = cfg_.consensus_tol;
    loss_cfg_.validate();

    std::vector<const data::SynthTile*> train_tiles;
    for (std::size_t i = 0; i < ds_.tiles.size(); ++i)
      if (data::tile_split(ds_.tiles[i].id) == data::Split::kTrain) {
        train_index_.push_back(i);
        train_tiles.push_back(&ds_.tiles[i]);
      }
    require(!train_index_.empty(), ErrorCode::kInvalidArgument, "dataset has no training tiles");
    for (const auto* t : train_tiles)
      require(t->s2.dim(0) >= cfg_.patch && t->s2.dim(1) >= cfg_.patch, ErrorCode::kInvalidArgument,
              "patch is larger than a tile");

    if (spec_.arch == models::Arch::kHytec) load_teachers();
    model_ = std::make_unique<Model>(spec_, InputNorm::fit(train_tiles), data::mix_seed(cfg_.seed, 1));
    if (spec_.arch == models::Arch::kA2mdu || spec_.arch == models::Arch::kHytec) {
      adaptive_ = losses::AdaptiveLossState::make(cfg_.adaptive_alpha, cfg_.adaptive_c);
      loss_store_.add_param("alpha", adaptive_->alpha);
      loss_store_.add_param("raw_c", adaptive_->raw_c);
    }
    auto params = model_->store().params();
    for (const auto& p : loss_store_.params()) params.push_back(p);
    kind_ = cfg_.optimizer;
    if (kind_ == config::OptimKind::kAuto)
      kind_ = spec_.arch == models::Arch::kHytec ? config::OptimKind::kAdamW : config::OptimKind::kSgd;
    if (kind_ == config::OptimKind::kSgd) {
      optimizer_ = std::make_unique<optim::Sgd>(std::move(params), cfg_.momentum, cfg_.weight_decay);
    } else {
      optimizer_ = std::make_unique<optim::AdamW>(std::move(params), 0.9, 0.999, cfg_.weight_decay);
    }
    steps_per_epoch_ = cfg_.steps_per_epoch > 0 ? cfg_.steps_per_epoch
                                                : (train_index_.size() + cfg_.batch - 1) / cfg_.batch;
  }

  TrainResult run(const fs::path& out) {
    fs::create_directories(out);
    {
      std::ofstream os(out / "config.ini", std::ios::binary);
      os << config::serialize(cfg_);
      require(static_cast<bool>(os), ErrorCode::kIo, "cannot write " + (out / "config.ini").string());
    }
    const fs::path ckpt_root = out / "checkpoints";
    TrainResult result;
    std::size_t start_epoch = 0;
    model_->set_mode(nn::NormMode::kTrain);
    const Batch probe = probe_batch();
    const auto existing = list_checkpoints(ckpt_root);
    if (cfg_.resume && !existing.empty()) {
      start_epoch = restore(existing.back(), result);
      log::info("resumed from " + existing.back().string() + " at epoch " + std::to_string(start_epoch));
    } else {
      if (cfg_.resume) log::info("no checkpoint to resume from; starting fresh");
      result.probe_initial = probe_loss(probe);
    }

    for (std::size_t epoch = start_epoch; epoch < cfg_.epochs; ++epoch) {
      const double lr = learning_rate(epoch);
      const auto order = epoch_order(epoch);
      const std::uint64_t epoch_seed = data::mix_seed(data::mix_seed(cfg_.seed, 2), epoch);
      for (std::size_t s = 0; s < steps_per_epoch_; ++s) {
        const std::size_t step = result.trace.size();
        const Batch batch = make_batch(order, epoch_seed, s * cfg_.batch, cfg_.batch);
        try {
          optimizer_->zero_grad();
          Tape tape;
          TapeScope scope(tape);
          Objective obj = objective(batch);
          if (obj.empty) {
            log::warn("epoch " + std::to_string(epoch) + " step " + std::to_string(s) + ": no valid targets, skipped");
            continue;
          }
          const double total = obj.total.item();
          require(std::isfinite(total), ErrorCode::kNumeric, "loss is " + fmt(total));
          tape.backward(obj.total);
          optimizer_->step(lr);
          result.trace.push_back({step, epoch, lr, total,
                                  {value_or_zero(obj.aux[0]), value_or_zero(obj.aux[1]), value_or_zero(obj.aux[2])},
                                  value_or_zero(obj.ce), value_or_zero(obj.reg)});
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kNumeric) throw;
          std::string last = result.trace.empty() ? "none" : fmt(result.trace.back().total);
          fail(ErrorCode::kNumeric, "training diverged at epoch " + std::to_string(epoch) + " step " +
                                        std::to_string(s) + " (lr " + fmt(lr) + ", previous loss " + last +
                                        "): " + e.what());
        }
      }
      if (log::enabled(log::Level::kInfo) && !result.trace.empty())
        log::info("epoch " + std::to_string(epoch) + " lr " + fmt(lr) + " loss " + fmt(result.trace.back().total));
      save_checkpoint(ckpt_root, epoch, result);
    }

    result.probe_final = probe_loss(probe);
    result.steps = result.trace.size();
    {
      std::ofstream os(out / "trace.csv", std::ios::binary);
      write_trace_csv(os, result.trace);
      require(static_cast<bool>(os), ErrorCode::kIo, "cannot write trace.csv");
    }
    result.model_dir = out / "model";
    nn::Metadata meta{{"epochs", std::to_string(cfg_.epochs)},
                      {"seed", std::to_string(cfg_.seed)},
                      {"probe_initial", fmt(result.probe_initial)},
                      {"probe_final", fmt(result.probe_final)}};
    model_->save(result.model_dir, meta);
    return result;
  }

 private:
  void load_teachers() {
    require(!cfg_.teacher_s1.empty() && !cfg_.teacher_s2.empty(), ErrorCode::kState,
            "hytec training needs [kd] teacher_s1 and teacher_s2 checkpoints");
    teacher_s1_ = Model::load(cfg_.teacher_s1);
    teacher_s2_ = Model::load(cfg_.teacher_s2);
    require(teacher_s1_->spec().arch == models::Arch::kTeacherS1, ErrorCode::kState,
            cfg_.teacher_s1 + " is not a teacher_s1 checkpoint");
    require(teacher_s2_->spec().arch == models::Arch::kTeacherS2, ErrorCode::kState,
            cfg_.teacher_s2 + " is not a teacher_s2 checkpoint");
    teacher_s1_->set_mode(nn::NormMode::kEval);
    teacher_s2_->set_mode(nn::NormMode::kEval);
  }

  double learning_rate(std::size_t epoch) const {
    const double e = static_cast<double>(epoch);
    if (kind_ == config::OptimKind::kSgd) return optim::cosine_lr(cfg_.lr, e / static_cast<double>(cfg_.epochs));
    return optim::WarmupCosine{cfg_.warmup_start, cfg_.peak_lr, cfg_.warmup_epochs,
                               static_cast<double>(cfg_.epochs)}(e);
  }

  /// Fisher-Yates over the training tiles; plain modulo keeps it portable.
  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    std::vector<std::size_t> order = train_index_;
    std::uint64_t state = data::mix_seed(data::mix_seed(cfg_.seed, 3), epoch);
    for (std::size_t i = order.size(); i > 1; --i) {
      state = data::mix_seed(state, i);
      std::swap(order[i - 1], order[state % i]);
    }
    return order;
  }

  Batch make_batch(const std::vector<std::size_t>& order, std::uint64_t seed, std::size_t first,
                   std::size_t count) const {
    std::vector<data::Patch> patches(count);
    parallel_for(count, cfg_.workers, [&](std::size_t k) {
      const std::size_t i = first + k;
      patches[k] = data::sample_patch(ds_.tiles[order[i % order.size()]], cfg_.patch, data::mix_seed(seed, i));
    });
    return stack_patches(patches);
  }

  Batch probe_batch() const { return make_batch(train_index_, data::mix_seed(cfg_.seed, 4), 0, cfg_.batch); }

  Objective objective(const Batch& b) {
    Objective o;
    const bool any_target = !losses::valid_indices(b.mask).empty();
    const Prediction p = model_->forward(b.s2, b.s1);
    losses::DenseTarget dense;
    if (any_target && p.probs.defined()) dense = {losses::class_targets(b.target, b.mask, binning_), b.target, b.mask};
    switch (spec_.arch) {
      case models::Arch::k2mou:
      case models::Arch::kTeacherS1:
      case models::Arch::kTeacherS2:
        if (!any_target) return skipped();
        o.reg = losses::huber(p.height, b.target, b.mask, cfg_.delta);
        o.total = o.reg;
        return o;
      case models::Arch::k2mdu:
      case models::Arch::kA2mdu: {
        if (!any_target) return skipped();
        const bool adaptive = spec_.arch == models::Arch::kA2mdu;
        auto parts = losses::combined_cr_loss(p.probs, p.height, dense, loss_cfg_,
                                              adaptive ? losses::RegKind::kAdaptive : losses::RegKind::kHuber,
                                              adaptive ? &*adaptive_ : nullptr);
        o.total = parts.total;
        o.ce = parts.ce;
        o.reg = parts.reg;
        return o;
      }
      case models::Arch::kHytec: {
        std::array<losses::Consensus, 3> aux_targets;
        bool any_aux = false;
        {
          NoGradScope no_grad;
          const Tensor t1 = teacher_s1_->forward(b.s2, b.s1).height;
          const Tensor t2 = teacher_s2_->forward(b.s2, b.s1).height;
          const auto full = losses::kd_teacher_consensus(t1, t2, cfg_.consensus_tol);
          for (std::size_t i = 0; i < 3; ++i) {
            aux_targets[i] = losses::downsample_consensus(full, p.aux[i].dim(1), p.aux[i].dim(2));
            any_aux = any_aux || !losses::valid_indices(aux_targets[i].valid).empty();
          }
        }
        if (!any_target && !any_aux) return skipped();
        auto parts = losses::hytec_total_loss(p.aux, aux_targets, p.probs, p.height, dense, loss_cfg_, *adaptive_);
        o.total = parts.total;
        o.aux = parts.aux;
        o.ce = parts.ce;
        o.reg = parts.reg;
        return o;
      }
    }
    fail(ErrorCode::kInternal, "unhandled architecture");
  }

  /// Train-mode loss on the probe batch with batch-norm statistics restored afterwards.
  double probe_loss(const Batch& b) {
    std::vector<std::vector<double>> saved;
    for (const auto& e : model_->store().entries())
      if (!e.trainable) saved.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
    double v = 0.0;
    {
      NoGradScope no_grad;
      Objective o = objective(b);
      v = o.empty ? 0.0 : o.total.item();
    }
    std::size_t k = 0;
    for (const auto& e : model_->store().entries())
      if (!e.trainable) {
        Tensor t = e.tensor;
        std::copy(saved[k].begin(), saved[k].end(), t.data_mut().begin());
        ++k;
      }
    return v;
  }

  void save_checkpoint(const fs::path& root, std::size_t epoch, const TrainResult& result) {
    const fs::path final_dir = root / epoch_dir_name(epoch);
    const fs::path tmp = root / (".tmp_" + epoch_dir_name(epoch));
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    model_->save(tmp / "model", {{"epoch", std::to_string(epoch)}, {"probe_initial", fmt(result.probe_initial)}});
    if (!loss_store_.entries().empty()) nn::save_checkpoint(tmp / "loss", loss_store_);

    const auto st = optimizer_->state();
    nn::ParamStore slots;
    for (std::size_t i = 0; i < st.slots.size(); ++i)
      slots.add_buffer("slot" + std::to_string(i), Tensor::from_data({st.slots[i].size()}, st.slots[i]));
    nn::save_checkpoint(tmp / "optim", slots, {{"steps", std::to_string(st.steps)}});
    {
      std::ofstream os(tmp / "trace.csv", std::ios::binary);
      write_trace_csv(os, result.trace);
      require(static_cast<bool>(os), ErrorCode::kIo, "cannot write checkpoint trace");
    }
    fs::remove_all(final_dir);
    fs::rename(tmp, final_dir);

    auto all = list_checkpoints(root);
    while (all.size() > cfg_.keep_checkpoints) {
      fs::remove_all(all.front());
      all.erase(all.begin());
    }
  }

  std::size_t restore(const fs::path& dir, TrainResult& result) {
    const auto meta = nn::load_checkpoint(dir / "model", model_->store());
    require(ModelSpec::from_metadata(meta).arch == spec_.arch, ErrorCode::kState,
            "checkpoint " + dir.string() + " holds a different architecture");
    if (!loss_store_.entries().empty()) nn::load_checkpoint(dir / "loss", loss_store_);

    auto st = optimizer_->state();
    nn::ParamStore slots;
    for (std::size_t i = 0; i < st.slots.size(); ++i)
      slots.add_buffer("slot" + std::to_string(i), Tensor::zeros({st.slots[i].size()}));
    const auto opt_meta = nn::load_checkpoint(dir / "optim", slots);
    for (std::size_t i = 0; i < st.slots.size(); ++i) {
      const auto d = slots.entries()[i].tensor.data();
      st.slots[i].assign(d.begin(), d.end());
    }
    st.steps = std::stoull(opt_meta.at("steps"));
    optimizer_->load_state(st);

    result.trace = read_trace_csv(dir / "trace.csv");
    result.probe_initial = std::stod(meta.at("probe_initial"));
    return std::stoull(meta.at("epoch")) + 1;
  }

  config::RunConfig cfg_;
  const data::SynthDataset& ds_;
  ModelSpec spec_;
  losses::HeightBinning binning_;
  losses::HyTecLossConfig loss_cfg_;
  std::vector<std::size_t> train_index_;
  std::unique_ptr<Model> model_, teacher_s1_, teacher_s2_;
  std::optional<losses::AdaptiveLossState> adaptive_;
  nn::ParamStore loss_store_;
  config::OptimKind kind_ = config::OptimKind::kSgd;
  std::unique_ptr<optim::Optimizer> optimizer_;
  std::size_t steps_per_epoch_ = 1;
};

}  // namespace

void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& rows) {
  os << kTraceHeader << '\n';
  for (const auto& r : rows)
    os << r.step << ',' << r.epoch << ',' << fmt(r.lr) << ',' << fmt(r.total) << ',' << fmt(r.aux[0]) << ','
       << fmt(r.aux[1]) << ',' << fmt(r.aux[2]) << ',' << fmt(r.ce) << ',' << fmt(r.reg) << '\n';
}

TrainResult train_model(const config::RunConfig& cfg, const data::SynthDataset& ds, const fs::path& out) {
  Trainer trainer(cfg, ds);
  return trainer.run(out);
}

}  // namespace canopy::train
