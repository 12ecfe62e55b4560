// Acceptance checks. Prints one PASS/FAIL line per criterion; with arguments
// (e.g. "1 4 7") only those criteria run. Exit status is nonzero if any fails.
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "canopy/commands.hpp"
#include "canopy/datapipe.hpp"
#include "canopy/gradcheck.hpp"
#include "canopy/hytec.hpp"
#include "canopy/losses.hpp"
#include "canopy/metrics.hpp"
#include "canopy/nn.hpp"
#include "canopy/ops.hpp"
#include "canopy/train.hpp"
#include "canopy/unet.hpp"
#include "grid_fixture.hpp"
#include "support.hpp"

using namespace canopy;
using canopy::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

/// Collects sub-check outcomes for one criterion.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (!ok && failures_.size() < 8) failures_.push_back(what);
    failed_ += !ok;
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool passed() const { return failed_ == 0 && total_ > 0; }
  std::string summary() const {
    std::ostringstream os;
    os << total_ - failed_ << "/" << total_ << " checks";
    for (const auto& n : notes_) os << "; " << n;
    for (const auto& f : failures_) os << "\n    failed: " << f;
    return os.str();
  }

 private:
  std::size_t total_ = 0, failed_ = 0;
  std::vector<std::string> failures_, notes_;
};

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("canopy_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

/// Relative paths of every regular file under root, sorted.
std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

/// Weighted sum so every output coordinate carries a distinct gradient.
Tensor probe(const Tensor& y, std::uint64_t seed) {
  return ops::sum(ops::mul(y, random_tensor(y.shape(), seed, -1, 1, false)));
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

void criterion_gradients(Checks& c) {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  auto gc = [&](const std::string& name, const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                std::size_t coords = 0) {
    const auto r = grad_check(f, wrt, {.max_coords_per_input = coords});
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = name;
    }
    c.expect(r.max_rel_error < 1e-4, name + " rel err " + num(r.max_rel_error) + " at " + r.worst);
  };

  // Elementwise, structural and linear-algebra primitives.
  std::uint64_t s = 1000;
  for (const Shape& shape : {Shape{4}, Shape{3, 5}, Shape{2, 3, 4}}) {
    auto a = random_tensor(shape, ++s), b = random_tensor(shape, ++s);
    const std::string tag = " " + to_string(shape);
    gc("add" + tag, [&] { return probe(ops::add(a, b), 1); }, {a, b});
    gc("sub" + tag, [&] { return probe(ops::sub(a, b), 2); }, {a, b});
    gc("mul" + tag, [&] { return probe(ops::mul(a, b), 3); }, {a, b});
    gc("div" + tag, [&] { return probe(ops::div(a, ops::add(ops::square(b), 0.5)), 4); }, {a, b});
    gc("scalar ops" + tag, [&] { return probe(ops::mul(ops::add(a, 0.25), -1.5), 5); }, {a});
    gc("neg" + tag, [&] { return probe(ops::neg(a), 6); }, {a});
    gc("exp" + tag, [&] { return probe(ops::exp(a), 7); }, {a});
    gc("log" + tag, [&] { return probe(ops::log(ops::add(ops::square(a), 0.3)), 8); }, {a});
    gc("abs" + tag, [&] { return probe(ops::abs(a), 9); }, {a});
    gc("clamp_min" + tag, [&] { return probe(ops::clamp_min(a, 0.1), 10); }, {a});
    gc("sqrt" + tag, [&] { return probe(ops::sqrt(ops::add(ops::square(a), 0.2)), 11); }, {a});
    gc("sum/mean" + tag, [&] { return ops::add(ops::square(ops::sum(a)), ops::mean(ops::mul(a, b))); }, {a, b});
    gc("reshape" + tag, [&] { return probe(ops::reshape(a, {a.numel()}), 12); }, {a});
    gc("concat/slice" + tag, [&] {
      auto cat = ops::concat({a, b}, 0);
      return probe(ops::slice(cat, 0, 1, cat.dim(0)), 13);
    }, {a, b});
    std::vector<std::size_t> axes(a.rank());
    std::iota(axes.rbegin(), axes.rend(), 0);
    gc("permute" + tag, [&] { return probe(ops::permute(a, axes), 14); }, {a});
    const std::size_t last = shape.back();
    auto bias = random_tensor({last}, ++s);
    gc("add_bias" + tag, [&] { return probe(ops::add_bias(a, bias), 15); }, {a, bias});
    gc("scale_last" + tag, [&] { return probe(ops::scale_last(a, bias), 16); }, {a, bias});
    gc("gather_rows" + tag, [&] { return probe(ops::gather_rows(a, last, {0, a.numel() / last - 1, 0}), 17); }, {a});
    std::vector<unsigned char> cond(a.numel());
    for (std::size_t i = 0; i < cond.size(); ++i) cond[i] = i % 3 == 0;
    gc("where" + tag, [&] { return probe(ops::where(cond, a, b), 18); }, {a, b});
  }
  {
    auto a = random_tensor({3, 4}, ++s), b = random_tensor({4, 5}, ++s);
    gc("matmul", [&] { return probe(ops::matmul(a, b), 19); }, {a, b});
    gc("transpose", [&] { return probe(ops::transpose(a), 20); }, {a});
  }

  // Neural-network primitives.
  {
    nn::ParamStore store;
    nn::Rng rng(3);
    auto x = random_tensor({2, 6, 6, 3}, ++s);
    nn::Conv2dParams conv{random_tensor({3, 3, 3, 4}, ++s), random_tensor({4}, ++s), 1, 1};
    gc("conv2d 3x3 pad 1", [&] { return probe(nn::conv2d(x, conv), 21); }, {x, conv.kernel, conv.bias});
    nn::Conv2dParams strided{random_tensor({2, 2, 3, 2}, ++s), random_tensor({2}, ++s), 2, 0};
    gc("conv2d 2x2 stride 2", [&] { return probe(nn::conv2d(x, strided), 22); }, {x, strided.kernel, strided.bias});
    nn::ConvT2dParams up{random_tensor({2, 2, 2, 3}, ++s), random_tensor({2}, ++s), 2};
    gc("conv2d_transpose", [&] { return probe(nn::conv2d_transpose(x, up), 23); }, {x, up.kernel, up.bias});
    auto bn = nn::make_batch_norm(store, "bn", 3);
    gc("batch_norm (train)", [&] { return probe(nn::batch_norm(x, bn), 24); }, {x, bn.gamma, bn.beta});
    bn.mode = nn::NormMode::kEval;
    gc("batch_norm (eval)", [&] { return probe(nn::batch_norm(x, bn), 25); }, {x, bn.gamma, bn.beta});
    gc("leaky_relu", [&] { return probe(nn::leaky_relu(x), 26); }, {x});
    gc("softplus", [&] { return probe(nn::softplus(x), 27); }, {x});
    gc("gelu", [&] { return probe(nn::gelu(x), 28); }, {x});
    gc("softmax", [&] { return probe(nn::softmax(x, 3), 29); }, {x});
    gc("bilinear_resize", [&] { return probe(nn::bilinear_resize(x, 3, 4), 30); }, {x});
    auto tok = random_tensor({5, 8}, ++s);
    nn::LayerNormParams ln{random_tensor({8}, ++s, 0.5, 1.5), random_tensor({8}, ++s)};
    gc("layer_norm", [&] { return probe(nn::layer_norm(tok, ln), 31); }, {tok, ln.gamma, ln.beta});
    auto lin = nn::make_linear(store, "lin", 8, 3, rng);
    gc("linear", [&] { return probe(nn::linear(tok, lin), 32); }, {tok, lin.weight, lin.bias});
    auto mh = nn::make_mhsa(store, "attn", 8, 2, rng);
    gc("mhsa", [&] { return probe(nn::mhsa(tok, mh), 33); },
       {tok, mh.q.weight, mh.k.weight, mh.v.weight, mh.out.weight, mh.q.bias, mh.out.bias});
  }

  // Composite blocks.
  {
    nn::ParamStore store;
    nn::Rng rng(4);
    auto x = random_tensor({1, 4, 4, 2}, ++s);
    auto ceb = models::make_ceb(store, "ceb", 2, rng);
    std::vector<Tensor> wrt{x};
    for (auto& p : store.params()) wrt.push_back(p);
    gc("CEB", [&] { return probe(models::ceb_forward(x, ceb), 40); }, wrt);

    nn::ParamStore cs;
    auto deep = random_tensor({1, 2, 2, 4}, ++s), skip = random_tensor({1, 4, 4, 2}, ++s);
    auto cdb = models::make_cdb(cs, "cdb", 4, rng);
    wrt = {deep, skip};
    for (auto& p : cs.params()) wrt.push_back(p);
    gc("CDB", [&] { return probe(models::cdb_forward(deep, skip, cdb), 41); }, wrt);

    nn::ParamStore ss;
    auto e1 = random_tensor({1, 2, 2, 3}, ++s), e2 = random_tensor({1, 2, 2, 1}, ++s);
    auto saa = models::make_saa(ss, "saa", 4, rng);
    wrt = {e1, e2};
    for (auto& p : ss.params()) wrt.push_back(p);
    gc("SAA", [&] { return probe(models::saa_forward(e1, &e2, saa), 42); }, wrt);

    nn::ParamStore hs;
    auto feat = random_tensor({1, 3, 3, 4}, ++s);
    auto single = models::make_single_head(hs, "single", 4, rng);
    gc("single head", [&] { return probe(models::head_single(feat, single), 43); },
       {feat, single.conv.kernel, single.conv.bias});
    auto dual = models::make_dual_head(hs, "dual", 4, 3, rng);
    gc("dual head (height)", [&] { return probe(models::head_dual(feat, dual).height, 44); },
       {feat, dual.cls.kernel, dual.reg.kernel, dual.out.kernel, dual.cls.bias, dual.out.bias});
    gc("dual head (probs)", [&] { return probe(models::head_dual(feat, dual).probs, 45); },
       {feat, dual.cls.kernel, dual.cls.bias});
  }

  // Miniature Hy-TeC end to end.
  {
    models::HyTecConfig hc;
    hc.image = 32;
    hc.patch = 8;
    hc.embed = 16;
    hc.blocks = 2;
    hc.heads = 2;
    hc.mlp_ratio = 2;
    hc.l_hat = 16;
    hc.bins = 4;
    models::HyTec model(hc, 5);
    auto x = random_tensor({1, 32, 32, 10}, ++s, 0, 1, false);
    gc("Hy-TeC miniature", [&] {
      auto out = model.forward(x);
      auto total = probe(out.main.height, 50);
      for (std::size_t i = 0; i < 3; ++i) total = ops::add(total, probe(out.aux[i], 51 + i));
      return total;
    }, model.store().params(), 8);
  }

  // All five losses, including the adaptive shape and scale.
  {
    auto pred = random_tensor({2, 3, 3}, ++s, 0, 30);
    auto target = random_tensor({2, 3, 3}, ++s, 0, 30, false);
    auto mask = Tensor::full({2, 3, 3}, 1.0);
    mask.data_mut()[4] = 0.0;
    gc("huber", [&] { return losses::huber(pred, target, mask, 3.0); }, {pred});

    auto logits = random_tensor({2, 3, 3, 10}, ++s, -2, 2);
    const auto bins = losses::default_binning();
    const auto classes = losses::class_targets(target, mask, bins);
    const auto w = losses::batch_class_weights(classes, mask);
    gc("weighted cross-entropy", [&] { return losses::weighted_cross_entropy(nn::softmax(logits, 3), classes, mask, w); },
       {logits});

    for (double a : {-2.0, 0.0, 0.5, 1.0, 2.0, 4.0}) {
      auto st = losses::AdaptiveLossState::make(a, 1.7);
      gc("adaptive alpha=" + num(a), [&] { return losses::adaptive_loss(pred, target, mask, st); },
         {pred, st.alpha, st.raw_c});
    }

    auto st = losses::AdaptiveLossState::make(1.0, 2.0);
    const losses::DenseTarget dense{classes, target, mask};
    losses::HyTecLossConfig cfg;
    gc("combined (huber)", [&] {
      return losses::combined_cr_loss(nn::softmax(logits, 3), pred, dense, cfg, losses::RegKind::kHuber, nullptr).total;
    }, {logits, pred});
    gc("combined (adaptive)", [&] {
      return losses::combined_cr_loss(nn::softmax(logits, 3), pred, dense, cfg, losses::RegKind::kAdaptive, &st).total;
    }, {logits, pred, st.alpha, st.raw_c});

    std::array<Tensor, 3> aux{random_tensor({2, 1, 1}, ++s, 0, 30), random_tensor({2, 2, 2}, ++s, 0, 30),
                              random_tensor({2, 4, 4}, ++s, 0, 30)};
    std::array<losses::Consensus, 3> teacher;
    for (std::size_t i = 0; i < 3; ++i)
      teacher[i] = {random_tensor(aux[i].shape(), ++s, 0, 30, false), Tensor::full(aux[i].shape(), 1.0)};
    teacher[2].valid.data_mut()[3] = 0.0;
    gc("Hy-TeC total", [&] {
      return losses::hytec_total_loss(aux, teacher, nn::softmax(logits, 3), pred, dense, cfg, st).total;
    }, {aux[0], aux[1], aux[2], logits, pred, st.alpha, st.raw_c});
  }

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.expect(secs < 600.0, "suite took " + num(secs) + " s");
  c.note("worst rel err " + num(worst) + " (" + worst_name + ")");
  c.note(num(secs, 3) + " s");
}

// ---------------------------------------------------------------------------
// 2. Shape laws

void criterion_shapes(Checks& c) {
  NoGradScope no_grad;
  nn::ParamStore store;
  nn::Rng rng(6);
  std::size_t serial = 0;
  auto fresh = [&](const std::string& base) { return base + std::to_string(serial++); };
  auto shape_is = [&](const Tensor& t, const Shape& want, const std::string& what) {
    c.expect(t.shape() == want, what + ": got " + to_string(t.shape()) + ", want " + to_string(want));
  };

  for (std::size_t side : {32, 64, 256}) {
    const std::string at = " at " + std::to_string(side);
    // Encoder: [S, S, C] -> [S/2, S/2, 2C]; decoder: [S/2, S/2, C] + [S, S, C/2] -> [S, S, C/2].
    for (std::size_t ch : {2, 8}) {
      auto ceb = models::make_ceb(store, fresh("ceb"), ch, rng);
      shape_is(models::ceb_forward(random_tensor({side, side, ch}, 1, -1, 1, false), ceb), {side / 2, side / 2, 2 * ch},
               "CEB C=" + std::to_string(ch) + at);
      auto cdb = models::make_cdb(store, fresh("cdb"), ch, rng);
      shape_is(models::cdb_forward(random_tensor({side / 2, side / 2, ch}, 2, -1, 1, false),
                                   random_tensor({side, side, ch / 2}, 3, -1, 1, false), cdb),
               {side, side, ch / 2}, "CDB C=" + std::to_string(ch) + at);
    }

    // Every U-Net keeps the input extent.
    for (auto arch : {models::Arch::k2mou, models::Arch::k2mdu, models::Arch::kA2mdu, models::Arch::kTeacherS1,
                      models::Arch::kTeacherS2}) {
      models::UNet net({.arch = arch, .stem_width = 2, .bins = 10}, 7);
      const auto out = net.forward(random_tensor({1, side, side, 10}, 4, 0, 1, false),
                                   random_tensor({1, side, side, 2}, 5, -1, 1, false));
      shape_is(out.height, {1, side, side}, std::string(models::arch_name(arch)) + at);
      if (models::has_dual_head(arch)) shape_is(out.probs, {1, side, side, 10}, "probs" + at);
    }

    // Tokens: two band groups of (S/P)^2 patches each.
    const std::size_t patch = 16, g = side / patch;
    const std::size_t embed = side == 256 ? 1536 : 32;
    models::HyTecConfig hc;
    hc.image = side;
    hc.patch = patch;
    hc.embed = embed;
    hc.blocks = 1;
    hc.heads = 2;
    hc.mlp_ratio = 1;
    hc.l_hat = 16;
    hc.bins = 10;
    models::HyTec model(hc, 8);
    const auto tokens = model.embed(random_tensor({side, side, 10}, 9, 0, 1, false));
    shape_is(tokens, {2 * g * g, embed}, "token matrix" + at);
    const auto encoded = models::encoder_block_forward(tokens, model.blocks()[0]);
    shape_is(encoded, {2 * g * g, embed}, "encoder block" + at);
    const auto grid = models::spatial_concat(encoded, g * g);
    shape_is(grid, {g, g, embed}, "spatial concat" + at);

    // Reassembly stages: G/2, G, 2G, 4G with L-hat channels.
    const std::array<std::size_t, 4> rb_side{g / 2, g, 2 * g, 4 * g};
    for (std::size_t stage = 1; stage <= 4; ++stage) {
      auto rb = models::make_rb(store, fresh("rb"), stage, embed, 16, rng);
      shape_is(models::rb_forward(grid, rb), {rb_side[stage - 1], rb_side[stage - 1], 16},
               "RB" + std::to_string(stage) + at);
    }
    // Decoder block: x(P/4) spatially, channels / 8, back to full resolution from 4G.
    auto db = models::make_db(store, fresh("db"), 64, patch / 4, rng);
    shape_is(models::db_forward(random_tensor({4 * g, 4 * g, 64}, 10, -1, 1, false), db), {side, side, 8}, "DB" + at);

    // Whole model at reduced width.
    hc.embed = 32;
    hc.blocks = 2;
    models::HyTec small(hc, 11);
    const auto out = small.forward(random_tensor({1, side, side, 10}, 12, 0, 1, false));
    shape_is(out.main.height, {1, side, side}, "Hy-TeC main" + at);
    shape_is(out.main.probs, {1, side, side, 10}, "Hy-TeC probs" + at);
    shape_is(out.aux[0], {1, side / 16, side / 16}, "Hy-TeC aux 1" + at);
    shape_is(out.aux[1], {1, side / 8, side / 8}, "Hy-TeC aux 2" + at);
    shape_is(out.aux[2], {1, side / 4, side / 4}, "Hy-TeC aux 3" + at);
  }
  c.note("256 token matrix checked at 512 x 1536");

  // Contract violations are rejected.
  auto rejects = [&](const std::function<void()>& f, const std::string& what) {
    bool threw = false;
    try {
      f();
    } catch (const Error&) {
      threw = true;
    }
    c.expect(threw, what + " accepted");
  };
  auto ceb = models::make_ceb(store, "bad", 4, rng);
  rejects([&] { models::ceb_forward(random_tensor({15, 16, 4}, 13, -1, 1, false), ceb); }, "odd CEB input");
  auto cdb = models::make_cdb(store, "badc", 8, rng);
  rejects([&] {
    models::cdb_forward(random_tensor({8, 8, 8}, 14, -1, 1, false), random_tensor({16, 16, 8}, 15, -1, 1, false), cdb);
  }, "CDB skip with wrong channels");
}

// ---------------------------------------------------------------------------
// 3. Loss identities

void criterion_loss_identities(Checks& c) {
  const auto one = Tensor::full({1, 1}, 1.0);
  auto huber_at = [&](double r) {
    return losses::huber(Tensor::from_data({1, 1}, {r}), Tensor::zeros({1, 1}), one, 3.0).item();
  };
  // Both branches at the threshold, and continuity of value and slope across it.
  c.expect(huber_at(3.0) == 4.5 && 0.5 * 3.0 * 3.0 == 4.5 && 3.0 * (3.0 - 1.5) == 4.5, "huber(3) != 4.5");
  c.expect(std::fabs(huber_at(3.0 - 1e-9) - 4.5) < 1e-8 && std::fabs(huber_at(3.0 + 1e-9) - 4.5) < 1e-8,
           "huber value jumps at delta");
  for (double r : {3.0 - 1e-7, 3.0 + 1e-7, -3.0 - 1e-7}) {
    auto p = Tensor::from_data({1, 1}, {r}, true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(losses::huber(p, Tensor::zeros({1, 1}), one, 3.0));
    c.expect(std::fabs(std::fabs(p.grad()[0]) - 3.0) < 1e-6, "huber slope not continuous at r=" + num(r, 10));
  }

  // Adaptive loss near its removable singularities against the analytic limits.
  auto rho = [](double r, double a, double cc) {
    return losses::adaptive_rho(Tensor::scalar(r), Tensor::scalar(a), Tensor::scalar(cc)).item();
  };
  double worst2 = 0.0, worst0 = 0.0;
  for (double cc : {0.5, 1.0, 2.5}) {
    for (double r = -1.5 * cc; r <= 1.5 * cc + 1e-12; r += 0.05 * cc) {
      const double x2 = (r / cc) * (r / cc);
      const double lim2 = 0.5 * x2, lim0 = std::log(0.5 * x2 + 1.0);
      for (double e : {1e-6, -1e-6}) {
        worst2 = std::max(worst2, std::fabs(rho(r, 2.0 + e, cc) - lim2));
        worst0 = std::max(worst0, std::fabs(rho(r, e, cc) - lim0));
      }
      c.expect(rho(r, 2.0, cc) == lim2 || std::fabs(rho(r, 2.0, cc) - lim2) < 1e-15, "alpha=2 branch formula");
    }
  }
  // Closer to the singularity the generic form stays within tolerance further out.
  double wide2 = 0.0, wide0 = 0.0;
  for (double x = -10.0; x <= 10.0 + 1e-12; x += 0.125) {
    for (double e : {1e-8, -1e-8}) {
      wide2 = std::max(wide2, std::fabs(rho(x, 2.0 + e, 1.0) - 0.5 * x * x));
      wide0 = std::max(wide0, std::fabs(rho(x, e, 1.0) - std::log(0.5 * x * x + 1.0)));
    }
  }
  c.expect(wide2 < 1e-5, "alpha=2 limit gap " + num(wide2) + " for |r/c| <= 10");
  c.expect(wide0 < 1e-5, "alpha=0 limit gap " + num(wide0) + " for |r/c| <= 10");
  c.expect(worst2 < 1e-5, "alpha=2 limit gap " + num(worst2));
  c.expect(worst0 < 1e-5, "alpha=0 limit gap " + num(worst0));
  c.note("adaptive limit gaps " + num(worst2, 2) + " / " + num(worst0, 2) + " at 1e-6 from alpha 2 / 0 (|r/c| <= 1.5), " +
         num(wide2, 2) + " / " + num(wide0, 2) + " at 1e-8 (|r/c| <= 10)");

  // Uniform weights reproduce the unweighted cross-entropy bit for bit.
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto probs = nn::softmax(random_tensor({3, 4, 4, 10}, seed, -2, 2, false), 3);
    const auto heights = random_tensor({3, 4, 4}, seed + 10, 0, 50, false);
    auto mask = Tensor::full({3, 4, 4}, 1.0);
    mask.data_mut()[seed] = 0.0;
    const auto t = losses::class_targets(heights, mask, losses::default_binning());
    const double w = losses::weighted_cross_entropy(probs, t, mask, Tensor::full({10}, 1.0)).item();
    const double u = losses::cross_entropy(probs, t, mask).item();
    c.expect(std::bit_cast<std::uint64_t>(w) == std::bit_cast<std::uint64_t>(u),
             "uniform CE " + num(w, 17) + " vs " + num(u, 17));
  }

  // Total loss with betas (0, 0, 0, 1) is the combined loss.
  for (std::uint64_t seed : {4, 5, 6}) {
    const auto probs = nn::softmax(random_tensor({2, 8, 8, 10}, seed, -2, 2, false), 3);
    const auto reg = random_tensor({2, 8, 8}, seed + 10, 0, 50, false);
    const auto h = random_tensor({2, 8, 8}, seed + 20, 0, 50, false);
    auto m = Tensor::full({2, 8, 8}, 1.0);
    for (std::size_t i = 0; i < m.numel(); i += 3) m.data_mut()[i] = 0.0;
    const losses::DenseTarget dense{losses::class_targets(h, m, losses::default_binning()), h, m};
    std::array<Tensor, 3> aux{random_tensor({2, 1, 1}, seed, 0, 30, false), random_tensor({2, 2, 2}, seed, 0, 30, false),
                              random_tensor({2, 4, 4}, seed, 0, 30, false)};
    std::array<losses::Consensus, 3> teacher;
    for (std::size_t i = 0; i < 3; ++i)
      teacher[i] = {random_tensor(aux[i].shape(), seed + 30, 0, 30, false), Tensor::full(aux[i].shape(), 1.0)};
    losses::HyTecLossConfig cfg;
    cfg.betas = {0, 0, 0, 1};
    const auto st = losses::AdaptiveLossState::make(1.3, 2.0);
    const double total = losses::hytec_total_loss(aux, teacher, probs, reg, dense, cfg, st).total.item();
    const double eq5 = losses::combined_cr_loss(probs, reg, dense, cfg, losses::RegKind::kAdaptive, &st).total.item();
    c.expect(std::bit_cast<std::uint64_t>(total) == std::bit_cast<std::uint64_t>(eq5),
             "reduced total " + num(total, 17) + " vs " + num(eq5, 17));
  }
}

// ---------------------------------------------------------------------------
// 4. Metric identity and sharpness table

void criterion_metrics(Checks& c) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> len(2, 500);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = len(rng);
    std::vector<double> y(n), yhat(n);
    const double slope = 2.0 * u(rng) - 0.5, noise = 20.0 * u(rng), shift = 10.0 * u(rng) - 5.0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = 50.0 * u(rng);
      yhat[i] = slope * y[i] + shift + noise * (u(rng) - 0.5);
    }
    // Test-side mean squared error; the decomposition terms come from the library report.
    double mse = 0.0;
    for (std::size_t i = 0; i < n; ++i) mse += (yhat[i] - y[i]) * (yhat[i] - y[i]);
    mse /= static_cast<double>(n);
    const auto r = metrics::summary_stats(y, yhat);
    const double parts = r.bias * r.bias + r.sdsd + r.lcs;
    worst = std::max(worst, std::fabs(mse - parts) / mse);
  }
  c.expect(worst < 1e-9, "worst relative residual " + num(worst));
  c.note("worst relative residual " + num(worst, 2) + " over 1000 pairs");

  for (auto [g, m] : std::vector<std::pair<double, double>>{{1.0, 10.0}, {1.21, 20.0}, {1.37, 25.0}, {2.0, 40.0}})
    c.expect(metrics::gsi_to_resolution(g) == m, "GSI " + num(g) + " -> " + num(metrics::gsi_to_resolution(g)));
}

// ---------------------------------------------------------------------------
// 5. Saturation mitigation

struct SaturationRun {
  double bias_tall = 0.0;
  std::size_t n_tall = 0;
  double seconds = 0.0;
};

// Budget shared by both models; see the README for the settings rationale.
config::RunConfig saturation_config(const std::string& arch, std::uint64_t seed) {
  config::RunConfig cfg;
  cfg.arch = arch;
  cfg.seed = seed;
  cfg.tiles = 32;
  cfg.tile_size = 64;
  cfg.patch = 32;
  cfg.stem_width = 8;
  cfg.batch = 8;
  cfg.epochs = 60;
  cfg.steps_per_epoch = 10;
  cfg.lr = 1e-2;
  return cfg;
}

SaturationRun train_and_score(const config::RunConfig& cfg, const data::SynthDataset& ds) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train::train_model(cfg, ds, scratch("ac5_" + cfg.arch + "_" + std::to_string(cfg.seed)));
  auto model = train::Model::load(result.model_dir);
  model->set_mode(nn::NormMode::kEval);
  SaturationRun run;
  double sum = 0.0;
  for (const auto& tile : ds.tiles) {
    if (data::tile_split(tile.id) != data::Split::kVal) continue;
    const auto pred = model->predict_tile(tile.s2, tile.s1);
    for (std::size_t i = 0; i < pred.numel(); ++i) {
      if (tile.height.data()[i] > 35.0) {
        sum += pred.data()[i] - tile.height.data()[i];
        ++run.n_tall;
      }
    }
  }
  run.bias_tall = run.n_tall ? sum / static_cast<double>(run.n_tall) : 0.0;
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

void criterion_saturation(Checks& c) {
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto base = saturation_config("2mou", seed);
    const auto ds = data::synth_dataset({base.tiles, base.tile_size, base.shot_density, base.reject_fraction, seed});
    std::size_t short_targets = 0, targets = 0;
    for (const auto& t : ds.tiles)
      for (std::size_t i = 0; i < t.mask.numel(); ++i)
        if (t.mask.data()[i] != 0.0) {
          ++targets;
          short_targets += t.target.data()[i] < 15.0;
        }
    const double short_share = static_cast<double>(short_targets) / static_cast<double>(targets);
    c.expect(short_share > 0.9, "seed " + std::to_string(seed) + ": short-target share " + num(short_share));

    const auto single = train_and_score(base, ds);
    const auto adaptive = train_and_score(saturation_config("a2mdu", seed), ds);
    c.expect(single.n_tall > 0, "no validation pixels above 35 m");
    c.expect(std::max(single.seconds, adaptive.seconds) <= 1800.0, "budget exceeded");
    const bool ok = std::fabs(adaptive.bias_tall) <= 0.7 * std::fabs(single.bias_tall);
    c.expect(ok, "seed " + std::to_string(seed) + ": a2mdu bias " + num(adaptive.bias_tall) + " m vs 2mou " +
                     num(single.bias_tall) + " m");
    c.note("seed " + std::to_string(seed) + " bias>35m 2mou " + num(single.bias_tall) + " / a2mdu " +
           num(adaptive.bias_tall) + " (n=" + std::to_string(single.n_tall) + ", short share " + num(short_share, 3) +
           ", " + num(single.seconds, 3) + " s + " + num(adaptive.seconds, 3) + " s)");
  }
}

// ---------------------------------------------------------------------------
// 6. Distillation

config::RunConfig kd_config(const std::string& arch) {
  config::RunConfig cfg;
  cfg.arch = arch;
  cfg.seed = 11;
  cfg.tiles = 8;
  cfg.tile_size = 32;
  cfg.patch = 32;
  cfg.stem_width = 4;
  cfg.batch = 4;
  cfg.epochs = 40;
  cfg.steps_per_epoch = 4;
  cfg.vit_patch = 8;
  cfg.embed = 32;
  cfg.blocks = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.l_hat = 16;
  cfg.peak_lr = 1e-3;
  cfg.warmup_start = 1e-5;
  cfg.warmup_epochs = 2;
  return cfg;
}

void criterion_distillation(Checks& c) {
  const auto base = kd_config("hytec");
  const auto ds = data::synth_dataset({base.tiles, base.tile_size, base.shot_density, base.reject_fraction, base.seed});
  const auto t1 = train::train_model(kd_config("teacher_s1"), ds, scratch("ac6_t1"));
  const auto t2 = train::train_model(kd_config("teacher_s2"), ds, scratch("ac6_t2"));

  // The teachers must stay frozen: their files are compared before and after.
  auto snapshot = [](const fs::path& dir) {
    std::map<fs::path, std::string> files;
    for (const auto& f : files_under(dir)) files[f] = slurp(dir / f);
    return files;
  };
  const auto t1_before = snapshot(t1.model_dir), t2_before = snapshot(t2.model_dir);
  auto cfg = base;
  cfg.teacher_s1 = t1.model_dir.string();
  cfg.teacher_s2 = t2.model_dir.string();
  const auto r = train::train_model(cfg, ds, scratch("ac6_hytec"));
  const double drop = 1.0 - r.probe_final / r.probe_initial;
  c.expect(drop >= 0.5, "total loss fell " + num(100 * drop) + "% (" + num(r.probe_initial) + " -> " +
                            num(r.probe_final) + ")");
  c.note("total loss " + num(r.probe_initial) + " -> " + num(r.probe_final) + " (" + num(100 * drop, 3) + "% drop)");
  c.expect(snapshot(t1.model_dir) == t1_before && snapshot(t2.model_dir) == t2_before, "teacher files changed during student training");

  // Gradient isolation on a miniature model: one target family at a time.
  models::HyTecConfig hc;
  hc.image = 32;
  hc.patch = 8;
  hc.embed = 16;
  hc.blocks = 2;
  hc.heads = 2;
  hc.mlp_ratio = 2;
  hc.l_hat = 16;
  hc.bins = 10;
  models::HyTec model(hc, 3);
  const auto x = random_tensor({1, 32, 32, 10}, 4, 0, 1, false);
  const auto h = random_tensor({1, 32, 32}, 5, 0, 45, false);
  auto gedi = Tensor::zeros({1, 32, 32});
  for (std::size_t i = 0; i < gedi.numel(); i += 5) gedi.data_mut()[i] = 1.0;
  const auto classes = losses::class_targets(h, gedi, losses::default_binning());
  std::array<losses::Consensus, 3> teacher;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t side = 4u << i;
    teacher[i] = {random_tensor({1, side, side}, 6 + i, 0, 45, false), Tensor::full({1, side, side}, 1.0)};
  }
  const auto adaptive = losses::AdaptiveLossState::make(1.0, 1.0);
  auto run = [&](bool gedi_on, bool teacher_on) {
    model.store().zero_grad();
    auto targets = teacher;
    if (!teacher_on)
      for (auto& t : targets) t.valid = Tensor::zeros(t.valid.shape());
    const losses::DenseTarget dense{classes, h, gedi_on ? gedi : Tensor::zeros(gedi.shape())};
    Tape tape;
    TapeScope scope(tape);
    auto out = model.forward(x);
    tape.backward(losses::hytec_total_loss(out.aux, targets, out.main.probs, out.main.height, dense, {}, adaptive).total);
  };
  auto grad_mass = [&](const std::string& prefix) {
    double m = 0.0;
    for (const auto& e : model.store().entries())
      if (e.trainable && e.name.rfind(prefix, 0) == 0 && e.tensor.has_grad())
        for (double g : e.tensor.grad()) m += std::fabs(g);
    return m;
  };
  run(true, false);
  c.expect(grad_mass("aux") == 0.0, "aux heads receive GEDI-target gradient");
  c.expect(grad_mass("head.") > 0.0, "main head receives no GEDI gradient");
  run(false, true);
  c.expect(grad_mass("head.") == 0.0 && grad_mass("db.") == 0.0, "main head receives teacher gradient");
  c.expect(grad_mass("aux") > 0.0, "aux heads receive no teacher gradient");
}

// ---------------------------------------------------------------------------
// 7. Pipeline exactness

void criterion_pipeline(Checks& c) {
  for (std::uint64_t seed : {5, 6, 7}) {
    data::SynthSpec spec;
    spec.tiles = 4;
    spec.tile_size = 48;
    spec.reject_fraction = 0.4;
    spec.seed = seed;
    const auto ds = data::synth_dataset(spec);
    const double sigma = data::cover_sigma(ds.shots);

    std::set<std::size_t> clean;
    for (const auto& p : ds.planted)
      if (!p.rule) clean.insert(p.index);
    const auto all = data::filter_gedi(ds.shots, sigma);
    c.expect(std::set<std::size_t>(all.retained.begin(), all.retained.end()) == clean,
             "seed " + std::to_string(seed) + ": retained set differs from clean shots");

    for (std::size_t rule = 0; rule < data::kFilterRuleCount; ++rule) {
      data::FilterOptions only;
      only.enabled.fill(false);
      only.enabled[rule] = true;
      const auto res = data::filter_gedi(ds.shots, sigma, only);
      std::size_t agree = 0, planted = 0;
      for (const auto& p : ds.planted) {
        const bool here = p.rule && static_cast<std::size_t>(*p.rule) == rule;
        planted += here;
        agree += (res.violations[p.index] != 0) == here;
      }
      const std::string name(data::rule_name(static_cast<data::FilterRule>(rule)));
      c.expect(planted > 0, "no planted " + name + " rejects");
      c.expect(agree == ds.planted.size(), name + ": " + std::to_string(agree) + "/" +
                                               std::to_string(ds.planted.size()) + " agree");
    }
  }

  const auto fx = canopy::testing::grid_fixture(33);
  data::GridOptions opt;
  opt.seed = 9;
  const auto cells = data::build_grid(fx.shots, fx.area, opt);
  c.expect(fx.expected_set.size() == 50, "fixture does not have 50 cells");
  std::map<std::size_t, const data::GridCell*> by_id;
  for (const auto& cell : cells) by_id[cell.id] = &cell;
  std::map<int, std::size_t> per_set, train_per_set;
  for (std::size_t id = 0; id < fx.expected_set.size(); ++id) {
    const int want = fx.expected_set[id];
    const auto it = by_id.find(id);
    if (want <= 0) {
      c.expect(it == by_id.end(), "cell " + std::to_string(id) + " should be excluded");
      continue;
    }
    if (it == by_id.end()) {
      c.expect(false, "cell " + std::to_string(id) + " missing");
      continue;
    }
    const auto& cell = *it->second;
    c.expect(cell.set_id == want, "cell " + std::to_string(id) + ": set " + std::to_string(cell.set_id) + ", want " +
                                      std::to_string(want));
    ++per_set[want];
    if (cell.split == data::Split::kTrain) {
      ++train_per_set[want];
      c.expect(cell.duplication == canopy::testing::kExpectedDuplication[static_cast<std::size_t>(want)],
               "cell " + std::to_string(id) + " duplication " + std::to_string(cell.duplication));
    }
  }
  for (const auto& [set, n] : per_set)
    c.expect(train_per_set[set] == (3 * n + 2) / 4, "set " + std::to_string(set) + " train count");
  c.note(std::to_string(cells.size()) + " of 50 fixture cells qualified");
}

// ---------------------------------------------------------------------------
// 8. Sharpness monotonicity

// Separable Gaussian blur with replicated borders, written independently of the library.
Tensor blur_oracle(const Tensor& img, double sigma) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  double norm = 0.0;
  for (int k = -radius; k <= radius; ++k) norm += taps[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (auto& t : taps) t /= norm;
  auto clampi = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp<long>(v, 0, long(n) - 1)); };
  std::vector<double> tmp(h * w), out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) s += taps[k + radius] * img.data()[y * w + clampi(long(x) + k, w)];
      tmp[y * w + x] = s;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) s += taps[k + radius] * tmp[clampi(long(y) + k, h) * w + x];
      out[y * w + x] = s;
    }
  return Tensor::from_data({h, w}, std::move(out));
}

// Smooth blobs plus fine grain, so every blur level removes detail.
Tensor textured_patch(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> coarse(n * n), fine(n * n);
  for (auto& v : coarse) v = u(rng);
  for (auto& v : fine) v = u(rng);
  const auto blobs = blur_oracle(Tensor::from_data({n, n}, coarse), 2.0 + 2.0 * u(rng));
  std::vector<double> v(n * n);
  const double grain = 0.2 + 0.6 * u(rng);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 5.0 * blobs.data()[i] + grain * fine[i];
  return Tensor::from_data({n, n}, std::move(v));
}

void criterion_sharpness(Checks& c) {
  double worst_self = 0.0;
  for (std::uint64_t p = 0; p < 20; ++p) {
    const auto patch = textured_patch(48 + 8 * (p % 3), 500 + p);
    const auto ref = ops::reshape(patch, {patch.dim(0), patch.dim(1), 1});
    const auto self = metrics::gsi(patch, ref);
    c.expect(self.gsi.has_value(), "patch " + std::to_string(p) + ": self GSI missing");
    if (!self.gsi) continue;
    worst_self = std::max(worst_self, std::fabs(*self.gsi - 1.0));
    c.expect(std::fabs(*self.gsi - 1.0) <= 1e-6, "patch " + std::to_string(p) + ": self GSI " + num(*self.gsi, 12));
    double prev = *self.gsi;
    for (double sigma : {0.5, 1.0, 2.0, 4.0}) {
      const auto g = metrics::gsi(blur_oracle(patch, sigma), ref).gsi;
      c.expect(g && *g > prev, "patch " + std::to_string(p) + ": GSI not increasing at sigma " + num(sigma));
      if (g) prev = *g;
    }
  }
  c.note("20 patches, worst |self GSI - 1| = " + num(worst_self, 2));
}

// ---------------------------------------------------------------------------
// 9. Determinism

void criterion_determinism(Checks& c) {
  config::RunConfig cfg;
  cfg.seed = 77;
  cfg.tiles = 8;
  cfg.tile_size = 32;
  cfg.patch = 32;
  cfg.arch = "a2mdu";
  cfg.stem_width = 4;
  cfg.epochs = 2;
  cfg.steps_per_epoch = 3;
  cfg.batch = 4;
  cfg.gsi_patch = 16;
  cfg.workers = 1;

  auto compare = [&](const fs::path& a, const fs::path& b, const std::string& what) {
    const auto fa = files_under(a), fb = files_under(b);
    c.expect(!fa.empty() && fa == fb, what + ": file lists differ");
    if (fa != fb) return;
    std::size_t differing = 0;
    for (const auto& f : fa) differing += slurp(a / f) != slurp(b / f);
    c.expect(differing == 0, what + ": " + std::to_string(differing) + " files differ");
    c.note(what + " " + std::to_string(fa.size()) + " files identical");
  };

  // Both runs use the same paths (config.ini records them); the first is moved aside.
  const fs::path root = scratch("ac9"), first = scratch("ac9_first");
  for (int pass = 0; pass < 2; ++pass) {
    auto run = cfg;
    app::cmd_synth(run, root / "synth");
    run.dataset = (root / "synth").string();
    app::cmd_train(run, root / "train");
    run.checkpoint = (root / "train" / "model").string();
    app::cmd_eval(run, root / "eval");
    if (pass == 0) fs::rename(root, first);
  }
  compare(first / "synth", root / "synth", "synth");
  compare(first / "train", root / "train", "train");
  compare(first / "eval", root / "eval", "eval");
}

struct Criterion {
  int id;
  const char* title;
  void (*run)(Checks&);
};

constexpr Criterion kCriteria[] = {
    {1, "gradient correctness", criterion_gradients},
    {2, "shape laws at 32/64/256", criterion_shapes},
    {3, "loss identities", criterion_loss_identities},
    {4, "metric identity and GSI table", criterion_metrics},
    {5, "saturation mitigation (a2mdu vs 2mou, 3 seeds)", criterion_saturation},
    {6, "distillation loss drop and gradient isolation", criterion_distillation},
    {7, "filter and grid exactness", criterion_pipeline},
    {8, "GSI monotonicity under blur", criterion_sharpness},
    {9, "determinism of synth, train and eval", criterion_determinism},
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::stoi(argv[i]));
  int failed = 0;
  for (const auto& cr : kCriteria) {
    if (!wanted.empty() && !wanted.count(cr.id)) continue;
    Checks checks;
    try {
      cr.run(checks);
    } catch (const std::exception& e) {
      checks.expect(false, std::string("exception: ") + e.what());
    }
    const bool ok = checks.passed();
    failed += !ok;
    std::printf("AC%d %s: %s (%s)\n", cr.id, ok ? "PASS" : "FAIL", cr.title, checks.summary().c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
