// canopy-cli: batch front end over the C API.
#include <canopy.h>

#include <cstdio>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

namespace {

struct ConfigDeleter {
  void operator()(canopy_config* c) const { canopy_config_free(c); }
};
using ConfigPtr = std::unique_ptr<canopy_config, ConfigDeleter>;

struct Options {
  std::string config_path;
  std::optional<std::string> seed, workers, dataset, checkpoint;
  std::vector<std::string> overrides;
  std::string out = ".";
  std::string input, reference;
};

int report(canopy_status st, const char* what) {
  std::fprintf(stderr, "canopy-cli: %s failed (%s): %s\n", what, canopy_status_name(st), canopy_last_error());
  return static_cast<int>(st);
}

// Loads the config file (or defaults) and applies command-line overrides in order.
int build_config(const Options& o, ConfigPtr& cfg) {
  canopy_config* raw = nullptr;
  const canopy_status st =
      o.config_path.empty() ? canopy_config_default(&raw) : canopy_config_load(o.config_path.c_str(), &raw);
  if (st != CANOPY_OK) return report(st, "loading config");
  cfg.reset(raw);

  std::vector<std::pair<std::string, std::string>> sets;
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "canopy-cli: --set expects section.key=value, got '%s'\n", kv.c_str());
      return CANOPY_ERR_INVALID_ARGUMENT;
    }
    sets.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) sets.emplace_back("run.seed", *o.seed);
  if (o.workers) sets.emplace_back("run.workers", *o.workers);
  if (o.dataset) sets.emplace_back("data.dataset", *o.dataset);
  if (o.checkpoint) sets.emplace_back("eval.checkpoint", *o.checkpoint);
  for (const auto& [k, v] : sets) {
    const canopy_status s = canopy_config_set(cfg.get(), k.c_str(), v.c_str());
    if (s != CANOPY_OK) return report(s, ("setting " + k).c_str());
  }
  const canopy_status v = canopy_config_validate(cfg.get());
  if (v != CANOPY_OK) return report(v, "validating config");
  return 0;
}

int finish(canopy_status st, char* summary, const char* what) {
  if (st != CANOPY_OK) return report(st, what);
  if (summary != nullptr) {
    std::fputs(summary, stdout);
    canopy_string_free(summary);
  }
  return 0;
}

using Command = canopy_status (*)(const canopy_config*, const char*, char**);

struct PredictArgs {
  std::string checkpoint, s2, s1, out;
};

// Runs a saved model on one tile's raw bands and writes the [H, W] height map.
int run_predict(const PredictArgs& a) {
  canopy_model* model = nullptr;
  canopy_tensor *s2 = nullptr, *s1 = nullptr, *height = nullptr;
  canopy_status st = canopy_model_load(a.checkpoint.c_str(), &model);
  if (st == CANOPY_OK) st = canopy_tensor_read(a.s2.c_str(), &s2);
  if (st == CANOPY_OK) st = canopy_tensor_read(a.s1.c_str(), &s1);
  if (st == CANOPY_OK) st = canopy_model_predict(model, s2, s1, &height);
  if (st == CANOPY_OK) st = canopy_tensor_write(height, a.out.c_str());
  const int rc = st == CANOPY_OK ? 0 : report(st, "predict");
  if (rc == 0)
    std::printf("arch=%s\nrows=%zu\ncols=%zu\n", canopy_model_arch(model), canopy_tensor_dim(height, 0),
                canopy_tensor_dim(height, 1));
  canopy_tensor_free(height);
  canopy_tensor_free(s1);
  canopy_tensor_free(s2);
  canopy_model_free(model);
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Canopy height mapping pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(canopy_version()));

  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config_path, "INI configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Overrides [run] seed");
    sub->add_option("--workers", o.workers, "Overrides [run] workers");
    sub->add_option("-o,--out", o.out, "Output directory")->capture_default_str();
    sub->add_option("--set", o.overrides, "Extra override, section.key=value (repeatable)");
  };

  struct Entry {
    const char* name;
    const char* help;
    Command fn;
    bool dataset, checkpoint;
  };
  const Entry entries[] = {
      {"synth", "Generate a synthetic dataset", canopy_cmd_synth, false, false},
      {"filter", "Apply the GEDI quality filter", canopy_cmd_filter, true, false},
      {"composite", "Rain-gated median composites", canopy_cmd_composite, true, false},
      {"grid", "Build the sampling grid and training list", canopy_cmd_grid, true, false},
      {"train", "Train the configured architecture", canopy_cmd_train, true, false},
      {"eval", "Evaluate a checkpoint", canopy_cmd_eval, true, true},
  };
  std::vector<std::pair<CLI::App*, const Entry*>> subs;
  for (const auto& e : entries) {
    auto* sub = app.add_subcommand(e.name, e.help);
    add_common(sub);
    if (e.dataset) sub->add_option("--dataset", o.dataset, "Overrides [data] dataset");
    if (e.checkpoint) sub->add_option("--checkpoint", o.checkpoint, "Overrides [eval] checkpoint");
    subs.emplace_back(sub, &e);
  }
  auto* gsi = app.add_subcommand("gsi", "Sharpness of a height map against its reference bands");
  add_common(gsi);
  gsi->add_option("--input", o.input, "[H, W] height map (.tnsr)")->required()->check(CLI::ExistingFile);
  gsi->add_option("--reference", o.reference, "[H, W, C] reference bands (.tnsr)")
      ->required()
      ->check(CLI::ExistingFile);

  PredictArgs pa;
  auto* predict = app.add_subcommand("predict", "Height map for one tile from a saved model");
  predict->add_option("--checkpoint", pa.checkpoint, "Model directory")->required()->check(CLI::ExistingDirectory);
  predict->add_option("--s2", pa.s2, "[H, W, 10] optical bands (.tnsr)")->required()->check(CLI::ExistingFile);
  predict->add_option("--s1", pa.s1, "[H, W, 2] radar bands (.tnsr)")->required()->check(CLI::ExistingFile);
  predict->add_option("-o,--out", pa.out, "Output .tnsr")->required();

  CLI11_PARSE(app, argc, argv);
  if (predict->parsed()) return run_predict(pa);

  ConfigPtr cfg;
  if (const int rc = build_config(o, cfg); rc != 0) return rc;

  char* summary = nullptr;
  if (gsi->parsed()) {
    const canopy_status st =
        canopy_cmd_gsi(cfg.get(), o.input.c_str(), o.reference.c_str(), o.out.c_str(), &summary);
    return finish(st, summary, "gsi");
  }
  for (const auto& [sub, e] : subs) {
    if (!sub->parsed()) continue;
    const canopy_status st = e->fn(cfg.get(), o.out.c_str(), &summary);
    return finish(st, summary, e->name);
  }
  return CANOPY_ERR_INTERNAL;
}
