#include "canopy.h"

#include <cstring>
#include <exception>
#include <filesystem>
#include <memory>
#include <new>
#include <string>

#include "canopy/commands.hpp"
#include "canopy/config.hpp"
#include "canopy/error.hpp"
#include "canopy/tnsr_io.hpp"
#include "canopy/train.hpp"

struct canopy_config {
  canopy::config::RunConfig cfg;
};

struct canopy_tensor {
  canopy::Tensor t;
};

struct canopy_model {
  std::unique_ptr<canopy::train::Model> model;
  std::string arch;
};

namespace {

thread_local std::string g_last_error;

canopy_status to_status(canopy::ErrorCode code) {
  switch (code) {
    case canopy::ErrorCode::kOk:
      return CANOPY_OK;
    case canopy::ErrorCode::kInvalidArgument:
      return CANOPY_ERR_INVALID_ARGUMENT;
    case canopy::ErrorCode::kShapeMismatch:
      return CANOPY_ERR_SHAPE;
    case canopy::ErrorCode::kNumeric:
      return CANOPY_ERR_NUMERIC;
    case canopy::ErrorCode::kIo:
      return CANOPY_ERR_IO;
    case canopy::ErrorCode::kState:
      return CANOPY_ERR_STATE;
    case canopy::ErrorCode::kParse:
      return CANOPY_ERR_PARSE;
    case canopy::ErrorCode::kInternal:
      return CANOPY_ERR_INTERNAL;
  }
  return CANOPY_ERR_INTERNAL;
}

/// Runs fn, translating exceptions into status codes and the thread-local message.
template <typename F>
canopy_status guarded(F&& fn) {
  g_last_error.clear();
  try {
    fn();
    return CANOPY_OK;
  } catch (const canopy::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return CANOPY_ERR_INTERNAL;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return CANOPY_ERR_IO;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CANOPY_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return CANOPY_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  canopy::require(p != nullptr, canopy::ErrorCode::kInvalidArgument, std::string(what) + " must not be null");
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

template <typename Cmd>
canopy_status run_command(const canopy_config* cfg, const char* out_dir, char** summary, Cmd&& cmd) {
  return guarded([&] {
    need(cfg, "config");
    need(out_dir, "out_dir");
    const std::string s = cmd(cfg->cfg, std::filesystem::path(out_dir));
    if (summary != nullptr) *summary = dup_string(s);
  });
}

}  // namespace

extern "C" {

const char* canopy_version(void) { return "1.0.0"; }
const char* canopy_last_error(void) { return g_last_error.c_str(); }

const char* canopy_status_name(canopy_status status) {
  switch (status) {
    case CANOPY_OK:
      return "ok";
    case CANOPY_ERR_INVALID_ARGUMENT:
      return "invalid argument";
    case CANOPY_ERR_SHAPE:
      return "shape mismatch";
    case CANOPY_ERR_NUMERIC:
      return "numeric error";
    case CANOPY_ERR_IO:
      return "i/o error";
    case CANOPY_ERR_STATE:
      return "invalid state";
    case CANOPY_ERR_PARSE:
      return "parse error";
    case CANOPY_ERR_INTERNAL:
      return "internal error";
  }
  return "unknown status";
}

void canopy_string_free(char* s) { delete[] s; }

canopy_status canopy_config_default(canopy_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new canopy_config{};
  });
}

canopy_status canopy_config_load(const char* path, canopy_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new canopy_config{canopy::config::load_config(path)};
  });
}

canopy_status canopy_config_parse(const char* text, canopy_config** out) {
  return guarded([&] {
    need(text, "text");
    need(out, "out");
    *out = new canopy_config{canopy::config::parse_ini_string(text)};
  });
}

canopy_status canopy_config_set(canopy_config* cfg, const char* dotted_key, const char* value) {
  return guarded([&] {
    need(cfg, "config");
    need(dotted_key, "key");
    need(value, "value");
    canopy::config::set_value(cfg->cfg, dotted_key, value);
  });
}

canopy_status canopy_config_serialize(const canopy_config* cfg, char** out_text) {
  return guarded([&] {
    need(cfg, "config");
    need(out_text, "out_text");
    *out_text = dup_string(canopy::config::serialize(cfg->cfg));
  });
}

canopy_status canopy_config_validate(const canopy_config* cfg) {
  return guarded([&] {
    need(cfg, "config");
    cfg->cfg.validate();
  });
}

void canopy_config_free(canopy_config* cfg) { delete cfg; }

canopy_status canopy_cmd_synth(const canopy_config* cfg, const char* out_dir, char** summary) {
  return run_command(cfg, out_dir, summary, canopy::app::cmd_synth);
}
canopy_status canopy_cmd_filter(const canopy_config* cfg, const char* out_dir, char** summary) {
  return run_command(cfg, out_dir, summary, canopy::app::cmd_filter);
}
canopy_status canopy_cmd_composite(const canopy_config* cfg, const char* out_dir, char** summary) {
  return run_command(cfg, out_dir, summary, canopy::app::cmd_composite);
}
canopy_status canopy_cmd_grid(const canopy_config* cfg, const char* out_dir, char** summary) {
  return run_command(cfg, out_dir, summary, canopy::app::cmd_grid);
}
canopy_status canopy_cmd_train(const canopy_config* cfg, const char* out_dir, char** summary) {
  return run_command(cfg, out_dir, summary, canopy::app::cmd_train);
}
canopy_status canopy_cmd_eval(const canopy_config* cfg, const char* out_dir, char** summary) {
  return run_command(cfg, out_dir, summary, canopy::app::cmd_eval);
}

canopy_status canopy_cmd_gsi(const canopy_config* cfg, const char* input_tnsr, const char* reference_tnsr,
                             const char* out_dir, char** summary) {
  return guarded([&] {
    need(input_tnsr, "input");
    need(reference_tnsr, "reference");
    const auto status = run_command(cfg, out_dir, summary, [&](const auto& c, const auto& out) {
      return canopy::app::cmd_gsi(c, input_tnsr, reference_tnsr, out);
    });
    if (status != CANOPY_OK) throw canopy::Error(static_cast<canopy::ErrorCode>(status), g_last_error);
  });
}

canopy_status canopy_tensor_create(const size_t* shape, size_t rank, const double* data, canopy_tensor** out) {
  return guarded([&] {
    need(out, "out");
    canopy::require(rank == 0 || shape != nullptr, canopy::ErrorCode::kInvalidArgument, "shape must not be null");
    canopy::Shape s(shape, shape + rank);
    const std::size_t n = canopy::numel(s);
    canopy::require(n == 0 || data != nullptr, canopy::ErrorCode::kInvalidArgument, "data must not be null");
    *out = new canopy_tensor{canopy::Tensor::from_data(std::move(s), std::vector<double>(data, data + n))};
  });
}

canopy_status canopy_tensor_read(const char* path, canopy_tensor** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new canopy_tensor{canopy::io::read_tnsr(path)};
  });
}

canopy_status canopy_tensor_write(const canopy_tensor* t, const char* path) {
  return guarded([&] {
    need(t, "tensor");
    need(path, "path");
    canopy::io::write_tnsr(path, t->t);
  });
}

size_t canopy_tensor_rank(const canopy_tensor* t) { return t ? t->t.rank() : 0; }
size_t canopy_tensor_dim(const canopy_tensor* t, size_t axis) {
  return t && axis < t->t.rank() ? t->t.shape()[axis] : 0;
}
size_t canopy_tensor_numel(const canopy_tensor* t) { return t ? t->t.numel() : 0; }
const double* canopy_tensor_data(const canopy_tensor* t) { return t ? t->t.data().data() : nullptr; }
void canopy_tensor_free(canopy_tensor* t) { delete t; }

canopy_status canopy_model_load(const char* checkpoint_dir, canopy_model** out) {
  return guarded([&] {
    need(checkpoint_dir, "checkpoint_dir");
    need(out, "out");
    auto m = canopy::train::Model::load(checkpoint_dir);
    m->set_mode(canopy::nn::NormMode::kEval);
    std::string arch(canopy::models::arch_name(m->spec().arch));
    *out = new canopy_model{std::move(m), std::move(arch)};
  });
}

const char* canopy_model_arch(const canopy_model* m) { return m ? m->arch.c_str() : ""; }

canopy_status canopy_model_predict(canopy_model* m, const canopy_tensor* s2, const canopy_tensor* s1,
                                   canopy_tensor** out) {
  return guarded([&] {
    need(m, "model");
    need(s2, "s2");
    need(s1, "s1");
    need(out, "out");
    *out = new canopy_tensor{m->model->predict_tile(s2->t, s1->t)};
  });
}

void canopy_model_free(canopy_model* m) { delete m; }

}  // extern "C"
