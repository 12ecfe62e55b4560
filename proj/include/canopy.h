/* Stable C interface to the canopy-height library.
 *
 * Every function returning canopy_status reports failures through the status
 * code; canopy_last_error() then describes the most recent failure on the
 * calling thread. Objects are opaque and owned by the caller, who releases
 * them with the matching *_free function. Strings handed out by the library
 * are released with canopy_string_free.
 */
#ifndef CANOPY_H
#define CANOPY_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CANOPY_API __declspec(dllexport)
#else
#define CANOPY_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum canopy_status {
  CANOPY_OK = 0,
  CANOPY_ERR_INVALID_ARGUMENT = 1,
  CANOPY_ERR_SHAPE = 2,
  CANOPY_ERR_NUMERIC = 3,
  CANOPY_ERR_IO = 4,
  CANOPY_ERR_STATE = 5,
  CANOPY_ERR_PARSE = 6,
  CANOPY_ERR_INTERNAL = 7
} canopy_status;

typedef struct canopy_config canopy_config;
typedef struct canopy_tensor canopy_tensor;
typedef struct canopy_model canopy_model;

CANOPY_API const char* canopy_version(void);
/* Message of the last failure on this thread; empty when none. */
CANOPY_API const char* canopy_last_error(void);
CANOPY_API const char* canopy_status_name(canopy_status status);
CANOPY_API void canopy_string_free(char* s);

/* ---- configuration ---- */
CANOPY_API canopy_status canopy_config_default(canopy_config** out);
CANOPY_API canopy_status canopy_config_load(const char* path, canopy_config** out);
CANOPY_API canopy_status canopy_config_parse(const char* text, canopy_config** out);
/* Overrides one "section.key" entry, e.g. ("run.seed", "7"). */
CANOPY_API canopy_status canopy_config_set(canopy_config* cfg, const char* dotted_key, const char* value);
CANOPY_API canopy_status canopy_config_serialize(const canopy_config* cfg, char** out_text);
CANOPY_API canopy_status canopy_config_validate(const canopy_config* cfg);
CANOPY_API void canopy_config_free(canopy_config* cfg);

/* ---- commands ----
 * Each writes its artifacts under out_dir. When summary is non-null it
 * receives "key=value" lines to release with canopy_string_free. */
CANOPY_API canopy_status canopy_cmd_synth(const canopy_config* cfg, const char* out_dir, char** summary);
CANOPY_API canopy_status canopy_cmd_filter(const canopy_config* cfg, const char* out_dir, char** summary);
CANOPY_API canopy_status canopy_cmd_composite(const canopy_config* cfg, const char* out_dir, char** summary);
CANOPY_API canopy_status canopy_cmd_grid(const canopy_config* cfg, const char* out_dir, char** summary);
CANOPY_API canopy_status canopy_cmd_train(const canopy_config* cfg, const char* out_dir, char** summary);
CANOPY_API canopy_status canopy_cmd_eval(const canopy_config* cfg, const char* out_dir, char** summary);
CANOPY_API canopy_status canopy_cmd_gsi(const canopy_config* cfg, const char* input_tnsr, const char* reference_tnsr,
                                        const char* out_dir, char** summary);

/* ---- tensors (64-bit, row-major) ---- */
CANOPY_API canopy_status canopy_tensor_create(const size_t* shape, size_t rank, const double* data,
                                              canopy_tensor** out);
CANOPY_API canopy_status canopy_tensor_read(const char* path, canopy_tensor** out);
CANOPY_API canopy_status canopy_tensor_write(const canopy_tensor* t, const char* path);
CANOPY_API size_t canopy_tensor_rank(const canopy_tensor* t);
CANOPY_API size_t canopy_tensor_dim(const canopy_tensor* t, size_t axis);
CANOPY_API size_t canopy_tensor_numel(const canopy_tensor* t);
CANOPY_API const double* canopy_tensor_data(const canopy_tensor* t);
CANOPY_API void canopy_tensor_free(canopy_tensor* t);

/* ---- models ---- */
CANOPY_API canopy_status canopy_model_load(const char* checkpoint_dir, canopy_model** out);
/* Architecture name of a loaded model, owned by the model. */
CANOPY_API const char* canopy_model_arch(const canopy_model* m);
/* s2 [H, W, 10] and s1 [H, W, 2] raw bands -> [H, W] heights in meters. */
CANOPY_API canopy_status canopy_model_predict(canopy_model* m, const canopy_tensor* s2, const canopy_tensor* s1,
                                              canopy_tensor** out);
CANOPY_API void canopy_model_free(canopy_model* m);

#ifdef __cplusplus
}
#endif

#endif /* CANOPY_H */
