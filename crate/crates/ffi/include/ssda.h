#ifndef SSDA_H
#define SSDA_H

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SsdaStatus {
  SSDA_STATUS_OK = 0,
  SSDA_STATUS_NULL_POINTER = 1,
  SSDA_STATUS_INVALID_ARGUMENT = 2,
  SSDA_STATUS_IO = 3,
  SSDA_STATUS_CONFIG = 4,
  SSDA_STATUS_NUMERICAL = 5,
  SSDA_STATUS_PANIC = 6,
} SsdaStatus;

// Run configuration.
typedef struct SsdaConfig SsdaConfig;

// Model parameters together with the configuration that shaped them.
typedef struct SsdaModel SsdaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call into this library.
const char *ssda_last_error(void);

// Library version as a static NUL-terminated string.
const char *ssda_version(void);

// Default configuration.
struct SsdaConfig *ssda_config_new(void);

// Reads a `key = value` file on top of the defaults.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SsdaStatus ssda_config_load(const char *path, struct SsdaConfig **out);

// Sets one key.
//
// # Safety
// `cfg` must come from this library; `key` and `value` must be NUL-terminated.
enum SsdaStatus ssda_config_set(struct SsdaConfig *cfg, const char *key, const char *value);

// # Safety
// `cfg` must come from this library or be null, and is invalid afterwards.
void ssda_config_free(struct SsdaConfig *cfg);

// Freshly initialized model seeded from the configuration.
//
// # Safety
// `cfg` must come from this library and `out` be a valid pointer.
enum SsdaStatus ssda_model_new(const struct SsdaConfig *cfg, struct SsdaModel **out);

// Loads a checkpoint written by `ssda train` or [`ssda_model_save`].
//
// # Safety
// `cfg` must come from this library, `path` be NUL-terminated and `out` valid.
enum SsdaStatus ssda_model_load(const struct SsdaConfig *cfg,
                                const char *path,
                                struct SsdaModel **out);

// # Safety
// `model` must come from this library and `path` be NUL-terminated.
enum SsdaStatus ssda_model_save(const struct SsdaModel *model, const char *path);

// Current fusion weight.
//
// # Safety
// `model` must come from this library and `out` be valid.
enum SsdaStatus ssda_model_beta(const struct SsdaModel *model, double *out);

// Forecasts `horizon` steps from a row-major `[lookback × n_vars]` context.
// `out` receives `horizon × n_vars` values, row-major.
//
// # Safety
// `context` must hold `lookback·n_vars` values and `out` `out_len` writable values.
enum SsdaStatus ssda_model_forecast(const struct SsdaModel *model,
                                    const double *context,
                                    size_t lookback,
                                    size_t n_vars,
                                    size_t horizon,
                                    double *out,
                                    size_t out_len);

// # Safety
// `model` must come from this library or be null, and is invalid afterwards.
void ssda_model_free(struct SsdaModel *model);

// Power-spectrum slope of a row-major `height × width` image over
// `f_lo < f < f_hi`.
//
// # Safety
// `pixels` must hold `height·width` values; `alpha` and `r_squared` must be
// valid (`r_squared` may be null).
enum SsdaStatus ssda_pss_image(const double *pixels,
                               size_t height,
                               size_t width,
                               double f_lo,
                               double f_hi,
                               double *alpha,
                               double *r_squared);

// Runs the command-line front end with `argv` (including the program
// name) and returns its exit code.
//
// # Safety
// `argv` must point to `argc` NUL-terminated strings.
int ssda_cli_run(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSDA_H */
