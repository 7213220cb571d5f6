#ifndef CGRS_H
#define CGRS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Values 2 to 5 match the command-line exit codes.
typedef enum CgrsStatus {
  CGRS_STATUS_OK = 0,
  CGRS_STATUS_CONFIG = 2,
  CGRS_STATUS_DATA = 3,
  CGRS_STATUS_NUMERIC = 4,
  CGRS_STATUS_IO = 5,
  CGRS_STATUS_INTEGRITY = 6,
  CGRS_STATUS_UNSUPPORTED_VERSION = 7,
  CGRS_STATUS_NULL_POINTER = 8,
  CGRS_STATUS_PANIC = 9,
} CgrsStatus;

// Which prediction to return from [`cgrs_model_classify`].
typedef enum CgrsChannel {
  CGRS_CHANNEL_ST = 0,
  CGRS_CHANNEL_TS = 1,
  CGRS_CHANNEL_COMBINED = 2,
} CgrsChannel;

// A trained or training model together with its configuration.
typedef struct CgrsModel CgrsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cgrs_version(void);

// Message of the last failed call on this thread (empty after a success).
// Valid until the next library call on this thread.
const char *cgrs_last_error(void);

// Loads a model from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CgrsStatus cgrs_model_load(const char *path, struct CgrsModel **out);

// Creates an untrained model from a TOML configuration (empty string for defaults).
//
// # Safety
// `config_toml` must be a NUL-terminated string; `out` must be writable.
enum CgrsStatus cgrs_model_new(const char *config_toml, struct CgrsModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from a `cgrs_model_*` constructor and not be used afterwards.
void cgrs_model_free(struct CgrsModel *model);

// Completed training rounds.
//
// # Safety
// `model` must be a live handle; `out_step` must be writable.
enum CgrsStatus cgrs_model_step_count(const struct CgrsModel *model, uint64_t *out_step);

// Runs `rounds` training rounds on the datasets named by the model's
// configuration (loaded on first use). Writes the last objective value.
//
// # Safety
// `model` must be a live handle; `out_objective` may be null.
enum CgrsStatus cgrs_model_step(struct CgrsModel *model, uint64_t rounds, double *out_objective);

// Classifies `count` images of `channels` (1 or 3) channels, row-major
// (count, 28, 28, channels) with values in [0, 1]. Writes `count` labels.
//
// # Safety
// `pixels` must hold `count * 784 * channels` floats; `out_labels` must hold `count` bytes.
enum CgrsStatus cgrs_model_classify(const struct CgrsModel *model,
                                    const float *pixels,
                                    size_t count,
                                    size_t channels,
                                    enum CgrsChannel channel,
                                    uint8_t *out_labels);

// Saves the model as a checkpoint. `out_digest` (may be null) receives the
// hex SHA-256 of the file, to be released with [`cgrs_string_free`].
//
// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum CgrsStatus cgrs_model_save(const struct CgrsModel *model, const char *path, char **out_digest);

// Learning rate after `step` rounds: `lr0 * decay^floor(step / decay_every)`.
double cgrs_lr_schedule(uint64_t step, double lr0, double decay, uint64_t decay_every);

// Writes the JSON header of a checkpoint to `out_json`, to be released with
// [`cgrs_string_free`].
//
// # Safety
// `path` must be a NUL-terminated string; `out_json` must be writable.
enum CgrsStatus cgrs_checkpoint_inspect(const char *path, char **out_json);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void cgrs_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CGRS_H */
