#ifndef SEQ2SEQ_ASR_H
#define SEQ2SEQ_ASR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values 2 to 4 match the CLI exit codes.
 */
typedef enum S2sStatus {
  S2S_STATUS_OK = 0,
  S2S_STATUS_OTHER = 1,
  S2S_STATUS_CONFIG = 2,
  S2S_STATUS_DATA = 3,
  S2S_STATUS_NUMERIC = 4,
  S2S_STATUS_NULL_POINTER = 5,
  S2S_STATUS_INVALID_UTF8 = 6,
  S2S_STATUS_BUFFER_TOO_SMALL = 7,
  S2S_STATUS_PANIC = 8,
} S2sStatus;

/**
 * A trained subword model.
 */
typedef struct S2sBpe S2sBpe;

/**
 * A resolved run configuration.
 */
typedef struct S2sConfig S2sConfig;

/**
 * A trained acoustic model.
 */
typedef struct S2sModel S2sModel;

/**
 * Parameter counts of a configuration.
 */
typedef struct S2sParamCounts {
  uint64_t encoder;
  uint64_t decoder;
  uint64_t total;
  uint64_t lm;
} S2sParamCounts;

/**
 * Word-level alignment counts.
 */
typedef struct S2sEditCounts {
  uint64_t substitutions;
  uint64_t deletions;
  uint64_t insertions;
  uint64_t reference_words;
} S2sEditCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the calling thread's most recent error, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *s2s_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *s2s_version(void);

/**
 * Loads a bundled configuration (`full`, `small`, `lm-large`, `toy`).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum S2sStatus s2s_config_bundled(const char *name, struct S2sConfig **out);

/**
 * Reads a flat `key = value` configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum S2sStatus s2s_config_load(const char *path, struct S2sConfig **out);

/**
 * Sets one key; unknown keys and invalid values are rejected.
 *
 * # Safety
 * `cfg` must come from this library; `key` and `value` must be NUL-terminated.
 */
enum S2sStatus s2s_config_set(struct S2sConfig *cfg, const char *key, const char *value);

/**
 * Parameter counts of the configured model and language model.
 *
 * # Safety
 * `cfg` must come from this library and `out` be a valid pointer.
 */
enum S2sStatus s2s_config_param_counts(const struct S2sConfig *cfg, struct S2sParamCounts *out);

/**
 * # Safety
 * `cfg` must come from this library or be null; it must not be used afterwards.
 */
void s2s_config_free(struct S2sConfig *cfg);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` a valid pointer.
 */
enum S2sStatus s2s_model_load(const char *path, struct S2sModel **out);

/**
 * Input feature dimension the model expects.
 *
 * # Safety
 * `model` must come from this library.
 */
size_t s2s_model_feature_dim(const struct S2sModel *model);

/**
 * Output vocabulary size including the special tokens.
 *
 * # Safety
 * `model` must come from this library.
 */
size_t s2s_model_vocab_size(const struct S2sModel *model);

/**
 * Greedy decoding of one utterance of already normalized features
 * (`frames` × `dim`, row-major). Writes at most `capacity` token ids and
 * the full hypothesis length to `out_len`; returns `BufferTooSmall` when
 * the hypothesis does not fit.
 *
 * # Safety
 * `features` must hold `frames * dim` values, `tokens` `capacity` slots.
 */
enum S2sStatus s2s_model_greedy_decode(const struct S2sModel *model,
                                       const double *features,
                                       size_t frames,
                                       size_t dim,
                                       double max_output_factor,
                                       uint32_t *tokens,
                                       size_t capacity,
                                       size_t *out_len);

/**
 * # Safety
 * `model` must come from this library or be null; it must not be used afterwards.
 */
void s2s_model_free(struct S2sModel *model);

/**
 * Loads a subword model.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` a valid pointer.
 */
enum S2sStatus s2s_bpe_load(const char *path, struct S2sBpe **out);

/**
 * Turns token ids into text. Writes a NUL-terminated string into `buf` when
 * it fits and always reports the required size (including the NUL) in
 * `needed`.
 *
 * # Safety
 * `tokens` must hold `n` ids and `buf` `capacity` bytes.
 */
enum S2sStatus s2s_bpe_decode(const struct S2sBpe *bpe,
                              const uint32_t *tokens,
                              size_t n,
                              char *buf,
                              size_t capacity,
                              size_t *needed);

/**
 * # Safety
 * `bpe` must come from this library or be null; it must not be used afterwards.
 */
void s2s_bpe_free(struct S2sBpe *bpe);

/**
 * Word alignment counts between a reference and a hypothesis, after the
 * same normalization the scorer applies.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out` a valid pointer.
 */
enum S2sStatus s2s_word_errors(const char *reference,
                               const char *hypothesis,
                               struct S2sEditCounts *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQ2SEQ_ASR_H */
