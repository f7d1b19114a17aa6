#ifndef MASKED_DIFFUSE_H
#define MASKED_DIFFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MdStatus {
  MD_STATUS_OK = 0,
  MD_STATUS_NULL_ARGUMENT = 1,
  MD_STATUS_INVALID_UTF8 = 2,
  MD_STATUS_IO = 3,
  MD_STATUS_CHECKPOINT = 4,
  MD_STATUS_INVALID_CONTROL = 5,
  MD_STATUS_INVALID_CONFIG = 6,
  MD_STATUS_NUMERIC = 7,
  MD_STATUS_OUT_OF_RANGE = 8,
  MD_STATUS_PANIC = 9,
  MD_STATUS_OTHER = 10,
} MdStatus;

// Generated sentences.
typedef struct MdSamples MdSamples;

// Loaded checkpoint and optional classifier.
typedef struct MdSession MdSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null. The
// pointer stays valid until the next call into this library.
const char *md_last_error(void);

// Static name of a status code.
const char *md_status_name(enum MdStatus status);

// Loads a checkpoint file into a new session.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum MdStatus md_session_load(const char *path, struct MdSession **out);

// Attaches a classifier file used by content and POS controls.
//
// # Safety
// `session` must come from `md_session_load`; `path` must be a
// nul-terminated string.
enum MdStatus md_session_set_classifier(struct MdSession *session, const char *path);

// Releases a session; null is ignored.
//
// # Safety
// `session` must come from `md_session_load` and not be used afterwards.
void md_session_free(struct MdSession *session);

// Vocabulary size of the loaded model, 0 for a null session.
//
// # Safety
// `session` must be null or come from `md_session_load`.
size_t md_session_vocab_size(const struct MdSession *session);

// Diffusion steps `T` of the loaded model, 0 for a null session.
//
// # Safety
// `session` must be null or come from `md_session_load`.
size_t md_session_steps(const struct MdSession *session);

// Draws `samples` sentences of `length` tokens (0 = take the length from
// the control). `control` may be null for unconditional sampling. With
// `mbr` nonzero only the MBR choice is returned.
//
// # Safety
// `session` must come from `md_session_load`, `control` must be null or a
// nul-terminated string and `out` a valid pointer.
enum MdStatus md_sample(const struct MdSession *session,
                        const char *control,
                        size_t length,
                        size_t samples,
                        int32_t mbr,
                        uint64_t seed,
                        struct MdSamples **out);

// Number of sentences, 0 for null.
//
// # Safety
// `samples` must be null or come from `md_sample`.
size_t md_samples_count(const struct MdSamples *samples);

// Sentence `i`, owned by `samples`; null when out of range.
//
// # Safety
// `samples` must be null or come from `md_sample`.
const char *md_samples_text(const struct MdSamples *samples, size_t i);

// Index of the MBR choice among the drawn candidates, or -1.
//
// # Safety
// `samples` must be null or come from `md_sample`.
int64_t md_samples_mbr_index(const struct MdSamples *samples);

// Releases a sample set; null is ignored.
//
// # Safety
// `samples` must come from `md_sample` and not be used afterwards.
void md_samples_free(struct MdSamples *samples);

// Writes the retention `alpha_bar_t` of the schedule `(steps, s, eps)`.
//
// # Safety
// `out` must be a valid pointer.
enum MdStatus md_alpha_bar(size_t steps, double s, double eps, size_t t, double *out);

// Library version string.
const char *md_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKED_DIFFUSE_H */
