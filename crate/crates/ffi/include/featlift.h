#ifndef FEATLIFT_H
#define FEATLIFT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FlStatus {
  FL_STATUS_OK = 0,
  FL_STATUS_ARGUMENT = 1,
  FL_STATUS_CONFIG = 2,
  FL_STATUS_IO = 3,
  FL_STATUS_FORMAT = 4,
  FL_STATUS_DATA = 5,
  FL_STATUS_NUMERIC = 6,
  FL_STATUS_IMAGE = 7,
  FL_STATUS_NULL_POINTER = 8,
  FL_STATUS_PANIC = 9,
} FlStatus;

// Normalized class embeddings.
typedef struct FlEmbeddings FlEmbeddings;

// Dense `height × width × channels` features of one view.
typedef struct FlFeatureMap FlFeatureMap;

// Loaded encoder weights.
typedef struct FlWeights FlWeights;

// Extraction settings; see [`featlift_extract_params_default`].
typedef struct FlExtractParams {
  // Crop scales as fractions of the view; only the first `n_scales` are used.
  float scales[8];
  size_t n_scales;
  float stride_frac;
  size_t n_superpixels;
  float compactness;
  size_t slic_iterations;
  size_t downscale;
} FlExtractParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *featlift_version(void);

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into the library on the same thread.
const char *featlift_last_error(void);

struct FlExtractParams featlift_extract_params_default(void);

// Loads a weight bundle folder (`manifest.txt` plus FOT1 tensors).
//
// # Safety
// `dir` must be a NUL-terminated string and `out` writable.
enum FlStatus featlift_weights_load(const char *dir, struct FlWeights **out);

// The hand-built toy encoder used by the planted scene.
//
// # Safety
// `out` must be writable.
enum FlStatus featlift_weights_planted(struct FlWeights **out);

// Output channels of the encoder.
//
// # Safety
// `w` must be a live handle or null.
size_t featlift_weights_channels(const struct FlWeights *w);

// # Safety
// `w` must come from this library and not be used afterwards.
void featlift_weights_free(struct FlWeights *w);

// Dense features of one RGB view (`height × width × 3` bytes, row-major).
// `params` may be null for the defaults.
//
// # Safety
// Pointers must be valid for the sizes given; `out` must be writable.
enum FlStatus featlift_extract_view(const struct FlWeights *w,
                                    const uint8_t *rgb,
                                    size_t width,
                                    size_t height,
                                    const struct FlExtractParams *params,
                                    struct FlFeatureMap **out);

// Writes width, height and channels of a feature map; null outputs are skipped.
//
// # Safety
// `fm` must be a live handle; outputs must be writable or null.
enum FlStatus featlift_feature_map_dims(const struct FlFeatureMap *fm,
                                        size_t *width,
                                        size_t *height,
                                        size_t *channels);

// Borrowed pointer to the `height × width × channels` values, valid while
// the handle lives. Null for a null handle.
//
// # Safety
// `fm` must be a live handle or null.
const float *featlift_feature_map_data(const struct FlFeatureMap *fm);

// # Safety
// `fm` must come from this library and not be used afterwards.
void featlift_feature_map_free(struct FlFeatureMap *fm);

// Averages `k × p × c` prompt embeddings into one normalized row per class.
//
// # Safety
// `data` must hold `k·p·c` floats; `out` must be writable.
enum FlStatus featlift_embeddings_from_prompts(const float *data,
                                               size_t k,
                                               size_t p,
                                               size_t c,
                                               struct FlEmbeddings **out);

// # Safety
// `e` must come from this library and not be used afterwards.
void featlift_embeddings_free(struct FlEmbeddings *e);

// Labels `n` feature rows of `c` values by maximal cosine; rows with zero
// norm get −1. `scores` may be null.
//
// # Safety
// `features` must hold `n·c` floats, `labels` (and `scores` if non-null) `n` slots.
enum FlStatus featlift_classify(const struct FlEmbeddings *emb,
                                const float *features,
                                size_t n,
                                size_t c,
                                int32_t *labels,
                                float *scores);

// SLIC super-pixels of an RGB image. Writes `width·height` labels and the
// number of segments.
//
// # Safety
// `rgb` must hold `width·height·3` bytes, `labels` `width·height` slots,
// `n_segments_out` must be writable.
enum FlStatus featlift_slic(const uint8_t *rgb,
                            size_t width,
                            size_t height,
                            size_t n_segments,
                            float compactness,
                            int32_t *labels,
                            size_t *n_segments_out);

// Harmonic mean of seen and unseen mIoU.
double featlift_hiou(double miou_seen, double miou_unseen);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEATLIFT_H */
