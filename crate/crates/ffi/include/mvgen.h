#ifndef MVGEN_H
#define MVGEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  MVGEN_STATUS_OK = 0,
  MVGEN_STATUS_NULL_POINTER = 1,
  MVGEN_STATUS_INVALID_ARGUMENT = 2,
  MVGEN_STATUS_SHAPE = 3,
  MVGEN_STATUS_NON_FINITE = 4,
  MVGEN_STATUS_IO = 5,
  MVGEN_STATUS_FORMAT = 6,
  MVGEN_STATUS_EXISTS = 7,
  MVGEN_STATUS_CLASSIFIER = 8,
  MVGEN_STATUS_BUFFER_TOO_SMALL = 9,
  MVGEN_STATUS_PANIC = 10,
} MvgenStatus;

// Synthetic multi-view dataset.
typedef struct MvgenDataset MvgenDataset;

// Trained or freshly initialized model bundle.
typedef struct MvgenModel MvgenModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mvgen_version(void);

// Copy the calling thread's last error message into `buf` (truncated and
// NUL-terminated). Returns the full message length, 0 when there is none.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t mvgen_last_error(char *buf, size_t len);

// Render a dataset.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
MvgenStatus mvgen_dataset_generate(size_t train_objects,
                                   size_t train_views,
                                   size_t test_objects,
                                   size_t test_views,
                                   size_t image_size,
                                   uint64_t seed,
                                   MvgenDataset **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
MvgenStatus mvgen_dataset_read(const char *path, MvgenDataset **out);

// # Safety
// `ds` must be a live handle and `path` a NUL-terminated string.
MvgenStatus mvgen_dataset_write(const MvgenDataset *ds, const char *path);

// Number of images, 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t mvgen_dataset_len(const MvgenDataset *ds);

// # Safety
// `ds` must be null or a live handle.
size_t mvgen_dataset_image_size(const MvgenDataset *ds);

// # Safety
// `ds` must be null or a handle not yet freed.
void mvgen_dataset_free(MvgenDataset *ds);

// Fresh model with default hyperparameters for `kind` ("gmv", "cgmv",
// "cgan", "dcganx2", "dcganx4", "dcganx8") at the given image size.
//
// # Safety
// `kind` must be a NUL-terminated string and `out` a valid handle slot.
MvgenStatus mvgen_model_init(const char *kind, size_t image_size, uint64_t seed, MvgenModel **out);

// # Safety
// `dir` must be a NUL-terminated string and `out` a valid handle slot.
MvgenStatus mvgen_model_load(const char *dir, MvgenModel **out);

// # Safety
// `m` must be a live handle and `dir` a NUL-terminated string.
MvgenStatus mvgen_model_save(const MvgenModel *m, const char *dir);

// Train in memory until the model has taken `steps` iterations in total.
//
// # Safety
// `m` and `ds` must be live handles.
MvgenStatus mvgen_model_train(MvgenModel *m, const MvgenDataset *ds, uint64_t steps);

// Completed training iterations.
//
// # Safety
// `m` must be null or a live handle.
uint64_t mvgen_model_step(const MvgenModel *m);

// # Safety
// `m` must be null or a live handle.
size_t mvgen_model_content_dim(const MvgenModel *m);

// # Safety
// `m` must be null or a live handle.
size_t mvgen_model_view_dim(const MvgenModel *m);

// # Safety
// `m` must be null or a live handle.
size_t mvgen_model_image_size(const MvgenModel *m);

// Images generated per latent: K for joint-view generators, else 1.
//
// # Safety
// `m` must be null or a live handle.
size_t mvgen_model_heads(const MvgenModel *m);

// Eval-mode generation from `n` content codes (`n x content_dim`) and view
// codes (`n x view_dim`). Writes `heads x n x 3 x H x W` floats to `out`.
//
// # Safety
// The input pointers must cover the sizes above and `out` must hold
// `out_len` floats.
MvgenStatus mvgen_model_generate(const MvgenModel *m,
                                 const float *content,
                                 const float *view,
                                 size_t n,
                                 float *out,
                                 size_t out_len);

// Content codes (`n x content_dim`) of `n` images; conditional models only.
//
// # Safety
// `images` must hold `n x 3 x H x W` floats and `out` `out_len` floats.
MvgenStatus mvgen_model_encode(const MvgenModel *m,
                               const float *images,
                               size_t n,
                               float *out,
                               size_t out_len);

// # Safety
// `m` must be null or a handle not yet freed.
void mvgen_model_free(MvgenModel *m);

// Probability that a positive distance is below a negative one, ties
// counting one half.
//
// # Safety
// `pos` and `neg` must hold `n_pos` and `n_neg` values; `out` must be valid.
MvgenStatus mvgen_auc_lower_distance(const double *pos,
                                     size_t n_pos,
                                     const double *neg,
                                     size_t n_neg,
                                     double *out);

// Run the gradient-check suite; writes the worst relative error.
//
// # Safety
// `worst` must be a valid pointer.
MvgenStatus mvgen_gradcheck(double *worst);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MVGEN_H */
