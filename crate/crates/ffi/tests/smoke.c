#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include "mvgen.h"

#define CHECK(x)                                                       \
  do {                                                                 \
    MvgenStatus s_ = (x);                                              \
    if (s_ != MVGEN_STATUS_OK) {                                       \
      char msg[256];                                                   \
      mvgen_last_error(msg, sizeof msg);                               \
      fprintf(stderr, "%s failed (%d): %s\n", #x, (int)s_, msg);       \
      return 1;                                                        \
    }                                                                  \
  } while (0)

int main(void) {
  MvgenDataset *ds = NULL;
  CHECK(mvgen_dataset_generate(3, 4, 2, 2, 16, 7, &ds));
  if (mvgen_dataset_len(ds) != 16) return 2;

  MvgenModel *m = NULL;
  CHECK(mvgen_model_init("cgmv", 16, 1, &m));
  size_t cd = mvgen_model_content_dim(m), vd = mvgen_model_view_dim(m);
  size_t px = 3 * 16 * 16;
  float *c = calloc(2 * cd, sizeof(float));
  float *v = calloc(2 * vd, sizeof(float));
  float *img = malloc(2 * px * sizeof(float));
  CHECK(mvgen_model_generate(m, c, v, 2, img, 2 * px));
  for (size_t i = 0; i < 2 * px; i++)
    if (!(img[i] >= -1.0f && img[i] <= 1.0f)) return 3;
  float *code = malloc(2 * cd * sizeof(float));
  CHECK(mvgen_model_encode(m, img, 2, code, 2 * cd));

  if (mvgen_model_generate(m, c, v, 2, img, 10) != MVGEN_STATUS_BUFFER_TOO_SMALL) return 4;
  MvgenModel *bad = NULL;
  if (mvgen_model_init("vae", 16, 0, &bad) != MVGEN_STATUS_INVALID_ARGUMENT) return 5;
  if (mvgen_last_error(NULL, 0) == 0) return 6;

  double pos[] = {0.1, 0.5}, neg[] = {0.3}, auc = 0;
  CHECK(mvgen_auc_lower_distance(pos, 2, neg, 1, &auc));
  if (fabs(auc - 0.5) > 1e-12) return 7;

  free(c); free(v); free(img); free(code);
  mvgen_model_free(m);
  mvgen_dataset_free(ds);
  printf("ok %s\n", mvgen_version());
  return 0;
}
