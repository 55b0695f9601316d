#include <math.h>
#include <stdio.h>
#include <string.h>

#include "mvsc.h"

#define CHECK(cond)                                                   \
  do {                                                                \
    if (!(cond)) {                                                    \
      fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond,  \
              mvsc_last_error());                                     \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(void) {
  MvscKernel *k = NULL;
  CHECK(mvsc_kernel_rotate(3, 45.0, 0.0, 0.0, &k) == MVSC_STATUS_OK);
  CHECK(mvsc_kernel_len(k) == 27);
  CHECK(!mvsc_kernel_lattice_exact(k));
  double pts[81];
  CHECK(mvsc_kernel_points(k, pts, 81) == MVSC_STATUS_OK);
  /* center stays put */
  CHECK(pts[39] == 0.0 && pts[40] == 0.0 && pts[41] == 0.0);
  CHECK(mvsc_kernel_points(k, pts, 10) == MVSC_STATUS_INVALID_ARGUMENT);
  mvsc_kernel_free(k);

  CHECK(mvsc_kernel_rotate(4, 0.0, 0.0, 0.0, &k) == MVSC_STATUS_PARAMETER);
  CHECK(strlen(mvsc_last_error()) > 0);

  unsigned char pred[4] = {1, 1, 0, 0}, gt[4] = {1, 0, 1, 0}, mask[4] = {1, 1, 1, 1};
  MvscScMetrics m;
  CHECK(mvsc_sc_metrics(pred, gt, mask, 4, &m) == MVSC_STATUS_OK);
  CHECK(m.tp == 1 && m.fp == 1 && m.fn_ == 1);
  CHECK(fabs(m.iou - 1.0 / 3.0) < 1e-12);

  MvscScene *scene = NULL;
  CHECK(mvsc_scene_generate(3, 16, 8, 16, 4, 3, &scene) == MVSC_STATUS_OK);
  size_t ext[3];
  CHECK(mvsc_scene_extents(scene, ext) == MVSC_STATUS_OK);
  CHECK(ext[0] == 16 && ext[1] == 8 && ext[2] == 16);

  MvscModel *model = NULL;
  CHECK(mvsc_model_new(NULL, "toy", &model) == MVSC_STATUS_OK);
  MvscTensor *logits = NULL;
  CHECK(mvsc_model_forward(model, scene, &logits) == MVSC_STATUS_OK);
  size_t shape[4];
  CHECK(mvsc_tensor_rank(logits) == 4);
  CHECK(mvsc_tensor_shape(logits, shape, 4) == MVSC_STATUS_OK);
  CHECK(shape[3] == 4);
  CHECK(isfinite(mvsc_tensor_data(logits)[0]));

  mvsc_tensor_free(logits);
  mvsc_model_free(model);
  mvsc_scene_free(scene);
  mvsc_model_free(NULL);
  printf("ok %s\n", mvsc_version());
  return 0;
}
