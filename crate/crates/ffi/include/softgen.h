#ifndef SOFTGEN_H
#define SOFTGEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_POINTER = 1,
  SG_STATUS_INVALID_INPUT = 2,
  SG_STATUS_SHAPE_MISMATCH = 3,
  SG_STATUS_DEGENERATE = 4,
  SG_STATUS_NON_CONVERGENCE = 5,
  SG_STATUS_NUMERICAL_BLOWUP = 6,
  SG_STATUS_UNKNOWN_NAME = 7,
  SG_STATUS_BUFFER_TOO_SMALL = 8,
  SG_STATUS_PANIC = 9,
  SG_STATUS_OTHER = 10,
} SgStatus;

/**
 * A fitted warp field together with its fit statistics.
 */
typedef struct SgWarpField SgWarpField;

/**
 * A simulated scene of one built-in task.
 */
typedef struct SgWorld SgWorld;

typedef struct SgPose {
  double position[3];
  double quaternion[4];
} SgPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *sg_last_error_message(void);

/**
 * Fits a thin-plate-spline field mapping `src` onto `tgt` (`n` nodes each).
 *
 * # Safety
 * `src` and `tgt` must point to `3 * n` doubles; `out_field` must be writable.
 */
enum SgStatus sg_fit_tps(const double *src,
                         const double *tgt,
                         size_t n,
                         double lambda,
                         struct SgWarpField **out_field);

/**
 * Like [`sg_fit_tps`] with unknown correspondence: `src` has `n` and `tgt`
 * has `m` points.
 *
 * # Safety
 * `src` and `tgt` must point to `3 * n` and `3 * m` doubles.
 */
enum SgStatus sg_fit_tps_rpm(const double *src,
                             size_t n,
                             const double *tgt,
                             size_t m,
                             double lambda,
                             struct SgWarpField **out_field);

/**
 * # Safety
 * `field` must come from a fit function and not have been freed.
 */
void sg_warp_free(struct SgWarpField *field);

/**
 * # Safety
 * `x` and `out_y` must point to 3 doubles.
 */
enum SgStatus sg_warp_eval(const struct SgWarpField *field, const double *x, double *out_y);

/**
 * Row-major Jacobian of the field at `x`.
 *
 * # Safety
 * `x` must point to 3 doubles and `out_j` to 9.
 */
enum SgStatus sg_warp_jacobian(const struct SgWarpField *field, const double *x, double *out_j);

/**
 * # Safety
 * `pose` and `out_pose` must be valid.
 */
enum SgStatus sg_warp_transform_pose(const struct SgWarpField *field,
                                     const struct SgPose *pose,
                                     struct SgPose *out_pose);

/**
 * Registration cost and bending energy of the fit. Either output may be null.
 *
 * # Safety
 * `field` must be valid.
 */
enum SgStatus sg_warp_cost(const struct SgWarpField *field, double *out_cost, double *out_bending);

/**
 * Nearest rotation (Frobenius norm) to a row-major 3×3 matrix.
 *
 * # Safety
 * `m` and `out_r` must point to 9 doubles.
 */
enum SgStatus sg_orthonormalize(const double *m, double *out_r);

/**
 * Least-squares rigid transform taking `src` onto `tgt`.
 *
 * # Safety
 * `src` and `tgt` must point to `3 * n` doubles.
 */
enum SgStatus sg_kabsch_fit(const double *src,
                            const double *tgt,
                            size_t n,
                            struct SgPose *out_pose);

/**
 * Samples the initial scene of built-in task `task_id`.
 *
 * # Safety
 * `task_id` must be a NUL-terminated string; `out_world` must be writable.
 */
enum SgStatus sg_world_reset(const char *task_id, uint64_t seed, struct SgWorld **out_world);

/**
 * # Safety
 * `world` must come from [`sg_world_reset`] and not have been freed.
 */
void sg_world_free(struct SgWorld *world);

/**
 * Advances one step with the gripper commanded to `pose`; `closed` is 0 or 1.
 *
 * # Safety
 * `world` and `pose` must be valid.
 */
enum SgStatus sg_world_step(struct SgWorld *world, const struct SgPose *pose, uint8_t closed);

/**
 * Copies the node positions of `object_id` into `out_nodes`.
 *
 * The node count is always written to `out_count`. When `capacity` (in
 * nodes) is too small nothing is copied and `BufferTooSmall` is returned, so
 * a call with `capacity = 0` queries the size.
 *
 * # Safety
 * `out_nodes` must have room for `3 * capacity` doubles.
 */
enum SgStatus sg_world_observe(const struct SgWorld *world,
                               const char *object_id,
                               double *out_nodes,
                               size_t capacity,
                               size_t *out_count);

/**
 * Evaluates the task's success predicate on the current state.
 *
 * # Safety
 * `world` must be valid and `out_success` writable.
 */
enum SgStatus sg_world_success(const struct SgWorld *world, bool *out_success);

/**
 * Current gripper pose.
 *
 * # Safety
 * `world` must be valid and `out_pose` writable.
 */
enum SgStatus sg_world_gripper_pose(const struct SgWorld *world, struct SgPose *out_pose);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOFTGEN_H */
