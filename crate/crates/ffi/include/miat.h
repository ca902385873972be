#ifndef MIAT_H
#define MIAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MiatStatus {
  MIAT_STATUS_OK = 0,
  MIAT_STATUS_USAGE = 1,
  MIAT_STATUS_DATA = 2,
  MIAT_STATUS_NUMERIC = 3,
  MIAT_STATUS_NULL_POINTER = 4,
  MIAT_STATUS_PANIC = 5,
} MiatStatus;

typedef enum MiatLayerKind {
  MIAT_LAYER_KIND_LTMI = 0,
  MIAT_LAYER_KIND_NAIVE = 1,
} MiatLayerKind;

// A training checkpoint held in memory.
typedef struct MiatCheckpoint MiatCheckpoint;

// A stack of LTMI layers with its parameters.
typedef struct MiatLtmi MiatLtmi;

typedef struct MiatRankingMetrics {
  bool has_gold;
  uint64_t rank;
  double mrr;
  double r_at_1;
  double r_at_5;
  double r_at_10;
  bool has_ndcg;
  double ndcg;
} MiatRankingMetrics;

typedef struct MiatBoxLoss {
  double l1;
  double giou;
  double total;
} MiatBoxLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *miat_last_error(void);

// Parameter count of `layers` stacked layers over `u` utilities of width `d`.
//
// # Safety
// `out` must point to writable memory for one `u64`.
enum MiatStatus miat_param_count(enum MiatLayerKind kind,
                                 size_t u,
                                 size_t d,
                                 size_t layers,
                                 uint64_t *out);

// Learning rate at a fractional `epoch` of the warmup-then-halving schedule.
//
// # Safety
// `out` must point to writable memory for one `double`.
enum MiatStatus miat_schedule_lr(double start,
                                 double end,
                                 double warmup_epochs,
                                 double period,
                                 double epoch,
                                 double *out);

// Ranking metrics of `n` scores. `gold < 0` means no gold index;
// `relevance` may be null, otherwise it holds `n` values.
//
// # Safety
// `scores` (and `relevance` when non-null) must point to `n` doubles and
// `out` to a writable [`MiatRankingMetrics`].
enum MiatStatus miat_ranking_metrics(const double *scores,
                                     size_t n,
                                     int64_t gold,
                                     const double *relevance,
                                     struct MiatRankingMetrics *out);

// Box loss between a target and a predicted box, each `x1, y1, x2, y2`.
//
// # Safety
// `target` and `pred` must each point to four doubles and `out` to a
// writable [`MiatBoxLoss`].
enum MiatStatus miat_box_loss(const double *target, const double *pred, struct MiatBoxLoss *out);

// Creates `layers` LTMI layers over `utilities` inputs of width `d`,
// initialised from `seed`.
//
// # Safety
// `out` must point to writable memory for one handle pointer.
enum MiatStatus miat_ltmi_new(size_t utilities,
                              size_t d,
                              size_t heads,
                              size_t layers,
                              uint64_t seed,
                              struct MiatLtmi **out);

// Number of trainable values held by the handle.
//
// # Safety
// `h` must come from [`miat_ltmi_new`]; `out` must be writable.
enum MiatStatus miat_ltmi_param_count(const struct MiatLtmi *h, uint64_t *out);

// Inference pass. Utility `u` has `rows[u]` row-major rows of width `d` at
// `inputs[u]`; its updated features are written to `outputs[u]` with the
// same shape.
//
// # Safety
// `inputs`, `rows` and `outputs` must hold one entry per utility, each
// buffer sized `rows[u] * d` doubles.
enum MiatStatus miat_ltmi_forward(const struct MiatLtmi *h,
                                  const double *const *inputs,
                                  const size_t *rows,
                                  double *const *outputs);

// # Safety
// `h` must come from [`miat_ltmi_new`] and not be used afterwards; null is ignored.
void miat_ltmi_free(struct MiatLtmi *h);

// Reads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum MiatStatus miat_checkpoint_load(const char *path, struct MiatCheckpoint **out);

// Writes the checkpoint back out; the bytes equal those it was read from.
//
// # Safety
// `h` must come from [`miat_checkpoint_load`]; `path` must be NUL-terminated.
enum MiatStatus miat_checkpoint_save(const struct MiatCheckpoint *h, const char *path);

// Completed epochs recorded in the checkpoint.
//
// # Safety
// `h` must come from [`miat_checkpoint_load`]; `out` must be writable.
enum MiatStatus miat_checkpoint_epoch(const struct MiatCheckpoint *h, uint32_t *out);

// Number of named parameter tensors in the checkpoint.
//
// # Safety
// `h` must come from [`miat_checkpoint_load`]; `out` must be writable.
enum MiatStatus miat_checkpoint_tensor_count(const struct MiatCheckpoint *h, size_t *out);

// # Safety
// `h` must come from [`miat_checkpoint_load`] and not be used afterwards; null is ignored.
void miat_checkpoint_free(struct MiatCheckpoint *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIAT_H */
