#ifndef HYBRID_AUCTION_H
#define HYBRID_AUCTION_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum HaStatus {
  HA_STATUS_OK = 0,
  // A required pointer argument was null.
  HA_STATUS_NULL_POINTER = 1,
  // Arguments were inconsistent or out of range.
  HA_STATUS_INVALID_ARGUMENT = 2,
  // A file could not be read or was malformed.
  HA_STATUS_IO = 3,
  // The computation produced a non-finite value.
  HA_STATUS_NUMERICAL = 4,
  // An internal panic was caught at the boundary.
  HA_STATUS_INTERNAL = 5,
} HaStatus;

// Quality factors and store-brand adjacency of one auction.
typedef struct HaInstance HaInstance;

// A trained learned mechanism together with the setting it was trained for.
typedef struct HaModel HaModel;

// Number of slots, bundle cap and agent counts.
typedef struct HaSetting HaSetting;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buffer` (always
// NUL-terminated when `capacity > 0`) and returns the full message length
// in bytes, excluding the terminator. Returns 0 when there is no error.
//
// # Safety
// `buffer` must be null or point to `capacity` writable bytes.
size_t ha_last_error(char *buffer, size_t capacity);

// Creates a setting with `stores` stores, `brands` brands, `slots` slots
// whose click-through rates are `ctrs[0..slots]` (non-increasing, in
// (0, 1)), and at most `cap` bundle slots.
//
// # Safety
// `ctrs` must point to `slots` doubles; `out` must be a valid pointer.
enum HaStatus ha_setting_new(size_t stores,
                             size_t brands,
                             size_t cap,
                             const double *ctrs,
                             size_t slots,
                             struct HaSetting **out);

// Releases a setting. Null is ignored.
//
// # Safety
// `setting` must come from [`ha_setting_new`] and not be used afterwards.
void ha_setting_free(struct HaSetting *setting);

// Number of agents (stores plus brands) of a setting, or 0 for null.
//
// # Safety
// `setting` must be null or a live handle.
size_t ha_setting_agents(const struct HaSetting *setting);

// Number of slots of a setting, or 0 for null.
//
// # Safety
// `setting` must be null or a live handle.
size_t ha_setting_slots(const struct HaSetting *setting);

// Creates an auction instance from `stores` quality factors and a
// row-major `stores × brands` adjacency matrix (non-zero = linked).
//
// # Safety
// `alphas` must point to `stores` doubles, `adjacency` to
// `stores * brands` bytes; `out` must be a valid pointer.
enum HaStatus ha_instance_new(const double *alphas,
                              size_t stores,
                              const uint8_t *adjacency,
                              size_t brands,
                              struct HaInstance **out);

// Releases an instance. Null is ignored.
//
// # Safety
// `instance` must come from [`ha_instance_new`] and not be used afterwards.
void ha_instance_free(struct HaInstance *instance);

// Runs the VCG mechanism on `bids` (stores then brands) and writes the
// `agents × slots` allocation and per-agent payments.
//
// # Safety
// Handles must be live; `bids` must point to `bids_len` doubles and the
// output buffers to the stated number of writable doubles.
enum HaStatus ha_vcg_run(const struct HaSetting *setting,
                         const struct HaInstance *instance,
                         const double *bids,
                         size_t bids_len,
                         double *allocation,
                         size_t allocation_len,
                         double *payments,
                         size_t payments_len);

// Loads a trained model from a checkpoint file written by the trainer.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string; `out` a valid pointer.
enum HaStatus ha_model_load(const char *path, struct HaModel **out);

// Setting a model was trained for, as a new handle owned by the caller.
//
// # Safety
// `model` must be live; `out` must be a valid pointer.
enum HaStatus ha_model_setting(const struct HaModel *model, struct HaSetting **out);

// Runs the learned mechanism on `bids` (stores then brands).
//
// # Safety
// As for [`ha_vcg_run`].
enum HaStatus ha_model_run(const struct HaModel *model,
                           const struct HaInstance *instance,
                           const double *bids,
                           size_t bids_len,
                           double *allocation,
                           size_t allocation_len,
                           double *payments,
                           size_t payments_len);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`ha_model_load`] and not be used afterwards.
void ha_model_free(struct HaModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYBRID_AUCTION_H */
