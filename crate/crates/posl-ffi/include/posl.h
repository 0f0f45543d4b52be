#ifndef POSL_FFI_H
#define POSL_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call succeeded.
 */
#define POSL_OK 0

/**
 * The simulated stream is exhausted; no output was produced.
 */
#define POSL_DONE 1

/**
 * A required pointer argument was null.
 */
#define POSL_NULL_ARG -1

/**
 * An argument was out of range or a buffer was too small.
 */
#define POSL_INVALID -2

/**
 * The computation failed.
 */
#define POSL_RUNTIME -3

/**
 * Opaque handle to a streaming engine bound to a simulated target stream.
 */
typedef struct PoslEngine PoslEngine;

/**
 * Opaque handle to one simulated study design.
 */
typedef struct PoslSim PoslSim;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version string of the underlying library; static storage, do not free.
 */
const char *posl_version(void);

/**
 * Builds study design `which` (1..=4) with `subjects` historical series of
 * length `tau` under `seed`, returning a handle through `out`.
 */
int32_t posl_sim_new(uint8_t which,
                     uintptr_t subjects,
                     uint32_t tau,
                     uint64_t seed,
                     struct PoslSim **out);

/**
 * Releases a simulation handle. Null is ignored.
 */
void posl_sim_free(struct PoslSim *sim);

/**
 * Creates an engine over the simulation's historical panel, seeded with the
 * first batch of the target stream. `mode` selects the ensembling rule:
 * 0 discrete, 1 convex, 2 conditional.
 */
int32_t posl_engine_new(const struct PoslSim *sim, int32_t mode, struct PoslEngine **out);

/**
 * Releases an engine handle. Null is ignored.
 */
void posl_engine_free(struct PoslEngine *engine);

/**
 * Number of candidate learners in the engine's library.
 */
int32_t posl_engine_num_learners(const struct PoslEngine *engine, uintptr_t *out);

/**
 * Absorbs the next batch of the simulated stream and writes the ensemble
 * forecast into `forecast_out` (capacity `forecast_len`). `written` receives
 * the number of values stored. Returns `POSL_DONE` once the stream ends.
 */
int32_t posl_engine_step_next(struct PoslEngine *engine,
                              double *forecast_out,
                              uintptr_t forecast_len,
                              uintptr_t *written);

/**
 * Copies the current ensemble weights into `buf` (capacity `len`); `written`
 * receives the number of learners.
 */
int32_t posl_engine_weights(const struct PoslEngine *engine,
                            double *buf,
                            uintptr_t len,
                            uintptr_t *written);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* POSL_FFI_H */
