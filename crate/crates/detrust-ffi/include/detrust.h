/* C interface to the detrust federated-learning engine.
* Generated by cbindgen; do not edit by hand. */

#ifndef DETRUST_H
#define DETRUST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call in this interface.
 */
typedef enum DetrustStatus {
  /**
   * The call succeeded and all out-pointers were written.
   */
  DETRUST_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  DETRUST_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  DETRUST_STATUS_INVALID_UTF8 = 2,
  /**
   * A JSON document failed to parse or had the wrong shape.
   */
  DETRUST_STATUS_PARSE_ERROR = 3,
  /**
   * Arguments parsed but violate a documented constraint.
   */
  DETRUST_STATUS_INVALID_INPUT = 4,
  /**
   * Group generation or validation failed.
   */
  DETRUST_STATUS_CRYPTO_ERROR = 5,
  /**
   * The federation run itself failed.
   */
  DETRUST_STATUS_RUN_FAILED = 6,
  /**
   * A panic or other unexpected condition inside the library.
   */
  DETRUST_STATUS_INTERNAL_ERROR = 7,
} DetrustStatus;

/**
 * Opaque handle to a validated safe-prime group (p = 2q + 1 with a
 * generator of the order-q subgroup).
 */
typedef struct DetrustGroup DetrustGroup;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the message for the calling thread's most recent failure into
 * `buf` (NUL-terminated, truncated to `cap` bytes) and returns the full
 * length including the terminator. Returns 0 when the last call succeeded.
 * Pass a null `buf` or zero `cap` to query the required size.
 */
size_t detrust_last_error(char *buf, size_t cap);

/**
 * Releases a string returned by this library. Null is ignored.
 */
void detrust_string_free(char *s);

/**
 * Generates a fresh safe-prime group of `lambda` bits. `seed` may be null
 * for OS randomness or point at a u64 for a deterministic search. Bit
 * lengths below the secure floor are refused unless `allow_insecure` is
 * set; that opt-in exists for tests and simulations only.
 */
enum DetrustStatus detrust_group_generate(uint32_t lambda,
                                          const uint64_t *seed,
                                          bool allow_insecure,
                                          struct DetrustGroup **out_group);

/**
 * Returns the 2048-bit MODP group from RFC 3526 with generator 2. No
 * search cost; this is the recommended production group.
 */
enum DetrustStatus detrust_group_standard_2048(struct DetrustGroup **out_group);

/**
 * Serializes a group as JSON with decimal-string parameters, suitable for
 * `detrust_group_from_json` and for non-C consumers.
 */
enum DetrustStatus detrust_group_to_json(const struct DetrustGroup *group, char **out_json);

/**
 * Parses a group from JSON and re-checks every structural invariant
 * (primality of p and q, p = 2q + 1, generator order), so material read
 * off the wire cannot smuggle in a weak group.
 */
enum DetrustStatus detrust_group_from_json(const char *json, struct DetrustGroup **out_group);

/**
 * Returns the group's security parameter in bits, or 0 for a null handle.
 */
uint32_t detrust_group_bits(const struct DetrustGroup *group);

/**
 * Releases a group handle. Null is ignored.
 */
void detrust_group_free(struct DetrustGroup *group);

/**
 * Clips `values` to `[-clip_bound, clip_bound]`, scales by 10^precision,
 * and rounds half away from zero into `out_encoded` (same length as
 * `values`). If `out_clipped` is non-null it receives the number of
 * entries that hit the clip range. Every input must be finite.
 */
enum DetrustStatus detrust_encode(uint32_t precision,
                                  double clip_bound,
                                  const double *values,
                                  size_t len,
                                  int64_t *out_encoded,
                                  size_t *out_clipped);

/**
 * Maps aggregated integers back to floats, dividing out both the payload
 * scale 10^precision and the fusion-weight scale. `total_weight_scale` is
 * the divisor announced with the fused result (1 for a plain sum, the
 * support size for an average) and must be nonzero.
 */
enum DetrustStatus detrust_decode(uint32_t precision,
                                  uint64_t total_weight_scale,
                                  const int64_t *values,
                                  size_t len,
                                  double *out_decoded);

/**
 * Inspects a participation matrix (JSON: `{"m", "n", "rows"}` with rows of
 * `[numerator, denominator]` pairs) against trust parameters and writes a
 * JSON report. `local_thresholds` carries one entry per party, or a single
 * entry shared by all; `thresholds_len` is its length.
 *
 * The report covers: per-round support against the global threshold, batch
 * privacy at `min_batch_size`, which parties a rank test would expose to
 * aggregate differencing, the verdict each party's own inspection returns,
 * and a final `safe` flag that requires every check to pass.
 */
enum DetrustStatus detrust_matrix_report(const char *matrix_json,
                                         const uint32_t *local_thresholds,
                                         size_t thresholds_len,
                                         uint32_t min_batch_size,
                                         char **out_json);

/**
 * Total messages an encrypted federation exchanges over `rounds` training
 * rounds with `parties` participants: one registration round trip per
 * party, one key-material deposit per party, one consensus announcement,
 * and one ciphertext round trip per party per round.
 */
uint64_t detrust_expected_interactions(uint64_t rounds, uint64_t parties);

/**
 * Message total for plaintext federated averaging over the same schedule.
 */
uint64_t detrust_general_fl_interactions(uint64_t rounds, uint64_t parties);

/**
 * Message total for the hybrid scheme that adds a per-round key-request
 * round trip to a third party.
 */
uint64_t detrust_hybrid_alpha_interactions(uint64_t rounds, uint64_t parties);

/**
 * Writes the default run configuration as JSON. Every field in the
 * document may be edited and fed back to `detrust_run_simulation`; omitted
 * fields keep these defaults.
 */
enum DetrustStatus detrust_default_config_json(char **out_json);

/**
 * Runs a full encrypted federation in-process from a JSON configuration
 * (any transport setting in the document is overridden) and writes the
 * aggregator-observable report as JSON: outcome, final model and accuracy,
 * per-round metrics, interaction meter, negotiated matrix, and audit
 * records. A run that negotiates or trains to a non-completed outcome
 * still returns OK with that outcome in the report; `RUN_FAILED` means the
 * engine itself could not proceed.
 */
enum DetrustStatus detrust_run_simulation(const char *config_json, char **out_report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DETRUST_H */
