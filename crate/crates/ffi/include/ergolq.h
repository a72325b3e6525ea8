#ifndef ERGOLQ_H
#define ERGOLQ_H

#include <stddef.h>
#include <stdint.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum ErgolqStatus {
  ERGOLQ_STATUS_OK = 0,
  ERGOLQ_STATUS_NULL_POINTER = 1,
  ERGOLQ_STATUS_INVALID_ARGUMENT = 2,
  ERGOLQ_STATUS_UNKNOWN_SCENARIO = 3,
  ERGOLQ_STATUS_NUMERICAL = 4,
  ERGOLQ_STATUS_NOT_STABILIZING = 5,
  ERGOLQ_STATUS_BUFFER_TOO_SMALL = 6,
  ERGOLQ_STATUS_PANIC = 7,
} ErgolqStatus;

/**
 * A periodic coefficient set.
 */
typedef struct ErgolqScenario ErgolqScenario;

/**
 * Riccati solution, adjoint and optimal feedback for one scenario.
 */
typedef struct ErgolqSolution ErgolqSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ergolq_version(void);

/**
 * Length in bytes of the last error message on this thread, without the
 * terminating NUL; 0 when the last call succeeded.
 */
size_t ergolq_last_error_length(void);

/**
 * Copies the last error message into `buf` (NUL-terminated, truncated to
 * `len - 1` bytes). Returns the number of bytes written, excluding the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ergolq_last_error_message(char *buf, size_t len);

/**
 * Loads a catalog scenario or a scenario TOML file by path.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out_handle` must be writable.
 */
enum ErgolqStatus ergolq_scenario_load(const char *name, struct ErgolqScenario **out_handle);

/**
 * Builds a scenario from TOML text.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out_handle` must be writable.
 */
enum ErgolqStatus ergolq_scenario_from_toml(const char *toml, struct ErgolqScenario **out_handle);

/**
 * State dimension, control dimension and period.
 *
 * # Safety
 * `scenario` must come from this library; the outputs must be writable.
 */
enum ErgolqStatus ergolq_scenario_dims(const struct ErgolqScenario *scenario,
                                       size_t *n,
                                       size_t *m,
                                       double *tau);

/**
 * # Safety
 * `scenario` must be null or come from this library, and not be used again.
 */
void ergolq_scenario_free(struct ErgolqScenario *scenario);

/**
 * Solves for the optimal feedback. `samples` is the number of regression
 * paths; 0 selects the default.
 *
 * # Safety
 * `scenario` must come from this library; `out_handle` must be writable.
 */
enum ErgolqStatus ergolq_solve_optimal(const struct ErgolqScenario *scenario,
                                       uint64_t seed,
                                       size_t steps_per_period,
                                       size_t samples,
                                       struct ErgolqSolution **out_handle);

/**
 * Writes the time-0 Riccati value `K0` (n x n).
 *
 * # Safety
 * `solution` must come from this library; `buf` must hold `len` doubles.
 */
enum ErgolqStatus ergolq_solution_k0(const struct ErgolqSolution *solution,
                                     double *buf,
                                     size_t len);

/**
 * Writes the feedback gain at the start of a period (m x n).
 *
 * # Safety
 * `solution` must come from this library; `buf` must hold `len` doubles.
 */
enum ErgolqStatus ergolq_solution_gain(const struct ErgolqSolution *solution,
                                       double *buf,
                                       size_t len);

/**
 * Writes the feedback offset at the start of a period (m x 1).
 *
 * # Safety
 * `solution` must come from this library; `buf` must hold `len` doubles.
 */
enum ErgolqStatus ergolq_solution_offset(const struct ErgolqSolution *solution,
                                         double *buf,
                                         size_t len);

/**
 * Number of outer policy iterations taken.
 *
 * # Safety
 * `solution` must come from this library; `iterations` must be writable.
 */
enum ErgolqStatus ergolq_solution_iterations(const struct ErgolqSolution *solution,
                                             size_t *iterations);

/**
 * Estimates the optimal ergodic cost with `paths` Monte Carlo paths.
 *
 * # Safety
 * Both handles must come from this library and `solution` must have been
 * solved for `scenario`; the outputs must be writable.
 */
enum ErgolqStatus ergolq_solution_value(const struct ErgolqSolution *solution,
                                        const struct ErgolqScenario *scenario,
                                        size_t paths,
                                        uint64_t seed,
                                        double *value,
                                        double *stderr);

/**
 * # Safety
 * `solution` must be null or come from this library, and not be used again.
 */
void ergolq_solution_free(struct ErgolqSolution *solution);

/**
 * Runs the command-line interface with `argv[0..argc]` (program name
 * first). Returns its exit code: 0 success, 1 failure, 2 configuration error.
 *
 * # Safety
 * `argv` must point to `argc` NUL-terminated strings.
 */
int ergolq_run_cli(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ERGOLQ_H */
