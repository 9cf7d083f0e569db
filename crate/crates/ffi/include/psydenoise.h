#ifndef PSYDENOISE_H
#define PSYDENOISE_H

/* Generated by cbindgen from psydenoise-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes returned by every fallible entry point.
 */
typedef enum PsdnStatus {
  PSDN_OK = 0,
  /*
   A pointer was null or an argument out of range.
   */
  PSDN_INVALID_ARGUMENT = 1,
  /*
   The checkpoint could not be read.
   */
  PSDN_IO_ERROR = 2,
  /*
   The data was readable but malformed (bad checkpoint, wrong rate).
   */
  PSDN_FORMAT_ERROR = 3,
  /*
   An internal failure; details via `psdn_last_error_message`.
   */
  PSDN_INTERNAL_ERROR = 4,
} PsdnStatus;

/*
 Opaque denoiser handle.
 */
typedef struct PsdnDenoiser PsdnDenoiser;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Returns the library version as a static NUL-terminated string.
 */
const char *psdn_version(void);

/*
 Returns the message of the most recent failure on this thread. The
 pointer stays valid until the next failing call on the same thread.
 */
const char *psdn_last_error_message(void);

/*
 Loads a checkpoint and hands back a denoiser handle in `out`.

 # Safety
 `checkpoint_path` must be a valid NUL-terminated string and `out` a
 valid pointer. On success `*out` owns the handle and must be released
 with [`psdn_denoiser_close`].
 */
enum PsdnStatus psdn_denoiser_open(const char *checkpoint_path, struct PsdnDenoiser **out);

/*
 Number of stacked input frames the loaded model expects (1 or 3).

 # Safety
 `denoiser` must be a live handle from [`psdn_denoiser_open`].
 */
uint32_t psdn_denoiser_context_frames(const struct PsdnDenoiser *denoiser);

/*
 Denoises `len` mono samples at 16 kHz from `input` into `output`
 (also `len` samples; the buffers may not alias). Samples past the last
 full analysis frame are copied through unchanged. The signal must be
 at least 1024 samples long.

 # Safety
 `denoiser` must be a live handle; `input` and `output` must point to
 `len` readable / writable floats.
 */
enum PsdnStatus psdn_denoiser_process(const struct PsdnDenoiser *denoiser,
                                      const float *input,
                                      size_t len,
                                      uint32_t sample_rate,
                                      float *output);

/*
 Releases a handle. A null pointer is a no-op.

 # Safety
 `denoiser` must be null or a handle from [`psdn_denoiser_open`] that
 has not been closed yet.
 */
void psdn_denoiser_close(struct PsdnDenoiser *denoiser);

/*
 Computes the perceptual weight of each bin for one 513-bin frame of
 SPL-normalized power (dB), writing 513 weights. The frame is analyzed
 on the fixed 16 kHz / 1024-point grid.

 # Safety
 `psd_db` and `weights_out` must point to 513 readable / writable
 doubles.
 */
enum PsdnStatus psdn_frame_weights(const double *psd_db, double *weights_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PSYDENOISE_H */
