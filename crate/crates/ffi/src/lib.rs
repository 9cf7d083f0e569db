//! C ABI for the psydenoise speech denoiser.
//!
//! The surface is a classic opaque-handle design: open a denoiser from a
//! checkpoint file, push sample buffers through it, close it. All
//! functions return a status code; the most recent failure message is
//! kept per thread and readable via [`psdn_last_error_message`].
//!
//! The generated header lives at `include/psydenoise.h`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use psydenoise::audio::AudioSignal;
use psydenoise::net::{self, NetworkParams};
use psydenoise::{FREQ_BINS, SAMPLE_RATE};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsdnStatus {
    PsdnOk = 0,
    /// A pointer was null or an argument out of range.
    PsdnInvalidArgument = 1,
    /// The checkpoint could not be read.
    PsdnIoError = 2,
    /// The data was readable but malformed (bad checkpoint, wrong rate).
    PsdnFormatError = 3,
    /// An internal failure; details via `psdn_last_error_message`.
    PsdnInternalError = 4,
}

/// Opaque denoiser handle.
pub struct PsdnDenoiser {
    params: NetworkParams,
    context_frames: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_last_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(status: PsdnStatus, msg: &str) -> PsdnStatus {
    set_last_error(msg);
    status
}

fn guard(body: impl FnOnce() -> PsdnStatus) -> PsdnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(PsdnStatus::PsdnInternalError, "internal panic"),
    }
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn psdn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the message of the most recent failure on this thread. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn psdn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a checkpoint and hands back a denoiser handle in `out`.
///
/// # Safety
/// `checkpoint_path` must be a valid NUL-terminated string and `out` a
/// valid pointer. On success `*out` owns the handle and must be released
/// with [`psdn_denoiser_close`].
#[no_mangle]
pub unsafe extern "C" fn psdn_denoiser_open(
    checkpoint_path: *const c_char,
    out: *mut *mut PsdnDenoiser,
) -> PsdnStatus {
    guard(|| {
        if checkpoint_path.is_null() || out.is_null() {
            return fail(PsdnStatus::PsdnInvalidArgument, "null pointer");
        }
        let path = match unsafe { CStr::from_ptr(checkpoint_path) }.to_str() {
            Ok(p) => p,
            Err(_) => return fail(PsdnStatus::PsdnInvalidArgument, "path is not valid UTF-8"),
        };
        match net::load_checkpoint(path) {
            Ok((params, config)) => {
                let handle = Box::new(PsdnDenoiser {
                    params,
                    context_frames: config.context_frames,
                });
                unsafe { *out = Box::into_raw(handle) };
                PsdnStatus::PsdnOk
            }
            Err(e @ psydenoise::Error::Io { .. }) => fail(PsdnStatus::PsdnIoError, &e.to_string()),
            Err(e) => fail(PsdnStatus::PsdnFormatError, &e.to_string()),
        }
    })
}

/// Number of stacked input frames the loaded model expects (1 or 3).
///
/// # Safety
/// `denoiser` must be a live handle from [`psdn_denoiser_open`].
#[no_mangle]
pub unsafe extern "C" fn psdn_denoiser_context_frames(denoiser: *const PsdnDenoiser) -> u32 {
    if denoiser.is_null() {
        return 0;
    }
    unsafe { &*denoiser }.context_frames as u32
}

/// Denoises `len` mono samples at 16 kHz from `input` into `output`
/// (also `len` samples; the buffers may not alias). Samples past the last
/// full analysis frame are copied through unchanged. The signal must be
/// at least 1024 samples long.
///
/// # Safety
/// `denoiser` must be a live handle; `input` and `output` must point to
/// `len` readable / writable floats.
#[no_mangle]
pub unsafe extern "C" fn psdn_denoiser_process(
    denoiser: *const PsdnDenoiser,
    input: *const f32,
    len: usize,
    sample_rate: u32,
    output: *mut f32,
) -> PsdnStatus {
    guard(|| {
        if denoiser.is_null() || input.is_null() || output.is_null() {
            return fail(PsdnStatus::PsdnInvalidArgument, "null pointer");
        }
        if sample_rate != SAMPLE_RATE {
            return fail(
                PsdnStatus::PsdnFormatError,
                &format!("sample rate {sample_rate} (model is fixed at {SAMPLE_RATE})"),
            );
        }
        let handle = unsafe { &*denoiser };
        let samples: Vec<f64> = unsafe { std::slice::from_raw_parts(input, len) }
            .iter()
            .map(|&s| s as f64)
            .collect();
        let signal = match AudioSignal::new(samples, SAMPLE_RATE) {
            Ok(s) => s,
            Err(e) => return fail(PsdnStatus::PsdnInvalidArgument, &e.to_string()),
        };
        match net::denoise_signal(&handle.params, handle.context_frames, &signal) {
            Ok(enhanced) => {
                let out = unsafe { std::slice::from_raw_parts_mut(output, len) };
                for (o, &s) in out.iter_mut().zip(&enhanced.samples) {
                    *o = s as f32;
                }
                PsdnStatus::PsdnOk
            }
            Err(psydenoise::Error::SignalTooShort) => fail(
                PsdnStatus::PsdnInvalidArgument,
                "signal too short (need at least 1024 samples)",
            ),
            Err(e) => fail(PsdnStatus::PsdnInternalError, &e.to_string()),
        }
    })
}

/// Releases a handle. A null pointer is a no-op.
///
/// # Safety
/// `denoiser` must be null or a handle from [`psdn_denoiser_open`] that
/// has not been closed yet.
#[no_mangle]
pub unsafe extern "C" fn psdn_denoiser_close(denoiser: *mut PsdnDenoiser) {
    if !denoiser.is_null() {
        drop(unsafe { Box::from_raw(denoiser) });
    }
}

/// Computes the perceptual weight of each bin for one 513-bin frame of
/// SPL-normalized power (dB), writing 513 weights. The frame is analyzed
/// on the fixed 16 kHz / 1024-point grid.
///
/// # Safety
/// `psd_db` and `weights_out` must point to 513 readable / writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn psdn_frame_weights(
    psd_db: *const f64,
    weights_out: *mut f64,
) -> PsdnStatus {
    guard(|| {
        if psd_db.is_null() || weights_out.is_null() {
            return fail(PsdnStatus::PsdnInvalidArgument, "null pointer");
        }
        let frame = unsafe { std::slice::from_raw_parts(psd_db, FREQ_BINS) };
        if frame.iter().any(|v| !v.is_finite()) {
            return fail(PsdnStatus::PsdnInvalidArgument, "non-finite PSD value");
        }
        let scale = psydenoise::psycho::BarkScale::new(psydenoise::FFT_SIZE, SAMPLE_RATE);
        let ath = scale.ath_db();
        let maskers = psydenoise::psycho::find_tonal_maskers(frame, &scale);
        let threshold = psydenoise::psycho::threshold_from_maskers(&maskers, &ath, &scale);
        let out = unsafe { std::slice::from_raw_parts_mut(weights_out, FREQ_BINS) };
        for ((o, &p), &g) in out.iter_mut().zip(frame).zip(threshold.iter()) {
            *o = (10f64.powf(0.1 * (p - g)) + 1.0).log10();
        }
        PsdnStatus::PsdnOk
    })
}
