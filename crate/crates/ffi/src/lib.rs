//! C interface to the color-statistics prompting library.
//!
//! Images and prompter pools cross the boundary as opaque handles that the
//! caller releases with the matching `*_free` function. Every fallible call
//! returns a [`CpStatus`]; on failure [`cp_last_error`] describes the most
//! recent error on the calling thread. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use colorprompt::prompter::{prompter_recover, PrompterPool};
use colorprompt::{raster, srgb_to_lab, transfer, ColorStats, Error, Image, Region};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NotFound = 5,
    Internal = 6,
    Panic = 7,
}

/// Per-channel lαβ mean and standard deviation.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// An RGB image with channels in [0, 1].
pub struct CpImage(Image);

/// A set of trained prompters keyed by task id.
pub struct CpPool(PrompterPool);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(CpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::File { .. } | Error::Io(_) => CpStatus::Io,
            Error::Format(_) | Error::Corrupt(_) | Error::Version { .. } => CpStatus::Format,
            Error::Dimensions(_) | Error::InvalidArgument(_) | Error::NonFinite(_) | Error::Empty(_) => {
                CpStatus::InvalidArgument
            }
            _ => CpStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CpStatus::NullPointer, format!("{what} is null"))
}

/// Run `body`, record any failure and translate it into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> CpStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => CpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CpStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller guarantees `p` is null or valid for reads.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller guarantees `p` is null or valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and NUL-terminated per the caller's contract.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(CpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn boxed(img: Image) -> *mut CpImage {
    Box::into_raw(Box::new(CpImage(img)))
}

fn to_c(s: &ColorStats) -> CpStats {
    CpStats { mean: s.mean, std: s.std }
}

fn from_c(s: &CpStats) -> Result<ColorStats, Failure> {
    Ok(ColorStats::new(s.mean, s.std)?)
}

/// Message for the last failed call on this thread; empty if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Build an image from `height * width * 3` interleaved RGB values.
///
/// # Safety
/// `rgb` must point to `height * width * 3` readable doubles and `out_img` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn cp_image_new(height: usize, width: usize, rgb: *const f64, out_img: *mut *mut CpImage) -> CpStatus {
    guard(|| {
        let slot = unsafe { out(out_img, "out_img") }?;
        *slot = ptr::null_mut();
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Failure(CpStatus::InvalidArgument, "image size overflows".into()))?;
        // SAFETY: the caller guarantees `n` readable values.
        let values = unsafe { std::slice::from_raw_parts(rgb, n) };
        let px = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        *slot = boxed(Image::new(height, width, px)?);
        Ok(())
    })
}

/// Decode a PNG or binary PPM file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_img` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_image_read(path: *const c_char, out_img: *mut *mut CpImage) -> CpStatus {
    guard(|| {
        let slot = unsafe { out(out_img, "out_img") }?;
        *slot = ptr::null_mut();
        let path = unsafe { text(path, "path") }?;
        *slot = boxed(raster::read_image(Path::new(path))?);
        Ok(())
    })
}

/// Encode an image; the format follows the file extension.
///
/// # Safety
/// `img` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cp_image_write(img: *const CpImage, path: *const c_char) -> CpStatus {
    guard(|| {
        let img = unsafe { deref(img, "img") }?;
        let path = unsafe { text(path, "path") }?;
        raster::write_image(Path::new(path), &img.0)?;
        Ok(())
    })
}

/// # Safety
/// `img` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cp_image_size(img: *const CpImage, height: *mut usize, width: *mut usize) -> CpStatus {
    guard(|| {
        let img = unsafe { deref(img, "img") }?;
        *unsafe { out(height, "height") }? = img.0.height();
        *unsafe { out(width, "width") }? = img.0.width();
        Ok(())
    })
}

/// Copy interleaved RGB values into `dst`, which holds `len` doubles.
///
/// # Safety
/// `img` must be a live handle and `dst` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn cp_image_pixels(img: *const CpImage, dst: *mut f64, len: usize) -> CpStatus {
    guard(|| {
        let img = unsafe { deref(img, "img") }?;
        if dst.is_null() {
            return Err(null("dst"));
        }
        let need = img.0.pixels().len() * 3;
        if len < need {
            return Err(Failure(CpStatus::InvalidArgument, format!("buffer holds {len} values, need {need}")));
        }
        // SAFETY: checked non-null and large enough above.
        let dst = unsafe { std::slice::from_raw_parts_mut(dst, need) };
        for (d, p) in dst.chunks_exact_mut(3).zip(img.0.pixels()) {
            d.copy_from_slice(p);
        }
        Ok(())
    })
}

/// Release an image. Null is ignored.
///
/// # Safety
/// `img` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cp_image_free(img: *mut CpImage) {
    if !img.is_null() {
        // SAFETY: produced by Box::into_raw in this crate.
        drop(unsafe { Box::from_raw(img) });
    }
}

/// Full-frame lαβ statistics.
///
/// # Safety
/// `img` must be a live handle and `stats` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_image_stats(img: *const CpImage, stats: *mut CpStats) -> CpStatus {
    guard(|| {
        let img = unsafe { deref(img, "img") }?;
        let s = colorprompt::colorstats::image_stats(&srgb_to_lab(&img.0)?, Region::Full)?;
        *unsafe { out(stats, "stats") }? = to_c(&s);
        Ok(())
    })
}

/// Move an image's statistics onto `target`.
///
/// # Safety
/// `img` must be a live handle, `target` readable and `out_img` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_transfer(img: *const CpImage, target: *const CpStats, out_img: *mut *mut CpImage) -> CpStatus {
    guard(|| {
        let slot = unsafe { out(out_img, "out_img") }?;
        *slot = ptr::null_mut();
        let img = unsafe { deref(img, "img") }?;
        let target = from_c(unsafe { deref(target, "target") }?)?;
        *slot = boxed(transfer::transfer_to(&img.0, &target)?);
        Ok(())
    })
}

/// Load a prompter pool file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_pool` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_pool_load(path: *const c_char, out_pool: *mut *mut CpPool) -> CpStatus {
    guard(|| {
        let slot = unsafe { out(out_pool, "out_pool") }?;
        *slot = ptr::null_mut();
        let path = unsafe { text(path, "path") }?;
        *slot = Box::into_raw(Box::new(CpPool(PrompterPool::load(Path::new(path))?)));
        Ok(())
    })
}

/// Number of prompters in the pool; 0 for null.
///
/// # Safety
/// `pool` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cp_pool_len(pool: *const CpPool) -> usize {
    // SAFETY: null or live per the caller's contract.
    unsafe { pool.as_ref() }.map_or(0, |p| p.0.len())
}

/// Release a pool. Null is ignored.
///
/// # Safety
/// `pool` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cp_pool_free(pool: *mut CpPool) {
    if !pool.is_null() {
        // SAFETY: produced by Box::into_raw in this crate.
        drop(unsafe { Box::from_raw(pool) });
    }
}

fn prompter<'a>(pool: &'a CpPool, task: &str) -> Result<&'a colorprompt::prompter::PrompterNet, Failure> {
    pool.0
        .get(task)
        .ok_or_else(|| Failure(CpStatus::NotFound, format!("no prompter for task {task:?}")))
}

/// Statistics the named task's prompter predicts for `img`.
///
/// # Safety
/// `pool` and `img` must be live handles, `task` a NUL-terminated string and
/// `stats` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_pool_predict(
    pool: *const CpPool,
    task: *const c_char,
    img: *const CpImage,
    stats: *mut CpStats,
) -> CpStatus {
    guard(|| {
        let pool = unsafe { deref(pool, "pool") }?;
        let task = unsafe { text(task, "task") }?;
        let img = unsafe { deref(img, "img") }?;
        let s = prompter(pool, task)?.forward(&img.0)?;
        *unsafe { out(stats, "stats") }? = to_c(&s);
        Ok(())
    })
}

/// Transfer `img` to the statistics the named task's prompter predicts.
///
/// # Safety
/// `pool` and `img` must be live handles, `task` a NUL-terminated string and
/// `out_img` writable.
#[no_mangle]
pub unsafe extern "C" fn cp_recover(
    pool: *const CpPool,
    task: *const c_char,
    img: *const CpImage,
    out_img: *mut *mut CpImage,
) -> CpStatus {
    guard(|| {
        let slot = unsafe { out(out_img, "out_img") }?;
        *slot = ptr::null_mut();
        let pool = unsafe { deref(pool, "pool") }?;
        let task = unsafe { text(task, "task") }?;
        let img = unsafe { deref(img, "img") }?;
        *slot = boxed(prompter_recover(prompter(pool, task)?, &img.0)?);
        Ok(())
    })
}
