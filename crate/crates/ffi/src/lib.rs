//! C interface to the hybrid auction mechanisms.
//!
//! Objects cross the boundary as opaque handles created by `ha_*_new` or
//! `ha_model_load` and released with the matching `ha_*_free`. Every
//! fallible function returns an [`HaStatus`]; on failure a description is
//! available from [`ha_last_error`] on the same thread.
//!
//! Bid and allocation layouts follow the library: agents are ordered
//! stores first, then brands, and allocations are row-major
//! `agents × slots` arrays of slot probabilities (solo store rows already
//! include the quality factor).

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hybrid_auction::checkpoint::read_checkpoint;
use hybrid_auction::model::{AuctionInstance, AuctionSetting, BidProfile, MechanismOutcome};
use hybrid_auction::network::{mechanism_forward, NetworkParams};
use hybrid_auction::vcg::vcg_mechanism;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HaStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Arguments were inconsistent or out of range.
    InvalidArgument = 2,
    /// A file could not be read or was malformed.
    Io = 3,
    /// The computation produced a non-finite value.
    Numerical = 4,
    /// An internal panic was caught at the boundary.
    Internal = 5,
}

/// Number of slots, bundle cap and agent counts.
pub struct HaSetting(AuctionSetting);

/// Quality factors and store-brand adjacency of one auction.
pub struct HaInstance(AuctionInstance);

/// A trained learned mechanism together with the setting it was trained for.
pub struct HaModel {
    setting: AuctionSetting,
    params: NetworkParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn fail(status: HaStatus, message: impl std::fmt::Display) -> HaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.to_string().into_bytes());
    status
}

fn guard(f: impl FnOnce() -> HaStatus) -> HaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == HaStatus::Ok {
                LAST_ERROR.with(|e| e.borrow_mut().clear());
            }
            status
        }
        Err(_) => fail(HaStatus::Internal, "internal panic"),
    }
}

/// Reads a caller-provided array, treating `(null, 0)` as empty.
unsafe fn slice<'a, T>(data: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if data.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(data, len))
    }
}

/// Copies the last error message of this thread into `buffer` (always
/// NUL-terminated when `capacity > 0`) and returns the full message length
/// in bytes, excluding the terminator. Returns 0 when there is no error.
///
/// # Safety
/// `buffer` must be null or point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ha_last_error(buffer: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buffer.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buffer.cast::<u8>(), n);
            *buffer.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a setting with `stores` stores, `brands` brands, `slots` slots
/// whose click-through rates are `ctrs[0..slots]` (non-increasing, in
/// (0, 1)), and at most `cap` bundle slots.
///
/// # Safety
/// `ctrs` must point to `slots` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ha_setting_new(
    stores: usize,
    brands: usize,
    cap: usize,
    ctrs: *const f64,
    slots: usize,
    out: *mut *mut HaSetting,
) -> HaStatus {
    guard(|| {
        let (Some(ctrs), false) = (slice(ctrs, slots), out.is_null()) else {
            return fail(HaStatus::NullPointer, "ctrs or out is null");
        };
        match AuctionSetting::new(stores, brands, cap, ctrs.to_vec()) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(HaSetting(s)));
                HaStatus::Ok
            }
            Err(e) => fail(HaStatus::InvalidArgument, e),
        }
    })
}

/// Releases a setting. Null is ignored.
///
/// # Safety
/// `setting` must come from [`ha_setting_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ha_setting_free(setting: *mut HaSetting) {
    if !setting.is_null() {
        drop(Box::from_raw(setting));
    }
}

/// Number of agents (stores plus brands) of a setting, or 0 for null.
///
/// # Safety
/// `setting` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ha_setting_agents(setting: *const HaSetting) -> usize {
    setting.as_ref().map_or(0, |s| s.0.agents())
}

/// Number of slots of a setting, or 0 for null.
///
/// # Safety
/// `setting` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ha_setting_slots(setting: *const HaSetting) -> usize {
    setting.as_ref().map_or(0, |s| s.0.slots())
}

/// Creates an auction instance from `stores` quality factors and a
/// row-major `stores × brands` adjacency matrix (non-zero = linked).
///
/// # Safety
/// `alphas` must point to `stores` doubles, `adjacency` to
/// `stores * brands` bytes; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ha_instance_new(
    alphas: *const f64,
    stores: usize,
    adjacency: *const u8,
    brands: usize,
    out: *mut *mut HaInstance,
) -> HaStatus {
    guard(|| {
        let Some(cells) = stores.checked_mul(brands) else {
            return fail(HaStatus::InvalidArgument, "adjacency size overflows");
        };
        let (Some(alphas), Some(adj), false) = (slice(alphas, stores), slice(adjacency, cells), out.is_null()) else {
            return fail(HaStatus::NullPointer, "alphas, adjacency or out is null");
        };
        let rows = (0..stores).map(|i| adj[i * brands..(i + 1) * brands].iter().map(|&c| c != 0).collect()).collect();
        match AuctionInstance::new(alphas.to_vec(), rows) {
            Ok(inst) => {
                *out = Box::into_raw(Box::new(HaInstance(inst)));
                HaStatus::Ok
            }
            Err(e) => fail(HaStatus::InvalidArgument, e),
        }
    })
}

/// Releases an instance. Null is ignored.
///
/// # Safety
/// `instance` must come from [`ha_instance_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ha_instance_free(instance: *mut HaInstance) {
    if !instance.is_null() {
        drop(Box::from_raw(instance));
    }
}

/// Writes an outcome into caller buffers after checking their sizes.
unsafe fn emit(
    result: Result<MechanismOutcome, String>,
    agents: usize,
    slots: usize,
    allocation: *mut f64,
    allocation_len: usize,
    payments: *mut f64,
    payments_len: usize,
) -> HaStatus {
    if allocation.is_null() || payments.is_null() {
        return fail(HaStatus::NullPointer, "output buffer is null");
    }
    if allocation_len != agents * slots || payments_len != agents {
        return fail(
            HaStatus::InvalidArgument,
            format!("buffers hold {allocation_len} and {payments_len} values; need {} and {agents}", agents * slots),
        );
    }
    let outcome = match result {
        Ok(o) => o,
        Err(e) => return fail(HaStatus::InvalidArgument, e),
    };
    if outcome.payments.iter().chain(outcome.allocation.iter()).any(|v| !v.is_finite()) {
        return fail(HaStatus::Numerical, "mechanism produced a non-finite value");
    }
    for (dst, src) in std::slice::from_raw_parts_mut(allocation, allocation_len).iter_mut().zip(outcome.allocation.iter()) {
        *dst = *src;
    }
    std::slice::from_raw_parts_mut(payments, payments_len).copy_from_slice(&outcome.payments);
    HaStatus::Ok
}

/// Runs the VCG mechanism on `bids` (stores then brands) and writes the
/// `agents × slots` allocation and per-agent payments.
///
/// # Safety
/// Handles must be live; `bids` must point to `bids_len` doubles and the
/// output buffers to the stated number of writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ha_vcg_run(
    setting: *const HaSetting,
    instance: *const HaInstance,
    bids: *const f64,
    bids_len: usize,
    allocation: *mut f64,
    allocation_len: usize,
    payments: *mut f64,
    payments_len: usize,
) -> HaStatus {
    guard(|| {
        let (Some(setting), Some(instance), Some(bids)) = (setting.as_ref(), instance.as_ref(), slice(bids, bids_len)) else {
            return fail(HaStatus::NullPointer, "setting, instance or bids is null");
        };
        let s = &setting.0;
        let result = BidProfile::from_agents(bids, s.stores())
            .and_then(|b| vcg_mechanism(s, &instance.0, &b))
            .map(|(_, o)| o)
            .map_err(|e| e.to_string());
        emit(result, s.agents(), s.slots(), allocation, allocation_len, payments, payments_len)
    })
}

/// Loads a trained model from a checkpoint file written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ha_model_load(path: *const c_char, out: *mut *mut HaModel) -> HaStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(HaStatus::NullPointer, "path or out is null");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(HaStatus::InvalidArgument, "path is not valid UTF-8");
        };
        let ck = match File::open(path).map_err(|e| e.to_string()).and_then(|mut f| read_checkpoint(&mut f).map_err(|e| e.to_string())) {
            Ok(ck) => ck,
            Err(e) => return fail(HaStatus::Io, format!("{path}: {e}")),
        };
        *out = Box::into_raw(Box::new(HaModel { setting: ck.setting, params: ck.state.params }));
        HaStatus::Ok
    })
}

/// Setting a model was trained for, as a new handle owned by the caller.
///
/// # Safety
/// `model` must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ha_model_setting(model: *const HaModel, out: *mut *mut HaSetting) -> HaStatus {
    guard(|| {
        let (Some(model), false) = (model.as_ref(), out.is_null()) else {
            return fail(HaStatus::NullPointer, "model or out is null");
        };
        *out = Box::into_raw(Box::new(HaSetting(model.setting.clone())));
        HaStatus::Ok
    })
}

/// Runs the learned mechanism on `bids` (stores then brands).
///
/// # Safety
/// As for [`ha_vcg_run`].
#[no_mangle]
pub unsafe extern "C" fn ha_model_run(
    model: *const HaModel,
    instance: *const HaInstance,
    bids: *const f64,
    bids_len: usize,
    allocation: *mut f64,
    allocation_len: usize,
    payments: *mut f64,
    payments_len: usize,
) -> HaStatus {
    guard(|| {
        let (Some(model), Some(instance), Some(bids)) = (model.as_ref(), instance.as_ref(), slice(bids, bids_len)) else {
            return fail(HaStatus::NullPointer, "model, instance or bids is null");
        };
        let s = &model.setting;
        let result = BidProfile::from_agents(bids, s.stores())
            .map_err(|e| e.to_string())
            .and_then(|b| mechanism_forward(&model.params, s, &instance.0, &b).map_err(|e| e.to_string()));
        emit(result, s.agents(), s.slots(), allocation, allocation_len, payments, payments_len)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`ha_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ha_model_free(model: *mut HaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
