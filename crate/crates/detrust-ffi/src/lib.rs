//! C interface to the federated-learning engine.
//!
//! Call conventions, in order of importance:
//!
//! - Every fallible function returns a [`DetrustStatus`]; out-pointers are
//!   written only on success.
//! - Strings handed back through `char **` are NUL-terminated, heap-owned,
//!   and must be released with [`detrust_string_free`]. Structured results
//!   (group parameters, matrix reports, run reports) travel as JSON.
//! - Group handles are opaque; create them with the `detrust_group_*`
//!   constructors and release them with [`detrust_group_free`].
//! - After any non-OK status, [`detrust_last_error`] yields a human-readable
//!   message for the most recent failure on the calling thread.
//!
//! Panics never unwind across the boundary: they are caught and surfaced as
//! `DETRUST_STATUS_INTERNAL_ERROR`.
//!
//! Every function is safe to call with null handles and null strings (it
//! reports `NULL_ARGUMENT` or no-ops as documented); the caller is
//! responsible for the usual C preconditions that cannot be checked here:
//! buffer pointers valid for their stated lengths, strings NUL-terminated,
//! and no use of a handle or string after freeing it.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use detrust::config::{RunConfig, RunMode};
use detrust::encoding::{decode, encode, EncodingConfig};
use detrust::fl::{run_encrypted, AggregatorHooks};
use detrust::group::GroupParams;
use detrust::participation::{
    check_batch_privacy, disaggregation_rank_test, party_inspect, ParticipationMatrix,
    TrustConfig, Verdict,
};
use detrust::transport;
use detrust::PartyId;

/// Result of every fallible call in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetrustStatus {
    /// The call succeeded and all out-pointers were written.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A JSON document failed to parse or had the wrong shape.
    ParseError = 3,
    /// Arguments parsed but violate a documented constraint.
    InvalidInput = 4,
    /// Group generation or validation failed.
    CryptoError = 5,
    /// The federation run itself failed.
    RunFailed = 6,
    /// A panic or other unexpected condition inside the library.
    InternalError = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).ok();
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().take());
}

fn fail(status: DetrustStatus, msg: impl std::fmt::Display) -> DetrustStatus {
    set_error(msg.to_string());
    status
}

/// Runs an FFI body, converting success to OK and panics to internal errors.
fn ffi_call<F>(f: F) -> DetrustStatus
where
    F: FnOnce() -> Result<(), DetrustStatus>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            DetrustStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unexpected internal panic".to_string());
            set_error(msg);
            DetrustStatus::InternalError
        }
    }
}

unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, DetrustStatus> {
    if ptr.is_null() {
        return Err(fail(DetrustStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(DetrustStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn export_string(s: String, out: *mut *mut c_char) -> Result<(), DetrustStatus> {
    let c = CString::new(s.replace('\0', " "))
        .map_err(|e| fail(DetrustStatus::InternalError, e))?;
    *out = c.into_raw();
    Ok(())
}

/// Copies the message for the calling thread's most recent failure into
/// `buf` (NUL-terminated, truncated to `cap` bytes) and returns the full
/// length including the terminator. Returns 0 when the last call succeeded.
/// Pass a null `buf` or zero `cap` to query the required size.
#[no_mangle]
pub unsafe extern "C" fn detrust_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(msg) = slot.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Releases a string returned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn detrust_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opaque handle to a validated safe-prime group (p = 2q + 1 with a
/// generator of the order-q subgroup).
pub struct DetrustGroup {
    inner: GroupParams,
}

unsafe fn read_group<'a>(
    ptr: *const DetrustGroup,
    what: &str,
) -> Result<&'a GroupParams, DetrustStatus> {
    if ptr.is_null() {
        return Err(fail(DetrustStatus::NullArgument, format!("{what} is null")));
    }
    Ok(&(*ptr).inner)
}

/// Generates a fresh safe-prime group of `lambda` bits. `seed` may be null
/// for OS randomness or point at a u64 for a deterministic search. Bit
/// lengths below the secure floor are refused unless `allow_insecure` is
/// set; that opt-in exists for tests and simulations only.
#[no_mangle]
pub unsafe extern "C" fn detrust_group_generate(
    lambda: u32,
    seed: *const u64,
    allow_insecure: bool,
    out_group: *mut *mut DetrustGroup,
) -> DetrustStatus {
    ffi_call(|| {
        if out_group.is_null() {
            return Err(fail(DetrustStatus::NullArgument, "out_group is null"));
        }
        let seed = if seed.is_null() { None } else { Some(*seed) };
        let params = if allow_insecure {
            GroupParams::generate_insecure(lambda, seed)
        } else {
            GroupParams::generate(lambda, seed)
        }
        .map_err(|e| fail(DetrustStatus::CryptoError, e))?;
        *out_group = Box::into_raw(Box::new(DetrustGroup { inner: params }));
        Ok(())
    })
}

/// Returns the 2048-bit MODP group from RFC 3526 with generator 2. No
/// search cost; this is the recommended production group.
#[no_mangle]
pub unsafe extern "C" fn detrust_group_standard_2048(
    out_group: *mut *mut DetrustGroup,
) -> DetrustStatus {
    ffi_call(|| {
        if out_group.is_null() {
            return Err(fail(DetrustStatus::NullArgument, "out_group is null"));
        }
        *out_group = Box::into_raw(Box::new(DetrustGroup {
            inner: GroupParams::rfc3526_2048(),
        }));
        Ok(())
    })
}

/// Serializes a group as JSON with decimal-string parameters, suitable for
/// `detrust_group_from_json` and for non-C consumers.
#[no_mangle]
pub unsafe extern "C" fn detrust_group_to_json(
    group: *const DetrustGroup,
    out_json: *mut *mut c_char,
) -> DetrustStatus {
    ffi_call(|| {
        let params = read_group(group, "group")?;
        if out_json.is_null() {
            return Err(fail(DetrustStatus::NullArgument, "out_json is null"));
        }
        let text = serde_json::to_string_pretty(params)
            .map_err(|e| fail(DetrustStatus::InternalError, e))?;
        export_string(text, out_json)
    })
}

/// Parses a group from JSON and re-checks every structural invariant
/// (primality of p and q, p = 2q + 1, generator order), so material read
/// off the wire cannot smuggle in a weak group.
#[no_mangle]
pub unsafe extern "C" fn detrust_group_from_json(
    json: *const c_char,
    out_group: *mut *mut DetrustGroup,
) -> DetrustStatus {
    ffi_call(|| {
        let text = read_str(json, "json")?;
        if out_group.is_null() {
            return Err(fail(DetrustStatus::NullArgument, "out_group is null"));
        }
        let params: GroupParams =
            serde_json::from_str(text).map_err(|e| fail(DetrustStatus::ParseError, e))?;
        params
            .validate()
            .map_err(|e| fail(DetrustStatus::CryptoError, e))?;
        *out_group = Box::into_raw(Box::new(DetrustGroup { inner: params }));
        Ok(())
    })
}

/// Returns the group's security parameter in bits, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn detrust_group_bits(group: *const DetrustGroup) -> u32 {
    if group.is_null() {
        0
    } else {
        (*group).inner.lambda
    }
}

/// Releases a group handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn detrust_group_free(group: *mut DetrustGroup) {
    if !group.is_null() {
        drop(Box::from_raw(group));
    }
}

const MAX_PRECISION: u32 = 18;

fn payload_encoding(precision: u32, clip_bound: f64) -> Result<EncodingConfig, DetrustStatus> {
    if precision > MAX_PRECISION {
        return Err(fail(
            DetrustStatus::InvalidInput,
            format!("precision {precision} exceeds the maximum of {MAX_PRECISION}"),
        ));
    }
    if !clip_bound.is_finite() || clip_bound <= 0.0 {
        return Err(fail(
            DetrustStatus::InvalidInput,
            format!("clip bound must be finite and positive, got {clip_bound}"),
        ));
    }
    Ok(EncodingConfig {
        precision,
        weight_precision: 0,
        clip_bound,
    })
}

/// Clips `values` to `[-clip_bound, clip_bound]`, scales by 10^precision,
/// and rounds half away from zero into `out_encoded` (same length as
/// `values`). If `out_clipped` is non-null it receives the number of
/// entries that hit the clip range. Every input must be finite.
#[no_mangle]
pub unsafe extern "C" fn detrust_encode(
    precision: u32,
    clip_bound: f64,
    values: *const f64,
    len: usize,
    out_encoded: *mut i64,
    out_clipped: *mut usize,
) -> DetrustStatus {
    ffi_call(|| {
        if values.is_null() || out_encoded.is_null() {
            return Err(fail(
                DetrustStatus::NullArgument,
                "values and out_encoded must be non-null",
            ));
        }
        let cfg = payload_encoding(precision, clip_bound)?;
        let input = std::slice::from_raw_parts(values, len);
        if let Some(i) = input.iter().position(|v| !v.is_finite()) {
            return Err(fail(
                DetrustStatus::InvalidInput,
                format!("value at index {i} is not finite"),
            ));
        }
        let encoded = encode(&cfg, input);
        std::ptr::copy_nonoverlapping(encoded.values.as_ptr(), out_encoded, len);
        if !out_clipped.is_null() {
            *out_clipped = encoded.clipped;
        }
        Ok(())
    })
}

/// Maps aggregated integers back to floats, dividing out both the payload
/// scale 10^precision and the fusion-weight scale. `total_weight_scale` is
/// the divisor announced with the fused result (1 for a plain sum, the
/// support size for an average) and must be nonzero.
#[no_mangle]
pub unsafe extern "C" fn detrust_decode(
    precision: u32,
    total_weight_scale: u64,
    values: *const i64,
    len: usize,
    out_decoded: *mut f64,
) -> DetrustStatus {
    ffi_call(|| {
        if values.is_null() || out_decoded.is_null() {
            return Err(fail(
                DetrustStatus::NullArgument,
                "values and out_decoded must be non-null",
            ));
        }
        if total_weight_scale == 0 {
            return Err(fail(
                DetrustStatus::InvalidInput,
                "total_weight_scale must be nonzero",
            ));
        }
        let cfg = payload_encoding(precision, 1.0)?;
        let input = std::slice::from_raw_parts(values, len);
        let decoded = decode(&cfg, input, total_weight_scale);
        std::ptr::copy_nonoverlapping(decoded.as_ptr(), out_decoded, len);
        Ok(())
    })
}

/// Inspects a participation matrix (JSON: `{"m", "n", "rows"}` with rows of
/// `[numerator, denominator]` pairs) against trust parameters and writes a
/// JSON report. `local_thresholds` carries one entry per party, or a single
/// entry shared by all; `thresholds_len` is its length.
///
/// The report covers: per-round support against the global threshold, batch
/// privacy at `min_batch_size`, which parties a rank test would expose to
/// aggregate differencing, the verdict each party's own inspection returns,
/// and a final `safe` flag that requires every check to pass.
#[no_mangle]
pub unsafe extern "C" fn detrust_matrix_report(
    matrix_json: *const c_char,
    local_thresholds: *const u32,
    thresholds_len: usize,
    min_batch_size: u32,
    out_json: *mut *mut c_char,
) -> DetrustStatus {
    ffi_call(|| {
        let text = read_str(matrix_json, "matrix_json")?;
        if local_thresholds.is_null() || thresholds_len == 0 {
            return Err(fail(
                DetrustStatus::NullArgument,
                "local_thresholds must be a non-empty array",
            ));
        }
        if out_json.is_null() {
            return Err(fail(DetrustStatus::NullArgument, "out_json is null"));
        }
        let matrix: ParticipationMatrix =
            serde_json::from_str(text).map_err(|e| fail(DetrustStatus::ParseError, e))?;
        let n = matrix.parties();
        let raw = std::slice::from_raw_parts(local_thresholds, thresholds_len);
        let expanded = if thresholds_len == 1 {
            vec![raw[0]; n]
        } else if thresholds_len == n {
            raw.to_vec()
        } else {
            return Err(fail(
                DetrustStatus::InvalidInput,
                format!("{thresholds_len} thresholds for {n} parties; pass one per party or a single shared value"),
            ));
        };
        let trust = TrustConfig::new(expanded, min_batch_size);
        trust
            .validate()
            .map_err(|e| fail(DetrustStatus::InvalidInput, e))?;

        let support_ok = (0..matrix.rounds())
            .all(|i| matrix.support(i).len() >= trust.global_threshold as usize);
        let bp_ok = check_batch_privacy(&matrix, trust.min_batch_size);
        let exposed = disaggregation_rank_test(&matrix);
        let mut verdicts = BTreeMap::new();
        let mut all_accept = true;
        for i in 0..n {
            let p = PartyId::from_index(i);
            let own = matrix.column(p);
            let verdict = party_inspect(&matrix, p, &trust, &own);
            if !matches!(verdict, Verdict::Accept) {
                all_accept = false;
            }
            verdicts.insert(p.0, verdict.kind());
        }
        let safe = support_ok && bp_ok && exposed.is_empty() && all_accept;
        let doc = serde_json::json!({
            "rounds": matrix.rounds(),
            "parties": n,
            "global_threshold": trust.global_threshold,
            "min_batch_size": trust.min_batch_size,
            "round_support_ok": support_ok,
            "batch_privacy_ok": bp_ok,
            "rank_test_exposes": exposed,
            "verdicts": verdicts,
            "safe": safe,
        });
        let text =
            serde_json::to_string_pretty(&doc).map_err(|e| fail(DetrustStatus::InternalError, e))?;
        export_string(text, out_json)
    })
}

/// Total messages an encrypted federation exchanges over `rounds` training
/// rounds with `parties` participants: one registration round trip per
/// party, one key-material deposit per party, one consensus announcement,
/// and one ciphertext round trip per party per round.
#[no_mangle]
pub extern "C" fn detrust_expected_interactions(rounds: u64, parties: u64) -> u64 {
    transport::expected_interactions(rounds, parties)
}

/// Message total for plaintext federated averaging over the same schedule.
#[no_mangle]
pub extern "C" fn detrust_general_fl_interactions(rounds: u64, parties: u64) -> u64 {
    transport::general_fl_interactions(rounds, parties)
}

/// Message total for the hybrid scheme that adds a per-round key-request
/// round trip to a third party.
#[no_mangle]
pub extern "C" fn detrust_hybrid_alpha_interactions(rounds: u64, parties: u64) -> u64 {
    transport::hybrid_alpha_interactions(rounds, parties)
}

/// Writes the default run configuration as JSON. Every field in the
/// document may be edited and fed back to `detrust_run_simulation`; omitted
/// fields keep these defaults.
#[no_mangle]
pub unsafe extern "C" fn detrust_default_config_json(out_json: *mut *mut c_char) -> DetrustStatus {
    ffi_call(|| {
        if out_json.is_null() {
            return Err(fail(DetrustStatus::NullArgument, "out_json is null"));
        }
        let text = serde_json::to_string_pretty(&RunConfig::default())
            .map_err(|e| fail(DetrustStatus::InternalError, e))?;
        export_string(text, out_json)
    })
}

/// Runs a full encrypted federation in-process from a JSON configuration
/// (any transport setting in the document is overridden) and writes the
/// aggregator-observable report as JSON: outcome, final model and accuracy,
/// per-round metrics, interaction meter, negotiated matrix, and audit
/// records. A run that negotiates or trains to a non-completed outcome
/// still returns OK with that outcome in the report; `RUN_FAILED` means the
/// engine itself could not proceed.
#[no_mangle]
pub unsafe extern "C" fn detrust_run_simulation(
    config_json: *const c_char,
    out_report_json: *mut *mut c_char,
) -> DetrustStatus {
    ffi_call(|| {
        let text = read_str(config_json, "config_json")?;
        if out_report_json.is_null() {
            return Err(fail(DetrustStatus::NullArgument, "out_report_json is null"));
        }
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| fail(DetrustStatus::ParseError, e))?;
        cfg.mode = RunMode::Sim;
        cfg.validate()
            .map_err(|e| fail(DetrustStatus::InvalidInput, e))?;
        let output = run_encrypted(&cfg, AggregatorHooks::default())
            .map_err(|e| fail(DetrustStatus::RunFailed, e))?;
        export_string(output.aggregator_view_json(), out_report_json)
    })
}
