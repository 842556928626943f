//! C ABI: two calls over contiguous caller-owned buffers.
//!
//! Status codes: 0 ok, 1 invalid arguments/tables, 2 output capacity
//! exceeded, 3 symbol interval invalid, 4 coded stream exhausted. On
//! failure a NUL-terminated message is written into the caller's error
//! buffer (truncated to its capacity).

use std::os::raw::c_char;
use std::slice;

use crate::{CoderError, Decoder, Encoder, FREQ_TOTAL};

const STATUS_OK: i32 = 0;
const STATUS_INVALID: i32 = 1;
const STATUS_CAPACITY: i32 = 2;
const STATUS_SYMBOL: i32 = 3;
const STATUS_EXHAUSTED: i32 = 4;

unsafe fn write_error(err: *mut c_char, err_cap: usize, message: &str) {
    if err.is_null() || err_cap == 0 {
        return;
    }
    let bytes = message.as_bytes();
    let n = bytes.len().min(err_cap - 1);
    let dst = slice::from_raw_parts_mut(err as *mut u8, err_cap);
    dst[..n].copy_from_slice(&bytes[..n]);
    dst[n] = 0;
}

/// Encode `n` symbols given per-symbol cumulative intervals.
///
/// # Safety
/// All pointers must reference caller-owned buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn lrc_rc_encode(
    cum_lo: *const u32,
    cum_hi: *const u32,
    n: usize,
    out: *mut u8,
    capacity: usize,
    written: *mut usize,
    err: *mut c_char,
    err_cap: usize,
) -> i32 {
    if (cum_lo.is_null() || cum_hi.is_null()) && n > 0 {
        write_error(err, err_cap, "null interval buffers");
        return STATUS_INVALID;
    }
    if out.is_null() && capacity > 0 || written.is_null() {
        write_error(err, err_cap, "null output buffers");
        return STATUS_INVALID;
    }
    let lows = if n > 0 { slice::from_raw_parts(cum_lo, n) } else { &[] };
    let highs = if n > 0 { slice::from_raw_parts(cum_hi, n) } else { &[] };
    let mut enc = Encoder::new();
    for i in 0..n {
        if let Err(e) = enc.encode(lows[i], highs[i]) {
            write_error(err, err_cap, &format!("symbol {i}: {e:?}"));
            return STATUS_SYMBOL;
        }
    }
    let data = enc.finish();
    if data.len() > capacity {
        write_error(
            err,
            err_cap,
            &format!("need {} bytes, capacity {}", data.len(), capacity),
        );
        return STATUS_CAPACITY;
    }
    slice::from_raw_parts_mut(out, capacity)[..data.len()].copy_from_slice(&data);
    *written = data.len();
    STATUS_OK
}

/// Decode `n` symbols; tables are concatenated CDFs indexed by
/// `table_offsets` (length `n_tables + 1`) and selected per symbol through
/// `table_ids`. Decoded bin indices (not shifted by any k_min) land in
/// `out_symbols`.
///
/// # Safety
/// All pointers must reference caller-owned buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn lrc_rc_decode(
    payload: *const u8,
    payload_len: usize,
    cdf_concat: *const u32,
    table_offsets: *const u32,
    n_tables: usize,
    table_ids: *const u32,
    n: usize,
    out_symbols: *mut u32,
    err: *mut c_char,
    err_cap: usize,
) -> i32 {
    if payload.is_null() && payload_len > 0
        || cdf_concat.is_null() && n_tables > 0
        || table_offsets.is_null()
        || (table_ids.is_null() || out_symbols.is_null()) && n > 0
    {
        write_error(err, err_cap, "null buffers");
        return STATUS_INVALID;
    }
    let data = if payload_len > 0 {
        slice::from_raw_parts(payload, payload_len)
    } else {
        &[]
    };
    let offsets = slice::from_raw_parts(table_offsets, n_tables + 1);
    let total: usize = offsets[n_tables] as usize;
    let concat = if total > 0 {
        slice::from_raw_parts(cdf_concat, total)
    } else {
        &[]
    };
    for t in 0..n_tables {
        let (a, b) = (offsets[t] as usize, offsets[t + 1] as usize);
        if b <= a + 1 || b > total {
            write_error(err, err_cap, &format!("table {t} malformed"));
            return STATUS_INVALID;
        }
        if concat[a] != 0 || concat[b - 1] != FREQ_TOTAL {
            write_error(err, err_cap, &format!("table {t} endpoints invalid"));
            return STATUS_INVALID;
        }
    }
    let ids = if n > 0 { slice::from_raw_parts(table_ids, n) } else { &[] };
    let out = if n > 0 {
        slice::from_raw_parts_mut(out_symbols, n)
    } else {
        &mut []
    };
    let mut dec = match Decoder::new(data) {
        Ok(d) => d,
        Err(CoderError::Exhausted { position }) => {
            write_error(err, err_cap, &format!("stream exhausted at byte {position}"));
            return STATUS_EXHAUSTED;
        }
        Err(e) => {
            write_error(err, err_cap, &format!("{e:?}"));
            return STATUS_INVALID;
        }
    };
    for i in 0..n {
        let t = ids[i] as usize;
        if t >= n_tables {
            write_error(err, err_cap, &format!("symbol {i}: table id {t} out of range"));
            return STATUS_INVALID;
        }
        let cdf = &concat[offsets[t] as usize..offsets[t + 1] as usize];
        match dec.decode(cdf) {
            Ok(sym) => out[i] = sym as u32,
            Err(CoderError::Exhausted { position }) => {
                write_error(
                    err,
                    err_cap,
                    &format!("stream exhausted at byte {position} (symbol {i})"),
                );
                return STATUS_EXHAUSTED;
            }
            Err(e) => {
                write_error(err, err_cap, &format!("symbol {i}: {e:?}"));
                return STATUS_INVALID;
            }
        }
    }
    STATUS_OK
}
