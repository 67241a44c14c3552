//! Small shared text/binary format helpers.
//!
//! The raw float container ("FQA1") is little-endian: the 4-byte magic `FQA1`, `u32`
//! width, `u32` height, then `width * height` `f32` values in row-major order.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"FQA1";

/// Writes an FQA1 block to `w`.
pub fn write_raw<W: Write>(w: &mut W, width: usize, height: usize, values: &[f64]) -> std::io::Result<()> {
    assert_eq!(values.len(), width * height);
    let mut buf = Vec::with_capacity(12 + 4 * values.len());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one FQA1 block from `r`, returning `(width, height, values)`.
pub fn read_raw<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<f64>)> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|e| Error::Format(format!("truncated FQA1 header: {e}")))?;
    if &head[..4] != RAW_MAGIC {
        return Err(Error::Format("missing FQA1 magic".into()));
    }
    let width = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("FQA1 dimensions overflow".into()))?;
    let mut body = vec![0u8; n * 4];
    r.read_exact(&mut body)
        .map_err(|e| Error::Format(format!("truncated FQA1 body: {e}")))?;
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((width, height, values))
}

/// Formats `x` with nine significant digits, `%.9g` style.
pub fn g9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    // rounding can bump the exponent (9.9999999996 -> 10.0000000)
    let sci = format!("{:.8e}", x);
    let exp = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse::<i32>().ok())
        .unwrap_or(exp);
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        trim_zeros(&s)
    } else {
        let (mant, e) = sci.split_once('e').unwrap();
        let e: i32 = e.parse().unwrap();
        format!("{}e{}{:02}", trim_zeros(mant), if e < 0 { '-' } else { '+' }, e.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}
