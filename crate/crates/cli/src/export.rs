//! Depth map files: 16-bit binary PGM and raw little-endian float32.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use depthprior::{Error, FormatError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthFormat {
    Pgm16,
    Raw32,
}

impl DepthFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DepthFormat::Pgm16 => "pgm",
            DepthFormat::Raw32 => "raw",
        }
    }
}

impl FromStr for DepthFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pgm16" => Ok(DepthFormat::Pgm16),
            "raw32" => Ok(DepthFormat::Raw32),
            _ => Err(format!("unknown depth format {s:?} (expected pgm16 or raw32)")),
        }
    }
}

impl fmt::Display for DepthFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepthFormat::Pgm16 => "pgm16",
            DepthFormat::Raw32 => "raw32",
        })
    }
}

/// Millimetre units by default.
pub const DEFAULT_METERS_PER_UNIT: f64 = 1e-3;

fn check_dims(values: &[f32], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width || height == 0 || width == 0 {
        return Err(Error::contract(
            "export_depth",
            format!("{} values for a {height}x{width} map", values.len()),
        ));
    }
    Ok(())
}

/// Binary `P5` image, maxval 65535, big-endian samples of
/// `round(value / meters_per_unit)`. Values outside the 16-bit range are an
/// error unless `saturate` is set, in which case they clip.
pub fn encode_pgm16(
    values: &[f32],
    height: usize,
    width: usize,
    meters_per_unit: f64,
    saturate: bool,
) -> Result<Vec<u8>> {
    check_dims(values, height, width)?;
    if !(meters_per_unit > 0.0 && meters_per_unit.is_finite()) {
        return Err(Error::config(format!(
            "meters_per_unit must be positive, got {meters_per_unit}"
        )));
    }
    let mut out = format!("P5\n# meters_per_unit {meters_per_unit}\n{width} {height}\n65535\n").into_bytes();
    for (i, &v) in values.iter().enumerate() {
        let q = (v as f64 / meters_per_unit).round();
        let q = if (0.0..=65535.0).contains(&q) {
            q
        } else if saturate && !q.is_nan() {
            q.clamp(0.0, 65535.0)
        } else {
            return Err(Error::contract(
                "export_depth",
                format!(
                    "value {v} at pixel ({}, {}) does not fit 16 bits at {meters_per_unit} m per unit",
                    i / width,
                    i % width
                ),
            ));
        };
        out.extend_from_slice(&(q as u16).to_be_bytes());
    }
    Ok(out)
}

/// `u32 H, u32 W`, then `f32` row-major, all little-endian.
pub fn encode_raw32(values: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    check_dims(values, height, width)?;
    let mut out = Vec::with_capacity(8 + 4 * values.len());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Returns `(height, width, values)`.
pub fn decode_raw32(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated("raw32 dims".into()).into());
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * h * w {
        return Err(FormatError::Malformed(format!("raw32 {h}x{w} map with {} data bytes", body.len())).into());
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, values))
}

/// Writes a depth map in `format`.
pub fn export_depth(
    values: &[f32],
    height: usize,
    width: usize,
    path: impl AsRef<Path>,
    format: DepthFormat,
    meters_per_unit: f64,
) -> Result<()> {
    if values.iter().any(|v| v.is_nan() || *v <= 0.0) {
        return Err(Error::contract("export_depth", "depth must be positive"));
    }
    let bytes = match format {
        DepthFormat::Pgm16 => encode_pgm16(values, height, width, meters_per_unit, false)?,
        DepthFormat::Raw32 => encode_raw32(values, height, width)?,
    };
    fs::write(path, bytes)?;
    Ok(())
}
