use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::Volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Z,
    Y,
    X,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Z, Axis::Y, Axis::X];

    pub fn index(self) -> usize {
        match self {
            Axis::Z => 0,
            Axis::Y => 1,
            Axis::X => 2,
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(Axis::Z),
            "y" => Ok(Axis::Y),
            "x" => Ok(Axis::X),
            other => Err(Error::InvalidArgument(format!(
                "axis must be one of z, y, x (got {other:?})"
            ))),
        }
    }
}

/// Gray level for a class id on the fixed 19-entry ramp.
fn ramp(id: u8) -> u8 {
    (255 * id as u32 / 18) as u8
}

/// Encodes one slice as a binary (P5) PGM.
///
/// Rows/columns are (y, x) for a z slice, (z, x) for a y slice and (z, y)
/// for an x slice. Label volumes go through the gray ramp; real fields are
/// min-max scaled over the slice (a constant slice maps to 128).
pub fn slice_pgm(volume: &Volume, axis: Axis, index: usize, channel: usize) -> Result<Vec<u8>> {
    let shape = *volume.shape();
    let dims = shape.dims();
    if index >= dims[axis.index()] {
        return Err(Error::InvalidArgument(format!(
            "slice index {index} out of range for axis {axis:?} of extent {}",
            dims[axis.index()]
        )));
    }
    if channel >= shape.channels() {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} out of range ({} channels)",
            shape.channels()
        )));
    }
    let (rows, cols) = match axis {
        Axis::Z => (dims[1], dims[2]),
        Axis::Y => (dims[0], dims[2]),
        Axis::X => (dims[0], dims[1]),
    };
    let voxel = |r: usize, c: usize| match axis {
        Axis::Z => shape.index(index, r, c),
        Axis::Y => shape.index(r, index, c),
        Axis::X => shape.index(r, c, index),
    };
    let mut pixels = Vec::with_capacity(rows * cols);
    match volume {
        Volume::Labels(l) => {
            for r in 0..rows {
                for c in 0..cols {
                    pixels.push(ramp(l.data()[voxel(r, c)]));
                }
            }
        }
        Volume::Field(f) => {
            let data = f.channel(channel);
            let values: Vec<f64> = (0..rows)
                .flat_map(|r| (0..cols).map(move |c| (r, c)))
                .map(|(r, c)| data[voxel(r, c)])
                .collect();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in values {
                let g = if hi > lo {
                    (255.0 * (v - lo) / (hi - lo)).round()
                } else {
                    128.0
                };
                pixels.push(g as u8);
            }
        }
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn export_slice_pgm(
    volume: &Volume,
    axis: Axis,
    index: usize,
    channel: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = slice_pgm(volume, axis, index, channel)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
