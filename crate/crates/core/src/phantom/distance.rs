//! Exact squared Euclidean distance transform (lower envelope of parabolas,
//! one pass per axis) and the nearest-structure segment assignment.

use crate::anatomy::{AnatomyHierarchy, LOBE_COUNT, SEGMENT_COUNT};
use crate::error::{Error, Result};
use crate::volume::{GridShape, LabelSemantics, LabelVolume};

/// 1D transform of `f` with squared step `w2`, written into `out`.
fn edt_1d(f: &[f64], w2: f64, out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    let n = f.len();
    sites.clear();
    bounds.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            match sites.last() {
                None => {
                    sites.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&v) => {
                    let (qf, vf) = (q as f64, v as f64);
                    let s = ((fq + w2 * qf * qf) - (f[v] + w2 * vf * vf)) / (2.0 * w2 * (qf - vf));
                    if s <= *bounds.last().unwrap() {
                        sites.pop();
                        bounds.pop();
                    } else {
                        sites.push(q);
                        bounds.push(s);
                        break;
                    }
                }
            }
        }
    }
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate().take(n) {
        let pf = p as f64;
        while k + 1 < sites.len() && bounds[k + 1] < pf {
            k += 1;
        }
        let v = sites[k];
        let d = pf - v as f64;
        *o = w2 * d * d + f[v];
    }
}

/// Squared distance (mm², scaled by spacing) from every voxel to the nearest
/// voxel where `mask` is true; infinite when the mask is empty.
pub fn squared_distance(mask: &[bool], shape: &GridShape) -> Vec<f64> {
    let [d, h, w] = shape.dims();
    let [sz, sy, sx] = shape.spacing();
    let mut field: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let mut sites = Vec::new();
    let mut bounds = Vec::new();
    let longest = d.max(h).max(w);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];

    // x
    for z in 0..d {
        for y in 0..h {
            let base = shape.index(z, y, 0);
            line[..w].copy_from_slice(&field[base..base + w]);
            edt_1d(&line[..w], sx * sx, &mut out[..w], &mut sites, &mut bounds);
            field[base..base + w].copy_from_slice(&out[..w]);
        }
    }
    // y
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = field[shape.index(z, y, x)];
            }
            edt_1d(&line[..h], sy * sy, &mut out[..h], &mut sites, &mut bounds);
            for y in 0..h {
                field[shape.index(z, y, x)] = out[y];
            }
        }
    }
    // z
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                line[z] = field[shape.index(z, y, x)];
            }
            edt_1d(&line[..d], sz * sz, &mut out[..d], &mut sites, &mut bounds);
            for z in 0..d {
                field[shape.index(z, y, x)] = out[z];
            }
        }
    }
    field
}

/// Assigns every in-lobe voxel the segment of the nearest bronchovascular
/// voxel among that lobe's member segments (ties to the lowest segment id).
/// Voxels outside every lobe stay 0.
///
/// Distances are exact for unit spacing; with anisotropic spacing they are
/// exact up to floating-point rounding of the scaled squares.
pub fn synthesize_gt_by_distance(
    bv: &LabelVolume,
    lobe: &LabelVolume,
    h: &AnatomyHierarchy,
) -> Result<LabelVolume> {
    // validates shapes, ranges and hierarchy consistency
    crate::anatomy::derive_regions(bv, lobe, h)?;
    let shape = *bv.shape();
    let n = shape.voxels();

    let mut lobe_present = [false; LOBE_COUNT + 1];
    for &l in lobe.data() {
        lobe_present[l as usize] = true;
    }
    let mut seg_present = [false; SEGMENT_COUNT + 1];
    for &s in bv.data() {
        seg_present[s as usize] = true;
    }
    for l in 1..=LOBE_COUNT as u8 {
        if lobe_present[l as usize] && !h.members(l).iter().any(|&s| seg_present[s as usize]) {
            return Err(Error::LobeWithoutStructure(h.lobe_name(l)));
        }
    }

    let mut distances: Vec<Option<Vec<f64>>> = vec![None; SEGMENT_COUNT + 1];
    for s in 1..=SEGMENT_COUNT as u8 {
        if seg_present[s as usize] && lobe_present[h.lobe_of(s).unwrap() as usize] {
            let mask: Vec<bool> = bv.data().iter().map(|&b| b == s).collect();
            distances[s as usize] = Some(squared_distance(&mask, &shape));
        }
    }

    let mut out = vec![0u8; n];
    for v in 0..n {
        let l = lobe.data()[v];
        if l == 0 {
            continue;
        }
        let mut best = 0u8;
        let mut best_d = f64::INFINITY;
        for &s in h.members(l) {
            if let Some(d) = &distances[s as usize] {
                if d[v] < best_d {
                    best = s;
                    best_d = d[v];
                }
            }
        }
        out[v] = best;
    }
    LabelVolume::from_vec(shape, LabelSemantics::SegmentPartition, out)
}
