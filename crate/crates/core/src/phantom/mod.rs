//! Procedural lung-like phantoms: two ellipsoidal lungs cut into five lobes,
//! one branching tubular tree per segment, and the distance-synthesized
//! segment partition.

mod distance;

pub use distance::{squared_distance, synthesize_gt_by_distance};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anatomy::{derive_regions, AnatomyHierarchy, LOBE_COUNT, SEGMENT_COUNT};
use crate::error::{Error, Result};
use crate::volume::{write_svol, GridShape, LabelSemantics, LabelVolume, Volume};

/// Smallest admissible extent along any axis.
pub const MIN_EXTENT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LobeRecipe {
    /// Two ellipsoids; the left one split by an oblique plane, the right one
    /// by an oblique and a horizontal plane.
    #[default]
    TwoEllipsoidsPlanarCuts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    pub tube_radius: f64,
    pub branch_depth: usize,
    /// Inclusive range of child branch lengths in voxels.
    pub branch_length: (f64, f64),
    pub recipe: LobeRecipe,
}

impl PhantomSpec {
    /// Cubic grid with defaults scaled to its size.
    pub fn cube(size: usize, seed: u64) -> Self {
        let s = size as f64;
        Self {
            dims: [size; 3],
            seed,
            tube_radius: 1.5,
            branch_depth: 3,
            branch_length: (s / 12.0, s / 6.0),
            recipe: LobeRecipe::TwoEllipsoidsPlanarCuts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_EXTENT) {
            return Err(Error::InvalidArgument(format!(
                "phantom grid {:?} must be at least {MIN_EXTENT} per axis",
                self.dims
            )));
        }
        if !(self.tube_radius >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tube radius {} must be >= 1",
                self.tube_radius
            )));
        }
        let (lo, hi) = self.branch_length;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(format!(
                "branch length range ({lo}, {hi}) is empty"
            )));
        }
        Ok(())
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::cube(48, 42)
    }
}

/// A straight skeleton piece in voxel coordinates (z, y, x).
pub type Polyline = Vec<[f64; 3]>;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomBundle {
    pub bv: LabelVolume,
    pub lobe: LabelVolume,
    pub gt: LabelVolume,
    /// Per segment id, the skeleton polylines of its tree.
    pub skeletons: BTreeMap<u8, Vec<Polyline>>,
}

impl PhantomBundle {
    /// Checks the bundle invariants: tubes inside their lobe, every member
    /// segment represented, and a lobe-consistent distance partition.
    pub fn check_invariants(&self, h: &AnatomyHierarchy) -> Result<()> {
        derive_regions(&self.bv, &self.lobe, h)?;
        let mut lobe_present = [false; LOBE_COUNT + 1];
        let mut seg_present = [false; SEGMENT_COUNT + 1];
        for (&s, &l) in self.bv.data().iter().zip(self.lobe.data()) {
            seg_present[s as usize] = true;
            lobe_present[l as usize] = true;
        }
        for l in 1..=LOBE_COUNT as u8 {
            if !lobe_present[l as usize] {
                continue;
            }
            if let Some(&s) = h.members(l).iter().find(|&&s| !seg_present[s as usize]) {
                return Err(Error::Generation(format!(
                    "segment {} has no tube voxels",
                    h.segment_name(s)
                )));
            }
        }
        for (v, (&g, &l)) in self.gt.data().iter().zip(self.lobe.data()).enumerate() {
            let ok = if l == 0 { g == 0 } else { h.lobe_of(g) == Some(l) };
            if !ok {
                return Err(Error::Consistency {
                    voxel: self.gt.shape().coords(v),
                    reason: format!("distance label {g} inconsistent with lobe {l}"),
                });
            }
        }
        Ok(())
    }

    pub fn skeleton_json(&self, h: &AnatomyHierarchy) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .skeletons
            .iter()
            .map(|(&s, lines)| {
                (
                    h.segment_name(s).to_string(),
                    serde_json::to_value(lines).expect("finite coordinates"),
                )
            })
            .collect();
        serde_json::json!({ "segments": map })
    }

    /// Writes `bv.svol`, `lobe.svol`, `gt.svol` and `skeleton.json`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>, h: &AnatomyHierarchy) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_svol(&Volume::Labels(self.bv.clone()), dir.join("bv.svol"))?;
        write_svol(&Volume::Labels(self.lobe.clone()), dir.join("lobe.svol"))?;
        write_svol(&Volume::Labels(self.gt.clone()), dir.join("gt.svol"))?;
        let path = dir.join("skeleton.json");
        let text = serde_json::to_string(&self.skeleton_json(h))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

struct Lung {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Lung {
    /// Normalized (z, y) position and whether the point is inside.
    fn locate(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let u: [f64; 3] = std::array::from_fn(|i| (p[i] - self.center[i]) / self.axes[i]);
        (u.iter().map(|x| x * x).sum::<f64>() <= 1.0).then_some((u[0], u[1]))
    }
}

/// Lobe label for each voxel under the two-ellipsoid recipe.
fn lobe_labels(dims: [usize; 3], h: &AnatomyHierarchy) -> Vec<u8> {
    let [d, hh, w] = dims;
    let (df, hf, wf) = (d as f64, hh as f64, w as f64);
    let center = |x: f64| [df / 2.0 - 0.5, hf / 2.0 - 0.5, x];
    let left = Lung {
        center: center(0.72 * wf - 0.5),
        axes: [0.44 * df, 0.40 * hf, 0.19 * wf],
    };
    let right = Lung {
        center: center(0.28 * wf - 0.5),
        axes: [0.44 * df, 0.40 * hf, 0.20 * wf],
    };
    let id = |name: &str| h.lobe_id(name).expect("known lobe");
    let (lu, ll, ru, rm, rl) = (
        id("LeftUpper"),
        id("LeftLower"),
        id("RightUpper"),
        id("RightMiddle"),
        id("RightLower"),
    );
    let mut out = vec![0u8; d * hh * w];
    for z in 0..d {
        for y in 0..hh {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let v = (z * hh + y) * w + x;
                // oblique fissure: above the plane u = 0.6·w − 0.1 is upper
                if let Some((u, t)) = left.locate(p) {
                    out[v] = if u > 0.6 * t - 0.1 { lu } else { ll };
                } else if let Some((u, t)) = right.locate(p) {
                    out[v] = if u <= 0.6 * t - 0.1 {
                        rl
                    } else if u > 0.3 {
                        ru
                    } else {
                        rm
                    };
                }
            }
        }
    }
    out
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn point_of(shape: &GridShape, v: usize) -> [f64; 3] {
    shape.coords(v).map(|c| c as f64)
}

/// Splits the lobe voxels into `k` territories by seeded k-means; returns
/// the territory centres (snapped to lobe voxels) and the per-voxel owner.
fn territories(
    voxels: &[usize],
    shape: &GridShape,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<[f64; 3]>, Vec<usize>) {
    let pts: Vec<[f64; 3]> = voxels.iter().map(|&v| point_of(shape, v)).collect();
    // farthest-point initialization from a random voxel
    let mut centers = vec![pts[rng.gen_range(0..pts.len())]];
    while centers.len() < k {
        let far = pts
            .iter()
            .max_by(|a, b| {
                let da = centers.iter().map(|c| dist2(**a, *c)).fold(f64::INFINITY, f64::min);
                let db = centers.iter().map(|c| dist2(**b, *c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .copied()
            .expect("nonempty lobe");
        centers.push(far);
    }
    let assign = |centers: &[[f64; 3]]| -> Vec<usize> {
        pts.iter()
            .map(|p| {
                let mut best = 0;
                for j in 1..centers.len() {
                    if dist2(*p, centers[j]) < dist2(*p, centers[best]) {
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    for _ in 0..8 {
        let owner = assign(&centers);
        let mut acc = vec![[0.0; 3]; k];
        let mut count = vec![0usize; k];
        for (p, &o) in pts.iter().zip(&owner) {
            for i in 0..3 {
                acc[o][i] += p[i];
            }
            count[o] += 1;
        }
        for j in 0..k {
            if count[j] > 0 {
                centers[j] = acc[j].map(|a| a / count[j] as f64);
            }
        }
    }
    // snap to the nearest lobe voxel so every centre lies in the lobe
    for c in centers.iter_mut() {
        *c = *pts
            .iter()
            .min_by(|a, b| dist2(**a, *c).total_cmp(&dist2(**b, *c)))
            .unwrap();
    }
    let owner = assign(&centers);
    (centers, owner)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dist2(v, [0.0; 3]).sqrt();
    if n > 0.0 {
        v.map(|x| x / n)
    } else {
        [0.0, 0.0, 1.0]
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    normalize(std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Walks from `start` along `dir` for at most `len` voxels while `inside`
/// holds; returns the last inside point.
fn clip_ray(start: [f64; 3], dir: [f64; 3], len: f64, inside: impl Fn([f64; 3]) -> bool) -> [f64; 3] {
    let step = 0.25;
    let mut last = start;
    let mut t = step;
    while t <= len + 1e-9 {
        let p = std::array::from_fn(|i| start[i] + dir[i] * t);
        if !inside(p) {
            break;
        }
        last = p;
        t += step;
    }
    last
}

fn segment_distance2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
    let ap: [f64; 3] = std::array::from_fn(|i| p[i] - a[i]);
    let len2 = dist2(ab, [0.0; 3]);
    let t = if len2 > 0.0 {
        ((0..3).map(|i| ap[i] * ab[i]).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = std::array::from_fn(|i| a[i] + t * ab[i]);
    dist2(p, q)
}

/// Builds a phantom. Deterministic for a given spec.
pub fn generate_phantom(spec: &PhantomSpec, h: &AnatomyHierarchy) -> Result<PhantomBundle> {
    spec.validate()?;
    let shape = GridShape::cube(1, spec.dims)?;
    let [d, hh, w] = spec.dims;
    let lobe = lobe_labels(spec.dims, h);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut bv = vec![0u8; shape.voxels()];
    let mut skeletons = BTreeMap::new();
    let in_grid = |p: [f64; 3]| {
        p.iter().zip([d, hh, w]).all(|(&c, n)| c >= -0.5 && c < n as f64 - 0.5)
    };
    let voxel_at = |p: [f64; 3]| shape.index(p[0].round() as usize, p[1].round() as usize, p[2].round() as usize);
    let medial_x = w as f64 / 2.0 - 0.5;

    for l in 1..=LOBE_COUNT as u8 {
        let voxels: Vec<usize> = (0..shape.voxels()).filter(|&v| lobe[v] == l).collect();
        let members = h.members(l);
        if voxels.len() < members.len() {
            return Err(Error::Generation(format!(
                "lobe {} has only {} voxels",
                h.lobe_name(l),
                voxels.len()
            )));
        }
        let (centers, owner) = territories(&voxels, &shape, members.len(), &mut rng);
        let mut territory = vec![usize::MAX; shape.voxels()];
        for (&v, &o) in voxels.iter().zip(&owner) {
            territory[v] = o;
        }
        let anchor = [d as f64 / 2.0 - 0.5, hh as f64 / 2.0 - 0.5, medial_x];
        let root = voxels
            .iter()
            .map(|&v| point_of(&shape, v))
            .min_by(|a, b| dist2(*a, anchor).total_cmp(&dist2(*b, anchor)))
            .unwrap();

        for (j, &seg) in members.iter().enumerate() {
            let inside = |p: [f64; 3]| in_grid(p) && territory[voxel_at(p)] == j;
            let center = centers[j];
            let mut lines: Vec<Polyline> = Vec::new();
            // trunk: the part of root→centre inside the territory
            let trunk_dir = normalize(std::array::from_fn(|i| center[i] - root[i]));
            let trunk_len = dist2(center, root).sqrt();
            let entry = (0..=(trunk_len * 4.0) as usize)
                .map(|k| std::array::from_fn(|i| root[i] + trunk_dir[i] * k as f64 * 0.25))
                .find(|&p| inside(p))
                .unwrap_or(center);
            lines.push(vec![entry, center]);

            let mut frontier = vec![(center, trunk_dir)];
            for _ in 0..spec.branch_depth {
                let mut next = Vec::new();
                for (start, dir) in frontier {
                    for _ in 0..2 {
                        let jitter = random_unit(&mut rng);
                        let child = normalize(std::array::from_fn(|i| dir[i] + 0.9 * jitter[i]));
                        let len = rng.gen_range(spec.branch_length.0..=spec.branch_length.1);
                        let end = clip_ray(start, child, len, inside);
                        if dist2(start, end) >= 1.0 {
                            lines.push(vec![start, end]);
                            next.push((end, child));
                        }
                    }
                }
                frontier = next;
            }

            let r2 = spec.tube_radius * spec.tube_radius;
            let reach = spec.tube_radius.ceil() as isize;
            for line in &lines {
                let (a, b) = (line[0], line[1]);
                let lo: [isize; 3] = std::array::from_fn(|i| a[i].min(b[i]).floor() as isize - reach);
                let hi: [isize; 3] = std::array::from_fn(|i| a[i].max(b[i]).ceil() as isize + reach);
                for z in lo[0].max(0)..=hi[0].min(d as isize - 1) {
                    for y in lo[1].max(0)..=hi[1].min(hh as isize - 1) {
                        for x in lo[2].max(0)..=hi[2].min(w as isize - 1) {
                            let v = shape.index(z as usize, y as usize, x as usize);
                            if territory[v] != j {
                                continue;
                            }
                            let p = [z as f64, y as f64, x as f64];
                            if segment_distance2(p, a, b) <= r2 {
                                bv[v] = seg;
                            }
                        }
                    }
                }
            }
            if !bv.iter().any(|&b| b == seg) {
                return Err(Error::Generation(format!(
                    "segment {} rasterized to zero voxels",
                    h.segment_name(seg)
                )));
            }
            skeletons.insert(seg, lines);
        }
    }

    let bv = LabelVolume::from_vec(shape, LabelSemantics::BvLabels, bv)?;
    let lobe = LabelVolume::from_vec(shape, LabelSemantics::LobeLabels, lobe)?;
    let gt = synthesize_gt_by_distance(&bv, &lobe, h)?;
    Ok(PhantomBundle {
        bv,
        lobe,
        gt,
        skeletons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_lobe_is_populated() {
        let h = AnatomyHierarchy::new();
        for size in [16, 24, 48] {
            let lobe = lobe_labels([size; 3], &h);
            for l in 1..=5u8 {
                let count = lobe.iter().filter(|&&x| x == l).count();
                assert!(count > 20 * h.members(l).len(), "size {size} lobe {l}: {count}");
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(PhantomSpec::cube(15, 0).validate().is_err());
        let mut s = PhantomSpec::cube(24, 0);
        s.tube_radius = 0.5;
        assert!(s.validate().is_err());
        assert!(PhantomSpec::default().validate().is_ok());
    }

    #[test]
    fn small_phantom_is_valid() {
        let h = AnatomyHierarchy::new();
        let b = generate_phantom(&PhantomSpec::cube(24, 7), &h).unwrap();
        b.check_invariants(&h).unwrap();
        assert_eq!(b.skeletons.len(), 18);
    }
}
