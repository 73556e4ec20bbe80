//! Mapped Dice over bronchovascular structures and the per-slice hole count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::ser::{SerializeMap, SerializeStruct};
use serde::{Serialize, Serializer};

use crate::anatomy::{AnatomyHierarchy, SEGMENT_COUNT};
use crate::error::{Error, Result};
use crate::volume::{Axis, LabelVolume};

/// Per-class Dice of a structure relabeled by a predicted partition.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedDiceReport {
    pub per_class: BTreeMap<u8, f64>,
    pub mean: f64,
    pub classes_evaluated: Vec<u8>,
}

/// Mapped label `M(v) = pred(v)` on structure voxels (0 elsewhere); Dice per
/// class present in the structure ground truth.
pub fn mapped_dice(pred_segments: &LabelVolume, structure_gt: &LabelVolume) -> Result<MappedDiceReport> {
    pred_segments
        .shape()
        .ensure_same_grid(structure_gt.shape(), "prediction vs structure ground truth")?;
    let mut gt_count = [0usize; SEGMENT_COUNT + 1];
    let mut mapped_count = [0usize; SEGMENT_COUNT + 1];
    let mut hits = [0usize; SEGMENT_COUNT + 1];
    for (&s, &pred) in structure_gt.data().iter().zip(pred_segments.data()) {
        if s == 0 {
            continue;
        }
        gt_count[s as usize] += 1;
        mapped_count[pred as usize] += 1;
        if s == pred {
            hits[s as usize] += 1;
        }
    }
    let classes_evaluated: Vec<u8> = (1..=SEGMENT_COUNT as u8)
        .filter(|&c| gt_count[c as usize] > 0)
        .collect();
    if classes_evaluated.is_empty() {
        return Err(Error::EmptyStructure);
    }
    let per_class: BTreeMap<u8, f64> = classes_evaluated
        .iter()
        .map(|&c| {
            let c = c as usize;
            let dice = 2.0 * hits[c] as f64 / (gt_count[c] + mapped_count[c]) as f64;
            (c as u8, dice)
        })
        .collect();
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MappedDiceReport {
        per_class,
        mean,
        classes_evaluated,
    })
}

struct NamedMap<'a, V>(&'a BTreeMap<u8, V>);

impl<V: Serialize> Serialize for NamedMap<'_, V> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let h = AnatomyHierarchy::new();
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (id, v) in self.0 {
            map.serialize_entry(h.segment_name(*id), v)?;
        }
        map.end()
    }
}

impl Serialize for MappedDiceReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = serializer.serialize_struct("MappedDiceReport", 3)?;
        st.serialize_field("per_class", &NamedMap(&self.per_class))?;
        st.serialize_field("mean", &self.mean)?;
        st.serialize_field("classes_evaluated", &self.classes_evaluated)?;
        st.end()
    }
}

/// Hole counts: totals per axis and per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HolesReport {
    pub total: usize,
    /// Counts for z, y and x slices.
    pub per_axis: [usize; 3],
    /// Every class present in the volume, including those with zero holes.
    pub per_class: BTreeMap<u8, usize>,
}

impl Serialize for HolesReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let per_axis: BTreeMap<&str, usize> = [("z", self.per_axis[0]), ("y", self.per_axis[1]), ("x", self.per_axis[2])]
            .into_iter()
            .collect();
        let mut st = serializer.serialize_struct("HolesReport", 3)?;
        st.serialize_field("total", &self.total)?;
        st.serialize_field("per_axis", &per_axis)?;
        st.serialize_field("per_class", &NamedMap(&self.per_class))?;
        st.end()
    }
}

/// Union-find over slice pixels, path-halving.
struct Forest {
    parent: Vec<u32>,
}

impl Forest {
    fn reset(&mut self, n: usize) {
        self.parent.clear();
        self.parent.extend(0..n as u32);
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let grand = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = grand;
            a = grand;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Counts complement components of `label == class` that avoid the border,
/// using 4-connectivity on the complement.
fn holes_in_slice(slice: &[u8], rows: usize, cols: usize, class: u8, forest: &mut Forest, touches: &mut Vec<bool>) -> usize {
    let n = rows * cols;
    forest.reset(n);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if slice[i] == class {
                continue;
            }
            if c > 0 && slice[i - 1] != class {
                forest.union(i as u32, (i - 1) as u32);
            }
            if r > 0 && slice[i - cols] != class {
                forest.union(i as u32, (i - cols) as u32);
            }
        }
    }
    touches.clear();
    touches.resize(n, false);
    let mut is_root = vec![false; n];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if slice[i] == class {
                continue;
            }
            let root = forest.find(i as u32) as usize;
            is_root[root] = true;
            if r == 0 || c == 0 || r + 1 == rows || c + 1 == cols {
                touches[root] = true;
            }
        }
    }
    (0..n).filter(|&i| is_root[i] && !touches[i]).count()
}

fn extract_slice(labels: &LabelVolume, axis: Axis, index: usize, out: &mut Vec<u8>) -> (usize, usize) {
    let shape = labels.shape();
    let [d, h, w] = shape.dims();
    let data = labels.data();
    out.clear();
    match axis {
        Axis::Z => {
            out.extend_from_slice(&data[index * h * w..(index + 1) * h * w]);
            (h, w)
        }
        Axis::Y => {
            for z in 0..d {
                out.extend_from_slice(&data[shape.index(z, index, 0)..shape.index(z, index, 0) + w]);
            }
            (d, w)
        }
        Axis::X => {
            for z in 0..d {
                for y in 0..h {
                    out.push(data[shape.index(z, y, index)]);
                }
            }
            (d, h)
        }
    }
}

/// Sum over segment classes 1..=18, the three axes and every slice of the
/// enclosed complement components of the class mask. Background is never
/// evaluated.
pub fn count_holes(pred_segments: &LabelVolume) -> Result<HolesReport> {
    if let Some(v) = pred_segments.data().iter().position(|&l| l as usize > SEGMENT_COUNT) {
        return Err(Error::LabelOutOfRange {
            label: pred_segments.data()[v],
            voxel: pred_segments.shape().coords(v),
            semantics: pred_segments.semantics().as_str(),
            max: SEGMENT_COUNT as u8,
        });
    }
    let mut present = [false; SEGMENT_COUNT + 1];
    for &l in pred_segments.data() {
        present[l as usize] = true;
    }
    let dims = pred_segments.shape().dims();
    let jobs: Vec<(Axis, usize)> = Axis::ALL
        .iter()
        .flat_map(|&a| (0..dims[a.index()]).map(move |i| (a, i)))
        .collect();
    let per_slice: Vec<(Axis, [usize; SEGMENT_COUNT + 1])> = jobs
        .into_par_iter()
        .map(|(axis, index)| {
            let mut slice = Vec::new();
            let (rows, cols) = extract_slice(pred_segments, axis, index, &mut slice);
            let mut in_slice = [false; SEGMENT_COUNT + 1];
            for &l in &slice {
                in_slice[l as usize] = true;
            }
            let mut forest = Forest { parent: Vec::new() };
            let mut touches = Vec::new();
            let mut counts = [0usize; SEGMENT_COUNT + 1];
            for class in 1..=SEGMENT_COUNT as u8 {
                if in_slice[class as usize] {
                    counts[class as usize] =
                        holes_in_slice(&slice, rows, cols, class, &mut forest, &mut touches);
                }
            }
            (axis, counts)
        })
        .collect();
    let mut per_axis = [0usize; 3];
    let mut per_class_counts = [0usize; SEGMENT_COUNT + 1];
    for (axis, counts) in per_slice {
        for (class, &k) in counts.iter().enumerate() {
            per_axis[axis.index()] += k;
            per_class_counts[class] += k;
        }
    }
    let per_class = (1..=SEGMENT_COUNT as u8)
        .filter(|&c| present[c as usize])
        .map(|c| (c, per_class_counts[c as usize]))
        .collect();
    Ok(HolesReport {
        total: per_axis.iter().sum(),
        per_axis,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{GridShape, LabelSemantics};

    fn vol(dims: [usize; 3], data: Vec<u8>) -> LabelVolume {
        LabelVolume::from_vec(
            GridShape::cube(1, dims).unwrap(),
            LabelSemantics::SegmentPartition,
            data,
        )
        .unwrap()
    }

    #[test]
    fn solid_cuboid_has_no_holes() {
        let mut data = vec![0u8; 6 * 6 * 6];
        let shape = GridShape::cube(1, [6, 6, 6]).unwrap();
        for z in 1..5 {
            for y in 1..4 {
                for x in 2..5 {
                    data[shape.index(z, y, x)] = 7;
                }
            }
        }
        let r = count_holes(&vol([6, 6, 6], data)).unwrap();
        assert_eq!(r.total, 0);
        assert_eq!(r.per_class.get(&7), Some(&0));
    }

    #[test]
    fn hollow_cube_has_three_holes() {
        let mut data = vec![5u8; 27];
        data[13] = 0;
        let r = count_holes(&vol([3, 3, 3], data)).unwrap();
        assert_eq!(r.total, 3);
        assert_eq!(r.per_axis, [1, 1, 1]);
        assert_eq!(r.per_class.get(&5), Some(&3));
    }

    #[test]
    fn diagonal_ring_encloses_under_four_connectivity() {
        // A ring closed only through diagonal contacts still encloses the
        // centre under 4-connectivity of the complement.
        let slice = vec![
            0, 3, 0, //
            3, 0, 3, //
            0, 3, 0,
        ];
        let r = count_holes(&vol([1, 3, 3], slice)).unwrap();
        assert_eq!(r.per_axis[0], 1);
    }

    #[test]
    fn border_touching_gap_is_not_a_hole() {
        let slice = vec![
            4, 4, 4, //
            4, 0, 0, //
            4, 4, 4,
        ];
        let r = count_holes(&vol([1, 3, 3], slice)).unwrap();
        assert_eq!(r.total, 0);
    }

    #[test]
    fn mapped_dice_perfect() {
        let gt = vol([1, 1, 4], vec![0, 3, 3, 9]);
        let pred = vol([1, 1, 4], vec![1, 3, 3, 9]);
        let r = mapped_dice(&pred, &gt).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.classes_evaluated, vec![3, 9]);
    }

    #[test]
    fn mapped_dice_total_miss() {
        let gt = vol([1, 1, 4], vec![0, 3, 3, 9]);
        let pred = vol([1, 1, 4], vec![0, 4, 4, 9]);
        let r = mapped_dice(&pred, &gt).unwrap();
        assert_eq!(r.per_class[&3], 0.0);
        assert_eq!(r.per_class[&9], 1.0);
        assert_eq!(r.mean, 0.5);
    }

    #[test]
    fn mapped_dice_needs_structure() {
        let gt = vol([1, 1, 2], vec![0, 0]);
        assert!(matches!(mapped_dice(&gt, &gt), Err(Error::EmptyStructure)));
    }

    #[test]
    fn reports_serialize_with_names() {
        let gt = vol([1, 1, 2], vec![12, 13]);
        let r = mapped_dice(&gt, &gt).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["per_class"]["RS4"], 1.0);
        let holes = count_holes(&gt).unwrap();
        let json = serde_json::to_value(&holes).unwrap();
        assert_eq!(json["per_axis"]["z"], 0);
        assert_eq!(json["per_class"]["RS5"], 0);
    }
}
