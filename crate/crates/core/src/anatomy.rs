//! Lobe/segment containment hierarchy, the background / bronchovascular /
//! lobe region partition, and the lobe-level max reduction.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;
use crate::volume::{
    FieldKind, GridShape, LabelSemantics, LabelVolume, ScalarField4D, LOBE_CHANNELS,
    SEGMENT_CHANNELS,
};

pub const SEGMENT_COUNT: usize = 18;
pub const LOBE_COUNT: usize = 5;

const SEGMENT_NAMES: [&str; SEGMENT_COUNT] = [
    "LS1/2", "LS3", "LS4", "LS5", "LS6", "LS7/8", "LS9", "LS10", "RS1", "RS2", "RS3", "RS4",
    "RS5", "RS6", "RS7", "RS8", "RS9", "RS10",
];

const LOBE_NAMES: [&str; LOBE_COUNT] = [
    "LeftUpper",
    "LeftLower",
    "RightUpper",
    "RightMiddle",
    "RightLower",
];

const MEMBERS: [&[u8]; LOBE_COUNT] = [
    &[1, 2, 3, 4],
    &[5, 6, 7, 8],
    &[9, 10, 11],
    &[12, 13],
    &[14, 15, 16, 17, 18],
];

/// The fixed 18-segment / 5-lobe containment map. Id 0 is background at
/// both levels; ids are stable.
#[derive(Debug, Clone)]
pub struct AnatomyHierarchy {
    lobe_of: [u8; SEGMENT_COUNT + 1],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: &'static str,
    pub level: &'static str,
    pub lobe_of: Option<u8>,
}

impl AnatomyHierarchy {
    pub fn new() -> Self {
        let mut lobe_of = [0u8; SEGMENT_COUNT + 1];
        for (l, members) in MEMBERS.iter().enumerate() {
            for &s in members.iter() {
                assert_eq!(lobe_of[s as usize], 0, "segment {s} listed twice");
                lobe_of[s as usize] = l as u8 + 1;
            }
        }
        assert!(
            lobe_of[1..].iter().all(|&l| l != 0),
            "lobe memberships must cover every segment"
        );
        Self { lobe_of }
    }

    pub fn segment_count(&self) -> usize {
        SEGMENT_COUNT
    }

    pub fn lobe_count(&self) -> usize {
        LOBE_COUNT
    }

    /// Lobe id of a segment id; `None` for background or out-of-range ids.
    pub fn lobe_of(&self, segment: u8) -> Option<u8> {
        match segment as usize {
            1..=SEGMENT_COUNT => Some(self.lobe_of[segment as usize]),
            _ => None,
        }
    }

    /// Member segment ids of a lobe in ascending order (empty for 0 or unknown ids).
    pub fn members(&self, lobe: u8) -> &'static [u8] {
        match lobe as usize {
            1..=LOBE_COUNT => MEMBERS[lobe as usize - 1],
            _ => &[],
        }
    }

    pub fn segment_name(&self, segment: u8) -> &'static str {
        match segment as usize {
            0 => "background",
            s @ 1..=SEGMENT_COUNT => SEGMENT_NAMES[s - 1],
            _ => "unknown",
        }
    }

    pub fn lobe_name(&self, lobe: u8) -> &'static str {
        match lobe as usize {
            0 => "background",
            l @ 1..=LOBE_COUNT => LOBE_NAMES[l - 1],
            _ => "unknown",
        }
    }

    pub fn segment_id(&self, name: &str) -> Option<u8> {
        SEGMENT_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| i as u8 + 1)
    }

    pub fn lobe_id(&self, name: &str) -> Option<u8> {
        LOBE_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| i as u8 + 1)
    }

    /// Class-id registry for downstream tooling.
    pub fn registry(&self) -> Vec<ClassEntry> {
        let mut out = vec![ClassEntry {
            id: 0,
            name: "background",
            level: "background",
            lobe_of: None,
        }];
        out.extend((1..=LOBE_COUNT as u8).map(|l| ClassEntry {
            id: l,
            name: self.lobe_name(l),
            level: "lobe",
            lobe_of: None,
        }));
        out.extend((1..=SEGMENT_COUNT as u8).map(|s| ClassEntry {
            id: s,
            name: self.segment_name(s),
            level: "segment",
            lobe_of: self.lobe_of(s),
        }));
        out
    }

    pub fn registry_json(&self) -> String {
        serde_json::to_string_pretty(&self.registry()).expect("registry serializes")
    }
}

impl Default for AnatomyHierarchy {
    fn default() -> Self {
        Self::new()
    }
}

/// Returns the constant hierarchy.
pub fn hierarchy() -> AnatomyHierarchy {
    AnatomyHierarchy::new()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Region {
    /// Outside every lobe.
    B,
    /// On the bronchovascular tree.
    BV,
    /// Inside a lobe, off the tree.
    L,
}

/// Per-voxel region tags with segment and lobe targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    shape: GridShape,
    tags: Vec<Region>,
    segment_target: Vec<u8>,
    lobe_target: Vec<u8>,
    bv_voxels: Vec<usize>,
}

impl RegionPartition {
    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn tags(&self) -> &[Region] {
        &self.tags
    }

    /// Segment id on BV voxels, 0 elsewhere.
    pub fn segment_target(&self) -> &[u8] {
        &self.segment_target
    }

    /// Lobe id on BV and L voxels, 0 on B.
    pub fn lobe_target(&self) -> &[u8] {
        &self.lobe_target
    }

    /// Indices of BV voxels in ascending order.
    pub fn bv_voxels(&self) -> &[usize] {
        &self.bv_voxels
    }

    /// Number of BV voxels per segment id (index 0 unused).
    pub fn bv_counts(&self) -> [usize; SEGMENT_CHANNELS] {
        let mut counts = [0; SEGMENT_CHANNELS];
        for &v in &self.bv_voxels {
            counts[self.segment_target[v] as usize] += 1;
        }
        counts
    }
}

/// Tags each voxel BV where `bv > 0`, else L where `lobe > 0`, else B.
pub fn derive_regions(
    bv: &LabelVolume,
    lobe: &LabelVolume,
    h: &AnatomyHierarchy,
) -> Result<RegionPartition> {
    bv.shape().ensure_same_grid(lobe.shape(), "bv vs lobe labels")?;
    check_range(bv, SEGMENT_COUNT as u8)?;
    check_range(lobe, LOBE_COUNT as u8)?;
    let shape = *bv.shape();
    let n = shape.voxels();
    let mut tags = Vec::with_capacity(n);
    let mut segment_target = vec![0u8; n];
    let mut lobe_target = vec![0u8; n];
    let mut bv_voxels = Vec::new();
    for v in 0..n {
        let s = bv.data()[v];
        let l = lobe.data()[v];
        if s > 0 {
            let expected = h.lobe_of(s).expect("range checked");
            if l == 0 {
                return Err(Error::Consistency {
                    voxel: shape.coords(v),
                    reason: format!(
                        "bronchovascular label {} lies outside every lobe",
                        h.segment_name(s)
                    ),
                });
            }
            if l != expected {
                return Err(Error::Consistency {
                    voxel: shape.coords(v),
                    reason: format!(
                        "segment {} belongs to {} but lobe label is {}",
                        h.segment_name(s),
                        h.lobe_name(expected),
                        h.lobe_name(l)
                    ),
                });
            }
            tags.push(Region::BV);
            segment_target[v] = s;
            lobe_target[v] = l;
            bv_voxels.push(v);
        } else if l > 0 {
            tags.push(Region::L);
            lobe_target[v] = l;
        } else {
            tags.push(Region::B);
        }
    }
    Ok(RegionPartition {
        shape,
        tags,
        segment_target,
        lobe_target,
        bv_voxels,
    })
}

fn check_range(labels: &LabelVolume, max: u8) -> Result<()> {
    match labels.data().iter().position(|&l| l > max) {
        Some(v) => Err(Error::LabelOutOfRange {
            label: labels.data()[v],
            voxel: labels.shape().coords(v),
            semantics: labels.semantics().as_str(),
            max,
        }),
        None => Ok(()),
    }
}

/// Six-channel lobe-level map (background + 5 lobes) obtained by taking, per
/// lobe, the maximum over member segment channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LobeProbabilityField {
    values: ScalarField4D,
    witness: Vec<u8>,
}

impl LobeProbabilityField {
    pub fn field(&self) -> &ScalarField4D {
        &self.values
    }

    pub fn shape(&self) -> &GridShape {
        self.values.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }

    /// Segment id that attained the maximum for `lobe` (1..=5) at voxel `v`.
    #[inline]
    pub fn witness(&self, lobe: u8, v: usize) -> u8 {
        self.witness[(lobe as usize - 1) * self.values.shape().voxels() + v]
    }
}

/// Lobe channel `l` at `v` is `max_{s in members(l)} p_s(v)`; channel 0 is
/// copied. Ties go to the lowest segment id.
pub fn lobe_probability(p: &ScalarField4D, h: &AnatomyHierarchy) -> Result<LobeProbabilityField> {
    let shape = *p.shape();
    if shape.channels() != SEGMENT_CHANNELS {
        return Err(Error::InvalidArgument(format!(
            "lobe reduction needs {SEGMENT_CHANNELS} channels, got {}",
            shape.channels()
        )));
    }
    let n = shape.voxels();
    let src = p.data();
    let mut values = vec![0.0; LOBE_CHANNELS * n];
    values[..n].copy_from_slice(&src[..n]);
    let mut witness = vec![0u8; LOBE_COUNT * n];
    {
        let (_, lobes) = values.split_at_mut(n);
        let val_blocks = exec::channel_blocks_mut(lobes, n);
        let wit_blocks = exec::channel_blocks_mut(&mut witness, n);
        val_blocks
            .into_par_iter()
            .zip(wit_blocks.into_par_iter())
            .for_each(|((start, mut vals), (_, mut wits))| {
                for i in 0..vals[0].len() {
                    let v = start + i;
                    for l in 0..LOBE_COUNT {
                        let members = h.members(l as u8 + 1);
                        let mut best = members[0];
                        let mut best_val = src[best as usize * n + v];
                        for &s in &members[1..] {
                            let val = src[s as usize * n + v];
                            if val > best_val {
                                best = s;
                                best_val = val;
                            }
                        }
                        vals[l][i] = best_val;
                        wits[l][i] = best;
                    }
                }
            });
    }
    Ok(LobeProbabilityField {
        values: ScalarField4D::from_vec(
            shape.with_channels(LOBE_CHANNELS)?,
            FieldKind::Probabilities,
            values,
        )?,
        witness,
    })
}

/// Maps a segment partition to the lobe partition it implies.
pub fn lobes_of_segments(seg: &LabelVolume, h: &AnatomyHierarchy) -> Result<LabelVolume> {
    check_range(seg, SEGMENT_COUNT as u8)?;
    let data = seg
        .data()
        .iter()
        .map(|&s| h.lobe_of(s).unwrap_or(0))
        .collect();
    LabelVolume::from_vec(*seg.shape(), LabelSemantics::LobeLabels, data)
}

/// Fraction of in-lobe voxels (`lobe > 0`) whose segment belongs to that lobe.
/// Returns 1.0 when there are no in-lobe voxels.
pub fn lobe_consistency(
    seg: &LabelVolume,
    lobe: &LabelVolume,
    h: &AnatomyHierarchy,
) -> Result<f64> {
    seg.shape().ensure_same_grid(lobe.shape(), "segments vs lobe labels")?;
    let mut inside = 0usize;
    let mut consistent = 0usize;
    for (&s, &l) in seg.data().iter().zip(lobe.data()) {
        if l > 0 {
            inside += 1;
            if h.lobe_of(s) == Some(l) {
                consistent += 1;
            }
        }
    }
    Ok(if inside == 0 {
        1.0
    } else {
        consistent as f64 / inside as f64
    })
}
