//! Dense voxel grids: channel-major real fields, categorical label volumes,
//! per-voxel softmax/argmax, the `svol` container and PGM slice export.

mod pgm;
mod svol;

pub use pgm::{export_slice_pgm, slice_pgm, Axis};
pub use svol::{decode_svol, encode_svol, read_svol, write_svol, MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

/// Number of channels of a segment-level probability map (background + 18 segments).
pub const SEGMENT_CHANNELS: usize = 19;
/// Number of channels of a lobe-level probability map (background + 5 lobes).
pub const LOBE_CHANNELS: usize = 6;

/// Extent and voxel spacing (mm along z, y, x) of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridShape {
    channels: usize,
    depth: usize,
    height: usize,
    width: usize,
    spacing: [f64; 3],
}

impl GridShape {
    pub fn new(channels: usize, dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if channels == 0 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "channels {channels} and dims {dims:?} must all be >= 1"
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidShape(format!(
                "spacing {spacing:?} must be positive"
            )));
        }
        Ok(Self {
            channels,
            depth: dims[0],
            height: dims[1],
            width: dims[2],
            spacing,
        })
    }

    /// Unit-spacing shape.
    pub fn cube(channels: usize, dims: [usize; 3]) -> Result<Self> {
        Self::new(channels, dims, [1.0; 3])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }

    /// Total number of values.
    pub fn len(&self) -> usize {
        self.channels * self.voxels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    #[inline]
    pub fn coords(&self, v: usize) -> [usize; 3] {
        let x = v % self.width;
        let y = (v / self.width) % self.height;
        let z = v / (self.width * self.height);
        [z, y, x]
    }

    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        Self::new(channels, self.dims(), self.spacing)
    }

    /// True when the spatial extents agree (channels and spacing ignored).
    pub fn same_grid(&self, other: &GridShape) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn ensure_same_grid(&self, other: &GridShape, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }
}

/// What a real-valued field holds. Carried through the svol header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Logits,
    Probabilities,
    Field,
}

/// What a label volume holds; fixes the admissible id range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSemantics {
    BvLabels,
    LobeLabels,
    SegmentPartition,
}

impl LabelSemantics {
    pub fn class_count(self) -> u8 {
        match self {
            LabelSemantics::BvLabels | LabelSemantics::SegmentPartition => 19,
            LabelSemantics::LobeLabels => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelSemantics::BvLabels => "bv_labels",
            LabelSemantics::LobeLabels => "lobe_labels",
            LabelSemantics::SegmentPartition => "segment_partition",
        }
    }
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Logits => "logits",
            FieldKind::Probabilities => "probabilities",
            FieldKind::Field => "field",
        }
    }
}

/// Dense C×D×H×W real grid stored channel-major, `(c, z, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField4D {
    shape: GridShape,
    kind: FieldKind,
    data: Vec<f64>,
}

impl ScalarField4D {
    pub fn from_vec(shape: GridShape, kind: FieldKind, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} vs shape {}",
                data.len(),
                shape.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { shape, kind, data })
    }

    pub fn zeros(shape: GridShape, kind: FieldKind) -> Self {
        Self {
            shape,
            kind,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: GridShape, kind: FieldKind, value: f64) -> Self {
        Self {
            shape,
            kind,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.shape.voxels() + self.shape.index(z, y, x)]
    }
}

/// A [`ScalarField4D`] whose channels form a distribution at every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField(ScalarField4D);

impl ProbabilityField {
    /// Tolerance on the per-voxel channel sum.
    pub const SUM_TOLERANCE: f64 = 1e-5;

    pub fn new(field: ScalarField4D) -> Result<Self> {
        let shape = *field.shape();
        let n = shape.voxels();
        let data = field.data();
        for v in 0..n {
            let mut sum = 0.0;
            for c in 0..shape.channels() {
                let p = data[c * n + v];
                if p < 0.0 {
                    return Err(Error::NotNormalized(shape.coords(v)));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::NotNormalized(shape.coords(v)));
            }
        }
        Ok(Self(field.with_kind(FieldKind::Probabilities)))
    }

    pub(crate) fn from_unchecked(field: ScalarField4D) -> Self {
        Self(field)
    }

    pub fn field(&self) -> &ScalarField4D {
        &self.0
    }

    pub fn into_field(self) -> ScalarField4D {
        self.0
    }

    pub fn shape(&self) -> &GridShape {
        self.0.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

/// Dense D×H×W categorical grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    shape: GridShape,
    semantics: LabelSemantics,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn from_vec(shape: GridShape, semantics: LabelSemantics, data: Vec<u8>) -> Result<Self> {
        if shape.channels() != 1 {
            return Err(Error::InvalidShape(format!(
                "label volumes have one channel, got {}",
                shape.channels()
            )));
        }
        if data.len() != shape.voxels() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} vs {} voxels",
                data.len(),
                shape.voxels()
            )));
        }
        let max = semantics.class_count();
        if let Some(v) = data.iter().position(|&l| l >= max) {
            return Err(Error::LabelOutOfRange {
                label: data[v],
                voxel: shape.coords(v),
                semantics: semantics.as_str(),
                max: max - 1,
            });
        }
        Ok(Self {
            shape,
            semantics,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], semantics: LabelSemantics) -> Result<Self> {
        let shape = GridShape::new(1, dims, spacing)?;
        Ok(Self {
            shape,
            semantics,
            data: vec![0; shape.voxels()],
        })
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn semantics(&self) -> LabelSemantics {
        self.semantics
    }

    /// Reinterprets the ids under other semantics, re-validating the range.
    pub fn with_semantics(self, semantics: LabelSemantics) -> Result<Self> {
        Self::from_vec(self.shape, semantics, self.data)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.shape.index(z, y, x)]
    }

    /// Sets a voxel, validating the id.
    pub fn set(&mut self, z: usize, y: usize, x: usize, label: u8) -> Result<()> {
        let max = self.semantics.class_count();
        if label >= max {
            return Err(Error::LabelOutOfRange {
                label,
                voxel: [z, y, x],
                semantics: self.semantics.as_str(),
                max: max - 1,
            });
        }
        let i = self.shape.index(z, y, x);
        self.data[i] = label;
        Ok(())
    }
}

/// Either kind of volume an svol file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Field(ScalarField4D),
    Labels(LabelVolume),
}

impl Volume {
    pub fn shape(&self) -> &GridShape {
        match self {
            Volume::Field(f) => f.shape(),
            Volume::Labels(l) => l.shape(),
        }
    }

    pub fn into_labels(self) -> Option<LabelVolume> {
        match self {
            Volume::Labels(l) => Some(l),
            Volume::Field(_) => None,
        }
    }

    pub fn into_field(self) -> Option<ScalarField4D> {
        match self {
            Volume::Field(f) => Some(f),
            Volume::Labels(_) => None,
        }
    }
}

impl From<ScalarField4D> for Volume {
    fn from(f: ScalarField4D) -> Self {
        Volume::Field(f)
    }
}

impl From<LabelVolume> for Volume {
    fn from(l: LabelVolume) -> Self {
        Volume::Labels(l)
    }
}

/// Per-voxel softmax over channels with max subtraction.
pub fn softmax_channels(logits: &ScalarField4D) -> Result<ProbabilityField> {
    let shape = *logits.shape();
    let channels = shape.channels();
    if channels < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax needs at least 2 channels, got {channels}"
        )));
    }
    if let Some(i) = logits.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let n = shape.voxels();
    let src = logits.data();
    let mut out = vec![0.0; shape.len()];
    // Channel-outer loops keep memory access sequential; the per-voxel
    // accumulation order is unchanged.
    exec::for_each_block_mut(&mut out, n, |start, chans| {
        let len = chans[0].len();
        let mut max = vec![f64::NEG_INFINITY; len];
        for c in 0..channels {
            let s = &src[c * n + start..c * n + start + len];
            for (m, &x) in max.iter_mut().zip(s) {
                *m = m.max(x);
            }
        }
        let mut sum = vec![0.0; len];
        for (c, ch) in chans.iter_mut().enumerate() {
            let s = &src[c * n + start..c * n + start + len];
            for ((o, &x), (m, acc)) in ch.iter_mut().zip(s).zip(max.iter().zip(sum.iter_mut())) {
                let e = (x - m).exp();
                *o = e;
                *acc += e;
            }
        }
        for acc in sum.iter_mut() {
            *acc = 1.0 / *acc;
        }
        for ch in chans.iter_mut() {
            for (o, inv) in ch.iter_mut().zip(&sum) {
                *o *= inv;
            }
        }
    });
    Ok(ProbabilityField::from_unchecked(ScalarField4D {
        shape,
        kind: FieldKind::Probabilities,
        data: out,
    }))
}

/// Per-voxel index of the largest channel; ties go to the lowest index.
///
/// Panics if the field has more than 19 channels.
pub fn argmax_labels(probs: &ProbabilityField) -> LabelVolume {
    argmax_field(probs.field())
}

pub(crate) fn argmax_field(field: &ScalarField4D) -> LabelVolume {
    let shape = *field.shape();
    assert!(
        shape.channels() <= SEGMENT_CHANNELS,
        "argmax over {} channels exceeds the segment label range",
        shape.channels()
    );
    let n = shape.voxels();
    let data = field.data();
    let labels = (0..n)
        .map(|v| {
            let mut best = 0;
            let mut best_val = data[v];
            for c in 1..shape.channels() {
                let p = data[c * n + v];
                if p > best_val {
                    best = c;
                    best_val = p;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume {
        shape: GridShape::new(1, shape.dims(), shape.spacing()).expect("valid shape"),
        semantics: LabelSemantics::SegmentPartition,
        data: labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(channels: usize, dims: [usize; 3], data: Vec<f64>) -> ScalarField4D {
        ScalarField4D::from_vec(
            GridShape::cube(channels, dims).unwrap(),
            FieldKind::Logits,
            data,
        )
        .unwrap()
    }

    #[test]
    fn shape_rejects_zero_dims_and_bad_spacing() {
        assert!(GridShape::new(1, [0, 2, 2], [1.0; 3]).is_err());
        assert!(GridShape::new(0, [2, 2, 2], [1.0; 3]).is_err());
        assert!(GridShape::new(1, [2, 2, 2], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn coords_invert_index() {
        let s = GridShape::cube(1, [3, 4, 5]).unwrap();
        for v in 0..s.voxels() {
            let [z, y, x] = s.coords(v);
            assert_eq!(s.index(z, y, x), v);
        }
    }

    #[test]
    fn softmax_uniform_on_zero_logits() {
        let f = field(19, [2, 2, 2], vec![0.0; 19 * 8]);
        let p = softmax_channels(&f).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 19.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let f = field(2, [1, 1, 1], vec![1000.0, 1000.0]);
        let p = softmax_channels(&f).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_extended_precision_oracle() {
        // Taylor series for exp on the shifted exponents, independent of libm.
        // Frozen values below were cross-checked with 40-digit mpmath.
        fn exp_series(x: f64) -> f64 {
            let mut term = 1.0f64;
            let mut sum = 1.0f64;
            for k in 1..60 {
                term *= x / k as f64;
                sum += term;
            }
            sum
        }
        let e: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|&l: &f64| exp_series(l - 3.0)).collect();
        let s: f64 = e.iter().sum();
        let expected: Vec<f64> = e.iter().map(|v| v / s).collect();
        // 0.09003057317038046, 0.24472847105479764, 0.6652409557748219
        assert!((expected[0] - 0.090_030_573_170_380_46).abs() < 1e-15);
        let f = field(3, [1, 1, 1], vec![1.0, 2.0, 3.0]);
        let p = softmax_channels(&f).unwrap();
        for (a, b) in p.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_single_channel() {
        let f = field(1, [1, 1, 1], vec![0.0]);
        assert!(softmax_channels(&f).is_err());
    }

    #[test]
    fn non_finite_values_rejected() {
        let s = GridShape::cube(2, [1, 1, 1]).unwrap();
        let err = ScalarField4D::from_vec(s, FieldKind::Logits, vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(1)));
    }

    #[test]
    fn argmax_ties_go_low() {
        let f = field(19, [1, 2, 1], vec![1.0 / 19.0; 38]);
        let p = ProbabilityField::new(f).unwrap();
        assert_eq!(argmax_labels(&p).data(), &[0, 0]);
    }

    #[test]
    fn argmax_dominant_channel() {
        let mut data = vec![0.1 / 18.0; 19];
        data[7] = 0.9;
        let p = ProbabilityField::new(field(19, [1, 1, 1], data)).unwrap();
        assert_eq!(argmax_labels(&p).data(), &[7]);
    }

    #[test]
    fn probability_field_validates_sum() {
        let f = field(2, [1, 1, 1], vec![0.5, 0.6]);
        assert!(matches!(
            ProbabilityField::new(f),
            Err(Error::NotNormalized([0, 0, 0]))
        ));
    }

    #[test]
    fn label_range_checked_per_semantics() {
        let s = GridShape::cube(1, [1, 1, 2]).unwrap();
        assert!(LabelVolume::from_vec(s, LabelSemantics::LobeLabels, vec![0, 6]).is_err());
        assert!(LabelVolume::from_vec(s, LabelSemantics::BvLabels, vec![0, 18]).is_ok());
        assert!(LabelVolume::from_vec(s, LabelSemantics::BvLabels, vec![19, 0]).is_err());
    }
}
