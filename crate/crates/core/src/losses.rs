//! Hierarchy-supervised loss terms with analytic gradients.
//!
//! Every term returns its value and, when handed a [`GradSink`], adds
//! `weight · ∂term/∂p` into a 19-channel buffer laid out like the
//! probability field. Lobe-level terms route their gradient through the max
//! witnesses of the [`LobeProbabilityField`]. [`total_loss_and_grad`] chains
//! the accumulated probability gradient through the softmax Jacobian.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{lobe_probability, AnatomyHierarchy, LobeProbabilityField, RegionPartition};
use crate::error::{Error, Result};
use crate::exec;
use crate::volume::{
    softmax_channels, FieldKind, LabelVolume, ProbabilityField, ScalarField4D, LOBE_CHANNELS,
    SEGMENT_CHANNELS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyNorm {
    Sum,
    /// Divide by C·D·H·W.
    #[default]
    Mean,
}

impl std::str::FromStr for ConsistencyNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ConsistencyNorm::Sum),
            "mean" => Ok(ConsistencyNorm::Mean),
            other => Err(Error::InvalidArgument(format!(
                "consistency normalization must be sum or mean (got {other:?})"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the lobe-level (indirect) terms.
    pub lambda1: f64,
    /// Weight of the Laplacian consistency term.
    pub lambda2: f64,
    /// Lower clamp inside logarithms.
    pub log_epsilon: f64,
    /// Smoothing added to Dice numerators and denominators.
    pub dice_epsilon: f64,
    pub consistency_norm: ConsistencyNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            log_epsilon: 1e-12,
            dice_epsilon: 1e-6,
            consistency_norm: ConsistencyNorm::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 >= 0.0
            && self.lambda2 >= 0.0
            && self.lambda1.is_finite()
            && self.lambda2.is_finite()
            && self.log_epsilon > 0.0
            && self.dice_epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "loss config out of range: {self:?}"
            )))
        }
    }
}

/// Values of every loss component and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recall_bv: f64,
    pub ce_bv: f64,
    pub dice_lobe: f64,
    pub ce_lobe: f64,
    pub consistency: f64,
    pub directly: f64,
    pub indirectly: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    fn assemble(
        recall_bv: f64,
        ce_bv: f64,
        dice_lobe: f64,
        ce_lobe: f64,
        consistency: f64,
        cfg: &LossConfig,
    ) -> Self {
        let directly = recall_bv + ce_bv;
        let indirectly = dice_lobe + ce_lobe;
        Self {
            recall_bv,
            ce_bv,
            dice_lobe,
            ce_lobe,
            consistency,
            directly,
            indirectly,
            total: directly + cfg.lambda1 * indirectly + cfg.lambda2 * consistency,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recall_bv,
            self.ce_bv,
            self.dice_lobe,
            self.ce_lobe,
            self.consistency,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Destination for `weight · ∂loss/∂p`, channel-major like the source field.
pub struct GradSink<'a> {
    pub grad: &'a mut [f64],
    pub weight: f64,
}

impl<'a> GradSink<'a> {
    pub fn new(grad: &'a mut [f64], weight: f64) -> Self {
        Self { grad, weight }
    }
}

fn check_grid(p: &ScalarField4D, r: &RegionPartition) -> Result<()> {
    p.shape().ensure_same_grid(r.shape(), "field vs region partition")
}

fn check_sink(sink: &Option<GradSink<'_>>, len: usize) -> Result<()> {
    match sink {
        Some(s) if s.grad.len() != len => Err(Error::ShapeMismatch(format!(
            "gradient buffer of {} values for a field of {len}",
            s.grad.len()
        ))),
        _ => Ok(()),
    }
}

fn require_segment_channels(p: &ScalarField4D) -> Result<()> {
    if p.shape().channels() != SEGMENT_CHANNELS {
        return Err(Error::InvalidArgument(format!(
            "expected {SEGMENT_CHANNELS} channels, got {}",
            p.shape().channels()
        )));
    }
    Ok(())
}

/// `1 − mean_c (Σ_{v∈BV_c} p_c(v) / |BV_c|)` over segment classes present on the tree.
pub fn recall_bv(
    p: &ProbabilityField,
    r: &RegionPartition,
    mut grad: Option<GradSink<'_>>,
) -> Result<f64> {
    let p = p.field();
    check_grid(p, r)?;
    require_segment_channels(p)?;
    check_sink(&grad, p.data().len())?;
    if r.bv_voxels().is_empty() {
        return Err(Error::EmptyBv);
    }
    let n = p.shape().voxels();
    let counts = r.bv_counts();
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let mut sums = [0.0f64; SEGMENT_CHANNELS];
    for &v in r.bv_voxels() {
        let c = r.segment_target()[v] as usize;
        sums[c] += p.data()[c * n + v];
    }
    let mean_recall = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &k)| k > 0)
        .map(|(s, &k)| s / k as f64)
        .sum::<f64>()
        / present;
    if let Some(sink) = grad.as_mut() {
        for &v in r.bv_voxels() {
            let c = r.segment_target()[v] as usize;
            sink.grad[c * n + v] -= sink.weight / (present * counts[c] as f64);
        }
    }
    Ok(1.0 - mean_recall)
}

/// Mean over BV voxels of `−log max(p_target, ε)`.
pub fn ce_bv(
    p: &ProbabilityField,
    r: &RegionPartition,
    log_epsilon: f64,
    mut grad: Option<GradSink<'_>>,
) -> Result<f64> {
    let p = p.field();
    check_grid(p, r)?;
    require_segment_channels(p)?;
    check_sink(&grad, p.data().len())?;
    let bv = r.bv_voxels();
    if bv.is_empty() {
        return Err(Error::EmptyBv);
    }
    let n = p.shape().voxels();
    let count = bv.len() as f64;
    let mut sum = 0.0;
    for &v in bv {
        let c = r.segment_target()[v] as usize;
        let pv = p.data()[c * n + v];
        sum -= pv.max(log_epsilon).ln();
        if let Some(sink) = grad.as_mut() {
            if pv > log_epsilon {
                sink.grad[c * n + v] -= sink.weight / (count * pv);
            }
        }
    }
    Ok(sum / count)
}

/// Segment channel that receives the gradient of lobe channel `k` at `v`.
#[inline]
fn route(q: &LobeProbabilityField, k: usize, v: usize) -> usize {
    if k == 0 {
        0
    } else {
        q.witness(k as u8, v) as usize
    }
}

/// Soft Dice per lobe-level channel over the whole grid, background included
/// as channel 0; `1 − mean` over channels whose target is nonempty.
pub fn dice_lobe(
    q: &LobeProbabilityField,
    r: &RegionPartition,
    dice_epsilon: f64,
    grad: Option<GradSink<'_>>,
) -> Result<f64> {
    q.shape().ensure_same_grid(r.shape(), "lobe field vs region partition")?;
    let n = q.shape().voxels();
    check_sink(&grad, SEGMENT_CHANNELS * n)?;
    let data = q.data();
    let target = r.lobe_target();
    // [intersection_k, sum_q_k, sum_t_k] for k in 0..6
    let sums: [f64; 3 * LOBE_CHANNELS] = exec::sum_blocks_array(n, |range| {
        let mut acc = [0.0; 3 * LOBE_CHANNELS];
        for v in range {
            let t = target[v] as usize;
            for k in 0..LOBE_CHANNELS {
                acc[LOBE_CHANNELS + k] += data[k * n + v];
            }
            acc[t] += data[t * n + v];
            acc[2 * LOBE_CHANNELS + t] += 1.0;
        }
        acc
    });
    let mut num = [0.0; LOBE_CHANNELS];
    let mut den = [0.0; LOBE_CHANNELS];
    let mut active = [false; LOBE_CHANNELS];
    let mut dice_sum = 0.0;
    for k in 0..LOBE_CHANNELS {
        let (inter, sq, st) = (sums[k], sums[LOBE_CHANNELS + k], sums[2 * LOBE_CHANNELS + k]);
        if st > 0.0 {
            active[k] = true;
            num[k] = 2.0 * inter + dice_epsilon;
            den[k] = sq + st + dice_epsilon;
            dice_sum += num[k] / den[k];
        }
    }
    let k_active = active.iter().filter(|&&a| a).count() as f64;
    if let Some(sink) = grad {
        let weight = sink.weight;
        exec::for_each_block_mut(sink.grad, n, |start, chans| {
            for i in 0..chans[0].len() {
                let v = start + i;
                let t = target[v] as usize;
                for k in 0..LOBE_CHANNELS {
                    if !active[k] {
                        continue;
                    }
                    let indicator = if k == t { 2.0 } else { 0.0 };
                    let d = (indicator * den[k] - num[k]) / (den[k] * den[k]);
                    chans[route(q, k, v)][i] -= weight * d / k_active;
                }
            }
        });
    }
    Ok(1.0 - dice_sum / k_active)
}

/// Mean over all voxels of `−log max(q_{target}(v), ε)`, target 0 on background.
pub fn ce_lobe(
    q: &LobeProbabilityField,
    r: &RegionPartition,
    log_epsilon: f64,
    grad: Option<GradSink<'_>>,
) -> Result<f64> {
    q.shape().ensure_same_grid(r.shape(), "lobe field vs region partition")?;
    let n = q.shape().voxels();
    check_sink(&grad, SEGMENT_CHANNELS * n)?;
    let data = q.data();
    let target = r.lobe_target();
    let sum = exec::sum_blocks(n, |range| {
        range
            .map(|v| {
                let t = target[v] as usize;
                -data[t * n + v].max(log_epsilon).ln()
            })
            .sum()
    });
    if let Some(sink) = grad {
        let scale = sink.weight / n as f64;
        exec::for_each_block_mut(sink.grad, n, |start, chans| {
            for i in 0..chans[0].len() {
                let v = start + i;
                let t = target[v] as usize;
                let qv = data[t * n + v];
                if qv > log_epsilon {
                    chans[route(q, t, v)][i] -= scale / qv;
                }
            }
        });
    }
    Ok(sum / n as f64)
}

fn laplacian_channel(src: &[f64], dims: [usize; 3], out: &mut [f64]) {
    let [d, h, w] = dims;
    let plane = h * w;
    out.iter_mut().for_each(|o| *o = 0.0);
    // Each neighbour pair contributes `b − a` to one side and `a − b` to the
    // other. Summing differences keeps constants exactly zero, and pairs are
    // visited so that every voxel accumulates z−, z+, y−, y+, x−, x+ in order.
    for z in 0..d.saturating_sub(1) {
        let (lo, hi) = out[z * plane..(z + 2) * plane].split_at_mut(plane);
        let (a, b) = (&src[z * plane..(z + 1) * plane], &src[(z + 1) * plane..(z + 2) * plane]);
        for i in 0..plane {
            let diff = b[i] - a[i];
            lo[i] += diff;
            hi[i] -= diff;
        }
    }
    for z in 0..d {
        let base = z * plane;
        for y in 0..h.saturating_sub(1) {
            let row = base + y * w;
            let (lo, hi) = out[row..row + 2 * w].split_at_mut(w);
            let (a, b) = (&src[row..row + w], &src[row + w..row + 2 * w]);
            for i in 0..w {
                let diff = b[i] - a[i];
                lo[i] += diff;
                hi[i] -= diff;
            }
        }
    }
    for row in 0..d * h {
        let o = &mut out[row * w..(row + 1) * w];
        let s = &src[row * w..(row + 1) * w];
        for x in 0..w.saturating_sub(1) {
            let diff = s[x + 1] - s[x];
            o[x] += diff;
            o[x + 1] -= diff;
        }
    }
}

/// Six-neighbour Laplacian per channel; out-of-bounds neighbours are omitted
/// and the centre coefficient shrinks with them.
pub fn laplacian(p: &ScalarField4D) -> ScalarField4D {
    let shape = *p.shape();
    let n = shape.voxels();
    let mut out = vec![0.0; shape.len()];
    out.par_chunks_mut(n)
        .zip(p.data().par_chunks(n))
        .for_each(|(dst, src)| laplacian_channel(src, shape.dims(), dst));
    ScalarField4D::from_vec(shape, FieldKind::Field, out).expect("finite stencil output")
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// L1 norm of the Laplacian, optionally divided by C·D·H·W. The gradient is
/// `L(sign(Lp)) / norm`, using that the stencil is self-adjoint.
pub fn consistency_loss(
    p: &ScalarField4D,
    norm: ConsistencyNorm,
    grad: Option<GradSink<'_>>,
) -> Result<f64> {
    check_sink(&grad, p.data().len())?;
    let lap = laplacian(p);
    let total = exec::sum_blocks(lap.data().len(), |range| {
        lap.data()[range].iter().map(|v| v.abs()).sum()
    });
    let divisor = match norm {
        ConsistencyNorm::Sum => 1.0,
        ConsistencyNorm::Mean => p.shape().len() as f64,
    };
    if let Some(sink) = grad {
        let shape = *p.shape();
        let n = shape.voxels();
        let scale = sink.weight / divisor;
        sink.grad
            .par_chunks_mut(n)
            .zip(lap.data().par_chunks(n))
            .for_each(|(dst, lc)| {
                let signs: Vec<f64> = lc.iter().map(|&x| sign(x)).collect();
                let mut back = vec![0.0; n];
                laplacian_channel(&signs, shape.dims(), &mut back);
                for (g, b) in dst.iter_mut().zip(back) {
                    *g += scale * b;
                }
            });
    }
    Ok(total / divisor)
}

fn sink<'a>(g: &'a mut Option<&mut [f64]>, weight: f64) -> Option<GradSink<'a>> {
    g.as_deref_mut().map(|b| GradSink::new(b, weight))
}

/// Evaluates every component on a probability field, accumulating
/// `∂total/∂p` into `grad` when given.
pub fn evaluate_probs(
    p: &ProbabilityField,
    r: &RegionPartition,
    h: &AnatomyHierarchy,
    cfg: &LossConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    require_segment_channels(p.field())?;
    check_grid(p.field(), r)?;
    let q = lobe_probability(p.field(), h)?;
    let recall = recall_bv(p, r, sink(&mut grad, 1.0))?;
    let ce = ce_bv(p, r, cfg.log_epsilon, sink(&mut grad, 1.0))?;
    let dice = dice_lobe(&q, r, cfg.dice_epsilon, sink(&mut grad, cfg.lambda1))?;
    let cel = ce_lobe(&q, r, cfg.log_epsilon, sink(&mut grad, cfg.lambda1))?;
    let cons = consistency_loss(p.field(), cfg.consistency_norm, sink(&mut grad, cfg.lambda2))?;
    Ok(LossBreakdown::assemble(recall, ce, dice, cel, cons, cfg))
}

/// Chains `∂L/∂p` through the per-voxel softmax: `p_c (g_c − Σ_j p_j g_j)`.
pub fn softmax_backward(p: &ProbabilityField, grad_p: &[f64]) -> Vec<f64> {
    let shape = *p.shape();
    let n = shape.voxels();
    let channels = shape.channels();
    let pd = p.data();
    let mut out = vec![0.0; shape.len()];
    exec::for_each_block_mut(&mut out, n, |start, chans| {
        let len = chans[0].len();
        let mut dot = vec![0.0; len];
        for c in 0..channels {
            let range = c * n + start..c * n + start + len;
            for ((d, &pv), &gv) in dot.iter_mut().zip(&pd[range.clone()]).zip(&grad_p[range]) {
                *d += pv * gv;
            }
        }
        for (c, ch) in chans.iter_mut().enumerate() {
            let range = c * n + start..c * n + start + len;
            for (((o, &pv), &gv), d) in ch.iter_mut().zip(&pd[range.clone()]).zip(&grad_p[range]).zip(&dot) {
                *o = pv * (gv - d);
            }
        }
    });
    out
}

/// Loss breakdown at `logits` without the gradient.
pub fn total_loss(
    logits: &ScalarField4D,
    r: &RegionPartition,
    h: &AnatomyHierarchy,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    require_segment_channels(logits)?;
    let p = softmax_channels(logits)?;
    evaluate_probs(&p, r, h, cfg, None)
}

/// Loss breakdown and gradient with respect to the logits.
pub fn total_loss_and_grad(
    logits: &ScalarField4D,
    r: &RegionPartition,
    h: &AnatomyHierarchy,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ScalarField4D)> {
    require_segment_channels(logits)?;
    let p = softmax_channels(logits)?;
    let mut grad_p = vec![0.0; p.data().len()];
    let breakdown = evaluate_probs(&p, r, h, cfg, Some(&mut grad_p))?;
    let grad = softmax_backward(&p, &grad_p);
    let grad = ScalarField4D::from_vec(*logits.shape(), FieldKind::Field, grad)?;
    Ok((breakdown, grad))
}

/// The non-smooth decisions taken while evaluating the loss: lobe max
/// witnesses and Laplacian signs. Two points with equal active sets lie on
/// the same smooth piece of the objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    witnesses: Vec<u8>,
    signs: Vec<i8>,
}

pub fn active_set(logits: &ScalarField4D, h: &AnatomyHierarchy) -> Result<ActiveSet> {
    let p = softmax_channels(logits)?;
    let q = lobe_probability(p.field(), h)?;
    let n = p.shape().voxels();
    let witnesses = (1..=5u8)
        .flat_map(|l| (0..n).map(move |v| (l, v)))
        .map(|(l, v)| q.witness(l, v))
        .collect();
    let signs = laplacian(p.field())
        .data()
        .iter()
        .map(|&x| sign(x) as i8)
        .collect();
    Ok(ActiveSet { witnesses, signs })
}

/// Fully supervised objective: `(1 − mean soft Dice over classes present in
/// labels) + mean CE over all voxels`.
pub fn fsl_loss(
    p: &ProbabilityField,
    labels: &LabelVolume,
    cfg: &LossConfig,
    grad: Option<GradSink<'_>>,
) -> Result<f64> {
    let pf = p.field();
    pf.shape().ensure_same_grid(labels.shape(), "probabilities vs labels")?;
    let channels = pf.shape().channels();
    if let Some(v) = labels.data().iter().position(|&l| l as usize >= channels) {
        return Err(Error::LabelOutOfRange {
            label: labels.data()[v],
            voxel: labels.shape().coords(v),
            semantics: labels.semantics().as_str(),
            max: (channels - 1) as u8,
        });
    }
    check_sink(&grad, pf.data().len())?;
    let n = pf.shape().voxels();
    let data = pf.data();
    let lab = labels.data();
    let mut inter = vec![0.0; channels];
    let mut sum_p = vec![0.0; channels];
    let mut sum_t = vec![0.0; channels];
    let mut ce = 0.0;
    for v in 0..n {
        let t = lab[v] as usize;
        for c in 0..channels {
            sum_p[c] += data[c * n + v];
        }
        inter[t] += data[t * n + v];
        sum_t[t] += 1.0;
        ce -= data[t * n + v].max(cfg.log_epsilon).ln();
    }
    let eps = cfg.dice_epsilon;
    let present: Vec<usize> = (0..channels).filter(|&c| sum_t[c] > 0.0).collect();
    let k = present.len() as f64;
    let dice_mean = present
        .iter()
        .map(|&c| (2.0 * inter[c] + eps) / (sum_p[c] + sum_t[c] + eps))
        .sum::<f64>()
        / k;
    if let Some(sink) = grad {
        for &c in &present {
            let num = 2.0 * inter[c] + eps;
            let den = sum_p[c] + sum_t[c] + eps;
            for v in 0..n {
                let ind = if lab[v] as usize == c { 2.0 } else { 0.0 };
                sink.grad[c * n + v] -= sink.weight * (ind * den - num) / (den * den) / k;
            }
        }
        for v in 0..n {
            let t = lab[v] as usize;
            let pv = data[t * n + v];
            if pv > cfg.log_epsilon {
                sink.grad[t * n + v] -= sink.weight / (n as f64 * pv);
            }
        }
    }
    Ok(1.0 - dice_mean + ce / n as f64)
}
