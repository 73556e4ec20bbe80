//! Gradient descent on a free per-voxel logit field, and a finite-difference
//! check of the analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anatomy::{AnatomyHierarchy, RegionPartition};
use crate::error::{Error, Result};
use crate::losses::{active_set, total_loss, total_loss_and_grad, LossBreakdown, LossConfig};
use crate::volume::{
    argmax_labels, softmax_channels, FieldKind, GridShape, LabelVolume, ScalarField4D,
    SEGMENT_CHANNELS,
};

/// How the raw gradient is scaled before the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradScale {
    /// Multiply by the number of voxels, so the learning rate is a per-voxel
    /// step size independent of grid size.
    #[default]
    PerVoxel,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub init_sigma: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub log_period: usize,
    pub grad_scale: GradScale,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.01,
            momentum: 0.9,
            init_sigma: 0.01,
            seed: 42,
            loss: LossConfig::default(),
            log_period: 10,
            grad_scale: GradScale::PerVoxel,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let ok = self.iterations >= 1
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.init_sigma >= 0.0
            && self.init_sigma.is_finite()
            && self.log_period >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "optimizer config out of range: {self:?}"
            )))
        }
    }
}

/// One logged iteration: the loss at the logits after `iteration` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeTrace {
    pub entries: Vec<TraceEntry>,
    pub final_logits: ScalarField4D,
    pub final_partition: LabelVolume,
}

impl OptimizeTrace {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("finite trace"));
            out.push('\n');
        }
        out
    }
}

/// Seeded Gaussian logits with the spatial extent of `shape` and 19 channels.
pub fn init_logits(shape: &GridShape, sigma: f64, seed: u64) -> Result<ScalarField4D> {
    let shape = shape.with_channels(SEGMENT_CHANNELS)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        (0..shape.len()).map(|_| normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; shape.len()]
    };
    ScalarField4D::from_vec(shape, FieldKind::Logits, data)
}

pub fn optimize_logits(
    r: &RegionPartition,
    h: &AnatomyHierarchy,
    cfg: &OptimizeConfig,
) -> Result<OptimizeTrace> {
    optimize_logits_with(r, h, cfg, |_| {})
}

/// Runs SGD with momentum (`v ← μv + g; x ← x − lr·v`) from seeded noise,
/// calling `on_log` for every logged entry.
pub fn optimize_logits_with(
    r: &RegionPartition,
    h: &AnatomyHierarchy,
    cfg: &OptimizeConfig,
    mut on_log: impl FnMut(&TraceEntry),
) -> Result<OptimizeTrace> {
    cfg.validate()?;
    if r.bv_voxels().is_empty() {
        return Err(Error::EmptyBv);
    }
    let mut logits = init_logits(r.shape(), cfg.init_sigma, cfg.seed)?;
    let scale = match cfg.grad_scale {
        GradScale::PerVoxel => r.shape().voxels() as f64,
        GradScale::Raw => 1.0,
    };
    let mut velocity = vec![0.0; logits.data().len()];
    let mut entries = Vec::with_capacity(cfg.iterations / cfg.log_period + 2);
    for iteration in 0..=cfg.iterations {
        let (loss, grad) = total_loss_and_grad(&logits, r, h, &cfg.loss)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::NumericalAbort(iteration),
                other => other,
            })?;
        if !loss.is_finite() || grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalAbort(iteration));
        }
        if iteration % cfg.log_period == 0 || iteration == cfg.iterations {
            let entry = TraceEntry { iteration, loss };
            on_log(&entry);
            entries.push(entry);
        }
        if iteration == cfg.iterations {
            break;
        }
        for ((x, v), g) in logits
            .data_mut()
            .iter_mut()
            .zip(velocity.iter_mut())
            .zip(grad.data())
        {
            *v = cfg.momentum * *v + scale * g;
            *x -= cfg.learning_rate * *v;
        }
    }
    let probs = softmax_channels(&logits)?;
    let final_partition = argmax_labels(&probs);
    Ok(OptimizeTrace {
        entries,
        final_logits: logits,
        final_partition,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub samples: usize,
    /// Probes discarded because the ±step points straddled a kink (a change
    /// of max witness or Laplacian sign).
    pub skipped_kinks: usize,
    pub step: f64,
}

/// Largest grid extent accepted by [`grad_check`].
pub const GRAD_CHECK_MAX_EXTENT: usize = 12;
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Compares the analytic gradient of the total loss against central
/// differences at `samples` uniformly drawn (channel, voxel) coordinates of
/// seeded standard-normal logits. Relative error uses the denominator
/// `max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check(
    r: &RegionPartition,
    h: &AnatomyHierarchy,
    cfg: &LossConfig,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if r.shape().dims().iter().any(|&d| d > GRAD_CHECK_MAX_EXTENT) {
        return Err(Error::InvalidArgument(format!(
            "grad check needs a grid of at most {GRAD_CHECK_MAX_EXTENT} per axis, got {:?}",
            r.shape().dims()
        )));
    }
    let shape = r.shape().with_channels(SEGMENT_CHANNELS)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
    let logits = ScalarField4D::from_vec(shape, FieldKind::Logits, data)?;
    grad_check_at(&logits, r, h, cfg, samples, &mut rng)
}

/// [`grad_check`] at caller-supplied logits.
pub fn grad_check_at(
    logits: &ScalarField4D,
    r: &RegionPartition,
    h: &AnatomyHierarchy,
    cfg: &LossConfig,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let (_, grad) = total_loss_and_grad(logits, r, h, cfg)?;
    let base_set = active_set(logits, h)?;
    let step = GRAD_CHECK_STEP;
    let len = logits.data().len();
    let mut checked = 0;
    let mut skipped = 0;
    let mut worst: f64 = 0.0;
    let max_attempts = samples.saturating_mul(20).max(samples);
    while checked < samples && checked + skipped < max_attempts {
        let i = rng.gen_range(0..len);
        let probe = |delta: f64| -> Result<(f64, ScalarField4D)> {
            let mut x = logits.clone();
            x.data_mut()[i] += delta;
            Ok((total_loss(&x, r, h, cfg)?.total, x))
        };
        let (plus, xp) = probe(step)?;
        let (minus, xm) = probe(-step)?;
        if active_set(&xp, h)? != base_set || active_set(&xm, h)? != base_set {
            skipped += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * step);
        let analytic = grad.data()[i];
        let denom = analytic.abs().max(fd.abs()).max(1e-8);
        worst = worst.max((analytic - fd).abs() / denom);
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        samples: checked,
        skipped_kinks: skipped,
        step,
    })
}
