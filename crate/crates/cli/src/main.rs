//! `lobeseg`: phantom generation, loss evaluation, logit-field optimization
//! and evaluation from the command line. Machine output goes to stdout as
//! JSON (or JSON lines); progress and errors go to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use lobeseg::anatomy::{derive_regions, hierarchy, lobe_consistency, AnatomyHierarchy, RegionPartition};
use lobeseg::losses::{evaluate_probs, total_loss, ConsistencyNorm, LossConfig};
use lobeseg::metrics::{count_holes, mapped_dice};
use lobeseg::optimizer::{grad_check, optimize_logits_with, GradScale, OptimizeConfig};
use lobeseg::phantom::{generate_phantom, synthesize_gt_by_distance, PhantomSpec};
use lobeseg::volume::{
    export_slice_pgm, read_svol, write_svol, Axis, LabelVolume, ProbabilityField, ScalarField4D,
    Volume,
};
use lobeseg::Error;

#[derive(Parser)]
#[command(name = "lobeseg", version, about = "Anatomy-hierarchy supervised segment partitioning")]
struct Cli {
    /// Worker threads; 1 is the sequential reference mode, 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lung phantom.
    Phantom(PhantomArgs),
    /// Synthesize a segment partition from tree labels by nearest distance.
    SynthGt(SynthGtArgs),
    /// Evaluate the loss breakdown on logits or probabilities.
    Loss(LossArgs),
    /// Optimize a free logit field against the loss.
    Optimize(OptimizeArgs),
    /// Mapped Dice and hole count of a predicted partition.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheckArgs),
    /// Write one slice of a volume as a PGM image.
    ExportSlice(ExportSliceArgs),
    /// Print the class-id registry.
    Registry,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    branch_depth: Option<usize>,
}

#[derive(Args)]
struct SynthGtArgs {
    #[arg(long)]
    bv: PathBuf,
    #[arg(long)]
    lobe: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LossWeights {
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    #[arg(long, default_value = "mean", value_parser = ["sum", "mean"])]
    consistency_norm: String,
}

impl LossWeights {
    fn config(&self) -> Result<LossConfig, Error> {
        Ok(LossConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            consistency_norm: self.consistency_norm.parse::<ConsistencyNorm>()?,
            ..LossConfig::default()
        })
    }
}

#[derive(Args)]
#[group(id = "input", required = true, multiple = false, args = ["logits", "probs"])]
struct LossArgs {
    #[arg(long)]
    logits: Option<PathBuf>,
    #[arg(long)]
    probs: Option<PathBuf>,
    #[arg(long)]
    bv: PathBuf,
    #[arg(long)]
    lobe: PathBuf,
    #[command(flatten)]
    weights: LossWeights,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    bv: PathBuf,
    #[arg(long)]
    lobe: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    init_sigma: f64,
    #[arg(long, default_value_t = 10)]
    log_period: usize,
    /// Gradient scaling before the update: per-voxel or raw.
    #[arg(long, default_value = "per-voxel", value_parser = ["per-voxel", "raw"])]
    grad_scale: String,
    #[command(flatten)]
    weights: LossWeights,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    structure_gt: PathBuf,
    /// Lobe labels; adds the lobe-consistency fraction to the report.
    #[arg(long)]
    lobe: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    bv: PathBuf,
    #[arg(long)]
    lobe: PathBuf,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    weights: LossWeights,
}

#[derive(Args)]
struct ExportSliceArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_parser = ["z", "y", "x"])]
    axis: String,
    #[arg(long)]
    index: usize,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    #[arg(long)]
    out: PathBuf,
}

fn load_labels(path: &Path) -> Result<LabelVolume, Error> {
    read_svol(path)?.into_labels().ok_or_else(|| {
        Error::InvalidArgument(format!("{}: expected a u8 label volume", path.display()))
    })
}

fn load_field(path: &Path) -> Result<ScalarField4D, Error> {
    read_svol(path)?.into_field().ok_or_else(|| {
        Error::InvalidArgument(format!("{}: expected an f32 field", path.display()))
    })
}

fn load_regions(bv: &Path, lobe: &Path, h: &AnatomyHierarchy) -> Result<RegionPartition, Error> {
    derive_regions(&load_labels(bv)?, &load_labels(lobe)?, h)
}

fn counts_by_name(labels: &LabelVolume, name: impl Fn(u8) -> &'static str) -> Value {
    let mut counts = [0usize; 256];
    for &l in labels.data() {
        counts[l as usize] += 1;
    }
    let map: serde_json::Map<String, Value> = (1..=255u8)
        .filter(|&l| counts[l as usize] > 0)
        .map(|l| (name(l).to_string(), json!(counts[l as usize])))
        .collect();
    Value::Object(map)
}

fn print_json(value: &Value) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

fn run(command: Command) -> Result<(), Error> {
    let h = hierarchy();
    match command {
        Command::Phantom(a) => {
            let mut spec = PhantomSpec::cube(a.size, a.seed);
            if let Some(r) = a.radius {
                spec.tube_radius = r;
            }
            if let Some(d) = a.branch_depth {
                spec.branch_depth = d;
            }
            let bundle = generate_phantom(&spec, &h)?;
            bundle.write_to_dir(&a.out_dir, &h)?;
            eprintln!("phantom written to {}", a.out_dir.display());
            print_json(&json!({
                "out_dir": a.out_dir,
                "dims": spec.dims,
                "seed": spec.seed,
                "bv_voxels": counts_by_name(&bundle.bv, |s| h.segment_name(s)),
                "lobe_voxels": counts_by_name(&bundle.lobe, |l| h.lobe_name(l)),
            }));
        }
        Command::SynthGt(a) => {
            let gt = synthesize_gt_by_distance(&load_labels(&a.bv)?, &load_labels(&a.lobe)?, &h)?;
            write_svol(&Volume::Labels(gt.clone()), &a.out)?;
            print_json(&json!({
                "out": a.out,
                "segment_voxels": counts_by_name(&gt, |s| h.segment_name(s)),
            }));
        }
        Command::Loss(a) => {
            let r = load_regions(&a.bv, &a.lobe, &h)?;
            let cfg = a.weights.config()?;
            let breakdown = match (a.logits, a.probs) {
                (Some(path), None) => total_loss(&load_field(&path)?, &r, &h, &cfg)?,
                (None, Some(path)) => {
                    let p = ProbabilityField::new(load_field(&path)?)?;
                    evaluate_probs(&p, &r, &h, &cfg, None)?
                }
                _ => unreachable!("clap enforces exactly one input"),
            };
            print_json(&serde_json::to_value(breakdown)?);
        }
        Command::Optimize(a) => {
            let r = load_regions(&a.bv, &a.lobe, &h)?;
            let cfg = OptimizeConfig {
                iterations: a.iters,
                learning_rate: a.lr,
                momentum: a.momentum,
                init_sigma: a.init_sigma,
                seed: a.seed,
                loss: a.weights.config()?,
                log_period: a.log_period,
                grad_scale: if a.grad_scale == "raw" {
                    GradScale::Raw
                } else {
                    GradScale::PerVoxel
                },
            };
            fs::create_dir_all(&a.out_dir).map_err(|e| io_error(&a.out_dir, e))?;
            let trace = optimize_logits_with(&r, &h, &cfg, |e| {
                println!("{}", serde_json::to_string(e).expect("finite trace"));
                eprintln!("iter {:>5}  total {:.6}", e.iteration, e.loss.total);
            })?;
            let trace_path = a.out_dir.join("trace.jsonl");
            fs::write(&trace_path, trace.to_jsonl()).map_err(|e| io_error(&trace_path, e))?;
            write_svol(
                &Volume::Field(trace.final_logits.clone()),
                a.out_dir.join("logits.svol"),
            )?;
            write_svol(
                &Volume::Labels(trace.final_partition.clone()),
                a.out_dir.join("partition.svol"),
            )?;
        }
        Command::Eval(a) => {
            let pred = load_labels(&a.pred)?;
            let gt = load_labels(&a.structure_gt)?;
            let mut report = json!({
                "mapped_dice": mapped_dice(&pred, &gt)?,
                "holes": count_holes(&pred)?,
            });
            if let Some(lobe) = a.lobe {
                report["lobe_consistency"] = json!(lobe_consistency(&pred, &load_labels(&lobe)?, &h)?);
            }
            print_json(&report);
        }
        Command::GradCheck(a) => {
            let r = load_regions(&a.bv, &a.lobe, &h)?;
            let report = grad_check(&r, &h, &a.weights.config()?, a.samples, a.seed)?;
            print_json(&serde_json::to_value(report)?);
        }
        Command::ExportSlice(a) => {
            let volume = read_svol(&a.input)?;
            let axis: Axis = a.axis.parse()?;
            export_slice_pgm(&volume, axis, a.index, a.channel, &a.out)?;
            print_json(&json!({
                "out": a.out,
                "axis": a.axis,
                "index": a.index,
                "channel": a.channel,
            }));
        }
        Command::Registry => {
            print_json(&serde_json::to_value(h.registry())?);
        }
    }
    Ok(())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NumericalAbort(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
