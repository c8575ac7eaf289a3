//! `edgestereo` command-line tool.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use edgestereo::checkpoint::{save_checkpoint, Checkpoint};
use edgestereo::data::disk::{read_disparity, Manifest};
use edgestereo::data::{pfm, visual, Texture};
use edgestereo::gradcheck::{self, GradCaseResult};
use edgestereo::loss::{EvalAccumulator, DEFAULT_THRESHOLDS};
use edgestereo::train::{train, IterationLog, TrainHooks, TrainState};
use edgestereo::{Dataset, EdgeStereo, EvalReport, Tensor};

use config::RunConfig;

/// Caps the worker threads used for convolutions and data generation.
const THREADS_ENV: &str = "EDGESTEREO_THREADS";

#[derive(Parser)]
#[command(name = "edgestereo", version, about = "Multi-task stereo matching with edge cues")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out = Some(o.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn out_dir(c: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = c.out.clone().ok_or_else(|| anyhow!("no output directory (use --out)"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic stereo dataset with a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        d_max: Option<u32>,
        #[arg(long, value_parser = parse_texture)]
        texture: Option<Texture>,
    },
    /// Run the three-phase training plan.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop before `PHASE:ITERATION` (1-based phase index), leaving a
        /// resumable checkpoint.
        #[arg(long, value_parser = parse_stop)]
        stop_before: Option<(usize, usize)>,
        /// Replaces the configured per-phase iteration counts.
        #[arg(long, value_delimiter = ',')]
        iterations: Option<Vec<usize>>,
        #[arg(long)]
        lr: Option<f64>,
        /// Dataset directory to train on instead of generated data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Print every N-th iteration.
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Predict disparity and edges for one pair or a whole dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires = "right", conflicts_with = "data")]
        left: Option<PathBuf>,
        #[arg(long, requires = "left")]
        right: Option<PathBuf>,
        /// Ground-truth disparity (PFM or 16-bit PNG) for an error map.
        #[arg(long, requires = "left")]
        gt: Option<PathBuf>,
        /// Dataset directory; predictions reuse its disparity file names.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare predicted disparities against a dataset's ground truth.
    Eval {
        /// Directory of predicted PFMs named like the ground truth.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory with a manifest.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Finite-difference check of every differentiable operator.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::MIN_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

fn parse_texture(s: &str) -> Result<Texture, String> {
    match s {
        "value-noise" => Ok(Texture::ValueNoise),
        "random-dot" => Ok(Texture::RandomDot),
        _ => Err(format!("unknown texture `{s}` (value-noise, random-dot)")),
    }
}

fn parse_stop(s: &str) -> Result<(usize, usize), String> {
    let (p, i) = s.split_once(':').ok_or("expected PHASE:ITERATION")?;
    let p: usize = p.parse().map_err(|e| format!("{e}"))?;
    let i: usize = i.parse().map_err(|e| format!("{e}"))?;
    if p == 0 {
        return Err("phases are numbered from 1".into());
    }
    Ok((p - 1, i))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::GenData {
            common,
            count,
            height,
            width,
            d_max,
            texture,
        } => {
            let mut c = common.load()?;
            let g = &mut c.data.generator;
            g.height = height.unwrap_or(g.height);
            g.width = width.unwrap_or(g.width);
            g.d_max = d_max.unwrap_or(g.d_max);
            g.texture = texture.unwrap_or(g.texture);
            let n = count.unwrap_or(c.data.count);
            let dir = out_dir(&c)?;
            let data = Dataset::synthetic(&c.data.generator, n, c.seed)?;
            data.save(&dir)?;
            println!("wrote {n} samples to {}", dir.display());
        }
        Command::Train {
            common,
            resume,
            stop_before,
            iterations,
            lr,
            data,
            log_every,
        } => {
            let mut c = common.load()?;
            if let Some(it) = iterations {
                c.training.iterations = it
                    .try_into()
                    .map_err(|_| anyhow!("--iterations takes three comma-separated counts"))?;
            }
            if let Some(lr) = lr {
                c.training.lr = lr;
            }
            if data.is_some() {
                c.data.manifest = data;
            }
            c.validate()?;
            cmd_train(&c, resume.as_deref(), stop_before, log_every)?;
        }
        Command::Infer {
            common,
            checkpoint,
            left,
            right,
            gt,
            data,
        } => {
            let c = common.load()?;
            let dir = out_dir(&c)?;
            let (model, _) = Checkpoint::load(&checkpoint)?.into_model()?;
            match (left, right, data) {
                (Some(l), Some(r), None) => infer_pair(&model, &l, &r, gt.as_deref(), &dir)?,
                (None, None, Some(d)) => infer_dataset(&model, &d, &dir)?,
                _ => bail!("give either --left and --right, or --data"),
            }
        }
        Command::Eval { pred, gt } => print!("{}", cmd_eval(&pred, &gt)?),
        Command::Gradcheck {
            seed,
            instances,
            eps,
            tolerance,
        } => {
            let results = gradcheck::run_suite(seed, instances, eps, tolerance)?;
            print!("{}", gradcheck_table(&results, tolerance));
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            if !failed.is_empty() {
                eprintln!("gradient check failed for: {}", failed.join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(c: &RunConfig, resume: Option<&Path>, stop_before: Option<(usize, usize)>, log_every: usize) -> anyhow::Result<()> {
    let dir = out_dir(c)?;
    let model_config = c.model.build()?;
    let plan = c.training.plan(&model_config);
    let (train_set, held) = c.data.load(c.seed)?;
    let (mut model, state) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config != model_config {
                bail!("checkpoint {} was written for a different model configuration", p.display());
            }
            ck.into_model()?
        }
        None => (EdgeStereo::new(model_config)?, TrainState::start()),
    };
    fs::write(dir.join("run.toml"), toml::to_string(c)?)?;

    let mut log = |l: &IterationLog| {
        if log_every > 0 && l.iteration % log_every == 0 {
            println!("phase {} iter {:>5} lr {:.2e} loss {:.5}", l.phase, l.iteration, l.lr, l.loss);
        }
    };
    let ckpt_dir = dir.clone();
    let mut on_checkpoint = |m: &EdgeStereo<f32>, s: &TrainState| -> edgestereo::Result<()> {
        if s.iteration == 0 && s.phase_index > 0 {
            save_checkpoint(&ckpt_dir.join(format!("phase{}.ckpt", s.phase_index)), m, s)?;
        }
        save_checkpoint(&ckpt_dir.join("latest.ckpt"), m, s)
    };
    let hooks = TrainHooks {
        stop_before,
        on_iteration: Some(&mut log),
        on_checkpoint: Some(&mut on_checkpoint),
    };
    let state = train(&mut model, &plan, &train_set, c.seed, state, hooks)?;
    write_loss_log(&dir.join("loss.csv"), &plan, &state)?;
    if !state.is_finished(&plan) {
        println!(
            "paused before phase {} iteration {}; resume with --resume {}",
            state.phase_index + 1,
            state.iteration,
            dir.join("latest.ckpt").display()
        );
        return Ok(());
    }
    save_checkpoint(&dir.join("final.ckpt"), &model, &state)?;
    if let Some(held) = held {
        let report = evaluate_model(&model, &held)?;
        fs::write(dir.join("eval.txt"), report.to_string())?;
        print!("held-out:\n{report}");
    }
    println!("wrote {}", dir.join("final.ckpt").display());
    Ok(())
}

fn write_loss_log(path: &Path, plan: &edgestereo::PhasePlan, state: &TrainState) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "phase,iteration,loss")?;
    for (phase, trace) in plan.phases.iter().zip(&state.traces) {
        for (i, l) in trace.iter().enumerate() {
            writeln!(f, "{},{i},{l:e}", phase.id)?;
        }
    }
    Ok(f.flush()?)
}

fn evaluate_model(model: &EdgeStereo<f32>, data: &Dataset) -> anyhow::Result<EvalReport> {
    let mut acc = EvalAccumulator::new(&DEFAULT_THRESHOLDS);
    for i in 0..data.len() {
        let b = data.batch(&[i])?;
        let p = model.predict(&b.left, &b.right)?;
        acc.add(&p.disparity, &b.disparity, &b.valid)?;
    }
    Ok(acc.finish()?)
}

fn batched(t: Tensor<f32>) -> anyhow::Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(t.reshape(&shape)?)
}

fn infer_pair(model: &EdgeStereo<f32>, left: &Path, right: &Path, gt: Option<&Path>, dir: &Path) -> anyhow::Result<()> {
    let l = batched(visual::read_rgb(left)?)?;
    let r = batched(visual::read_rgb(right)?)?;
    let p = model.predict(&l, &r)?;
    pfm::write_pfm(&dir.join("disparity.pfm"), &p.disparity)?;
    visual::write_gray(&dir.join("edges.png"), &p.edge_map)?;
    if let Some(gt) = gt {
        let (d, valid) = read_disparity(gt)?;
        let pred = p.disparity.reshape(d.shape())?;
        visual::colorize_error(&pred, &d, &valid)?.save(dir.join("error.png"))?;
        let mut acc = EvalAccumulator::new(&DEFAULT_THRESHOLDS);
        acc.add(&pred, &d, &valid)?;
        print!("{}", acc.finish()?);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn pred_name(disparity: &Path) -> PathBuf {
    disparity.with_extension("pfm")
}

fn infer_dataset(model: &EdgeStereo<f32>, data_dir: &Path, dir: &Path) -> anyhow::Result<()> {
    let manifest = Manifest::read(data_dir)?;
    for e in &manifest.samples {
        let l = batched(visual::read_rgb(&data_dir.join(&e.left))?)?;
        let r = batched(visual::read_rgb(&data_dir.join(&e.right))?)?;
        let p = model.predict(&l, &r)?;
        let name = pred_name(&e.disparity);
        if let Some(parent) = dir.join(&name).parent() {
            fs::create_dir_all(parent)?;
        }
        pfm::write_pfm(&dir.join(&name), &p.disparity)?;
        let edge_name = name.with_extension("edges.png");
        visual::write_gray(&dir.join(edge_name), &p.edge_map)?;
    }
    println!("wrote {} predictions to {}", manifest.samples.len(), dir.display());
    Ok(())
}

fn cmd_eval(pred_dir: &Path, gt_dir: &Path) -> anyhow::Result<EvalReport> {
    let gt = Dataset::load(gt_dir)?;
    let manifest = Manifest::read(gt_dir)?;
    let mut acc = EvalAccumulator::new(&DEFAULT_THRESHOLDS);
    for (e, s) in manifest.samples.iter().zip(gt.samples()) {
        let path = pred_dir.join(pred_name(&e.disparity));
        let pred = pfm::read_pfm(&path)?;
        let pred = pred
            .reshape(s.disparity.shape())
            .with_context(|| format!("{} does not match the ground-truth extents", path.display()))?;
        acc.add(&pred, &s.disparity, &s.valid)?;
    }
    Ok(acc.finish()?)
}

fn gradcheck_table(results: &[GradCaseResult], tolerance: f64) -> String {
    let mut s = format!("{:<24} {:>9} {:>14}  status (tolerance {tolerance:e})\n", "operator", "instances", "max rel error");
    for r in results {
        s += &format!(
            "{:<24} {:>9} {:>14.3e}  {}\n",
            r.name,
            r.instances,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_flag_is_one_based() {
        assert_eq!(parse_stop("2:5"), Ok((1, 5)));
        assert!(parse_stop("0:5").is_err());
        assert!(parse_stop("2").is_err());
    }

    #[test]
    fn table_marks_failures() {
        let rows = [
            GradCaseResult {
                name: "conv2d",
                instances: 5,
                max_rel_error: 1e-9,
                passed: true,
            },
            GradCaseResult {
                name: "warp_right_to_left",
                instances: 5,
                max_rel_error: 0.3,
                passed: false,
            },
        ];
        let t = gradcheck_table(&rows, 1e-4);
        assert!(t.lines().nth(1).unwrap().ends_with("pass"));
        assert!(t.lines().nth(2).unwrap().starts_with("warp_right_to_left"));
        assert!(t.lines().nth(2).unwrap().ends_with("FAIL"));
    }
}
