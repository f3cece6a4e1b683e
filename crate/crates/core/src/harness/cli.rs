//! The `hvp` command-line front end.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::config::ExperimentConfig;
use super::io::{
    load_checkpoint, save_checkpoint, write_curve_csv, write_manifest, write_metrics_csv, write_samples,
    SampleIndex, ScheduleParams,
};
use super::suites::{gradient_suite, oracle_suite};
use crate::diffusion::{GmmOracleDenoiser, GmmPrior, NoiseSchedule};
use crate::error::{HvpError, Result};
use crate::policies::PolicyPair;
use crate::tasks::{make_dataset, ForwardTask, Observation};
use crate::training::{evaluate, mean_metrics, sample_method, train_stage1, train_stage2, EvalMode, MetricsRow};

#[derive(Debug, Parser)]
#[command(name = "hvp", version, about = "Reward-guided diffusion sampling with hierarchical variational policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Policy checkpoint to start from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Stage-1-only versus Stage-1+2.
    TwoStage,
    /// Stochastic versus deterministic controller.
    Stochastic,
    /// Amortized versus refined controls.
    Shvp,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the initial-noise policy.
    TrainStage1(Common),
    /// Train the per-step controller with the noise policy frozen.
    TrainStage2(Common),
    /// Draw amortized samples for the held-out observations.
    Sample(Common),
    /// Draw refined samples for the held-out observations.
    Refine(Common),
    /// Metrics on held-out observations for the configured methods.
    Eval(Common),
    /// Cross-validate the evidence, posterior and Tweedie oracles.
    OracleCheck(Common),
    /// Run one ablation and write its per-observation rows.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        which: Ablation,
    },
    /// Finite-difference checks of every differentiable loss.
    Gradcheck(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainStage1(_) => "train-stage1",
            Command::TrainStage2(_) => "train-stage2",
            Command::Sample(_) => "sample",
            Command::Refine(_) => "refine",
            Command::Eval(_) => "eval",
            Command::OracleCheck(_) => "oracle-check",
            Command::Ablate { .. } => "ablate",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::TrainStage1(c)
            | Command::TrainStage2(c)
            | Command::Sample(c)
            | Command::Refine(c)
            | Command::Eval(c)
            | Command::OracleCheck(c)
            | Command::Gradcheck(c) => c,
            Command::Ablate { common, .. } => common,
        }
    }
}

/// Everything a command needs, built from the effective config.
struct Run {
    cfg: ExperimentConfig,
    prior: GmmPrior,
    task: ForwardTask,
    sched: NoiseSchedule,
    den: GmmOracleDenoiser,
    checkpoint: Option<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(o) = &common.out {
            cfg.out = o.clone();
        }
        let prior = cfg.build_prior()?;
        let task = cfg.task()?;
        let sched = cfg.schedule()?;
        std::fs::create_dir_all(&cfg.out)?;
        Ok(Run {
            den: GmmOracleDenoiser::new(prior.clone()),
            prior,
            task,
            sched,
            checkpoint: common.checkpoint.clone(),
            outputs: Vec::new(),
            cfg,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.cfg.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn policies(&self) -> Result<PolicyPair> {
        let Some(path) = &self.checkpoint else {
            return self.cfg.policies();
        };
        let (pols, params) = load_checkpoint(path)?;
        if params != ScheduleParams::of(&self.sched) {
            return Err(HvpError::Config(format!(
                "checkpoint schedule {params:?} differs from the configured one"
            )));
        }
        if pols.dim() != self.task.dim() || pols.cond_dim() != self.task.cond_dim() {
            return Err(HvpError::Config("checkpoint dimensions do not match the configured task".into()));
        }
        Ok(pols)
    }

    fn train_data(&self) -> Result<Vec<Observation>> {
        make_dataset(&self.task, &self.prior, self.cfg.dataset_size, self.cfg.seed, 0)
    }

    /// Held-out observations use ids past the training range.
    fn heldout(&self) -> Result<Vec<Observation>> {
        make_dataset(
            &self.task,
            &self.prior,
            self.cfg.heldout_size,
            self.cfg.seed,
            self.cfg.dataset_size as u64,
        )
    }

    fn train(&mut self, stage: u8, pols: &mut PolicyPair) -> Result<()> {
        let data = self.train_data()?;
        let tc = self.cfg.train_config(stage);
        let result = if stage == 1 {
            train_stage1(&tc, &self.task, &data, &self.den, &self.sched, pols, &self.cfg.loss)
        } else {
            train_stage2(&tc, &self.task, &data, &self.den, &self.sched, pols, &self.cfg.loss)
        };
        let ckpt = self.path(&format!("stage{stage}.ckpt"));
        // On divergence the policies hold the last good parameters.
        save_checkpoint(&ckpt, pols, &self.sched)?;
        let curve = result?;
        let p = self.path(&format!("loss_stage{stage}.csv"));
        write_curve_csv(p, &curve)?;
        if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
            eprintln!("stage {stage}: {} epochs, loss {first:.6e} -> {last:.6e}", curve.len());
        }
        Ok(())
    }

    fn eval(&self, pols: &PolicyPair, modes: &[EvalMode], obs: &[Observation]) -> Result<Vec<(u64, MetricsRow)>> {
        let ecfg = self.cfg.eval_config();
        let mut rows = Vec::new();
        for &m in modes {
            let per = evaluate(pols, &self.den, &self.sched, &self.task, obs, m, &ecfg)?;
            let agg = mean_metrics(&per);
            rows.extend(per.into_iter().map(|r| (self.cfg.seed, r)));
            if let Some(a) = agg {
                println!(
                    "{:<12} mse {:.6e}  psnr {:.4}  residual {:.6e}  loglik {:.6e}  denoiser {}  policy {}",
                    m.name(),
                    a.mse,
                    a.psnr,
                    a.measurement_residual,
                    a.terminal_loglik,
                    a.denoiser_calls,
                    a.policy_calls
                );
                rows.push((self.cfg.seed, a));
            }
        }
        Ok(rows)
    }

    fn samples(&mut self, pols: &PolicyPair, mode: EvalMode) -> Result<()> {
        let obs = self.heldout()?;
        let refs: Vec<&Observation> = obs.iter().collect();
        let ecfg = self.cfg.eval_config();
        let (_, traj) = sample_method(pols, &self.den, &self.sched, &self.task, &refs, mode, &ecfg)?;
        let k = ecfg.rollouts_per_obs.max(1);
        let index: Vec<SampleIndex> = traj
            .ids
            .iter()
            .enumerate()
            .map(|(i, &rollout_id)| SampleIndex {
                obs_id: obs[i / k].id,
                rollout_id,
            })
            .collect();
        let p = self.path(&format!("samples_{}.hvpx", mode.name()));
        write_samples(&p, traj.samples(), &index)?;
        self.outputs.push(super::io::sidecar_path(&p));
        println!(
            "{} samples: {} rows, {} denoiser and {} policy evaluations per trajectory",
            mode.name(),
            traj.rows(),
            traj.counts.denoiser,
            traj.counts.policy + traj.counts.noise_policy
        );
        Ok(())
    }

    fn finish(&mut self, command: &str) -> Result<()> {
        let manifest = self.cfg.out.join(format!("manifest_{command}.json"));
        write_manifest(
            manifest,
            command,
            self.cfg.seed,
            &self.cfg.serialize(),
            self.checkpoint.as_deref(),
            &self.outputs,
        )
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HVP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| HvpError::Config(format!("HVP_THREADS must be a positive integer, got `{v}`")))?;
        // Fails only if a pool already exists, in which case it stays as is.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn report(name: &str, passed: bool, detail: &str) {
    println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let command = cli.command.name();
    let mut run = Run::new(cli.command.common())?;
    match &cli.command {
        Command::TrainStage1(_) => {
            let mut pols = run.policies()?;
            run.train(1, &mut pols)?;
        }
        Command::TrainStage2(_) => {
            if run.checkpoint.is_none() {
                eprintln!("no checkpoint given: stage 2 starts from a zero noise policy");
            }
            let mut pols = run.policies()?;
            run.train(2, &mut pols)?;
        }
        Command::Sample(_) => {
            let pols = run.policies()?;
            let mode = if run.checkpoint.is_some() { EvalMode::Ahvp } else { EvalMode::Unguided };
            run.samples(&pols, mode)?;
        }
        Command::Refine(_) => {
            let pols = run.policies()?;
            run.samples(&pols, EvalMode::Shvp)?;
        }
        Command::Eval(_) => {
            let pols = run.policies()?;
            let modes = if run.checkpoint.is_some() {
                run.cfg.eval_methods.clone()
            } else {
                vec![EvalMode::Unguided]
            };
            let obs = run.heldout()?;
            let rows = run.eval(&pols, &modes, &obs)?;
            let p = run.path("metrics.csv");
            write_metrics_csv(p, &rows)?;
        }
        Command::OracleCheck(_) => {
            let checks = oracle_suite(run.cfg.seed, 200_000)?;
            for c in &checks {
                report(&c.name, c.passed, &c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            run.finish(command)?;
            if failed > 0 {
                return Err(HvpError::Tolerance(format!("{failed} oracle checks failed")));
            }
            return Ok(());
        }
        Command::Gradcheck(_) => {
            let checks = gradient_suite(run.cfg.seed, 5, 12)?;
            for c in &checks {
                let detail = format!(
                    "{} points, {} coordinates, worst rel err {:.3e}",
                    c.points, c.coordinates, c.worst_rel_err
                );
                report(&c.name, c.passed(), &detail);
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            run.finish(command)?;
            if failed > 0 {
                return Err(HvpError::Tolerance(format!("{failed} gradient checks failed")));
            }
            return Ok(());
        }
        Command::Ablate { which, .. } => ablate(&mut run, *which)?,
    }
    run.finish(command)
}

fn ablate(run: &mut Run, which: Ablation) -> Result<()> {
    let obs = run.heldout()?;
    let mut pols = run.policies()?;
    let rows = match which {
        Ablation::TwoStage => {
            if run.checkpoint.is_none() {
                run.train(1, &mut pols)?;
            }
            let mut rows = run.eval(&pols, &[EvalMode::Stage1Only], &obs)?;
            run.train(2, &mut pols)?;
            rows.extend(run.eval(&pols, &[EvalMode::Ahvp], &obs)?);
            rows
        }
        Ablation::Stochastic | Ablation::Shvp => {
            if run.checkpoint.is_none() {
                run.train(1, &mut pols)?;
                run.train(2, &mut pols)?;
            }
            let modes = if which == Ablation::Stochastic {
                [EvalMode::Ahvp, EvalMode::AhvpDet]
            } else {
                [EvalMode::Ahvp, EvalMode::Shvp]
            };
            run.eval(&pols, &modes, &obs)?
        }
    };
    let name = match which {
        Ablation::TwoStage => "two-stage",
        Ablation::Stochastic => "stochastic",
        Ablation::Shvp => "shvp",
    };
    let p = run.path(&format!("ablate_{name}.csv"));
    write_metrics_csv(p, &rows)
}

/// Parses arguments and runs; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
