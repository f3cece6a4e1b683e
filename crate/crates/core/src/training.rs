//! Two-stage training, test-time refinement and evaluation.
//!
//! Stage 1 fits the initial-noise policy by backpropagating the terminal
//! reward through the whole chain with controls switched off. Stage 2 fits
//! the controller on on-policy rollouts, treating every visited state as a
//! constant so that each step contributes an independent loss term.

use rand::seq::SliceRandom;

use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{HvpError, Result};
use crate::math::{AdamState, Tensor};
use crate::objective::{elbo_terms, shvp_step_objective, stage1_objective, stage2_objective, KlMode, LossWeights};
use crate::policies::{
    ahvp_rollout, rollout_ids, rollout_with_hook, CallCounts, ControlHook, GuidanceConfig, GuidedTrajectory,
    PolicyPair,
};
use crate::rng::{derive_key, rng_for, NoiseRole};
use crate::tasks::{ForwardTask, Observation, ObservationBatch};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_DATASET: usize = 512;
pub const DEFAULT_HELDOUT: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// 1 trains the noise policy, 2 the controller.
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Observations generated for training; held-out ones use disjoint ids.
    pub dataset_size: usize,
    pub heldout_size: usize,
}

impl TrainConfig {
    pub fn new(stage: u8) -> Self {
        TrainConfig {
            stage,
            epochs: 100,
            batch_size: 64,
            lr: DEFAULT_LR,
            seed: 0,
            dataset_size: DEFAULT_DATASET,
            heldout_size: DEFAULT_HELDOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(HvpError::Parameter(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.batch_size == 0 || self.dataset_size == 0 {
            return Err(HvpError::Parameter("batch and dataset sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HvpError::Parameter(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub n_grad_steps: usize,
    pub lr: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Halve the step per row until the objective does not decrease.
    pub backtracking: bool,
    pub max_halvings: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            n_grad_steps: 5,
            lr: 0.05,
            lambda2: 1.0,
            lambda3: 1.0,
            backtracking: true,
            max_halvings: 30,
        }
    }
}

fn batch_of(task: &ForwardTask, obs: &[&Observation]) -> Result<(ObservationBatch, Vec<u64>)> {
    let b = ObservationBatch::from_observations(task, obs)?;
    let ids = obs.iter().map(|o| o.id).collect();
    Ok((b, ids))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, NoiseRole::Batch, epoch as u64, 0));
    order
}

fn snapshot(p: &PolicyPair) -> PolicyPair {
    p.clone()
}

fn check_finite(loss: f64, grads: &std::collections::HashMap<String, Tensor>, epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(HvpError::numeric("loss", format!("non-finite loss {loss} in epoch {epoch}")));
    }
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(HvpError::numeric(name.clone(), format!("non-finite gradient in epoch {epoch}")));
        }
    }
    Ok(())
}

/// Trains the noise policy in place and returns the per-epoch mean loss.
/// On a non-finite loss the policy is restored to its last good state and
/// an error is returned.
#[allow(clippy::too_many_arguments)]
pub fn train_stage1(
    cfg: &TrainConfig,
    task: &ForwardTask,
    data: &[Observation],
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    pols: &mut PolicyPair,
    weights: &LossWeights,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    weights.validate()?;
    let mut adam = AdamState::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for (k, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let obs: Vec<&Observation> = chunk.iter().map(|&i| &data[i]).collect();
            let (batch, ids) = batch_of(task, &obs)?;
            let seed = derive_key(cfg.seed, NoiseRole::Batch, epoch as u64, k as u64 + 1);
            let (loss, grads) = stage1_objective(pols, den, sched, task, &batch, &ids, seed, weights)?;
            let good = snapshot(pols);
            if let Err(e) = check_finite(loss, &grads, epoch).and_then(|_| {
                adam.step(pols.noise.net.named_params_mut(), &grads)
            }) {
                *pols = good;
                return Err(e);
            }
            total += loss * obs.len() as f64;
        }
        curve.push(total / data.len() as f64);
    }
    Ok(curve)
}

/// Trains the controller in place with the noise policy frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    cfg: &TrainConfig,
    task: &ForwardTask,
    data: &[Observation],
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    pols: &mut PolicyPair,
    weights: &LossWeights,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    weights.validate()?;
    let mut adam = AdamState::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let guidance = pols.guidance().with_kl(true);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for (k, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let obs: Vec<&Observation> = chunk.iter().map(|&i| &data[i]).collect();
            let (batch, ids) = batch_of(task, &obs)?;
            let seed = derive_key(cfg.seed, NoiseRole::Batch, epoch as u64, k as u64 + 1);
            let traj = ahvp_rollout(pols, den, sched, &guidance, &batch, &ids, seed)?;
            let (loss, grads) = stage2_objective(pols, den, sched, task, &batch, &traj, weights)?;
            let good = snapshot(pols);
            if let Err(e) = check_finite(loss, &grads, epoch).and_then(|_| {
                adam.step(pols.step.net.named_params_mut(), &grads)
            }) {
                *pols = good;
                return Err(e);
            }
            total += loss * obs.len() as f64;
        }
        curve.push(total / data.len() as f64);
    }
    Ok(curve)
}

fn axpy_rows(u: &Tensor, grad: &Tensor, steps: &[f64]) -> Tensor {
    let d = u.cols();
    let mut out = u.clone();
    for (r, &s) in steps.iter().enumerate() {
        for i in 0..d {
            out.data_mut()[r * d + i] += s * grad.get(r, i);
        }
    }
    out
}

/// Rollout in which each amortized control is refined by `n_grad_steps`
/// ascent iterations on the per-step objective before the step executes.
#[allow(clippy::too_many_arguments)]
pub fn shvp_refine(
    pols: &PolicyPair,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    task: &ForwardTask,
    obs: &ObservationBatch,
    ids: &[u64],
    rcfg: &RefineConfig,
    seed: u64,
) -> Result<GuidedTrajectory> {
    if !(rcfg.lr > 0.0) || rcfg.lambda2 < 0.0 || rcfg.lambda3 < 0.0 {
        return Err(HvpError::Parameter("refinement needs lr > 0 and nonnegative weights".into()));
    }
    let gamma = pols.gamma;
    let hook = |rows: &ObservationBatch, x: &Tensor, u0: Tensor, t: usize, counts: &mut CallCounts| -> Result<Tensor> {
        let mut u = u0;
        for _ in 0..rcfg.n_grad_steps {
            let (vals, grad) =
                shvp_step_objective(x, &u, t, task, rows, den, sched, gamma, rcfg.lambda2, rcfg.lambda3, counts)?;
            counts.inner_iterations += 1;
            let b = u.rows();
            if !rcfg.backtracking {
                u = axpy_rows(&u, &grad, &vec![rcfg.lr; b]);
                continue;
            }
            let mut step = vec![rcfg.lr; b];
            let mut accepted = vec![false; b];
            for _ in 0..=rcfg.max_halvings {
                let trial_steps: Vec<f64> = (0..b).map(|r| if accepted[r] { 0.0 } else { step[r] }).collect();
                let trial = axpy_rows(&u, &grad, &trial_steps);
                // Line-search evaluations are tallied apart from the
                // per-iteration denoiser budget.
                let mut scratch = CallCounts::default();
                let (tv, _) = shvp_step_objective(
                    x, &trial, t, task, rows, den, sched, gamma, rcfg.lambda2, rcfg.lambda3, &mut scratch,
                )?;
                counts.line_search_evals += accepted.iter().filter(|a| !**a).count() as u64;
                for r in 0..b {
                    if !accepted[r] {
                        if tv[r] >= vals[r] {
                            accepted[r] = true;
                        } else {
                            step[r] *= 0.5;
                        }
                    }
                }
                if accepted.iter().all(|&a| a) {
                    break;
                }
            }
            let final_steps: Vec<f64> = (0..b).map(|r| if accepted[r] { step[r] } else { 0.0 }).collect();
            u = axpy_rows(&u, &grad, &final_steps);
        }
        Ok(u)
    };
    let cfg = pols.guidance();
    rollout_with_hook(pols, den, sched, &cfg, obs, ids, seed, Some(&hook as &ControlHook))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EvalMode {
    Unguided,
    Stage1Only,
    Ahvp,
    AhvpDet,
    Shvp,
}

impl EvalMode {
    pub const ALL: [EvalMode; 5] = [
        EvalMode::Unguided,
        EvalMode::Stage1Only,
        EvalMode::Ahvp,
        EvalMode::AhvpDet,
        EvalMode::Shvp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Unguided => "unguided",
            EvalMode::Stage1Only => "stage1_only",
            EvalMode::Ahvp => "ahvp",
            EvalMode::AhvpDet => "ahvp_det",
            EvalMode::Shvp => "shvp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HvpError::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub rollouts_per_obs: usize,
    pub seed: u64,
    pub refine: RefineConfig,
    /// Also estimate the bound (needs the uncontrolled means).
    pub with_elbo: bool,
    pub kl_mode: KlMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rollouts_per_obs: 16,
            seed: 0,
            refine: RefineConfig::default(),
            with_elbo: false,
            kl_mode: KlMode::Exact,
        }
    }
}

/// Per-observation metrics, each averaged over that observation's rollouts.
/// PSNR uses a unit peak.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: EvalMode,
    pub obs_id: u64,
    pub mse: f64,
    pub psnr: f64,
    pub measurement_residual: f64,
    pub terminal_loglik: f64,
    pub denoiser_calls: u64,
    pub policy_calls: u64,
    pub elbo: Option<f64>,
}

/// Rolls out `k` samples per observation under one method.
#[allow(clippy::too_many_arguments)]
pub fn sample_method(
    pols: &PolicyPair,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    task: &ForwardTask,
    obs: &[&Observation],
    mode: EvalMode,
    ecfg: &EvalConfig,
) -> Result<(ObservationBatch, GuidedTrajectory)> {
    let k = ecfg.rollouts_per_obs.max(1);
    let batch = ObservationBatch::repeat_each(task, obs, k)?;
    let ids: Vec<u64> = obs.iter().flat_map(|o| rollout_ids(o.id, k)).collect();
    let traj = match mode {
        EvalMode::Unguided => {
            ahvp_rollout(pols, den, sched, &GuidanceConfig::unguided().with_kl(ecfg.with_elbo), &batch, &ids, ecfg.seed)?
        }
        EvalMode::Stage1Only => {
            ahvp_rollout(pols, den, sched, &GuidanceConfig::stage1_only().with_kl(ecfg.with_elbo), &batch, &ids, ecfg.seed)?
        }
        EvalMode::Ahvp => ahvp_rollout(pols, den, sched, &pols.guidance().with_kl(ecfg.with_elbo), &batch, &ids, ecfg.seed)?,
        EvalMode::AhvpDet => {
            let mut det = pols.clone();
            det.set_stochastic(false);
            ahvp_rollout(&det, den, sched, &det.guidance().with_kl(ecfg.with_elbo), &batch, &ids, ecfg.seed)?
        }
        EvalMode::Shvp => shvp_refine(pols, den, sched, task, &batch, &ids, &ecfg.refine, ecfg.seed)?,
    };
    Ok((batch, traj))
}

/// Metrics for each observation under `mode`, deterministic given the seed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    pols: &PolicyPair,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    task: &ForwardTask,
    obs: &[Observation],
    mode: EvalMode,
    ecfg: &EvalConfig,
) -> Result<Vec<MetricsRow>> {
    let refs: Vec<&Observation> = obs.iter().collect();
    let (batch, traj) = sample_method(pols, den, sched, task, &refs, mode, ecfg)?;
    let k = ecfg.rollouts_per_obs.max(1);
    let elbos = if ecfg.with_elbo && mode != EvalMode::Shvp {
        let eval_pols = if mode == EvalMode::AhvpDet {
            let mut p = pols.clone();
            p.set_stochastic(false);
            p
        } else {
            pols.clone()
        };
        Some(elbo_terms(&traj, task, &batch, sched, &eval_pols, ecfg.kl_mode)?)
    } else {
        None
    };
    let x0 = traj.samples();
    let d = task.dim() as f64;
    let mut rows = Vec::with_capacity(obs.len());
    for (i, o) in obs.iter().enumerate() {
        let (mut mse, mut res, mut ll, mut elbo) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..k {
            let r = i * k + j;
            let x = x0.row_slice(r);
            mse += x.iter().zip(&o.truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d;
            let ax = task.apply_with(x, o.mask.as_deref())?;
            res += ax.iter().zip(&o.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            ll += task.log_likelihood_with(&o.y, x, o.mask.as_deref())?;
            if let Some(e) = &elbos {
                elbo += e[r].elbo();
            }
        }
        let kf = k as f64;
        let mse = mse / kf;
        rows.push(MetricsRow {
            method: mode,
            obs_id: o.id,
            mse,
            psnr: -10.0 * mse.log10(),
            measurement_residual: res / kf,
            terminal_loglik: ll / kf,
            denoiser_calls: traj.counts.denoiser,
            policy_calls: traj.counts.policy + traj.counts.noise_policy,
            elbo: elbos.as_ref().map(|_| elbo / kf),
        });
    }
    Ok(rows)
}

/// Column means of a set of metric rows.
pub fn mean_metrics(rows: &[MetricsRow]) -> Option<MetricsRow> {
    let first = rows.first()?;
    let n = rows.len() as f64;
    let avg = |f: &dyn Fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Some(MetricsRow {
        method: first.method,
        obs_id: u64::MAX,
        mse: avg(&|r| r.mse),
        psnr: avg(&|r| r.psnr),
        measurement_residual: avg(&|r| r.measurement_residual),
        terminal_loglik: avg(&|r| r.terminal_loglik),
        denoiser_calls: first.denoiser_calls,
        policy_calls: first.policy_calls,
        elbo: first.elbo.map(|_| avg(&|r| r.elbo.unwrap_or(f64::NAN))),
    })
}
