//! The four-term hierarchical bound and the training losses built from it.
//!
//! `ELBO = E[log p(y|x_0)] - L1 - L2 - L3` with
//! `L1 = KL(q(x_T|y) || N(0, I))`, `L2` the per-step transition KLs and `L3`
//! the per-step control KLs against `N(0, I)`. Exact mode evaluates the
//! Gaussian KLs; surrogate mode uses the squared-norm proxies
//! `|E(y, eps)|²`, `|μ_ctrl - μ_free|²` and `|u_t|²`.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::diffusion::{mean_from_tweedie, Denoiser, NoiseSchedule};
use crate::error::{HvpError, Result};
use crate::math::{Tape, Tensor, Var};
use crate::policies::{
    record_rollout, CallCounts, GradTargets, GuidanceConfig, GuidedTrajectory, PolicyPair, RolloutVars,
};
use crate::rng::NoiseStreams;
use crate::tasks::{ForwardTask, ObservationBatch};

pub const DEFAULT_W_T: f64 = 50.0;
pub const STAGE1_W_CONTROL: f64 = 1.0;
pub const STAGE2_W_CONTROL: f64 = 0.5;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlMode {
    Exact,
    Surrogate,
}

/// Single-trajectory estimates of the bound's terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub reward: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub mode: KlMode,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.reward - self.l1 - self.l2 - self.l3
    }
}

/// A loss weight that is either fixed or derived from the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weight {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_t: f64,
    /// Auto: 1.0 for the noise-policy stage, 0.5 for the controller stage.
    pub w_control: Weight,
    /// Auto: `1 / (2 rσ_{t-1}²)`, which turns the squared mean shift into
    /// the exact transition KL.
    pub w_score: Weight,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_t: DEFAULT_W_T,
            w_control: Weight::Auto,
            w_score: Weight::Auto,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fixed = |w: Weight| match w {
            Weight::Auto => 0.0,
            Weight::Fixed(v) => v,
        };
        for (name, v) in [
            ("w_T", self.w_t),
            ("w_control", fixed(self.w_control)),
            ("w_score", fixed(self.w_score)),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HvpError::Parameter(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn control(&self, stage: u8) -> f64 {
        match self.w_control {
            Weight::Fixed(v) => v,
            Weight::Auto if stage == 1 => STAGE1_W_CONTROL,
            Weight::Auto => STAGE2_W_CONTROL,
        }
    }

    pub fn score(&self, sched: &NoiseSchedule, t: usize) -> Result<f64> {
        match self.w_score {
            Weight::Fixed(v) => Ok(v),
            Weight::Auto => {
                let r = sched.reverse_std(t);
                if r > 0.0 {
                    Ok(0.5 / (r * r))
                } else {
                    Err(HvpError::Parameter(format!(
                        "automatic w_score needs a positive reverse std at t = {t}; set loss.w_score"
                    )))
                }
            }
        }
    }
}

/// `Σ_i KL(N(m1_i, s1_i²) || N(m2_i, s2_i²))`; length-one slices broadcast.
pub fn kl_gaussian(m1: &[f64], s1: &[f64], m2: &[f64], s2: &[f64]) -> Result<f64> {
    let n = [m1.len(), s1.len(), m2.len(), s2.len()].into_iter().max().unwrap_or(0);
    let at = |v: &[f64], i: usize| -> Result<f64> {
        match v.len() {
            1 => Ok(v[0]),
            l if l == n => Ok(v[i]),
            _ => Err(HvpError::Dimension("kl_gaussian arguments do not broadcast".into())),
        }
    };
    let mut total = 0.0;
    for i in 0..n {
        let (a, sa, b, sb) = (at(m1, i)?, at(s1, i)?, at(m2, i)?, at(s2, i)?);
        if !(sa > 0.0 && sb > 0.0) {
            return Err(HvpError::Parameter(format!("standard deviations must be positive, got {sa}, {sb}")));
        }
        total += (sb / sa).ln() + (sa * sa + (a - b).powi(2)) / (2.0 * sb * sb) - 0.5;
    }
    Ok(total)
}

fn log_std_normal(x: &[f64]) -> f64 {
    -0.5 * x.len() as f64 * LN_2PI - 0.5 * x.iter().map(|v| v * v).sum::<f64>()
}

fn row_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Exact `KL(q(x_T|y) || N(0, I))` estimated at one draw, via the change of
/// variables `x_T = eps + E(y, eps)`. The map must be invertible.
fn exact_l1_row(pols: &PolicyPair, cond: &[f64], eps: &[f64], x_big_t: &[f64]) -> Result<f64> {
    let d = eps.len();
    let mut input = cond.to_vec();
    input.extend_from_slice(eps);
    let c = cond.len();
    let jac = pols.noise.net.input_jacobian(&input, c..c + d)?;
    let mut m = DMatrix::from_row_slice(d, d, &jac);
    for i in 0..d {
        m[(i, i)] += 1.0;
    }
    let det = m.lu().determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(HvpError::numeric("l1", format!("initial-noise map is singular (det = {det})")));
    }
    Ok(log_std_normal(eps) - det.abs().ln() - log_std_normal(x_big_t))
}

/// Per-trajectory bound terms of a recorded rollout.
pub fn elbo_terms(
    traj: &GuidedTrajectory,
    task: &ForwardTask,
    obs: &ObservationBatch,
    sched: &NoiseSchedule,
    pols: &PolicyPair,
    mode: KlMode,
) -> Result<Vec<ElboTerms>> {
    let b = traj.rows();
    if obs.rows() != b {
        return Err(HvpError::Dimension("one observation row per trajectory".into()));
    }
    let cfg = traj.cfg;
    if cfg.controls && traj.steps.iter().any(|s| s.mu_free.is_none()) {
        return Err(HvpError::Contract("rollout was recorded without uncontrolled means".into()));
    }
    let x0 = traj.samples();
    let x_big_t = &traj.states[sched.steps()];
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let mask = obs.mask.as_ref().map(|m| m.row_slice(r));
        let reward = task.log_likelihood_with(obs.y.row_slice(r), x0.row_slice(r), mask)?;
        let (mut l1, mut l2, mut l3) = (0.0, 0.0, 0.0);
        match mode {
            KlMode::Surrogate => {
                l1 = traj.noise_offset.row_slice(r).iter().map(|v| v * v).sum();
                for s in &traj.steps {
                    if let Some(mf) = &s.mu_free {
                        l2 += row_sq(s.mu_ctrl.row_slice(r), mf.row_slice(r));
                    }
                    l3 += s.u.row_slice(r).iter().map(|v| v * v).sum::<f64>();
                }
            }
            KlMode::Exact => {
                if cfg.noise_policy {
                    l1 = if pols.noise.stochastic {
                        exact_l1_row(pols, obs.cond.row_slice(r), traj.eps.row_slice(r), x_big_t.row_slice(r))?
                    } else {
                        f64::INFINITY
                    };
                }
                if cfg.controls {
                    for s in &traj.steps {
                        let mf = s.mu_free.as_ref().expect("checked above");
                        let sq = row_sq(s.mu_ctrl.row_slice(r), mf.row_slice(r));
                        let rs = sched.reverse_std(s.t);
                        l2 += if sq == 0.0 {
                            0.0
                        } else if rs > 0.0 {
                            sq / (2.0 * rs * rs)
                        } else {
                            f64::INFINITY
                        };
                        if s.policy_std > 0.0 {
                            l3 += kl_gaussian(s.policy_mean.row_slice(r), &[s.policy_std], &[0.0], &[1.0])?;
                        }
                    }
                }
            }
        }
        out.push(ElboTerms {
            reward,
            l1,
            l2,
            l3,
            mode,
        });
    }
    Ok(out)
}

/// Mean and standard error of the bound over trajectories.
pub fn elbo_mean_se(terms: &[ElboTerms]) -> (f64, f64) {
    let n = terms.len() as f64;
    let mut vals: Vec<f64> = terms.iter().map(ElboTerms::elbo).collect();
    vals.sort_by(f64::total_cmp);
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

fn mask_var(tape: &mut Tape, obs: &ObservationBatch) -> Option<Var> {
    obs.mask.as_ref().map(|m| tape.constant(m.clone()))
}

/// Records `-w_T mean[log p(y|x_0)] + w_control mean[|E(y, eps)|²]`.
pub fn stage1_loss_on_tape(
    tape: &mut Tape,
    vars: &RolloutVars,
    task: &ForwardTask,
    obs: &ObservationBatch,
    weights: &LossWeights,
) -> Result<Var> {
    let y = tape.constant(obs.y.clone());
    let mask = mask_var(tape, obs);
    let ll = task.log_likelihood_on_tape(tape, y, vars.states[0], mask)?;
    let reward = tape.mean_all(ll);
    let reg = tape.row_norm_sq(vars.offset);
    let reg = tape.mean_all(reg);
    let a = tape.scale(reward, -weights.w_t);
    let b = tape.scale(reg, weights.control(1));
    tape.add(a, b)
}

/// Stage-1 loss and its gradient with respect to the noise policy, through
/// the whole chain. Controls are disabled.
#[allow(clippy::too_many_arguments)]
pub fn stage1_objective(
    pols: &PolicyPair,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    task: &ForwardTask,
    obs: &ObservationBatch,
    ids: &[u64],
    seed: u64,
    weights: &LossWeights,
) -> Result<(f64, HashMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let mut counts = CallCounts::default();
    let vars = record_rollout(
        &mut tape,
        pols,
        den,
        sched,
        &GuidanceConfig::stage1_only(),
        obs,
        ids,
        &NoiseStreams::new(seed),
        GradTargets {
            noise: true,
            step: false,
        },
        None,
        &mut counts,
    )?;
    let loss = stage1_loss_on_tape(&mut tape, &vars, task, obs, weights)?;
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)?.params()))
}

/// Stage-2 loss over a recorded rollout. Every step starts from the
/// recorded state and history summary (treated as constants), so gradients
/// reach the controller only through that step's own `u_t`:
/// `Σ_t [-w_T log p(y | x̂_0(x_t + γ u_t)) + w_score |μ_ctrl - μ_free|² + w_control |u_t|²]`,
/// averaged over rows.
#[allow(clippy::too_many_arguments)]
pub fn stage2_objective(
    pols: &PolicyPair,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    task: &ForwardTask,
    obs: &ObservationBatch,
    traj: &GuidedTrajectory,
    weights: &LossWeights,
) -> Result<(f64, HashMap<String, Tensor>)> {
    if traj.rows() != obs.rows() {
        return Err(HvpError::Dimension("one observation row per trajectory".into()));
    }
    let mut tape = Tape::new();
    let cond = tape.constant(obs.cond.clone());
    let y = tape.constant(obs.y.clone());
    let mask = mask_var(&mut tape, obs);
    let w_c = weights.control(2);
    let mut terms = Vec::with_capacity(traj.steps.len());
    for s in &traj.steps {
        let t = s.t;
        let x = tape.constant(s.x_t.clone());
        let prev = tape.constant(s.summary.prev.clone());
        let ema = tape.constant(s.summary.ema.clone());
        let mean = pols.step.mean_on_tape(&mut tape, x, prev, ema, cond, sched, t, true)?;
        let u = if pols.step.stochastic {
            let z = tape.constant(s.control_noise.clone());
            let z = tape.scale(z, pols.step.std(sched, t));
            tape.add(mean, z)?
        } else {
            mean
        };
        let shift = tape.scale(u, pols.gamma);
        let input = tape.add(x, shift)?;
        let x0 = den.tweedie_on_tape(&mut tape, sched, input, t)?;
        let mu_ctrl = mean_from_tweedie(&mut tape, sched, input, x0, t)?;
        let mu_free = match &s.mu_free {
            Some(m) => tape.constant(m.clone()),
            None => {
                let v = den.mean_on_tape(&mut tape, sched, x, t)?;
                let val = tape.value(v).clone();
                tape.constant(val)
            }
        };
        let ll = task.log_likelihood_on_tape(&mut tape, y, x0, mask)?;
        let reward = tape.scale(ll, -weights.w_t);
        let diff = tape.sub(mu_ctrl, mu_free)?;
        let shift_sq = tape.row_norm_sq(diff);
        let shift_sq = tape.scale(shift_sq, weights.score(sched, t)?);
        let u_sq = tape.row_norm_sq(u);
        let u_sq = tape.scale(u_sq, w_c);
        let a = tape.add(reward, shift_sq)?;
        terms.push(tape.add(a, u_sq)?);
    }
    let mut total = terms[0];
    for &v in &terms[1..] {
        total = tape.add(total, v)?;
    }
    let loss = tape.mean_all(total);
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)?.params()))
}

/// Per-row test-time objective
/// `log p(y | x̂_0(x_t + γ u)) - λ2 |μ(x_t + γ u) - μ(x_t)|² - λ3 |u|²`
/// and its gradient in `u`. Costs two denoiser evaluations.
#[allow(clippy::too_many_arguments)]
pub fn shvp_step_objective(
    x_t: &Tensor,
    u_t: &Tensor,
    t: usize,
    task: &ForwardTask,
    obs: &ObservationBatch,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    gamma: f64,
    lambda2: f64,
    lambda3: f64,
    counts: &mut CallCounts,
) -> Result<(Vec<f64>, Tensor)> {
    if x_t.shape() != u_t.shape() || x_t.rows() != obs.rows() {
        return Err(HvpError::Dimension("step objective shapes".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let u = tape.param("u", u_t);
    let shift = tape.scale(u, gamma);
    let input = tape.add(x, shift)?;
    let x0 = den.tweedie_on_tape(&mut tape, sched, input, t)?;
    let mu_ctrl = mean_from_tweedie(&mut tape, sched, input, x0, t)?;
    let mu_free = den.mean_on_tape(&mut tape, sched, x, t)?;
    counts.denoiser += 2;
    let y = tape.constant(obs.y.clone());
    let mask = mask_var(&mut tape, obs);
    let ll = task.log_likelihood_on_tape(&mut tape, y, x0, mask)?;
    let diff = tape.sub(mu_ctrl, mu_free)?;
    let shift_sq = tape.row_norm_sq(diff);
    let shift_sq = tape.scale(shift_sq, -lambda2);
    let u_sq = tape.row_norm_sq(u);
    let u_sq = tape.scale(u_sq, -lambda3);
    let a = tape.add(ll, shift_sq)?;
    let per_row = tape.add(a, u_sq)?;
    let values = tape.value(per_row).data().to_vec();
    let total = tape.sum_all(per_row);
    let grad = tape.backward(total)?.wrt(u);
    Ok((values, grad))
}

/// Surrogate bound of a fully reparameterized rollout, differentiable in both
/// networks: `mean[log p(y|x_0) - |E|² - Σ_t |μ_ctrl - μ_free|² - Σ_t |u_t|²]`.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_elbo_objective(
    pols: &PolicyPair,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    task: &ForwardTask,
    obs: &ObservationBatch,
    ids: &[u64],
    seed: u64,
) -> Result<(f64, HashMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let mut counts = CallCounts::default();
    let cfg = pols.guidance().with_kl(true);
    let vars = record_rollout(
        &mut tape,
        pols,
        den,
        sched,
        &cfg,
        obs,
        ids,
        &NoiseStreams::new(seed),
        GradTargets { noise: true, step: true },
        None,
        &mut counts,
    )?;
    let y = tape.constant(obs.y.clone());
    let mask = mask_var(&mut tape, obs);
    let mut total = task.log_likelihood_on_tape(&mut tape, y, vars.states[0], mask)?;
    let l1 = tape.row_norm_sq(vars.offset);
    total = tape.sub(total, l1)?;
    for s in &vars.steps {
        let mf = s.mu_free.expect("recorded with KL");
        let diff = tape.sub(s.mu_ctrl, mf)?;
        let l2 = tape.row_norm_sq(diff);
        total = tape.sub(total, l2)?;
        let l3 = tape.row_norm_sq(s.u);
        total = tape.sub(total, l3)?;
    }
    let out = tape.mean_all(total);
    let value = tape.value(out).item();
    Ok((value, tape.backward(out)?.params()))
}
