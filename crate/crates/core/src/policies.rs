//! Initial-noise policy, per-step Gaussian controller and the guided rollout.
//!
//! A rollout draws `x_T = eps + E(y, eps)`, then for `t = T..1` samples a
//! control `u_t ~ N(π(x_t, u_{>t}, y, t), σ̄_t² I)` and takes the pretrained
//! reverse step from the shifted input `x_t + γ u_t`.
//!
//! The control history `u_{>t}` reaches the controller as a fixed-size
//! summary: the previous control and an exponential moving average of all
//! earlier ones.

use rayon::prelude::*;

use crate::diffusion::{mean_from_tweedie, Denoiser, NoiseSchedule};
use crate::error::{HvpError, Result};
use crate::math::{Mlp, Tape, Tensor, Var};
use crate::rng::NoiseStreams;
use crate::tasks::ObservationBatch;

pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_KAPPA: f64 = 0.05;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const SUMMARY_DECAY: f64 = 0.9;

/// Rows per independent tape when a batch is rolled out in parallel.
const CHUNK_ROWS: usize = 128;

/// `E_φ`, a network on `[cond, eps]` producing an additive offset for `x_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePolicy {
    pub net: Mlp,
    /// When false the policy ignores the base noise (`eps = 0`), giving a
    /// point mass at `E(y, 0)`.
    pub stochastic: bool,
}

/// The per-step controller `π_ψ` and its fixed deviation `σ̄_t = κ s_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPolicy {
    pub net: Mlp,
    pub kappa: f64,
    /// When false, `u_t` is the mean itself.
    pub stochastic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPair {
    pub noise: NoisePolicy,
    pub step: StepPolicy,
    pub gamma: f64,
}

/// Which parts of the guided process are active for one rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub noise_policy: bool,
    pub controls: bool,
    /// Also evaluate the uncontrolled mean on every step (needed for L2).
    pub record_kl: bool,
}

/// Network evaluations per trajectory. Batched evaluations count once, since
/// every row of the batch is a separate trajectory evaluated once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub noise_policy: u64,
    pub policy: u64,
    pub denoiser: u64,
    /// Test-time ascent iterations (zero for amortized rollouts).
    pub inner_iterations: u64,
    /// Row-wise objective evaluations spent inside backtracking line
    /// searches, summed over all rows (unlike the per-trajectory fields).
    pub line_search_evals: u64,
}

/// Compressed control history `u_{>t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSummary {
    pub prev: Tensor,
    pub ema: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x_t: Tensor,
    pub summary: ControlSummary,
    pub control_noise: Tensor,
    pub policy_mean: Tensor,
    pub policy_std: f64,
    pub u: Tensor,
    pub mu_ctrl: Tensor,
    pub mu_free: Option<Tensor>,
}

/// A batch of rollouts; row `i` of every tensor belongs to trajectory `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedTrajectory {
    pub ids: Vec<u64>,
    pub seed: u64,
    pub cfg: GuidanceConfig,
    /// Base noise (zeros for a non-stochastic noise policy).
    pub eps: Tensor,
    /// `E(y, eps)`, zeros when the noise policy is inactive.
    pub noise_offset: Tensor,
    /// `states[t] = x_t` for `t = 0..=T`.
    pub states: Vec<Tensor>,
    /// One record per reverse step, ordered `t = T, T-1, .., 1`.
    pub steps: Vec<StepRecord>,
    pub counts: CallCounts,
}

impl NoisePolicy {
    pub fn new(d: usize, cond_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut widths = vec![cond_dim + d];
        widths.extend_from_slice(hidden);
        widths.push(d);
        Ok(NoisePolicy {
            net: Mlp::zero_output("noise", &widths, seed)?,
            stochastic: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.output_width()
    }

    pub fn cond_dim(&self) -> usize {
        self.net.input_width() - self.dim()
    }

    /// Records `E(cond, eps)`.
    pub fn offset_on_tape(&self, tape: &mut Tape, cond: Var, eps: Var, trainable: bool) -> Result<Var> {
        let input = tape.concat(&[cond, eps])?;
        self.net.forward(tape, input, trainable)
    }
}

impl StepPolicy {
    pub fn new(d: usize, cond_dim: usize, hidden: &[usize], kappa: f64, seed: u64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(HvpError::Parameter(format!("kappa must be positive, got {kappa}")));
        }
        let mut widths = vec![3 * d + cond_dim + 2];
        widths.extend_from_slice(hidden);
        widths.push(d);
        Ok(StepPolicy {
            net: Mlp::zero_output("step", &widths, seed)?,
            kappa,
            stochastic: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.output_width()
    }

    /// Control deviation used at step `t` (zero for the deterministic policy).
    pub fn std(&self, sched: &NoiseSchedule, t: usize) -> f64 {
        if self.stochastic {
            sched.policy_std(t, self.kappa)
        } else {
            0.0
        }
    }

    /// Records `π(x_t, prev, ema, cond, a_t, s_t)`.
    #[allow(clippy::too_many_arguments)]
    pub fn mean_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        prev: Var,
        ema: Var,
        cond: Var,
        sched: &NoiseSchedule,
        t: usize,
        trainable: bool,
    ) -> Result<Var> {
        let b = tape.value(x).rows();
        let a = tape.constant(Tensor::filled(b, 1, sched.a(t)));
        let s = tape.constant(Tensor::filled(b, 1, sched.s(t)));
        let input = tape.concat(&[x, prev, ema, cond, a, s])?;
        self.net.forward(tape, input, trainable)
    }
}

impl PolicyPair {
    /// Both networks with zero final layers, so the pair starts as the
    /// unguided sampler.
    #[allow(clippy::too_many_arguments)]
    pub fn zero(
        d: usize,
        cond_dim: usize,
        noise_hidden: &[usize],
        step_hidden: &[usize],
        gamma: f64,
        kappa: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(HvpError::Parameter(format!("gamma must be nonnegative, got {gamma}")));
        }
        Ok(PolicyPair {
            noise: NoisePolicy::new(d, cond_dim, noise_hidden, seed)?,
            step: StepPolicy::new(d, cond_dim, step_hidden, kappa, seed.wrapping_add(1))?,
            gamma,
        })
    }

    pub fn dim(&self) -> usize {
        self.noise.dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.noise.cond_dim()
    }

    pub fn set_stochastic(&mut self, on: bool) {
        self.noise.stochastic = on;
        self.step.stochastic = on;
    }

    /// Full AHVP guidance with this pair's `γ`.
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig::ahvp(self.gamma)
    }
}

impl GuidanceConfig {
    pub fn unguided() -> Self {
        GuidanceConfig {
            gamma: 0.0,
            noise_policy: false,
            controls: false,
            record_kl: false,
        }
    }

    pub fn stage1_only() -> Self {
        GuidanceConfig {
            noise_policy: true,
            ..Self::unguided()
        }
    }

    pub fn ahvp(gamma: f64) -> Self {
        GuidanceConfig {
            gamma,
            noise_policy: true,
            controls: true,
            record_kl: false,
        }
    }

    pub fn with_kl(mut self, on: bool) -> Self {
        self.record_kl = on;
        self
    }
}

impl ControlSummary {
    pub fn zeros(b: usize, d: usize) -> Self {
        ControlSummary {
            prev: Tensor::zeros(b, d),
            ema: Tensor::zeros(b, d),
        }
    }

    /// Summary after observing control `u`.
    pub fn update(&self, u: &Tensor) -> Self {
        let ema = self
            .ema
            .data()
            .iter()
            .zip(u.data())
            .map(|(e, x)| SUMMARY_DECAY * e + (1.0 - SUMMARY_DECAY) * x)
            .collect();
        ControlSummary {
            prev: u.clone(),
            ema: Tensor::from_rows(u.rows(), u.cols(), ema),
        }
    }
}

impl GuidedTrajectory {
    pub fn samples(&self) -> &Tensor {
        &self.states[0]
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    /// `σ̄_t` in rollout order (`t = T..1`).
    pub fn policy_stds(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.policy_std).collect()
    }

    fn concat(parts: Vec<GuidedTrajectory>) -> Result<GuidedTrajectory> {
        let first = parts
            .first()
            .ok_or_else(|| HvpError::Contract("no rollout chunks".into()))?;
        let per_trajectory = |c: &CallCounts| CallCounts {
            line_search_evals: 0,
            ..*c
        };
        if parts.iter().any(|p| per_trajectory(&p.counts) != per_trajectory(&first.counts)) {
            return Err(HvpError::Contract("chunks disagree on call counts".into()));
        }
        let line_search_evals = parts.iter().map(|p| p.counts.line_search_evals).sum();
        let stack = |f: &dyn Fn(&GuidedTrajectory) -> &Tensor| -> Result<Tensor> {
            Tensor::vstack(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
        };
        let n_states = first.states.len();
        let states = (0..n_states)
            .map(|t| stack(&|p| &p.states[t]))
            .collect::<Result<Vec<_>>>()?;
        let mut steps = Vec::with_capacity(first.steps.len());
        for k in 0..first.steps.len() {
            let mu_free = match first.steps[k].mu_free {
                Some(_) => Some(Tensor::vstack(
                    &parts
                        .iter()
                        .map(|p| p.steps[k].mu_free.clone().expect("uniform chunks"))
                        .collect::<Vec<_>>(),
                )?),
                None => None,
            };
            steps.push(StepRecord {
                t: first.steps[k].t,
                x_t: stack(&|p| &p.steps[k].x_t)?,
                summary: ControlSummary {
                    prev: stack(&|p| &p.steps[k].summary.prev)?,
                    ema: stack(&|p| &p.steps[k].summary.ema)?,
                },
                control_noise: stack(&|p| &p.steps[k].control_noise)?,
                policy_mean: stack(&|p| &p.steps[k].policy_mean)?,
                policy_std: first.steps[k].policy_std,
                u: stack(&|p| &p.steps[k].u)?,
                mu_ctrl: stack(&|p| &p.steps[k].mu_ctrl)?,
                mu_free,
            });
        }
        Ok(GuidedTrajectory {
            ids: parts.iter().flat_map(|p| p.ids.iter().copied()).collect(),
            seed: first.seed,
            cfg: first.cfg,
            eps: stack(&|p| &p.eps)?,
            noise_offset: stack(&|p| &p.noise_offset)?,
            states,
            steps,
            counts: CallCounts {
                line_search_evals,
                ..first.counts
            },
        })
    }
}

/// `x_T = eps + E(y, eps)`.
pub fn sample_initial_noise(pol: &NoisePolicy, cond: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps.cols() != pol.dim() || cond.rows() != eps.rows() {
        return Err(HvpError::Dimension("initial noise shape".into()));
    }
    let mut tape = Tape::new();
    let c = tape.constant(cond.clone());
    let e = tape.constant(eps.clone());
    let off = pol.offset_on_tape(&mut tape, c, e, false)?;
    let x = tape.add(e, off)?;
    Ok(tape.value(x).clone())
}

/// Draws `u_t` and returns `(u_t, mean, std)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_control(
    pol: &StepPolicy,
    x_t: &Tensor,
    summary: &ControlSummary,
    cond: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
    counts: &mut CallCounts,
) -> Result<(Tensor, Tensor, f64)> {
    if x_t.cols() != pol.dim() || noise.shape() != x_t.shape() {
        return Err(HvpError::Dimension("control shape".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let prev = tape.constant(summary.prev.clone());
    let ema = tape.constant(summary.ema.clone());
    let c = tape.constant(cond.clone());
    let mean = pol.mean_on_tape(&mut tape, x, prev, ema, c, sched, t, false)?;
    counts.policy += 1;
    let std = pol.std(sched, t);
    let mean = tape.value(mean).clone();
    let u = if pol.stochastic {
        let data = mean.data().iter().zip(noise.data()).map(|(m, z)| m + std * z).collect();
        Tensor::from_rows(mean.rows(), mean.cols(), data)
    } else {
        mean.clone()
    };
    Ok((u, mean, std))
}

/// One controlled reverse step: `x_{t-1} = μ(x_t + γ u_t, t) + rσ_{t-1} z`.
/// Returns `(x_{t-1}, μ_ctrl, μ_free)`; `μ_free` only with `record_kl`.
#[allow(clippy::too_many_arguments)]
pub fn guided_step(
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    x_t: &Tensor,
    u_t: &Tensor,
    t: usize,
    step_noise: &Tensor,
    counts: &mut CallCounts,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let mut tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let u = tape.constant(u_t.clone());
    let (next, mu_ctrl, mu_free, _) = record_step(&mut tape, den, sched, cfg, x, Some(u), t, step_noise, counts)?;
    Ok((
        tape.value(next).clone(),
        tape.value(mu_ctrl).clone(),
        mu_free.map(|v| tape.value(v).clone()),
    ))
}

/// Records one guided transition. Returns `(x_{t-1}, μ_ctrl, μ_free, x̂_0)`
/// where `x̂_0` is the Tweedie estimate at the controlled input.
#[allow(clippy::too_many_arguments)]
pub fn record_step(
    tape: &mut Tape,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    x: Var,
    u: Option<Var>,
    t: usize,
    step_noise: &Tensor,
    counts: &mut CallCounts,
) -> Result<(Var, Var, Option<Var>, Var)> {
    if step_noise.shape() != tape.value(x).shape() {
        return Err(HvpError::Dimension("step noise shape differs from state".into()));
    }
    let input = match u {
        Some(u) if cfg.controls => {
            let shift = tape.scale(u, cfg.gamma);
            tape.add(x, shift)?
        }
        _ => x,
    };
    let x0 = den.tweedie_on_tape(tape, sched, input, t)?;
    let mu_ctrl = mean_from_tweedie(tape, sched, input, x0, t)?;
    counts.denoiser += 1;
    let mu_free = if cfg.record_kl {
        counts.denoiser += 1;
        Some(den.mean_on_tape(tape, sched, x, t)?)
    } else {
        None
    };
    let noise = tape.constant(step_noise.clone());
    let scaled = tape.scale(noise, sched.reverse_std(t));
    let next = tape.add(mu_ctrl, scaled)?;
    Ok((next, mu_ctrl, mu_free, x0))
}

/// Which networks receive gradients in a recorded rollout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradTargets {
    pub noise: bool,
    pub step: bool,
}

/// Tape handles of one recorded step.
#[derive(Debug, Clone)]
pub struct StepVars {
    pub t: usize,
    pub x: Var,
    pub prev: Var,
    pub ema: Var,
    pub control_noise: Tensor,
    pub mean: Var,
    pub u: Var,
    pub mu_ctrl: Var,
    pub mu_free: Option<Var>,
    pub tweedie: Var,
}

/// Tape handles of a recorded rollout.
#[derive(Debug, Clone)]
pub struct RolloutVars {
    pub eps: Var,
    pub offset: Var,
    /// `states[t]` for `t = 0..=T`.
    pub states: Vec<Var>,
    pub steps: Vec<StepVars>,
}

/// Test-time modification of a control before the guided step executes.
/// Receives the observation rows, `x_t`, the amortized `u_t` and `t`.
pub type ControlHook<'a> =
    dyn Fn(&ObservationBatch, &Tensor, Tensor, usize, &mut CallCounts) -> Result<Tensor> + Sync + 'a;

/// Records a full rollout for the rows of `obs`. With a hook, controls
/// are replaced by the hook's output (and no gradient flows through them).
#[allow(clippy::too_many_arguments)]
pub fn record_rollout(
    tape: &mut Tape,
    pols: &PolicyPair,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    obs: &ObservationBatch,
    ids: &[u64],
    streams: &NoiseStreams,
    grad: GradTargets,
    hook: Option<&ControlHook>,
    counts: &mut CallCounts,
) -> Result<RolloutVars> {
    let d = den.dim();
    let b = ids.len();
    if pols.dim() != d || obs.rows() != b || obs.cond.cols() != pols.cond_dim() {
        return Err(HvpError::Dimension(format!(
            "rollout of {b} rows: policy dim {} / cond {}, denoiser dim {d}, observation rows {} / cond {}",
            pols.dim(),
            pols.cond_dim(),
            obs.rows(),
            obs.cond.cols()
        )));
    }
    let steps = sched.steps();
    let cond = tape.constant(obs.cond.clone());

    let eps_val = if cfg.noise_policy && !pols.noise.stochastic {
        Tensor::zeros(b, d)
    } else {
        streams.initial(ids, d)
    };
    let eps = tape.constant(eps_val);
    let (offset, x_big_t) = if cfg.noise_policy {
        counts.noise_policy += 1;
        let off = pols.noise.offset_on_tape(tape, cond, eps, grad.noise)?;
        (off, tape.add(eps, off)?)
    } else {
        (tape.constant(Tensor::zeros(b, d)), eps)
    };

    let mut states = vec![x_big_t];
    let mut records = Vec::with_capacity(steps);
    let mut prev = tape.constant(Tensor::zeros(b, d));
    let mut ema = tape.constant(Tensor::zeros(b, d));
    for t in (1..=steps).rev() {
        let x = *states.last().unwrap();
        let control_noise = streams.control(ids, t, d);
        let (mean, u) = if cfg.controls {
            let mean = pols.step.mean_on_tape(tape, x, prev, ema, cond, sched, t, grad.step)?;
            counts.policy += 1;
            let u = if pols.step.stochastic {
                let z = tape.constant(control_noise.clone());
                let z = tape.scale(z, pols.step.std(sched, t));
                tape.add(mean, z)?
            } else {
                mean
            };
            let u = match hook {
                Some(h) => {
                    let x_val = tape.value(x).clone();
                    let refined = h(obs, &x_val, tape.value(u).clone(), t, counts)?;
                    tape.constant(refined)
                }
                None => u,
            };
            (mean, u)
        } else {
            let z = tape.constant(Tensor::zeros(b, d));
            (z, z)
        };
        let step_noise = streams.step(ids, t, d);
        let (next, mu_ctrl, mu_free, tweedie) =
            record_step(tape, den, sched, cfg, x, Some(u), t, &step_noise, counts)?;
        records.push(StepVars {
            t,
            x,
            prev,
            ema,
            control_noise,
            mean,
            u,
            mu_ctrl,
            mu_free,
            tweedie,
        });
        if cfg.controls {
            let decayed = tape.scale(ema, SUMMARY_DECAY);
            let fresh = tape.scale(u, 1.0 - SUMMARY_DECAY);
            ema = tape.add(decayed, fresh)?;
            prev = u;
        }
        states.push(next);
    }
    states.reverse();
    Ok(RolloutVars {
        eps,
        offset,
        states,
        steps: records,
    })
}

fn trajectory_from_tape(
    tape: &Tape,
    vars: &RolloutVars,
    pols: &PolicyPair,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    ids: &[u64],
    seed: u64,
    counts: CallCounts,
) -> Result<GuidedTrajectory> {
    let value = |v: Var| tape.value(v).clone();
    for (t, &s) in vars.states.iter().enumerate() {
        if !tape.value(s).is_finite() {
            return Err(HvpError::numeric(format!("x_{t}"), "rollout produced a non-finite state"));
        }
    }
    let steps = vars
        .steps
        .iter()
        .map(|s| StepRecord {
            t: s.t,
            x_t: value(s.x),
            summary: ControlSummary {
                prev: value(s.prev),
                ema: value(s.ema),
            },
            control_noise: s.control_noise.clone(),
            policy_mean: value(s.mean),
            policy_std: if cfg.controls { pols.step.std(sched, s.t) } else { 0.0 },
            u: value(s.u),
            mu_ctrl: value(s.mu_ctrl),
            mu_free: s.mu_free.map(value),
        })
        .collect();
    Ok(GuidedTrajectory {
        ids: ids.to_vec(),
        seed,
        cfg: *cfg,
        eps: value(vars.eps),
        noise_offset: value(vars.offset),
        states: vars.states.iter().map(|&v| value(v)).collect(),
        steps,
        counts,
    })
}

/// Rollouts with an optional control hook, split into independent chunks
/// that run on the rayon pool. Noise is addressed by trajectory id, so the
/// chunking does not change any value.
#[allow(clippy::too_many_arguments)]
pub fn rollout_with_hook(
    pols: &PolicyPair,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    obs: &ObservationBatch,
    ids: &[u64],
    seed: u64,
    hook: Option<&ControlHook>,
) -> Result<GuidedTrajectory> {
    if obs.rows() != ids.len() {
        return Err(HvpError::Dimension("one observation row per trajectory id".into()));
    }
    if ids.is_empty() {
        return Err(HvpError::Parameter("empty rollout batch".into()));
    }
    let streams = NoiseStreams::new(seed);
    let starts: Vec<usize> = (0..ids.len()).step_by(CHUNK_ROWS).collect();
    let parts = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + CHUNK_ROWS).min(ids.len());
            let chunk = obs.slice_rows(lo, hi);
            let mut tape = Tape::new();
            let mut counts = CallCounts::default();
            let vars = record_rollout(
                &mut tape,
                pols,
                den,
                sched,
                cfg,
                &chunk,
                &ids[lo..hi],
                &streams,
                GradTargets::default(),
                hook,
                &mut counts,
            )?;
            trajectory_from_tape(&tape, &vars, pols, sched, cfg, &ids[lo..hi], seed, counts)
        })
        .collect::<Result<Vec<_>>>()?;
    GuidedTrajectory::concat(parts)
}

/// Amortized conditional sampling: a single guided pass per trajectory.
pub fn ahvp_rollout(
    pols: &PolicyPair,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    obs: &ObservationBatch,
    ids: &[u64],
    seed: u64,
) -> Result<GuidedTrajectory> {
    rollout_with_hook(pols, den, sched, cfg, obs, ids, seed, None)
}

/// Trajectory ids for `k` rollouts of observation `obs_id`.
pub fn rollout_ids(obs_id: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|j| obs_id.wrapping_mul(1_000_003).wrapping_add(j)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, GmmOracleDenoiser, GmmPrior, ReverseSampler};
    use crate::tasks::{make_observation, ForwardTask};

    fn setup(d: usize) -> (GmmOracleDenoiser, NoiseSchedule, ForwardTask) {
        let prior = GmmPrior::new(vec![0.3, 0.7], vec![vec![1.0; d], vec![-0.5; d]], vec![0.2, 0.4]).unwrap();
        (
            GmmOracleDenoiser::new(prior),
            build_schedule(8, 1e-4, 0.02, 0.5).unwrap(),
            ForwardTask::identity(d, 0.1).unwrap(),
        )
    }

    fn batch(task: &ForwardTask, n: usize) -> ObservationBatch {
        let obs: Vec<_> = (0..n as u64)
            .map(|i| make_observation(task, &vec![0.3; task.dim()], 5, i).unwrap())
            .collect();
        ObservationBatch::from_observations(task, &obs.iter().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_noise_policy_returns_eps() {
        let pol = NoisePolicy::new(2, 3, &[8], 0).unwrap();
        let eps = Tensor::row(&[0.4, -1.0]);
        let x = sample_initial_noise(&pol, &Tensor::row(&[1.0, 2.0, 3.0]), &eps).unwrap();
        assert_eq!(x, eps);
    }

    #[test]
    fn constant_noise_policy_shifts_eps() {
        let mut pol = NoisePolicy::new(2, 1, &[4], 0).unwrap();
        let last = pol.net.layers().len() - 1;
        pol.net.layers_mut()[last].b = Tensor::row(&[0.5, -2.0]);
        let x = sample_initial_noise(&pol, &Tensor::row(&[1.0]), &Tensor::row(&[1.0, 1.0])).unwrap();
        assert_eq!(x.data(), &[1.5, -1.0]);
    }

    #[test]
    fn control_std_and_mean_branch() {
        let sched = build_schedule(8, 1e-4, 0.02, 0.5).unwrap();
        let mut pol = StepPolicy::new(2, 2, &[8], 0.05, 0).unwrap();
        let mut counts = CallCounts::default();
        let x = Tensor::row(&[0.1, 0.2]);
        let s = ControlSummary::zeros(1, 2);
        let y = Tensor::row(&[0.0, 1.0]);
        let (u, mean, std) = sample_control(&pol, &x, &s, &y, 8, &sched, &Tensor::zeros(1, 2), &mut counts).unwrap();
        assert_eq!(u, mean);
        assert!((std - 0.05 * sched.s(8)).abs() < 1e-15);
        pol.stochastic = false;
        let (u, _, std) = sample_control(&pol, &x, &s, &y, 8, &sched, &Tensor::row(&[3.0, 3.0]), &mut counts).unwrap();
        assert_eq!(u.data(), &[0.0, 0.0]);
        assert_eq!(std, 0.0);
        assert_eq!(counts.policy, 2);
    }

    #[test]
    fn zero_control_and_zero_gamma_match_unguided_step() {
        let (den, sched, _) = setup(2);
        let x = Tensor::row(&[0.3, -0.4]);
        let z = Tensor::row(&[0.1, 0.7]);
        let plain = ReverseSampler::new(&den, &sched).reverse_sample(&x, 5, &z).unwrap();
        let mut counts = CallCounts::default();
        let cfg = GuidanceConfig::ahvp(1.0).with_kl(true);
        let (next, mc, mf) = guided_step(&den, &sched, &cfg, &x, &Tensor::zeros(1, 2), 5, &z, &mut counts).unwrap();
        assert_eq!(next, plain);
        assert_eq!(Some(mc), mf);
        assert_eq!(counts.denoiser, 2);
        let cfg0 = GuidanceConfig::ahvp(0.0);
        let (next, _, mf) = guided_step(&den, &sched, &cfg0, &x, &Tensor::row(&[5.0, 5.0]), 5, &z, &mut counts).unwrap();
        assert_eq!(next, plain);
        assert!(mf.is_none());
        assert_eq!(counts.denoiser, 3);
    }

    #[test]
    fn k1_control_shift_is_linear() {
        // Under a single Gaussian the mean map is affine with slope
        // J = a_{t-1} g + dir (1 - a_t g) / s_t, g = a_t v / (a_t² v + s_t²).
        let v = 0.6;
        let den = GmmOracleDenoiser::new(GmmPrior::gaussian(vec![0.2, -0.1], v).unwrap());
        let sched = build_schedule(8, 1e-4, 0.02, 0.5).unwrap();
        let gamma = 0.7;
        let cfg = GuidanceConfig::ahvp(gamma).with_kl(true);
        let x = Tensor::row(&[0.3, 1.1]);
        let u = Tensor::row(&[-0.4, 0.25]);
        for t in 1..=8 {
            let mut c = CallCounts::default();
            let (_, mc, mf) = guided_step(&den, &sched, &cfg, &x, &u, t, &Tensor::zeros(1, 2), &mut c).unwrap();
            let (a, s, ap) = (sched.a(t), sched.s(t), sched.a(t - 1));
            let g = a * v / (a * a * v + s * s);
            let j = ap * g + sched.direction_coef(t) * (1.0 - a * g) / s;
            let mf = mf.unwrap();
            for i in 0..2 {
                let diff = mc.get(0, i) - mf.get(0, i);
                assert!((diff - gamma * j * u.get(0, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_policies_reproduce_unguided_chain() {
        let (den, sched, task) = setup(3);
        let mut pols = PolicyPair::zero(3, 3, &[8], &[8], 1.0, 0.05, 1).unwrap();
        pols.step.stochastic = false;
        let obs = batch(&task, 5);
        let ids: Vec<u64> = (10..15).collect();
        let traj = ahvp_rollout(&pols, &den, &sched, &pols.guidance(), &obs, &ids, 3).unwrap();
        let plain = ReverseSampler::new(&den, &sched).rollout(&NoiseStreams::new(3), &ids).unwrap();
        assert_eq!(traj.states, plain);
    }

    #[test]
    fn call_counts_per_trajectory() {
        let (den, sched, task) = setup(2);
        let pols = PolicyPair::zero(2, 2, &[8], &[8], 1.0, 0.05, 1).unwrap();
        let obs = batch(&task, 300);
        let ids: Vec<u64> = (0..300).collect();
        let traj = ahvp_rollout(&pols, &den, &sched, &pols.guidance(), &obs, &ids, 0).unwrap();
        assert_eq!(
            traj.counts,
            CallCounts {
                noise_policy: 1,
                policy: 8,
                denoiser: 8,
                ..Default::default()
            }
        );
        let traj = ahvp_rollout(&pols, &den, &sched, &pols.guidance().with_kl(true), &obs, &ids, 0).unwrap();
        assert_eq!(traj.counts.denoiser, 16);
        assert_eq!(traj.steps.len(), 8);
        assert_eq!(traj.states.len(), 9);
    }

    #[test]
    fn rollouts_are_deterministic_and_chunking_invariant() {
        let (den, sched, task) = setup(2);
        let mut pols = PolicyPair::zero(2, 2, &[8], &[8], 1.0, 0.05, 1).unwrap();
        pols.noise.net = Mlp::new("noise", pols.noise.net.widths(), 4).unwrap();
        pols.step.net = Mlp::new("step", pols.step.net.widths(), 5).unwrap();
        let obs = batch(&task, 200);
        let ids: Vec<u64> = (0..200).collect();
        let a = ahvp_rollout(&pols, &den, &sched, &pols.guidance(), &obs, &ids, 9).unwrap();
        let b = ahvp_rollout(&pols, &den, &sched, &pols.guidance(), &obs, &ids, 9).unwrap();
        assert_eq!(a, b);
        let tail = ahvp_rollout(&pols, &den, &sched, &pols.guidance(), &obs.slice_rows(150, 200), &ids[150..], 9).unwrap();
        assert_eq!(tail.samples(), &a.samples().slice_rows(150, 200));
    }

    #[test]
    fn policy_std_is_nonincreasing() {
        let (den, sched, task) = setup(2);
        let pols = PolicyPair::zero(2, 2, &[8], &[8], 1.0, 0.05, 1).unwrap();
        let obs = batch(&task, 3);
        let traj = ahvp_rollout(&pols, &den, &sched, &pols.guidance(), &obs, &[0, 1, 2], 0).unwrap();
        let stds = traj.policy_stds();
        assert!(stds.windows(2).all(|w| w[1] <= w[0]));
        assert!((stds[0] - 0.05 * sched.s(8)).abs() < 1e-15);
    }

    #[test]
    fn summary_update() {
        let s = ControlSummary::zeros(1, 1).update(&Tensor::row(&[1.0]));
        assert_eq!(s.prev.data(), &[1.0]);
        assert!((s.ema.item() - 0.1).abs() < 1e-15);
        let s = s.update(&Tensor::row(&[0.0]));
        assert!((s.ema.item() - 0.09).abs() < 1e-15);
    }
}
