//! Self-checks runnable from the command line: oracle cross-validation and
//! finite-difference gradient checks of every differentiable loss.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{build_schedule, gmm_tweedie, GmmOracleDenoiser, GmmPrior, MlpDenoiser};
use crate::error::{HvpError, Result};
use crate::math::{Mlp, Tensor};
use crate::objective::{
    shvp_step_objective, stage1_objective, stage2_objective, surrogate_elbo_objective, LossWeights, Weight,
};
use crate::oracle::{bayes_identity_gap, log_evidence, mc_evidence, quadrature_tweedie_1d, GaussianLinearInstance};
use crate::policies::{ahvp_rollout, CallCounts, PolicyPair};
use crate::tasks::{make_dataset, ForwardTask, Observation, ObservationBatch, PoolLayout};

/// Relative error a gradient check must stay below.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng)
}

/// Random diagonal-prior instance with a dense operator and a draw of `y`
/// from its own generative model.
pub fn random_gaussian_instance(rng: &mut ChaCha8Rng, d: usize, m: usize) -> Result<(GmmPrior, ForwardTask, Vec<f64>)> {
    let mu: Vec<f64> = (0..d).map(|_| 0.5 * normal(rng)).collect();
    let var = rng.random_range(0.3..1.5);
    let a: Vec<f64> = (0..m * d).map(|_| normal(rng) / (d as f64).sqrt()).collect();
    let sigma_y = rng.random_range(0.5..1.0);
    let prior = GmmPrior::gaussian(mu.clone(), var)?;
    let task = ForwardTask::dense(Tensor::from_rows(m, d, a), sigma_y)?;
    let x: Vec<f64> = mu.iter().map(|m| m + var.sqrt() * normal(rng)).collect();
    let mut y = task.apply(&x)?;
    for v in &mut y {
        *v += sigma_y * normal(rng);
    }
    Ok((prior, task, y))
}

/// Oracle cross-checks: closed-form versus Monte-Carlo evidence, closed-form
/// versus quadrature Tweedie means, and the Bayes identity.
pub fn oracle_suite(seed: u64, mc_samples: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut worst_z: f64 = 0.0;
    let mut all = true;
    for i in 0..10 {
        let d = [1, 2, 4][i % 3];
        let (prior, task, y) = random_gaussian_instance(&mut rng, d, d)?;
        let inst = GaussianLinearInstance::from_task(&prior, &task, &y, None)?;
        let exact = log_evidence(&inst)?;
        let (est, se) = mc_evidence(&prior, &task, &y, None, mc_samples, seed ^ i as u64)?;
        let z = (est - exact).abs() / se;
        worst_z = worst_z.max(z);
        all &= z <= 3.0;
    }
    out.push(CheckResult::new(
        "log_evidence agrees with mc_evidence",
        all,
        format!("10 instances, worst |diff|/SE = {worst_z:.3}"),
    ));

    let sched = build_schedule(8, 1e-4, 0.02, 0.5)?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(1..=3);
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        let means: Vec<Vec<f64>> = (0..k).map(|_| vec![2.0 * normal(&mut rng)]).collect();
        let vars: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let prior = GmmPrior::new(w, means, vars)?;
        let t = rng.random_range(1..=8);
        let x = 2.0 * normal(&mut rng);
        let closed = gmm_tweedie(&prior, &sched, &Tensor::row(&[x]), t)?.item();
        let quad = quadrature_tweedie_1d(&prior, &sched, x, t, 100_001)?;
        worst = worst.max((closed - quad).abs());
    }
    out.push(CheckResult::new(
        "gmm_tweedie agrees with quadrature",
        worst < 1e-6,
        format!("20 one-dimensional instances, worst abs err = {worst:.3e}"),
    ));

    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let d = [1, 2, 4][i % 3];
        let (prior, task, y) = random_gaussian_instance(&mut rng, d, d.max(2) - 1)?;
        let inst = GaussianLinearInstance::from_task(&prior, &task, &y, None)?;
        for _ in 0..5 {
            let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            worst = worst.max(bayes_identity_gap(&inst, &x)?.abs());
        }
    }
    out.push(CheckResult::new(
        "posterior_moments satisfies the Bayes identity",
        worst < 1e-8,
        format!("10 instances x 5 points, worst gap = {worst:.3e}"),
    ));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub points: usize,
    pub coordinates: usize,
    pub worst_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < GRAD_TOL
    }
}

/// Relative error of one coordinate, measured against the larger of the two
/// values and a floor tied to the size of the whole gradient.
pub fn rel_err(analytic: f64, numeric: f64, grad_scale: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs()).max(1e-6 * grad_scale).max(1e-300);
    (analytic - numeric).abs() / den
}

fn central(f: &dyn Fn(f64) -> Result<f64>, x: f64) -> Result<f64> {
    let h = 1e-5 * x.abs().max(1.0);
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// Compares a named-parameter gradient against central differences on
/// `coords` randomly chosen coordinates. `eval(name, index, value)` returns
/// the loss with that single parameter replaced.
fn check_named(
    grads: &HashMap<String, Tensor>,
    params: &[(String, Tensor)],
    eval: &dyn Fn(&str, usize, f64) -> Result<f64>,
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let scale = grads.values().flat_map(|g| g.data().iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let total: usize = params.iter().map(|(_, p)| p.len()).sum();
    let mut worst: f64 = 0.0;
    let n = coords.min(total);
    for _ in 0..n {
        let mut k = rng.random_range(0..total);
        let (name, p) = params
            .iter()
            .find(|(_, p)| {
                if k < p.len() {
                    true
                } else {
                    k -= p.len();
                    false
                }
            })
            .expect("index within total");
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[k]);
        let numeric = central(&|v| eval(name, k, v), p.data()[k])?;
        worst = worst.max(rel_err(analytic, numeric, scale));
    }
    Ok((worst, n))
}

fn owned_params(net: &Mlp) -> Vec<(String, Tensor)> {
    net.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect()
}

fn with_param(net: &mut Mlp, name: &str, k: usize, v: f64) {
    for (n, p) in net.named_params_mut() {
        if n == name {
            p.data_mut()[k] = v;
        }
    }
}

fn random_pair(d: usize, c: usize, seed: u64) -> Result<PolicyPair> {
    let mut p = PolicyPair::zero(d, c, &[8], &[8], 1.0, 0.3, seed)?;
    p.noise.net = Mlp::new("noise", p.noise.net.widths(), seed.wrapping_add(11))?;
    p.step.net = Mlp::new("step", p.step.net.widths(), seed.wrapping_add(12))?;
    Ok(p)
}

struct Setup {
    prior: GmmPrior,
    task: ForwardTask,
    data: Vec<Observation>,
}

impl Setup {
    fn new(task: ForwardTask, seed: u64) -> Result<Self> {
        let d = task.dim();
        let prior = GmmPrior::new(vec![0.4, 0.6], vec![vec![0.6; d], vec![-0.4; d]], vec![0.4, 0.3])?;
        let data = make_dataset(&task, &prior, 3, seed, 0)?;
        Ok(Setup { prior, task, data })
    }

    fn batch(&self) -> Result<(ObservationBatch, Vec<u64>)> {
        let refs: Vec<&Observation> = self.data.iter().collect();
        Ok((
            ObservationBatch::from_observations(&self.task, &refs)?,
            self.data.iter().map(|o| o.id).collect(),
        ))
    }
}

/// Runs every gradient check on `points` random parameterizations each,
/// sampling `coords` coordinates per point.
pub fn gradient_suite(seed: u64, points: usize, coords: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = build_schedule(4, 1e-4, 0.02, 0.5)?;
    let weights = LossWeights {
        w_t: 1.0,
        ..LossWeights::default()
    };
    let mut out = Vec::new();
    let mut record = |name: &str, worst: f64, n: usize| {
        out.push(GradCheck {
            name: name.to_string(),
            points,
            coordinates: n,
            worst_rel_err: worst,
        })
    };

    // stage-1 loss, pooling task, noise-policy parameters
    let (mut worst, mut n) = (0.0f64, 0);
    for p in 0..points as u64 {
        let s = Setup::new(ForwardTask::pooling(4, 2, PoolLayout::Line, 0.3)?, seed + p)?;
        let den = GmmOracleDenoiser::new(s.prior.clone());
        let pols = random_pair(4, s.task.cond_dim(), seed + 100 + p)?;
        let (batch, ids) = s.batch()?;
        let f = |q: &PolicyPair| stage1_objective(q, &den, &sched, &s.task, &batch, &ids, seed + p, &weights);
        let (_, grads) = f(&pols)?;
        let eval = |name: &str, k: usize, v: f64| {
            let mut q = pols.clone();
            with_param(&mut q.noise.net, name, k, v);
            Ok(f(&q)?.0)
        };
        let (w, c) = check_named(&grads, &owned_params(&pols.noise.net), &eval, coords, &mut rng)?;
        worst = worst.max(w);
        n += c;
    }
    record("stage1_loss", worst, n);

    // stage-2 loss, fixed-mask task, controller parameters
    let (mut worst, mut n) = (0.0f64, 0);
    for p in 0..points as u64 {
        let s = Setup::new(ForwardTask::mask(vec![1.0, 0.0, 1.0], 0.3)?, seed + p)?;
        let den = GmmOracleDenoiser::new(s.prior.clone());
        let pols = random_pair(3, s.task.cond_dim(), seed + 200 + p)?;
        let (batch, ids) = s.batch()?;
        let traj = ahvp_rollout(&pols, &den, &sched, &pols.guidance().with_kl(true), &batch, &ids, seed + p)?;
        let w8 = LossWeights {
            w_score: Weight::Fixed(0.7),
            ..weights
        };
        let f = |q: &PolicyPair| stage2_objective(q, &den, &sched, &s.task, &batch, &traj, &w8);
        let (_, grads) = f(&pols)?;
        let eval = |name: &str, k: usize, v: f64| {
            let mut q = pols.clone();
            with_param(&mut q.step.net, name, k, v);
            Ok(f(&q)?.0)
        };
        let (w, c) = check_named(&grads, &owned_params(&pols.step.net), &eval, coords, &mut rng)?;
        worst = worst.max(w);
        n += c;
    }
    record("stage2_loss", worst, n);

    // surrogate bound, identity task, both networks
    let (mut worst, mut n) = (0.0f64, 0);
    for p in 0..points as u64 {
        let s = Setup::new(ForwardTask::identity(2, 0.3)?, seed + p)?;
        let den = GmmOracleDenoiser::new(s.prior.clone());
        let pols = random_pair(2, s.task.cond_dim(), seed + 300 + p)?;
        let (batch, ids) = s.batch()?;
        let f = |q: &PolicyPair| surrogate_elbo_objective(q, &den, &sched, &s.task, &batch, &ids, seed + p);
        let (_, grads) = f(&pols)?;
        let mut params = owned_params(&pols.noise.net);
        params.extend(owned_params(&pols.step.net));
        let eval = |name: &str, k: usize, v: f64| {
            let mut q = pols.clone();
            with_param(&mut q.noise.net, name, k, v);
            with_param(&mut q.step.net, name, k, v);
            Ok(f(&q)?.0)
        };
        let (w, c) = check_named(&grads, &params, &eval, coords, &mut rng)?;
        worst = worst.max(w);
        n += c;
    }
    record("elbo_surrogate", worst, n);

    // per-step refinement objective, nonlinear task, controls
    let (mut worst, mut n) = (0.0f64, 0);
    for p in 0..points as u64 {
        let s = Setup::new(ForwardTask::hdr(2, 2.0, 0.0, 0.3)?, seed + p)?;
        let den = GmmOracleDenoiser::new(s.prior.clone());
        let (batch, _) = s.batch()?;
        let b = batch.rows();
        let t = 1 + (p as usize % sched.steps());
        let x = Tensor::from_rows(b, 2, (0..2 * b).map(|_| normal(&mut rng)).collect());
        let u = Tensor::from_rows(b, 2, (0..2 * b).map(|_| 0.3 * normal(&mut rng)).collect());
        let f = |u: &Tensor| {
            let mut c = CallCounts::default();
            shvp_step_objective(&x, u, t, &s.task, &batch, &den, &sched, 1.0, 0.8, 0.6, &mut c)
        };
        let (_, g) = f(&u)?;
        let grads = HashMap::from([("u".to_string(), g)]);
        let eval = |_: &str, k: usize, v: f64| {
            let mut q = u.clone();
            q.data_mut()[k] = v;
            Ok(f(&q)?.0.iter().sum())
        };
        let (w, c) = check_named(&grads, &[("u".to_string(), u.clone())], &eval, coords, &mut rng)?;
        worst = worst.max(w);
        n += c;
    }
    record("shvp_step_objective", worst, n);

    // measurement log-likelihood of every task kind, in x_0
    let (mut worst, mut n) = (0.0f64, 0);
    for p in 0..points as u64 {
        let tasks = [
            ForwardTask::identity(4, 0.3)?,
            ForwardTask::pooling(4, 2, PoolLayout::Square, 0.3)?,
            ForwardTask::mask(vec![1.0, 0.0, 0.0, 1.0], 0.3)?,
            ForwardTask::random_mask(4, 0.5, 0.3)?,
            ForwardTask::hdr(4, 2.0, 0.1, 0.3)?,
        ];
        for task in &tasks {
            let s = Setup::new(task.clone(), seed + p)?;
            let o = &s.data[0];
            let x0: Vec<f64> = (0..4).map(|_| 0.7 * normal(&mut rng)).collect();
            let g = task.log_likelihood_grad(&o.y, &x0, o.mask.as_deref())?;
            let grads = HashMap::from([("x".to_string(), Tensor::row(&g))]);
            let eval = |_: &str, k: usize, v: f64| {
                let mut q = x0.clone();
                q[k] = v;
                task.log_likelihood_with(&o.y, &q, o.mask.as_deref())
            };
            let (w, c) = check_named(&grads, &[("x".to_string(), Tensor::row(&x0))], &eval, coords, &mut rng)?;
            worst = worst.max(w);
            n += c;
        }
    }
    record("log_likelihood", worst, n);

    // denoiser regression loss, network parameters
    let (mut worst, mut n) = (0.0f64, 0);
    for p in 0..points as u64 {
        let prior = GmmPrior::new(vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![-1.0, 0.5]], vec![0.2, 0.2])?;
        let den = MlpDenoiser::new(2, &[8], seed + 400 + p)?;
        let ids: Vec<u64> = (0..6).collect();
        let f = |m: &MlpDenoiser| m.regression_loss(&prior, &sched, &ids, seed + p);
        let (_, grads) = f(&den)?;
        let eval = |name: &str, k: usize, v: f64| {
            let mut q = den.clone();
            with_param(&mut q.net, name, k, v);
            Ok(f(&q)?.0)
        };
        let (w, c) = check_named(&grads, &owned_params(&den.net), &eval, coords, &mut rng)?;
        worst = worst.max(w);
        n += c;
    }
    record("denoiser_regression", worst, n);

    if out.iter().any(|c| !c.worst_rel_err.is_finite()) {
        return Err(HvpError::numeric("gradcheck", "non-finite relative error"));
    }
    Ok(out)
}
