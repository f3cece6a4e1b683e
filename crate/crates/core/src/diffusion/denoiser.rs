use std::cell::Cell;
use std::collections::HashMap;

use super::gmm::GmmPrior;
use super::schedule::NoiseSchedule;
use crate::error::{HvpError, Result};
use crate::math::{AdamState, Mlp, Tape, Tensor, Var};
use crate::rng::{normals, NoiseRole, NoiseStreams};

/// The fixed "pretrained" model: a posterior-mean predictor `x̂_0(x_t, t)`.
///
/// The reverse-step mean is derived from it, see [`Denoiser::mean_on_tape`].
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    /// Records `x̂_0 = E[x_0 | x_t]` for a batch `[B, d]`.
    fn tweedie_on_tape(&self, tape: &mut Tape, sched: &NoiseSchedule, x: Var, t: usize) -> Result<Var>;

    /// Records the reverse-step mean
    /// `μ = a_{t-1} x̂_0 + sqrt(s_{t-1}² - rσ_{t-1}²) (x_t - a_t x̂_0) / s_t`.
    fn mean_on_tape(&self, tape: &mut Tape, sched: &NoiseSchedule, x: Var, t: usize) -> Result<Var> {
        let x0 = self.tweedie_on_tape(tape, sched, x, t)?;
        mean_from_tweedie(tape, sched, x, x0, t)
    }
}

/// Combines `x_t` and its Tweedie estimate into the reverse-step mean.
pub fn mean_from_tweedie(tape: &mut Tape, sched: &NoiseSchedule, x: Var, x0: Var, t: usize) -> Result<Var> {
    if t == 0 || t > sched.steps() {
        return Err(HvpError::Parameter(format!("reverse step t = {t} outside [1, T]")));
    }
    let s = sched.s(t);
    if !(s > 0.0) {
        return Err(HvpError::Schedule(format!("s_{t} = 0 on a reverse step")));
    }
    let dir = sched.direction_coef(t);
    let c0 = sched.a(t - 1) - dir * sched.a(t) / s;
    let a = tape.scale(x0, c0);
    let b = tape.scale(x, dir / s);
    tape.add(a, b)
}

/// Closed-form denoiser of a Gaussian-mixture prior.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmOracleDenoiser {
    pub prior: GmmPrior,
}

impl GmmOracleDenoiser {
    pub fn new(prior: GmmPrior) -> Self {
        GmmOracleDenoiser { prior }
    }
}

impl Denoiser for GmmOracleDenoiser {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn tweedie_on_tape(&self, tape: &mut Tape, sched: &NoiseSchedule, x: Var, t: usize) -> Result<Var> {
        self.prior.tweedie_on_tape(tape, sched, x, t)
    }
}

/// Network predicting `x̂_0` from `(x_t, a_t, s_t)`, trained by denoising
/// regression on prior samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    pub net: Mlp,
}

impl MlpDenoiser {
    pub fn new(d: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut widths = vec![d + 2];
        widths.extend_from_slice(hidden);
        widths.push(d);
        Ok(MlpDenoiser {
            net: Mlp::new("denoiser", &widths, seed)?,
        })
    }

    fn record(&self, tape: &mut Tape, x: Var, a: Var, s: Var, trainable: bool) -> Result<Var> {
        let input = tape.concat(&[x, a, s])?;
        self.net.forward(tape, input, trainable)
    }

    /// Denoising regression loss `mean |net(a x_0 + s eps) - x_0|²` on one
    /// batch of prior draws with uniformly drawn steps, and its gradient.
    pub fn regression_loss(
        &self,
        prior: &GmmPrior,
        sched: &NoiseSchedule,
        ids: &[u64],
        seed: u64,
    ) -> Result<(f64, HashMap<String, Tensor>)> {
        let (d, batch) = (prior.dim(), ids.len());
        let x0 = prior.sample_ids(ids, seed);
        let mut xt = Vec::with_capacity(batch * d);
        let mut acol = Vec::with_capacity(batch);
        let mut scol = Vec::with_capacity(batch);
        for (r, &id) in ids.iter().enumerate() {
            let u = normals(seed, NoiseRole::Batch, id, 0, d + 1);
            let t = 1 + ((u[d].abs() * 1e6) as usize % sched.steps());
            let (a, s) = (sched.a(t), sched.s(t));
            for i in 0..d {
                xt.push(a * x0.get(r, i) + s * u[i]);
            }
            acol.push(a);
            scol.push(s);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(batch, d, xt));
        let a = tape.constant(Tensor::col(&acol));
        let s = tape.constant(Tensor::col(&scol));
        let pred = self.record(&mut tape, x, a, s, true)?;
        let target = tape.constant(x0);
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        Ok((tape.value(loss).item(), tape.backward(loss)?.params()))
    }

    /// Fits the network with Adam on the regression loss. Returns the
    /// per-iteration loss.
    pub fn fit(
        &mut self,
        prior: &GmmPrior,
        sched: &NoiseSchedule,
        iterations: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let mut adam = AdamState::new(lr);
        let mut curve = Vec::with_capacity(iterations);
        for it in 0..iterations {
            let ids: Vec<u64> = (0..batch as u64).map(|i| it as u64 * batch as u64 + i).collect();
            let (loss, grads) = self.regression_loss(prior, sched, &ids, seed)?;
            curve.push(loss);
            adam.step(self.net.named_params_mut(), &grads)?;
        }
        Ok(curve)
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.net.output_width()
    }

    fn tweedie_on_tape(&self, tape: &mut Tape, sched: &NoiseSchedule, x: Var, t: usize) -> Result<Var> {
        if t > sched.steps() {
            return Err(HvpError::Parameter(format!("t = {t} beyond schedule")));
        }
        let b = tape.value(x).rows();
        let a = tape.constant(Tensor::filled(b, 1, sched.a(t)));
        let s = tape.constant(Tensor::filled(b, 1, sched.s(t)));
        self.record(tape, x, a, s, false)
    }
}

/// Plain evaluation of the reverse-step mean `μ_pretrained(x_t, t)`.
pub fn denoiser_mean(den: &dyn Denoiser, sched: &NoiseSchedule, x_t: &Tensor, t: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let mu = den.mean_on_tape(&mut tape, sched, x, t)?;
    Ok(tape.value(mu).clone())
}

/// Unguided reverse sampler that counts denoiser evaluations.
pub struct ReverseSampler<'a> {
    den: &'a dyn Denoiser,
    sched: &'a NoiseSchedule,
    calls: Cell<u64>,
}

impl<'a> ReverseSampler<'a> {
    pub fn new(den: &'a dyn Denoiser, sched: &'a NoiseSchedule) -> Self {
        ReverseSampler {
            den,
            sched,
            calls: Cell::new(0),
        }
    }

    pub fn denoiser_calls(&self) -> u64 {
        self.calls.get()
    }

    /// `x_{t-1} = μ(x_t, t) + rσ_{t-1} noise`.
    pub fn reverse_sample(&self, x_t: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        if noise.shape() != x_t.shape() {
            return Err(HvpError::Dimension("noise shape differs from state".into()));
        }
        let mu = denoiser_mean(self.den, self.sched, x_t, t)?;
        self.calls.set(self.calls.get() + 1);
        let r = self.sched.reverse_std(t);
        let data = mu.data().iter().zip(noise.data()).map(|(m, z)| m + r * z).collect();
        Ok(Tensor::from_rows(mu.rows(), mu.cols(), data))
    }

    /// Full unguided chain from `x_T = eps` using the step-noise stream.
    pub fn rollout(&self, streams: &NoiseStreams, ids: &[u64]) -> Result<Vec<Tensor>> {
        let d = self.den.dim();
        let steps = self.sched.steps();
        let mut states = vec![streams.initial(ids, d)];
        for t in (1..=steps).rev() {
            let noise = streams.step(ids, t, d);
            let next = self.reverse_sample(states.last().unwrap(), t, &noise)?;
            states.push(next);
        }
        states.reverse();
        Ok(states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::build_schedule;

    #[test]
    fn final_deterministic_step_returns_tweedie() {
        let sched = build_schedule(8, 1e-4, 0.02, 0.0).unwrap();
        let prior = GmmPrior::new(vec![0.3, 0.7], vec![vec![1.0, 0.0], vec![-1.0, 2.0]], vec![0.2, 0.5]).unwrap();
        let den = GmmOracleDenoiser::new(prior.clone());
        let x = Tensor::row(&[0.4, -0.3]);
        let mu = denoiser_mean(&den, &sched, &x, 1).unwrap();
        let x0 = super::super::gmm::gmm_tweedie(&prior, &sched, &x, 1).unwrap();
        assert_eq!(mu, x0);
    }

    #[test]
    fn degenerate_prior_mean_is_a_fixed_point() {
        let sched = NoiseSchedule::default();
        let m = vec![0.7, -1.3];
        let den = GmmOracleDenoiser::new(GmmPrior::gaussian(m.clone(), 1e-12).unwrap());
        for t in 1..=8 {
            let x = Tensor::row(&[sched.a(t) * m[0], sched.a(t) * m[1]]);
            let mu = denoiser_mean(&den, &sched, &x, t).unwrap();
            for i in 0..2 {
                assert!((mu.data()[i] - sched.a(t - 1) * m[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mean_gradient_matches_finite_differences() {
        let sched = NoiseSchedule::default();
        let prior = GmmPrior::new(vec![0.4, 0.6], vec![vec![1.0, -0.5], vec![-1.0, 0.8]], vec![0.1, 0.3]).unwrap();
        let den = GmmOracleDenoiser::new(prior);
        let x0 = Tensor::row(&[0.3, -0.2]);
        let dir = Tensor::row(&[0.6, -1.1]);
        for t in 1..=8 {
            let mut tape = Tape::new();
            let x = tape.param("x", &x0);
            let mu = den.mean_on_tape(&mut tape, &sched, x, t).unwrap();
            let w = tape.constant(dir.clone());
            let p = tape.mul(mu, w).unwrap();
            let f = tape.sum_all(p);
            let g = tape.backward(f).unwrap().wrt(x);
            let h = 1e-5;
            for i in 0..2 {
                let eval = |delta: f64| {
                    let mut xp = x0.clone();
                    xp.data_mut()[i] += delta;
                    let m = denoiser_mean(&den, &sched, &xp, t).unwrap();
                    m.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum::<f64>()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-12);
                assert!(rel < 1e-4, "t={t} i={i} fd={fd} ad={}", g.data()[i]);
            }
        }
    }

    #[test]
    fn zero_reverse_std_or_zero_noise_gives_mean() {
        let sched = NoiseSchedule::default();
        let den = GmmOracleDenoiser::new(GmmPrior::standard_normal(3));
        let sampler = ReverseSampler::new(&den, &sched);
        let x = Tensor::row(&[0.1, 0.5, -0.9]);
        let out = sampler.reverse_sample(&x, 4, &Tensor::zeros(1, 3)).unwrap();
        assert_eq!(out, denoiser_mean(&den, &sched, &x, 4).unwrap());
        assert_eq!(sampler.denoiser_calls(), 1);

        let det = build_schedule(8, 1e-4, 0.02, 0.0).unwrap();
        let sampler = ReverseSampler::new(&den, &det);
        let noisy = sampler.reverse_sample(&x, 4, &Tensor::row(&[3.0, -2.0, 1.0])).unwrap();
        assert_eq!(noisy, denoiser_mean(&den, &det, &x, 4).unwrap());
    }

    #[test]
    fn schedule_error_when_s_is_zero() {
        let sched = NoiseSchedule::default();
        let den = GmmOracleDenoiser::new(GmmPrior::standard_normal(1));
        assert!(denoiser_mean(&den, &sched, &Tensor::scalar(0.0), 0).is_err());
    }

    #[test]
    fn unguided_chain_keeps_prior_mean() {
        let sched = NoiseSchedule::default();
        let den = GmmOracleDenoiser::new(GmmPrior::standard_normal(2));
        let sampler = ReverseSampler::new(&den, &sched);
        let n = 10_000u64;
        let ids: Vec<u64> = (0..n).collect();
        let states = sampler.rollout(&NoiseStreams::new(3), &ids).unwrap();
        assert_eq!(sampler.denoiser_calls(), 8);
        let x0 = &states[0];
        for i in 0..2 {
            let col: Vec<f64> = (0..n as usize).map(|r| x0.get(r, i)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 3.0 * var.sqrt() / (n as f64).sqrt(), "coord {i}: {mean}");
        }
    }

    #[test]
    fn mlp_denoiser_learns_gaussian_posterior_mean() {
        let sched = NoiseSchedule::default();
        let prior = GmmPrior::gaussian(vec![0.5, -0.5], 0.5).unwrap();
        let mut den = MlpDenoiser::new(2, &[32, 32], 1).unwrap();
        let curve = den.fit(&prior, &sched, 1500, 128, 3e-3, 5).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let oracle = GmmOracleDenoiser::new(prior);
        let x = Tensor::from_rows(3, 2, vec![0.0, 0.0, 0.5, -0.5, 1.0, 0.2]);
        for t in [2, 5, 8] {
            let a = denoiser_mean(&den, &sched, &x, t).unwrap();
            let b = denoiser_mean(&oracle, &sched, &x, t).unwrap();
            let err = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(err < 0.15, "t={t} err={err}");
        }
    }
}
