use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::NoiseSchedule;
use crate::error::{HvpError, Result};
use crate::math::{Tape, Tensor, Var};
use crate::rng::{rng_for, NoiseRole};

/// Mixture of isotropic Gaussians, `Σ_k w_k N(m_k, v_k I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(HvpError::Parameter(
                "prior needs matching, non-empty weights, means and variances".into(),
            ));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(HvpError::Parameter("prior means must share one dimension".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(HvpError::Parameter("prior weights must be nonnegative and sum to 1".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(HvpError::Parameter("prior variances must be positive".into()));
        }
        Ok(GmmPrior {
            weights,
            means,
            variances,
        })
    }

    /// Single isotropic Gaussian.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn standard_normal(d: usize) -> Self {
        Self::gaussian(vec![0.0; d], 1.0).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, x) in out.iter_mut().zip(m) {
                *o += w * x;
            }
        }
        out
    }

    /// Per-coordinate marginal variance (identical for every coordinate
    /// only when the component means agree).
    pub fn coordinate_variance(&self) -> Vec<f64> {
        let mu = self.mean();
        let mut out = vec![0.0; self.dim()];
        for ((w, m), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            for i in 0..out.len() {
                out[i] += w * (v + (m[i] - mu[i]).powi(2));
            }
        }
        out
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| {
                let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
                w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - sq / (2.0 * v)
            })
            .collect();
        log_sum_exp(&logs)
    }

    /// Draws one sample from a caller-owned generator.
    pub fn sample_with(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let sd = self.variances[k].sqrt();
        self.means[k]
            .iter()
            .map(|m| m + sd * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect()
    }

    /// `n` samples addressed by `(seed, index)`, `[n, d]`.
    pub fn sample(&self, n: usize, seed: u64) -> Tensor {
        self.sample_ids(&(0..n as u64).collect::<Vec<_>>(), seed)
    }

    pub fn sample_ids(&self, ids: &[u64], seed: u64) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let mut rng = rng_for(seed, NoiseRole::Prior, id, 0);
            data.extend(self.sample_with(&mut rng));
        }
        Tensor::from_rows(ids.len(), d, data)
    }

    /// Records the posterior mean `E[x_0 | x_t]` for a batch `x` (`[B, d]`).
    ///
    /// With `c_k = a² v_k + s²`, the result is
    /// `Σ_k r_k (a v_k x + s² m_k) / c_k` and the responsibilities
    /// `r_k ∝ w_k N(x; a m_k, c_k I)` are formed in log space.
    pub fn tweedie_on_tape(&self, tape: &mut Tape, sched: &NoiseSchedule, x: Var, t: usize) -> Result<Var> {
        let d = self.dim();
        if tape.value(x).cols() != d {
            return Err(HvpError::Dimension(format!(
                "prior has dimension {d}, input has {}",
                tape.value(x).cols()
            )));
        }
        if t > sched.steps() {
            return Err(HvpError::Parameter(format!("t = {t} beyond schedule")));
        }
        let (a, s) = (sched.a(t), sched.s(t));
        let k = self.components();
        let c: Vec<f64> = self.variances.iter().map(|v| a * a * v + s * s).collect();
        if let Some(bad) = c.iter().find(|&&ck| !(ck > 0.0)) {
            return Err(HvpError::numeric("tweedie", format!("degenerate variance {bad}")));
        }

        // logits_k = log w_k - d/2 log(2π c_k) - (|x|² - 2a x·m_k + a²|m_k|²) / (2 c_k)
        let mut cross = vec![0.0; d * k];
        let mut xsq_coef = vec![0.0; k];
        let mut bias = vec![0.0; k];
        for j in 0..k {
            let m = &self.means[j];
            let msq: f64 = m.iter().map(|v| v * v).sum();
            for i in 0..d {
                cross[i * k + j] = a * m[i] / c[j];
            }
            xsq_coef[j] = -0.5 / c[j];
            bias[j] = self.weights[j].ln()
                - 0.5 * d as f64 * (2.0 * std::f64::consts::PI * c[j]).ln()
                - a * a * msq / (2.0 * c[j]);
        }
        let cross = tape.constant(Tensor::from_rows(d, k, cross));
        let xsq_coef = tape.constant(Tensor::row(&xsq_coef));
        let bias = tape.constant(Tensor::row(&bias));

        let xm = tape.matmul(x, cross)?;
        let xsq = tape.row_norm_sq(x);
        let quad = tape.mul(xsq, xsq_coef)?;
        let l = tape.add(xm, quad)?;
        let logits = tape.add(l, bias)?;
        let resp = tape.softmax_rows(logits);

        // x̂_0 = x * (r · (a v / c)) + r @ (s² m / c)
        let gain: Vec<f64> = (0..k).map(|j| a * self.variances[j] / c[j]).collect();
        let mut shift = vec![0.0; k * d];
        for j in 0..k {
            for i in 0..d {
                shift[j * d + i] = s * s * self.means[j][i] / c[j];
            }
        }
        let gain = tape.constant(Tensor::col(&gain));
        let shift = tape.constant(Tensor::from_rows(k, d, shift));
        let g = tape.matmul(resp, gain)?;
        let scaled = tape.mul(x, g)?;
        let offset = tape.matmul(resp, shift)?;
        tape.add(scaled, offset)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Closed-form posterior mean `E[x_0 | x_t]` under a mixture prior.
pub fn gmm_tweedie(prior: &GmmPrior, sched: &NoiseSchedule, x_t: &Tensor, t: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(x_t.clone());
    let out = prior.tweedie_on_tape(&mut tape, sched, x, t)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::build_schedule;

    fn sched_with(a: f64, s: f64) -> NoiseSchedule {
        NoiseSchedule::from_levels(vec![1.0, a], vec![0.0, s], vec![0.0]).unwrap()
    }

    #[test]
    fn conjugate_single_component() {
        let prior = GmmPrior::standard_normal(1);
        let sched = sched_with(0.8, 0.6);
        let out = gmm_tweedie(&prior, &sched, &Tensor::scalar(1.0), 1).unwrap();
        assert!((out.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn symmetric_prior_at_origin() {
        let prior = GmmPrior::new(vec![0.5, 0.5], vec![vec![1.0], vec![-1.0]], vec![0.3, 0.3]).unwrap();
        let sched = build_schedule(8, 1e-4, 0.02, 0.5).unwrap();
        for t in 1..=8 {
            let out = gmm_tweedie(&prior, &sched, &Tensor::scalar(0.0), t).unwrap();
            assert!(out.item().abs() < 1e-15);
        }
    }

    #[test]
    fn identity_at_t_zero() {
        let prior = GmmPrior::new(vec![0.2, 0.8], vec![vec![1.0, 2.0], vec![-1.0, 0.0]], vec![0.1, 2.0]).unwrap();
        let sched = NoiseSchedule::default();
        let x = Tensor::row(&[0.37, -1.2]);
        let out = gmm_tweedie(&prior, &sched, &x, 0).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn k1_matches_conjugate_formula_on_schedule() {
        let prior = GmmPrior::gaussian(vec![0.5, -1.0], 0.7).unwrap();
        let sched = NoiseSchedule::default();
        let x = Tensor::from_rows(2, 2, vec![0.1, 0.2, -2.0, 3.0]);
        for t in 1..=8 {
            let (a, s) = (sched.a(t), sched.s(t));
            let out = gmm_tweedie(&prior, &sched, &x, t).unwrap();
            for r in 0..2 {
                for i in 0..2 {
                    let m = prior.means()[0][i];
                    let want = (a * 0.7 * x.get(r, i) + s * s * m) / (a * a * 0.7 + s * s);
                    assert!((out.get(r, i) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn narrow_components_do_not_underflow() {
        let prior = GmmPrior::new(vec![0.5, 0.5], vec![vec![5.0], vec![-5.0]], vec![1e-6, 1e-6]).unwrap();
        let sched = NoiseSchedule::default();
        let out = gmm_tweedie(&prior, &sched, &Tensor::scalar(30.0), 1).unwrap();
        assert!(out.is_finite());
        assert!((out.item() - 5.0).abs() < 1e-3);
    }

    #[test]
    fn invalid_priors_rejected() {
        assert!(GmmPrior::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(GmmPrior::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
        assert!(GmmPrior::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0, 2.0]], vec![1.0, 1.0]).is_err());
    }
}
