//! Ground truth for checking the sampler: closed-form evidence and
//! posterior of linear-Gaussian instances, quadrature Tweedie estimates and
//! Monte-Carlo evidence for everything else.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::diffusion::{log_sum_exp, GmmPrior, NoiseSchedule};
use crate::error::{HvpError, Result};
use crate::math::Tensor;
use crate::tasks::ForwardTask;

const LN_2PI: f64 = 1.8378770664093453;

/// Minimum sample count accepted by [`mc_evidence`].
pub const MIN_MC_SAMPLES: usize = 10_000;

/// `x ~ N(μ0, diag(v0))`, `y = A x + σ_y z`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLinearInstance {
    pub mu0: Vec<f64>,
    pub var0: Vec<f64>,
    /// `m x d`.
    pub a: Tensor,
    pub sigma_y: f64,
    pub y: Vec<f64>,
}

impl GaussianLinearInstance {
    pub fn new(mu0: Vec<f64>, var0: Vec<f64>, a: Tensor, sigma_y: f64, y: Vec<f64>) -> Result<Self> {
        let d = mu0.len();
        if var0.len() != d || a.cols() != d || a.rows() != y.len() {
            return Err(HvpError::Dimension(format!(
                "instance shapes: mu0 {d}, var0 {}, A {:?}, y {}",
                var0.len(),
                a.shape(),
                y.len()
            )));
        }
        if var0.iter().any(|&v| !(v > 0.0)) {
            return Err(HvpError::Parameter("prior variances must be positive".into()));
        }
        if !(sigma_y >= 0.0 && sigma_y.is_finite()) {
            return Err(HvpError::Parameter(format!("sigma_y must be nonnegative, got {sigma_y}")));
        }
        Ok(GaussianLinearInstance {
            mu0,
            var0,
            a,
            sigma_y,
            y,
        })
    }

    /// Instance for a single-Gaussian prior and a linear task. `mask` is the
    /// observation's mask for random inpainting.
    pub fn from_task(prior: &GmmPrior, task: &ForwardTask, y: &[f64], mask: Option<&[f64]>) -> Result<Self> {
        if prior.components() != 1 {
            return Err(HvpError::Parameter("closed-form evidence needs a single-Gaussian prior".into()));
        }
        let a = task
            .linear_matrix(mask)
            .ok_or_else(|| HvpError::Parameter("closed-form evidence needs a linear task".into()))?;
        Self::new(
            prior.means()[0].clone(),
            vec![prior.variances()[0]; prior.dim()],
            a,
            task.sigma_y(),
            y.to_vec(),
        )
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    fn a_mat(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.a.rows(), self.a.cols(), self.a.data())
    }

    /// `A Σ0 Aᵀ + σ_y² I`.
    fn evidence_cov(&self) -> DMatrix<f64> {
        let a = self.a_mat();
        let sa = DMatrix::from_diagonal(&DVector::from_vec(self.var0.clone())) * a.transpose();
        let mut c = &a * sa;
        for i in 0..c.nrows() {
            c[(i, i)] += self.sigma_y * self.sigma_y;
        }
        c
    }

    fn residual(&self) -> DVector<f64> {
        let am = self.a_mat() * DVector::from_vec(self.mu0.clone());
        DVector::from_vec(self.y.clone()) - am
    }

    pub fn log_prior(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mu0)
            .zip(&self.var0)
            .map(|((x, m), v)| -0.5 * (LN_2PI + v.ln()) - (x - m).powi(2) / (2.0 * v))
            .sum()
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let s2 = self.sigma_y * self.sigma_y;
        let m = self.a.rows() as f64;
        let sq: f64 = (0..self.a.rows())
            .map(|r| {
                let ax: f64 = self.a.row_slice(r).iter().zip(x).map(|(a, b)| a * b).sum();
                (self.y[r] - ax).powi(2)
            })
            .sum();
        -0.5 * m * (LN_2PI + s2.ln()) - sq / (2.0 * s2)
    }
}

/// `log N(y; A μ0, A Σ0 Aᵀ + σ_y² I)` through a Cholesky factorization.
pub fn log_evidence(inst: &GaussianLinearInstance) -> Result<f64> {
    let c = inst.evidence_cov();
    let m = c.nrows();
    let chol = c
        .cholesky()
        .ok_or_else(|| HvpError::numeric("evidence covariance", "not positive definite"))?;
    let r = inst.residual();
    let w = chol.l().solve_lower_triangular(&r).ok_or_else(|| HvpError::numeric("evidence", "singular factor"))?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (m as f64 * LN_2PI + logdet + w.norm_squared()))
}

/// Conjugate posterior `(mean, covariance)`.
pub fn posterior_moments(inst: &GaussianLinearInstance) -> Result<(Vec<f64>, Tensor)> {
    let c = inst.evidence_cov();
    let chol = c
        .cholesky()
        .ok_or_else(|| HvpError::numeric("evidence covariance", "not positive definite"))?;
    let d = inst.dim();
    let s0 = DMatrix::from_diagonal(&DVector::from_vec(inst.var0.clone()));
    let gain_t = chol.solve(&(inst.a_mat() * &s0)); // C⁻¹ A Σ0
    let mean = DVector::from_vec(inst.mu0.clone()) + gain_t.transpose() * inst.residual();
    let cov = &s0 - (&s0 * inst.a_mat().transpose()) * &gain_t;
    let mut data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            data.push(cov[(i, j)]);
        }
    }
    Ok((mean.iter().copied().collect(), Tensor::from_rows(d, d, data)))
}

/// Log density of a Gaussian with dense covariance.
pub fn log_gaussian(x: &[f64], mean: &[f64], cov: &Tensor) -> Result<f64> {
    let d = x.len();
    let c = DMatrix::from_row_slice(d, d, cov.data());
    let chol = c
        .cholesky()
        .ok_or_else(|| HvpError::numeric("covariance", "not positive definite"))?;
    let r = DVector::from_iterator(d, x.iter().zip(mean).map(|(a, b)| a - b));
    let w = chol.l().solve_lower_triangular(&r).ok_or_else(|| HvpError::numeric("covariance", "singular"))?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (d as f64 * LN_2PI + logdet + w.norm_squared()))
}

/// `|log p(y) + log p(x|y) - log p(x) - log p(y|x)|` at `x`.
pub fn bayes_identity_gap(inst: &GaussianLinearInstance, x: &[f64]) -> Result<f64> {
    let (mean, cov) = posterior_moments(inst)?;
    let lhs = log_evidence(inst)? + log_gaussian(x, &mean, &cov)?;
    let rhs = inst.log_prior(x) + inst.log_likelihood(x);
    Ok((lhs - rhs).abs())
}

/// Marginal of `x_0` under the unguided chain started from `N(0, I)` when
/// the prior is a single Gaussian. Every reverse step is then affine,
/// `x_{t-1} = α_t x_t + β_t m + rσ_{t-1} z`, so the marginal stays an
/// isotropic Gaussian.
pub fn chain_marginal(prior: &GmmPrior, sched: &NoiseSchedule) -> Result<GmmPrior> {
    if prior.components() != 1 {
        return Err(HvpError::Parameter("chain marginal needs a single-Gaussian prior".into()));
    }
    let m = &prior.means()[0];
    let v = prior.variances()[0];
    let mut mean = vec![0.0; prior.dim()];
    let mut var = 1.0;
    for t in (1..=sched.steps()).rev() {
        let (a, s) = (sched.a(t), sched.s(t));
        let c = a * a * v + s * s;
        let (g, h) = (a * v / c, s * s / c);
        let dir = sched.direction_coef(t);
        let c0 = sched.a(t - 1) - dir * a / s;
        let alpha = c0 * g + dir / s;
        let beta = c0 * h;
        for (mi, &pm) in mean.iter_mut().zip(m) {
            *mi = alpha * *mi + beta * pm;
        }
        var = alpha * alpha * var + sched.reverse_std(t).powi(2);
    }
    GmmPrior::gaussian(mean, var)
}

/// Trapezoid estimate of `E[x_0 | x_t]` for a one-dimensional mixture prior
/// on `n` points spanning eight component deviations past the extreme means.
/// The estimate is compared against the half-resolution grid and rejected if
/// the two disagree by more than `1e-7`.
pub fn quadrature_tweedie_1d(prior: &GmmPrior, sched: &NoiseSchedule, x_t: f64, t: usize, n: usize) -> Result<f64> {
    if prior.dim() != 1 {
        return Err(HvpError::Parameter("quadrature oracle is one-dimensional".into()));
    }
    if t == 0 || t > sched.steps() {
        return Err(HvpError::Parameter(format!("t = {t} outside [1, T]")));
    }
    if n < 3 || n % 2 == 0 {
        return Err(HvpError::Parameter("grid needs an odd number of at least 3 points".into()));
    }
    let sd = prior.variances().iter().cloned().fold(0.0, f64::max).sqrt();
    let (a, s) = (sched.a(t), sched.s(t));
    // Cover both the prior and the likelihood; in the tails the posterior
    // sits near x_t / a.
    let (lik_lo, lik_hi) = (x_t / a - 8.0 * s / a, x_t / a + 8.0 * s / a);
    let lo = prior.means().iter().map(|m| m[0]).fold(f64::INFINITY, f64::min) - 8.0 * sd;
    let hi = prior.means().iter().map(|m| m[0]).fold(f64::NEG_INFINITY, f64::max) + 8.0 * sd;
    let (lo, hi) = (lo.min(lik_lo), hi.max(lik_hi));
    let h = (hi - lo) / (n - 1) as f64;
    let logw: Vec<f64> = (0..n)
        .map(|i| {
            let x0 = lo + i as f64 * h;
            prior.log_density(&[x0]) - (x_t - a * x0).powi(2) / (2.0 * s * s)
        })
        .collect();
    let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let integrate = |stride: usize| {
        let (mut num, mut den) = (0.0, 0.0);
        let last = n - 1;
        for i in (0..n).step_by(stride) {
            let w = if i == 0 || i == last { 0.5 } else { 1.0 } * (logw[i] - mx).exp();
            num += w * (lo + i as f64 * h);
            den += w;
        }
        num / den
    };
    let fine = integrate(1);
    let coarse = integrate(2);
    if !fine.is_finite() {
        return Err(HvpError::numeric("quadrature", "non-finite estimate"));
    }
    if (fine - coarse).abs() > 1e-7 {
        return Err(HvpError::Tolerance(format!(
            "grid too coarse: full {fine} vs half resolution {coarse}"
        )));
    }
    Ok(fine)
}

/// Log-mean-exp of `log p(y|x_0)` over `n` prior draws, with a jackknife
/// standard error. The estimate is biased low as an estimate of `log p(y)`.
pub fn mc_evidence(
    prior: &GmmPrior,
    task: &ForwardTask,
    y: &[f64],
    mask: Option<&[f64]>,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n < MIN_MC_SAMPLES {
        return Err(HvpError::Parameter(format!("need at least {MIN_MC_SAMPLES} samples, got {n}")));
    }
    const PART: usize = 4096;
    let starts: Vec<usize> = (0..n).step_by(PART).collect();
    let parts = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + PART).min(n);
            let ids: Vec<u64> = (lo as u64..hi as u64).collect();
            let xs = prior.sample_ids(&ids, seed);
            (0..ids.len())
                .map(|r| task.log_likelihood_with(y, xs.row_slice(r), mask))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let ll: Vec<f64> = parts.into_iter().flatten().collect();
    let mx = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(HvpError::numeric("mc_evidence", format!("max log-weight {mx}")));
    }
    let mut w: Vec<f64> = ll.iter().map(|v| (v - mx).exp()).collect();
    w.sort_by(f64::total_cmp);
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(HvpError::numeric("mc_evidence", format!("all weights underflow, max log-weight {mx}")));
    }
    let nf = n as f64;
    let est = mx + (total / nf).ln();
    // Leave-one-out estimates; weights are tiny relative to the total only
    // when the estimate is reliable, otherwise the spread shows it.
    let loo: Vec<f64> = w
        .iter()
        .map(|wi| mx + ((total - wi).max(f64::MIN_POSITIVE) / (nf - 1.0)).ln())
        .collect();
    let mean_loo = loo.iter().sum::<f64>() / nf;
    let var = (nf - 1.0) / nf * loo.iter().map(|v| (v - mean_loo).powi(2)).sum::<f64>();
    Ok((est, var.sqrt()))
}

/// Content hash used to key cached oracle values.
pub fn instance_hash(parts: &[&[f64]], label: &str) -> String {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        for v in *p {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// CSV fixture of Monte-Carlo oracle values keyed by `(instance hash, seed)`.
#[derive(Debug)]
pub struct OracleCache {
    path: PathBuf,
    entries: HashMap<(String, u64), (f64, f64)>,
}

impl OracleCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let mut rdr = csv::Reader::from_path(&path)?;
            for rec in rdr.records() {
                let rec = rec?;
                let field = |i: usize| rec.get(i).ok_or_else(|| HvpError::Format("short cache row".into()));
                let parse = |s: &str| s.parse::<f64>().map_err(|e| HvpError::Format(e.to_string()));
                let seed = field(1)?.parse::<u64>().map_err(|e| HvpError::Format(e.to_string()))?;
                entries.insert((field(0)?.to_string(), seed), (parse(field(2)?)?, parse(field(3)?)?));
            }
        }
        Ok(OracleCache { path, entries })
    }

    pub fn get(&self, hash: &str, seed: u64) -> Option<(f64, f64)> {
        self.entries.get(&(hash.to_string(), seed)).copied()
    }

    pub fn insert(&mut self, hash: &str, seed: u64, value: (f64, f64)) -> Result<()> {
        self.entries.insert((hash.to_string(), seed), value);
        self.save()
    }

    fn save(&self) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut keys: Vec<_> = self.entries.keys().cloned().collect();
        keys.sort();
        let mut w = csv::Writer::from_path(&self.path)?;
        w.write_record(["instance_hash", "seed", "estimate", "std_error"])?;
        for k in keys {
            let (e, s) = self.entries[&k];
            w.write_record([k.0.clone(), k.1.to_string(), format!("{e:.16e}"), format!("{s:.16e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Cached [`mc_evidence`].
    #[allow(clippy::too_many_arguments)]
    pub fn mc_evidence(
        &mut self,
        prior: &GmmPrior,
        task: &ForwardTask,
        y: &[f64],
        mask: Option<&[f64]>,
        n: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        let mut flat: Vec<f64> = prior.weights().to_vec();
        for m in prior.means() {
            flat.extend_from_slice(m);
        }
        flat.extend_from_slice(prior.variances());
        let label = format!("{:?}|{}", task.operator(), n);
        let hash = instance_hash(&[&flat, y, mask.unwrap_or(&[]), &[task.sigma_y()]], &label);
        if let Some(v) = self.get(&hash, seed) {
            return Ok(v);
        }
        let v = mc_evidence(prior, task, y, mask, n, seed)?;
        self.insert(&hash, seed, v)?;
        Ok(v)
    }
}

/// Evidence `log ∫ p(x_0) N(y; A x_0, σ²I)` of a mixture prior under a
/// linear task, summed over components in closed form.
pub fn gmm_log_evidence(prior: &GmmPrior, task: &ForwardTask, y: &[f64], mask: Option<&[f64]>) -> Result<f64> {
    let logs = (0..prior.components())
        .map(|k| {
            let single = GmmPrior::gaussian(prior.means()[k].clone(), prior.variances()[k])?;
            let inst = GaussianLinearInstance::from_task(&single, task, y, mask)?;
            Ok(prior.weights()[k].ln() + log_evidence(&inst)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(log_sum_exp(&logs))
}
