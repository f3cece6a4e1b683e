//! Measurement operators and the Gaussian likelihood
//! `log p(y | x_0) = log N(y; A(x_0), σ_y² I)`.
//!
//! Linear operators are stored as explicit matrices (block-average pooling
//! included). Random inpainting draws a fresh mask per observation, so an
//! [`Observation`] carries its own mask and batched evaluation takes a
//! per-row mask tensor.

use rand::Rng;

use crate::diffusion::GmmPrior;
use crate::error::{HvpError, Result};
use crate::math::{Tape, Tensor, Var};
use crate::rng::{normals, rng_for, NoiseRole};

pub const DEFAULT_SIGMA_Y: f64 = 0.01;
pub const DEFAULT_DROP_PROB: f64 = 0.9;
pub const DEFAULT_HDR_ALPHA: f64 = 2.0;
pub const DEFAULT_HDR_BETA: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolLayout {
    /// Consecutive blocks of `f` coordinates.
    Line,
    /// `f x f` blocks of a square image stored row-major.
    Square,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    /// Any linear map, `m x d`.
    Dense { matrix: Tensor },
    /// Block means; `matrix` holds the equivalent dense operator.
    Pool {
        factor: usize,
        layout: PoolLayout,
        matrix: Tensor,
    },
    /// Fixed diagonal 0/1 mask.
    Mask { mask: Vec<f64> },
    /// Mask drawn per observation with the given drop probability.
    RandomMask { drop_prob: f64 },
    /// `clip(α x + β, 0, 1)`.
    Hdr { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTask {
    op: Operator,
    sigma_y: f64,
    dim: usize,
}

/// Measurement `y = A(x*) + σ_y z` together with the ground truth, which is
/// kept for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub id: u64,
    pub seed: u64,
    pub y: Vec<f64>,
    /// Per-observation mask for random inpainting.
    pub mask: Option<Vec<f64>>,
    pub truth: Vec<f64>,
}

/// Rows of several observations, ready for batched evaluation.
#[derive(Debug, Clone)]
pub struct ObservationBatch {
    pub y: Tensor,
    pub mask: Option<Tensor>,
    /// Policy conditioning: `y`, or `[y, mask]` for random masks.
    pub cond: Tensor,
}

impl ForwardTask {
    fn build(op: Operator, sigma_y: f64, dim: usize) -> Result<Self> {
        if !(sigma_y > 0.0 && sigma_y.is_finite()) {
            return Err(HvpError::Parameter(format!("sigma_y must be positive, got {sigma_y}")));
        }
        if dim == 0 {
            return Err(HvpError::Parameter("signal dimension must be positive".into()));
        }
        Ok(ForwardTask { op, sigma_y, dim })
    }

    pub fn dense(matrix: Tensor, sigma_y: f64) -> Result<Self> {
        let d = matrix.cols();
        if !matrix.is_finite() || matrix.rows() == 0 {
            return Err(HvpError::Parameter("dense operator must be finite and non-empty".into()));
        }
        Self::build(Operator::Dense { matrix }, sigma_y, d)
    }

    pub fn identity(d: usize, sigma_y: f64) -> Result<Self> {
        let mut m = Tensor::zeros(d, d);
        for i in 0..d {
            m.data_mut()[i * d + i] = 1.0;
        }
        Self::dense(m, sigma_y)
    }

    pub fn pooling(d: usize, factor: usize, layout: PoolLayout, sigma_y: f64) -> Result<Self> {
        if factor == 0 {
            return Err(HvpError::Parameter("pool factor must be positive".into()));
        }
        let matrix = match layout {
            PoolLayout::Line => {
                if d % factor != 0 {
                    return Err(HvpError::Parameter(format!("d = {d} not divisible by f = {factor}")));
                }
                let m = d / factor;
                let mut a = Tensor::zeros(m, d);
                for r in 0..m {
                    for c in r * factor..(r + 1) * factor {
                        a.data_mut()[r * d + c] = 1.0 / factor as f64;
                    }
                }
                a
            }
            PoolLayout::Square => {
                let side = (d as f64).sqrt().round() as usize;
                if side * side != d || side % factor != 0 {
                    return Err(HvpError::Parameter(format!(
                        "d = {d} is not a square image divisible by f = {factor}"
                    )));
                }
                let out_side = side / factor;
                let m = out_side * out_side;
                let w = 1.0 / (factor * factor) as f64;
                let mut a = Tensor::zeros(m, d);
                for bi in 0..out_side {
                    for bj in 0..out_side {
                        let r = bi * out_side + bj;
                        for i in bi * factor..(bi + 1) * factor {
                            for j in bj * factor..(bj + 1) * factor {
                                a.data_mut()[r * d + i * side + j] = w;
                            }
                        }
                    }
                }
                a
            }
        };
        Self::build(Operator::Pool { factor, layout, matrix }, sigma_y, d)
    }

    pub fn mask(mask: Vec<f64>, sigma_y: f64) -> Result<Self> {
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(HvpError::Parameter("mask entries must be 0 or 1".into()));
        }
        let d = mask.len();
        Self::build(Operator::Mask { mask }, sigma_y, d)
    }

    pub fn random_mask(d: usize, drop_prob: f64, sigma_y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&drop_prob) {
            return Err(HvpError::Parameter(format!("drop probability {drop_prob} outside [0, 1]")));
        }
        Self::build(Operator::RandomMask { drop_prob }, sigma_y, d)
    }

    pub fn hdr(d: usize, alpha: f64, beta: f64, sigma_y: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite()) {
            return Err(HvpError::Parameter("HDR coefficients must be finite".into()));
        }
        Self::build(Operator::Hdr { alpha, beta }, sigma_y, d)
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn measurement_dim(&self) -> usize {
        match &self.op {
            Operator::Dense { matrix } | Operator::Pool { matrix, .. } => matrix.rows(),
            _ => self.dim,
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self.op, Operator::Hdr { .. })
    }

    pub fn has_random_mask(&self) -> bool {
        matches!(self.op, Operator::RandomMask { .. })
    }

    /// Width of the conditioning vector handed to the policies.
    pub fn cond_dim(&self) -> usize {
        if self.has_random_mask() {
            2 * self.dim
        } else {
            self.measurement_dim()
        }
    }

    /// Dense matrix of a linear operator (`None` for HDR and random masks
    /// without a drawn mask).
    pub fn linear_matrix(&self, mask: Option<&[f64]>) -> Option<Tensor> {
        match (&self.op, mask) {
            (Operator::Dense { matrix }, _) | (Operator::Pool { matrix, .. }, _) => Some(matrix.clone()),
            (Operator::Mask { mask: fixed }, _) => Self::diag(fixed),
            (Operator::RandomMask { .. }, Some(mask)) => Self::diag(mask),
            _ => None,
        }
    }

    fn diag(mask: &[f64]) -> Option<Tensor> {
        let d = mask.len();
        let mut a = Tensor::zeros(d, d);
        for i in 0..d {
            a.data_mut()[i * d + i] = mask[i];
        }
        Some(a)
    }

    fn check_mask(&self, mask: Option<&[f64]>) -> Result<()> {
        if self.has_random_mask() && mask.map_or(true, |m| m.len() != self.dim) {
            return Err(HvpError::Parameter(
                "random inpainting needs the observation's mask".into(),
            ));
        }
        Ok(())
    }

    /// `A(x_0)` for one signal. Random-mask tasks need the observation's mask.
    pub fn apply_with(&self, x0: &[f64], mask: Option<&[f64]>) -> Result<Vec<f64>> {
        if x0.len() != self.dim {
            return Err(HvpError::Parameter(format!(
                "signal has dimension {}, task expects {}",
                x0.len(),
                self.dim
            )));
        }
        self.check_mask(mask)?;
        Ok(match &self.op {
            Operator::Dense { matrix } | Operator::Pool { matrix, .. } => (0..matrix.rows())
                .map(|r| matrix.row_slice(r).iter().zip(x0).map(|(a, x)| a * x).sum())
                .collect(),
            Operator::Mask { mask } => x0.iter().zip(mask).map(|(x, m)| x * m).collect(),
            Operator::RandomMask { .. } => x0.iter().zip(mask.unwrap()).map(|(x, m)| x * m).collect(),
            Operator::Hdr { alpha, beta } => x0.iter().map(|x| (alpha * x + beta).clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn apply(&self, x0: &[f64]) -> Result<Vec<f64>> {
        self.apply_with(x0, None)
    }

    /// Records `A(x)` for a batch `[B, d]`; `mask` is `[B, d]` for random masks.
    pub fn apply_on_tape(&self, tape: &mut Tape, x: Var, mask: Option<Var>) -> Result<Var> {
        if tape.value(x).cols() != self.dim {
            return Err(HvpError::Dimension(format!(
                "signal width {} vs task dimension {}",
                tape.value(x).cols(),
                self.dim
            )));
        }
        match &self.op {
            Operator::Dense { matrix } | Operator::Pool { matrix, .. } => {
                let at = tape.constant(matrix.transpose());
                tape.matmul(x, at)
            }
            Operator::Mask { mask } => {
                let m = tape.constant(Tensor::row(mask));
                tape.mul(x, m)
            }
            Operator::RandomMask { .. } => {
                let m = mask.ok_or_else(|| {
                    HvpError::Parameter("random inpainting needs per-row masks".into())
                })?;
                tape.mul(x, m)
            }
            Operator::Hdr { alpha, beta } => {
                let z = tape.scale(x, *alpha);
                let z = tape.add_scalar(z, *beta);
                Ok(tape.clip(z, 0.0, 1.0))
            }
        }
    }

    fn log_norm_const(&self) -> f64 {
        -0.5 * self.measurement_dim() as f64 * (2.0 * std::f64::consts::PI * self.sigma_y.powi(2)).ln()
    }

    /// Records the per-row log-likelihood, `[B, 1]`.
    pub fn log_likelihood_on_tape(&self, tape: &mut Tape, y: Var, x: Var, mask: Option<Var>) -> Result<Var> {
        let ax = self.apply_on_tape(tape, x, mask)?;
        let r = tape.sub(y, ax)?;
        let sq = tape.row_norm_sq(r);
        let scaled = tape.scale(sq, -0.5 / self.sigma_y.powi(2));
        Ok(tape.add_scalar(scaled, self.log_norm_const()))
    }

    /// `log N(y; A(x_0), σ_y² I)` for one signal.
    pub fn log_likelihood_with(&self, y: &[f64], x0: &[f64], mask: Option<&[f64]>) -> Result<f64> {
        if y.len() != self.measurement_dim() {
            return Err(HvpError::Dimension(format!(
                "measurement has dimension {}, task produces {}",
                y.len(),
                self.measurement_dim()
            )));
        }
        let ax = self.apply_with(x0, mask)?;
        let sq: f64 = y.iter().zip(&ax).map(|(a, b)| (a - b).powi(2)).sum();
        Ok(self.log_norm_const() - sq / (2.0 * self.sigma_y.powi(2)))
    }

    pub fn log_likelihood(&self, y: &[f64], x0: &[f64]) -> Result<f64> {
        self.log_likelihood_with(y, x0, None)
    }

    /// Gradient of the log-likelihood with respect to `x_0`.
    pub fn log_likelihood_grad(&self, y: &[f64], x0: &[f64], mask: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_mask(mask)?;
        let mut tape = Tape::new();
        let x = tape.param("x0", &Tensor::row(x0));
        let yv = tape.constant(Tensor::row(y));
        let mv = mask.map(|m| tape.constant(Tensor::row(m)));
        let ll = self.log_likelihood_on_tape(&mut tape, yv, x, mv)?;
        let total = tape.sum_all(ll);
        Ok(tape.backward(total)?.wrt(x).into_data())
    }

    fn draw_mask(&self, seed: u64, id: u64) -> Option<Vec<f64>> {
        match &self.op {
            Operator::RandomMask { drop_prob } => {
                let mut rng = rng_for(seed, NoiseRole::Mask, id, 0);
                Some(
                    (0..self.dim)
                        .map(|_| if rng.random::<f64>() < *drop_prob { 0.0 } else { 1.0 })
                        .collect(),
                )
            }
            _ => None,
        }
    }

    fn observe(&self, truth: &[f64], seed: u64, id: u64, noiseless: bool) -> Result<Observation> {
        let mask = self.draw_mask(seed, id);
        let mut y = self.apply_with(truth, mask.as_deref())?;
        if !noiseless {
            let z = normals(seed, NoiseRole::Observation, id, 0, y.len());
            for (v, e) in y.iter_mut().zip(z) {
                *v += self.sigma_y * e;
            }
        }
        Ok(Observation {
            id,
            seed,
            y,
            mask,
            truth: truth.to_vec(),
        })
    }
}

/// Draws `y = A(x*) + σ_y z`, reproducible from `(seed, id)`.
pub fn make_observation(task: &ForwardTask, truth: &[f64], seed: u64, id: u64) -> Result<Observation> {
    task.observe(truth, seed, id, false)
}

/// The `σ_y -> 0` limit: `y = A(x*)` exactly (masks are still drawn).
pub fn make_observation_noiseless(task: &ForwardTask, truth: &[f64], seed: u64, id: u64) -> Result<Observation> {
    task.observe(truth, seed, id, true)
}

/// Observations with ids `first..first + n`, ground truth sampled from `prior`.
pub fn make_dataset(task: &ForwardTask, prior: &GmmPrior, n: usize, seed: u64, first: u64) -> Result<Vec<Observation>> {
    let ids: Vec<u64> = (first..first + n as u64).collect();
    let truth = prior.sample_ids(&ids, seed);
    ids.iter()
        .enumerate()
        .map(|(r, &id)| make_observation(task, truth.row_slice(r), seed, id))
        .collect()
}

impl ObservationBatch {
    pub fn from_observations(task: &ForwardTask, obs: &[&Observation]) -> Result<Self> {
        let m = task.measurement_dim();
        let d = task.dim();
        let mut y = Vec::with_capacity(obs.len() * m);
        for o in obs {
            if o.y.len() != m {
                return Err(HvpError::Dimension("observation width".into()));
            }
            y.extend_from_slice(&o.y);
        }
        let y = Tensor::from_rows(obs.len(), m, y);
        if task.has_random_mask() {
            let mut mk = Vec::with_capacity(obs.len() * d);
            for o in obs {
                let mask = o
                    .mask
                    .as_ref()
                    .ok_or_else(|| HvpError::Contract("observation without mask".into()))?;
                mk.extend_from_slice(mask);
            }
            let mask = Tensor::from_rows(obs.len(), d, mk);
            let mut cond = Vec::with_capacity(obs.len() * 2 * d);
            for r in 0..obs.len() {
                cond.extend_from_slice(y.row_slice(r));
                cond.extend_from_slice(mask.row_slice(r));
            }
            Ok(ObservationBatch {
                cond: Tensor::from_rows(obs.len(), 2 * d, cond),
                y,
                mask: Some(mask),
            })
        } else {
            Ok(ObservationBatch {
                cond: y.clone(),
                y,
                mask: None,
            })
        }
    }

    /// Repeats each observation `k` times (row `i` maps to observation `i / k`).
    pub fn repeat_each(task: &ForwardTask, obs: &[&Observation], k: usize) -> Result<Self> {
        let rep: Vec<&Observation> = obs.iter().flat_map(|o| std::iter::repeat(*o).take(k)).collect();
        Self::from_observations(task, &rep)
    }

    pub fn rows(&self) -> usize {
        self.y.rows()
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        ObservationBatch {
            y: self.y.slice_rows(start, end),
            mask: self.mask.as_ref().map(|m| m.slice_rows(start, end)),
            cond: self.cond.slice_rows(start, end),
        }
    }
}
