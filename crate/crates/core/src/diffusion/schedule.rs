use crate::error::{HvpError, Result};

/// Length of the fine linear-beta grid the coarse schedule is subsampled from.
pub const FINE_STEPS: usize = 1000;

pub const DEFAULT_STEPS: usize = 8;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;
pub const DEFAULT_ETA: f64 = 0.5;

/// Variance-preserving discrete schedule, `x_t = a_t x_0 + s_t eps`.
///
/// Index `t` runs over `0..=T`, with `a_0 = 1` and `s_0 = 0`. The reverse
/// transition taken at step `t` (from `x_t` to `x_{t-1}`) has standard
/// deviation [`NoiseSchedule::reverse_std`]`(t)`, i.e. `rσ_{t-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    eta: f64,
    a: Vec<f64>,
    s: Vec<f64>,
    rsigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn a(&self, t: usize) -> f64 {
        self.a[t]
    }

    pub fn s(&self, t: usize) -> f64 {
        self.s[t]
    }

    /// Standard deviation of the reverse step from `x_t` to `x_{t-1}`.
    pub fn reverse_std(&self, t: usize) -> f64 {
        self.rsigma[t - 1]
    }

    /// All reverse-step deviations, indexed by `t - 1`.
    pub fn reverse_stds(&self) -> &[f64] {
        &self.rsigma
    }

    /// Coefficient on the predicted noise direction in the step-`t` mean,
    /// `sqrt(s_{t-1}^2 - rσ_{t-1}^2)` (zero on the terminal step).
    pub fn direction_coef(&self, t: usize) -> f64 {
        let r = self.rsigma[t - 1];
        (self.s[t - 1].powi(2) - r * r).max(0.0).sqrt()
    }

    /// Per-step control deviation `κ σ_t`, with `σ_t` the noise level of `x_t`.
    pub fn policy_std(&self, t: usize, kappa: f64) -> f64 {
        kappa * self.s[t]
    }

    /// Schedule from explicit levels (`a`, `s` of length `T + 1`, reverse
    /// deviations of length `T`). Such schedules carry no beta parameters.
    pub fn from_levels(a: Vec<f64>, s: Vec<f64>, rsigma: Vec<f64>) -> Result<Self> {
        let steps = rsigma.len();
        if steps == 0 {
            return Err(HvpError::Parameter("need at least one step".into()));
        }
        let sched = NoiseSchedule {
            steps,
            beta_min: f64::NAN,
            beta_max: f64::NAN,
            eta: f64::NAN,
            a,
            s,
            rsigma,
        };
        sched.validate()?;
        Ok(sched)
    }

    /// True when the schedule was produced by [`build_schedule`].
    pub fn is_parametric(&self) -> bool {
        self.beta_min.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.steps;
        if self.a.len() != t + 1 || self.s.len() != t + 1 || self.rsigma.len() != t {
            return Err(HvpError::Schedule("array lengths".into()));
        }
        if self.a[0] != 1.0 || self.s[0] != 0.0 {
            return Err(HvpError::Schedule("boundary a_0 = 1, s_0 = 0".into()));
        }
        for i in 1..=t {
            if !(self.a[i] < self.a[i - 1] && self.s[i] > self.s[i - 1]) {
                return Err(HvpError::Schedule(format!("not monotone at t = {i}")));
            }
            if !(self.a[i] > 0.0 && self.a[i] <= 1.0) {
                return Err(HvpError::Schedule(format!("a_{i} outside (0, 1]")));
            }
            if (self.a[i].powi(2) + self.s[i].powi(2) - 1.0).abs() > 1e-12 {
                return Err(HvpError::Schedule(format!("not variance preserving at {i}")));
            }
        }
        for i in 1..t {
            if self.rsigma[i] > self.s[i] + 1e-15 {
                return Err(HvpError::Schedule(format!("reverse std above s_{i}")));
            }
        }
        if self.rsigma.windows(2).any(|w| w[0] > w[1]) {
            return Err(HvpError::Schedule("reverse std increases as t decreases".into()));
        }
        Ok(())
    }
}

/// Linear-beta variance-preserving schedule subsampled to `steps` steps.
///
/// Reverse deviations follow the deterministic-interpolation rule
/// `rσ_{t-1} = η s_{t-1} sqrt(1 - a_t² s_{t-1}² / (a_{t-1}² s_t²))`, which is
/// zero on the terminal step. The terminal step instead uses
/// `η sqrt(β_min)` (capped by `rσ_1`) so that the final transition keeps a
/// density and the transition KL stays finite.
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64, eta: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(HvpError::Parameter(format!("need T >= 2, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(HvpError::Parameter(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(HvpError::Parameter(format!("eta must lie in [0, 1], got {eta}")));
    }
    if steps > FINE_STEPS {
        return Err(HvpError::Parameter(format!("T must not exceed {FINE_STEPS}")));
    }
    let mut log_abar = vec![0.0; FINE_STEPS + 1];
    for i in 1..=FINE_STEPS {
        let beta = beta_min + (beta_max - beta_min) * (i - 1) as f64 / (FINE_STEPS - 1) as f64;
        log_abar[i] = log_abar[i - 1] + (1.0 - beta).ln();
    }
    let mut a = vec![1.0; steps + 1];
    let mut s = vec![0.0; steps + 1];
    for t in 1..=steps {
        // Evenly spaced positions on the fine grid, interpolated in log space.
        let pos = (t * FINE_STEPS) as f64 / steps as f64;
        let lo = (pos.floor() as usize).min(FINE_STEPS - 1);
        let frac = pos - lo as f64;
        let abar = ((1.0 - frac) * log_abar[lo] + frac * log_abar[lo + 1]).exp();
        a[t] = abar.sqrt();
        s[t] = (1.0 - abar).sqrt();
    }
    let mut rsigma = vec![0.0; steps];
    for t in 2..=steps {
        let ratio = (a[t] * s[t - 1]).powi(2) / (a[t - 1] * s[t]).powi(2);
        rsigma[t - 1] = eta * s[t - 1] * (1.0 - ratio).max(0.0).sqrt();
    }
    rsigma[0] = (eta * beta_min.sqrt()).min(rsigma[1]);
    let sched = NoiseSchedule {
        steps,
        beta_min,
        beta_max,
        eta,
        a,
        s,
        rsigma,
    };
    sched.validate()?;
    Ok(sched)
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX, DEFAULT_ETA)
            .expect("default schedule is valid")
    }
}
