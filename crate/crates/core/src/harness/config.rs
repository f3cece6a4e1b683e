//! Experiment configuration: flat `key = value` lines with dotted sections.
//!
//! Lines starting with `#` are comments. Lists are JSON arrays. Every key
//! has a default; keys not listed here are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::diffusion::{build_schedule, GmmPrior, NoiseSchedule};
use crate::error::{HvpError, Result};
use crate::objective::{KlMode, LossWeights, Weight};
use crate::policies::PolicyPair;
use crate::tasks::{ForwardTask, PoolLayout};
use crate::training::{EvalConfig, EvalMode, RefineConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum PriorSpec {
    /// Single isotropic Gaussian centred at zero.
    Gaussian { dim: usize, variance: f64 },
    /// Two components at `±separation` on every coordinate.
    Bimodal {
        dim: usize,
        separation: f64,
        variance: f64,
        weight: f64,
    },
    Custom {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    },
}

impl PriorSpec {
    pub fn build(&self) -> Result<GmmPrior> {
        match self {
            PriorSpec::Gaussian { dim, variance } => GmmPrior::gaussian(vec![0.0; *dim], *variance),
            PriorSpec::Bimodal {
                dim,
                separation,
                variance,
                weight,
            } => GmmPrior::new(
                vec![*weight, 1.0 - weight],
                vec![vec![*separation; *dim], vec![-separation; *dim]],
                vec![*variance, *variance],
            ),
            PriorSpec::Custom {
                weights,
                means,
                variances,
            } => GmmPrior::new(weights.clone(), means.clone(), variances.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorSpec::Gaussian { dim, .. } | PriorSpec::Bimodal { dim, .. } => *dim,
            PriorSpec::Custom { means, .. } => means.first().map_or(0, Vec::len),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    Identity,
    Pooling { factor: usize, layout: PoolLayout },
    Mask { mask: Vec<f64> },
    RandomMask { drop_prob: f64 },
    Hdr { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub prior: PriorSpec,
    pub task: TaskSpec,
    pub sigma_y: f64,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta: f64,
    pub policy_hidden: Vec<usize>,
    pub kappa: f64,
    pub gamma: f64,
    pub policy_stochastic: bool,
    pub noise_hidden: Vec<usize>,
    pub noise_stochastic: bool,
    pub loss: LossWeights,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dataset_size: usize,
    pub heldout_size: usize,
    pub refine: RefineConfig,
    pub eval_rollouts: usize,
    pub eval_methods: Vec<EvalMode>,
    pub eval_elbo: bool,
    /// Exact transition KLs in reported bounds; otherwise the surrogate.
    pub exact_kl: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t1 = TrainConfig::new(1);
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("out"),
            prior: PriorSpec::Bimodal {
                dim: 2,
                separation: 1.0,
                variance: 0.1,
                weight: 0.5,
            },
            task: TaskSpec::Identity,
            sigma_y: crate::tasks::DEFAULT_SIGMA_Y,
            steps: crate::diffusion::schedule::DEFAULT_STEPS,
            beta_min: crate::diffusion::schedule::DEFAULT_BETA_MIN,
            beta_max: crate::diffusion::schedule::DEFAULT_BETA_MAX,
            eta: crate::diffusion::schedule::DEFAULT_ETA,
            policy_hidden: crate::policies::DEFAULT_HIDDEN.to_vec(),
            kappa: crate::policies::DEFAULT_KAPPA,
            gamma: crate::policies::DEFAULT_GAMMA,
            policy_stochastic: true,
            noise_hidden: crate::policies::DEFAULT_HIDDEN.to_vec(),
            noise_stochastic: true,
            loss: LossWeights::default(),
            epochs_stage1: t1.epochs,
            epochs_stage2: t1.epochs,
            batch_size: t1.batch_size,
            lr: t1.lr,
            dataset_size: t1.dataset_size,
            heldout_size: t1.heldout_size,
            refine: RefineConfig::default(),
            eval_rollouts: EvalConfig::default().rollouts_per_obs,
            eval_methods: EvalMode::ALL.to_vec(),
            eval_elbo: false,
            exact_kl: true,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "out",
    "prior.kind",
    "prior.dim",
    "prior.separation",
    "prior.variance",
    "prior.weight",
    "prior.weights",
    "prior.means",
    "prior.variances",
    "task.kind",
    "task.sigma_y",
    "task.factor",
    "task.layout",
    "task.mask",
    "task.drop_prob",
    "task.alpha",
    "task.beta",
    "schedule.steps",
    "schedule.beta_min",
    "schedule.beta_max",
    "schedule.eta",
    "policy.hidden",
    "policy.kappa",
    "policy.gamma",
    "policy.stochastic",
    "noise_policy.hidden",
    "noise_policy.stochastic",
    "loss.w_T",
    "loss.w_control",
    "loss.w_score",
    "loss.lambda2",
    "loss.lambda3",
    "loss.exact_kl",
    "train.epochs_stage1",
    "train.epochs_stage2",
    "train.batch_size",
    "train.lr",
    "train.dataset_size",
    "train.heldout_size",
    "refine.n_grad_steps",
    "refine.lr",
    "refine.lambda2",
    "refine.lambda3",
    "refine.backtracking",
    "refine.max_halvings",
    "eval.rollouts",
    "eval.methods",
    "eval.elbo",
];

struct Raw {
    map: BTreeMap<String, String>,
}

impl Raw {
    fn json(&self, key: &str) -> Result<Option<Value>> {
        let Some(s) = self.map.get(key) else { return Ok(None) };
        let v = serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.clone()));
        Ok(Some(v))
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| HvpError::Config(format!("`{key}` expects a number, got `{s}`"))),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| HvpError::Config(format!("`{key}` expects a nonnegative integer, got `{s}`"))),
        }
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(s) => Err(HvpError::Config(format!("`{key}` expects true or false, got `{s}`"))),
        }
    }

    fn string(&self, key: &str, default: &str) -> Result<String> {
        Ok(match self.json(key)? {
            None => default.to_string(),
            Some(Value::String(s)) => s,
            Some(v) => v.to_string(),
        })
    }

    fn list<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(s) => serde_json::from_str(s)
                .map(Some)
                .map_err(|e| HvpError::Config(format!("`{key}` expects a JSON list: {e}"))),
        }
    }

    fn weight(&self, key: &str, default: Weight) -> Result<Weight> {
        match self.map.get(key).map(String::as_str) {
            None => Ok(default),
            Some("auto") => Ok(Weight::Auto),
            Some(_) => Ok(Weight::Fixed(self.f64(key, 0.0)?)),
        }
    }
}

fn parse_lines(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HvpError::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(HvpError::Config(format!("line {}: unknown key `{k}`", n + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(HvpError::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(map)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_weight(w: Weight) -> String {
    match w {
        Weight::Auto => "auto".into(),
        Weight::Fixed(v) => fmt_f64(v),
    }
}

fn json_list<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain lists serialize")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw = Raw { map: parse_lines(text)? };
        let d = ExperimentConfig::default();
        let dim = raw.usize("prior.dim", d.prior.dim())?;
        let prior = match raw.string("prior.kind", "bimodal")?.as_str() {
            "gaussian" => PriorSpec::Gaussian {
                dim,
                variance: raw.f64("prior.variance", 1.0)?,
            },
            "bimodal" => PriorSpec::Bimodal {
                dim,
                separation: raw.f64("prior.separation", 1.0)?,
                variance: raw.f64("prior.variance", 0.1)?,
                weight: raw.f64("prior.weight", 0.5)?,
            },
            "custom" => {
                let need = |k: &str| HvpError::Config(format!("custom prior needs `{k}`"));
                PriorSpec::Custom {
                    weights: raw.list("prior.weights")?.ok_or_else(|| need("prior.weights"))?,
                    means: raw.list("prior.means")?.ok_or_else(|| need("prior.means"))?,
                    variances: raw.list("prior.variances")?.ok_or_else(|| need("prior.variances"))?,
                }
            }
            k => return Err(HvpError::Config(format!("unknown prior.kind `{k}`"))),
        };
        let task = match raw.string("task.kind", "identity")?.as_str() {
            "identity" => TaskSpec::Identity,
            "pooling" => TaskSpec::Pooling {
                factor: raw.usize("task.factor", 2)?,
                layout: match raw.string("task.layout", "line")?.as_str() {
                    "line" => PoolLayout::Line,
                    "square" => PoolLayout::Square,
                    l => return Err(HvpError::Config(format!("unknown task.layout `{l}`"))),
                },
            },
            "mask" => TaskSpec::Mask {
                mask: raw.list("task.mask")?.ok_or_else(|| HvpError::Config("mask task needs `task.mask`".into()))?,
            },
            "random_mask" => TaskSpec::RandomMask {
                drop_prob: raw.f64("task.drop_prob", crate::tasks::DEFAULT_DROP_PROB)?,
            },
            "hdr" => TaskSpec::Hdr {
                alpha: raw.f64("task.alpha", crate::tasks::DEFAULT_HDR_ALPHA)?,
                beta: raw.f64("task.beta", crate::tasks::DEFAULT_HDR_BETA)?,
            },
            k => return Err(HvpError::Config(format!("unknown task.kind `{k}`"))),
        };
        let methods: Option<Vec<String>> = raw.list("eval.methods")?;
        let eval_methods = match methods {
            None => d.eval_methods.clone(),
            Some(ms) => ms.iter().map(|m| EvalMode::parse(m)).collect::<Result<_>>()?,
        };
        let cfg = ExperimentConfig {
            seed: raw.usize("seed", 0)? as u64,
            out: PathBuf::from(raw.string("out", "out")?),
            prior,
            task,
            sigma_y: raw.f64("task.sigma_y", d.sigma_y)?,
            steps: raw.usize("schedule.steps", d.steps)?,
            beta_min: raw.f64("schedule.beta_min", d.beta_min)?,
            beta_max: raw.f64("schedule.beta_max", d.beta_max)?,
            eta: raw.f64("schedule.eta", d.eta)?,
            policy_hidden: raw.list("policy.hidden")?.unwrap_or(d.policy_hidden),
            kappa: raw.f64("policy.kappa", d.kappa)?,
            gamma: raw.f64("policy.gamma", d.gamma)?,
            policy_stochastic: raw.bool("policy.stochastic", d.policy_stochastic)?,
            noise_hidden: raw.list("noise_policy.hidden")?.unwrap_or(d.noise_hidden),
            noise_stochastic: raw.bool("noise_policy.stochastic", d.noise_stochastic)?,
            loss: LossWeights {
                w_t: raw.f64("loss.w_T", d.loss.w_t)?,
                w_control: raw.weight("loss.w_control", d.loss.w_control)?,
                w_score: raw.weight("loss.w_score", d.loss.w_score)?,
                lambda2: raw.f64("loss.lambda2", d.loss.lambda2)?,
                lambda3: raw.f64("loss.lambda3", d.loss.lambda3)?,
            },
            epochs_stage1: raw.usize("train.epochs_stage1", d.epochs_stage1)?,
            epochs_stage2: raw.usize("train.epochs_stage2", d.epochs_stage2)?,
            batch_size: raw.usize("train.batch_size", d.batch_size)?,
            lr: raw.f64("train.lr", d.lr)?,
            dataset_size: raw.usize("train.dataset_size", d.dataset_size)?,
            heldout_size: raw.usize("train.heldout_size", d.heldout_size)?,
            refine: RefineConfig {
                n_grad_steps: raw.usize("refine.n_grad_steps", d.refine.n_grad_steps)?,
                lr: raw.f64("refine.lr", d.refine.lr)?,
                lambda2: raw.f64("refine.lambda2", d.refine.lambda2)?,
                lambda3: raw.f64("refine.lambda3", d.refine.lambda3)?,
                backtracking: raw.bool("refine.backtracking", d.refine.backtracking)?,
                max_halvings: raw.usize("refine.max_halvings", d.refine.max_halvings)?,
            },
            eval_rollouts: raw.usize("eval.rollouts", d.eval_rollouts)?,
            eval_methods,
            eval_elbo: raw.bool("eval.elbo", d.eval_elbo)?,
            exact_kl: raw.bool("loss.exact_kl", d.exact_kl)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HvpError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every effective key, one per line, in a stable order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("out", json_list(&self.out.to_string_lossy()));
        match &self.prior {
            PriorSpec::Gaussian { dim, variance } => {
                kv("prior.kind", "gaussian".into());
                kv("prior.dim", dim.to_string());
                kv("prior.variance", fmt_f64(*variance));
            }
            PriorSpec::Bimodal {
                dim,
                separation,
                variance,
                weight,
            } => {
                kv("prior.kind", "bimodal".into());
                kv("prior.dim", dim.to_string());
                kv("prior.separation", fmt_f64(*separation));
                kv("prior.variance", fmt_f64(*variance));
                kv("prior.weight", fmt_f64(*weight));
            }
            PriorSpec::Custom {
                weights,
                means,
                variances,
            } => {
                kv("prior.kind", "custom".into());
                kv("prior.weights", json_list(weights));
                kv("prior.means", json_list(means));
                kv("prior.variances", json_list(variances));
            }
        }
        match &self.task {
            TaskSpec::Identity => kv("task.kind", "identity".into()),
            TaskSpec::Pooling { factor, layout } => {
                kv("task.kind", "pooling".into());
                kv("task.factor", factor.to_string());
                let l = match layout {
                    PoolLayout::Line => "line",
                    PoolLayout::Square => "square",
                };
                kv("task.layout", l.into());
            }
            TaskSpec::Mask { mask } => {
                kv("task.kind", "mask".into());
                kv("task.mask", json_list(mask));
            }
            TaskSpec::RandomMask { drop_prob } => {
                kv("task.kind", "random_mask".into());
                kv("task.drop_prob", fmt_f64(*drop_prob));
            }
            TaskSpec::Hdr { alpha, beta } => {
                kv("task.kind", "hdr".into());
                kv("task.alpha", fmt_f64(*alpha));
                kv("task.beta", fmt_f64(*beta));
            }
        }
        kv("task.sigma_y", fmt_f64(self.sigma_y));
        kv("schedule.steps", self.steps.to_string());
        kv("schedule.beta_min", fmt_f64(self.beta_min));
        kv("schedule.beta_max", fmt_f64(self.beta_max));
        kv("schedule.eta", fmt_f64(self.eta));
        kv("policy.hidden", json_list(&self.policy_hidden));
        kv("policy.kappa", fmt_f64(self.kappa));
        kv("policy.gamma", fmt_f64(self.gamma));
        kv("policy.stochastic", self.policy_stochastic.to_string());
        kv("noise_policy.hidden", json_list(&self.noise_hidden));
        kv("noise_policy.stochastic", self.noise_stochastic.to_string());
        kv("loss.w_T", fmt_f64(self.loss.w_t));
        kv("loss.w_control", fmt_weight(self.loss.w_control));
        kv("loss.w_score", fmt_weight(self.loss.w_score));
        kv("loss.lambda2", fmt_f64(self.loss.lambda2));
        kv("loss.lambda3", fmt_f64(self.loss.lambda3));
        kv("loss.exact_kl", self.exact_kl.to_string());
        kv("train.epochs_stage1", self.epochs_stage1.to_string());
        kv("train.epochs_stage2", self.epochs_stage2.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.lr", fmt_f64(self.lr));
        kv("train.dataset_size", self.dataset_size.to_string());
        kv("train.heldout_size", self.heldout_size.to_string());
        kv("refine.n_grad_steps", self.refine.n_grad_steps.to_string());
        kv("refine.lr", fmt_f64(self.refine.lr));
        kv("refine.lambda2", fmt_f64(self.refine.lambda2));
        kv("refine.lambda3", fmt_f64(self.refine.lambda3));
        kv("refine.backtracking", self.refine.backtracking.to_string());
        kv("refine.max_halvings", self.refine.max_halvings.to_string());
        kv("eval.rollouts", self.eval_rollouts.to_string());
        let names: Vec<&str> = self.eval_methods.iter().map(|m| m.name()).collect();
        kv("eval.methods", json_list(&names));
        kv("eval.elbo", self.eval_elbo.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HvpError::Config(m));
        self.prior.build().map_err(|e| HvpError::Config(format!("prior: {e}")))?;
        self.task().map_err(|e| HvpError::Config(format!("task: {e}")))?;
        self.schedule().map_err(|e| HvpError::Config(format!("schedule: {e}")))?;
        self.loss.validate().map_err(|e| HvpError::Config(format!("loss: {e}")))?;
        if self.batch_size == 0 || self.dataset_size == 0 || self.eval_rollouts == 0 {
            return bad("batch_size, dataset_size and eval.rollouts must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.refine.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.kappa >= 0.0) || !self.gamma.is_finite() {
            return bad("policy.kappa must be nonnegative and policy.gamma finite".into());
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn build_prior(&self) -> Result<GmmPrior> {
        self.prior.build()
    }

    pub fn task(&self) -> Result<ForwardTask> {
        let d = self.dim();
        match &self.task {
            TaskSpec::Identity => ForwardTask::identity(d, self.sigma_y),
            TaskSpec::Pooling { factor, layout } => ForwardTask::pooling(d, *factor, *layout, self.sigma_y),
            TaskSpec::Mask { mask } => {
                if mask.len() != d {
                    return Err(HvpError::Dimension(format!("mask has {} entries for d = {d}", mask.len())));
                }
                ForwardTask::mask(mask.clone(), self.sigma_y)
            }
            TaskSpec::RandomMask { drop_prob } => ForwardTask::random_mask(d, *drop_prob, self.sigma_y),
            TaskSpec::Hdr { alpha, beta } => ForwardTask::hdr(d, *alpha, *beta, self.sigma_y),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_min, self.beta_max, self.eta)
    }

    /// Zero-initialized policies matching this configuration.
    pub fn policies(&self) -> Result<PolicyPair> {
        let task = self.task()?;
        let mut p = PolicyPair::zero(
            self.dim(),
            task.cond_dim(),
            &self.noise_hidden,
            &self.policy_hidden,
            self.gamma,
            self.kappa,
            self.seed,
        )?;
        p.noise.stochastic = self.noise_stochastic;
        p.step.stochastic = self.policy_stochastic;
        Ok(p)
    }

    pub fn train_config(&self, stage: u8) -> TrainConfig {
        TrainConfig {
            stage,
            epochs: if stage == 1 { self.epochs_stage1 } else { self.epochs_stage2 },
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            dataset_size: self.dataset_size,
            heldout_size: self.heldout_size,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            rollouts_per_obs: self.eval_rollouts,
            seed: self.seed,
            refine: self.refine,
            with_elbo: self.eval_elbo,
            kl_mode: if self.exact_kl { KlMode::Exact } else { KlMode::Surrogate },
        }
    }

    /// SHA-256 of the serialized effective configuration.
    pub fn hash(&self) -> String {
        super::io::sha256_hex(self.serialize().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&c.serialize()).unwrap();
        assert_eq!(back, c);
        assert_eq!(ExperimentConfig::parse("").unwrap(), c);
    }

    #[test]
    fn custom_values_round_trip() {
        let text = "\
# a pooling run
seed = 7
out = \"runs/a b\"
prior.kind = custom
prior.weights = [0.3, 0.7]
prior.means = [[0.1, 0.2, 0.3, 0.4], [-1, -1, -1, -1]]
prior.variances = [0.05, 0.2]
task.kind = pooling
task.factor = 2
task.sigma_y = 0.01
loss.w_score = 3.5
loss.w_control = auto
eval.methods = [\"ahvp\", \"shvp\"]
refine.backtracking = false
train.lr = 0.1
";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.out, PathBuf::from("runs/a b"));
        assert_eq!(c.dim(), 4);
        assert_eq!(c.loss.w_score, Weight::Fixed(3.5));
        assert_eq!(c.eval_methods, vec![EvalMode::Ahvp, EvalMode::Shvp]);
        assert!(!c.refine.backtracking);
        let again = ExperimentConfig::parse(&c.serialize()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "nonsense.key = 1",
            "seed = -3",
            "seed 3",
            "seed = 1\nseed = 2",
            "task.kind = blur",
            "train.lr = 0",
            "policy.stochastic = yes",
            "task.kind = mask\ntask.mask = [1, 0, 1]",
            "eval.methods = [\"best\"]",
        ] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }
}
