#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hvp::diffusion::{build_schedule, GmmOracleDenoiser, GmmPrior, NoiseSchedule};
use hvp::math::{Mlp, Tensor};
use hvp::objective::LossWeights;
use hvp::policies::PolicyPair;
use hvp::tasks::{make_dataset, ForwardTask, Observation};
use hvp::training::{train_stage1, train_stage2, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng)
}

fn frobenius(t: &Tensor) -> f64 {
    t.norm_sq().sqrt()
}

/// Random network whose output layer is rescaled so that its Lipschitz
/// constant is at most `lip`.
pub fn contractive(name: &str, widths: &[usize], seed: u64, lip: f64) -> Mlp {
    let mut net = Mlp::new(name, widths, seed).unwrap();
    // 1.1 bounds the slope of SiLU.
    let hidden = (widths.len() - 2) as f64;
    let bound: f64 = net.layers().iter().map(|l| frobenius(&l.w)).product::<f64>() * 1.1f64.powf(hidden);
    let last = net.layers_mut().last_mut().unwrap();
    last.w = last.w.map(|v| v * lip / bound);
    net
}

/// Both networks random; the initial-noise map stays invertible.
pub fn random_policies(d: usize, c: usize, hidden: &[usize], seed: u64) -> PolicyPair {
    let mut r = rng(seed);
    let kappa = r.random_range(0.05..0.5);
    let gamma = r.random_range(0.5..1.5);
    let mut p = PolicyPair::zero(d, c, hidden, hidden, gamma, kappa, seed).unwrap();
    p.noise.net = contractive("noise", p.noise.net.widths(), seed ^ 0x5eed, 0.5);
    let mut step = Mlp::new("step", p.step.net.widths(), seed ^ 0xbeef).unwrap();
    let last = step.layers_mut().last_mut().unwrap();
    last.w = last.w.map(|v| 0.5 * v);
    p.step.net = step;
    p
}

/// A problem with its denoiser, data split and trained policies.
pub struct Problem {
    pub prior: GmmPrior,
    pub task: ForwardTask,
    pub sched: NoiseSchedule,
    pub den: GmmOracleDenoiser,
    pub train: Vec<Observation>,
    pub heldout: Vec<Observation>,
}

impl Problem {
    pub fn new(prior: GmmPrior, task: ForwardTask, sched: NoiseSchedule, n_train: usize, n_held: usize, seed: u64) -> Self {
        let train = make_dataset(&task, &prior, n_train, seed, 0).unwrap();
        let heldout = make_dataset(&task, &prior, n_held, seed, n_train as u64).unwrap();
        Problem {
            den: GmmOracleDenoiser::new(prior.clone()),
            prior,
            task,
            sched,
            train,
            heldout,
        }
    }

    pub fn default_schedule() -> NoiseSchedule {
        build_schedule(8, 1e-4, 0.02, 0.5).unwrap()
    }

    pub fn zero_policies(&self, hidden: &[usize], seed: u64) -> PolicyPair {
        PolicyPair::zero(self.task.dim(), self.task.cond_dim(), hidden, hidden, 1.0, 0.05, seed).unwrap()
    }

    pub fn stage1(&self, pols: &mut PolicyPair, cfg: &TrainConfig, w: &LossWeights) -> Vec<f64> {
        let cfg = &TrainConfig { dataset_size: self.train.len(), ..cfg.clone() };
        train_stage1(cfg, &self.task, &self.train, &self.den, &self.sched, pols, w).unwrap()
    }

    pub fn stage2(&self, pols: &mut PolicyPair, cfg: &TrainConfig, w: &LossWeights) -> Vec<f64> {
        let cfg = &TrainConfig { dataset_size: self.train.len(), ..cfg.clone() };
        train_stage2(cfg, &self.task, &self.train, &self.den, &self.sched, pols, w).unwrap()
    }
}

pub fn train_config(stage: u8, epochs: usize, batch: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        stage,
        epochs,
        batch_size: batch,
        lr,
        seed,
        dataset_size: 0,
        heldout_size: 0,
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
