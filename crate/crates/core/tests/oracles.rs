mod common;

use common::*;
use hvp::diffusion::{build_schedule, gmm_tweedie, log_sum_exp, GmmOracleDenoiser, GmmPrior, ReverseSampler};
use hvp::harness::suites::random_gaussian_instance;
use hvp::math::Tensor;
use hvp::objective::{elbo_mean_se, elbo_terms, shvp_step_objective, KlMode};
use hvp::oracle::{
    chain_marginal, gmm_log_evidence, log_evidence, mc_evidence, posterior_moments, quadrature_tweedie_1d,
    GaussianLinearInstance,
};
use hvp::policies::{ahvp_rollout, rollout_ids, CallCounts};
use hvp::rng::NoiseStreams;
use hvp::tasks::{make_observation, ForwardTask, Observation, ObservationBatch};

#[test]
fn four_dimensional_evidence_matches_monte_carlo() {
    let mut r = rng(41);
    let (prior, task, y) = random_gaussian_instance(&mut r, 4, 4).unwrap();
    let exact = log_evidence(&GaussianLinearInstance::from_task(&prior, &task, &y, None).unwrap()).unwrap();
    let (est, se) = mc_evidence(&prior, &task, &y, None, 1_000_000, 8).unwrap();
    assert!((est - exact).abs() <= 3.0 * se, "{est} vs {exact} (se {se})");
}

#[test]
fn mixture_evidence_matches_monte_carlo() {
    let prior = GmmPrior::new(vec![0.3, 0.7], vec![vec![1.0, -0.5], vec![-1.0, 0.5]], vec![0.2, 0.6]).unwrap();
    let task = ForwardTask::dense(Tensor::from_rows(1, 2, vec![0.8, -0.3]), 0.4).unwrap();
    let y = [0.35];
    let exact = gmm_log_evidence(&prior, &task, &y, None).unwrap();
    let (est, se) = mc_evidence(&prior, &task, &y, None, 400_000, 2).unwrap();
    assert!((est - exact).abs() <= 3.0 * se, "{est} vs {exact} (se {se})");
}

#[test]
fn posterior_mean_matches_importance_sampling() {
    const N: usize = 200_000;
    let mut r = rng(42);
    let (prior, task, y) = random_gaussian_instance(&mut r, 4, 3).unwrap();
    let (mean, _) = posterior_moments(&GaussianLinearInstance::from_task(&prior, &task, &y, None).unwrap()).unwrap();
    let xs = prior.sample(N, 17);
    let logw: Vec<f64> = (0..N).map(|i| task.log_likelihood(&y, xs.row_slice(i)).unwrap()).collect();
    let lse = log_sum_exp(&logw);
    let w: Vec<f64> = logw.iter().map(|l| (l - lse).exp()).collect();
    for c in 0..4 {
        let est: f64 = (0..N).map(|i| w[i] * xs.get(i, c)).sum();
        // Delta-method standard error of the self-normalized estimate.
        let var: f64 = (0..N).map(|i| (w[i] * (xs.get(i, c) - est)).powi(2)).sum();
        let se = var.sqrt();
        assert!((est - mean[c]).abs() <= 3.0 * se, "coord {c}: {est} vs {} (se {se})", mean[c]);
    }
}

#[test]
fn asymmetric_three_component_quadrature_is_grid_stable() {
    let prior = GmmPrior::new(vec![0.2, 0.5, 0.3], vec![vec![-2.0], vec![0.3], vec![1.7]], vec![0.05, 0.4, 0.15]).unwrap();
    let sched = build_schedule(8, 1e-4, 0.02, 0.5).unwrap();
    let mut r = rng(43);
    for _ in 0..10 {
        let t = rand::Rng::random_range(&mut r, 1..=8usize);
        let x = 2.0 * normal(&mut r);
        let coarse = quadrature_tweedie_1d(&prior, &sched, x, t, 100_001).unwrap();
        let fine = quadrature_tweedie_1d(&prior, &sched, x, t, 200_001).unwrap();
        assert!((coarse - fine).abs() < 1e-8, "t {t}, x {x}: {coarse} vs {fine}");
        let closed = gmm_tweedie(&prior, &sched, &Tensor::row(&[x]), t).unwrap().item();
        assert!((closed - fine).abs() < 1e-6);
    }
}

fn hdr_instance() -> (GmmPrior, ForwardTask, hvp::diffusion::NoiseSchedule, Vec<f64>) {
    let prior = GmmPrior::new(vec![0.5, 0.5], vec![vec![0.1], vec![0.4]], vec![0.01, 0.01]).unwrap();
    let task = ForwardTask::hdr(1, 2.0, 0.0, 0.1).unwrap();
    let sched = build_schedule(4, 1e-4, 0.02, 0.5).unwrap();
    (prior, task, sched, vec![0.55])
}

/// `log p(y)` under the unguided chain's own terminal distribution from a
/// million rollouts, with a delta-method standard error.
fn hdr_chain_evidence(seed: u64) -> (f64, f64) {
    const N: u64 = 1_000_000;
    let (prior, task, sched, y) = hdr_instance();
    let den = GmmOracleDenoiser::new(prior);
    let sampler = ReverseSampler::new(&den, &sched);
    let ids: Vec<u64> = (0..N).collect();
    let x0 = sampler.rollout(&NoiseStreams::new(seed), &ids).unwrap().swap_remove(0);
    let ll: Vec<f64> = (0..N as usize).map(|i| task.log_likelihood(&y, x0.row_slice(i)).unwrap()).collect();
    let est = log_sum_exp(&ll) - (N as f64).ln();
    let w: Vec<f64> = ll.iter().map(|l| (l - est).exp()).collect();
    let var = w.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / (N - 1) as f64;
    (est, (var / N as f64).sqrt())
}

const HDR_REFERENCE: f64 = 1.110294708684041;

#[test]
fn hdr_reference_and_bound() {
    let (v, se_ref) = hdr_chain_evidence(2024);
    assert!((v - HDR_REFERENCE).abs() < 1e-12, "reference moved: {v:?}");
    let (again, se_again) = hdr_chain_evidence(7);
    assert!((again - v).abs() < 4.0 * (se_ref.powi(2) + se_again.powi(2)).sqrt());

    let (prior, task, sched, y) = hdr_instance();
    let den = GmmOracleDenoiser::new(prior);
    let obs = Observation {
        id: 0,
        seed: 0,
        y,
        mask: None,
        truth: vec![0.275],
    };
    const K: usize = 100_000;
    let batch = ObservationBatch::repeat_each(&task, &[&obs], K).unwrap();
    let ids = rollout_ids(obs.id, K);
    for seed in 0..3 {
        let pols = random_policies(1, task.cond_dim(), &[8], seed);
        let traj = ahvp_rollout(&pols, &den, &sched, &pols.guidance().with_kl(true), &batch, &ids, seed).unwrap();
        let terms = elbo_terms(&traj, &task, &batch, &sched, &pols, KlMode::Exact).unwrap();
        let (m, se) = elbo_mean_se(&terms);
        assert!(m <= HDR_REFERENCE + 3.0 * (se * se + se_ref * se_ref).sqrt(), "policy {seed}: {m} (se {se}) above {HDR_REFERENCE}");
    }
}

#[test]
fn scalar_identity_bound_with_many_trajectories() {
    const K: usize = 100_000;
    let prior = GmmPrior::gaussian(vec![0.3], 0.8).unwrap();
    let task = ForwardTask::identity(1, 0.3).unwrap();
    let sched = build_schedule(4, 1e-4, 0.02, 0.5).unwrap();
    let chain = chain_marginal(&prior, &sched).unwrap();
    let obs = make_observation(&task, &[0.6], 3, 0).unwrap();
    let exact = log_evidence(&GaussianLinearInstance::from_task(&chain, &task, &obs.y, None).unwrap()).unwrap();
    let den = GmmOracleDenoiser::new(prior);
    let batch = ObservationBatch::repeat_each(&task, &[&obs], K).unwrap();
    let ids = rollout_ids(obs.id, K);
    for seed in 0..3 {
        let pols = random_policies(1, task.cond_dim(), &[8], 50 + seed);
        let traj = ahvp_rollout(&pols, &den, &sched, &pols.guidance().with_kl(true), &batch, &ids, seed).unwrap();
        let terms = elbo_terms(&traj, &task, &batch, &sched, &pols, KlMode::Exact).unwrap();
        let (m, se) = elbo_mean_se(&terms);
        assert!(m <= exact + 3.0 * se, "{m} (se {se}) vs {exact}");
    }
}

/// With only the reward term and an identity task the best control makes
/// the Tweedie estimate hit `y`, which for one Gaussian component is an
/// affine equation in `u`.
#[test]
fn refinement_ascent_reaches_the_closed_form_control() {
    let (m, v, gamma) = (0.4, 0.5, 0.8);
    let prior = GmmPrior::gaussian(vec![m, -m], v).unwrap();
    let den = GmmOracleDenoiser::new(prior);
    let task = ForwardTask::identity(2, 0.2).unwrap();
    let sched = build_schedule(8, 1e-4, 0.02, 0.5).unwrap();
    let obs = Observation {
        id: 0,
        seed: 0,
        y: vec![1.1, 0.2],
        mask: None,
        truth: vec![0.0; 2],
    };
    let batch = ObservationBatch::from_observations(&task, &[&obs]).unwrap();
    let x = Tensor::from_rows(1, 2, vec![0.3, -0.7]);
    for t in [2, 5, 8] {
        let (a, s) = (sched.a(t), sched.s(t));
        let c = a * a * v + s * s;
        let (g, h) = (a * v / c, s * s / c);
        let target: Vec<f64> = (0..2)
            .map(|i| ((obs.y[i] - h * [m, -m][i]) / g - x.get(0, i)) / gamma)
            .collect();
        let curvature = (gamma * g / task.sigma_y()).powi(2);
        let lr = 0.3 / curvature;
        let mut u = Tensor::zeros(1, 2);
        let mut counts = CallCounts::default();
        for _ in 0..200 {
            let (_, grad) =
                shvp_step_objective(&x, &u, t, &task, &batch, &den, &sched, gamma, 0.0, 0.0, &mut counts).unwrap();
            u = Tensor::from_rows(1, 2, (0..2).map(|i| u.get(0, i) + lr * grad.get(0, i)).collect());
        }
        for i in 0..2 {
            assert!((u.get(0, i) - target[i]).abs() < 1e-3, "t {t}: {:?} vs {target:?}", u.data());
        }
        assert_eq!(counts.denoiser, 400);
    }
}
