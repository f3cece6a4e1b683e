mod common;

use common::*;
use hvp::diffusion::{build_schedule, GmmPrior};
use hvp::error::HvpError;
use hvp::harness::io::{
    fmt_float, load_checkpoint, read_sample_index, read_samples, save_checkpoint, sidecar_path, write_curve_csv,
    write_metrics_csv, write_samples, SampleIndex, ScheduleParams,
};
use hvp::math::Tensor;
use hvp::objective::LossWeights;
use hvp::tasks::{ForwardTask, Observation};
use hvp::training::{mean_metrics, sample_method, EvalConfig, EvalMode, MetricsRow};

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.ckpt");
    let mut pols = random_policies(3, 6, &[7, 5], 4);
    pols.step.stochastic = false;
    let sched = build_schedule(6, 2e-4, 0.03, 0.25).unwrap();
    save_checkpoint(&p, &pols, &sched).unwrap();
    let (back, params) = load_checkpoint(&p).unwrap();
    assert_eq!(back, pols);
    assert_eq!(params, ScheduleParams::of(&sched));

    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"HVP1");
    for cut in [3, 9, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(HvpError::Format(_))), "cut at {cut}");
    }
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    std::fs::write(&p, &wrong).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(HvpError::Format(_))));
    assert!(matches!(load_checkpoint(dir.path().join("absent")), Err(HvpError::Io(_))));
}

#[test]
fn samples_round_trip_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.hvpx");
    let data = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, std::f64::consts::PI];
    let x = Tensor::from_rows(3, 2, data.clone());
    let index: Vec<SampleIndex> = (0..3).map(|i| SampleIndex { obs_id: 9, rollout_id: 100 + i }).collect();
    write_samples(&p, &x, &index).unwrap();
    let back = read_samples(&p).unwrap();
    assert_eq!((back.rows(), back.cols()), (3, 2));
    let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(back.data()), bits(&data));
    assert_eq!(read_sample_index(&p).unwrap(), index);
    assert_eq!(std::fs::metadata(&p).unwrap().len(), 12 + 8 * 6);

    assert!(matches!(write_samples(&p, &x, &index[..2]), Err(HvpError::Dimension(_))));
}

#[test]
fn zero_trajectories_give_a_header_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.hvpx");
    write_samples(&p, &Tensor::zeros(0, 4), &[]).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(bytes.len(), 12);
    assert_eq!(&bytes[..4], b"HVPX");
    assert_eq!(read_samples(&p).unwrap().rows(), 0);
    let index = std::fs::read_to_string(sidecar_path(&p)).unwrap();
    assert_eq!(index.trim(), "row,obs_id,rollout_id");
}

fn row(method: EvalMode, obs_id: u64, v: f64, elbo: Option<f64>) -> MetricsRow {
    MetricsRow {
        method,
        obs_id,
        mse: v,
        psnr: -10.0 * v.log10(),
        measurement_residual: v / 3.0,
        terminal_loglik: -v * 1e5,
        denoiser_calls: 88,
        policy_calls: 9,
        elbo,
    }
}

#[test]
fn csv_floats_are_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![row(EvalMode::Shvp, 4, 0.1 + 0.2, Some(-1.0 / 3.0)), row(EvalMode::Shvp, 5, 1e-17, None)];
    let mut all: Vec<(u64, MetricsRow)> = rows.iter().map(|r| (7, r.clone())).collect();
    all.push((7, mean_metrics(&rows).unwrap()));
    let p = dir.path().join("m.csv");
    write_metrics_csv(&p, &all).unwrap();

    let mut r = csv::Reader::from_path(&p).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "method",
            "seed",
            "obs_id",
            "mse",
            "psnr",
            "measurement_residual",
            "terminal_loglik",
            "denoiser_calls",
            "policy_calls",
            "elbo"
        ]
    );
    let recs: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(recs.len(), 3);
    for (rec, (_, m)) in recs.iter().zip(&all) {
        assert_eq!(&rec[0], "shvp");
        assert_eq!(rec[3].parse::<f64>().unwrap().to_bits(), m.mse.to_bits());
        assert_eq!(rec[6].parse::<f64>().unwrap().to_bits(), m.terminal_loglik.to_bits());
        assert_eq!(&rec[7], "88");
    }
    assert_eq!(recs[0][9].parse::<f64>().unwrap(), -1.0 / 3.0);
    assert_eq!(&recs[1][9], "");
    assert_eq!(&recs[2][2], "all");

    let curve = [3.0, 2.5, 1.0 / 7.0];
    let c = dir.path().join("curve.csv");
    write_curve_csv(&c, &curve).unwrap();
    let back: Vec<f64> = csv::Reader::from_path(&c)
        .unwrap()
        .records()
        .map(|x| x.unwrap()[1].parse().unwrap())
        .collect();
    assert_eq!(back, curve);
    assert_eq!(fmt_float(0.1).len(), "1.0000000000000001e-1".len());
}

/// Difference between stage-1-only and stage-1+2 samples read back from
/// disk: nonzero, and largest where the stage-1 samples missed the
/// measurement most.
#[test]
fn stage2_correction_follows_the_stage1_residual() {
    let d = 16;
    let prior = GmmPrior::new(vec![0.5, 0.5], vec![vec![1.0; d], vec![-1.0; d]], vec![0.3, 0.3]).unwrap();
    let task = ForwardTask::identity(d, 0.05).unwrap();
    let pb = Problem::new(prior, task, Problem::default_schedule(), 128, 20, 21);
    let mut pols = pb.zero_policies(&[32, 32], 21);
    let w = LossWeights::default();
    pb.stage1(&mut pols, &train_config(1, 40, 32, 3e-3, 21), &w);
    pb.stage2(&mut pols, &train_config(2, 60, 32, 3e-3, 22), &w);

    let dir = tempfile::tempdir().unwrap();
    let refs: Vec<&Observation> = pb.heldout.iter().collect();
    let ecfg = EvalConfig {
        rollouts_per_obs: 4,
        seed: 5,
        ..EvalConfig::default()
    };
    let mut files = Vec::new();
    for mode in [EvalMode::Stage1Only, EvalMode::Ahvp] {
        let (_, traj) = sample_method(&pols, &pb.den, &pb.sched, &pb.task, &refs, mode, &ecfg).unwrap();
        let index: Vec<SampleIndex> = traj
            .ids
            .iter()
            .enumerate()
            .map(|(i, &rollout_id)| SampleIndex { obs_id: refs[i / 4].id, rollout_id })
            .collect();
        let p = dir.path().join(format!("{}.hvpx", mode.name()));
        write_samples(&p, traj.samples(), &index).unwrap();
        files.push(p);
    }
    let a0 = read_samples(&files[0]).unwrap();
    let a1 = read_samples(&files[1]).unwrap();
    assert_eq!(read_sample_index(&files[0]).unwrap(), read_sample_index(&files[1]).unwrap());

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for r in 0..a0.rows() {
        let y = &pb.heldout[r / 4].y;
        for c in 0..d {
            pairs.push(((y[c] - a0.get(r, c)).abs(), (a1.get(r, c) - a0.get(r, c)).abs()));
        }
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    assert!(total > 0.0);
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let q = pairs.len() / 4;
    let low = mean(&pairs[..q].iter().map(|p| p.1).collect::<Vec<_>>());
    let high = mean(&pairs[pairs.len() - q..].iter().map(|p| p.1).collect::<Vec<_>>());
    assert!(high > low, "correction {high} on the worst quarter vs {low} on the best");
}
