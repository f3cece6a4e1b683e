//! On-disk formats: checkpoints, sample arrays, CSV tables and run manifests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::diffusion::NoiseSchedule;
use crate::error::{HvpError, Result};
use crate::math::{Layer, Mlp, Tensor};
use crate::policies::{NoisePolicy, PolicyPair, StepPolicy};
use crate::training::MetricsRow;

const CHECKPOINT_MAGIC: &[u8; 4] = b"HVP1";
const SAMPLES_MAGIC: &[u8; 4] = b"HVPX";

/// Schedule parameters stored next to the networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta: f64,
}

impl ScheduleParams {
    pub fn of(sched: &NoiseSchedule) -> Self {
        ScheduleParams {
            steps: sched.steps(),
            beta_min: sched.beta_min(),
            beta_max: sched.beta_max(),
            eta: sched.eta(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Object id of a blob the way a SHA-256 git repository computes it.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn fmt_err(what: &str, e: std::io::Error) -> HvpError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        HvpError::Format(format!("{what}: truncated file"))
    } else {
        HvpError::Io(e)
    }
}

fn write_net(w: &mut impl Write, net: &Mlp) -> std::io::Result<()> {
    let name = net.name().as_bytes();
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name)?;
    w.write_u32::<LittleEndian>(net.widths().len() as u32)?;
    for &k in net.widths() {
        w.write_u32::<LittleEndian>(k as u32)?;
    }
    for layer in net.layers() {
        for &v in layer.w.data().iter().chain(layer.b.data()) {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut v = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

fn read_net(r: &mut impl Read) -> Result<Mlp> {
    let e = |err| fmt_err("checkpoint", err);
    let len = r.read_u32::<LittleEndian>().map_err(e)? as usize;
    if len > 1 << 16 {
        return Err(HvpError::Format("checkpoint: implausible network name length".into()));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(e)?;
    let name = String::from_utf8(name).map_err(|_| HvpError::Format("checkpoint: network name is not UTF-8".into()))?;
    let nw = r.read_u32::<LittleEndian>().map_err(e)? as usize;
    if !(2..=64).contains(&nw) {
        return Err(HvpError::Format(format!("checkpoint: {nw} layer widths")));
    }
    let mut widths = Vec::with_capacity(nw);
    for _ in 0..nw {
        widths.push(r.read_u32::<LittleEndian>().map_err(e)? as usize);
    }
    let mut layers = Vec::with_capacity(nw - 1);
    for pair in widths.windows(2) {
        let (i, o) = (pair[0], pair[1]);
        let w = Tensor::from_rows(i, o, read_f64s(r, i * o).map_err(e)?);
        let b = Tensor::from_rows(1, o, read_f64s(r, o).map_err(e)?);
        layers.push(Layer { w, b });
    }
    Mlp::from_layers(&name, layers)
}

pub fn save_checkpoint(path: impl AsRef<Path>, pols: &PolicyPair, sched: &NoiseSchedule) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(2)?;
    write_net(&mut w, &pols.noise.net)?;
    write_net(&mut w, &pols.step.net)?;
    w.write_f64::<LittleEndian>(pols.gamma)?;
    w.write_f64::<LittleEndian>(pols.step.kappa)?;
    let p = ScheduleParams::of(sched);
    w.write_u32::<LittleEndian>(p.steps as u32)?;
    w.write_f64::<LittleEndian>(p.beta_min)?;
    w.write_f64::<LittleEndian>(p.beta_max)?;
    w.write_f64::<LittleEndian>(p.eta)?;
    w.write_u8(pols.noise.stochastic as u8)?;
    w.write_u8(pols.step.stochastic as u8)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PolicyPair, ScheduleParams)> {
    let mut r = BufReader::new(File::open(path)?);
    let e = |err| fmt_err("checkpoint", err);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(e)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(HvpError::Format("checkpoint: bad magic".into()));
    }
    let count = r.read_u32::<LittleEndian>().map_err(e)?;
    if count != 2 {
        return Err(HvpError::Format(format!("checkpoint: expected 2 networks, found {count}")));
    }
    let noise = read_net(&mut r)?;
    let step = read_net(&mut r)?;
    let gamma = r.read_f64::<LittleEndian>().map_err(e)?;
    let kappa = r.read_f64::<LittleEndian>().map_err(e)?;
    let params = ScheduleParams {
        steps: r.read_u32::<LittleEndian>().map_err(e)? as usize,
        beta_min: r.read_f64::<LittleEndian>().map_err(e)?,
        beta_max: r.read_f64::<LittleEndian>().map_err(e)?,
        eta: r.read_f64::<LittleEndian>().map_err(e)?,
    };
    let noise_stochastic = r.read_u8().map_err(e)? != 0;
    let step_stochastic = r.read_u8().map_err(e)? != 0;
    let pols = PolicyPair {
        noise: NoisePolicy {
            net: noise,
            stochastic: noise_stochastic,
        },
        step: StepPolicy {
            net: step,
            kappa,
            stochastic: step_stochastic,
        },
        gamma,
    };
    Ok((pols, params))
}

/// Index entry written to the sidecar CSV of a sample file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleIndex {
    pub obs_id: u64,
    pub rollout_id: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

/// Writes `samples` (one row per trajectory) and the `<path>.csv` index.
pub fn write_samples(path: impl AsRef<Path>, samples: &Tensor, index: &[SampleIndex]) -> Result<()> {
    let path = path.as_ref();
    let (n, d) = (samples.rows(), if samples.is_empty() { 0 } else { samples.cols() });
    if index.len() != n {
        return Err(HvpError::Dimension(format!("{} index entries for {n} samples", index.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SAMPLES_MAGIC)?;
    w.write_u32::<LittleEndian>(n as u32)?;
    w.write_u32::<LittleEndian>(d as u32)?;
    for &v in samples.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.flush()?;
    let mut c = csv::Writer::from_path(sidecar_path(path))?;
    c.write_record(["row", "obs_id", "rollout_id"])?;
    for (i, ix) in index.iter().enumerate() {
        c.write_record([i.to_string(), ix.obs_id.to_string(), ix.rollout_id.to_string()])?;
    }
    c.flush()?;
    Ok(())
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let e = |err| fmt_err("samples", err);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(e)?;
    if &magic != SAMPLES_MAGIC {
        return Err(HvpError::Format("samples: bad magic".into()));
    }
    let n = r.read_u32::<LittleEndian>().map_err(e)? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(e)? as usize;
    let data = read_f64s(&mut r, n * d).map_err(e)?;
    Ok(Tensor::from_rows(n, d, data))
}

pub fn read_sample_index(path: impl AsRef<Path>) -> Result<Vec<SampleIndex>> {
    let mut c = csv::Reader::from_path(sidecar_path(path.as_ref()))?;
    let mut out = Vec::new();
    for rec in c.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<u64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| HvpError::Format("samples index: bad row".into()))
        };
        out.push(SampleIndex {
            obs_id: field(1)?,
            rollout_id: field(2)?,
        });
    }
    Ok(out)
}

/// Seventeen significant digits, enough for a lossless round trip.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[f64]) -> Result<()> {
    let mut c = csv::Writer::from_path(path)?;
    c.write_record(["epoch", "loss"])?;
    for (i, v) in curve.iter().enumerate() {
        c.write_record([i.to_string(), fmt_float(*v)])?;
    }
    c.flush()?;
    Ok(())
}

pub const METRICS_HEADER: [&str; 10] = [
    "method",
    "seed",
    "obs_id",
    "mse",
    "psnr",
    "measurement_residual",
    "terminal_loglik",
    "denoiser_calls",
    "policy_calls",
    "elbo",
];

/// Metric rows tagged with the seed of the run that produced them. Aggregate
/// rows carry `all` as their observation id.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[(u64, MetricsRow)]) -> Result<()> {
    let mut c = csv::Writer::from_path(path)?;
    c.write_record(METRICS_HEADER)?;
    for (seed, r) in rows {
        let id = if r.obs_id == u64::MAX { "all".to_string() } else { r.obs_id.to_string() };
        c.write_record([
            r.method.name().to_string(),
            seed.to_string(),
            id,
            fmt_float(r.mse),
            fmt_float(r.psnr),
            fmt_float(r.measurement_residual),
            fmt_float(r.terminal_loglik),
            r.denoiser_calls.to_string(),
            r.policy_calls.to_string(),
            r.elbo.map(fmt_float).unwrap_or_default(),
        ])?;
    }
    c.flush()?;
    Ok(())
}

/// Records what is needed to rerun a command bit-exactly.
pub fn write_manifest(
    path: impl AsRef<Path>,
    command: &str,
    seed: u64,
    config_text: &str,
    checkpoint: Option<&Path>,
    outputs: &[PathBuf],
) -> Result<()> {
    let hash_file = |p: &Path| -> Result<String> { Ok(git_blob_hash(&std::fs::read(p)?)) };
    let ckpt = match checkpoint {
        Some(p) => serde_json::json!({ "path": p.display().to_string(), "hash": hash_file(p)? }),
        None => serde_json::Value::Null,
    };
    let mut files = serde_json::Map::new();
    for p in outputs {
        files.insert(p.display().to_string(), hash_file(p)?.into());
    }
    let doc = serde_json::json!({
        "command": command,
        "seed": seed,
        "config_hash": sha256_hex(config_text.as_bytes()),
        "config": config_text,
        "checkpoint": ckpt,
        "outputs": files,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| HvpError::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
