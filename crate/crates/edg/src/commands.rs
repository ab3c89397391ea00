//! The subcommands as library functions. Each writes its outputs under an
//! output directory and records them in that directory's manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use edg_core::decoder::{decode_batch, DecodedBatch};
use edg_core::energy::{ising_discretize, ising_exact_logz};
use edg_core::eval::{histogram2d, mmd_rbf, mmd_repeated, Histogram2d, MmdReport};
use edg_core::model::{Encoder, Model, ModelParams};
use edg_core::reweight::{logz_lower_bound, snis_expectation, weigh_samples, WeightedSample};
use edg_core::train::{LossRecord, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, TargetSpec};
use crate::error::{RunError, RunResult};
use crate::formats::{
    create_csv, load_checkpoint, save_checkpoint, write_histogram, write_json,
    write_sample_matrix, LossCsv, Manifest, ManifestEntry,
};
use crate::targets::Target;

/// RNG streams keep the subcommands independent under one seed.
const SAMPLE_STREAM: u64 = 1;
const LOGZ_STREAM: u64 = 2;
const REFERENCE_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn ensure_dir(dir: &Path) -> RunResult<()> {
    fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))
}

fn relative(dir: &Path, file: &Path) -> String {
    file.strip_prefix(dir)
        .unwrap_or(file)
        .to_string_lossy()
        .into_owned()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub steps: usize,
    pub skipped_steps: usize,
    /// Mean total loss over the last (up to) 100 recorded steps.
    pub final_loss: f64,
}

/// Load a config, apply command-line overrides and validate it.
pub fn load_experiment(
    path: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
) -> RunResult<(ExperimentConfig, Target)> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = out {
        cfg.output_dir = o.to_path_buf();
    }
    let target = cfg.validate(path)?;
    Ok((cfg, target))
}

pub fn cmd_train(opts: &TrainOptions) -> RunResult<TrainSummary> {
    let start = Instant::now();
    let (cfg, target) = load_experiment(&opts.config, opts.seed, opts.out.as_deref())?;
    let dir = cfg.output_dir.clone();
    ensure_dir(&dir)?;
    let digest = cfg.digest();
    let echo = dir.join("config.toml");
    fs::write(&echo, cfg.to_toml()).map_err(|e| RunError::io(&echo, e))?;

    let mut trainer = Trainer::new(&cfg.model_spec(), cfg.train.clone())?;
    let loss_path = dir.join("loss.csv");
    let ckpt_path = dir.join("checkpoint.bin");
    let mut loss = LossCsv::create(&loss_path)?;
    let mut tail: Vec<f64> = Vec::new();
    let mut recorded = 0;
    let every = cfg.train.checkpoint_every;
    let mut pending: Option<RunError> = None;
    let outcome = trainer.run(target.energy(), |t, rec: &LossRecord| {
        recorded += 1;
        tail.push(rec.total);
        if tail.len() > 100 {
            tail.remove(0);
        }
        let io = loss.push(rec).and_then(|_| {
            if every > 0 && t.step % every == 0 {
                loss.flush()?;
                save_checkpoint(&ckpt_path, &cfg, &t.checkpoint(&digest))
            } else {
                Ok(())
            }
        });
        io.map_err(|e| {
            let msg = e.to_string();
            pending = Some(e);
            edg_core::Error::Contract(msg)
        })
    });
    loss.flush()?;
    if let Some(e) = pending {
        return Err(e);
    }
    outcome?;
    save_checkpoint(&ckpt_path, &cfg, &trainer.checkpoint(&digest))?;
    let summary = TrainSummary {
        checkpoint: ckpt_path.clone(),
        loss_csv: loss_path.clone(),
        steps: trainer.step,
        skipped_steps: trainer.step - recorded,
        final_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
    };
    Manifest::update(
        &dir,
        "train",
        ManifestEntry {
            config_digest: Some(digest),
            seed: Some(cfg.seed),
            files: [&echo, &loss_path, &ckpt_path]
                .iter()
                .map(|f| relative(&dir, f))
                .collect(),
            summary: serde_json::to_value(&summary).expect("summary serialises"),
            elapsed_seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(summary)
}

/// A trained model ready for sampling.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub target: Target,
    pub model: Model,
    pub params: ModelParams,
    pub step: usize,
    pub digest: String,
}

pub fn load_trained(checkpoint: &Path) -> RunResult<Loaded> {
    let (config, cp) = load_checkpoint(checkpoint)?;
    let target = config.validate(checkpoint)?;
    let model = Model::restore(&cp.spec, &cp.params)?;
    Ok(Loaded {
        config,
        target,
        model,
        params: cp.params,
        step: cp.step,
        digest: cp.config_digest,
    })
}

impl Loaded {
    pub fn decode<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> RunResult<DecodedBatch> {
        Ok(decode_batch(
            &self.model.decoder,
            &self.params.decoder,
            self.target.energy(),
            n,
            rng,
        )?)
    }

    /// Importance weights per row; `None` where the ODE solve failed.
    pub fn weigh<R: rand::Rng + ?Sized>(
        &self,
        batch: &DecodedBatch,
        rng: &mut R,
    ) -> RunResult<Vec<Option<WeightedSample>>> {
        let energy = self.target.energy();
        let n = batch.x.rows();
        match &self.model.encoder {
            Encoder::Diffusion(_) => {
                let ctx = self.model.score_context(&self.params, energy)?;
                let rep = weigh_samples(&ctx, batch, &self.config.eval.ode, rng)?;
                let mut out: Vec<Option<WeightedSample>> = vec![None; n];
                let mut it = rep.samples.into_iter();
                for (i, slot) in out.iter_mut().enumerate() {
                    if !rep.failed.contains(&i) {
                        *slot = it.next();
                    }
                }
                Ok(out)
            }
            Encoder::Vae(enc) => (0..n)
                .map(|i| {
                    let x = batch.x.row(i).to_vec();
                    let z0 = batch.z0.row(i).to_vec();
                    let lpe = enc.log_density(&self.params.encoder, &z0, &x)?;
                    let energy = energy.energy(&x);
                    let (lpx, lpz) = (batch.log_px_given_z[i], batch.log_pz[i]);
                    Ok(Some(WeightedSample {
                        log_weight: -energy + lpe - lpz - lpx,
                        x,
                        z0,
                        log_pd_x_given_z0: lpx,
                        log_pd_z0: lpz,
                        log_pe_z0_given_x: lpe,
                        energy,
                    }))
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SampleOptions {
    pub checkpoint: PathBuf,
    pub n: usize,
    pub with_weights: bool,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleSummary {
    pub samples_csv: PathBuf,
    pub histogram_csv: Option<PathBuf>,
    pub rows: usize,
    /// Rows whose weight could not be computed (ODE failure).
    pub failed_weights: usize,
    pub histogram_spill: Option<u64>,
}

fn z0_digest(z0: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in z0 {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Sample CSV columns: `x_0..x_{d−1}`, `energy`, `log_weight`,
/// `log_pd_x_given_z0`, `log_pd_z0`, `log_pe_z0_given_x`, `z0_digest`, and
/// `s_0..s_{d−1}` (rounded spins) for Ising targets. Weight columns are
/// empty unless weights were requested or when a row's solve failed.
pub fn cmd_sample(opts: &SampleOptions) -> RunResult<SampleSummary> {
    let start = Instant::now();
    let loaded = load_trained(&opts.checkpoint)?;
    let cfg = &loaded.config;
    let dir = opts.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    ensure_dir(&dir)?;
    let seed = opts.seed.unwrap_or(cfg.seed);
    let mut rng = stream_rng(seed, SAMPLE_STREAM);
    let energy = loaded.target.energy();
    let d = energy.dim();
    let is_ising = matches!(cfg.target, TargetSpec::Ising { .. });

    let path = dir.join("samples.csv");
    let mut w = create_csv(&path)?;
    let err = |e: csv::Error| RunError::format(&path, e);
    let mut header: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
    header.extend(
        [
            "energy",
            "log_weight",
            "log_pd_x_given_z0",
            "log_pd_z0",
            "log_pe_z0_given_x",
            "z0_digest",
        ]
        .map(String::from),
    );
    if is_ising {
        header.extend((0..d).map(|j| format!("s_{j}")));
    }
    w.write_record(&header).map_err(err)?;

    let bounds = cfg.eval.hist_bounds.map(|b| (b[0], b[1]));
    let mut hist: Option<Histogram2d> = (d == 2).then(|| Histogram2d {
        bounds,
        bins: cfg.eval.hist_bins,
        counts: vec![0; cfg.eval.hist_bins * cfg.eval.hist_bins],
        spill: 0,
    });
    let mut failed = 0;
    let mut done = 0;
    while done < opts.n {
        let m = cfg.eval.chunk.min(opts.n - done);
        let batch = loaded.decode(m, &mut rng)?;
        let weights = if opts.with_weights {
            loaded.weigh(&batch, &mut rng)?
        } else {
            vec![None; m]
        };
        for (i, wt) in weights.iter().enumerate() {
            let x = batch.x.row(i);
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            let energy_v = wt.as_ref().map(|w| w.energy).unwrap_or_else(|| energy.energy(x));
            if opts.with_weights && wt.is_none() {
                failed += 1;
            }
            rec.push(energy_v.to_string());
            rec.push(fmt_opt(wt.as_ref().map(|w| w.log_weight)));
            rec.push(batch.log_px_given_z[i].to_string());
            rec.push(batch.log_pz[i].to_string());
            rec.push(fmt_opt(wt.as_ref().map(|w| w.log_pe_z0_given_x)));
            rec.push(z0_digest(batch.z0.row(i)));
            if is_ising {
                rec.extend(ising_discretize(x, &mut rng).iter().map(|s| s.to_string()));
            }
            w.write_record(&rec).map_err(err)?;
        }
        if let Some(h) = hist.as_mut() {
            let part = histogram2d(&batch.x, bounds, h.bins)?;
            for (c, p) in h.counts.iter_mut().zip(&part.counts) {
                *c += p;
            }
            h.spill += part.spill;
        }
        done += m;
    }
    w.flush().map_err(|e| RunError::io(&path, e))?;
    if failed > 0 {
        log::warn!("{failed} of {} weights failed (ODE solve); their log_weight is empty", opts.n);
    }
    let mut files = vec![relative(&dir, &path)];
    let histogram_csv = match &hist {
        Some(h) => {
            let hp = dir.join("histogram.csv");
            write_histogram(&hp, h)?;
            files.push(relative(&dir, &hp));
            Some(hp)
        }
        None => None,
    };
    let summary = SampleSummary {
        samples_csv: path.clone(),
        histogram_csv,
        rows: opts.n,
        failed_weights: failed,
        histogram_spill: hist.as_ref().map(|h| h.spill),
    };
    Manifest::update(
        &dir,
        "sample",
        ManifestEntry {
            config_digest: Some(loaded.digest.clone()),
            seed: Some(seed),
            files,
            summary: serde_json::to_value(&summary).expect("summary serialises"),
            elapsed_seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(summary)
}

#[derive(Clone, Debug, Default)]
pub struct LogZOptions {
    pub checkpoint: PathBuf,
    pub n: usize,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsingLogZ {
    /// Lower bound converted from the relaxed model to the spins.
    pub ising_log_z: f64,
    /// Exhaustive enumeration, for lattices small enough.
    pub exact_log_z: Option<f64>,
    pub relative_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogZOutput {
    /// Mean log-weight, a lower bound on log Z.
    pub mean_log_weight: f64,
    /// `std / √n`; null for a single sample.
    pub stderr: Option<f64>,
    pub log_mean_weight: f64,
    pub n: usize,
    pub failed: usize,
    pub exact_log_z: Option<f64>,
    /// Self-normalised estimates of the target mean and covariance.
    pub snis_mean: Vec<f64>,
    pub snis_cov: Vec<Vec<f64>>,
    pub ising: Option<IsingLogZ>,
}

pub fn cmd_logz(opts: &LogZOptions) -> RunResult<LogZOutput> {
    let start = Instant::now();
    if opts.n == 0 {
        return Err(RunError::Usage("--n must be at least 1".into()));
    }
    let loaded = load_trained(&opts.checkpoint)?;
    let cfg = &loaded.config;
    let dir = opts.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    ensure_dir(&dir)?;
    let seed = opts.seed.unwrap_or(cfg.seed);
    let mut rng = stream_rng(seed, LOGZ_STREAM);
    let mut weighted = Vec::with_capacity(opts.n);
    let mut failed = 0;
    let mut done = 0;
    while done < opts.n {
        let m = cfg.eval.chunk.min(opts.n - done);
        let batch = loaded.decode(m, &mut rng)?;
        for w in loaded.weigh(&batch, &mut rng)? {
            match w {
                Some(w) => weighted.push(w),
                None => failed += 1,
            }
        }
        done += m;
    }
    if weighted.is_empty() {
        return Err(edg_core::Error::Estimation("every ODE solve failed".into()).into());
    }
    let rep = logz_lower_bound(&weighted)?;
    let d = loaded.target.energy().dim();
    let snis_mean: Vec<f64> = (0..d)
        .map(|j| snis_expectation(&weighted, |x| x[j]))
        .collect::<Result<_, _>>()?;
    let mut snis_cov = vec![vec![0.0; d]; d];
    for a in 0..d {
        for b in 0..=a {
            let (ma, mb) = (snis_mean[a], snis_mean[b]);
            let c = snis_expectation(&weighted, |x| (x[a] - ma) * (x[b] - mb))?;
            snis_cov[a][b] = c;
            snis_cov[b][a] = c;
        }
    }
    let ising = match &loaded.target {
        Target::Ising(r) => {
            let est = r.ising_logz_from_relaxed(rep.mean_log_weight);
            let exact = ising_exact_logz(&r.spec).ok();
            Some(IsingLogZ {
                ising_log_z: est,
                exact_log_z: exact,
                relative_error: exact.map(|e| ((est - e) / e).abs()),
            })
        }
        _ => None,
    };
    let out = LogZOutput {
        mean_log_weight: rep.mean_log_weight,
        stderr: rep.stderr,
        log_mean_weight: rep.log_mean_weight,
        n: rep.n,
        failed,
        exact_log_z: loaded.target.exact_log_z(),
        snis_mean,
        snis_cov,
        ising,
    };
    let path = dir.join("logz.json");
    write_json(&path, &out)?;
    Manifest::update(
        &dir,
        "logz",
        ManifestEntry {
            config_digest: Some(loaded.digest.clone()),
            seed: Some(seed),
            files: vec![relative(&dir, &path)],
            summary: serde_json::to_value(&out).expect("report serialises"),
            elapsed_seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub samples: PathBuf,
    pub reference: PathBuf,
    pub m: usize,
    pub repeats: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub mmd: MmdReport,
    pub dim: usize,
    /// Both sets were drawn from one file without overlap.
    pub disjoint_split: bool,
}

/// MMD between the `x_*` columns of two sample CSVs. When both paths name
/// the same file, each repeat splits one draw of `2m` rows in two.
pub fn cmd_eval(opts: &EvalOptions) -> RunResult<EvalOutput> {
    let start = Instant::now();
    let x = crate::formats::read_sample_matrix(&opts.samples)?;
    let same = match (fs::canonicalize(&opts.samples), fs::canonicalize(&opts.reference)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    let y = if same {
        x.clone()
    } else {
        crate::formats::read_sample_matrix(&opts.reference)?
    };
    if x.cols() != y.cols() {
        return Err(edg_core::Error::Contract(format!(
            "{} has dimension {}, {} has dimension {}",
            opts.samples.display(),
            x.cols(),
            opts.reference.display(),
            y.cols()
        ))
        .into());
    }
    if opts.repeats == 0 {
        return Err(RunError::Usage("--repeats must be at least 1".into()));
    }
    let mut rng = stream_rng(opts.seed, EVAL_STREAM);
    let mmd = if same {
        if x.rows() < 2 * opts.m {
            return Err(edg_core::Error::Contract(format!(
                "splitting one file needs {} rows, it has {}",
                2 * opts.m,
                x.rows()
            ))
            .into());
        }
        let mut vals = Vec::with_capacity(opts.repeats);
        let mut first: Option<MmdReport> = None;
        for _ in 0..opts.repeats {
            let idx = rand::seq::index::sample(&mut rng, x.rows(), 2 * opts.m).into_vec();
            let a = x.select_rows(&idx[..opts.m]);
            let b = x.select_rows(&idx[opts.m..]);
            let r = mmd_rbf(&a, &b)?;
            vals.push(r.mmd_squared);
            first.get_or_insert(r);
        }
        let mut r = first.expect("at least one repeat");
        r.repeats = opts.repeats;
        r.mean_over_repeats = vals.iter().sum::<f64>() / opts.repeats as f64;
        r
    } else {
        mmd_repeated(&x, &y, opts.m, opts.repeats, &mut rng)?
    };
    let out = EvalOutput {
        mmd,
        dim: x.cols(),
        disjoint_split: same,
    };
    if let Some(dir) = &opts.out {
        ensure_dir(dir)?;
        let path = dir.join("mmd.json");
        write_json(&path, &out)?;
        Manifest::update(
            dir,
            "eval",
            ManifestEntry {
                config_digest: None,
                seed: Some(opts.seed),
                files: vec![relative(dir, &path)],
                summary: serde_json::to_value(&out).expect("report serialises"),
                elapsed_seconds: start.elapsed().as_secs_f64(),
            },
        )?;
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct ReferenceOptions {
    pub config: PathBuf,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub path: PathBuf,
    pub method: String,
    pub rows: usize,
    pub cache_hit: bool,
    pub key: String,
}

/// Reference samples for the configured target, cached under
/// `references/` by a digest of the target, sampler settings and seed.
pub fn cmd_reference(opts: &ReferenceOptions) -> RunResult<ReferenceSummary> {
    let start = Instant::now();
    let (mut cfg, target) = load_experiment(&opts.config, opts.seed, opts.out.as_deref())?;
    if let Some(n) = opts.n {
        cfg.reference.n = n;
    }
    let dir = cfg.output_dir.clone();
    let key_src = serde_json::to_vec(&(&cfg.target, &cfg.reference, cfg.seed))
        .expect("reference key serialises");
    let key = hex::encode(&Sha256::digest(&key_src)[..8]);
    let refdir = dir.join("references");
    ensure_dir(&refdir)?;
    let path = refdir.join(format!("reference-{key}.csv"));
    let meta_path = refdir.join(format!("reference-{key}.json"));
    let cached: Option<ReferenceSummary> = fs::read(&meta_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .filter(|_| path.exists());
    let summary = match cached {
        Some(mut s) => {
            s.cache_hit = true;
            s
        }
        None => {
            let mut rng = stream_rng(cfg.seed, REFERENCE_STREAM);
            let (x, method) = target.reference(&cfg.reference, &mut rng)?;
            write_sample_matrix(&path, &x)?;
            let s = ReferenceSummary {
                path: path.clone(),
                method: method.into(),
                rows: x.rows(),
                cache_hit: false,
                key: key.clone(),
            };
            write_json(&meta_path, &s)?;
            s
        }
    };
    Manifest::update(
        &dir,
        "reference",
        ManifestEntry {
            config_digest: Some(cfg.digest()),
            seed: Some(cfg.seed),
            files: vec![relative(&dir, &path), relative(&dir, &meta_path)],
            summary: serde_json::to_value(&summary).expect("summary serialises"),
            elapsed_seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(summary)
}
