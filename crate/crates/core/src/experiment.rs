//! File-backed pipeline stages behind the command-line front end.
//!
//! Layout under the output directory:
//!
//! ```text
//! train.jsonl  eval.jsonl  info_gain_grid.csv  report.json
//! <VARIANT>/policy.json  training.csv  logs.jsonl  pareto.csv
//!           logs/alpha_00.jsonl ...  nose.csv  latency_bins.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::losses::LossWeights;
use crate::math::mix64;
use crate::metrics::{
    corpus_point, latency_range, latency_vs_position, nose, read_pareto_csv, write_latency_bins_csv,
    write_nose_csv, write_pareto_csv, LatencyBand, ParetoPoint,
};
use crate::policy::{PolicyConfig, PolicyParams, PolicyVariant};
use crate::stream::{
    quantile_alphas, read_logs, simulate_corpus, sweep_params, write_logs, OracleGainPolicy, StreamConfig,
    ThresholdPolicy,
};
use crate::synth::{generate_dataset, read_dataset, write_dataset, OracleModel, SynthConfig, Utterance};
use crate::trainer::{train, write_training_csv, TrainConfig};

const EVAL_SALT: u64 = 0xe7a1_0000_0000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSizes {
    pub train: usize,
    pub eval: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            train: 200,
            eval: 100,
        }
    }
}

/// Architecture knobs; input width and the time path follow from the
/// feature dimension and the variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySettings {
    pub hidden_dims: Vec<usize>,
    pub time_base: f64,
}

impl Default for PolicySettings {
    fn default() -> Self {
        let base = PolicyConfig::default();
        PolicySettings {
            hidden_dims: base.hidden_dims,
            time_base: base.time_base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    /// Variants to compare; empty means the configured variant only.
    pub variants: Vec<PolicyVariant>,
    /// Latency band for NoSE; defaults to the range every variant reaches.
    pub band: Option<LatencyBand>,
    /// Overrides the full-source greedy decode as the offline reference.
    pub offline_quality: Option<f64>,
    pub bins: usize,
    /// Utterance index for the information-gain grid.
    pub grid_utterance: usize,
}

impl Default for ReportSettings {
    fn default() -> Self {
        ReportSettings {
            variants: Vec::new(),
            band: None,
            offline_quality: None,
            bins: 10,
            grid_utterance: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub variant: PolicyVariant,
    /// Thresholds for `sweep`; empty means `alpha_count` score quantiles.
    pub alphas: Vec<f64>,
    pub alpha_count: usize,
    pub data: DataSizes,
    pub synth: SynthConfig,
    pub policy: PolicySettings,
    pub train: TrainConfig,
    pub losses: LossWeights,
    pub stream: StreamConfig,
    pub report: ReportSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("out"),
            variant: PolicyVariant::Reina,
            alphas: Vec::new(),
            alpha_count: 10,
            data: DataSizes::default(),
            synth: SynthConfig::default(),
            policy: PolicySettings::default(),
            train: TrainConfig::default(),
            losses: LossWeights::default(),
            stream: StreamConfig::default(),
            report: ReportSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Reseeds data generation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.rng_seed = seed;
        self.train.rng_seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.losses.validate()?;
        self.stream.validate()?;
        self.policy_config(self.variant).validate()?;
        if self.data.train == 0 {
            return Err(LabError::config("data.train", "must be at least 1"));
        }
        if self.data.eval == 0 {
            return Err(LabError::config("data.eval", "must be at least 1"));
        }
        if self.alphas.iter().any(|a| a.is_nan()) {
            return Err(LabError::config("alphas", "must not contain NaN"));
        }
        if self.alphas.is_empty() && self.alpha_count == 0 {
            return Err(LabError::config(
                "alpha_count",
                "must be positive when alphas is empty",
            ));
        }
        if self.report.bins == 0 {
            return Err(LabError::config("report.bins", "must be at least 1"));
        }
        if let Some(band) = self.report.band {
            band.validate()?;
        }
        if let Some(q) = self.report.offline_quality {
            if !(q > 0.0) {
                return Err(LabError::config("report.offline_quality", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn policy_config(&self, variant: PolicyVariant) -> PolicyConfig {
        PolicyConfig {
            hidden_dims: self.policy.hidden_dims.clone(),
            time_base: self.policy.time_base,
            ..PolicyConfig::for_variant(self.synth.feature_dim, variant)
        }
    }

    pub fn eval_synth(&self) -> SynthConfig {
        SynthConfig {
            rng_seed: mix64(self.synth.rng_seed ^ EVAL_SALT),
            ..self.synth.clone()
        }
    }

    pub fn train_path(&self) -> PathBuf {
        self.out_dir.join("train.jsonl")
    }

    pub fn eval_path(&self) -> PathBuf {
        self.out_dir.join("eval.jsonl")
    }

    pub fn variant_dir(&self, variant: PolicyVariant) -> PathBuf {
        self.out_dir.join(variant.name())
    }

    pub fn checkpoint_path(&self, variant: PolicyVariant) -> PathBuf {
        self.variant_dir(variant).join("policy.json")
    }

    fn report_variants(&self) -> Vec<PolicyVariant> {
        if self.report.variants.is_empty() {
            vec![self.variant]
        } else {
            self.report.variants.clone()
        }
    }

    /// The oracle shared by training and evaluation; its embeddings depend
    /// only on the generation seed.
    pub fn oracle(&self) -> Result<OracleModel> {
        OracleModel::new(self.synth.clone())
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Writes the training and held-out datasets.
pub fn cmd_gen(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    ensure_dir(&config.out_dir)?;
    let train = generate_dataset(&config.synth, config.data.train)?;
    let eval = generate_dataset(&config.eval_synth(), config.data.eval)?;
    write_dataset(&config.train_path(), &train)?;
    write_dataset(&config.eval_path(), &eval)?;
    Ok(format!(
        "generated {} training and {} held-out utterances (seed {}) in {}",
        train.len(),
        eval.len(),
        config.synth.rng_seed,
        config.out_dir.display()
    ))
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let dataset = read_dataset(&config.train_path())?;
    let oracle = config.oracle()?;
    let variant = config.variant;
    let train_config = TrainConfig {
        variant,
        ..config.train.clone()
    };
    let mut msg = String::new();
    if variant.uses_alignment() && !dataset.iter().any(|u| u.aligned) {
        let _ = writeln!(
            msg,
            "warning: {variant} trains without any aligned utterance; alignment term is 0"
        );
    }
    let report = train(
        &dataset,
        &oracle,
        &config.policy_config(variant),
        &train_config,
        &config.losses,
    )?;
    if report.align_warning && msg.is_empty() && variant.uses_alignment() {
        let _ = writeln!(msg, "warning: some {variant} batches had no aligned example");
    }
    let dir = config.variant_dir(variant);
    ensure_dir(&dir)?;
    report.params.save(&config.checkpoint_path(variant))?;
    write_training_csv(&dir.join("training.csv"), &report.records)?;
    let last = report.records.last().map_or(f64::NAN, |r| r.loss_total);
    let _ = write!(
        msg,
        "trained {variant} for {} steps, final loss {last:.6}; checkpoint {}",
        report.records.len(),
        config.checkpoint_path(variant).display()
    );
    Ok(msg)
}

struct Loaded {
    params: PolicyParams,
    eval: Vec<Utterance>,
    oracle: OracleModel,
}

fn load_for_inference(config: &ExperimentConfig, variant: PolicyVariant) -> Result<Loaded> {
    let params = PolicyParams::load(&config.checkpoint_path(variant))?;
    if params.config.use_time_embedding != variant.uses_time_embedding() {
        return Err(LabError::config(
            "variant",
            format!("checkpoint time embedding does not match {variant}"),
        ));
    }
    Ok(Loaded {
        params,
        eval: read_dataset(&config.eval_path())?,
        oracle: config.oracle()?,
    })
}

/// Streams the held-out set at `stream.alpha`.
pub fn cmd_simulate(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let variant = config.variant;
    let l = load_for_inference(config, variant)?;
    let policy = ThresholdPolicy {
        params: &l.params,
        variant,
        alpha: config.stream.alpha,
    };
    let logs = simulate_corpus(&l.oracle, &policy, &l.eval, &config.stream)?;
    write_logs(&config.variant_dir(variant).join("logs.jsonl"), &logs)?;
    let p = corpus_point(config.stream.alpha, &logs, &l.eval)?;
    Ok(format!(
        "{variant} alpha {}: LAAL {:.4} s, BLEU {:.2}, read loops {:.1}%",
        p.alpha, p.mean_laal_s, p.quality, p.read_loop_pct
    ))
}

pub fn cmd_sweep(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let variant = config.variant;
    let l = load_for_inference(config, variant)?;
    let alphas = if config.alphas.is_empty() {
        quantile_alphas(
            &l.oracle,
            &l.params,
            variant,
            &l.eval,
            &config.stream,
            config.alpha_count,
        )?
    } else {
        config.alphas.clone()
    };
    let results = sweep_params(&l.oracle, &l.params, &l.eval, variant, &alphas, &config.stream)?;
    let dir = config.variant_dir(variant);
    let log_dir = dir.join("logs");
    ensure_dir(&log_dir)?;
    for (i, r) in results.iter().enumerate() {
        write_logs(&log_dir.join(format!("alpha_{i:02}.jsonl")), &r.logs)?;
    }
    let points: Vec<ParetoPoint> = results.iter().map(|r| r.point).collect();
    write_pareto_csv(&dir.join("pareto.csv"), &points)?;
    let (lo, hi) = latency_range(&points);
    Ok(format!(
        "{variant}: {} operating points, LAAL range [{lo:.4}, {hi:.4}] s",
        points.len()
    ))
}

/// Quality of decoding every token with the full source available.
pub fn offline_quality(oracle: &OracleModel, dataset: &[Utterance], stream: &StreamConfig) -> Result<f64> {
    let always_read = OracleGainPolicy {
        alpha: f64::NEG_INFINITY,
    };
    let logs = simulate_corpus(oracle, &always_read, dataset, stream)?;
    Ok(corpus_point(f64::NEG_INFINITY, &logs, dataset)?.quality)
}

/// The latency range every variant's sweep covers, floored at zero.
pub fn common_band(sweeps: &[&[ParetoPoint]]) -> Result<LatencyBand> {
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for pts in sweeps {
        let (a, b) = latency_range(pts);
        lo = lo.max(a);
        hi = hi.min(b);
    }
    if !(lo < hi) {
        return Err(LabError::Metric(format!(
            "sweeps share no latency range (best overlap [{lo}, {hi}])"
        )));
    }
    Ok(LatencyBand { x: lo, y: hi })
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub variant: PolicyVariant,
    pub nose: f64,
    pub bins_alpha: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub band: LatencyBand,
    pub offline_quality: f64,
    pub variants: Vec<VariantReport>,
}

pub fn cmd_report(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    let variants = config.report_variants();
    let eval = read_dataset(&config.eval_path())?;
    let oracle = config.oracle()?;
    let mut sweeps = Vec::with_capacity(variants.len());
    for &v in &variants {
        sweeps.push(read_pareto_csv(&config.variant_dir(v).join("pareto.csv"))?);
    }
    let band = match config.report.band {
        Some(b) => b,
        None => common_band(&sweeps.iter().map(Vec::as_slice).collect::<Vec<_>>())?,
    };
    let offline = match config.report.offline_quality {
        Some(q) => q,
        None => offline_quality(&oracle, &eval, &config.stream)?,
    };
    let mut out = Vec::with_capacity(variants.len());
    for (&v, points) in variants.iter().zip(&sweeps) {
        let dir = config.variant_dir(v);
        let value = nose(points, offline, band)?;
        write_nose_csv(&dir.join("nose.csv"), band, value)?;

        let center = 0.5 * (band.x + band.y);
        let (idx, chosen) = points
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1.mean_laal_s - center)
                    .abs()
                    .total_cmp(&(b.1.mean_laal_s - center).abs())
            })
            .expect("nose checked for points");
        let logs = read_logs(&dir.join("logs").join(format!("alpha_{idx:02}.jsonl")))?;
        let bins = latency_vs_position(&logs, &eval, config.report.bins)?;
        write_latency_bins_csv(&dir.join("latency_bins.csv"), &bins)?;
        out.push(VariantReport {
            variant: v,
            nose: value,
            bins_alpha: chosen.alpha,
        });
    }
    write_info_gain_grid(
        &config.out_dir.join("info_gain_grid.csv"),
        &oracle,
        &eval,
        config.report.grid_utterance,
    )?;

    let report = Report {
        band,
        offline_quality: offline,
        variants: out,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| LabError::io(&config.out_dir, e.into()))?;
    write_text(&config.out_dir.join("report.json"), &(json + "\n"))?;

    let mut msg = format!("band [{:.4}, {:.4}] s, offline BLEU {offline:.2}", band.x, band.y);
    for r in &report.variants {
        let _ = write!(msg, "\n{}: NoSE {:.4}", r.variant, r.nose);
    }
    Ok(msg)
}

/// Exact information gain of one utterance over the frame grid, one row per
/// `(t, n)`.
pub fn write_info_gain_grid(
    path: &Path,
    oracle: &OracleModel,
    dataset: &[Utterance],
    index: usize,
) -> Result<()> {
    let utt = dataset.get(index).ok_or(LabError::Index {
        index,
        len: dataset.len(),
    })?;
    let mut w = csv::Writer::from_path(path).map_err(|e| LabError::io(path, e.into()))?;
    let err = |e: csv::Error| LabError::io(path, e.into());
    w.write_record(["utt_id", "t_s", "n", "token", "t_star_s", "info_gain"])
        .map_err(err)?;
    for k in 0..=oracle.config.frame_count(utt) {
        let t = oracle.config.frame_time(k).min(utt.duration_s);
        for n in 0..utt.len() {
            let gain = oracle.true_info_gain(utt, t, n)?;
            w.serialize((&utt.id, t, n, utt.target_tokens[n], utt.boundaries_s[n], gain))
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| LabError::io(path, e))
}
