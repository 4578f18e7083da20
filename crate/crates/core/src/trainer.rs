//! Policy training against oracle labels.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::losses::{align_target, total_loss, LabeledExample, LossBatch, LossTerms, LossWeights};
use crate::math::mix64;
use crate::metrics::spearman;
use crate::policy::{Gradient, PolicyConfig, PolicyInput, PolicyParams, PolicyVariant};
use crate::synth::{generate_dataset, OracleModel, SynthConfig, Utterance};

/// Grid from which truncation times are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TimeSampling {
    /// Every frame of the utterance after the first.
    #[default]
    Frames,
    /// Chunk boundaries as seen during streaming.
    Chunks { chunk_ms: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: PolicyVariant,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub samples_per_utterance: usize,
    pub t_grid: TimeSampling,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: PolicyVariant::Reina,
            batch_size: 256,
            steps: 5000,
            lr: 1e-3,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 100,
            samples_per_utterance: 4,
            t_grid: TimeSampling::Frames,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(LabError::config("batch_size", "must be at least 2"));
        }
        if self.steps < 1 {
            return Err(LabError::config("steps", "must be at least 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(LabError::config("lr", "must be finite and nonnegative"));
        }
        if !self.adam_betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(LabError::config("adam_betas", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(LabError::config("adam_eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(LabError::config("weight_decay", "must be nonnegative"));
        }
        if self.samples_per_utterance < 1 {
            return Err(LabError::config("samples_per_utterance", "must be at least 1"));
        }
        if let TimeSampling::Chunks { chunk_ms } = self.t_grid {
            if !(chunk_ms > 0.0) {
                return Err(LabError::config("t_grid", "chunk_ms must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_cov: f64,
    pub loss_mono: f64,
    pub loss_l2: f64,
    pub loss_align: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub params: PolicyParams,
    /// Some step requested the alignment term but saw no aligned example.
    pub align_warning: bool,
}

fn time_grid(oracle: &OracleModel, utt: &Utterance, sampling: TimeSampling) -> Vec<f64> {
    match sampling {
        TimeSampling::Frames => (1..=oracle.config.frame_count(utt))
            .map(|k| oracle.config.frame_time(k))
            .collect(),
        TimeSampling::Chunks { chunk_ms } => {
            let chunk = chunk_ms / 1000.0;
            let count = (utt.duration_s / chunk - 1e-9).ceil().max(1.0) as usize;
            (1..=count)
                .map(|j| (j as f64 * chunk).min(utt.duration_s))
                .collect()
        }
    }
}

/// Builds the labeled example for `(utt, t, n)`.
pub fn label_example(oracle: &OracleModel, utt: &Utterance, t: f64, n: usize) -> Result<LabeledExample> {
    let next_features = if n + 1 < utt.len() {
        Some(oracle.oracle_features(utt, t, n + 1)?)
    } else {
        None
    };
    Ok(LabeledExample {
        features: oracle.oracle_features(utt, t, n)?,
        t_audio: t,
        token_index: n,
        label_partial_logp: oracle.correct_token_prob(utt, t, n)?.ln(),
        label_full_logp: oracle.correct_token_prob(utt, utt.duration_s, n)?.ln(),
        t_star: utt.aligned.then(|| utt.boundaries_s[n]),
        aligned: utt.aligned,
        next_features,
    })
}

/// Draws `batch_size` examples. Each visit to an utterance takes up to
/// `samples_per_utterance` distinct `(t, n)` cells from its grid.
pub fn sample_batch(
    dataset: &[Utterance],
    oracle: &OracleModel,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LabeledExample>> {
    if dataset.is_empty() {
        return Err(LabError::config("dataset", "must not be empty"));
    }
    let mut out = Vec::with_capacity(config.batch_size);
    while out.len() < config.batch_size {
        let utt = &dataset[rng.random_range(0..dataset.len())];
        let times = time_grid(oracle, utt, config.t_grid);
        let cells = times.len() * utt.len();
        let take = config
            .samples_per_utterance
            .min(config.batch_size - out.len())
            .min(cells);
        for cell in index::sample(rng, cells, take) {
            let (n, k) = (cell / times.len(), cell % times.len());
            out.push(label_example(oracle, utt, times[k], n)?);
        }
    }
    Ok(out)
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    fn new(n: usize, config: &TrainConfig) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: config.adam_betas[0],
            beta2: config.adam_betas[1],
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            *p -= lr * (update + self.weight_decay * *p);
        }
    }
}

/// Loss terms and the exact parameter gradient for one batch.
pub fn loss_and_gradient(
    params: &PolicyParams,
    batch: &[LabeledExample],
    variant: PolicyVariant,
    weights: &LossWeights,
) -> Result<(LossTerms, Gradient)> {
    let main: Vec<PolicyInput> = batch
        .iter()
        .map(|e| PolicyInput::new(e.features.clone(), e.t_audio))
        .collect();
    let next_idx: Vec<usize> = (0..batch.len())
        .filter(|&i| batch[i].next_features.is_some())
        .collect();
    let next: Vec<PolicyInput> = next_idx
        .iter()
        .map(|&i| {
            let e = &batch[i];
            PolicyInput::new(e.next_features.clone().expect("filtered"), e.t_audio)
        })
        .collect();

    let main_trace = params.forward_traced(&main, variant)?;
    let next_trace = params.forward_traced(&next, variant)?;
    let mut q_next = vec![None; batch.len()];
    for (j, &i) in next_idx.iter().enumerate() {
        q_next[i] = Some(next_trace.outputs[j]);
    }
    let labels: Vec<f64> = batch.iter().map(LabeledExample::cov_label).collect();
    let targets: Vec<f64> = batch
        .iter()
        .map(|e| {
            e.t_star
                .map_or(0.5, |ts| align_target(e.t_audio, ts, weights.tau))
        })
        .collect();
    let mask: Vec<bool> = batch.iter().map(|e| e.aligned && e.t_star.is_some()).collect();

    let out = total_loss(
        variant,
        &LossBatch {
            q: &main_trace.outputs,
            labels: &labels,
            q_next: &q_next,
            align_targets: &targets,
            align_mask: &mask,
        },
        weights,
    )?;

    let mut grad = Gradient(vec![0.0; params.len()]);
    params.backward_traced(&main_trace, &out.grad_q, &mut grad)?;
    let upstream_next: Vec<f64> = next_idx.iter().map(|&i| out.grad_q_next[i]).collect();
    params.backward_traced(&next_trace, &upstream_next, &mut grad)?;
    Ok((out.terms, grad))
}

fn check_finite(terms: &LossTerms, grad_norm: f64, step: usize) -> Result<()> {
    for (term, v) in [
        ("cov", terms.cov),
        ("mono", terms.mono),
        ("l2", terms.l2),
        ("align", terms.align),
        ("total", terms.total),
        ("grad_norm", grad_norm),
    ] {
        if !v.is_finite() {
            return Err(LabError::NonFinite { term, step });
        }
    }
    Ok(())
}

pub fn train(
    dataset: &[Utterance],
    oracle: &OracleModel,
    policy_config: &PolicyConfig,
    config: &TrainConfig,
    weights: &LossWeights,
) -> Result<TrainReport> {
    config.validate()?;
    weights.validate()?;
    if policy_config.input_dim != oracle.config.feature_dim {
        return Err(LabError::config(
            "input_dim",
            format!(
                "policy expects {} features, oracle emits {}",
                policy_config.input_dim, oracle.config.feature_dim
            ),
        ));
    }
    let variant = config.variant;
    let mut params = PolicyParams::init(policy_config.clone(), mix64(config.rng_seed ^ 0x1417))?;
    if variant.uses_time_embedding() != params.config.use_time_embedding {
        return Err(LabError::config(
            "use_time_embedding",
            format!(
                "{variant} requires use_time_embedding = {}",
                variant.uses_time_embedding()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut adam = AdamW::new(params.len(), config);
    let mut records = Vec::with_capacity(config.steps);
    let mut align_warning = false;

    for step in 1..=config.steps {
        let batch = sample_batch(dataset, oracle, config, &mut rng)?;
        let (terms, grad) = loss_and_gradient(&params, &batch, variant, weights)?;
        let grad_norm = grad.norm();
        check_finite(&terms, grad_norm, step)?;
        align_warning |= terms.align_empty;
        records.push(StepRecord {
            step,
            loss_total: terms.total,
            loss_cov: terms.cov,
            loss_mono: terms.mono,
            loss_l2: terms.l2,
            loss_align: terms.align,
            grad_norm,
        });
        let lr = if config.warmup_steps > 0 {
            config.lr * (step as f64 / config.warmup_steps as f64).min(1.0)
        } else {
            config.lr
        };
        adam.step(&mut params.values, &grad.0, lr);
    }
    if !params.is_finite() {
        return Err(LabError::NonFinite {
            term: "params",
            step: config.steps,
        });
    }
    Ok(TrainReport {
        records,
        params,
        align_warning,
    })
}

pub fn write_training_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LabError::io(path, e.into()))?;
    for r in records {
        w.serialize(r).map_err(|e| LabError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

/// Worst relative disagreement between the analytic gradient of the full
/// objective and central finite differences over 128 random coordinates.
/// Parameter coordinates probed by [`grad_check`].
pub const GRAD_CHECK_COORDS: usize = 128;

/// Finite-difference comparison of the end-to-end loss gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub coords: usize,
    /// Coordinates whose gradient exceeds the absolute floor; only these
    /// enter `max_rel_error`.
    pub compared: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheck {
    pub const ABS_FLOOR: f64 = 1e-6;

    /// Every coordinate within `rel_tol` relative or the absolute floor.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }
}

pub fn grad_check(
    policy_config: &PolicyConfig,
    weights: &LossWeights,
    variant: PolicyVariant,
    seed: u64,
) -> Result<GradCheck> {
    let synth = SynthConfig {
        feature_dim: policy_config.input_dim,
        ambiguity_prob: 0.3,
        aligned_prob: 0.6,
        rng_seed: seed,
        ..SynthConfig::default()
    };
    let dataset = generate_dataset(&synth, 8)?;
    let oracle = OracleModel::new(synth)?;
    let mut config = policy_config.clone();
    config.use_time_embedding = variant.uses_time_embedding();
    config.time_embed_dim = config.input_dim;
    let mut params = PolicyParams::init(config, mix64(seed))?;
    let train_config = TrainConfig {
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x9c));
    let batch = sample_batch(&dataset, &oracle, &train_config, &mut rng)?;
    let (_, grad) = loss_and_gradient(&params, &batch, variant, weights)?;

    let h = 1e-5;
    let mut report = GradCheck {
        coords: 0,
        compared: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for i in index::sample(&mut rng, params.len(), GRAD_CHECK_COORDS.min(params.len())) {
        let orig = params.values[i];
        params.values[i] = orig + h;
        let up = loss_and_gradient(&params, &batch, variant, weights)?.0.total;
        params.values[i] = orig - h;
        let down = loss_and_gradient(&params, &batch, variant, weights)?.0.total;
        params.values[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let diff = (fd - grad.0[i]).abs();
        let scale = fd.abs().max(grad.0[i].abs());
        report.coords += 1;
        report.max_abs_error = report.max_abs_error.max(diff);
        if scale > GradCheck::ABS_FLOOR {
            report.compared += 1;
            report.max_rel_error = report.max_rel_error.max(diff / scale);
        } else if diff > GradCheck::ABS_FLOOR {
            report.max_rel_error = f64::INFINITY;
        }
    }
    Ok(report)
}

/// Spearman correlation between the policy score and the exact gain over the
/// full frame grid of `dataset`.
pub fn gain_correlation(
    params: &PolicyParams,
    variant: PolicyVariant,
    oracle: &OracleModel,
    dataset: &[Utterance],
) -> Result<f64> {
    let mut q = Vec::new();
    let mut gain = Vec::new();
    for utt in dataset {
        for k in 1..=oracle.config.frame_count(utt) {
            let t = oracle.config.frame_time(k);
            for n in 0..utt.len() {
                let input = PolicyInput::new(oracle.oracle_features(utt, t, n)?, t);
                q.push(params.forward(&input, variant)?);
                gain.push(oracle.true_info_gain(utt, t, n)?);
            }
        }
    }
    spearman(&q, &gain)
}
