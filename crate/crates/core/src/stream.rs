//! Chunked streaming inference with thresholded READ/WRITE decisions.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::{corpus_point, ParetoPoint};
use crate::policy::{PolicyInput, PolicyParams, PolicyVariant};
use crate::synth::{OracleModel, Utterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub chunk_ms: f64,
    pub alpha: f64,
    /// Cap on emitted tokens; defaults to four times the reference length.
    pub max_tokens: Option<usize>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            chunk_ms: 250.0,
            alpha: 0.0,
            max_tokens: None,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chunk_ms > 0.0) || !self.chunk_ms.is_finite() {
            return Err(LabError::config("chunk_ms", "must be positive"));
        }
        if self.alpha.is_nan() {
            return Err(LabError::config("alpha", "must not be NaN"));
        }
        Ok(())
    }

    pub fn chunk_s(&self) -> f64 {
        self.chunk_ms / 1000.0
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        StreamConfig {
            alpha,
            ..self.clone()
        }
    }
}

/// Decoder position seen by a policy.
#[derive(Debug, Clone, Copy)]
pub struct StreamState<'a> {
    pub utt: &'a Utterance,
    /// Seconds of source consumed so far.
    pub t: f64,
    /// Zero-based index of the pending target token.
    pub n: usize,
    /// Chunks consumed so far, including the first.
    pub chunks_read: usize,
}

pub trait ReadPolicy {
    /// True to consume another chunk, false to emit the pending token.
    fn wants_read(&self, oracle: &OracleModel, state: &StreamState<'_>) -> Result<bool>;
}

/// READ iff the learned score exceeds `alpha`.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdPolicy<'a> {
    pub params: &'a PolicyParams,
    pub variant: PolicyVariant,
    pub alpha: f64,
}

impl ReadPolicy for ThresholdPolicy<'_> {
    fn wants_read(&self, oracle: &OracleModel, s: &StreamState<'_>) -> Result<bool> {
        let input = PolicyInput::new(oracle.oracle_features(s.utt, s.t, s.n)?, s.t);
        Ok(self.params.forward(&input, self.variant)? > self.alpha)
    }
}

/// READ iff the exact information gain exceeds `alpha`; a perfectly
/// calibrated reference policy.
#[derive(Debug, Clone, Copy)]
pub struct OracleGainPolicy {
    pub alpha: f64,
}

impl ReadPolicy for OracleGainPolicy {
    fn wants_read(&self, oracle: &OracleModel, s: &StreamState<'_>) -> Result<bool> {
        Ok(oracle.true_info_gain(s.utt, s.t, s.n)? > self.alpha)
    }
}

/// Fixed schedule: token `n` is written once `k + n` chunks have been read.
#[derive(Debug, Clone, Copy)]
pub struct WaitK {
    pub k: usize,
}

pub fn wait_k_policy(k: usize) -> WaitK {
    WaitK { k }
}

impl ReadPolicy for WaitK {
    fn wants_read(&self, _: &OracleModel, s: &StreamState<'_>) -> Result<bool> {
        Ok(s.chunks_read < self.k + s.n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionLog {
    pub utt_id: String,
    pub tokens: Vec<u32>,
    /// Seconds of source consumed when each token was written.
    pub delays_s: Vec<f64>,
    pub duration_s: f64,
    /// Per token: written after the source ran out, bypassing the policy.
    pub forced_tail: Vec<bool>,
    /// The token cap stopped decoding early.
    pub truncated: bool,
}

impl EmissionLog {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Whether nothing was written before the source was exhausted.
pub fn detect_read_loop(log: &EmissionLog) -> bool {
    log.delays_s.first().is_none_or(|&d| d >= log.duration_s)
}

pub fn simulate(
    oracle: &OracleModel,
    policy: &(impl ReadPolicy + ?Sized),
    utt: &Utterance,
    config: &StreamConfig,
) -> Result<EmissionLog> {
    config.validate()?;
    let n_ref = utt.len();
    let max_tokens = config.max_tokens.unwrap_or(4 * n_ref);
    if max_tokens < n_ref {
        return Err(LabError::config(
            "max_tokens",
            "must be at least the reference length",
        ));
    }
    let chunk = config.chunk_s();
    let total_chunks = (utt.duration_s / chunk - 1e-9).ceil().max(1.0) as usize;
    let time_at = |j: usize| {
        if j >= total_chunks {
            utt.duration_s
        } else {
            j as f64 * chunk
        }
    };

    let mut log = EmissionLog {
        utt_id: utt.id.clone(),
        tokens: Vec::with_capacity(n_ref),
        delays_s: Vec::with_capacity(n_ref),
        duration_s: utt.duration_s,
        forced_tail: Vec::with_capacity(n_ref),
        truncated: false,
    };
    let mut j = 1;
    let mut n = 0;
    while n < n_ref {
        if log.tokens.len() >= max_tokens {
            log.truncated = true;
            break;
        }
        let t = time_at(j);
        let exhausted = j >= total_chunks;
        if !exhausted {
            let state = StreamState {
                utt,
                t,
                n,
                chunks_read: j,
            };
            if policy.wants_read(oracle, &state)? {
                j += 1;
                continue;
            }
        }
        log.tokens.push(oracle.argmax_token(utt, t, n)?);
        log.delays_s.push(t);
        log.forced_tail.push(exhausted);
        n += 1;
    }
    Ok(log)
}

/// Runs `policy` over every utterance; logs come back in dataset order.
pub fn simulate_corpus<P: ReadPolicy + Sync + ?Sized>(
    oracle: &OracleModel,
    policy: &P,
    dataset: &[Utterance],
    config: &StreamConfig,
) -> Result<Vec<EmissionLog>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        dataset
            .par_iter()
            .map(|utt| simulate(oracle, policy, utt, config))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        dataset
            .iter()
            .map(|utt| simulate(oracle, policy, utt, config))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub point: ParetoPoint,
    pub logs: Vec<EmissionLog>,
}

/// One operating point per threshold, in the order the thresholds were given.
pub fn sweep<P, F>(
    oracle: &OracleModel,
    make_policy: F,
    dataset: &[Utterance],
    alphas: &[f64],
    config: &StreamConfig,
) -> Result<Vec<SweepResult>>
where
    P: ReadPolicy + Sync,
    F: Fn(f64) -> P,
{
    if alphas.is_empty() {
        return Err(LabError::config("alphas", "must not be empty"));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let policy = make_policy(alpha);
            let logs = simulate_corpus(oracle, &policy, dataset, &config.with_alpha(alpha))?;
            let point = corpus_point(alpha, &logs, dataset)?;
            Ok(SweepResult { point, logs })
        })
        .collect()
}

/// Threshold sweep of a trained policy head.
pub fn sweep_params(
    oracle: &OracleModel,
    params: &PolicyParams,
    dataset: &[Utterance],
    variant: PolicyVariant,
    alphas: &[f64],
    config: &StreamConfig,
) -> Result<Vec<SweepResult>> {
    sweep(
        oracle,
        |alpha| ThresholdPolicy {
            params,
            variant,
            alpha,
        },
        dataset,
        alphas,
        config,
    )
}

/// Thresholds at evenly spaced quantiles of the policy score over the
/// chunk-grid states of `dataset`, from most to least reading.
pub fn quantile_alphas(
    oracle: &OracleModel,
    params: &PolicyParams,
    variant: PolicyVariant,
    dataset: &[Utterance],
    config: &StreamConfig,
    count: usize,
) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(LabError::config("alphas", "count must be positive"));
    }
    let chunk = config.chunk_s();
    let mut scores = Vec::new();
    for utt in dataset {
        let total = (utt.duration_s / chunk - 1e-9).ceil().max(1.0) as usize;
        for j in 1..total {
            let t = j as f64 * chunk;
            for n in 0..utt.len() {
                let input = PolicyInput::new(oracle.oracle_features(utt, t, n)?, t);
                scores.push(params.forward(&input, variant)?);
            }
        }
    }
    if scores.is_empty() {
        return Err(LabError::config(
            "dataset",
            "no decision points on the chunk grid",
        ));
    }
    scores.sort_by(f64::total_cmp);
    Ok((0..count)
        .map(|i| {
            let p = (i as f64 + 0.5) / count as f64;
            scores[((p * scores.len() as f64) as usize).min(scores.len() - 1)]
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct LogRecord {
    utt_id: String,
    tokens: Vec<u32>,
    delays_s: Vec<f64>,
    #[serde(rename = "T")]
    duration_s: f64,
    forced_tail: Vec<bool>,
    read_loop: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    truncated: bool,
}

pub fn write_logs(path: &Path, logs: &[EmissionLog]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for log in logs {
        let rec = LogRecord {
            utt_id: log.utt_id.clone(),
            tokens: log.tokens.clone(),
            delays_s: log.delays_s.clone(),
            duration_s: log.duration_s,
            forced_tail: log.forced_tail.clone(),
            read_loop: detect_read_loop(log),
            truncated: log.truncated,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| LabError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_logs(path: &Path) -> Result<Vec<EmissionLog>> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| LabError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.delays_s.len() != rec.tokens.len() || rec.forced_tail.len() != rec.tokens.len() {
            return Err(LabError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "tokens, delays_s and forced_tail differ in length".into(),
            });
        }
        out.push(EmissionLog {
            utt_id: rec.utt_id,
            tokens: rec.tokens,
            delays_s: rec.delays_s,
            duration_s: rec.duration_s,
            forced_tail: rec.forced_tail,
            truncated: rec.truncated,
        });
    }
    Ok(out)
}
