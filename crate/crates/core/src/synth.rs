//! Synthetic utterances and the analytic translation oracle.
//!
//! Every target token `n` has a ground-truth boundary `t*_n`. The oracle's
//! probability of the correct next token follows a sigmoid ramp around that
//! boundary, so the information gain of waiting for the full source is known
//! in closed form at every `(t, n)`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::math::{fnv1a, mix64, sigmoid};

const EMBED_SALT: u64 = 0x5eed_0e4b_ed00_0001;
const NOISE_SALT: u64 = 0x5eed_0000_0a15_e002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub frame_ms: f64,
    pub tokens_per_utt_range: [usize; 2],
    pub mean_token_gap_s: f64,
    pub gap_jitter_s: f64,
    /// Silence after the last boundary before the source ends.
    pub tail_s: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub ramp_s: f64,
    pub ambiguity_prob: f64,
    /// Probability that an utterance carries usable alignment supervision.
    pub aligned_prob: f64,
    pub feature_dim: usize,
    /// Width of the per-token embedding before projection.
    pub embed_dim: usize,
    pub noise_std: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 50,
            frame_ms: 50.0,
            tokens_per_utt_range: [3, 8],
            mean_token_gap_s: 0.8,
            gap_jitter_s: 0.3,
            tail_s: 0.5,
            p_min: 0.005,
            p_max: 0.9,
            ramp_s: 0.15,
            ambiguity_prob: 0.0,
            aligned_prob: 1.0,
            feature_dim: 16,
            embed_dim: 4,
            noise_std: 0.05,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(LabError::config("vocab_size", "must be at least 2"));
        }
        if !(self.frame_ms > 0.0) || !self.frame_ms.is_finite() {
            return Err(LabError::config("frame_ms", "must be positive"));
        }
        let [lo, hi] = self.tokens_per_utt_range;
        if lo < 1 || hi < lo {
            return Err(LabError::config(
                "tokens_per_utt_range",
                format!("need 1 <= min <= max, got [{lo}, {hi}]"),
            ));
        }
        if !(self.mean_token_gap_s > 0.0) {
            return Err(LabError::config("mean_token_gap_s", "must be positive"));
        }
        if !(self.gap_jitter_s >= 0.0) || self.gap_jitter_s >= self.mean_token_gap_s {
            return Err(LabError::config(
                "gap_jitter_s",
                "must lie in [0, mean_token_gap_s)",
            ));
        }
        if !(self.tail_s >= 0.0) {
            return Err(LabError::config("tail_s", "must be nonnegative"));
        }
        if !(self.p_min > 0.0 && self.p_min < self.p_max && self.p_max < 1.0) {
            return Err(LabError::config(
                "p_min",
                format!("need 0 < p_min < p_max < 1, got {} / {}", self.p_min, self.p_max),
            ));
        }
        if !(self.ramp_s > 0.0) {
            return Err(LabError::config("ramp_s", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_prob) {
            return Err(LabError::config("ambiguity_prob", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.aligned_prob) {
            return Err(LabError::config("aligned_prob", "must lie in [0, 1]"));
        }
        if self.feature_dim == 0 {
            return Err(LabError::config("feature_dim", "must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(LabError::config("embed_dim", "must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(LabError::config("noise_std", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn frame_s(&self) -> f64 {
        self.frame_ms / 1000.0
    }

    /// Number of frames spanning `utt` (its duration is frame aligned).
    pub fn frame_count(&self, utt: &Utterance) -> usize {
        (utt.duration_s / self.frame_s()).round() as usize
    }

    /// Time of grid point `k`; `frame_time(frame_count) == duration_s`.
    pub fn frame_time(&self, k: usize) -> f64 {
        k as f64 * self.frame_s()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub duration_s: f64,
    #[serde(rename = "tokens")]
    pub target_tokens: Vec<u32>,
    pub boundaries_s: Vec<f64>,
    #[serde(rename = "ambiguous")]
    pub ambiguous_mask: Vec<bool>,
    pub aligned: bool,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.target_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_tokens.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.target_tokens.len();
        if n == 0 {
            return Err(LabError::config("tokens", format!("{}: empty", self.id)));
        }
        if self.boundaries_s.len() != n {
            return Err(LabError::Shape {
                expected: n,
                got: self.boundaries_s.len(),
            });
        }
        if self.ambiguous_mask.len() != n {
            return Err(LabError::Shape {
                expected: n,
                got: self.ambiguous_mask.len(),
            });
        }
        if self.boundaries_s.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(LabError::config(
                "boundaries_s",
                format!("{}: not strictly increasing", self.id),
            ));
        }
        if !(self.boundaries_s[n - 1] <= self.duration_s) {
            return Err(LabError::config(
                "duration_s",
                format!("{}: last boundary exceeds duration", self.id),
            ));
        }
        Ok(())
    }
}

pub fn generate_dataset(config: &SynthConfig, count: usize) -> Result<Vec<Utterance>> {
    config.validate()?;
    if count == 0 {
        return Err(LabError::config("count", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let [lo, hi] = config.tokens_per_utt_range;
    let frame_s = config.frame_s();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let n_tokens = rng.random_range(lo..=hi);
        let mut t = 0.0;
        let mut boundaries = Vec::with_capacity(n_tokens);
        let mut tokens = Vec::with_capacity(n_tokens);
        let mut ambiguous = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let jitter = if config.gap_jitter_s > 0.0 {
                rng.random_range(-config.gap_jitter_s..config.gap_jitter_s)
            } else {
                0.0
            };
            t += config.mean_token_gap_s + jitter;
            boundaries.push(t);
            tokens.push(rng.random_range(0..config.vocab_size as u32));
            ambiguous.push(rng.random_bool(config.ambiguity_prob));
        }
        let aligned = rng.random_bool(config.aligned_prob);
        let frames = ((t + config.tail_s) / frame_s - 1e-9).ceil().max(1.0) as usize;
        out.push(Utterance {
            id: format!("utt-{i:05}"),
            duration_s: config.frame_time(frames),
            target_tokens: tokens,
            boundaries_s: boundaries,
            ambiguous_mask: ambiguous,
            aligned,
        });
    }
    Ok(out)
}

/// The decomposed feature vector before projection.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureParts {
    pub embedding: Vec<f64>,
    pub evidence: f64,
    pub position: f64,
}

/// Analytic stand-in for a frozen translation model.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub config: SynthConfig,
    /// `vocab_size x embed_dim`, row-major.
    pub token_embeddings: Vec<f64>,
    /// `feature_dim x (embed_dim + 2)`, row-major.
    pub projection: Vec<f64>,
}

impl OracleModel {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(config.rng_seed ^ EMBED_SALT));
        let token_embeddings = (0..config.vocab_size * config.embed_dim)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let raw = config.embed_dim + 2;
        let scale = 1.0 / (raw as f64).sqrt();
        let projection = (0..config.feature_dim * raw)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Ok(OracleModel {
            config,
            token_embeddings,
            projection,
        })
    }

    fn check(&self, utt: &Utterance, t_s: f64, n: usize) -> Result<()> {
        if n >= utt.len() {
            return Err(LabError::Index {
                index: n,
                len: utt.len(),
            });
        }
        if !(0.0..=utt.duration_s).contains(&t_s) {
            return Err(LabError::config(
                "t_s",
                format!("{t_s} outside [0, {}] for {}", utt.duration_s, utt.id),
            ));
        }
        Ok(())
    }

    #[inline]
    fn ramp(&self, utt: &Utterance, t_s: f64, n: usize) -> f64 {
        sigmoid((t_s - utt.boundaries_s[n]) / self.config.ramp_s)
    }

    #[inline]
    fn prob_unchecked(&self, utt: &Utterance, t_s: f64, n: usize) -> f64 {
        let c = &self.config;
        c.p_min + (c.p_max - c.p_min) * self.ramp(utt, t_s, n)
    }

    /// Probability the oracle assigns to the correct token `s_{n+1}` (zero-based
    /// `n`) after hearing `t_s` seconds of source.
    pub fn correct_token_prob(&self, utt: &Utterance, t_s: f64, n: usize) -> Result<f64> {
        self.check(utt, t_s, n)?;
        Ok(self.prob_unchecked(utt, t_s, n))
    }

    /// Log-probabilities over the vocabulary; the residual mass is uniform over
    /// the incorrect tokens.
    pub fn oracle_logprob(&self, utt: &Utterance, t_s: f64, n: usize) -> Result<Vec<f64>> {
        let p = self.correct_token_prob(utt, t_s, n)?;
        let v = self.config.vocab_size;
        let rest = ((1.0 - p) / (v - 1) as f64).ln();
        let mut out = vec![rest; v];
        out[utt.target_tokens[n] as usize] = p.ln();
        Ok(out)
    }

    /// Greedy decode of the next token. Ties among the incorrect tokens go to
    /// the smallest id.
    pub fn argmax_token(&self, utt: &Utterance, t_s: f64, n: usize) -> Result<u32> {
        let p = self.correct_token_prob(utt, t_s, n)?;
        let v = self.config.vocab_size;
        let correct = utt.target_tokens[n];
        if p > (1.0 - p) / (v - 1) as f64 {
            Ok(correct)
        } else {
            Ok(if correct == 0 { 1 } else { 0 })
        }
    }

    /// `log P(correct | full source) - log P(correct | t_s seconds)`, in nats.
    pub fn true_info_gain(&self, utt: &Utterance, t_s: f64, n: usize) -> Result<f64> {
        self.check(utt, t_s, n)?;
        Ok(self.info_gain_unchecked(utt, t_s, n))
    }

    #[inline]
    pub(crate) fn info_gain_unchecked(&self, utt: &Utterance, t_s: f64, n: usize) -> f64 {
        self.prob_unchecked(utt, utt.duration_s, n).ln() - self.prob_unchecked(utt, t_s, n).ln()
    }

    pub fn feature_parts(&self, utt: &Utterance, t_s: f64, n: usize) -> Result<FeatureParts> {
        self.check(utt, t_s, n)?;
        let k = self.config.embed_dim;
        let tok = utt.target_tokens[n] as usize;
        let evidence = if utt.ambiguous_mask[n] {
            0.0
        } else {
            self.ramp(utt, t_s, n) + self.config.noise_std * self.noise(utt, t_s, n)
        };
        Ok(FeatureParts {
            embedding: self.token_embeddings[tok * k..(tok + 1) * k].to_vec(),
            evidence,
            position: n as f64 / utt.len() as f64,
        })
    }

    /// Projected feature vector standing in for the decoder hidden state. It
    /// carries no absolute time.
    pub fn oracle_features(&self, utt: &Utterance, t_s: f64, n: usize) -> Result<Vec<f64>> {
        let parts = self.feature_parts(utt, t_s, n)?;
        let raw_dim = self.config.embed_dim + 2;
        let mut raw = parts.embedding;
        raw.push(parts.evidence);
        raw.push(parts.position);
        Ok(self
            .projection
            .chunks_exact(raw_dim)
            .map(|row| row.iter().zip(&raw).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn noise(&self, utt: &Utterance, t_s: f64, n: usize) -> f64 {
        if self.config.noise_std == 0.0 {
            return 0.0;
        }
        let seed = mix64(self.config.rng_seed ^ NOISE_SALT)
            ^ mix64(fnv1a(utt.id.as_bytes()))
            ^ mix64(t_s.to_bits().rotate_left(17))
            ^ mix64(n as u64 + 0x1000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.sample(StandardNormal)
    }

    /// Earliest frame-grid time at which the exact gain has fallen to
    /// `gain_threshold` or below.
    pub fn oracle_write_boundary(&self, utt: &Utterance, n: usize, gain_threshold: f64) -> Result<f64> {
        self.check(utt, 0.0, n)?;
        let frames = self.config.frame_count(utt);
        for k in 0..=frames {
            let t = self.config.frame_time(k).min(utt.duration_s);
            if self.info_gain_unchecked(utt, t, n) <= gain_threshold {
                return Ok(t);
            }
        }
        Ok(utt.duration_s)
    }
}

pub fn write_dataset(path: &Path, dataset: &[Utterance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for utt in dataset {
        serde_json::to_writer(&mut w, utt).map_err(|e| LabError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Utterance>> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let utt: Utterance = serde_json::from_str(&line).map_err(|e| LabError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        utt.check()?;
        out.push(utt);
    }
    Ok(out)
}
