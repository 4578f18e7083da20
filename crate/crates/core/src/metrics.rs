//! Latency and quality metrics over emission logs.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::stream::{detect_read_loop, EmissionLog};
use crate::synth::Utterance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub alpha: f64,
    pub mean_laal_s: f64,
    /// Corpus BLEU.
    pub quality: f64,
    pub read_loop_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBand {
    pub x: f64,
    pub y: f64,
}

impl LatencyBand {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        let band = LatencyBand { x, y };
        band.validate()?;
        Ok(band)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x >= 0.0 && self.x < self.y && self.y.is_finite()) {
            return Err(LabError::config(
                "band",
                format!("need 0 <= x < y, got [{}, {}]", self.x, self.y),
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.y - self.x
    }
}

/// Length-adaptive average lagging of one log, in seconds.
pub fn laal(log: &EmissionLog, ref_len: usize) -> Result<f64> {
    if log.is_empty() {
        return Err(LabError::Metric(format!("laal: empty log for {}", log.utt_id)));
    }
    if ref_len == 0 {
        return Err(LabError::Metric("laal: ref_len must be at least 1".into()));
    }
    let t = log.duration_s;
    if !(t > 0.0) {
        return Err(LabError::Metric(format!(
            "laal: source duration {t} for {}",
            log.utt_id
        )));
    }
    let gamma = log.len().max(ref_len) as f64 / t;
    let tau = log
        .delays_s
        .iter()
        .position(|&d| d >= t)
        .map_or(log.len(), |i| i + 1);
    let lag: f64 = log.delays_s[..tau]
        .iter()
        .enumerate()
        .map(|(i, &d)| d - i as f64 / gamma)
        .sum();
    Ok(lag / tau as f64)
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 on token ids, on a 0..100 scale.
pub fn bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(LabError::Metric(format!(
            "bleu: {} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.is_empty() {
        return Err(LabError::Metric("bleu: no references".into()));
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision = 0.0;
    for n in 1..=4 {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matched += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            total += h.len().saturating_sub(n - 1);
        }
        let p = if n == 1 {
            if matched == 0 {
                return Ok(0.0);
            }
            matched as f64 / total as f64
        } else if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_precision += p.ln() / 4.0;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_precision.exp())
}

/// Upper envelope of the non-dominated points as (latency, quality) vertices
/// sorted by latency.
pub fn pareto_envelope(points: &[ParetoPoint]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<(f64, f64)> = points.iter().map(|p| (p.mean_laal_s, p.quality)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut env: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for (l, q) in sorted {
        if env.last().is_none_or(|&(_, best)| q > best) {
            env.push((l, q));
        }
    }
    env
}

/// Piecewise-linear interpolation; outside the vertex range the nearest end
/// value is held.
pub fn interpolate(vertices: &[(f64, f64)], at: f64) -> f64 {
    match vertices {
        [] => f64::NAN,
        [(_, q)] => *q,
        _ => {
            if at <= vertices[0].0 {
                return vertices[0].1;
            }
            for w in vertices.windows(2) {
                let ((l0, q0), (l1, q1)) = (w[0], w[1]);
                if at <= l1 {
                    if l1 == l0 {
                        return q1.max(q0);
                    }
                    return q0 + (q1 - q0) * (at - l0) / (l1 - l0);
                }
            }
            vertices[vertices.len() - 1].1
        }
    }
}

/// Band-averaged envelope quality relative to offline quality.
pub fn nose(points: &[ParetoPoint], offline_quality: f64, band: LatencyBand) -> Result<f64> {
    band.validate()?;
    if points.len() < 2 {
        return Err(LabError::Metric(format!(
            "nose: need at least 2 points, got {}",
            points.len()
        )));
    }
    if !(offline_quality > 0.0) {
        return Err(LabError::Metric(format!(
            "nose: offline quality {offline_quality}"
        )));
    }
    let (lo, hi) = latency_range(points);
    if band.x < lo || band.y > hi {
        return Err(LabError::Metric(format!(
            "nose: band [{}, {}] outside achievable latency range [{lo}, {hi}]",
            band.x, band.y
        )));
    }
    let env = pareto_envelope(points);
    let mut knots = vec![band.x];
    knots.extend(env.iter().map(|v| v.0).filter(|&l| l > band.x && l < band.y));
    knots.push(band.y);
    let area: f64 = knots
        .windows(2)
        .map(|w| 0.5 * (w[1] - w[0]) * (interpolate(&env, w[0]) + interpolate(&env, w[1])))
        .sum();
    Ok(area / band.width() / offline_quality)
}

/// Smallest and largest mean LAAL over `points`.
pub fn latency_range(points: &[ParetoPoint]) -> (f64, f64) {
    points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.mean_laal_s), hi.max(p.mean_laal_s))
        })
}

pub fn read_loop_pct(logs: &[EmissionLog]) -> f64 {
    if logs.is_empty() {
        return 0.0;
    }
    let loops = logs.iter().filter(|l| detect_read_loop(l)).count();
    100.0 * loops as f64 / logs.len() as f64
}

fn lookup<'a>(dataset: &'a [Utterance], id: &str) -> Result<&'a Utterance> {
    dataset
        .iter()
        .find(|u| u.id == id)
        .ok_or_else(|| LabError::Metric(format!("no utterance {id} in dataset")))
}

/// Corpus quality, mean LAAL and read-loop share of one threshold's logs.
pub fn corpus_point(alpha: f64, logs: &[EmissionLog], dataset: &[Utterance]) -> Result<ParetoPoint> {
    if logs.is_empty() {
        return Err(LabError::Metric("no emission logs".into()));
    }
    let mut hyps = Vec::with_capacity(logs.len());
    let mut refs = Vec::with_capacity(logs.len());
    let mut lag = 0.0;
    for log in logs {
        let utt = lookup(dataset, &log.utt_id)?;
        lag += laal(log, utt.len())?;
        hyps.push(log.tokens.clone());
        refs.push(utt.target_tokens.clone());
    }
    Ok(ParetoPoint {
        alpha,
        mean_laal_s: lag / logs.len() as f64,
        quality: bleu(&hyps, &refs)?,
        read_loop_pct: read_loop_pct(logs),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyBin {
    pub bin_center: f64,
    pub mean_latency_s: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub count: usize,
}

/// Emission lateness against the alignment boundary, bucketed by relative
/// token position. Empty bins are `None`.
pub fn latency_vs_position(
    logs: &[EmissionLog],
    dataset: &[Utterance],
    bins: usize,
) -> Result<Vec<Option<LatencyBin>>> {
    if bins == 0 {
        return Err(LabError::config("bins", "must be at least 1"));
    }
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for log in logs {
        let utt = lookup(dataset, &log.utt_id)?;
        let n = utt.len();
        for (i, &d) in log.delays_s.iter().enumerate().take(n) {
            let pos = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            let b = ((pos * bins as f64) as usize).min(bins - 1);
            buckets[b].push(d - utt.boundaries_s[i]);
        }
    }
    Ok(buckets
        .iter()
        .enumerate()
        .map(|(b, xs)| {
            if xs.is_empty() {
                return None;
            }
            let count = xs.len();
            let mean = xs.iter().sum::<f64>() / count as f64;
            let sd = if count > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
            } else {
                0.0
            };
            let half = 1.96 * sd / (count as f64).sqrt();
            Some(LatencyBin {
                bin_center: (b as f64 + 0.5) / bins as f64,
                mean_latency_s: mean,
                ci_low: mean - half,
                ci_high: mean + half,
                count,
            })
        })
        .collect())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(LabError::Metric(format!(
            "spearman: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(LabError::Metric("spearman: non-finite input".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let m = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - m) * (y - m);
        saa += (x - m) * (x - m);
        sbb += (y - m) * (y - m);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(LabError::Metric("spearman: constant input".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| LabError::io(path, e.into()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> LabError + '_ {
    move |e| LabError::io(path, e.into())
}

pub fn write_pareto_csv(path: &Path, points: &[ParetoPoint]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["alpha", "laal_s", "bleu", "read_loop_pct"])
        .map_err(csv_err(path))?;
    for p in points {
        w.serialize((p.alpha, p.mean_laal_s, p.quality, p.read_loop_pct))
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_pareto_csv(path: &Path) -> Result<Vec<ParetoPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| LabError::io(path, e.into()))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<(f64, f64, f64, f64)>().enumerate() {
        let (alpha, mean_laal_s, quality, read_loop_pct) = row.map_err(|e| LabError::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?;
        out.push(ParetoPoint {
            alpha,
            mean_laal_s,
            quality,
            read_loop_pct,
        });
    }
    Ok(out)
}

pub fn write_latency_bins_csv(path: &Path, bins: &[Option<LatencyBin>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["bin_center", "mean_latency_s", "ci_low", "ci_high", "count"])
        .map_err(csv_err(path))?;
    for b in bins.iter().flatten() {
        w.serialize((b.bin_center, b.mean_latency_s, b.ci_low, b.ci_high, b.count))
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn write_nose_csv(path: &Path, band: LatencyBand, value: f64) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["band_x", "band_y", "nose"])
        .map_err(csv_err(path))?;
    w.serialize((band.x, band.y, value)).map_err(csv_err(path))?;
    w.flush().map_err(|e| LabError::io(path, e))
}
