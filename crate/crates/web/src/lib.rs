//! Browser bindings: time embeddings, the exact information-gain surface of
//! one utterance, and latency-quality curves of reference policies.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use simulpolicy::metrics::{corpus_point, ParetoPoint};
use simulpolicy::policy::time_embedding as embed;
use simulpolicy::stream::{simulate_corpus, wait_k_policy, OracleGainPolicy, StreamConfig};
use simulpolicy::synth::{generate_dataset, OracleModel, SynthConfig};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn synth(seed: u64, ambiguity_prob: f64) -> SynthConfig {
    SynthConfig {
        rng_seed: seed,
        ambiguity_prob,
        ..SynthConfig::default()
    }
}

#[wasm_bindgen]
pub fn time_embedding(t_audio: f64, dim: usize, base: f64) -> Result<Vec<f64>, JsError> {
    embed(t_audio, dim, base).map_err(js_err)
}

#[derive(Serialize)]
struct Grid {
    utt_id: String,
    duration_s: f64,
    boundaries_s: Vec<f64>,
    ambiguous: Vec<bool>,
    times_s: Vec<f64>,
    /// `gain[n][k]` at `times_s[k]`.
    gain: Vec<Vec<f64>>,
}

/// Exact information gain over the frame grid for the first utterance drawn
/// with `seed`, as JSON.
#[wasm_bindgen]
pub fn info_gain_grid(seed: u64, ambiguity_prob: f64) -> Result<String, JsError> {
    let config = synth(seed, ambiguity_prob);
    let utt = generate_dataset(&config, 1).map_err(js_err)?.remove(0);
    let oracle = OracleModel::new(config).map_err(js_err)?;
    let times_s: Vec<f64> = (0..=oracle.config.frame_count(&utt))
        .map(|k| oracle.config.frame_time(k).min(utt.duration_s))
        .collect();
    let gain = (0..utt.len())
        .map(|n| {
            times_s
                .iter()
                .map(|&t| oracle.true_info_gain(&utt, t, n))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(js_err)?;
    let grid = Grid {
        utt_id: utt.id.clone(),
        duration_s: utt.duration_s,
        boundaries_s: utt.boundaries_s.clone(),
        ambiguous: utt.ambiguous_mask.clone(),
        times_s,
        gain,
    };
    serde_json::to_string(&grid).map_err(js_err)
}

#[derive(Serialize)]
struct Curves {
    oracle: Vec<ParetoPoint>,
    wait_k: Vec<ParetoPoint>,
}

/// Latency-quality points of the calibrated-gain threshold policy and of
/// wait-k over `count` utterances, as JSON. Wait-k points carry `k` in the
/// `alpha` field.
#[wasm_bindgen]
pub fn reference_curves(
    seed: u64,
    count: usize,
    ambiguity_prob: f64,
    chunk_ms: f64,
) -> Result<String, JsError> {
    let config = synth(seed, ambiguity_prob);
    let dataset = generate_dataset(&config, count).map_err(js_err)?;
    let oracle = OracleModel::new(config).map_err(js_err)?;
    let stream = StreamConfig {
        chunk_ms,
        ..StreamConfig::default()
    };
    let mut curves = Curves {
        oracle: Vec::new(),
        wait_k: Vec::new(),
    };
    for &alpha in &[0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0] {
        let logs =
            simulate_corpus(&oracle, &OracleGainPolicy { alpha }, &dataset, &stream).map_err(js_err)?;
        curves
            .oracle
            .push(corpus_point(alpha, &logs, &dataset).map_err(js_err)?);
    }
    for k in 0..=12 {
        let logs = simulate_corpus(&oracle, &wait_k_policy(k), &dataset, &stream).map_err(js_err)?;
        curves
            .wait_k
            .push(corpus_point(k as f64, &logs, &dataset).map_err(js_err)?);
    }
    serde_json::to_string(&curves).map_err(js_err)
}
