#![allow(clippy::type_complexity, clippy::neg_cmp_op_on_partial_ord)]

//! Acceptance criteria. Each criterion prints one PASS/FAIL line and the
//! process exits non-zero if any fails. Pass criterion numbers as arguments
//! to run a subset, e.g. `cargo test --test acceptance -- 2 6`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use simulpolicy::experiment::{
    cmd_gen, cmd_report, cmd_sweep, cmd_train, common_band, offline_quality, ExperimentConfig,
};
use simulpolicy::losses::{align_target, batch_normalize, bce_align_loss, cov_loss};
use simulpolicy::metrics::{bleu, laal, nose, LatencyBand, ParetoPoint};
use simulpolicy::policy::time_embedding;
use simulpolicy::stream::{
    quantile_alphas, simulate, simulate_corpus, sweep_params, EmissionLog, OracleGainPolicy, StreamConfig,
    ThresholdPolicy,
};
use simulpolicy::synth::generate_dataset;
use simulpolicy::trainer::{gain_correlation, grad_check, train, TrainConfig, GRAD_CHECK_COORDS};
use simulpolicy::{
    LossWeights, Objective, OracleModel, PolicyConfig, PolicyParams, PolicyVariant, SynthConfig,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut compared = usize::MAX;
    let mut runs = Vec::new();
    for variant in PolicyVariant::ALL {
        runs.push((variant, Objective::Covariance));
    }
    runs.push((PolicyVariant::Reina, Objective::Mse));
    for (variant, objective) in runs {
        let weights = LossWeights {
            objective,
            ..LossWeights::default()
        };
        let config = PolicyConfig::for_variant(16, variant);
        let check = grad_check(&config, &weights, variant, 2024).map_err(|e| e.to_string())?;
        ensure!(
            check.compared >= 100,
            "{variant}/{objective:?}: only {} coordinates compared",
            check.compared
        );
        ensure!(
            check.passes(1e-4),
            "{variant}/{objective:?}: max relative error {:.3e}",
            check.max_rel_error
        );
        worst = worst.max(check.max_rel_error);
        compared = compared.min(check.compared);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!(
        "max relative error {worst:.2e}, at least {compared} of {GRAD_CHECK_COORDS} coordinates compared per objective, 5 objectives, {secs:.1}s"
    ))
}

fn c2_fixtures() -> Outcome {
    let e = time_embedding(0.0, 16, 100.0).map_err(|e| e.to_string())?;
    ensure!(
        e.iter()
            .enumerate()
            .all(|(i, &v)| v == if i % 2 == 0 { 0.0 } else { 1.0 }),
        "time embedding at t=0: {e:?}"
    );
    let y = align_target(1.7, 1.7, 0.5);
    ensure!(y == 0.5, "align target at t*: {y}");
    let bn = batch_normalize(&[1.0, 2.0, 3.0], 1e-5).map_err(|e| e.to_string())?;
    ensure!(
        bn.iter()
            .zip([-1.22474, 0.0, 1.22474])
            .all(|(a, b)| close(*a, b, 1e-4)),
        "BN [1,2,3]: {bn:?}"
    );
    let cov = cov_loss(&[1.0, -1.0], &[2.0, 0.0], 1e-5).map_err(|e| e.to_string())?;
    ensure!(close(cov, 1.0, 1e-4), "cov fixture {cov}");
    let bce = bce_align_loss(&[0.0], &[0.5], &[true])
        .map_err(|e| e.to_string())?
        .value;
    ensure!(close(bce, std::f64::consts::LN_2, 1e-9), "BCE(0, 0.5) = {bce}");
    let log = EmissionLog {
        utt_id: "fixture".into(),
        tokens: vec![1, 2],
        delays_s: vec![1.0, 2.0],
        duration_s: 2.0,
        forced_tail: vec![false, true],
        truncated: false,
    };
    let lag = laal(&log, 2).map_err(|e| e.to_string())?;
    ensure!(lag == 1.0, "LAAL fixture {lag}");
    let b = bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4, 5]]).map_err(|e| e.to_string())?;
    ensure!(close(b, 77.88, 0.01), "BLEU fixture {b}");
    let pt = |l, q| ParetoPoint {
        alpha: 0.0,
        mean_laal_s: l,
        quality: q,
        read_loop_pct: 0.0,
    };
    let n = nose(
        &[pt(1.0, 20.0), pt(3.0, 40.0)],
        40.0,
        LatencyBand { x: 1.0, y: 3.0 },
    )
    .map_err(|e| e.to_string())?;
    ensure!(n == 0.75, "NoSE fixture {n}");
    Ok(format!("cov {cov:.6}, BCE {bce:.9}, BLEU {b:.4}, NoSE {n}"))
}

fn c3_oracle_correlation() -> Outcome {
    let start = Instant::now();
    let synth = SynthConfig {
        vocab_size: 50,
        ambiguity_prob: 0.0,
        rng_seed: 0,
        ..SynthConfig::default()
    };
    let train_set = generate_dataset(&synth, 200).map_err(|e| e.to_string())?;
    let held_out = generate_dataset(
        &SynthConfig {
            rng_seed: 1,
            ..synth.clone()
        },
        50,
    )
    .map_err(|e| e.to_string())?;
    let oracle = OracleModel::new(synth).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        steps: 5000,
        ..TrainConfig::default()
    };
    let report = train(
        &train_set,
        &oracle,
        &PolicyConfig::for_variant(16, PolicyVariant::Reina),
        &config,
        &LossWeights::default(),
    )
    .map_err(|e| e.to_string())?;
    let rho = gain_correlation(&report.params, PolicyVariant::Reina, &oracle, &held_out)
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(rho >= 0.8, "Spearman {rho:.4} < 0.8");
    ensure!(secs < 600.0, "took {secs:.0}s");
    Ok(format!("Spearman {rho:.4}, {secs:.1}s"))
}

const STUDY_SEEDS: [u64; 3] = [0, 1, 2];
const STUDY_RUNS: [(&str, PolicyVariant, Objective); 4] = [
    ("REINA", PolicyVariant::Reina, Objective::Covariance),
    ("REINA_TAN", PolicyVariant::ReinaTan, Objective::Covariance),
    ("REINA_SAN", PolicyVariant::ReinaSan, Objective::Covariance),
    ("REINA_MSE", PolicyVariant::Reina, Objective::Mse),
];

struct SeedStudy {
    seed: u64,
    offline: f64,
    band: LatencyBand,
    sweeps: BTreeMap<&'static str, Vec<ParetoPoint>>,
}

impl SeedStudy {
    fn nose(&self, run: &str) -> Result<f64, String> {
        nose(&self.sweeps[run], self.offline, self.band).map_err(|e| e.to_string())
    }
}

/// Ambiguous-data sweeps shared by the directional criteria: 200 training and
/// 100 held-out utterances per seed, default training, 10 score-quantile
/// thresholds per model.
fn study() -> &'static Result<Vec<SeedStudy>, String> {
    static STUDY: OnceLock<Result<Vec<SeedStudy>, String>> = OnceLock::new();
    STUDY.get_or_init(|| {
        STUDY_SEEDS
            .iter()
            .map(|&s| run_seed(s).map_err(|e| e.to_string()))
            .collect()
    })
}

fn run_seed(seed: u64) -> simulpolicy::Result<SeedStudy> {
    let synth = SynthConfig {
        ambiguity_prob: 0.3,
        rng_seed: seed,
        ..SynthConfig::default()
    };
    let train_set = generate_dataset(&synth, 200)?;
    let held_out = generate_dataset(
        &SynthConfig {
            rng_seed: seed + 1000,
            ..synth.clone()
        },
        100,
    )?;
    let oracle = OracleModel::new(synth)?;
    let stream = StreamConfig::default();
    let mut sweeps = BTreeMap::new();
    for (name, variant, objective) in STUDY_RUNS {
        let config = TrainConfig {
            variant,
            rng_seed: seed,
            ..TrainConfig::default()
        };
        let weights = LossWeights {
            objective,
            ..LossWeights::default()
        };
        let report = train(
            &train_set,
            &oracle,
            &PolicyConfig::for_variant(16, variant),
            &config,
            &weights,
        )?;
        let alphas = quantile_alphas(&oracle, &report.params, variant, &held_out, &stream, 10)?;
        let points = sweep_params(&oracle, &report.params, &held_out, variant, &alphas, &stream)?
            .into_iter()
            .map(|r| r.point)
            .collect();
        sweeps.insert(name, points);
    }
    let band = common_band(&sweeps.values().map(Vec::as_slice).collect::<Vec<_>>())?;
    Ok(SeedStudy {
        seed,
        offline: offline_quality(&oracle, &held_out, &stream)?,
        band,
        sweeps,
    })
}

/// Lowest-latency point reaching 99% of offline quality.
fn matched_quality_point(points: &[ParetoPoint], offline: f64) -> Option<ParetoPoint> {
    points
        .iter()
        .filter(|p| p.quality >= 0.99 * offline)
        .min_by(|a, b| a.mean_laal_s.total_cmp(&b.mean_laal_s))
        .copied()
}

fn c4_read_loops() -> Outcome {
    let study = study().as_ref().map_err(Clone::clone)?;
    let mut detail = Vec::new();
    let mut failures = Vec::new();
    for s in study {
        let reina = matched_quality_point(&s.sweeps["REINA"], s.offline);
        let tan = matched_quality_point(&s.sweeps["REINA_TAN"], s.offline);
        let (Some(reina), Some(tan)) = (reina, tan) else {
            failures.push(format!("seed {}: no point at 99% of offline quality", s.seed));
            continue;
        };
        if reina.read_loop_pct <= tan.read_loop_pct {
            failures.push(format!(
                "seed {}: REINA loops {:.1}% vs TAN {:.1}% at matched quality",
                s.seed, reina.read_loop_pct, tan.read_loop_pct
            ));
        }
        // High latency: the upper half of the latency band every model reaches.
        let mid = 0.5 * (s.band.x + s.band.y);
        let high: Vec<&ParetoPoint> = s.sweeps["REINA_SAN"]
            .iter()
            .filter(|p| p.mean_laal_s >= mid && p.mean_laal_s <= s.band.y)
            .collect();
        let san_worst = high.iter().map(|p| p.read_loop_pct).fold(0.0, f64::max);
        if high.is_empty() {
            failures.push(format!(
                "seed {}: no SAN point in [{mid:.2}, {:.2}] s",
                s.seed, s.band.y
            ));
        } else if san_worst > 0.0 {
            failures.push(format!(
                "seed {}: SAN loops up to {san_worst:.1}% at LAAL in [{mid:.2}, {:.2}] s",
                s.seed, s.band.y
            ));
        }
        detail.push(format!(
            "seed {}: REINA {:.1}% vs TAN {:.1}% loops, SAN high-latency max {san_worst:.1}%",
            s.seed, reina.read_loop_pct, tan.read_loop_pct
        ));
    }
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    Ok(detail.join("; "))
}

fn majority(study: &[SeedStudy], better: &str, worse: &str) -> Result<(usize, Vec<String>), String> {
    let mut wins = 0;
    let mut lines = Vec::new();
    for s in study {
        let (b, w) = (s.nose(better)?, s.nose(worse)?);
        if b >= w {
            wins += 1;
        }
        lines.push(format!("seed {} {better} {b:.4} vs {worse} {w:.4}", s.seed));
    }
    Ok((wins, lines))
}

fn c5_pareto_ordering() -> Outcome {
    let study = study().as_ref().map_err(Clone::clone)?;
    let need = study.len() / 2 + 1;
    let (tan_wins, tan_lines) = majority(study, "REINA_TAN", "REINA")?;
    let (san_wins, san_lines) = majority(study, "REINA_SAN", "REINA")?;
    let detail = format!(
        "TAN>=REINA {tan_wins}/{n}, SAN>=REINA {san_wins}/{n} [{}; {}]",
        tan_lines.join(", "),
        san_lines.join(", "),
        n = study.len()
    );
    ensure!(tan_wins >= need && san_wins >= need, "{detail}");
    Ok(detail)
}

fn c6_policy_extremes() -> Outcome {
    let synth = SynthConfig {
        tokens_per_utt_range: [2, 4],
        mean_token_gap_s: 0.5,
        gap_jitter_s: 0.2,
        rng_seed: 6,
        ..SynthConfig::default()
    };
    let dataset = generate_dataset(&synth, 30).map_err(|e| e.to_string())?;
    let oracle = OracleModel::new(synth).map_err(|e| e.to_string())?;
    let params = PolicyParams::init(PolicyConfig::for_variant(16, PolicyVariant::Reina), 6)
        .map_err(|e| e.to_string())?;
    let stream = StreamConfig::default();
    let chunk = stream.chunk_s();
    let policy = |alpha| ThresholdPolicy {
        params: &params,
        variant: PolicyVariant::Reina,
        alpha,
    };

    let read_all =
        simulate_corpus(&oracle, &policy(f64::NEG_INFINITY), &dataset, &stream).map_err(|e| e.to_string())?;
    for (log, utt) in read_all.iter().zip(&dataset) {
        let lag = laal(log, utt.len()).map_err(|e| e.to_string())?;
        ensure!(
            lag == utt.duration_s,
            "{}: LAAL {lag} != T {}",
            utt.id,
            utt.duration_s
        );
    }
    let pct = simulpolicy::metrics::read_loop_pct(&read_all);
    ensure!(pct == 100.0, "read loops {pct}% at alpha = -inf");

    let write_all =
        simulate_corpus(&oracle, &policy(f64::INFINITY), &dataset, &stream).map_err(|e| e.to_string())?;
    let mut schedules = 0usize;
    for (log, utt) in write_all.iter().zip(&dataset) {
        let got = laal(log, utt.len()).map_err(|e| e.to_string())?;
        let grid: Vec<f64> = {
            let count = (utt.duration_s / chunk - 1e-9).ceil().max(1.0) as usize;
            (1..=count)
                .map(|j| {
                    if j == count {
                        utt.duration_s
                    } else {
                        j as f64 * chunk
                    }
                })
                .collect()
        };
        let mut best = f64::INFINITY;
        let mut idx = vec![0usize; utt.len()];
        loop {
            let candidate = EmissionLog {
                delays_s: idx.iter().map(|&j| grid[j]).collect(),
                ..log.clone()
            };
            best = best.min(laal(&candidate, utt.len()).map_err(|e| e.to_string())?);
            schedules += 1;
            // next nondecreasing index vector
            let mut k = utt.len();
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                if idx[k] + 1 < grid.len() {
                    idx[k] += 1;
                    for i in k + 1..utt.len() {
                        idx[i] = idx[k];
                    }
                    break;
                }
                if k == 0 {
                    k = usize::MAX;
                    break;
                }
            }
            if k == usize::MAX {
                break;
            }
        }
        ensure!(got == best, "{}: LAAL {got} vs grid minimum {best}", utt.id);
    }
    Ok(format!(
        "30 utterances: alpha=-inf LAAL = T and 100% loops; alpha=+inf matches the minimum of {schedules} chunk schedules"
    ))
}

fn c7_calibrated_policy() -> Outcome {
    let synth = SynthConfig {
        rng_seed: 7,
        ..SynthConfig::default()
    };
    let dataset = generate_dataset(&synth, 20).map_err(|e| e.to_string())?;
    let oracle = OracleModel::new(synth).map_err(|e| e.to_string())?;
    let stream = StreamConfig::default();
    let chunk = stream.chunk_s();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for g in [0.02, 0.1, 0.5, 1.0, 2.5] {
        for utt in &dataset {
            let log =
                simulate(&oracle, &OracleGainPolicy { alpha: g }, utt, &stream).map_err(|e| e.to_string())?;
            for (n, &d) in log.delays_s.iter().enumerate() {
                let b = oracle
                    .oracle_write_boundary(utt, n, g)
                    .map_err(|e| e.to_string())?;
                ensure!(
                    (d - b).abs() <= chunk + 1e-12,
                    "{} token {n} at g={g}: emitted {d}, boundary {b}",
                    utt.id
                );
                worst = worst.max((d - b).abs());
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} emissions, max |d - boundary| = {worst:.3}s"))
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn pipeline(out: &Path) -> simulpolicy::Result<()> {
    let mut config = ExperimentConfig {
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    config.set_seed(8);
    config.data.train = 40;
    config.data.eval = 20;
    config.synth.ambiguity_prob = 0.3;
    config.train.steps = 300;
    config.train.batch_size = 64;
    config.report.variants = vec![PolicyVariant::Reina, PolicyVariant::ReinaSan];
    cmd_gen(&config)?;
    for v in [PolicyVariant::Reina, PolicyVariant::ReinaSan] {
        config.variant = v;
        cmd_train(&config)?;
        cmd_sweep(&config)?;
    }
    cmd_report(&config)?;
    Ok(())
}

fn c8_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(a.path()).map_err(|e| e.to_string())?;
    pipeline(b.path()).map_err(|e| e.to_string())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    ensure!(
        ta.keys().eq(tb.keys()),
        "file sets differ: {:?} vs {:?}",
        ta.keys().collect::<Vec<_>>(),
        tb.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &ta {
        ensure!(&tb[name] == bytes, "{name} differs between runs");
    }
    let bytes: usize = ta.values().map(Vec::len).sum();
    Ok(format!("{} files, {bytes} bytes identical", ta.len()))
}

fn c9_mse_ablation() -> Outcome {
    let study = study().as_ref().map_err(Clone::clone)?;
    let need = study.len() / 2 + 1;
    let (wins, lines) = majority(study, "REINA", "REINA_MSE")?;
    let detail = format!("covariance>=MSE {wins}/{} [{}]", study.len(), lines.join(", "));
    ensure!(wins >= need, "{detail}");
    Ok(detail)
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient correctness", c1_gradients),
        (2, "formula fixtures", c2_fixtures),
        (3, "oracle correlation", c3_oracle_correlation),
        (4, "read-loop pathology", c4_read_loops),
        (5, "pareto ordering", c5_pareto_ordering),
        (6, "policy extremes", c6_policy_extremes),
        (7, "calibrated policy", c7_calibrated_policy),
        (8, "determinism", c8_determinism),
        (9, "mse ablation", c9_mse_ablation),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} {name}: PASS ({secs:.1}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} {name}: FAIL ({secs:.1}s) {why}");
            }
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
