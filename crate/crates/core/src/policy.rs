//! The READ/WRITE policy head: a tanh MLP over decoder-state surrogates, with
//! an optional sinusoidal clock added to its input.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyVariant {
    #[serde(rename = "REINA")]
    Reina,
    #[serde(rename = "REINA_TAN")]
    ReinaTan,
    #[serde(rename = "REINA_SAN")]
    ReinaSan,
    #[serde(rename = "REINA_ALL")]
    ReinaAll,
}

impl PolicyVariant {
    pub const ALL: [PolicyVariant; 4] = [
        PolicyVariant::Reina,
        PolicyVariant::ReinaTan,
        PolicyVariant::ReinaSan,
        PolicyVariant::ReinaAll,
    ];

    pub fn uses_time_embedding(self) -> bool {
        matches!(self, PolicyVariant::ReinaTan | PolicyVariant::ReinaAll)
    }

    pub fn uses_alignment(self) -> bool {
        matches!(self, PolicyVariant::ReinaSan | PolicyVariant::ReinaAll)
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyVariant::Reina => "REINA",
            PolicyVariant::ReinaTan => "REINA_TAN",
            PolicyVariant::ReinaSan => "REINA_SAN",
            PolicyVariant::ReinaAll => "REINA_ALL",
        }
    }
}

impl fmt::Display for PolicyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyVariant {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        PolicyVariant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| LabError::config("variant", format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub use_time_embedding: bool,
    pub time_embed_dim: usize,
    pub time_base: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            input_dim: 16,
            hidden_dims: vec![64, 64],
            activation: Activation::Tanh,
            use_time_embedding: false,
            time_embed_dim: 16,
            time_base: 100.0,
        }
    }
}

impl PolicyConfig {
    /// Default head for `variant` over `input_dim` features.
    pub fn for_variant(input_dim: usize, variant: PolicyVariant) -> Self {
        PolicyConfig {
            input_dim,
            use_time_embedding: variant.uses_time_embedding(),
            time_embed_dim: input_dim,
            ..PolicyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(LabError::config("input_dim", "must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(LabError::config("hidden_dims", "layer widths must be positive"));
        }
        if self.use_time_embedding {
            if self.time_embed_dim != self.input_dim {
                return Err(LabError::config(
                    "time_embed_dim",
                    "must equal input_dim when the embedding is added to the features",
                ));
            }
            if !self.time_embed_dim.is_multiple_of(2) {
                return Err(LabError::config("time_embed_dim", "must be even"));
            }
        }
        if !(self.time_base > 1.0) {
            return Err(LabError::config("time_base", "must exceed 1"));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(1);
        dims
    }
}

/// Sinusoidal encoding of a continuous duration in seconds.
///
/// Element `2i` is `sin(t / base^(2i/d))` and element `2i+1` the matching cosine.
pub fn time_embedding(t_audio: f64, d: usize, base: f64) -> Result<Vec<f64>> {
    if !d.is_multiple_of(2) {
        return Err(LabError::config(
            "time_embed_dim",
            format!("must be even, got {d}"),
        ));
    }
    if !(t_audio >= 0.0) {
        return Err(LabError::config(
            "t_audio",
            format!("must be nonnegative, got {t_audio}"),
        ));
    }
    let mut out = vec![0.0; d];
    add_time_embedding(&mut out, t_audio, base);
    Ok(out)
}

fn add_time_embedding(buf: &mut [f64], t_audio: f64, base: f64) {
    let d = buf.len() as f64;
    for (i, pair) in buf.chunks_exact_mut(2).enumerate() {
        let angle = t_audio / base.powf(2.0 * i as f64 / d);
        pair[0] += angle.sin();
        pair[1] += angle.cos();
    }
}

/// Derivative of the embedding with respect to `t_audio`, dotted with `upstream`.
fn time_embedding_dt(upstream: &[f64], t_audio: f64, base: f64) -> f64 {
    let d = upstream.len() as f64;
    upstream
        .chunks_exact(2)
        .enumerate()
        .map(|(i, g)| {
            let inv = base.powf(-2.0 * i as f64 / d);
            let angle = t_audio * inv;
            g[0] * angle.cos() * inv - g[1] * angle.sin() * inv
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyInput {
    pub features: Vec<f64>,
    pub t_audio: f64,
}

impl PolicyInput {
    pub fn new(features: Vec<f64>, t_audio: f64) -> Self {
        PolicyInput { features, t_audio }
    }
}

/// Weights of the policy head, stored flat: for each layer, a row-major
/// `out x in` matrix followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub values: Vec<f64>,
}

/// A gradient laid out exactly like [`PolicyParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    rows: usize,
    cols: usize,
    w_offset: usize,
    b_offset: usize,
}

fn layer_shapes(config: &PolicyConfig) -> Vec<LayerShape> {
    let dims = config.dims();
    let mut offset = 0;
    dims.windows(2)
        .map(|w| {
            let (cols, rows) = (w[0], w[1]);
            let shape = LayerShape {
                rows,
                cols,
                w_offset: offset,
                b_offset: offset + rows * cols,
            };
            offset += rows * cols + rows;
            shape
        })
        .collect()
}

fn param_count(config: &PolicyConfig) -> usize {
    layer_shapes(config)
        .iter()
        .map(|s| s.rows * s.cols + s.rows)
        .sum()
}

impl PolicyParams {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; param_count(&config)];
        for s in layer_shapes(&config) {
            let bound = 1.0 / (s.cols as f64).sqrt();
            for v in &mut values[s.w_offset..s.b_offset + s.rows] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(PolicyParams { config, values })
    }

    pub fn zeros(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let values = vec![0.0; param_count(&config)];
        Ok(PolicyParams { config, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_variant(&self, variant: PolicyVariant) -> Result<()> {
        if variant.uses_time_embedding() != self.config.use_time_embedding {
            return Err(LabError::config(
                "use_time_embedding",
                format!(
                    "{variant} requires use_time_embedding = {}",
                    variant.uses_time_embedding()
                ),
            ));
        }
        Ok(())
    }

    fn input_vector(&self, input: &PolicyInput) -> Result<Vec<f64>> {
        if input.features.len() != self.config.input_dim {
            return Err(LabError::Shape {
                expected: self.config.input_dim,
                got: input.features.len(),
            });
        }
        let mut x = input.features.clone();
        if self.config.use_time_embedding {
            if !(input.t_audio >= 0.0) {
                return Err(LabError::config("t_audio", "must be nonnegative"));
            }
            add_time_embedding(&mut x, input.t_audio, self.config.time_base);
        }
        Ok(x)
    }

    /// Activations of every layer; the last entry holds the scalar output.
    fn activations(&self, shapes: &[LayerShape], x: Vec<f64>) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(shapes.len() + 1);
        acts.push(x);
        let last = shapes.len() - 1;
        for (l, s) in shapes.iter().enumerate() {
            let w = &self.values[s.w_offset..s.b_offset];
            let b = &self.values[s.b_offset..s.b_offset + s.rows];
            let a = &acts[l];
            let mut z: Vec<f64> = w
                .chunks_exact(s.cols)
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>())
                .collect();
            if l != last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Policy score `q`; READ is chosen when it exceeds the threshold.
    pub fn forward(&self, input: &PolicyInput, variant: PolicyVariant) -> Result<f64> {
        self.check_variant(variant)?;
        let shapes = layer_shapes(&self.config);
        let x = self.input_vector(input)?;
        Ok(self.activations(&shapes, x).last().expect("output layer")[0])
    }

    pub fn forward_batch(&self, batch: &[PolicyInput], variant: PolicyVariant) -> Result<Vec<f64>> {
        Ok(self.forward_traced(batch, variant)?.outputs)
    }

    pub fn forward_traced(&self, batch: &[PolicyInput], variant: PolicyVariant) -> Result<BatchTrace> {
        self.check_variant(variant)?;
        let shapes = layer_shapes(&self.config);
        let mut acts = Vec::with_capacity(batch.len());
        let mut outputs = Vec::with_capacity(batch.len());
        for input in batch {
            let a = self.activations(&shapes, self.input_vector(input)?);
            outputs.push(a.last().expect("output layer")[0]);
            acts.push(a);
        }
        Ok(BatchTrace { acts, outputs })
    }

    /// Accumulates `sum_i upstream_i * dq_i/dtheta` into `grad`.
    pub fn backward_traced(&self, trace: &BatchTrace, upstream: &[f64], grad: &mut Gradient) -> Result<()> {
        if upstream.len() != trace.outputs.len() {
            return Err(LabError::Shape {
                expected: trace.outputs.len(),
                got: upstream.len(),
            });
        }
        if grad.0.len() != self.values.len() {
            return Err(LabError::Shape {
                expected: self.values.len(),
                got: grad.0.len(),
            });
        }
        let shapes = layer_shapes(&self.config);
        for (acts, &g) in trace.acts.iter().zip(upstream) {
            if g == 0.0 {
                continue;
            }
            self.backprop_one(&shapes, acts, g, &mut grad.0);
        }
        Ok(())
    }

    /// Returns dq/d(input) for one example.
    fn backprop_one(&self, shapes: &[LayerShape], acts: &[Vec<f64>], g: f64, grad: &mut [f64]) -> Vec<f64> {
        let mut delta = vec![g];
        for l in (0..shapes.len()).rev() {
            let s = shapes[l];
            let a_in = &acts[l];
            for (r, d) in delta.iter().enumerate() {
                let row = &mut grad[s.w_offset + r * s.cols..s.w_offset + (r + 1) * s.cols];
                row.iter_mut().zip(a_in).for_each(|(gw, a)| *gw += d * a);
                grad[s.b_offset + r] += d;
            }
            let w = &self.values[s.w_offset..s.b_offset];
            let mut prev = vec![0.0; s.cols];
            for (row, d) in w.chunks_exact(s.cols).zip(&delta) {
                prev.iter_mut().zip(row).for_each(|(p, wi)| *p += d * wi);
            }
            if l > 0 {
                prev.iter_mut().zip(a_in).for_each(|(p, a)| *p *= 1.0 - a * a);
            }
            delta = prev;
        }
        delta
    }

    /// Exact gradient of `sum_i upstream_i * q_i` with respect to the weights.
    pub fn backward(
        &self,
        batch: &[PolicyInput],
        variant: PolicyVariant,
        upstream: &[f64],
    ) -> Result<Gradient> {
        if upstream.len() != batch.len() {
            return Err(LabError::Shape {
                expected: batch.len(),
                got: upstream.len(),
            });
        }
        let trace = self.forward_traced(batch, variant)?;
        let mut grad = Gradient(vec![0.0; self.values.len()]);
        self.backward_traced(&trace, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Gradient of `q` with respect to the feature vector and to `t_audio`.
    pub fn input_gradient(&self, input: &PolicyInput, variant: PolicyVariant) -> Result<(Vec<f64>, f64)> {
        self.check_variant(variant)?;
        let shapes = layer_shapes(&self.config);
        let acts = self.activations(&shapes, self.input_vector(input)?);
        let mut scratch = vec![0.0; self.values.len()];
        let dx = self.backprop_one(&shapes, &acts, 1.0, &mut scratch);
        let dt = if self.config.use_time_embedding {
            time_embedding_dt(&dx, input.t_audio, self.config.time_base)
        } else {
            0.0
        };
        Ok((dx, dt))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&Checkpoint::from(self))
            .map_err(|e| LabError::io(path, e.into()))?;
        std::fs::write(path, json + "\n").map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| LabError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        ckpt.into_params()
    }
}

/// Cached activations from [`PolicyParams::forward_traced`].
#[derive(Debug, Clone)]
pub struct BatchTrace {
    acts: Vec<Vec<Vec<f64>>>,
    pub outputs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    shape: [usize; 2],
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: PolicyConfig,
    layers: Vec<CheckpointLayer>,
}

impl From<&PolicyParams> for Checkpoint {
    fn from(p: &PolicyParams) -> Self {
        let layers = layer_shapes(&p.config)
            .into_iter()
            .map(|s| CheckpointLayer {
                shape: [s.rows, s.cols],
                weights: p.values[s.w_offset..s.b_offset].to_vec(),
                bias: p.values[s.b_offset..s.b_offset + s.rows].to_vec(),
            })
            .collect();
        Checkpoint {
            config: p.config.clone(),
            layers,
        }
    }
}

impl Checkpoint {
    fn into_params(self) -> Result<PolicyParams> {
        self.config.validate()?;
        let shapes = layer_shapes(&self.config);
        if shapes.len() != self.layers.len() {
            return Err(LabError::Shape {
                expected: shapes.len(),
                got: self.layers.len(),
            });
        }
        let mut values = Vec::with_capacity(param_count(&self.config));
        for (s, layer) in shapes.iter().zip(self.layers) {
            if layer.shape != [s.rows, s.cols]
                || layer.weights.len() != s.rows * s.cols
                || layer.bias.len() != s.rows
            {
                return Err(LabError::Shape {
                    expected: s.rows * s.cols,
                    got: layer.weights.len(),
                });
            }
            values.extend(layer.weights);
            values.extend(layer.bias);
        }
        let params = PolicyParams {
            config: self.config,
            values,
        };
        if !params.is_finite() {
            return Err(LabError::config(
                "weights",
                "checkpoint contains non-finite values",
            ));
        }
        Ok(params)
    }
}
