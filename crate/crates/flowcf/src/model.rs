//! The learnable flow model: an MLP over [interaction row ‖ step embedding]
//! with hand-rolled reverse-mode gradients, a bias-corrected Adam optimizer,
//! and a binary checkpoint format.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, NdFloat, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::atomic_write;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FCF1";

/// Hidden-layer nonlinearity; the output layer is always identity so the
/// squared-error regression toward {0,1} stays unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply<F: NdFloat>(&self, z: &mut Array2<F>) {
        match self {
            Activation::Tanh => z.mapv_inplace(|v| v.tanh()),
            Activation::Relu => z.mapv_inplace(|v| v.max(F::zero())),
        }
    }

    /// Derivative expressed through the activation output a = act(z); valid
    /// for tanh (1 - a^2) and relu (1 if a > 0).
    fn derivative_from_output<F: NdFloat>(&self, a: F) -> F {
        match self {
            Activation::Tanh => F::one() - a * a,
            Activation::Relu => {
                if a > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of items; both the row width fed in and the output width.
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    /// Width of the sinusoidal step embedding concatenated to each row.
    pub step_embed_dim: usize,
    /// Grid resolution N; the embedding encodes the integer index round(t·N).
    pub n_steps: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_sizes.is_empty() {
            return Err(Error::Config(
                "hidden_sizes must contain at least one layer".into(),
            ));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if self.step_embed_dim == 0 || !self.step_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "step_embed_dim must be a positive even number, got {}",
                self.step_embed_dim
            )));
        }
        if self.n_steps < 2 {
            return Err(Error::Config(format!(
                "n_steps must be at least 2, got {}",
                self.n_steps
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Affine layer shapes chained (input+embed) -> hiddens -> input.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut prev = self.input_dim + self.step_embed_dim;
        for &h in &self.hidden_sizes {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.input_dim));
        dims
    }
}

/// Sinusoidal encoding of the integer grid index i = round(t·N): coordinate
/// pairs (sin(i·w_p), cos(i·w_p)) with w_p = 10000^(-2p/dim).
pub fn step_embedding(t: f64, dim: usize, n_steps: usize) -> Vec<f64> {
    debug_assert!(dim >= 2 && dim.is_multiple_of(2));
    let i = (t * n_steps as f64).round();
    let mut out = Vec::with_capacity(dim);
    for p in 0..dim / 2 {
        let omega = 10000f64.powf(-2.0 * p as f64 / dim as f64);
        let angle = i * omega;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

#[derive(Debug, Clone)]
pub struct FlowModel<F: NdFloat> {
    pub config: ModelConfig,
    /// Weight l has shape (fan_in, fan_out); rows are multiplied from the left.
    pub weights: Vec<Array2<F>>,
    pub biases: Vec<Array1<F>>,
}

/// Per-parameter gradients, shape-parallel to the model.
#[derive(Debug, Clone)]
pub struct Gradients<F: NdFloat> {
    pub weights: Vec<Array2<F>>,
    pub biases: Vec<Array1<F>>,
}

/// Everything the backward pass needs from a training forward pass.
pub struct ForwardTrace<F: NdFloat> {
    /// Input actually fed into each affine layer (post-dropout for hiddens).
    fed: Vec<Array2<F>>,
    /// Hidden activation outputs before dropout, for the derivative.
    acts: Vec<Array2<F>>,
    /// Scaled inverted-dropout masks, None where dropout is off.
    masks: Vec<Option<Array2<F>>>,
    pub output: Array2<F>,
}

impl<F: NdFloat> FlowModel<F> {
    /// Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)) drawn from a
    /// generator seeded with `init_seed`; biases start at zero.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Array2::zeros((fan_in, fan_out));
            for v in w.iter_mut() {
                *v = F::from(rng.random_range(-limit..limit)).unwrap();
            }
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(FlowModel {
            config,
            weights,
            biases,
        })
    }

    pub fn n_items(&self) -> usize {
        self.config.input_dim
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Concatenates each row with the embedding of its step.
    fn assemble_input(&self, x: &ArrayView2<F>, ts: &[f64]) -> Result<Array2<F>> {
        let (rows, cols) = x.dim();
        if cols != self.config.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} items per row, got {cols}",
                self.config.input_dim
            )));
        }
        if ts.len() != rows {
            return Err(Error::Shape(format!(
                "got {rows} rows but {} step values",
                ts.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model input".into()));
        }
        let d = self.config.step_embed_dim;
        let mut out = Array2::zeros((rows, cols + d));
        for r in 0..rows {
            out.slice_mut(s![r, ..cols]).assign(&x.row(r));
            let emb = step_embedding(ts[r], d, self.config.n_steps);
            for (k, &e) in emb.iter().enumerate() {
                out[[r, cols + k]] = F::from(e).unwrap();
            }
        }
        Ok(out)
    }

    /// Eval-mode forward pass: affine + activation per hidden layer, plain
    /// affine output, dropout off. Deterministic.
    pub fn forward(&self, x: &ArrayView2<F>, ts: &[f64]) -> Result<Array2<F>> {
        let mut h = self.assemble_input(x, ts)?;
        let last = self.n_layers() - 1;
        for l in 0..=last {
            let mut z = h.dot(&self.weights[l]) + &self.biases[l];
            if l < last {
                self.config.activation.apply(&mut z);
            }
            h = z;
        }
        Ok(h)
    }

    /// Pre-draws scaled inverted-dropout masks for a batch, one per hidden
    /// layer, or None when dropout is zero. Drawing happens up front so the
    /// actual forward/backward work can be split across threads without
    /// touching the generator.
    pub fn draw_dropout_masks(
        &self,
        rows: usize,
        rng: &mut impl Rng,
    ) -> Option<Vec<Array2<F>>> {
        let p = self.config.dropout;
        if p == 0.0 {
            return None;
        }
        let keep = 1.0 - p;
        let scale = F::from(1.0 / keep).unwrap();
        Some(
            self.config
                .hidden_sizes
                .iter()
                .map(|&h| {
                    let mut m = Array2::zeros((rows, h));
                    for v in m.iter_mut() {
                        if rng.random_bool(keep) {
                            *v = scale;
                        }
                    }
                    m
                })
                .collect(),
        )
    }

    /// Training forward pass keeping the intermediates backward needs.
    /// `masks` must match `draw_dropout_masks` output for these rows.
    pub fn forward_train(
        &self,
        x: &ArrayView2<F>,
        ts: &[f64],
        masks: Option<&[Array2<F>]>,
    ) -> Result<ForwardTrace<F>> {
        if let Some(ms) = masks {
            if ms.len() != self.config.hidden_sizes.len() {
                return Err(Error::Shape(format!(
                    "expected {} dropout masks, got {}",
                    self.config.hidden_sizes.len(),
                    ms.len()
                )));
            }
        }
        let mut h = self.assemble_input(x, ts)?;
        let last = self.n_layers() - 1;
        let mut trace = ForwardTrace {
            fed: Vec::with_capacity(last + 1),
            acts: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
            output: Array2::zeros((0, 0)),
        };
        for l in 0..=last {
            let mut z = h.dot(&self.weights[l]) + &self.biases[l];
            trace.fed.push(h);
            if l < last {
                self.config.activation.apply(&mut z);
                trace.acts.push(z.clone());
                match masks {
                    Some(ms) => {
                        z *= &ms[l];
                        trace.masks.push(Some(ms[l].clone()));
                    }
                    None => trace.masks.push(None),
                }
            }
            h = z;
        }
        trace.output = h;
        Ok(trace)
    }

    /// Gradients of the mean squared error between the trace's output and
    /// the target, plus the loss value accumulated in double precision.
    pub fn backward(
        &self,
        trace: &ForwardTrace<F>,
        x1: &ArrayView2<F>,
    ) -> Result<(Gradients<F>, f64)> {
        let dim = trace.output.dim();
        if x1.dim() != dim {
            return Err(Error::Shape(format!(
                "target shape {:?} does not match output {:?}",
                x1.dim(),
                dim
            )));
        }
        let count = (dim.0 * dim.1) as f64;
        let mut dz = &trace.output - x1;
        let mut loss = 0.0f64;
        for &d in dz.iter() {
            let d = d.to_f64().unwrap();
            loss += d * d;
        }
        loss /= count;
        let scale = F::from(2.0 / count).unwrap();
        dz.mapv_inplace(|d| d * scale);

        let last = self.n_layers() - 1;
        let mut gw: Vec<Array2<F>> = vec![Array2::zeros((0, 0)); last + 1];
        let mut gb: Vec<Array1<F>> = vec![Array1::zeros(0); last + 1];
        for l in (0..=last).rev() {
            gw[l] = trace.fed[l].t().dot(&dz);
            gb[l] = dz.sum_axis(Axis(0));
            if l > 0 {
                let mut da = dz.dot(&self.weights[l].t());
                if let Some(m) = &trace.masks[l - 1] {
                    da *= m;
                }
                let act = self.config.activation;
                Zip::from(&mut da)
                    .and(&trace.acts[l - 1])
                    .for_each(|g, &a| *g *= act.derivative_from_output(a));
                dz = da;
            }
        }
        Ok((
            Gradients {
                weights: gw,
                biases: gb,
            },
            loss,
        ))
    }
}

/// Mean squared error over all entries, accumulated in double precision.
pub fn mse_loss<F: NdFloat>(xhat: &Array2<F>, x1: &Array2<F>) -> f64 {
    assert_eq!(xhat.dim(), x1.dim(), "loss shape mismatch");
    let mut sum = 0.0f64;
    for (&a, &b) in xhat.iter().zip(x1.iter()) {
        let d = (a - b).to_f64().unwrap();
        sum += d * d;
    }
    sum / xhat.len() as f64
}

#[derive(Debug, Clone)]
pub struct OptimizerState<F: NdFloat> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m_weights: Vec<Array2<F>>,
    pub m_biases: Vec<Array1<F>>,
    pub v_weights: Vec<Array2<F>>,
    pub v_biases: Vec<Array1<F>>,
}

impl<F: NdFloat> OptimizerState<F> {
    pub fn new(model: &FlowModel<F>, learning_rate: f64) -> Self {
        OptimizerState {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step: 0,
            m_weights: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_biases: model.biases.iter().map(|b| Array1::zeros(b.dim())).collect(),
            v_weights: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_biases: model.biases.iter().map(|b| Array1::zeros(b.dim())).collect(),
        }
    }
}

/// One bias-corrected Adam update, no weight decay.
pub fn adam_step<F: NdFloat>(
    model: &mut FlowModel<F>,
    grads: &Gradients<F>,
    state: &mut OptimizerState<F>,
) -> Result<()> {
    let finite = grads
        .weights
        .iter()
        .all(|g| g.iter().all(|v| v.is_finite()))
        && grads.biases.iter().all(|g| g.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::Numeric("non-finite gradient in Adam step".into()));
    }
    state.step += 1;
    let b1 = F::from(state.beta1).unwrap();
    let b2 = F::from(state.beta2).unwrap();
    let omb1 = F::one() - b1;
    let omb2 = F::one() - b2;
    let inv_bc1 = F::from(1.0 / (1.0 - state.beta1.powi(state.step as i32))).unwrap();
    let inv_bc2 = F::from(1.0 / (1.0 - state.beta2.powi(state.step as i32))).unwrap();
    let lr = F::from(state.learning_rate).unwrap();
    let eps = F::from(state.epsilon).unwrap();

    for l in 0..model.weights.len() {
        Zip::from(&mut model.weights[l])
            .and(&grads.weights[l])
            .and(&mut state.m_weights[l])
            .and(&mut state.v_weights[l])
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + omb1 * g;
                *v = b2 * *v + omb2 * g * g;
                let mhat = *m * inv_bc1;
                let vhat = *v * inv_bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        Zip::from(&mut model.biases[l])
            .and(&grads.biases[l])
            .and(&mut state.m_biases[l])
            .and(&mut state.v_biases[l])
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + omb1 * g;
                *v = b2 * *v + omb2 * g * g;
                let mhat = *m * inv_bc1;
                let vhat = *v * inv_bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    layer_dims: Vec<(usize, usize)>,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
}

fn push_tensor(buf: &mut Vec<u8>, values: impl Iterator<Item = f32>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes model + optimizer state. Layout: magic "FCF1", u32 LE header
/// length, JSON header, then f32 LE tensors in order (per layer: weight
/// row-major, bias) for parameters, first moments, second moments.
pub fn save_checkpoint(
    model: &FlowModel<f32>,
    state: &OptimizerState<f32>,
    path: &Path,
) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        layer_dims: model.config.layer_dims(),
        learning_rate: state.learning_rate,
        beta1: state.beta1,
        beta2: state.beta2,
        epsilon: state.epsilon,
        step: state.step,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (w, b) in model.weights.iter().zip(&model.biases) {
        push_tensor(&mut buf, w.iter().copied());
        push_tensor(&mut buf, b.iter().copied());
    }
    for (m, mb) in state.m_weights.iter().zip(&state.m_biases) {
        push_tensor(&mut buf, m.iter().copied());
        push_tensor(&mut buf, mb.iter().copied());
    }
    for (v, vb) in state.v_weights.iter().zip(&state.v_biases) {
        push_tensor(&mut buf, v.iter().copied());
        push_tensor(&mut buf, vb.iter().copied());
    }
    atomic_write(path, &buf)
}

struct TensorReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> TensorReader<'a> {
    fn take(&mut self, len: usize) -> Result<Vec<f32>> {
        let need = len * 4;
        if self.offset + need > self.bytes.len() {
            return Err(Error::Checkpoint("truncated tensor payload".into()));
        }
        let out = self.bytes[self.offset..self.offset + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.offset += need;
        Ok(out)
    }

    fn matrix(&mut self, dim: (usize, usize)) -> Result<Array2<f32>> {
        let data = self.take(dim.0 * dim.1)?;
        Array2::from_shape_vec(dim, data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
    }

    fn vector(&mut self, len: usize) -> Result<Array1<f32>> {
        Ok(Array1::from_vec(self.take(len)?))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(FlowModel<f32>, OptimizerState<f32>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a flow model checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if 8 + header_len > bytes.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    header.config.validate()?;
    let dims = header.config.layer_dims();
    if dims != header.layer_dims {
        return Err(Error::Checkpoint(
            "layer dims in header disagree with config".into(),
        ));
    }
    let mut reader = TensorReader {
        bytes: &bytes,
        offset: 8 + header_len,
    };
    type TensorSet = (Vec<Array2<f32>>, Vec<Array1<f32>>);
    let mut read_set = || -> Result<TensorSet> {
        let mut ws = Vec::with_capacity(dims.len());
        let mut bs = Vec::with_capacity(dims.len());
        for &(fan_in, fan_out) in &dims {
            ws.push(reader.matrix((fan_in, fan_out))?);
            bs.push(reader.vector(fan_out)?);
        }
        Ok((ws, bs))
    };
    let (weights, biases) = read_set()?;
    let (m_weights, m_biases) = read_set()?;
    let (v_weights, v_biases) = read_set()?;
    if reader.offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    let model = FlowModel {
        config: header.config,
        weights,
        biases,
    };
    let state = OptimizerState {
        learning_rate: header.learning_rate,
        beta1: header.beta1,
        beta2: header.beta2,
        epsilon: header.epsilon,
        step: header.step,
        m_weights,
        m_biases,
        v_weights,
        v_biases,
    };
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden_sizes: vec![5, 4],
            step_embed_dim: 4,
            n_steps: 9,
            activation: Activation::Tanh,
            dropout: 0.0,
            init_seed: 11,
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::zeros((rows, cols));
        for v in m.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    }

    fn random_binary(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::zeros((rows, cols));
        for v in m.iter_mut() {
            if rng.random_bool(0.5) {
                *v = 1.0;
            }
        }
        m
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: FlowModel<f32> = FlowModel::init(toy_config()).unwrap();
        let b: FlowModel<f32> = FlowModel::init(toy_config()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.biases, b.biases);
        let mut other = toy_config();
        other.init_seed = 12;
        let c: FlowModel<f32> = FlowModel::init(other).unwrap();
        assert_ne!(a.weights[0], c.weights[0]);
        assert!(a.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_layer_shapes_chain() {
        let config = ModelConfig {
            input_dim: 3126,
            hidden_sizes: vec![300, 300],
            step_embed_dim: 10,
            n_steps: 9,
            activation: Activation::Tanh,
            dropout: 0.0,
            init_seed: 0,
        };
        let model: FlowModel<f32> = FlowModel::init(config).unwrap();
        let dims: Vec<_> = model.weights.iter().map(|w| w.dim()).collect();
        assert_eq!(dims, vec![(3136, 300), (300, 300), (300, 3126)]);
        assert_eq!(model.biases[2].len(), 3126);
    }

    #[test]
    fn init_rejects_bad_configs() {
        let mut config = toy_config();
        config.hidden_sizes = vec![];
        assert!(FlowModel::<f32>::init(config).is_err());
        let mut config = toy_config();
        config.step_embed_dim = 5;
        assert!(FlowModel::<f32>::init(config).is_err());
        let mut config = toy_config();
        config.dropout = 1.0;
        assert!(FlowModel::<f32>::init(config).is_err());
    }

    #[test]
    fn step_embedding_index_zero_alternates() {
        let emb = step_embedding(0.0, 8, 9);
        for (k, &v) in emb.iter().enumerate() {
            let expect = if k % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(v, expect);
        }
        assert_eq!(step_embedding(0.5, 8, 9), step_embedding(0.5, 8, 9));
    }

    #[test]
    fn step_embeddings_distinct_across_grid() {
        // Every pair of grid indices must differ by more than 1e-6 in at
        // least one coordinate, otherwise the model cannot tell steps apart.
        for &n in &[9usize, 50, 10_000] {
            let dim = 10;
            let embs: Vec<Vec<f64>> = (0..=n)
                .map(|i| step_embedding(i as f64 / n as f64, dim, n))
                .collect();
            for i in 0..embs.len() {
                for j in i + 1..embs.len() {
                    let distinct = embs[i]
                        .iter()
                        .zip(&embs[j])
                        .any(|(a, b)| (a - b).abs() > 1e-6);
                    assert!(distinct, "indices {i} and {j} collide for N={n}");
                }
            }
        }
    }

    #[test]
    fn forward_zero_weights_returns_output_bias() {
        let mut model: FlowModel<f64> = FlowModel::init(toy_config()).unwrap();
        for w in model.weights.iter_mut() {
            w.fill(0.0);
        }
        let bias = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0, 1.0, -1.0]);
        *model.biases.last_mut().unwrap() = bias.clone();
        let x = random_binary(3, 6, 1);
        let out = model.forward(&x.view(), &[0.0, 0.5, 8.0 / 9.0]).unwrap();
        for row in out.outer_iter() {
            assert_eq!(row.to_owned(), bias);
        }
    }

    #[test]
    fn forward_matches_hand_computation() {
        // 2 items, one hidden unit, embed dim 2, N=4, t=0.5 -> index 2.
        // Expected values worked out by hand from
        //   z = 0.5·1 - 0.3·0 + 0.2·sin2 + 0.1·cos2 + 0.25, a = tanh z,
        //   out = (0.7a + 0.05, -0.2a + 0.6).
        let config = ModelConfig {
            input_dim: 2,
            hidden_sizes: vec![1],
            step_embed_dim: 2,
            n_steps: 4,
            activation: Activation::Tanh,
            dropout: 0.0,
            init_seed: 0,
        };
        let mut model: FlowModel<f64> = FlowModel::init(config).unwrap();
        model.weights[0] = array![[0.5], [-0.3], [0.2], [0.1]];
        model.biases[0] = array![0.25];
        model.weights[1] = array![[0.7, -0.2]];
        model.biases[1] = array![0.05, 0.6];
        let x = array![[1.0, 0.0]];
        let out = model.forward(&x.view(), &[0.5]).unwrap();
        assert!((out[[0, 0]] - 0.5480602360783797).abs() < 1e-12);
        assert!((out[[0, 1]] - 0.4576970754061772).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic_and_validates_input() {
        let model: FlowModel<f64> = FlowModel::init(toy_config()).unwrap();
        let x = random_binary(4, 6, 2);
        let ts = vec![0.0, 1.0 / 9.0, 0.5, 8.0 / 9.0];
        let a = model.forward(&x.view(), &ts).unwrap();
        let b = model.forward(&x.view(), &ts).unwrap();
        assert_eq!(a, b);

        let bad = array![[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]];
        assert!(model.forward(&bad.view(), &[0.5]).is_err());
        let narrow = Array2::<f64>::zeros((2, 5));
        assert!(model.forward(&narrow.view(), &[0.5, 0.5]).is_err());
        assert!(model.forward(&x.view(), &[0.5]).is_err());
    }

    #[test]
    fn loss_basics_and_oracle() {
        let x1 = random_binary(8, 6, 3).mapv(|v| v as f32);
        assert_eq!(mse_loss(&x1, &x1), 0.0);
        let shifted = &x1 + 1.0f32;
        assert!((mse_loss(&shifted, &x1) - 1.0).abs() < 1e-9);

        let xhat = random_matrix(8, 6, 4).mapv(|v| v as f32);
        // Independent oracle: accumulate in f64 over an index loop.
        let mut oracle = 0.0f64;
        for r in 0..8 {
            for c in 0..6 {
                let d = xhat[[r, c]] as f64 - x1[[r, c]] as f64;
                oracle += d * d;
            }
        }
        oracle /= 48.0;
        let got = mse_loss(&xhat, &x1);
        assert!((got - oracle).abs() / oracle < 1e-6);
    }

    #[test]
    fn backward_zero_residual_gives_zero_gradients() {
        // Zero weights and biases with a zero target: output == target, so
        // the quadratic sits at its minimum and every gradient is zero.
        let mut model: FlowModel<f64> = FlowModel::init(toy_config()).unwrap();
        for w in model.weights.iter_mut() {
            w.fill(0.0);
        }
        let x = random_binary(3, 6, 5);
        let ts = vec![0.5; 3];
        let trace = model.forward_train(&x.view(), &ts, None).unwrap();
        let target = Array2::<f64>::zeros((3, 6));
        let (grads, loss) = model.backward(&trace, &target.view()).unwrap();
        assert_eq!(loss, 0.0);
        for g in &grads.weights {
            assert!(g.iter().all(|&v| v == 0.0));
        }
        for g in &grads.biases {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_bias_gradient_is_scaled_residual_sum() {
        let model: FlowModel<f64> = FlowModel::init(toy_config()).unwrap();
        let x = random_binary(4, 6, 6);
        let ts = vec![0.0, 0.5, 0.5, 8.0 / 9.0];
        let x1 = random_binary(4, 6, 7);
        let trace = model.forward_train(&x.view(), &ts, None).unwrap();
        let (grads, _) = model.backward(&trace, &x1.view()).unwrap();
        let residual = &trace.output - &x1;
        let expect = residual.sum_axis(Axis(0)) * (2.0 / 24.0);
        let got = grads.biases.last().unwrap();
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn finite_difference_check(
        mut model: FlowModel<f64>,
        masks: Option<Vec<Array2<f64>>>,
        seed: u64,
    ) -> f64 {
        let x = random_binary(3, model.config.input_dim, seed);
        let ts = vec![0.0, 4.0 / 9.0, 8.0 / 9.0];
        let x1 = random_binary(3, model.config.input_dim, seed + 1);
        let trace = model
            .forward_train(&x.view(), &ts, masks.as_deref())
            .unwrap();
        let (grads, _) = model.backward(&trace, &x1.view()).unwrap();

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let n_layers = model.weights.len();
        for l in 0..n_layers {
            let (rows, cols) = model.weights[l].dim();
            for r in 0..rows {
                for c in 0..cols {
                    let orig = model.weights[l][[r, c]];
                    model.weights[l][[r, c]] = orig + h;
                    let up = mse_loss(
                        &model
                            .forward_train(&x.view(), &ts, masks.as_deref())
                            .unwrap()
                            .output,
                        &x1,
                    );
                    model.weights[l][[r, c]] = orig - h;
                    let down = mse_loss(
                        &model
                            .forward_train(&x.view(), &ts, masks.as_deref())
                            .unwrap()
                            .output,
                        &x1,
                    );
                    model.weights[l][[r, c]] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let g = grads.weights[l][[r, c]];
                    let denom = fd.abs().max(g.abs()).max(1e-8);
                    worst = worst.max((fd - g).abs() / denom);
                }
            }
            for c in 0..model.biases[l].len() {
                let orig = model.biases[l][c];
                model.biases[l][c] = orig + h;
                let up = mse_loss(
                    &model
                        .forward_train(&x.view(), &ts, masks.as_deref())
                        .unwrap()
                        .output,
                    &x1,
                );
                model.biases[l][c] = orig - h;
                let down = mse_loss(
                    &model
                        .forward_train(&x.view(), &ts, masks.as_deref())
                        .unwrap()
                        .output,
                    &x1,
                );
                model.biases[l][c] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grads.biases[l][c];
                let denom = fd.abs().max(g.abs()).max(1e-8);
                worst = worst.max((fd - g).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model: FlowModel<f64> = FlowModel::init(toy_config()).unwrap();
        let worst = finite_difference_check(model, None, 20);
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_relu() {
        let mut config = toy_config();
        config.activation = Activation::Relu;
        config.init_seed = 21;
        let model: FlowModel<f64> = FlowModel::init(config).unwrap();
        let worst = finite_difference_check(model, None, 22);
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout() {
        let mut config = toy_config();
        config.dropout = 0.4;
        let model: FlowModel<f64> = FlowModel::init(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let masks = model.draw_dropout_masks(3, &mut rng);
        assert!(masks.is_some());
        let worst = finite_difference_check(model, masks, 24);
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn dropout_masks_absent_at_zero_rate() {
        let model: FlowModel<f64> = FlowModel::init(toy_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        assert!(model.draw_dropout_masks(7, &mut rng).is_none());
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut model: FlowModel<f64> = FlowModel::init(toy_config()).unwrap();
        let before = model.clone();
        let grads = Gradients {
            weights: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: model.biases.iter().map(|b| Array1::zeros(b.dim())).collect(),
        };
        let mut state = OptimizerState::new(&model, 0.1);
        adam_step(&mut model, &grads, &mut state).unwrap();
        assert_eq!(model.weights, before.weights);
        assert_eq!(model.biases, before.biases);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut model: FlowModel<f64> = FlowModel::init(toy_config()).unwrap();
        let before = model.weights[0][[0, 0]];
        let mut grads = Gradients {
            weights: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: model.biases.iter().map(|b| Array1::zeros(b.dim())).collect(),
        };
        grads.weights[0][[0, 0]] = 0.3;
        let mut state = OptimizerState::new(&model, 0.1);
        adam_step(&mut model, &grads, &mut state).unwrap();
        let delta = before - model.weights[0][[0, 0]];
        assert!((delta - 0.1).abs() < 1e-6, "first step moved by {delta}");
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut model: FlowModel<f64> = FlowModel::init(toy_config()).unwrap();
        let mut grads = Gradients {
            weights: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: model.biases.iter().map(|b| Array1::zeros(b.dim())).collect(),
        };
        grads.weights[1][[0, 0]] = f64::INFINITY;
        let mut state = OptimizerState::new(&model, 0.1);
        assert!(adam_step(&mut model, &grads, &mut state).is_err());
    }

    #[test]
    fn adam_minimizes_elementwise_quadratic() {
        // Feeding g = 2w for every parameter makes each coordinate run Adam
        // on f(w) = w² independently; the oracle below replays the same
        // recursion on a plain scalar.
        let mut model: FlowModel<f64> = FlowModel::init(toy_config()).unwrap();
        for w in model.weights.iter_mut() {
            w.fill(1.0);
        }
        for b in model.biases.iter_mut() {
            b.fill(1.0);
        }
        let mut state = OptimizerState::new(&model, 0.1);
        for _ in 0..100 {
            let grads = Gradients {
                weights: model.weights.iter().map(|w| w * 2.0).collect(),
                biases: model.biases.iter().map(|b| b * 2.0).collect(),
            };
            adam_step(&mut model, &grads, &mut state).unwrap();
        }

        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for step in 1..=100u32 {
            let g = 2.0 * w;
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = m / (1.0 - ADAM_BETA1.powi(step as i32));
            let vhat = v / (1.0 - ADAM_BETA2.powi(step as i32));
            w -= 0.1 * mhat / (vhat.sqrt() + ADAM_EPSILON);
        }
        assert!(w.abs() < 0.1, "oracle ended at {w}");
        for layer in &model.weights {
            for &p in layer.iter() {
                assert!(p.abs() < 0.1);
                assert!((p - w).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fcf");
        let mut model: FlowModel<f32> = FlowModel::init(toy_config()).unwrap();
        let mut state = OptimizerState::new(&model, 0.001);
        // Take a couple of real steps so the moments are non-trivial.
        let x = random_binary(3, 6, 30).mapv(|v| v as f32);
        let x1 = random_binary(3, 6, 31).mapv(|v| v as f32);
        let ts = vec![0.5; 3];
        for _ in 0..3 {
            let trace = model.forward_train(&x.view(), &ts, None).unwrap();
            let (grads, _) = model.backward(&trace, &x1.view()).unwrap();
            adam_step(&mut model, &grads, &mut state).unwrap();
        }
        save_checkpoint(&model, &state, &path).unwrap();
        let (loaded, lstate) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.weights, model.weights);
        assert_eq!(loaded.biases, model.biases);
        assert_eq!(lstate.step, state.step);
        assert_eq!(lstate.m_weights, state.m_weights);
        assert_eq!(lstate.v_weights, state.v_weights);
        assert_eq!(lstate.m_biases, state.m_biases);
        assert_eq!(lstate.v_biases, state.v_biases);
        // Saving again must produce the same bytes.
        let first = std::fs::read(&path).unwrap();
        save_checkpoint(&loaded, &lstate, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fcf");
        let model: FlowModel<f32> = FlowModel::init(toy_config()).unwrap();
        let state = OptimizerState::new(&model, 0.001);
        save_checkpoint(&model, &state, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));

        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, &trailing).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
