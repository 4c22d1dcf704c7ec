//! Fixed-topology multilayer perceptrons with hand-written reverse mode,
//! Adam, orthogonal initialisation and a bit-exact checkpoint format.
//!
//! Parameters of a [`DenseNet`] live in one flat buffer: for each layer the
//! row-major `outputs x inputs` weight matrix followed by the bias vector.
//! Gradients and Adam moments use the same layout.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
    /// Softmax applied independently over consecutive groups of these widths.
    GroupSoftmax(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    spec: LayerSpec,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<T> {
    layers: Vec<Layer>,
    params: Vec<T>,
}

/// Per-layer inputs and activated outputs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache<T> {
    inputs: Vec<Vec<T>>,
    outputs: Vec<Vec<T>>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.outputs.last().expect("at least one layer")
    }
}

impl<T: Scalar> DenseNet<T> {
    /// Zero-initialised network from explicit layer specs.
    pub fn from_specs(specs: Vec<LayerSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Dimension("network needs at least one layer".into()));
        }
        for pair in specs.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Dimension(format!(
                    "layer widths disagree: {} -> {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut off = 0;
        for spec in specs {
            if let Activation::GroupSoftmax(groups) = &spec.activation {
                if groups.iter().sum::<usize>() != spec.outputs || groups.contains(&0) {
                    return Err(Error::Dimension("softmax groups must tile the layer".into()));
                }
            }
            let w_off = off;
            let b_off = w_off + spec.inputs * spec.outputs;
            off = b_off + spec.outputs;
            layers.push(Layer { spec, w_off, b_off });
        }
        Ok(Self {
            layers,
            params: vec![T::zero(); off],
        })
    }

    /// MLP with `hidden` activation on every layer but the last.
    pub fn mlp(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Dimension("need input and output widths".into()));
        }
        let n = widths.len() - 1;
        let specs = (0..n)
            .map(|l| LayerSpec {
                inputs: widths[l],
                outputs: widths[l + 1],
                activation: if l + 1 == n { output.clone() } else { hidden.clone() },
            })
            .collect();
        Self::from_specs(specs)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").spec.outputs
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        let l = &self.layers[layer];
        &self.params[l.w_off..l.b_off]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [T] {
        let (a, b) = (self.layers[layer].w_off, self.layers[layer].b_off);
        &mut self.params[a..b]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let l = &self.layers[layer];
        &self.params[l.b_off..l.b_off + l.spec.outputs]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        let l = &self.layers[layer];
        let (a, n) = (l.b_off, l.spec.outputs);
        &mut self.params[a..a + n]
    }

    /// Orthogonal weights with per-layer gains, zero biases.
    pub fn init_orthogonal<R: Rng + ?Sized>(&mut self, gains: &[T], rng: &mut R) {
        assert_eq!(gains.len(), self.layers.len(), "one gain per layer");
        for (l, &g) in gains.iter().enumerate() {
            let (rows, cols) = (self.layers[l].spec.outputs, self.layers[l].spec.inputs);
            let w = orthogonal_init(rows, cols, g, rng);
            self.weights_mut(l).copy_from_slice(&w);
            self.bias_mut(l).iter_mut().for_each(|b| *b = T::zero());
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, ForwardCache<T>)> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input width {} but network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let LayerSpec { inputs: ni, outputs: no, activation } = &layer.spec;
            let w = &self.params[layer.w_off..layer.b_off];
            let b = &self.params[layer.b_off..layer.b_off + no];
            let mut z: Vec<T> = (0..*no)
                .map(|r| {
                    let row = &w[r * ni..(r + 1) * ni];
                    row.iter().zip(&cur).fold(b[r], |acc, (&wi, &xi)| acc + wi * xi)
                })
                .collect();
            activate(activation, &mut z);
            inputs.push(std::mem::replace(&mut cur, z.clone()));
            outputs.push(z);
        }
        Ok((cur, ForwardCache { inputs, outputs }))
    }

    pub fn predict(&self, x: &[T]) -> Result<Vec<T>> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Reverse pass: returns `(parameter gradients, input gradient)` for the
    /// scalar loss whose gradient w.r.t. the output is `out_grad`.
    pub fn backward(&self, cache: &ForwardCache<T>, out_grad: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let mut grads = vec![T::zero(); self.params.len()];
        let gx = self.backward_into(cache, out_grad, &mut grads)?;
        Ok((grads, gx))
    }

    /// As [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<T>,
        out_grad: &[T],
        grads: &mut [T],
    ) -> Result<Vec<T>> {
        if out_grad.len() != self.output_dim() || cache.outputs.len() != self.layers.len() {
            return Err(Error::Dimension("output gradient / cache do not match network".into()));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Dimension("gradient buffer size".into()));
        }
        let mut g = out_grad.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let LayerSpec { inputs: ni, outputs: no, activation } = &layer.spec;
            let y = &cache.outputs[l];
            let x = &cache.inputs[l];
            activation_backward(activation, y, &mut g);
            let w = &self.params[layer.w_off..layer.b_off];
            let mut gx = vec![T::zero(); *ni];
            for r in 0..*no {
                let gr = g[r];
                grads[layer.b_off + r] += gr;
                if gr == T::zero() {
                    continue;
                }
                let row = layer.w_off + r * ni;
                for c in 0..*ni {
                    grads[row + c] += gr * x[c];
                    gx[c] += w[r * ni + c] * gr;
                }
            }
            g = gx;
        }
        Ok(g)
    }
}

fn activate<T: Scalar>(act: &Activation, z: &mut [T]) {
    match act {
        Activation::Identity => {}
        Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::GroupSoftmax(groups) => {
            let mut off = 0;
            for &g in groups {
                softmax_in_place(&mut z[off..off + g]);
                off += g;
            }
        }
    }
}

fn activation_backward<T: Scalar>(act: &Activation, y: &[T], g: &mut [T]) {
    match act {
        Activation::Identity => {}
        Activation::Tanh => {
            for (gi, &yi) in g.iter_mut().zip(y) {
                *gi *= T::one() - yi * yi;
            }
        }
        Activation::GroupSoftmax(groups) => {
            let mut off = 0;
            for &n in groups {
                let ys = &y[off..off + n];
                let gs = &mut g[off..off + n];
                let dot: T = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                for (gi, &yi) in gs.iter_mut().zip(ys) {
                    *gi = yi * (*gi - dot);
                }
                off += n;
            }
        }
    }
}

pub fn softmax_in_place<T: Scalar>(z: &mut [T]) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    z.iter().map(|&v| v - lse).collect()
}

/// `rows x cols` row-major matrix with orthonormal rows (rows <= cols) or
/// orthonormal columns (rows > cols), scaled by `gain`.
pub fn orthogonal_init<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    gain: T,
    rng: &mut R,
) -> Vec<T> {
    assert!(rows >= 1 && cols >= 1);
    let (tall, short) = (rows.max(cols), rows.min(cols));
    // `short` column vectors of length `tall`, Gaussian then Gram-Schmidt.
    let mut q: Vec<Vec<f64>> = (0..short)
        .map(|_| (0..tall).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for j in 0..short {
        // Two passes of modified Gram-Schmidt keep the basis orthonormal to
        // working precision.
        for _ in 0..2 {
            for i in 0..j {
                let (head, tail) = q.split_at_mut(j);
                let proj: f64 = head[i].iter().zip(&tail[0]).map(|(a, b)| a * b).sum();
                for (t, h) in tail[0].iter_mut().zip(&head[i]) {
                    *t -= proj * h;
                }
            }
        }
        let n = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        q[j].iter_mut().for_each(|v| *v /= n);
    }
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = if rows <= cols { q[r][c] } else { q[c][r] };
            out[r * cols + c] = gain * T::lit(v);
        }
    }
    out
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n_params: usize, lr: T) -> Self {
        Self {
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            step: 0,
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    pub fn adam_step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam state for {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let c1 = one - self.beta1.powi(t);
        let c2 = one - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Scale gradient buffers so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: T) -> T {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v * v)
        .sum::<T>()
        .sqrt();
    if norm > max_norm {
        let f = max_norm / (norm + T::lit(1e-12));
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= f);
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Current checkpoint schema version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex string of the little-endian IEEE-754 bytes of each value, in order.
pub fn encode_le_hex<T: Scalar>(values: &[T]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * T::BYTES);
    for &v in values {
        v.write_le(&mut bytes);
    }
    hex::encode(bytes)
}

pub fn decode_le_hex<T: Scalar>(text: &str) -> Result<Vec<T>> {
    let bytes = hex::decode(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if bytes.len() % T::BYTES != 0 {
        return Err(Error::Checkpoint(format!(
            "{} bytes is not a multiple of {}",
            bytes.len(),
            T::BYTES
        )));
    }
    Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetRecord {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// Little-endian parameter bytes, hex encoded.
    pub params: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub name: String,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: String,
    pub v: String,
}

impl<T: Scalar> DenseNet<T> {
    pub fn to_record(&self, name: &str) -> NetRecord {
        NetRecord {
            name: name.to_owned(),
            layers: self.specs(),
            params: encode_le_hex(&self.params),
        }
    }

    pub fn from_record(rec: &NetRecord) -> Result<Self> {
        let mut net = Self::from_specs(rec.layers.clone())?;
        let params = decode_le_hex::<T>(&rec.params)?;
        if params.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "net {}: {} parameters stored, {} expected",
                rec.name,
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn to_record(&self, name: &str) -> AdamRecord {
        AdamRecord {
            name: name.to_owned(),
            step: self.step,
            lr: self.lr.as_f64(),
            beta1: self.beta1.as_f64(),
            beta2: self.beta2.as_f64(),
            eps: self.eps.as_f64(),
            m: encode_le_hex(&self.m),
            v: encode_le_hex(&self.v),
        }
    }

    pub fn from_record(rec: &AdamRecord) -> Result<Self> {
        let m = decode_le_hex(&rec.m)?;
        let v = decode_le_hex(&rec.v)?;
        if m.len() != v.len() {
            return Err(Error::Checkpoint(format!("adam {}: moment sizes differ", rec.name)));
        }
        Ok(Self {
            m,
            v,
            step: rec.step,
            lr: T::lit(rec.lr),
            beta1: T::lit(rec.beta1),
            beta2: T::lit(rec.beta2),
            eps: T::lit(rec.eps),
        })
    }
}
