//! Fully connected Q-network with rectifier hidden layers and a linear
//! output layer.
//!
//! All weight matrices live in one flat vector (the vector that masks act
//! on). Layer `k` has shape `rows = fan_out`, `cols = fan_in`, stored
//! row-major at `offsets[k]..offsets[k] + rows * cols`. Biases are kept
//! apart and are never masked.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::masker::{sigmoid, MaskLogits};
use crate::seeds;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl NetSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            output_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::config("net.hidden_dims", "at least one hidden layer is required"));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("net.hidden_dims", "all layer widths must be positive"));
        }
        Ok(())
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2)
            .map(|d| LayerShape { rows: d[1], cols: d[0] })
            .collect()
    }

    pub fn weight_count(&self) -> usize {
        self.layer_shapes().iter().map(LayerShape::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One layer in unflattened form.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub shape: LayerShape,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatWeights {
    spec: NetSpec,
    layer_shapes: Vec<LayerShape>,
    offsets: Vec<usize>,
    w: Vec<f64>,
    biases: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub d_w: Vec<f64>,
    pub d_biases: Vec<Vec<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(weights: &FlatWeights) -> Self {
        Self {
            d_w: vec![0.0; weights.len()],
            d_biases: weights.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self.d_w.iter().map(|g| g * g).sum::<f64>()
            + self
                .d_biases
                .iter()
                .flat_map(|b| b.iter())
                .map(|g| g * g)
                .sum::<f64>();
        sq.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.d_w.iter_mut().for_each(|g| *g *= factor);
        self.d_biases
            .iter_mut()
            .flat_map(|b| b.iter_mut())
            .for_each(|g| *g *= factor);
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &GradientBundle) {
        for (a, b) in self.d_w.iter_mut().zip(&other.d_w) {
            *a += b;
        }
        for (la, lb) in self.d_biases.iter_mut().zip(&other.d_biases) {
            for (a, b) in la.iter_mut().zip(lb) {
                *a += b;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        self.d_w.fill(0.0);
        self.d_biases.iter_mut().for_each(|b| b.fill(0.0));
    }
}

/// Whether a masked pass should use the literal straight-through expression
/// or the plain hard mask. Forward values are identical; the distinction
/// matters only for which path gradients are taken through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Train,
    Eval,
}

fn offsets_for(shapes: &[LayerShape]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut acc = 0;
    for s in shapes {
        offsets.push(acc);
        acc += s.len();
    }
    offsets
}

impl FlatWeights {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeds::rng(seed, seeds::stream::NET_INIT, 0);
        let shapes = spec.layer_shapes();
        let mut w = Vec::with_capacity(spec.weight_count());
        for s in &shapes {
            let bound = (6.0 / (s.rows + s.cols) as f64).sqrt();
            w.extend((0..s.len()).map(|_| rng.random_range(-bound..=bound)));
        }
        let biases = shapes.iter().map(|s| vec![0.0; s.rows]).collect();
        Self::from_parts(spec.clone(), w, biases)
    }

    pub fn zeros(spec: &NetSpec) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        let biases = shapes.iter().map(|s| vec![0.0; s.rows]).collect();
        Self::from_parts(spec.clone(), vec![0.0; spec.weight_count()], biases)
    }

    pub fn from_parts(spec: NetSpec, w: Vec<f64>, biases: Vec<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        let layer_shapes = spec.layer_shapes();
        let n: usize = layer_shapes.iter().map(LayerShape::len).sum();
        if w.len() != n {
            return Err(Error::Dimension {
                what: "flat weight vector",
                expected: n,
                got: w.len(),
            });
        }
        if biases.len() != layer_shapes.len() {
            return Err(Error::Dimension {
                what: "bias layer count",
                expected: layer_shapes.len(),
                got: biases.len(),
            });
        }
        for (s, b) in layer_shapes.iter().zip(&biases) {
            if b.len() != s.rows {
                return Err(Error::Dimension {
                    what: "bias vector",
                    expected: s.rows,
                    got: b.len(),
                });
            }
        }
        let offsets = offsets_for(&layer_shapes);
        Ok(Self {
            spec,
            layer_shapes,
            offsets,
            w,
            biases,
        })
    }

    /// Concatenates per-layer weight matrices into one vector.
    pub fn flatten(spec: &NetSpec, layers: &[DenseLayer]) -> Result<Self> {
        let shapes = spec.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(Error::Dimension {
                what: "layer count",
                expected: shapes.len(),
                got: layers.len(),
            });
        }
        let mut w = Vec::with_capacity(spec.weight_count());
        for (layer, shape) in layers.iter().zip(&shapes) {
            if layer.shape != *shape || layer.weights.len() != shape.len() {
                return Err(Error::Dimension {
                    what: "layer weights",
                    expected: shape.len(),
                    got: layer.weights.len(),
                });
            }
            w.extend_from_slice(&layer.weights);
        }
        Self::from_parts(
            spec.clone(),
            w,
            layers.iter().map(|l| l.bias.clone()).collect(),
        )
    }

    pub fn unflatten(&self) -> Vec<DenseLayer> {
        self.layer_shapes
            .iter()
            .zip(&self.offsets)
            .zip(&self.biases)
            .map(|((shape, &off), bias)| DenseLayer {
                shape: *shape,
                weights: self.w[off..off + shape.len()].to_vec(),
                bias: bias.clone(),
            })
            .collect()
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn layer_shapes(&self) -> &[LayerShape] {
        &self.layer_shapes
    }

    /// Start of each layer's block in the flat vector.
    pub fn layer_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Total weight count N.
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Same architecture and biases, different weight vector.
    pub fn with_weights(&self, w: Vec<f64>) -> Result<Self> {
        if w.len() != self.w.len() {
            return Err(Error::Dimension {
                what: "flat weight vector",
                expected: self.w.len(),
                got: w.len(),
            });
        }
        Ok(Self { w, ..self.clone() })
    }

    /// Plain gradient step `theta -= lr * grad` on weights and biases.
    pub fn apply_gradient(&mut self, grad: &GradientBundle, lr: f64) {
        for (w, g) in self.w.iter_mut().zip(&grad.d_w) {
            *w -= lr * g;
        }
        for (b, gb) in self.biases.iter_mut().zip(&grad.d_biases) {
            for (x, g) in b.iter_mut().zip(gb) {
                *x -= lr * g;
            }
        }
    }

    /// SHA-256 over the architecture and the exact bit patterns of every
    /// parameter.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in std::iter::once(self.spec.input_dim)
            .chain(self.spec.hidden_dims.iter().copied())
            .chain(std::iter::once(self.spec.output_dim))
        {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.w.iter().chain(self.biases.iter().flatten()) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn network(&self) -> Network<'_> {
        Network {
            shapes: &self.layer_shapes,
            offsets: &self.offsets,
            w: &self.w,
            biases: &self.biases,
        }
    }

    /// A view that uses `w` in place of the stored weights.
    pub fn network_with<'a>(&'a self, w: &'a [f64]) -> Network<'a> {
        debug_assert_eq!(w.len(), self.w.len());
        Network { w, ..self.network() }
    }

    fn check_input(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.spec.input_dim {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.spec.input_dim,
                got: obs.len(),
            });
        }
        Ok(())
    }

    fn check_upstream(&self, upstream: &[f64]) -> Result<()> {
        if upstream.len() != self.spec.output_dim {
            return Err(Error::Dimension {
                what: "upstream gradient",
                expected: self.spec.output_dim,
                got: upstream.len(),
            });
        }
        Ok(())
    }

    fn check_logits(&self, logits: &MaskLogits) -> Result<()> {
        if logits.len() != self.w.len() {
            return Err(Error::Dimension {
                what: "mask logits",
                expected: self.w.len(),
                got: logits.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.check_input(obs)?;
        let mut ws = Workspace::new(self.spec());
        Ok(self.network().forward(obs, &mut ws).to_vec())
    }

    /// Gradients of `upstream . q(obs)` with respect to every parameter.
    pub fn backward(&self, obs: &[f64], upstream: &[f64]) -> Result<GradientBundle> {
        self.check_input(obs)?;
        self.check_upstream(upstream)?;
        let mut ws = Workspace::new(self.spec());
        let net = self.network();
        net.forward(obs, &mut ws);
        let mut grad = GradientBundle::zeros_like(self);
        net.backward(&mut ws, upstream, &mut grad.d_w, Some(&mut grad.d_biases));
        Ok(grad)
    }

    /// Effective weights under a mask.
    ///
    /// `Eval` multiplies by the hard mask. `Train` evaluates the
    /// straight-through expression `w * ((m - p) + p)` literally; for
    /// `m = 1` the subtraction is exact because `p` lies in `[0.5, 1]`, and
    /// for `m = 0` the sum cancels exactly, so both modes agree bit for bit.
    pub fn masked_weights(&self, logits: &MaskLogits, mode: MaskMode) -> Result<Vec<f64>> {
        self.check_logits(logits)?;
        let l = logits.values();
        Ok(match mode {
            MaskMode::Eval => self
                .w
                .iter()
                .zip(l)
                .map(|(w, l)| w * if *l > 0.0 { 1.0 } else { 0.0 })
                .collect(),
            MaskMode::Train => self
                .w
                .iter()
                .zip(l)
                .map(|(w, l)| {
                    let p = sigmoid(*l);
                    let m = if *l > 0.0 { 1.0 } else { 0.0 };
                    w * ((m - p) + p)
                })
                .collect(),
        })
    }

    pub fn masked_forward(&self, logits: &MaskLogits, obs: &[f64], mode: MaskMode) -> Result<Vec<f64>> {
        self.check_input(obs)?;
        let w_eff = self.masked_weights(logits, mode)?;
        let mut ws = Workspace::new(self.spec());
        Ok(self.network_with(&w_eff).forward(obs, &mut ws).to_vec())
    }

    /// Straight-through gradient of `upstream . q_masked(obs)` with respect
    /// to the logits: `dL/dw~_i * w_i * sigmoid'(l_i)`, with `dL/dw~`
    /// evaluated at the hard-masked weights.
    pub fn masked_backward_logits(&self, logits: &MaskLogits, obs: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(obs)?;
        self.check_upstream(upstream)?;
        let w_eff = self.masked_weights(logits, MaskMode::Train)?;
        let net = self.network_with(&w_eff);
        let mut ws = Workspace::new(self.spec());
        net.forward(obs, &mut ws);
        let mut d_w = vec![0.0; self.len()];
        net.backward(&mut ws, upstream, &mut d_w, None);
        Ok(chain_to_logits(&d_w, &self.w, logits.values()))
    }
}

/// `d_l_i = d_w~_i * w_i * sigmoid'(l_i)`.
pub(crate) fn chain_to_logits(d_w_eff: &[f64], w: &[f64], logits: &[f64]) -> Vec<f64> {
    d_w_eff
        .iter()
        .zip(w)
        .zip(logits)
        .map(|((g, w), l)| {
            let p = sigmoid(*l);
            g * w * p * (1.0 - p)
        })
        .collect()
}

/// Scratch buffers for one forward/backward pass.
#[derive(Clone, Debug)]
pub struct Workspace {
    /// `acts[0]` is the input, `acts[k + 1]` the output of layer `k`
    /// (post-rectifier for hidden layers).
    acts: Vec<Vec<f64>>,
    nonzero: Vec<usize>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &NetSpec) -> Self {
        let mut acts = vec![vec![0.0; spec.input_dim]];
        acts.extend(spec.hidden_dims.iter().map(|h| vec![0.0; *h]));
        acts.push(vec![0.0; spec.output_dim]);
        let widest = acts.iter().map(Vec::len).max().unwrap_or(0);
        Self {
            acts,
            nonzero: Vec::with_capacity(widest),
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
        }
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Borrowed view of an MLP: architecture, a weight vector, biases.
#[derive(Clone, Copy, Debug)]
pub struct Network<'a> {
    shapes: &'a [LayerShape],
    offsets: &'a [usize],
    w: &'a [f64],
    biases: &'a [Vec<f64>],
}

impl<'a> Network<'a> {
    /// Forward pass into `ws`; returns the Q-values. Zero inputs are
    /// skipped, which matters for the mostly-zero one-hot observations.
    pub fn forward<'w>(&self, x: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        ws.acts[0].copy_from_slice(x);
        let last = self.shapes.len() - 1;
        for (k, shape) in self.shapes.iter().enumerate() {
            let (inputs, outputs) = ws.acts.split_at_mut(k + 1);
            let input = &inputs[k];
            let out = &mut outputs[0];
            ws.nonzero.clear();
            ws.nonzero
                .extend(input.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i));
            let block = &self.w[self.offsets[k]..self.offsets[k] + shape.len()];
            let sparse = ws.nonzero.len() * 4 <= shape.cols;
            for (r, (o, b)) in out.iter_mut().zip(&self.biases[k]).enumerate() {
                let row = &block[r * shape.cols..(r + 1) * shape.cols];
                let z = if sparse {
                    let mut z = *b;
                    for &c in &ws.nonzero {
                        z += row[c] * input[c];
                    }
                    z
                } else {
                    *b + dot(row, input)
                };
                *o = if k < last { z.max(0.0) } else { z };
            }
        }
        ws.output()
    }

    /// Reverse pass after [`forward`](Self::forward) on the same
    /// workspace. Accumulates (`+=`) into `d_w` and, if given, `d_b`.
    pub fn backward(&self, ws: &mut Workspace, upstream: &[f64], d_w: &mut [f64], mut d_b: Option<&mut [Vec<f64>]>) {
        ws.delta.clear();
        ws.delta.extend_from_slice(upstream);
        for k in (0..self.shapes.len()).rev() {
            let shape = self.shapes[k];
            let input = &ws.acts[k];
            let off = self.offsets[k];
            if let Some(db) = d_b.as_deref_mut() {
                for (g, d) in db[k].iter_mut().zip(&ws.delta) {
                    *g += d;
                }
            }
            ws.nonzero.clear();
            ws.nonzero
                .extend(input.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i));
            let sparse = ws.nonzero.len() * 4 <= shape.cols;
            for (r, d) in ws.delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let grow = &mut d_w[off + r * shape.cols..off + (r + 1) * shape.cols];
                if sparse {
                    for &c in &ws.nonzero {
                        grow[c] += d * input[c];
                    }
                } else {
                    for (g, x) in grow.iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            if k == 0 {
                break;
            }
            // Propagate to the previous layer's post-activation output, then
            // through its rectifier (gradient 0 where the output was 0).
            ws.delta_prev.clear();
            ws.delta_prev.resize(shape.cols, 0.0);
            let block = &self.w[off..off + shape.len()];
            for (r, d) in ws.delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &block[r * shape.cols..(r + 1) * shape.cols];
                for (p, wv) in ws.delta_prev.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            for (p, a) in ws.delta_prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }
}

/// Dot product with four interleaved partial sums, combined in a fixed
/// order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
