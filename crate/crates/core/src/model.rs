//! Fully connected ReLU classifier with hand-written backprop.
//!
//! Parameters live in one flat vector. Layer `l` maps `in_l -> out_l` and
//! stores its weight matrix row-major (`out_l x in_l`, row `o` holds the
//! incoming weights of unit `o`) followed by its `out_l` biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layerwise::ParamLayout;
use crate::linalg::{dot, FlatVector};

/// Row-major examples with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "batch feature width must be >= 1".into(),
            ));
        }
        if inputs.len() != dim * labels.len() {
            return Err(Error::mismatch(
                "batch inputs",
                dim * labels.len(),
                inputs.len(),
            ));
        }
        Ok(Batch {
            inputs,
            dim,
            labels,
        })
    }

    /// A batch with no rows, used as an accumulator.
    pub fn empty(dim: usize) -> Self {
        Batch {
            inputs: Vec::new(),
            dim,
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, features: &[f64], label: usize) {
        debug_assert_eq!(features.len(), self.dim);
        self.inputs.extend_from_slice(features);
        self.labels.push(label);
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut out = Batch::empty(self.dim);
        out.inputs.reserve(indices.len() * self.dim);
        for &i in indices {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }

    pub fn extend(&mut self, other: &Batch) {
        debug_assert_eq!(self.dim, other.dim);
        self.inputs.extend_from_slice(&other.inputs);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub(crate) fn inputs_mut(&mut self) -> &mut [f64] {
        &mut self.inputs
    }
}

/// How parameters are grouped into layers for layerwise updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerGranularity {
    /// A linear layer's weight and bias form one segment.
    #[default]
    Fused,
    /// Weights and biases are separate segments.
    PerTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    params: FlatVector,
    layout: ParamLayout,
    granularity: LayerGranularity,
    seed: u64,
}

impl MlpModel {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(layer_sizes: &[usize], seed: u64, granularity: LayerGranularity) -> Result<Self> {
        let layout = Self::layout_for(layer_sizes, granularity)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layout.total());
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-limit..limit));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(MlpModel {
            layer_sizes: layer_sizes.to_vec(),
            params: params.into(),
            layout,
            granularity,
            seed,
        })
    }

    pub fn from_params(
        layer_sizes: &[usize],
        params: FlatVector,
        seed: u64,
        granularity: LayerGranularity,
    ) -> Result<Self> {
        let layout = Self::layout_for(layer_sizes, granularity)?;
        if params.len() != layout.total() {
            return Err(Error::mismatch(
                "model parameters",
                layout.total(),
                params.len(),
            ));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(MlpModel {
            layer_sizes: layer_sizes.to_vec(),
            params,
            layout,
            granularity,
            seed,
        })
    }

    pub fn layout_for(layer_sizes: &[usize], granularity: LayerGranularity) -> Result<ParamLayout> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes {layer_sizes:?} need an input and an output, all >= 1"
            )));
        }
        let mut segs: Vec<(String, usize)> = Vec::new();
        for (l, w) in layer_sizes.windows(2).enumerate() {
            let (i, o) = (w[0], w[1]);
            match granularity {
                LayerGranularity::Fused => segs.push((format!("layer{l}"), i * o + o)),
                LayerGranularity::PerTensor => {
                    segs.push((format!("layer{l}.weight"), i * o));
                    segs.push((format!("layer{l}.bias"), o));
                }
            }
        }
        ParamLayout::new(segs)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn params(&self) -> &FlatVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut FlatVector {
        &mut self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn granularity(&self) -> LayerGranularity {
        self.granularity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_outputs(&self) -> usize {
        *self.layer_sizes.last().expect("at least two sizes")
    }

    /// (weights, biases) of layer `l`.
    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let offset: usize = self
            .layer_sizes
            .windows(2)
            .take(l)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (i, o) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let p = &self.params[offset..offset + i * o + o];
        p.split_at(i * o)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.dim() != self.layer_sizes[0] {
            return Err(Error::mismatch(
                "input width",
                self.layer_sizes[0],
                batch.dim(),
            ));
        }
        Ok(())
    }

    /// Pre-activations of every layer for `batch`, row-major per layer.
    fn pre_activations(&self, batch: &Batch) -> Vec<Vec<f64>> {
        let n = batch.len();
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.layer_sizes.len() - 1);
        let mut act: Vec<f64> = batch.inputs.clone();
        let last = self.layer_sizes.len() - 2;
        for l in 0..=last {
            let (i, o) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let (w, b) = self.layer(l);
            let mut z = vec![0.0; n * o];
            for r in 0..n {
                let a = &act[r * i..(r + 1) * i];
                for u in 0..o {
                    z[r * o + u] = b[u] + dot(&w[u * i..(u + 1) * i], a);
                }
            }
            if l < last {
                act = z.iter().map(|x| x.max(0.0)).collect();
            }
            zs.push(z);
        }
        zs
    }

    /// Logits, row-major `batch.len() x outputs`.
    pub fn forward(&self, batch: &Batch) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        Ok(self
            .pre_activations(batch)
            .pop()
            .expect("at least one layer"))
    }

    /// Mean softmax cross-entropy; `mask` restricts the softmax to those classes.
    pub fn loss(&self, batch: &Batch, mask: Option<&[usize]>) -> Result<f64> {
        let logits = self.forward(batch)?;
        let c = self.num_outputs();
        let classes = active_classes(c, mask)?;
        let mut total = 0.0;
        for (r, &y) in batch.labels.iter().enumerate() {
            check_label(y, c, &classes)?;
            let row = &logits[r * c..(r + 1) * c];
            total += log_sum_exp(row, &classes) - row[y];
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Mean cross-entropy and its gradient with respect to the flat parameters.
    pub fn loss_and_grad(
        &self,
        batch: &Batch,
        mask: Option<&[usize]>,
    ) -> Result<(f64, FlatVector)> {
        self.check_batch(batch)?;
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let n = batch.len();
        let c = self.num_outputs();
        let classes = active_classes(c, mask)?;
        let zs = self.pre_activations(batch);
        let logits = zs.last().expect("at least one layer");

        let mut loss = 0.0;
        let mut delta = vec![0.0; n * c];
        let inv_n = 1.0 / n as f64;
        for (r, &y) in batch.labels.iter().enumerate() {
            check_label(y, c, &classes)?;
            let row = &logits[r * c..(r + 1) * c];
            let lse = log_sum_exp(row, &classes);
            loss += lse - row[y];
            for &k in &classes {
                delta[r * c + k] = (row[k] - lse).exp() * inv_n;
            }
            delta[r * c + y] -= inv_n;
        }
        loss *= inv_n;

        let mut grad = vec![0.0; self.params.len()];
        let n_layers = self.layer_sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.layer_sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }

        for l in (0..n_layers).rev() {
            let (i, o) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let input: Vec<f64> = if l == 0 {
                batch.inputs.clone()
            } else {
                zs[l - 1].iter().map(|x| x.max(0.0)).collect()
            };
            let (gw, gb) = grad[offsets[l]..offsets[l] + i * o + o].split_at_mut(i * o);
            for r in 0..n {
                let a = &input[r * i..(r + 1) * i];
                for u in 0..o {
                    let d = delta[r * o + u];
                    if d == 0.0 {
                        continue;
                    }
                    gb[u] += d;
                    for (g, x) in gw[u * i..(u + 1) * i].iter_mut().zip(a) {
                        *g += d * x;
                    }
                }
            }
            if l > 0 {
                let (w, _) = self.layer(l);
                let z_prev = &zs[l - 1];
                let mut next = vec![0.0; n * i];
                for r in 0..n {
                    let out = &mut next[r * i..(r + 1) * i];
                    for u in 0..o {
                        let d = delta[r * o + u];
                        if d == 0.0 {
                            continue;
                        }
                        for (acc, wv) in out.iter_mut().zip(&w[u * i..(u + 1) * i]) {
                            *acc += d * wv;
                        }
                    }
                    // ReLU'(0) = 0
                    for (acc, z) in out.iter_mut().zip(&z_prev[r * i..(r + 1) * i]) {
                        if *z <= 0.0 {
                            *acc = 0.0;
                        }
                    }
                }
                delta = next;
            }
        }
        Ok((loss, grad.into()))
    }

    /// `θ ← θ − lr · w`
    pub fn apply_update(&mut self, w: &[f64], lr: f64) -> Result<()> {
        if w.len() != self.params.len() {
            return Err(Error::mismatch("update", self.params.len(), w.len()));
        }
        if !(lr >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {lr} must be non-negative"
            )));
        }
        if lr == 0.0 {
            return Ok(());
        }
        self.params.axpy(-lr, w);
        Ok(())
    }

    /// Fraction of rows whose arg-max (over `mask`, lowest index on ties)
    /// equals the label.
    pub fn evaluate(&self, batch: &Batch, mask: Option<&[usize]>) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let logits = self.forward(batch)?;
        let c = self.num_outputs();
        let classes = active_classes(c, mask)?;
        let mut correct = 0usize;
        for (r, &y) in batch.labels.iter().enumerate() {
            let row = &logits[r * c..(r + 1) * c];
            let mut best = classes[0];
            for &k in &classes[1..] {
                if row[k] > row[best] {
                    best = k;
                }
            }
            if best == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / batch.len() as f64)
    }
}

fn active_classes(outputs: usize, mask: Option<&[usize]>) -> Result<Vec<usize>> {
    match mask {
        None => Ok((0..outputs).collect()),
        Some(m) => {
            let mut v = m.to_vec();
            v.sort_unstable();
            v.dedup();
            if v.is_empty() {
                return Err(Error::Empty("class mask"));
            }
            if let Some(&bad) = v.iter().find(|&&k| k >= outputs) {
                return Err(Error::InvalidLabel {
                    label: bad,
                    classes: outputs,
                });
            }
            Ok(v)
        }
    }
}

fn check_label(y: usize, outputs: usize, classes: &[usize]) -> Result<()> {
    if y >= outputs {
        return Err(Error::InvalidLabel {
            label: y,
            classes: outputs,
        });
    }
    if classes.len() != outputs && classes.binary_search(&y).is_err() {
        return Err(Error::MaskedLabel {
            label: y,
            mask: classes.to_vec(),
        });
    }
    Ok(())
}

fn log_sum_exp(row: &[f64], classes: &[usize]) -> f64 {
    let max = classes
        .iter()
        .map(|&k| row[k])
        .fold(f64::NEG_INFINITY, f64::max);
    max + classes
        .iter()
        .map(|&k| (row[k] - max).exp())
        .sum::<f64>()
        .ln()
}
