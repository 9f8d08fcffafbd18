//! Small differentiable networks over one flat parameter vector.
//!
//! A [`NetworkSpec`] describes the architecture; [`Network`] compiles it into
//! a layout of parameter segments and a list of stages that run forward and
//! backward over example-major `f64` batches.
//!
//! Dense weights are stored unit-major: the first `d_in` entries are the
//! incoming weights of hidden unit 0, the next `d_in` those of unit 1, and so
//! on. Conv weights are `[filters][in_channels][3][3]`. Every layer with
//! parameters owns a weight segment followed directly by its bias segment.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, Dataset};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    #[inline]
    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    #[inline]
    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    /// Fully connected layer; image inputs are flattened channel-planar.
    Dense { units: usize },
    /// 3×3 convolution with stride 1.
    Conv3x3 {
        filters: usize,
        #[serde(default)]
        padding: Padding,
    },
    Relu,
    /// 2×2 average pooling with stride 2 (odd trailing rows/columns dropped).
    AvgPool2,
    Flatten,
    /// Final dense layer producing the class logits.
    Head { classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_shape: InputShape,
    pub layers: Vec<Layer>,
    pub classes: usize,
}

impl NetworkSpec {
    /// `Flatten → (Dense → ReLU)* → Head`.
    pub fn mlp(input_shape: InputShape, hidden: &[usize], classes: usize) -> Self {
        let mut layers = vec![Layer::Flatten];
        for &units in hidden {
            layers.push(Layer::Dense { units });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Head { classes });
        Self {
            input_shape,
            layers,
            classes,
        }
    }

    /// `(Conv3x3 → ReLU [→ AvgPool2])* → Flatten → Head`.
    pub fn cnn(
        input_shape: InputShape,
        filters: &[usize],
        padding: Padding,
        pool: bool,
        classes: usize,
    ) -> Self {
        let mut layers = Vec::new();
        for &f in filters {
            layers.push(Layer::Conv3x3 { filters: f, padding });
            layers.push(Layer::Relu);
            if pool {
                layers.push(Layer::AvgPool2);
            }
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Head { classes });
        Self {
            input_shape,
            layers,
            classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

/// A contiguous run of parameters belonging to one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Index into [`NetworkSpec::layers`].
    pub layer: usize,
    pub kind: ParamKind,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Entries per leading index (a dense unit's fan-in, a conv filter's size).
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }
}

/// Segments that partition `[0, d)` in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.offset != next {
                return Err(Error::invalid(format!(
                    "segment of layer {} starts at {} but the previous one ends at {next}",
                    s.layer, s.offset
                )));
            }
            if s.is_empty() {
                return Err(Error::invalid(format!("segment of layer {} is empty", s.layer)));
            }
            next += s.len();
        }
        Ok(Self {
            segments,
            total: next,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total parameter count `d`.
    #[inline]
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segment(&self, layer: usize, kind: ParamKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.layer == layer && s.kind == kind)
    }

    /// Whether `idx` is a legal block boundary: a segment edge, or a row edge
    /// inside a segment (unit-level granularity).
    pub fn is_boundary(&self, idx: usize) -> bool {
        if idx == 0 || idx == self.total {
            return true;
        }
        self.segments
            .iter()
            .find(|s| s.range().contains(&idx))
            .is_some_and(|s| (idx - s.offset) % s.row_len().max(1) == 0)
    }

    /// Splits a flat vector into one tensor per segment.
    pub fn unflatten(&self, values: &[f64]) -> Result<Vec<Vec<f64>>> {
        if values.len() != self.total {
            return Err(Error::invalid(format!(
                "vector of length {} does not match layout of {}",
                values.len(),
                self.total
            )));
        }
        Ok(self.segments.iter().map(|s| values[s.range()].to_vec()).collect())
    }

    pub fn flatten(&self, tensors: &[Vec<f64>]) -> Result<Vec<f64>> {
        if tensors.len() != self.segments.len()
            || tensors.iter().zip(&self.segments).any(|(t, s)| t.len() != s.len())
        {
            return Err(Error::invalid("tensors do not match the layout segments"));
        }
        Ok(tensors.concat())
    }
}

/// Flat parameter vector `w ∈ R^d` together with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::invalid(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_lr")]
    pub learning_rate: f64,
    #[serde(default = "TrainConfig::default_batch")]
    pub batch_size: usize,
    pub epochs_per_round: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "TrainConfig::default_momentum")]
    pub momentum: f64,
}

impl TrainConfig {
    fn default_lr() -> f64 {
        0.05
    }
    fn default_batch() -> usize {
        128
    }
    fn default_momentum() -> f64 {
        0.9
    }

    pub fn new(epochs_per_round: usize, seed: u64) -> Self {
        Self {
            learning_rate: Self::default_lr(),
            batch_size: Self::default_batch(),
            epochs_per_round,
            seed,
            momentum: Self::default_momentum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Shape of the input a dense layer consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseInfo {
    pub layer: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub weight_offset: usize,
    /// Image geometry feeding this layer, when it reads a flattened image.
    pub image: Option<InputShape>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    fn len(self) -> usize {
        match self {
            Shape::Image { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Dense {
        d_in: usize,
        d_out: usize,
        w: usize,
        b: usize,
    },
    Conv {
        in_c: usize,
        out_c: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        pad: usize,
        w: usize,
        b: usize,
    },
    Relu,
    AvgPool {
        c: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
    Identity,
}

#[derive(Clone, Debug)]
struct Stage {
    op: Op,
    in_len: usize,
    out_len: usize,
}

/// A compiled [`NetworkSpec`].
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    layout: Arc<ParamLayout>,
    stages: Vec<Stage>,
    dense: Vec<DenseInfo>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let InputShape {
            height,
            width,
            channels,
        } = spec.input_shape;
        if spec.input_shape.is_empty() {
            return Err(Error::invalid("input_shape must be non-empty"));
        }
        if spec.classes < 1 {
            return Err(Error::invalid("classes must be at least 1"));
        }
        let mut shape = Shape::Image {
            c: channels,
            h: height,
            w: width,
        };
        // Image geometry that a flat shape was produced from, if any.
        let mut origin: Option<InputShape> = Some(spec.input_shape);
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut stages = Vec::with_capacity(spec.layers.len());
        let mut dense = Vec::new();
        let mut push_params = |layer: usize, wshape: Vec<usize>, bias: usize| {
            let w = offset;
            let wlen: usize = wshape.iter().product();
            segments.push(Segment {
                layer,
                kind: ParamKind::Weight,
                offset: w,
                shape: wshape,
            });
            segments.push(Segment {
                layer,
                kind: ParamKind::Bias,
                offset: w + wlen,
                shape: vec![bias],
            });
            offset = w + wlen + bias;
            (w, w + wlen)
        };

        for (idx, layer) in spec.layers.iter().enumerate() {
            let in_len = shape.len();
            let is_last = idx + 1 == spec.layers.len();
            let op = match *layer {
                Layer::Dense { units } | Layer::Head { classes: units } => {
                    if let Layer::Head { classes } = *layer {
                        if !is_last || classes != spec.classes {
                            return Err(Error::invalid(format!(
                                "layer {idx}: head must be the last layer and have {} classes",
                                spec.classes
                            )));
                        }
                    }
                    if units == 0 {
                        return Err(Error::invalid(format!("layer {idx}: dense layer needs units")));
                    }
                    let image = match shape {
                        Shape::Image { c, h, w } => Some(InputShape::new(h, w, c)),
                        Shape::Flat(_) => origin,
                    };
                    let (w, b) = push_params(idx, vec![units, in_len], units);
                    dense.push(DenseInfo {
                        layer: idx,
                        d_in: in_len,
                        d_out: units,
                        weight_offset: w,
                        image,
                    });
                    shape = Shape::Flat(units);
                    origin = None;
                    Op::Dense {
                        d_in: in_len,
                        d_out: units,
                        w,
                        b,
                    }
                }
                Layer::Conv3x3 { filters, padding } => {
                    let Shape::Image { c, h, w } = shape else {
                        return Err(Error::invalid(format!("layer {idx}: conv needs an image input")));
                    };
                    let pad = match padding {
                        Padding::Same => 1,
                        Padding::Valid => 0,
                    };
                    if filters == 0 || h + 2 * pad < 3 || w + 2 * pad < 3 {
                        return Err(Error::invalid(format!("layer {idx}: conv output would be empty")));
                    }
                    let (out_h, out_w) = (h + 2 * pad - 2, w + 2 * pad - 2);
                    let (wo, bo) = push_params(idx, vec![filters, c, 3, 3], filters);
                    shape = Shape::Image {
                        c: filters,
                        h: out_h,
                        w: out_w,
                    };
                    origin = Some(InputShape::new(out_h, out_w, filters));
                    Op::Conv {
                        in_c: c,
                        out_c: filters,
                        in_h: h,
                        in_w: w,
                        out_h,
                        out_w,
                        pad,
                        w: wo,
                        b: bo,
                    }
                }
                Layer::Relu => Op::Relu,
                Layer::AvgPool2 => {
                    let Shape::Image { c, h, w } = shape else {
                        return Err(Error::invalid(format!("layer {idx}: pooling needs an image input")));
                    };
                    if h < 2 || w < 2 {
                        return Err(Error::invalid(format!("layer {idx}: image too small to pool")));
                    }
                    shape = Shape::Image { c, h: h / 2, w: w / 2 };
                    origin = Some(InputShape::new(h / 2, w / 2, c));
                    Op::AvgPool {
                        c,
                        in_h: h,
                        in_w: w,
                        out_h: h / 2,
                        out_w: w / 2,
                    }
                }
                Layer::Flatten => {
                    shape = Shape::Flat(in_len);
                    Op::Identity
                }
            };
            stages.push(Stage {
                op,
                in_len,
                out_len: shape.len(),
            });
        }
        if !matches!(spec.layers.last(), Some(Layer::Head { .. })) {
            return Err(Error::invalid("the last layer must be a head"));
        }
        let layout = Arc::new(ParamLayout::new(segments)?);
        Ok(Self {
            spec,
            layout,
            stages,
            dense,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Number of trainable parameters `d`.
    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_shape.len()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Geometry of a dense (or head) layer.
    pub fn dense_info(&self, layer: usize) -> Result<DenseInfo> {
        self.dense
            .iter()
            .find(|d| d.layer == layer)
            .copied()
            .ok_or_else(|| Error::invalid(format!("layer {layer} is not a dense layer")))
    }

    /// Fan-in scaled uniform initialization; biases are zero.
    ///
    /// Weights are drawn in `f32` so the initialization is exactly
    /// representable in single-precision checkpoints.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = rng::seeded(seed);
        let mut values = vec![0.0; self.layout.len()];
        for seg in self.layout.segments() {
            if seg.kind != ParamKind::Weight {
                continue;
            }
            let bound = (6.0 / seg.row_len() as f64).sqrt() as f32;
            for v in &mut values[seg.range()] {
                *v = rng.random_range(-bound..=bound) as f64;
            }
        }
        ParamVector {
            layout: self.layout.clone(),
            values,
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::invalid(format!(
                "parameter vector has length {}, network has {}",
                params.len(),
                self.layout.len()
            )));
        }
        Ok(())
    }

    fn batch_size_of(&self, inputs: &[f64]) -> Result<usize> {
        let len = self.input_len();
        if inputs.len() % len != 0 {
            return Err(Error::invalid(format!(
                "input batch of {} values is not a multiple of the input size {len}",
                inputs.len()
            )));
        }
        Ok(inputs.len() / len)
    }

    /// Logits, example-major `(batch, classes)`.
    pub fn forward(&self, params: &[f64], inputs: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let n = self.batch_size_of(inputs)?;
        let mut act = inputs.to_vec();
        for stage in &self.stages {
            act = stage.forward(params, &act, n);
        }
        Ok(act)
    }

    /// Argmax class per example; ties go to the lowest class index.
    pub fn predict(&self, params: &[f64], inputs: &[f64]) -> Result<Vec<usize>> {
        let logits = self.forward(params, inputs)?;
        Ok(logits.chunks_exact(self.classes()).map(argmax).collect())
    }

    /// Mean softmax cross-entropy and its gradient with respect to `params`.
    pub fn loss_and_grad(&self, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; params.len()];
        let loss = self.loss_and_grad_into(params, batch, &mut grad)?;
        Ok((loss, grad))
    }

    /// As [`Network::loss_and_grad`], overwriting `grad`.
    pub fn loss_and_grad_into(&self, params: &[f64], batch: &Batch, grad: &mut [f64]) -> Result<f64> {
        self.check_params(params)?;
        if grad.len() != params.len() {
            return Err(Error::invalid("gradient buffer does not match parameters"));
        }
        let n = self.batch_size_of(&batch.inputs)?;
        if n != batch.labels.len() || n == 0 {
            return Err(Error::invalid(format!(
                "batch has {n} inputs and {} labels",
                batch.labels.len()
            )));
        }
        let k = self.classes();
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} is not below {k}")));
        }

        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.stages.len() + 1);
        acts.push(batch.inputs.clone());
        for stage in &self.stages {
            let next = stage.forward(params, acts.last().unwrap(), n);
            acts.push(next);
        }

        let logits = acts.last().unwrap();
        let mut delta = vec![0.0; logits.len()];
        let mut loss = 0.0;
        let scale = 1.0 / n as f64;
        for ((z, d), &y) in logits
            .chunks_exact(k)
            .zip(delta.chunks_exact_mut(k))
            .zip(&batch.labels)
        {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - z[y];
            for (di, zi) in d.iter_mut().zip(z) {
                *di = (zi - lse).exp() * scale;
            }
            d[y] -= scale;
        }

        grad.fill(0.0);
        for (i, stage) in self.stages.iter().enumerate().rev() {
            let need_input_grad = i > 0;
            delta = stage.backward(params, &acts[i], &acts[i + 1], &delta, n, grad, need_input_grad);
        }
        Ok(loss * scale)
    }

    /// Mean loss over a batch.
    pub fn loss(&self, params: &[f64], batch: &Batch) -> Result<f64> {
        let logits = self.forward(params, &batch.inputs)?;
        let k = self.classes();
        let mut loss = 0.0;
        for (z, &y) in logits.chunks_exact(k).zip(&batch.labels) {
            if y >= k {
                return Err(Error::invalid(format!("label {y} is not below {k}")));
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - z[y];
        }
        Ok(loss / batch.labels.len().max(1) as f64)
    }

    /// Fraction of examples whose argmax prediction matches the label.
    pub fn evaluate(&self, params: &[f64], data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty dataset"));
        }
        const CHUNK: usize = 512;
        let mut correct = 0usize;
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(CHUNK) {
            let batch = data.gather(chunk);
            let preds = self.predict(params, &batch.inputs)?;
            correct += preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Minibatch SGD from `w_init` for `cfg.epochs_per_round` epochs.
    ///
    /// `step_hook`, when given, rewrites every gradient before the update.
    pub fn train(
        &self,
        w_init: &ParamVector,
        data: &Dataset,
        cfg: &TrainConfig,
        mut step_hook: Option<&mut dyn FnMut(&mut [f64])>,
    ) -> Result<ParamVector> {
        self.check_params(w_init.values())?;
        let mut w = w_init.values().to_vec();
        sgd(&mut w, data, cfg, |state, batch, grad| {
            let loss = self.loss_and_grad_into(state, batch, grad)?;
            if let Some(hook) = step_hook.as_mut() {
                hook(grad);
            }
            Ok(loss)
        })?;
        w_init.with_values(w)
    }
}

/// Minibatch SGD with heavy-ball momentum over an arbitrary state vector.
///
/// `grad_fn(state, batch, grad)` writes the gradient with respect to `state`
/// and returns the batch loss. The update is `v ← μv + g; state ← state − ηv`.
/// Epoch `e` shuffles with a seed derived from `(cfg.seed, e)`.
pub fn sgd<F>(state: &mut [f64], data: &Dataset, cfg: &TrainConfig, mut grad_fn: F) -> Result<()>
where
    F: FnMut(&[f64], &Batch, &mut [f64]) -> Result<f64>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut velocity = vec![0.0; state.len()];
    let mut grad = vec![0.0; state.len()];
    for epoch in 0..cfg.epochs_per_round {
        for batch in batches(data, cfg.batch_size, rng::derive(cfg.seed, epoch as u64)) {
            let loss = grad_fn(state, &batch, &mut grad)?;
            if !loss.is_finite() {
                return Err(Error::InvalidState(format!("loss diverged in epoch {epoch}")));
            }
            for ((s, v), &g) in state.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *s -= cfg.learning_rate * *v;
            }
        }
    }
    Ok(())
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

impl Stage {
    fn forward(&self, params: &[f64], input: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.out_len];
        match self.op {
            Op::Dense { d_in, d_out, w, b } => {
                let weights = &params[w..w + d_in * d_out];
                let bias = &params[b..b + d_out];
                for (x, o) in input.chunks_exact(d_in).zip(out.chunks_exact_mut(d_out)) {
                    for ((oj, row), &bj) in o.iter_mut().zip(weights.chunks_exact(d_in)).zip(bias) {
                        *oj = bj + crate::linalg::dot(row, x);
                    }
                }
            }
            Op::Conv {
                in_c,
                out_c,
                in_h,
                in_w,
                out_h,
                out_w,
                pad,
                w,
                b,
            } => {
                let in_plane = in_h * in_w;
                let out_plane = out_h * out_w;
                for (x, o) in input.chunks_exact(self.in_len).zip(out.chunks_exact_mut(self.out_len)) {
                    for f in 0..out_c {
                        let dst = &mut o[f * out_plane..(f + 1) * out_plane];
                        dst.fill(params[b + f]);
                        for c in 0..in_c {
                            let src = &x[c * in_plane..(c + 1) * in_plane];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = params[w + ((f * in_c + c) * 3 + ky) * 3 + kx];
                                    conv_tap(src, dst, wv, ky, kx, pad, in_h, in_w, out_h, out_w);
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu => {
                for (o, &x) in out.iter_mut().zip(input) {
                    *o = x.max(0.0);
                }
            }
            Op::AvgPool {
                c,
                in_h,
                in_w,
                out_h,
                out_w,
            } => {
                for (x, o) in input.chunks_exact(self.in_len).zip(out.chunks_exact_mut(self.out_len)) {
                    for ch in 0..c {
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                let base = ch * in_h * in_w + 2 * oy * in_w + 2 * ox;
                                o[(ch * out_h + oy) * out_w + ox] =
                                    0.25 * (x[base] + x[base + 1] + x[base + in_w] + x[base + in_w + 1]);
                            }
                        }
                    }
                }
            }
            Op::Identity => out.copy_from_slice(input),
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to this stage's input (empty when not requested).
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        output: &[f64],
        dout: &[f64],
        n: usize,
        grad: &mut [f64],
        need_input_grad: bool,
    ) -> Vec<f64> {
        let mut din = if need_input_grad {
            vec![0.0; n * self.in_len]
        } else {
            Vec::new()
        };
        match self.op {
            Op::Dense { d_in, d_out, w, b } => {
                let weights = &params[w..w + d_in * d_out];
                let (gw, gb) = grad[w..b + d_out].split_at_mut(d_in * d_out);
                for (bi, (x, d)) in input.chunks_exact(d_in).zip(dout.chunks_exact(d_out)).enumerate() {
                    for (j, &dj) in d.iter().enumerate() {
                        if dj == 0.0 {
                            continue;
                        }
                        gb[j] += dj;
                        for (g, &xi) in gw[j * d_in..(j + 1) * d_in].iter_mut().zip(x) {
                            *g += dj * xi;
                        }
                        if need_input_grad {
                            let dx = &mut din[bi * d_in..(bi + 1) * d_in];
                            for (g, &wv) in dx.iter_mut().zip(&weights[j * d_in..(j + 1) * d_in]) {
                                *g += dj * wv;
                            }
                        }
                    }
                }
            }
            Op::Conv {
                in_c,
                out_c,
                in_h,
                in_w,
                out_h,
                out_w,
                pad,
                w,
                b,
            } => {
                let in_plane = in_h * in_w;
                let out_plane = out_h * out_w;
                for bi in 0..n {
                    let x = &input[bi * self.in_len..(bi + 1) * self.in_len];
                    let d = &dout[bi * self.out_len..(bi + 1) * self.out_len];
                    for f in 0..out_c {
                        let df = &d[f * out_plane..(f + 1) * out_plane];
                        grad[b + f] += df.iter().sum::<f64>();
                        for c in 0..in_c {
                            let src = &x[c * in_plane..(c + 1) * in_plane];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let widx = w + ((f * in_c + c) * 3 + ky) * 3 + kx;
                                    grad[widx] += conv_tap_grad(src, df, ky, kx, pad, in_h, in_w, out_h, out_w);
                                    if need_input_grad {
                                        let dx = &mut din[bi * self.in_len + c * in_plane..][..in_plane];
                                        conv_tap_transpose(df, dx, params[widx], ky, kx, pad, in_h, in_w, out_h, out_w);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu => {
                if need_input_grad {
                    for ((g, &o), &d) in din.iter_mut().zip(output).zip(dout) {
                        *g = if o > 0.0 { d } else { 0.0 };
                    }
                }
            }
            Op::AvgPool {
                c,
                in_h,
                in_w,
                out_h,
                out_w,
            } => {
                if need_input_grad {
                    for bi in 0..n {
                        let d = &dout[bi * self.out_len..(bi + 1) * self.out_len];
                        let dx = &mut din[bi * self.in_len..(bi + 1) * self.in_len];
                        for ch in 0..c {
                            for oy in 0..out_h {
                                for ox in 0..out_w {
                                    let g = 0.25 * d[(ch * out_h + oy) * out_w + ox];
                                    let base = ch * in_h * in_w + 2 * oy * in_w + 2 * ox;
                                    dx[base] += g;
                                    dx[base + 1] += g;
                                    dx[base + in_w] += g;
                                    dx[base + in_w + 1] += g;
                                }
                            }
                        }
                    }
                }
            }
            Op::Identity => {
                if need_input_grad {
                    din.copy_from_slice(dout);
                }
            }
        }
        din
    }
}

/// Output columns `ox` for which `ox + kx − pad` is a valid input column.
#[inline]
fn tap_range(k: usize, pad: usize, in_len: usize, out_len: usize) -> Range<usize> {
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    lo..hi.max(lo)
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap(
    src: &[f64],
    dst: &mut [f64],
    wv: f64,
    ky: usize,
    kx: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) {
    let xs = tap_range(kx, pad, in_w, out_w);
    for oy in tap_range(ky, pad, in_h, out_h) {
        let iy = oy + ky - pad;
        let srow = &src[iy * in_w + xs.start + kx - pad..][..xs.len()];
        let drow = &mut dst[oy * out_w + xs.start..][..xs.len()];
        for (d, &s) in drow.iter_mut().zip(srow) {
            *d += wv * s;
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap_grad(
    src: &[f64],
    dout: &[f64],
    ky: usize,
    kx: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> f64 {
    let xs = tap_range(kx, pad, in_w, out_w);
    let mut acc = 0.0;
    for oy in tap_range(ky, pad, in_h, out_h) {
        let iy = oy + ky - pad;
        let srow = &src[iy * in_w + xs.start + kx - pad..][..xs.len()];
        let drow = &dout[oy * out_w + xs.start..][..xs.len()];
        acc += crate::linalg::dot(srow, drow);
    }
    acc
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_tap_transpose(
    dout: &[f64],
    din: &mut [f64],
    wv: f64,
    ky: usize,
    kx: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) {
    let xs = tap_range(kx, pad, in_w, out_w);
    for oy in tap_range(ky, pad, in_h, out_h) {
        let iy = oy + ky - pad;
        let drow = &dout[oy * out_w + xs.start..][..xs.len()];
        let irow = &mut din[iy * in_w + xs.start + kx - pad..][..xs.len()];
        for (i, &d) in irow.iter_mut().zip(drow) {
            *i += wv * d;
        }
    }
}
