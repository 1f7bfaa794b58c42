//! The top prediction filter: a class-agnostic existence classifier that
//! reads a single correlation map.
//!
//! Forward pass:
//!
//! ```text
//! global = avg(relu(standardize(c)))        (C)
//! local  = avg(maxpool(c))                  (C)
//! v      = [local, global]                  (2C)
//! logits = W2 relu(W1 v + b1) + b2          (2)
//! probs  = softmax(logits)                  index 0 = present
//! ```
//!
//! Pooling paths carry no parameters; their backward passes are only needed
//! when the loss must reach the fusion projections that produced `c`.

mod train;

pub use train::{train, Phase, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::EpisodeError;
use crate::tensor::{self, channel_moments, dot, FeatureMap, Matrix, TensorError, Vector};

pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_EPS: f32 = 1e-5;
/// Output neuron carrying the "class is present" logit.
pub const POSITIVE: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TpfError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("model expects {expected}-channel maps, got {found}")]
    Channels { expected: usize, found: usize },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("no training samples could be drawn from the episodes")]
    NoSamples,
    #[error("training diverged in epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TpfError>;

/// How the local branch pools before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalPooling {
    /// 2x2 window, stride 2.
    #[default]
    Window2,
    /// One maximum per channel.
    GlobalMax,
}

impl LocalPooling {
    pub fn tag(self) -> u32 {
        match self {
            LocalPooling::Window2 => 0,
            LocalPooling::GlobalMax => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(LocalPooling::Window2),
            1 => Some(LocalPooling::GlobalMax),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Present,
    Absent,
}

impl Label {
    fn target(self) -> usize {
        match self {
            Label::Present => POSITIVE,
            Label::Absent => 1 - POSITIVE,
        }
    }
}

/// `avg(relu(standardize(c)))`, one entry per channel.
pub fn global_representation(c: &FeatureMap, eps: f32) -> Vector {
    tensor::spatial_average(&tensor::relu(&tensor::spatial_standardize(c, eps)))
}

/// `avg(maxpool(c))`, one entry per channel.
pub fn local_representation(c: &FeatureMap, pooling: LocalPooling) -> Result<Vector> {
    let pooled = match pooling {
        LocalPooling::Window2 => tensor::max_pool2(c)?,
        LocalPooling::GlobalMax => tensor::global_max_pool(c),
    };
    Ok(tensor::spatial_average(&pooled))
}

/// Local representation followed by the global one.
pub fn confidence_vector(c: &FeatureMap, eps: f32, pooling: LocalPooling) -> Result<Vector> {
    let local = local_representation(c, pooling)?;
    Ok(tensor::concat(&local, &global_representation(c, eps)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub logits: [f32; 2],
    pub probs: [f32; 2],
}

impl Prediction {
    pub fn score(&self) -> f32 {
        self.probs[POSITIVE]
    }

    pub fn is_present(&self) -> bool {
        self.probs[POSITIVE] >= self.probs[1 - POSITIVE]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpfModel {
    in_channels: usize,
    w1: Matrix,
    b1: Vector,
    w2: Matrix,
    b2: Vector,
    eps: f32,
    pooling: LocalPooling,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Matrix> {
    let bound = (6.0 / (rows + cols) as f64).sqrt() as f32;
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(Matrix::new(rows, cols, data)?)
}

impl TpfModel {
    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init(in_channels: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = glorot(&mut rng, hidden, 2 * in_channels)?;
        let w2 = glorot(&mut rng, 2, hidden)?;
        Self::from_parts(in_channels, w1, Vector::zeros(hidden)?, w2, Vector::zeros(2)?)
    }

    pub fn zeros(in_channels: usize, hidden: usize) -> Result<Self> {
        Self::from_parts(
            in_channels,
            Matrix::zeros(hidden, 2 * in_channels)?,
            Vector::zeros(hidden)?,
            Matrix::zeros(2, hidden)?,
            Vector::zeros(2)?,
        )
    }

    pub fn from_parts(
        in_channels: usize,
        w1: Matrix,
        b1: Vector,
        w2: Matrix,
        b2: Vector,
    ) -> Result<Self> {
        let hidden = w1.rows();
        if in_channels == 0
            || w1.cols() != 2 * in_channels
            || b1.dim() != hidden
            || w2.rows() != 2
            || w2.cols() != hidden
            || b2.dim() != 2
        {
            return Err(TpfError::Config(format!(
                "inconsistent shapes: C={in_channels}, w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                w1.rows(),
                w1.cols(),
                b1.dim(),
                w2.rows(),
                w2.cols(),
                b2.dim()
            )));
        }
        Ok(Self {
            in_channels,
            w1,
            b1,
            w2,
            b2,
            eps: DEFAULT_EPS,
            pooling: LocalPooling::default(),
        })
    }

    pub fn with_eps(mut self, eps: f32) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(TpfError::Config(format!("eps must be positive, got {eps}")));
        }
        self.eps = eps;
        Ok(self)
    }

    pub fn with_pooling(mut self, pooling: LocalPooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn eps(&self) -> f32 {
        self.eps
    }

    pub fn pooling(&self) -> LocalPooling {
        self.pooling
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn b1(&self) -> &Vector {
        &self.b1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn b2(&self) -> &Vector {
        &self.b2
    }

    /// Parameter slices in checkpoint order: w1, b1, w2, b2.
    pub fn params_mut(&mut self) -> [&mut [f32]; 4] {
        [
            self.w1.data_mut(),
            self.b1.as_mut_slice(),
            self.w2.data_mut(),
            self.b2.as_mut_slice(),
        ]
    }

    fn check_channels(&self, c: &FeatureMap) -> Result<()> {
        if c.channels() != self.in_channels {
            return Err(TpfError::Channels { expected: self.in_channels, found: c.channels() });
        }
        Ok(())
    }

    pub fn confidence_vector(&self, c: &FeatureMap) -> Result<Vector> {
        self.check_channels(c)?;
        confidence_vector(c, self.eps, self.pooling)
    }

    fn forward(&self, v: &Vector) -> Result<Forward> {
        let z1 = tensor::affine(&self.w1, &self.b1, v)?;
        let h: Vec<f32> = z1.as_slice().iter().map(|&z| z.max(0.0)).collect();
        let logits = [
            (dot(self.w2.row(0), &h) + f64::from(self.b2.as_slice()[0])) as f32,
            (dot(self.w2.row(1), &h) + f64::from(self.b2.as_slice()[1])) as f32,
        ];
        Ok(Forward { z1: z1.into_vec(), h, logits })
    }

    pub fn predict(&self, c: &FeatureMap) -> Result<Prediction> {
        let v = self.confidence_vector(c)?;
        let logits = self.forward(&v)?.logits;
        Ok(Prediction { logits, probs: tensor::softmax2(logits) })
    }

    /// Probability that the map's class is present.
    pub fn score(&self, c: &FeatureMap) -> Result<f32> {
        Ok(self.predict(c)?.score())
    }
}

struct Forward {
    z1: Vec<f32>,
    h: Vec<f32>,
    logits: [f32; 2],
}

/// Gradients with the same shapes as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TpfGrads {
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

impl TpfGrads {
    pub fn as_slices(&self) -> [&[f32]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub grads: TpfGrads,
}

pub(crate) struct GradAccum {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl GradAccum {
    pub(crate) fn new(model: &TpfModel) -> Self {
        Self {
            w1: vec![0.0; model.w1.data().len()],
            b1: vec![0.0; model.hidden()],
            w2: vec![0.0; model.w2.data().len()],
            b2: vec![0.0; 2],
        }
    }

    pub(crate) fn finish(self) -> TpfGrads {
        let f = |v: Vec<f64>| v.into_iter().map(|g| g as f32).collect();
        TpfGrads { w1: f(self.w1), b1: f(self.b1), w2: f(self.w2), b2: f(self.b2) }
    }
}

fn log_softmax(logits: [f32; 2]) -> [f64; 2] {
    let (a, b) = (f64::from(logits[0]), f64::from(logits[1]));
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    [a - lse, b - lse]
}

pub(crate) fn cross_entropy(logits: [f32; 2], label: Label) -> f64 {
    -log_softmax(logits)[label.target()]
}

/// Cross-entropy of one sample; adds `scale`-weighted parameter gradients to
/// `acc` and, when asked, returns the (scaled) gradient with respect to `c`.
pub(crate) fn sample_backward(
    model: &TpfModel,
    c: &FeatureMap,
    label: Label,
    scale: f64,
    acc: &mut GradAccum,
    want_input: bool,
) -> Result<(f64, Option<Vec<f32>>)> {
    let v = model.confidence_vector(c)?;
    let fwd = model.forward(&v)?;
    let logp = log_softmax(fwd.logits);
    let t = label.target();
    let loss = -logp[t];

    let mut dlogits = [logp[0].exp(), logp[1].exp()];
    dlogits[t] -= 1.0;
    for d in &mut dlogits {
        *d *= scale;
    }

    let hidden = model.hidden();
    let mut dz1 = vec![0.0f64; hidden];
    for j in 0..hidden {
        let hj = f64::from(fwd.h[j]);
        let w20 = f64::from(model.w2.get(0, j));
        let w21 = f64::from(model.w2.get(1, j));
        acc.w2[j] += dlogits[0] * hj;
        acc.w2[hidden + j] += dlogits[1] * hj;
        if fwd.z1[j] > 0.0 {
            dz1[j] = dlogits[0] * w20 + dlogits[1] * w21;
        }
    }
    acc.b2[0] += dlogits[0];
    acc.b2[1] += dlogits[1];

    let x = v.as_slice();
    let n_in = x.len();
    let mut dx = if want_input { Some(vec![0.0f64; n_in]) } else { None };
    for j in 0..hidden {
        let g = dz1[j];
        if g == 0.0 {
            continue;
        }
        acc.b1[j] += g;
        let row = &mut acc.w1[j * n_in..(j + 1) * n_in];
        for (r, &xi) in row.iter_mut().zip(x) {
            *r += g * f64::from(xi);
        }
        if let Some(dx) = dx.as_mut() {
            for (d, &w) in dx.iter_mut().zip(model.w1.row(j)) {
                *d += g * f64::from(w);
            }
        }
    }

    let map_grad = match dx {
        Some(dx) => Some(confidence_backward(c, &dx, model.eps, model.pooling)),
        None => None,
    };
    Ok((loss, map_grad))
}

/// Backpropagate a gradient on `[local, global]` to the input map.
fn confidence_backward(c: &FeatureMap, dv: &[f64], eps: f32, pooling: LocalPooling) -> Vec<f32> {
    let ch = c.channels();
    let (h, w) = (c.height(), c.width());
    let n = h * w;
    let mut out = vec![0.0f64; c.data().len()];
    let eps = f64::from(eps);

    for k in 0..ch {
        let plane = c.channel(k);
        let grad = &mut out[k * n..(k + 1) * n];

        // Local branch: route to the first maximum of each pooling window.
        let dl = dv[k];
        match pooling {
            LocalPooling::Window2 => {
                let (oh, ow) = (h / 2, w / 2);
                let g = dl / (oh * ow) as f64;
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = (2 * y) * w + 2 * x;
                        for idx in [(2 * y) * w + 2 * x + 1, (2 * y + 1) * w + 2 * x, (2 * y + 1) * w + 2 * x + 1] {
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                        grad[best] += g;
                    }
                }
            }
            LocalPooling::GlobalMax => {
                let mut best = 0;
                for (idx, &v) in plane.iter().enumerate() {
                    if v > plane[best] {
                        best = idx;
                    }
                }
                grad[best] += dl;
            }
        }

        // Global branch: average -> relu -> standardization.
        let dg = dv[ch + k];
        if dg == 0.0 {
            continue;
        }
        let (mean, std) = channel_moments(plane);
        let s = std + eps;
        let dy: Vec<f64> = plane
            .iter()
            .map(|&x| {
                let y = (f64::from(x) - mean) / s;
                if (y as f32) > 0.0 {
                    dg / n as f64
                } else {
                    0.0
                }
            })
            .collect();
        let dy_mean = dy.iter().sum::<f64>() / n as f64;
        let dy_d: f64 = dy.iter().zip(plane).map(|(g, &x)| g * (f64::from(x) - mean)).sum();
        let coupling = if std > 0.0 { dy_d / (n as f64 * std * s * s) } else { 0.0 };
        for ((o, &x), g) in grad.iter_mut().zip(plane).zip(&dy) {
            let d = f64::from(x) - mean;
            *o += (g - dy_mean) / s - coupling * d;
        }
    }
    out.into_iter().map(|g| g as f32).collect()
}

/// Mean cross-entropy and parameter gradients over a labelled batch of maps.
pub fn loss_and_grads(model: &TpfModel, batch: &[(&FeatureMap, Label)]) -> Result<LossAndGrads> {
    if batch.is_empty() {
        return Err(TpfError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut acc = GradAccum::new(model);
    let mut loss = 0.0;
    for (map, label) in batch {
        loss += sample_backward(model, map, *label, scale, &mut acc, false)?.0;
    }
    Ok(LossAndGrads { loss: loss * scale, grads: acc.finish() })
}

/// Same as [`loss_and_grads`] plus the gradient with respect to each input map.
pub fn loss_and_input_grads(
    model: &TpfModel,
    batch: &[(&FeatureMap, Label)],
) -> Result<(LossAndGrads, Vec<Vec<f32>>)> {
    if batch.is_empty() {
        return Err(TpfError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut acc = GradAccum::new(model);
    let mut loss = 0.0;
    let mut inputs = Vec::with_capacity(batch.len());
    for (map, label) in batch {
        let (l, g) = sample_backward(model, map, *label, scale, &mut acc, true)?;
        loss += l;
        inputs.push(g.unwrap_or_default());
    }
    Ok((LossAndGrads { loss: loss * scale, grads: acc.finish() }, inputs))
}
