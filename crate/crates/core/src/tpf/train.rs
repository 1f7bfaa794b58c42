//! Two-phase SGD training.
//!
//! `Joint` scores fused correlation maps and updates both the filter and the
//! fusion projections. `TpfOnly` freezes the projections and trains the filter
//! on L4 maps, the input it sees at inference time.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, sample_backward, GradAccum, Label, Result, TpfError};
use crate::checkpoint::Checkpoint;
use crate::episode::{align_levels, fuse_aligned, ClassId, Episode, LevelMaps};
use crate::tensor::{FeatureMap, Level};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Joint,
    TpfOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives drawn per positive in each query.
    pub negative_ratio: usize,
    pub phase: Phase,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 20,
            batch_size: 32,
            negative_ratio: 1,
            phase: Phase::TpfOnly,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TpfError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TpfError::Config("batch_size must be at least 1".into()));
        }
        if self.negative_ratio == 0 {
            return Err(TpfError::Config("negative_ratio must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub samples: usize,
    pub positives: usize,
    /// Full-set loss before the first update.
    pub initial_loss: f64,
    /// Full-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

struct Sample {
    input: Input,
    label: Label,
}

enum Input {
    L4(FeatureMap),
    Aligned(LevelMaps),
}

/// Positives are the present classes; negatives are drawn without replacement
/// from the absent ones, `ratio` per positive (at least `ratio` when none are present).
fn draw_samples(
    episodes: &[Episode],
    ratio: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, ClassId, Label)> {
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        for &c in ep.present() {
            out.push((e, c, Label::Present));
        }
        let mut absent: Vec<ClassId> = ep.classes().filter(|c| !ep.is_present(*c)).collect();
        absent.shuffle(rng);
        let want = ratio * ep.present().len().max(1);
        for &c in absent.iter().take(want) {
            out.push((e, c, Label::Absent));
        }
    }
    out
}

fn build_inputs(
    episodes: &[Episode],
    draws: &[(usize, ClassId, Label)],
    phase: Phase,
) -> Result<Vec<Sample>> {
    draws
        .iter()
        .map(|&(e, class, label)| {
            let ep = &episodes[e];
            let input = match phase {
                Phase::TpfOnly => Input::L4(ep.correlation(class, Level::L4)?),
                Phase::Joint => Input::Aligned(align_levels(&ep.correlations(class)?)?),
            };
            Ok(Sample { input, label })
        })
        .collect()
}

fn materialize<'a>(ckpt: &Checkpoint, input: &'a Input) -> Result<std::borrow::Cow<'a, FeatureMap>> {
    Ok(match input {
        Input::L4(m) => std::borrow::Cow::Borrowed(m),
        Input::Aligned(a) => std::borrow::Cow::Owned(fuse_aligned(a, &ckpt.fusion)?),
    })
}

/// Mean loss and accuracy over every sample with the current weights.
fn evaluate(ckpt: &Checkpoint, samples: &[Sample]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in samples {
        let map = materialize(ckpt, &s.input)?;
        let p = ckpt.tpf.predict(&map)?;
        loss += cross_entropy(p.logits, s.label);
        if p.is_present() == (s.label == Label::Present) {
            correct += 1;
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Fusion-projection gradient for one sample: `d fused / d W_l = G A_l^T / L`.
fn accumulate_fusion_grads(aligned: &LevelMaps, grad: &[f32], acc: &mut [Vec<f64>; 3], bias: &mut [Vec<f64>; 3]) {
    let n = aligned[0].plane_len();
    let cf = grad.len() / n;
    let inv = 1.0 / aligned.len() as f64;
    for (l, map) in aligned.iter().enumerate() {
        let c_in = map.channels();
        for o in 0..cf {
            let g = &grad[o * n..(o + 1) * n];
            let gsum: f64 = g.iter().map(|&v| f64::from(v)).sum();
            bias[l][o] += gsum * inv;
            for i in 0..c_in {
                let a = map.channel(i);
                let mut s = 0.0f64;
                for (gv, av) in g.iter().zip(a) {
                    s += f64::from(*gv) * f64::from(*av);
                }
                acc[l][o * c_in + i] += s * inv;
            }
        }
    }
}

fn sgd(params: &mut [f32], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p = (f64::from(*p) - lr * g) as f32;
    }
}

pub fn train(ckpt: &mut Checkpoint, episodes: &[Episode], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(TpfError::NoSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws = draw_samples(episodes, cfg.negative_ratio, &mut rng);
    if draws.is_empty() {
        return Err(TpfError::NoSamples);
    }
    let samples = build_inputs(episodes, &draws, cfg.phase)?;
    let positives = samples.iter().filter(|s| s.label == Label::Present).count();

    let (initial_loss, _) = evaluate(ckpt, &samples)?;
    let lr = f64::from(cfg.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut acc = GradAccum::new(&ckpt.tpf);
            let joint = cfg.phase == Phase::Joint;
            let shapes = ckpt.fusion.input_channels();
            let cf = ckpt.fusion.output_channels();
            let mut fw: [Vec<f64>; 3] = std::array::from_fn(|l| {
                if joint { vec![0.0; cf * shapes[l]] } else { Vec::new() }
            });
            let mut fb: [Vec<f64>; 3] =
                std::array::from_fn(|_| if joint { vec![0.0; cf] } else { Vec::new() });
            for &i in batch {
                let s = &samples[i];
                let map = materialize(ckpt, &s.input)?;
                let (_, grad) = sample_backward(&ckpt.tpf, &map, s.label, scale, &mut acc, joint)?;
                if let (Input::Aligned(a), Some(g)) = (&s.input, grad) {
                    accumulate_fusion_grads(a, &g, &mut fw, &mut fb);
                }
            }
            let [w1, b1, w2, b2] = ckpt.tpf.params_mut();
            sgd(w1, &acc.w1, lr);
            sgd(b1, &acc.b1, lr);
            sgd(w2, &acc.w2, lr);
            sgd(b2, &acc.b2, lr);
            if joint {
                for (l, p) in ckpt.fusion.levels_mut().iter_mut().enumerate() {
                    sgd(p.weight.data_mut(), &fw[l], lr);
                    sgd(p.bias.as_mut_slice(), &fb[l], lr);
                }
            }
        }
        let (loss, _) = evaluate(ckpt, &samples)?;
        if !loss.is_finite() || !ckpt.is_finite() {
            return Err(TpfError::Diverged { epoch, loss });
        }
        epoch_losses.push(loss);
    }

    let (final_loss, final_accuracy) = evaluate(ckpt, &samples)?;
    Ok(TrainReport {
        phase: cfg.phase,
        samples: samples.len(),
        positives,
        initial_loss,
        epoch_losses,
        final_loss,
        final_accuracy,
    })
}
