//! The filter's forward pass and gradients against plain nested-loop
//! references computed in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpf_core::tpf::{loss_and_grads, Label, DEFAULT_EPS};
use tpf_core::{FeatureMap, Level, TpfModel};

struct RefModel {
    c: usize,
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl RefModel {
    fn of(m: &TpfModel) -> Self {
        let f = |s: &[f32]| s.iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
        Self {
            c: m.in_channels(),
            hidden: m.hidden(),
            w1: f(m.w1().data()),
            b1: f(m.b1().as_slice()),
            w2: f(m.w2().data()),
            b2: f(m.b2().as_slice()),
        }
    }

    fn param(&mut self, block: usize) -> &mut Vec<f64> {
        match block {
            0 => &mut self.w1,
            1 => &mut self.b1,
            2 => &mut self.w2,
            _ => &mut self.b2,
        }
    }
}

fn at(m: &FeatureMap, c: usize, y: usize, x: usize) -> f64 {
    f64::from(m.get(c, y, x))
}

/// Mean of relu((x - mean) / (std + eps)) per channel.
fn ref_global(m: &FeatureMap, eps: f64) -> Vec<f64> {
    let (h, w) = (m.height(), m.width());
    let n = (h * w) as f64;
    let mut out = Vec::new();
    for c in 0..m.channels() {
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                mean += at(m, c, y, x);
            }
        }
        mean /= n;
        let mut var = 0.0;
        for y in 0..h {
            for x in 0..w {
                var += (at(m, c, y, x) - mean).powi(2);
            }
        }
        let std = (var / n).sqrt();
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += ((at(m, c, y, x) - mean) / (std + eps)).max(0.0);
            }
        }
        out.push(acc / n);
    }
    out
}

/// Mean over 2x2 stride-2 windows of the window maximum, per channel.
fn ref_local(m: &FeatureMap) -> Vec<f64> {
    let (oh, ow) = (m.height() / 2, m.width() / 2);
    let mut out = Vec::new();
    for c in 0..m.channels() {
        let mut acc = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(at(m, c, 2 * oy + dy, 2 * ox + dx));
                    }
                }
                acc += best;
            }
        }
        out.push(acc / (oh * ow) as f64);
    }
    out
}

fn ref_vector(m: &FeatureMap) -> Vec<f64> {
    let mut v = ref_local(m);
    v.extend(ref_global(m, f64::from(DEFAULT_EPS)));
    v
}

fn ref_logits(p: &RefModel, v: &[f64]) -> [f64; 2] {
    let mut h = vec![0.0; p.hidden];
    for j in 0..p.hidden {
        let mut z = p.b1[j];
        for i in 0..2 * p.c {
            z += p.w1[j * 2 * p.c + i] * v[i];
        }
        h[j] = z.max(0.0);
    }
    let mut out = [0.0; 2];
    for (k, o) in out.iter_mut().enumerate() {
        let mut z = p.b2[k];
        for j in 0..p.hidden {
            z += p.w2[k * p.hidden + j] * h[j];
        }
        *o = z;
    }
    out
}

fn ref_probs(p: &RefModel, v: &[f64]) -> [f64; 2] {
    let z = ref_logits(p, v);
    let m = z[0].max(z[1]);
    let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

fn ref_loss(p: &RefModel, batch: &[(Vec<f64>, Label)]) -> f64 {
    let mut total = 0.0;
    for (v, label) in batch {
        let probs = ref_probs(p, v);
        let t = if *label == Label::Present { 0 } else { 1 };
        total -= probs[t].ln();
    }
    total / batch.len() as f64
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    let scale = rng.random_range(0.1..3.0f32);
    let shift = rng.random_range(-1.0..1.0f32);
    FeatureMap::from_fn(c, h, w, Level::L4, |_, _, _| shift + scale * rng.random_range(-1.0..1.0f32))
        .unwrap()
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-6)
}

#[test]
fn forward_matches_nested_loops_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for case in 0..120 {
        let c = rng.random_range(1..=64);
        let h = 2 * rng.random_range(1..=4);
        let w = 2 * rng.random_range(1..=4);
        let map = random_map(&mut rng, c, h, w);
        let model = TpfModel::init(c, 64, case).unwrap();
        let reference = RefModel::of(&model);

        let v = model.confidence_vector(&map).unwrap();
        let want_v = ref_vector(&map);
        assert_eq!(v.dim(), 2 * c);
        for (i, (&got, &want)) in v.as_slice().iter().zip(&want_v).enumerate() {
            let e = rel_err(f64::from(got), want);
            assert!(e < 1e-5, "case {case} entry {i}: {got} vs {want}");
            worst = worst.max(e);
        }

        let pred = model.predict(&map).unwrap();
        let want_p = ref_probs(&reference, &want_v);
        for k in 0..2 {
            let e = rel_err(f64::from(pred.probs[k]), want_p[k]);
            assert!(e < 1e-5, "case {case} prob {k}: {} vs {}", pred.probs[k], want_p[k]);
            worst = worst.max(e);
        }
    }
    assert!(worst < 1e-5);
}

#[test]
fn odd_sizes_drop_the_trailing_row_and_column() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let map = random_map(&mut rng, 3, 5, 7);
    let model = TpfModel::init(3, 8, 0).unwrap();
    let v = model.confidence_vector(&map).unwrap();
    for (got, want) in v.as_slice().iter().zip(ref_vector(&map)) {
        assert!(rel_err(f64::from(*got), want) < 1e-5);
    }
}

#[test]
fn parameter_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = TpfModel::init(2, 32, 4).unwrap();
    let maps: Vec<FeatureMap> = (0..4).map(|_| random_map(&mut rng, 2, 8, 8)).collect();
    let labels = [Label::Present, Label::Absent, Label::Present, Label::Absent];
    let batch: Vec<(&FeatureMap, Label)> = maps.iter().zip(labels).collect();
    let analytic = loss_and_grads(&model, &batch).unwrap();

    let vectors: Vec<(Vec<f64>, Label)> =
        maps.iter().zip(labels).map(|(m, l)| (ref_vector(m), l)).collect();
    let mut reference = RefModel::of(&model);
    assert!((ref_loss(&reference, &vectors) - analytic.loss).abs() < 1e-5);

    let h = 1e-3;
    for (block, grads) in analytic.grads.as_slices().into_iter().enumerate() {
        for (i, &g) in grads.iter().enumerate() {
            let orig = reference.param(block)[i];
            reference.param(block)[i] = orig + h;
            let up = ref_loss(&reference, &vectors);
            reference.param(block)[i] = orig - h;
            let down = ref_loss(&reference, &vectors);
            reference.param(block)[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let g = f64::from(g);
            let scale = g.abs().max(numeric.abs());
            assert!(
                (g - numeric).abs() <= 1e-4 * scale + 1e-9,
                "block {block} index {i}: analytic {g} numeric {numeric}"
            );
        }
    }
}
