//! Seeded synthetic episodes.
//!
//! Every class owns a random channel signature per level. Present classes
//! plant Gaussian blobs, scaled by their signature, into the query features;
//! supports carry the signature plus noise. Absent classes contribute nothing
//! but noise, so their correlation maps only pick up cross-talk through
//! signature overlap.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BoundingBox, ClassId, Episode, EpisodeError, LevelMaps, Result};
use crate::tensor::{FeatureMap, Level};

/// Cells whose Gaussian weight is at least this fraction of the peak belong to a blob's box.
const BOX_LEVEL: f64 = 0.5;
/// Signatures are redrawn until pairwise |cos| stays under this bound.
const MAX_SIGNATURE_COS: f64 = 0.75;
const SIGNATURE_ATTEMPTS: usize = 200;
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub present_count: usize,
    pub instances_per_class: usize,
    /// Channels at L2, L3, L4.
    pub channels: [usize; 3],
    /// Query grid side at L2, L3, L4.
    pub grids: [usize; 3],
    /// Support grid side at L2, L3, L4.
    pub support_grids: [usize; 3],
    pub amplitude: f32,
    pub sigma: f32,
    pub shots: usize,
    /// Blob radius range in L4 cells.
    pub radius_min: f32,
    pub radius_max: f32,
    /// Minimum distance between blob centers in L4 cells.
    pub min_separation: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            present_count: 3,
            instances_per_class: 1,
            channels: [16, 32, 64],
            grids: [32, 16, 8],
            support_grids: [8, 4, 2],
            amplitude: 1.0,
            sigma: 0.5,
            shots: 1,
            radius_min: 1.0,
            radius_max: 1.4,
            min_separation: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EpisodeError::Invalid(m));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.present_count > self.num_classes {
            return bad(format!(
                "present_count {} exceeds num_classes {}",
                self.present_count, self.num_classes
            ));
        }
        if self.instances_per_class == 0 {
            return bad("instances_per_class must be at least 1".into());
        }
        if self.shots == 0 {
            return bad("shots must be at least 1".into());
        }
        if self.channels.iter().chain(&self.support_grids).any(|&v| v == 0) {
            return bad("channel counts and support grids must be positive".into());
        }
        let g4 = self.grids[2];
        if g4 < 2 {
            return bad("the L4 grid must be at least 2x2".into());
        }
        if self.grids.iter().any(|&g| g < g4 || g % g4 != 0) {
            return bad(format!("grids {:?} must be multiples of the L4 grid", self.grids));
        }
        if !(self.amplitude.is_finite() && self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad("amplitude must be finite and sigma non-negative".into());
        }
        if !(self.radius_min > 0.0 && self.radius_max >= self.radius_min) {
            return bad("need 0 < radius_min <= radius_max".into());
        }
        if !(self.min_separation >= 0.0) {
            return bad("min_separation must be non-negative".into());
        }
        let needed = self.present_count * self.instances_per_class;
        let capacity = lattice_centers(self).len();
        if needed > capacity {
            return bad(format!(
                "{needed} blobs do not fit on a {g4}x{g4} grid with separation {}",
                self.min_separation
            ));
        }
        Ok(())
    }

    fn margin(&self) -> usize {
        (f64::from(self.radius_max) * (2.0 * (1.0 / BOX_LEVEL).ln()).sqrt()).floor() as usize
    }

    fn center_range(&self) -> (usize, usize) {
        let g4 = self.grids[2];
        let m = self.margin().min((g4 - 1) / 2);
        (m, g4 - 1 - m)
    }
}

fn far_enough(chosen: &[(usize, usize)], c: (usize, usize), sep: f32) -> bool {
    chosen.iter().all(|&(x, y)| {
        let dx = x as f32 - c.0 as f32;
        let dy = y as f32 - c.1 as f32;
        (dx * dx + dy * dy).sqrt() >= sep
    })
}

// Raster-order greedy packing; a deterministic lower bound on placement capacity.
fn lattice_centers(cfg: &SynthConfig) -> Vec<(usize, usize)> {
    let (lo, hi) = cfg.center_range();
    let mut chosen = Vec::new();
    for y in lo..=hi {
        for x in lo..=hi {
            if far_enough(&chosen, (x, y), cfg.min_separation) {
                chosen.push((x, y));
            }
        }
    }
    chosen
}

fn place_centers(cfg: &SynthConfig, rng: &mut ChaCha8Rng, count: usize) -> Vec<(usize, usize)> {
    let (lo, hi) = cfg.center_range();
    let side = hi - lo + 1;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut chosen = Vec::with_capacity(count);
        let order = sample(rng, side * side, side * side);
        for idx in order.iter() {
            let c = (lo + idx % side, lo + idx / side);
            if far_enough(&chosen, c, cfg.min_separation) {
                chosen.push(c);
                if chosen.len() == count {
                    return chosen;
                }
            }
        }
    }
    // Random greedy got unlucky; fall back to a shuffled lattice, which always fits.
    let lattice = lattice_centers(cfg);
    sample(rng, lattice.len(), count).iter().map(|i| lattice[i]).collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += f64::from(x) * f64::from(y);
        aa += f64::from(x) * f64::from(x);
        bb += f64::from(y) * f64::from(y);
    }
    ab / (aa.sqrt() * bb.sqrt()).max(1e-30)
}

fn draw_signature(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f32> {
    let raw: Vec<f64> = (0..channels).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = (raw.iter().map(|v| v * v).sum::<f64>() / channels as f64).sqrt().max(1e-12);
    raw.iter().map(|v| (v / norm) as f32).collect()
}

/// Class signatures shared by every episode drawn from the same config.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    cfg: SynthConfig,
    /// `signatures[class][level]`, RMS-normalized to 1.
    signatures: Vec<[Vec<f32>; 3]>,
}

impl SyntheticWorld {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let mut per_level: [Vec<Vec<f32>>; 3] = Default::default();
        for (l, sigs) in per_level.iter_mut().enumerate() {
            let c = cfg.channels[l];
            for _ in 0..cfg.num_classes {
                let mut best = draw_signature(&mut rng, c);
                let mut best_cos = max_abs_cos(sigs, &best);
                for _ in 1..SIGNATURE_ATTEMPTS {
                    if best_cos <= MAX_SIGNATURE_COS {
                        break;
                    }
                    let cand = draw_signature(&mut rng, c);
                    let cos = max_abs_cos(sigs, &cand);
                    if cos < best_cos {
                        best = cand;
                        best_cos = cos;
                    }
                }
                sigs.push(best);
            }
        }
        let [s2, s3, s4] = per_level;
        let signatures = s2
            .into_iter()
            .zip(s3)
            .zip(s4)
            .map(|((a, b), c)| [a, b, c])
            .collect();
        Ok(Self { cfg, signatures })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn signature(&self, class: ClassId, level: usize) -> &[f32] {
        &self.signatures[class.0 as usize][level]
    }

    /// Episode `index`; each index draws from its own RNG stream.
    pub fn episode(&self, index: u64) -> Result<Episode> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index + 1);

        let mut present: Vec<u32> = sample(&mut rng, cfg.num_classes, cfg.present_count)
            .iter()
            .map(|i| i as u32)
            .collect();
        present.sort_unstable();

        let n_blobs = cfg.present_count * cfg.instances_per_class;
        let centers = place_centers(cfg, &mut rng, n_blobs);
        let mut blobs = Vec::with_capacity(n_blobs);
        for (i, &(cx, cy)) in centers.iter().enumerate() {
            let class = present[i / cfg.instances_per_class];
            let radius = rng.random_range(cfg.radius_min..=cfg.radius_max);
            blobs.push(Blob { class, cx: cx as f64 + 0.5, cy: cy as f64 + 0.5, radius: radius as f64 });
        }

        let g4 = cfg.grids[2];
        let mut gt_boxes: BTreeMap<ClassId, Vec<BoundingBox>> = BTreeMap::new();
        for b in &blobs {
            gt_boxes.entry(ClassId(b.class)).or_default().push(b.extent(g4));
        }

        let query = [
            self.query_level(&mut rng, &blobs, 0)?,
            self.query_level(&mut rng, &blobs, 1)?,
            self.query_level(&mut rng, &blobs, 2)?,
        ];

        let mut supports = Vec::with_capacity(cfg.num_classes);
        for class in 0..cfg.num_classes {
            let mut shots = Vec::with_capacity(cfg.shots);
            for _ in 0..cfg.shots {
                let shot: LevelMaps = [
                    self.support_level(&mut rng, class, 0)?,
                    self.support_level(&mut rng, class, 1)?,
                    self.support_level(&mut rng, class, 2)?,
                ];
                shots.push(shot);
            }
            supports.push(shots);
        }

        Episode::new(format!("synth-{}-{index:05}", cfg.seed), query, supports, gt_boxes)
    }

    fn query_level(&self, rng: &mut ChaCha8Rng, blobs: &[Blob], l: usize) -> Result<FeatureMap> {
        let cfg = &self.cfg;
        let (c, g) = (cfg.channels[l], cfg.grids[l]);
        let f = (g / cfg.grids[2]) as f64;
        let n = g * g;
        let sigma = f64::from(cfg.sigma);
        let mut data: Vec<f32> =
            (0..c * n).map(|_| (rng.sample::<f64, _>(StandardNormal) * sigma) as f32).collect();
        for b in blobs {
            let sig = &self.signatures[b.class as usize][l];
            let weights: Vec<f64> = (0..n)
                .map(|p| b.weight((p % g) as f64 + 0.5, (p / g) as f64 + 0.5, f))
                .collect();
            for ch in 0..c {
                let s = f64::from(cfg.amplitude) * f64::from(sig[ch]);
                for (d, w) in data[ch * n..(ch + 1) * n].iter_mut().zip(&weights) {
                    *d += (s * w) as f32;
                }
            }
        }
        Ok(FeatureMap::new(c, g, g, data, Level::PYRAMID[l])?)
    }

    fn support_level(&self, rng: &mut ChaCha8Rng, class: usize, l: usize) -> Result<FeatureMap> {
        let cfg = &self.cfg;
        let (c, g) = (cfg.channels[l], cfg.support_grids[l]);
        let sig = &self.signatures[class][l];
        let sigma = f64::from(cfg.sigma);
        let amp = f64::from(cfg.amplitude);
        let mut data = Vec::with_capacity(c * g * g);
        for ch in 0..c {
            for _ in 0..g * g {
                let noise = rng.sample::<f64, _>(StandardNormal) * sigma;
                data.push((amp * f64::from(sig[ch]) + noise) as f32);
            }
        }
        Ok(FeatureMap::new(c, g, g, data, Level::PYRAMID[l])?)
    }
}

fn max_abs_cos(existing: &[Vec<f32>], cand: &[f32]) -> f64 {
    existing.iter().map(|s| cosine(s, cand).abs()).fold(0.0, f64::max)
}

struct Blob {
    class: u32,
    /// Center in continuous L4 coordinates.
    cx: f64,
    cy: f64,
    radius: f64,
}

impl Blob {
    /// Gaussian weight at continuous point `(x, y)` of a grid `scale` times finer than L4.
    fn weight(&self, x: f64, y: f64, scale: f64) -> f64 {
        let dx = x - self.cx * scale;
        let dy = y - self.cy * scale;
        let r = self.radius * scale;
        (-(dx * dx + dy * dy) / (2.0 * r * r)).exp()
    }

    /// Bounding box of L4 cells at or above half the peak weight.
    fn extent(&self, g4: usize) -> BoundingBox {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..g4 {
            for x in 0..g4 {
                if self.weight(x as f64 + 0.5, y as f64 + 0.5, 1.0) >= BOX_LEVEL {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        BoundingBox::new(x1 as f32, y1 as f32, x2 as f32, y2 as f32)
    }
}

/// A single episode (index 0) from `cfg`.
pub fn synth_episode(cfg: &SynthConfig) -> Result<Episode> {
    SyntheticWorld::new(cfg.clone())?.episode(0)
}

/// `count` episodes sharing one set of class signatures.
pub fn synth_episodes(cfg: &SynthConfig, count: usize) -> Result<Vec<Episode>> {
    let world = SyntheticWorld::new(cfg.clone())?;
    (0..count as u64).map(|i| world.episode(i)).collect()
}
