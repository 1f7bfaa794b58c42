//! Episodes (a query with per-class supports and ground truth) and the
//! correlation front end: shot aggregation, depthwise correlation and
//! multi-level fusion onto the coarsest grid.

mod pack;
mod synth;

pub use pack::{read_pack, read_pack_file, write_pack, write_pack_file, PackError, PackManifest};
pub use synth::{synth_episode, synth_episodes, SynthConfig, SyntheticWorld};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, FeatureMap, Level, Matrix, TensorError, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpisodeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid episode: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EpisodeError>;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Axis-aligned box in coarsest-grid cell units; `x2`/`y2` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoundingBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn area(&self) -> f32 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f32 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Query features, or one support shot, at levels L2, L3, L4.
pub type LevelMaps = [FeatureMap; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    query_id: String,
    query: LevelMaps,
    supports: Vec<Vec<LevelMaps>>,
    present: BTreeSet<ClassId>,
    gt_boxes: BTreeMap<ClassId, Vec<BoundingBox>>,
}

impl Episode {
    /// `supports[c]` holds the k shots of class `ClassId(c)`.
    pub fn new(
        query_id: String,
        query: LevelMaps,
        supports: Vec<Vec<LevelMaps>>,
        gt_boxes: BTreeMap<ClassId, Vec<BoundingBox>>,
    ) -> Result<Self> {
        let invalid = |msg: String| Err(EpisodeError::Invalid(msg));
        for (i, level) in Level::PYRAMID.iter().enumerate() {
            if query[i].level() != *level {
                return invalid(format!("query map {i} is tagged {:?}", query[i].level()));
            }
        }
        if supports.is_empty() {
            return invalid("no candidate classes".into());
        }
        let k = supports[0].len();
        if k == 0 {
            return invalid("classes need at least one support shot".into());
        }
        for (c, shots) in supports.iter().enumerate() {
            if shots.len() != k {
                return invalid(format!("class {c} has {} shots, expected {k}", shots.len()));
            }
            for shot in shots {
                for l in 0..3 {
                    if shot[l].channels() != query[l].channels() {
                        return invalid(format!(
                            "class {c} support at {:?} has {} channels, query has {}",
                            Level::PYRAMID[l],
                            shot[l].channels(),
                            query[l].channels()
                        ));
                    }
                }
            }
        }
        let (gh, gw) = (query[2].height() as f32, query[2].width() as f32);
        let n = supports.len() as u32;
        for (class, boxes) in &gt_boxes {
            if class.0 >= n {
                return invalid(format!("ground truth for unknown class {class}"));
            }
            if boxes.is_empty() {
                return invalid(format!("class {class} is present without boxes"));
            }
            for b in boxes {
                if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > gw || b.y2 > gh {
                    return invalid(format!("class {class} box {b:?} outside the {gw}x{gh} grid"));
                }
            }
        }
        let present = gt_boxes.keys().copied().collect();
        Ok(Self { query_id, query, supports, present, gt_boxes })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn query(&self) -> &LevelMaps {
        &self.query
    }

    pub fn query_level(&self, level: Level) -> &FeatureMap {
        &self.query[level_index(level)]
    }

    pub fn num_classes(&self) -> usize {
        self.supports.len()
    }

    pub fn shots(&self) -> usize {
        self.supports[0].len()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..self.supports.len() as u32).map(ClassId)
    }

    pub fn supports(&self, class: ClassId) -> &[LevelMaps] {
        &self.supports[class.0 as usize]
    }

    pub fn all_supports(&self) -> &[Vec<LevelMaps>] {
        &self.supports
    }

    pub fn present(&self) -> &BTreeSet<ClassId> {
        &self.present
    }

    pub fn is_present(&self, class: ClassId) -> bool {
        self.present.contains(&class)
    }

    pub fn gt_boxes(&self) -> &BTreeMap<ClassId, Vec<BoundingBox>> {
        &self.gt_boxes
    }

    pub fn boxes_for(&self, class: ClassId) -> &[BoundingBox] {
        self.gt_boxes.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn prototype(&self, class: ClassId) -> Result<ClassPrototype> {
        build_prototype(class, self.supports(class))
    }

    /// Correlation map of `class` at a single pyramid level.
    pub fn correlation(&self, class: ClassId, level: Level) -> Result<FeatureMap> {
        let idx = level_index(level);
        let proto = level_prototype(self.supports(class), idx)?;
        correlate(&self.query[idx], &proto)
    }

    /// Correlation maps of `class` at all three levels.
    pub fn correlations(&self, class: ClassId) -> Result<LevelMaps> {
        let proto = self.prototype(class)?;
        let [a, b, c] = &proto.levels;
        Ok([
            correlate(&self.query[0], a)?,
            correlate(&self.query[1], b)?,
            correlate(&self.query[2], c)?,
        ])
    }
}

pub(crate) fn level_index(level: Level) -> usize {
    match level {
        Level::L2 => 0,
        Level::L3 => 1,
        Level::L4 | Level::Fused => 2,
    }
}

/// Shot-averaged support vectors for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class_id: ClassId,
    pub levels: [Vector; 3],
}

fn level_prototype(shots: &[LevelMaps], level: usize) -> Result<Vector> {
    let first = shots
        .first()
        .ok_or_else(|| EpisodeError::Invalid("prototype needs at least one shot".into()))?;
    let channels = first[level].channels();
    let mut acc = vec![0.0f64; channels];
    for shot in shots {
        let map = &shot[level];
        if map.channels() != channels {
            return Err(EpisodeError::Invalid(format!(
                "shots disagree on channel count at {:?}: {} vs {channels}",
                map.level(),
                map.channels()
            )));
        }
        for (a, v) in acc.iter_mut().zip(tensor::spatial_average(map).as_slice()) {
            *a += f64::from(*v);
        }
    }
    let k = shots.len() as f64;
    Ok(Vector::new(acc.into_iter().map(|a| (a / k) as f32).collect())?)
}

/// Spatially average every shot, then take the mean over shots, per level.
pub fn build_prototype(class_id: ClassId, shots: &[LevelMaps]) -> Result<ClassPrototype> {
    Ok(ClassPrototype {
        class_id,
        levels: [
            level_prototype(shots, 0)?,
            level_prototype(shots, 1)?,
            level_prototype(shots, 2)?,
        ],
    })
}

/// Depthwise correlation: `c[ch, y, x] = query[ch, y, x] * proto[ch]`.
pub fn correlate(query: &FeatureMap, proto: &Vector) -> Result<FeatureMap> {
    if proto.dim() != query.channels() {
        return Err(TensorError::Shape(format!(
            "prototype of dim {} for a {}-channel query",
            proto.dim(),
            query.channels()
        ))
        .into());
    }
    let n = query.plane_len();
    let mut out = Vec::with_capacity(query.data().len());
    for (plane, &w) in query.data().chunks_exact(n).zip(proto.as_slice()) {
        out.extend(plane.iter().map(|&v| v * w));
    }
    Ok(FeatureMap::new(query.channels(), query.height(), query.width(), out, query.level())?)
}

/// Per-pixel channel projection `weight (cf x c_l)` plus `bias (cf)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Matrix,
    pub bias: Vector,
}

/// Learned projections that bring each level to a common channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionProjections {
    levels: [Projection; 3],
}

impl FusionProjections {
    pub fn new(levels: [Projection; 3]) -> Result<Self> {
        let cf = levels[0].weight.rows();
        for p in &levels {
            if p.weight.rows() != cf || p.bias.dim() != cf {
                return Err(EpisodeError::Invalid(format!(
                    "projection output widths disagree ({} / {} vs {cf})",
                    p.weight.rows(),
                    p.bias.dim()
                )));
            }
        }
        Ok(Self { levels })
    }

    /// Zero-padded identity: input channel `i` feeds output channel `i`.
    pub fn identity(channels: [usize; 3], cf: usize) -> Result<Self> {
        let mk = |c: usize| -> Result<Projection> {
            let mut w = vec![0.0f32; cf * c];
            for i in 0..c.min(cf) {
                w[i * c + i] = 1.0;
            }
            Ok(Projection { weight: Matrix::new(cf, c, w)?, bias: Vector::zeros(cf)? })
        };
        Self::new([mk(channels[0])?, mk(channels[1])?, mk(channels[2])?])
    }

    pub fn output_channels(&self) -> usize {
        self.levels[0].weight.rows()
    }

    pub fn input_channels(&self) -> [usize; 3] {
        [self.levels[0].weight.cols(), self.levels[1].weight.cols(), self.levels[2].weight.cols()]
    }

    pub fn levels(&self) -> &[Projection; 3] {
        &self.levels
    }

    pub(crate) fn levels_mut(&mut self) -> &mut [Projection; 3] {
        &mut self.levels
    }
}

/// Bring every level onto the L4 grid.
pub fn align_levels(maps: &LevelMaps) -> Result<LevelMaps> {
    let (h, w) = (maps[2].height(), maps[2].width());
    Ok([
        tensor::downsample_avg(&maps[0], h, w)?,
        tensor::downsample_avg(&maps[1], h, w)?,
        maps[2].clone(),
    ])
}

/// Project already-aligned maps and average them into a `Fused` map.
pub fn fuse_aligned(aligned: &LevelMaps, proj: &FusionProjections) -> Result<FeatureMap> {
    let (h, w) = (aligned[0].height(), aligned[0].width());
    let n = h * w;
    let cf = proj.output_channels();
    for (map, p) in aligned.iter().zip(&proj.levels) {
        if map.height() != h || map.width() != w {
            return Err(EpisodeError::Invalid("aligned maps disagree on grid".into()));
        }
        if map.channels() != p.weight.cols() {
            return Err(TensorError::Shape(format!(
                "{}-channel map for a projection expecting {}",
                map.channels(),
                p.weight.cols()
            ))
            .into());
        }
    }
    let mut out = vec![0.0f32; cf * n];
    let scale = 1.0 / aligned.len() as f32;
    for (map, p) in aligned.iter().zip(&proj.levels) {
        let c_in = map.channels();
        for o in 0..cf {
            let dst = &mut out[o * n..(o + 1) * n];
            let wrow = p.weight.row(o);
            let b = p.bias.as_slice()[o] * scale;
            for v in dst.iter_mut() {
                *v += b;
            }
            for i in 0..c_in {
                let wi = wrow[i] * scale;
                if wi == 0.0 {
                    continue;
                }
                for (d, &s) in dst.iter_mut().zip(map.channel(i)) {
                    *d += wi * s;
                }
            }
        }
    }
    Ok(FeatureMap::new(cf, h, w, out, Level::Fused)?)
}

/// Downsample all levels to the L4 grid, project, and average.
pub fn fuse_levels(maps: &LevelMaps, proj: &FusionProjections) -> Result<FeatureMap> {
    fuse_aligned(&align_levels(maps)?, proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, level: Level) -> FeatureMap {
        FeatureMap::from_fn(c, h, h, level, |_, _, _| rng.random_range(-2.0..2.0)).unwrap()
    }

    fn random_shot(rng: &mut ChaCha8Rng) -> LevelMaps {
        [
            random_map(rng, 2, 4, Level::L2),
            random_map(rng, 3, 4, Level::L3),
            random_map(rng, 4, 2, Level::L4),
        ]
    }

    #[test]
    fn prototype_of_one_shot_is_its_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let shot = random_shot(&mut rng);
        let p = build_prototype(ClassId(0), std::slice::from_ref(&shot)).unwrap();
        for l in 0..3 {
            assert_eq!(p.levels[l], tensor::spatial_average(&shot[l]));
        }
        let twice = build_prototype(ClassId(0), &[shot.clone(), shot]).unwrap();
        for l in 0..3 {
            for (a, b) in twice.levels[l].as_slice().iter().zip(p.levels[l].as_slice()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn prototype_matches_loop_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shots: Vec<_> = (0..3).map(|_| random_shot(&mut rng)).collect();
        let p = build_prototype(ClassId(4), &shots).unwrap();
        for l in 0..3 {
            let m = &shots[0][l];
            for c in 0..m.channels() {
                let mut acc = 0.0f64;
                for shot in &shots {
                    let mut s = 0.0f64;
                    for y in 0..m.height() {
                        for x in 0..m.width() {
                            s += shot[l].get(c, y, x) as f64;
                        }
                    }
                    acc += s / m.plane_len() as f64;
                }
                assert!((p.levels[l].as_slice()[c] as f64 - acc / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn prototype_rejects_mismatched_shots() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_shot(&mut rng);
        let mut b = random_shot(&mut rng);
        b[1] = random_map(&mut rng, 5, 4, Level::L3);
        assert!(build_prototype(ClassId(0), &[a, b]).is_err());
        assert!(build_prototype(ClassId(0), &[]).is_err());
    }

    #[test]
    fn correlate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = random_map(&mut rng, 3, 4, Level::L3);
        let ones = Vector::new(vec![1.0; 3]).unwrap();
        assert_eq!(correlate(&q, &ones).unwrap(), q);
        let zero = correlate(&q, &Vector::zeros(3).unwrap()).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert_eq!(zero.level(), Level::L3);
        assert!(correlate(&q, &Vector::zeros(2).unwrap()).is_err());

        let p = Vector::new(vec![0.5, -2.0, 3.0]).unwrap();
        let c = correlate(&q, &p).unwrap();
        for ch in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(c.get(ch, y, x), q.get(ch, y, x) * p.as_slice()[ch]);
                }
            }
        }
    }

    #[test]
    fn correlate_is_linear_in_prototype() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let q = random_map(&mut rng, 6, 5, Level::L4);
        let p: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alpha = 2.75f32;
        let base = correlate(&q, &Vector::new(p.clone()).unwrap()).unwrap();
        let scaled =
            correlate(&q, &Vector::new(p.iter().map(|v| v * alpha).collect()).unwrap()).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((a * alpha - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn fuse_identical_levels_with_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let base = random_map(&mut rng, 4, 2, Level::L4);
        // Upsample by replication so block averages reproduce `base` exactly.
        let up = |f: usize, level| {
            FeatureMap::from_fn(4, 2 * f, 2 * f, level, |c, y, x| base.get(c, y / f, x / f))
                .unwrap()
        };
        let maps = [up(4, Level::L2), up(2, Level::L3), base.clone()];
        let proj = FusionProjections::identity([4, 4, 4], 4).unwrap();
        let fused = fuse_levels(&maps, &proj).unwrap();
        assert_eq!(fused.level(), Level::Fused);
        for (a, b) in fused.data().iter().zip(base.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let zeros = [
            FeatureMap::zeros(2, 8, 8, Level::L2).unwrap(),
            FeatureMap::zeros(3, 4, 4, Level::L3).unwrap(),
            FeatureMap::zeros(4, 2, 2, Level::L4).unwrap(),
        ];
        let proj = FusionProjections::identity([2, 3, 4], 4).unwrap();
        assert!(fuse_levels(&zeros, &proj).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let maps = [
            random_map(&mut rng, 2, 8, Level::L2),
            random_map(&mut rng, 3, 4, Level::L3),
            random_map(&mut rng, 4, 2, Level::L4),
        ];
        let cf = 5;
        let mk = |rng: &mut ChaCha8Rng, c: usize| Projection {
            weight: Matrix::new(cf, c, (0..cf * c).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap(),
            bias: Vector::new((0..cf).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        };
        let proj = FusionProjections::new([mk(&mut rng, 2), mk(&mut rng, 3), mk(&mut rng, 4)])
            .unwrap();
        let fused = fuse_levels(&maps, &proj).unwrap();
        for o in 0..cf {
            for y in 0..2 {
                for x in 0..2 {
                    let mut total = 0.0f64;
                    for (l, map) in maps.iter().enumerate() {
                        let f = map.height() / 2;
                        let p = &proj.levels()[l];
                        let mut v = p.bias.as_slice()[o] as f64;
                        for i in 0..map.channels() {
                            let mut block = 0.0f64;
                            for dy in 0..f {
                                for dx in 0..f {
                                    block += map.get(i, y * f + dy, x * f + dx) as f64;
                                }
                            }
                            v += p.weight.get(o, i) as f64 * block / (f * f) as f64;
                        }
                        total += v;
                    }
                    let e = total / 3.0;
                    assert!((fused.get(o, y, x) as f64 - e).abs() < 1e-5 * e.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn fuse_rejects_uneven_grids() {
        let maps = [
            FeatureMap::zeros(2, 7, 7, Level::L2).unwrap(),
            FeatureMap::zeros(3, 4, 4, Level::L3).unwrap(),
            FeatureMap::zeros(4, 2, 2, Level::L4).unwrap(),
        ];
        let proj = FusionProjections::identity([2, 3, 4], 4).unwrap();
        assert!(fuse_levels(&maps, &proj).is_err());
    }

    #[test]
    fn iou_basics() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BoundingBox::new(1.0, 0.0, 3.0, 2.0);
        assert!((a.iou(&a) - 1.0).abs() < 1e-6);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-6);
        assert_eq!(a.iou(&BoundingBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
    }
}
