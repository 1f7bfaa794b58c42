//! Minor-loop inference: score every candidate class on its L4 correlation
//! map, keep the classes the strategy selects, and run the expensive
//! per-class stages (fusion and detection) only for those.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::episode::{fuse_levels, BoundingBox, ClassId, Episode};
use crate::tensor::{FeatureMap, Level};
use crate::tpf::{Result, TpfError, TpfModel};

pub const DEFAULT_ADAPTIVE_THRESHOLD: f32 = 0.5;
pub const DEFAULT_PEAK_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    TopN(usize),
    Adaptive(f32),
    All,
}

impl SelectionStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SelectionStrategy::TopN(0) => {
                Err(TpfError::Config("top-n needs n >= 1".into()))
            }
            SelectionStrategy::Adaptive(t) if !(0.0..=1.0).contains(&t) => {
                Err(TpfError::Config(format!("adaptive threshold {t} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    fn uses_scores(&self) -> bool {
        !matches!(self, SelectionStrategy::All)
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionStrategy::TopN(n) => write!(f, "top-n:{n}"),
            SelectionStrategy::Adaptive(t) => write!(f, "adaptive:{t}"),
            SelectionStrategy::All => f.write_str("all"),
        }
    }
}

/// Parses `all`, `top-n:<n>` and `adaptive[:<threshold>]`.
impl FromStr for SelectionStrategy {
    type Err = TpfError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s.as_str(), None),
        };
        let bad = || TpfError::Config(format!("cannot parse strategy {s:?}"));
        let strategy = match (kind, arg) {
            ("all", None) => SelectionStrategy::All,
            ("top-n" | "topn" | "top", Some(a)) => {
                SelectionStrategy::TopN(a.parse().map_err(|_| bad())?)
            }
            ("adaptive", None) => SelectionStrategy::Adaptive(DEFAULT_ADAPTIVE_THRESHOLD),
            ("adaptive", Some(a)) => SelectionStrategy::Adaptive(a.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// One box from the toy detector, in L4 cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: ClassId,
    pub bbox: BoundingBox,
    pub confidence: f32,
}

pub type Scores = BTreeMap<ClassId, f32>;

/// Score each candidate class from its L4 correlation map alone.
pub fn score_all(model: &TpfModel, episode: &Episode) -> Result<Scores> {
    episode
        .classes()
        .map(|c| {
            let map = episode.correlation(c, Level::L4)?;
            Ok((c, model.score(&map)?))
        })
        .collect()
}

/// Classes chosen by `strategy`, highest score first; ties go to the lower id.
pub fn select(scores: &Scores, strategy: SelectionStrategy) -> Vec<ClassId> {
    let mut ranked: Vec<(ClassId, f32)> = scores.iter().map(|(&c, &s)| (c, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    match strategy {
        SelectionStrategy::TopN(n) => ranked.into_iter().take(n).map(|(c, _)| c).collect(),
        SelectionStrategy::Adaptive(t) => {
            ranked.into_iter().filter(|&(_, s)| s >= t).map(|(c, _)| c).collect()
        }
        SelectionStrategy::All => ranked.into_iter().map(|(c, _)| c).collect(),
    }
}

/// Channel-mean heat map, thresholded at `peak_threshold` times its maximum;
/// each 4-connected component becomes one box scored by its peak.
pub fn detect_toy(fused: &FeatureMap, peak_threshold: f32, class_id: ClassId) -> Vec<Detection> {
    let (h, w) = (fused.height(), fused.width());
    let n = h * w;
    let mut heat = vec![0.0f64; n];
    for c in 0..fused.channels() {
        for (acc, &v) in heat.iter_mut().zip(fused.channel(c)) {
            *acc += f64::from(v);
        }
    }
    let inv = 1.0 / fused.channels() as f64;
    let heat: Vec<f32> = heat.into_iter().map(|v| (v * inv) as f32).collect();
    let peak = heat.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(peak > 0.0) {
        return Vec::new();
    }
    let cut = peak_threshold * peak;

    let mut seen = vec![false; n];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if seen[start] || heat[start] < cut {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut x1, mut y1, mut x2, mut y2) = (w, h, 0, 0);
        let mut best = f32::NEG_INFINITY;
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
            best = best.max(heat[p]);
            let mut visit = |q: usize| {
                if !seen[q] && heat[q] >= cut {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        out.push(Detection {
            class_id,
            bbox: BoundingBox::new(x1 as f32, y1 as f32, x2 as f32, y2 as f32),
            confidence: best,
        });
    }
    // Stable: equal peaks keep raster order of their first cell.
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceParams {
    pub peak_threshold: f32,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self { peak_threshold: DEFAULT_PEAK_THRESHOLD }
    }
}

/// Wall-clock durations; these are the only non-deterministic outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub scoring: Duration,
    pub fusion: Duration,
    pub detection: Duration,
    pub total: Duration,
}

impl StageTimings {
    pub fn heavy(&self) -> Duration {
        self.fusion + self.detection
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    /// Empty for `All`, which skips scoring.
    pub scores: Scores,
    pub selected: Vec<ClassId>,
    /// Every candidate class; unselected classes map to an empty list.
    pub detections: BTreeMap<ClassId, Vec<Detection>>,
    pub heavy_invocations: usize,
    pub timings: StageTimings,
}

/// Fuse all three levels of one class and run the toy detector.
fn heavy_stage(
    ckpt: &Checkpoint,
    episode: &Episode,
    class: ClassId,
    params: &InferenceParams,
    timings: &mut StageTimings,
) -> Result<Vec<Detection>> {
    let t0 = Instant::now();
    let maps = episode.correlations(class)?;
    let fused = fuse_levels(&maps, &ckpt.fusion)?;
    let t1 = Instant::now();
    let dets = detect_toy(&fused, params.peak_threshold, class);
    timings.fusion += t1 - t0;
    timings.detection += t1.elapsed();
    Ok(dets)
}

/// Score, select, then run the heavy stages for the selected classes only.
/// `All` is the full loop: no scoring, every class in id order.
pub fn run_inference(
    ckpt: &Checkpoint,
    episode: &Episode,
    strategy: SelectionStrategy,
    params: &InferenceParams,
) -> Result<InferenceOutput> {
    strategy.validate()?;
    let start = Instant::now();
    let mut timings = StageTimings::default();

    let (scores, selected) = if strategy.uses_scores() {
        let t = Instant::now();
        let scores = score_all(&ckpt.tpf, episode)?;
        let selected = select(&scores, strategy);
        timings.scoring = t.elapsed();
        (scores, selected)
    } else {
        (Scores::new(), episode.classes().collect())
    };

    let mut detections: BTreeMap<ClassId, Vec<Detection>> =
        episode.classes().map(|c| (c, Vec::new())).collect();
    let mut heavy_invocations = 0;
    for &class in &selected {
        let dets = heavy_stage(ckpt, episode, class, params, &mut timings)?;
        detections.insert(class, dets);
        heavy_invocations += 1;
    }
    timings.total = start.elapsed();
    Ok(InferenceOutput { scores, selected, detections, heavy_invocations, timings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{synth_episode, SynthConfig};

    fn scores(pairs: &[(u32, f32)]) -> Scores {
        pairs.iter().map(|&(c, s)| (ClassId(c), s)).collect()
    }

    #[test]
    fn select_examples() {
        let s = scores(&[(0, 0.9), (1, 0.2), (2, 0.8)]);
        assert_eq!(select(&s, SelectionStrategy::TopN(2)), vec![ClassId(0), ClassId(2)]);
        assert_eq!(select(&s, SelectionStrategy::Adaptive(0.5)), vec![ClassId(0), ClassId(2)]);
        assert!(select(&s, SelectionStrategy::Adaptive(0.95)).is_empty());
        assert_eq!(select(&s, SelectionStrategy::TopN(10)).len(), 3);
        assert_eq!(
            select(&s, SelectionStrategy::All),
            vec![ClassId(0), ClassId(2), ClassId(1)]
        );
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let s = scores(&[(5, 0.5), (2, 0.5), (9, 0.7)]);
        assert_eq!(
            select(&s, SelectionStrategy::TopN(2)),
            vec![ClassId(9), ClassId(2)]
        );
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("all".parse::<SelectionStrategy>().unwrap(), SelectionStrategy::All);
        assert_eq!("top-n:10".parse::<SelectionStrategy>().unwrap(), SelectionStrategy::TopN(10));
        assert_eq!(
            "adaptive".parse::<SelectionStrategy>().unwrap(),
            SelectionStrategy::Adaptive(0.5)
        );
        assert_eq!(
            "adaptive:0.25".parse::<SelectionStrategy>().unwrap(),
            SelectionStrategy::Adaptive(0.25)
        );
        for bad in ["top-n:0", "adaptive:1.5", "bogus", "top-n:x"] {
            assert!(bad.parse::<SelectionStrategy>().is_err(), "{bad}");
        }
        let s = SelectionStrategy::TopN(4);
        assert_eq!(s.to_string().parse::<SelectionStrategy>().unwrap(), s);
    }

    fn heat_map(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> FeatureMap {
        FeatureMap::from_fn(2, h, w, Level::Fused, |_, y, x| f(y, x)).unwrap()
    }

    #[test]
    fn detector_on_empty_map() {
        let z = FeatureMap::zeros(3, 8, 8, Level::Fused).unwrap();
        assert!(detect_toy(&z, 0.5, ClassId(0)).is_empty());
    }

    #[test]
    fn detector_single_blob() {
        let m = heat_map(8, 8, |y, x| {
            let d2 = (x as f32 - 3.0).powi(2) + (y as f32 - 4.0).powi(2);
            (-d2 / 2.0).exp()
        });
        let dets = detect_toy(&m, 0.5, ClassId(7));
        assert_eq!(dets.len(), 1);
        // exp(-d2/2) >= 0.5 <=> d2 <= 1.386: the 4-neighbourhood only.
        assert_eq!(dets[0].bbox, BoundingBox::new(2.0, 3.0, 5.0, 6.0));
        assert_eq!(dets[0].class_id, ClassId(7));
        assert!((dets[0].confidence - 1.0).abs() < 1e-6);
    }

    #[test]
    fn detector_two_blobs_sorted_by_peak() {
        let m = heat_map(8, 8, |y, x| match (y, x) {
            (1, 1) | (1, 2) => 2.0,
            (6, 6) => 3.0,
            _ => 0.0,
        });
        let dets = detect_toy(&m, 0.5, ClassId(0));
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].bbox, BoundingBox::new(6.0, 6.0, 7.0, 7.0));
        assert_eq!(dets[1].bbox, BoundingBox::new(1.0, 1.0, 3.0, 2.0));
    }

    #[test]
    fn diagonal_cells_are_separate_components() {
        let m = heat_map(4, 4, |y, x| if (y, x) == (0, 0) || (y, x) == (1, 1) { 1.0 } else { 0.0 });
        assert_eq!(detect_toy(&m, 0.5, ClassId(0)).len(), 2);
    }

    #[test]
    fn zero_model_scores_are_half_and_selection_follows_ids() {
        let cfg = SynthConfig { num_classes: 5, present_count: 1, seed: 2, ..SynthConfig::default() };
        let ep = synth_episode(&cfg).unwrap();
        let ckpt = Checkpoint::new(
            TpfModel::zeros(64, 8).unwrap(),
            crate::episode::FusionProjections::identity(cfg.channels, 64).unwrap(),
        )
        .unwrap();
        let s = score_all(&ckpt.tpf, &ep).unwrap();
        assert!(s.values().all(|&v| v == 0.5));
        let out = run_inference(&ckpt, &ep, SelectionStrategy::TopN(2), &InferenceParams::default())
            .unwrap();
        assert_eq!(out.selected, vec![ClassId(0), ClassId(1)]);
        assert_eq!(out.heavy_invocations, 2);
        assert!(out.detections[&ClassId(4)].is_empty());
    }
}
