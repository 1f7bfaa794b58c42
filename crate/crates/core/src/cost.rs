//! Linear latency model for full-loop and minor-loop inference, and a
//! least-squares fit of that model to measured stage timings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::selector::InferenceOutput;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("invalid cost profile: {0}")]
    Invalid(String),
    #[error("cannot fit profile: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, CostError>;

/// Seconds per module. Fusion, proposal and head are totals for a full
/// loop over `n_ref` classes; the backbone runs once per query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub t_backbone: f64,
    pub t_fusion: f64,
    pub t_rpn: f64,
    pub t_head: f64,
    pub t_tpf_per_class: f64,
    pub n_ref: u32,
}

impl CostProfile {
    /// Reference module timings of a 20-class detector.
    pub const fn reference() -> Self {
        Self {
            t_backbone: 0.013,
            t_fusion: 0.099,
            t_rpn: 0.115,
            t_head: 0.506,
            t_tpf_per_class: 0.0019,
            n_ref: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let times = [
            ("t_backbone", self.t_backbone),
            ("t_fusion", self.t_fusion),
            ("t_rpn", self.t_rpn),
            ("t_head", self.t_head),
            ("t_tpf_per_class", self.t_tpf_per_class),
        ];
        for (name, t) in times {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(CostError::Invalid(format!("{name} = {t}")));
            }
        }
        if self.n_ref == 0 {
            return Err(CostError::Invalid("n_ref must be >= 1".into()));
        }
        Ok(())
    }

    pub fn per_class_cost(&self) -> f64 {
        (self.t_fusion + self.t_rpn + self.t_head) / f64::from(self.n_ref)
    }

    pub fn predict_time(&self, n_candidates: usize, n_selected: usize, use_tpf: bool) -> f64 {
        debug_assert!(n_selected <= n_candidates);
        let per_class = self.per_class_cost();
        if use_tpf {
            self.t_backbone
                + n_candidates as f64 * self.t_tpf_per_class
                + n_selected as f64 * per_class
        } else {
            self.t_backbone + n_candidates as f64 * per_class
        }
    }
}

impl Default for CostProfile {
    fn default() -> Self {
        Self::reference()
    }
}

/// Stage timings of one inference run, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub n_candidates: usize,
    pub n_selected: usize,
    pub used_tpf: bool,
    pub scoring_s: f64,
    pub fusion_s: f64,
    pub detection_s: f64,
    pub total_s: f64,
}

impl TimingRecord {
    pub fn from_output(out: &InferenceOutput, n_candidates: usize, used_tpf: bool) -> Self {
        Self {
            n_candidates,
            n_selected: out.heavy_invocations,
            used_tpf,
            scoring_s: out.timings.scoring.as_secs_f64(),
            fusion_s: out.timings.fusion.as_secs_f64(),
            detection_s: out.timings.detection.as_secs_f64(),
            total_s: out.timings.total.as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FittedProfile {
    pub profile: CostProfile,
    /// Root-mean-square error of predicted vs. observed total time.
    pub residual_s: f64,
    pub runs: usize,
}

/// Fit a profile to measured runs.
///
/// Everything except scoring is regressed on `n_selected`: the intercept is
/// the per-query cost, the slope the per-class heavy cost. The slope is split
/// into fusion and head by the measured share of each; the proposal stage
/// does not exist in the toy pipeline and is fitted as zero. Scoring cost per
/// candidate is a through-origin fit over runs that used the filter.
/// Negative estimates, which only noise produces, are clamped to zero.
pub fn measure(records: &[TimingRecord], n_ref: u32) -> Result<FittedProfile> {
    if n_ref == 0 {
        return Err(CostError::Invalid("n_ref must be >= 1".into()));
    }
    if records.len() < 2 {
        return Err(CostError::Degenerate(format!("{} runs, need at least 2", records.len())));
    }
    let n = records.len() as f64;
    let xs: Vec<f64> = records.iter().map(|r| r.n_selected as f64).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.total_s - r.scoring_s).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(CostError::Degenerate("every run selected the same number of classes".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;

    let fusion: f64 = records.iter().map(|r| r.fusion_s).sum();
    let detection: f64 = records.iter().map(|r| r.detection_s).sum();
    let fusion_share = if fusion + detection > 0.0 { fusion / (fusion + detection) } else { 0.5 };

    let (num, den) = records
        .iter()
        .filter(|r| r.used_tpf)
        .fold((0.0, 0.0), |(a, b), r| {
            let c = r.n_candidates as f64;
            (a + r.scoring_s * c, b + c * c)
        });
    let t_tpf = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };

    let heavy = slope.max(0.0) * f64::from(n_ref);
    let profile = CostProfile {
        t_backbone: intercept.max(0.0),
        t_fusion: heavy * fusion_share,
        t_rpn: 0.0,
        t_head: heavy * (1.0 - fusion_share),
        t_tpf_per_class: t_tpf,
        n_ref,
    };
    let sse: f64 = records
        .iter()
        .map(|r| {
            let pred = profile.predict_time(r.n_candidates, r.n_selected, r.used_tpf);
            (pred - r.total_s).powi(2)
        })
        .sum();
    Ok(FittedProfile { profile, residual_s: (sse / n).sqrt(), runs: records.len() })
}
