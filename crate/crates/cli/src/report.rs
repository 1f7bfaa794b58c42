//! Report records: one JSON object per line, numbers fixed to 4 decimals.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::value::RawValue;
use tpf_core::cost::FittedProfile;
use tpf_core::{CostProfile, EvalReport};

pub type Num = Box<RawValue>;

pub fn fixed(x: f64) -> Num {
    // Round first so tiny negatives print as 0.0000, not -0.0000.
    let text = if x.is_finite() { format!("{:.4}", (x * 1e4).round() / 1e4 + 0.0) } else { "null".into() };
    RawValue::from_string(text).expect("valid number")
}

fn opt(x: Option<f64>) -> Num {
    fixed(x.unwrap_or(f64::NAN))
}

#[derive(Serialize)]
pub struct EvalRecord {
    pub kind: &'static str,
    pub config_hash: String,
    pub strategy: String,
    pub episodes: usize,
    pub ap_full: Num,
    pub ap_minor: Num,
    pub omission_rate: Num,
    pub mean_recall: Num,
    pub mean_selected: Num,
    pub class_recall: BTreeMap<u32, Num>,
    /// Wall-clock seconds; differs between runs.
    pub nondeterministic: TimingFields,
}

#[derive(Serialize)]
pub struct TimingFields {
    pub full_total_s: Num,
    pub full_heavy_s: Num,
    pub minor_total_s: Num,
    pub minor_heavy_s: Num,
    pub minor_scoring_s: Num,
    pub heavy_ratio: Num,
    pub scoring_overhead: Num,
}

impl EvalRecord {
    pub fn new(report: &EvalReport, config_hash: &str) -> Self {
        let t = &report.timing;
        Self {
            kind: "eval",
            config_hash: config_hash.to_owned(),
            strategy: report.strategy.to_string(),
            episodes: report.episodes,
            ap_full: fixed(report.ap_full),
            ap_minor: fixed(report.ap_minor),
            omission_rate: opt(report.omission_rate),
            mean_recall: opt(report.mean_recall()),
            mean_selected: fixed(report.mean_selected),
            class_recall: report.class_recall().into_iter().map(|(c, r)| (c.0, fixed(r))).collect(),
            nondeterministic: TimingFields {
                full_total_s: fixed(t.full_total_s),
                full_heavy_s: fixed(t.full_heavy_s),
                minor_total_s: fixed(t.minor_total_s),
                minor_heavy_s: fixed(t.minor_heavy_s),
                minor_scoring_s: fixed(t.minor_scoring_s),
                heavy_ratio: fixed(t.heavy_ratio),
                scoring_overhead: fixed(t.scoring_overhead),
            },
        }
    }
}

#[derive(Serialize)]
pub struct ProfileFields {
    pub t_backbone: Num,
    pub t_fusion: Num,
    pub t_rpn: Num,
    pub t_head: Num,
    pub t_tpf_per_class: Num,
    pub n_ref: u32,
}

impl From<&CostProfile> for ProfileFields {
    fn from(p: &CostProfile) -> Self {
        Self {
            t_backbone: fixed(p.t_backbone),
            t_fusion: fixed(p.t_fusion),
            t_rpn: fixed(p.t_rpn),
            t_head: fixed(p.t_head),
            t_tpf_per_class: fixed(p.t_tpf_per_class),
            n_ref: p.n_ref,
        }
    }
}

#[derive(Serialize)]
pub struct BenchRecord {
    pub kind: &'static str,
    pub config_hash: String,
    pub strategy: String,
    pub episodes: usize,
    pub repeat: usize,
    pub mean_candidates: Num,
    pub mean_selected: Num,
    pub predicted_full_s: Num,
    pub predicted_minor_s: Num,
    pub predicted_ratio: Num,
    /// Wall-clock seconds and the profile fitted to them; differ between runs.
    pub nondeterministic: BenchTiming,
}

#[derive(Serialize)]
pub struct BenchTiming {
    pub full_total_s: Num,
    pub full_heavy_s: Num,
    pub minor_total_s: Num,
    pub minor_heavy_s: Num,
    pub minor_scoring_s: Num,
    pub heavy_ratio: Num,
    pub scoring_overhead: Num,
    pub fitted: Option<FittedFields>,
}

#[derive(Serialize)]
pub struct FittedFields {
    pub profile: ProfileFields,
    pub residual_s: Num,
    pub runs: usize,
}

impl From<&FittedProfile> for FittedFields {
    fn from(f: &FittedProfile) -> Self {
        Self { profile: (&f.profile).into(), residual_s: fixed(f.residual_s), runs: f.runs }
    }
}

pub fn to_line<T: Serialize>(record: &T) -> String {
    serde_json::to_string(record).expect("record serializes")
}
