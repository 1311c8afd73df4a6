//! Greedy duplicate suppression: hard NMS, Gaussian Soft-NMS and the
//! aspect-ratio gated NMS-Similar.
//!
//! All variants share the same conventions so they can be compared exactly:
//!
//! * boxes scoring below `score_floor` are discarded up front, and decayed
//!   boxes are discarded as soon as their score falls below it;
//! * the pivot is the highest current score, ties going to the lower input
//!   index;
//! * output is sorted by (adjusted) score descending, ties by input index.

pub mod jsonl;
pub mod synth;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Axis-aligned box in corner form with a confidence and class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub class_id: u32,
}

impl DetBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class_id: u32) -> Result<Self> {
        let b = Self {
            x1,
            y1,
            x2,
            y2,
            score,
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("box coordinates must be finite"));
        }
        if !(self.x2 > self.x1 && self.y2 > self.y1) {
            return Err(invalid(format!(
                "degenerate box ({}, {}, {}, {}): width and height must be positive",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(invalid(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn with_score(self, score: f64) -> Self {
        Self { score, ..self }
    }

    /// Same corners (score and class ignored).
    pub fn same_geometry(&self, other: &DetBox) -> bool {
        self.x1 == other.x1 && self.y1 == other.y1 && self.x2 == other.x2 && self.y2 == other.y2
    }
}

pub fn iou(a: &DetBox, b: &DetBox) -> f64 {
    iou_with_areas(a, b, a.area(), b.area())
}

#[inline]
fn iou_with_areas(a: &DetBox, b: &DetBox, area_a: f64, area_b: f64) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
}

/// Cosine similarity of the `(width, height)` vectors, in `(0, 1]`.
pub fn aspect_sim(m: &DetBox, b: &DetBox) -> f64 {
    aspect_sim_with_norms(m, b, m.width().hypot(m.height()), b.width().hypot(b.height()))
}

#[inline]
fn aspect_sim_with_norms(m: &DetBox, b: &DetBox, norm_m: f64, norm_b: f64) -> f64 {
    let dot = m.width() * b.width() + m.height() * b.height();
    (dot / (norm_m * norm_b)).min(1.0)
}

/// Per-box quantities reused across pivots. Gives bit-identical results to
/// [`iou`] and [`aspect_sim`].
struct Prepared<'a> {
    boxes: &'a [DetBox],
    area: Vec<f64>,
    norm: Vec<f64>,
}

impl<'a> Prepared<'a> {
    fn new(boxes: &'a [DetBox], with_norms: bool) -> Self {
        Self {
            boxes,
            area: boxes.iter().map(DetBox::area).collect(),
            norm: if with_norms {
                boxes.iter().map(|b| b.width().hypot(b.height())).collect()
            } else {
                Vec::new()
            },
        }
    }

    #[inline]
    fn iou(&self, i: usize, j: usize) -> f64 {
        iou_with_areas(&self.boxes[i], &self.boxes[j], self.area[i], self.area[j])
    }

    #[inline]
    fn sim(&self, i: usize, j: usize) -> f64 {
        aspect_sim_with_norms(&self.boxes[i], &self.boxes[j], self.norm[i], self.norm[j])
    }
}

/// `score · exp(−iou² / σ)`.
pub fn gaussian_decay(score: f64, iou_val: f64, sigma: f64) -> f64 {
    score * (-(iou_val * iou_val) / sigma).exp()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarMode {
    /// Overlap above `N_t` removes; low-overlap boxes with similar aspect
    /// ratio are decayed; everything else is left alone.
    #[default]
    Literal,
    /// Overlap above `N_t` decays similar-shaped boxes and removes the rest.
    DensePreserve,
}

impl FromStr for SimilarMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "dense-preserve" | "dense_preserve" => Ok(Self::DensePreserve),
            other => Err(invalid(format!("unknown mode {other:?} (expected literal or dense-preserve)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NMSSimilarConfig {
    pub iou_threshold: f64,
    pub sim_threshold: f64,
    pub sigma: f64,
    pub score_floor: f64,
    pub mode: SimilarMode,
}

impl Default for NMSSimilarConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            sim_threshold: 0.9,
            sigma: 0.5,
            score_floor: 0.001,
            mode: SimilarMode::Literal,
        }
    }
}

impl NMSSimilarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(invalid(format!("iou threshold {} outside [0, 1]", self.iou_threshold)));
        }
        if !(self.score_floor >= 0.0) {
            return Err(invalid(format!("score floor {} is negative", self.score_floor)));
        }
        if self.sim_threshold.is_nan() {
            return Err(invalid("similarity threshold is NaN"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SuppressionStats {
    /// Applications of the Gaussian decay.
    pub decay_evals: u64,
    /// Boxes removed outright by the overlap threshold.
    pub hard_removals: u64,
    /// Boxes discarded for scoring below the floor (initially or after decay).
    pub floor_drops: u64,
    /// Pivots selected.
    pub iterations: u64,
    #[serde(serialize_with = "ser_duration_ms", rename = "wall_time_ms")]
    pub wall_time: Duration,
}

fn ser_duration_ms<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64() * 1e3)
}

impl SuppressionStats {
    pub fn merge(&mut self, other: &SuppressionStats) {
        self.decay_evals += other.decay_evals;
        self.hard_removals += other.hard_removals;
        self.floor_drops += other.floor_drops;
        self.iterations += other.iterations;
        self.wall_time += other.wall_time;
    }

    pub fn removals(&self) -> u64 {
        self.hard_removals + self.floor_drops
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Hard,
    Soft,
    Similar,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Hard, Variant::Soft, Variant::Similar];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Hard => "hard",
            Variant::Soft => "soft",
            Variant::Similar => "similar",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" | "nms" => Ok(Variant::Hard),
            "soft" | "soft-nms" => Ok(Variant::Soft),
            "similar" | "nms-similar" => Ok(Variant::Similar),
            other => Err(invalid(format!("unknown variant {other:?} (expected hard, soft or similar)"))),
        }
    }
}

/// A surviving box: its position in the input and its adjusted score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kept {
    pub index: usize,
    pub score: f64,
}

fn by_score_then_index(a: &Kept, b: &Kept) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

fn initial_candidates(boxes: &[DetBox], floor: f64, stats: &mut SuppressionStats) -> Vec<Kept> {
    let mut out = Vec::with_capacity(boxes.len());
    for (index, b) in boxes.iter().enumerate() {
        if b.score < floor {
            stats.floor_drops += 1;
        } else {
            out.push(Kept { index, score: b.score });
        }
    }
    out
}

fn argmax(cands: &[Kept]) -> usize {
    let mut best = 0;
    for i in 1..cands.len() {
        if by_score_then_index(&cands[i], &cands[best]) == Ordering::Less {
            best = i;
        }
    }
    best
}

fn finish(mut kept: Vec<Kept>, mut stats: SuppressionStats, started: Instant) -> (Vec<Kept>, SuppressionStats) {
    kept.sort_by(by_score_then_index);
    stats.wall_time = started.elapsed();
    (kept, stats)
}

/// Hard NMS returning survivor indices and counters.
pub fn nms_hard_indexed(boxes: &[DetBox], n_t: f64, score_floor: f64) -> (Vec<Kept>, SuppressionStats) {
    let started = Instant::now();
    let mut stats = SuppressionStats::default();
    let mut order = initial_candidates(boxes, score_floor, &mut stats);
    order.sort_by(by_score_then_index);
    let geo = Prepared::new(boxes, false);
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        stats.iterations += 1;
        let pivot = order[i].index;
        kept.push(order[i]);
        for j in (i + 1)..order.len() {
            if !suppressed[j] && geo.iou(pivot, order[j].index) > n_t {
                suppressed[j] = true;
                stats.hard_removals += 1;
            }
        }
    }
    finish(kept, stats, started)
}

/// Gaussian Soft-NMS returning survivor indices, decayed scores and counters.
pub fn soft_nms_indexed(boxes: &[DetBox], sigma: f64, score_floor: f64) -> (Vec<Kept>, SuppressionStats) {
    let started = Instant::now();
    let mut stats = SuppressionStats::default();
    let mut remaining = initial_candidates(boxes, score_floor, &mut stats);
    let geo = Prepared::new(boxes, false);
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let pivot = remaining.swap_remove(argmax(&remaining));
        stats.iterations += 1;
        let m = pivot.index;
        kept.push(pivot);
        remaining.retain_mut(|c| {
            c.score = gaussian_decay(c.score, geo.iou(m, c.index), sigma);
            stats.decay_evals += 1;
            if c.score < score_floor {
                stats.floor_drops += 1;
                false
            } else {
                true
            }
        });
    }
    finish(kept, stats, started)
}

/// NMS-Similar returning survivor indices, adjusted scores and counters.
pub fn nms_similar_indexed(boxes: &[DetBox], cfg: &NMSSimilarConfig) -> (Vec<Kept>, SuppressionStats) {
    let started = Instant::now();
    let mut stats = SuppressionStats::default();
    let mut remaining = initial_candidates(boxes, cfg.score_floor, &mut stats);
    let geo = Prepared::new(boxes, true);
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let pivot = remaining.swap_remove(argmax(&remaining));
        stats.iterations += 1;
        let m = pivot.index;
        kept.push(pivot);
        remaining.retain_mut(|c| {
            let overlap = geo.iou(m, c.index);
            let high = overlap > cfg.iou_threshold;
            if cfg.mode == SimilarMode::Literal && high {
                stats.hard_removals += 1;
                return false;
            }
            let similar = geo.sim(m, c.index) > cfg.sim_threshold;
            match (cfg.mode, high, similar) {
                (SimilarMode::Literal, false, true) | (SimilarMode::DensePreserve, true, true) => {
                    c.score = gaussian_decay(c.score, overlap, cfg.sigma);
                    stats.decay_evals += 1;
                    if c.score < cfg.score_floor {
                        stats.floor_drops += 1;
                        return false;
                    }
                    true
                }
                (SimilarMode::DensePreserve, true, false) => {
                    stats.hard_removals += 1;
                    false
                }
                _ => true,
            }
        });
    }
    finish(kept, stats, started)
}

fn materialise(boxes: &[DetBox], kept: &[Kept]) -> Vec<DetBox> {
    kept.iter().map(|k| boxes[k.index].with_score(k.score)).collect()
}

/// Greedy hard NMS over same-class boxes; kept boxes retain their scores.
pub fn nms_hard(boxes: &[DetBox], n_t: f64, score_floor: f64) -> Vec<DetBox> {
    materialise(boxes, &nms_hard_indexed(boxes, n_t, score_floor).0)
}

/// Gaussian Soft-NMS over same-class boxes; survivors carry decayed scores.
pub fn soft_nms(boxes: &[DetBox], sigma: f64, score_floor: f64) -> Vec<DetBox> {
    materialise(boxes, &soft_nms_indexed(boxes, sigma, score_floor).0)
}

pub fn nms_similar(boxes: &[DetBox], cfg: &NMSSimilarConfig) -> Result<(Vec<DetBox>, SuppressionStats)> {
    cfg.validate()?;
    let (kept, stats) = nms_similar_indexed(boxes, cfg);
    Ok((materialise(boxes, &kept), stats))
}

/// Run one variant over a same-class list. `cfg` supplies every threshold.
pub fn suppress_indexed(boxes: &[DetBox], variant: Variant, cfg: &NMSSimilarConfig) -> (Vec<Kept>, SuppressionStats) {
    match variant {
        Variant::Hard => nms_hard_indexed(boxes, cfg.iou_threshold, cfg.score_floor),
        Variant::Soft => soft_nms_indexed(boxes, cfg.sigma, cfg.score_floor),
        Variant::Similar => nms_similar_indexed(boxes, cfg),
    }
}

/// Partition by class, suppress each class independently, merge.
///
/// Returned indices refer to `boxes`; ordering is by score, then index.
pub fn suppress_multiclass_indexed(
    boxes: &[DetBox],
    variant: Variant,
    cfg: &NMSSimilarConfig,
) -> Result<(Vec<Kept>, SuppressionStats)> {
    cfg.validate()?;
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, b) in boxes.iter().enumerate() {
        by_class.entry(b.class_id).or_default().push(i);
    }
    let mut kept = Vec::new();
    let mut stats = SuppressionStats::default();
    for members in by_class.values() {
        let subset: Vec<DetBox> = members.iter().map(|&i| boxes[i]).collect();
        let (k, s) = suppress_indexed(&subset, variant, cfg);
        stats.merge(&s);
        kept.extend(k.into_iter().map(|k| Kept {
            index: members[k.index],
            score: k.score,
        }));
    }
    kept.sort_by(by_score_then_index);
    Ok((kept, stats))
}

pub fn suppress_multiclass(boxes: &[DetBox], variant: Variant, cfg: &NMSSimilarConfig) -> Result<Vec<DetBox>> {
    let (kept, _) = suppress_multiclass_indexed(boxes, variant, cfg)?;
    Ok(materialise(boxes, &kept))
}
