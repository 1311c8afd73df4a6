//! Seeded dense box corpora: tight clusters of similar-shaped boxes, as in
//! crowded scenes, plus a sprinkling of unrelated outliers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::DetBox;
use crate::error::{invalid, Result};
use crate::init;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusConfig {
    pub boxes: usize,
    /// Mean boxes per cluster; the cluster count is `boxes / cluster_size`.
    pub cluster_size: usize,
    pub classes: u32,
    /// Fraction of boxes drawn uniformly over the canvas with random shape.
    pub outlier_fraction: f64,
    pub canvas: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            boxes: 2000,
            cluster_size: 40,
            classes: 3,
            outlier_fraction: 0.1,
            canvas: 1024.0,
        }
    }
}

struct Cluster {
    cx: f64,
    cy: f64,
    size: f64,
    ratio: f64,
    class_id: u32,
}

/// `n` boxes from the default layout.
pub fn dense_corpus(n: usize, seed: u64) -> Result<Vec<DetBox>> {
    generate(&CorpusConfig { boxes: n, ..Default::default() }, seed)
}

pub fn generate(cfg: &CorpusConfig, seed: u64) -> Result<Vec<DetBox>> {
    if cfg.boxes == 0 {
        return Err(invalid("synthetic corpus needs at least one box"));
    }
    if cfg.cluster_size == 0 || cfg.classes == 0 || !(0.0..=1.0).contains(&cfg.outlier_fraction) || !(cfg.canvas > 0.0) {
        return Err(invalid(format!("invalid corpus configuration {cfg:?}")));
    }
    let mut rng = init::rng(seed);
    let n_clusters = (cfg.boxes / cfg.cluster_size).max(1);
    let clusters: Vec<Cluster> = (0..n_clusters)
        .map(|_| Cluster {
            cx: rng.random_range(0.1..0.9) * cfg.canvas,
            cy: rng.random_range(0.1..0.9) * cfg.canvas,
            size: rng.random_range(0.03..0.08) * cfg.canvas,
            // log-uniform in [1/3, 3]
            ratio: rng.random_range(-(3f64.ln())..3f64.ln()).exp(),
            class_id: rng.random_range(0..cfg.classes),
        })
        .collect();
    let unit: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(cfg.boxes);
    for _ in 0..cfg.boxes {
        let score = rng.random_range(0.01..1.0);
        let (cx, cy, w, h, class_id) = if rng.random_bool(cfg.outlier_fraction) {
            let size = rng.random_range(0.01..0.1) * cfg.canvas;
            let ratio: f64 = rng.random_range(-(4f64.ln())..4f64.ln()).exp();
            (
                rng.random_range(0.0..1.0) * cfg.canvas,
                rng.random_range(0.0..1.0) * cfg.canvas,
                size * ratio.sqrt(),
                size / ratio.sqrt(),
                rng.random_range(0..cfg.classes),
            )
        } else {
            let c = &clusters[rng.random_range(0..clusters.len())];
            let size = c.size * (0.15 * unit.sample(&mut rng)).exp();
            let ratio = c.ratio * (0.08 * unit.sample(&mut rng)).exp();
            (
                c.cx + 0.25 * c.size * unit.sample(&mut rng),
                c.cy + 0.25 * c.size * unit.sample(&mut rng),
                size * ratio.sqrt(),
                size / ratio.sqrt(),
                c.class_id,
            )
        };
        out.push(DetBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, score, class_id)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = dense_corpus(300, 5).unwrap();
        assert_eq!(a.len(), 300);
        assert_eq!(a, dense_corpus(300, 5).unwrap());
        assert_ne!(a, dense_corpus(300, 6).unwrap());
        assert!(a.iter().all(|b| b.validate().is_ok()));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(dense_corpus(0, 1).is_err());
    }
}
