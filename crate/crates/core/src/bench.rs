//! Repeated-run timing of the suppression variants.

use std::time::Instant;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::nms::{suppress_multiclass_indexed, DetBox, Kept, NMSSimilarConfig, SuppressionStats, Variant};

pub const MIN_REPS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NmsBenchReport {
    pub variant: Variant,
    pub boxes: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub decay_evals: u64,
    pub removals: u64,
    pub survivors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchSuite {
    pub boxes: usize,
    pub reps: usize,
    pub config: NMSSimilarConfig,
    pub variants: Vec<NmsBenchReport>,
    /// `hard <= similar <= soft` in median time.
    pub timing_order_holds: bool,
    /// `decay_evals(similar) <= decay_evals(soft)`.
    pub economy_holds: bool,
}

impl BenchSuite {
    pub fn get(&self, v: Variant) -> &NmsBenchReport {
        self.variants.iter().find(|r| r.variant == v).expect("every variant is benchmarked")
    }
}

struct Runner<'a> {
    corpus: &'a [DetBox],
    variant: Variant,
    cfg: &'a NMSSimilarConfig,
    times_ms: Vec<f64>,
    first: Option<(Vec<Kept>, SuppressionStats)>,
}

impl<'a> Runner<'a> {
    fn new(corpus: &'a [DetBox], variant: Variant, cfg: &'a NMSSimilarConfig) -> Self {
        Self {
            corpus,
            variant,
            cfg,
            times_ms: Vec::new(),
            first: None,
        }
    }

    fn run(&mut self, record: bool) -> Result<()> {
        let t = Instant::now();
        let (kept, stats) = suppress_multiclass_indexed(self.corpus, self.variant, self.cfg)?;
        let elapsed = t.elapsed().as_secs_f64() * 1e3;
        if !record {
            return Ok(());
        }
        self.times_ms.push(elapsed);
        match &self.first {
            None => self.first = Some((kept, stats)),
            Some((k0, s0)) => {
                let same = k0.len() == kept.len()
                    && k0
                        .iter()
                        .zip(&kept)
                        .all(|(a, b)| a.index == b.index && a.score.to_bits() == b.score.to_bits());
                if !same || s0.decay_evals != stats.decay_evals || s0.removals() != stats.removals() {
                    return Err(invalid(format!("{} produced different survivors across repetitions", self.variant)));
                }
            }
        }
        Ok(())
    }

    fn report(self) -> NmsBenchReport {
        let (kept, stats) = self.first.expect("at least one recorded run");
        let mut t = self.times_ms;
        t.sort_by(f64::total_cmp);
        NmsBenchReport {
            variant: self.variant,
            boxes: self.corpus.len(),
            reps: t.len(),
            median_ms: median(&t),
            min_ms: t[0],
            decay_evals: stats.decay_evals,
            removals: stats.removals(),
            survivors: kept.len(),
        }
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn check_inputs(corpus: &[DetBox], cfg: &NMSSimilarConfig, reps: usize) -> Result<()> {
    if corpus.is_empty() {
        return Err(invalid("bench_nms: corpus is empty"));
    }
    if reps < MIN_REPS {
        return Err(invalid(format!("bench_nms: reps must be at least {MIN_REPS}, got {reps}")));
    }
    cfg.validate()
}

/// Time one variant `reps` times (after one untimed warm-up run).
pub fn bench_nms(corpus: &[DetBox], variant: Variant, cfg: &NMSSimilarConfig, reps: usize) -> Result<NmsBenchReport> {
    check_inputs(corpus, cfg, reps)?;
    let mut r = Runner::new(corpus, variant, cfg);
    r.run(false)?;
    for _ in 0..reps {
        r.run(true)?;
    }
    Ok(r.report())
}

/// All three variants, with repetitions interleaved so that slow drift in
/// machine load hits every variant alike.
pub fn bench_all(corpus: &[DetBox], cfg: &NMSSimilarConfig, reps: usize) -> Result<BenchSuite> {
    check_inputs(corpus, cfg, reps)?;
    let mut runners: Vec<Runner> = Variant::ALL.iter().map(|&v| Runner::new(corpus, v, cfg)).collect();
    for r in &mut runners {
        r.run(false)?;
    }
    for _ in 0..reps {
        for r in &mut runners {
            r.run(true)?;
        }
    }
    let variants: Vec<NmsBenchReport> = runners.into_iter().map(Runner::report).collect();
    let ms = |v: Variant| variants.iter().find(|r| r.variant == v).unwrap().median_ms;
    let evals = |v: Variant| variants.iter().find(|r| r.variant == v).unwrap().decay_evals;
    Ok(BenchSuite {
        boxes: corpus.len(),
        reps,
        config: *cfg,
        timing_order_holds: ms(Variant::Hard) <= ms(Variant::Similar) && ms(Variant::Similar) <= ms(Variant::Soft),
        economy_holds: evals(Variant::Similar) <= evals(Variant::Soft),
        variants,
    })
}
