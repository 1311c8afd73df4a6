//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line for
//! each, and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use amsp_core::amsp::{amsp_permute, vconv_param_count, AMSPConfig, AMSPVConvBlock};
use amsp_core::bench::bench_all;
use amsp_core::fadcsp::{
    fad_csp_forward_var, gfa_attention_var, rep_bottleneck_forward_var, FADCSPParams, GFAParams, RepBottleneckParams,
};
use amsp_core::nms::synth::dense_corpus;
use amsp_core::nms::{
    nms_hard_indexed, nms_similar_indexed, soft_nms_indexed, DetBox, Kept, NMSSimilarConfig, SimilarMode, Variant,
};
use amsp_core::noise::{noise_probe, NoiseProbeConfig};
use amsp_core::ops;
use amsp_core::{grad_check, init, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Box sets of size 1..=200 drawn from four layouts: sparse, medium,
/// packed and clustered.
fn random_box_sets(count: usize, seed: u64) -> Vec<Vec<DetBox>> {
    let mut rng = init::rng(seed);
    (0..count)
        .map(|i| {
            let n = rng.random_range(1..=200);
            match i % 4 {
                3 => dense_corpus(n, rng.random())
                    .unwrap()
                    .into_iter()
                    .map(|b| DetBox { class_id: 0, ..b })
                    .collect(),
                layout => {
                    let spread = [1000.0, 200.0, 50.0][layout];
                    (0..n)
                        .map(|_| {
                            let x = rng.random_range(0.0..spread);
                            let y = rng.random_range(0.0..spread);
                            let w = rng.random_range(2.0..60.0);
                            let h = rng.random_range(2.0..60.0);
                            DetBox::new(x, y, x + w, y + h, rng.random_range(0.0..=1.0), 0).unwrap()
                        })
                        .collect()
                }
            }
        })
        .collect()
}

fn same_kept(a: &[Kept], b: &[Kept], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(p, q)| p.index == q.index && (p.score - q.score).abs() <= tol)
}

fn criterion_1() -> Outcome {
    let sets = random_box_sets(1200, 1);
    let mut rng = init::rng(2);
    for (i, boxes) in sets.iter().enumerate() {
        let n_t = rng.random_range(0.3..0.7);
        let base = NMSSimilarConfig::default();
        let a = NMSSimilarConfig {
            iou_threshold: n_t,
            sim_threshold: 1.0,
            ..base
        };
        let (sim, _) = nms_similar_indexed(boxes, &a);
        let (hard, _) = nms_hard_indexed(boxes, n_t, base.score_floor);
        ensure(same_kept(&sim, &hard, 1e-12), || format!("set {i}: N_s = 1 differs from hard NMS"))?;

        let b = NMSSimilarConfig {
            iou_threshold: 1.0,
            sim_threshold: 0.0,
            ..base
        };
        let (sim, _) = nms_similar_indexed(boxes, &b);
        let (soft, _) = soft_nms_indexed(boxes, base.sigma, base.score_floor);
        ensure(same_kept(&sim, &soft, 1e-12), || format!("set {i}: N_t = 1, N_s = 0 differs from soft NMS"))?;
    }
    Ok(format!("{} box sets, sizes 1-200, both equivalences exact", sets.len()))
}

fn criterion_2() -> Outcome {
    let sets = random_box_sets(1200, 3);
    let mut checked = 0;
    for mode in [SimilarMode::Literal, SimilarMode::DensePreserve] {
        let cfg = NMSSimilarConfig {
            mode,
            ..Default::default()
        };
        for (i, boxes) in sets.iter().enumerate() {
            let (_, sim) = nms_similar_indexed(boxes, &cfg);
            let (_, soft) = soft_nms_indexed(boxes, cfg.sigma, cfg.score_floor);
            ensure(sim.decay_evals <= soft.decay_evals, || {
                format!("set {i} ({mode:?}): similar {} > soft {}", sim.decay_evals, soft.decay_evals)
            })?;
            checked += 1;
        }
    }
    let corpus = dense_corpus(2000, 0).map_err(|e| e.to_string())?;
    let cfg = NMSSimilarConfig::default();
    let (_, sim) = amsp_core::nms::suppress_multiclass_indexed(&corpus, Variant::Similar, &cfg).map_err(|e| e.to_string())?;
    let (_, soft) = amsp_core::nms::suppress_multiclass_indexed(&corpus, Variant::Soft, &cfg).map_err(|e| e.to_string())?;
    ensure(sim.decay_evals < soft.decay_evals, || {
        format!("dense corpus: similar {} not < soft {}", sim.decay_evals, soft.decay_evals)
    })?;
    Ok(format!(
        "{checked} inputs (both modes) satisfy similar <= soft; dense corpus {} < {}",
        sim.decay_evals, soft.decay_evals
    ))
}

fn criterion_3() -> Outcome {
    let corpus = dense_corpus(2000, 0).map_err(|e| e.to_string())?;
    let suite = bench_all(&corpus, &NMSSimilarConfig::default(), 10).map_err(|e| e.to_string())?;
    let ms = |v| suite.get(v).median_ms;
    let line = format!(
        "median ms hard {:.2} / similar {:.2} / soft {:.2}",
        ms(Variant::Hard),
        ms(Variant::Similar),
        ms(Variant::Soft)
    );
    ensure(suite.timing_order_holds, || format!("ordering violated: {line}"))?;
    Ok(line)
}

fn criterion_4() -> Outcome {
    let shape = [2, 8, 6, 6];
    let x = Tensor::normal(shape, 1.0, &mut init::rng(40));
    let weights = |s: amsp_core::Shape, seed| Tensor::normal(s, 1.0, &mut init::rng(seed));
    let out_shape = |f: &dyn Fn(amsp_core::Var<'_>) -> amsp_core::Result<amsp_core::Var<'_>>| {
        let tape = Tape::no_grad();
        f(tape.leaf(x.clone())).map(|v| v.shape())
    };

    let block = AMSPVConvBlock::with_defaults(8, 41).map_err(|e| e.to_string())?;
    let gfa = GFAParams::seeded(8, 2, 42).map_err(|e| e.to_string())?;
    let rep = RepBottleneckParams::seeded(8, 2, 43).map_err(|e| e.to_string())?;
    let fad = FADCSPParams::seeded(8, 2, 2, 44).map_err(|e| e.to_string())?;

    let mut report = Vec::new();
    let rep_shape = out_shape(&|v| rep_bottleneck_forward_var(v, &rep)).map_err(|e| e.to_string())?;
    let w_full = weights(x.shape(), 45);
    let w_rep = weights(rep_shape, 46);
    let checks: [(&str, f64); 4] = [
        (
            "amsp_vconv",
            grad_check(|v| block.forward_var(v)?.weighted_sum(&w_full), &x, 1e-5).map_err(|e| e.to_string())?,
        ),
        (
            "gfa+apply",
            grad_check(|v| gfa_attention_var(v, &gfa)?.mul(v)?.weighted_sum(&w_full), &x, 1e-5)
                .map_err(|e| e.to_string())?,
        ),
        (
            "rep_bottleneck",
            grad_check(|v| rep_bottleneck_forward_var(v, &rep)?.weighted_sum(&w_rep), &x, 1e-5)
                .map_err(|e| e.to_string())?,
        ),
        (
            "fad_csp",
            grad_check(|v| fad_csp_forward_var(v, &fad)?.weighted_sum(&w_full), &x, 1e-5).map_err(|e| e.to_string())?,
        ),
    ];
    for (name, err) in checks {
        report.push(format!("{name} {err:.1e}"));
        ensure(err <= 1e-5, || format!("{name}: max relative error {err:e} > 1e-5"))?;
    }
    Ok(format!("max relative error at (2,8,6,6): {}", report.join(", ")))
}

fn criterion_5() -> Outcome {
    let mut rng = init::rng(50);
    let mut cases = 0;
    for &c in &[8usize, 16, 32] {
        for _ in 0..8 {
            let (b, h, w) = (rng.random_range(1..=2), rng.random_range(4..=16), rng.random_range(4..=16));
            let seed: u64 = rng.random();
            let x = Tensor::normal([b, c, h, w], 1.0, &mut init::rng(seed));
            let block = AMSPVConvBlock::with_defaults(c, seed).map_err(|e| e.to_string())?;
            let y = block.forward(&x).map_err(|e| e.to_string())?;
            ensure(y.shape() == x.shape(), || format!("amsp_vconv {} -> {}", x.shape(), y.shape()))?;
            let cbs = ops::cbs(&x, &block.entry.conv, &block.entry.bn).map_err(|e| e.to_string())?;
            let head = &ops::split_channels(&y, &[c / 2, c / 2]).map_err(|e| e.to_string())?[0];
            ensure(
                head.data().iter().zip(cbs.data()).all(|(p, q)| p.to_bits() == q.to_bits()),
                || format!("channels 0..{} differ from the CBS branch at {}", c / 2, x.shape()),
            )?;
            let fad = FADCSPParams::with_defaults(c, seed).map_err(|e| e.to_string())?;
            let z = amsp_core::fad_csp_forward(&x, &fad).map_err(|e| e.to_string())?;
            ensure(z.shape() == x.shape(), || format!("fad_csp {} -> {}", x.shape(), z.shape()))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} shapes preserved; CBS half bit-identical"))
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn criterion_6() -> Outcome {
    let mut checked = 0usize;
    for half in 1..=16usize {
        for t in (1..=half).filter(|t| half % t == 0) {
            let rows = half / t;
            let perms: Vec<Vec<usize>> = if rows <= 5 {
                all_permutations(rows)
            } else {
                (0..24u64)
                    .map(|s| {
                        let mut p: Vec<usize> = (0..rows).collect();
                        p.shuffle(&mut init::rng(s));
                        p
                    })
                    .collect()
            };
            let x = Tensor::normal([2, half, 3, 3], 1.0, &mut init::rng((half * 31 + t) as u64));
            let mut means_in = x.channel_means();
            means_in.sort_by(f64::total_cmp);
            for p in perms {
                let cfg = AMSPConfig::new(t, p).map_err(|e| e.to_string())?;
                let y = amsp_permute(&x, &cfg).map_err(|e| e.to_string())?;
                let mut means_out = y.channel_means();
                means_out.sort_by(f64::total_cmp);
                ensure(means_in == means_out, || format!("c/2={half} t={t}: channel multiset changed"))?;
                let back = amsp_permute(&y, &cfg.inverse()).map_err(|e| e.to_string())?;
                ensure(back == x, || format!("c/2={half} t={t}: inverse does not restore input"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} (c/2, t, permutation) cases, multiset kept and inverse exact"))
}

fn criterion_7() -> Outcome {
    let (v, s) = vconv_param_count(64, 3, 4).map_err(|e| e.to_string())?;
    ensure((v, s) == (19008, 36864), || format!("c=64 k=3 g=4 gave ({v}, {s})"))?;
    let mut checked = 0;
    for c in (4..=128usize).step_by(2) {
        for k in [1usize, 3, 5, 7] {
            for g in (1..=c / 2).filter(|g| (c / 2) % g == 0) {
                let (v, s) = vconv_param_count(c, k, g).map_err(|e| e.to_string())?;
                ensure(v < s, || format!("c={c} k={k} g={g}: {v} !< {s}"))?;
                if c <= 32 {
                    let block = AMSPVConvBlock::seeded(c, g, k, 0).map_err(|e| e.to_string())?;
                    ensure(block.weight_count() as u64 == v, || {
                        format!("c={c} k={k} g={g}: stored {} != formula {v}", block.weight_count())
                    })?;
                    let standard = init::cbs(c, c, k, 1, &mut init::rng(0)).map_err(|e| e.to_string())?;
                    ensure(standard.conv.weight.len() as u64 == s, || format!("c={c} k={k}: standard count mismatch"))?;
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} (c, k, g) cases fewer weights; 19008 < 36864 at c=64 k=3 g=4"))
}

fn criterion_8() -> Outcome {
    let cfg = NoiseProbeConfig::default();
    ensure(cfg.seeds >= 16, || "fewer than 16 seeds".into())?;
    let a = noise_probe(&cfg).map_err(|e| e.to_string())?;
    let b = noise_probe(&cfg).map_err(|e| e.to_string())?;
    let ja = serde_json::to_string(&a).map_err(|e| e.to_string())?;
    let jb = serde_json::to_string(&b).map_err(|e| e.to_string())?;
    ensure(ja == jb, || "report differs between identical runs".into())?;
    let mut tails = Vec::new();
    for c in &a.curves {
        ensure(cfg.levels[0] == 0.0 && c.mean_deviation[0] == 0.0, || {
            format!("{}: deviation at level 0 is {}", c.block, c.mean_deviation[0])
        })?;
        ensure(c.mean_deviation.windows(2).all(|w| w[1] >= w[0]), || {
            format!("{}: curve not non-decreasing {:?}", c.block, c.mean_deviation)
        })?;
        tails.push(format!("{} {:.3}", c.block, c.mean_deviation.last().unwrap()));
    }
    Ok(format!(
        "{} seeds, levels 0-10, deterministic; deviation at 10: {}",
        cfg.seeds,
        tails.join(", ")
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("NMS degenerate equivalences", criterion_1),
        ("suppression economy", criterion_2),
        ("timing ordering hard <= similar <= soft", criterion_3),
        ("gradient correctness", criterion_4),
        ("shape and residual contracts", criterion_5),
        ("permutation properties", criterion_6),
        ("parameter reduction", criterion_7),
        ("noise-probe sanity", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
