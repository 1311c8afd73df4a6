//! Cross-stage block pairing strip-pooling attention with split
//! pointwise/depthwise bottlenecks.

use crate::amsp::{amsp_permute_var, AMSPConfig};
use crate::autograd::{Tape, Var};
use crate::error::{check_divisible, invalid, Error, Result};
use crate::init;
use crate::ops::{Cbs, ConvParams};
use crate::tensor::Tensor;

pub const DEFAULT_REDUCTION: usize = 2;
pub const DEFAULT_SPLITS: usize = 2;

/// Global feature-aware attention parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GFAParams {
    pub reduction: usize,
    /// `c -> c/r`, 1×1.
    pub fuse: Cbs,
    /// `c/r -> c`, 1×1, applied to the row summaries.
    pub branch_h: ConvParams,
    /// `c/r -> c`, 1×1, applied to the column summaries.
    pub branch_w: ConvParams,
    /// Row shuffle over the `c` pooled channels.
    pub amsp: AMSPConfig,
}

/// Group width used for the attention-path shuffle: four rows when possible.
pub fn gfa_group_width(channels: usize) -> usize {
    if channels % 4 == 0 {
        channels / 4
    } else {
        1
    }
}

impl GFAParams {
    pub fn seeded(channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        if reduction == 0 {
            return Err(invalid("gfa: reduction ratio must be positive"));
        }
        check_divisible("gfa_attention", "channels", channels, reduction)?;
        let mid = channels / reduction;
        let mut rng = init::rng(init::derive_seed(seed, "gfa.fuse"));
        let fuse = init::cbs(channels, mid, 1, 1, &mut rng)?;
        let mut rng = init::rng(init::derive_seed(seed, "gfa.branch"));
        let branch = |rng: &mut init::SeededRng| -> Result<ConvParams> {
            let w = init::conv_weight([channels, mid, 1, 1], rng);
            let bias = Tensor::uniform([1, channels, 1, 1], -0.1, 0.1, rng).into_data();
            ConvParams::new(w, Some(bias), 1, 0, 1)
        };
        let branch_h = branch(&mut rng)?;
        let branch_w = branch(&mut rng)?;
        let amsp = AMSPConfig::seeded(channels, gfa_group_width(channels), init::derive_seed(seed, "gfa.amsp"))?;
        Ok(Self {
            reduction,
            fuse,
            branch_h,
            branch_w,
            amsp,
        })
    }

    pub fn channels(&self) -> usize {
        self.fuse.conv.in_channels()
    }
}

pub fn gfa_attention_var<'t>(f_in: Var<'t>, p: &GFAParams) -> Result<Var<'t>> {
    let s = f_in.shape();
    check_divisible("gfa_attention", "channels", s.c, p.reduction)?;
    if s.c != p.channels() {
        return Err(Error::Shape {
            op: "gfa_attention",
            dim: "channels",
            expected: p.channels(),
            actual: s.c,
        });
    }
    if s.h + s.w < 2 {
        return Err(invalid(format!("gfa_attention: h + w must be at least 2, got {s}")));
    }
    let (vh, vw) = f_in.strip_pools()?;
    let pooled = Var::concat_height(&[vh, vw.transpose_hw()?])?;
    let fused = amsp_permute_var(pooled, &p.amsp)?.cbs(&p.fuse)?;
    let parts = fused.split_height(&[s.h, s.w])?;
    let yh = parts[0].conv2d(&p.branch_h)?;
    let yw = parts[1].conv2d(&p.branch_w)?;
    Var::outer_hw(yh, yw)?.sigmoid()
}

/// Attention map `A_f` with the shape of `f_in`, every entry in `(0, 1)`.
pub fn gfa_attention(f_in: &Tensor, p: &GFAParams) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let a = gfa_attention_var(tape.leaf(f_in.clone()), p)?;
    Ok((*a.value()).clone())
}

pub fn gfa_apply(a_f: &Tensor, f_in: &Tensor) -> Result<Tensor> {
    crate::ops::mul(a_f, f_in)
}

/// Pointwise then depthwise CBS with an identity shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckParams {
    pub pointwise: Cbs,
    pub depthwise: Cbs,
}

impl BottleneckParams {
    pub fn seeded(channels: usize, seed: u64) -> Result<Self> {
        let mut rng = init::rng(seed);
        Ok(Self {
            pointwise: init::cbs(channels, channels, 1, 1, &mut rng)?,
            depthwise: init::cbs(channels, channels, 3, channels, &mut rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.pointwise.conv.in_channels()
    }
}

pub fn bottleneck_forward_var<'t>(x: Var<'t>, p: &BottleneckParams) -> Result<Var<'t>> {
    let y = x.cbs(&p.pointwise)?.cbs(&p.depthwise)?;
    x.add(y)
}

pub fn bottleneck_forward(x: &Tensor, p: &BottleneckParams) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let y = bottleneck_forward_var(tape.leaf(x.clone()), p)?;
    Ok((*y.value()).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepBottleneckParams {
    pub bottlenecks: Vec<BottleneckParams>,
}

impl RepBottleneckParams {
    pub fn seeded(channels: usize, splits: usize, seed: u64) -> Result<Self> {
        if splits == 0 {
            return Err(invalid("rep_bottleneck: split count must be positive"));
        }
        check_divisible("rep_bottleneck", "channels", channels, splits)?;
        let width = channels / splits;
        let bottlenecks = (0..splits)
            .map(|i| BottleneckParams::seeded(width, init::derive_seed(seed, &format!("rep.{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self { bottlenecks })
    }

    pub fn splits(&self) -> usize {
        self.bottlenecks.len()
    }
}

/// Split channels into `n` equal groups, run one bottleneck per group, sum.
pub fn rep_bottleneck_forward_var<'t>(x: Var<'t>, p: &RepBottleneckParams) -> Result<Var<'t>> {
    let n = p.splits();
    if n == 0 {
        return Err(invalid("rep_bottleneck: no bottlenecks"));
    }
    let c = x.shape().c;
    check_divisible("rep_bottleneck", "channels", c, n)?;
    let parts = x.split_channels(&vec![c / n; n])?;
    let mut acc: Option<Var<'t>> = None;
    for (part, bp) in parts.into_iter().zip(&p.bottlenecks) {
        let y = bottleneck_forward_var(part, bp)?;
        acc = Some(match acc {
            Some(a) => a.add(y)?,
            None => y,
        });
    }
    Ok(acc.expect("n >= 1"))
}

pub fn rep_bottleneck_forward(x: &Tensor, p: &RepBottleneckParams) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let y = rep_bottleneck_forward_var(tape.leaf(x.clone()), p)?;
    Ok((*y.value()).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FADCSPParams {
    pub gfa: GFAParams,
    pub rep: RepBottleneckParams,
    /// `(c/n + c) -> c`, 1×1.
    pub out_cbs: Cbs,
}

impl FADCSPParams {
    pub fn seeded(channels: usize, reduction: usize, splits: usize, seed: u64) -> Result<Self> {
        let gfa = GFAParams::seeded(channels, reduction, seed)?;
        let rep = RepBottleneckParams::seeded(channels, splits, seed)?;
        let mut rng = init::rng(init::derive_seed(seed, "out_cbs"));
        let out_cbs = init::cbs(channels / splits + channels, channels, 1, 1, &mut rng)?;
        Ok(Self { gfa, rep, out_cbs })
    }

    pub fn with_defaults(channels: usize, seed: u64) -> Result<Self> {
        Self::seeded(channels, DEFAULT_REDUCTION, DEFAULT_SPLITS, seed)
    }

    pub fn channels(&self) -> usize {
        self.gfa.channels()
    }
}

pub fn fad_csp_forward_var<'t>(f_in: Var<'t>, p: &FADCSPParams) -> Result<Var<'t>> {
    let a = gfa_attention_var(f_in, &p.gfa)?;
    let i_fd = a.mul(f_in)?;
    let i_rep = rep_bottleneck_forward_var(f_in, &p.rep)?;
    Var::concat_channels(&[i_rep, i_fd])?.cbs(&p.out_cbs)
}

/// Evaluates the attention and bottleneck paths concurrently.
pub fn fad_csp_forward(f_in: &Tensor, p: &FADCSPParams) -> Result<Tensor> {
    let (i_fd, i_rep) = rayon::join(
        || gfa_attention(f_in, &p.gfa).and_then(|a| gfa_apply(&a, f_in)),
        || rep_bottleneck_forward(f_in, &p.rep),
    );
    let cat = crate::ops::concat_channels(&[&i_rep?, &i_fd?])?;
    crate::ops::cbs(&cat, &p.out_cbs.conv, &p.out_cbs.bn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{self, sigmoid, BNParams};

    fn input(shape: [usize; 4], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut init::rng(seed))
    }

    fn zero_branches(p: &mut GFAParams) {
        for b in [&mut p.branch_h, &mut p.branch_w] {
            b.weight = Tensor::zeros(b.weight.shape());
            b.bias = None;
        }
    }

    #[test]
    fn zero_branches_give_half() {
        let mut p = GFAParams::seeded(8, 2, 1).unwrap();
        zero_branches(&mut p);
        let a = gfa_attention(&input([2, 8, 5, 4], 2), &p).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn attention_is_bounded_and_shaped() {
        let p = GFAParams::seeded(8, 2, 3).unwrap();
        let x = input([2, 8, 6, 5], 4);
        let a = gfa_attention(&x, &p).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    /// Scalar walk-through on a single pixel with c = 2, r = 2.
    #[test]
    fn single_pixel_hand_evaluation() {
        let x0 = 0.3;
        let x1 = -0.7;
        let fuse = Cbs {
            conv: ConvParams::new(Tensor::from_vec([1, 2, 1, 1], vec![0.5, -1.0]).unwrap(), None, 1, 0, 1).unwrap(),
            bn: BNParams::new(vec![1.5], vec![0.2], vec![0.1], vec![0.5], 0.0).unwrap(),
        };
        let branch = |w: [f64; 2], b: [f64; 2]| {
            ConvParams::new(Tensor::from_vec([2, 1, 1, 1], w.to_vec()).unwrap(), Some(b.to_vec()), 1, 0, 1).unwrap()
        };
        let p = GFAParams {
            reduction: 2,
            fuse,
            branch_h: branch([0.8, -0.4], [0.1, 0.0]),
            branch_w: branch([-1.2, 0.6], [0.0, 0.3]),
            // single row of width 2, nothing to shuffle
            amsp: AMSPConfig::identity(2, 2).unwrap(),
        };
        let x = Tensor::from_vec([1, 2, 1, 1], vec![x0, x1]).unwrap();
        let a = gfa_attention(&x, &p).unwrap();

        // Pooled values are 2x on a single pixel; the h- and w-entries coincide.
        let (v0, v1) = (2.0 * x0, 2.0 * x1);
        let pre = 0.5 * v0 - 1.0 * v1;
        let bn = 1.5 * (pre - 0.1) / 0.5f64.sqrt() + 0.2;
        let yf = bn * sigmoid(bn);
        let yh = [0.8 * yf + 0.1, -0.4 * yf];
        let yw = [-1.2 * yf, 0.6 * yf + 0.3];
        let expected = [sigmoid(yh[0] * yw[0]), sigmoid(yh[1] * yw[1])];
        assert!((a.data()[0] - expected[0]).abs() < 1e-14);
        assert!((a.data()[1] - expected[1]).abs() < 1e-14);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(GFAParams::seeded(6, 4, 0).is_err());
        let p = GFAParams::seeded(8, 2, 0).unwrap();
        assert!(gfa_attention(&Tensor::zeros([1, 6, 3, 3]), &p).is_err());
        assert!(RepBottleneckParams::seeded(6, 4, 0).is_err());
    }

    #[test]
    fn gfa_apply_cases() {
        let x = input([2, 3, 4, 4], 5);
        assert_eq!(gfa_apply(&Tensor::ones(x.shape()), &x).unwrap(), x);
        assert!(gfa_apply(&Tensor::zeros(x.shape()), &x).unwrap().data().iter().all(|&v| v == 0.0));
        let a = Tensor::uniform(x.shape(), 0.0, 1.0, &mut init::rng(6));
        let y = gfa_apply(&a, &x).unwrap();
        for i in 0..x.len() {
            assert_eq!(y.data()[i], a.data()[i] * x.data()[i]);
        }
        assert!(gfa_apply(&a, &Tensor::zeros([2, 3, 4, 5])).is_err());
    }

    fn zeroed(mut c: Cbs) -> Cbs {
        c.conv.weight = Tensor::zeros(c.conv.weight.shape());
        c.bn.beta.iter_mut().for_each(|b| *b = 0.0);
        c.bn.running_mean.iter_mut().for_each(|m| *m = 0.0);
        c
    }

    fn shortcut_only(p: &BottleneckParams) -> BottleneckParams {
        BottleneckParams {
            pointwise: zeroed(p.pointwise.clone()),
            depthwise: zeroed(p.depthwise.clone()),
        }
    }

    #[test]
    fn bottleneck_cases() {
        let p = BottleneckParams::seeded(4, 9).unwrap();
        let x = input([2, 4, 5, 5], 10);
        let y = bottleneck_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(bottleneck_forward(&x, &shortcut_only(&p)).unwrap(), x);

        let inner = ops::cbs(&x, &p.pointwise.conv, &p.pointwise.bn).unwrap();
        let inner = ops::cbs(&inner, &p.depthwise.conv, &p.depthwise.bn).unwrap();
        assert_eq!(y, ops::add(&x, &inner).unwrap());
    }

    #[test]
    fn rep_bottleneck_cases() {
        let x = input([2, 8, 4, 4], 11);
        let single = RepBottleneckParams::seeded(8, 1, 12).unwrap();
        assert_eq!(
            rep_bottleneck_forward(&x, &single).unwrap(),
            bottleneck_forward(&x, &single.bottlenecks[0]).unwrap()
        );

        let p = RepBottleneckParams::seeded(8, 2, 13).unwrap();
        let groups = ops::split_channels(&x, &[4, 4]).unwrap();
        let shortcut = RepBottleneckParams {
            bottlenecks: p.bottlenecks.iter().map(shortcut_only).collect(),
        };
        assert_eq!(
            rep_bottleneck_forward(&x, &shortcut).unwrap(),
            ops::add(&groups[0], &groups[1]).unwrap()
        );

        let manual = ops::add(
            &bottleneck_forward(&groups[0], &p.bottlenecks[0]).unwrap(),
            &bottleneck_forward(&groups[1], &p.bottlenecks[1]).unwrap(),
        )
        .unwrap();
        let got = rep_bottleneck_forward(&x, &p).unwrap();
        assert_eq!(got.shape(), manual.shape());
        assert!(got.max_abs_diff(&manual) < 1e-14);
    }

    #[test]
    fn fad_csp_shape_and_degenerate_composition() {
        let mut p = FADCSPParams::with_defaults(8, 14).unwrap();
        let x = input([2, 8, 6, 6], 15);
        assert_eq!(fad_csp_forward(&x, &p).unwrap().shape(), x.shape());

        // Zero branch weights with bias 10 give logits of 100, which saturate
        // the sigmoid to exactly 1.0 in f64.
        zero_branches(&mut p.gfa);
        p.gfa.branch_h.bias = Some(vec![10.0; 8]);
        p.gfa.branch_w.bias = Some(vec![10.0; 8]);
        assert!(gfa_attention(&x, &p.gfa).unwrap().data().iter().all(|&v| v == 1.0));
        p.rep.bottlenecks = p.rep.bottlenecks.iter().map(shortcut_only).collect();
        let groups = ops::split_channels(&x, &[4, 4]).unwrap();
        let sum = ops::add(&groups[0], &groups[1]).unwrap();
        let cat = ops::concat_channels(&[&sum, &x]).unwrap();
        let expected = ops::cbs(&cat, &p.out_cbs.conv, &p.out_cbs.bn).unwrap();
        assert_eq!(fad_csp_forward(&x, &p).unwrap(), expected);
    }

    #[test]
    fn concurrent_and_taped_paths_agree_bitwise() {
        let p = FADCSPParams::with_defaults(16, 16).unwrap();
        let x = input([2, 16, 7, 5], 17);
        let tape = Tape::new();
        let y = fad_csp_forward_var(tape.leaf(x.clone()), &p).unwrap();
        assert_eq!(*y.value(), fad_csp_forward(&x, &p).unwrap());
        assert_eq!(fad_csp_forward(&x, &p).unwrap(), fad_csp_forward(&x, &p).unwrap());
    }
}
