//! AMSP vortex convolution.
//!
//! The block halves the channel count with a 3×3 CBS, regroups the result
//! into rows of `t` channels, reorders the rows by a fixed seeded
//! permutation, convolves every row with one shared kernel, normalises, and
//! concatenates the CBS branch back in front:
//!
//! ```text
//! X  = CBS(F_in)                       c -> c/2
//! Y  = rows(X, t) reordered by perm
//! Z' = SiLU(BN(shared_conv(Y)))        c/2 -> c/2
//! F_out = [X, Z']                      c
//! ```

use rand::seq::SliceRandom;

use crate::autograd::{Tape, Var};
use crate::error::{check_divisible, invalid, Error, Result};
use crate::init;
use crate::ops::{BNParams, Cbs};
use crate::tensor::Tensor;

pub const DEFAULT_GROUPS: usize = 4;
pub const DEFAULT_KERNEL: usize = 3;

/// Channel regrouping (rows of `group_width`) plus the row permutation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AMSPConfig {
    pub group_width: usize,
    /// Output row `r` is input row `permutation[r]`.
    pub permutation: Vec<usize>,
    /// Seed the permutation was sampled from, if any.
    pub seed: Option<u64>,
}

impl AMSPConfig {
    pub fn new(group_width: usize, permutation: Vec<usize>) -> Result<Self> {
        if group_width == 0 {
            return Err(invalid("amsp: group width must be positive"));
        }
        let mut seen = vec![false; permutation.len()];
        for &p in &permutation {
            if p >= seen.len() || seen[p] {
                return Err(invalid(format!("amsp: permutation {permutation:?} is not a bijection")));
            }
            seen[p] = true;
        }
        Ok(Self {
            group_width,
            permutation,
            seed: None,
        })
    }

    pub fn identity(channels: usize, group_width: usize) -> Result<Self> {
        check_divisible("amsp_permute", "channels", channels, group_width)?;
        Self::new(group_width, (0..channels / group_width).collect())
    }

    /// Sample the row permutation once from `seed`.
    pub fn seeded(channels: usize, group_width: usize, seed: u64) -> Result<Self> {
        check_divisible("amsp_permute", "channels", channels, group_width)?;
        let mut perm: Vec<usize> = (0..channels / group_width).collect();
        perm.shuffle(&mut init::rng(seed));
        Ok(Self {
            seed: Some(seed),
            ..Self::new(group_width, perm)?
        })
    }

    pub fn rows(&self) -> usize {
        self.permutation.len()
    }

    pub fn channels(&self) -> usize {
        self.rows() * self.group_width
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.rows()];
        for (r, &p) in self.permutation.iter().enumerate() {
            inv[p] = r;
        }
        Self {
            group_width: self.group_width,
            permutation: inv,
            seed: None,
        }
    }

    /// Source channel for each output channel; within-row order is kept.
    pub fn channel_source(&self) -> Vec<usize> {
        let t = self.group_width;
        self.permutation
            .iter()
            .flat_map(|&row| (row * t)..(row * t + t))
            .collect()
    }

    fn check(&self, channels: usize) -> Result<()> {
        check_divisible("amsp_permute", "channels", channels, self.group_width)?;
        if channels != self.channels() {
            return Err(Error::Shape {
                op: "amsp_permute",
                dim: "channels",
                expected: self.channels(),
                actual: channels,
            });
        }
        Ok(())
    }
}

pub fn amsp_permute(x: &Tensor, cfg: &AMSPConfig) -> Result<Tensor> {
    cfg.check(x.shape().c)?;
    crate::ops::gather_channels(x, &cfg.channel_source())
}

pub fn amsp_permute_var<'t>(x: Var<'t>, cfg: &AMSPConfig) -> Result<Var<'t>> {
    cfg.check(x.shape().c)?;
    x.gather_channels(&cfg.channel_source())
}

/// Grouped convolution whose groups all share `shared_kernel`, followed by a
/// batch norm that is likewise shared across groups.
#[derive(Clone, Debug, PartialEq)]
pub struct VConvParams {
    /// `(t_out, t_in, k, k)`.
    pub shared_kernel: Tensor,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
    /// `t_out` channels, applied to every group.
    pub post_bn: BNParams,
}

impl VConvParams {
    pub fn new(shared_kernel: Tensor, groups: usize, stride: usize, padding: usize, post_bn: BNParams) -> Result<Self> {
        if groups == 0 || stride == 0 {
            return Err(invalid("vortex_conv: groups and stride must be positive"));
        }
        let t_out = shared_kernel.shape().b;
        if post_bn.channels() != t_out {
            return Err(Error::Shape {
                op: "vortex_conv",
                dim: "post_bn channels",
                expected: t_out,
                actual: post_bn.channels(),
            });
        }
        Ok(Self {
            shared_kernel,
            groups,
            stride,
            padding,
            post_bn,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.groups * self.shared_kernel.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.groups * self.shared_kernel.shape().b
    }

    fn tiled_bn(&self) -> BNParams {
        let tile = |v: &[f64]| v.repeat(self.groups);
        BNParams {
            gamma: tile(&self.post_bn.gamma),
            beta: tile(&self.post_bn.beta),
            running_mean: tile(&self.post_bn.running_mean),
            running_var: tile(&self.post_bn.running_var),
            eps: self.post_bn.eps,
        }
    }
}

pub fn vortex_conv_var<'t>(y: Var<'t>, p: &VConvParams) -> Result<Var<'t>> {
    let c = y.shape().c;
    check_divisible("vortex_conv", "channels", c, p.groups)?;
    if c != p.in_channels() {
        return Err(Error::Shape {
            op: "vortex_conv",
            dim: "input channels",
            expected: p.in_channels(),
            actual: c,
        });
    }
    y.shared_group_conv(&p.shared_kernel, p.groups, p.stride, p.padding)?
        .batch_norm(&p.tiled_bn())?
        .silu()
}

pub fn vortex_conv(y: &Tensor, p: &VConvParams) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let out = vortex_conv_var(tape.leaf(y.clone()), p)?;
    Ok((*out.value()).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AMSPVConvBlock {
    /// `c -> c/2`, kernel `k`, stride 1, same padding.
    pub entry: Cbs,
    pub amsp: AMSPConfig,
    pub vconv: VConvParams,
}

impl AMSPVConvBlock {
    pub fn new(entry: Cbs, amsp: AMSPConfig, vconv: VConvParams) -> Result<Self> {
        let half = entry.conv.out_channels();
        if entry.conv.in_channels() != 2 * half {
            return Err(invalid(format!(
                "amsp_vconv: entry conv must map c -> c/2, got {} -> {half}",
                entry.conv.in_channels()
            )));
        }
        if amsp.channels() != half || vconv.in_channels() != half || vconv.out_channels() != half {
            return Err(invalid(format!(
                "amsp_vconv: permutation covers {} channels, vortex conv maps {} -> {}, expected {half}",
                amsp.channels(),
                vconv.in_channels(),
                vconv.out_channels()
            )));
        }
        Ok(Self { entry, amsp, vconv })
    }

    /// Random weights for a `channels -> channels` block with `groups` vortex
    /// groups and odd kernel size `kernel`.
    pub fn seeded(channels: usize, groups: usize, kernel: usize, seed: u64) -> Result<Self> {
        check_divisible("amsp_vconv", "channels", channels, 2)?;
        if channels == 0 {
            return Err(invalid("amsp_vconv: channels must be positive"));
        }
        let half = channels / 2;
        check_divisible("amsp_vconv", "channels / 2", half, groups)?;
        if kernel % 2 == 0 {
            return Err(invalid(format!("amsp_vconv: kernel size {kernel} must be odd")));
        }
        let t = half / groups;
        let mut rng = init::rng(init::derive_seed(seed, "entry"));
        let entry = init::cbs(channels, half, kernel, 1, &mut rng)?;
        let amsp = AMSPConfig::seeded(half, t, init::derive_seed(seed, "amsp"))?;
        let mut rng = init::rng(init::derive_seed(seed, "vconv"));
        let kernel_w = init::conv_weight([t, t, kernel, kernel], &mut rng);
        let bn = init::batch_norm(t, &mut rng);
        let vconv = VConvParams::new(kernel_w, groups, 1, kernel / 2, bn)?;
        Self::new(entry, amsp, vconv)
    }

    pub fn with_defaults(channels: usize, seed: u64) -> Result<Self> {
        Self::seeded(channels, DEFAULT_GROUPS, DEFAULT_KERNEL, seed)
    }

    pub fn channels(&self) -> usize {
        self.entry.conv.in_channels()
    }

    /// Stored convolution weight elements (bias and BN excluded).
    pub fn weight_count(&self) -> usize {
        self.entry.conv.weight.len() + self.vconv.shared_kernel.len()
    }

    pub fn forward_var<'t>(&self, f_in: Var<'t>) -> Result<Var<'t>> {
        let c = f_in.shape().c;
        if c % 2 != 0 {
            return Err(Error::Divisibility {
                op: "amsp_vconv",
                what: "channels",
                value: c,
                divisor: 2,
            });
        }
        let x = f_in.cbs(&self.entry)?;
        let y = amsp_permute_var(x, &self.amsp)?;
        let z = vortex_conv_var(y, &self.vconv)?;
        Var::concat_channels(&[x, z])
    }

    pub fn forward(&self, f_in: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let out = self.forward_var(tape.leaf(f_in.clone()))?;
        Ok((*out.value()).clone())
    }
}

pub fn amsp_vconv_forward(f_in: &Tensor, block: &AMSPVConvBlock) -> Result<Tensor> {
    block.forward(f_in)
}

/// Weight counts `(vconv, standard)` for a `c -> c` block with kernel `k`
/// and `g` vortex groups, against one dense `c -> c` `k×k` convolution.
pub fn vconv_param_count(c: usize, k: usize, g: usize) -> Result<(u64, u64)> {
    if c == 0 || k == 0 || g == 0 {
        return Err(invalid("vconv_param_count: c, k and g must be positive"));
    }
    check_divisible("vconv_param_count", "c", c, 2)?;
    check_divisible("vconv_param_count", "c / 2", c / 2, g)?;
    let (c, k, g) = (c as u64, k as u64, g as u64);
    let half = c / 2;
    let t = half / g;
    let k2 = k * k;
    Ok((c * half * k2 + t * t * k2, c * c * k2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{self, ConvParams};

    fn labeled(c: usize) -> Tensor {
        Tensor::from_fn([1, c, 1, 1], |_, ch, _, _| ch as f64)
    }

    #[test]
    fn identity_permutation_is_noop() {
        let x = Tensor::from_fn([2, 6, 3, 3], |b, c, h, w| (b + 2 * c + 3 * h + 5 * w) as f64);
        let cfg = AMSPConfig::identity(6, 3).unwrap();
        assert_eq!(amsp_permute(&x, &cfg).unwrap(), x);
    }

    #[test]
    fn swapping_rows_of_two() {
        // channels [a, b, c, d] with t = 2, rows swapped -> [c, d, a, b]
        let cfg = AMSPConfig::new(2, vec![1, 0]).unwrap();
        let y = amsp_permute(&labeled(4), &cfg).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn inverse_recovers_input() {
        let x = Tensor::from_fn([2, 12, 2, 3], |b, c, h, w| (b * 7 + c * 13 + h * 3 + w) as f64 * 0.1);
        let cfg = AMSPConfig::seeded(12, 3, 99).unwrap();
        let y = amsp_permute(&x, &cfg).unwrap();
        assert_eq!(amsp_permute(&y, &cfg.inverse()).unwrap(), x);
    }

    #[test]
    fn permutation_validation() {
        assert!(AMSPConfig::new(2, vec![0, 0]).is_err());
        assert!(AMSPConfig::new(2, vec![0, 2]).is_err());
        assert!(AMSPConfig::seeded(10, 4, 1).is_err());
        let cfg = AMSPConfig::identity(8, 2).unwrap();
        let err = amsp_permute(&Tensor::zeros([1, 6, 1, 1]), &cfg).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let err = amsp_permute(&Tensor::zeros([1, 7, 1, 1]), &cfg).unwrap_err();
        assert!(matches!(err, Error::Divisibility { .. }));
    }

    #[test]
    fn seeded_permutation_is_reproducible() {
        assert_eq!(AMSPConfig::seeded(32, 2, 5).unwrap(), AMSPConfig::seeded(32, 2, 5).unwrap());
        assert_ne!(
            AMSPConfig::seeded(32, 2, 5).unwrap().permutation,
            AMSPConfig::seeded(32, 2, 6).unwrap().permutation
        );
    }

    fn vconv_params(t: usize, g: usize, seed: u64) -> VConvParams {
        let mut rng = init::rng(seed);
        VConvParams::new(
            init::conv_weight([t, t, 3, 3], &mut rng),
            g,
            1,
            1,
            init::batch_norm(t, &mut rng),
        )
        .unwrap()
    }

    #[test]
    fn identical_groups_give_identical_outputs() {
        let p = vconv_params(3, 2, 11);
        let mut rng = init::rng(12);
        let half = Tensor::uniform([2, 3, 5, 5], -1.0, 1.0, &mut rng);
        let y = ops::concat_channels(&[&half, &half]).unwrap();
        let z = vortex_conv(&y, &p).unwrap();
        let parts = ops::split_channels(&z, &[3, 3]).unwrap();
        assert_eq!(parts[0], parts[1]);
    }

    #[test]
    fn single_group_matches_plain_conv() {
        let p = vconv_params(4, 1, 21);
        let x = Tensor::uniform([1, 4, 6, 6], -1.0, 1.0, &mut init::rng(22));
        let conv = ConvParams::new(p.shared_kernel.clone(), None, 1, 1, 1).unwrap();
        let expected = ops::cbs(&x, &conv, &p.post_bn).unwrap();
        assert_eq!(vortex_conv(&x, &p).unwrap(), expected);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let p = VConvParams::new(Tensor::zeros([2, 2, 3, 3]), 3, 1, 1, BNParams::identity(2, 1e-5)).unwrap();
        let x = Tensor::uniform([1, 6, 4, 4], -1.0, 1.0, &mut init::rng(3));
        assert!(vortex_conv(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vortex_rejects_group_mismatch() {
        let p = vconv_params(2, 3, 1);
        assert!(vortex_conv(&Tensor::zeros([1, 4, 3, 3]), &p).is_err());
    }

    #[test]
    fn block_preserves_shape_and_passes_cbs_through() {
        let block = AMSPVConvBlock::with_defaults(8, 42).unwrap();
        let x = Tensor::uniform([2, 8, 6, 6], -1.0, 1.0, &mut init::rng(43));
        let out = block.forward(&x).unwrap();
        assert_eq!(out.shape(), x.shape());
        let head = ops::split_channels(&out, &[4, 4]).unwrap().remove(0);
        assert_eq!(head, ops::cbs(&x, &block.entry.conv, &block.entry.bn).unwrap());
    }

    /// Independent composition: explicit channel reorder loop and one plain
    /// convolution per group instead of the shared-kernel kernel.
    #[test]
    fn block_matches_stepwise_composition() {
        let block = AMSPVConvBlock::seeded(8, 2, 3, 7).unwrap();
        let x = Tensor::uniform([1, 8, 5, 5], -2.0, 2.0, &mut init::rng(8));
        let xb = ops::cbs(&x, &block.entry.conv, &block.entry.bn).unwrap();
        let t = block.amsp.group_width;
        let y = Tensor::from_fn(xb.shape(), |b, c, h, w| {
            let row = block.amsp.permutation[c / t];
            xb.at(b, row * t + c % t, h, w)
        });
        let conv = ConvParams::new(block.vconv.shared_kernel.clone(), None, 1, 1, 1).unwrap();
        let groups: Vec<Tensor> = ops::split_channels(&y, &[t, t])
            .unwrap()
            .iter()
            .map(|g| ops::cbs(g, &conv, &block.vconv.post_bn).unwrap())
            .collect();
        let z = ops::concat_channels(&[&groups[0], &groups[1]]).unwrap();
        let expected = ops::concat_channels(&[&xb, &z]).unwrap();
        let got = block.forward(&x).unwrap();
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn block_rejects_bad_geometry() {
        assert!(AMSPVConvBlock::seeded(7, 1, 3, 0).is_err());
        assert!(AMSPVConvBlock::seeded(12, 4, 3, 0).is_err());
        assert!(AMSPVConvBlock::seeded(8, 2, 2, 0).is_err());
        let block = AMSPVConvBlock::with_defaults(8, 0).unwrap();
        assert!(block.forward(&Tensor::zeros([1, 6, 4, 4])).is_err());
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(vconv_param_count(64, 3, 4).unwrap(), (19008, 36864));
        assert_eq!(vconv_param_count(2, 1, 1).unwrap(), (3, 4));
        // g = c/2 -> t = 1, shared kernel is k*k
        let (v, _) = vconv_param_count(16, 5, 8).unwrap();
        assert_eq!(v, 16 * 8 * 25 + 25);
        assert!(vconv_param_count(6, 3, 2).is_err());
        assert!(vconv_param_count(7, 3, 1).is_err());
    }

    #[test]
    fn param_count_matches_stored_weights() {
        for (c, k, g) in [(8, 3, 4), (16, 1, 2), (32, 5, 8), (64, 3, 4)] {
            let block = AMSPVConvBlock::seeded(c, g, k, 1).unwrap();
            let (v, _) = vconv_param_count(c, k, g).unwrap();
            assert_eq!(block.weight_count() as u64, v);
        }
    }
}
