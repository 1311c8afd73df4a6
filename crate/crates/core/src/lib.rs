//! Reference kernels for the AMSP-VConv and FAD-CSP blocks, a small
//! reverse-mode tape for checking their gradients, and a greedy box
//! suppression engine with hard, Gaussian-soft and aspect-gated variants.
//!
//! Everything is `f64`, NCHW and deterministic for a given seed.

pub mod amsp;
pub mod archive;
pub mod autograd;
pub mod bench;
pub mod error;
pub mod fadcsp;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod nms;
pub mod noise;
pub mod ops;
pub mod tensor;

pub use amsp::{amsp_permute, amsp_vconv_forward, vconv_param_count, vortex_conv, AMSPConfig, AMSPVConvBlock, VConvParams};
pub use archive::Archive;
pub use autograd::{Gradients, Tape, Var};
pub use bench::{bench_all, bench_nms, BenchSuite, NmsBenchReport};
pub use error::{Error, Result};
pub use fadcsp::{
    fad_csp_forward, gfa_apply, gfa_attention, rep_bottleneck_forward, FADCSPParams, GFAParams, RepBottleneckParams,
};
pub use gradcheck::grad_check;
pub use nms::{
    aspect_sim, gaussian_decay, iou, nms_hard, nms_similar, soft_nms, suppress_multiclass, DetBox, NMSSimilarConfig,
    SimilarMode, SuppressionStats, Variant,
};
pub use noise::{noise_probe, NoiseProbeConfig, NoiseReport};
pub use ops::{Activation, BNParams, Cbs, ConvParams};
pub use tensor::{Shape, Tensor};
