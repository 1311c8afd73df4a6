//! Block weight archives: a directory holding `manifest.json` and one
//! binary tensor file per weight array.
//!
//! The manifest names every layer by role, records the construction seed
//! and hyper-parameters, and spells out each channel permutation, so a
//! block can be rebuilt without replaying the random generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::amsp::{AMSPConfig, AMSPVConvBlock, VConvParams};
use crate::error::{Error, Result};
use crate::fadcsp::{BottleneckParams, FADCSPParams, GFAParams, RepBottleneckParams};
use crate::io;
use crate::ops::{BNParams, Cbs, ConvParams};
use crate::tensor::Tensor;

pub const FORMAT: &str = "amsp-weights/1";
pub const MANIFEST: &str = "manifest.json";
const EXT: &str = "amspt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerRecord {
    Conv {
        role: String,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    /// One kernel reused by every group.
    SharedConv {
        role: String,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    BatchNorm {
        role: String,
        eps: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationRecord {
    pub role: String,
    pub group_width: usize,
    pub permutation: Vec<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub block: String,
    pub seed: Option<u64>,
    pub hyper: BTreeMap<String, usize>,
    pub permutations: Vec<PermutationRecord>,
    pub layers: Vec<LayerRecord>,
    /// Tensor name to file name, relative to the archive directory.
    pub tensors: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    fn new(block: &str, seed: Option<u64>) -> Self {
        Self {
            manifest: Manifest {
                format: FORMAT.into(),
                block: block.into(),
                seed,
                hyper: BTreeMap::new(),
                permutations: Vec::new(),
                layers: Vec::new(),
                tensors: BTreeMap::new(),
            },
            tensors: BTreeMap::new(),
        }
    }

    fn put(&mut self, name: String, t: Tensor) {
        self.manifest.tensors.insert(name.clone(), format!("{name}.{EXT}"));
        self.tensors.insert(name, t);
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("archive has no tensor {name:?}")))
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.data().to_vec())
    }

    fn layer(&self, role: &str) -> Result<&LayerRecord> {
        self.manifest
            .layers
            .iter()
            .find(|l| match l {
                LayerRecord::Conv { role: r, .. }
                | LayerRecord::SharedConv { role: r, .. }
                | LayerRecord::BatchNorm { role: r, .. } => r == role,
            })
            .ok_or_else(|| Error::Format(format!("archive has no layer {role:?}")))
    }

    fn hyper(&self, key: &str) -> Result<usize> {
        self.manifest
            .hyper
            .get(key)
            .copied()
            .ok_or_else(|| Error::Format(format!("manifest lacks hyper-parameter {key:?}")))
    }

    fn put_conv(&mut self, role: &str, p: &ConvParams) {
        self.put(format!("{role}.weight"), p.weight.clone());
        if let Some(b) = &p.bias {
            self.put(format!("{role}.bias"), Tensor::channel_vector(b.clone()));
        }
        self.manifest.layers.push(LayerRecord::Conv {
            role: role.into(),
            stride: p.stride,
            padding: p.padding,
            groups: p.groups,
            bias: p.bias.is_some(),
        });
    }

    fn get_conv(&self, role: &str) -> Result<ConvParams> {
        match self.layer(role)? {
            LayerRecord::Conv {
                stride,
                padding,
                groups,
                bias,
                ..
            } => {
                let b = if *bias { Some(self.vector(&format!("{role}.bias"))?) } else { None };
                ConvParams::new(self.get(&format!("{role}.weight"))?.clone(), b, *stride, *padding, *groups)
            }
            other => Err(Error::Format(format!("layer {role:?} is {other:?}, expected a conv"))),
        }
    }

    fn put_bn(&mut self, role: &str, p: &BNParams) {
        for (field, v) in [
            ("gamma", &p.gamma),
            ("beta", &p.beta),
            ("running_mean", &p.running_mean),
            ("running_var", &p.running_var),
        ] {
            self.put(format!("{role}.{field}"), Tensor::channel_vector(v.clone()));
        }
        self.manifest.layers.push(LayerRecord::BatchNorm {
            role: role.into(),
            eps: p.eps,
        });
    }

    fn get_bn(&self, role: &str) -> Result<BNParams> {
        match self.layer(role)? {
            LayerRecord::BatchNorm { eps, .. } => BNParams::new(
                self.vector(&format!("{role}.gamma"))?,
                self.vector(&format!("{role}.beta"))?,
                self.vector(&format!("{role}.running_mean"))?,
                self.vector(&format!("{role}.running_var"))?,
                *eps,
            ),
            other => Err(Error::Format(format!("layer {role:?} is {other:?}, expected batch norm"))),
        }
    }

    fn put_cbs(&mut self, role: &str, p: &Cbs) {
        self.put_conv(&format!("{role}.conv"), &p.conv);
        self.put_bn(&format!("{role}.bn"), &p.bn);
    }

    fn get_cbs(&self, role: &str) -> Result<Cbs> {
        Ok(Cbs {
            conv: self.get_conv(&format!("{role}.conv"))?,
            bn: self.get_bn(&format!("{role}.bn"))?,
        })
    }

    fn put_permutation(&mut self, role: &str, p: &AMSPConfig) {
        self.manifest.permutations.push(PermutationRecord {
            role: role.into(),
            group_width: p.group_width,
            permutation: p.permutation.clone(),
            seed: p.seed,
        });
    }

    fn get_permutation(&self, role: &str) -> Result<AMSPConfig> {
        let r = self
            .manifest
            .permutations
            .iter()
            .find(|p| p.role == role)
            .ok_or_else(|| Error::Format(format!("archive has no permutation {role:?}")))?;
        Ok(AMSPConfig {
            seed: r.seed,
            ..AMSPConfig::new(r.group_width, r.permutation.clone())?
        })
    }

    fn expect_block(&self, block: &str) -> Result<()> {
        if self.manifest.format != FORMAT {
            return Err(Error::Format(format!("unsupported archive format {:?}", self.manifest.format)));
        }
        if self.manifest.block != block {
            return Err(Error::Format(format!(
                "archive holds a {:?} block, expected {block:?}",
                self.manifest.block
            )));
        }
        Ok(())
    }

    /// Write into `dir` (created if missing).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, file) in &self.manifest.tensors {
            io::save_tensor(&dir.join(file), &self.tensors[name])?;
        }
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let mut tensors = BTreeMap::new();
        for (name, file) in &manifest.tensors {
            if file.contains('/') || file.contains('\\') || file.starts_with('.') {
                return Err(Error::Format(format!("tensor file name {file:?} must be a plain file name")));
            }
            tensors.insert(name.clone(), io::load_tensor(&dir.join(file))?);
        }
        Ok(Self { manifest, tensors })
    }
}

impl AMSPVConvBlock {
    pub fn to_archive(&self, seed: Option<u64>) -> Archive {
        let mut a = Archive::new("amsp-vconv", seed);
        let k = self.vconv.shared_kernel.shape().h;
        a.manifest.hyper.insert("channels".into(), self.channels());
        a.manifest.hyper.insert("groups".into(), self.vconv.groups);
        a.manifest.hyper.insert("kernel".into(), k);
        a.put_cbs("entry", &self.entry);
        a.put_permutation("amsp", &self.amsp);
        a.put("vconv.shared_kernel".into(), self.vconv.shared_kernel.clone());
        a.manifest.layers.push(LayerRecord::SharedConv {
            role: "vconv".into(),
            stride: self.vconv.stride,
            padding: self.vconv.padding,
            groups: self.vconv.groups,
        });
        a.put_bn("vconv.bn", &self.vconv.post_bn);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_block("amsp-vconv")?;
        let vconv = match a.layer("vconv")? {
            LayerRecord::SharedConv {
                stride, padding, groups, ..
            } => VConvParams::new(
                a.get("vconv.shared_kernel")?.clone(),
                *groups,
                *stride,
                *padding,
                a.get_bn("vconv.bn")?,
            )?,
            other => return Err(Error::Format(format!("layer \"vconv\" is {other:?}, expected a shared conv"))),
        };
        Self::new(a.get_cbs("entry")?, a.get_permutation("amsp")?, vconv)
    }
}

impl FADCSPParams {
    pub fn to_archive(&self, seed: Option<u64>) -> Archive {
        let mut a = Archive::new("fad-csp", seed);
        a.manifest.hyper.insert("channels".into(), self.channels());
        a.manifest.hyper.insert("reduction".into(), self.gfa.reduction);
        a.manifest.hyper.insert("splits".into(), self.rep.splits());
        a.put_cbs("gfa.fuse", &self.gfa.fuse);
        a.put_conv("gfa.branch_h", &self.gfa.branch_h);
        a.put_conv("gfa.branch_w", &self.gfa.branch_w);
        a.put_permutation("gfa.amsp", &self.gfa.amsp);
        for (i, b) in self.rep.bottlenecks.iter().enumerate() {
            a.put_cbs(&format!("rep.{i}.pointwise"), &b.pointwise);
            a.put_cbs(&format!("rep.{i}.depthwise"), &b.depthwise);
        }
        a.put_cbs("out", &self.out_cbs);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_block("fad-csp")?;
        let gfa = GFAParams {
            reduction: a.hyper("reduction")?,
            fuse: a.get_cbs("gfa.fuse")?,
            branch_h: a.get_conv("gfa.branch_h")?,
            branch_w: a.get_conv("gfa.branch_w")?,
            amsp: a.get_permutation("gfa.amsp")?,
        };
        let bottlenecks = (0..a.hyper("splits")?)
            .map(|i| {
                Ok(BottleneckParams {
                    pointwise: a.get_cbs(&format!("rep.{i}.pointwise"))?,
                    depthwise: a.get_cbs(&format!("rep.{i}.depthwise"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gfa,
            rep: RepBottleneckParams { bottlenecks },
            out_cbs: a.get_cbs("out")?,
        })
    }
}
