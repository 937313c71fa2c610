//! Pluggable differentiable regressor.
//!
//! The reference backbone projects each input column into `C` channels,
//! blends it with the aggregated memory through a learned gate, runs two
//! parallel convolution branches (kernel 3 and kernel 7, two layers each),
//! concatenates them channel-wise, pools over time and maps the pooled
//! feature through a fusion layer and a linear head.
//!
//! Every parameter tensor belongs to exactly one [`Group`]; freezing and
//! per-group learning rates operate on groups.

mod checkpoint;
mod network;
mod optim;

pub use checkpoint::Checkpoint;
pub use network::{
    conv1d_same, BackboneCache, BackboneOutput, Example, FrontCache, MemoryContext, TrainCache,
};
pub use optim::{AdamW, AdamWConfig, GroupRates};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::affine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Projection,
    Lower,
    Upper,
    Head,
    Memory,
    Gate,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Projection,
        Group::Lower,
        Group::Upper,
        Group::Head,
        Group::Memory,
        Group::Gate,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Fine-tuning recipe selector: a drift severity or the stable-error branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Mild,
    Moderate,
    Severe,
    Stable,
}

impl Level {
    /// Maps an effective drift level `1..=3` to a recipe; `0` has none.
    pub fn from_drift(d: u8) -> Option<Level> {
        match d {
            1 => Some(Level::Mild),
            2 => Some(Level::Moderate),
            3 => Some(Level::Severe),
            _ => None,
        }
    }

    /// Drift-level index (`1..=3`); the stable branch reuses level 1.
    pub fn recipe_index(self) -> usize {
        match self {
            Level::Mild | Level::Stable => 1,
            Level::Moderate => 2,
            Level::Severe => 3,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Mild => "1",
            Level::Moderate => "2",
            Level::Severe => "3",
            Level::Stable => "stable",
        })
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" | "mild" => Ok(Level::Mild),
            "2" | "moderate" => Ok(Level::Moderate),
            "3" | "severe" => Ok(Level::Severe),
            "stable" => Ok(Level::Stable),
            other => Err(Error::UnknownLevel(other.to_string())),
        }
    }
}

/// Which parameter groups an optimizer step may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    trainable: [bool; 6],
}

impl FreezeMask {
    pub fn all_trainable() -> Self {
        Self { trainable: [true; 6] }
    }

    pub fn all_frozen() -> Self {
        Self {
            trainable: [false; 6],
        }
    }

    pub fn only(groups: &[Group]) -> Self {
        let mut m = Self::all_frozen();
        for g in groups {
            m.trainable[g.index()] = true;
        }
        m
    }

    pub fn is_trainable(&self, g: Group) -> bool {
        self.trainable[g.index()]
    }

    pub fn trainable_groups(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.is_trainable(*g))
            .collect()
    }

    /// True when nothing below the head needs gradients.
    pub fn head_only(&self) -> bool {
        Group::ALL
            .into_iter()
            .all(|g| g == Group::Head || !self.is_trainable(g))
    }
}

/// Trainable groups for a recipe. The gate and memory projection are part of
/// the upper tier, so they unfreeze together with the upper backbone block.
pub fn set_trainable(level: Level) -> FreezeMask {
    match level {
        Level::Mild | Level::Stable => FreezeMask::only(&[Group::Head]),
        Level::Moderate => FreezeMask::only(&[Group::Head, Group::Upper, Group::Memory, Group::Gate]),
        Level::Severe => FreezeMask::all_trainable(),
    }
}

/// Parses a level name and returns its mask.
pub fn set_trainable_str(level: &str) -> Result<FreezeMask> {
    Ok(set_trainable(level.parse()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    Both,
    ShortOnly,
    LongOnly,
}

impl Branches {
    pub fn short(self) -> bool {
        !matches!(self, Branches::LongOnly)
    }

    pub fn long(self) -> bool {
        !matches!(self, Branches::ShortOnly)
    }
}

/// Shapes and structural switches of the reference backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub features: usize,
    pub channels: usize,
    pub targets: usize,
    pub window: usize,
    /// Memory aggregation length `R`.
    pub memory_agg: usize,
    pub short_kernel: usize,
    pub long_kernel: usize,
    /// When false the memory-enhanced feature is the plain projection.
    pub memory_fusion: bool,
    pub branches: Branches,
}

impl Architecture {
    pub fn new(features: usize, channels: usize, targets: usize, window: usize, memory_agg: usize) -> Self {
        Self {
            features,
            channels,
            targets,
            window,
            memory_agg,
            short_kernel: 3,
            long_kernel: 7,
            memory_fusion: true,
            branches: Branches::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("features", self.features),
            ("channels", self.channels),
            ("targets", self.targets),
            ("window", self.window),
            ("memory_agg", self.memory_agg),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for k in [self.short_kernel, self.long_kernel] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size {k} must be odd")));
            }
        }
        Ok(())
    }

    /// Width of the concatenated backbone feature.
    pub fn backbone_width(&self) -> usize {
        2 * self.channels
    }

    /// Memory slots an example needs: item times `t-L-R+1 ..= t-1`.
    pub fn context_slots(&self) -> usize {
        self.window + self.memory_agg - 1
    }
}

/// Tensor indices into [`Params::tensors`].
pub mod idx {
    pub const PROJ_W: usize = 0;
    pub const PROJ_B: usize = 1;
    pub const SHORT1_W: usize = 2;
    pub const SHORT1_B: usize = 3;
    pub const LONG1_W: usize = 4;
    pub const LONG1_B: usize = 5;
    pub const SHORT2_W: usize = 6;
    pub const SHORT2_B: usize = 7;
    pub const LONG2_W: usize = 8;
    pub const LONG2_B: usize = 9;
    pub const FUSION_W: usize = 10;
    pub const FUSION_B: usize = 11;
    pub const HEAD_W: usize = 12;
    pub const HEAD_B: usize = 13;
    pub const MEM_W: usize = 14;
    pub const MEM_B: usize = 15;
    pub const GATE_W: usize = 16;
    pub const GATE_B: usize = 17;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn new(name: &str, group: Group, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            group,
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All learnable tensors of the predictor; also used as a gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    /// Zero-filled tensors with the layout implied by `arch`.
    pub fn zeros(arch: &Architecture) -> Self {
        let (f, c, k) = (arch.features, arch.channels, arch.targets);
        let (ks, kl, w) = (arch.short_kernel, arch.long_kernel, arch.backbone_width());
        use Group::*;
        let tensors = vec![
            Tensor::new("proj_w", Projection, &[c, f]),
            Tensor::new("proj_b", Projection, &[c]),
            Tensor::new("short1_w", Lower, &[c, c, ks]),
            Tensor::new("short1_b", Lower, &[c]),
            Tensor::new("long1_w", Lower, &[c, c, kl]),
            Tensor::new("long1_b", Lower, &[c]),
            Tensor::new("short2_w", Upper, &[c, c, ks]),
            Tensor::new("short2_b", Upper, &[c]),
            Tensor::new("long2_w", Upper, &[c, c, kl]),
            Tensor::new("long2_b", Upper, &[c]),
            Tensor::new("fusion_w", Upper, &[w, w]),
            Tensor::new("fusion_b", Upper, &[w]),
            Tensor::new("head_w", Head, &[k, w]),
            Tensor::new("head_b", Head, &[k]),
            Tensor::new("mem_w", Memory, &[c, w]),
            Tensor::new("mem_b", Memory, &[c]),
            Tensor::new("gate_w", Gate, &[c, 2 * c]),
            Tensor::new("gate_b", Gate, &[c]),
        ];
        Self { tensors }
    }

    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut p = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, c, w) = (arch.features, arch.channels, arch.backbone_width());
        let fan_in = [
            f,
            f,
            c * arch.short_kernel,
            c * arch.short_kernel,
            c * arch.long_kernel,
            c * arch.long_kernel,
            c * arch.short_kernel,
            c * arch.short_kernel,
            c * arch.long_kernel,
            c * arch.long_kernel,
            w,
            w,
            w,
            w,
            w,
            w,
            2 * c,
            2 * c,
        ];
        for (t, fan) in p.tensors.iter_mut().zip(fan_in) {
            let bound = 1.0 / (fan as f64).sqrt();
            for v in &mut t.data {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    data: vec![0.0; t.data.len()],
                    ..t.clone()
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i].data
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn group_tensors(&self, g: Group) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().filter(move |t| t.group == g)
    }

    /// Flattened copy of one group's scalars, in tensor order.
    pub fn group_values(&self, g: Group) -> Vec<f64> {
        self.group_tensors(g)
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    /// FNV-1a hash over the bit patterns of a group's scalars.
    pub fn group_hash(&self, g: Group) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.group_tensors(g) {
            for v in &t.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Squared distance over the groups enabled in `mask`.
    pub fn masked_sq_distance(&self, other: &Params, mask: &FreezeMask) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .filter(|(t, _)| mask.is_trainable(t.group))
            .map(|(a, b)| crate::linalg::squared_distance(&a.data, &b.data))
            .sum()
    }

    fn check_shapes(&self, arch: &Architecture) -> Result<()> {
        let reference = Self::zeros(arch);
        if reference.tensors.len() != self.tensors.len() {
            return Err(Error::dim("parameter tensors", reference.tensors.len(), self.tensors.len()));
        }
        for (r, t) in reference.tensors.iter().zip(&self.tensors) {
            if r.shape != t.shape || r.group != t.group || t.data.len() != r.data.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` has the wrong shape", t.name)));
            }
        }
        Ok(())
    }
}

/// Architecture plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub arch: Architecture,
    pub params: Params,
}

impl Predictor {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            params: Params::init(&arch, seed),
        })
    }

    pub fn with_params(arch: Architecture, params: Params) -> Result<Self> {
        arch.validate()?;
        params.check_shapes(&arch)?;
        Ok(Self { arch, params })
    }

    /// `z = W_p x + b_p`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.arch.features {
            return Err(Error::dim("project input", self.arch.features, x.len()));
        }
        let mut z = vec![0.0; self.arch.channels];
        affine(self.params.get(idx::PROJ_W), self.params.get(idx::PROJ_B), x, &mut z);
        Ok(z)
    }

    /// Memory-enhanced feature for the current step given the aggregated memory.
    pub fn fuse_current(&self, z: &[f64], mbar: &[f64]) -> Vec<f64> {
        if self.arch.memory_fusion {
            crate::memory::fuse(z, mbar, self.params.get(idx::GATE_W), self.params.get(idx::GATE_B))
        } else {
            z.to_vec()
        }
    }

    pub fn memory_item(&self, pooled: &[f64]) -> Vec<f64> {
        crate::memory::memory_item_from_pooled(
            pooled,
            self.params.get(idx::MEM_W),
            self.params.get(idx::MEM_B),
        )
    }
}

/// Standalone projection with explicit weights (row-major `C x F`).
pub fn project(x: &[f64], w_p: &[f64], b_p: &[f64]) -> Result<Vec<f64>> {
    if b_p.is_empty() || w_p.len() != b_p.len() * x.len() {
        return Err(Error::dim("projection weights", b_p.len() * x.len(), w_p.len()));
    }
    let mut z = vec![0.0; b_p.len()];
    affine(w_p, b_p, x, &mut z);
    Ok(z)
}
