//! Network configuration, parameter layout and the parameter store.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::image::ImageError;
use crate::scalar::Scalar;
use crate::tensor::init::he_uniform;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("search scale {0} outside the open interval (1, 2)")]
    SearchScale(f64),
    #[error("box does not intersect the {width}x{height} image")]
    BoxOutsideImage { width: usize, height: usize },
    #[error("expected {expected} vertices, got {got}")]
    VertexCount { expected: usize, got: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("non-finite vertex positions after round {round}")]
    NonFinite { round: usize },
}

/// Deformation head hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Vertices per contour.
    pub k: usize,
    /// Dilation of each circular-convolution block.
    pub dilations: Vec<usize>,
    /// Kernel half-width `R`; each circular kernel has `2R + 1` taps.
    pub half_width: usize,
    /// Deformation rounds at prediction time (round 1 raw, later rounds attentive).
    pub iterations: usize,
    /// Channels of the circular-convolution cascade.
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { k: 128, dilations: vec![1, 1, 2, 2, 4, 4], half_width: 4, iterations: 2, hidden: 128 }
    }
}

impl HeadConfig {
    pub fn taps(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k < 4 || !self.k.is_multiple_of(4) {
            return Err(ModelError::Config(format!("k = {} must be a positive multiple of 4", self.k)));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(ModelError::Config("dilations must be non-empty and all >= 1".into()));
        }
        if self.iterations == 0 || self.hidden == 0 {
            return Err(ModelError::Config("iterations and hidden must be >= 1".into()));
        }
        let span = self.taps() * self.dilations.iter().max().expect("non-empty");
        if self.k < span {
            return Err(ModelError::Config(format!("k = {} is shorter than the circular receptive span {span}", self.k)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square network input.
    pub crop_size: usize,
    /// Output channels of each stride-2 backbone stage.
    pub stage_channels: Vec<usize>,
    /// Channels of the fused correlation map.
    pub fused_channels: usize,
    /// Search scale `s`: the crop covers `s` times the box extent.
    pub search_scale: f64,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            crop_size: 128,
            stage_channels: vec![16, 32, 64, 128],
            fused_channels: 64,
            search_scale: 1.5,
            pixel_mean: [0.5; 3],
            pixel_std: [0.25; 3],
            head: HeadConfig::default(),
        }
    }
}

/// Central window of a `size`-wide feature map kept by the target branch:
/// `(start, len)` with `len = max(1, round(size / s))`, `start = floor((size − len) / 2)`.
pub fn center_window(size: usize, s: f64) -> (usize, usize) {
    let len = ((size as f64 / s).round() as usize).clamp(1, size);
    ((size - len) / 2, len)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.head.validate()?;
        if !(self.search_scale > 1.0 && self.search_scale < 2.0) {
            return Err(ModelError::SearchScale(self.search_scale));
        }
        let n = self.stage_channels.len();
        if n < 2 || self.stage_channels.contains(&0) || self.fused_channels == 0 {
            return Err(ModelError::Config("need at least two non-empty backbone stages".into()));
        }
        if !self.crop_size.is_multiple_of(1 << n) || self.crop_size >> n < 4 {
            return Err(ModelError::Config(format!(
                "crop size {} must be divisible by {} with a deepest map of at least 4",
                self.crop_size,
                1 << n
            )));
        }
        if self.pixel_std.iter().any(|s| *s <= 0.0) {
            return Err(ModelError::Config("pixel_std must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of backbone stage `j` (0-based).
    pub fn stage_size(&self, j: usize) -> usize {
        self.crop_size >> (j + 1)
    }

    pub fn deepest_size(&self) -> usize {
        self.stage_size(self.stage_channels.len() - 1)
    }

    /// Side of the target window at the deepest stage.
    pub fn target_size(&self) -> usize {
        center_window(self.deepest_size(), self.search_scale).1
    }

    /// Side of the fused map (half the crop).
    pub fn fused_size(&self) -> usize {
        self.stage_size(0)
    }

    /// Channels of per-vertex features: fused channels plus two coordinates.
    pub fn vertex_channels(&self) -> usize {
        self.fused_channels + 2
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut push_conv = |name: String, shape: Vec<usize>| {
            out.push((format!("{name}.weight"), shape.clone()));
            out.push((format!("{name}.bias"), vec![shape[0]]));
        };
        let mut c_prev = 3;
        for (j, &c) in self.stage_channels.iter().enumerate() {
            push_conv(format!("backbone.stage{}.conv_a", j + 1), vec![c, c_prev, 3, 3]);
            push_conv(format!("backbone.stage{}.conv_b", j + 1), vec![c, c, 3, 3]);
            c_prev = c;
        }
        let f = self.fused_channels;
        let nt = self.target_size() * self.target_size();
        push_conv("fuse.m0".into(), vec![f, nt, 1, 1]);
        for j in (0..self.stage_channels.len() - 1).rev() {
            push_conv(format!("fuse.stage{}.proj", j + 1), vec![f, self.stage_channels[j], 1, 1]);
            push_conv(format!("fuse.stage{}.conv", j + 1), vec![f, f, 3, 3]);
        }
        let (cv, hid, taps) = (self.vertex_channels(), self.head.hidden, self.head.taps());
        for i in 0..self.head.dilations.len() {
            let c_in = if i == 0 { cv } else { hid };
            push_conv(format!("head.snake{i}"), vec![hid, c_in, taps]);
        }
        let widths = [hid, 64, 64, 32, 2];
        for i in 0..4 {
            push_conv(format!("head.reg{i}"), vec![widths[i + 1], widths[i], 1]);
        }
        push_conv("head.beta".into(), vec![1, cv, 1]);
        out
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Params<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Params { entries, index }
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Parameters registered on a tape for one forward pass.
pub struct Bound {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl Bound {
    /// Pairs parameter names with vars already on a tape.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: Vec<Var>) -> Self {
        let map = names.into_iter().zip(vars.iter().copied()).collect();
        Bound { vars: map, order: vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    /// Vars in parameter storage order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Scalar> Model<T> {
    /// He-uniform weights and zero biases from a seeded stream. The
    /// correlation projection is further divided by the deepest channel
    /// count (correlation values are dot products over that many channels)
    /// and the last regression layer by 10, so an untrained head starts near
    /// the box contour.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c_deep = *config.stage_channels.last().expect("validated") as f64;
        let entries = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let gain = match name.as_str() {
                        "fuse.m0.weight" => 1.0 / c_deep,
                        "head.reg3.weight" => 0.1,
                        _ => 1.0,
                    };
                    let mut t = he_uniform::<T, _>(&shape, &mut rng);
                    t.data_mut().iter_mut().for_each(|v| *v *= T::lit(gain));
                    t
                };
                (name, t)
            })
            .collect();
        Ok(Model { config, params: Params::new(entries) })
    }

    /// All parameters zero.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let entries = config.layout().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect();
        Ok(Model { config, params: Params::new(entries) })
    }

    /// Checks that `params` matches the layout of `config` name-for-name.
    pub fn from_parts(config: ModelConfig, params: Params<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, pt)) in layout.iter().zip(params.entries()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(ModelError::Config(format!(
                    "tensor `{pn}` {:?} does not match expected `{name}` {shape:?}",
                    pt.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Registers every parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let mut vars = HashMap::with_capacity(self.params.len());
        let mut order = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.entries() {
            let v = tape.leaf(t.clone(), trainable);
            vars.insert(name.clone(), v);
            order.push(v);
        }
        Bound { vars, order }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let entries = self.params.entries().iter().map(|(n, t)| (n.clone(), t.cast::<U>())).collect();
        Model { config: self.config.clone(), params: Params::new(entries) }
    }
}
