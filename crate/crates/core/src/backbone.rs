//! Crop extraction, the shared-weight backbone, pixel-wise correlation and
//! coarse-to-fine fusion.

use crate::geometry::{BBox, Point};
use crate::image::Image;
use crate::model::{center_window, Bound, ModelConfig, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Axis-aligned map between crop coordinates and image coordinates:
/// `image = origin + crop ⊙ scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub origin: Point,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl CropTransform {
    pub fn to_image(&self, p: Point) -> Point {
        Point::new(self.origin.x + p.x * self.scale_x, self.origin.y + p.y * self.scale_y)
    }

    pub fn to_crop(&self, p: Point) -> Point {
        Point::new((p.x - self.origin.x) / self.scale_x, (p.y - self.origin.y) / self.scale_y)
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let a = self.to_crop(Point::new(b.x0, b.y0));
        let c = self.to_crop(Point::new(b.x1, b.y1));
        BBox { x0: a.x, y0: a.y, x1: c.x, y1: c.y }
    }
}

/// The network input for one box. Both branches read `search`; the target
/// branch keeps only the central window of its deepest feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct CropPair<T> {
    /// `[3, S, S]` raw pixel values in `[0, 1]`.
    pub search: Tensor<T>,
    pub scale: f64,
    pub transform: CropTransform,
    /// The annotation box in crop coordinates.
    pub crop_box: BBox,
}

impl<T: Scalar> CropPair<T> {
    pub fn target_region(&self) -> &Tensor<T> {
        &self.search
    }

    /// Per-channel standardized input.
    pub fn normalized(&self, cfg: &ModelConfig) -> Tensor<T> {
        let plane = self.search.numel() / 3;
        let mut t = self.search.clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let c = i / plane;
            *v = T::lit((v.as_f64() - cfg.pixel_mean[c]) / cfg.pixel_std[c]);
        }
        t
    }
}

/// Crops the concentric region of `s` times the box extent and resizes it
/// (bilinear, independently per axis) to `size × size`. Crop pixels whose
/// image location falls outside the image take the per-channel mean of the
/// in-image crop pixels.
pub fn extract_crops<T: Scalar>(img: &Image, b: &BBox, s: f64, size: usize) -> Result<CropPair<T>, ModelError> {
    if !(s > 1.0 && s < 2.0) {
        return Err(ModelError::SearchScale(s));
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(b.x0 < w && b.x1 > 0.0 && b.y0 < h && b.y1 > 0.0) {
        return Err(ModelError::BoxOutsideImage { width: img.width(), height: img.height() });
    }
    let c = b.center();
    let (rw, rh) = (s * b.width(), s * b.height());
    let transform = CropTransform {
        origin: Point::new(c.x - 0.5 * rw, c.y - 0.5 * rh),
        scale_x: rw / size as f64,
        scale_y: rh / size as f64,
    };
    let plane = size * size;
    let mut data = vec![0f64; 3 * plane];
    let mut inside = vec![false; plane];
    let mut sums = [0f64; 3];
    let mut count = 0usize;
    for i in 0..size {
        for j in 0..size {
            let p = transform.to_image(Point::new(j as f64 + 0.5, i as f64 + 0.5));
            if p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h {
                inside[i * size + j] = true;
                count += 1;
                for ch in 0..3 {
                    let v = img.sample(ch, p.x, p.y);
                    data[ch * plane + i * size + j] = v;
                    sums[ch] += v;
                }
            }
        }
    }
    if count < plane {
        let fill: [f64; 3] = if count > 0 {
            sums.map(|s| s / count as f64)
        } else {
            let n = (img.width() * img.height()) as f64;
            let mut m = [0f64; 3];
            for (i, v) in img.data().iter().enumerate() {
                m[i * 3 / img.data().len()] += *v as f64 / n;
            }
            m
        };
        for (idx, _) in inside.iter().enumerate().filter(|(_, &inn)| !inn) {
            for ch in 0..3 {
                data[ch * plane + idx] = fill[ch];
            }
        }
    }
    let search = Tensor::new(&[3, size, size], data.into_iter().map(T::lit).collect())?;
    let crop_box = transform.box_to_crop(b);
    Ok(CropPair { search, scale: s, transform, crop_box })
}

/// Backbone stage outputs, shallow to deep.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: Vec<Var>,
}

/// Fused map fed to the contour head, with the backbone stages that
/// contributed to it (0-based, deepest first).
#[derive(Clone, Debug)]
pub struct CorrelationMap {
    pub fused: Var,
    pub provenance: Vec<usize>,
}

fn conv_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var, ModelError> {
    let y = tape.conv2d(x, p.var(&format!("{name}.weight"))?, stride, pad)?;
    Ok(tape.add_bias(y, p.var(&format!("{name}.bias"))?)?)
}

/// Each stage: 3×3 stride-2 conv + ReLU, then 3×3 stride-1 conv + ReLU.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    input: Var,
) -> Result<FeaturePyramid, ModelError> {
    let want = [3, cfg.crop_size, cfg.crop_size];
    if tape.shape(input) != want {
        return Err(ModelError::Config(format!("backbone input {:?}, expected {want:?}", tape.shape(input))));
    }
    let mut x = input;
    let mut stages = Vec::with_capacity(cfg.stage_channels.len());
    for j in 0..cfg.stage_channels.len() {
        let a = conv_block(tape, p, &format!("backbone.stage{}.conv_a", j + 1), x, 2, 1)?;
        let a = tape.relu(a);
        let b = conv_block(tape, p, &format!("backbone.stage{}.conv_b", j + 1), a, 1, 1)?;
        x = tape.relu(b);
        stages.push(x);
    }
    Ok(FeaturePyramid { stages })
}

/// Central `round(H/s) × round(W/s)` window of a feature map.
pub fn center_crop_target<T: Scalar>(tape: &mut Tape<T>, stage: Var, s: f64) -> Result<Var, ModelError> {
    let [_, h, w] = *tape.shape(stage) else {
        return Err(ModelError::Config(format!("expected [C,H,W], got {:?}", tape.shape(stage))));
    };
    let (top, ht) = center_window(h, s);
    let (left, wt) = center_window(w, s);
    Ok(tape.crop2d(stage, top, left, ht, wt)?)
}

/// `out[i, y, x] = dot(t[:, i], s[:, y, x])` over target pixels `i` in row-major order.
pub fn pixelwise_correlation<T: Scalar>(tape: &mut Tape<T>, t: Var, s: Var) -> Result<Var, ModelError> {
    Ok(tape.correlate(t, s)?)
}

/// `M0 = conv1×1(corr)`, then for each shallower stage
/// `M = ReLU(conv3×3(up2x(M) + proj1×1(C_j)) + b)` up to half the crop size.
pub fn fuse_pyramid<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    corr: Var,
    search: &FeaturePyramid,
) -> Result<CorrelationMap, ModelError> {
    let n = search.stages.len();
    if n != cfg.stage_channels.len() {
        return Err(ModelError::Config(format!("{n} stages, config has {}", cfg.stage_channels.len())));
    }
    if tape.shape(corr)[1..] != tape.shape(search.stages[n - 1])[1..] {
        return Err(ModelError::Config(format!(
            "correlation {:?} not at deepest stage resolution {:?}",
            tape.shape(corr),
            tape.shape(search.stages[n - 1])
        )));
    }
    let mut m = conv_block(tape, p, "fuse.m0", corr, 1, 0)?;
    let mut provenance = vec![n - 1];
    for j in (0..n - 1).rev() {
        let up = tape.upsample2x(m)?;
        let proj = conv_block(tape, p, &format!("fuse.stage{}.proj", j + 1), search.stages[j], 1, 0)?;
        let sum = tape.add(up, proj)?;
        let conv = conv_block(tape, p, &format!("fuse.stage{}.conv", j + 1), sum, 1, 1)?;
        m = tape.relu(conv);
        provenance.push(j);
    }
    Ok(CorrelationMap { fused: m, provenance })
}

/// Normalizes the crop, runs the backbone once (both branches share weights
/// and input, so their pyramids are identical), correlates the central
/// target window with the full search map at the deepest stage and fuses.
pub fn siamese_features<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    crop: &CropPair<T>,
) -> Result<CorrelationMap, ModelError> {
    let input = tape.constant(crop.normalized(cfg));
    let pyramid = backbone_forward(tape, p, cfg, input)?;
    let deepest = *pyramid.stages.last().expect("non-empty pyramid");
    let target = center_crop_target(tape, deepest, crop.scale)?;
    let corr = pixelwise_correlation(tape, target, deepest)?;
    fuse_pyramid(tape, p, cfg, corr, &pyramid)
}
