//! Contour deformation head: per-vertex features, the circular-convolution
//! cascade, offset regression, attentive merging and pinned refinement.
//!
//! Positions on the tape are `[2, K]` tensors (row 0 = x, row 1 = y) in crop
//! coordinates. Feature sampling positions are treated as constants, so
//! gradients flow through offsets and attention only.

use crate::backbone::{extract_crops, siamese_features, CorrelationMap, CropPair};
use crate::geometry::{normalize_coords, sample_box_contour, BBox, Contour, Point};
use crate::image::Image;
use crate::model::{Bound, Model, ModelConfig, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Vertices of one contour in crop coordinates with user pins.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexState {
    pub positions: Vec<Point>,
    pub pinned: Vec<bool>,
}

pub fn points_to_tensor<T: Scalar>(pts: &[Point]) -> Tensor<T> {
    let k = pts.len();
    Tensor::from_fn(&[2, k], |i| T::lit(if i < k { pts[i].x } else { pts[i - k].y }))
}

pub fn tensor_to_points<T: Scalar>(t: &Tensor<T>) -> Vec<Point> {
    let k = t.numel() / 2;
    let d = t.data();
    (0..k).map(|i| Point::new(d[i].as_f64(), d[k + i].as_f64())).collect()
}

/// Bilinear samples of the fused map at each vertex (clamped to the map)
/// stacked over the two normalized coordinates: `[C_f + 2, K]`.
pub fn sample_vertex_features<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    fused: &CorrelationMap,
    verts: &[Point],
    obj_w: f64,
    obj_h: f64,
) -> Result<Var, ModelError> {
    let ratio = tape.shape(fused.fused)[2] as f64 / cfg.crop_size as f64;
    let grid: Vec<[f64; 2]> = verts.iter().map(|p| [p.x * ratio - 0.5, p.y * ratio - 0.5]).collect();
    let sampled = tape.sample_points(fused.fused, &grid)?;
    let norm = normalize_coords(verts, obj_w, obj_h)?;
    let k = verts.len();
    let coords = Tensor::from_fn(&[2, k], |i| T::lit(if i < k { norm[i][0] } else { norm[i - k][1] }));
    let coords = tape.constant(coords);
    Ok(tape.concat(&[sampled, coords])?)
}

fn pointwise<T: Scalar>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var, dilation: usize) -> Result<Var, ModelError> {
    let y = tape.circ_conv1d(x, p.var(&format!("{name}.weight"))?, dilation)?;
    Ok(tape.add_bias(y, p.var(&format!("{name}.bias"))?)?)
}

/// Circular-convolution cascade with residual sums, four pointwise layers
/// and a tanh output scaled per axis: `[2, K]` offsets with
/// `|dx| ≤ offset_scale[0]`, `|dy| ≤ offset_scale[1]`.
pub fn snake_deform<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    features: Var,
    offset_scale: [f64; 2],
) -> Result<Var, ModelError> {
    let k = tape.shape(features)[1];
    let mut x = features;
    for (i, &d) in cfg.head.dilations.iter().enumerate() {
        let y = pointwise(tape, p, &format!("head.snake{i}"), x, d)?;
        let y = tape.relu(y);
        x = if i == 0 { y } else { tape.add(x, y)? };
    }
    for i in 0..4 {
        let y = pointwise(tape, p, &format!("head.reg{i}"), x, 1)?;
        x = if i < 3 { tape.relu(y) } else { tape.tanh(y) };
    }
    let scale = Tensor::from_fn(&[2, k], |i| T::lit(offset_scale[i / k]));
    let scale = tape.constant(scale);
    Ok(tape.mul(x, scale)?)
}

/// Per-vertex attention `beta = sigmoid(conv1×1(features))`, shape `[1, K]`.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, p: &Bound, features: Var) -> Result<Var, ModelError> {
    let y = pointwise(tape, p, "head.beta", features, 1)?;
    Ok(tape.sigmoid(y))
}

/// `beta ⊙ new + (1 − beta) ⊙ old`, computed as `old + beta ⊙ (new − old)`.
pub fn attentive_merge<T: Scalar>(tape: &mut Tape<T>, old: Var, new: Var, beta: Var) -> Result<Var, ModelError> {
    let b2 = tape.concat(&[beta, beta])?;
    let diff = tape.sub(new, old)?;
    let step = tape.mul(b2, diff)?;
    Ok(tape.add(old, step)?)
}

/// Everything a deformation pass recorded.
#[derive(Clone, Debug)]
pub struct Deformation {
    /// Positions after each round, `[2, K]`.
    pub rounds: Vec<Var>,
    /// Attention of rounds 2.., `[1, K]`.
    pub betas: Vec<Var>,
    /// Positions at which each round sampled its features.
    pub inputs: Vec<Vec<Point>>,
}

/// Runs `iterations` rounds from `init`. Round 1 adds its raw offsets;
/// each later round predicts an increment from the current positions and
/// blends it in by attention, so offsets measured from `init` follow
/// `merged = beta ⊙ (old + δ) + (1 − beta) ⊙ old`.
pub fn deform<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    fused: &CorrelationMap,
    init: &[Point],
    crop_box: &BBox,
    iterations: usize,
) -> Result<Deformation, ModelError> {
    if init.len() != cfg.head.k {
        return Err(ModelError::VertexCount { expected: cfg.head.k, got: init.len() });
    }
    let (bw, bh) = (crop_box.width(), crop_box.height());
    let scale = [0.5 * bw, 0.5 * bh];
    let base = tape.constant(points_to_tensor(init));
    let mut out = Deformation { rounds: Vec::new(), betas: Vec::new(), inputs: Vec::new() };
    let mut current = init.to_vec();
    let mut old: Option<Var> = None;
    for _ in 0..iterations {
        let feats = sample_vertex_features(tape, cfg, fused, &current, bw, bh)?;
        let delta = snake_deform(tape, p, cfg, feats, scale)?;
        let offsets = match old {
            None => delta,
            Some(o) => {
                let beta = attention(tape, p, feats)?;
                out.betas.push(beta);
                let new = tape.add(o, delta)?;
                attentive_merge(tape, o, new, beta)?
            }
        };
        let pos = tape.add(base, offsets)?;
        out.inputs.push(std::mem::take(&mut current));
        if !tape.value(pos).is_finite() {
            return Err(ModelError::NonFinite { round: out.rounds.len() + 1 });
        }
        current = tensor_to_points(tape.value(pos));
        out.rounds.push(pos);
        old = Some(offsets);
    }
    Ok(out)
}

/// One attentive round from a prior contour with pinned vertices held:
/// their increments are zeroed before merging, so they stay in place.
/// Returns positions `[2, K]` and attention `[1, K]`.
pub fn refine_round<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    fused: &CorrelationMap,
    state: &VertexState,
    crop_box: &BBox,
) -> Result<(Var, Var), ModelError> {
    let k = cfg.head.k;
    if state.positions.len() != k || state.pinned.len() != k {
        return Err(ModelError::VertexCount { expected: k, got: state.positions.len().max(state.pinned.len()) });
    }
    let (bw, bh) = (crop_box.width(), crop_box.height());
    let feats = sample_vertex_features(tape, cfg, fused, &state.positions, bw, bh)?;
    let delta = snake_deform(tape, p, cfg, feats, [0.5 * bw, 0.5 * bh])?;
    let free = Tensor::from_fn(&[2, k], |i| if state.pinned[i % k] { T::zero() } else { T::one() });
    let free = tape.constant(free);
    let delta = tape.mul(delta, free)?;
    let beta = attention(tape, p, feats)?;
    let zero = tape.constant(Tensor::zeros(&[2, k]));
    let merged = attentive_merge(tape, zero, delta, beta)?;
    let base = tape.constant(points_to_tensor(&state.positions));
    Ok((tape.add(base, merged)?, beta))
}

/// Initial vertices in crop coordinates: the box contour sampled uniformly
/// by arc length in image space, then mapped into the crop.
pub fn initial_contour<T: Scalar>(crop: &CropPair<T>, k: usize) -> Result<Vec<Point>, ModelError> {
    let t = &crop.transform;
    let cb = &crop.crop_box;
    let a = t.to_image(Point::new(cb.x0, cb.y0));
    let c = t.to_image(Point::new(cb.x1, cb.y1));
    let image_box = BBox::new(a.x, a.y, c.x, c.y)?;
    Ok(sample_box_contour(&image_box, k)?.vertices().iter().map(|&q| t.to_crop(q)).collect())
}

impl<T: Scalar> Model<T> {
    pub fn crop(&self, img: &Image, b: &BBox) -> Result<CropPair<T>, ModelError> {
        extract_crops(img, b, self.config.search_scale, self.config.crop_size)
    }

    /// Box → contour in image coordinates with `K` vertices.
    pub fn predict_contour(&self, img: &Image, b: &BBox) -> Result<Contour, ModelError> {
        let crop = self.crop(img, b)?;
        self.predict_contour_crop(&crop)
    }

    pub fn predict_contour_crop(&self, crop: &CropPair<T>) -> Result<Contour, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let fused = siamese_features(&mut tape, &p, &self.config, crop)?;
        let init = initial_contour(crop, self.config.head.k)?;
        let d = deform(&mut tape, &p, &self.config, &fused, &init, &crop.crop_box, self.config.head.iterations)?;
        let last = *d.rounds.last().expect("iterations >= 1");
        let pts = tensor_to_points(tape.value(last)).into_iter().map(|q| crop.transform.to_image(q)).collect();
        Ok(Contour::from_ring(pts)?)
    }

    /// One refinement round seeded by `prior` (image coordinates). Pinned
    /// vertices are returned exactly as given.
    pub fn refine_with_edits(&self, img: &Image, b: &BBox, prior: &Contour, pinned: &[bool]) -> Result<Contour, ModelError> {
        let crop = self.crop(img, b)?;
        self.refine_with_edits_crop(&crop, prior, pinned)
    }

    pub fn refine_with_edits_crop(
        &self,
        crop: &CropPair<T>,
        prior: &Contour,
        pinned: &[bool],
    ) -> Result<Contour, ModelError> {
        let k = self.config.head.k;
        if prior.len() != k || pinned.len() != k {
            return Err(ModelError::VertexCount { expected: k, got: if prior.len() != k { prior.len() } else { pinned.len() } });
        }
        if pinned.iter().all(|&b| b) {
            return Ok(prior.clone());
        }
        let state = VertexState {
            positions: prior.vertices().iter().map(|&q| crop.transform.to_crop(q)).collect(),
            pinned: pinned.to_vec(),
        };
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let fused = siamese_features(&mut tape, &p, &self.config, crop)?;
        let (pos, _) = refine_round(&mut tape, &p, &self.config, &fused, &state, &crop.crop_box)?;
        let moved = tensor_to_points(tape.value(pos));
        let pts = moved
            .into_iter()
            .zip(prior.vertices())
            .zip(pinned)
            .map(|((q, &orig), &pin)| if pin { orig } else { crop.transform.to_image(q) })
            .collect();
        Ok(Contour::from_ring(pts)?)
    }
}
