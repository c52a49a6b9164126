//! Seeded finite-difference cases, one function per differentiable op group.
//! Each returns the worst relative error of a single random case.

use boxsnake::geometry::Point;
use boxsnake::head::{attention, attentive_merge, snake_deform};
use boxsnake::loss::{modulation_loss, total_loss, vertex_loss};
use boxsnake::model::{Bound, HeadConfig, Model, ModelConfig};
use boxsnake::tensor::{Activation, Tensor};
use rand::Rng;

use super::{grad_check, grad_check_eps, random_away_from_zero, random_tensor, rng};

pub const SEEDS: u64 = 20;

pub fn worst_over_seeds(base: u64, f: impl Fn(u64) -> f64) -> f64 {
    (0..SEEDS).map(|s| f(base + s)).fold(0.0, f64::max)
}

pub fn conv2d_with_bias(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&[2, 5, 5], &mut r, -1.0, 1.0);
    let k = random_tensor(&[3, 2, 3, 3], &mut r, -1.0, 1.0);
    let b = random_tensor(&[3], &mut r, -1.0, 1.0);
    let w = random_tensor(&[3, 3, 3], &mut r, -1.0, 1.0);
    grad_check(&[x, k, b], |t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1).unwrap();
        let y = t.add_bias(y, v[2]).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv).unwrap();
        t.sum(p)
    })
}

pub fn circ_conv1d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&[3, 9], &mut r, -1.0, 1.0);
    let k = random_tensor(&[2, 3, 3], &mut r, -1.0, 1.0);
    let w = random_tensor(&[2, 9], &mut r, -1.0, 1.0);
    grad_check(&[x, k], |t, v| {
        let y = t.circ_conv1d(v[0], v[1], 2).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv).unwrap();
        t.sum(p)
    })
}

pub fn upsample_crop_correlate(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = random_tensor(&[3, 4, 4], &mut r, -1.0, 1.0);
    let w = random_tensor(&[4, 8, 8], &mut r, -1.0, 1.0);
    grad_check(&[s], |t, v| {
        let target = t.crop2d(v[0], 1, 1, 2, 2).unwrap();
        let c = t.correlate(target, v[0]).unwrap();
        let u = t.upsample2x(c).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(u, wv).unwrap();
        t.sum(p)
    })
}

pub fn activation(act: Activation, seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_away_from_zero(&[12], &mut r, 0.05, 2.0);
    let w = random_tensor(&[12], &mut r, -1.0, 1.0);
    grad_check(&[x], |t, v| {
        let y = t.activation(v[0], act);
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv).unwrap();
        t.sum(p)
    })
}

pub fn smooth_l1_and_arithmetic(seed: u64) -> f64 {
    let mut r = rng(seed);
    // keep |a - b| away from the transition at 1
    let a = random_tensor(&[10], &mut r, -3.0, 3.0);
    let b = Tensor::from_fn(&[10], |i| {
        let d = a.data()[i].abs();
        let off = if (d - 1.0).abs() < 0.05 { 0.2 } else { 0.0 };
        a.data()[i] * 0.3 + off
    });
    let c = random_away_from_zero(&[10], &mut r, 0.5, 2.0);
    grad_check(&[a, b, c], |t, v| {
        let d = t.sub(v[0], v[1]).unwrap();
        let q = t.div(d, v[2]).unwrap();
        let s = t.smooth_l1(q);
        let s = t.scale(s, 1.7);
        let s = t.add_scalar(s, 0.3);
        let m = t.mean(s);
        let cat = t.concat(&[v[0], v[1]]).unwrap();
        let cat = t.reshape(cat, &[4, 5]).unwrap();
        let cs = t.sum(cat);
        let prod = t.mul(m, cs).unwrap();
        t.add(prod, m).unwrap()
    })
}

pub fn bilinear_sampling(seed: u64) -> f64 {
    let mut r = rng(seed);
    let map = random_tensor(&[2, 5, 6], &mut r, -1.0, 1.0);
    let pts: Vec<[f64; 2]> = (0..7).map(|_| [r.gen_range(-0.5..6.0), r.gen_range(-0.5..5.0)]).collect();
    let w = random_tensor(&[2, 7], &mut r, -1.0, 1.0);
    grad_check(&[map], |t, v| {
        let s = t.sample_points(v[0], &pts).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(s, wv).unwrap();
        t.sum(p)
    })
}

/// Snake, attention and merge of a tiny head against a smooth-L1 target.
pub fn head(seed: u64) -> f64 {
    let head = HeadConfig { k: 8, dilations: vec![1, 2], half_width: 1, iterations: 2, hidden: 6 };
    let cfg = ModelConfig { head, fused_channels: 3, ..Default::default() };
    let checked = [
        "head.snake0.weight",
        "head.snake1.weight",
        "head.snake1.bias",
        "head.reg0.weight",
        "head.reg3.weight",
        "head.reg3.bias",
        "head.beta.weight",
        "head.beta.bias",
    ];
    let model = Model::<f64>::init(cfg, seed).unwrap();
    let mut r = rng(100 + seed);
    let feats = random_tensor(&[5, 8], &mut r, -1.0, 1.0);
    let old = random_tensor(&[2, 8], &mut r, -3.0, 3.0);
    let target = random_tensor(&[2, 8], &mut r, -3.0, 3.0);
    let mut inputs = vec![feats];
    inputs.extend(checked.iter().map(|n| model.params.get(n).unwrap().clone()));
    grad_check_eps(&inputs, 1e-6, |tape, vars| {
        let fixed: Vec<_> = model
            .params
            .entries()
            .iter()
            .map(|(n, t)| match checked.iter().position(|c| c == n) {
                Some(i) => vars[i + 1],
                None => tape.constant(t.clone()),
            })
            .collect();
        let names = model.params.entries().iter().map(|(n, _)| n.clone());
        let p = Bound::from_vars(names, fixed);
        let delta = snake_deform(tape, &p, &model.config, vars[0], [3.0, 2.0]).unwrap();
        let beta = attention(tape, &p, vars[0]).unwrap();
        let o = tape.constant(old.clone());
        let new = tape.add(o, delta).unwrap();
        let merged = attentive_merge(tape, o, new, beta).unwrap();
        let t = tape.constant(target.clone());
        let d = tape.sub(merged, t).unwrap();
        let l = tape.smooth_l1(d);
        tape.mean(l)
    })
}

/// Vertex, modulation and total loss with respect to positions and logits.
pub fn losses(seed: u64) -> f64 {
    let mut r = rng(seed);
    let k = 10;
    let w = r.gen_range(5.0..20.0);
    let targets: Vec<Point> = (0..k).map(|_| Point::new(r.gen_range(0.0..30.0), r.gen_range(0.0..30.0))).collect();
    // residuals / W kept away from the smooth-L1 transition at 1
    let pred = Tensor::from_fn(&[2, k], |i| {
        let t = if i < k { targets[i].x } else { targets[i - k].y };
        let mut u: f64 = r.gen_range(-2.0..2.0);
        if (u.abs() - 1.0).abs() < 0.05 {
            u *= 0.5;
        }
        t + u * w
    });
    let logits = Tensor::from_fn(&[1, k], |_| r.gen_range(-3.0..3.0));
    let mask_pred: Vec<Point> =
        targets.iter().map(|t| Point::new(t.x + if r.gen_bool(0.5) { w } else { 0.0 }, t.y)).collect();
    grad_check(&[pred, logits], |tape, v| {
        let lv = vertex_loss(tape, v[0], &targets, w).unwrap();
        let beta = tape.sigmoid(v[1]);
        let ld = modulation_loss(tape, beta, &mask_pred, &targets, w, 0.02).unwrap();
        total_loss(tape, lv, ld, 10.0).unwrap()
    })
}
