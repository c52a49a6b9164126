//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod grad_cases;

use boxsnake::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in `[-hi, -gap] ∪ [gap, hi]`, keeping piecewise ops away from their kinks.
pub fn random_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng, gap: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..hi);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic gradients of a scalar function against central finite
/// differences evaluated by rebuilding the whole computation in f64.
/// Returns the maximum relative error over every input element.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    grad_check_eps(inputs, FD_EPS, build)
}

/// [`grad_check`] with an explicit step; deep compositions of ReLUs use a
/// small step so perturbations rarely straddle a kink.
pub fn grad_check_eps(
    inputs: &[Tensor<f64>],
    eps: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item().unwrap()
    };

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[i][j], numeric, 1e-3));
        }
    }
    worst
}

/// Direct quadruple-loop convolution accumulating with `mul_add` over
/// `(c_in, ky, kx)` in row-major order, skipping padded taps.
pub fn conv2d_oracle(
    x: &Tensor<f32>,
    k: &Tensor<f32>,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for c in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            let xv = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                x.at(&[c, iy as usize, ix as usize])
                            } else {
                                0.0
                            };
                            acc = xv.mul_add(k.at(&[o, c, ky, kx]), acc);
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Explicit modular-index sum for the circular convolution.
pub fn circ_conv1d_oracle(f: &Tensor<f32>, k: &Tensor<f32>, dilation: usize) -> Vec<f32> {
    let (c, len) = (f.shape()[0], f.shape()[1]);
    let (co, taps) = (k.shape()[0], k.shape()[2]);
    let r = (taps / 2) as i64;
    let mut out = vec![0.0f32; co * len];
    for o in 0..co {
        for p in 0..len {
            let mut acc = 0.0f32;
            for ch in 0..c {
                for rr in -r..=r {
                    let src = (p as i64 + rr * dilation as i64).rem_euclid(len as i64) as usize;
                    acc = f.at(&[ch, src]).mul_add(k.at(&[o, ch, (rr + r) as usize]), acc);
                }
            }
            out[o * len + p] = acc;
        }
    }
    out
}

/// Triple-loop dot products: `out[i, y, x] = Σ_c t[c, i] · s[c, y, x]`.
pub fn correlation_oracle(t: &Tensor<f32>, s: &Tensor<f32>) -> Vec<f32> {
    let (c, ht, wt) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (hs, ws) = (s.shape()[1], s.shape()[2]);
    let mut out = vec![0.0f32; ht * wt * hs * ws];
    for iy in 0..ht {
        for ix in 0..wt {
            let i = iy * wt + ix;
            for y in 0..hs {
                for x in 0..ws {
                    let mut acc = 0.0f32;
                    for ch in 0..c {
                        acc = t.at(&[ch, iy, ix]).mul_add(s.at(&[ch, y, x]), acc);
                    }
                    out[(i * hs + y) * ws + x] = acc;
                }
            }
        }
    }
    out
}

use boxsnake::geometry::{BBox, Contour, Intersection, Mask, Point};

/// Star-shaped (hence simple) polygon with random radii around a center.
pub fn random_star(rng: &mut ChaCha8Rng, cx: f64, cy: f64, r_lo: f64, r_hi: f64, n: usize) -> Contour {
    let pts = (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let r = rng.gen_range(r_lo..r_hi);
            Point::new(cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    Contour::new(pts).unwrap()
}

/// Regular polygon with vertex 0 at angle 0.
pub fn regular_polygon(cx: f64, cy: f64, r: f64, n: usize) -> Contour {
    let pts = (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            Point::new(cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    Contour::new(pts).unwrap()
}

/// Arc length of a point on the box boundary, walked side by side from the
/// top-left corner.
pub fn box_arc_oracle(b: &BBox, p: Point) -> f64 {
    let (w, h) = (b.x1 - b.x0, b.y1 - b.y0);
    let tol = 1e-9 * w.max(h);
    if (p.y - b.y0).abs() <= tol && p.x < b.x1 - tol {
        p.x - b.x0
    } else if (p.x - b.x1).abs() <= tol && p.y < b.y1 - tol {
        w + (p.y - b.y0)
    } else if (p.y - b.y1).abs() <= tol && p.x > b.x0 + tol {
        w + h + (b.x1 - p.x)
    } else {
        assert!((p.x - b.x0).abs() <= tol, "{p:?} not on {b:?}");
        2.0 * w + h + (b.y1 - p.y)
    }
}

/// Every (gt edge, box side) pair intersected with the generic
/// cross-product segment test.
pub fn intersections_oracle(gt: &Contour, b: &BBox) -> Vec<Intersection> {
    let cross = |a: Point, c: Point| a.x * c.y - a.y * c.x;
    let sub = |a: Point, c: Point| Point::new(a.x - c.x, a.y - c.y);
    let corners = b.corners();
    let eps = 1e-9 * b.width().max(b.height()).max(1.0);
    let mut hits = Vec::new();
    let mut arc = 0.0;
    for (e, (p, q)) in gt.edges().enumerate() {
        let r = sub(q, p);
        for s_i in 0..4 {
            let c0 = corners[s_i];
            let s = sub(corners[(s_i + 1) % 4], c0);
            let denom = cross(r, s);
            if denom.abs() <= 1e-12 * (r.x.hypot(r.y) * s.x.hypot(s.y)) {
                continue;
            }
            let qp = sub(c0, p);
            let t = cross(qp, s) / denom;
            let u = cross(qp, r) / denom;
            let u_tol = eps / s.x.hypot(s.y);
            if t >= -eps && t <= 1.0 + eps && u >= -u_tol && u <= 1.0 + u_tol {
                let t = t.clamp(0.0, 1.0);
                let pt = p.lerp(q, t);
                hits.push(Intersection { point: pt, gt_arc: arc + t * p.dist(q), edge: e, box_arc: 0.0 });
            }
        }
        arc += p.dist(q);
    }
    let perimeter = gt.perimeter();
    let tol = 1e-9 * perimeter.max(1.0);
    let mut kept: Vec<Intersection> = Vec::new();
    for h in hits {
        let d = |a: f64, b: f64| {
            let d = (a - b).abs();
            d.min(perimeter - d)
        };
        if kept.iter().all(|k| d(k.gt_arc, h.gt_arc) > tol) {
            kept.push(h);
        }
    }
    for k in &mut kept {
        if perimeter - k.gt_arc <= tol {
            k.gt_arc = 0.0;
        }
    }
    kept.sort_by(|a, b| a.gt_arc.partial_cmp(&b.gt_arc).unwrap());
    kept
}

/// Walks the ring edge by edge to the point at arc length `s`.
pub fn walk(gt: &Contour, s: f64) -> Point {
    let s = s.rem_euclid(gt.perimeter());
    let mut acc = 0.0;
    for (p, q) in gt.edges() {
        let l = p.dist(q);
        if s <= acc + l {
            return p.lerp(q, if l > 0.0 { (s - acc) / l } else { 0.0 });
        }
        acc += l;
    }
    gt.vertices()[0]
}

/// Every split of the cyclic vertex sequence into `m` consecutive (possibly
/// empty) blocks, block `i` going to box arc `i`. A vertex outside its arc
/// costs 1 plus its box-perimeter distance to the arc; the cheapest split
/// decides the segments, and targets are placed proportionally.
pub fn brute_force_match(init: &Contour, gt: &Contour, b: &BBox) -> Vec<Point> {
    let per = b.perimeter();
    let mut cuts: Vec<(f64, f64)> =
        intersections_oracle(gt, b).iter().map(|h| (box_arc_oracle(b, h.point), h.gt_arc)).collect();
    cuts.sort_by(|a, c| a.0.partial_cmp(&c.0).unwrap());
    let m = cuts.len();
    assert!(m >= 2, "oracle needs crossings");
    let k = init.len();
    let arcs: Vec<f64> = init.vertices().iter().map(|&v| box_arc_oracle(b, v)).collect();
    let cyc = |x: f64| x.rem_euclid(per);
    let cost = |v: usize, seg: usize| -> f64 {
        let (a0, a1) = (cuts[seg].0, cuts[(seg + 1) % m].0);
        let span = if m == 1 { per } else { cyc(a1 - a0) };
        let off = cyc(arcs[v] - a0);
        if off < span { 0.0 } else { 1.0 + (off - span).min(per - off) }
    };

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut sizes = vec![0usize; m];
    fn compositions(i: usize, left: usize, sizes: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if i + 1 == sizes.len() {
            sizes[i] = left;
            f(sizes);
            return;
        }
        for n in 0..=left {
            sizes[i] = n;
            compositions(i + 1, left - n, sizes, f);
        }
    }
    for start in 0..k {
        compositions(0, k, &mut sizes, &mut |sz| {
            let mut assign = vec![0usize; k];
            let mut v = start;
            for (seg, &n) in sz.iter().enumerate() {
                for _ in 0..n {
                    assign[v % k] = seg;
                    v += 1;
                }
            }
            let c: f64 = (0..k).map(|v| cost(v, assign[v])).sum();
            if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
                best = Some((c, assign));
            }
        });
    }
    let (_, assign) = best.unwrap();
    let gper = gt.perimeter();
    (0..k)
        .map(|v| {
            let seg = assign[v];
            let (a0, g0) = cuts[seg];
            let (a1, g1) = cuts[(seg + 1) % m];
            let f = cyc(arcs[v] - a0) / cyc(a1 - a0);
            walk(gt, g0 + f * (g1 - g0).rem_euclid(gper))
        })
        .collect()
}

pub fn crossing_star(seed: u64, n: usize) -> (Contour, BBox) {
    let mut r = rng(seed);
    let b = BBox::new(10.0, 10.0, 30.0, 26.0).unwrap();
    loop {
        let gt = random_star(&mut r, 20.0, 18.0, 5.0, 16.0, n);
        if intersections_oracle(&gt, &b).len() >= 2 {
            return (gt, b);
        }
    }
}

pub fn square(n: usize, x0: i64, y0: i64, side: i64) -> Mask {
    Mask::from_fn(n, n, |x, y| {
        let (x, y) = (x as i64, y as i64);
        x >= x0 && x < x0 + side && y >= y0 && y < y0 + side
    })
}

/// Foreground pixels with an in-image 4-neighbour in the background.
pub fn boundary_pixels(m: &Mask) -> Vec<(i64, i64)> {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m.get(x as usize, y as usize) {
                continue;
            }
            let edge = [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                .iter()
                .any(|&(u, v)| u >= 0 && v >= 0 && u < w && v < h && !m.get(u as usize, v as usize));
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

/// Pixel-count F: a boundary pixel is matched when some boundary pixel of
/// the other mask lies within Euclidean distance `tol + 0.5`.
pub fn boundary_f_oracle(a: &Mask, b: &Mask, tol: u32) -> f64 {
    let (pa, pb) = (boundary_pixels(a), boundary_pixels(b));
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    if pa.is_empty() || pb.is_empty() {
        return 0.0;
    }
    let r2 = (tol as f64 + 0.5).powi(2);
    let matched = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter().filter(|p| to.iter().any(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64) <= r2)).count() as f64
            / from.len() as f64
    };
    let (p, r) = (matched(&pa, &pb), matched(&pb, &pa));
    if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
}

/// Runs the offset branch of a small head with weights amplified by `gain`
/// on random features and returns the largest `|offset| − bound` over both
/// axes. Non-positive means every offset respected its tanh bound.
pub fn head_offset_excess(seed: u64, gain: f32) -> f64 {
    use boxsnake::head::snake_deform;
    use boxsnake::model::{HeadConfig, Model, ModelConfig};

    let head = HeadConfig { k: 40, hidden: 16, ..Default::default() };
    let cfg = ModelConfig { stage_channels: vec![4, 4, 4], fused_channels: 8, head, ..Default::default() };
    let mut model = Model::<f32>::init(cfg, seed).unwrap();
    let names: Vec<String> = model.params.entries().iter().map(|(n, _)| n.clone()).filter(|n| n.starts_with("head.")).collect();
    for n in &names {
        model.params.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v *= gain);
    }
    let mut r = rng(seed ^ 0xb0);
    let feats = random_tensor(&[10, 40], &mut r, -3.0, 3.0).cast::<f32>();
    let scale = [r.gen_range(0.5..80.0), r.gen_range(0.5..80.0)];
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let f = tape.constant(feats);
    let out = snake_deform(&mut tape, &p, &model.config, f, scale).unwrap();
    let bound = [scale[0] as f32, scale[1] as f32];
    tape.value(out).data().iter().enumerate().map(|(i, v)| (v.abs() - bound[i / 40]) as f64).fold(f64::NEG_INFINITY, f64::max)
}
