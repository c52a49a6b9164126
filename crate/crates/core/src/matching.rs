//! Segment-wise assignment of ground-truth targets to box-sampled vertices.
//!
//! The points where the ground-truth ring meets the box cut both curves
//! into matching arcs. A vertex lying on box arc `i` at fraction `f` of that
//! arc is sent to fraction `f` of the corresponding ground-truth arc, so the
//! uniformly spaced box vertices of one arc land on uniform arc-length
//! samples of its ground-truth counterpart, in traversal order.

use crate::geometry::{contour_box_intersections, resample_arclength, BBox, Contour, GeometryError, Point};

/// One target per vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub targets: Vec<Point>,
    /// Index of the box arc each vertex fell in, counted in box order from
    /// the first crossing; all zero on the fallback path.
    pub segment: Vec<usize>,
    pub valid: Vec<bool>,
    /// No usable crossings: global cyclic alignment was used instead.
    pub fallback: bool,
}

/// Assigns each vertex of the box-sampled `initial` contour a point on `gt`.
///
/// With fewer than two distinct crossings the ground truth is resampled to
/// `K` points and the cyclic shift with the least total squared distance is
/// used (ties go to the smallest shift).
pub fn segment_match(initial: &Contour, gt: &Contour, b: &BBox) -> Result<MatchResult, GeometryError> {
    if gt.perimeter() <= 0.0 || gt.area() <= 0.0 {
        return Err(GeometryError::Degenerate);
    }
    let gt = if gt.signed_area() < 0.0 { Contour::new(gt.vertices().to_vec())? } else { gt.clone() };
    let k = initial.len();
    let box_len = b.perimeter();
    let gt_len = gt.perimeter();

    let mut cuts: Vec<(f64, f64)> = contour_box_intersections(&gt, b).iter().map(|h| (h.box_arc, h.gt_arc)).collect();
    cuts.sort_by(|a, c| a.0.total_cmp(&c.0));
    cuts.dedup_by(|a, c| a.0 == c.0);
    if cuts.len() < 2 {
        return fallback(initial, &gt);
    }

    let m = cuts.len();
    let mut targets = Vec::with_capacity(k);
    let mut segment = Vec::with_capacity(k);
    for &v in initial.vertices() {
        let a = b.arc_position(v);
        // last cut at or before `a`, wrapping to the final cut
        let i = match cuts.partition_point(|c| c.0 <= a) {
            0 => m - 1,
            p => p - 1,
        };
        let (a0, g0) = cuts[i];
        let (a1, g1) = cuts[(i + 1) % m];
        let span = (a1 - a0).rem_euclid(box_len);
        let span = if span == 0.0 { box_len } else { span };
        let f = (a - a0).rem_euclid(box_len) / span;
        let gt_span = (g1 - g0).rem_euclid(gt_len);
        let gt_span = if gt_span == 0.0 { gt_len } else { gt_span };
        targets.push(gt.point_at_arc(g0 + f * gt_span));
        segment.push(i);
    }
    Ok(MatchResult { targets, segment, valid: vec![true; k], fallback: false })
}

fn fallback(initial: &Contour, gt: &Contour) -> Result<MatchResult, GeometryError> {
    let k = initial.len();
    let samples = resample_arclength(gt, k)?;
    let (s, v) = (samples.vertices(), initial.vertices());
    let cost = |r: usize| -> f64 { (0..k).map(|i| v[i].dist2(s[(i + r) % k])).sum() };
    let mut best = (0, cost(0));
    for r in 1..k {
        let c = cost(r);
        if c < best.1 {
            best = (r, c);
        }
    }
    let targets = (0..k).map(|i| s[(i + best.0) % k]).collect();
    Ok(MatchResult { targets, segment: vec![0; k], valid: vec![true; k], fallback: true })
}
