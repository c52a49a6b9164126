//! Evaluation: per-category mIoU, thresholded mAP over instances and
//! boundary F scores at pixel tolerances.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{mask_iou, rasterize, GeometryError, Mask, MultiPolygon, Point};

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub const AP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no evaluation records")]
    Empty,
    #[error("boundary tolerance must be at least 1 px")]
    Tolerance,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Scores of one predicted instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalRecord {
    pub instance_id: String,
    pub category: String,
    pub iou: f64,
    /// Boundary F keyed by tolerance in pixels.
    pub f_scores: BTreeMap<u32, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CategoryMiou {
    pub per_category: BTreeMap<String, f64>,
    pub miou: f64,
}

/// Mean IoU per category and the unweighted mean of those means.
pub fn category_miou(records: &[EvalRecord]) -> Result<CategoryMiou, MetricsError> {
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.category.as_str()).or_default();
        e.0 += r.iou;
        e.1 += 1;
    }
    if acc.is_empty() {
        return Err(MetricsError::Empty);
    }
    let per_category: BTreeMap<String, f64> = acc.into_iter().map(|(c, (s, n))| (c.to_owned(), s / n as f64)).collect();
    let miou = per_category.values().sum::<f64>() / per_category.len() as f64;
    Ok(CategoryMiou { per_category, miou })
}

/// Mean over [`AP_THRESHOLDS`] of the fraction of instances with IoU at or
/// above the threshold.
pub fn map_50_95(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = records.len() as f64;
    let total: f64 = AP_THRESHOLDS
        .iter()
        .map(|&t| records.iter().filter(|r| r.iou >= t - 1e-12).count() as f64 / n)
        .sum();
    Ok(total / AP_THRESHOLDS.len() as f64)
}

/// Foreground pixels with at least one 4-neighbour in the background.
/// Outside the image the mask is extended by replication, so the image
/// border itself is not a boundary.
pub fn boundary(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    Mask::from_fn(w, h, |x, y| {
        mask.get(x, y)
            && !(mask.get(x.saturating_sub(1), y)
                && mask.get((x + 1).min(w - 1), y)
                && mask.get(x, y.saturating_sub(1))
                && mask.get(x, (y + 1).min(h - 1)))
    })
}

/// Offsets `(dx, dy)` with `dx² + dy² ≤ (tol + 0.5)²`.
pub fn disk_offsets(tol: u32) -> Vec<(i64, i64)> {
    let r = tol as i64;
    let lim = (tol as f64 + 0.5).powi(2);
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= lim {
                out.push((dx, dy));
            }
        }
    }
    out
}

pub fn dilate(mask: &Mask, tol: u32) -> Mask {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let disk = disk_offsets(tol);
    let mut out = Mask::new(mask.width(), mask.height());
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x as usize, y as usize) {
                continue;
            }
            for &(dx, dy) in &disk {
                let (u, v) = (x + dx, y + dy);
                if (0..w).contains(&u) && (0..h).contains(&v) {
                    out.set(u as usize, v as usize, true);
                }
            }
        }
    }
    out
}

/// Boundary F score of `pred` against `gt` at a pixel tolerance.
pub fn boundary_f(pred: &Mask, gt: &Mask, tol: u32) -> Result<f64, MetricsError> {
    if tol < 1 {
        return Err(MetricsError::Tolerance);
    }
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(GeometryError::DimensionMismatch(pred.width(), pred.height(), gt.width(), gt.height()).into());
    }
    let (pb, gb) = (boundary(pred), boundary(gt));
    let (np, ng) = (pb.area(), gb.area());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let hits = |a: &Mask, b: &Mask| a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count() as f64;
    let precision = hits(&pb, &dilate(&gb, tol)) / np as f64;
    let recall = hits(&gb, &dilate(&pb, tol)) / ng as f64;
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

/// IoU and boundary F scores of one prediction, rasterized over a window of
/// the `width × height` image that covers both shapes plus a margin.
pub fn score_instance(
    pred: &MultiPolygon,
    gt: &MultiPolygon,
    width: usize,
    height: usize,
    tolerances: &[u32],
) -> Result<(f64, BTreeMap<u32, f64>), MetricsError> {
    let margin = tolerances.iter().copied().max().unwrap_or(0) as f64 + 2.0;
    let b = pred.bbox()?.union(&gt.bbox()?);
    let x0 = (b.x0 - margin).floor().clamp(0.0, width as f64) as usize;
    let y0 = (b.y0 - margin).floor().clamp(0.0, height as f64) as usize;
    let x1 = (b.x1 + margin).ceil().clamp(0.0, width as f64) as usize;
    let y1 = (b.y1 + margin).ceil().clamp(0.0, height as f64) as usize;
    let shift = |p: &MultiPolygon| -> Result<MultiPolygon, GeometryError> {
        let rings = p.rings().iter().map(|r| r.map(|q| Point::new(q.x - x0 as f64, q.y - y0 as f64))).collect();
        MultiPolygon::new(rings)
    };
    let (w, h) = (x1.saturating_sub(x0).max(1), y1.saturating_sub(y0).max(1));
    let pm = rasterize(&shift(pred)?, w, h);
    let gm = rasterize(&shift(gt)?, w, h);
    let iou = mask_iou(&pm, &gm)?;
    let mut f = BTreeMap::new();
    for &t in tolerances {
        f.insert(t, boundary_f(&pm, &gm, t)?);
    }
    Ok((iou, f))
}

/// Everything reported for one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub instances: usize,
    pub mean_iou: f64,
    pub miou: f64,
    pub per_category: BTreeMap<String, f64>,
    pub map_50_95: f64,
    /// Mean boundary F per tolerance over instances.
    pub boundary_f: BTreeMap<u32, f64>,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Result<Self, MetricsError> {
        let cat = category_miou(&records)?;
        let map = map_50_95(&records)?;
        let n = records.len() as f64;
        let mut sums: BTreeMap<u32, f64> = BTreeMap::new();
        for r in &records {
            for (&t, &f) in &r.f_scores {
                *sums.entry(t).or_default() += f;
            }
        }
        Ok(EvalReport {
            instances: records.len(),
            mean_iou: records.iter().map(|r| r.iou).sum::<f64>() / n,
            miou: cat.miou,
            per_category: cat.per_category,
            map_50_95: map,
            boundary_f: sums.into_iter().map(|(t, s)| (t, s / n)).collect(),
            records,
        })
    }

    pub fn to_json(&self) -> Result<String, MetricsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, MetricsError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Plain-text summary table, percentages with two decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24}{:>10}", "category", "IoU %");
        for (c, v) in &self.per_category {
            let _ = writeln!(out, "{:<24}{:>10.2}", c, 100.0 * v);
        }
        let _ = writeln!(out, "{:<24}{:>10.2}", "mIoU", 100.0 * self.miou);
        let _ = writeln!(out, "{:<24}{:>10.2}", "instance mean IoU", 100.0 * self.mean_iou);
        let _ = writeln!(out, "{:<24}{:>10.2}", "mAP@(0.5:0.95)", 100.0 * self.map_50_95);
        for (t, v) in &self.boundary_f {
            let _ = writeln!(out, "{:<24}{:>10.2}", format!("F@{t}px"), 100.0 * v);
        }
        let _ = writeln!(out, "{:<24}{:>10}", "instances", self.instances);
        out
    }
}
