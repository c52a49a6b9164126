mod common;

use std::collections::BTreeMap;

use boxsnake::geometry::{Contour, Mask, MultiPolygon, Point};
use boxsnake::metrics::{boundary_f, category_miou, map_50_95, score_instance, EvalRecord, EvalReport, MetricsError};
use common::{boundary_f_oracle, random_star, rng, square};
use proptest::prelude::*;
use rand::Rng;

fn rec(id: usize, cat: &str, iou: f64) -> EvalRecord {
    EvalRecord { instance_id: format!("i{id}"), category: cat.into(), iou, f_scores: BTreeMap::new() }
}

#[test]
fn miou_averages_category_means() {
    let mut rs = vec![rec(0, "a", 1.0)];
    rs.extend((1..100).map(|i| rec(i, "b", 0.0)));
    let m = category_miou(&rs).unwrap();
    assert_eq!(m.miou, 0.5);
    assert_eq!(m.per_category["b"], 0.0);
    let same: Vec<_> = (0..7).map(|i| rec(i, ["x", "y", "z"][i % 3], 0.7)).collect();
    assert!((category_miou(&same).unwrap().miou - 0.7).abs() < 1e-15);
    assert!(matches!(category_miou(&[]), Err(MetricsError::Empty)));
}

#[test]
fn miou_reproduces_published_row_average() {
    let values = [63.89, 80.61, 72.12, 70.25, 80.11, 64.02, 79.40, 68.19];
    let cats = ["bicycle", "bus", "person", "train", "truck", "motorcycle", "car", "rider"];
    let rs: Vec<_> = values.iter().zip(cats).enumerate().map(|(i, (v, c))| rec(i, c, v / 100.0)).collect();
    let m = category_miou(&rs).unwrap();
    assert!((100.0 * m.miou - 72.33).abs() <= 0.01, "{}", 100.0 * m.miou);
}

#[test]
fn map_analytic_cases() {
    let all = |v: f64| (0..5).map(|i| rec(i, "c", v)).collect::<Vec<_>>();
    assert_eq!(map_50_95(&all(1.0)).unwrap(), 1.0);
    assert_eq!(map_50_95(&all(0.70)).unwrap(), 0.5);
    assert!((map_50_95(&[rec(0, "c", 0.9), rec(1, "c", 0.6)]).unwrap() - 0.6).abs() < 1e-15);
    assert!(matches!(map_50_95(&[]), Err(MetricsError::Empty)));
}

proptest! {
    #[test]
    fn map_is_monotone(ious in prop::collection::vec(0.0f64..1.0, 1..30), bumps in prop::collection::vec(0.0f64..0.3, 30)) {
        let a: Vec<_> = ious.iter().enumerate().map(|(i, &v)| rec(i, "c", v)).collect();
        let b: Vec<_> = ious.iter().enumerate().map(|(i, &v)| rec(i, "c", (v + bumps[i]).min(1.0))).collect();
        prop_assert!(map_50_95(&b).unwrap() >= map_50_95(&a).unwrap());
    }

    #[test]
    fn miou_ignores_order(ious in prop::collection::vec(0.0f64..1.0, 1..30), seed in 0u64..100) {
        let a: Vec<_> = ious.iter().enumerate().map(|(i, &v)| rec(i, ["p", "q", "r"][i % 3], v)).collect();
        let mut b = a.clone();
        let mut r = rng(seed);
        for i in (1..b.len()).rev() {
            b.swap(i, r.gen_range(0..=i));
        }
        prop_assert!((category_miou(&a).unwrap().miou - category_miou(&b).unwrap().miou).abs() < 1e-12);
    }
}

#[test]
fn boundary_f_shift_cases() {
    let gt = square(32, 8, 8, 14);
    for tol in 1..4 {
        assert_eq!(boundary_f(&gt, &gt, tol).unwrap(), 1.0);
    }
    for (dx, dy) in [(1, 0), (0, 1), (-1, 0), (1, 1)] {
        let pred = square(32, 8 + dx, 8 + dy, 14);
        assert_eq!(boundary_f(&pred, &gt, 1).unwrap(), 1.0);
        assert_eq!(boundary_f_oracle(&pred, &gt, 1), 1.0);
    }
    // three pixels inside: no boundary pixel within reach at tolerance 1
    let inset = square(32, 11, 11, 8);
    assert_eq!(boundary_f(&inset, &gt, 1).unwrap(), 0.0);
    // a translated copy keeps the crossings of its edges with the original
    let shifted = square(32, 11, 11, 14);
    let f = boundary_f(&shifted, &gt, 1).unwrap();
    assert!(f > 0.0 && f < 0.2);
    assert_eq!(f, boundary_f_oracle(&shifted, &gt, 1));
    assert_eq!(boundary_f(&Mask::new(32, 32), &Mask::new(32, 32), 1).unwrap(), 1.0);
    assert_eq!(boundary_f(&gt, &Mask::new(32, 32), 1).unwrap(), 0.0);
    assert!(boundary_f(&gt, &Mask::new(31, 32), 1).is_err());
    assert!(matches!(boundary_f(&gt, &gt, 0), Err(MetricsError::Tolerance)));
}

#[test]
fn image_border_is_not_a_boundary() {
    let full = Mask::from_fn(16, 16, |_, _| true);
    let half = Mask::from_fn(16, 16, |x, _| x < 8);
    assert_eq!(boundary_f(&full, &full, 1).unwrap(), 1.0);
    // only column 7 is boundary in `half`; `full` has none
    assert_eq!(boundary_f(&half, &full, 1).unwrap(), 0.0);
}

fn blob(seed: u64) -> Mask {
    let mut r = rng(seed);
    let star = random_star(&mut r, 16.0, 16.0, 4.0, 12.0, 9);
    boxsnake::geometry::rasterize(&MultiPolygon::single(star), 32, 32)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn boundary_f_matches_oracle_symmetric_monotone(a in 0u64..5000, b in 0u64..5000) {
        let (ma, mb) = (blob(a), blob(b));
        let mut prev = 0.0;
        for tol in 1..=3 {
            let f = boundary_f(&ma, &mb, tol).unwrap();
            prop_assert!((f - boundary_f_oracle(&ma, &mb, tol)).abs() < 1e-12);
            prop_assert_eq!(f, boundary_f(&mb, &ma, tol).unwrap());
            prop_assert!(f >= prev);
            prev = f;
        }
    }
}

#[test]
fn windowed_scoring_matches_full_image() {
    let mut r = rng(77);
    for _ in 0..20 {
        let gt = random_star(&mut r, 40.0, 30.0, 6.0, 20.0, 12);
        let pred = random_star(&mut r, 42.0, 31.0, 6.0, 20.0, 12);
        let (gp, pp) = (MultiPolygon::single(gt), MultiPolygon::single(pred));
        let (iou, f) = score_instance(&pp, &gp, 80, 60, &[1, 2]).unwrap();
        let (fm, gm) = (boxsnake::geometry::rasterize(&pp, 80, 60), boxsnake::geometry::rasterize(&gp, 80, 60));
        assert_eq!(iou, boxsnake::geometry::mask_iou(&fm, &gm).unwrap());
        assert_eq!(f[&1], boundary_f(&fm, &gm, 1).unwrap());
        assert_eq!(f[&2], boundary_f(&fm, &gm, 2).unwrap());
    }
    // touching the image border
    let edge = Contour::new(vec![Point::new(0.0, 0.0), Point::new(20.0, 0.0), Point::new(20.0, 20.0), Point::new(0.0, 20.0)]).unwrap();
    let p = MultiPolygon::single(edge);
    let (iou, f) = score_instance(&p, &p, 30, 30, &[1]).unwrap();
    assert_eq!((iou, f[&1]), (1.0, 1.0));
}

#[test]
fn report_round_trips_and_summarizes() {
    let mut rs: Vec<EvalRecord> = (0..6).map(|i| rec(i, ["a", "b"][i % 2], 0.5 + 0.08 * i as f64)).collect();
    for (i, r) in rs.iter_mut().enumerate() {
        r.f_scores.insert(1, 0.1 * i as f64);
        r.f_scores.insert(2, 0.15 * i as f64);
    }
    let rep = EvalReport::from_records(rs).unwrap();
    assert!((rep.boundary_f[&1] - 0.25).abs() < 1e-12);
    let back = EvalReport::from_json(&rep.to_json().unwrap()).unwrap();
    assert_eq!(back, rep);
    let text = rep.to_text();
    assert!(text.contains("mIoU") && text.contains("F@2px") && text.contains("mAP@(0.5:0.95)"));
    let json: serde_json::Value = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
    assert!(json["records"][0]["fScores"]["1"].is_number());
    assert!(json["records"][0]["instanceId"].is_string());
}
