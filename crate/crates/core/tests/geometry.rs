mod common;

use boxsnake::geometry::{
    contour_box_intersections, mask_iou, normalize_coords, rasterize, resample_arclength, sample_box_contour,
    split_components, BBox, Contour, InstanceMode, Mask, MultiPolygon, Point,
};
use common::{box_arc_oracle, intersections_oracle, random_star, regular_polygon, rng};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn box_contour_spacing_matches_arc_oracle() {
    let b = BBox::new(0.0, 0.0, 4.0, 2.0).unwrap();
    let c = sample_box_contour(&b, 12).unwrap();
    assert_eq!(c.len(), 12);
    for (i, p) in c.vertices().iter().enumerate() {
        assert!((box_arc_oracle(&b, *p) - i as f64).abs() < 1e-12, "vertex {i}: {p:?}");
    }
    for corner in b.corners() {
        assert!(c.vertices().contains(&corner));
    }
    assert!(c.signed_area() > 0.0);
}

proptest! {
    #[test]
    fn box_contour_spacing_uniform(
        x0 in -50.0..50.0f64, y0 in -50.0..50.0f64, w in 0.5..80.0f64, h in 0.5..80.0f64, q in 1usize..40,
    ) {
        let b = BBox::new(x0, y0, x0 + w, y0 + h).unwrap();
        let k = 4 * q;
        let c = sample_box_contour(&b, k).unwrap();
        let step = b.perimeter() / k as f64;
        for (i, p) in c.vertices().iter().enumerate() {
            prop_assert!((box_arc_oracle(&b, *p) - i as f64 * step).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_exact_on_dyadic_grid(
        raw in prop::collection::vec((-400i32..400, -400i32..400), 3..40),
        w8 in 1i32..400, h8 in 1i32..400,
    ) {
        let pts: Vec<Point> = raw.iter().map(|&(x, y)| Point::new(x as f64 / 8.0, y as f64 / 8.0)).collect();
        let (w, h) = (w8 as f64 / 8.0, h8 as f64 / 8.0);
        let base = normalize_coords(&pts, w, h).unwrap();
        let moved: Vec<Point> = pts.iter().map(|p| Point::new(p.x + 7.0, p.y - 3.0)).collect();
        prop_assert_eq!(&normalize_coords(&moved, w, h).unwrap(), &base);
        let scaled: Vec<Point> = pts.iter().map(|p| Point::new(p.x * 2.5, p.y * 2.5)).collect();
        prop_assert_eq!(&normalize_coords(&scaled, w * 2.5, h * 2.5).unwrap(), &base);
    }

    #[test]
    fn normalize_invariant_for_general_floats(
        raw in prop::collection::vec((-1e3..1e3f64, -1e3..1e3f64), 3..40),
        w in 0.1..500.0f64, h in 0.1..500.0f64, dx in -1e3..1e3f64, dy in -1e3..1e3f64, s in 0.1..10.0f64,
    ) {
        let pts: Vec<Point> = raw.iter().map(|&(x, y)| Point::new(x, y)).collect();
        let base = normalize_coords(&pts, w, h).unwrap();
        let moved: Vec<Point> = pts.iter().map(|p| Point::new((p.x + dx) * s, (p.y + dy) * s)).collect();
        let other = normalize_coords(&moved, w * s, h * s).unwrap();
        for (a, b) in base.iter().zip(&other) {
            prop_assert!((a[0] - b[0]).abs() <= 1e-9 * (1.0 + 2e3 / w));
            prop_assert!((a[1] - b[1]).abs() <= 1e-9 * (1.0 + 2e3 / h));
        }
    }

    #[test]
    fn iou_symmetric_and_monotone(bits_a in prop::collection::vec(any::<bool>(), 64), bits_b in prop::collection::vec(any::<bool>(), 64), drop in 0usize..64) {
        let a = Mask::from_fn(8, 8, |x, y| bits_a[y * 8 + x]);
        let b = Mask::from_fn(8, 8, |x, y| bits_b[y * 8 + x]);
        let ab = mask_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
        prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        prop_assert!((0.0..=1.0).contains(&ab));
        // removing an intersection pixel from `a` cannot raise the IoU
        let (x, y) = (drop % 8, drop / 8);
        if a.get(x, y) && b.get(x, y) {
            let mut shrunk = a.clone();
            shrunk.set(x, y, false);
            prop_assert!(mask_iou(&shrunk, &b).unwrap() <= ab);
        }
    }
}

#[test]
fn rasterized_area_tracks_shoelace() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let star = random_star(&mut r, 256.0, 256.0, 60.0, 240.0, 24);
        let m = rasterize(&MultiPolygon::single(star.clone()), 512, 512);
        let ratio = m.area() as f64 / star.area();
        assert!((ratio - 1.0).abs() < 0.02, "seed {seed}: ratio {ratio}");
    }
}

#[test]
fn identical_polygons_iou_one_at_any_resolution() {
    let mut r = rng(3);
    let star = random_star(&mut r, 0.5, 0.5, 0.1, 0.45, 17);
    for res in [4usize, 16, 63, 200] {
        let scaled = MultiPolygon::single(star.map(|p| Point::new(p.x * res as f64, p.y * res as f64)));
        let a = rasterize(&scaled, res, res);
        let b = rasterize(&scaled, res, res);
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0);
    }
}

#[test]
fn multiring_union() {
    let a = regular_polygon(10.0, 10.0, 5.0, 32);
    let b = regular_polygon(30.0, 10.0, 5.0, 32);
    let both = rasterize(&MultiPolygon::new(vec![a.clone(), b.clone()]).unwrap(), 40, 20);
    let ma = rasterize(&MultiPolygon::single(a), 40, 20);
    let mb = rasterize(&MultiPolygon::single(b), 40, 20);
    assert_eq!(both.area(), ma.area() + mb.area());
}

#[test]
fn resample_idempotent_on_uniform_shapes() {
    let hexagon = regular_polygon(5.0, -2.0, 9.0, 16);
    let rect = Contour::new(vec![
        Point::new(0.0, 0.0),
        Point::new(6.0, 0.0),
        Point::new(6.0, 2.0),
        Point::new(0.0, 2.0),
    ])
    .unwrap();
    for c in [hexagon, rect] {
        let once = resample_arclength(&c, 64).unwrap();
        let twice = resample_arclength(&once, 64).unwrap();
        assert_eq!(once.vertices()[0], c.vertices()[0]);
        for (a, b) in once.vertices().iter().zip(twice.vertices()) {
            assert!(a.dist(*b) < 1e-6);
        }
    }
}

#[test]
fn resample_preserves_perimeter_of_smooth_contour() {
    let circle = regular_polygon(0.0, 0.0, 50.0, 720);
    let r = resample_arclength(&circle, 128).unwrap();
    assert_eq!(r.len(), 128);
    assert!((r.perimeter() / circle.perimeter() - 1.0).abs() < 0.01);
    // consecutive samples are one step apart along the source ring
    let cum = circle.cumulative_lengths();
    let step = circle.perimeter() / 128.0;
    for (i, p) in r.vertices().iter().enumerate() {
        let seg = (p.y.atan2(p.x).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU * 720.0).floor() as usize;
        let along = cum[seg % 720] + circle.vertices()[seg % 720].dist(*p);
        assert!((along - i as f64 * step).abs() < 1e-6, "sample {i}");
    }
}

#[test]
fn split_counts_rings() {
    let rings: Vec<Contour> = (0..3).map(|i| regular_polygon(10.0 + 20.0 * i as f64, 10.0, 4.0, 12)).collect();
    let mp = MultiPolygon::new(rings).unwrap();
    assert_eq!(split_components(&mp, InstanceMode::PerComponent).unwrap().len(), 3);
    let inst = split_components(&mp, InstanceMode::PerInstance).unwrap();
    assert_eq!(inst.len(), 1);
    assert_eq!(inst[0].rings.len(), 3);
}

#[test]
fn intersections_match_pairwise_oracle() {
    let mut total = 0;
    for seed in 0..300 {
        let mut r = rng(1000 + seed);
        let n = r.gen_range(6..40);
        let star = random_star(&mut r, 0.0, 0.0, 5.0, 30.0, n);
        let x0 = r.gen_range(-35.0..10.0);
        let y0 = r.gen_range(-35.0..10.0);
        let b = BBox::new(x0, y0, x0 + r.gen_range(5.0..60.0), y0 + r.gen_range(5.0..60.0)).unwrap();
        let got = contour_box_intersections(&star, &b);
        let want = intersections_oracle(&star, &b);
        assert_eq!(got.len(), want.len(), "seed {seed}");
        for (g, w) in got.iter().zip(&want) {
            assert!(g.point.dist(w.point) < 1e-9, "seed {seed}: {g:?} vs {w:?}");
            assert!((g.gt_arc - w.gt_arc).abs() < 1e-9);
            assert!((g.box_arc - box_arc_oracle(&b, g.point)).abs() < 1e-9);
        }
        assert!(got.windows(2).all(|w| w[0].gt_arc < w[1].gt_arc));
        total += got.len();
    }
    assert!(total > 300, "too few crossings exercised: {total}");
}

#[test]
fn corner_crossing_counts_once() {
    let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    // a diagonal edge through the corner (10, 10)
    let tri = Contour::new(vec![Point::new(5.0, 5.0), Point::new(15.0, 15.0), Point::new(5.0, 15.0)]).unwrap();
    let got = contour_box_intersections(&tri, &b);
    assert_eq!(got.len(), intersections_oracle(&tri, &b).len());
    assert_eq!(got.len(), 2);
    assert!(got.iter().any(|h| h.point == Point::new(10.0, 10.0)));
}
