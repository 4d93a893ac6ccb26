use proptest::prelude::*;
use textwipe_core::geometry::{
    pixel_center, render_soft_mask, MaskMode, OffsetBands, Point, SoftMask, TextPolygon,
};

fn rect_strategy() -> impl Strategy<Value = TextPolygon> {
    (2.0f64..40.0, 2.0f64..40.0, 4.0f64..20.0, 3.0f64..14.0)
        .prop_map(|(x, y, w, h)| TextPolygon::rect(x, y, x + w, y + h).unwrap())
}

fn quad_strategy() -> impl Strategy<Value = TextPolygon> {
    (
        10.0f64..40.0,
        10.0f64..40.0,
        6.0f64..16.0,
        3.0f64..8.0,
        -0.6f64..0.6,
    )
        .prop_map(|(cx, cy, hw, hh, theta)| {
            let (s, c) = theta.sin_cos();
            let pts: Vec<[f64; 2]> = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
                .iter()
                .map(|&(u, v)| [cx + u * c - v * s, cy + u * s + v * c])
                .collect();
            TextPolygon::from_coords(&pts).unwrap()
        })
}

fn hard(polys: &[TextPolygon], n: usize) -> SoftMask {
    render_soft_mask(polys, n, n, 0.9, MaskMode::Hard).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn values_in_unit_range(polys in prop::collection::vec(quad_strategy(), 0..4)) {
        let m = render_soft_mask(&polys, 48, 48, 0.9, MaskMode::Soft).unwrap();
        prop_assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let h = hard(&polys, 48);
        prop_assert!(h.values().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn max_combination(a in prop::collection::vec(quad_strategy(), 1..3),
                       b in prop::collection::vec(rect_strategy(), 1..3)) {
        let all: Vec<_> = a.iter().chain(&b).cloned().collect();
        let ma = render_soft_mask(&a, 48, 48, 0.9, MaskMode::Soft).unwrap();
        let mb = render_soft_mask(&b, 48, 48, 0.9, MaskMode::Soft).unwrap();
        let mab = render_soft_mask(&all, 48, 48, 0.9, MaskMode::Soft).unwrap();
        prop_assert_eq!(mab, ma.max(&mb));
    }

    #[test]
    fn bounded_by_inner_and_outer(p in quad_strategy(), ratio in 0.6f64..0.95) {
        let bands = OffsetBands::new(&p, ratio).unwrap();
        let soft = render_soft_mask(std::slice::from_ref(&p), 48, 48, ratio, MaskMode::Soft).unwrap();
        let inner = hard(std::slice::from_ref(&bands.inner), 48);
        let outer = hard(std::slice::from_ref(&bands.outer), 48);
        for i in 0..48 * 48 {
            prop_assert!(soft.values()[i] >= inner.values()[i]);
            prop_assert!(soft.values()[i] <= outer.values()[i]);
        }
    }

    #[test]
    fn ramp_is_monotone_along_rays(p in quad_strategy(), angle in 0.0f64..std::f64::consts::TAU) {
        let bands = OffsetBands::new(&p, 0.8).unwrap();
        let (x0, y0, x1, y1) = bands.outer.bounding_box();
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let far = Point::new(cx + 100.0 * angle.cos(), cy + 100.0 * angle.sin());
        // the ray from a core boundary point through a far point keeps that
        // boundary point as its nearest core point (the core is convex)
        let q = bands.inner.nearest_boundary_point(far);
        let len = q.distance(far);
        let dir = ((far.x - q.x) / len, (far.y - q.y) / len);
        let mut last = f64::INFINITY;
        for i in 0..400 {
            let t = i as f64 * 0.05;
            let v = bands.value_at(Point::new(q.x + dir.0 * t, q.y + dir.1 * t));
            prop_assert!(v <= last + 1e-9, "value rose from {} to {} at t={}", last, v, t);
            last = v;
        }
        prop_assert_eq!(last, 0.0);
    }

    #[test]
    fn integer_translation_equivariance(p in rect_strategy(), dx in -3i32..4, dy in -3i32..4) {
        let m = render_soft_mask(std::slice::from_ref(&p), 64, 64, 0.9, MaskMode::Soft).unwrap();
        let moved = p.translate(dx as f64, dy as f64);
        let mt = render_soft_mask(std::slice::from_ref(&moved), 64, 64, 0.9, MaskMode::Soft).unwrap();
        for y in 0..64i32 {
            for x in 0..64i32 {
                let (sy, sx) = (y - dy, x - dx);
                if (0..64).contains(&sy) && (0..64).contains(&sx) {
                    let a = mt.get(y as usize, x as usize);
                    let b = m.get(sy as usize, sx as usize);
                    prop_assert!((a - b).abs() < 1e-5, "({}, {}): {} vs {}", y, x, a, b);
                }
            }
        }
    }
}

#[test]
fn hard_mode_is_polygon_membership() {
    let p =
        TextPolygon::from_coords(&[[3.2, 4.1], [20.7, 6.0], [18.0, 15.5], [5.0, 12.0]]).unwrap();
    let m = hard(std::slice::from_ref(&p), 24);
    for y in 0..24 {
        for x in 0..24 {
            let want = if p.contains(pixel_center(y, x)) {
                1.0
            } else {
                0.0
            };
            assert_eq!(m.get(y, x), want);
        }
    }
}
