use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textwipe_core::rtv::{
    gaussian_kernel, rtv_smooth, rtv_smooth_with, rtv_weights, RtvParams, INHERENT_EPS,
};
use textwipe_core::{Exec, Image};

fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_vec(
        h,
        w,
        c,
        (0..h * w * c).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap()
}

/// Direct 2-D windowed sums with explicit loops over every tap.
fn oracle_weights(img: &Image, p: &RtvParams, horizontal: bool) -> Vec<f64> {
    let (h, w, c) = img.shape();
    let (eh, ew) = if horizontal { (h, w - 1) } else { (h - 1, w) };
    let grad = |ch: usize, y: usize, x: usize| -> f64 {
        if horizontal {
            img.get(y, x + 1, ch) as f64 - img.get(y, x, ch) as f64
        } else {
            img.get(y + 1, x, ch) as f64 - img.get(y, x, ch) as f64
        }
    };
    let k = gaussian_kernel(p.sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let window = |f: &dyn Fn(usize, usize) -> f64, y: usize, x: usize| -> f64 {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let g = k[(dy + r) as usize] * k[(dx + r) as usize];
                acc += g * f(clamp(y as isize + dy, eh), clamp(x as isize + dx, ew));
            }
        }
        acc
    };
    let inherent = |y: usize, x: usize| -> f64 {
        (0..c)
            .map(|ch| window(&|yy, xx| grad(ch, yy, xx), y, x).abs())
            .sum::<f64>()
            / c as f64
    };
    let recip = |y: usize, x: usize| 1.0 / (inherent(y, x) + INHERENT_EPS);
    let mut out = Vec::with_capacity(eh * ew);
    for y in 0..eh {
        for x in 0..ew {
            let local = (0..c).map(|ch| grad(ch, y, x).abs()).sum::<f64>() / c as f64;
            out.push(window(&recip, y, x) / (local + p.sharpness_eps));
        }
    }
    out
}

#[test]
fn weights_match_nested_loop_oracle() {
    let img = random_image(11, 8, 8, 3);
    let p = RtvParams {
        sigma: 1.0,
        ..RtvParams::default()
    };
    let wts = rtv_weights(&img, &p);
    for (horizontal, got) in [(true, &wts.wx), (false, &wts.wy)] {
        let want = oracle_weights(&img, &p, horizontal);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn flip_equivariance() {
    let img = random_image(5, 12, 16, 3);
    let p = RtvParams::default();
    let a = rtv_smooth(&img.flip_horizontal(), &p).unwrap();
    let b = rtv_smooth(&img, &p).unwrap().flip_horizontal();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn deterministic_across_exec_policies() {
    let img = random_image(9, 16, 16, 3);
    let p = RtvParams::default();
    let a = rtv_smooth_with(Exec::Sequential, &img, &p).unwrap();
    let b = rtv_smooth_with(Exec::Parallel, &img, &p).unwrap();
    let c = rtv_smooth_with(Exec::Sequential, &img, &p).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn output_finite_in_range_same_shape(seed in 0u64..1000, h in 2usize..14, w in 2usize..14) {
        let img = random_image(seed, h, w, 3);
        let out = rtv_smooth(&img, &RtvParams { iterations: 2, ..RtvParams::default() }).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn weights_positive_finite(seed in 0u64..1000) {
        let img = random_image(seed, 9, 7, 1);
        let wts = rtv_weights(&img, &RtvParams::default());
        prop_assert!(wts.wx.iter().chain(&wts.wy).all(|v| v.is_finite() && *v > 0.0));
    }
}
