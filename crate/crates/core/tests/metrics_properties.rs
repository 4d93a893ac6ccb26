use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textwipe_core::metrics::{
    evaluate_pairs, frechet_distance, ms_ssim, mse, psnr, psnr_from_mse, ssim, SsimMode,
};
use textwipe_core::{Exec, Image};

fn noisy_pair(seed: u64, size: usize, noise: f32) -> (Image, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Image::from_fn(size, size, 3, |y, x, c| {
        ((y * 7 + x * 3 + c * 5) % 17) as f32 / 16.0
    });
    let data = a
        .data()
        .iter()
        .map(|v| (v + rng.random_range(-noise..=noise)).clamp(0.0, 1.0))
        .collect();
    let b = Image::from_vec(size, size, 3, data).unwrap();
    (a, b)
}

#[test]
fn two_by_two_hand_value() {
    let a = Image::from_vec(2, 2, 1, vec![0.0, 0.5, 1.0, 0.25]).unwrap();
    let b = Image::from_vec(2, 2, 1, vec![0.5, 0.5, 0.0, 0.75]).unwrap();
    // (0.25 + 0 + 1 + 0.25) / 4
    assert!((mse(&a, &b).unwrap() - 0.375).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn symmetric(seed in 0u64..10_000, noise in 0.01f32..0.4, size in 8usize..48) {
        let (a, b) = noisy_pair(seed, size, noise);
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ms_ssim(&a, &b).unwrap() - ms_ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn self_similarity_is_one(seed in 0u64..10_000, size in 1usize..40) {
        let (a, _) = noisy_pair(seed, size, 0.1);
        prop_assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn psnr_strictly_decreasing(m1 in 1e-9f64..1.0, m2 in 1e-9f64..1.0) {
        prop_assume!(m1 < m2);
        prop_assert!(psnr_from_mse(m1, 1e9) > psnr_from_mse(m2, 1e9));
    }

    #[test]
    fn frechet_symmetric_nonnegative(seed in 0u64..10_000, n in 2usize..30, dim in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = |shift: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>() + shift).collect()).collect()
        };
        let a = set(0.0);
        let b = set(0.3);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= -1e-8);
        prop_assert!((ab - ba).abs() < 1e-8);
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }
}

#[test]
fn evaluation_order_independent() {
    let pairs: Vec<_> = (0..9)
        .map(|i| noisy_pair(i, 24, 0.05 * (i + 1) as f32))
        .collect();
    let preds: Vec<_> = pairs.iter().map(|p| p.1.clone()).collect();
    let gts: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
    let a = evaluate_pairs(Exec::Sequential, &preds, &gts, SsimMode::Multiscale).unwrap();
    let b = evaluate_pairs(Exec::Parallel, &preds, &gts, SsimMode::Multiscale).unwrap();
    let (rp, rg): (Vec<_>, Vec<_>) = (
        preds.iter().rev().cloned().collect(),
        gts.iter().rev().cloned().collect(),
    );
    let c = evaluate_pairs(Exec::Sequential, &rp, &rg, SsimMode::Multiscale).unwrap();
    assert_eq!(a, b);
    assert!((a.psnr - c.psnr).abs() < 1e-12 && (a.mssim - c.mssim).abs() < 1e-12);
    assert_eq!(a.n_images, 9);
}
