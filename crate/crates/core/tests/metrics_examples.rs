use calid::metrics::{
    assd, dice, gaussian_blur, hausdorff, perceptual_distance, psnr, rfid, GradientPyramid, MaskGrid,
};
use calid::phantom::random_phantom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn gaussian_set(n: usize, mean: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = Normal::new(mean, 1.0).unwrap();
    (0..n).map(|_| vec![d.sample(rng)]).collect()
}

#[test]
fn rfid_shifted_gaussians_is_about_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = gaussian_set(10_000, 0.0, &mut rng);
    let b = gaussian_set(10_000, 1.0, &mut rng);
    let d = rfid(&a, &b).unwrap();
    assert!((d - 1.0).abs() < 0.05, "rfid {d}");
    assert!((d - rfid(&b, &a).unwrap()).abs() < 1e-8);
    assert!(rfid(&a, &a).unwrap().abs() < 1e-6);
    assert!(rfid(&a[..1], &b).is_err());
}

#[test]
fn rfid_multivariate_is_symmetric_with_shrinkage() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = Normal::new(0.0, 1.0).unwrap();
    let a: Vec<Vec<f64>> = (0..6).map(|_| (0..10).map(|_| d.sample(&mut rng)).collect()).collect();
    let b: Vec<Vec<f64>> = (0..8).map(|_| (0..10).map(|_| 0.5 + d.sample(&mut rng)).collect()).collect();
    let ab = rfid(&a, &b).unwrap();
    assert!(ab >= 0.0);
    assert!((ab - rfid(&b, &a).unwrap()).abs() < 1e-8);
    assert!(rfid(&a, &a).unwrap().abs() < 1e-6);
}

#[test]
fn heavy_blur_is_perceptually_farther_than_matched_noise() {
    let extractor = GradientPyramid::default();
    let n = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..4 {
        let (_, vol, _) = random_phantom(n, 6, 1, 0.0, seed).unwrap();
        let clean = vol.image(3, 0).to_vec();
        let blurred = gaussian_blur(&clean, n, n, 2.5).unwrap();
        let target = psnr(&clean, &blurred, 1.0).unwrap();
        let sigma = 10f64.powf(-target / 20.0);
        let normal = Normal::new(0.0, sigma).unwrap();
        let noisy: Vec<f32> = clean.iter().map(|&v| v + normal.sample(&mut rng) as f32).collect();
        assert!((psnr(&clean, &noisy, 1.0).unwrap() - target).abs() < 0.5);
        let db = perceptual_distance(&clean, &blurred, n, n, &extractor).unwrap();
        let dn = perceptual_distance(&clean, &noisy, n, n, &extractor).unwrap();
        assert!(db > dn, "seed {seed}: blur {db} vs noise {dn} at {target:.2} dB");
        assert_eq!(perceptual_distance(&clean, &clean, n, n, &extractor).unwrap(), 0.0);
    }
}

#[test]
fn overlap_metrics_are_symmetric() {
    let grid = MaskGrid::new(vec![12, 12], vec![1.2, 0.8]).unwrap();
    let a: Vec<bool> = (0..144).map(|i| (2..8).contains(&(i / 12)) && (3..9).contains(&(i % 12))).collect();
    let b: Vec<bool> = (0..144).map(|i| (4..10).contains(&(i / 12)) && (1..7).contains(&(i % 12))).collect();
    assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
    assert_eq!(assd(&a, &b, &grid).unwrap(), assd(&b, &a, &grid).unwrap());
    assert_eq!(hausdorff(&a, &b, &grid).unwrap(), hausdorff(&b, &a, &grid).unwrap());
}
