use daetalker::avatar::{avatar_landmarks, AvatarParams, Geometry, LandmarkSet, PoseVector};
use daetalker::metrics::{lip_lmd, lmd, pose_error, psnr, ssim};
use daetalker::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::<f64>::randn(&[3, 16, 16], &mut rng).map(|v| (0.5 * v).tanh())
}

fn landmarks(aperture: f64, yaw: f64) -> LandmarkSet {
    let p = AvatarParams {
        aperture,
        pose: PoseVector::new(0.0, 0.0, yaw),
        identity_seed: 3,
    };
    avatar_landmarks(&p, Geometry::rgb(64, 64)).unwrap()
}

fn moved(set: &LandmarkSet, scale: f64, dx: f64, dy: f64) -> LandmarkSet {
    LandmarkSet {
        points: set.points.iter().map(|(k, [x, y])| (k.clone(), [x * scale + dx, y * scale + dy])).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn image_metrics_are_symmetric(a in 0u64..1000, b in 0u64..1000) {
        let (x, y) = (image(a), image(b));
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        let (s1, s2) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s1));
        prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn lmd_ignores_translation_and_scale(
        ap in 0.0f64..1.0, yaw in -30.0f64..30.0, ap2 in 0.0f64..1.0,
        scale in 0.25f64..4.0, dx in -50.0f64..50.0, dy in -50.0f64..50.0,
    ) {
        let (a, b) = (landmarks(ap, yaw), landmarks(ap2, 0.0));
        let base = lmd(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        let shifted = lmd(&[moved(&a, scale, dx, dy)], std::slice::from_ref(&b)).unwrap();
        prop_assert!((base - shifted).abs() < 1e-9);
        prop_assert_eq!(lmd(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
        prop_assert!(lip_lmd(std::slice::from_ref(&a), &[moved(&a, scale, dx, dy)]).unwrap() < 1e-9);
    }

    #[test]
    fn pose_error_is_mean_squared_sum(r in -40.0f64..40.0, p in -40.0f64..40.0, y in -40.0f64..40.0) {
        let a = [PoseVector::new(r, p, y), PoseVector::FRONTAL];
        let b = [PoseVector::FRONTAL, PoseVector::FRONTAL];
        let expect = (r * r + p * p + y * y) / 2.0;
        prop_assert!((pose_error(&a, &b).unwrap() - expect).abs() < 1e-9);
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    assert!(psnr(&image(0), &Tensor::zeros(&[3, 8, 8])).is_err());
    assert!(ssim(&Tensor::<f64>::zeros(&[3, 4, 4]), &Tensor::zeros(&[3, 4, 4])).is_err());
    assert!(pose_error(&[PoseVector::FRONTAL], &[]).is_err());
    let a = landmarks(0.5, 0.0);
    let mut partial = a.clone();
    partial.points.remove("mouth_top");
    assert!(lmd(&[a], &[partial]).is_err());
}
