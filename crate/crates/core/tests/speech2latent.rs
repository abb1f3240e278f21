use daetalker::avatar::PoseVector;
use daetalker::checkpoint::Checkpoint;
use daetalker::corpus::AcousticFeatureSequence;
use daetalker::metrics::jump_ratio;
use daetalker::nn::gradcheck::check_gradients;
use daetalker::nn::Graph;
use daetalker::speech2latent::{
    evaluation_windows, fixed_segments, sample_span, S2lConfig, Speech2LatentModel, MAX_SENTENCE_S, MIN_SENTENCE_S,
};
use daetalker::stats::{ks_test, uniform_cdf};
use daetalker::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FPS: f64 = 25.0;

fn narrow() -> S2lConfig {
    S2lConfig {
        feature_dim: 4,
        latent_dim: 3,
        width: 16,
        blocks: 1,
        heads: 2,
        conv_kernel: 3,
        ff_mult: 2,
        pose_channels: 8,
        max_rel_pos: 8,
        ..S2lConfig::default()
    }
}

fn smooth_features(frames: usize, dim: usize) -> AcousticFeatureSequence<f64> {
    let n = frames * 2;
    let data = (0..n)
        .flat_map(|i| (0..dim).map(move |k| (i as f64 * 0.05 * (k + 1) as f64).sin()))
        .collect();
    AcousticFeatureSequence::new(Tensor::from_vec(&[n, dim], data).unwrap(), 50.0).unwrap()
}

#[test]
fn gradients_match_finite_differences() {
    let mut model = Speech2LatentModel::<f64>::new(narrow()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feats = AcousticFeatureSequence::new(Tensor::randn(&[12, 4], &mut rng), 50.0).unwrap();
    let target = Tensor::<f64>::randn(&[6, 3], &mut rng);
    let pose_target = Tensor::<f64>::randn(&[6, 3], &mut rng).map(|v| 0.3 * v);
    let loss_of = |m: &Speech2LatentModel<f64>, g: &mut Graph<f64>| {
        let out = m.forward_graph(g, &feats, None, None).unwrap();
        let t = g.constant(target.clone());
        let l = g.mse_loss(out.latents, t);
        let tp = g.constant(pose_target.clone());
        let p = g.mse_loss(out.poses.unwrap(), tp);
        g.add(l, p)
    };
    let mut g = Graph::new();
    let loss = loss_of(&model, &mut g);
    let grads = g.backward(loss, model.params.len());
    let probe = model.clone();
    let report = check_gradients(
        &mut model.params,
        &grads,
        |store| {
            let mut m = probe.clone();
            m.params = store.clone();
            let mut g = Graph::inference();
            let l = loss_of(&m, &mut g);
            g.value(l).data()[0]
        },
        20,
        1e-6,
        1e-6,
        &mut rng,
    );
    assert!(report.max_rel_error() <= 1e-3, "{:#?}", report.entries);
}

#[test]
fn sentence_durations_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let span = 0..100_000;
    let durations: Vec<f64> = (0..10_000)
        .map(|_| sample_span(span.clone(), FPS, &mut rng).unwrap().len() as f64 / FPS)
        .collect();
    let r = ks_test(&durations, uniform_cdf(MIN_SENTENCE_S, MAX_SENTENCE_S)).unwrap();
    assert!(r.p_value >= 0.01, "KS p = {}", r.p_value);
}

#[test]
fn exactly_minimum_span_is_taken_whole() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        assert_eq!(sample_span(40..165, FPS, &mut rng).unwrap(), 40..165);
    }
    assert!(sample_span(0..124, FPS, &mut rng).is_err());
}

#[test]
fn fixed_segments_tile_the_span() {
    let segs = fixed_segments(0..1300, FPS, 20.0);
    assert_eq!(segs, vec![0..500, 500..1000, 1000..1300]);
    // a trailing piece under five seconds is dropped
    assert_eq!(fixed_segments(0..1100, FPS, 20.0), vec![0..500, 500..1000]);
    let w = evaluation_windows(1000..3000, FPS, 6).unwrap();
    assert_eq!(w, evaluation_windows(1000..3000, FPS, 6).unwrap());
    assert!(w.iter().all(|r| r.start >= 1000 && r.end <= 3000));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn sampled_span_respects_bounds(start in 0usize..1000, len in 125usize..2000, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_span(start..start + len, FPS, &mut rng).unwrap();
        prop_assert!(s.start >= start && s.end <= start + len);
        prop_assert!(s.len() >= 125.min(len) && s.len() <= 500.min(len));
    }

    #[test]
    fn output_length_follows_input(frames in 1usize..40) {
        let model = Speech2LatentModel::<f64>::new(narrow()).unwrap();
        let feats = smooth_features(frames, 4);
        let (lat, poses) = model.predict(&feats, None).unwrap();
        prop_assert_eq!(lat.shape(), &[frames, 3][..]);
        prop_assert_eq!(poses.unwrap().len(), frames);
    }
}

#[test]
fn predictions_vary_smoothly_with_smooth_input() {
    let model = Speech2LatentModel::<f64>::new(narrow()).unwrap();
    // a slow straight-line path through feature space
    let data = (0..160).flat_map(|i| (0..4).map(move |k| -0.5 + i as f64 * 0.004 * (k + 1) as f64)).collect();
    let feats = AcousticFeatureSequence::new(Tensor::from_vec(&[160, 4], data).unwrap(), 50.0).unwrap();
    let (lat, _) = model.predict(&feats, None).unwrap();
    let d: Vec<f64> = (1..80)
        .map(|i| {
            (0..3)
                .map(|k| (lat.data()[i * 3 + k] - lat.data()[(i - 1) * 3 + k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    // frames within reach of the zero padding see the sequence edge, not the input
    let edge = 4;
    let r = jump_ratio(&d[edge..d.len() - edge]).unwrap();
    assert!(r < 5.0, "max/median adjacent distance {r}");
}

#[test]
fn given_pose_changes_output_and_length_is_checked() {
    let model = Speech2LatentModel::<f64>::new(narrow()).unwrap();
    let feats = smooth_features(10, 4);
    let (a, _) = model.predict(&feats, Some(&vec![PoseVector::FRONTAL; 10])).unwrap();
    let (b, _) = model.predict(&feats, Some(&vec![PoseVector::new(0.0, 0.0, 30.0); 10])).unwrap();
    assert!(a.l2_distance(&b).unwrap() > 0.0);
    assert!(model.predict(&feats, Some(&vec![PoseVector::FRONTAL; 9])).is_err());
    let short = AcousticFeatureSequence::new(Tensor::<f64>::zeros(&[1, 4]), 50.0).unwrap();
    assert!(model.predict(&short, None).is_err());
    let off_rate = AcousticFeatureSequence::new(Tensor::<f64>::zeros(&[8, 4]), 100.0).unwrap();
    assert!(model.predict(&off_rate, None).is_err());

    let plain = Speech2LatentModel::<f64>::new(S2lConfig {
        pose_adaptor: false,
        ..narrow()
    })
    .unwrap();
    assert!(plain.predict(&feats, None).unwrap().1.is_none());
    assert!(plain.params.num_elements() < model.params.num_elements());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let mut model = Speech2LatentModel::<f32>::new(narrow()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let id = model.params.iter().next().unwrap().0;
    for v in model.params.get_mut(id).data_mut() {
        *v += rng.random::<f32>();
    }
    let ck = model.to_checkpoint(serde_json::json!({}));
    let back = Speech2LatentModel::<f32>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    let feats = smooth_features(12, 4).cast::<f32>();
    assert_eq!(model.predict(&feats, None).unwrap(), back.predict(&feats, None).unwrap());
}
