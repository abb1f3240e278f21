use std::fs;
use std::path::Path;

use daetalker::config::{ExperimentConfig, PoseSpec};
use daetalker::pipeline::{Ablation, Pipeline};
use daetalker::video::read_packed;
use daetalker::Error;

const TINY: &str = r#"
eval_infer_steps = 3
eval_frames = 4

[corpus]
duration_s = 30.0
height = 32
width = 32
feature_dim = 4

[dae]
base_channels = 4
channel_mult = [1, 2]
latent_dim = 8
num_steps = 50
batch_size = 2
train_steps = 4

[s2l]
width = 8
blocks = 1
heads = 2
conv_kernel = 3
ff_mult = 2
pose_channels = 4
max_rel_pos = 8
batch_size = 1
train_steps = 2
eval_every = 1
eval_windows = 2

[inference]
num_infer_steps = 3
duration_s = 1.0

[ablation]
noise_seeds = 2
train_seeds = 1
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

fn mtime(p: &Path) -> std::time::SystemTime {
    fs::metadata(p).unwrap().modified().unwrap()
}

fn frame_bytes(dir: &Path) -> Vec<Vec<u8>> {
    let mut names: Vec<_> = fs::read_dir(dir.join("frames")).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    names.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn stages_chain_skip_and_refuse_stale_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), tmp.path());

    match p.cmd_train_dae() {
        Err(Error::MissingInput(path)) => assert_eq!(path, tmp.path().join("corpus").join("manifest.json")),
        other => panic!("expected missing corpus, got {other:?}"),
    }

    p.cmd_dataset_gen().unwrap();
    let stamp = tmp.path().join("corpus").join("stamp.json");
    let first = mtime(&stamp);
    p.cmd_dataset_gen().unwrap();
    assert_eq!(mtime(&stamp), first);

    let ck = p.cmd_train_dae().unwrap();
    let ck_time = mtime(&ck);
    p.cmd_train_dae().unwrap();
    assert_eq!(mtime(&ck), ck_time);
    assert!(tmp.path().join("dae").join("report.txt").exists());

    assert!(matches!(p.cmd_train_s2l(), Err(Error::MissingInput(_))));
    p.cmd_extract_latents().unwrap();
    p.cmd_train_s2l().unwrap();
    let curve = fs::read_to_string(tmp.path().join("s2l").join("loss_curve.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    // synthesis is a pure function of its inputs
    let a = p.cmd_infer("a").unwrap();
    let first = frame_bytes(&a);
    p.cmd_infer("a").unwrap();
    assert_eq!(frame_bytes(&a), first);
    assert_eq!(first.len(), 25);

    let packed = p.cmd_pack("a").unwrap();
    let (g, fps, frames) = read_packed(&packed).unwrap();
    assert_eq!((g.height, g.width, fps, frames.len()), (32, 32, 25.0, 25));

    p.cmd_export_reference("ref").unwrap();
    let r = p.cmd_eval("ref").unwrap();
    assert_eq!(r.get("psnr"), Some(100.0));
    assert_eq!(r.get("ssim"), Some(1.0));
    assert_eq!(r.get("lmd"), Some(0.0));
    assert_eq!(r.get("lip_lmd"), Some(0.0));
    assert!(tmp.path().join("eval").join("ref").exists());
    let synth = p.cmd_eval("a").unwrap();
    assert!(synth.get("psnr").unwrap() < 100.0);
    assert_eq!(synth.series["psnr"].len(), 25);

    // a different decoder config invalidates everything downstream of the corpus
    let mut changed = tiny();
    changed.dae.lr *= 2.0;
    let stale = Pipeline::new(changed.clone(), tmp.path());
    assert!(matches!(stale.load_dae(), Err(Error::ConfigMismatch { .. })));
    assert!(matches!(stale.cmd_infer("b"), Err(Error::ConfigMismatch { .. })));
    assert!(matches!(stale.cmd_eval("a"), Err(Error::ConfigMismatch { .. })));
    let mut lenient = Pipeline::new(changed, tmp.path());
    lenient.allow_mismatch = true;
    assert!(lenient.cmd_eval("a").is_ok());

    let mut fixed = tiny();
    fixed.inference.pose = PoseSpec::Fixed {
        roll: 0.0,
        pitch: 0.0,
        yaw: 0.0,
    };
    let frontal = Pipeline::new(fixed, tmp.path());
    assert!(matches!(frontal.cmd_eval("a"), Err(Error::ConfigMismatch { .. })));

    let noise = p.cmd_ablate(Ablation::SharedNoise).unwrap();
    for key in [
        "shared.mean_adjacent_l2",
        "independent.mean_adjacent_l2",
        "paired_t_p_value",
        "lip_lmd_relative_difference",
        "seed1.independent.lip_lmd",
    ] {
        assert!(noise.get(key).is_some(), "missing {key}");
    }
    assert!(tmp.path().join("ablate").join("shared_noise").join("shared").join("manifest.json").exists());

    let pose = p.cmd_ablate(Ablation::PoseAdaptor).unwrap();
    assert!(pose.get("ratio_baseline_to_ablated").unwrap() > 0.0);
    assert!(tmp.path().join("ablate").join("runs").join("pose_adaptor-seed0").join("checkpoint.bin").exists());
}

#[test]
fn corpus_window_errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.inference.start_s = 100.0;
    let p = Pipeline::new(cfg, tmp.path());
    p.cmd_dataset_gen().unwrap();
    assert!(matches!(p.cmd_export_reference("x"), Err(Error::InvalidArgument(_))));
    assert!(matches!(p.cmd_eval("missing"), Err(Error::MissingInput(_))));
    let mut short = tiny();
    short.corpus.duration_s = 10.0;
    assert!(Pipeline::new(short, tmp.path().join("short")).cmd_dataset_gen().is_err());
}
