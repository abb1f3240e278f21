use daetalker::avatar::{render_avatar, AvatarParams};
use daetalker::corpus::{generate_corpus, save_corpus, CorpusParams};
use daetalker::raster;

fn params(seed: u64, duration_s: f64) -> CorpusParams {
    CorpusParams {
        duration_s,
        height: 32,
        width: 32,
        feature_dim: 4,
        seed,
        ..CorpusParams::default()
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn aperture_is_the_downsampled_envelope_channel() {
    let c = generate_corpus(&params(1, 60.0)).unwrap();
    let d = c.features.feature_dim();
    let env: Vec<f64> = (0..c.len()).map(|i| c.features.features.data()[i * 2 * d]).collect();
    let ap: Vec<f64> = (0..c.len()).map(|i| c.aperture(i)).collect();
    assert!((pearson(&env, &ap) - 1.0).abs() < 1e-6);
}

#[test]
fn frame_i_is_rendered_from_feature_rows_of_its_window() {
    let c = generate_corpus(&params(2, 30.0)).unwrap();
    let d = c.features.feature_dim();
    for i in [0, 1, 17, c.len() - 1] {
        let rows = c.feature_range(i..i + 1);
        assert_eq!(rows, 2 * i..2 * i + 2);
        let p = AvatarParams {
            aperture: c.features.features.data()[rows.start * d],
            pose: c.poses[i],
            identity_seed: c.params.identity_seed,
        };
        let (img, lm) = render_avatar::<f64>(&p, c.geometry()).unwrap();
        assert_eq!(raster::quantize(&img).unwrap(), c.frames[i]);
        assert_eq!(lm, c.landmarks[i]);
    }
}

#[test]
fn yaw_is_uncorrelated_with_envelope_over_ten_minutes() {
    for seed in 0..5 {
        let c = generate_corpus(&params(seed, 600.0)).unwrap();
        let yaw: Vec<f64> = c.poses.iter().map(|p| p.yaw).collect();
        let ap: Vec<f64> = (0..c.len()).map(|i| c.aperture(i)).collect();
        let r = pearson(&yaw, &ap);
        assert!(r.abs() < 0.2, "seed {seed}: correlation {r}");
    }
}

#[test]
fn same_seed_gives_identical_corpus_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_corpus(&generate_corpus(&params(4, 30.0)).unwrap(), a.path()).unwrap();
    save_corpus(&generate_corpus(&params(4, 30.0)).unwrap(), b.path()).unwrap();
    let mut files: Vec<_> = walk(a.path());
    files.sort();
    assert!(files.len() > 750);
    for rel in files {
        assert_eq!(
            std::fs::read(a.path().join(&rel)).unwrap(),
            std::fs::read(b.path().join(&rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
}

fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out
}
