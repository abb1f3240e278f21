//! Stage orchestration behind the command-line tool. Each stage writes its
//! artifacts under the output root together with a `stamp.json` recording
//! the hash of the configuration that produced them; a stage whose stamp
//! matches is not recomputed.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avatar::{extract_landmarks, extract_pose, Identity, LandmarkSet, PoseVector};
use crate::checkpoint::{file_hash, sha256_hex, Checkpoint};
use crate::config::{ExperimentConfig, PoseSpec};
use crate::corpus::{self, generate_corpus, AcousticFeatureSequence, AlignedCorpus};
use crate::dae::{dae_train_step, DaeModel, LatentStats, TrainState};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::raster;
use crate::speech2latent::{s2l_train, AlignedStreams, LossCurve, S2lConfig, Segmentation, Speech2LatentModel};
use crate::stats::paired_t_less;
use crate::tensor::Tensor;
use crate::video::{
    self, decode_frames, start_noise, synthesize, NoiseMode, NoiseSource, PoseMode, SynthesisRequest, VideoManifest,
};

/// Scalar type of every model the pipeline trains.
pub type Real = f32;

/// Seed of the `x_T` tensors used for reconstruction metrics.
pub const RECON_NOISE_SEED: u64 = 0x7265_636f;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    SharedNoise,
    DataAug,
    PoseAdaptor,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::SharedNoise => "shared_noise",
            Ablation::DataAug => "data_aug",
            Ablation::PoseAdaptor => "pose_adaptor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared_noise" => Ok(Ablation::SharedNoise),
            "data_aug" => Ok(Ablation::DataAug),
            "pose_adaptor" => Ok(Ablation::PoseAdaptor),
            _ => Err(Error::invalid(format!(
                "unknown ablation {s:?} (expected shared_noise, data_aug or pose_adaptor)"
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    stage_hash: String,
    config_hash: String,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub root: PathBuf,
    /// Accept artifacts produced under a different configuration.
    pub allow_mismatch: bool,
}

/// Frames of the held-out split used for reconstruction metrics, evenly spaced.
pub fn evaluation_frames(heldout: &Range<usize>, count: usize) -> Vec<usize> {
    let n = heldout.len();
    let count = count.min(n);
    (0..count).map(|k| heldout.start + k * n / count).collect()
}

/// Pixel-wise mean of the frames in `range`.
pub fn mean_image(corpus: &AlignedCorpus, range: Range<usize>) -> Tensor<f64> {
    let g = corpus.geometry();
    let mut acc = vec![0.0; g.num_values()];
    let n = range.len() as f64;
    for i in range {
        for (a, v) in acc.iter_mut().zip(corpus.frame::<f64>(i).data()) {
            *a += v / n;
        }
    }
    Tensor::from_vec(&g.shape(), acc).expect("geometry")
}

/// Mean PSNR of the training-split mean image against `frames`.
pub fn mean_image_psnr(corpus: &AlignedCorpus, frames: &[usize]) -> Result<f64> {
    let m = mean_image(corpus, corpus.split.train.clone());
    let mut total = 0.0;
    for &i in frames {
        total += metrics::psnr(&m, &corpus.frame::<f64>(i))?;
    }
    Ok(total / frames.len() as f64)
}

/// Mean PSNR and SSIM of reconstructions of `frames`, each decoded from its own fixed `x_T`.
pub fn reconstruction_quality(
    model: &DaeModel<Real>,
    corpus: &AlignedCorpus,
    frames: &[usize],
    num_infer_steps: usize,
) -> Result<(f64, f64)> {
    let images: Vec<Tensor<Real>> = frames.iter().map(|&i| corpus.frame(i)).collect();
    let mut latents = Vec::new();
    for chunk in images.chunks(32) {
        latents.extend_from_slice(model.encode_batch(&Tensor::stack(chunk)?)?.data());
    }
    let latents = Tensor::from_vec(&[frames.len(), model.latent_dim()], latents)?;
    let source = NoiseSource::new(RECON_NOISE_SEED, &model.geometry().shape());
    let noise = start_noise(&source, NoiseMode::Independent, frames.len());
    let out = decode_frames(model, &latents, &noise, num_infer_steps, None)?;
    let (mut p, mut s) = (0.0, 0.0);
    for (r, f) in out.iter().zip(&images) {
        p += metrics::psnr(r, f)?;
        s += metrics::ssim(r, f)?;
    }
    let n = frames.len() as f64;
    Ok((p / n, s / n))
}

/// Trains on uniformly drawn training-split batches; `hook` sees every step.
pub fn train_dae(
    model: &mut DaeModel<Real>,
    corpus: &AlignedCorpus,
    steps: usize,
    mut hook: impl FnMut(usize, f64, &DaeModel<Real>) -> Result<()>,
) -> Result<TrainState<Real>> {
    let seed = model.config.seed;
    let mut state = TrainState::new(model, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c_0000);
    let train = corpus.split.train.clone();
    for _ in 0..steps {
        let frames: Vec<Tensor<Real>> = (0..model.config.batch_size)
            .map(|_| corpus.frame(rng.random_range(train.clone())))
            .collect();
        let loss = dae_train_step(model, &mut state, &Tensor::stack(&frames)?)?;
        hook(state.step, loss, model)?;
    }
    Ok(state)
}

/// Raw latents `[n, latent_dim]` of every corpus frame.
pub fn encode_corpus(model: &DaeModel<Real>, corpus: &AlignedCorpus) -> Result<Tensor<f64>> {
    let d = model.latent_dim();
    let mut out = Vec::with_capacity(corpus.len() * d);
    let idx: Vec<usize> = (0..corpus.len()).collect();
    for chunk in idx.chunks(64) {
        let frames: Vec<Tensor<Real>> = chunk.iter().map(|&i| corpus.frame(i)).collect();
        out.extend(model.encode_batch(&Tensor::stack(&frames)?)?.data().iter().map(|&v| v as f64));
    }
    Tensor::from_vec(&[corpus.len(), d], out)
}

/// Trains one speech2latent model on the corpus split.
pub fn train_s2l_model(
    config: &S2lConfig,
    corpus: &AlignedCorpus,
    standardized: &Tensor<f64>,
) -> Result<(Speech2LatentModel<Real>, LossCurve)> {
    let mut model = Speech2LatentModel::new(config.clone())?;
    let streams = AlignedStreams {
        features: &corpus.features,
        latents: standardized,
        poses: &corpus.poses,
        fps: corpus.params.fps,
    };
    let curve = s2l_train(&mut model, &streams, corpus.split.train.clone(), corpus.split.heldout.clone())?;
    Ok((model, curve))
}

/// Metrics of generated `frames` against the corpus from `start` onwards.
/// `conditioned` holds the poses the generator was asked for, when known.
pub fn evaluate_frames(
    frames: &[Tensor<f64>],
    corpus: &AlignedCorpus,
    start: usize,
    conditioned: Option<&[PoseVector]>,
) -> Result<MetricReport> {
    let n = frames.len();
    if n == 0 || start + n > corpus.len() {
        return Err(Error::invalid(format!(
            "{n} frames from {start} do not fit the {}-frame corpus",
            corpus.len()
        )));
    }
    let identity: Identity = corpus.identity();
    let mut report = MetricReport::new();
    let truth: Vec<Tensor<f64>> = (start..start + n).map(|i| corpus.frame(i)).collect();
    // both sides go through the same detector, as with real footage
    let gt_landmarks: Vec<LandmarkSet> = truth.iter().map(|t| extract_landmarks(t, &identity)).collect::<Result<_>>()?;
    let gt_landmarks = &gt_landmarks[..];
    let gt_poses: &[PoseVector] = &corpus.poses[start..start + n];
    let mut psnr = Vec::with_capacity(n);
    let mut ssim = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    let mut landmarks = Vec::with_capacity(n);
    for (f, t) in frames.iter().zip(&truth) {
        psnr.push(metrics::psnr(f, t)?);
        ssim.push(metrics::ssim(f, t)?);
        poses.push(extract_pose(f, &identity)?);
        landmarks.push(extract_landmarks(f, &identity)?);
    }
    let per_frame_lmd: Vec<f64> = landmarks
        .iter()
        .zip(gt_landmarks)
        .map(|(p, t)| metrics::lmd(std::slice::from_ref(p), std::slice::from_ref(t)))
        .collect::<Result<_>>()?;
    let per_frame_pose: Vec<f64> = poses
        .iter()
        .zip(gt_poses)
        .map(|(p, t)| metrics::pose_error(std::slice::from_ref(p), std::slice::from_ref(t)))
        .collect::<Result<_>>()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    report.set("psnr", mean(&psnr))?;
    report.set("ssim", mean(&ssim))?;
    report.set("lmd", metrics::lmd(&landmarks, gt_landmarks)?)?;
    report.set("lip_lmd", metrics::lip_lmd(&landmarks, gt_landmarks)?)?;
    report.set("pose_error", metrics::pose_error(&poses, gt_poses)?)?;
    if let Some(c) = conditioned {
        report.set("pose_error_specified", metrics::pose_error(&poses, c)?)?;
    }
    for (axis, k) in [("roll", 0), ("pitch", 1), ("yaw", 2)] {
        report.set(&format!("mean_abs_{axis}"), mean(&poses.iter().map(|p| p.to_array()[k].abs()).collect::<Vec<_>>()))?;
    }
    let adjacent = metrics::adjacent_distances(frames)?;
    if !adjacent.is_empty() {
        report.set("mean_adjacent_l2", mean(&adjacent))?;
        if let Some(r) = metrics::jump_ratio(&adjacent) {
            if r.is_finite() {
                report.set("adjacent_jump_ratio", r)?;
            }
        }
    }
    report.set("num_frames", n as f64)?;
    report.meta.insert("pose_error_unit".into(), "deg^2".into());
    report.meta.insert("start_frame".into(), start.to_string());
    report.set_series("psnr", psnr)?;
    report.set_series("ssim", ssim)?;
    report.set_series("lmd", per_frame_lmd)?;
    report.set_series("pose_error", per_frame_pose)?;
    report.set_series(
        "adjacent_l2",
        std::iter::once(f64::NAN).chain(adjacent).collect(),
    )?;
    Ok(report)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn poses_tsv(poses: &[PoseVector]) -> String {
    let mut text = String::from("frame\troll\tpitch\tyaw\n");
    for (i, p) in poses.iter().enumerate() {
        writeln!(text, "{i}\t{}\t{}\t{}", p.roll, p.pitch, p.yaw).expect("string write");
    }
    text
}

/// Inputs of one synthesis run after resolving the configuration.
struct InferenceInputs {
    feats: AcousticFeatureSequence<Real>,
    pose_mode: PoseMode,
    start_frame: Option<usize>,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, root: impl Into<PathBuf>) -> Self {
        Self {
            config,
            root: root.into(),
            allow_mismatch: false,
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn dae_dir(&self) -> PathBuf {
        self.root.join("dae")
    }

    pub fn dae_checkpoint(&self) -> PathBuf {
        self.dae_dir().join("checkpoint.bin")
    }

    pub fn latents_path(&self) -> PathBuf {
        self.root.join("latents").join("latents.bin")
    }

    pub fn s2l_dir(&self) -> PathBuf {
        self.root.join("s2l")
    }

    pub fn video_dir(&self, name: &str) -> PathBuf {
        video::video_dir(&self.root, name)
    }

    pub fn eval_dir(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }

    pub fn ablation_dir(&self, which: Ablation) -> PathBuf {
        self.root.join("ablate").join(which.name())
    }

    fn stamp_matches(dir: &Path, stage_hash: &str) -> bool {
        fs::read_to_string(dir.join("stamp.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<Stamp>(&t).ok())
            .is_some_and(|s| s.stage_hash == stage_hash)
    }

    fn write_stamp(&self, dir: &Path, stage: &str, stage_hash: &str) -> Result<()> {
        let stamp = Stamp {
            stage: stage.into(),
            stage_hash: stage_hash.into(),
            config_hash: self.config.hash(),
        };
        write_text(&dir.join("stamp.json"), &serde_json::to_string_pretty(&stamp).expect("stamp"))
    }

    /// Verifies that `dir` holds artifacts of `stage` made under `expected`.
    fn require(&self, dir: &Path, artifact: &Path, expected: &str) -> Result<()> {
        if !artifact.exists() {
            return Err(Error::MissingInput(artifact.to_path_buf()));
        }
        let path = dir.join("stamp.json");
        let text = fs::read_to_string(&path).map_err(|_| Error::MissingInput(path.clone()))?;
        let stamp: Stamp = serde_json::from_str(&text).map_err(|e| Error::format("stamp", e.to_string()))?;
        if stamp.stage_hash != expected {
            if self.allow_mismatch {
                warn!("{}: made under {}, current config gives {expected}", dir.display(), stamp.stage_hash);
            } else {
                return Err(Error::ConfigMismatch {
                    expected: expected.into(),
                    found: format!("{} in {}", stamp.stage_hash, path.display()),
                });
            }
        }
        Ok(())
    }

    pub fn cmd_dataset_gen(&self) -> Result<PathBuf> {
        let dir = self.corpus_dir();
        let hash = self.config.corpus_hash();
        if Self::stamp_matches(&dir, &hash) {
            info!("corpus up to date in {}", dir.display());
            return Ok(dir);
        }
        let corpus = generate_corpus(&self.config.corpus)?;
        corpus::save_corpus(&corpus, &dir)?;
        self.write_stamp(&dir, "corpus", &hash)?;
        info!("wrote {} frames to {}", corpus.len(), dir.display());
        Ok(dir)
    }

    pub fn load_corpus(&self) -> Result<AlignedCorpus> {
        let dir = self.corpus_dir();
        self.require(&dir, &dir.join("manifest.json"), &self.config.corpus_hash())?;
        corpus::load_corpus(&dir)
    }

    pub fn cmd_train_dae(&self) -> Result<PathBuf> {
        let dir = self.dae_dir();
        let hash = self.config.dae_hash();
        let path = self.dae_checkpoint();
        if Self::stamp_matches(&dir, &hash) && path.exists() {
            info!("dae checkpoint up to date at {}", path.display());
            return Ok(path);
        }
        let corpus = self.load_corpus()?;
        let mut model = DaeModel::<Real>::new(self.config.dae_config())?;
        let steps = self.config.dae.train_steps;
        let mut window = 0.0;
        let state = train_dae(&mut model, &corpus, steps, |step, loss, _| {
            window += loss;
            if step % 100 == 0 || step == steps {
                info!("dae step {step}/{steps}: loss {:.5}", window / (1 + (step - 1) % 100) as f64);
                window = 0.0;
            }
            Ok(())
        })?;
        let mut loss_text = String::from("step\tloss\n");
        for (s, l) in &state.loss_history {
            writeln!(loss_text, "{s}\t{l}").expect("string write");
        }
        write_text(&dir.join("loss.tsv"), &loss_text)?;

        let latents = encode_corpus(&model, &corpus)?;
        let stats = LatentStats::from_latents(&latents)?;
        let mut ck = model.to_checkpoint(serde_json::json!({
            "config_hash": self.config.hash(),
            "stage_hash": hash,
        }));
        ck.insert("stats.mean", &Tensor::from_vec(&[stats.mean.len()], stats.mean.clone())?);
        ck.insert("stats.std", &Tensor::from_vec(&[stats.std.len()], stats.std.clone())?);
        ck.save(&path)?;

        let frames = evaluation_frames(&corpus.split.heldout, self.config.eval_frames);
        let (p, s) = reconstruction_quality(&model, &corpus, &frames, self.config.eval_infer_steps)?;
        let floor = mean_image_psnr(&corpus, &frames)?;
        let mut report = MetricReport::new();
        report.set("recon_psnr", p)?;
        report.set("recon_ssim", s)?;
        report.set("mean_image_psnr", floor)?;
        report.set("recon_psnr_margin", p - floor)?;
        report.meta.insert("config_hash".into(), self.config.hash());
        report.meta.insert("checkpoint".into(), file_hash(&path)?);
        report.write(&dir)?;
        info!("dae reconstruction: psnr {p:.2} dB (mean image {floor:.2} dB), ssim {s:.3}");
        self.write_stamp(&dir, "dae", &hash)?;
        Ok(path)
    }

    /// Trained decoder with its latent statistics.
    pub fn load_dae(&self) -> Result<(DaeModel<Real>, LatentStats)> {
        let path = self.dae_checkpoint();
        self.require(&self.dae_dir(), &path, &self.config.dae_hash())?;
        let ck = Checkpoint::load(&path)?;
        let model = DaeModel::from_checkpoint(&ck)?;
        let stats = LatentStats {
            mean: ck.tensor::<f64>("stats.mean")?.into_data(),
            std: ck.tensor::<f64>("stats.std")?.into_data(),
        };
        Ok((model, stats))
    }

    pub fn cmd_extract_latents(&self) -> Result<PathBuf> {
        let path = self.latents_path();
        let dir = path.parent().expect("nested").to_path_buf();
        let hash = self.config.dae_hash();
        if Self::stamp_matches(&dir, &hash) && path.exists() {
            info!("latents up to date at {}", path.display());
            return Ok(path);
        }
        let (model, _) = self.load_dae()?;
        let corpus = self.load_corpus()?;
        let latents = encode_corpus(&model, &corpus)?;
        let stats = LatentStats::from_latents(&latents)?;
        let mut ck = Checkpoint::new(&serde_json::json!({
            "kind": "latents",
            "config_hash": self.config.hash(),
            "stage_hash": hash,
            "dae_checkpoint": file_hash(&self.dae_checkpoint())?,
        }));
        ck.insert("latents", &latents);
        ck.insert("stats.mean", &Tensor::from_vec(&[stats.mean.len()], stats.mean.clone())?);
        ck.insert("stats.std", &Tensor::from_vec(&[stats.std.len()], stats.std.clone())?);
        ck.save(&path)?;
        self.write_stamp(&dir, "latents", &hash)?;
        info!("extracted {} latents to {}", corpus.len(), path.display());
        Ok(path)
    }

    /// Raw corpus latents and their statistics.
    pub fn load_latents(&self) -> Result<(Tensor<f64>, LatentStats)> {
        let path = self.latents_path();
        self.require(path.parent().expect("nested"), &path, &self.config.dae_hash())?;
        let ck = Checkpoint::load(&path)?;
        let stats = LatentStats {
            mean: ck.tensor::<f64>("stats.mean")?.into_data(),
            std: ck.tensor::<f64>("stats.std")?.into_data(),
        };
        Ok((ck.tensor("latents")?, stats))
    }

    fn s2l_run_hash(&self, config: &S2lConfig) -> String {
        sha256_hex(serde_json::json!({ "dae": self.config.dae_hash(), "s2l": config }).to_string().as_bytes())[..16]
            .to_string()
    }

    /// Trains (or reloads) a speech2latent model for `config` in `dir`.
    fn train_s2l_in(&self, config: &S2lConfig, dir: &Path) -> Result<(Speech2LatentModel<Real>, LossCurve)> {
        let hash = self.s2l_run_hash(config);
        let ck_path = dir.join("checkpoint.bin");
        let curve_path = dir.join("loss_curve.tsv");
        if Self::stamp_matches(dir, &hash) && ck_path.exists() && curve_path.exists() {
            let model = Speech2LatentModel::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
            let text = fs::read_to_string(&curve_path).map_err(|e| Error::io(&curve_path, e))?;
            return Ok((model, LossCurve::from_tsv(&curve_path, &text)?));
        }
        let corpus = self.load_corpus()?;
        let (latents, stats) = self.load_latents()?;
        let standardized = stats.standardize(&latents);
        info!(
            "training speech2latent in {} (pose adaptor {}, {:?}, seed {})",
            dir.display(),
            config.pose_adaptor,
            config.segmentation,
            config.seed
        );
        let (model, curve) = train_s2l_model(config, &corpus, &standardized)?;
        if let Some(last) = curve.last() {
            info!("final held-out latent mse {:.5}", last.heldout_latent_mse);
        }
        model
            .to_checkpoint(serde_json::json!({ "config_hash": self.config.hash(), "stage_hash": hash }))
            .save(&ck_path)?;
        write_text(&curve_path, &curve.to_tsv())?;
        self.write_stamp(dir, "s2l", &hash)?;
        Ok((model, curve))
    }

    pub fn cmd_train_s2l(&self) -> Result<PathBuf> {
        let dir = self.s2l_dir();
        self.train_s2l_in(&self.config.s2l_config(), &dir)?;
        Ok(dir.join("checkpoint.bin"))
    }

    pub fn load_s2l(&self) -> Result<Speech2LatentModel<Real>> {
        let dir = self.s2l_dir();
        let path = dir.join("checkpoint.bin");
        self.require(&dir, &path, &self.s2l_run_hash(&self.config.s2l_config()))?;
        Speech2LatentModel::from_checkpoint(&Checkpoint::load(&path)?)
    }

    /// Corpus frames covered by the configured inference window.
    pub fn inference_window(&self, corpus: &AlignedCorpus) -> Result<Range<usize>> {
        let inf = &self.config.inference;
        let fps = corpus.params.fps;
        let held = corpus.split.heldout.clone();
        let start = held.start + (inf.start_s * fps).round() as usize;
        let end = (start + (inf.duration_s * fps).round() as usize).min(held.end);
        if start >= end {
            return Err(Error::invalid(format!(
                "inference window {}s + {}s lies outside the {}-frame held-out split",
                inf.start_s,
                inf.duration_s,
                held.len()
            )));
        }
        Ok(start..end)
    }

    fn inference_inputs(&self, corpus: &AlignedCorpus, pose: &PoseSpec) -> Result<InferenceInputs> {
        let stride = corpus.stride();
        let (feats, start_frame) = match &self.config.inference.features {
            Some(path) => {
                if !path.exists() {
                    return Err(Error::MissingInput(path.clone()));
                }
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let d = corpus.features.feature_dim();
                let rows = corpus::parse_tsv(path, &text, d)?;
                let n = rows.len();
                let t = Tensor::from_vec(&[n, d], rows.into_iter().flatten().collect())?;
                (AcousticFeatureSequence::new(t, corpus.params.feature_rate_hz)?, None)
            }
            None => {
                let w = self.inference_window(corpus)?;
                (corpus.features.slice(corpus.feature_range(w.clone()))?, Some(w.start))
            }
        };
        let n = feats.len() / stride;
        let pose_mode = match pose {
            PoseSpec::Natural => PoseMode::Natural,
            PoseSpec::Fixed { roll, pitch, yaw } => PoseMode::Fixed {
                pose: PoseVector::new(*roll, *pitch, *yaw),
            },
            PoseSpec::Trajectory { path } => PoseMode::Trajectory {
                poses: video::load_trajectory(path)?,
            },
            PoseSpec::Reference => {
                let start = start_frame.ok_or_else(|| {
                    Error::invalid("reference poses need the held-out window, not external features")
                })?;
                PoseMode::Trajectory {
                    poses: corpus.poses[start..start + n].to_vec(),
                }
            }
        };
        Ok(InferenceInputs {
            feats: feats.cast(),
            pose_mode,
            start_frame,
        })
    }

    fn checkpoint_hashes(&self) -> Result<std::collections::BTreeMap<String, String>> {
        Ok([
            ("dae".to_string(), file_hash(&self.dae_checkpoint())?),
            ("s2l".to_string(), file_hash(&self.s2l_dir().join("checkpoint.bin"))?),
        ]
        .into())
    }

    /// Synthesizes the configured request into `videos/<name>`.
    pub fn cmd_infer(&self, name: &str) -> Result<PathBuf> {
        let inf = &self.config.inference;
        self.synthesize_video(name, &inf.pose, inf.noise_mode, inf.noise_seed, None)
    }

    fn synthesize_video(
        &self,
        name: &str,
        pose: &PoseSpec,
        noise_mode: NoiseMode,
        noise_seed: u64,
        dir: Option<PathBuf>,
    ) -> Result<PathBuf> {
        let (dae, stats) = self.load_dae()?;
        let s2l = self.load_s2l()?;
        let corpus = self.load_corpus()?;
        let inputs = self.inference_inputs(&corpus, pose)?;
        let req = SynthesisRequest {
            feats: inputs.feats,
            pose_mode: inputs.pose_mode.clone(),
            noise_mode,
            noise_seed,
            num_infer_steps: self.config.inference.num_infer_steps,
        };
        let out = synthesize(&req, &s2l, &dae, &stats)?;
        let g = dae.geometry();
        let manifest = VideoManifest {
            source: "synthesized".into(),
            fps: out.frames.fps,
            num_frames: out.frames.len(),
            height: g.height,
            width: g.width,
            start_frame: inputs.start_frame,
            noise_mode,
            noise_seed,
            pose_mode: inputs.pose_mode,
            num_infer_steps: req.num_infer_steps,
            checkpoints: self.checkpoint_hashes()?,
            config_hash: self.config.hash(),
        };
        let dir = dir.unwrap_or_else(|| self.video_dir(name));
        video::write_video(&dir, &out.frames.frames, &manifest)?;
        write_text(&dir.join("poses.tsv"), &poses_tsv(&out.poses))?;
        info!("wrote {} frames to {}", out.frames.len(), dir.display());
        Ok(dir)
    }

    /// Writes the ground-truth frames of the inference window as a video.
    pub fn cmd_export_reference(&self, name: &str) -> Result<PathBuf> {
        let corpus = self.load_corpus()?;
        let w = self.inference_window(&corpus)?;
        let frames: Vec<Tensor<f64>> = w.clone().map(|i| corpus.frame(i)).collect();
        let g = corpus.geometry();
        let poses = corpus.poses[w.clone()].to_vec();
        let manifest = VideoManifest {
            source: "reference".into(),
            fps: corpus.params.fps,
            num_frames: frames.len(),
            height: g.height,
            width: g.width,
            start_frame: Some(w.start),
            noise_mode: NoiseMode::Shared,
            noise_seed: 0,
            pose_mode: PoseMode::Trajectory { poses: poses.clone() },
            num_infer_steps: 0,
            checkpoints: Default::default(),
            config_hash: self.config.hash(),
        };
        let dir = self.video_dir(name);
        video::write_video(&dir, &frames, &manifest)?;
        write_text(&dir.join("poses.tsv"), &poses_tsv(&poses))?;
        Ok(dir)
    }

    /// Writes `videos/<name>.bin` in the packed single-file format.
    pub fn cmd_pack(&self, name: &str) -> Result<PathBuf> {
        let dir = self.video_dir(name);
        let (m, frames) = video::read_video_frames(&dir)?;
        let path = dir.with_extension("bin");
        video::write_packed(&path, &frames, crate::avatar::Geometry::rgb(m.height, m.width), m.fps)?;
        Ok(path)
    }

    /// Evaluates `videos/<name>` against the corpus into `eval/<name>`.
    pub fn cmd_eval(&self, name: &str) -> Result<MetricReport> {
        let dir = self.video_dir(name);
        let (manifest, rgb) = video::read_video_frames(&dir)?;
        let hash = self.config.hash();
        if manifest.config_hash != hash {
            if self.allow_mismatch {
                warn!("{} was made under config {}, evaluating under {hash}", dir.display(), manifest.config_hash);
            } else {
                return Err(Error::ConfigMismatch {
                    expected: hash,
                    found: format!("{} in {}", manifest.config_hash, dir.join("manifest.json").display()),
                });
            }
        }
        let start = manifest
            .start_frame
            .ok_or_else(|| Error::invalid(format!("{} is not aligned to the corpus", dir.display())))?;
        let corpus = self.load_corpus()?;
        let g = corpus.geometry();
        let frames: Vec<Tensor<f64>> = rgb.iter().map(|f| raster::dequantize(f, g)).collect::<Result<_>>()?;
        let conditioned = match &manifest.pose_mode {
            PoseMode::Natural => None,
            PoseMode::Fixed { pose } => Some(vec![*pose; frames.len()]),
            PoseMode::Trajectory { poses } => Some(poses.clone()),
        };
        let mut report = evaluate_frames(&frames, &corpus, start, conditioned.as_deref())?;
        report.meta.insert("config_hash".into(), hash);
        report.meta.insert("video".into(), dir.display().to_string());
        report.meta.insert("video_source".into(), manifest.source.clone());
        report.meta.insert("corpus_seed".into(), corpus.params.seed.to_string());
        for (role, h) in &manifest.checkpoints {
            report.meta.insert(format!("checkpoint.{role}"), h.clone());
        }
        report.write(&self.eval_dir(name))?;
        Ok(report)
    }

    pub fn cmd_ablate(&self, which: Ablation) -> Result<MetricReport> {
        let mut report = match which {
            Ablation::SharedNoise => self.ablate_shared_noise()?,
            Ablation::DataAug => self.ablate_s2l(which, |c| c.segmentation = Segmentation::Fixed)?,
            Ablation::PoseAdaptor => self.ablate_s2l(which, |c| c.pose_adaptor = false)?,
        };
        report.meta.insert("config_hash".into(), self.config.hash());
        report.meta.insert("ablation".into(), which.name().into());
        report.write(&self.ablation_dir(which))?;
        Ok(report)
    }

    fn ablate_shared_noise(&self) -> Result<MetricReport> {
        let (dae, stats) = self.load_dae()?;
        let s2l = self.load_s2l()?;
        let corpus = self.load_corpus()?;
        let inputs = self.inference_inputs(&corpus, &self.config.inference.pose)?;
        let mut report = MetricReport::new();
        let (mut shared, mut independent) = (Vec::new(), Vec::new());
        let (mut lip_shared, mut lip_independent) = (0.0, 0.0);
        let seeds = self.config.ablation.noise_seeds;
        for k in 0..seeds {
            let seed = self.config.inference.noise_seed + k as u64;
            for mode in [NoiseMode::Shared, NoiseMode::Independent] {
                let req = SynthesisRequest {
                    feats: inputs.feats.clone(),
                    pose_mode: inputs.pose_mode.clone(),
                    noise_mode: mode,
                    noise_seed: seed,
                    num_infer_steps: self.config.inference.num_infer_steps,
                };
                let out = synthesize(&req, &s2l, &dae, &stats)?;
                // score what would be written to disk
                let g = dae.geometry();
                let frames: Vec<Tensor<f64>> = out
                    .frames
                    .frames
                    .iter()
                    .map(|f| raster::dequantize(&raster::quantize(f)?, g))
                    .collect::<Result<_>>()?;
                let adj = metrics::adjacent_distances(&frames)?;
                let mean_adj = adj.iter().sum::<f64>() / adj.len().max(1) as f64;
                let tag = if mode == NoiseMode::Shared { "shared" } else { "independent" };
                report.set(&format!("seed{k}.{tag}.mean_adjacent_l2"), mean_adj)?;
                if let Some(start) = inputs.start_frame {
                    let identity = corpus.identity();
                    let lms: Vec<LandmarkSet> =
                        frames.iter().map(|f| extract_landmarks(f, &identity)).collect::<Result<_>>()?;
                    let truth: Vec<LandmarkSet> = (start..start + lms.len())
                        .map(|i| extract_landmarks(&corpus.frame::<f64>(i), &identity))
                        .collect::<Result<_>>()?;
                    let lip = metrics::lip_lmd(&lms, &truth)?;
                    report.set(&format!("seed{k}.{tag}.lip_lmd"), lip)?;
                    if mode == NoiseMode::Shared {
                        lip_shared += lip / seeds as f64;
                    } else {
                        lip_independent += lip / seeds as f64;
                    }
                }
                if mode == NoiseMode::Shared {
                    shared.push(mean_adj);
                } else {
                    independent.push(mean_adj);
                }
                if k == 0 {
                    let dir = self.ablation_dir(Ablation::SharedNoise).join(tag);
                    let manifest = VideoManifest {
                        source: "synthesized".into(),
                        fps: out.frames.fps,
                        num_frames: out.frames.len(),
                        height: g.height,
                        width: g.width,
                        start_frame: inputs.start_frame,
                        noise_mode: mode,
                        noise_seed: seed,
                        pose_mode: inputs.pose_mode.clone(),
                        num_infer_steps: req.num_infer_steps,
                        checkpoints: self.checkpoint_hashes()?,
                        config_hash: self.config.hash(),
                    };
                    video::write_video(&dir, &out.frames.frames, &manifest)?;
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        report.set("shared.mean_adjacent_l2", mean(&shared))?;
        report.set("independent.mean_adjacent_l2", mean(&independent))?;
        if seeds >= 2 {
            let t = paired_t_less(&shared, &independent)?;
            if t.statistic.is_finite() {
                report.set("paired_t_statistic", t.statistic)?;
            }
            report.set("paired_t_p_value", t.p_value)?;
        }
        if inputs.start_frame.is_some() {
            report.set("shared.lip_lmd", lip_shared)?;
            report.set("independent.lip_lmd", lip_independent)?;
            report.set("lip_lmd_relative_difference", (lip_shared - lip_independent).abs() / lip_independent.max(lip_shared))?;
        }
        report.set("noise_seeds", seeds as f64)?;
        Ok(report)
    }

    /// Trains the baseline and the ablated arm for every seed and compares
    /// final held-out latent MSE.
    fn ablate_s2l(&self, which: Ablation, ablate: impl Fn(&mut S2lConfig)) -> Result<MetricReport> {
        let mut report = MetricReport::new();
        let base = self.config.s2l_config();
        let (mut full, mut ablated) = (Vec::new(), Vec::new());
        let seeds = self.config.ablation.train_seeds;
        for k in 0..seeds {
            let seed_cfg = S2lConfig {
                seed: base.seed + k as u64,
                ..base.clone()
            };
            let mut abl_cfg = seed_cfg.clone();
            ablate(&mut abl_cfg);
            let runs = self.root.join("ablate").join("runs");
            let dir_full = if seed_cfg == base {
                self.s2l_dir()
            } else {
                runs.join(format!("baseline-seed{}", seed_cfg.seed))
            };
            let dir_abl = runs.join(format!("{}-seed{}", which.name(), abl_cfg.seed));
            let (_, c_full) = self.train_s2l_in(&seed_cfg, &dir_full)?;
            let (_, c_abl) = self.train_s2l_in(&abl_cfg, &dir_abl)?;
            let last = |c: &LossCurve| {
                c.last()
                    .map(|r| r.heldout_latent_mse)
                    .ok_or_else(|| Error::invalid("speech2latent run recorded no evaluations"))
            };
            let (a, b) = (last(&c_full)?, last(&c_abl)?);
            report.set(&format!("seed{k}.baseline.final_heldout_latent_mse"), a)?;
            report.set(&format!("seed{k}.ablated.final_heldout_latent_mse"), b)?;
            full.push(a);
            ablated.push(b);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        report.set("baseline.final_heldout_latent_mse", mean(&full))?;
        report.set("ablated.final_heldout_latent_mse", mean(&ablated))?;
        report.set("ratio_baseline_to_ablated", mean(&full) / mean(&ablated))?;
        report.set("train_seeds", seeds as f64)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluation_frames_are_spread_over_split() {
        assert_eq!(evaluation_frames(&(100..200), 4), vec![100, 125, 150, 175]);
        assert_eq!(evaluation_frames(&(0..3), 10), vec![0, 1, 2]);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in [Ablation::SharedNoise, Ablation::DataAug, Ablation::PoseAdaptor] {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("nope").is_err());
    }
}
