//! Time-aligned avatar corpus: synthetic acoustic features, mouth apertures
//! driven by their envelope channel, an independent head-pose trajectory,
//! rendered frames and landmarks.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avatar::{render_avatar, AvatarParams, Geometry, Identity, LandmarkSet, PoseVector, LANDMARK_NAMES, POSE_LIMIT_DEG};
use crate::error::{Error, Result};
use crate::raster;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CORPUS_FORMAT: &str = "daetalker-corpus/1";
pub const MIN_CORPUS_SECONDS: f64 = 30.0;

/// Ordered frames in `[-1, 1]` with a frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence<T> {
    pub frames: Vec<Tensor<T>>,
    pub fps: f64,
}

impl<T: Scalar> FrameSequence<T> {
    pub fn new(frames: Vec<Tensor<T>>, fps: f64) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        if let Some(first) = frames.first() {
            for f in &frames {
                f.ensure_shape(first.shape())?;
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Feature matrix `[num_audio_frames, feature_dim]` stamped with its rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatureSequence<T> {
    pub features: Tensor<T>,
    pub frame_rate_hz: f64,
}

impl<T: Scalar> AcousticFeatureSequence<T> {
    pub fn new(features: Tensor<T>, frame_rate_hz: f64) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::invalid(format!("features must be 2-D, got {:?}", features.shape())));
        }
        if !(frame_rate_hz > 0.0) {
            return Err(Error::invalid(format!("feature rate must be positive, got {frame_rate_hz}")));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite("acoustic features".into()));
        }
        Ok(Self { features, frame_rate_hz })
    }

    pub fn len(&self) -> usize {
        self.features.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim(1)
    }

    /// Rows `range` as a new sequence.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start > range.end {
            return Err(Error::invalid(format!("slice {range:?} outside {} feature frames", self.len())));
        }
        let d = self.feature_dim();
        let data = self.features.data()[range.start * d..range.end * d].to_vec();
        Ok(Self {
            features: Tensor::from_vec(&[range.len(), d], data)?,
            frame_rate_hz: self.frame_rate_hz,
        })
    }

    pub fn cast<U: Scalar>(&self) -> AcousticFeatureSequence<U> {
        AcousticFeatureSequence {
            features: self.features.cast(),
            frame_rate_hz: self.frame_rate_hz,
        }
    }
}

/// Number of feature frames per video frame; the ratio must be a positive integer.
pub fn frame_stride(feature_rate_hz: f64, fps: f64) -> Result<usize> {
    if !(feature_rate_hz > 0.0) || !(fps > 0.0) {
        return Err(Error::invalid(format!(
            "rates must be positive, got feature rate {feature_rate_hz} and fps {fps}"
        )));
    }
    let ratio = feature_rate_hz / fps;
    if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "feature rate {feature_rate_hz} Hz is not an integer multiple of {fps} fps"
        )));
    }
    Ok(ratio.round() as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub duration_s: f64,
    pub fps: f64,
    pub feature_rate_hz: f64,
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub identity_seed: u64,
    pub heldout_fraction: f64,
    /// Stationary standard deviation of the roll, pitch, yaw walk.
    pub pose_std_deg: [f64; 3],
    /// Mean-reversion time constant of the pose walk.
    pub pose_time_constant_s: f64,
    /// Moving-average window applied to the pose walk, in frames.
    pub pose_smoothing_frames: usize,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            duration_s: 600.0,
            fps: 25.0,
            feature_rate_hz: 50.0,
            feature_dim: 32,
            height: 64,
            width: 64,
            seed: 0,
            identity_seed: 0,
            heldout_fraction: 0.2,
            pose_std_deg: [6.0, 8.0, 15.0],
            pose_time_constant_s: 4.0,
            pose_smoothing_frames: 25,
        }
    }
}

impl CorpusParams {
    pub fn geometry(&self) -> Geometry {
        Geometry::rgb(self.height, self.width)
    }

    pub fn stride(&self) -> Result<usize> {
        frame_stride(self.feature_rate_hz, self.fps)
    }

    pub fn num_frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    fn validate(&self) -> Result<()> {
        self.stride()?;
        if !(self.duration_s >= MIN_CORPUS_SECONDS) {
            return Err(Error::invalid(format!(
                "corpus duration {} s is below the {MIN_CORPUS_SECONDS} s minimum",
                self.duration_s
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::invalid(format!("heldout_fraction {} outside [0, 1)", self.heldout_fraction)));
        }
        if self.pose_std_deg.iter().any(|s| !(*s >= 0.0)) || !(self.pose_time_constant_s > 0.0) {
            return Err(Error::invalid("pose walk parameters must be non-negative with a positive time constant"));
        }
        if self.pose_smoothing_frames == 0 {
            return Err(Error::invalid("pose_smoothing_frames must be positive"));
        }
        Ok(())
    }
}

/// Contiguous train and held-out frame ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub heldout: Range<usize>,
}

impl Split {
    pub fn contiguous(num_frames: usize, heldout_fraction: f64) -> Self {
        let cut = ((num_frames as f64) * (1.0 - heldout_fraction)).round() as usize;
        Self {
            train: 0..cut,
            heldout: cut..num_frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedCorpus {
    pub params: CorpusParams,
    /// Interleaved 8-bit RGB rasters, exactly as stored on disk.
    pub frames: Vec<Vec<u8>>,
    pub features: AcousticFeatureSequence<f64>,
    pub poses: Vec<PoseVector>,
    pub landmarks: Vec<LandmarkSet>,
    pub split: Split,
}

impl AlignedCorpus {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn geometry(&self) -> Geometry {
        self.params.geometry()
    }

    pub fn stride(&self) -> usize {
        self.params.stride().expect("validated at construction")
    }

    pub fn identity(&self) -> Identity {
        Identity::from_seed(self.params.identity_seed)
    }

    pub fn frame<T: Scalar>(&self, index: usize) -> Tensor<T> {
        raster::dequantize(&self.frames[index], self.geometry()).expect("corpus frames match geometry")
    }

    pub fn frame_sequence<T: Scalar>(&self, range: Range<usize>) -> FrameSequence<T> {
        FrameSequence {
            frames: range.map(|i| self.frame(i)).collect(),
            fps: self.params.fps,
        }
    }

    /// Mouth aperture of frame `index`: the envelope channel at the frame's first feature row.
    pub fn aperture(&self, index: usize) -> f64 {
        let d = self.features.feature_dim();
        self.features.features.data()[index * self.stride() * d]
    }

    /// Feature rows aligned with video frames `frames`.
    pub fn feature_range(&self, frames: Range<usize>) -> Range<usize> {
        let s = self.stride();
        frames.start * s..frames.end * s
    }
}

/// Band-limited "speech envelope": a rectified sum of three random-phase
/// sinusoids in 0.5–4 Hz, scaled so its maximum over the grid is 1.
pub fn speech_envelope(num_samples: usize, rate_hz: f64, rng: &mut impl Rng) -> Vec<f64> {
    let comps: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.5..4.0), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let raw: Vec<f64> = (0..num_samples)
        .map(|i| {
            let t = i as f64 / rate_hz;
            let s: f64 = comps.iter().map(|&(f, p)| (std::f64::consts::TAU * f * t + p).sin()).sum();
            s.max(0.0)
        })
        .collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        raw.into_iter().map(|v| v / peak).collect()
    } else {
        raw
    }
}

/// Centred moving average; the window shrinks at the edges.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Mean-reverting Gaussian walk per axis, smoothed and clipped to the pose bounds.
pub fn pose_trajectory(params: &CorpusParams, num_frames: usize, rng: &mut impl Rng) -> Vec<PoseVector> {
    let rho = (-1.0 / (params.pose_time_constant_s * params.fps)).exp();
    let axes: Vec<Vec<f64>> = params
        .pose_std_deg
        .iter()
        .map(|&std| {
            let step = std * (1.0 - rho * rho).sqrt();
            let mut v = std * rng.sample::<f64, _>(StandardNormal);
            let walk: Vec<f64> = (0..num_frames)
                .map(|_| {
                    let cur = v;
                    v = rho * v + step * rng.sample::<f64, _>(StandardNormal);
                    cur
                })
                .collect();
            moving_average(&walk, params.pose_smoothing_frames)
                .into_iter()
                .map(|p| p.clamp(-POSE_LIMIT_DEG, POSE_LIMIT_DEG))
                .collect()
        })
        .collect();
    (0..num_frames)
        .map(|i| PoseVector::new(axes[0][i], axes[1][i], axes[2][i]))
        .collect()
}

pub fn generate_corpus(params: &CorpusParams) -> Result<AlignedCorpus> {
    params.validate()?;
    let stride = params.stride()?;
    let n = params.num_frames();
    let nf = n * stride;
    let d = params.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let envelope = speech_envelope(nf, params.feature_rate_hz, &mut rng);
    let mut feats = vec![0.0; nf * d];
    for (i, e) in envelope.iter().enumerate() {
        feats[i * d] = *e;
    }
    // Distractor channels: short-window smoothed noise.
    for c in 1..d {
        let noise: Vec<f64> = (0..nf).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for (i, v) in moving_average(&noise, 5).into_iter().enumerate() {
            feats[i * d + c] = v;
        }
    }
    let features = AcousticFeatureSequence::new(Tensor::from_vec(&[nf, d], feats)?, params.feature_rate_hz)?;
    let poses = pose_trajectory(params, n, &mut rng);
    let geometry = params.geometry();
    let rendered: Vec<(Vec<u8>, LandmarkSet)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = AvatarParams {
                aperture: envelope[i * stride],
                pose: poses[i],
                identity_seed: params.identity_seed,
            };
            let (img, lm) = render_avatar::<f64>(&p, geometry)?;
            Ok((raster::quantize(&img)?, lm))
        })
        .collect::<Result<_>>()?;
    let (frames, landmarks) = rendered.into_iter().unzip();
    Ok(AlignedCorpus {
        params: params.clone(),
        frames,
        features,
        poses,
        landmarks,
        split: Split::contiguous(n, params.heldout_fraction),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    #[serde(flatten)]
    params: CorpusParams,
    split: Split,
    num_frames: usize,
    num_feature_frames: usize,
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("frames").join(format!("{index:06}.png"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `frames/%06d.png`, `features.tsv`, `poses.tsv`, `landmarks.tsv` and `manifest.json`.
pub fn save_corpus(corpus: &AlignedCorpus, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let geometry = corpus.geometry();
    corpus
        .frames
        .par_iter()
        .enumerate()
        .try_for_each(|(i, f)| raster::write_png(&frame_path(dir, i), f, geometry))?;

    let d = corpus.features.feature_dim();
    let mut text = (0..d).map(|c| format!("f{c}")).collect::<Vec<_>>().join("\t");
    text.push('\n');
    for row in corpus.features.features.data().chunks(d) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join("\t"));
        text.push('\n');
    }
    write_text(&dir.join("features.tsv"), &text)?;

    let mut text = String::from("frame\troll\tpitch\tyaw\n");
    for (i, p) in corpus.poses.iter().enumerate() {
        writeln!(text, "{i}\t{}\t{}\t{}", p.roll, p.pitch, p.yaw).expect("string write");
    }
    write_text(&dir.join("poses.tsv"), &text)?;

    let mut text = String::from("frame");
    for name in LANDMARK_NAMES {
        write!(text, "\t{name}_x\t{name}_y").expect("string write");
    }
    text.push('\n');
    for (i, lm) in corpus.landmarks.iter().enumerate() {
        text.push_str(&i.to_string());
        for name in LANDMARK_NAMES {
            let [x, y] = lm.get(name).expect("renderer emits every landmark");
            write!(text, "\t{x}\t{y}").expect("string write");
        }
        text.push('\n');
    }
    write_text(&dir.join("landmarks.tsv"), &text)?;

    let manifest = Manifest {
        format: CORPUS_FORMAT.to_string(),
        params: corpus.params.clone(),
        split: corpus.split.clone(),
        num_frames: corpus.len(),
        num_feature_frames: corpus.features.len(),
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_text(&dir.join("manifest.json"), &json)
}

/// Parses a headed TSV of numbers, returning rows without the header.
pub(crate) fn parse_tsv(path: &Path, text: &str, columns: usize) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format("tsv", format!("{}: empty file", path.display())))?;
    if header.split('\t').count() != columns {
        return Err(Error::format(
            "tsv",
            format!("{}: expected {columns} columns, header has {}", path.display(), header.split('\t').count()),
        ));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let row: Vec<f64> = line
                .split('\t')
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format("tsv", format!("{} line {}: {e}", path.display(), i + 2)))?;
            if row.len() != columns {
                return Err(Error::format(
                    "tsv",
                    format!("{} line {}: expected {columns} columns, got {}", path.display(), i + 2, row.len()),
                ));
            }
            Ok(row)
        })
        .collect()
}

pub fn load_corpus(dir: &Path) -> Result<AlignedCorpus> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&read_text(&manifest_path)?)
        .map_err(|e| Error::format("corpus manifest", format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != CORPUS_FORMAT {
        return Err(Error::format("corpus manifest", format!("unsupported format {}", manifest.format)));
    }
    let params = manifest.params;
    params.validate()?;
    let n = manifest.num_frames;
    let d = params.feature_dim;
    let expect_rows = |path: &Path, rows: usize, want: usize| {
        if rows == want {
            Ok(())
        } else {
            Err(Error::format("corpus", format!("{}: {rows} rows, manifest says {want}", path.display())))
        }
    };

    let path = dir.join("features.tsv");
    let rows = parse_tsv(&path, &read_text(&path)?, d)?;
    expect_rows(&path, rows.len(), manifest.num_feature_frames)?;
    let features = AcousticFeatureSequence::new(
        Tensor::from_vec(&[rows.len(), d], rows.into_iter().flatten().collect())?,
        params.feature_rate_hz,
    )?;

    let path = dir.join("poses.tsv");
    let rows = parse_tsv(&path, &read_text(&path)?, 4)?;
    expect_rows(&path, rows.len(), n)?;
    let poses = rows.iter().map(|r| PoseVector::new(r[1], r[2], r[3])).collect();

    let path = dir.join("landmarks.tsv");
    let rows = parse_tsv(&path, &read_text(&path)?, 1 + 2 * LANDMARK_NAMES.len())?;
    expect_rows(&path, rows.len(), n)?;
    let landmarks = rows
        .iter()
        .map(|r| LandmarkSet {
            points: LANDMARK_NAMES
                .iter()
                .enumerate()
                .map(|(k, name)| (name.to_string(), [r[1 + 2 * k], r[2 + 2 * k]]))
                .collect(),
        })
        .collect();

    let geometry = params.geometry();
    let frames = (0..n)
        .into_par_iter()
        .map(|i| {
            let path = frame_path(dir, i);
            let (rgb, g) = raster::read_png(&path)?;
            if g != geometry {
                return Err(Error::format("corpus", format!("{}: geometry {g:?}, expected {geometry:?}", path.display())));
            }
            Ok(rgb)
        })
        .collect::<Result<_>>()?;
    Ok(AlignedCorpus {
        params,
        frames,
        features,
        poses,
        landmarks,
        split: manifest.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusParams {
        CorpusParams {
            duration_s: 60.0,
            height: 32,
            width: 32,
            feature_dim: 4,
            seed: 11,
            ..CorpusParams::default()
        }
    }

    #[test]
    fn rate_arithmetic() {
        let c = generate_corpus(&small()).unwrap();
        assert_eq!(c.len(), 1500);
        assert_eq!(c.features.len(), 3000);
        assert_eq!(c.stride(), 2);
        assert_eq!(c.split, Split { train: 0..1200, heldout: 1200..1500 });
        assert_eq!(c.feature_range(3..5), 6..10);
    }

    #[test]
    fn invalid_rates_and_durations_rejected() {
        assert!(frame_stride(50.0, 0.0).is_err());
        assert!(frame_stride(-1.0, 25.0).is_err());
        assert!(frame_stride(50.0, 30.0).is_err());
        assert!(frame_stride(10.0, 25.0).is_err());
        assert_eq!(frame_stride(100.0, 25.0).unwrap(), 4);
        let short = CorpusParams { duration_s: 10.0, ..small() };
        assert!(generate_corpus(&short).is_err());
    }

    #[test]
    fn poses_within_bounds_and_smooth() {
        let c = generate_corpus(&small()).unwrap();
        for w in c.poses.windows(2) {
            assert!(w[0].validate().is_ok());
            assert!((w[1].yaw - w[0].yaw).abs() < 2.0);
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let c = generate_corpus(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&c, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back, c);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        for key in ["fps", "feature_rate_hz", "duration_s", "seed", "split"] {
            assert!(manifest.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn missing_corpus_names_expected_path() {
        let dir = tempfile::tempdir().unwrap();
        match load_corpus(dir.path()) {
            Err(Error::MissingInput(p)) => assert_eq!(p, dir.path().join("manifest.json")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn moving_average_of_constant_is_constant() {
        let v = moving_average(&[2.0; 10], 4);
        assert!(v.iter().all(|&x| (x - 2.0).abs() < 1e-12));
    }
}
