//! Frame-wise conditioned video generation: every predicted latent is decoded
//! by the DDIM image decoder, from one shared `x_T` or per-frame noise.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avatar::{Geometry, PoseVector};
use crate::corpus::{frame_path, parse_tsv, AcousticFeatureSequence, FrameSequence};
use crate::dae::{DaeModel, LatentStats};
use crate::diffusion::{ddim_decode, DecodeOptions, Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::raster;
use crate::scalar::Scalar;
use crate::speech2latent::Speech2LatentModel;
use crate::tensor::Tensor;

/// Frames decoded per batch.
const DECODE_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoseMode {
    /// Poses predicted from speech.
    Natural,
    Fixed { pose: PoseVector },
    /// One pose per output frame.
    Trajectory { poses: Vec<PoseVector> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Shared,
    Independent,
}

#[derive(Clone, Debug)]
pub struct SynthesisRequest<T> {
    pub feats: AcousticFeatureSequence<T>,
    pub pose_mode: PoseMode,
    pub noise_mode: NoiseMode,
    pub noise_seed: u64,
    pub num_infer_steps: usize,
}

/// Source of `x_T` tensors that counts how many it has drawn.
///
/// Frame `i` in independent mode reads ChaCha stream `i + 1`; the shared
/// tensor reads stream 0. Draws therefore never depend on decode order.
#[derive(Debug)]
pub struct NoiseSource {
    seed: u64,
    shape: Vec<usize>,
    draws: AtomicUsize,
}

impl NoiseSource {
    pub fn new(seed: u64, shape: &[usize]) -> Self {
        Self {
            seed,
            shape: shape.to_vec(),
            draws: AtomicUsize::new(0),
        }
    }

    pub fn draws(&self) -> usize {
        self.draws.load(Ordering::SeqCst)
    }

    pub fn shared<T: Scalar>(&self) -> Tensor<T> {
        self.draw(0)
    }

    pub fn frame<T: Scalar>(&self, index: usize) -> Tensor<T> {
        self.draw(index as u64 + 1)
    }

    fn draw<T: Scalar>(&self, stream: u64) -> Tensor<T> {
        self.draws.fetch_add(1, Ordering::SeqCst);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        Tensor::randn(&self.shape, &mut rng)
    }
}

/// Start noise for `n` frames: one shared tensor repeated, or one per frame.
pub fn start_noise<T: Scalar>(source: &NoiseSource, mode: NoiseMode, n: usize) -> Vec<Tensor<T>> {
    match mode {
        NoiseMode::Shared => {
            let x = source.shared();
            vec![x; n]
        }
        NoiseMode::Independent => (0..n).map(|i| source.frame(i)).collect(),
    }
}

/// Decodes `latents: [n, latent_dim]` (raw, not standardized) from `noise`.
/// Frames are batched following `order` (identity when absent); the result
/// is always returned in frame order.
pub fn decode_frames<T: Scalar>(
    dae: &DaeModel<T>,
    latents: &Tensor<T>,
    noise: &[Tensor<T>],
    num_infer_steps: usize,
    order: Option<&[usize]>,
) -> Result<Vec<Tensor<T>>> {
    let n = latents.dim(0);
    let d = dae.latent_dim();
    latents.ensure_shape(&[n, d])?;
    if noise.len() != n {
        return Err(Error::invalid(format!("{} noise tensors for {n} frames", noise.len())));
    }
    let identity: Vec<usize> = (0..n).collect();
    let order = order.unwrap_or(&identity);
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid("decode order must be a permutation of the frame indices"));
        }
    }
    if order.len() != n {
        return Err(Error::invalid("decode order must be a permutation of the frame indices"));
    }
    let g = dae.geometry();
    let decoded: Vec<Vec<(usize, Tensor<T>)>> = order
        .par_chunks(DECODE_CHUNK)
        .map(|idx| {
            let c: Vec<T> = idx.iter().flat_map(|&i| latents.data()[i * d..(i + 1) * d].to_vec()).collect();
            let c = Tensor::from_vec(&[idx.len(), d], c)?;
            let x = Tensor::stack(&idx.iter().map(|&i| noise[i].clone()).collect::<Vec<_>>())?;
            let out = dae.decode_batch(&c, &x, num_infer_steps)?;
            let per = g.num_values();
            idx.iter()
                .enumerate()
                .map(|(k, &i)| Ok((i, Tensor::from_vec(&g.shape(), out.data()[k * per..(k + 1) * per].to_vec())?)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut frames: Vec<Option<Tensor<T>>> = vec![None; n];
    for (i, f) in decoded.into_iter().flatten() {
        frames[i] = Some(f);
    }
    Ok(frames.into_iter().map(|f| f.expect("every index decoded")).collect())
}

#[derive(Clone, Debug)]
pub struct Synthesis<T> {
    pub frames: FrameSequence<T>,
    /// Raw latents that were decoded, `[n, latent_dim]`.
    pub latents: Tensor<T>,
    /// Pose that conditioned each frame, in degrees.
    pub poses: Vec<PoseVector>,
    /// Number of `x_T` tensors drawn.
    pub noise_draws: usize,
}

/// Speech features → latents → frames.
pub fn synthesize<T: Scalar>(
    req: &SynthesisRequest<T>,
    s2l: &Speech2LatentModel<T>,
    dae: &DaeModel<T>,
    stats: &LatentStats,
) -> Result<Synthesis<T>> {
    synthesize_ordered(req, s2l, dae, stats, None)
}

/// As [`synthesize`], decoding frames in the given order.
pub fn synthesize_ordered<T: Scalar>(
    req: &SynthesisRequest<T>,
    s2l: &Speech2LatentModel<T>,
    dae: &DaeModel<T>,
    stats: &LatentStats,
    order: Option<&[usize]>,
) -> Result<Synthesis<T>> {
    if s2l.config.latent_dim != dae.latent_dim() || stats.mean.len() != dae.latent_dim() {
        return Err(Error::invalid(format!(
            "speech2latent predicts {} dims, decoder expects {}, statistics cover {}",
            s2l.config.latent_dim,
            dae.latent_dim(),
            stats.mean.len()
        )));
    }
    let n = req.feats.len() / s2l.stride();
    let given: Option<Vec<PoseVector>> = match &req.pose_mode {
        PoseMode::Natural => None,
        PoseMode::Fixed { pose } => {
            pose.validate()?;
            Some(vec![*pose; n])
        }
        PoseMode::Trajectory { poses } => {
            if poses.len() != n {
                return Err(Error::invalid(format!(
                    "pose trajectory has {} frames, features give {n}",
                    poses.len()
                )));
            }
            poses.iter().try_for_each(|p| p.validate())?;
            Some(poses.clone())
        }
    };
    let (standardized, predicted) = s2l.predict(&req.feats, given.as_deref())?;
    let latents = stats.destandardize(&standardized);
    let poses = match given {
        Some(p) => p,
        None => predicted.unwrap_or_else(|| vec![PoseVector::FRONTAL; n]),
    };
    let source = NoiseSource::new(req.noise_seed, &dae.geometry().shape());
    let noise = start_noise(&source, req.noise_mode, n);
    let frames = decode_frames(dae, &latents, &noise, req.num_infer_steps, order)?;
    Ok(Synthesis {
        frames: FrameSequence::new(frames, s2l.config.fps)?,
        latents,
        poses,
        noise_draws: source.draws(),
    })
}

/// Output distance `||decode(x_T, c + δ·u) - decode(x_T, c)||` per delta.
#[allow(clippy::too_many_arguments)]
pub fn continuity_probe<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    schedule: &DiffusionSchedule,
    c: &Tensor<T>,
    direction: &Tensor<T>,
    deltas: &[f64],
    x_t: &Tensor<T>,
    num_infer_steps: usize,
) -> Result<Vec<f64>> {
    direction.ensure_shape(c.shape())?;
    if deltas.iter().any(|d| !(*d >= 0.0)) || deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("deltas must be non-negative and strictly decreasing"));
    }
    let d = c.len();
    let opts = DecodeOptions {
        num_infer_steps,
        ..DecodeOptions::default()
    };
    let mut shape = vec![1];
    shape.extend_from_slice(x_t.shape());
    let x = x_t.clone().reshape(&shape)?;
    let decode = |cond: &Tensor<T>| ddim_decode(&x, &cond.clone().reshape(&[1, d])?, denoiser, schedule, &opts);
    let base = decode(c)?;
    deltas
        .iter()
        .map(|&delta| {
            if delta == 0.0 {
                return Ok(0.0);
            }
            let k = T::lit(delta);
            let moved = c.zip_map(direction, |a, u| a + k * u)?;
            Ok(decode(&moved)?.l2_distance(&base)?.as_f64())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoManifest {
    /// `synthesized` or `reference` (ground-truth frames).
    pub source: String,
    pub fps: f64,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Corpus frame index of the first frame, when the video is aligned to the corpus.
    pub start_frame: Option<usize>,
    pub noise_mode: NoiseMode,
    pub noise_seed: u64,
    pub pose_mode: PoseMode,
    pub num_infer_steps: usize,
    /// Content hashes of the checkpoints used, by role.
    pub checkpoints: std::collections::BTreeMap<String, String>,
    pub config_hash: String,
}

/// Writes `frames/%06d.png` and `manifest.json` under `dir`.
pub fn write_video<T: Scalar>(dir: &Path, frames: &[Tensor<T>], manifest: &VideoManifest) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let geometry = Geometry::rgb(manifest.height, manifest.width);
    frames.par_iter().enumerate().try_for_each(|(i, f)| {
        f.ensure_shape(&geometry.shape())?;
        raster::write_png(&frame_path(dir, i), &raster::quantize(f)?, geometry)
    })?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<VideoManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("video manifest", format!("{}: {e}", path.display())))
}

/// Frames of a video directory as RGB8 rasters, in order.
pub fn read_video_frames(dir: &Path) -> Result<(VideoManifest, Vec<Vec<u8>>)> {
    let manifest = read_manifest(dir)?;
    let expect = Geometry::rgb(manifest.height, manifest.width);
    let frames = (0..manifest.num_frames)
        .map(|i| {
            let path = frame_path(dir, i);
            let (rgb, g) = raster::read_png(&path)?;
            if g != expect {
                return Err(Error::format("video frame", format!("{}: geometry {g:?}", path.display())));
            }
            Ok(rgb)
        })
        .collect::<Result<_>>()?;
    Ok((manifest, frames))
}

pub const PACKED_MAGIC: &[u8; 4] = b"DAEV";

/// Single-file export: 16-byte header `magic | u16 width | u16 height | f32 fps | u32 count`
/// (little-endian) followed by the RGB8 frames back to back.
pub fn write_packed(path: &Path, frames: &[Vec<u8>], geometry: Geometry, fps: f64) -> Result<()> {
    if geometry.width > u16::MAX as usize || geometry.height > u16::MAX as usize {
        return Err(Error::invalid("frame too large for the packed header"));
    }
    let mut out = Vec::with_capacity(16 + frames.len() * geometry.num_values());
    out.extend_from_slice(PACKED_MAGIC);
    out.extend_from_slice(&(geometry.width as u16).to_le_bytes());
    out.extend_from_slice(&(geometry.height as u16).to_le_bytes());
    out.extend_from_slice(&(fps as f32).to_le_bytes());
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        if f.len() != geometry.num_values() {
            return Err(Error::invalid("frame size disagrees with geometry"));
        }
        out.extend_from_slice(f);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_packed(path: &Path) -> Result<(Geometry, f64, Vec<Vec<u8>>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != PACKED_MAGIC {
        return Err(Error::format("packed video", "bad header"));
    }
    let w = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let h = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let fps = f32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as f64;
    let count = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let g = Geometry::rgb(h, w);
    if bytes.len() != 16 + count * g.num_values() {
        return Err(Error::format("packed video", "payload length disagrees with header"));
    }
    let frames = bytes[16..].chunks(g.num_values()).map(<[u8]>::to_vec).collect();
    Ok((g, fps, frames))
}

/// Reads a `frame roll pitch yaw` table (the corpus `poses.tsv` layout).
pub fn load_trajectory(path: &Path) -> Result<Vec<PoseVector>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(path, &text, 4)?
        .into_iter()
        .map(|r| {
            let p = PoseVector::new(r[1], r[2], r[3]);
            p.validate().map(|_| p)
        })
        .collect()
}

pub fn video_dir(root: &Path, name: &str) -> PathBuf {
    root.join("videos").join(name)
}
