//! Sequence regression from acoustic features to standardized latent codes,
//! with a pose adaptor (predictor plus projection) between a Conformer
//! speech encoder and a Conformer latent decoder.

use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avatar::{PoseVector, POSE_LIMIT_DEG};
use crate::checkpoint::Checkpoint;
use crate::corpus::{frame_stride, AcousticFeatureSequence};
use crate::error::{Error, Result};
use crate::nn::layers::{dropout, Conv1d, DepthwiseConv1d, Linear, Norm};
use crate::nn::{Adam, Graph, ParamGrads, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_SENTENCE_S: f64 = 5.0;
pub const MAX_SENTENCE_S: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segmentation {
    /// Random start, random 5–20 s duration.
    PseudoSentence,
    /// Fixed consecutive 20 s chunks.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct S2lConfig {
    pub feature_dim: usize,
    pub feature_rate_hz: f64,
    pub fps: f64,
    pub latent_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ff_mult: usize,
    pub pose_channels: usize,
    /// Relative offsets beyond this share one attention bias.
    pub max_rel_pos: usize,
    pub dropout: f64,
    pub alpha: f64,
    pub pose_adaptor: bool,
    pub segmentation: Segmentation,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    pub eval_every: usize,
    pub eval_windows: usize,
    pub seed: u64,
}

impl Default for S2lConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            feature_rate_hz: 50.0,
            fps: 25.0,
            latent_dim: 64,
            width: 256,
            blocks: 4,
            heads: 2,
            conv_kernel: 13,
            ff_mult: 4,
            pose_channels: 384,
            max_rel_pos: 64,
            dropout: 0.1,
            alpha: 1.0,
            pose_adaptor: true,
            segmentation: Segmentation::PseudoSentence,
            lr: 1e-4,
            batch_size: 16,
            train_steps: 20_000,
            eval_every: 500,
            eval_windows: 16,
            seed: 0,
        }
    }
}

impl S2lConfig {
    pub fn stride(&self) -> Result<usize> {
        frame_stride(self.feature_rate_hz, self.fps)
    }

    fn validate(&self) -> Result<()> {
        self.stride()?;
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!("width {} must be a positive multiple of heads {}", self.width, self.heads)));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::invalid("conformer conv kernel must be odd"));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.alpha >= 0.0) {
            return Err(Error::invalid("dropout must be in [0, 1) and alpha non-negative"));
        }
        if self.feature_dim == 0 || self.latent_dim == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid("feature_dim, latent_dim, batch_size and eval_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    norm: Norm,
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct ConformerBlock {
    ff1: FeedForward,
    attn_norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    attn_out: Linear,
    rel_bias: crate::nn::ParamId,
    conv_norm: Norm,
    pointwise_in: Linear,
    depthwise: DepthwiseConv1d,
    conv_mid_norm: Norm,
    pointwise_out: Linear,
    ff2: FeedForward,
    out_norm: Norm,
}

struct Ctx<'a, 'r, T> {
    store: &'a ParamStore<T>,
    p: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<T: Scalar> Ctx<'_, '_, T> {
    fn drop(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        dropout(g, x, self.p, self.rng.as_deref_mut())
    }
}

impl FeedForward {
    fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, d: usize, mult: usize, r: &mut impl Rng) -> Self {
        Self {
            norm: Norm::new(s, &format!("{name}.norm"), d),
            up: Linear::new(s, &format!("{name}.up"), d, mult * d, r),
            down: Linear::new(s, &format!("{name}.down"), mult * d, d, r),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, cx: &mut Ctx<'_, '_, T>, x: Var) -> Var {
        let h = self.norm.layer(g, cx.store, x);
        let h = self.up.forward(g, cx.store, h);
        let h = g.silu(h);
        let h = cx.drop(g, h);
        let h = self.down.forward(g, cx.store, h);
        cx.drop(g, h)
    }
}

impl ConformerBlock {
    fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, cfg: &S2lConfig, r: &mut impl Rng) -> Self {
        let d = cfg.width;
        let rel_bias = s.add(format!("{name}.attn.rel_bias"), Tensor::zeros(&[cfg.heads, 2 * cfg.max_rel_pos + 1]));
        Self {
            ff1: FeedForward::new(s, &format!("{name}.ff1"), d, cfg.ff_mult, r),
            attn_norm: Norm::new(s, &format!("{name}.attn.norm"), d),
            q: Linear::new(s, &format!("{name}.attn.q"), d, d, r),
            k: Linear::new(s, &format!("{name}.attn.k"), d, d, r),
            v: Linear::new(s, &format!("{name}.attn.v"), d, d, r),
            attn_out: Linear::new(s, &format!("{name}.attn.out"), d, d, r),
            rel_bias,
            conv_norm: Norm::new(s, &format!("{name}.conv.norm"), d),
            pointwise_in: Linear::new(s, &format!("{name}.conv.pw_in"), d, 2 * d, r),
            depthwise: DepthwiseConv1d::new(s, &format!("{name}.conv.dw"), d, cfg.conv_kernel, r),
            conv_mid_norm: Norm::new(s, &format!("{name}.conv.mid_norm"), d),
            pointwise_out: Linear::new(s, &format!("{name}.conv.pw_out"), d, d, r),
            ff2: FeedForward::new(s, &format!("{name}.ff2"), d, cfg.ff_mult, r),
            out_norm: Norm::new(s, &format!("{name}.out_norm"), d),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, cx: &mut Ctx<'_, '_, T>, heads: usize, x: Var) -> Var {
        let s = cx.store;
        let half = T::lit(0.5);
        let f = self.ff1.forward(g, cx, x);
        let f = g.scale(f, half);
        let x = g.add(x, f);

        let h = self.attn_norm.layer(g, s, x);
        let (q, k, v) = (self.q.forward(g, s, h), self.k.forward(g, s, h), self.v.forward(g, s, h));
        let bias = g.param(s, self.rel_bias);
        let a = g.attention(q, k, v, bias, heads);
        let a = self.attn_out.forward(g, s, a);
        let a = cx.drop(g, a);
        let x = g.add(x, a);

        let h = self.conv_norm.layer(g, s, x);
        let h = self.pointwise_in.forward(g, s, h);
        let h = g.glu(h);
        let h = self.depthwise.forward(g, s, h);
        let h = self.conv_mid_norm.layer(g, s, h);
        let h = g.silu(h);
        let h = self.pointwise_out.forward(g, s, h);
        let h = cx.drop(g, h);
        let x = g.add(x, h);

        let f = self.ff2.forward(g, cx, x);
        let f = g.scale(f, half);
        let x = g.add(x, f);
        self.out_norm.layer(g, s, x)
    }
}

#[derive(Clone, Debug)]
struct PoseAdaptor {
    conv1: Conv1d,
    norm1: Norm,
    conv2: Conv1d,
    norm2: Norm,
    head: Linear,
    proj: Linear,
}

#[derive(Clone, Debug)]
pub struct Speech2LatentModel<T> {
    pub config: S2lConfig,
    pub params: ParamStore<T>,
    input_conv: Conv1d,
    encoder: Vec<ConformerBlock>,
    adaptor: Option<PoseAdaptor>,
    decoder: Vec<ConformerBlock>,
    output: Linear,
}

/// Graph outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct S2lOutputs {
    /// `[len, latent_dim]` standardized latents.
    pub latents: Var,
    /// `[len, 3]` poses in units of the ±45° bound; absent without the adaptor.
    pub poses: Option<Var>,
}

fn poses_to_tensor<T: Scalar>(poses: &[PoseVector]) -> Tensor<T> {
    let data = poses
        .iter()
        .flat_map(|p| p.to_array().map(|v| T::lit(v / POSE_LIMIT_DEG)))
        .collect();
    Tensor::from_vec(&[poses.len(), 3], data).expect("pose table")
}

fn tensor_to_poses<T: Scalar>(t: &Tensor<T>) -> Vec<PoseVector> {
    t.data()
        .chunks(3)
        .map(|r| PoseVector::new(r[0].as_f64(), r[1].as_f64(), r[2].as_f64()).scaled(POSE_LIMIT_DEG))
        .collect()
}

impl PoseVector {
    fn scaled(self, k: f64) -> Self {
        Self::new(self.roll * k, self.pitch * k, self.yaw * k)
    }
}

impl<T: Scalar> Speech2LatentModel<T> {
    pub fn new(config: S2lConfig) -> Result<Self> {
        config.validate()?;
        let stride = config.stride()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let r = &mut rng;
        let s = &mut ParamStore::new();
        let d = config.width;
        let input_conv = Conv1d::new(s, "input_conv", config.feature_dim, d, stride, stride, 0, r);
        let encoder = (0..config.blocks)
            .map(|i| ConformerBlock::new(s, &format!("encoder{i}"), &config, r))
            .collect();
        let adaptor = config.pose_adaptor.then(|| {
            let pc = config.pose_channels;
            PoseAdaptor {
                conv1: Conv1d::new(s, "pose.conv1", d, pc, 3, 1, 1, r),
                norm1: Norm::new(s, "pose.norm1", pc),
                conv2: Conv1d::new(s, "pose.conv2", pc, pc, 3, 1, 1, r),
                norm2: Norm::new(s, "pose.norm2", pc),
                head: Linear::new(s, "pose.head", pc, 3, r),
                proj: Linear::new(s, "pose.proj", 3, d, r),
            }
        });
        let decoder = (0..config.blocks)
            .map(|i| ConformerBlock::new(s, &format!("decoder{i}"), &config, r))
            .collect();
        let output = Linear::new(s, "output", d, config.latent_dim, r);
        Ok(Self {
            config,
            params: std::mem::take(s),
            input_conv,
            encoder,
            adaptor,
            decoder,
            output,
        })
    }

    pub fn stride(&self) -> usize {
        self.config.stride().expect("validated at construction")
    }

    /// Builds the forward graph. `pose` (if given) conditions the decoder,
    /// otherwise the predicted pose does. `rng` enables dropout.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        feats: &AcousticFeatureSequence<T>,
        pose: Option<&[PoseVector]>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<S2lOutputs> {
        if feats.feature_dim() != self.config.feature_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![feats.len(), self.config.feature_dim],
                actual: feats.features.shape().to_vec(),
            });
        }
        if (feats.frame_rate_hz - self.config.feature_rate_hz).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "features at {} Hz, model expects {} Hz",
                feats.frame_rate_hz, self.config.feature_rate_hz
            )));
        }
        let len = feats.len() / self.stride();
        if len == 0 {
            return Err(Error::invalid(format!(
                "{} feature frames is shorter than one video frame (stride {})",
                feats.len(),
                self.stride()
            )));
        }
        if let Some(p) = pose {
            if p.len() != len {
                return Err(Error::invalid(format!("pose sequence has {} frames, expected {len}", p.len())));
            }
        }
        let mut cx = Ctx {
            store: &self.params,
            p: self.config.dropout,
            rng,
        };
        let heads = self.config.heads;
        let x = g.constant(feats.features.clone());
        let mut h = self.input_conv.forward(g, &self.params, x);
        for b in &self.encoder {
            h = b.forward(g, &mut cx, heads, h);
        }
        let mut poses = None;
        if let Some(a) = &self.adaptor {
            let s = &self.params;
            let mut p = a.conv1.forward(g, s, h);
            p = g.relu(p);
            p = a.norm1.layer(g, s, p);
            p = cx.drop(g, p);
            p = a.conv2.forward(g, s, p);
            p = g.relu(p);
            p = a.norm2.layer(g, s, p);
            p = cx.drop(g, p);
            let pred = a.head.forward(g, s, p);
            poses = Some(pred);
            let cond = match pose {
                Some(given) => g.constant(poses_to_tensor(given)),
                None => pred,
            };
            let proj = a.proj.forward(g, s, cond);
            h = g.add(h, proj);
        }
        for b in &self.decoder {
            h = b.forward(g, &mut cx, heads, h);
        }
        let latents = self.output.forward(g, &self.params, h);
        Ok(S2lOutputs { latents, poses })
    }

    /// Inference without dropout: standardized latents `[len, latent_dim]`
    /// and predicted poses in degrees (absent without the pose adaptor).
    pub fn predict(
        &self,
        feats: &AcousticFeatureSequence<T>,
        pose: Option<&[PoseVector]>,
    ) -> Result<(Tensor<T>, Option<Vec<PoseVector>>)> {
        let mut g = Graph::inference();
        let out = self.forward_graph(&mut g, feats, pose, None)?;
        let latents = g.value(out.latents).clone();
        Ok((latents, out.poses.map(|p| tensor_to_poses(g.value(p)))))
    }

    pub fn to_checkpoint(&self, header_extra: serde_json::Value) -> Checkpoint {
        let header = serde_json::json!({
            "kind": "speech2latent",
            "dtype": T::DTYPE,
            "config": self.config,
            "extra": header_extra,
        });
        let mut ck = Checkpoint::new(&header);
        ck.insert_params("param.", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.get("kind").and_then(|k| k.as_str()) != Some("speech2latent") {
            return Err(Error::format("checkpoint", "not a speech2latent checkpoint"));
        }
        let config: S2lConfig = serde_json::from_value(ck.header["config"].clone())
            .map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        let mut model = Self::new(config)?;
        ck.load_params("param.", &mut model.params)?;
        Ok(model)
    }
}

/// Mean-square latent error plus `alpha` times mean-square pose error
/// (poses in units of the ±45° bound).
pub fn s2l_loss<T: Scalar>(
    pred_latents: &Tensor<T>,
    target_latents: &Tensor<T>,
    pred_poses: &Tensor<T>,
    target_poses: &Tensor<T>,
    alpha: f64,
) -> Result<f64> {
    target_latents.ensure_shape(pred_latents.shape())?;
    target_poses.ensure_shape(pred_poses.shape())?;
    if pred_latents.dim(0) != pred_poses.dim(0) {
        return Err(Error::invalid("latent and pose sequences differ in length"));
    }
    let mse = |a: &Tensor<T>, b: &Tensor<T>| {
        a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / a.len() as f64
    };
    Ok(mse(pred_latents, target_latents) + alpha * mse(pred_poses, target_poses))
}

fn loss_graph<T: Scalar>(g: &mut Graph<T>, out: &S2lOutputs, sentence: &PseudoSentence<T>, alpha: f64) -> Var {
    let target = g.constant(sentence.latents.clone());
    let latent = g.mse_loss(out.latents, target);
    match out.poses {
        Some(p) if alpha > 0.0 => {
            let tp = g.constant(poses_to_tensor(&sentence.poses));
            let pose = g.mse_loss(p, tp);
            let pose = g.scale(pose, T::lit(alpha));
            g.add(latent, pose)
        }
        _ => latent,
    }
}

/// Time-aligned streams for regression: features, standardized latents and poses.
#[derive(Clone, Copy, Debug)]
pub struct AlignedStreams<'a> {
    pub features: &'a AcousticFeatureSequence<f64>,
    /// `[num_frames, latent_dim]`, already standardized.
    pub latents: &'a Tensor<f64>,
    pub poses: &'a [PoseVector],
    pub fps: f64,
}

impl AlignedStreams<'_> {
    pub fn num_frames(&self) -> usize {
        self.poses.len()
    }

    fn stride(&self) -> Result<usize> {
        frame_stride(self.features.frame_rate_hz, self.fps)
    }

    /// Slices all three streams over video frames `frames`.
    pub fn slice<T: Scalar>(&self, frames: Range<usize>) -> Result<PseudoSentence<T>> {
        let stride = self.stride()?;
        if frames.end > self.num_frames() || self.latents.dim(0) != self.num_frames() {
            return Err(Error::invalid(format!("frames {frames:?} outside aligned streams")));
        }
        let d = self.latents.dim(1);
        let lat = self.latents.data()[frames.start * d..frames.end * d].to_vec();
        Ok(PseudoSentence {
            start_frame: frames.start,
            length_frames: frames.len(),
            features: self.features.slice(frames.start * stride..frames.end * stride)?.cast(),
            latents: Tensor::from_vec(&[frames.len(), d], lat)?.cast(),
            poses: self.poses[frames].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSentence<T> {
    pub start_frame: usize,
    pub length_frames: usize,
    pub features: AcousticFeatureSequence<T>,
    pub latents: Tensor<T>,
    pub poses: Vec<PoseVector>,
}

/// Draws `(start, length)` in frames within `span`: duration uniform on
/// [5 s, 20 s] truncated to the span, start uniform over valid positions.
pub fn sample_span(span: Range<usize>, fps: f64, rng: &mut impl Rng) -> Result<Range<usize>> {
    let min_len = (MIN_SENTENCE_S * fps).round() as usize;
    if span.len() < min_len {
        return Err(Error::invalid(format!(
            "span of {} frames is shorter than {MIN_SENTENCE_S} s at {fps} fps",
            span.len()
        )));
    }
    let duration = rng.random_range(MIN_SENTENCE_S..=MAX_SENTENCE_S);
    let len = ((duration * fps).round() as usize).min(span.len());
    let start = span.start + rng.random_range(0..=span.len() - len);
    Ok(start..start + len)
}

pub fn sample_pseudo_sentence<T: Scalar>(
    streams: &AlignedStreams<'_>,
    span: Range<usize>,
    rng: &mut impl Rng,
) -> Result<PseudoSentence<T>> {
    let frames = sample_span(span, streams.fps, rng)?;
    streams.slice(frames)
}

/// Consecutive fixed-length chunks of `span`; a trailing chunk is kept when it
/// is at least the minimum sentence length.
pub fn fixed_segments(span: Range<usize>, fps: f64, seconds: f64) -> Vec<Range<usize>> {
    let len = (seconds * fps).round() as usize;
    let min_len = (MIN_SENTENCE_S * fps).round() as usize;
    let mut out = Vec::new();
    let mut start = span.start;
    while start < span.end {
        let end = (start + len).min(span.end);
        if end - start >= min_len {
            out.push(start..end);
        }
        start = end;
    }
    out
}

/// Fixed evaluation windows over the held-out span, independent of any training seed.
pub fn evaluation_windows(span: Range<usize>, fps: f64, count: usize) -> Result<Vec<Range<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_e7a1);
    (0..count).map(|_| sample_span(span.clone(), fps, &mut rng)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossCurveRow {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_latent_mse: f64,
    pub heldout_pose_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub rows: Vec<LossCurveRow>,
}

impl LossCurve {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\ttrain_loss\theldout_latent_mse\theldout_pose_mse\n");
        for r in &self.rows {
            writeln!(out, "{}\t{}\t{}\t{}", r.step, r.train_loss, r.heldout_latent_mse, r.heldout_pose_mse)
                .expect("string write");
        }
        out
    }

    pub fn from_tsv(path: &std::path::Path, text: &str) -> Result<Self> {
        let rows = crate::corpus::parse_tsv(path, text, 4)?
            .into_iter()
            .map(|r| LossCurveRow {
                step: r[0] as usize,
                train_loss: r[1],
                heldout_latent_mse: r[2],
                heldout_pose_mse: r[3],
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn last(&self) -> Option<&LossCurveRow> {
        self.rows.last()
    }
}

/// Frame-weighted held-out latent and pose MSE (pose in units of ±45°),
/// conditioning on ground-truth pose when the adaptor is present.
pub fn evaluate<T: Scalar>(
    model: &Speech2LatentModel<T>,
    streams: &AlignedStreams<'_>,
    windows: &[Range<usize>],
) -> Result<(f64, f64)> {
    let (mut lat, mut pose, mut frames) = (0.0, 0.0, 0usize);
    for w in windows {
        let s: PseudoSentence<T> = streams.slice(w.clone())?;
        let (pred, pred_pose) = model.predict(&s.features, model.adaptor.is_some().then_some(&s.poses[..]))?;
        let n = s.length_frames;
        lat += crate::metrics::mse(&pred, &s.latents)? * n as f64;
        if let Some(pp) = pred_pose {
            let err: f64 = pp
                .iter()
                .zip(&s.poses)
                .map(|(a, b)| {
                    ((a.roll - b.roll).powi(2) + (a.pitch - b.pitch).powi(2) + (a.yaw - b.yaw).powi(2))
                        / (3.0 * POSE_LIMIT_DEG * POSE_LIMIT_DEG)
                })
                .sum();
            pose += err;
        }
        frames += n;
    }
    let pose_mse = if model.adaptor.is_some() { pose / frames as f64 } else { f64::NAN };
    Ok((lat / frames as f64, pose_mse))
}

/// Trains on `train` frames, evaluating on `heldout` every `eval_every` steps.
pub fn s2l_train<T: Scalar>(
    model: &mut Speech2LatentModel<T>,
    streams: &AlignedStreams<'_>,
    train: Range<usize>,
    heldout: Range<usize>,
) -> Result<LossCurve> {
    let cfg = model.config.clone();
    if streams.latents.dim(1) != cfg.latent_dim {
        return Err(Error::invalid(format!(
            "latent table has {} dims, model predicts {}",
            streams.latents.dim(1),
            cfg.latent_dim
        )));
    }
    let windows = evaluation_windows(heldout, streams.fps, cfg.eval_windows)?;
    let segments = fixed_segments(train.clone(), streams.fps, MAX_SENTENCE_S);
    if cfg.segmentation == Segmentation::Fixed && segments.is_empty() {
        return Err(Error::invalid("training span too short for fixed segmentation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0000);
    let mut opt = Adam::new(&model.params, T::lit(cfg.lr));
    let mut curve = LossCurve::default();
    let (mut acc, mut acc_n) = (0.0, 0usize);
    for step in 1..=cfg.train_steps {
        let mut grads = ParamGrads::new(model.params.len());
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let sentence: PseudoSentence<T> = match cfg.segmentation {
                Segmentation::PseudoSentence => sample_pseudo_sentence(streams, train.clone(), &mut rng)?,
                Segmentation::Fixed => streams.slice(segments[rng.random_range(0..segments.len())].clone())?,
            };
            let mut g = Graph::new();
            let out = model.forward_graph(&mut g, &sentence.features, Some(&sentence.poses), Some(&mut rng))?;
            let loss = loss_graph(&mut g, &out, &sentence, cfg.alpha);
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "speech2latent loss at step {step}, sentence starting at frame {}",
                    sentence.start_frame
                )));
            }
            batch_loss += value;
            grads.merge(&g.backward(loss, model.params.len()));
        }
        grads.scale(T::lit(1.0 / cfg.batch_size as f64));
        opt.step(&mut model.params, &grads);
        acc += batch_loss / cfg.batch_size as f64;
        acc_n += 1;
        if step % cfg.eval_every == 0 || step == cfg.train_steps {
            let (lat, pose) = evaluate(model, streams, &windows)?;
            curve.rows.push(LossCurveRow {
                step,
                train_loss: acc / acc_n as f64,
                heldout_latent_mse: lat,
                heldout_pose_mse: pose,
            });
            acc = 0.0;
            acc_n = 0;
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> S2lConfig {
        S2lConfig {
            feature_dim: 3,
            latent_dim: 2,
            width: 8,
            blocks: 1,
            heads: 2,
            conv_kernel: 3,
            ff_mult: 2,
            pose_channels: 4,
            max_rel_pos: 4,
            ..S2lConfig::default()
        }
    }

    fn feats(n: usize, seed: u64) -> AcousticFeatureSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AcousticFeatureSequence::new(Tensor::randn(&[n, 3], &mut rng), 50.0).unwrap()
    }

    #[test]
    fn output_length_is_floor_of_ratio() {
        let m = Speech2LatentModel::<f64>::new(tiny()).unwrap();
        for n in [2, 3, 100, 101] {
            let (lat, pose) = m.predict(&feats(n, 1), None).unwrap();
            assert_eq!(lat.shape(), &[n / 2, 2]);
            assert_eq!(pose.unwrap().len(), n / 2);
        }
        assert!(m.predict(&feats(1, 1), None).is_err());
        let empty = AcousticFeatureSequence::new(Tensor::zeros(&[0, 3]), 50.0).unwrap();
        assert!(m.predict(&empty, None).is_err());
    }

    #[test]
    fn pose_conditioning_path_is_live() {
        let m = Speech2LatentModel::<f64>::new(tiny()).unwrap();
        let f = feats(40, 2);
        let given = vec![PoseVector::new(10.0, -20.0, 30.0); 20];
        let (a, _) = m.predict(&f, Some(&given)).unwrap();
        let (b, _) = m.predict(&f, None).unwrap();
        assert!(a.l2_distance(&b).unwrap() > 0.0);
        assert!(m.predict(&f, Some(&given[..19])).is_err());
    }

    #[test]
    fn inference_is_deterministic() {
        let m = Speech2LatentModel::<f32>::new(tiny()).unwrap();
        let f = feats(30, 3).cast::<f32>();
        assert_eq!(m.predict(&f, None).unwrap().0, m.predict(&f, None).unwrap().0);
    }

    #[test]
    fn loss_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = Tensor::<f64>::randn(&[3, 2], &mut rng);
        let p = Tensor::<f64>::randn(&[3, 3], &mut rng);
        assert_eq!(s2l_loss(&l, &l, &p, &p, 1.0).unwrap(), 0.0);
        let l2 = Tensor::<f64>::randn(&[3, 2], &mut rng);
        let p2 = Tensor::<f64>::randn(&[3, 3], &mut rng);
        let only_latent = s2l_loss(&l, &l2, &p, &p2, 0.0).unwrap();
        let mut oracle_l = 0.0;
        for i in 0..6 {
            oracle_l += (l.data()[i] - l2.data()[i]).powi(2);
        }
        let mut oracle_p = 0.0;
        for i in 0..9 {
            oracle_p += (p.data()[i] - p2.data()[i]).powi(2);
        }
        assert!((only_latent - oracle_l / 6.0).abs() < 1e-7);
        let full = s2l_loss(&l, &l2, &p, &p2, 0.7).unwrap();
        assert!((full - (oracle_l / 6.0 + 0.7 * oracle_p / 9.0)).abs() < 1e-7);
        assert!(s2l_loss(&l, &l2.outer(0), &p, &p2, 1.0).is_err());
    }

    #[test]
    fn span_sampling_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let r = sample_span(0..10_000, 25.0, &mut rng).unwrap();
            assert!((125..=500).contains(&r.len()) && r.end <= 10_000);
        }
        for _ in 0..20 {
            assert_eq!(sample_span(7..132, 25.0, &mut rng).unwrap(), 7..132);
        }
        assert!(sample_span(0..124, 25.0, &mut rng).is_err());
    }

    #[test]
    fn fixed_segments_cover_span() {
        let segs = fixed_segments(0..1200, 25.0, 20.0);
        assert_eq!(segs, vec![0..500, 500..1000, 1000..1200]);
        assert_eq!(fixed_segments(0..1100, 25.0, 20.0).len(), 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Speech2LatentModel::<f32>::new(tiny()).unwrap();
        let bytes = m.to_checkpoint(serde_json::Value::Null).to_bytes();
        let back = Speech2LatentModel::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint(serde_json::Value::Null).to_bytes(), bytes);
    }

    #[test]
    fn ablated_model_has_no_pose_outputs() {
        let cfg = S2lConfig {
            pose_adaptor: false,
            ..tiny()
        };
        let m = Speech2LatentModel::<f64>::new(cfg).unwrap();
        let (_, pose) = m.predict(&feats(20, 6), None).unwrap();
        assert!(pose.is_none());
    }
}
