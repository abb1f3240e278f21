//! Diffusion autoencoder: a convolutional image encoder producing a latent
//! code and a latent-conditioned U-Net noise predictor, trained jointly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avatar::Geometry;
use crate::checkpoint::Checkpoint;
use crate::diffusion::{ddim_decode, forward_diffuse, DecodeOptions, Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::nn::layers::{group_count, Conv2d, Linear, Norm};
use crate::nn::{Adam, Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaeConfig {
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub base_channels: usize,
    /// Channel multiplier per U-Net resolution level.
    pub channel_mult: Vec<usize>,
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    pub seed: u64,
}

impl Default for DaeConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            latent_dim: 64,
            base_channels: 32,
            channel_mult: vec![1, 2, 2],
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr: 1e-4,
            batch_size: 32,
            train_steps: 20_000,
            seed: 0,
        }
    }
}

impl DaeConfig {
    pub fn geometry(&self) -> Geometry {
        Geometry::rgb(self.height, self.width)
    }

    fn validate(&self) -> Result<()> {
        let levels = self.channel_mult.len();
        if levels == 0 || self.base_channels == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("dae needs at least one level, channels and latent_dim"));
        }
        let div = 1usize << levels;
        if self.height % div != 0 || self.width % div != 0 || self.height < div || self.width < div {
            return Err(Error::invalid(format!(
                "image {}x{} must be a positive multiple of {div} for {levels} levels",
                self.height, self.width
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// GN → SiLU → conv → GN → FiLM(t, c) → SiLU → conv, plus a (projected) skip.
#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv2d,
    norm2: Norm,
    t_proj: Linear,
    c_proj: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    in_groups: usize,
    out_groups: usize,
}

impl ResBlock {
    fn new<T: Scalar>(
        s: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        temb: usize,
        latent: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv2 = Conv2d::new(s, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, rng);
        s.get_mut(conv2.weight).data_mut().fill(T::zero());
        Self {
            norm1: Norm::new(s, &format!("{name}.norm1"), in_ch),
            conv1: Conv2d::new(s, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, rng),
            norm2: Norm::new(s, &format!("{name}.norm2"), out_ch),
            t_proj: Linear::new(s, &format!("{name}.t_proj"), temb, 2 * out_ch, rng),
            c_proj: Linear::new(s, &format!("{name}.c_proj"), latent, 2 * out_ch, rng),
            conv2,
            skip: (in_ch != out_ch).then(|| Conv2d::new(s, &format!("{name}.skip"), in_ch, out_ch, 1, 1, rng)),
            in_groups: group_count(in_ch, GROUPS),
            out_groups: group_count(out_ch, GROUPS),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, temb: Var, c: Var) -> Var {
        let h = self.norm1.group(g, s, x, self.in_groups);
        let h = g.silu(h);
        let h = self.conv1.forward(g, s, h);
        let h = self.norm2.group(g, s, h, self.out_groups);
        let ft = self.t_proj.forward(g, s, temb);
        let fc = self.c_proj.forward(g, s, c);
        let film = g.add(ft, fc);
        let h = g.film(h, film);
        let h = g.silu(h);
        let h = self.conv2.forward(g, s, h);
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, s, x),
            None => x,
        };
        g.add(h, skip)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv2d,
    downs: Vec<(Norm, Conv2d, usize)>,
    norm_out: Norm,
    out_groups: usize,
    proj: Linear,
}

#[derive(Clone, Debug)]
struct UNet {
    t_mlp: (Linear, Linear),
    conv_in: Conv2d,
    down_blocks: Vec<ResBlock>,
    downsamples: Vec<Conv2d>,
    mid: ResBlock,
    up_blocks: Vec<ResBlock>,
    norm_out: Norm,
    out_groups: usize,
    conv_out: Conv2d,
}

/// Encoder plus conditional denoiser with their parameters and schedule.
#[derive(Clone, Debug)]
pub struct DaeModel<T> {
    pub config: DaeConfig,
    pub schedule: DiffusionSchedule,
    pub params: ParamStore<T>,
    encoder: Encoder,
    unet: UNet,
}

/// Appends normalized x/y coordinate planes so convolutions can see position.
fn with_coords<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (n, h, w) = (s[0], s[2], s[3]);
    let mut data = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        for y in 0..h {
            for _ in 0..w {
                data.push(T::lit(2.0 * (y as f64 + 0.5) / h as f64 - 1.0));
            }
        }
        for _ in 0..h {
            for xx in 0..w {
                data.push(T::lit(2.0 * (xx as f64 + 0.5) / w as f64 - 1.0));
            }
        }
    }
    let coords = g.constant(Tensor::from_vec(&[n, 2, h, w], data).expect("coord planes"));
    g.concat1(x, coords)
}

/// Sinusoidal embedding `[sin(t f_i), cos(t f_i)]` with geometric frequencies.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); ts.len() * dim];
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let f = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data[i * dim + k] = T::lit((t as f64 * f).sin());
            data[i * dim + half + k] = T::lit((t as f64 * f).cos());
        }
    }
    Tensor::from_vec(&[ts.len(), dim], data).expect("embedding shape")
}

impl<T: Scalar> DaeModel<T> {
    pub fn new(config: DaeConfig) -> Result<Self> {
        config.validate()?;
        let schedule = DiffusionSchedule::linear(config.num_steps, config.beta_start, config.beta_end)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let r = &mut rng;
        let s = &mut ParamStore::new();
        let b = config.base_channels;
        let chans: Vec<usize> = config.channel_mult.iter().map(|m| m * b).collect();
        let levels = chans.len();
        let latent = config.latent_dim;

        let mut downs = Vec::new();
        let mut ch = chans[0];
        for (l, &next) in chans.iter().enumerate() {
            let norm = Norm::new(s, &format!("enc.down{l}.norm"), ch);
            let conv = Conv2d::new(s, &format!("enc.down{l}.conv"), ch, next, 3, 2, r);
            downs.push((norm, conv, group_count(ch, GROUPS)));
            ch = next;
        }
        let spatial = (config.height >> levels) * (config.width >> levels);
        let encoder = Encoder {
            conv_in: Conv2d::new(s, "enc.conv_in", 5, chans[0], 3, 1, r),
            downs,
            norm_out: Norm::new(s, "enc.norm_out", ch),
            out_groups: group_count(ch, GROUPS),
            proj: Linear::new(s, "enc.proj", ch * spatial, latent, r),
        };

        let temb = 4 * b;
        let t_mlp = (Linear::new(s, "unet.t_mlp0", b, temb, r), Linear::new(s, "unet.t_mlp1", temb, temb, r));
        let conv_in = Conv2d::new(s, "unet.conv_in", 5, chans[0], 3, 1, r);
        let mut down_blocks = Vec::new();
        let mut downsamples = Vec::new();
        for l in 0..levels {
            down_blocks.push(ResBlock::new(s, &format!("unet.down{l}"), chans[l], chans[l], temb, latent, r));
            if l + 1 < levels {
                downsamples.push(Conv2d::new(s, &format!("unet.downsample{l}"), chans[l], chans[l + 1], 3, 2, r));
            }
        }
        let top = chans[levels - 1];
        let mid = ResBlock::new(s, "unet.mid", top, top, temb, latent, r);
        let mut up_blocks = Vec::new();
        let mut cur = top;
        for l in (0..levels).rev() {
            up_blocks.push(ResBlock::new(s, &format!("unet.up{l}"), cur + chans[l], chans[l], temb, latent, r));
            cur = chans[l];
        }
        let conv_out = Conv2d::new(s, "unet.conv_out", chans[0], 3, 3, 1, r);
        s.get_mut(conv_out.weight).data_mut().fill(T::zero());
        let unet = UNet {
            t_mlp,
            conv_in,
            down_blocks,
            downsamples,
            mid,
            up_blocks,
            norm_out: Norm::new(s, "unet.norm_out", chans[0]),
            out_groups: group_count(chans[0], GROUPS),
            conv_out,
        };
        Ok(Self {
            config,
            schedule,
            params: std::mem::take(s),
            encoder,
            unet,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.config.geometry()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Encoder graph: `[n, 3, H, W]` → `[n, latent_dim]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, x0: Var) -> Var {
        let (e, s) = (&self.encoder, &self.params);
        let x = with_coords(g, x0);
        let mut h = e.conv_in.forward(g, s, x);
        for (norm, conv, groups) in &e.downs {
            h = norm.group(g, s, h, *groups);
            h = g.silu(h);
            h = conv.forward(g, s, h);
        }
        h = e.norm_out.group(g, s, h, e.out_groups);
        h = g.silu(h);
        let shape = g.shape(h).to_vec();
        let flat = g.reshape(h, &[shape[0], shape[1..].iter().product()]);
        e.proj.forward(g, s, flat)
    }

    /// Denoiser graph: `x_t: [n, 3, H, W]`, one step per sample, `c: [n, latent_dim]`.
    pub fn denoise_graph(&self, g: &mut Graph<T>, x_t: Var, ts: &[usize], c: Var) -> Var {
        let (u, s) = (&self.unet, &self.params);
        let emb = g.constant(timestep_embedding(ts, self.config.base_channels));
        let temb = u.t_mlp.0.forward(g, s, emb);
        let temb = g.silu(temb);
        let temb = u.t_mlp.1.forward(g, s, temb);
        let temb = g.silu(temb);

        let x = with_coords(g, x_t);
        let mut h = u.conv_in.forward(g, s, x);
        let mut skips = Vec::new();
        for (l, block) in u.down_blocks.iter().enumerate() {
            h = block.forward(g, s, h, temb, c);
            skips.push(h);
            if let Some(down) = u.downsamples.get(l) {
                h = down.forward(g, s, h);
            }
        }
        h = u.mid.forward(g, s, h, temb, c);
        let levels = u.down_blocks.len();
        for (i, block) in u.up_blocks.iter().enumerate() {
            let l = levels - 1 - i;
            let skip = skips[l];
            h = g.concat1(h, skip);
            h = block.forward(g, s, h, temb, c);
            if l > 0 {
                h = g.upsample2x(h);
            }
        }
        h = u.norm_out.group(g, s, h, u.out_groups);
        h = g.silu(h);
        u.conv_out.forward(g, s, h)
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<usize> {
        let g = self.geometry();
        if x.shape().len() != 4 || x.shape()[1..] != g.shape() {
            return Err(Error::ShapeMismatch {
                expected: [vec![x.shape().first().copied().unwrap_or(1)], g.shape().to_vec()].concat(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(x.dim(0))
    }

    /// Latents for a batch `[n, 3, H, W]` → `[n, latent_dim]`.
    pub fn encode_batch(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(frames)?;
        let mut g = Graph::inference();
        let x = g.constant(frames.clone());
        let c = self.encode_graph(&mut g, x);
        Ok(g.value(c).clone())
    }

    /// Latent code `[latent_dim]` of a single `[3, H, W]` frame.
    pub fn encode(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        frame.ensure_shape(&self.geometry().shape())?;
        let batch = frame.clone().reshape(&[1, 3, self.config.height, self.config.width])?;
        self.encode_batch(&batch)?.reshape(&[self.config.latent_dim])
    }

    /// Decodes `frame`'s own latent from `x_T`.
    pub fn reconstruct(&self, frame: &Tensor<T>, x_t: &Tensor<T>, num_infer_steps: usize) -> Result<Tensor<T>> {
        let c = self.encode(frame)?;
        self.decode(&c, x_t, num_infer_steps)
    }

    /// Deterministic DDIM decode of one latent `[latent_dim]` from `x_T: [3, H, W]`.
    pub fn decode(&self, c: &Tensor<T>, x_t: &Tensor<T>, num_infer_steps: usize) -> Result<Tensor<T>> {
        let g = self.geometry();
        x_t.ensure_shape(&g.shape())?;
        c.ensure_shape(&[self.config.latent_dim])?;
        let xb = x_t.clone().reshape(&[1, 3, g.height, g.width])?;
        let cb = c.clone().reshape(&[1, self.config.latent_dim])?;
        let out = self.decode_batch(&cb, &xb, num_infer_steps)?;
        out.reshape(&g.shape())
    }

    /// Decodes each row of `c: [n, latent_dim]` from the matching `x_T: [n, 3, H, W]`.
    pub fn decode_batch(&self, c: &Tensor<T>, x_t: &Tensor<T>, num_infer_steps: usize) -> Result<Tensor<T>> {
        let n = self.check_batch(x_t)?;
        c.ensure_shape(&[n, self.config.latent_dim])?;
        let opts = DecodeOptions {
            num_infer_steps,
            ..DecodeOptions::default()
        };
        ddim_decode(x_t, c, self, &self.schedule, &opts)
    }

    pub fn to_checkpoint(&self, header_extra: serde_json::Value) -> Checkpoint {
        let header = serde_json::json!({
            "kind": "dae",
            "dtype": T::DTYPE,
            "config": self.config,
            "schedule": {
                "num_steps": self.schedule.num_steps(),
                "beta_start": self.config.beta_start,
                "beta_end": self.config.beta_end,
                "sigma_eta": self.schedule.sigma_eta(),
            },
            "geometry": [3, self.config.height, self.config.width],
            "latent_dim": self.config.latent_dim,
            "extra": header_extra,
        });
        let mut ck = Checkpoint::new(&header);
        ck.insert_params("param.", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.get("kind").and_then(|k| k.as_str()) != Some("dae") {
            return Err(Error::format("checkpoint", "not a dae checkpoint"));
        }
        let config: DaeConfig = serde_json::from_value(ck.header["config"].clone())
            .map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        let mut model = Self::new(config)?;
        ck.load_params("param.", &mut model.params)?;
        Ok(model)
    }
}

impl<T: Scalar> Denoiser<T> for DaeModel<T> {
    fn predict_noise(&self, x_t: &Tensor<T>, t: usize, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_batch(x_t)?;
        cond.ensure_shape(&[n, self.config.latent_dim])?;
        let mut g = Graph::inference();
        let x = g.constant(x_t.clone());
        let c = g.constant(cond.clone());
        let out = self.denoise_graph(&mut g, x, &vec![t; n], c);
        Ok(g.value(out).clone())
    }
}

/// Mean absolute error between predicted and true noise.
pub fn noise_prediction_loss<T: Scalar>(g: &mut Graph<T>, eps_pred: Var, eps: Var) -> Var {
    g.l1_loss(eps_pred, eps)
}

/// Builds the joint training loss for a batch with given steps and noise.
pub fn dae_loss_graph<T: Scalar>(
    model: &DaeModel<T>,
    g: &mut Graph<T>,
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
) -> Result<Var> {
    let n = model.check_batch(x0)?;
    if ts.len() != n {
        return Err(Error::invalid(format!("{} steps for a batch of {n}", ts.len())));
    }
    let mut noisy = Vec::with_capacity(x0.len());
    let per = x0.len() / n;
    for (i, &t) in ts.iter().enumerate() {
        let xi = Tensor::from_vec(&[per], x0.data()[i * per..(i + 1) * per].to_vec())?;
        let ei = Tensor::from_vec(&[per], eps.data()[i * per..(i + 1) * per].to_vec())?;
        noisy.extend(forward_diffuse(&xi, t, &ei, &model.schedule)?.x.into_data());
    }
    let x0v = g.constant(x0.clone());
    let xt = g.constant(Tensor::from_vec(x0.shape(), noisy)?);
    let c = model.encode_graph(g, x0v);
    let pred = model.denoise_graph(g, xt, ts, c);
    let target = g.constant(eps.clone());
    Ok(noise_prediction_loss(g, pred, target))
}

/// Optimizer state and loss history of a DAE training run.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub step: usize,
    pub optimizer: Adam<T>,
    pub loss_history: Vec<(usize, f64)>,
    pub seed: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &DaeModel<T>, seed: u64) -> Self {
        Self {
            step: 0,
            optimizer: Adam::new(&model.params, T::lit(model.config.lr)),
            loss_history: Vec::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// One optimizer update on `batch: [n, 3, H, W]` with uniformly drawn steps and noise.
pub fn dae_train_step<T: Scalar>(model: &mut DaeModel<T>, state: &mut TrainState<T>, batch: &Tensor<T>) -> Result<f64> {
    let n = model.check_batch(batch)?;
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let ts: Vec<usize> = (0..n).map(|_| state.rng.random_range(1..=model.schedule.num_steps())).collect();
    let eps = Tensor::randn(batch.shape(), &mut state.rng);
    let mut g = Graph::new();
    let loss = dae_loss_graph(model, &mut g, batch, &ts, &eps)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("dae loss at batch {}", state.step)));
    }
    let grads = g.backward(loss, model.params.len());
    state.optimizer.step(&mut model.params, &grads);
    state.step += 1;
    state.loss_history.push((state.step, value));
    Ok(value)
}

/// Per-dimension mean and standard deviation of corpus latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    /// Dimensions whose spread is negligible relative to their scale get `std = 1`.
    pub fn from_latents<T: Scalar>(latents: &Tensor<T>) -> Result<Self> {
        if latents.shape().len() != 2 || latents.dim(0) == 0 {
            return Err(Error::invalid("latent statistics need a non-empty [n, d] table"));
        }
        let (n, d) = (latents.dim(0), latents.dim(1));
        let mut mean = vec![0.0; d];
        for row in latents.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in latents.data().chunks(d) {
            for k in 0..d {
                var[k] += (row[k].as_f64() - mean[k]).powi(2);
            }
        }
        let std = var
            .iter()
            .zip(&mean)
            .map(|(v, m)| {
                let s = (v / n as f64).sqrt();
                if s <= 1e-9 * m.abs().max(1.0) {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn standardize<T: Scalar>(&self, latents: &Tensor<T>) -> Tensor<T> {
        self.apply(latents, |v, m, s| (v - m) / s)
    }

    pub fn destandardize<T: Scalar>(&self, latents: &Tensor<T>) -> Tensor<T> {
        self.apply(latents, |v, m, s| v * s + m)
    }

    fn apply<T: Scalar>(&self, latents: &Tensor<T>, f: impl Fn(f64, f64, f64) -> f64) -> Tensor<T> {
        let d = self.mean.len();
        let data = latents
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| T::lit(f(v.as_f64(), self.mean[i % d], self.std[i % d])))
            .collect();
        Tensor::from_vec(latents.shape(), data).expect("same shape")
    }
}

/// Latents `[n, latent_dim]` of `frames` in order, plus their statistics.
pub fn extract_corpus_latents<T: Scalar>(model: &DaeModel<T>, frames: &[Tensor<T>]) -> Result<(Tensor<T>, LatentStats)> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot extract latents from an empty sequence"));
    }
    let d = model.latent_dim();
    let mut out = Vec::with_capacity(frames.len() * d);
    for chunk in frames.chunks(64) {
        let batch = Tensor::stack(chunk)?;
        out.extend_from_slice(model.encode_batch(&batch)?.data());
    }
    let latents = Tensor::from_vec(&[frames.len(), d], out)?;
    let stats = LatentStats::from_latents(&latents)?;
    Ok((latents, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> DaeConfig {
        DaeConfig {
            height: 8,
            width: 8,
            latent_dim: 4,
            base_channels: 4,
            channel_mult: vec![1, 2],
            num_steps: 50,
            batch_size: 2,
            ..DaeConfig::default()
        }
    }

    #[test]
    fn l1_loss_of_exact_and_offset_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut rng);
        let mut g = Graph::inference();
        let e = g.constant(eps.clone());
        let same = g.constant(eps.clone());
        let plus = g.constant(eps.map(|v| v + 1.0));
        let l0 = noise_prediction_loss(&mut g, same, e);
        let l1 = noise_prediction_loss(&mut g, plus, e);
        assert_eq!(g.value(l0).data()[0], 0.0);
        assert!((g.value(l1).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shapes_and_determinism() {
        let model = DaeModel::<f32>::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = Tensor::randn(&[3, 8, 8], &mut rng);
        let a = model.encode(&frame).unwrap();
        assert_eq!(a.shape(), &[4]);
        assert_eq!(a, model.encode(&frame).unwrap());
        let x_t = Tensor::randn(&[3, 8, 8], &mut rng);
        let r1 = model.reconstruct(&frame, &x_t, 10).unwrap();
        let r2 = model.reconstruct(&frame, &x_t, 10).unwrap();
        assert_eq!(r1.shape(), &[3, 8, 8]);
        assert_eq!(r1, r2);
        assert!(model.encode(&Tensor::zeros(&[3, 8, 4])).is_err());
    }

    #[test]
    fn bad_geometry_rejected() {
        let cfg = DaeConfig {
            height: 10,
            ..tiny_config()
        };
        assert!(DaeModel::<f32>::new(cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let model = DaeModel::<f32>::new(tiny_config()).unwrap();
        let bytes = model.to_checkpoint(serde_json::Value::Null).to_bytes();
        let back = DaeModel::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint(serde_json::Value::Null).to_bytes(), bytes);
    }

    #[test]
    fn latent_stats_standardize_and_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lat = Tensor::<f64>::randn(&[50, 3], &mut rng).map(|v| 3.0 * v + 2.0);
        let stats = LatentStats::from_latents(&lat).unwrap();
        let z = stats.standardize(&lat);
        for k in 0..3 {
            let col: Vec<f64> = z.data().iter().skip(k).step_by(3).copied().collect();
            let m = col.iter().sum::<f64>() / 50.0;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 50.0).sqrt();
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-4);
        }
        let back = stats.destandardize(&z);
        assert!(back.l2_distance(&lat).unwrap() < 1e-9);
        let constant = Tensor::<f64>::full(&[10, 2], 0.7);
        assert_eq!(LatentStats::from_latents(&constant).unwrap().std, vec![1.0, 1.0]);
    }
}
