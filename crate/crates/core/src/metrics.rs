//! Objective video metrics and the plain-text report format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::avatar::{LandmarkSet, PoseVector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub const MOUTH_LANDMARKS: [&str; 4] = ["mouth_bottom", "mouth_left", "mouth_right", "mouth_top"];

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    b.ensure_shape(a.shape())
}

/// PSNR in dB with images mapped from `[-1, 1]` to `[0, 1]` (peak 1).
/// Identical images report [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x.as_f64() - y.as_f64()) / 2.0).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Channel-mean grayscale on `[0, 1]` as `(height, width, pixels)`.
fn gray<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    if img.shape().len() != 3 {
        return Err(Error::invalid(format!("expected [C, H, W] image, got {:?}", img.shape())));
    }
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let d = img.data();
    let px = (0..h * w)
        .map(|i| (0..c).map(|k| (d[k * h * w + i].as_f64() + 1.0) / 2.0).sum::<f64>() / c as f64)
        .collect();
    Ok((h, w, px))
}

/// Mean SSIM over all 8×8 windows (stride 1, uniform weights, population
/// moments) of the channel-mean grayscale images on the `[0, 1]` range.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, ga) = gray(a)?;
    let (_, _, gb) = gray(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (p, q) = (ga[y * w + x], gb[y * w + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Landmarks relative to the face centre, in units of inter-eye distance.
fn normalized(set: &LandmarkSet, names: &[&str]) -> Result<Vec<[f64; 2]>> {
    let get = |n: &str| set.get(n).ok_or_else(|| Error::invalid(format!("landmark {n} missing")));
    let c = get("face_center")?;
    let (l, r) = (get("eye_left")?, get("eye_right")?);
    let iod = ((r[0] - l[0]).powi(2) + (r[1] - l[1]).powi(2)).sqrt();
    if !(iod > 0.0) {
        return Err(Error::invalid("zero inter-eye distance"));
    }
    names
        .iter()
        .map(|n| get(n).map(|p| [(p[0] - c[0]) / iod, (p[1] - c[1]) / iod]))
        .collect()
}

/// Mean normalized L2 distance over the named landmarks and all frames.
pub fn lmd_over(pred: &[LandmarkSet], truth: &[LandmarkSet], names: &[&str]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "landmark sequences must be equal and non-empty, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.points.keys().ne(t.points.keys()) {
            return Err(Error::invalid("landmark name sets differ"));
        }
        let (np, nt) = (normalized(p, names)?, normalized(t, names)?);
        total += np
            .iter()
            .zip(&nt)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum::<f64>();
    }
    Ok(total / (pred.len() * names.len()) as f64)
}

/// LMD over every landmark except the face centre, which is the
/// normalization origin and contributes zero by construction.
pub fn lmd(pred: &[LandmarkSet], truth: &[LandmarkSet]) -> Result<f64> {
    let first = truth.first().ok_or_else(|| Error::invalid("empty landmark sequence"))?;
    let names: Vec<&str> = first.points.keys().map(String::as_str).filter(|n| *n != "face_center").collect();
    lmd_over(pred, truth, &names)
}

/// LMD over the mouth landmarks only.
pub fn lip_lmd(pred: &[LandmarkSet], truth: &[LandmarkSet]) -> Result<f64> {
    lmd_over(pred, truth, &MOUTH_LANDMARKS)
}

/// Mean over frames of the summed squared roll/pitch/yaw differences (degrees²).
pub fn pose_error(extracted: &[PoseVector], reference: &[PoseVector]) -> Result<f64> {
    if extracted.len() != reference.len() || extracted.is_empty() {
        return Err(Error::invalid(format!(
            "pose sequences must be equal and non-empty, got {} and {}",
            extracted.len(),
            reference.len()
        )));
    }
    let total: f64 = extracted
        .iter()
        .zip(reference)
        .map(|(a, b)| (a.roll - b.roll).powi(2) + (a.pitch - b.pitch).powi(2) + (a.yaw - b.yaw).powi(2))
        .sum();
    Ok(total / extracted.len() as f64)
}

/// Mean squared difference between two equally shaped tensors.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64)
}

/// Root-mean-square per-pixel difference between consecutive frames.
pub fn adjacent_distances<T: Scalar>(frames: &[Tensor<T>]) -> Result<Vec<f64>> {
    frames.windows(2).map(|w| mse(&w[0], &w[1]).map(f64::sqrt)).collect()
}

/// `max / median` of adjacent distances; small values mean no isolated jumps.
pub fn jump_ratio(distances: &[f64]) -> Option<f64> {
    if distances.is_empty() {
        return None;
    }
    let mut s = distances.to_vec();
    s.sort_by(f64::total_cmp);
    let median = if s.len() % 2 == 1 {
        s[s.len() / 2]
    } else {
        (s[s.len() / 2 - 1] + s[s.len() / 2]) / 2.0
    };
    Some(s[s.len() - 1] / median)
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricValue {
    Value(f64),
    Unavailable(String),
}

/// Scalars, per-frame series and provenance strings for one evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub meta: BTreeMap<String, String>,
    pub scalars: BTreeMap<String, MetricValue>,
    pub series: BTreeMap<String, Vec<f64>>,
}

impl MetricReport {
    pub fn new() -> Self {
        let mut r = Self::default();
        for key in ["lse_c", "lse_d", "lpips"] {
            r.scalars.insert(
                key.to_string(),
                MetricValue::Unavailable("requires an external pretrained network".into()),
            );
        }
        r
    }

    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {key}")));
        }
        self.scalars.insert(key.to_string(), MetricValue::Value(value));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        match self.scalars.get(key) {
            Some(MetricValue::Value(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn set_series(&mut self, key: &str, values: Vec<f64>) -> Result<()> {
        if let Some(len) = self.series.values().next().map(Vec::len) {
            if len != values.len() {
                return Err(Error::invalid(format!(
                    "series {key} has {} entries, others have {len}",
                    values.len()
                )));
            }
        }
        self.series.insert(key.to_string(), values);
        Ok(())
    }

    /// `key = value` lines: meta keys first (prefixed `meta.`), then metrics.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            writeln!(out, "meta.{k} = {v}").expect("string write");
        }
        for (k, v) in &self.scalars {
            match v {
                MetricValue::Value(x) => writeln!(out, "{k} = {x}"),
                MetricValue::Unavailable(why) => writeln!(out, "{k} = unavailable ({why})"),
            }
            .expect("string write");
        }
        out
    }

    /// Per-frame series as a TSV with a leading `frame` column.
    pub fn series_tsv(&self) -> String {
        let mut out = String::from("frame");
        for k in self.series.keys() {
            write!(out, "\t{k}").expect("string write");
        }
        out.push('\n');
        let n = self.series.values().next().map_or(0, Vec::len);
        for i in 0..n {
            out.push_str(&i.to_string());
            for v in self.series.values() {
                write!(out, "\t{}", v[i]).expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let kv = dir.join("report.txt");
        std::fs::write(&kv, self.to_kv()).map_err(|e| Error::io(&kv, e))?;
        if self.series.is_empty() {
            return Ok(());
        }
        let tsv = dir.join("series.tsv");
        std::fs::write(&tsv, self.series_tsv()).map_err(|e| Error::io(&tsv, e))
    }

    /// Parses the output of [`MetricReport::to_kv`].
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::format("metric report", format!("line without ' = ': {line}")))?;
            if let Some(m) = k.strip_prefix("meta.") {
                r.meta.insert(m.to_string(), v.to_string());
            } else if let Some(why) = v.strip_prefix("unavailable (").and_then(|s| s.strip_suffix(')')) {
                r.scalars.insert(k.to_string(), MetricValue::Unavailable(why.to_string()));
            } else {
                let x = v
                    .parse::<f64>()
                    .map_err(|e| Error::format("metric report", format!("{k}: {e}")))?;
                r.scalars.insert(k.to_string(), MetricValue::Value(x));
            }
        }
        Ok(r)
    }
}
