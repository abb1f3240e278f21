//! Experiment configuration: a TOML file, `key.path=value` overrides and a
//! content hash that every artifact embeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::avatar::PoseVector;
use crate::checkpoint::sha256_hex;
use crate::corpus::CorpusParams;
use crate::dae::DaeConfig;
use crate::error::{Error, Result};
use crate::speech2latent::S2lConfig;
use crate::video::NoiseMode;

/// Overrides `output_dir` when set; `--out` takes precedence over both.
pub const OUTPUT_ENV: &str = "DAETALKER_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoseSpec {
    Natural,
    Fixed { roll: f64, pitch: f64, yaw: f64 },
    /// `frame roll pitch yaw` table, one row per output frame.
    Trajectory { path: PathBuf },
    /// Ground-truth corpus poses of the inference window.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub num_infer_steps: usize,
    pub noise_mode: NoiseMode,
    pub noise_seed: u64,
    pub pose: PoseSpec,
    /// Window into the held-out split, seconds from its start.
    pub start_s: f64,
    pub duration_s: f64,
    /// External `features.tsv`; the held-out window is used when absent.
    pub features: Option<PathBuf>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            num_infer_steps: 100,
            noise_mode: NoiseMode::Shared,
            noise_seed: 0,
            pose: PoseSpec::Natural,
            start_s: 0.0,
            duration_s: 10.0,
            features: None,
        }
    }
}

impl InferenceConfig {
    pub fn pose_fixed(&self) -> Option<PoseVector> {
        match self.pose {
            PoseSpec::Fixed { roll, pitch, yaw } => Some(PoseVector::new(roll, pitch, yaw)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Noise seeds compared in the shared-noise ablation.
    pub noise_seeds: usize,
    /// Training seeds per arm in the speech2latent ablations.
    pub train_seeds: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            noise_seeds: 5,
            train_seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusParams,
    pub dae: DaeConfig,
    pub s2l: S2lConfig,
    pub inference: InferenceConfig,
    pub ablation: AblationConfig,
    /// Decode steps used when measuring reconstruction quality.
    pub eval_infer_steps: usize,
    /// Held-out frames used for reconstruction metrics (evenly spaced).
    pub eval_frames: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusParams::default(),
            dae: DaeConfig::default(),
            s2l: S2lConfig::default(),
            inference: InferenceConfig::default(),
            ablation: AblationConfig::default(),
            eval_infer_steps: 100,
            eval_frames: 64,
            output_dir: PathBuf::from("daetalker-out"),
        }
    }
}

fn toml_value(raw: &str) -> toml::Value {
    // anything that is not a TOML literal is taken as a bare string
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format("config", format!("{}: {detail}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Applies `a.b.c=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override {o:?} is not KEY=VALUE")))?;
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut node = &mut root;
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::invalid(format!("override {key}: {} is not a table", parts[..i].join("."))))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), toml_value(raw.trim()));
                    break;
                }
                node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        root.try_into().map_err(|e: toml::de::Error| Error::invalid(format!("override: {}", e.message())))
    }

    /// Sets every seed (corpus, models, inference noise) to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.dae.seed = seed;
        self.s2l.seed = seed;
        self.inference.noise_seed = seed;
        self
    }

    /// Image geometry and sizes flow from the corpus into the models.
    pub fn dae_config(&self) -> DaeConfig {
        DaeConfig {
            height: self.corpus.height,
            width: self.corpus.width,
            ..self.dae.clone()
        }
    }

    pub fn s2l_config(&self) -> S2lConfig {
        S2lConfig {
            feature_dim: self.corpus.feature_dim,
            feature_rate_hz: self.corpus.feature_rate_hz,
            fps: self.corpus.fps,
            latent_dim: self.dae.latent_dim,
            ..self.s2l.clone()
        }
    }

    fn hash_of(value: serde_json::Value) -> String {
        sha256_hex(value.to_string().as_bytes())[..16].to_string()
    }

    /// Hash of everything except the output location.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("output_dir");
        Self::hash_of(v)
    }

    pub fn corpus_hash(&self) -> String {
        Self::hash_of(serde_json::json!({ "corpus": self.corpus }))
    }

    /// Inputs that determine the trained decoder and its latents.
    pub fn dae_hash(&self) -> String {
        Self::hash_of(serde_json::json!({ "corpus": self.corpus, "dae": self.dae, "eval": [self.eval_infer_steps, self.eval_frames] }))
    }

    pub fn s2l_hash(&self) -> String {
        Self::hash_of(serde_json::json!({ "dae": self.dae_hash(), "s2l": self.s2l }))
    }

    /// Output root: explicit flag, then environment, then the config.
    pub fn resolve_output(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| self.output_dir.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = ExperimentConfig::default();
        c.inference.pose = PoseSpec::Fixed {
            roll: 1.5,
            pitch: -2.0,
            yaw: 0.0,
        };
        c.inference.features = Some("x/features.tsv".into());
        let text = c.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = ExperimentConfig::from_toml("[dae]\nlatent_dim = 16\n").unwrap();
        assert_eq!(c.dae.latent_dim, 16);
        assert_eq!(c.dae.num_steps, 1000);
        assert_eq!(c.s2l.batch_size, 16);
        assert!(ExperimentConfig::from_toml("[dae]\nlatent_dims = 16\n").is_err());
    }

    #[test]
    fn overrides_apply_by_path() {
        let c = ExperimentConfig::default()
            .with_overrides(&["dae.lr=5e-4", "s2l.pose_adaptor=false", "inference.noise_mode=independent"])
            .unwrap();
        assert_eq!(c.dae.lr, 5e-4);
        assert!(!c.s2l.pose_adaptor);
        assert_eq!(c.inference.noise_mode, NoiseMode::Independent);
        let c = c
            .with_overrides(&["inference.pose={kind=\"fixed\", roll=0.0, pitch=0.0, yaw=0.0}"])
            .unwrap();
        assert_eq!(c.inference.pose_fixed(), Some(PoseVector::FRONTAL));
        assert!(ExperimentConfig::default().with_overrides(&["dae.nope=1"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["dae.lr"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["dae.lr=abc"]).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.inference.noise_seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.dae_hash(), b.dae_hash());
        b.s2l.alpha = 0.5;
        assert_eq!(a.dae_hash(), b.dae_hash());
        assert_ne!(a.s2l_hash(), b.s2l_hash());
    }
}
