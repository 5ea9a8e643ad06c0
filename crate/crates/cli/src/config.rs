//! Sectioned `key = value` run configuration with defaults, file values and
//! command-line overrides, in increasing order of precedence.

use std::path::PathBuf;
use std::str::FromStr;

use ini::Ini;
use syncmatrix_core::eval::Method;
use syncmatrix_core::seed::derive_seed;
use syncmatrix_core::synthdata::GenConfig;
use syncmatrix_core::train::TrainConfig;
use syncmatrix_core::{EmbedLoss, EncoderConfig, Error, Result};

/// Every recognised `(section, key, default)`.
pub const DEFAULTS: &[(&str, &str, &str)] = &[
    ("run", "seed", "0"),
    ("run", "out_dir", "out"),
    ("gen", "latent_dim", "8"),
    ("gen", "raw_dim_audio", "12"),
    ("gen", "raw_dim_video", "16"),
    ("gen", "lengths", "11,13,15,20"),
    ("gen", "noise_sigma", "0.5"),
    ("gen", "occlusion_prob", "0.2"),
    ("gen", "occlusion_len", "4"),
    ("gen", "smoothness", "0.8"),
    ("gen", "train", "5000"),
    ("gen", "val", "500"),
    ("gen", "test", "2000"),
    ("encoder", "context", "5"),
    ("encoder", "embed_dim", "32"),
    ("encoder", "hidden", "64"),
    ("embed", "loss", "angular"),
    ("embed", "margin", "1"),
    ("embed", "frames", "15"),
    ("embed", "lr", "0.001"),
    ("embed", "batch_size", "32"),
    ("embed", "epochs", "20"),
    ("embed", "patience", "3"),
    ("cls", "conv1", "256"),
    ("cls", "conv2", "256"),
    ("cls", "conv3", "128"),
    ("cls", "lr", "0.001"),
    ("cls", "batch_size", "32"),
    ("cls", "epochs", "20"),
    ("cls", "patience", "3"),
    ("e2e", "lr", "0.0001"),
    ("e2e", "batch_size", "32"),
    ("e2e", "epochs", "20"),
    ("e2e", "patience", "3"),
    ("eval", "methods", "baseline,diag-avg,sync-cls,sync-e2e"),
    ("eval", "lengths", "11,13,15,20"),
    ("eval", "trials", "10"),
    ("eval", "clips_per_trial", "1000"),
];

/// Raw string settings in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: Vec<(&'static str, &'static str, String)>,
}

impl Default for Settings {
    fn default() -> Self {
        Self { values: DEFAULTS.iter().map(|&(s, k, v)| (s, k, v.to_owned())).collect() }
    }
}

impl Settings {
    fn slot(&mut self, section: &str, key: &str) -> Result<&mut String> {
        self.values
            .iter_mut()
            .find(|(s, k, _)| *s == section && *k == key)
            .map(|(_, _, v)| v)
            .ok_or_else(|| Error::Config(format!("unknown key {section}.{key}")))
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        *self.slot(section, key)? = value.trim().to_owned();
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> &str {
        self.values
            .iter()
            .find(|(s, k, _)| *s == section && *k == key)
            .map(|(_, _, v)| v.as_str())
            .unwrap_or_else(|| panic!("{section}.{key} is not a known key"))
    }

    /// Applies every entry of an INI document. Keys outside a section and
    /// unknown keys are errors.
    pub fn apply_ini(&mut self, text: &str) -> Result<()> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let section = section.ok_or_else(|| Error::Config(format!("key {key} must be inside a [section]")))?;
                self.set(section, key, value)?;
            }
        }
        Ok(())
    }

    /// Applies a `section.key` override.
    pub fn apply_override(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (section, key) =
            dotted.split_once('.').ok_or_else(|| Error::Config(format!("override {dotted:?} is not section.key")))?;
        self.set(section, key, value)
    }

    pub fn to_ini(&self) -> String {
        let mut ini = Ini::new();
        for (s, k, v) in &self.values {
            ini.with_section(Some(*s)).set(*k, v.as_str());
        }
        let mut out = Vec::new();
        ini.write_to(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("ini output is UTF-8")
    }
}

fn parse<T: FromStr>(s: &Settings, section: &str, key: &str) -> Result<T> {
    let raw = s.get(section, key);
    raw.parse().map_err(|_| Error::Config(format!("{section}.{key}: cannot parse {raw:?}")))
}

fn list<T: FromStr>(s: &Settings, section: &str, key: &str) -> Result<Vec<T>> {
    let raw = s.get(section, key);
    let items: Vec<T> = raw
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("{section}.{key}: bad entry {x:?}"))))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{section}.{key} is empty")));
    }
    Ok(items)
}

fn train_config(s: &Settings, section: &str, seed: u64) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        lr: parse(s, section, "lr")?,
        batch_size: parse(s, section, "batch_size")?,
        epochs: parse(s, section, "epochs")?,
        patience: parse(s, section, "patience")?,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Typed view of [`Settings`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Generator settings; `frames` is set per clip length.
    pub gen: GenConfig,
    pub gen_lengths: Vec<usize>,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub encoder: EncoderConfig,
    pub embed_loss: EmbedLoss,
    pub embed_frames: usize,
    pub embed_train: TrainConfig,
    pub cls_widths: (usize, usize, usize),
    pub cls_train: TrainConfig,
    pub e2e_train: TrainConfig,
    pub methods: Vec<Method>,
    pub eval_lengths: Vec<usize>,
    pub trials: usize,
    pub clips_per_trial: usize,
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let seed: u64 = parse(s, "run", "seed")?;
        let gen = GenConfig {
            latent_dim: parse(s, "gen", "latent_dim")?,
            raw_dim_audio: parse(s, "gen", "raw_dim_audio")?,
            raw_dim_video: parse(s, "gen", "raw_dim_video")?,
            frames: GenConfig::default().frames,
            noise_sigma: parse(s, "gen", "noise_sigma")?,
            occlusion_prob: parse(s, "gen", "occlusion_prob")?,
            occlusion_len: parse(s, "gen", "occlusion_len")?,
            smoothness: parse(s, "gen", "smoothness")?,
            seed,
        };
        let gen_lengths: Vec<usize> = list(s, "gen", "lengths")?;
        let eval_lengths: Vec<usize> = list(s, "eval", "lengths")?;
        for &frames in gen_lengths.iter().chain(&eval_lengths) {
            GenConfig { frames, ..gen.clone() }.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let encoder = EncoderConfig {
            context: parse(s, "encoder", "context")?,
            raw_dim_audio: gen.raw_dim_audio,
            raw_dim_video: gen.raw_dim_video,
            embed_dim: parse(s, "encoder", "embed_dim")?,
            hidden: parse(s, "encoder", "hidden")?,
        };
        encoder.validate()?;
        let embed_loss = match s.get("embed", "loss") {
            "angular" => EmbedLoss::Angular,
            "euclidean" => EmbedLoss::MultiwayEuclidean,
            "contrastive" => EmbedLoss::Contrastive { margin: parse(s, "embed", "margin")? },
            other => {
                return Err(Error::Config(format!(
                    "embed.loss must be angular, euclidean or contrastive, got {other:?}"
                )))
            }
        };
        let embed_frames = parse(s, "embed", "frames")?;
        let methods =
            list::<String>(s, "eval", "methods")?.iter().map(|m| Method::from_str(m)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed,
            out_dir: PathBuf::from(s.get("run", "out_dir")),
            gen,
            gen_lengths,
            train_count: parse(s, "gen", "train")?,
            val_count: parse(s, "gen", "val")?,
            test_count: parse(s, "gen", "test")?,
            encoder,
            embed_loss,
            embed_frames,
            embed_train: train_config(s, "embed", derive_seed(seed, "train.embed", 0))?,
            cls_widths: (parse(s, "cls", "conv1")?, parse(s, "cls", "conv2")?, parse(s, "cls", "conv3")?),
            cls_train: train_config(s, "cls", derive_seed(seed, "train.cls", 0))?,
            e2e_train: train_config(s, "e2e", derive_seed(seed, "train.e2e", 0))?,
            methods,
            eval_lengths,
            trials: parse(s, "eval", "trials")?,
            clips_per_trial: parse(s, "eval", "clips_per_trial")?,
        })
    }

    pub fn gen_for(&self, frames: usize) -> GenConfig {
        GenConfig { frames, ..self.gen.clone() }
    }

    /// Feature count of a clip with `frames` frames.
    pub fn features_for(&self, frames: usize) -> Result<usize> {
        self.encoder.features_for(frames)
    }
}
