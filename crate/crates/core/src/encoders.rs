//! Per-modality feature encoders.
//!
//! Each branch flattens a sliding window of `context` raw frames and maps it
//! through two affine layers with a ReLU between them, producing one
//! embedding per window position (stride 1).

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{gaussian, Bound, ParamId, ParamSet};
use crate::similarity::{FeatureStream, Modality};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Raw frames per embedding.
    pub context: usize,
    pub raw_dim_audio: usize,
    pub raw_dim_video: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { context: 5, raw_dim_audio: 12, raw_dim_video: 16, embed_dim: 32, hidden: 64 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context < 1 {
            return Err(Error::Config("encoder context must be at least 1".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        if self.hidden == 0 || self.raw_dim_audio == 0 || self.raw_dim_video == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn raw_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Audio => self.raw_dim_audio,
            Modality::Visual => self.raw_dim_video,
        }
    }

    /// Number of embeddings produced from `frames` raw frames.
    pub fn features_for(&self, frames: usize) -> Result<usize> {
        if frames < self.context {
            return Err(Error::InsufficientFrames { need: self.context, got: frames });
        }
        Ok(frames - self.context + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Branch {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

fn prefix(modality: Modality) -> &'static str {
    match modality {
        Modality::Audio => "enc.audio",
        Modality::Visual => "enc.video",
    }
}

impl Branch {
    fn new(params: &mut ParamSet, modality: Modality, w1: Tensor, w2: Tensor, hidden: usize, embed: usize) -> Self {
        let p = prefix(modality);
        Self {
            w1: params.add(format!("{p}.w1"), w1),
            b1: params.add(format!("{p}.b1"), Tensor::zeros(&[hidden])),
            w2: params.add(format!("{p}.w2"), w2),
            b2: params.add(format!("{p}.b2"), Tensor::zeros(&[embed])),
        }
    }
}

/// Audio and visual encoders with disjoint parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    params: ParamSet,
    audio: Branch,
    video: Branch,
}

impl Encoder {
    /// Randomly initialised encoder: He-scaled first layer, fan-in-scaled
    /// second layer, zero biases.
    pub fn new(cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut branch = |params: &mut ParamSet, m: Modality| {
            let fan_in = cfg.context * cfg.raw_dim(m);
            let w1 = gaussian(&[fan_in, cfg.hidden], (2.0 / fan_in as f64).sqrt(), rng);
            let w2 = gaussian(&[cfg.hidden, cfg.embed_dim], (1.0 / cfg.hidden as f64).sqrt(), rng);
            Branch::new(params, m, w1, w2, cfg.hidden, cfg.embed_dim)
        };
        let audio = branch(&mut params, Modality::Audio);
        let video = branch(&mut params, Modality::Visual);
        Ok(Self { cfg, params, audio, video })
    }

    /// An encoder that computes exactly `window · map` per modality.
    ///
    /// The hidden layer holds `[map, -map]` and the output layer `[I; -I]`,
    /// so `relu(y) - relu(-y) = y` reproduces the linear map.
    pub fn from_linear_maps(context: usize, audio_map: &Tensor, video_map: &Tensor) -> Result<Self> {
        let (ra, ea) = audio_map.dims2()?;
        let (rv, ev) = video_map.dims2()?;
        if ea != ev {
            return Err(Error::Dimension(format!("linear maps embed to {ea} vs {ev} dims")));
        }
        if context == 0 || ra % context != 0 || rv % context != 0 {
            return Err(Error::Dimension("linear map rows must be a multiple of the context".into()));
        }
        let cfg = EncoderConfig {
            context,
            raw_dim_audio: ra / context,
            raw_dim_video: rv / context,
            embed_dim: ea,
            hidden: 2 * ea,
        };
        cfg.validate()?;
        let e = ea;
        let split = |map: &Tensor| {
            let rows = map.shape()[0];
            let mut w1 = vec![0.0; rows * 2 * e];
            for r in 0..rows {
                for k in 0..e {
                    w1[r * 2 * e + k] = map.at(r, k);
                    w1[r * 2 * e + e + k] = -map.at(r, k);
                }
            }
            Tensor::new(vec![rows, 2 * e], w1).expect("shape")
        };
        let mut w2 = vec![0.0; 2 * e * e];
        for k in 0..e {
            w2[k * e + k] = 1.0;
            w2[(e + k) * e + k] = -1.0;
        }
        let w2 = Tensor::new(vec![2 * e, e], w2)?;
        let mut params = ParamSet::new();
        let audio = Branch::new(&mut params, Modality::Audio, split(audio_map), w2.clone(), 2 * e, e);
        let video = Branch::new(&mut params, Modality::Visual, split(video_map), w2, 2 * e, e);
        Ok(Self { cfg, params, audio, video })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn branch(&self, modality: Modality) -> Branch {
        match modality {
            Modality::Audio => self.audio,
            Modality::Visual => self.video,
        }
    }

    /// Overwrites one layer of one branch. Used for hand-built encoders.
    pub fn set_output_layer(&mut self, modality: Modality, w2: Tensor, b2: Tensor) -> Result<()> {
        let p = prefix(modality);
        self.params.set(&format!("{p}.w2"), w2)?;
        self.params.set(&format!("{p}.b2"), b2)
    }

    /// Embeds `raw[B, T, R]` into `[B * N, E]` with `N = T - context + 1`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, modality: Modality, raw: Var) -> Result<Var> {
        let r = *tape.shape(raw).last().unwrap_or(&0);
        if r != self.cfg.raw_dim(modality) {
            return Err(Error::Dimension(format!(
                "{modality:?} frames have {r} values, encoder expects {}",
                self.cfg.raw_dim(modality)
            )));
        }
        let br = self.branch(modality);
        let x = tape.unfold_time(raw, self.cfg.context)?;
        let h = tape.matmul(x, bound.var(br.w1))?;
        let h = tape.add_row_bias(h, bound.var(br.b1))?;
        let h = tape.relu(h);
        let y = tape.matmul(h, bound.var(br.w2))?;
        tape.add_row_bias(y, bound.var(br.b2))
    }

    /// Embeds one `T x R` clip.
    pub fn encode(&self, modality: Modality, raw: &Tensor) -> Result<FeatureStream> {
        Ok(self.encode_batch(modality, std::slice::from_ref(raw))?.remove(0))
    }

    /// Embeds several clips of equal length in one pass.
    pub fn encode_batch(&self, modality: Modality, raws: &[Tensor]) -> Result<Vec<FeatureStream>> {
        if raws.is_empty() {
            return Ok(Vec::new());
        }
        let (frames, _) = raws[0].dims2()?;
        let n = self.cfg.features_for(frames)?;
        let stacked = stack(raws)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(stacked);
        let y = self.forward(&mut tape, &bound, modality, x)?;
        let e = self.cfg.embed_dim;
        tape.value(y)
            .data()
            .chunks(n * e)
            .map(|c| FeatureStream::new(modality, Tensor::new(vec![n, e], c.to_vec())?))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.params.iter() {
            ck.insert(name, t.clone());
        }
        ck.insert("enc.context", Tensor::scalar(self.cfg.context as f64));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let context = ck.get("enc.context")?.data()[0] as usize;
        let dims = |name: &str| ck.get(name).and_then(Tensor::dims2);
        let (ra, hidden) = dims("enc.audio.w1")?;
        let (rv, _) = dims("enc.video.w1")?;
        let (_, embed) = dims("enc.audio.w2")?;
        if context == 0 || ra % context != 0 || rv % context != 0 {
            return Err(Error::Format("encoder context does not divide layer widths".into()));
        }
        let cfg = EncoderConfig {
            context,
            raw_dim_audio: ra / context,
            raw_dim_video: rv / context,
            embed_dim: embed,
            hidden,
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut params = ParamSet::new();
        let load = |params: &mut ParamSet, m: Modality| -> Result<Branch> {
            let p = prefix(m);
            let get = |s: &str| ck.get(&format!("{p}.{s}")).cloned();
            let br = Branch::new(params, m, get("w1")?, get("w2")?, hidden, embed);
            for s in ["w1", "b1", "w2", "b2"] {
                params.set(&format!("{p}.{s}"), get(s)?)?;
            }
            Ok(br)
        };
        let audio = load(&mut params, Modality::Audio)?;
        let video = load(&mut params, Modality::Visual)?;
        Ok(Self { cfg, params, audio, video })
    }
}

/// Stacks equal-shape `T x R` clips into `[B, T, R]`.
pub fn stack(raws: &[Tensor]) -> Result<Tensor> {
    let first = raws.first().ok_or_else(|| Error::Empty("no clips to stack".into()))?;
    let (t, r) = first.dims2()?;
    let mut data = Vec::with_capacity(raws.len() * t * r);
    for x in raws {
        if x.shape() != first.shape() {
            return Err(Error::Dimension(format!("clip shapes differ: {:?} vs {:?}", x.shape(), first.shape())));
        }
        data.extend_from_slice(x.data());
    }
    Tensor::new(vec![raws.len(), t, r], data)
}
