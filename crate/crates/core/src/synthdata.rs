//! Seeded paired audio/visual streams with planted offsets.
//!
//! A smooth latent walk drives both modalities through fixed random mixing
//! maps. Audio frame `t` observes latent step `t + 5`, visual frame `t`
//! observes step `t + 5 - o`, so a negative offset means the visual stream
//! leads. Occluded visual frames are replaced by latent-free noise.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, derived_rng, rng_from};
use crate::similarity::{OffsetLabel, MAX_OFFSET, NUM_CLASSES};
use crate::tensor::Tensor;

/// Shortest clip for which every offset leaves a band in the feature matrix.
pub const MIN_FRAMES: usize = 10;
const PAD: usize = MAX_OFFSET as usize;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub latent_dim: usize,
    pub raw_dim_audio: usize,
    pub raw_dim_video: usize,
    pub frames: usize,
    pub noise_sigma: f64,
    pub occlusion_prob: f64,
    pub occlusion_len: usize,
    /// Autoregressive coefficient of the latent walk.
    pub smoothness: f64,
    /// Seeds the mixing maps.
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            raw_dim_audio: 12,
            raw_dim_video: 16,
            frames: 15,
            noise_sigma: 0.5,
            occlusion_prob: 0.2,
            occlusion_len: 4,
            smoothness: 0.8,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// No observation noise and no occlusion.
    pub fn noiseless() -> Self {
        Self { noise_sigma: 0.0, occlusion_prob: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.raw_dim_audio < self.latent_dim || self.raw_dim_video < self.latent_dim {
            return bad(format!(
                "raw dims ({}, {}) must be at least latent_dim {}",
                self.raw_dim_audio, self.raw_dim_video, self.latent_dim
            ));
        }
        if self.frames < MIN_FRAMES {
            return bad(format!("frames must be at least {MIN_FRAMES}, got {}", self.frames));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad(format!("occlusion_prob must lie in [0, 1], got {}", self.occlusion_prob));
        }
        if self.occlusion_len > self.frames {
            return bad(format!("occlusion_len {} exceeds frames {}", self.occlusion_len, self.frames));
        }
        if !(0.0..1.0).contains(&self.smoothness) {
            return bad(format!("smoothness must lie in [0, 1), got {}", self.smoothness));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "latent_dim={}\nraw_dim_audio={}\nraw_dim_video={}\nframes={}\nnoise_sigma={}\nocclusion_prob={}\nocclusion_len={}\nsmoothness={}\nseed={}\n",
            self.latent_dim,
            self.raw_dim_audio,
            self.raw_dim_video,
            self.frames,
            self.noise_sigma,
            self.occlusion_prob,
            self.occlusion_len,
            self.smoothness,
            self.seed
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Format(format!("expected key=value, got {line:?}")))?;
            let value = value.trim();
            let int = || value.parse::<usize>().map_err(|_| Error::Format(format!("bad value for {key}: {value:?}")));
            let float = || value.parse::<f64>().map_err(|_| Error::Format(format!("bad value for {key}: {value:?}")));
            match key.trim() {
                "latent_dim" => cfg.latent_dim = int()?,
                "raw_dim_audio" => cfg.raw_dim_audio = int()?,
                "raw_dim_video" => cfg.raw_dim_video = int()?,
                "frames" => cfg.frames = int()?,
                "noise_sigma" => cfg.noise_sigma = float()?,
                "occlusion_prob" => cfg.occlusion_prob = float()?,
                "occlusion_len" => cfg.occlusion_len = int()?,
                "smoothness" => cfg.smoothness = float()?,
                "seed" => {
                    cfg.seed = value.parse().map_err(|_| Error::Format(format!("bad seed {value:?}")))?;
                }
                other => return Err(Error::Format(format!("unknown generator key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub audio_raw: Tensor,
    pub video_raw: Tensor,
    pub truth: OffsetLabel,
    /// One flag per visual frame.
    pub occluded: Vec<bool>,
}

impl SyntheticClip {
    pub fn frames(&self) -> usize {
        self.occluded.len()
    }

    /// Maximal runs of occluded frames as inclusive `(first, last)` pairs.
    pub fn occluded_spans(&self) -> Vec<(usize, usize)> {
        let mut spans = Vec::new();
        let mut start = None;
        for (t, &o) in self.occluded.iter().chain(std::iter::once(&false)).enumerate() {
            match (o, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    spans.push((s, t - 1));
                    start = None;
                }
                _ => {}
            }
        }
        spans
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Random `rows x cols` matrix with orthogonal columns of norm `1/sqrt(cols)`,
/// so a unit-variance latent yields unit expected frame energy.
fn mixing_map(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let mut cs: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while cs.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| normal(rng)).collect();
        for c in &cs {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            cs.push(v);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (j, c) in cs.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            data[i * cols + j] = x / (cols as f64).sqrt();
        }
    }
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// Clip generator with fixed mixing maps.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GenConfig,
    audio_mix: Tensor,
    video_mix: Tensor,
}

impl Generator {
    pub fn new(cfg: GenConfig) -> Result<Self> {
        cfg.validate()?;
        let audio_mix = mixing_map(cfg.raw_dim_audio, cfg.latent_dim, &mut derived_rng(cfg.seed, "mix.audio", 0));
        let video_mix = mixing_map(cfg.raw_dim_video, cfg.latent_dim, &mut derived_rng(cfg.seed, "mix.video", 0));
        Ok(Self { cfg, audio_mix, video_mix })
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    pub fn audio_mix(&self) -> &Tensor {
        &self.audio_mix
    }

    pub fn video_mix(&self) -> &Tensor {
        &self.video_mix
    }

    /// Clip with an offset drawn uniformly from the eleven classes.
    pub fn generate_clip(&self, rng: &mut impl Rng) -> SyntheticClip {
        let truth = OffsetLabel::from_class(rng.random_range(0..NUM_CLASSES)).expect("class in range");
        self.generate_clip_with_offset(truth, rng)
    }

    /// Draws the same random values for every offset, so clips generated
    /// from equal generator states differ only by the planted shift.
    pub fn generate_clip_with_offset(&self, truth: OffsetLabel, rng: &mut impl Rng) -> SyntheticClip {
        let c = &self.cfg;
        let (t_len, l) = (c.frames, c.latent_dim);
        let steps = t_len + 2 * PAD;
        let innov = (1.0 - c.smoothness * c.smoothness).sqrt();
        let mut z = vec![0.0; steps * l];
        for k in 0..steps {
            for j in 0..l {
                let e = normal(rng);
                z[k * l + j] = if k == 0 { e } else { c.smoothness * z[(k - 1) * l + j] + innov * e };
            }
        }
        let project = |mix: &Tensor, step: usize, out: &mut [f64]| {
            let zk = &z[step * l..(step + 1) * l];
            for (r, o) in out.iter_mut().enumerate() {
                *o = mix.row(r).iter().zip(zk).map(|(a, b)| a * b).sum();
            }
        };
        let (ra, rv) = (c.raw_dim_audio, c.raw_dim_video);
        let mut audio = vec![0.0; t_len * ra];
        let mut video = vec![0.0; t_len * rv];
        let o = truth.offset();
        for t in 0..t_len {
            project(&self.audio_mix, t + PAD, &mut audio[t * ra..(t + 1) * ra]);
            project(&self.video_mix, (t as i32 + PAD as i32 - o) as usize, &mut video[t * rv..(t + 1) * rv]);
        }
        for x in audio.iter_mut().chain(video.iter_mut()) {
            *x += c.noise_sigma * normal(rng);
        }
        let hit = rng.random::<f64>() < c.occlusion_prob;
        let start = rng.random_range(0..=t_len - c.occlusion_len);
        let fill = (1.0 / rv as f64 + c.noise_sigma * c.noise_sigma).sqrt();
        let mut occluded = vec![false; t_len];
        for t in start..start + c.occlusion_len {
            for r in 0..rv {
                let x = fill * normal(rng);
                if hit {
                    video[t * rv + r] = x;
                }
            }
            occluded[t] = hit;
        }
        audio.iter_mut().chain(video.iter_mut()).for_each(|x| *x = f32_round(*x));
        SyntheticClip {
            audio_raw: Tensor::new(vec![t_len, ra], audio).expect("shape"),
            video_raw: Tensor::new(vec![t_len, rv], video).expect("shape"),
            truth,
            occluded,
        }
    }

    /// Clip `index` of a dataset seeded with `seed`, at the given offset.
    pub fn clip_at(&self, seed: u64, index: u64, truth: OffsetLabel) -> SyntheticClip {
        self.generate_clip_with_offset(truth, &mut derived_rng(seed, "gen", index))
    }

    /// Fixed linear encoder mapping a raw window to the differences of
    /// consecutive recovered latent steps. Exact on noiseless input, and
    /// nearly uncorrelated between neighbouring time steps.
    pub fn difference_encoder(&self, context: usize) -> Result<Encoder> {
        if context < 2 {
            return Err(Error::Argument("difference encoder needs a context of at least 2".into()));
        }
        self.linear_encoder(context, context - 1, |k, f| match f {
            _ if f == k + 1 => 1.0,
            _ if f == k => -1.0,
            _ => 0.0,
        })
    }

    /// Fixed linear encoder returning the innovation `z_t - smoothness * z_(t-1)`
    /// of the recovered latent process. On noiseless input the embeddings are
    /// independent across time steps.
    pub fn innovation_encoder(&self) -> Result<Encoder> {
        let phi = self.cfg.smoothness;
        self.linear_encoder(2, 1, move |_, f| if f == 1 { 1.0 } else { -phi })
    }

    /// Fixed linear encoder that stacks the recovered latent steps of a raw
    /// window. Neighbouring embeddings share most of their window, so
    /// similarity bands are wide.
    pub fn window_encoder(&self, context: usize) -> Result<Encoder> {
        self.linear_encoder(context, context, |k, f| if k == f { 1.0 } else { 0.0 })
    }

    /// Output block `k` is `sum_f weight(k, f) * unmix(frame f)`.
    fn linear_encoder(&self, context: usize, blocks: usize, weight: impl Fn(usize, usize) -> f64) -> Result<Encoder> {
        let l = self.cfg.latent_dim;
        let embed = blocks * l;
        let build = |mix: &Tensor| {
            let r = mix.shape()[0];
            let mut map = vec![0.0; context * r * embed];
            for k in 0..blocks {
                for f in 0..context {
                    let w = weight(k, f);
                    if w == 0.0 {
                        continue;
                    }
                    for row in 0..r {
                        for j in 0..l {
                            map[(f * r + row) * embed + k * l + j] += w * mix.at(row, j);
                        }
                    }
                }
            }
            Tensor::new(vec![context * r, embed], map).expect("shape")
        };
        Encoder::from_linear_maps(context, &build(&self.audio_mix), &build(&self.video_mix))
    }
}

/// Offsets for `count` clips, balanced to within one per class, shuffled.
pub fn balanced_offsets(count: usize, seed: u64) -> Vec<OffsetLabel> {
    let mut labels: Vec<OffsetLabel> =
        (0..count).map(|k| OffsetLabel::from_class(k % NUM_CLASSES).expect("class in range")).collect();
    labels.shuffle(&mut derived_rng(seed, "labels", 0));
    labels
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub seed: u64,
    pub clips: Vec<SyntheticClip>,
    pub clip_seeds: Vec<u64>,
}

/// Label-balanced clips; clip `k` uses the sub-seed `(seed, "gen", k)`.
pub fn generate_dataset(cfg: &GenConfig, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Argument("dataset needs at least one clip".into()));
    }
    let generator = Generator::new(cfg.clone())?;
    let offsets = balanced_offsets(count, seed);
    let clip_seeds: Vec<u64> = (0..count as u64).map(|k| derive_seed(seed, "gen", k)).collect();
    let clips = offsets
        .iter()
        .zip(&clip_seeds)
        .map(|(&o, &s)| generator.generate_clip_with_offset(o, &mut rng_from(s)))
        .collect();
    Ok(Dataset { config: cfg.clone(), seed, clips, clip_seeds })
}

fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(format!("{split}.bin")), dir.join(format!("{split}.csv")), dir.join(format!("{split}.gen")))
}

fn format_spans(spans: &[(usize, usize)]) -> String {
    spans.iter().map(|(a, b)| format!("{a}-{b}")).collect::<Vec<_>>().join(";")
}

fn parse_spans(text: &str, frames: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; frames];
    for span in text.split(';').filter(|s| !s.is_empty()) {
        let (a, b) = span.split_once('-').ok_or_else(|| Error::Format(format!("bad span {span:?}")))?;
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad span {span:?}")));
        let (a, b) = (parse(a)?, parse(b)?);
        if a > b || b >= frames {
            return Err(Error::Format(format!("span {span:?} outside {frames} frames")));
        }
        mask[a..=b].iter_mut().for_each(|m| *m = true);
    }
    Ok(mask)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Clip count per offset class.
    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for c in &self.clips {
            h[c.truth.class_index()] += 1;
        }
        h
    }

    pub fn manifest(&self) -> String {
        let mut out = String::from("clip_id,frames,offset,occluded_spans,seed\n");
        for (k, (c, s)) in self.clips.iter().zip(&self.clip_seeds).enumerate() {
            let _ = writeln!(out, "{k},{},{},{},{s}", c.frames(), c.truth.offset(), format_spans(&c.occluded_spans()));
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (k, c) in self.clips.iter().enumerate() {
            ck.insert(format!("clip.{k}.audio"), c.audio_raw.clone());
            ck.insert(format!("clip.{k}.video"), c.video_raw.clone());
        }
        ck
    }

    /// Writes `<split>.bin`, `<split>.csv` and `<split>.gen` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, split: &str) -> Result<()> {
        let (bin, csv, gen) = split_paths(dir.as_ref(), split);
        fs::create_dir_all(dir.as_ref())?;
        self.to_checkpoint().save(bin)?;
        fs::write(csv, self.manifest())?;
        fs::write(gen, format!("{}dataset_seed={}\n", self.config.to_text(), self.seed))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, split: &str) -> Result<Self> {
        let (bin, csv, gen) = split_paths(dir.as_ref(), split);
        let gen_text = fs::read_to_string(gen)?;
        let mut seed = None;
        let cfg_text: String = gen_text
            .lines()
            .filter(|l| match l.strip_prefix("dataset_seed=") {
                Some(v) => {
                    seed = v.trim().parse::<u64>().ok();
                    false
                }
                None => true,
            })
            .map(|l| format!("{l}\n"))
            .collect();
        let config = GenConfig::from_text(&cfg_text)?;
        let seed = seed.ok_or_else(|| Error::Format("generator file lacks dataset_seed".into()))?;
        let ck = Checkpoint::load(bin)?;
        let manifest = fs::read_to_string(csv)?;
        let mut lines = manifest.lines();
        if lines.next() != Some("clip_id,frames,offset,occluded_spans,seed") {
            return Err(Error::Format("unexpected manifest header".into()));
        }
        let mut clips = Vec::new();
        let mut clip_seeds = Vec::new();
        for (k, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!("manifest line {} has {} fields", k + 2, fields.len())));
            }
            let bad = || Error::Format(format!("malformed manifest line {}", k + 2));
            if fields[0].parse::<usize>().map_err(|_| bad())? != k {
                return Err(bad());
            }
            let frames: usize = fields[1].parse().map_err(|_| bad())?;
            let truth = OffsetLabel::new(fields[2].parse().map_err(|_| bad())?).map_err(|_| bad())?;
            let occluded = parse_spans(fields[3], frames)?;
            clip_seeds.push(fields[4].parse().map_err(|_| bad())?);
            let audio_raw = ck.get(&format!("clip.{k}.audio"))?.clone();
            let video_raw = ck.get(&format!("clip.{k}.video"))?.clone();
            if audio_raw.shape()[0] != frames || video_raw.shape()[0] != frames {
                return Err(Error::Format(format!("clip {k} length disagrees with manifest")));
            }
            clips.push(SyntheticClip { audio_raw, video_raw, truth, occluded });
        }
        if ck.len() != 2 * clips.len() {
            return Err(Error::Format("dataset file and manifest disagree on clip count".into()));
        }
        Ok(Self { config, seed, clips, clip_seeds })
    }
}
