//! Accuracy with and without the one-frame tolerance, relative error
//! reduction, and the repeated-trial benchmark.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::estimators::{diag_avg_offset, sliding_window_offset, SyncClsNet};
use crate::seed::derived_rng;
use crate::similarity::{Modality, OffsetLabel};
use crate::synthdata::{GenConfig, Generator, SyntheticClip};
use crate::tensor::Tensor;
use crate::train::similarity_matrices;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Baseline,
    DiagAvg,
    SyncCls,
    SyncE2e,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::DiagAvg, Method::SyncCls, Method::SyncE2e];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::DiagAvg => "diag-avg",
            Method::SyncCls => "sync-cls",
            Method::SyncE2e => "sync-e2e",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Percentage of predictions within `tolerance` frames of the truth.
pub fn accuracy(preds: &[OffsetLabel], truths: &[OffsetLabel], tolerance: u32) -> Result<f64> {
    if preds.is_empty() || truths.is_empty() {
        return Err(Error::Empty("accuracy of an empty prediction list".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::Dimension(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    let hits = preds.iter().zip(truths).filter(|(p, t)| p.offset().abs_diff(t.offset()) <= tolerance).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Relative error reduction of `method` over `baseline`, in percent.
pub fn rer(baseline: f64, method: f64) -> Result<f64> {
    if baseline >= 100.0 {
        return Err(Error::UndefinedRer);
    }
    let base_err = 100.0 - baseline;
    Ok(100.0 * (base_err - (100.0 - method)) / base_err)
}

/// Trained models the benchmark may draw on. Classifiers are keyed by the
/// feature count `N` they were built for.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub encoder: Option<Encoder>,
    pub cls: BTreeMap<usize, SyncClsNet>,
    pub e2e: BTreeMap<usize, (Encoder, SyncClsNet)>,
}

impl Models {
    fn encoder(&self, method: Method) -> Result<&Encoder> {
        self.encoder.as_ref().ok_or_else(|| Error::Config(format!("{method} needs a trained encoder")))
    }
}

/// Offsets predicted by `method` for each clip.
pub fn predict(method: Method, models: &Models, clips: &[SyntheticClip]) -> Result<Vec<OffsetLabel>> {
    let preds = match method {
        Method::Baseline => {
            let enc = models.encoder(method)?;
            let audio: Vec<Tensor> = clips.iter().map(|c| c.audio_raw.clone()).collect();
            let video: Vec<Tensor> = clips.iter().map(|c| c.video_raw.clone()).collect();
            let a = enc.encode_batch(Modality::Audio, &audio)?;
            let v = enc.encode_batch(Modality::Visual, &video)?;
            a.iter().zip(&v).map(|(a, v)| sliding_window_offset(a, v)).collect::<Result<Vec<_>>>()?
        }
        Method::DiagAvg => similarity_matrices(models.encoder(method)?, clips)?
            .iter()
            .map(diag_avg_offset)
            .collect::<Result<Vec<_>>>()?,
        Method::SyncCls => {
            let enc = models.encoder(method)?;
            let n = feature_count(enc, clips)?;
            let net = models.cls.get(&n).ok_or_else(|| Error::Config(format!("no sync-cls model for N={n}")))?;
            net.predict_many(&similarity_matrices(enc, clips)?)?
        }
        Method::SyncE2e => {
            let n = match models.e2e.values().next() {
                Some((enc, _)) => feature_count(enc, clips)?,
                None => return Err(Error::Config("no sync-e2e model".into())),
            };
            let (enc, net) = models.e2e.get(&n).ok_or_else(|| Error::Config(format!("no sync-e2e model for N={n}")))?;
            net.predict_many(&similarity_matrices(enc, clips)?)?
        }
    };
    Ok(preds.into_iter().map(|p| p.offset).collect())
}

fn feature_count(enc: &Encoder, clips: &[SyntheticClip]) -> Result<usize> {
    let frames = clips.first().ok_or_else(|| Error::Empty("no clips".into()))?.frames();
    enc.config().features_for(frames)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkPlan {
    pub methods: Vec<Method>,
    pub clip_lengths: Vec<usize>,
    pub trials: usize,
    pub clips_per_trial: usize,
    /// Generator settings; `frames` is overridden per clip length.
    pub gen: GenConfig,
    pub seed: u64,
}

impl Default for BenchmarkPlan {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            clip_lengths: vec![11, 13, 15, 20],
            trials: 10,
            clips_per_trial: 1000,
            gen: GenConfig::default(),
            seed: 0,
        }
    }
}

/// Test clips of one trial: fresh offsets and fresh noise.
pub fn trial_clips(gen: &Generator, seed: u64, trial: usize, count: usize) -> Vec<SyntheticClip> {
    let mut rng = derived_rng(seed, &format!("trial.{}", gen.config().frames), trial as u64);
    (0..count).map(|_| gen.generate_clip(&mut rng)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub frames: usize,
    pub tolerance: u32,
    pub mean: f64,
    pub std: f64,
    /// Relative to the baseline at the same length and tolerance.
    pub rer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub trials: usize,
    pub cells: Vec<Cell>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every method on `trials` freshly drawn test sets per clip length.
pub fn run_benchmark(plan: &BenchmarkPlan, models: &Models) -> Result<EvalReport> {
    if plan.trials == 0 || plan.clips_per_trial == 0 || plan.methods.is_empty() || plan.clip_lengths.is_empty() {
        return Err(Error::Config("benchmark needs methods, lengths, trials and clips".into()));
    }
    let mut cells = Vec::new();
    for &frames in &plan.clip_lengths {
        let gen = Generator::new(GenConfig { frames, ..plan.gen.clone() })?;
        let per_trial: Vec<Vec<[f64; 2]>> = (0..plan.trials)
            .into_par_iter()
            .map(|t| {
                let clips = trial_clips(&gen, plan.seed, t, plan.clips_per_trial);
                let truths: Vec<OffsetLabel> = clips.iter().map(|c| c.truth).collect();
                plan.methods
                    .iter()
                    .map(|&m| {
                        let preds = predict(m, models, &clips)?;
                        Ok([accuracy(&preds, &truths, 0)?, accuracy(&preds, &truths, 1)?])
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for tolerance in [0u32, 1] {
            let stats: Vec<(f64, f64)> = (0..plan.methods.len())
                .map(|k| mean_std(&per_trial.iter().map(|t| t[k][tolerance as usize]).collect::<Vec<_>>()))
                .collect();
            let base = plan.methods.iter().position(|&m| m == Method::Baseline).map(|k| stats[k].0);
            for (&method, &(mean, std)) in plan.methods.iter().zip(&stats) {
                let rer = base.and_then(|b| rer(b, mean).ok());
                cells.push(Cell { method, frames, tolerance, mean, std, rer });
            }
        }
    }
    Ok(EvalReport { trials: plan.trials, cells })
}

impl EvalReport {
    pub fn cell(&self, method: Method, frames: usize, tolerance: u32) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.frames == frames && c.tolerance == tolerance)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,frames,tolerance,mean,std,rer\n");
        for c in &self.cells {
            let rer = c.rer.map_or_else(|| "NA".to_owned(), |r| format!("{r:.2}"));
            let _ = writeln!(out, "{},{},{},{:.2},{:.2},{rer}", c.method, c.frames, c.tolerance, c.mean, c.std);
        }
        out
    }

    /// One block per tolerance; rows are methods, columns clip lengths.
    pub fn to_table(&self) -> String {
        let mut lengths: Vec<usize> = self.cells.iter().map(|c| c.frames).collect();
        lengths.dedup();
        let mut methods: Vec<Method> = Vec::new();
        for c in &self.cells {
            if !methods.contains(&c.method) {
                methods.push(c.method);
            }
        }
        let mut out = String::new();
        for tolerance in [0u32, 1] {
            let title = if tolerance == 0 { "without tolerance" } else { "with +/-1 tolerance" };
            let _ = writeln!(out, "Accuracy (%) {title}, {} trials", self.trials);
            let _ = write!(out, "{:<10}", "method");
            for l in &lengths {
                let _ = write!(out, " | {:^24}", format!("{l} frames"));
            }
            out.push('\n');
            for &m in &methods {
                let _ = write!(out, "{m:<10}");
                for &l in &lengths {
                    let text = match self.cell(m, l, tolerance) {
                        Some(c) => {
                            let rer = c.rer.map_or_else(|| "-".to_owned(), |r| format!("{r:.2}"));
                            format!("{:6.2} ± {:5.2} {:>8}", c.mean, c.std, rer)
                        }
                        None => String::new(),
                    };
                    let _ = write!(out, " | {text:<24}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(xs: &[i32]) -> Vec<OffsetLabel> {
        xs.iter().map(|&o| OffsetLabel::new(o).unwrap()).collect()
    }

    #[test]
    fn hand_counted_accuracy() {
        let p = labels(&[-5, 0, 2, 4]);
        let t = labels(&[-4, 0, 0, 4]);
        assert_eq!(accuracy(&p, &t, 0).unwrap(), 50.0);
        assert_eq!(accuracy(&p, &t, 1).unwrap(), 75.0);
    }

    #[test]
    fn off_by_one_everywhere() {
        let p = labels(&[1, 2, -3]);
        let t = labels(&[0, 3, -2]);
        assert_eq!(accuracy(&p, &t, 0).unwrap(), 0.0);
        assert_eq!(accuracy(&p, &t, 1).unwrap(), 100.0);
    }

    #[test]
    fn empty_lists_are_rejected() {
        assert!(matches!(accuracy(&[], &[], 0), Err(Error::Empty(_))));
    }

    #[test]
    fn rer_edge_cases() {
        assert_eq!(rer(40.0, 40.0).unwrap(), 0.0);
        assert!(matches!(rer(100.0, 100.0), Err(Error::UndefinedRer)));
        assert!((rer(50.0, 75.0).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("viterbi".parse::<Method>().is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
