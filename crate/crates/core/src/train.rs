//! Training loops for the embedding, the Sync-cls classifier, and the jointly
//! trained Sync-e2e model. All share one mini-batch/early-stopping driver.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::encoders::{stack, Encoder};
use crate::error::{Error, Result};
use crate::estimators::{diag_avg_offset, Forward, Prediction, SyncClsNet};
use crate::losses::{
    angular_multiway_on_tape, contrastive_on_tape, multiway_euclidean_on_tape, AngularScale, EmbedLoss,
};
use crate::nn::{Adam, Bound, ParamSet};
use crate::seed::derived_rng;
use crate::similarity::{band_indices, similarity_on_tape, Modality, OffsetLabel, SimilarityMatrix};
use crate::synthdata::SyntheticClip;
use crate::tensor::Tensor;

/// Learning rate of joint fine-tuning.
pub const FINE_TUNE_LR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 32, epochs: 20, patience: 3, seed: 0 }
    }
}

impl TrainConfig {
    /// Defaults for joint fine-tuning, which starts from trained models and
    /// uses a smaller step.
    pub fn fine_tune() -> Self {
        Self { lr: FINE_TUNE_LR, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Loss of the very first mini-batch, before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn best_accuracy(&self) -> f64 {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch).map_or(0.0, |e| e.val_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.6},{:.4}\n", e.epoch, e.train_loss, e.val_accuracy));
        }
        out
    }
}

fn as_training_error(e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Training(format!("diverged: {m}")),
        other => other,
    }
}

/// Shuffled mini-batches per epoch, best-on-validation checkpointing and
/// early stopping. Trailing batches of one sample are dropped.
fn fit<S: Clone>(
    mut state: S,
    n_train: usize,
    cfg: &TrainConfig,
    label: &str,
    mut step: impl FnMut(&mut S, &[usize]) -> Result<f64>,
    mut validate: impl FnMut(&S) -> Result<f64>,
) -> Result<(S, TrainLog)> {
    cfg.validate()?;
    if n_train < 2 {
        return Err(Error::Empty("training needs at least two samples".into()));
    }
    let mut log = TrainLog::default();
    let mut best: Option<(f64, S)> = None;
    let mut wait = 0;
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut derived_rng(cfg.seed, label, epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let loss = step(&mut state, batch).map_err(as_training_error)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss in epoch {epoch}")));
            }
            if epoch == 1 && batches == 0 {
                log.initial_loss = loss;
            }
            total += loss;
            batches += 1;
        }
        let val_accuracy = validate(&state)?;
        log.epochs.push(EpochLog { epoch, train_loss: total / batches as f64, val_accuracy });
        if best.as_ref().is_none_or(|(b, _)| val_accuracy > *b) {
            best = Some((val_accuracy, state.clone()));
            log.best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok((best.expect("at least one epoch").1, log))
}

fn accuracy_of(preds: &[Prediction], truths: impl Iterator<Item = OffsetLabel>) -> f64 {
    let hits = preds.iter().zip(truths).filter(|(p, t)| p.offset == *t).count();
    100.0 * hits as f64 / preds.len().max(1) as f64
}

/// Similarity matrices of `clips` under a frozen encoder.
pub fn similarity_matrices(enc: &Encoder, clips: &[SyntheticClip]) -> Result<Vec<SimilarityMatrix>> {
    let per_chunk: Vec<Result<Vec<SimilarityMatrix>>> = clips
        .par_chunks(64)
        .map(|chunk| {
            let audio: Vec<Tensor> = chunk.iter().map(|c| c.audio_raw.clone()).collect();
            let video: Vec<Tensor> = chunk.iter().map(|c| c.video_raw.clone()).collect();
            let a = enc.encode_batch(Modality::Audio, &audio)?;
            let v = enc.encode_batch(Modality::Visual, &video)?;
            a.iter().zip(&v).map(|(a, v)| crate::similarity::build_similarity_matrix(a, v)).collect()
        })
        .collect();
    Ok(per_chunk.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

/// Diag-avg accuracy (tolerance 0) of an encoder on labelled clips.
pub fn diag_avg_accuracy(enc: &Encoder, clips: &[SyntheticClip]) -> Result<f64> {
    let preds = similarity_matrices(enc, clips)?.iter().map(diag_avg_offset).collect::<Result<Vec<_>>>()?;
    Ok(accuracy_of(&preds, clips.iter().map(|c| c.truth)))
}

fn check_same_length(clips: &[SyntheticClip]) -> Result<usize> {
    let frames = clips.first().ok_or_else(|| Error::Empty("no clips".into()))?.frames();
    if clips.iter().any(|c| c.frames() != frames) {
        return Err(Error::Dimension("all clips in a training set must have the same length".into()));
    }
    Ok(frames)
}

fn raw_batch(clips: &[SyntheticClip], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let audio: Vec<Tensor> = idx.iter().map(|&k| clips[k].audio_raw.clone()).collect();
    let video: Vec<Tensor> = idx.iter().map(|&k| clips[k].video_raw.clone()).collect();
    Ok((stack(&audio)?, stack(&video)?))
}

#[derive(Clone)]
struct EmbedState {
    enc: Encoder,
    scale: ParamSet,
    enc_opt: Adam,
    scale_opt: Adam,
}

fn scale_params(s: AngularScale) -> ParamSet {
    let mut p = ParamSet::new();
    p.add("angular.w", Tensor::scalar(s.w));
    p.add("angular.b", Tensor::scalar(s.b));
    p
}

fn read_scale(p: &ParamSet) -> AngularScale {
    let get = |n: &str| p.get(p.id(n).expect("scale parameter")).data()[0];
    AngularScale { w: get("angular.w"), b: get("angular.b") }
}

/// Embedding loss on one mini-batch of clips. Matched pairs are the
/// truth-band entries of each clip; multi-way losses contrast each pair with
/// the other pairs of the same clip.
#[allow(clippy::too_many_arguments)]
pub fn embedding_loss_on_tape(
    tape: &mut Tape,
    enc: &Encoder,
    bound: &Bound,
    audio: Var,
    video: Var,
    truths: &[OffsetLabel],
    loss: EmbedLoss,
    scale: Option<(Var, Var)>,
    rng: &mut impl Rng,
) -> Result<Var> {
    let fa = enc.forward(tape, bound, Modality::Audio, audio)?;
    let fv = enc.forward(tape, bound, Modality::Visual, video)?;
    let n = tape.shape(fa)[0] / truths.len().max(1);
    let mut pieces = Vec::with_capacity(truths.len());
    let mut ia = Vec::new();
    let mut iv = Vec::new();
    let mut labels = Vec::new();
    for (k, &truth) in truths.iter().enumerate() {
        let band = band_indices(n, truth)?;
        match loss {
            EmbedLoss::Contrastive { .. } => {
                for &(i, j) in &band {
                    ia.push(k * n + i);
                    iv.push(k * n + j);
                    labels.push(true);
                    let shift = rng.random_range(1..n);
                    ia.push(k * n + i);
                    iv.push(k * n + (j + shift) % n);
                    labels.push(false);
                }
            }
            EmbedLoss::MultiwayEuclidean | EmbedLoss::Angular => {
                let a = tape.gather_rows(fa, &band.iter().map(|&(i, _)| k * n + i).collect::<Vec<_>>())?;
                let v = tape.gather_rows(fv, &band.iter().map(|&(_, j)| k * n + j).collect::<Vec<_>>())?;
                let piece = match (loss, scale) {
                    (EmbedLoss::Angular, Some((w, b))) => angular_multiway_on_tape(tape, a, v, w, b)?,
                    (EmbedLoss::Angular, None) => {
                        return Err(Error::Argument("angular loss needs scale parameters".into()));
                    }
                    _ => multiway_euclidean_on_tape(tape, a, v)?,
                };
                pieces.push(piece);
            }
        }
    }
    if let EmbedLoss::Contrastive { margin } = loss {
        let a = tape.gather_rows(fa, &ia)?;
        let v = tape.gather_rows(fv, &iv)?;
        return contrastive_on_tape(tape, a, v, &labels, margin);
    }
    let mut total = pieces[0];
    for &p in &pieces[1..] {
        total = tape.add(total, p)?;
    }
    Ok(tape.scale(total, 1.0 / pieces.len() as f64))
}

/// Trains both encoders with the chosen objective. Validation accuracy is
/// Diag-avg accuracy on `val`.
pub fn train_embedding(
    enc: Encoder,
    train: &[SyntheticClip],
    val: &[SyntheticClip],
    loss: EmbedLoss,
    cfg: &TrainConfig,
) -> Result<(Encoder, AngularScale, TrainLog)> {
    check_same_length(train)?;
    check_same_length(val)?;
    let scale = scale_params(AngularScale::default());
    let state =
        EmbedState { enc_opt: Adam::new(enc.params(), cfg.lr), scale_opt: Adam::new(&scale, cfg.lr), enc, scale };
    let mut step_rng = derived_rng(cfg.seed, "embed.negatives", 0);
    let step = |s: &mut EmbedState, idx: &[usize]| -> Result<f64> {
        let (a, v) = raw_batch(train, idx)?;
        let truths: Vec<OffsetLabel> = idx.iter().map(|&k| train[k].truth).collect();
        let mut tape = Tape::new();
        let bound = s.enc.params().bind(&mut tape);
        let sb = s.scale.bind(&mut tape);
        let ids = (s.scale.id("angular.w").expect("w"), s.scale.id("angular.b").expect("b"));
        let (a, v) = (tape.constant(a), tape.constant(v));
        let l = embedding_loss_on_tape(
            &mut tape,
            &s.enc,
            &bound,
            a,
            v,
            &truths,
            loss,
            Some((sb.var(ids.0), sb.var(ids.1))),
            &mut step_rng,
        )?;
        let grads = tape.backward(l)?;
        let g = bound.grads(&grads, s.enc.params());
        s.enc_opt.step(s.enc.params_mut(), &g)?;
        if loss == EmbedLoss::Angular {
            let g = sb.grads(&grads, &s.scale);
            s.scale_opt.step(&mut s.scale, &g)?;
            let mut sc = read_scale(&s.scale);
            sc.clamp();
            s.scale = scale_params(sc);
        }
        Ok(tape.value(l).data()[0])
    };
    let (s, log) = fit(state, train.len(), cfg, "embed.shuffle", step, |s| diag_avg_accuracy(&s.enc, val))?;
    let sc = read_scale(&s.scale);
    Ok((s.enc, sc, log))
}

fn matrix_batch(matrices: &[(SimilarityMatrix, OffsetLabel)], idx: &[usize], n: usize) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::with_capacity(idx.len() * n * n);
    let mut targets = Vec::with_capacity(idx.len());
    for &k in idx {
        data.extend_from_slice(matrices[k].0.values().data());
        targets.push(matrices[k].1.class_index());
    }
    Ok((Tensor::new(vec![idx.len(), n, n], data)?, targets))
}

/// Accuracy (tolerance 0) of a classifier on labelled matrices.
pub fn synccls_accuracy(net: &SyncClsNet, data: &[(SimilarityMatrix, OffsetLabel)]) -> Result<f64> {
    let matrices: Vec<SimilarityMatrix> = data.iter().map(|(m, _)| m.clone()).collect();
    let preds = net.predict_many(&matrices)?;
    Ok(accuracy_of(&preds, data.iter().map(|(_, t)| *t)))
}

/// Cross-entropy training of the classifier on pre-extracted matrices.
pub fn train_synccls(
    net: SyncClsNet,
    train: &[(SimilarityMatrix, OffsetLabel)],
    val: &[(SimilarityMatrix, OffsetLabel)],
    cfg: &TrainConfig,
) -> Result<(SyncClsNet, TrainLog)> {
    if val.is_empty() {
        return Err(Error::Empty("classifier training needs validation data".into()));
    }
    let n = net.n();
    if let Some((m, _)) = train.iter().chain(val).find(|(m, _)| m.n() != n) {
        return Err(Error::Dimension(format!("classifier built for N={n}, got {}x{}", m.n(), m.n())));
    }
    let opt = Adam::new(net.params(), cfg.lr);
    let step = |(net, opt): &mut (SyncClsNet, Adam), idx: &[usize]| -> Result<f64> {
        let (x, targets) = matrix_batch(train, idx, n)?;
        let mut tape = Tape::new();
        let bound = net.params().bind(&mut tape);
        let x = tape.constant(x);
        let out = net.forward(&mut tape, &bound, x, true)?;
        let l = tape.cross_entropy(out.logits, &targets)?;
        let grads = tape.backward(l)?;
        let g = bound.grads(&grads, net.params());
        opt.step(net.params_mut(), &g)?;
        net.update_running(&out.stats);
        Ok(tape.value(l).data()[0])
    };
    let (state, log) = fit((net, opt), train.len(), cfg, "cls.shuffle", step, |(net, _)| synccls_accuracy(net, val))?;
    Ok((state.0, log))
}

/// Raw clips through both encoders, the differentiable similarity matrix,
/// and the classifier.
#[allow(clippy::too_many_arguments)]
pub fn e2e_forward(
    tape: &mut Tape,
    enc: &Encoder,
    enc_bound: &Bound,
    net: &SyncClsNet,
    net_bound: &Bound,
    audio: Var,
    video: Var,
    train: bool,
) -> Result<Forward> {
    let b = tape.shape(audio)[0];
    let fa = enc.forward(tape, enc_bound, Modality::Audio, audio)?;
    let fv = enc.forward(tape, enc_bound, Modality::Visual, video)?;
    let (rows, e) = tape.value(fa).dims2()?;
    let n = rows / b;
    if n != net.n() {
        return Err(Error::Dimension(format!("clips give {n} features, classifier expects {}", net.n())));
    }
    let fa = tape.reshape(fa, &[b, n, e])?;
    let fv = tape.reshape(fv, &[b, n, e])?;
    let m = similarity_on_tape(tape, fa, fv)?;
    net.forward(tape, net_bound, m, train)
}

/// Inference-mode predictions of a jointly trained model on raw clips.
pub fn e2e_predict(enc: &Encoder, net: &SyncClsNet, clips: &[SyntheticClip]) -> Result<Vec<Prediction>> {
    let matrices = similarity_matrices(enc, clips)?;
    net.predict_many(&matrices)
}

fn e2e_accuracy(enc: &Encoder, net: &SyncClsNet, clips: &[SyntheticClip]) -> Result<f64> {
    Ok(accuracy_of(&e2e_predict(enc, net, clips)?, clips.iter().map(|c| c.truth)))
}

#[derive(Clone)]
struct JointState {
    enc: Encoder,
    net: SyncClsNet,
    enc_opt: Adam,
    net_opt: Adam,
}

/// Joint training of encoders and classifier under the classification loss,
/// starting from the given models.
pub fn train_synce2e(
    enc: Encoder,
    net: SyncClsNet,
    train: &[SyntheticClip],
    val: &[SyntheticClip],
    cfg: &TrainConfig,
) -> Result<(Encoder, SyncClsNet, TrainLog)> {
    check_same_length(train)?;
    check_same_length(val)?;
    let state =
        JointState { enc_opt: Adam::new(enc.params(), cfg.lr), net_opt: Adam::new(net.params(), cfg.lr), enc, net };
    let step = |s: &mut JointState, idx: &[usize]| -> Result<f64> {
        let (a, v) = raw_batch(train, idx)?;
        let targets: Vec<usize> = idx.iter().map(|&k| train[k].truth.class_index()).collect();
        let mut tape = Tape::new();
        let eb = s.enc.params().bind(&mut tape);
        let nb = s.net.params().bind(&mut tape);
        let (a, v) = (tape.constant(a), tape.constant(v));
        let out = e2e_forward(&mut tape, &s.enc, &eb, &s.net, &nb, a, v, true)?;
        let l = tape.cross_entropy(out.logits, &targets)?;
        let grads = tape.backward(l)?;
        let g = eb.grads(&grads, s.enc.params());
        s.enc_opt.step(s.enc.params_mut(), &g)?;
        let g = nb.grads(&grads, s.net.params());
        s.net_opt.step(s.net.params_mut(), &g)?;
        s.net.update_running(&out.stats);
        Ok(tape.value(l).data()[0])
    };
    let (s, log) = fit(state, train.len(), cfg, "e2e.shuffle", step, |s| e2e_accuracy(&s.enc, &s.net, val))?;
    Ok((s.enc, s.net, log))
}

/// Mean truth-band similarity minus mean off-band similarity, averaged over clips.
pub fn band_contrast(matrices: &[SimilarityMatrix], truths: &[OffsetLabel]) -> Result<f64> {
    if matrices.is_empty() || matrices.len() != truths.len() {
        return Err(Error::Dimension("one truth per matrix required".into()));
    }
    let mut total = 0.0;
    for (m, &t) in matrices.iter().zip(truths) {
        let n = m.n();
        let band = band_indices(n, t)?;
        let on: f64 = band.iter().map(|&(i, j)| m.at(i, j)).sum();
        let all: f64 = m.values().data().iter().sum();
        let off_count = (n * n - band.len()) as f64;
        total += on / band.len() as f64 - (all - on) / off_count;
    }
    Ok(total / matrices.len() as f64)
}
