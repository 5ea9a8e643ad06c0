//! One function per subcommand. All file names live under `run.out_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use syncmatrix_core::estimators::{
    diag_avg_offset, saliency as saliency_map, sliding_window_offset, SyncClsConfig, SyncClsNet,
};
use syncmatrix_core::eval::{run_benchmark, BenchmarkPlan, Method, Models};
use syncmatrix_core::export::{read_matrix_csv, write_matrix_csv, write_signed_pgm, write_similarity_pgm};
use syncmatrix_core::seed::{derive_seed, derived_rng};
use syncmatrix_core::synthdata::{generate_dataset, Dataset};
use syncmatrix_core::train::{similarity_matrices, train_embedding, train_synccls, train_synce2e, TrainConfig};
use syncmatrix_core::{
    build_similarity_matrix, Checkpoint, Encoder, FeatureStream, Modality, OffsetLabel, SimilarityMatrix, Tensor,
};

use crate::config::{RunConfig, Settings};
use crate::{CliResult, Failure};

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Output file names.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split_name(split: &str, frames: usize) -> String {
        format!("{split}_T{frames}")
    }

    pub fn encoder(&self) -> PathBuf {
        self.root.join("encoder.ckpt")
    }

    pub fn cls(&self, n: usize) -> PathBuf {
        self.root.join(format!("cls_N{n}.ckpt"))
    }

    pub fn e2e(&self, n: usize) -> PathBuf {
        self.root.join(format!("e2e_N{n}.ckpt"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}_log.csv"))
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn resolved(&self, command: &str) -> PathBuf {
        self.root.join(format!("{command}.resolved.ini"))
    }

    pub fn saliency_dir(&self) -> PathBuf {
        self.root.join("saliency")
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::at(dir, e.into()))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::at(path, e.into()))
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> CliResult<()> {
    write(path, ck.to_bytes()?)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| Failure::at(path, e))
}

/// Merges several checkpoint files into one name table.
pub fn load_models(paths: &[PathBuf]) -> CliResult<Checkpoint> {
    let mut ck = Checkpoint::new();
    for p in paths {
        ck.merge(load_checkpoint(p)?);
    }
    Ok(ck)
}

/// Writes the resolved configuration beside the command's outputs.
pub fn emit_resolved(settings: &Settings, cfg: &RunConfig, command: &str) -> CliResult<()> {
    write(&Layout::new(&cfg.out_dir).resolved(command), settings.to_ini())
}

fn load_split(layout: &Layout, split: &str, frames: usize) -> CliResult<Dataset> {
    let dir = layout.data_dir();
    let name = Layout::split_name(split, frames);
    Dataset::load(&dir, &name).map_err(|e| Failure::at(&dir.join(&name), e))
}

fn load_encoder(layout: &Layout) -> CliResult<Encoder> {
    let path = layout.encoder();
    Encoder::from_checkpoint(&load_checkpoint(&path)?).map_err(|e| Failure::at(&path, e))
}

fn load_cls(path: &Path) -> CliResult<SyncClsNet> {
    SyncClsNet::from_checkpoint(&load_checkpoint(path)?).map_err(|e| Failure::at(path, e))
}

fn per_length(cfg: &TrainConfig, n: usize) -> TrainConfig {
    TrainConfig { seed: derive_seed(cfg.seed, "features", n as u64), ..cfg.clone() }
}

fn labelled(enc: &Encoder, ds: &Dataset) -> CliResult<Vec<(SimilarityMatrix, OffsetLabel)>> {
    let matrices = similarity_matrices(enc, &ds.clips)?;
    Ok(matrices.into_iter().zip(ds.clips.iter().map(|c| c.truth)).collect())
}

pub fn gen(cfg: &RunConfig) -> CliResult<()> {
    let layout = Layout::new(&cfg.out_dir);
    let counts = [cfg.train_count, cfg.val_count, cfg.test_count];
    for &frames in &cfg.gen_lengths {
        for (split, &count) in SPLITS.iter().zip(&counts) {
            if count == 0 {
                continue;
            }
            let seed = derive_seed(cfg.seed, &format!("data.{split}.{frames}"), 0);
            let ds = generate_dataset(&cfg.gen_for(frames), count, seed)?;
            let name = Layout::split_name(split, frames);
            ds.save(layout.data_dir(), &name).map_err(|e| Failure::at(&layout.data_dir().join(&name), e))?;
            println!("{name}: {count} clips");
        }
    }
    Ok(())
}

pub fn train_embed(cfg: &RunConfig) -> CliResult<()> {
    let layout = Layout::new(&cfg.out_dir);
    let train = load_split(&layout, "train", cfg.embed_frames)?;
    let val = load_split(&layout, "val", cfg.embed_frames)?;
    let enc = Encoder::new(cfg.encoder.clone(), &mut derived_rng(cfg.seed, "init.encoder", 0))?;
    let (enc, scale, log) = train_embedding(enc, &train.clips, &val.clips, cfg.embed_loss, &cfg.embed_train)?;
    let mut ck = enc.to_checkpoint();
    ck.insert("angular.w", Tensor::scalar(scale.w));
    ck.insert("angular.b", Tensor::scalar(scale.b));
    save_checkpoint(&layout.encoder(), &ck)?;
    write(&layout.log("embed"), log.to_csv())?;
    println!("encoder: epoch {} kept, validation diag-avg accuracy {:.2}", log.best_epoch, log.best_accuracy());
    Ok(())
}

pub fn train_cls(cfg: &RunConfig) -> CliResult<()> {
    let layout = Layout::new(&cfg.out_dir);
    let enc = load_encoder(&layout)?;
    let (c1, c2, c3) = cfg.cls_widths;
    for &frames in &cfg.gen_lengths {
        let n = cfg.features_for(frames)?;
        let train = labelled(&enc, &load_split(&layout, "train", frames)?)?;
        let val = labelled(&enc, &load_split(&layout, "val", frames)?)?;
        let net = SyncClsNet::new(
            SyncClsConfig::with_widths(n, c1, c2, c3),
            &mut derived_rng(cfg.seed, "init.cls", n as u64),
        )?;
        let (net, log) = train_synccls(net, &train, &val, &per_length(&cfg.cls_train, n))?;
        save_checkpoint(&layout.cls(n), &net.to_checkpoint())?;
        write(&layout.log(&format!("cls_N{n}")), log.to_csv())?;
        println!("sync-cls N={n}: epoch {} kept, validation accuracy {:.2}", log.best_epoch, log.best_accuracy());
    }
    Ok(())
}

pub fn train_e2e(cfg: &RunConfig) -> CliResult<()> {
    let layout = Layout::new(&cfg.out_dir);
    let enc = load_encoder(&layout)?;
    for &frames in &cfg.gen_lengths {
        let n = cfg.features_for(frames)?;
        let net = load_cls(&layout.cls(n))?;
        let train = load_split(&layout, "train", frames)?;
        let val = load_split(&layout, "val", frames)?;
        let (e, net, log) = train_synce2e(enc.clone(), net, &train.clips, &val.clips, &per_length(&cfg.e2e_train, n))?;
        let mut ck = e.to_checkpoint();
        ck.merge(net.to_checkpoint());
        save_checkpoint(&layout.e2e(n), &ck)?;
        write(&layout.log(&format!("e2e_N{n}")), log.to_csv())?;
        println!("sync-e2e N={n}: epoch {} kept, validation accuracy {:.2}", log.best_epoch, log.best_accuracy());
    }
    Ok(())
}

fn require(path: &Path, method: Method, hint: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::config(format!("{method} needs {} (run {hint} first)", path.display())))
    }
}

pub fn eval(cfg: &RunConfig) -> CliResult<()> {
    let layout = Layout::new(&cfg.out_dir);
    let mut models = Models::default();
    let needs_encoder = cfg.methods.iter().any(|&m| m != Method::SyncE2e);
    if needs_encoder {
        let m = *cfg.methods.iter().find(|&&m| m != Method::SyncE2e).expect("checked");
        require(&layout.encoder(), m, "train-embed")?;
        models.encoder = Some(load_encoder(&layout)?);
    }
    for &frames in &cfg.eval_lengths {
        let n = cfg.features_for(frames)?;
        if cfg.methods.contains(&Method::SyncCls) {
            require(&layout.cls(n), Method::SyncCls, "train-cls")?;
            models.cls.insert(n, load_cls(&layout.cls(n))?);
        }
        if cfg.methods.contains(&Method::SyncE2e) {
            let path = layout.e2e(n);
            require(&path, Method::SyncE2e, "train-e2e")?;
            let ck = load_checkpoint(&path)?;
            let enc = Encoder::from_checkpoint(&ck).map_err(|e| Failure::at(&path, e))?;
            let net = SyncClsNet::from_checkpoint(&ck).map_err(|e| Failure::at(&path, e))?;
            models.e2e.insert(n, (enc, net));
        }
    }
    let plan = BenchmarkPlan {
        methods: cfg.methods.clone(),
        clip_lengths: cfg.eval_lengths.clone(),
        trials: cfg.trials,
        clips_per_trial: cfg.clips_per_trial,
        gen: cfg.gen.clone(),
        seed: derive_seed(cfg.seed, "eval", 0),
    };
    let report = run_benchmark(&plan, &models)?;
    write(&layout.report_csv(), report.to_csv())?;
    let table = report.to_table();
    write(&layout.report_txt(), &table)?;
    print!("{table}");
    Ok(())
}

fn read_stream(path: &Path, modality: Modality, enc: Option<&Encoder>) -> CliResult<FeatureStream> {
    let text = fs::read_to_string(path).map_err(|e| Failure::at(path, e.into()))?;
    let values = read_matrix_csv(&text).map_err(|e| Failure::at(path, e))?;
    let stream = match enc {
        Some(enc) => enc.encode(modality, &values),
        None => FeatureStream::new(modality, values),
    };
    stream.map_err(|e| Failure::at(path, e))
}

/// Offset between two streams. With an encoder among `models` the files hold
/// raw frames; otherwise they hold one feature vector per row.
pub fn infer(audio: &Path, video: &Path, method: Method, models: &[PathBuf]) -> CliResult<OffsetLabel> {
    let ck = load_models(models)?;
    let enc = if ck.contains("enc.audio.w1") { Some(Encoder::from_checkpoint(&ck)?) } else { None };
    let a = read_stream(audio, Modality::Audio, enc.as_ref())?;
    let v = read_stream(video, Modality::Visual, enc.as_ref())?;
    let pred = match method {
        Method::Baseline => sliding_window_offset(&a, &v)?,
        Method::DiagAvg => diag_avg_offset(&build_similarity_matrix(&a, &v)?)?,
        Method::SyncCls | Method::SyncE2e => {
            if !ck.contains("cls.conv1.w") {
                return Err(Failure::config(format!("{method} needs a classifier checkpoint (--model)")));
            }
            let net = SyncClsNet::from_checkpoint(&ck)?;
            syncmatrix_core::estimators::synccls_predict(&net, &build_similarity_matrix(&a, &v)?)?
        }
    };
    Ok(pred.offset)
}

/// Gradient of the true-class logit with respect to one clip's similarity
/// matrix, written as CSV and PGM next to the matrix itself.
pub fn saliency(cfg: &RunConfig, models: &[PathBuf], split: &str, clip: usize) -> CliResult<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.out_dir);
    let ck = load_models(models)?;
    if !ck.contains("enc.audio.w1") || !ck.contains("cls.conv1.w") {
        return Err(Failure::config("saliency needs an encoder and a classifier (--model)"));
    }
    let enc = Encoder::from_checkpoint(&ck)?;
    let net = SyncClsNet::from_checkpoint(&ck)?;
    let frames = net.n() + enc.config().context - 1;
    let ds = load_split(&layout, split, frames)?;
    let c = ds
        .clips
        .get(clip)
        .ok_or_else(|| Failure::config(format!("clip {clip} out of range: {split} has {} clips", ds.len())))?;
    let m = similarity_matrices(&enc, std::slice::from_ref(c))?.remove(0);
    let grad = saliency_map(&net, &m, c.truth.class_index())?;
    let stem = format!("{}_clip{clip}", Layout::split_name(split, frames));
    let dir = layout.saliency_dir();
    let mut written = Vec::new();
    let mut emit = |name: String, bytes: Vec<u8>| -> CliResult<()> {
        let path = dir.join(name);
        write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    let mut buf = Vec::new();
    write_matrix_csv(&mut buf, &grad)?;
    emit(format!("{stem}_grad.csv"), std::mem::take(&mut buf))?;
    write_signed_pgm(&mut buf, &grad)?;
    emit(format!("{stem}_grad.pgm"), std::mem::take(&mut buf))?;
    write_matrix_csv(&mut buf, m.values())?;
    emit(format!("{stem}_sim.csv"), std::mem::take(&mut buf))?;
    write_similarity_pgm(&mut buf, m.values())?;
    emit(format!("{stem}_sim.pgm"), buf)?;
    Ok(written)
}
