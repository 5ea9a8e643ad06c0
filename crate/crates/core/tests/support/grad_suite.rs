// Finite-difference gradient checks shared by the core test suite and the
// acceptance harness. Each check builds a scalar function of one or more
// input tensors, differentiates it on the tape and by central differences,
// and reports the norm-wise relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use syncmatrix_core::autodiff::{Tape, Var};
use syncmatrix_core::encoders::Encoder;
use syncmatrix_core::estimators::{SyncClsConfig, SyncClsNet};
use syncmatrix_core::losses::{angular_multiway_on_tape, contrastive_on_tape, multiway_euclidean_on_tape};
use syncmatrix_core::nn::BN_EPS;
use syncmatrix_core::train::e2e_forward;
use syncmatrix_core::{EncoderConfig, Result, Tensor};

pub const OP_TOL: f64 = 1e-5;
pub const E2E_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;
const STEP: f64 = 1e-5;

pub struct CheckResult {
    pub name: &'static str,
    pub worst: f64,
    pub seeds: u64,
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Entries bounded away from zero so kinks and poles stay out of reach of the probe.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng, gap: f64) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        *v = v.abs() + 0.5;
    }
    t
}

fn evaluate<F: Fn(&mut Tape, &[Var]) -> Result<Var> + ?Sized>(
    build: &F,
    inputs: &[Tensor],
    project: &Option<Tensor>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let raw = build(&mut tape, &vars)?;
    let out = reduce(&mut tape, raw, project)?;
    Ok(tape.value(out).data()[0])
}

fn reduce(tape: &mut Tape, out: Var, project: &Option<Tensor>) -> Result<Var> {
    match project {
        Some(p) => {
            let p = tape.constant(p.clone());
            let prod = tape.mul(out, p)?;
            Ok(tape.sum(prod))
        }
        None => Ok(out),
    }
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)` over all inputs.
pub fn norm_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Tape gradient vs central differences of `sum(build(inputs) * R)` for a
/// random projection `R` (omitted when `build` already returns a scalar).
pub fn check<F: Fn(&mut Tape, &[Var]) -> Result<Var> + ?Sized>(
    build: &F,
    inputs: &[Tensor],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let raw = build(&mut tape, &vars)?;
    let project = if tape.value(raw).numel() == 1 { None } else { Some(randn(tape.shape(raw), rng)) };
    let out = reduce(&mut tape, raw, &project)?;
    let grads = tape.backward(out)?;
    let mut analytic = Vec::new();
    for &v in &vars {
        analytic.extend(grads.tensor(v).into_data());
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        for e in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[e];
            probe[k].data_mut()[e] = x0 + STEP;
            let up = evaluate(build, &probe, &project)?;
            probe[k].data_mut()[e] = x0 - STEP;
            let down = evaluate(build, &probe, &project)?;
            probe[k].data_mut()[e] = x0;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    Ok(norm_rel_error(&analytic, &numeric))
}

type Case = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)>);

fn cases() -> Vec<Case> {
    let mut v: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, |$rng:ident| $inputs:expr, $build:expr) => {
            v.push(($name, Box::new(|$rng: &mut ChaCha8Rng| ($inputs, Box::new($build) as Box<Build>))));
        };
    }
    case!("reshape", |r| vec![randn(&[3, 4], r)], |t: &mut Tape, x: &[Var]| t.reshape(x[0], &[2, 6]));
    case!("matmul", |r| vec![randn(&[3, 4], r), randn(&[4, 5], r)], |t: &mut Tape, x: &[Var]| t.matmul(x[0], x[1]));
    case!("transpose", |r| vec![randn(&[3, 5], r)], |t: &mut Tape, x: &[Var]| t.transpose(x[0]));
    case!("bmm_nt", |r| vec![randn(&[2, 3, 4], r), randn(&[2, 5, 4], r)], |t: &mut Tape, x: &[Var]| t
        .bmm_nt(x[0], x[1]));
    case!("add", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t: &mut Tape, x: &[Var]| t.add(x[0], x[1]));
    case!("sub", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t: &mut Tape, x: &[Var]| t.sub(x[0], x[1]));
    case!("mul", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t: &mut Tape, x: &[Var]| t.mul(x[0], x[1]));
    case!("neg", |r| vec![randn(&[6], r)], |t: &mut Tape, x: &[Var]| Ok(t.neg(x[0])));
    case!("scale", |r| vec![randn(&[6], r)], |t: &mut Tape, x: &[Var]| Ok(t.scale(x[0], -1.7)));
    case!("add_scalar", |r| vec![randn(&[6], r)], |t: &mut Tape, x: &[Var]| Ok(t.add_scalar(x[0], 0.3)));
    case!("scale_by", |r| vec![randn(&[3, 4], r), randn(&[1], r)], |t: &mut Tape, x: &[Var]| t.scale_by(x[0], x[1]));
    case!("shift_by", |r| vec![randn(&[3, 4], r), randn(&[1], r)], |t: &mut Tape, x: &[Var]| t.shift_by(x[0], x[1]));
    case!("add_row_bias", |r| vec![randn(&[2, 3, 4], r), randn(&[4], r)], |t: &mut Tape, x: &[Var]| t
        .add_row_bias(x[0], x[1]));
    case!("add_channel_bias", |r| vec![randn(&[2, 3, 2, 2], r), randn(&[3], r)], |t: &mut Tape, x: &[Var]| t
        .add_channel_bias(x[0], x[1]));
    case!("relu", |r| vec![away_from_zero(&[12], r, 1e-2)], |t: &mut Tape, x: &[Var]| Ok(t.relu(x[0])));
    case!("sqrt", |r| vec![positive(&[8], r)], |t: &mut Tape, x: &[Var]| t.sqrt(x[0]));
    case!("square", |r| vec![randn(&[8], r)], |t: &mut Tape, x: &[Var]| Ok(t.square(x[0])));
    case!("recip", |r| vec![away_from_zero(&[8], r, 0.5)], |t: &mut Tape, x: &[Var]| t.recip(x[0]));
    case!("sum", |r| vec![randn(&[3, 4], r)], |t: &mut Tape, x: &[Var]| Ok(t.sum(x[0])));
    case!("mean", |r| vec![randn(&[3, 4], r)], |t: &mut Tape, x: &[Var]| Ok(t.mean(x[0])));
    case!("l2_normalize_rows", |r| vec![randn(&[4, 5], r)], |t: &mut Tape, x: &[Var]| t.l2_normalize_rows(x[0]));
    case!("pairwise_distance", |r| vec![randn(&[3, 4], r), randn(&[5, 4], r)], |t: &mut Tape, x: &[Var]| t
        .pairwise_distance(x[0], x[1]));
    case!("row_distance", |r| vec![randn(&[4, 3], r), randn(&[4, 3], r)], |t: &mut Tape, x: &[Var]| t
        .row_distance(x[0], x[1]));
    case!("unfold_time", |r| vec![randn(&[2, 7, 3], r)], |t: &mut Tape, x: &[Var]| t.unfold_time(x[0], 3));
    case!("gather_rows", |r| vec![randn(&[5, 3], r)], |t: &mut Tape, x: &[Var]| t.gather_rows(x[0], &[4, 0, 4, 2]));
    case!("conv2d_pad0", |r| vec![randn(&[2, 2, 5, 5], r), randn(&[3, 2, 3, 3], r)], |t: &mut Tape, x: &[Var]| t
        .conv2d(x[0], x[1], 0));
    case!("conv2d_pad1", |r| vec![randn(&[2, 1, 4, 4], r), randn(&[2, 1, 3, 3], r)], |t: &mut Tape, x: &[Var]| t
        .conv2d(x[0], x[1], 1));
    case!(
        "batch_norm_train",
        |r| vec![randn(&[3, 2, 2, 2], r), randn(&[2], r), randn(&[2], r)],
        |t: &mut Tape, x: &[Var]| Ok(t.batch_norm_train(x[0], x[1], x[2], BN_EPS)?.0)
    );
    case!(
        "batch_norm_eval",
        |r| vec![randn(&[2, 3, 4], r), randn(&[3], r), randn(&[3], r)],
        |t: &mut Tape, x: &[Var]| t.batch_norm_eval(x[0], x[1], x[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], BN_EPS)
    );
    case!("softmax", |r| vec![randn(&[3, 5], r)], |t: &mut Tape, x: &[Var]| t.softmax(x[0]));
    case!("cross_entropy", |r| vec![randn(&[4, 6], r)], |t: &mut Tape, x: &[Var]| t.cross_entropy(x[0], &[0, 5, 2, 2]));
    case!(
        "loss_contrastive",
        |r| vec![randn(&[6, 3], r).scale_to(0.4), randn(&[6, 3], r).scale_to(0.4)],
        |t: &mut Tape, x: &[Var]| contrastive_on_tape(t, x[0], x[1], &[true, false, true, false, false, true], 1.0)
    );
    case!("loss_multiway_euclidean", |r| vec![randn(&[5, 4], r), randn(&[5, 4], r)], |t: &mut Tape, x: &[Var]| {
        multiway_euclidean_on_tape(t, x[0], x[1])
    });
    case!(
        "loss_angular_multiway",
        |r| vec![randn(&[5, 4], r), randn(&[5, 4], r), Tensor::scalar(10.0), Tensor::scalar(-5.0)],
        |t: &mut Tape, x: &[Var]| angular_multiway_on_tape(t, x[0], x[1], x[2], x[3])
    );
    v
}

trait ScaleTo {
    fn scale_to(self, c: f64) -> Self;
}

impl ScaleTo for Tensor {
    fn scale_to(mut self, c: f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v *= c);
        self
    }
}

/// Every op and loss over `SEEDS` random draws.
pub fn op_checks() -> Vec<CheckResult> {
    cases()
        .into_iter()
        .map(|(name, make)| {
            let mut worst = 0.0_f64;
            for seed in 0..SEEDS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
                let (inputs, build) = make(&mut rng);
                let err = check(&*build, &inputs, &mut rng).unwrap_or(f64::INFINITY);
                worst = worst.max(err);
            }
            CheckResult { name, worst, seeds: SEEDS }
        })
        .collect()
}

/// Raw clips through encoders, similarity matrix and a small classifier to
/// the cross-entropy, differentiated with respect to every parameter tensor.
pub fn e2e_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig { context: 5, raw_dim_audio: 3, raw_dim_video: 4, embed_dim: 4, hidden: 5 };
    let n = 6;
    let frames = n + cfg.context - 1;
    let batch = 3;
    let mut enc = Encoder::new(cfg.clone(), &mut rng)?;
    for (name, shape) in enc.params().iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>() {
        if name.ends_with(".b1") || name.ends_with(".b2") {
            enc.params_mut().set(&name, randn(&shape, &mut rng).scale_to(0.5))?;
        }
    }
    let mut net = SyncClsNet::new(SyncClsConfig::with_widths(n, 3, 3, 2), &mut rng)?;
    for (name, value) in net.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>() {
        if name.starts_with("cls.bn") {
            let mut jitter = randn(value.shape(), &mut rng).scale_to(0.2);
            jitter.data_mut().iter_mut().zip(value.data()).for_each(|(j, v)| *j += v);
            net.params_mut().set(&name, jitter)?;
        }
    }
    let audio = randn(&[batch, frames, cfg.raw_dim_audio], &mut rng);
    let video = randn(&[batch, frames, cfg.raw_dim_video], &mut rng);
    let targets = [0usize, 7, 10];
    let mut worst = 0.0_f64;
    let enc_names: Vec<String> = enc.params().iter().map(|(n, _)| n.to_string()).collect();
    let net_names: Vec<String> = net.params().iter().map(|(n, _)| n.to_string()).collect();
    let all = enc_names.iter().map(|n| (true, n)).chain(net_names.iter().map(|n| (false, n)));
    for (in_encoder, name) in all {
        let (enc, net, audio, video) = (&enc, &net, &audio, &video);
        let build = move |tape: &mut Tape, x: &[Var]| -> Result<Var> {
            let mut eb = enc.params().bind_frozen(tape);
            let mut nb = net.params().bind_frozen(tape);
            if in_encoder {
                eb.replace(enc.params().id(name).unwrap(), x[0]);
            } else {
                nb.replace(net.params().id(name).unwrap(), x[0]);
            }
            let a = tape.constant(audio.clone());
            let v = tape.constant(video.clone());
            let out = e2e_forward(tape, enc, &eb, net, &nb, a, v, true)?;
            tape.cross_entropy(out.logits, &targets)
        };
        let point = if in_encoder {
            enc.params().get(enc.params().id(name).unwrap()).clone()
        } else {
            net.params().get(net.params().id(name).unwrap()).clone()
        };
        worst = worst.max(check(&build, &[point], &mut rng)?);
    }
    Ok(worst)
}
