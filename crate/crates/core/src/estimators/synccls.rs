use rand::Rng;

use super::{pick, Prediction};
use crate::autodiff::{softmax, BatchStats, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{gaussian, BatchNorm, Bound, ParamId, ParamSet};
use crate::similarity::{SimilarityMatrix, NUM_CLASSES};
use crate::tensor::Tensor;

/// Layer widths of the classifier. `n` fixes the input matrix size.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncClsConfig {
    pub n: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub conv3: usize,
}

impl SyncClsConfig {
    pub fn new(n: usize) -> Self {
        Self { n, conv1: 256, conv2: 256, conv3: 128 }
    }

    pub fn with_widths(n: usize, conv1: usize, conv2: usize, conv3: usize) -> Self {
        Self { n, conv1, conv2, conv3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.conv1 == 0 || self.conv2 == 0 || self.conv3 == 0 {
            return Err(Error::Config("classifier sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Four stride-free convolutions: 3x3 (padding 1), NxN, 1x1, 1x1 to eleven
/// logits. Batch norm and ReLU follow the first three.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncClsNet {
    cfg: SyncClsConfig,
    params: ParamSet,
    conv: [ParamId; 4],
    bias4: ParamId,
    bn: [BatchNorm; 3],
}

/// Forward-pass outputs needed by training.
pub struct Forward {
    pub logits: Var,
    pub stats: Vec<BatchStats>,
}

impl SyncClsNet {
    pub fn new(cfg: SyncClsConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let shapes = [
            [cfg.conv1, 1, 3, 3],
            [cfg.conv2, cfg.conv1, cfg.n, cfg.n],
            [cfg.conv3, cfg.conv2, 1, 1],
            [NUM_CLASSES, cfg.conv3, 1, 1],
        ];
        let mut conv = Vec::with_capacity(4);
        for (k, s) in shapes.iter().enumerate() {
            let fan_in = (s[1] * s[2] * s[3]) as f64;
            let std = if k == 3 { 0.1 / fan_in.sqrt() } else { (2.0 / fan_in).sqrt() };
            conv.push(params.add(format!("cls.conv{}.w", k + 1), gaussian(s, std, rng)));
        }
        let bias4 = params.add("cls.conv4.b", Tensor::zeros(&[NUM_CLASSES]));
        let bn = [
            BatchNorm::new(&mut params, "cls.bn1", cfg.conv1),
            BatchNorm::new(&mut params, "cls.bn2", cfg.conv2),
            BatchNorm::new(&mut params, "cls.bn3", cfg.conv3),
        ];
        Ok(Self { cfg, params, conv: [conv[0], conv[1], conv[2], conv[3]], bias4, bn })
    }

    pub fn config(&self) -> &SyncClsConfig {
        &self.cfg
    }

    pub fn n(&self) -> usize {
        self.cfg.n
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Logits `[B, 11]` for matrices `x[B, N, N]`. Training mode normalises
    /// with batch statistics and returns them for the running averages.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, train: bool) -> Result<Forward> {
        let n = self.cfg.n;
        let b = match tape.shape(x) {
            &[b, r, c] if r == n && c == n => b,
            s => return Err(Error::Dimension(format!("classifier expects [B, {n}, {n}], got {s:?}"))),
        };
        let mut h = tape.reshape(x, &[b, 1, n, n])?;
        let mut stats = Vec::with_capacity(3);
        for k in 0..3 {
            h = tape.conv2d(h, bound.var(self.conv[k]), usize::from(k == 0))?;
            let (y, s) = self.bn[k].forward(tape, bound, h, train)?;
            stats.extend(s);
            h = tape.relu(y);
        }
        h = tape.conv2d(h, bound.var(self.conv[3]), 0)?;
        let h = tape.reshape(h, &[b, NUM_CLASSES])?;
        let logits = tape.add_row_bias(h, bound.var(self.bias4))?;
        Ok(Forward { logits, stats })
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (bn, s) in self.bn.iter_mut().zip(stats) {
            bn.update_running(s);
        }
    }

    fn check(&self, m: &SimilarityMatrix) -> Result<()> {
        if m.n() != self.cfg.n {
            return Err(Error::Dimension(format!("classifier built for N={}, got {}x{}", self.cfg.n, m.n(), m.n())));
        }
        Ok(())
    }

    /// Inference-mode logits for a batch of matrices.
    pub fn logits(&self, matrices: &[&SimilarityMatrix]) -> Result<Vec<[f64; NUM_CLASSES]>> {
        if matrices.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.cfg.n;
        let mut data = Vec::with_capacity(matrices.len() * n * n);
        for m in matrices {
            self.check(m)?;
            data.extend_from_slice(m.values().data());
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new(vec![matrices.len(), n, n], data)?);
        let out = self.forward(&mut tape, &bound, x, false)?;
        Ok(tape.value(out.logits).data().chunks(NUM_CLASSES).map(|c| c.try_into().expect("eleven logits")).collect())
    }

    /// Predictions for many matrices, evaluated in chunks.
    pub fn predict_many(&self, matrices: &[SimilarityMatrix]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(matrices.len());
        for chunk in matrices.chunks(64) {
            let refs: Vec<&SimilarityMatrix> = chunk.iter().collect();
            for l in self.logits(&refs)? {
                let p: [f64; NUM_CLASSES] = softmax(&l).try_into().expect("eleven probabilities");
                out.push(Prediction { offset: pick(&p, true), scores: p });
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.params.iter() {
            ck.insert(name, t.clone());
        }
        for (k, bn) in self.bn.iter().enumerate() {
            ck.insert(format!("cls.bn{}.running_mean", k + 1), Tensor::vector(bn.running_mean.clone()));
            ck.insert(format!("cls.bn{}.running_var", k + 1), Tensor::vector(bn.running_var.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let w2 = ck.get("cls.conv2.w")?;
        let w3 = ck.get("cls.conv3.w")?;
        let (s2, s3) = (w2.shape(), w3.shape());
        if s2.len() != 4 || s3.len() != 4 {
            return Err(Error::Format("classifier kernels must be rank 4".into()));
        }
        let cfg = SyncClsConfig { n: s2[2], conv1: s2[1], conv2: s2[0], conv3: s3[0] };
        let mut net = Self::new(cfg, &mut crate::seed::rng_from(0))?;
        let names: Vec<String> = net.params.iter().map(|(n, _)| n.to_owned()).collect();
        for name in names {
            net.params.set(&name, ck.get(&name)?.clone())?;
        }
        for (k, bn) in net.bn.iter_mut().enumerate() {
            let mean = ck.get(&format!("cls.bn{}.running_mean", k + 1))?.data().to_vec();
            let var = ck.get(&format!("cls.bn{}.running_var", k + 1))?.data().to_vec();
            if mean.len() != bn.running_mean.len() || var.len() != bn.running_var.len() {
                return Err(Error::Format(format!("batch norm {} statistics have the wrong length", k + 1)));
            }
            bn.running_mean = mean;
            bn.running_var = var;
        }
        Ok(net)
    }
}

/// Class probabilities for one matrix; the offset is the most probable class.
pub fn synccls_predict(net: &SyncClsNet, m: &SimilarityMatrix) -> Result<Prediction> {
    net.check(m)?;
    Ok(net.predict_many(std::slice::from_ref(m))?.remove(0))
}

/// Gradient of one inference-mode logit with respect to every matrix entry.
pub fn saliency(net: &SyncClsNet, m: &SimilarityMatrix, class: usize) -> Result<Tensor> {
    if class >= NUM_CLASSES {
        return Err(Error::Argument(format!("class {class} outside [0, {NUM_CLASSES})")));
    }
    net.check(m)?;
    let n = m.n();
    let mut tape = Tape::new();
    let bound = net.params.bind_frozen(&mut tape);
    let x = tape.leaf(m.values().clone().reshape(&[1, n, n])?, true);
    let out = net.forward(&mut tape, &bound, x, false)?;
    let mut onehot = vec![0.0; NUM_CLASSES];
    onehot[class] = 1.0;
    let mask = tape.constant(Tensor::new(vec![1, NUM_CLASSES], onehot)?);
    let picked = tape.mul(out.logits, mask)?;
    let logit = tape.sum(picked);
    let grads = tape.backward(logit)?;
    grads.tensor(x).reshape(&[n, n])
}
