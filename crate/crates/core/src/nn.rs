//! Fully connected ReLU regressor trained with mini-batch SGD.
//!
//! Everything runs in `f64` on the CPU. Hidden layers use ReLU with the
//! subgradient at 0 taken as 0; the output layer is linear.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            input_dim: 5,
            hidden_layers: 5,
            hidden_width: 50,
            output_dim: 1,
        }
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || (self.hidden_layers > 0 && self.hidden_width == 0) {
            return Err(Error::Config(format!("degenerate network dimensions {self:?}")));
        }
        Ok(())
    }

    /// (fan_in, fan_out) per layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut prev = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((prev, self.hidden_width));
            prev = self.hidden_width;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// Dense layer; `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            *slot = self.bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
}

/// Gradients with the same layout as [`MlpModel::layers`].
pub type Gradients = Vec<Dense>;

/// He-style uniform initialisation: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
/// zero biases.
pub fn init_model(spec: MlpSpec, seed: u64) -> Result<MlpModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(i, o)| {
            let limit = (6.0 / i as f64).sqrt();
            let mut layer = Dense::zeros(i, o);
            layer.weights.iter_mut().for_each(|w| *w = rng.gen_range(-limit..limit));
            layer
        })
        .collect();
    Ok(MlpModel { spec, layers })
}

impl MlpModel {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_dims().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect();
        Ok(Self { spec, layers })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in file order: per layer, weights then biases.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    fn parameter_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// FNV-1a over the little-endian parameter bytes.
    pub fn checksum(&self) -> u64 {
        fnv1a(self.parameters().flat_map(f64::to_le_bytes))
    }

    fn output_buffers(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| vec![0.0; l.out_dim]).collect()
    }

    /// Forward pass keeping every layer's (post-activation) output.
    fn forward_into(&self, input: &[f64], acts: &mut [Vec<f64>]) {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = acts.split_at_mut(i);
            let src = if i == 0 { input } else { &done[i - 1] };
            let out = &mut rest[0];
            layer.apply(src, out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.spec.input_dim {
            return Err(Error::Shape(format!("{} inputs for a {}-input network", input.len(), self.spec.input_dim)));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite input {input:?}")));
        }
        let mut acts = self.output_buffers();
        self.forward_into(input, &mut acts);
        Ok(acts.pop().unwrap_or_default())
    }
}

/// Scalar prediction of a single-output network. The raw output is not clamped.
pub fn forward(model: &MlpModel, features: &[f64]) -> Result<f64> {
    Ok(model.predict(features)?[0])
}

pub fn loss_mse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let sse: f64 = predictions.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(sse / predictions.len() as f64)
}

/// Supervised samples for a single-output regressor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Samples {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        Samples {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

/// Mean squared error of the model over `data`.
pub fn evaluate_mse(model: &MlpModel, data: &Samples) -> Result<f64> {
    let mut acts = model.output_buffers();
    let mut preds = Vec::with_capacity(data.len());
    for x in &data.inputs {
        model.forward_into(x, &mut acts);
        preds.push(acts.last().map_or(0.0, |o| o[0]));
    }
    loss_mse(&preds, &data.targets)
}

struct Backprop {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Backprop {
    fn new(model: &MlpModel) -> Self {
        let width = model.layers.iter().map(|l| l.in_dim.max(l.out_dim)).max().unwrap_or(1);
        Self {
            acts: model.output_buffers(),
            delta: vec![0.0; width],
            delta_prev: vec![0.0; width],
        }
    }

    /// Accumulates `weight * d(residual^2)/d(params)` for one sample into
    /// `grads`; returns the squared residual.
    fn accumulate(&mut self, model: &MlpModel, x: &[f64], y: f64, weight: f64, grads: &mut Gradients) -> f64 {
        model.forward_into(x, &mut self.acts);
        let n = model.layers.len();
        let pred = self.acts[n - 1][0];
        let residual = pred - y;
        self.delta[0] = 2.0 * residual * weight;
        for li in (0..n).rev() {
            let layer = &model.layers[li];
            let input: &[f64] = if li == 0 { x } else { &self.acts[li - 1] };
            let g = &mut grads[li];
            for o in 0..layer.out_dim {
                let d = self.delta[o];
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(input).for_each(|(gw, a)| *gw += d * a);
            }
            if li > 0 {
                let prev = &mut self.delta_prev[..layer.in_dim];
                prev.fill(0.0);
                for o in 0..layer.out_dim {
                    let d = self.delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
                }
                // ReLU derivative, 0 at the kink
                for (p, &a) in prev.iter_mut().zip(&self.acts[li - 1]) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                std::mem::swap(&mut self.delta, &mut self.delta_prev);
            }
        }
        residual * residual
    }
}

fn zero_gradients(model: &MlpModel) -> Gradients {
    model.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect()
}

/// Exact gradients of the batch MSE with respect to every parameter.
pub fn backprop_gradients(model: &MlpModel, inputs: &[Vec<f64>], targets: &[f64]) -> Result<Gradients> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Shape(format!("{} inputs vs {} targets", inputs.len(), targets.len())));
    }
    let mut grads = zero_gradients(model);
    let mut bp = Backprop::new(model);
    let w = 1.0 / inputs.len() as f64;
    for (x, &y) in inputs.iter().zip(targets) {
        bp.accumulate(model, x, y, w, &mut grads);
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// 0 gives plain SGD.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 30,
            learning_rate: 0.0018,
            epochs: 20,
            seed: 0,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub checksum: u64,
    pub optimizer: String,
    pub momentum: f64,
    /// Excluded from serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn train_rmse(&self) -> Vec<f64> {
        self.train_mse.iter().map(|m| m.sqrt()).collect()
    }

    pub fn val_rmse(&self) -> Vec<f64> {
        self.val_mse.iter().map(|m| m.sqrt()).collect()
    }

    /// Equality of everything except timing.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.train_mse == other.train_mse && self.val_mse == other.val_mse && self.checksum == other.checksum
    }
}

/// Mini-batch SGD with momentum. Batches follow a per-epoch permutation drawn
/// from `cfg.seed`; the last partial batch is used. No early stopping.
pub fn train(model: &MlpModel, train_set: &Samples, val_set: &Samples, cfg: &TrainConfig) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let started = Instant::now();
    let mut model = model.clone();
    let mut velocity = zero_gradients(&model);
    let mut grads = zero_gradients(&model);
    let mut bp = Backprop::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        train_mse: Vec::with_capacity(cfg.epochs),
        val_mse: Vec::with_capacity(cfg.epochs),
        checksum: 0,
        optimizer: if cfg.momentum > 0.0 { "sgd-momentum" } else { "sgd" }.to_string(),
        momentum: cfg.momentum,
        wall_time_s: 0.0,
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| {
                g.weights.fill(0.0);
                g.bias.fill(0.0);
            });
            let w = 1.0 / batch.len() as f64;
            let mut sse = 0.0;
            for &i in batch {
                sse += bp.accumulate(&model, &train_set.inputs[i], train_set.targets[i], w, &mut grads);
            }
            let loss = sse * w;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_no,
                    loss,
                });
            }
            for ((layer, v), g) in model.layers.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((p, vi), gi) in layer.weights.iter_mut().zip(&mut v.weights).zip(&g.weights) {
                    *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
                    *p += *vi;
                }
                for ((p, vi), gi) in layer.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                    *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
                    *p += *vi;
                }
            }
        }
        let tr = evaluate_mse(&model, train_set)?;
        let va = evaluate_mse(&model, val_set)?;
        if !tr.is_finite() || !va.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
                loss: tr,
            });
        }
        report.train_mse.push(tr);
        report.val_mse.push(va);
    }
    report.checksum = model.checksum();
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose ±epsilon perturbation flips a ReLU.
    pub skipped_kinks: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Denominator floor for the relative error, so that vanishing gradients are
/// compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

/// Central finite differences against backprop on at least 100 randomly
/// chosen parameters (all of them for smaller networks).
pub fn gradient_check(model: &MlpModel, input: &[f64], target: f64, epsilon: f64, seed: u64) -> Result<GradCheck> {
    let grads = backprop_gradients(model, &[input.to_vec()], &[target])?;
    gradient_check_against(model, input, target, &grads, epsilon, seed)
}

/// [`gradient_check`] against caller-supplied analytic gradients.
pub fn gradient_check_against(
    model: &MlpModel,
    input: &[f64],
    target: f64,
    analytic: &Gradients,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheck> {
    let analytic_flat: Vec<f64> = analytic
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
        .collect();
    let count = model.parameter_count();
    if analytic_flat.len() != count {
        return Err(Error::Shape(format!("{} gradients for {count} parameters", analytic_flat.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng);
    idx.truncate(count.min(100.max(count / 10)));

    let base_mask = relu_mask(model, input);
    let loss_at = |m: &MlpModel| -> Result<f64> {
        let p = forward(m, input)?;
        Ok((p - target) * (p - target))
    };
    let mut probe = model.clone();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for i in idx {
        let orig = *probe.parameter_mut(i);
        *probe.parameter_mut(i) = orig + epsilon;
        let (plus, mask_plus) = (loss_at(&probe)?, relu_mask(&probe, input));
        *probe.parameter_mut(i) = orig - epsilon;
        let (minus, mask_minus) = (loss_at(&probe)?, relu_mask(&probe, input));
        *probe.parameter_mut(i) = orig;
        if mask_plus != base_mask || mask_minus != base_mask {
            result.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic_flat[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        result.max_rel_error = result.max_rel_error.max(rel);
        result.checked += 1;
    }
    Ok(result)
}

fn relu_mask(model: &MlpModel, input: &[f64]) -> Vec<bool> {
    let mut acts = model.output_buffers();
    model.forward_into(input, &mut acts);
    let hidden = acts.len() - 1;
    acts[..hidden].iter().flatten().map(|&a| a > 0.0).collect()
}

/// Provenance stored next to the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub training_seed: u64,
    /// Checksum of the feature normalisation the model was trained with.
    pub normalization_checksum: u64,
}

const MAGIC: &[u8; 8] = b"HSMLP\0\0\0";
const FORMAT_VERSION: u32 = 1;

/// Binary layout, little-endian: magic, version (u32), input/hidden
/// layers/hidden width/output (u32 each), training seed (u64),
/// normalisation checksum (u64), parameter count (u64), parameters (f64,
/// per layer row-major weights then biases), parameter checksum (u64).
pub fn write_model<W: Write>(mut out: W, model: &MlpModel, meta: &ModelMeta) -> Result<()> {
    let s = model.spec;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for d in [s.input_dim, s.hidden_layers, s.hidden_width, s.output_dim] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    out.write_all(&meta.training_seed.to_le_bytes())?;
    out.write_all(&meta.normalization_checksum.to_le_bytes())?;
    out.write_all(&(model.parameter_count() as u64).to_le_bytes())?;
    for p in model.parameters() {
        out.write_all(&p.to_le_bytes())?;
    }
    out.write_all(&model.checksum().to_le_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut input: R) -> Result<(MlpModel, ModelMeta)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::ModelLoad("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelLoad(format!("unsupported version {version}")));
    }
    let spec = MlpSpec {
        input_dim: cur.u32()? as usize,
        hidden_layers: cur.u32()? as usize,
        hidden_width: cur.u32()? as usize,
        output_dim: cur.u32()? as usize,
    };
    spec.validate().map_err(|e| Error::ModelLoad(e.to_string()))?;
    let meta = ModelMeta {
        training_seed: cur.u64()?,
        normalization_checksum: cur.u64()?,
    };
    let count = cur.u64()? as usize;
    if count != spec.parameter_count() {
        return Err(Error::ModelLoad(format!(
            "{count} parameters stored, spec needs {}",
            spec.parameter_count()
        )));
    }
    let mut model = MlpModel::zeros(spec)?;
    for i in 0..count {
        *model.parameter_mut(i) = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
    }
    let stored = cur.u64()?;
    if stored != model.checksum() {
        return Err(Error::ModelLoad("parameter checksum mismatch".into()));
    }
    if cur.pos != bytes.len() {
        return Err(Error::ModelLoad("trailing bytes after model".into()));
    }
    Ok((model, meta))
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::ModelLoad(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &MlpModel, meta: &ModelMeta) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_model(std::io::BufWriter::new(file), model, meta)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(MlpModel, ModelMeta)> {
    let file = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(file))
}

/// `epoch,train_mse,val_mse`
pub fn write_loss_history<W: Write>(out: W, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_mse", "val_mse"])?;
    for (e, (tr, va)) in report.train_mse.iter().zip(&report.val_mse).enumerate() {
        w.write_record([(e + 1).to_string(), tr.to_string(), va.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(layers: usize) -> MlpSpec {
        MlpSpec {
            hidden_layers: layers,
            ..MlpSpec::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(MlpSpec::default(), 3).unwrap();
        let b = init_model(MlpSpec::default(), 3).unwrap();
        let c = init_model(MlpSpec::default(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a.checksum(), c.checksum());
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn parameter_count_of_default_network() {
        // 5*50 + 50 + 4 * (50*50 + 50) + 50*1 + 1
        let expected = 5 * 50 + 50 + 4 * (50 * 50 + 50) + 50 + 1;
        assert_eq!(expected, 10_551);
        assert_eq!(MlpSpec::default().parameter_count(), expected);
        assert_eq!(init_model(MlpSpec::default(), 0).unwrap().parameter_count(), expected);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = MlpModel::zeros(MlpSpec::default()).unwrap();
        assert_eq!(forward(&m, &[0.3, -2.0, 1.0, 5.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn hand_built_relu() {
        let spec = MlpSpec {
            input_dim: 2,
            hidden_layers: 1,
            hidden_width: 1,
            output_dim: 1,
        };
        let mut m = MlpModel::zeros(spec).unwrap();
        m.layers[0].weights = vec![1.0, 0.0];
        m.layers[1].weights = vec![1.0];
        assert_eq!(forward(&m, &[-1.0, 7.0]).unwrap(), 0.0);
        assert_eq!(forward(&m, &[2.0, 7.0]).unwrap(), 2.0);
    }

    #[test]
    fn forward_is_bit_deterministic_and_rejects_nan() {
        let m = init_model(MlpSpec::default(), 9).unwrap();
        let x = [0.1, 0.7, 0.3, 0.0, 1.0];
        assert_eq!(forward(&m, &x).unwrap().to_bits(), forward(&m, &x).unwrap().to_bits());
        assert!(matches!(forward(&m, &[f64::NAN, 0.0, 0.0, 0.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(forward(&m, &[0.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(loss_mse(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        assert_eq!(loss_mse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        let base = loss_mse(&[0.5, 0.1], &[0.2, 0.3]).unwrap();
        let doubled = loss_mse(&[0.8, -0.1], &[0.2, 0.3]).unwrap();
        assert!((doubled - 4.0 * base).abs() < 1e-12);
        assert!(matches!(loss_mse(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_of_single_linear_unit() {
        let spec = MlpSpec {
            input_dim: 1,
            hidden_layers: 0,
            hidden_width: 0,
            output_dim: 1,
        };
        let mut m = MlpModel::zeros(spec).unwrap();
        m.layers[0].weights = vec![1.0];
        let g = backprop_gradients(&m, &[vec![1.0]], &[0.0]).unwrap();
        assert_eq!(g[0].weights, vec![2.0]);
        assert_eq!(g[0].bias, vec![2.0]);
    }

    #[test]
    fn zero_residual_zero_gradient() {
        let m = init_model(MlpSpec::default(), 1).unwrap();
        let x = vec![0.2, 0.4, 0.6, 0.8, 1.0];
        let y = forward(&m, &x).unwrap();
        let g = backprop_gradients(&m, &[x], &[y]).unwrap();
        assert!(g.iter().all(|l| l.weights.iter().chain(&l.bias).all(|&v| v == 0.0)));
    }

    #[test]
    fn gradient_check_on_fresh_model() {
        let m = init_model(small_spec(2), 5).unwrap();
        let c = gradient_check(&m, &[0.3, 0.9, 0.1, 0.5, 1.0], 0.7, 1e-5, 0).unwrap();
        assert!(c.checked >= 90, "{c:?}");
        assert!(c.passes(1e-4), "{c:?}");
    }

    #[test]
    fn gradient_check_on_dead_network() {
        // zero input, zero biases: every hidden unit sits at the kink and is inactive
        let m = init_model(small_spec(2), 5).unwrap();
        let x = [0.0; 5];
        let g = backprop_gradients(&m, &[x.to_vec()], &[0.5]).unwrap();
        let hidden_zero = g[..2].iter().all(|l| l.weights.iter().chain(&l.bias).all(|&v| v == 0.0));
        assert!(hidden_zero);
        let c = gradient_check(&m, &x, 0.5, 1e-5, 0).unwrap();
        assert!(c.passes(1e-4), "{c:?}");
    }

    #[test]
    fn gradient_check_detects_corruption() {
        let m = init_model(small_spec(2), 5).unwrap();
        let x = [0.3, 0.9, 0.1, 0.5, 1.0];
        let mut g = backprop_gradients(&m, &[x.to_vec()], &[0.7]).unwrap();
        g.iter_mut()
            .for_each(|l| l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= 1.01));
        let c = gradient_check_against(&m, &x, 0.7, &g, 1e-5, 0).unwrap();
        assert!(!c.passes(1e-4), "{c:?}");
    }

    #[test]
    fn learns_linear_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut data = Samples::default();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            data.targets.push(0.5 * x[0]);
            data.inputs.push(x);
        }
        let train_idx: Vec<usize> = (0..700).collect();
        let val_idx: Vec<usize> = (700..1000).collect();
        let (tr, va) = (data.subset(&train_idx), data.subset(&val_idx));
        let m = init_model(MlpSpec::default(), 1).unwrap();
        let cfg = TrainConfig::default();
        let (_, report) = train(&m, &tr, &va, &cfg).unwrap();
        assert_eq!(report.train_mse.len(), 20);
        assert!(*report.train_mse.last().unwrap() < 1e-3, "{:?}", report.train_mse);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut data = Samples::default();
        for _ in 0..200 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            data.targets.push(x[1] * x[2]);
            data.inputs.push(x);
        }
        let m = init_model(small_spec(2), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let (m1, r1) = train(&m, &data, &data, &cfg).unwrap();
        let (m2, r2) = train(&m, &data, &data, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert!(r1.same_outcome(&r2));
    }

    #[test]
    fn full_batch_training_ignores_row_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut data = Samples::default();
        for _ in 0..40 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            data.targets.push(x[0] - x[3]);
            data.inputs.push(x);
        }
        let reversed: Vec<usize> = (0..40).rev().collect();
        let shuffled = data.subset(&reversed);
        let m = init_model(small_spec(2), 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 40,
            epochs: 5,
            ..TrainConfig::default()
        };
        let (m1, _) = train(&m, &data, &data, &cfg).unwrap();
        let (m2, _) = train(&m, &shuffled, &shuffled, &cfg).unwrap();
        // summation order differs, so compare to rounding
        for (a, b) in m1.parameters().zip(m2.parameters()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn config_rejects_zero_epochs() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let m = init_model(small_spec(1), 0).unwrap();
        let data = Samples {
            inputs: vec![vec![0.0; 5]],
            targets: vec![0.0],
        };
        assert!(matches!(train(&m, &data, &data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            learning_rate: 1e6,
            momentum: 0.0,
            epochs: 50,
            ..TrainConfig::default()
        };
        let m = init_model(small_spec(2), 0).unwrap();
        let data = Samples {
            inputs: (0..60).map(|i| vec![i as f64; 5]).collect(),
            targets: (0..60).map(|i| i as f64).collect(),
        };
        assert!(matches!(train(&m, &data, &data, &cfg), Err(Error::TrainingDiverged { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let m = init_model(MlpSpec::default(), 11).unwrap();
        let meta = ModelMeta {
            training_seed: 11,
            normalization_checksum: 99,
        };
        let mut buf = Vec::new();
        write_model(&mut buf, &m, &meta).unwrap();
        let (back, meta2) = read_model(buf.as_slice()).unwrap();
        assert_eq!(meta, meta2);
        let x = [0.5, 0.25, 0.75, 0.1, 1.0];
        assert_eq!(forward(&m, &x).unwrap().to_bits(), forward(&back, &x).unwrap().to_bits());

        let truncated = &buf[..buf.len() - 20];
        assert!(matches!(read_model(truncated), Err(Error::ModelLoad(_))));
        let mut wrong_version = buf.clone();
        wrong_version[8] = 9;
        assert!(matches!(read_model(wrong_version.as_slice()), Err(Error::ModelLoad(_))));
    }

    #[test]
    fn loss_history_csv() {
        let r = TrainReport {
            train_mse: vec![0.04, 0.01],
            val_mse: vec![0.05, 0.02],
            checksum: 1,
            optimizer: "sgd".into(),
            momentum: 0.0,
            wall_time_s: 0.0,
        };
        let mut buf = Vec::new();
        write_loss_history(&mut buf, &r).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_mse,val_mse\n1,0.04,0.05\n2,0.01,0.02\n");
        assert_eq!(r.val_rmse(), vec![0.05f64.sqrt(), 0.02f64.sqrt()]);
    }
}
