//! Reference local learner: a sigmoid-output MLP (logistic regression when it
//! has no hidden layers) trained with Adam and a reduce-on-plateau scheduler.
//!
//! The federation only talks to [`LocalTrainer`]; nothing outside this module
//! depends on the model's internals. Parameters are stored as `f32` in a
//! [`TensorMap`] with entries `w0, b0, w1, b1, ...` (`w{i}` has shape
//! `[fan_in, fan_out]`), while every forward/backward pass runs in `f64`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datakit::SiteDataset;
use crate::seed::derive_seed;
use crate::tensor::{self, Tensor, TensorError, TensorMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("invalid trainer state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
}

/// Layer widths `[input, hidden..., 1]` inferred from or used to build a model.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    widths: Vec<usize>,
}

impl Layout {
    fn from_spec(spec: &ModelSpec) -> Result<Self, TrainError> {
        if spec.input_dim == 0 {
            return Err(TrainError::InvalidSpec("input_dim must be at least 1".into()));
        }
        if spec.hidden_dims.contains(&0) {
            return Err(TrainError::InvalidSpec("hidden layer widths must be positive".into()));
        }
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.hidden_dims);
        widths.push(1);
        Ok(Self { widths })
    }

    fn from_weights(weights: &TensorMap) -> Result<Self, TrainError> {
        let entries = weights.entries();
        if entries.is_empty() || !entries.len().is_multiple_of(2) {
            return Err(TrainError::DimensionMismatch(
                "expected alternating w{i}/b{i} entries".into(),
            ));
        }
        let mut widths = Vec::new();
        for (i, pair) in entries.chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            let ok = w.name == format!("w{i}")
                && b.name == format!("b{i}")
                && w.shape.len() == 2
                && b.shape == [w.shape[1]]
                && widths.last().is_none_or(|&prev| prev == w.shape[0]);
            if !ok {
                return Err(TrainError::DimensionMismatch(format!("layer {i} is malformed")));
            }
            if widths.is_empty() {
                widths.push(w.shape[0]);
            }
            widths.push(w.shape[1]);
        }
        if widths.last() != Some(&1) {
            return Err(TrainError::DimensionMismatch("output layer must have width 1".into()));
        }
        Ok(Self { widths })
    }

    fn input_dim(&self) -> usize {
        self.widths[0]
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.widths.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Deterministic initialization: uniform Glorot weights from `spec.seed`, zero biases.
pub fn init_model(spec: &ModelSpec) -> Result<TensorMap, TrainError> {
    let layout = Layout::from_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut map = TensorMap::new();
    for (i, (fan_in, fan_out)) in layout.layers().enumerate() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f32> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit) as f32)
            .collect();
        map.push(Tensor::new(format!("w{i}"), vec![fan_in, fan_out], w)?)?;
        map.push(Tensor::zeros(format!("b{i}"), vec![fan_out])?)?;
    }
    Ok(map)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p = sigmoid(z)`, evaluated stably.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Features and labels borrowed from a dataset or owned vectors.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    rows: Vec<&'a [f32]>,
    labels: Vec<u8>,
}

impl<'a> Batch<'a> {
    pub fn new(rows: Vec<&'a [f32]>, labels: Vec<u8>) -> Result<Self, TrainError> {
        if rows.len() != labels.len() {
            return Err(TrainError::DimensionMismatch(format!(
                "{} rows vs {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(TrainError::DimensionMismatch("labels must be 0 or 1".into()));
        }
        Ok(Self { rows, labels })
    }

    pub fn from_indices(data: &'a SiteDataset, idx: &[usize]) -> Self {
        Self {
            rows: idx.iter().map(|&i| data.row(i)).collect(),
            labels: idx.iter().map(|&i| data.label(i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// A model with its parameters widened to `f64`, flattened in map order.
#[derive(Debug, Clone)]
pub struct Mlp {
    layout: Layout,
    params: Vec<f64>,
}

impl Mlp {
    pub fn from_weights(weights: &TensorMap) -> Result<Self, TrainError> {
        let layout = Layout::from_weights(weights)?;
        let params = weights.flatten().into_iter().map(f64::from).collect();
        Ok(Self { layout, params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.layout.input_dim()
    }

    fn check_row(&self, x: &[f32]) -> Result<(), TrainError> {
        if x.len() != self.input_dim() {
            return Err(TrainError::DimensionMismatch(format!(
                "feature length {} vs input_dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Activations of every layer; the last holds the single output logit.
    fn activations(&self, x: &[f32]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>()];
        let mut offset = 0;
        let n_layers = self.layout.widths.len() - 1;
        for (l, (fan_in, fan_out)) in self.layout.layers().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let input = acts.last().unwrap();
            let mut out = b.to_vec();
            for (i, &a) in input.iter().enumerate() {
                let row = &w[i * fan_out..(i + 1) * fan_out];
                for (o, &wv) in out.iter_mut().zip(row) {
                    *o += a * wv;
                }
            }
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        acts
    }

    pub fn logit(&self, x: &[f32]) -> Result<f64, TrainError> {
        self.check_row(x)?;
        Ok(self.activations(x).last().unwrap()[0])
    }

    pub fn predict(&self, x: &[f32]) -> Result<f64, TrainError> {
        Ok(sigmoid(self.logit(x)?))
    }

    /// Mean binary cross-entropy over the batch.
    pub fn loss(&self, batch: &Batch) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let mut total = 0.0;
        for (x, &y) in batch.rows.iter().zip(&batch.labels) {
            total += bce_with_logit(self.logit(x)?, f64::from(y));
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean binary cross-entropy and its exact gradient (flattened, map order).
    pub fn loss_and_gradient(&self, batch: &Batch) -> Result<(f64, Vec<f64>), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let layers: Vec<(usize, usize)> = self.layout.layers().collect();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for &(i, o) in &layers {
            offsets.push(off);
            off += i * o + o;
        }
        for (x, &y) in batch.rows.iter().zip(&batch.labels) {
            self.check_row(x)?;
            let acts = self.activations(x);
            let z = acts.last().unwrap()[0];
            let y = f64::from(y);
            total += bce_with_logit(z, y);
            // dL/dz for the output layer.
            let mut delta = vec![sigmoid(z) - y];
            for l in (0..layers.len()).rev() {
                let (fan_in, fan_out) = layers[l];
                let base = offsets[l];
                let input = &acts[l];
                for i in 0..fan_in {
                    for o in 0..fan_out {
                        grad[base + i * fan_out + o] += input[i] * delta[o];
                    }
                }
                for o in 0..fan_out {
                    grad[base + fan_in * fan_out + o] += delta[o];
                }
                if l > 0 {
                    let w = &self.params[base..base + fan_in * fan_out];
                    delta = (0..fan_in)
                        .map(|i| {
                            let back: f64 = (0..fan_out).map(|o| w[i * fan_out + o] * delta[o]).sum();
                            back * (1.0 - input[i] * input[i])
                        })
                        .collect();
                }
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((total / n, grad))
    }
}

/// Probability of the positive class.
pub fn forward(weights: &TensorMap, features: &[f32]) -> Result<f64, TrainError> {
    Mlp::from_weights(weights)?.predict(features)
}

pub fn loss_and_gradient(weights: &TensorMap, batch: &Batch) -> Result<(f64, TensorMap), TrainError> {
    let (loss, grad) = Mlp::from_weights(weights)?.loss_and_gradient(batch)?;
    let grad: Vec<f32> = grad.into_iter().map(|g| g as f32).collect();
    Ok((loss, weights.with_values(&grad)?))
}

/// Adam moments and hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: TensorMap,
    pub second_moment: TensorMap,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(like: &TensorMap, learning_rate: f64) -> Result<Self, TrainError> {
        let zeros = like.with_values(&vec![0.0; like.num_values()])?;
        Ok(Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        })
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    state: &OptimizerState,
    weights: &TensorMap,
    grad: &TensorMap,
) -> Result<(OptimizerState, TensorMap), TrainError> {
    let g: Vec<f64> = grad.flatten().into_iter().map(f64::from).collect();
    adam_step_f64(state, weights, &g)
}

fn adam_step_f64(
    state: &OptimizerState,
    weights: &TensorMap,
    grad: &[f64],
) -> Result<(OptimizerState, TensorMap), TrainError> {
    weights.check_same_structure(&state.first_moment)?;
    weights.check_same_structure(&state.second_moment)?;
    if grad.len() != weights.num_values() {
        return Err(TensorError::StructureMismatch("gradient length differs from weights".into()).into());
    }
    let step = state.step + 1;
    let bc1 = 1.0 - state.beta1.powi(step as i32);
    let bc2 = 1.0 - state.beta2.powi(step as i32);
    let w = weights.flatten();
    let m = state.first_moment.flatten();
    let v = state.second_moment.flatten();
    let mut new_w = Vec::with_capacity(w.len());
    let mut new_m = Vec::with_capacity(w.len());
    let mut new_v = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let g = grad[i];
        let mi = state.beta1 * f64::from(m[i]) + (1.0 - state.beta1) * g;
        let vi = state.beta2 * f64::from(v[i]) + (1.0 - state.beta2) * g * g;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        new_w.push((f64::from(w[i]) - state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon)) as f32);
        new_m.push(mi as f32);
        new_v.push(vi as f32);
    }
    let next = OptimizerState {
        step,
        first_moment: state.first_moment.with_values(&new_m)?,
        second_moment: state.second_moment.with_values(&new_v)?,
        ..state.clone()
    };
    Ok((next, weights.with_values(&new_w)?))
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// validation evaluations without strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: u32,
    pub best_loss: f64,
    pub evals_since_improvement: u32,
    pub min_lr: f64,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        Self::new(0.1, 10, 0.0)
    }
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: u32, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            best_loss: f64::INFINITY,
            evals_since_improvement: 0,
            min_lr,
        }
    }

    /// Feeds one validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> Result<f64, TrainError> {
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(val_loss));
        }
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.evals_since_improvement = 0;
            return Ok(lr);
        }
        self.evals_since_improvement += 1;
        if self.evals_since_improvement >= self.patience {
            self.evals_since_improvement = 0;
            let reduced = lr * self.factor;
            return Ok(if reduced < self.min_lr {
                self.min_lr.min(lr)
            } else {
                reduced
            });
        }
        Ok(lr)
    }
}

/// Functional form of [`PlateauScheduler::observe`].
pub fn scheduler_observe(
    scheduler: &PlateauScheduler,
    val_loss: f64,
    lr: f64,
) -> Result<(PlateauScheduler, f64), TrainError> {
    let mut next = scheduler.clone();
    let lr = next.observe(val_loss, lr)?;
    Ok((next, lr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Overrides the coordinator's per-round epoch count when set.
    pub epochs_per_round: Option<usize>,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub plateau_factor: f64,
    pub plateau_patience: u32,
    pub min_lr: f64,
    /// Start every round from fresh Adam moments and scheduler.
    pub reset_optimizer_each_round: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            epochs_per_round: None,
            seed: 0,
            hidden_dims: Vec::new(),
            plateau_factor: 0.1,
            plateau_patience: 10,
            min_lr: 0.0,
            reset_optimizer_each_round: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidSpec(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs_per_round == Some(0) {
            return bad("epochs_per_round must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be positive");
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }
}

/// Optimizer and scheduler state carried between `train_local` calls.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub optimizer: Option<OptimizerState>,
    pub scheduler: PlateauScheduler,
    pub learning_rate: f64,
    pub epochs_completed: u64,
}

impl TrainState {
    pub fn new(config: &TrainerConfig) -> Self {
        Self {
            optimizer: None,
            scheduler: PlateauScheduler::new(config.plateau_factor, config.plateau_patience, config.min_lr),
            learning_rate: config.learning_rate,
            epochs_completed: 0,
        }
    }

    /// Text header followed by an `FTM1` block holding the Adam moments.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = BTreeMap::new();
        header.insert("best_loss", self.scheduler.best_loss.to_string());
        header.insert("epochs_completed", self.epochs_completed.to_string());
        header.insert(
            "evals_since_improvement",
            self.scheduler.evals_since_improvement.to_string(),
        );
        header.insert("learning_rate", self.learning_rate.to_string());
        header.insert("has_optimizer", u8::from(self.optimizer.is_some()).to_string());
        let mut moments = TensorMap::new();
        if let Some(opt) = &self.optimizer {
            header.insert("adam_step", opt.step.to_string());
            for (prefix, map) in [("m.", &opt.first_moment), ("v.", &opt.second_moment)] {
                for t in map.entries() {
                    // Names are unique within each map, so prefixing keeps them unique.
                    moments
                        .push(Tensor {
                            name: format!("{prefix}{}", t.name),
                            ..t.clone()
                        })
                        .expect("prefixed names are unique");
                }
            }
        }
        let mut out = String::new();
        for (k, v) in &header {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push('\n');
        let mut bytes = out.into_bytes();
        bytes.extend(tensor::serialize(&moments));
        bytes
    }

    pub fn from_bytes(bytes: &[u8], config: &TrainerConfig) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::InvalidState(m.into());
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("missing header terminator"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let mut fields = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed header line"))?;
            fields.insert(k.to_string(), v.to_string());
        }
        fn get<T: std::str::FromStr>(f: &BTreeMap<String, String>, k: &str) -> Result<T, TrainError> {
            f.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TrainError::InvalidState(format!("missing or invalid `{k}`")))
        }
        let moments = tensor::deserialize(&bytes[split + 2..])?;
        let optimizer = if get::<u8>(&fields, "has_optimizer")? == 1 {
            let pick = |prefix: &str| -> Result<TensorMap, TrainError> {
                let entries = moments
                    .entries()
                    .iter()
                    .filter_map(|t| {
                        t.name.strip_prefix(prefix).map(|n| Tensor {
                            name: n.to_string(),
                            ..t.clone()
                        })
                    })
                    .collect();
                Ok(TensorMap::from_entries(entries)?)
            };
            Some(OptimizerState {
                step: get(&fields, "adam_step")?,
                first_moment: pick("m.")?,
                second_moment: pick("v.")?,
                learning_rate: get(&fields, "learning_rate")?,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            })
        } else {
            None
        };
        let mut scheduler = PlateauScheduler::new(config.plateau_factor, config.plateau_patience, config.min_lr);
        scheduler.best_loss = get(&fields, "best_loss")?;
        scheduler.evals_since_improvement = get(&fields, "evals_since_improvement")?;
        Ok(Self {
            optimizer,
            scheduler,
            learning_rate: get(&fields, "learning_rate")?,
            epochs_completed: get(&fields, "epochs_completed")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub sample_count: usize,
    pub weights: TensorMap,
    /// Learning rate in effect after each epoch.
    pub lr_trace: Vec<f64>,
}

/// Runs `epochs` shuffled mini-batch passes over the train split, starting from
/// `weights` and the carried `state`. Validation loss is observed once per
/// epoch by the plateau scheduler. Epoch `e` (counted across calls through
/// `state.epochs_completed`) shuffles with a seed derived from `(rng_seed, e)`.
pub fn train_local(
    weights: &TensorMap,
    data: &SiteDataset,
    epochs: usize,
    rng_seed: u64,
    config: &TrainerConfig,
    state: &mut TrainState,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if data.split.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.split.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    if epochs == 0 {
        return Err(TrainError::InvalidSpec("epochs must be at least 1".into()));
    }
    let mut model = Mlp::from_weights(weights)?;
    if model.input_dim() != data.dim() {
        return Err(TrainError::DimensionMismatch(format!(
            "model input_dim {} vs dataset dim {}",
            model.input_dim(),
            data.dim()
        )));
    }
    let mut current = weights.clone();
    let mut optimizer = match state.optimizer.take() {
        Some(opt) => {
            current.check_same_structure(&opt.first_moment)?;
            opt
        }
        None => OptimizerState::new(&current, state.learning_rate)?,
    };
    optimizer.learning_rate = state.learning_rate;

    let val = Batch::from_indices(data, &data.split.val);
    let mut lr_trace = Vec::with_capacity(epochs);
    let mut val_loss = f64::NAN;
    for _ in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, state.epochs_completed));
        let mut order = data.split.train.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch::from_indices(data, chunk);
            let (_, grad) = model.loss_and_gradient(&batch)?;
            let (next_opt, next_weights) = adam_step_f64(&optimizer, &current, &grad)?;
            optimizer = next_opt;
            current = next_weights;
            model = Mlp::from_weights(&current)?;
        }
        val_loss = model.loss(&val)?;
        let lr = state.scheduler.observe(val_loss, optimizer.learning_rate)?;
        optimizer.learning_rate = lr;
        state.learning_rate = lr;
        state.epochs_completed += 1;
        lr_trace.push(lr);
    }
    let final_train_loss = model.loss(&Batch::from_indices(data, &data.split.train))?;
    state.optimizer = Some(optimizer);
    current.check_finite()?;
    Ok(TrainReport {
        epochs_run: epochs,
        final_train_loss,
        final_val_loss: val_loss,
        sample_count: data.split.train.len(),
        weights: current,
        lr_trace,
    })
}

/// The interface the federation uses to train on a site's data.
pub trait LocalTrainer: Send {
    /// Trains from `start` for `epochs` passes, advancing internal state.
    fn train(&mut self, start: &TensorMap, data: &SiteDataset, epochs: usize) -> Result<TrainReport, TrainError>;

    /// Positive-class probability for one feature row.
    fn predict(&self, weights: &TensorMap, features: &[f32]) -> Result<f64, TrainError>;

    /// Opaque snapshot of the carried state.
    fn save_state(&self) -> Vec<u8>;

    fn restore_state(&mut self, bytes: &[u8]) -> Result<(), TrainError>;
}

/// [`LocalTrainer`] backed by [`train_local`].
#[derive(Debug, Clone)]
pub struct AdamTrainer {
    pub config: TrainerConfig,
    pub state: TrainState,
}

impl AdamTrainer {
    pub fn new(config: TrainerConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let state = TrainState::new(&config);
        Ok(Self { config, state })
    }
}

impl LocalTrainer for AdamTrainer {
    fn train(&mut self, start: &TensorMap, data: &SiteDataset, epochs: usize) -> Result<TrainReport, TrainError> {
        if self.config.reset_optimizer_each_round {
            self.state = TrainState::new(&self.config);
        }
        let epochs = self.config.epochs_per_round.unwrap_or(epochs);
        train_local(start, data, epochs, self.config.seed, &self.config, &mut self.state)
    }

    fn predict(&self, weights: &TensorMap, features: &[f32]) -> Result<f64, TrainError> {
        forward(weights, features)
    }

    fn save_state(&self) -> Vec<u8> {
        self.state.to_bytes()
    }

    fn restore_state(&mut self, bytes: &[u8]) -> Result<(), TrainError> {
        self.state = TrainState::from_bytes(bytes, &self.config)?;
        Ok(())
    }
}
