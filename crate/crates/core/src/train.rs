//! Two-branch loss, SGD with momentum, step learning-rate schedule, the
//! training/evaluation loops and the attention-mechanism comparison harness.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::abn::{AbnModel, AbnOutput, Mechanism, NetworkSpec};
use crate::data::{augment, shuffled_indices, AugmentConfig, Dataset, Labels};
use crate::error::{invalid, AbnError, Result};
use crate::layers::{Mode, ParamId, ParamStore, Session};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(fraction of epochs, multiplier of lr0)` steps, fractions strictly
    /// increasing in (0, 1).
    pub schedule: Vec<(f64, f64)>,
    /// Seeds the shuffle and augmentation stream.
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
}

impl TrainConfig {
    /// lr0 = 0.1, momentum 0.9, weight decay 1e-4, lr ÷10 at 50% and 75%.
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: vec![(0.5, 0.1), (0.75, 0.01)],
            seed,
            augment: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return invalid("epochs and batch size must be positive");
        }
        // lr0 = 0 is allowed: it turns training into an exact no-op.
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return invalid(format!("learning rate {} must be finite and non-negative", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return invalid("weight decay must be finite and non-negative");
        }
        let mut prev_f = 0.0;
        let mut prev_m = 1.0;
        for &(f, m) in &self.schedule {
            if !(f > prev_f && f < 1.0) {
                return invalid("schedule fractions must be strictly increasing in (0, 1)");
            }
            if !(m >= 0.0 && m <= prev_m) {
                return invalid("schedule multipliers must be non-increasing within [0, 1]");
            }
            prev_f = f;
            prev_m = m;
        }
        Ok(())
    }
}

/// Learning rate for a zero-based epoch: `lr0` times the multiplier of the
/// last schedule step whose start `fraction * epochs` has been reached.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let e = epoch as f64;
    let total = config.epochs as f64;
    let mult = config
        .schedule
        .iter()
        .take_while(|(f, _)| e >= f * total)
        .last()
        .map_or(1.0, |&(_, m)| m);
    config.lr0 * mult
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub attention: Option<Var>,
    pub perception: Var,
}

fn attribute_targets(spec: &NetworkSpec, labels: &Labels) -> Result<Vec<u8>> {
    match labels {
        Labels::Attributes { tasks, values } if *tasks == spec.task_count => Ok(values.clone()),
        Labels::Attributes { tasks, .. } => invalid(format!(
            "{tasks} attribute labels for a {}-task network",
            spec.task_count
        )),
        Labels::Classes { .. } => invalid("multi-task network needs attribute labels"),
    }
}

fn class_targets<'a>(spec: &NetworkSpec, labels: &'a Labels) -> Result<&'a [usize]> {
    match labels {
        Labels::Classes {
            num_classes,
            labels,
        } if *num_classes == spec.num_classes => Ok(labels),
        Labels::Classes { num_classes, .. } => invalid(format!(
            "{num_classes}-class labels for a {}-class network",
            spec.num_classes
        )),
        Labels::Attributes { .. } => invalid("single-task network needs class labels"),
    }
}

/// Attention loss plus perception loss, unweighted.
///
/// Single task: cross-entropy on both branches (attention branch omitted for
/// the plain baseline). Multi-task: binary cross-entropy of the sigmoid
/// attention scores summed over tasks, plus the per-task two-way
/// cross-entropies summed over tasks; every term is averaged over the batch.
pub fn combined_loss(
    g: &mut Graph,
    spec: &NetworkSpec,
    out: &AbnOutput,
    labels: &Labels,
) -> Result<LossParts> {
    let (attention, perception) = if spec.is_multitask() {
        let values = attribute_targets(spec, labels)?;
        let tasks = spec.task_count;
        let n = values.len() / tasks;
        let attention = match out.att_scores {
            Some(scores) => {
                let targets: Vec<f64> = values.iter().map(|&v| v as f64).collect();
                Some(g.binary_cross_entropy(scores, &targets)?)
            }
            None => None,
        };
        // Rows of the flattened [N*T, 2] matrix are (sample, task) pairs, so
        // the mean over them times T is the sum of per-task means.
        let pairs = g.reshape(out.per_scores, &[n * tasks, 2])?;
        let classes: Vec<usize> = values.iter().map(|&v| v as usize).collect();
        let mean = g.cross_entropy(pairs, &classes)?;
        (attention, g.scale(mean, tasks as f64))
    } else {
        let y = class_targets(spec, labels)?;
        let attention = match out.att_scores {
            Some(scores) => Some(g.cross_entropy(scores, y)?),
            None => None,
        };
        (attention, g.cross_entropy(out.per_scores, y)?)
    };
    let total = match attention {
        Some(a) => g.add(a, perception)?,
        None => perception,
    };
    Ok(LossParts {
        total,
        attention,
        perception,
    })
}

/// Per-parameter velocities, indexed like the parameter store.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    velocity: Vec<Option<Vec<f64>>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(id.index())?.as_deref()
    }
}

/// Classic momentum: `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`. A parameter with
/// no gradient is treated as having a zero gradient.
pub fn sgd_momentum_step(
    params: &mut ParamStore,
    grads: &[(ParamId, Option<Vec<f64>>)],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.velocity.len() < params.len() {
        state.velocity.resize(params.len(), None);
    }
    for (id, grad) in grads {
        let p = params.get_mut(*id);
        if let Some(g) = grad {
            if g.len() != p.len() {
                return invalid(format!(
                    "gradient of {} has {} values for {} parameters",
                    id.index(),
                    g.len(),
                    p.len()
                ));
            }
        }
        let v = state.velocity[id.index()].get_or_insert_with(|| vec![0.0; p.len()]);
        for (i, (pv, vv)) in p.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
            let gi = grad.as_ref().map_or(0.0, |g| g[i]);
            *vv = momentum * *vv + (gi + weight_decay * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Top-1 error % (single task) or mean per-task accuracy % (multi-task)
    /// on the evaluation set, when one was given.
    pub eval_metric: Option<f64>,
}

/// One optimization step on a batch of raw images; returns the batch loss.
pub fn train_step(
    model: &mut AbnModel,
    batch: &Dataset,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let input = model.prepare(&batch.images)?;
    let (net, params) = model.split();
    let mut s = Session::new(params, Mode::Train);
    let x = s.input(input);
    let out = net.forward(&mut s, x)?;
    let loss = combined_loss(&mut s.graph, &net.spec, &out, &batch.labels)?;
    let value = s.value(loss.total).item();
    if !value.is_finite() {
        return Err(AbnError::Divergence {
            epoch: 0,
            step: 0,
            loss: value,
        });
    }
    s.backward(loss.total)?;
    let grads = s.take_param_grads();
    drop(s);
    sgd_momentum_step(
        &mut model.params,
        &grads,
        state,
        lr,
        config.momentum,
        config.weight_decay,
    )?;
    Ok(value)
}

/// Runs `config.epochs` epochs of shuffled mini-batch SGD, evaluating on
/// `eval` after every epoch. Fully determined by the model's initial state,
/// the data and `config.seed`.
pub fn train_epochs(
    model: &mut AbnModel,
    train: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    train_epochs_with(model, train, eval, config, |_| {})
}

/// [`train_epochs`] with a callback after every epoch (progress reporting).
pub fn train_epochs_with(
    model: &mut AbnModel,
    train: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if train.is_empty() {
        return invalid("training set is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let order = shuffled_indices(train.len(), &mut rng);
        let mut total = 0.0;
        for (step, rows) in order.chunks(config.batch_size).enumerate() {
            let mut batch = train.subset(rows);
            if let Some(aug) = &config.augment {
                batch = augment(&batch, aug, &mut rng)?;
            }
            let loss = match train_step(model, &batch, &mut state, lr, config) {
                Err(AbnError::Divergence { loss, .. }) => {
                    return Err(AbnError::Divergence { epoch, step, loss })
                }
                other => other?,
            };
            total += loss * rows.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            eval_metric: eval.map(|d| evaluate(model, d)).transpose()?,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per row of `[N, K]` probabilities, or per (sample, task)
/// of `[N, T, 2]` probabilities, row-major.
pub fn predictions(per_scores: &Tensor) -> Vec<usize> {
    let width = *per_scores.shape().last().expect("non-empty shape");
    per_scores.data().chunks(width).map(argmax).collect()
}

/// Percentage of predictions that differ from the targets.
pub fn error_percent(predicted: &[usize], targets: &[usize]) -> f64 {
    assert_eq!(predicted.len(), targets.len(), "prediction/target count mismatch");
    let wrong = predicted.iter().zip(targets).filter(|(p, t)| p != t).count();
    100.0 * wrong as f64 / targets.len() as f64
}

/// Samples per evaluation forward pass.
pub const EVAL_BATCH: usize = 100;

/// Eval-mode forward over the whole dataset, returning the concatenated
/// perception probabilities.
pub fn predict_scores(model: &mut AbnModel, data: &Dataset) -> Result<Tensor> {
    let mut shape = Vec::new();
    let mut values = Vec::new();
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(EVAL_BATCH) {
        let batch = data.subset(chunk);
        let out = model.infer(&batch.images)?;
        if shape.is_empty() {
            shape = out.per_scores.shape().to_vec();
        }
        values.extend_from_slice(out.per_scores.data());
    }
    shape[0] = data.len();
    Tensor::new(shape, values)
}

/// Top-1 error % for single-task models; mean per-task accuracy % for
/// multi-task models.
pub fn evaluate(model: &mut AbnModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return invalid("evaluation set is empty");
    }
    let spec = model.spec;
    let scores = predict_scores(model, data)?;
    let predicted = predictions(&scores);
    if spec.is_multitask() {
        let values = attribute_targets(&spec, &data.labels)?;
        let targets: Vec<usize> = values.iter().map(|&v| v as usize).collect();
        Ok(100.0 - error_percent(&predicted, &targets))
    } else {
        let targets = class_targets(&spec, &data.labels)?;
        Ok(error_percent(&predicted, targets))
    }
}

/// CSV name of the history's evaluation column.
pub fn metric_name(spec: &NetworkSpec) -> &'static str {
    if spec.is_multitask() {
        "eval_accuracy"
    } else {
        "eval_top1_error"
    }
}

/// `epoch,train_loss,<metric>` with one LF-terminated line per epoch; a
/// missing evaluation leaves the last field empty.
pub fn history_csv(spec: &NetworkSpec, history: &[EpochRecord]) -> String {
    let mut out = format!("epoch,train_loss,{}\n", metric_name(spec));
    for r in history {
        let metric = r.eval_metric.map(|m| m.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{metric}", r.epoch, r.train_loss).expect("write to string");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub mechanism: Mechanism,
    pub top1_error: f64,
    pub history: Vec<EpochRecord>,
}

/// The three mechanisms in table order: none, dot, residual.
pub const COMPARED: [Mechanism; 3] = [Mechanism::None, Mechanism::Dot, Mechanism::Residual];

/// Trains one model per mechanism from the same initialization seed, data
/// and configuration, and reports the final test error of each.
pub fn mechanism_comparison(
    base: NetworkSpec,
    model_seed: u64,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    prepare: impl Fn(&mut AbnModel) -> Result<()>,
) -> Result<Vec<ComparisonRow>> {
    COMPARED
        .iter()
        .map(|&mechanism| {
            let mut model = AbnModel::build(base.with_mechanism(mechanism), model_seed)?;
            prepare(&mut model)?;
            let history = train_epochs(&mut model, train, None, config)?;
            Ok(ComparisonRow {
                mechanism,
                top1_error: evaluate(&mut model, test)?,
                history,
            })
        })
        .collect()
}

/// `mechanism,formula,top1_error`, one LF-terminated line per row.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("mechanism,formula,top1_error\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{}",
            r.mechanism.name(),
            r.mechanism.formula(),
            r.top1_error
        )
        .expect("write to string");
    }
    out
}
