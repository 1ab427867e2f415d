//! Parameter storage, forward sessions and the reusable network blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape_err, AbnError, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered, uniquely named tensors owned by a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return invalid(format!("duplicate parameter name {name:?}"));
        }
        self.entries.push(ParamEntry { name, value, kind });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return shape_err(format!(
                "parameter {:?} has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|id| self.get(id).len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Session<'a> {
    pub graph: Graph,
    params: &'a mut ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a mut ParamStore, mode: Mode) -> Self {
        let bound = vec![None; params.len()];
        Self {
            graph: Graph::new(),
            params,
            bound,
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    /// The tape leaf holding parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = &self.params.entries[id.0];
        let v = self
            .graph
            .leaf(entry.value.clone(), entry.kind == ParamKind::Trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients of every trainable parameter, `None` where the parameter
    /// was not used or not reached.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, Option<Vec<f64>>)> {
        let ids: Vec<ParamId> = self.params.trainable().collect();
        ids.into_iter()
            .map(|id| (id, self.bound[id.0].and_then(|v| self.graph.take_grad(v))))
            .collect()
    }

    pub fn param_grad(&self, id: ParamId) -> Option<Tensor> {
        self.bound[id.0].and_then(|v| self.graph.grad(v))
    }

    fn buffer_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.params.get_mut(id)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for one named parameter: the same (run seed, name) pair always draws
/// the same values no matter which other parameters exist.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(name.as_bytes())
}

/// Zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`, drawn from
/// a ChaCha8 stream seeded with `seed`.
pub fn he_initialize(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor> {
    if fan_in == 0 {
        return invalid("fan_in must be at least 1");
    }
    let normal = Normal::new(0.0, he_std(fan_in))
        .map_err(|e| AbnError::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::from_fn(shape, |_| normal.sample(&mut rng)))
}

pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        use ParamKind::*;
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), Buffer)?,
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (unbiased variance); eval mode uses the running
    /// estimates and leaves them untouched.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                let correction = stats.count as f64 / (stats.count as f64 - 1.0);
                let rm = s.buffer_mut(self.running_mean);
                for (r, &b) in rm.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                let rv = s.buffer_mut(self.running_var);
                for (r, &b) in rv.data_mut().iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * b * correction;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.params().get(self.running_mean).data().to_vec();
                let var = s.params().get(self.running_var).data().to_vec();
                s.graph.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub batch_norm: bool,
    pub relu: bool,
}

/// Convolution, optional batch norm, optional ReLU. The convolution carries a
/// bias only when no batch norm follows it.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub bn: Option<BatchNorm>,
    pub spec: ConvSpec,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, seed: u64) -> Result<Self> {
        if spec.kernel.is_multiple_of(2) || spec.stride == 0 {
            return invalid(format!("unsupported conv block {spec:?}"));
        }
        let wname = format!("{name}.weight");
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let w = he_initialize(
            &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
            fan_in,
            param_seed(seed, &wname),
        )?;
        let weight = store.add(wname, w, ParamKind::Trainable)?;
        let (bias, bn) = if spec.batch_norm {
            (None, Some(BatchNorm::new(store, &format!("{name}.bn"), spec.out_channels)?))
        } else {
            let b = store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[spec.out_channels]),
                ParamKind::Trainable,
            )?;
            (Some(b), None)
        };
        Ok(Self {
            weight,
            bias,
            bn,
            spec,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        let mut y = s.graph.conv2d(x, w, b, self.spec.stride, self.spec.kernel / 2)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(s, y)?;
        }
        if self.spec.relu {
            y = s.graph.relu(y)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shortcut {
    /// Identity when shapes allow, 1x1 projection otherwise.
    Auto,
    Identity,
    Projection,
}

/// `relu(conv-bn-relu-conv-bn(x) + shortcut(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub projection: Option<ConvBlock>,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        shortcut: Shortcut,
        seed: u64,
    ) -> Result<Self> {
        let shapes_match = in_channels == out_channels && stride == 1;
        let project = match shortcut {
            Shortcut::Auto => !shapes_match,
            Shortcut::Projection => true,
            Shortcut::Identity if !shapes_match => {
                return shape_err(format!(
                    "identity shortcut cannot map {in_channels} channels at stride {stride} \
                     to {out_channels} channels"
                ))
            }
            Shortcut::Identity => false,
        };
        let conv = |in_channels, stride, relu| ConvSpec {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            batch_norm: true,
            relu,
        };
        let conv1 = ConvBlock::new(store, &format!("{name}.conv1"), conv(in_channels, stride, true), seed)?;
        let conv2 = ConvBlock::new(store, &format!("{name}.conv2"), conv(out_channels, 1, false), seed)?;
        let projection = if project {
            let spec = ConvSpec {
                in_channels,
                out_channels,
                kernel: 1,
                stride,
                batch_norm: true,
                relu: false,
            };
            Some(ConvBlock::new(store, &format!("{name}.shortcut"), spec, seed)?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            projection,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.conv2.forward(s, h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(s, x)?,
            None => x,
        };
        if s.graph.shape(h) != s.graph.shape(skip) {
            return shape_err(format!(
                "residual paths disagree: {:?} vs {:?}",
                s.graph.shape(h),
                s.graph.shape(skip)
            ));
        }
        let sum = s.graph.add(h, skip)?;
        s.graph.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Conv(ConvBlock),
    Residual(ResidualBlock),
}

impl Block {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            Block::Conv(b) => b.forward(s, x),
            Block::Residual(b) => b.forward(s, x),
        }
    }
}

pub fn forward_blocks(blocks: &[Block], s: &mut Session, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(s, x)?;
    }
    Ok(x)
}
