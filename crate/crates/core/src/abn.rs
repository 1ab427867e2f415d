//! Attention branch network assembly.
//!
//! A baseline of three stages is split after `split_point` stages:
//!
//! ```text
//!            ┌─ attention branch: remaining stages (stride 1) → BN → K×1×1 conv ─┬─ GAP → softmax      (att_scores)
//! x → extractor ─┤                                                                └─ 1×1×1 conv → sigmoid (attention map M)
//!            └─ attention mechanism (g·M or g·(1+M)) → remaining stages → GAP → linear → softmax (per_scores)
//! ```
//!
//! The multi-task variant replaces the two attention heads with a single
//! T×1×1 conv: task scores are `sigmoid(GAP(map_t))`, attention maps are
//! `sigmoid(map_t)`, and the perception branch runs once per task with
//! shared weights, keeping row `t` of its `T×2` output on pass `t`.

use crate::data::ChannelStats;
use crate::error::{invalid, shape_err, Result};
use crate::layers::{
    forward_blocks, param_seed, BatchNorm, Block, ConvBlock, ConvSpec, Mode, ParamId, ParamKind,
    ParamStore, ResidualBlock, Session, Shortcut,
};
use crate::tensor::{kernels, Graph, Tensor, Var};

pub const STAGES: usize = 3;

/// Buffers holding the per-channel input normalization applied before the
/// first layer; identity until set from training data.
pub const INPUT_MEAN: &str = "input.mean";
pub const INPUT_STD: &str = "input.std";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// CIFAR-style ResNet with `(depth - 2) / 6` basic blocks per stage.
    ResNetCifar { depth: usize },
    /// Plain conv-BN-ReLU stages; the first conv of stages 2 and 3 has stride 2.
    SmallVgg { convs_per_stage: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    /// No attention branch; the plain split baseline.
    None,
    /// `g' = M · g`
    Dot,
    /// `g' = (1 + M) · g`
    Residual,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Dot => "dot",
            Mechanism::Residual => "residual",
        }
    }

    /// Column label used in comparison tables.
    pub fn formula(self) -> &'static str {
        match self {
            Mechanism::None => "g(x)",
            Mechanism::Dot => "g(x)*M(x)",
            Mechanism::Residual => "g(x)*(1+M(x))",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub baseline: Baseline,
    pub in_channels: usize,
    /// Channels of the first stage; later stages double it.
    pub base_width: usize,
    pub num_classes: usize,
    /// More than one task selects the multi-task layout.
    pub task_count: usize,
    /// Number of stages in the feature extractor (1 or 2).
    pub split_point: usize,
    pub mechanism: Mechanism,
}

impl NetworkSpec {
    pub fn resnet_cifar(depth: usize, num_classes: usize) -> Self {
        Self {
            baseline: Baseline::ResNetCifar { depth },
            in_channels: 3,
            base_width: 16,
            num_classes,
            task_count: 1,
            split_point: 2,
            mechanism: Mechanism::Residual,
        }
    }

    pub fn small_vgg(convs_per_stage: usize, num_classes: usize) -> Self {
        Self {
            baseline: Baseline::SmallVgg { convs_per_stage },
            ..Self::resnet_cifar(20, num_classes)
        }
    }

    pub fn with_mechanism(self, mechanism: Mechanism) -> Self {
        Self { mechanism, ..self }
    }

    /// Multi-task layout with `tasks` binary attributes. Task maps gate the
    /// features directly (`M^t * g`); call [`Self::with_mechanism`] afterwards
    /// to override.
    pub fn with_tasks(self, tasks: usize) -> Self {
        Self {
            task_count: tasks,
            num_classes: 2,
            mechanism: Mechanism::Dot,
            ..self
        }
    }

    pub fn is_multitask(&self) -> bool {
        self.task_count > 1
    }

    pub fn validate(&self) -> Result<()> {
        match self.baseline {
            Baseline::ResNetCifar { depth } => {
                if depth < 8 || (depth - 2) % 6 != 0 {
                    return invalid(format!("ResNet depth {depth} is not of the form 6n+2 with n >= 1"));
                }
            }
            Baseline::SmallVgg { convs_per_stage } => {
                if convs_per_stage == 0 {
                    return invalid("small VGG needs at least one conv per stage");
                }
            }
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return invalid("input channels and base width must be positive");
        }
        if self.num_classes < 2 {
            return invalid(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.task_count == 0 {
            return invalid("task count must be at least 1");
        }
        if !(1..STAGES).contains(&self.split_point) {
            return invalid(format!(
                "split point {} must lie strictly inside the {STAGES}-stage baseline",
                self.split_point
            ));
        }
        Ok(())
    }

    fn stage_width(&self, stage: usize) -> usize {
        self.base_width << (stage - 1)
    }

    pub fn feature_channels(&self) -> usize {
        self.stage_width(self.split_point)
    }

    pub fn top_channels(&self) -> usize {
        self.stage_width(STAGES)
    }

    /// Width of the perception classifier output.
    pub fn perception_outputs(&self) -> usize {
        if self.is_multitask() {
            2 * self.task_count
        } else {
            self.num_classes
        }
    }

    /// Overall spatial downsampling of the extractor.
    pub fn extractor_stride(&self) -> usize {
        1 << (self.split_point - 1)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBranch {
    pub blocks: Vec<Block>,
    pub bn: BatchNorm,
    /// K×1×1 (or T×1×1) convolution producing per-class (per-task) maps.
    pub score_conv: ConvBlock,
    /// 1×1×1 aggregation convolution; single-task only.
    pub map_conv: Option<ConvBlock>,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct AbnNet {
    pub extractor: Vec<Block>,
    pub attention: Option<AttentionBranch>,
    pub perception: Vec<Block>,
    pub classifier: Linear,
}

/// Network spec, block structure, and the parameters they index into.
#[derive(Clone, Debug)]
pub struct AbnModel {
    pub spec: NetworkSpec,
    pub net: AbnNet,
    pub params: ParamStore,
}

/// Tape handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AbnOutput {
    /// Attention-branch probabilities: `[N, K]` softmax, or `[N, T]` sigmoid.
    pub att_scores: Option<Var>,
    /// Perception probabilities: `[N, K]`, or `[N, T, 2]`.
    pub per_scores: Var,
    /// `[N, 1, h, w]`, or `[N, T, h, w]`, in (0, 1).
    pub attention_map: Option<Var>,
    /// Per-class (per-task) response maps before normalization.
    pub k_maps: Option<Var>,
    pub feature_map: Var,
}

/// Outputs of [`AttentionBranch`] for one batch.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub scores: Var,
    pub map: Var,
    pub k_maps: Var,
}

/// Plain tensors copied out of an [`AbnOutput`].
#[derive(Clone, Debug)]
pub struct AbnValues {
    pub att_scores: Option<Tensor>,
    pub per_scores: Tensor,
    pub attention_map: Option<Tensor>,
    pub k_maps: Option<Tensor>,
    pub feature_map: Tensor,
}

impl AbnOutput {
    pub fn values(&self, g: &Graph) -> AbnValues {
        AbnValues {
            att_scores: self.att_scores.map(|v| g.value(v).clone()),
            per_scores: g.value(self.per_scores).clone(),
            attention_map: self.attention_map.map(|v| g.value(v).clone()),
            k_maps: self.k_maps.map(|v| g.value(v).clone()),
            feature_map: g.value(self.feature_map).clone(),
        }
    }
}

fn build_stage(
    store: &mut ParamStore,
    spec: &NetworkSpec,
    name: &str,
    stage: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<Block>> {
    let out = spec.stage_width(stage);
    let input = match (stage, spec.baseline) {
        (1, Baseline::SmallVgg { .. }) => spec.in_channels,
        (1, Baseline::ResNetCifar { .. }) => spec.base_width,
        _ => spec.stage_width(stage - 1),
    };
    let mut blocks = Vec::new();
    match spec.baseline {
        Baseline::ResNetCifar { depth } => {
            for i in 0..(depth - 2) / 6 {
                let (cin, st) = if i == 0 { (input, stride) } else { (out, 1) };
                blocks.push(Block::Residual(ResidualBlock::new(
                    store,
                    &format!("{name}.block{i}"),
                    cin,
                    out,
                    st,
                    Shortcut::Auto,
                    seed,
                )?));
            }
        }
        Baseline::SmallVgg { convs_per_stage } => {
            for i in 0..convs_per_stage {
                let (cin, st) = if i == 0 { (input, stride) } else { (out, 1) };
                let conv = ConvSpec {
                    in_channels: cin,
                    out_channels: out,
                    kernel: 3,
                    stride: st,
                    batch_norm: true,
                    relu: true,
                };
                blocks.push(Block::Conv(ConvBlock::new(
                    store,
                    &format!("{name}.conv{i}"),
                    conv,
                    seed,
                )?));
            }
        }
    }
    Ok(blocks)
}

fn stage_stride(stage: usize) -> usize {
    if stage == 1 {
        1
    } else {
        2
    }
}

/// Builds the network. Every tensor is seeded from `(seed, name)`, so parts
/// shared by two specs get identical initial values.
pub fn build_abn(spec: NetworkSpec, seed: u64) -> Result<AbnModel> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let c = spec.in_channels;
    store.add(INPUT_MEAN, Tensor::zeros(&[c]), ParamKind::Buffer)?;
    store.add(INPUT_STD, Tensor::full(&[c], 1.0), ParamKind::Buffer)?;

    let mut extractor = Vec::new();
    if let Baseline::ResNetCifar { .. } = spec.baseline {
        let stem = ConvSpec {
            in_channels: spec.in_channels,
            out_channels: spec.base_width,
            kernel: 3,
            stride: 1,
            batch_norm: true,
            relu: true,
        };
        extractor.push(Block::Conv(ConvBlock::new(&mut store, "extractor.stem", stem, seed)?));
    }
    for stage in 1..=spec.split_point {
        let name = format!("extractor.stage{stage}");
        extractor.extend(build_stage(&mut store, &spec, &name, stage, stage_stride(stage), seed)?);
    }

    let attention = if spec.mechanism == Mechanism::None {
        None
    } else {
        let mut blocks = Vec::new();
        for stage in spec.split_point + 1..=STAGES {
            let name = format!("attention.stage{stage}");
            blocks.extend(build_stage(&mut store, &spec, &name, stage, 1, seed)?);
        }
        let top = spec.top_channels();
        let bn = BatchNorm::new(&mut store, "attention.bn", top)?;
        let maps = if spec.is_multitask() {
            spec.task_count
        } else {
            spec.num_classes
        };
        let pointwise = |in_channels, out_channels| ConvSpec {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            batch_norm: false,
            relu: false,
        };
        let score_conv = ConvBlock::new(&mut store, "attention.score_conv", pointwise(top, maps), seed)?;
        let map_conv = if spec.is_multitask() {
            None
        } else {
            Some(ConvBlock::new(&mut store, "attention.map_conv", pointwise(maps, 1), seed)?)
        };
        Some(AttentionBranch {
            blocks,
            bn,
            score_conv,
            map_conv,
        })
    };

    let mut perception = Vec::new();
    for stage in spec.split_point + 1..=STAGES {
        let name = format!("perception.stage{stage}");
        perception.extend(build_stage(&mut store, &spec, &name, stage, stage_stride(stage), seed)?);
    }
    let top = spec.top_channels();
    let outputs = spec.perception_outputs();
    let wname = "perception.fc.weight";
    let w = crate::layers::he_initialize(&[top, outputs], top, param_seed(seed, wname))?;
    let classifier = Linear {
        weight: store.add(wname, w, ParamKind::Trainable)?,
        bias: store.add("perception.fc.bias", Tensor::zeros(&[outputs]), ParamKind::Trainable)?,
    };

    Ok(AbnModel {
        spec,
        net: AbnNet {
            extractor,
            attention,
            perception,
            classifier,
        },
        params: store,
    })
}

/// Applies an attention map `[N,1,h,w]` to a feature map `[N,C,h,w]`.
pub fn attention_apply(g: &mut Graph, feature: Var, map: Var, mechanism: Mechanism) -> Result<Var> {
    let (fs, ms) = (g.shape(feature), g.shape(map));
    match (fs, ms) {
        ([n, _, h, w], [mn, 1, mh, mw]) if n == mn && h == mh && w == mw => {}
        _ => {
            return shape_err(format!(
                "attention map {ms:?} does not match feature map {fs:?}"
            ))
        }
    }
    match mechanism {
        Mechanism::None => Ok(feature),
        Mechanism::Dot => g.mul(feature, map),
        Mechanism::Residual => {
            let gain = g.add_scalar(map, 1.0);
            g.mul(feature, gain)
        }
    }
}

impl AbnNet {
    pub fn extract(&self, s: &mut Session, input: Var) -> Result<Var> {
        forward_blocks(&self.extractor, s, input)
    }

    fn branch(&self) -> Result<&AttentionBranch> {
        self.attention
            .as_ref()
            .ok_or_else(|| crate::AbnError::InvalidArgument("model has no attention branch".into()))
    }

    /// Single-task attention branch: class probabilities, attention map, and
    /// the K response maps.
    pub fn attention_branch_forward(&self, s: &mut Session, feature: Var) -> Result<AttentionOutput> {
        let branch = self.branch()?;
        let Some(map_conv) = &branch.map_conv else {
            return invalid("multi-task attention branch has no single aggregated map");
        };
        let k_maps = self.response_maps(s, branch, feature)?;
        let pooled = s.graph.global_average_pool(k_maps)?;
        let scores = s.graph.softmax(pooled)?;
        let agg = map_conv.forward(s, k_maps)?;
        let map = s.graph.sigmoid(agg)?;
        Ok(AttentionOutput {
            scores,
            map,
            k_maps,
        })
    }

    fn response_maps(&self, s: &mut Session, branch: &AttentionBranch, feature: Var) -> Result<Var> {
        let h = forward_blocks(&branch.blocks, s, feature)?;
        let h = branch.bn.forward(s, h)?;
        branch.score_conv.forward(s, h)
    }

    /// Classifier logits of the perception branch.
    pub fn perception_logits(&self, s: &mut Session, attended: Var) -> Result<Var> {
        let h = forward_blocks(&self.perception, s, attended)?;
        let pooled = s.graph.global_average_pool(h)?;
        let w = s.param(self.classifier.weight);
        let b = s.param(self.classifier.bias);
        s.graph.linear(pooled, w, Some(b))
    }

    pub fn perception_branch_forward(&self, s: &mut Session, attended: Var) -> Result<Var> {
        let logits = self.perception_logits(s, attended)?;
        s.graph.softmax(logits)
    }

    /// Extractor straight into the perception branch, skipping attention.
    pub fn baseline_forward(&self, s: &mut Session, input: Var) -> Result<Var> {
        let g = self.extract(s, input)?;
        self.perception_branch_forward(s, g)
    }
}

/// Structure-only view of a model, so a [`Session`] can hold the parameter
/// store mutably at the same time.
#[derive(Clone, Copy)]
pub struct AbnModelRef<'a> {
    pub spec: NetworkSpec,
    pub net: &'a AbnNet,
}

impl AbnModel {
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        build_abn(spec, seed)
    }

    pub fn split(&mut self) -> (AbnModelRef<'_>, &mut ParamStore) {
        (
            AbnModelRef {
                spec: self.spec,
                net: &self.net,
            },
            &mut self.params,
        )
    }

    fn buffer(&self, name: &str) -> &Tensor {
        let id = self.params.find(name).expect("normalization buffers exist");
        self.params.get(id)
    }

    pub fn input_stats(&self) -> Result<ChannelStats> {
        ChannelStats::new(
            self.buffer(INPUT_MEAN).data().to_vec(),
            self.buffer(INPUT_STD).data().to_vec(),
        )
    }

    pub fn set_input_stats(&mut self, stats: &ChannelStats) -> Result<()> {
        let c = self.spec.in_channels;
        for (name, v) in [(INPUT_MEAN, &stats.mean), (INPUT_STD, &stats.std)] {
            let id = self.params.find(name).expect("normalization buffers exist");
            self.params.set(id, Tensor::new(vec![c], v.clone())?)?;
        }
        Ok(())
    }

    /// Raw `[0, 1]` images → network input.
    pub fn prepare(&self, images: &Tensor) -> Result<Tensor> {
        self.input_stats()?.normalize(images)
    }

    /// Eval-mode forward on a batch of raw images.
    pub fn infer(&mut self, images: &Tensor) -> Result<AbnValues> {
        let x = self.prepare(images)?;
        let (model, params) = self.split();
        let mut s = Session::new(params, Mode::Eval);
        let x = s.input(x);
        let out = model.forward(&mut s, x)?;
        Ok(out.values(&s.graph))
    }
}

impl AbnModelRef<'_> {
    fn check_input(&self, g: &Graph, input: Var) -> Result<()> {
        let shape = g.shape(input);
        let stride = self.spec.extractor_stride() * 4;
        match *shape {
            [_, c, h, w] if c == self.spec.in_channels && h >= stride && w >= stride => Ok(()),
            _ => shape_err(format!(
                "input {shape:?} incompatible with a {}-channel network needing at least {stride}x{stride} pixels",
                self.spec.in_channels
            )),
        }
    }

    /// Full forward pass; dispatches to the multi-task layout when `T > 1`.
    pub fn forward(&self, s: &mut Session, input: Var) -> Result<AbnOutput> {
        if self.spec.is_multitask() {
            return self.multitask_forward(s, input);
        }
        self.check_input(&s.graph, input)?;
        let net = self.net;
        let feature_map = net.extract(s, input)?;
        if self.spec.mechanism == Mechanism::None {
            let per_scores = net.perception_branch_forward(s, feature_map)?;
            return Ok(AbnOutput {
                att_scores: None,
                per_scores,
                attention_map: None,
                k_maps: None,
                feature_map,
            });
        }
        let att = net.attention_branch_forward(s, feature_map)?;
        let attended = attention_apply(&mut s.graph, feature_map, att.map, self.spec.mechanism)?;
        let per_scores = net.perception_branch_forward(s, attended)?;
        Ok(AbnOutput {
            att_scores: Some(att.scores),
            per_scores,
            attention_map: Some(att.map),
            k_maps: Some(att.k_maps),
            feature_map,
        })
    }

    /// Multi-task forward: T attention maps, T perception passes over shared
    /// weights, `[N, T, 2]` perception probabilities.
    pub fn multitask_forward(&self, s: &mut Session, input: Var) -> Result<AbnOutput> {
        if !self.spec.is_multitask() {
            return invalid("multitask_forward needs a spec with more than one task");
        }
        self.check_input(&s.graph, input)?;
        let net = self.net;
        let tasks = self.spec.task_count;
        let feature_map = net.extract(s, input)?;

        let mut per_task = Vec::with_capacity(tasks);
        let (att_scores, attention_map, k_maps) = match &net.attention {
            None => {
                let logits = net.perception_logits(s, feature_map)?;
                for t in 0..tasks {
                    let pair = s.graph.slice_cols(logits, 2 * t, 2)?;
                    per_task.push(s.graph.softmax(pair)?);
                }
                (None, None, None)
            }
            Some(branch) => {
                let maps = net.response_maps(s, branch, feature_map)?;
                let pooled = s.graph.global_average_pool(maps)?;
                let scores = s.graph.sigmoid(pooled)?;
                let attention = s.graph.sigmoid(maps)?;
                for t in 0..tasks {
                    let m = s.graph.select_channel(attention, t)?;
                    let attended = attention_apply(&mut s.graph, feature_map, m, self.spec.mechanism)?;
                    let logits = net.perception_logits(s, attended)?;
                    let pair = s.graph.slice_cols(logits, 2 * t, 2)?;
                    per_task.push(s.graph.softmax(pair)?);
                }
                (Some(scores), Some(attention), Some(maps))
            }
        };
        let per_scores = s.graph.stack(&per_task)?;
        Ok(AbnOutput {
            att_scores,
            per_scores,
            attention_map,
            k_maps,
            feature_map,
        })
    }
}

/// Selects which combination of per-class maps a CAM visualization shows.
#[derive(Clone, Debug, PartialEq)]
pub enum CamSelector {
    Class(usize),
    Weights(Vec<f64>),
}

/// Weighted sum of per-class maps `[N, K, h, w] -> [N, 1, h, w]`.
pub fn cam_attention_map(k_maps: &Tensor, selector: &CamSelector) -> Result<Tensor> {
    let (n, k, h, w) = k_maps.dims4()?;
    let weights = match selector {
        CamSelector::Class(c) if *c < k => {
            let mut wts = vec![0.0; k];
            wts[*c] = 1.0;
            wts
        }
        CamSelector::Class(c) => return invalid(format!("class {c} out of range for {k} maps")),
        CamSelector::Weights(wts) if wts.len() == k => wts.clone(),
        CamSelector::Weights(wts) => {
            return shape_err(format!("{} weights for {k} class maps", wts.len()))
        }
    };
    let hw = h * w;
    let mut out = vec![0.0; n * hw];
    for i in 0..n {
        let dst = &mut out[i * hw..(i + 1) * hw];
        for (c, &wt) in weights.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let src = &k_maps.data()[(i * k + c) * hw..(i * k + c + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += wt * v;
            }
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// Scores of a CAM head computed two ways with tied weights `[C, M]`:
/// GAP followed by a fully connected layer, and a pointwise (M×1×1)
/// convolution followed by GAP.
pub fn cam_head_equivalence(
    features: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (c, m) = weight.dims2()?;
    let fc = kernels::linear(&kernels::global_average_pool(features)?, weight, bias)?;
    let mut conv_w = vec![0.0; m * c];
    for i in 0..c {
        for j in 0..m {
            conv_w[j * c + i] = weight.data()[i * m + j];
        }
    }
    let conv_w = Tensor::new(vec![m, c, 1, 1], conv_w)?;
    let conv = kernels::global_average_pool(&kernels::conv2d(features, &conv_w, bias, 1, 0)?)?;
    Ok((fc, conv))
}
