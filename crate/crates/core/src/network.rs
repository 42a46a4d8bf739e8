//! Desk-scale unified multi-task network: a shared convolutional backbone,
//! a top-down multi-scale neck, and detection / classification / embedding
//! heads, with named attachment sites where implicit representations can
//! be combined into the computation.
//!
//! Sites exist whether or not a model is attached; an unattached site is a
//! pass-through. Feature-alignment sites (`det.ifa.s*`, `cls.ifa`,
//! `emb.ifa`) sit on each task's private branch right after the shared
//! neck output, so one task's implicit parameters never receive another
//! task's gradients. Prediction-refinement sites (`det.ipr.s*`) sit on the
//! raw detector outputs.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::implicit::{
    combine, grouped_combine, init_implicit, masked_combine, CombineOp, ImplicitModel, InitSpec,
    ModelKind,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which tasks the network serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSet {
    pub detection: bool,
    pub classification: bool,
    pub embedding: bool,
}

impl Default for TaskSet {
    fn default() -> Self {
        Self {
            detection: true,
            classification: true,
            embedding: true,
        }
    }
}

/// Detector output channel groups, in per-anchor block order
/// `[tx, ty, tw, th, obj, cls...]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxField {
    Xy,
    Wh,
    Obj,
    Cls,
}

/// Where an attachment applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachTarget {
    /// Feature alignment on every detection-branch neck output.
    Ifa,
    /// Prediction refinement on every detector raw output.
    Ipr,
    /// Alignment of the classification branch.
    Cls,
    /// Alignment of the embedding branch.
    Emb,
}

/// One attachment: sites x operator x modeling scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttachSpec {
    pub target: AttachTarget,
    pub op: CombineOp,
    pub kind: ModelKind,
    /// Split the site's channels into one group per anchor cluster, each
    /// with its own model (the `*`-variant of feature alignment).
    #[serde(default)]
    pub grouped: bool,
    /// Restrict prediction refinement to these channel fields (the
    /// `*`-variant of prediction refinement).
    #[serde(default)]
    pub subset: Option<Vec<BoxField>>,
    /// Init std; defaults to 0.02.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Channel count appended by a concatenation attachment; defaults to
    /// a quarter of the site's channels.
    #[serde(default)]
    pub concat_channels: Option<usize>,
}

impl AttachSpec {
    pub fn new(target: AttachTarget, op: CombineOp, kind: ModelKind) -> Self {
        Self {
            target,
            op,
            kind,
            grouped: false,
            subset: None,
            sigma: None,
            concat_channels: None,
        }
    }

    /// Row label in ablation tables, e.g. `+iFA`, `xiPR*`, `+wiFA`.
    pub fn label(&self) -> String {
        let star = if self.grouped || self.subset.is_some() {
            "*"
        } else {
            ""
        };
        let target = match self.target {
            AttachTarget::Ifa => "FA",
            AttachTarget::Ipr => "PR",
            AttachTarget::Cls => "JDC",
            AttachTarget::Emb => "JDE",
        };
        format!("{}{}{}{}", self.op.symbol(), self.kind.tag(), target, star)
    }
}

/// Architecture and attachment description; fully determines the built
/// graph given the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub num_scales: usize,
    pub anchors_per_scale: usize,
    pub embedding_dim: usize,
    /// One entry per stride-2 stage; the last `num_scales` stage outputs
    /// feed the neck.
    pub stage_widths: Vec<usize>,
    /// Convs per stage (first is the stride-2 one).
    pub blocks_per_stage: usize,
    pub neck_width: usize,
    pub head_width: usize,
    pub seed: u64,
    pub tasks: TaskSet,
    /// Per-scale anchor (w, h) pairs in pixels; `None` picks defaults
    /// sized from each scale's stride.
    pub anchors: Option<Vec<Vec<(f64, f64)>>>,
    pub attachments: Vec<AttachSpec>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            num_classes: 4,
            num_scales: 3,
            anchors_per_scale: 3,
            embedding_dim: 16,
            stage_widths: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            neck_width: 64,
            head_width: 64,
            seed: 0,
            tasks: TaskSet::default(),
            anchors: None,
            attachments: vec![
                AttachSpec::new(AttachTarget::Ifa, CombineOp::Addition, ModelKind::Vector),
                AttachSpec::new(AttachTarget::Ipr, CombineOp::Multiplication, ModelKind::Vector),
                AttachSpec::new(AttachTarget::Cls, CombineOp::Addition, ModelKind::Vector),
                AttachSpec::new(AttachTarget::Emb, CombineOp::Addition, ModelKind::Vector),
            ],
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_widths.len();
        if stages == 0 || self.blocks_per_stage == 0 {
            return Err(Error::InvalidConfig("need at least one stage and one block".into()));
        }
        if self.num_scales == 0 || self.num_scales > stages {
            return Err(Error::InvalidConfig(format!(
                "num_scales {} must be in 1..={} (stage count)",
                self.num_scales, stages
            )));
        }
        if self.image_size == 0 || self.image_size % (1 << stages) != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a positive multiple of 2^{stages}",
                self.image_size
            )));
        }
        if self.in_channels == 0
            || self.num_classes == 0
            || self.anchors_per_scale == 0
            || self.embedding_dim == 0
            || self.neck_width == 0
            || self.head_width == 0
        {
            return Err(Error::InvalidConfig("zero-sized config field".into()));
        }
        if let Some(anchors) = &self.anchors {
            if anchors.len() != self.num_scales
                || anchors.iter().any(|a| a.len() != self.anchors_per_scale)
            {
                return Err(Error::InvalidConfig(
                    "anchors must list anchors_per_scale pairs per scale".into(),
                ));
            }
        }
        for spec in &self.attachments {
            if spec.target == AttachTarget::Ipr && spec.op == CombineOp::Concatenation {
                return Err(Error::InvalidConfig(
                    "concatenation is not supported at prediction-refinement sites (it would change the output dimension)".into(),
                ));
            }
            if spec.subset.as_ref().is_some_and(|s| s.is_empty()) {
                return Err(Error::InvalidConfig("empty channel subset".into()));
            }
            if let Some(s) = spec.sigma {
                if s <= 0.0 {
                    return Err(Error::InvalidConfig(format!("sigma must be positive, got {s}")));
                }
            }
        }
        Ok(())
    }

    /// Raw detector channels per scale.
    pub fn det_channels(&self) -> usize {
        self.anchors_per_scale * (5 + self.num_classes)
    }

    /// Stride of each scale (finest first).
    pub fn scale_strides(&self) -> Vec<usize> {
        let stages = self.stage_widths.len();
        (0..self.num_scales)
            .map(|j| 1 << (stages - self.num_scales + j + 1))
            .collect()
    }

    /// Configured or stride-derived default anchors.
    pub fn effective_anchors(&self) -> Vec<Vec<(f64, f64)>> {
        if let Some(a) = &self.anchors {
            return a.clone();
        }
        self.scale_strides()
            .iter()
            .map(|&s| {
                (0..self.anchors_per_scale)
                    .map(|i| {
                        let base = 2.5 * s as f64 * (1.0 + 0.15 * (i / 3) as f64);
                        match i % 3 {
                            0 => (base, base),
                            1 => (1.6 * base, 0.8 * base),
                            _ => (0.8 * base, 1.6 * base),
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Channel positions selected by a field subset, per anchor block.
pub fn subset_positions(fields: &[BoxField], anchors_per_scale: usize, num_classes: usize) -> Vec<usize> {
    let block = 5 + num_classes;
    let mut positions = Vec::new();
    for a in 0..anchors_per_scale {
        let base = a * block;
        for f in fields {
            match f {
                BoxField::Xy => positions.extend([base, base + 1]),
                BoxField::Wh => positions.extend([base + 2, base + 3]),
                BoxField::Obj => positions.push(base + 4),
                BoxField::Cls => positions.extend(base + 5..base + block),
            }
        }
    }
    positions.sort_unstable();
    positions
}

/// Near-equal partition of `channels` into `groups` contiguous chunks.
pub fn anchor_partition(channels: usize, groups: usize) -> Vec<usize> {
    let base = channels / groups;
    let rem = channels % groups;
    (0..groups)
        .map(|g| base + usize::from(g < rem))
        .collect()
}

#[derive(Clone, Debug)]
enum LayerOp {
    Input,
    Conv {
        weight: String,
        bias: String,
        stride: usize,
        pad: usize,
    },
    Silu,
    Upsample2x,
    Add2,
    Combine {
        site: String,
    },
    GlobalPool,
    Linear {
        weight: String,
        bias: String,
    },
}

#[derive(Clone, Debug)]
struct Layer {
    op: LayerOp,
    inputs: Vec<usize>,
}

/// How a site's constant maps onto the explicit channels.
#[derive(Clone, Debug, PartialEq)]
pub enum SiteBinding {
    Whole,
    /// Channel partition; one model per group.
    Grouped(Vec<usize>),
    /// Selected channel positions; untouched channels stay neutral.
    Subset(Vec<usize>),
}

/// An attachment point. `models` is empty while unattached.
#[derive(Clone, Debug)]
pub struct Site<F> {
    pub op: CombineOp,
    pub binding: SiteBinding,
    pub models: Vec<ImplicitModel<F>>,
    /// Channels of the explicit tensor flowing through the site.
    pub channels: usize,
}

impl<F: Scalar> Site<F> {
    pub fn is_attached(&self) -> bool {
        !self.models.is_empty()
    }

    /// Named trainable tensors of this site's models.
    pub fn param_names(&self, site_name: &str) -> Vec<String> {
        let mut names = Vec::new();
        match self.binding {
            SiteBinding::Grouped(_) => {
                for (g, m) in self.models.iter().enumerate() {
                    for (role, _) in m.param_tensors() {
                        names.push(format!("{site_name}.g{g}.{role}"));
                    }
                }
            }
            _ => {
                for m in &self.models {
                    for (role, _) in m.param_tensors() {
                        names.push(format!("{site_name}.{role}"));
                    }
                }
            }
        }
        names
    }
}

/// Raw multi-scale detector maps plus the metadata needed to decode them.
#[derive(Clone, Debug)]
pub struct DetectionOutput<F> {
    /// Per-scale `[N, A*(5+classes), H, W]`, finest scale first.
    pub maps: Vec<Tensor<F>>,
    pub anchors: Vec<Vec<(f64, f64)>>,
    pub strides: Vec<usize>,
    pub anchors_per_scale: usize,
    pub num_classes: usize,
}

/// Vars produced by one forward pass.
pub struct TaskOutputs {
    pub detection: Vec<Var>,
    pub classification: Option<Var>,
    pub embedding: Option<Var>,
}

pub struct ForwardPass {
    pub outputs: TaskOutputs,
    /// Every trainable leaf bound during the pass, by parameter name.
    pub param_vars: Vec<(String, Var)>,
}

/// The built network: layer DAG in forward order, parameter store, and
/// attachment sites.
pub struct NetworkGraph<F: Scalar> {
    pub config: NetConfig,
    layers: Vec<Layer>,
    det_outputs: Vec<usize>,
    cls_output: Option<usize>,
    emb_output: Option<usize>,
    pub params: IndexMap<String, Tensor<F>>,
    pub sites: IndexMap<String, Site<F>>,
    pub anchors: Vec<Vec<(f64, f64)>>,
    pub strides: Vec<usize>,
}

fn fnv64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct Builder<F: Scalar> {
    layers: Vec<Layer>,
    params: IndexMap<String, Tensor<F>>,
    sites: IndexMap<String, Site<F>>,
    rng: ChaCha8Rng,
    anchors_per_scale: usize,
    num_classes: usize,
}

impl<F: Scalar> Builder<F> {
    fn push(&mut self, op: LayerOp, inputs: Vec<usize>) -> usize {
        self.layers.push(Layer { op, inputs });
        self.layers.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        input: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> usize {
        let w_name = format!("{name}.w");
        let b_name = format!("{name}.b");
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let w = Tensor::randn(&[c_out, c_in, k, k], 0.0, std, &mut self.rng);
        self.params.insert(w_name.clone(), w);
        self.params.insert(b_name.clone(), Tensor::zeros(&[c_out]));
        self.push(
            LayerOp::Conv {
                weight: w_name,
                bias: b_name,
                stride,
                pad: k / 2,
            },
            vec![input],
        )
    }

    fn conv_silu(
        &mut self,
        name: &str,
        input: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> usize {
        let c = self.conv(name, input, c_in, c_out, k, stride);
        self.push(LayerOp::Silu, vec![c])
    }

    fn linear(&mut self, name: &str, input: usize, c_in: usize, c_out: usize) -> usize {
        let w_name = format!("{name}.w");
        let b_name = format!("{name}.b");
        let std = (1.0 / c_in as f64).sqrt();
        let w = Tensor::randn(&[c_out, c_in], 0.0, std, &mut self.rng);
        self.params.insert(w_name.clone(), w);
        self.params.insert(b_name.clone(), Tensor::zeros(&[c_out]));
        self.push(
            LayerOp::Linear {
                weight: w_name,
                bias: b_name,
            },
            vec![input],
        )
    }

    /// Registers a site and returns (layer index, channels flowing out).
    /// `is_det_output` marks detector raw-output sites, the only place a
    /// field subset is meaningful.
    fn site(
        &mut self,
        name: &str,
        input: usize,
        channels: usize,
        spec: Option<&AttachSpec>,
        net_seed: u64,
        is_det_output: bool,
    ) -> Result<(usize, usize)> {
        let (site, out_channels) = match spec {
            None => (
                Site {
                    op: CombineOp::Addition,
                    binding: SiteBinding::Whole,
                    models: Vec::new(),
                    channels,
                },
                channels,
            ),
            Some(spec) => {
                let sigma = spec.sigma.unwrap_or(0.02);
                let seed = net_seed ^ fnv64(name);
                let kind = spec.kind;
                let op = spec.op;
                let init = |chan: usize, salt: u64| {
                    init_implicit::<F>(
                        kind,
                        chan,
                        op,
                        InitSpec {
                            sigma,
                            seed: seed.wrapping_add(salt),
                        },
                    )
                };
                if spec.grouped {
                    // one group per anchor cluster
                    let groups = anchor_partition(channels, self.anchors_per_scale);
                    let models = groups
                        .iter()
                        .enumerate()
                        .map(|(g, &c)| init(c, g as u64))
                        .collect::<Result<Vec<_>>>()?;
                    (
                        Site {
                            op: spec.op,
                            binding: SiteBinding::Grouped(groups),
                            models,
                            channels,
                        },
                        channels,
                    )
                } else if let Some(fields) = &spec.subset {
                    if !is_det_output {
                        return Err(Error::InvalidConfig(format!(
                            "subset attachment is only defined for detector outputs, not {name}"
                        )));
                    }
                    let positions =
                        subset_positions(fields, self.anchors_per_scale, self.num_classes);
                    if positions.iter().any(|&p| p >= channels) {
                        return Err(Error::InvalidConfig(format!(
                            "subset positions exceed {channels} channels at {name}"
                        )));
                    }
                    let model = init(positions.len(), 0)?;
                    (
                        Site {
                            op: spec.op,
                            binding: SiteBinding::Subset(positions),
                            models: vec![model],
                            channels,
                        },
                        channels,
                    )
                } else {
                    let model_channels = if spec.op == CombineOp::Concatenation {
                        spec.concat_channels.unwrap_or((channels / 4).max(1))
                    } else {
                        channels
                    };
                    let model = init(model_channels, 0)?;
                    let out = if spec.op == CombineOp::Concatenation {
                        channels + model_channels
                    } else {
                        channels
                    };
                    (
                        Site {
                            op: spec.op,
                            binding: SiteBinding::Whole,
                            models: vec![model],
                            channels,
                        },
                        out,
                    )
                }
            }
        };
        self.sites.insert(name.to_string(), site);
        let idx = self.push(
            LayerOp::Combine {
                site: name.to_string(),
            },
            vec![input],
        );
        Ok((idx, out_channels))
    }
}

/// Builds the unified network described by `config`: backbone of stride-2
/// stages, top-down neck with lateral fusion, detection heads per scale,
/// optional classification and embedding heads, and one attachment site on
/// every task branch input plus every detector output.
pub fn build_toy_unified_net<F: Scalar>(config: &NetConfig) -> Result<NetworkGraph<F>> {
    config.validate()?;
    let mut b = Builder::<F> {
        layers: Vec::new(),
        params: IndexMap::new(),
        sites: IndexMap::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        anchors_per_scale: config.anchors_per_scale,
        num_classes: config.num_classes,
    };
    let spec_for = |target: AttachTarget| config.attachments.iter().find(|s| s.target == target);

    let input = b.push(LayerOp::Input, vec![]);

    // backbone
    let stages = config.stage_widths.len();
    let mut cur = input;
    let mut c_in = config.in_channels;
    let mut stage_out = Vec::with_capacity(stages);
    for (s, &width) in config.stage_widths.iter().enumerate() {
        cur = b.conv_silu(&format!("backbone.s{s}.c0"), cur, c_in, width, 3, 2);
        for blk in 1..config.blocks_per_stage {
            cur = b.conv_silu(&format!("backbone.s{s}.c{blk}"), cur, width, width, 3, 1);
        }
        c_in = width;
        stage_out.push(cur);
    }

    // neck: lateral 1x1 to a common width, then top-down fusion
    let nw = config.neck_width;
    let first_tap = stages - config.num_scales;
    let mut laterals = Vec::with_capacity(config.num_scales);
    for j in 0..config.num_scales {
        let tap = stage_out[first_tap + j];
        let width = config.stage_widths[first_tap + j];
        laterals.push(b.conv_silu(&format!("neck.lateral{j}"), tap, width, nw, 1, 1));
    }
    let mut neck_out = vec![0usize; config.num_scales];
    for j in (0..config.num_scales).rev() {
        let pre = if j + 1 < config.num_scales {
            let up = b.push(LayerOp::Upsample2x, vec![neck_out[j + 1]]);
            b.push(LayerOp::Add2, vec![laterals[j], up])
        } else {
            laterals[j]
        };
        neck_out[j] = b.conv_silu(&format!("neck.fuse{j}"), pre, nw, nw, 3, 1);
    }

    // detection branch
    let mut det_outputs = Vec::with_capacity(config.num_scales);
    if config.tasks.detection {
        let det_ch = config.det_channels();
        for j in 0..config.num_scales {
            let (aligned, ch) = b.site(
                &format!("det.ifa.s{j}"),
                neck_out[j],
                nw,
                spec_for(AttachTarget::Ifa),
                config.seed,
                false,
            )?;
            let h = b.conv_silu(
                &format!("det.head{j}.c0"),
                aligned,
                ch,
                config.head_width,
                3,
                1,
            );
            let raw = b.conv(
                &format!("det.head{j}.out"),
                h,
                config.head_width,
                det_ch,
                1,
                1,
            );
            let (refined, _) = b.site(
                &format!("det.ipr.s{j}"),
                raw,
                det_ch,
                spec_for(AttachTarget::Ipr),
                config.seed,
                true,
            )?;
            det_outputs.push(refined);
        }
    }

    // classification branch taps the deepest shared neck output
    let deep = neck_out[config.num_scales - 1];
    let mut cls_output = None;
    if config.tasks.classification {
        let (aligned, ch) = b.site("cls.ifa", deep, nw, spec_for(AttachTarget::Cls), config.seed, false)?;
        let c = b.conv_silu("cls.c0", aligned, ch, config.head_width, 3, 1);
        let pooled = b.push(LayerOp::GlobalPool, vec![c]);
        cls_output = Some(b.linear("cls.fc", pooled, config.head_width, config.num_classes));
    }

    // embedding branch
    let mut emb_output = None;
    if config.tasks.embedding {
        let (aligned, ch) = b.site("emb.ifa", deep, nw, spec_for(AttachTarget::Emb), config.seed, false)?;
        let c = b.conv_silu("emb.c0", aligned, ch, config.head_width, 3, 1);
        let pooled = b.push(LayerOp::GlobalPool, vec![c]);
        emb_output = Some(b.linear("emb.fc", pooled, config.head_width, config.embedding_dim));
    }

    Ok(NetworkGraph {
        anchors: config.effective_anchors(),
        strides: config.scale_strides(),
        config: config.clone(),
        layers: b.layers,
        det_outputs,
        cls_output,
        emb_output,
        params: b.params,
        sites: b.sites,
    })
}

impl<F: Scalar> NetworkGraph<F> {
    /// Names of the attachment sites in construction order.
    pub fn site_names(&self) -> Vec<String> {
        self.sites.keys().cloned().collect()
    }

    /// Every trainable tensor: layer parameters then site model
    /// parameters, in stable order.
    pub fn trainable(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        for (site_name, site) in &self.sites {
            for (g, model) in site.models.iter().enumerate() {
                for (role, t) in model.param_tensors() {
                    out.push((site_param_name(site_name, &site.binding, g, role), t));
                }
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = Vec::new();
        for (n, t) in self.params.iter_mut() {
            out.push((n.clone(), t));
        }
        for (site_name, site) in self.sites.iter_mut() {
            let binding = site.binding.clone();
            for (g, model) in site.models.iter_mut().enumerate() {
                for (role, t) in model.param_tensors_mut() {
                    out.push((site_param_name(site_name, &binding, g, role), t));
                }
            }
        }
        out
    }

    /// Total trainable parameters in the implicit models.
    pub fn implicit_parameter_count(&self) -> usize {
        self.sites
            .values()
            .flat_map(|s| s.models.iter())
            .map(|m| m.parameter_count())
            .sum()
    }

    /// Overwrites every attached model so its representation equals the
    /// operator-neutral constant exactly.
    pub fn force_all_neutral(&mut self) {
        for site in self.sites.values_mut() {
            let op = site.op;
            for m in &mut site.models {
                m.force_neutral(op);
            }
        }
    }

    /// Runs the graph. `trainable` binds parameters as gradient-carrying
    /// leaves; inference passes use `false`.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        images: &Tensor<F>,
        trainable: bool,
    ) -> Result<ForwardPass> {
        let want = [
            images.shape().first().copied().unwrap_or(0),
            self.config.in_channels,
            self.config.image_size,
            self.config.image_size,
        ];
        if images.rank() != 4 || images.shape()[1..] != want[1..] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: images.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        let mut param_vars: Vec<(String, Var)> = Vec::new();
        let bind = |tape: &mut Tape<F>, params: &IndexMap<String, Tensor<F>>, name: &str, vars: &mut Vec<(String, Var)>| -> Result<Var> {
            let t = params
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))?;
            let v = tape.leaf(t.clone(), trainable);
            vars.push((name.to_string(), v));
            Ok(v)
        };

        let mut vals: Vec<Var> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let v = match &layer.op {
                LayerOp::Input => tape.constant(images.clone()),
                LayerOp::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let w = bind(tape, &self.params, weight, &mut param_vars)?;
                    let bb = bind(tape, &self.params, bias, &mut param_vars)?;
                    tape.conv2d(vals[layer.inputs[0]], w, bb, *stride, *pad)?
                }
                LayerOp::Silu => tape.silu(vals[layer.inputs[0]])?,
                LayerOp::Upsample2x => tape.upsample2x(vals[layer.inputs[0]])?,
                LayerOp::Add2 => tape.add(vals[layer.inputs[0]], vals[layer.inputs[1]])?,
                LayerOp::GlobalPool => tape.global_avg_pool(vals[layer.inputs[0]])?,
                LayerOp::Linear { weight, bias } => {
                    let w = bind(tape, &self.params, weight, &mut param_vars)?;
                    let bb = bind(tape, &self.params, bias, &mut param_vars)?;
                    let wt = tape.transpose2d(w)?;
                    let prod = tape.matmul(vals[layer.inputs[0]], wt)?;
                    tape.add(prod, bb)?
                }
                LayerOp::Combine { site } => {
                    let x = vals[layer.inputs[0]];
                    let s = self
                        .sites
                        .get(site)
                        .ok_or_else(|| Error::UnknownSite(site.clone()))?;
                    if !s.is_attached() {
                        x
                    } else {
                        let (out, leaves) = match &s.binding {
                            SiteBinding::Whole => combine(tape, x, &s.models[0], s.op)?,
                            SiteBinding::Grouped(groups) => {
                                grouped_combine(tape, x, &s.models, groups, s.op)?
                            }
                            SiteBinding::Subset(positions) => {
                                masked_combine(tape, x, &s.models[0], positions, s.op)?
                            }
                        };
                        if trainable {
                            record_site_leaves(site, &s.binding, &s.models, leaves, &mut param_vars);
                        }
                        out
                    }
                }
            };
            vals.push(v);
        }

        Ok(ForwardPass {
            outputs: TaskOutputs {
                detection: self.det_outputs.iter().map(|&i| vals[i]).collect(),
                classification: self.cls_output.map(|i| vals[i]),
                embedding: self.emb_output.map(|i| vals[i]),
            },
            param_vars,
        })
    }

    /// Materializes the detector maps of a pass.
    pub fn detection_output(&self, tape: &Tape<F>, pass: &ForwardPass) -> DetectionOutput<F> {
        DetectionOutput {
            maps: pass
                .outputs
                .detection
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
            anchors: self.anchors.clone(),
            strides: self.strides.clone(),
            anchors_per_scale: self.config.anchors_per_scale,
            num_classes: self.config.num_classes,
        }
    }

    /// Rebuilds with `new_config`, carrying over every parameter whose
    /// name survives. Conv weights whose input-channel extent changed
    /// (concatenation attachments widen their consumer) keep their
    /// original leading columns. Site models move over whenever the site
    /// keeps the same operator, binding, and shapes.
    pub fn rebuild_with(&self, new_config: &NetConfig) -> Result<NetworkGraph<F>> {
        let mut next = build_toy_unified_net::<F>(new_config)?;
        for (name, tensor) in next.params.iter_mut() {
            if let Some(old) = self.params.get(name) {
                if old.shape() == tensor.shape() {
                    *tensor = old.clone();
                } else if old.rank() == 4
                    && tensor.rank() == 4
                    && old.shape()[0] == tensor.shape()[0]
                    && old.shape()[2..] == tensor.shape()[2..]
                {
                    // widened or narrowed input channels: copy the shared slice
                    let (co, kh, kw) = (old.shape()[0], old.shape()[2], old.shape()[3]);
                    let (ci_old, ci_new) = (old.shape()[1], tensor.shape()[1]);
                    let shared = ci_old.min(ci_new);
                    for o in 0..co {
                        for c in 0..shared {
                            let src = ((o * ci_old) + c) * kh * kw;
                            let dst = ((o * ci_new) + c) * kh * kw;
                            tensor.data_mut()[dst..dst + kh * kw]
                                .copy_from_slice(&old.data()[src..src + kh * kw]);
                        }
                    }
                }
            }
        }
        for (name, site) in next.sites.iter_mut() {
            if let Some(old) = self.sites.get(name) {
                let same_shape = old.models.len() == site.models.len()
                    && old
                        .models
                        .iter()
                        .zip(&site.models)
                        .all(|(a, b)| {
                            a.kind() == b.kind()
                                && a.param_tensors()
                                    .iter()
                                    .zip(b.param_tensors())
                                    .all(|((_, ta), (_, tb))| ta.shape() == tb.shape())
                        });
                if old.op == site.op && old.binding == site.binding && same_shape {
                    site.models = old.models.clone();
                }
            }
        }
        Ok(next)
    }

    /// Same architecture with one more attachment.
    pub fn with_attachment(&self, spec: AttachSpec) -> Result<NetworkGraph<F>> {
        let mut config = self.config.clone();
        config.attachments.retain(|s| s.target != spec.target);
        config.attachments.push(spec);
        self.rebuild_with(&config)
    }

    /// The implicit-free twin: same explicit parameters, no attachments.
    pub fn strip_attachments(&self) -> Result<NetworkGraph<F>> {
        let mut config = self.config.clone();
        config.attachments.clear();
        self.rebuild_with(&config)
    }
}

fn site_param_name(site: &str, binding: &SiteBinding, group: usize, role: &str) -> String {
    match binding {
        SiteBinding::Grouped(_) => format!("{site}.g{group}.{role}"),
        _ => format!("{site}.{role}"),
    }
}

fn record_site_leaves<F: Scalar>(
    site: &str,
    binding: &SiteBinding,
    models: &[ImplicitModel<F>],
    leaves: Vec<(&'static str, Var)>,
    param_vars: &mut Vec<(String, Var)>,
) {
    // leaves arrive in model order, each model contributing its
    // param_tensors() roles in order
    let mut it = leaves.into_iter();
    for (g, model) in models.iter().enumerate() {
        for _ in model.param_tensors() {
            let (role, var) = it.next().expect("leaf per role");
            param_vars.push((site_param_name(site, binding, g, role), var));
        }
    }
}

/// Adds feature-alignment attachments (one model per detection scale).
pub fn attach_ifa<F: Scalar>(
    net: &NetworkGraph<F>,
    kind: ModelKind,
    op: CombineOp,
) -> Result<NetworkGraph<F>> {
    net.with_attachment(AttachSpec::new(AttachTarget::Ifa, op, kind))
}

/// Adds prediction-refinement attachments on the detector outputs,
/// optionally restricted to a subset of channel fields.
pub fn attach_ipr<F: Scalar>(
    net: &NetworkGraph<F>,
    kind: ModelKind,
    op: CombineOp,
    subset: Option<Vec<BoxField>>,
) -> Result<NetworkGraph<F>> {
    let mut spec = AttachSpec::new(AttachTarget::Ipr, op, kind);
    spec.subset = subset;
    net.with_attachment(spec)
}

/// Exact parameter and FLOP accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkCounts {
    /// All trainable parameters, implicit models included.
    pub params: usize,
    /// Forward FLOPs for one image (multiply and add counted separately),
    /// excluding implicit evaluation.
    pub flops: usize,
    pub implicit_params: usize,
    /// Per-forward cost of the implicit combines once every model is
    /// cached as a constant: just the broadcast apply, evaluation is
    /// amortized to zero.
    pub implicit_flops_at_inference: usize,
}

impl NetworkCounts {
    pub fn param_overhead(&self) -> f64 {
        self.implicit_params as f64 / self.params as f64
    }

    pub fn flop_overhead(&self) -> f64 {
        self.implicit_flops_at_inference as f64 / self.flops as f64
    }
}

/// Walks the graph symbolically (batch 1) and counts parameters and
/// per-image FLOPs, explicit and implicit.
pub fn count_network<F: Scalar>(net: &NetworkGraph<F>) -> NetworkCounts {
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(net.layers.len());
    let mut flops: usize = 0;
    let mut implicit_flops: usize = 0;
    for layer in &net.layers {
        let shape = match &layer.op {
            LayerOp::Input => vec![
                1,
                net.config.in_channels,
                net.config.image_size,
                net.config.image_size,
            ],
            LayerOp::Conv { weight, stride, pad, .. } => {
                let w = &net.params[weight.as_str()];
                let xs = &shapes[layer.inputs[0]];
                let (co, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                let ho = (xs[2] + 2 * pad - kh) / stride + 1;
                let wo = (xs[3] + 2 * pad - kw) / stride + 1;
                flops += 2 * ci * kh * kw * co * ho * wo + co * ho * wo;
                vec![1, co, ho, wo]
            }
            LayerOp::Silu => {
                let s = shapes[layer.inputs[0]].clone();
                flops += 4 * s.iter().product::<usize>();
                s
            }
            LayerOp::Upsample2x => {
                let s = &shapes[layer.inputs[0]];
                vec![s[0], s[1], 2 * s[2], 2 * s[3]]
            }
            LayerOp::Add2 => {
                let s = shapes[layer.inputs[0]].clone();
                flops += s.iter().product::<usize>();
                s
            }
            LayerOp::GlobalPool => {
                let s = &shapes[layer.inputs[0]];
                flops += s.iter().product::<usize>();
                vec![s[0], s[1]]
            }
            LayerOp::Linear { weight, .. } => {
                let w = &net.params[weight.as_str()];
                let (co, ci) = (w.shape()[0], w.shape()[1]);
                flops += 2 * ci * co + co;
                vec![shapes[layer.inputs[0]][0], co]
            }
            LayerOp::Combine { site } => {
                let s = shapes[layer.inputs[0]].clone();
                let st = &net.sites[site.as_str()];
                if !st.is_attached() {
                    s
                } else {
                    let spatial: usize = s[2..].iter().product::<usize>().max(1);
                    let cost = match (&st.binding, st.op) {
                        (_, CombineOp::Concatenation) => {
                            // appended constant channels: one copy per element
                            let extra: usize =
                                st.models.iter().map(|m| m.channels()).sum::<usize>();
                            extra * spatial
                        }
                        (SiteBinding::Subset(p), _) => p.len() * spatial,
                        _ => s[1] * spatial,
                    };
                    implicit_flops += cost;
                    flops += cost;
                    if st.op == CombineOp::Concatenation {
                        let extra: usize = st.models.iter().map(|m| m.channels()).sum();
                        let mut out = s.clone();
                        out[1] += extra;
                        out
                    } else {
                        s
                    }
                }
            }
        };
        shapes.push(shape);
    }
    let explicit_params: usize = net.params.values().map(|t| t.numel()).sum();
    let implicit_params = net.implicit_parameter_count();
    NetworkCounts {
        params: explicit_params + implicit_params,
        flops,
        implicit_params,
        implicit_flops_at_inference: implicit_flops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> NetConfig {
        NetConfig {
            image_size: 32,
            stage_widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            neck_width: 8,
            head_width: 8,
            num_scales: 3,
            seed: 5,
            attachments: vec![],
            ..NetConfig::default()
        }
    }

    fn images(n: usize, cfg: &NetConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(
            &[n, cfg.in_channels, cfg.image_size, cfg.image_size],
            0.0,
            1.0,
            &mut rng,
        )
    }

    #[test]
    fn default_config_builds_with_expected_sites() {
        let cfg = NetConfig::default();
        let net = build_toy_unified_net::<f64>(&cfg).unwrap();
        let names = net.site_names();
        assert_eq!(
            names,
            vec![
                "det.ifa.s0",
                "det.ipr.s0",
                "det.ifa.s1",
                "det.ipr.s1",
                "det.ifa.s2",
                "det.ipr.s2",
                "cls.ifa",
                "emb.ifa",
            ]
        );
        assert_eq!(net.strides, vec![4, 8, 16]);
        // every site of the default config carries a model
        assert!(net.sites.values().all(|s| s.is_attached()));
    }

    #[test]
    fn parameter_count_is_stable_across_builds() {
        let cfg = NetConfig::default();
        let a = count_network(&build_toy_unified_net::<f64>(&cfg).unwrap());
        let b = count_network(&build_toy_unified_net::<f64>(&cfg).unwrap());
        assert_eq!(a, b);
        assert!(a.params >= 1_000_000, "default net has {} params", a.params);
    }

    #[test]
    fn single_scale_config_degenerates() {
        let mut cfg = small_config();
        cfg.num_scales = 1;
        cfg.attachments = vec![AttachSpec::new(
            AttachTarget::Ifa,
            CombineOp::Addition,
            ModelKind::Vector,
        )];
        let net = build_toy_unified_net::<f64>(&cfg).unwrap();
        assert_eq!(net.strides, vec![8]);
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &images(1, &cfg, 1), true).unwrap();
        assert_eq!(pass.outputs.detection.len(), 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_config();
        cfg.image_size = 30; // not a multiple of 8
        assert!(build_toy_unified_net::<f64>(&cfg).is_err());
        let mut cfg2 = small_config();
        cfg2.num_scales = 5;
        assert!(build_toy_unified_net::<f64>(&cfg2).is_err());
        let mut cfg3 = small_config();
        cfg3.attachments = vec![AttachSpec::new(
            AttachTarget::Ipr,
            CombineOp::Concatenation,
            ModelKind::Vector,
        )];
        assert!(build_toy_unified_net::<f64>(&cfg3).is_err());
    }

    #[test]
    fn batch_extent_flows_to_all_heads() {
        let cfg = small_config();
        let net = build_toy_unified_net::<f64>(&cfg).unwrap();
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &images(2, &cfg, 2), false).unwrap();
        for &d in &pass.outputs.detection {
            assert_eq!(tape.value(d).shape()[0], 2);
            assert_eq!(tape.value(d).shape()[1], cfg.det_channels());
        }
        assert_eq!(
            tape.value(pass.outputs.classification.unwrap()).shape(),
            &[2, cfg.num_classes]
        );
        assert_eq!(
            tape.value(pass.outputs.embedding.unwrap()).shape(),
            &[2, cfg.embedding_dim]
        );
    }

    #[test]
    fn disabling_a_head_removes_outputs_and_params() {
        let mut cfg = small_config();
        cfg.tasks.classification = false;
        cfg.tasks.embedding = false;
        let net = build_toy_unified_net::<f64>(&cfg).unwrap();
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &images(1, &cfg, 3), true).unwrap();
        assert!(pass.outputs.classification.is_none());
        assert!(pass.outputs.embedding.is_none());
        assert!(net.site_names().iter().all(|s| !s.starts_with("cls")));
        assert!(net.params.keys().all(|p| !p.starts_with("cls")));
    }

    #[test]
    fn neutral_forced_net_matches_stripped_net_bitwise() {
        for op in [
            CombineOp::Addition,
            CombineOp::Multiplication,
            CombineOp::Concatenation,
        ] {
            let mut cfg = small_config();
            cfg.attachments = vec![
                AttachSpec::new(AttachTarget::Ifa, op, ModelKind::Vector),
                AttachSpec::new(
                    AttachTarget::Ipr,
                    if op == CombineOp::Concatenation {
                        CombineOp::Addition
                    } else {
                        op
                    },
                    ModelKind::LinearNet,
                ),
                AttachSpec::new(AttachTarget::Cls, op, ModelKind::MatrixFactorization),
            ];
            let mut net = build_toy_unified_net::<f64>(&cfg).unwrap();
            net.force_all_neutral();
            let base = net.strip_attachments().unwrap();
            let imgs = images(2, &cfg, 7);

            let mut t1 = Tape::new();
            let p1 = net.forward(&mut t1, &imgs, false).unwrap();
            let mut t2 = Tape::new();
            let p2 = base.forward(&mut t2, &imgs, false).unwrap();
            for (a, b) in p1.outputs.detection.iter().zip(&p2.outputs.detection) {
                assert_eq!(t1.value(*a), t2.value(*b), "op {op:?}");
            }
            assert_eq!(
                t1.value(p1.outputs.classification.unwrap()),
                t2.value(p2.outputs.classification.unwrap())
            );
            assert_eq!(
                t1.value(p1.outputs.embedding.unwrap()),
                t2.value(p2.outputs.embedding.unwrap())
            );
        }
    }

    #[test]
    fn task_isolation_of_implicit_gradients() {
        let mut cfg = small_config();
        cfg.attachments = vec![
            AttachSpec::new(AttachTarget::Ifa, CombineOp::Addition, ModelKind::Vector),
            AttachSpec::new(AttachTarget::Cls, CombineOp::Addition, ModelKind::Vector),
        ];
        let net = build_toy_unified_net::<f64>(&cfg).unwrap();
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, &images(1, &cfg, 9), true).unwrap();
        // classification-only loss
        let logits = pass.outputs.classification.unwrap();
        let target = tape.constant(Tensor::full(&[1, cfg.num_classes], 1.0));
        let loss = tape.bce_loss(logits, target).unwrap();
        tape.backward(loss).unwrap();
        for (name, var) in &pass.param_vars {
            let g = tape.grad(*var);
            if name.starts_with("det.ifa") {
                let zero = g.map_or(true, |g| g.data().iter().all(|&v| v == 0.0));
                assert!(zero, "detector implicit {name} must not see cls gradients");
            }
            if name.starts_with("cls.ifa") {
                let nonzero = g.is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
                assert!(nonzero, "cls implicit {name} must receive gradients");
            }
        }
    }

    #[test]
    fn perturbing_one_scale_only_affects_that_scale() {
        let mut cfg = small_config();
        cfg.attachments = vec![AttachSpec::new(
            AttachTarget::Ifa,
            CombineOp::Addition,
            ModelKind::Vector,
        )];
        let net = build_toy_unified_net::<f64>(&cfg).unwrap();
        let imgs = images(1, &cfg, 11);
        let mut t0 = Tape::new();
        let base = net.forward(&mut t0, &imgs, false).unwrap();

        let mut poked = net.rebuild_with(&cfg).unwrap();
        if let Some(site) = poked.sites.get_mut("det.ifa.s1") {
            if let ImplicitModel::Vector { z } = &mut site.models[0] {
                z.data_mut()[0] += 10.0;
            }
        }
        let mut t1 = Tape::new();
        let after = poked.forward(&mut t1, &imgs, false).unwrap();
        for (j, (a, b)) in base
            .outputs
            .detection
            .iter()
            .zip(&after.outputs.detection)
            .enumerate()
        {
            let same = t0.value(*a) == t1.value(*b);
            if j == 1 {
                assert!(!same, "perturbed scale must change");
            } else {
                assert!(same, "scale {j} must be untouched");
            }
        }
    }

    #[test]
    fn subset_refinement_touches_only_named_channels() {
        let mut cfg = small_config();
        cfg.attachments = vec![{
            let mut s = AttachSpec::new(
                AttachTarget::Ipr,
                CombineOp::Multiplication,
                ModelKind::Vector,
            );
            s.subset = Some(vec![BoxField::Wh]);
            s
        }];
        let net = build_toy_unified_net::<f64>(&cfg).unwrap();
        let base = net.strip_attachments().unwrap();
        let imgs = images(1, &cfg, 13);
        let mut t1 = Tape::new();
        let p1 = net.forward(&mut t1, &imgs, false).unwrap();
        let mut t2 = Tape::new();
        let p2 = base.forward(&mut t2, &imgs, false).unwrap();
        let block = 5 + cfg.num_classes;
        for (va, vb) in p1.outputs.detection.iter().zip(&p2.outputs.detection) {
            let (a, b) = (t1.value(*va), t2.value(*vb));
            let (ch, hw) = (a.shape()[1], a.shape()[2] * a.shape()[3]);
            for c in 0..ch {
                let is_wh = matches!(c % block, 2 | 3);
                for s in 0..hw {
                    let (x, y) = (a.data()[c * hw + s], b.data()[c * hw + s]);
                    if is_wh {
                        assert_ne!(x, y, "wh channel {c} should be refined");
                    } else {
                        assert_eq!(x, y, "channel {c} must be bit-identical");
                    }
                }
            }
        }
    }

    #[test]
    fn grouped_ifa_uses_anchor_partition() {
        let mut cfg = small_config();
        cfg.attachments = vec![{
            let mut s = AttachSpec::new(
                AttachTarget::Ifa,
                CombineOp::Multiplication,
                ModelKind::Vector,
            );
            s.grouped = true;
            s
        }];
        let net = build_toy_unified_net::<f64>(&cfg).unwrap();
        let site = &net.sites["det.ifa.s0"];
        let SiteBinding::Grouped(groups) = &site.binding else {
            panic!("expected grouped binding");
        };
        assert_eq!(groups.len(), cfg.anchors_per_scale);
        assert_eq!(groups.iter().sum::<usize>(), cfg.neck_width);
        assert_eq!(site.models.len(), cfg.anchors_per_scale);
        // forward works
        let mut tape = Tape::new();
        net.forward(&mut tape, &images(1, &cfg, 17), true).unwrap();
    }

    #[test]
    fn attach_ifa_creates_one_model_per_scale() {
        let base = build_toy_unified_net::<f64>(&small_config()).unwrap();
        let net = attach_ifa(&base, ModelKind::Vector, CombineOp::Addition).unwrap();
        let attached: Vec<_> = net
            .sites
            .iter()
            .filter(|(_, s)| s.is_attached())
            .map(|(n, _)| n.clone())
            .collect();
        assert_eq!(attached, vec!["det.ifa.s0", "det.ifa.s1", "det.ifa.s2"]);
        // explicit params are preserved bitwise
        for (name, t) in &base.params {
            assert_eq!(net.params[name.as_str()], *t, "{name}");
        }
    }

    #[test]
    fn concat_attachment_widens_consumer_and_keeps_base_columns() {
        let base = build_toy_unified_net::<f64>(&small_config()).unwrap();
        let net = attach_ifa(&base, ModelKind::Vector, CombineOp::Concatenation).unwrap();
        let wb = &base.params["det.head0.c0.w"];
        let wn = &net.params["det.head0.c0.w"];
        assert_eq!(wb.shape()[1] + 2, wn.shape()[1]); // 8/4 = 2 extra channels
        let (co, kh, kw) = (wb.shape()[0], wb.shape()[2], wb.shape()[3]);
        for o in 0..co {
            for c in 0..wb.shape()[1] {
                for t in 0..kh * kw {
                    assert_eq!(
                        wb.data()[(o * wb.shape()[1] + c) * kh * kw + t],
                        wn.data()[(o * wn.shape()[1] + c) * kh * kw + t]
                    );
                }
            }
        }
    }

    #[test]
    fn forward_backward_is_deterministic() {
        let cfg = small_config();
        let run = || {
            let net = build_toy_unified_net::<f64>(&cfg).unwrap();
            let mut tape = Tape::new();
            let pass = net.forward(&mut tape, &images(2, &cfg, 23), true).unwrap();
            let mut terms = Vec::new();
            for &d in &pass.outputs.detection {
                terms.push((tape.mean(d).unwrap(), 1.0));
            }
            let loss = tape.weighted_sum(&terms).unwrap();
            tape.backward(loss).unwrap();
            let g = pass
                .param_vars
                .iter()
                .find(|(n, _)| n == "backbone.s0.c0.w")
                .map(|(_, v)| tape.grad(*v).unwrap().clone())
                .unwrap();
            (tape.value(loss).item(), g)
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
