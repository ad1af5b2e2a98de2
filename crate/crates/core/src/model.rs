//! Toy Mixture-of-Experts network: an input map, one gated block of
//! two-layer feed-forward experts, and an output head.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{gaussian_matrix, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RoutingMode {
    /// Top-1 routing; the selected expert's output is scaled by its gate probability.
    #[default]
    Top1Hard,
    /// Every expert contributes, weighted by the full softmax.
    DenseSoft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Self::Relu => v.max(0.0),
            Self::Tanh => v.tanh(),
            Self::Identity => v,
        }
    }

    /// Derivative given the pre-activation `v` and the activation output `out`.
    pub fn derivative(self, v: f64, out: f64) -> f64 {
        match self {
            Self::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - out * out,
            Self::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum InitMode {
    /// One expert is sampled and cloned into every slot.
    #[default]
    Replicate,
    Independent,
}

/// Shapes of the network. `d` is the model width seen by the gate and the
/// experts, `h` the expert hidden width, `c` the head output width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_raw: usize,
    pub d: usize,
    pub h: usize,
    pub c: usize,
}

/// One of the two weight layers inside an expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Layer {
    First,
    Second,
}

impl Layer {
    pub const BOTH: [Layer; 2] = [Layer::First, Layer::Second];

    pub fn weight_slot(self) -> ExpertSlot {
        match self {
            Self::First => ExpertSlot::W1,
            Self::Second => ExpertSlot::W2,
        }
    }

    pub fn bias_slot(self) -> ExpertSlot {
        match self {
            Self::First => ExpertSlot::B1,
            Self::Second => ExpertSlot::B2,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Self::First => 1,
            Self::Second => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExpertSlot {
    W1,
    B1,
    W2,
    B2,
}

impl ExpertSlot {
    pub const ALL: [ExpertSlot; 4] = [Self::W1, Self::B1, Self::W2, Self::B2];

    pub fn layer(self) -> Layer {
        match self {
            Self::W1 | Self::B1 => Layer::First,
            Self::W2 | Self::B2 => Layer::Second,
        }
    }

    pub fn is_weight(self) -> bool {
        matches!(self, Self::W1 | Self::W2)
    }
}

/// Identifies one parameter tensor of [`MoEModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    InputW,
    InputB,
    GateW,
    Expert { index: usize, slot: ExpertSlot },
    HeadW,
    HeadB,
}

impl ParamId {
    pub fn expert(index: usize, slot: ExpertSlot) -> Self {
        Self::Expert { index, slot }
    }

    /// Expert parameters form θ; everything else is φ.
    pub fn is_expert(self) -> bool {
        matches!(self, Self::Expert { .. })
    }

    pub fn name(self) -> String {
        match self {
            Self::InputW => "input.w".into(),
            Self::InputB => "input.b".into(),
            Self::GateW => "gate.w".into(),
            Self::HeadW => "head.w".into(),
            Self::HeadB => "head.b".into(),
            Self::Expert { index, slot } => {
                let s = match slot {
                    ExpertSlot::W1 => "w1",
                    ExpertSlot::B1 => "b1",
                    ExpertSlot::W2 => "w2",
                    ExpertSlot::B2 => "b2",
                };
                format!("experts.{index}.{s}")
            }
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "input.w" => Self::InputW,
            "input.b" => Self::InputB,
            "gate.w" => Self::GateW,
            "head.w" => Self::HeadW,
            "head.b" => Self::HeadB,
            other => {
                let rest = other.strip_prefix("experts.")?;
                let (idx, slot) = rest.split_once('.')?;
                let slot = match slot {
                    "w1" => ExpertSlot::W1,
                    "b1" => ExpertSlot::B1,
                    "w2" => ExpertSlot::W2,
                    "b2" => ExpertSlot::B2,
                    _ => return None,
                };
                Self::expert(idx.parse().ok()?, slot)
            }
        })
    }
}

/// Two-layer feed-forward expert: `W2 · act(W1 x + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertFfn {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Activations of one expert on one token.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPass {
    pub expert: usize,
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl ExpertFfn {
    fn sample(rng: &mut Rng, d: usize, h: usize) -> Self {
        Self {
            w1: gaussian_matrix(rng, h, d, 0.0, (2.0 / d as f64).sqrt()),
            b1: vec![0.0; h],
            w2: gaussian_matrix(rng, d, h, 0.0, (1.0 / h as f64).sqrt()),
            b2: vec![0.0; d],
        }
    }

    pub fn d(&self) -> usize {
        self.w1.cols()
    }

    pub fn h(&self) -> usize {
        self.w1.rows()
    }

    pub fn forward(&self, act: Activation, x: &[f64], index: usize) -> ExpertPass {
        let mut pre = self.w1.matvec(x).expect("expert input width");
        for (p, b) in pre.iter_mut().zip(&self.b1) {
            *p += b;
        }
        let hidden: Vec<f64> = pre.iter().map(|v| act.apply(*v)).collect();
        let mut out = self.w2.matvec(&hidden).expect("expert hidden width");
        for (o, b) in out.iter_mut().zip(&self.b2) {
            *o += b;
        }
        ExpertPass {
            expert: index,
            pre,
            hidden,
            out,
        }
    }

    /// All parameters in slot order (W1, b1, W2, b2), flattened.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(self.w1.as_slice());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.as_slice());
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn slot(&self, slot: ExpertSlot) -> &[f64] {
        match slot {
            ExpertSlot::W1 => self.w1.as_slice(),
            ExpertSlot::B1 => &self.b1,
            ExpertSlot::W2 => self.w2.as_slice(),
            ExpertSlot::B2 => &self.b2,
        }
    }

    fn slot_mut(&mut self, slot: ExpertSlot) -> &mut [f64] {
        match slot {
            ExpertSlot::W1 => self.w1.as_mut_slice(),
            ExpertSlot::B1 => &mut self.b1,
            ExpertSlot::W2 => self.w2.as_mut_slice(),
            ExpertSlot::B2 => &mut self.b2,
        }
    }
}

/// Linear-softmax token gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingNet {
    pub wg: Matrix,
    pub mode: RoutingMode,
}

/// Routing decision for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    /// Argmax expert, lowest index on ties.
    pub selected: usize,
    /// Full softmax distribution over experts.
    pub probs: Vec<f64>,
    pub mode: RoutingMode,
}

impl RoutingRecord {
    /// `(expert, weight)` pairs that contribute to the block output.
    pub fn weights(&self) -> Vec<(usize, f64)> {
        match self.mode {
            RoutingMode::Top1Hard => vec![(self.selected, self.probs[self.selected])],
            RoutingMode::DenseSoft => self.probs.iter().copied().enumerate().collect(),
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl GatingNet {
    pub fn experts(&self) -> usize {
        self.wg.rows()
    }
}

/// Softmax gate over `Wg · x`.
pub fn gate(g: &GatingNet, x: &[f64]) -> RoutingRecord {
    let logits = g.wg.matvec(x).expect("gate input width");
    let probs = softmax(&logits);
    RoutingRecord {
        selected: argmax(&probs),
        probs,
        mode: g.mode,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeOutput {
    pub y: Vec<f64>,
    pub routing: RoutingRecord,
    pub passes: Vec<ExpertPass>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoEModel {
    pub dims: ModelDims,
    pub activation: Activation,
    pub input_w: Matrix,
    pub input_b: Vec<f64>,
    pub gate: GatingNet,
    pub experts: Vec<ExpertFfn>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    version: u64,
}

pub fn init_model(
    rng: &mut Rng,
    dims: ModelDims,
    experts: usize,
    init: InitMode,
    routing: RoutingMode,
) -> Result<MoEModel> {
    if experts == 0 {
        return Err(LabError::contract("expert count must be at least 1"));
    }
    if dims.d_raw == 0 || dims.d == 0 || dims.h == 0 || dims.c == 0 {
        return Err(LabError::contract(format!(
            "model dims must be positive: {dims:?}"
        )));
    }
    let input_w = gaussian_matrix(rng, dims.d, dims.d_raw, 0.0, (1.0 / dims.d_raw as f64).sqrt());
    let wg = gaussian_matrix(rng, experts, dims.d, 0.0, (1.0 / dims.d as f64).sqrt());
    let experts = match init {
        InitMode::Replicate => {
            let seed = ExpertFfn::sample(rng, dims.d, dims.h);
            vec![seed; experts]
        }
        InitMode::Independent => (0..experts)
            .map(|_| ExpertFfn::sample(rng, dims.d, dims.h))
            .collect(),
    };
    let head_w = gaussian_matrix(rng, dims.c, dims.d, 0.0, (1.0 / dims.d as f64).sqrt());
    Ok(MoEModel {
        dims,
        activation: Activation::Relu,
        input_w,
        input_b: vec![0.0; dims.d],
        gate: GatingNet { wg, mode: routing },
        experts,
        head_w,
        head_b: vec![0.0; dims.c],
        version: 0,
    })
}

/// Runs the MoE block on one model-width vector.
pub fn moe_forward(model: &MoEModel, x: &[f64]) -> MoeOutput {
    let routing = gate(&model.gate, x);
    moe_forward_routed(model, x, routing)
}

fn moe_forward_routed(model: &MoEModel, x: &[f64], routing: RoutingRecord) -> MoeOutput {
    let mut y = vec![0.0; model.dims.d];
    let mut passes = Vec::new();
    for (m, w) in routing.weights() {
        let pass = model.experts[m].forward(model.activation, x, m);
        for (yi, fi) in y.iter_mut().zip(&pass.out) {
            *yi += w * fi;
        }
        passes.push(pass);
    }
    MoeOutput { y, routing, passes }
}

/// Everything the backward pass needs from one batch forward.
#[derive(Clone, Debug)]
pub struct BatchTape {
    pub(crate) model_version: u64,
    pub x: Matrix,
    /// Post-input-map representation per token (the MoE block input).
    pub z0: Vec<Vec<f64>>,
    pub tokens: Vec<MoeOutput>,
    pub logits: Matrix,
}

impl BatchTape {
    pub fn routing(&self) -> Vec<&RoutingRecord> {
        self.tokens.iter().map(|t| &t.routing).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of tokens processed by each expert.
    pub fn expert_token_counts(&self, experts: usize) -> Vec<usize> {
        let mut counts = vec![0; experts];
        for t in &self.tokens {
            for p in &t.passes {
                counts[p.expert] += 1;
            }
        }
        counts
    }

    /// Inputs seen by weight layer `layer` of expert `m`, in token order.
    pub fn expert_inputs(&self, m: usize, layer: Layer) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (t, tok) in self.tokens.iter().enumerate() {
            for p in tok.passes.iter().filter(|p| p.expert == m) {
                out.push(match layer {
                    Layer::First => self.z0[t].as_slice(),
                    Layer::Second => p.hidden.as_slice(),
                });
            }
        }
        out
    }
}

impl MoEModel {
    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn routing_mode(&self) -> RoutingMode {
        self.gate.mode
    }

    pub fn set_routing_mode(&mut self, mode: RoutingMode) {
        self.gate.mode = mode;
        self.version += 1;
    }

    pub fn set_activation(&mut self, act: Activation) {
        self.activation = act;
        self.version += 1;
    }

    /// Mutation counter; bumped on every mutable parameter access.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn input_map(&self, x_raw: &[f64]) -> Vec<f64> {
        let mut z = self.input_w.matvec(x_raw).expect("raw input width");
        for (zi, b) in z.iter_mut().zip(&self.input_b) {
            *zi += b;
        }
        z
    }

    fn head(&self, y: &[f64]) -> Vec<f64> {
        let mut o = self.head_w.matvec(y).expect("head input width");
        for (oi, b) in o.iter_mut().zip(&self.head_b) {
            *oi += b;
        }
        o
    }

    /// Canonical parameter order: input map, gate, experts, head.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::InputW, ParamId::InputB, ParamId::GateW];
        for m in 0..self.experts.len() {
            ids.extend(ExpertSlot::ALL.iter().map(|s| ParamId::expert(m, *s)));
        }
        ids.push(ParamId::HeadW);
        ids.push(ParamId::HeadB);
        ids
    }

    pub fn param_shape(&self, id: ParamId) -> (usize, usize) {
        match id {
            ParamId::InputW => self.input_w.shape(),
            ParamId::InputB => (self.input_b.len(), 1),
            ParamId::GateW => self.gate.wg.shape(),
            ParamId::HeadW => self.head_w.shape(),
            ParamId::HeadB => (self.head_b.len(), 1),
            ParamId::Expert { index, slot } => {
                let e = &self.experts[index];
                match slot {
                    ExpertSlot::W1 => e.w1.shape(),
                    ExpertSlot::B1 => (e.b1.len(), 1),
                    ExpertSlot::W2 => e.w2.shape(),
                    ExpertSlot::B2 => (e.b2.len(), 1),
                }
            }
        }
    }

    pub fn param(&self, id: ParamId) -> &[f64] {
        match id {
            ParamId::InputW => self.input_w.as_slice(),
            ParamId::InputB => &self.input_b,
            ParamId::GateW => self.gate.wg.as_slice(),
            ParamId::HeadW => self.head_w.as_slice(),
            ParamId::HeadB => &self.head_b,
            ParamId::Expert { index, slot } => self.experts[index].slot(slot),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.version += 1;
        match id {
            ParamId::InputW => self.input_w.as_mut_slice(),
            ParamId::InputB => &mut self.input_b,
            ParamId::GateW => self.gate.wg.as_mut_slice(),
            ParamId::HeadW => self.head_w.as_mut_slice(),
            ParamId::HeadB => &mut self.head_b,
            ParamId::Expert { index, slot } => self.experts[index].slot_mut(slot),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_ids().iter().map(|id| self.param(*id).len()).sum()
    }

    /// Flattened φ (non-expert) parameters in canonical order.
    pub fn shared_params(&self) -> Vec<f64> {
        self.param_ids()
            .into_iter()
            .filter(|id| !id.is_expert())
            .flat_map(|id| self.param(id).to_vec())
            .collect()
    }

    /// Batch forward pass.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, BatchTape)> {
        self.forward_with(x, None)
    }

    /// Forward pass with every token sent to the given expert indices
    /// instead of the gate's argmax; gate probabilities are unchanged.
    pub fn forward_forced(&self, x: &Matrix, route: &[usize]) -> Result<(Matrix, BatchTape)> {
        if route.len() != x.rows() {
            return Err(LabError::contract("forced route length must equal batch size"));
        }
        if route.iter().any(|m| *m >= self.experts.len()) {
            return Err(LabError::contract("forced route names a missing expert"));
        }
        self.forward_with(x, Some(route))
    }

    fn forward_with(&self, x: &Matrix, route: Option<&[usize]>) -> Result<(Matrix, BatchTape)> {
        if x.rows() == 0 {
            return Err(LabError::contract("batch must contain at least one row"));
        }
        if x.cols() != self.dims.d_raw {
            return Err(LabError::contract(format!(
                "batch has {} features, model expects {}",
                x.cols(),
                self.dims.d_raw
            )));
        }
        let n = x.rows();
        let mut logits = Matrix::zeros(n, self.dims.c);
        let mut z0s = Vec::with_capacity(n);
        let mut tokens = Vec::with_capacity(n);
        for r in 0..n {
            let z0 = self.input_map(x.row(r));
            let mut routing = gate(&self.gate, &z0);
            if let Some(route) = route {
                routing.selected = route[r];
            }
            let out = moe_forward_routed(self, &z0, routing);
            logits.row_mut(r).copy_from_slice(&self.head(&out.y));
            z0s.push(z0);
            tokens.push(out);
        }
        Ok((
            logits.clone(),
            BatchTape {
                model_version: self.version,
                x: x.clone(),
                z0: z0s,
                tokens,
                logits,
            },
        ))
    }
}

/// Batch forward: `N × d_raw` rows to `N × c` logits plus the tape.
pub fn model_forward(model: &MoEModel, x: &Matrix) -> Result<(Matrix, BatchTape)> {
    model.forward(x)
}
