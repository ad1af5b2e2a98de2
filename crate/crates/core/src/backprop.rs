//! Reverse-mode gradients for [`MoEModel`] and the per-expert mean inputs
//! the projectors accumulate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{Matrix, Rng};
use crate::model::{BatchTape, ExpertSlot, Layer, MoEModel, ParamId, RoutingMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    /// Batch mean of `½‖o − t‖²`.
    Mse,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Matrix),
}

impl Targets {
    pub fn kind(&self) -> LossKind {
        match self {
            Self::Classes(_) => LossKind::CrossEntropy,
            Self::Values(_) => LossKind::Mse,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Classes(c) => c.len(),
            Self::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean loss over the batch.
pub fn loss(logits: &Matrix, targets: &Targets, kind: LossKind) -> Result<f64> {
    Ok(loss_and_delta(logits, targets, kind)?.0)
}

/// Loss plus its derivative with respect to the logits.
fn loss_and_delta(logits: &Matrix, targets: &Targets, kind: LossKind) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if targets.len() != n {
        return Err(LabError::contract(format!(
            "{} targets for {n} logit rows",
            targets.len()
        )));
    }
    if n == 0 {
        return Err(LabError::contract("empty batch"));
    }
    let inv_n = 1.0 / n as f64;
    let mut delta = Matrix::zeros(n, logits.cols());
    let mut total = 0.0;
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes(classes)) => {
            for (r, &t) in classes.iter().enumerate() {
                if t >= logits.cols() {
                    return Err(LabError::contract(format!(
                        "class {t} out of range for {} logits",
                        logits.cols()
                    )));
                }
                let row = logits.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                for (c, v) in row.iter().enumerate() {
                    let p = (v - lse).exp();
                    delta[(r, c)] = inv_n * (p - if c == t { 1.0 } else { 0.0 });
                }
            }
        }
        (LossKind::Mse, Targets::Values(values)) => {
            if values.shape() != logits.shape() {
                return Err(LabError::contract(format!(
                    "target shape {:?} vs logits {:?}",
                    values.shape(),
                    logits.shape()
                )));
            }
            for r in 0..n {
                for c in 0..logits.cols() {
                    let e = logits[(r, c)] - values[(r, c)];
                    total += 0.5 * e * e;
                    delta[(r, c)] = inv_n * e;
                }
            }
        }
        _ => {
            return Err(LabError::contract(
                "cross entropy needs class targets, MSE needs real-valued targets",
            ))
        }
    }
    Ok((total * inv_n, delta))
}

/// Gradient of the mean loss for every parameter, keyed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    grads: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    fn zeros_like(model: &MoEModel) -> Self {
        let grads = model
            .param_ids()
            .into_iter()
            .map(|id| {
                let (r, c) = model.param_shape(id);
                (id, Matrix::zeros(r, c))
            })
            .collect();
        Self { loss: 0.0, grads }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[&id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Matrix)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn slot(&mut self, id: ParamId) -> &mut [f64] {
        self.grads
            .get_mut(&id)
            .expect("gradient entry for every parameter")
            .as_mut_slice()
    }
}

/// Mean input and routed-token count for one expert weight layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputMean {
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Per-(expert, layer) mean inputs for one batch. Experts that processed no
/// token have no entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExpertInputMeans {
    entries: BTreeMap<(usize, Layer), InputMean>,
}

impl ExpertInputMeans {
    pub fn from_tape(tape: &BatchTape, experts: usize) -> Self {
        let mut entries = BTreeMap::new();
        for m in 0..experts {
            for layer in Layer::BOTH {
                let inputs = tape.expert_inputs(m, layer);
                if inputs.is_empty() {
                    continue;
                }
                let mut mean = vec![0.0; inputs[0].len()];
                for x in &inputs {
                    for (a, b) in mean.iter_mut().zip(x.iter()) {
                        *a += b;
                    }
                }
                let k = inputs.len() as f64;
                mean.iter_mut().for_each(|v| *v /= k);
                entries.insert(
                    (m, layer),
                    InputMean {
                        mean,
                        count: inputs.len(),
                    },
                );
            }
        }
        Self { entries }
    }

    pub fn get(&self, expert: usize, layer: Layer) -> Option<&InputMean> {
        self.entries.get(&(expert, layer))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, Layer), &InputMean)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Exact gradients of the mean batch loss plus the batch's expert input means.
pub fn backward(
    model: &MoEModel,
    tape: &BatchTape,
    targets: &Targets,
) -> Result<(Gradients, ExpertInputMeans)> {
    backward_scaled(model, tape, targets, 1.0)
}

/// As [`backward`] for the loss multiplied by `scale`.
pub fn backward_scaled(
    model: &MoEModel,
    tape: &BatchTape,
    targets: &Targets,
    scale: f64,
) -> Result<(Gradients, ExpertInputMeans)> {
    if tape.model_version != model.version() {
        return Err(LabError::contract(
            "stale tape: model was modified after the forward pass",
        ));
    }
    let (loss_value, mut delta) = loss_and_delta(&tape.logits, targets, targets.kind())?;
    if scale != 1.0 {
        delta = delta.scale(scale);
    }
    let act = model.activation;
    let mut g = Gradients::zeros_like(model);
    g.loss = loss_value * scale;

    for (t, tok) in tape.tokens.iter().enumerate() {
        let z0 = &tape.z0[t];
        let d_out = delta.row(t);

        // head: o = H y + hb
        let h_w = g.slot(ParamId::HeadW);
        let d = model.dims.d;
        for (r, dr) in d_out.iter().enumerate() {
            for (gw, yi) in h_w[r * d..(r + 1) * d].iter_mut().zip(&tok.y) {
                *gw += dr * yi;
            }
        }
        for (gb, dr) in g.slot(ParamId::HeadB).iter_mut().zip(d_out) {
            *gb += dr;
        }
        let d_y = model.head_w.matvec_t(d_out)?;

        // MoE block: y = Σ w_j f_j over the contributing experts
        let probs = &tok.routing.probs;
        let mut d_z0 = vec![0.0; d];
        let mut d_prob = vec![0.0; probs.len()];
        for pass in &tok.passes {
            let m = pass.expert;
            let w = probs[m];
            d_prob[m] = crate::linalg::dot(&d_y, &pass.out);
            let d_f: Vec<f64> = d_y.iter().map(|v| w * v).collect();
            let expert = &model.experts[m];
            let h = expert.h();

            let gw2 = g.slot(ParamId::expert(m, ExpertSlot::W2));
            for (r, dfr) in d_f.iter().enumerate() {
                for (gw, hi) in gw2[r * h..(r + 1) * h].iter_mut().zip(&pass.hidden) {
                    *gw += dfr * hi;
                }
            }
            for (gb, dfr) in g.slot(ParamId::expert(m, ExpertSlot::B2)).iter_mut().zip(&d_f) {
                *gb += dfr;
            }
            let mut d_pre = expert.w2.matvec_t(&d_f)?;
            for ((dp, pre), out) in d_pre.iter_mut().zip(&pass.pre).zip(&pass.hidden) {
                *dp *= act.derivative(*pre, *out);
            }
            let gw1 = g.slot(ParamId::expert(m, ExpertSlot::W1));
            for (r, dpr) in d_pre.iter().enumerate() {
                if *dpr == 0.0 {
                    continue;
                }
                for (gw, zi) in gw1[r * d..(r + 1) * d].iter_mut().zip(z0) {
                    *gw += dpr * zi;
                }
            }
            for (gb, dpr) in g.slot(ParamId::expert(m, ExpertSlot::B1)).iter_mut().zip(&d_pre) {
                *gb += dpr;
            }
            for (dz, v) in d_z0.iter_mut().zip(expert.w1.matvec_t(&d_pre)?) {
                *dz += v;
            }
        }

        // softmax gate: dl_j = p_j (dp_j − Σ_k p_k dp_k); for top-1 only the
        // selected probability carries gradient
        let weighted: f64 = match model.routing_mode() {
            RoutingMode::Top1Hard => probs[tok.routing.selected] * d_prob[tok.routing.selected],
            RoutingMode::DenseSoft => probs.iter().zip(&d_prob).map(|(p, dp)| p * dp).sum(),
        };
        let d_logit: Vec<f64> = probs
            .iter()
            .zip(&d_prob)
            .map(|(p, dp)| p * (dp - weighted))
            .collect();
        let gwg = g.slot(ParamId::GateW);
        for (r, dl) in d_logit.iter().enumerate() {
            for (gw, zi) in gwg[r * d..(r + 1) * d].iter_mut().zip(z0) {
                *gw += dl * zi;
            }
        }
        for (dz, v) in d_z0.iter_mut().zip(model.gate.wg.matvec_t(&d_logit)?) {
            *dz += v;
        }

        // input map: z0 = A x + a
        let x = tape.x.row(t);
        let d_raw = model.dims.d_raw;
        let ga = g.slot(ParamId::InputW);
        for (r, dzr) in d_z0.iter().enumerate() {
            for (gw, xi) in ga[r * d_raw..(r + 1) * d_raw].iter_mut().zip(x) {
                *gw += dzr * xi;
            }
        }
        for (gb, dzr) in g.slot(ParamId::InputB).iter_mut().zip(&d_z0) {
            *gb += dzr;
        }
    }

    let means = ExpertInputMeans::from_tape(tape, model.expert_count());
    Ok((g, means))
}

/// Result of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because perturbing them changed a routing decision.
    pub excluded: Vec<(String, usize)>,
}

/// Compares analytic gradients with central differences on a random sample
/// of at least 200 coordinates (or all of them when the model is smaller).
pub fn grad_check(
    model: &MoEModel,
    x: &Matrix,
    targets: &Targets,
    h: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    grad_check_sampled(model, x, targets, h, 200, rng)
}

pub fn grad_check_sampled(
    model: &MoEModel,
    x: &Matrix,
    targets: &Targets,
    h: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(LabError::contract(format!(
            "finite-difference step {h:e} outside [1e-6, 1e-4]"
        )));
    }
    let (_, tape) = model.forward(x)?;
    let (grads, _) = backward(model, &tape, targets)?;
    let base_route: Vec<usize> = tape.tokens.iter().map(|t| t.routing.selected).collect();
    let kind = targets.kind();

    let mut coords: Vec<(ParamId, usize)> = model
        .param_ids()
        .into_iter()
        .flat_map(|id| (0..model.param(id).len()).map(move |i| (id, i)))
        .collect();
    if coords.len() > samples {
        rng.shuffle(&mut coords);
        coords.truncate(samples.max(200));
    }

    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut excluded = Vec::new();
    for (id, i) in coords {
        let orig = probe.param(id)[i];
        probe.param_mut(id)[i] = orig + h;
        let (lp, tp) = probe.forward(x)?;
        probe.param_mut(id)[i] = orig - h;
        let (lm, tm) = probe.forward(x)?;
        probe.param_mut(id)[i] = orig;

        let flipped = model.routing_mode() == RoutingMode::Top1Hard
            && [&tp, &tm].iter().any(|t| {
                t.tokens
                    .iter()
                    .zip(&base_route)
                    .any(|(tok, r)| tok.routing.selected != *r)
            });
        if flipped {
            excluded.push((id.name(), i));
            continue;
        }
        let numeric = (loss(&lp, targets, kind)? - loss(&lm, targets, kind)?) / (2.0 * h);
        let analytic = grads.get(id).as_slice()[i];
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
        excluded,
    })
}
