//! The composite orthogonal optimizer.
//!
//! Regular (R) steps run the base optimizer over every parameter and buffer
//! each expert's per-layer mean inputs. Orthogonal (O) steps first fold the
//! buffered means into that expert's projectors, then move each expert weight
//! matrix by `−η · G · P̄`, where `P̄` averages the projectors of the *other*
//! experts. Shared parameters and base-optimizer moments are left alone
//! during O steps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backprop::{backward, ExpertInputMeans, Gradients, Targets};
use crate::error::{LabError, Result};
use crate::linalg::Matrix;
use crate::model::{Layer, MoEModel, ParamId};
use crate::optim::BaseOptimizer;
use crate::projector::{AccumBuffer, BufferedMean, MacCounter, OrthoProjector, DEFAULT_ALPHA0, DEFAULT_LAMBDA};

/// Divisor used when averaging the other experts' projectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AvgNorm {
    /// Sum over `j ≠ m` divided by `M`.
    #[default]
    DivideByM,
    /// Sum over `j ≠ m` divided by `M − 1`.
    ProperMean,
}

/// What the modulus in the schedule counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Schedule {
    /// O step whenever the mini-batch counter is a multiple of `s`.
    #[default]
    PerBatch,
    /// O step on the first batch of every epoch whose index is a multiple of `s`.
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OMoEConfig {
    #[serde(default = "default_skip")]
    pub s: u64,
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub avg_norm: AvgNorm,
    #[serde(default)]
    pub schedule: Schedule,
}

fn default_skip() -> u64 {
    5
}

fn default_alpha0() -> f64 {
    DEFAULT_ALPHA0
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl Default for OMoEConfig {
    fn default() -> Self {
        Self {
            s: default_skip(),
            alpha0: default_alpha0(),
            lambda: default_lambda(),
            avg_norm: AvgNorm::default(),
            schedule: Schedule::default(),
        }
    }
}

impl OMoEConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.s < 2 {
            return Err(LabError::config(
                format!("{path}.s"),
                "skipping step must be at least 2 so an accumulating phase exists",
            ));
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(LabError::config(format!("{path}.alpha0"), "must be positive"));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(LabError::config(format!("{path}.lambda"), "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    R,
    O,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub kind: StepKind,
    pub batch_index: u64,
    pub loss: f64,
    pub touched: Vec<ParamId>,
    /// Frobenius norm of `G · P̄` summed over both weight layers, per expert
    /// (O steps only).
    pub projected_norms: Vec<f64>,
    /// Buffered means consumed by projector updates (O steps only).
    pub consumed: usize,
    /// Multiply-accumulates spent in projector work (O steps only).
    pub macs: u64,
}

/// Composite optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct OMoEState {
    pub base: BaseOptimizer,
    pub config: OMoEConfig,
    projectors: BTreeMap<(usize, Layer), OrthoProjector>,
    buffers: BTreeMap<(usize, Layer), AccumBuffer>,
    experts: usize,
    /// Mini-batch counter; the next dispatched batch gets this index.
    e: u64,
    /// Accumulating batches seen so far.
    accum_events: u64,
    epoch: u64,
    epoch_o_pending: bool,
    produced: u64,
    consumed: u64,
}

/// Plain counters and schedule position, split out for checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OMoECounters {
    pub experts: usize,
    pub e: u64,
    pub accum_events: u64,
    pub epoch: u64,
    pub epoch_o_pending: bool,
    pub produced: u64,
    pub consumed: u64,
}

impl OMoEState {
    /// `n_total` is the planned number of accumulating batches in the run;
    /// it fixes the exponent of the α decay.
    pub fn new(base: BaseOptimizer, config: OMoEConfig, model: &MoEModel, n_total: u64) -> Result<Self> {
        config.validate("omoe")?;
        let n_total = n_total.max(1);
        let mut projectors = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for m in 0..model.expert_count() {
            for layer in Layer::BOTH {
                let width = model.param_shape(ParamId::expert(m, layer.weight_slot())).1;
                projectors.insert(
                    (m, layer),
                    OrthoProjector::new(width, config.alpha0, config.lambda, n_total)?,
                );
                buffers.insert((m, layer), AccumBuffer::default());
            }
        }
        Ok(Self {
            base,
            config,
            projectors,
            buffers,
            experts: model.expert_count(),
            e: 1,
            accum_events: 0,
            epoch: 0,
            epoch_o_pending: false,
            produced: 0,
            consumed: 0,
        })
    }

    pub fn from_parts(
        base: BaseOptimizer,
        config: OMoEConfig,
        projectors: BTreeMap<(usize, Layer), OrthoProjector>,
        buffers: BTreeMap<(usize, Layer), AccumBuffer>,
        counters: OMoECounters,
    ) -> Result<Self> {
        config.validate("omoe")?;
        for m in 0..counters.experts {
            for layer in Layer::BOTH {
                if !projectors.contains_key(&(m, layer)) || !buffers.contains_key(&(m, layer)) {
                    return Err(LabError::Checkpoint(format!(
                        "missing projector or buffer for expert {m} layer {}",
                        layer.index()
                    )));
                }
            }
        }
        if projectors.len() != 2 * counters.experts {
            return Err(LabError::Checkpoint("projector bank size mismatch".into()));
        }
        Ok(Self {
            base,
            config,
            projectors,
            buffers,
            experts: counters.experts,
            e: counters.e,
            accum_events: counters.accum_events,
            epoch: counters.epoch,
            epoch_o_pending: counters.epoch_o_pending,
            produced: counters.produced,
            consumed: counters.consumed,
        })
    }

    pub fn counters(&self) -> OMoECounters {
        OMoECounters {
            experts: self.experts,
            e: self.e,
            accum_events: self.accum_events,
            epoch: self.epoch,
            epoch_o_pending: self.epoch_o_pending,
            produced: self.produced,
            consumed: self.consumed,
        }
    }

    /// Overrides the index the next batch receives.
    pub fn with_start_index(mut self, e: u64) -> Self {
        self.e = e;
        self
    }

    pub fn batch_index(&self) -> u64 {
        self.e
    }

    pub fn expert_count(&self) -> usize {
        self.experts
    }

    pub fn projector(&self, m: usize, layer: Layer) -> &OrthoProjector {
        &self.projectors[&(m, layer)]
    }

    pub fn projectors(&self) -> &BTreeMap<(usize, Layer), OrthoProjector> {
        &self.projectors
    }

    pub fn buffers(&self) -> &BTreeMap<(usize, Layer), AccumBuffer> {
        &self.buffers
    }

    /// Total buffered means produced and consumed so far.
    pub fn mean_traffic(&self) -> (u64, u64) {
        (self.produced, self.consumed)
    }

    /// Marks an epoch boundary for the per-epoch schedule.
    pub fn begin_epoch(&mut self) {
        self.epoch += 1;
        self.epoch_o_pending = self.epoch.is_multiple_of(self.config.s);
    }

    pub fn o_step_due(&self) -> bool {
        match self.config.schedule {
            Schedule::PerBatch => self.e.is_multiple_of(self.config.s),
            Schedule::PerEpoch => self.epoch_o_pending,
        }
    }

    /// Regular step: base optimizer over all parameters, then buffer means.
    pub fn r_step(&mut self, model: &mut MoEModel, grads: &Gradients, means: &ExpertInputMeans) -> Result<StepOutcome> {
        self.base.step(model, grads)?;
        for ((m, layer), im) in means.iter() {
            let buf = self
                .buffers
                .get_mut(&(*m, *layer))
                .ok_or_else(|| LabError::contract(format!("no buffer for expert {m}")))?;
            buf.push(BufferedMean {
                mean: im.mean.clone(),
                batch_index: self.e,
                ordinal: self.accum_events,
            })?;
            self.produced += 1;
        }
        let outcome = StepOutcome {
            kind: StepKind::R,
            batch_index: self.e,
            loss: grads.loss,
            touched: model.param_ids(),
            projected_norms: Vec::new(),
            consumed: 0,
            macs: 0,
        };
        self.accum_events += 1;
        self.e += 1;
        Ok(outcome)
    }

    /// Feeds every buffered mean into its projector in batch order.
    fn drain_buffers(&mut self, counter: &mut MacCounter) -> Result<usize> {
        let mut count = 0;
        for (key, buf) in self.buffers.iter_mut() {
            let proj = self.projectors.get_mut(key).expect("projector per buffer");
            for entry in buf.drain() {
                // ordinals past the plan keep the final α
                let alpha = proj.alpha_at(entry.ordinal.min(proj.n_total()))?;
                proj.rls_update_counted(&entry.mean, alpha, counter)?;
                count += 1;
            }
        }
        self.consumed += count as u64;
        Ok(count)
    }

    /// Averaged projector of every expert except `m` for one weight layer.
    pub fn average_projector(&self, m: usize, layer: Layer) -> Result<Matrix> {
        self.average_projector_counted(m, layer, &mut MacCounter::default())
    }

    fn average_projector_counted(&self, m: usize, layer: Layer, counter: &mut MacCounter) -> Result<Matrix> {
        if self.experts < 2 {
            return Err(LabError::SingleExpert);
        }
        if m >= self.experts {
            return Err(LabError::contract(format!("expert {m} out of range")));
        }
        let divisor = match self.config.avg_norm {
            AvgNorm::DivideByM => self.experts,
            AvgNorm::ProperMean => self.experts - 1,
        } as f64;
        let w = 1.0 / divisor;
        let dim = self.projectors[&(m, layer)].dim();
        let mut acc = Matrix::zeros(dim, dim);
        for j in (0..self.experts).filter(|j| *j != m) {
            acc.axpy(w, self.projectors[&(j, layer)].matrix())?;
            counter.add(dim * dim);
        }
        Ok(acc)
    }

    /// Orthogonal step over the expert parameters.
    pub fn o_step(&mut self, model: &mut MoEModel, grads: &Gradients) -> Result<StepOutcome> {
        if self.experts < 2 {
            return Err(LabError::SingleExpert);
        }
        let mut counter = MacCounter::default();
        let consumed = self.drain_buffers(&mut counter)?;

        let lr = self.base.lr();
        let mut averaged = BTreeMap::new();
        for m in 0..self.experts {
            for layer in Layer::BOTH {
                averaged.insert((m, layer), self.average_projector_counted(m, layer, &mut counter)?);
            }
        }

        let mut norms = vec![0.0; self.experts];
        let mut touched = Vec::new();
        for m in 0..self.experts {
            let mut sq = 0.0;
            for layer in Layer::BOTH {
                let w_id = ParamId::expert(m, layer.weight_slot());
                let g = grads.get(w_id);
                let step = project_gradient_counted(g, &averaged[&(m, layer)], &mut counter)?;
                sq += step.frobenius().powi(2);
                for (p, d) in model.param_mut(w_id).iter_mut().zip(step.as_slice()) {
                    *p -= lr * d;
                }
                let b_id = ParamId::expert(m, layer.bias_slot());
                for (p, d) in model.param_mut(b_id).iter_mut().zip(grads.get(b_id).as_slice()) {
                    *p -= lr * d;
                }
                touched.push(w_id);
                touched.push(b_id);
            }
            norms[m] = sq.sqrt();
        }

        let outcome = StepOutcome {
            kind: StepKind::O,
            batch_index: self.e,
            loss: grads.loss,
            touched,
            projected_norms: norms,
            consumed,
            macs: counter.macs,
        };
        self.e += 1;
        self.epoch_o_pending = false;
        Ok(outcome)
    }

    /// One batch: forward, backward, then an O or R step per the schedule.
    pub fn step_dispatch(&mut self, model: &mut MoEModel, x: &Matrix, targets: &Targets) -> Result<StepOutcome> {
        let (_, tape) = model.forward(x)?;
        let (grads, means) = backward(model, &tape, targets)?;
        if self.o_step_due() {
            self.o_step(model, &grads)
        } else {
            self.r_step(model, &grads, &means)
        }
    }
}

/// `G · P̄` with `P̄` acting on the input dimension of `G`.
pub fn project_gradient(g: &Matrix, pbar: &Matrix) -> Result<Matrix> {
    project_gradient_counted(g, pbar, &mut MacCounter::default())
}

fn project_gradient_counted(g: &Matrix, pbar: &Matrix, counter: &mut MacCounter) -> Result<Matrix> {
    if g.cols() != pbar.rows() || !pbar.is_square() {
        return Err(LabError::contract(format!(
            "cannot project a {:?} gradient with a {:?} projector",
            g.shape(),
            pbar.shape()
        )));
    }
    // dense product, every term counted
    let n = pbar.rows();
    let mut out = Matrix::zeros(g.rows(), n);
    for r in 0..g.rows() {
        let grow = g.row(r);
        let orow = out.row_mut(r);
        for (k, gk) in grow.iter().enumerate() {
            for (o, p) in orow.iter_mut().zip(pbar.row(k)) {
                *o += gk * p;
            }
        }
        counter.add(n * n);
    }
    Ok(out)
}
