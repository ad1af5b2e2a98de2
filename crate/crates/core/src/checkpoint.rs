//! Versioned JSON checkpoint container for models and optimizer state.
//!
//! Every float array is stored as base64 of its little-endian IEEE-754
//! bytes, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{Matrix, Rng};
use crate::model::{init_model, Activation, InitMode, Layer, MoEModel, ModelDims, ParamId, RoutingMode};
use crate::omoe::{OMoEConfig, OMoECounters, OMoEState};
use crate::optim::{BaseOptimizer, Moments, OptimizerConfig};
use crate::projector::{AccumBuffer, BufferedMean, OrthoProjector};

pub const FORMAT: &str = "omoe-lab-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Base64-encoded `f64` array with its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedArray {
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

impl EncodedArray {
    pub fn encode(rows: usize, cols: usize, values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            rows,
            cols,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self::encode(m.rows(), m.cols(), m.as_slice())
    }

    pub fn from_vec(v: &[f64]) -> Self {
        Self::encode(v.len(), 1, v)
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| LabError::Checkpoint(format!("bad base64: {e}")))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(LabError::Checkpoint(format!(
                "array holds {} bytes, shape {}x{} needs {}",
                bytes.len(),
                self.rows,
                self.cols,
                self.rows * self.cols * 8
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_vec(self.rows, self.cols, self.decode()?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Container<T> {
    format: String,
    version: u32,
    kind: String,
    artifact: String,
    payload: T,
}

fn wrap<T: Serialize>(kind: &str, payload: T) -> Container<T> {
    Container {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        kind: kind.into(),
        artifact: crate::ARTIFACT_VERSION.into(),
        payload,
    }
}

/// Checks the header before touching the payload so a wrong kind or version
/// is reported as such rather than as a shape mismatch.
fn open<T: serde::de::DeserializeOwned>(text: &str, kind: &str) -> Result<T> {
    let c: Container<serde_json::Value> = serde_json::from_str(text)?;
    let payload = unwrap(c, kind)?;
    serde_json::from_value(payload).map_err(|e| LabError::Checkpoint(format!("{kind} payload: {e}")))
}

fn unwrap<T>(c: Container<T>, kind: &str) -> Result<T> {
    if c.format != FORMAT {
        return Err(LabError::Checkpoint(format!("unknown format `{}`", c.format)));
    }
    if c.version != FORMAT_VERSION {
        return Err(LabError::Checkpoint(format!(
            "unsupported version {} (expected {FORMAT_VERSION})",
            c.version
        )));
    }
    if c.kind != kind {
        return Err(LabError::Checkpoint(format!(
            "expected a {kind} checkpoint, found {}",
            c.kind
        )));
    }
    Ok(c.payload)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelPayload {
    dims: ModelDims,
    experts: usize,
    activation: Activation,
    routing: RoutingMode,
    params: BTreeMap<String, EncodedArray>,
}

pub fn model_to_json(model: &MoEModel) -> Result<String> {
    let params = model
        .param_ids()
        .into_iter()
        .map(|id| {
            let (r, c) = model.param_shape(id);
            (id.name(), EncodedArray::encode(r, c, model.param(id)))
        })
        .collect();
    let payload = ModelPayload {
        dims: model.dims,
        experts: model.expert_count(),
        activation: model.activation,
        routing: model.routing_mode(),
        params,
    };
    Ok(serde_json::to_string_pretty(&wrap("model", payload))?)
}

pub fn model_from_json(text: &str) -> Result<MoEModel> {
    let p: ModelPayload = open(text, "model")?;
    let mut model = init_model(&mut Rng::new(0), p.dims, p.experts, InitMode::Replicate, p.routing)?;
    model.set_activation(p.activation);
    let ids = model.param_ids();
    if ids.len() != p.params.len() {
        return Err(LabError::Checkpoint(format!(
            "{} parameter arrays, model needs {}",
            p.params.len(),
            ids.len()
        )));
    }
    for id in ids {
        let arr = p
            .params
            .get(&id.name())
            .ok_or_else(|| LabError::Checkpoint(format!("missing parameter {}", id.name())))?;
        if (arr.rows, arr.cols) != model.param_shape(id) {
            return Err(LabError::Checkpoint(format!("shape mismatch for {}", id.name())));
        }
        model.param_mut(id).copy_from_slice(&arr.decode()?);
    }
    Ok(model)
}

pub fn save_model(model: &MoEModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MoEModel> {
    model_from_json(&std::fs::read_to_string(path)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MomentsPayload {
    first: EncodedArray,
    second: EncodedArray,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BasePayload {
    config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, MomentsPayload>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ProjectorPayload {
    expert: usize,
    layer: Layer,
    p: EncodedArray,
    updates_applied: u64,
    alpha0: f64,
    lambda: f64,
    n_total: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BufferedPayload {
    mean: EncodedArray,
    batch_index: u64,
    ordinal: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BufferPayload {
    expert: usize,
    layer: Layer,
    entries: Vec<BufferedPayload>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OMoEPayload {
    config: OMoEConfig,
    counters: OMoECounters,
    projectors: Vec<ProjectorPayload>,
    buffers: Vec<BufferPayload>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerPayload {
    base: BasePayload,
    omoe: Option<OMoEPayload>,
}

/// Optimizer state as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerCheckpoint {
    Base(BaseOptimizer),
    OMoE(OMoEState),
}

fn encode_base(base: &BaseOptimizer) -> BasePayload {
    BasePayload {
        config: base.config.clone(),
        step: base.step_count(),
        moments: base
            .state()
            .iter()
            .map(|(id, m)| {
                (
                    id.name(),
                    MomentsPayload {
                        first: EncodedArray::from_vec(&m.first),
                        second: EncodedArray::from_vec(&m.second),
                    },
                )
            })
            .collect(),
    }
}

fn decode_base(p: BasePayload) -> Result<BaseOptimizer> {
    let mut state = BTreeMap::new();
    for (name, m) in p.moments {
        let id = ParamId::parse(&name)
            .ok_or_else(|| LabError::Checkpoint(format!("unknown parameter `{name}`")))?;
        state.insert(
            id,
            Moments {
                first: m.first.decode()?,
                second: m.second.decode()?,
            },
        );
    }
    Ok(BaseOptimizer::from_parts(p.config, p.step, state))
}

pub fn optimizer_to_json(opt: &OptimizerCheckpoint) -> Result<String> {
    let payload = match opt {
        OptimizerCheckpoint::Base(b) => OptimizerPayload {
            base: encode_base(b),
            omoe: None,
        },
        OptimizerCheckpoint::OMoE(st) => OptimizerPayload {
            base: encode_base(&st.base),
            omoe: Some(OMoEPayload {
                config: st.config.clone(),
                counters: st.counters(),
                projectors: st
                    .projectors()
                    .iter()
                    .map(|((m, l), p)| ProjectorPayload {
                        expert: *m,
                        layer: *l,
                        p: EncodedArray::from_matrix(p.matrix()),
                        updates_applied: p.updates_applied(),
                        alpha0: p.alpha0(),
                        lambda: p.lambda(),
                        n_total: p.n_total(),
                    })
                    .collect(),
                buffers: st
                    .buffers()
                    .iter()
                    .map(|((m, l), b)| BufferPayload {
                        expert: *m,
                        layer: *l,
                        entries: b
                            .entries()
                            .iter()
                            .map(|e| BufferedPayload {
                                mean: EncodedArray::from_vec(&e.mean),
                                batch_index: e.batch_index,
                                ordinal: e.ordinal,
                            })
                            .collect(),
                    })
                    .collect(),
            }),
        },
    };
    Ok(serde_json::to_string_pretty(&wrap("optimizer", payload))?)
}

pub fn optimizer_from_json(text: &str) -> Result<OptimizerCheckpoint> {
    let p: OptimizerPayload = open(text, "optimizer")?;
    let base = decode_base(p.base)?;
    let Some(o) = p.omoe else {
        return Ok(OptimizerCheckpoint::Base(base));
    };
    let mut projectors = BTreeMap::new();
    for pp in o.projectors {
        let proj = OrthoProjector::from_parts(pp.p.to_matrix()?, pp.updates_applied, pp.alpha0, pp.lambda, pp.n_total)?;
        projectors.insert((pp.expert, pp.layer), proj);
    }
    let mut buffers = BTreeMap::new();
    for bp in o.buffers {
        let mut buf = AccumBuffer::default();
        for e in bp.entries {
            buf.push(BufferedMean {
                mean: e.mean.decode()?,
                batch_index: e.batch_index,
                ordinal: e.ordinal,
            })?;
        }
        buffers.insert((bp.expert, bp.layer), buf);
    }
    Ok(OptimizerCheckpoint::OMoE(OMoEState::from_parts(
        base,
        o.config,
        projectors,
        buffers,
        o.counters,
    )?))
}

pub fn save_optimizer(opt: &OptimizerCheckpoint, path: &Path) -> Result<()> {
    std::fs::write(path, optimizer_to_json(opt)?)?;
    Ok(())
}

pub fn load_optimizer(path: &Path) -> Result<OptimizerCheckpoint> {
    optimizer_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use crate::model::InitMode;
    use proptest::prelude::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dims = ModelDims {
            d_raw: 3,
            d: 4,
            h: 6,
            c: 2,
        };
        let mut m = init_model(&mut Rng::new(9), dims, 3, InitMode::Independent, RoutingMode::DenseSoft).unwrap();
        m.head_b[0] = f64::MIN_POSITIVE / 3.0;
        m.head_b[1] = -0.0;
        let back = model_from_json(&model_to_json(&m).unwrap()).unwrap();
        for id in m.param_ids() {
            let a: Vec<u64> = m.param(id).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.param(id).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(back.routing_mode(), RoutingMode::DenseSoft);
    }

    #[test]
    fn wrong_kind_rejected() {
        let dims = ModelDims {
            d_raw: 1,
            d: 1,
            h: 1,
            c: 1,
        };
        let m = init_model(&mut Rng::new(0), dims, 1, InitMode::Replicate, RoutingMode::Top1Hard).unwrap();
        let text = model_to_json(&m).unwrap();
        assert!(matches!(optimizer_from_json(&text), Err(LabError::Checkpoint(_))));
        let tampered = text.replace("\"version\": 1", "\"version\": 99");
        assert!(model_from_json(&tampered).is_err());
    }

    proptest! {
        #[test]
        fn encoded_arrays_round_trip(bits in proptest::collection::vec(any::<u64>(), 0..40)) {
            let values: Vec<f64> = bits.iter().map(|b| f64::from_bits(*b)).collect();
            let enc = EncodedArray::from_vec(&values);
            let json = serde_json::to_string(&enc).unwrap();
            let dec: EncodedArray = serde_json::from_str(&json).unwrap();
            let back: Vec<u64> = dec.decode().unwrap().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(back, bits);
        }
    }
}
