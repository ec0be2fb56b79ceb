//! Self-describing JSON checkpoint. Parameter vectors are stored as base64
//! of little-endian `f64` bytes so that round trips are bit exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Architecture, DenoiserParams, EmaState};
use crate::chain::CorruptionKernel;
use crate::error::{CdlmError, Result};
use crate::objective::{MaxStepMixer, StepSizeScheduler};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "cdlm-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamShape {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub kernel: CorruptionKernel,
    pub shape: ParamShape,
    pub params: String,
    pub target_params: String,
    pub ema_decay: f64,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduler: Option<StepSizeScheduler>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixer: Option<MaxStepMixer>,
}

fn encode<T: Scalar>(values: &[T]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode<T: Scalar>(text: &str, expected: usize) -> Result<Vec<T>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| CdlmError::Checkpoint(format!("parameter block is not base64: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(CdlmError::Checkpoint(format!(
            "parameter block holds {} bytes, expected {}",
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
        .collect())
}

impl Checkpoint {
    pub fn new<T: Scalar>(online: &DenoiserParams<T>, ema: &EmaState<T>, step: u64) -> Result<Self> {
        if !ema.target.same_shape(online) {
            return Err(CdlmError::Shape("EMA target and online parameters differ in structure".into()));
        }
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: online.architecture(),
            kernel: *online.kernel(),
            shape: ParamShape {
                vocab_size: online.vocab_size(),
                seq_len: online.seq_len(),
                param_count: online.len(),
            },
            params: encode(online.values()),
            target_params: encode(ema.target.values()),
            ema_decay: ema.decay.as_f64(),
            step,
            scheduler: None,
            mixer: None,
        })
    }

    pub fn with_schedules(mut self, scheduler: StepSizeScheduler, mixer: MaxStepMixer) -> Self {
        self.scheduler = Some(scheduler);
        self.mixer = Some(mixer);
        self
    }

    /// Rebuilds the online parameters and the EMA state.
    pub fn restore<T: Scalar>(&self) -> Result<(DenoiserParams<T>, EmaState<T>)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(CdlmError::Checkpoint(format!("unknown format tag {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(CdlmError::Checkpoint(format!("unsupported version {}", self.version)));
        }
        if self.shape.vocab_size != self.kernel.size() {
            return Err(CdlmError::Checkpoint(format!(
                "vocabulary size {} does not match the kernel ({})",
                self.shape.vocab_size,
                self.kernel.size()
            )));
        }
        let n = self.shape.param_count;
        let online = DenoiserParams::from_values(
            self.architecture,
            self.kernel,
            self.shape.seq_len,
            decode(&self.params, n)?,
        )
        .map_err(|e| CdlmError::Checkpoint(e.to_string()))?;
        let target = DenoiserParams::from_values(
            self.architecture,
            self.kernel,
            self.shape.seq_len,
            decode(&self.target_params, n)?,
        )
        .map_err(|e| CdlmError::Checkpoint(e.to_string()))?;
        let mut ema = EmaState::new(&online, T::of(self.ema_decay))?;
        ema.target = target;
        Ok((online, ema))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| CdlmError::Checkpoint(format!("{}: {}", e.path(), e.inner())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
