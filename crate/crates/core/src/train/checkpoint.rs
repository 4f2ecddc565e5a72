//! Checkpoints: the hand-off between curriculum stages and the unit of
//! persistence. Parameters are stored in f32 regardless of the training
//! element type; the binary codec lives in the companion crate.

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::gradcheck::NamedTensors;
use crate::train::optim::OptimizerState;
use alloc::collections::BTreeMap;
use alloc::format;

pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    Stage1,
    Stage2,
    Finetuned,
}

impl StageTag {
    pub fn code(self) -> u8 {
        match self {
            StageTag::Stage1 => 1,
            StageTag::Stage2 => 2,
            StageTag::Finetuned => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(StageTag::Stage1),
            2 => Ok(StageTag::Stage2),
            3 => Ok(StageTag::Finetuned),
            _ => Err(Error::format(format!("unknown stage tag {code}"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
            StageTag::Finetuned => "finetuned",
        }
    }
}

/// Optimizer moments in storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredOptimizer {
    pub m: NamedTensors<f32>,
    pub v: NamedTensors<f32>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub stage: StageTag,
    pub fingerprint: [u8; 32],
    pub params: NamedTensors<f32>,
    pub optimizer: Option<StoredOptimizer>,
    /// `[state, stream]` words of the run generator at save time.
    pub rng_state: [u64; 2],
    pub step: u64,
}

impl Checkpoint {
    pub fn new<E: Element>(
        stage: StageTag,
        fingerprint: [u8; 32],
        params: &NamedTensors<E>,
        optimizer: Option<&OptimizerState<E>>,
        rng_state: [u64; 2],
        step: u64,
    ) -> Self {
        let cast = |m: &NamedTensors<E>| -> NamedTensors<f32> {
            m.iter().map(|(k, t)| (k.clone(), t.cast())).collect()
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage,
            fingerprint,
            params: cast(params),
            optimizer: optimizer.map(|o| StoredOptimizer {
                m: cast(&o.m),
                v: cast(&o.v),
                step: o.step as u64,
            }),
            rng_state,
            step,
        }
    }

    pub fn params_as<E: Element>(&self) -> NamedTensors<E> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), t.cast()))
            .collect()
    }

    pub fn expect_stage(&self, stage: StageTag) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Version {
                what: format!(
                    "checkpoint is tagged {}, expected {}",
                    self.stage.tag(),
                    stage.tag()
                ),
            });
        }
        Ok(())
    }

    pub fn optimizer_as<E: Element>(&self, cfg: OptimConfig) -> Option<OptimizerState<E>> {
        self.optimizer.as_ref().map(|o| {
            let cast = |m: &NamedTensors<f32>| -> NamedTensors<E> {
                m.iter()
                    .map(|(k, t)| (k.clone(), t.cast()))
                    .collect::<BTreeMap<_, _>>()
            };
            OptimizerState {
                m: cast(&o.m),
                v: cast(&o.v),
                step: o.step as usize,
                cfg,
            }
        })
    }
}
