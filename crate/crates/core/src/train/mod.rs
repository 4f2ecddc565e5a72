//! Two-stage training orchestration: batching, the stage loops, the
//! stage-1 to stage-2 weight transfer, and per-step loss traces.
//!
//! Every random draw is addressed by `(seed, stage, epoch, sample index)`,
//! gradients reduce over the batch in index order, and parameter maps are
//! ordered, so a whole run is a pure function of `(config, dataset)`.

pub mod checkpoint;
pub mod optim;
mod par;
pub mod pipeline;

use crate::config::{CurriculumConfig, OrderingVariant};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{init_stage1_params, init_stage2_params, BoundParams};
use crate::numerics::element::Element;
use crate::numerics::gradcheck::NamedTensors;
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use checkpoint::{Checkpoint, StageTag};
use optim::{adamw_step, lr_at, OptimizerState, ScheduleConfig};
use pipeline::{
    joint_forward, prepare_stage1, prepare_stage2, sample_stream, stage1_forward, stage2_forward,
};

const STREAM_RUN: u64 = 0x7e_a1;
const STREAM_INIT_STAGE1: u64 = 0x01;
const STREAM_INIT_STAGE2: u64 = 0x02;
const STREAM_SHUFFLE: u64 = 0x03;
const STAGE1: u64 = 1;
const STAGE2: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_pnce: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_depth: f64,
    pub loss_denoise: f64,
    pub loss_total: f64,
}

fn run_rng(cfg: &CurriculumConfig) -> SeededRng {
    SeededRng::new(cfg.seed, STREAM_RUN)
}

/// Fixed-size batches over a shuffled copy of the train indices; the last
/// partial batch is dropped. The effective batch never exceeds the split.
fn epoch_batches(
    train: &[usize],
    batch_size: usize,
    run: &SeededRng,
    stage: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut indices = train.to_vec();
    let mut rng = run.derive(STREAM_SHUFFLE).derive(stage).derive(epoch as u64);
    rng.shuffle(&mut indices);
    let batch = batch_size.min(indices.len()).max(1);
    indices
        .chunks_exact(batch)
        .map(|c| c.to_vec())
        .collect()
}

fn accumulate<E: Element>(total: &mut NamedTensors<E>, part: &NamedTensors<E>) {
    for (name, sum) in total.iter_mut() {
        let p = &part[name];
        let data: Vec<E> = sum
            .data()
            .iter()
            .zip(p.data())
            .map(|(&a, &b)| a + b)
            .collect();
        *sum = Tensor::new(sum.shape().to_vec(), data).expect("consistent");
    }
}

fn scale<E: Element>(grads: &mut NamedTensors<E>, factor: f64) {
    let f = E::from_f64(factor);
    for tensor in grads.values_mut() {
        *tensor = tensor.map(|v| v * f);
    }
}

fn zeros_like<E: Element>(params: &NamedTensors<E>) -> NamedTensors<E> {
    params
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
        .collect()
}

/// Map a mid-step numeric failure onto a divergence error carrying the step.
fn diverged(step: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { step },
        other => other,
    }
}

struct BatchOutcome<E: Element> {
    grads: NamedTensors<E>,
    values: Vec<f64>,
}

/// Forward/backward every sample of a batch on its own tape and average; the
/// per-sample work may run in parallel, the reduction is index-ordered.
fn batch_grads<E, F>(
    params: &NamedTensors<E>,
    batch: &[usize],
    per_sample: F,
) -> Result<BatchOutcome<E>>
where
    E: Element,
    F: Fn(usize) -> Result<(NamedTensors<E>, Vec<f64>)> + Sync,
{
    let results = par::map_ordered(batch, |&idx| per_sample(idx));
    let mut grads = zeros_like(params);
    let mut values: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for result in results {
        let (g, v) = result?;
        accumulate(&mut grads, &g);
        if values.is_empty() {
            values = v;
        } else {
            for (acc, x) in values.iter_mut().zip(v) {
                *acc += x;
            }
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    scale(&mut grads, inv);
    for v in &mut values {
        *v *= inv;
    }
    Ok(BatchOutcome { grads, values })
}

/// Outcome of a pre-training stage.
pub struct TrainedStage<E: Element> {
    pub params: NamedTensors<E>,
    pub checkpoint: Checkpoint,
    pub steps: u64,
}

/// Stage 1: contrastive pre-training of the shared encoder.
pub fn train_stage1<E: Element>(
    cfg: &CurriculumConfig,
    dataset: &Dataset,
) -> Result<(TrainedStage<E>, Vec<Stage1TraceRow>)> {
    cfg.validate()?;
    let train = dataset.indices(crate::data::Split::Train);
    if train.is_empty() {
        return Err(Error::contract("empty train split"));
    }
    let run = run_rng(cfg);
    let mut init_rng = run.derive(STREAM_INIT_STAGE1);
    let mut params: NamedTensors<E> = init_stage1_params(&cfg.vit, &mut init_rng)?;
    let mut opt = OptimizerState::new(&params, cfg.optim.clone());

    let steps_per_epoch = epoch_batches(&train, cfg.batch_size, &run, STAGE1, 0).len();
    let schedule = ScheduleConfig {
        base_lr: cfg.schedule.base_lr,
        total_steps: cfg.stage1_epochs * steps_per_epoch,
        warmup_steps: cfg.schedule.warmup_epochs * steps_per_epoch,
        warmup_start_lr: cfg.schedule.warmup_start_lr,
    };

    let mut trace = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.stage1_epochs {
        for batch in epoch_batches(&train, cfg.batch_size, &run, STAGE1, epoch) {
            let lr = lr_at(step, &schedule)?;
            let outcome = if cfg.cross_batch_negatives {
                stage1_cross_batch(&params, cfg, dataset, &run, epoch, &batch)
            } else {
                let params_ref = &params;
                batch_grads(&params, &batch, |idx| {
                    let stream = sample_stream(&run, STAGE1, epoch, idx);
                    let prep = prepare_stage1::<E>(&dataset.samples[idx], cfg, &stream)?;
                    let mut tape = Tape::new();
                    let bound = BoundParams::bind(params_ref, &mut tape, true);
                    let loss = stage1_forward(&mut tape, &bound, &prep, cfg)?;
                    tape.backward(loss)?;
                    let value = tape.value(loss).scalar_value()?.to_f64();
                    Ok((bound.gradients(&tape), alloc::vec![value]))
                })
            }
            .map_err(diverged(step))?;
            let loss = outcome.values[0];
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            adamw_step(&mut params, &outcome.grads, &mut opt, lr).map_err(diverged(step))?;
            trace.push(Stage1TraceRow {
                step,
                epoch,
                lr,
                loss_pnce: loss,
            });
            step += 1;
        }
    }

    let checkpoint = Checkpoint::new(
        StageTag::Stage1,
        cfg.fingerprint(),
        &params,
        Some(&opt),
        run.state_words(),
        step as u64,
    );
    Ok((
        TrainedStage {
            params,
            checkpoint,
            steps: step as u64,
        },
        trace,
    ))
}

/// Cross-batch negative pool: all patches of the batch share one similarity
/// matrix. One tape covers the whole batch; gradients come back already
/// summed, so they are rescaled to match the per-sample averaging
/// convention.
fn stage1_cross_batch<E: Element>(
    params: &NamedTensors<E>,
    cfg: &CurriculumConfig,
    dataset: &Dataset,
    run: &SeededRng,
    epoch: usize,
    batch: &[usize],
) -> Result<BatchOutcome<E>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(params, &mut tape, true);
    let mut rgb_parts = Vec::new();
    let mut depth_parts = Vec::new();
    for &idx in batch {
        let stream = sample_stream(run, STAGE1, epoch, idx);
        let prep = prepare_stage1::<E>(&dataset.samples[idx], cfg, &stream)?;
        let (z_rgb, z_depth) =
            crate::model::encoder::shared_encode(&mut tape, &bound, &prep.rgb, &prep.depth, &cfg.vit)?;
        rgb_parts.push(z_rgb);
        depth_parts.push(z_depth);
    }
    let z_rgb = tape.concat(&rgb_parts, 0)?;
    let z_depth = tape.concat(&depth_parts, 0)?;
    let loss = crate::losses::info_nce(&mut tape, z_rgb, z_depth, cfg.weights.tau)?;
    tape.backward(loss)?;
    let value = tape.value(loss).scalar_value()?.to_f64();
    // The pooled loss already averages over all patches of the batch; its
    // gradient is the batch gradient, no per-sample averaging applies.
    Ok(BatchOutcome {
        grads: bound.gradients(&tape),
        values: alloc::vec![value],
    })
}

/// Copy the stage-1 shared encoder into both modality-specific encoders and
/// carry the modality embeddings over; decoder, heads, mask token, and the
/// sigma MLP are freshly initialized.
pub fn init_stage2_from_stage1(
    ckpt: &Checkpoint,
    cfg: &CurriculumConfig,
) -> Result<NamedTensors<f32>> {
    ckpt.expect_stage(StageTag::Stage1)?;
    let run = run_rng(cfg);
    let mut init_rng = run.derive(STREAM_INIT_STAGE2);
    let mut params: NamedTensors<f32> =
        init_stage2_params(&cfg.vit, &mut init_rng, cfg.rgb_reconstruction)?;
    transfer_encoder(&ckpt.params, "enc.shared", &mut params, &["enc.rgb", "enc.depth"])?;
    for name in ["embed.modality.rgb", "embed.modality.depth"] {
        copy_tensor(&ckpt.params, name, &mut params, name)?;
    }
    Ok(params)
}

/// For the reversed curriculum: seed the stage-1 shared encoder from a
/// stage-2 checkpoint's RGB encoder (the encoder the probes consume).
pub fn init_stage1_from_stage2(
    ckpt: &Checkpoint,
    cfg: &CurriculumConfig,
) -> Result<NamedTensors<f32>> {
    ckpt.expect_stage(StageTag::Stage2)?;
    let run = run_rng(cfg);
    let mut init_rng = run.derive(STREAM_INIT_STAGE1);
    let mut params: NamedTensors<f32> = init_stage1_params(&cfg.vit, &mut init_rng)?;
    transfer_encoder(&ckpt.params, "enc.rgb", &mut params, &["enc.shared"])?;
    for name in ["embed.modality.rgb", "embed.modality.depth"] {
        copy_tensor(&ckpt.params, name, &mut params, name)?;
    }
    Ok(params)
}

fn transfer_encoder(
    src: &NamedTensors<f32>,
    src_prefix: &str,
    dst: &mut NamedTensors<f32>,
    dst_prefixes: &[&str],
) -> Result<()> {
    let mut copied = 0usize;
    let keys: Vec<String> = src
        .keys()
        .filter(|k| k.starts_with(src_prefix))
        .cloned()
        .collect();
    if keys.is_empty() {
        return Err(Error::Version {
            what: format!("checkpoint has no `{src_prefix}` tree"),
        });
    }
    for key in keys {
        let suffix = &key[src_prefix.len()..];
        for dst_prefix in dst_prefixes {
            let target = format!("{dst_prefix}{suffix}");
            copy_tensor(src, &key, dst, &target)?;
            copied += 1;
        }
    }
    debug_assert!(copied > 0);
    Ok(())
}

fn copy_tensor(
    src: &NamedTensors<f32>,
    src_key: &str,
    dst: &mut NamedTensors<f32>,
    dst_key: &str,
) -> Result<()> {
    let value = src
        .get(src_key)
        .ok_or_else(|| Error::Version {
            what: format!("checkpoint is missing `{src_key}`"),
        })?
        .clone();
    match dst.get(dst_key) {
        Some(existing) if existing.shape() == value.shape() => {
            dst.insert(dst_key.into(), value);
            Ok(())
        }
        Some(existing) => Err(Error::Version {
            what: format!(
                "shape mismatch for `{dst_key}`: checkpoint {:?} vs model {:?}",
                value.shape(),
                existing.shape()
            ),
        }),
        None => Err(Error::Version {
            what: format!("model has no parameter `{dst_key}`"),
        }),
    }
}

/// Stage 2: masked reconstruction plus denoising from the given
/// initialization (transferred or random).
pub fn train_stage2<E: Element>(
    cfg: &CurriculumConfig,
    dataset: &Dataset,
    init: NamedTensors<E>,
) -> Result<(TrainedStage<E>, Vec<Stage2TraceRow>)> {
    train_two_encoder_stage(cfg, dataset, init, false, cfg.stage2_epochs)
}

/// The single-framework composition: stage-2 architecture with the
/// contrastive term added on visible tokens, run for the combined epoch
/// budget.
pub fn train_joint<E: Element>(
    cfg: &CurriculumConfig,
    dataset: &Dataset,
) -> Result<(TrainedStage<E>, Vec<Stage2TraceRow>)> {
    let run = run_rng(cfg);
    let mut init_rng = run.derive(STREAM_INIT_STAGE2);
    let init: NamedTensors<E> = init_stage2_params(&cfg.vit, &mut init_rng, cfg.rgb_reconstruction)?;
    train_two_encoder_stage(cfg, dataset, init, true, cfg.stage1_epochs + cfg.stage2_epochs)
}

fn train_two_encoder_stage<E: Element>(
    cfg: &CurriculumConfig,
    dataset: &Dataset,
    mut params: NamedTensors<E>,
    joint: bool,
    epochs: usize,
) -> Result<(TrainedStage<E>, Vec<Stage2TraceRow>)> {
    cfg.validate()?;
    let train = dataset.indices(crate::data::Split::Train);
    if train.is_empty() {
        return Err(Error::contract("empty train split"));
    }
    let run = run_rng(cfg);
    let mut opt = OptimizerState::new(&params, cfg.optim.clone());
    let steps_per_epoch = epoch_batches(&train, cfg.batch_size, &run, STAGE2, 0).len();
    let schedule = ScheduleConfig {
        base_lr: cfg.schedule.base_lr,
        total_steps: epochs * steps_per_epoch,
        warmup_steps: cfg.schedule.warmup_epochs * steps_per_epoch,
        warmup_start_lr: cfg.schedule.warmup_start_lr,
    };

    let mut trace = Vec::new();
    let mut step = 0usize;
    for epoch in 0..epochs {
        for batch in epoch_batches(&train, cfg.batch_size, &run, STAGE2, epoch) {
            let lr = lr_at(step, &schedule)?;
            let params_ref = &params;
            let outcome = batch_grads(&params, &batch, |idx| {
                let stream = sample_stream(&run, STAGE2, epoch, idx);
                let prep = prepare_stage2::<E>(&dataset.samples[idx], cfg, &stream)?;
                let mut tape = Tape::new();
                let bound = BoundParams::bind(params_ref, &mut tape, true);
                let (loss, terms) = if joint {
                    joint_forward(&mut tape, &bound, &prep, cfg)?
                } else {
                    let terms = stage2_forward(&mut tape, &bound, &prep, cfg)?;
                    (terms.total, terms)
                };
                tape.backward(loss)?;
                let depth = tape.value(terms.depth).scalar_value()?.to_f64();
                let denoise = terms
                    .denoise
                    .map(|v| tape.value(v).scalar_value().map(|x| x.to_f64()))
                    .transpose()?
                    .unwrap_or(0.0);
                let total = tape.value(loss).scalar_value()?.to_f64();
                Ok((bound.gradients(&tape), alloc::vec![depth, denoise, total]))
            })
            .map_err(diverged(step))?;
            let [depth, denoise, total] = outcome.values[..] else {
                return Err(Error::internal("stage-2 trace arity"));
            };
            if !total.is_finite() {
                return Err(Error::Diverged { step });
            }
            adamw_step(&mut params, &outcome.grads, &mut opt, lr).map_err(diverged(step))?;
            trace.push(Stage2TraceRow {
                step,
                epoch,
                lr,
                loss_depth: depth,
                loss_denoise: denoise,
                loss_total: total,
            });
            step += 1;
        }
    }

    let checkpoint = Checkpoint::new(
        StageTag::Stage2,
        cfg.fingerprint(),
        &params,
        Some(&opt),
        run.state_words(),
        step as u64,
    );
    Ok((
        TrainedStage {
            params,
            checkpoint,
            steps: step as u64,
        },
        trace,
    ))
}

/// Run the configured ordering end to end, returning the final checkpoint
/// whose RGB path the probes consume, plus both traces where they exist.
pub struct CurriculumOutcome {
    pub final_checkpoint: Checkpoint,
    pub stage1_trace: Vec<Stage1TraceRow>,
    pub stage2_trace: Vec<Stage2TraceRow>,
}

pub fn run_curriculum(cfg: &CurriculumConfig, dataset: &Dataset) -> Result<CurriculumOutcome> {
    match cfg.ordering {
        OrderingVariant::ContrastiveThenMim => {
            let (stage1, trace1) = train_stage1::<f32>(cfg, dataset)?;
            let init = init_stage2_from_stage1(&stage1.checkpoint, cfg)?;
            let (stage2, trace2) = train_stage2::<f32>(cfg, dataset, init)?;
            Ok(CurriculumOutcome {
                final_checkpoint: stage2.checkpoint,
                stage1_trace: trace1,
                stage2_trace: trace2,
            })
        }
        OrderingVariant::MimThenContrastive => {
            let run = run_rng(cfg);
            let mut init_rng = run.derive(STREAM_INIT_STAGE2);
            let init: NamedTensors<f32> =
                init_stage2_params(&cfg.vit, &mut init_rng, cfg.rgb_reconstruction)?;
            let (stage2, trace2) = train_stage2::<f32>(cfg, dataset, init)?;
            let seeded = init_stage1_from_stage2(&stage2.checkpoint, cfg)?;
            let (stage1, trace1) = continue_stage1(cfg, dataset, seeded)?;
            Ok(CurriculumOutcome {
                final_checkpoint: stage1.checkpoint,
                stage1_trace: trace1,
                stage2_trace: trace2,
            })
        }
        OrderingVariant::Joint => {
            let (joint, trace2) = train_joint::<f32>(cfg, dataset)?;
            Ok(CurriculumOutcome {
                final_checkpoint: joint.checkpoint,
                stage1_trace: Vec::new(),
                stage2_trace: trace2,
            })
        }
    }
}

/// Stage-1 training from explicit initial parameters (used by the reversed
/// ordering).
fn continue_stage1(
    cfg: &CurriculumConfig,
    dataset: &Dataset,
    mut params: NamedTensors<f32>,
) -> Result<(TrainedStage<f32>, Vec<Stage1TraceRow>)> {
    cfg.validate()?;
    let train = dataset.indices(crate::data::Split::Train);
    if train.is_empty() {
        return Err(Error::contract("empty train split"));
    }
    let run = run_rng(cfg);
    let mut opt = OptimizerState::new(&params, cfg.optim.clone());
    let steps_per_epoch = epoch_batches(&train, cfg.batch_size, &run, STAGE1, 0).len();
    let schedule = ScheduleConfig {
        base_lr: cfg.schedule.base_lr,
        total_steps: cfg.stage1_epochs * steps_per_epoch,
        warmup_steps: cfg.schedule.warmup_epochs * steps_per_epoch,
        warmup_start_lr: cfg.schedule.warmup_start_lr,
    };
    let mut trace = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.stage1_epochs {
        for batch in epoch_batches(&train, cfg.batch_size, &run, STAGE1, epoch) {
            let lr = lr_at(step, &schedule)?;
            let params_ref = &params;
            let outcome = batch_grads(&params, &batch, |idx| {
                let stream = sample_stream(&run, STAGE1, epoch, idx);
                let prep = prepare_stage1::<f32>(&dataset.samples[idx], cfg, &stream)?;
                let mut tape = Tape::new();
                let bound = BoundParams::bind(params_ref, &mut tape, true);
                let loss = stage1_forward(&mut tape, &bound, &prep, cfg)?;
                tape.backward(loss)?;
                let value = tape.value(loss).scalar_value()?.to_f64();
                Ok((bound.gradients(&tape), alloc::vec![value]))
            })
            .map_err(diverged(step))?;
            adamw_step(&mut params, &outcome.grads, &mut opt, lr).map_err(diverged(step))?;
            trace.push(Stage1TraceRow {
                step,
                epoch,
                lr,
                loss_pnce: outcome.values[0],
            });
            step += 1;
        }
    }
    let checkpoint = Checkpoint::new(
        StageTag::Stage1,
        cfg.fingerprint(),
        &params,
        Some(&opt),
        run.state_words(),
        step as u64,
    );
    Ok((
        TrainedStage {
            params,
            checkpoint,
            steps: step as u64,
        },
        trace,
    ))
}
