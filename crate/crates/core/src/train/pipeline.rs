//! Per-sample preparation and the forward passes of both stages.
//!
//! Preparation draws are addressed by `(seed, stage, epoch, dataset index)`
//! rather than by call order, so batch composition and execution order never
//! change what a sample sees.

use crate::config::{CurriculumConfig, DenoiseComponents};
use crate::data::{
    augment, normalize_depth, patchify, sample_mask, MaskPattern, Modality, PatchTensor,
    RgbdSample,
};
use crate::error::Result;
use crate::losses::{
    add_noise, denoise_loss, depth_recon_loss, info_nce, stage2_loss, NoiseRecord,
};
use crate::model::decoder::{assemble_decoder_input, decode_predict};
use crate::model::embed::sigma_embedding;
use crate::model::encoder::{encode_patches, shared_encode};
use crate::model::BoundParams;
use crate::numerics::element::Element;
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use alloc::vec::Vec;

const STREAM_AUGMENT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_MASK_RGB: u64 = 3;
const STREAM_MASK_DEPTH: u64 = 4;

/// Patch count of a sample under the configured patch size.
pub fn grid_of(sample: &RgbdSample, patch: usize) -> (usize, usize) {
    (sample.height / patch, sample.width / patch)
}

/// Stage-1 inputs: full (unmasked) patch grids of both modalities.
pub struct Stage1Sample<E: Element> {
    pub rgb: PatchTensor<E>,
    pub depth: PatchTensor<E>,
}

/// Stage-2 inputs: augmented RGB patches, the (possibly noisy) depth encoder
/// input, normalized targets, the noise record, and both masks.
pub struct Stage2Sample<E: Element> {
    pub rgb: PatchTensor<E>,
    /// Depth encoder input, replicated to 3 channels; noisy unless the
    /// denoising ablation is `none`.
    pub depth_input: PatchTensor<E>,
    /// Per-patch-normalized clean depth, `(T, p*p)`: the reconstruction
    /// target.
    pub depth_target: Tensor<E>,
    /// Per-patch-normalized RGB target, built only when RGB reconstruction
    /// is enabled.
    pub rgb_target: Option<Tensor<E>>,
    pub noise: NoiseRecord<E>,
    pub rgb_mask: MaskPattern,
    pub depth_mask: MaskPattern,
    pub grid: (usize, usize),
}

fn to_elem_patches<E: Element>(p: &PatchTensor<f32>) -> PatchTensor<E> {
    PatchTensor::from_matrix(
        &p.as_matrix().cast(),
        p.patch_size,
        p.channels,
        p.grid,
        p.modality,
    )
    .expect("consistent layout")
}

/// Rng stream for one sample of one epoch of one stage.
pub fn sample_stream(run: &SeededRng, stage: u64, epoch: usize, index: usize) -> SeededRng {
    run.derive(stage)
        .derive(epoch as u64)
        .derive(index as u64)
}

pub fn prepare_stage1<E: Element>(
    sample: &RgbdSample,
    cfg: &CurriculumConfig,
    stream: &SeededRng,
) -> Result<Stage1Sample<E>> {
    let p = cfg.vit.patch;
    let mut aug_rng = stream.derive(STREAM_AUGMENT);
    let augmented = augment(sample, &mut aug_rng, &cfg.augment);
    let rgb = patchify(
        &augmented.rgb,
        sample.height,
        sample.width,
        3,
        p,
        Modality::Rgb,
    )?;
    let norm = normalize_depth(sample);
    let depth = patchify(&norm.depth, sample.height, sample.width, 1, p, Modality::Depth)?
        .replicate_channels(3);
    Ok(Stage1Sample {
        rgb: to_elem_patches(&rgb),
        depth: to_elem_patches(&depth),
    })
}

pub fn prepare_stage2<E: Element>(
    sample: &RgbdSample,
    cfg: &CurriculumConfig,
    stream: &SeededRng,
) -> Result<Stage2Sample<E>> {
    let p = cfg.vit.patch;
    let grid = grid_of(sample, p);
    let t = grid.0 * grid.1;

    let mut aug_rng = stream.derive(STREAM_AUGMENT);
    let augmented = augment(sample, &mut aug_rng, &cfg.augment);
    let rgb = to_elem_patches::<E>(&patchify(
        &augmented.rgb,
        sample.height,
        sample.width,
        3,
        p,
        Modality::Rgb,
    )?);

    let norm = normalize_depth(sample);
    let clean = to_elem_patches::<E>(&patchify(
        &norm.depth,
        sample.height,
        sample.width,
        1,
        p,
        Modality::Depth,
    )?);

    // The noise stream is always consumed so masks line up across the three
    // denoising ablation settings.
    let mut noise_rng = stream.derive(STREAM_NOISE);
    let (noisy, noise) = add_noise(&clean, cfg.weights.sigma_max, &mut noise_rng);
    let depth_input = match cfg.denoise {
        DenoiseComponents::None => clean.replicate_channels(3),
        _ => noisy.replicate_channels(3),
    };

    let (depth_target_patches, _) = crate::data::per_patch_normalize(&clean, 1e-6);
    let depth_target = depth_target_patches.as_matrix();

    let rgb_target = if cfg.rgb_reconstruction {
        let clean_rgb = to_elem_patches::<E>(&patchify(
            &sample.rgb,
            sample.height,
            sample.width,
            3,
            p,
            Modality::Rgb,
        )?);
        let (norm_rgb, _) = crate::data::per_patch_normalize(&clean_rgb, 1e-6);
        Some(norm_rgb.as_matrix())
    } else {
        None
    };

    let mut rgb_mask_rng = stream.derive(STREAM_MASK_RGB);
    let rgb_mask = sample_mask(t, cfg.mask_ratio_rgb, &mut rgb_mask_rng)?;
    let mut depth_mask_rng = stream.derive(STREAM_MASK_DEPTH);
    let depth_mask = sample_mask(t, cfg.mask_ratio_depth, &mut depth_mask_rng)?;

    Ok(Stage2Sample {
        rgb,
        depth_input,
        depth_target,
        rgb_target,
        noise,
        rgb_mask,
        depth_mask,
        grid,
    })
}

/// Stage-1 forward: shared encoder, symmetric InfoNCE.
pub fn stage1_forward<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    prep: &Stage1Sample<E>,
    cfg: &CurriculumConfig,
) -> Result<Var> {
    let (z_rgb, z_depth) = shared_encode(tape, bound, &prep.rgb, &prep.depth, &cfg.vit)?;
    info_nce(tape, z_rgb, z_depth, cfg.weights.tau)
}

/// The stage-2 loss terms of one sample.
pub struct Stage2Terms {
    pub total: Var,
    pub depth: Var,
    pub denoise: Option<Var>,
    pub rgb: Option<Var>,
}

/// Stage-2 forward: modality encoders over visible tokens, noise-conditioned
/// decoding, masked reconstruction plus optional noise prediction.
pub fn stage2_forward<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    prep: &Stage2Sample<E>,
    cfg: &CurriculumConfig,
) -> Result<Stage2Terms> {
    let rgb_latents = encode_patches(tape, bound, &prep.rgb, &prep.rgb_mask, &cfg.vit, "enc.rgb")?;
    let depth_latents = encode_patches(
        tape,
        bound,
        &prep.depth_input,
        &prep.depth_mask,
        &cfg.vit,
        "enc.depth",
    )?;
    stage2_decode_losses(tape, bound, prep, cfg, rgb_latents, depth_latents)
}

/// Decoder and loss assembly given already-encoded visible latents.
fn stage2_decode_losses<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    prep: &Stage2Sample<E>,
    cfg: &CurriculumConfig,
    rgb_latents: Var,
    depth_latents: Var,
) -> Result<Stage2Terms> {
    let sigma_vec = match cfg.denoise {
        DenoiseComponents::Full => Some(sigma_embedding(tape, bound, prep.noise.sigma)?),
        _ => None,
    };

    let (seq, layout) = assemble_decoder_input(
        tape,
        bound,
        rgb_latents,
        depth_latents,
        sigma_vec,
        &prep.rgb_mask,
        &prep.depth_mask,
        &cfg.vit,
        prep.grid,
        cfg.rgb_reconstruction,
    )?;
    let preds = decode_predict(tape, bound, seq, &layout, &cfg.vit)?;

    let target = tape.constant(prep.depth_target.clone());
    let depth_term = depth_recon_loss(tape, preds.depth, target, &prep.depth_mask)?;

    let denoise_term = match cfg.denoise {
        DenoiseComponents::Full => Some(denoise_loss(
            tape,
            preds.depth,
            &prep.noise,
            &prep.depth_mask,
        )?),
        _ => None,
    };

    let rgb_term = match (&preds.rgb, &prep.rgb_target) {
        (Some(pred), Some(target)) => {
            let t = tape.constant(target.clone());
            Some(depth_recon_loss(tape, *pred, t, &prep.rgb_mask)?)
        }
        _ => None,
    };

    let total = stage2_loss(tape, depth_term, denoise_term, rgb_term, &cfg.weights)?;
    Ok(Stage2Terms {
        total,
        depth: depth_term,
        denoise: denoise_term,
        rgb: rgb_term,
    })
}

/// Joint-objective forward: the stage-2 pass plus a contrastive term over
/// the patches visible in both modalities. With high masking the
/// intersection is small, which is exactly what makes this composition a
/// weak baseline.
pub fn joint_forward<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    prep: &Stage2Sample<E>,
    cfg: &CurriculumConfig,
) -> Result<(Var, Stage2Terms)> {
    let rgb_latents = encode_patches(tape, bound, &prep.rgb, &prep.rgb_mask, &cfg.vit, "enc.rgb")?;
    let depth_latents = encode_patches(
        tape,
        bound,
        &prep.depth_input,
        &prep.depth_mask,
        &cfg.vit,
        "enc.depth",
    )?;
    let rgb_visible = prep.rgb_mask.visible_indices();
    let depth_visible = prep.depth_mask.visible_indices();
    let both: Vec<usize> = rgb_visible
        .iter()
        .copied()
        .filter(|i| prep.depth_mask.is_visible(*i))
        .collect();

    let terms = stage2_decode_losses(tape, bound, prep, cfg, rgb_latents, depth_latents)?;
    if both.is_empty() {
        return Ok((terms.total, terms));
    }

    let row_in = |set: &[usize], patch: usize| set.iter().position(|&p| p == patch).unwrap();
    let rgb_rows: Vec<usize> = both.iter().map(|&p| row_in(&rgb_visible, p)).collect();
    let depth_rows: Vec<usize> = both.iter().map(|&p| row_in(&depth_visible, p)).collect();
    let z_rgb = tape.index_select(rgb_latents, 0, rgb_rows)?;
    let z_depth = tape.index_select(depth_latents, 0, depth_rows)?;
    let z_rgb = tape.l2_normalize(z_rgb, 1)?;
    let z_depth = tape.l2_normalize(z_depth, 1)?;
    let pnce = info_nce(tape, z_rgb, z_depth, cfg.weights.tau)?;
    let total = tape.add(terms.total, pnce)?;
    Ok((
        total,
        Stage2Terms {
            total,
            depth: terms.depth,
            denoise: terms.denoise,
            rgb: terms.rgb,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, SceneConfig};
    use crate::model::{init_stage2_params, BoundParams};
    use crate::numerics::gradcheck::NamedTensors;

    fn tiny_config() -> CurriculumConfig {
        let mut cfg = CurriculumConfig::default();
        cfg.vit = crate::model::ViTConfig::gradcheck_tiny();
        cfg.scene = SceneConfig {
            height: 8,
            width: 8,
            ..SceneConfig::default()
        };
        cfg.scene.patch = 4;
        cfg
    }

    #[test]
    fn preparation_is_deterministic_and_order_free() {
        let cfg = tiny_config();
        let ds = Dataset::generate(&cfg.scene, 3, 5).unwrap();
        let run = SeededRng::new(cfg.seed, 0xf00d);
        let s = sample_stream(&run, 2, 0, 1);
        let a: Stage2Sample<f32> = prepare_stage2(&ds.samples[1], &cfg, &s).unwrap();
        let b: Stage2Sample<f32> = prepare_stage2(&ds.samples[1], &cfg, &s).unwrap();
        assert_eq!(a.depth_input, b.depth_input);
        assert_eq!(a.rgb_mask, b.rgb_mask);
        assert_eq!(a.noise.sigma, b.noise.sigma);
    }

    #[test]
    fn denoise_none_uses_clean_input() {
        let mut cfg = tiny_config();
        cfg.denoise = DenoiseComponents::None;
        let ds = Dataset::generate(&cfg.scene, 1, 5).unwrap();
        let run = SeededRng::new(0, 0xf00d);
        let s = sample_stream(&run, 2, 0, 0);
        let prep: Stage2Sample<f64> = prepare_stage2(&ds.samples[0], &cfg, &s).unwrap();
        // Clean input means the encoder sees exactly the normalized depth.
        let norm = normalize_depth(&ds.samples[0]);
        let clean = patchify(&norm.depth, 8, 8, 1, 4, Modality::Depth)
            .unwrap()
            .replicate_channels(3);
        for (a, b) in prep.depth_input.data().iter().zip(clean.data()) {
            assert!((a - *b as f64).abs() < 1e-7);
        }
        // Masks still line up with the noisy variants.
        cfg.denoise = DenoiseComponents::Full;
        let full: Stage2Sample<f64> = prepare_stage2(&ds.samples[0], &cfg, &s).unwrap();
        assert_eq!(prep.rgb_mask, full.rgb_mask);
        assert_eq!(prep.depth_mask, full.depth_mask);
    }

    #[test]
    fn stage2_terms_combine_with_weights() {
        let cfg = tiny_config();
        let ds = Dataset::generate(&cfg.scene, 1, 9).unwrap();
        let run = SeededRng::new(0, 0xf00d);
        let s = sample_stream(&run, 2, 0, 0);
        let prep: Stage2Sample<f64> = prepare_stage2(&ds.samples[0], &cfg, &s).unwrap();
        let params: NamedTensors<f64> =
            init_stage2_params(&cfg.vit, &mut SeededRng::new(1, 2), false).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &mut tape, false);
        let terms = stage2_forward(&mut tape, &bound, &prep, &cfg).unwrap();
        let depth = tape.value(terms.depth).scalar_value().unwrap();
        let denoise = tape.value(terms.denoise.unwrap()).scalar_value().unwrap();
        let total = tape.value(terms.total).scalar_value().unwrap();
        let expect = cfg.weights.alpha * depth + cfg.weights.beta * denoise;
        assert!((total - expect).abs() < 1e-12);
    }
}
