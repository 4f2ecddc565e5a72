//! Pre-norm ViT blocks over visible tokens, and the stage-1 shared encode
//! path that emits l2-normalized per-patch embeddings for the contrastive
//! loss.

use crate::data::{MaskPattern, PatchTensor};
use crate::error::{Error, Result};
use crate::model::embed::patch_embed;
use crate::model::{linear, BoundParams, ViTConfig};
use crate::numerics::element::Element;
use crate::numerics::tape::{Tape, Var};
use alloc::format;
use alloc::vec::Vec;

/// Multi-head self-attention, heads realized by column slices of the fused
/// projections.
fn attention<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    x: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let (_, dim) = tape.value(x).dims2()?;
    let head_dim = dim / heads;
    let q = {
        let w = bound.get(&format!("{prefix}.wq.w"))?;
        let b = bound.get(&format!("{prefix}.wq.b"))?;
        linear(tape, x, w, b)?
    };
    let k = {
        let w = bound.get(&format!("{prefix}.wk.w"))?;
        let b = bound.get(&format!("{prefix}.wk.b"))?;
        linear(tape, x, w, b)?
    };
    let v = {
        let w = bound.get(&format!("{prefix}.wv.w"))?;
        let b = bound.get(&format!("{prefix}.wv.b"))?;
        linear(tape, x, w, b)?
    };

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols: Vec<usize> = (h * head_dim..(h + 1) * head_dim).collect();
        let qh = tape.index_select(q, 1, cols.clone())?;
        let kh = tape.index_select(k, 1, cols.clone())?;
        let vh = tape.index_select(v, 1, cols)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let scaled = tape.mul_scalar(logits, scale)?;
        let attn = tape.softmax(scaled, 1)?;
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat(&head_outputs, 1)?;
    let w = bound.get(&format!("{prefix}.wo.w"))?;
    let b = bound.get(&format!("{prefix}.wo.b"))?;
    linear(tape, merged, w, b)
}

fn mlp<E: Element>(tape: &mut Tape<E>, bound: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
    let w1 = bound.get(&format!("{prefix}.fc1.w"))?;
    let b1 = bound.get(&format!("{prefix}.fc1.b"))?;
    let w2 = bound.get(&format!("{prefix}.fc2.w"))?;
    let b2 = bound.get(&format!("{prefix}.fc2.b"))?;
    let h = linear(tape, x, w1, b1)?;
    let h = tape.gelu(h)?;
    linear(tape, h, w2, b2)
}

const LN_EPS: f64 = 1e-6;

/// One pre-norm transformer block: residual attention, residual MLP.
pub fn transformer_block<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    x: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let g1 = bound.get(&format!("{prefix}.ln1.g"))?;
    let b1 = bound.get(&format!("{prefix}.ln1.b"))?;
    let normed = tape.layer_norm(x, g1, b1, LN_EPS)?;
    let attn = attention(tape, bound, normed, &format!("{prefix}.attn"), heads)?;
    let x = tape.add(x, attn)?;

    let g2 = bound.get(&format!("{prefix}.ln2.g"))?;
    let b2 = bound.get(&format!("{prefix}.ln2.b"))?;
    let normed = tape.layer_norm(x, g2, b2, LN_EPS)?;
    let ff = mlp(tape, bound, normed, &format!("{prefix}.mlp"))?;
    tape.add(x, ff)
}

/// Run embedded tokens through an encoder stack with a final layer norm.
pub fn run_blocks<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    mut x: Var,
    prefix: &str,
    blocks: usize,
    heads: usize,
) -> Result<Var> {
    for blk in 0..blocks {
        x = transformer_block(tape, bound, x, &format!("{prefix}.blk{blk}"), heads)?;
    }
    let g = bound.get(&format!("{prefix}.norm.g"))?;
    let b = bound.get(&format!("{prefix}.norm.b"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Encode only the visible tokens of an embedded `(T, d)` sequence. Masked
/// patch contents never enter the blocks.
pub fn encode_visible<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    tokens: Var,
    mask: &MaskPattern,
    cfg: &ViTConfig,
    encoder_prefix: &str,
) -> Result<Var> {
    let (t, _) = tape.value(tokens).dims2()?;
    if t != mask.len() {
        return Err(Error::contract(format!(
            "token count {t} vs mask length {}",
            mask.len()
        )));
    }
    let visible = mask.visible_indices();
    if visible.is_empty() {
        return Err(Error::contract("encode requires at least one visible token"));
    }
    let selected = tape.index_select(tokens, 0, visible)?;
    run_blocks(tape, bound, selected, encoder_prefix, cfg.enc_blocks, cfg.enc_heads)
}

/// Embed and encode one modality end to end.
pub fn encode_patches<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    patches: &PatchTensor<E>,
    mask: &MaskPattern,
    cfg: &ViTConfig,
    encoder_prefix: &str,
) -> Result<Var> {
    let tokens = patch_embed(tape, bound, patches, encoder_prefix)?;
    encode_visible(tape, bound, tokens, mask, cfg, encoder_prefix)
}

/// Stage-1 path: both modalities through the one shared encoder on the full
/// patch grid, outputs l2-normalized per patch.
pub fn shared_encode<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    rgb: &PatchTensor<E>,
    depth: &PatchTensor<E>,
    cfg: &ViTConfig,
) -> Result<(Var, Var)> {
    let full = MaskPattern::all_visible(rgb.patches);
    let z_rgb = encode_patches(tape, bound, rgb, &full, cfg, "enc.shared")?;
    let z_depth = encode_patches(tape, bound, depth, &full, cfg, "enc.shared")?;
    let z_rgb = tape.l2_normalize(z_rgb, 1)?;
    let z_depth = tape.l2_normalize(z_depth, 1)?;
    Ok((z_rgb, z_depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{patchify, Modality};
    use crate::model::{init_stage1_params, init_stage2_params};
    use crate::numerics::gradcheck::NamedTensors;
    use crate::numerics::rng::{sample_gaussian, SeededRng};
    use crate::numerics::tensor::Tensor;
    use alloc::vec;

    fn tiny_cfg() -> ViTConfig {
        ViTConfig::gradcheck_tiny()
    }

    fn random_patches(rng: &mut SeededRng, modality: Modality) -> PatchTensor<f64> {
        // 8x8 image, p=4 -> T=4 patches, 3 channels.
        let image: Tensor<f64> = sample_gaussian(rng, &[8 * 8 * 3]);
        patchify(image.data(), 8, 8, 3, 4, modality).unwrap()
    }

    #[test]
    fn encode_output_length_is_visible_count() {
        let cfg = tiny_cfg();
        let mut rng = SeededRng::new(1, 0);
        let params: NamedTensors<f64> = init_stage2_params(&cfg, &mut rng, false).unwrap();
        let patches = random_patches(&mut rng, Modality::Rgb);
        let mask = crate::data::sample_mask(4, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &mut tape, false);
        let z = encode_patches(&mut tape, &bound, &patches, &mask, &cfg, "enc.rgb").unwrap();
        assert_eq!(
            tape.value(z).shape(),
            &[mask.visible_count(), cfg.enc_dim]
        );
    }

    #[test]
    fn masked_patch_contents_do_not_affect_visible_outputs() {
        let cfg = tiny_cfg();
        let mut rng = SeededRng::new(2, 0);
        let params: NamedTensors<f64> = init_stage2_params(&cfg, &mut rng, false).unwrap();
        let patches = random_patches(&mut rng, Modality::Depth);
        let mask = crate::data::sample_mask(4, 0.5, &mut rng).unwrap();

        let run = |p: &PatchTensor<f64>| {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&params, &mut tape, false);
            let z = encode_patches(&mut tape, &bound, p, &mask, &cfg, "enc.depth").unwrap();
            tape.value(z).clone()
        };
        let base = run(&patches);

        // Overwrite a masked patch and re-encode.
        let masked_idx = mask.masked_indices()[0];
        let mut data = patches.as_matrix().into_data();
        let len = patches.patch_len();
        for v in &mut data[masked_idx * len..(masked_idx + 1) * len] {
            *v = 99.0;
        }
        let m = Tensor::new(vec![4, len], data).unwrap();
        let corrupted =
            PatchTensor::from_matrix(&m, 4, 3, patches.grid, Modality::Depth).unwrap();
        assert_eq!(base, run(&corrupted));
    }

    #[test]
    fn permuting_embedded_tokens_permutes_outputs() {
        let cfg = tiny_cfg();
        let mut rng = SeededRng::new(3, 0);
        let params: NamedTensors<f64> = init_stage1_params(&cfg, &mut rng).unwrap();
        let tokens: Tensor<f64> = sample_gaussian(&mut rng, &[4, cfg.enc_dim]);
        let perm = [2usize, 0, 3, 1];

        let run = |input: Tensor<f64>| {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&params, &mut tape, false);
            let x = tape.constant(input);
            let z = run_blocks(&mut tape, &bound, x, "enc.shared", cfg.enc_blocks, cfg.enc_heads)
                .unwrap();
            tape.value(z).clone()
        };

        let base = run(tokens.clone());
        let permuted_input = {
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(tokens.row(i).unwrap());
            }
            Tensor::new(vec![4, cfg.enc_dim], data).unwrap()
        };
        let permuted_output = run(permuted_input);
        for (out_row, &src) in perm.iter().enumerate() {
            let a = permuted_output.row(out_row).unwrap();
            let b = base.row(src).unwrap();
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn shared_encode_rows_are_unit_norm() {
        let cfg = tiny_cfg();
        let mut rng = SeededRng::new(4, 0);
        let params: NamedTensors<f64> = init_stage1_params(&cfg, &mut rng).unwrap();
        let rgb = random_patches(&mut rng, Modality::Rgb);
        let depth = random_patches(&mut rng, Modality::Depth);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &mut tape, false);
        let (z_rgb, z_depth) = shared_encode(&mut tape, &bound, &rgb, &depth, &cfg).unwrap();
        for z in [z_rgb, z_depth] {
            let t = tape.value(z);
            assert_eq!(t.shape(), &[4, cfg.enc_dim]);
            for r in 0..4 {
                let norm: f64 = t.row(r).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identical_content_with_zeroed_modality_embeddings_matches() {
        let cfg = tiny_cfg();
        let mut rng = SeededRng::new(5, 0);
        let mut params: NamedTensors<f64> = init_stage1_params(&cfg, &mut rng).unwrap();
        params.insert(
            "embed.modality.rgb".into(),
            Tensor::zeros(vec![cfg.enc_dim]),
        );
        params.insert(
            "embed.modality.depth".into(),
            Tensor::zeros(vec![cfg.enc_dim]),
        );
        let rgb = random_patches(&mut rng, Modality::Rgb);
        let depth =
            PatchTensor::from_matrix(&rgb.as_matrix(), 4, 3, rgb.grid, Modality::Depth).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &mut tape, false);
        let (z_rgb, z_depth) = shared_encode(&mut tape, &bound, &rgb, &depth, &cfg).unwrap();
        assert_eq!(tape.value(z_rgb), tape.value(z_depth));
    }
}
