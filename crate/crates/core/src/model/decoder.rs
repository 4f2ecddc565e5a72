//! Decoder-input assembly and the shared lightweight decoder with its
//! prediction heads.
//!
//! The decoder sequence is `[RGB visible | depth visible (+ sigma vector) |
//! depth mask tokens]`, each token carrying its original grid position
//! embedding and a decoder-side modality embedding. When RGB reconstruction
//! is enabled, RGB mask tokens are appended symmetrically.

use crate::data::MaskPattern;
use crate::error::{Error, Result};
use crate::model::embed::sincos_2d;
use crate::model::encoder::run_blocks;
use crate::model::{broadcast_row, linear, BoundParams, ViTConfig};
use crate::numerics::element::Element;
use crate::numerics::tape::{Tape, Var};
use alloc::format;
use alloc::vec::Vec;

/// Where each patch position landed in the assembled sequence.
#[derive(Debug, Clone)]
pub struct DecoderLayout {
    /// Token index for every depth patch position (visible and masked).
    pub depth_token_of: Vec<usize>,
    /// Token index per RGB patch position, present only when RGB mask tokens
    /// were appended.
    pub rgb_token_of: Option<Vec<usize>>,
    pub seq_len: usize,
}

/// Select rows of the fixed decoder positional table for given patch
/// positions.
fn positions<E: Element>(
    tape: &mut Tape<E>,
    grid: (usize, usize),
    dim: usize,
    indices: &[usize],
) -> Result<Var> {
    let table = tape.constant(sincos_2d(grid, dim));
    tape.index_select(table, 0, indices.to_vec())
}

fn project_latents<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    latents: Var,
) -> Result<Var> {
    let w = bound.get("dec.embed.w")?;
    let b = bound.get("dec.embed.b")?;
    linear(tape, latents, w, b)
}

/// Build the decoder input sequence.
///
/// `sigma_vec`, when present, is a `(1, dec_dim)` conditioning row added to
/// every visible depth token. Passing a zero vector reproduces the
/// unconditioned path exactly.
#[allow(clippy::too_many_arguments)]
pub fn assemble_decoder_input<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    rgb_latents: Var,
    depth_latents: Var,
    sigma_vec: Option<Var>,
    rgb_mask: &MaskPattern,
    depth_mask: &MaskPattern,
    cfg: &ViTConfig,
    grid: (usize, usize),
    rgb_mask_tokens: bool,
) -> Result<(Var, DecoderLayout)> {
    let t = grid.0 * grid.1;
    if rgb_mask.len() != t || depth_mask.len() != t {
        return Err(Error::contract(format!(
            "mask lengths {}/{} vs grid {t}",
            rgb_mask.len(),
            depth_mask.len()
        )));
    }
    let rgb_visible = rgb_mask.visible_indices();
    let depth_visible = depth_mask.visible_indices();
    let depth_masked = depth_mask.masked_indices();
    if tape.value(rgb_latents).dims2()?.0 != rgb_visible.len()
        || tape.value(depth_latents).dims2()?.0 != depth_visible.len()
    {
        return Err(Error::contract("latent row counts do not match masks"));
    }

    let d = cfg.dec_dim;
    let mod_rgb = bound.get("dec.modality.rgb")?;
    let mod_depth = bound.get("dec.modality.depth")?;
    let mask_token = bound.get("dec.mask_token")?;

    // RGB visible tokens.
    let rgb_proj = project_latents(tape, bound, rgb_latents)?;
    let rgb_pos = positions(tape, grid, d, &rgb_visible)?;
    let rgb_tok = tape.add(rgb_proj, rgb_pos)?;
    let rgb_modality = broadcast_row(tape, mod_rgb, rgb_visible.len())?;
    let rgb_tok = tape.add(rgb_tok, rgb_modality)?;

    // Depth visible tokens, conditioned on the noise level when given.
    let depth_proj = project_latents(tape, bound, depth_latents)?;
    let depth_proj = match sigma_vec {
        Some(sv) => {
            let rows = depth_visible.len();
            let ones = tape.constant(crate::numerics::tensor::Tensor::full(
                alloc::vec![rows, 1],
                E::ONE,
            ));
            let broadcast = tape.matmul(ones, sv)?;
            tape.add(depth_proj, broadcast)?
        }
        None => depth_proj,
    };
    let depth_pos = positions(tape, grid, d, &depth_visible)?;
    let depth_tok = tape.add(depth_proj, depth_pos)?;
    let depth_modality = broadcast_row(tape, mod_depth, depth_visible.len())?;
    let depth_tok = tape.add(depth_tok, depth_modality)?;

    // One shared learned mask token per masked depth position.
    let mask_rows = broadcast_row(tape, mask_token, depth_masked.len())?;
    let mask_pos = positions(tape, grid, d, &depth_masked)?;
    let mask_tok = tape.add(mask_rows, mask_pos)?;
    let mask_modality = broadcast_row(tape, mod_depth, depth_masked.len())?;
    let mask_tok = tape.add(mask_tok, mask_modality)?;

    let mut parts = alloc::vec![rgb_tok, depth_tok, mask_tok];

    let rgb_count = rgb_visible.len();
    let depth_count = depth_visible.len();
    let mut depth_token_of = alloc::vec![0usize; t];
    for (i, &pos) in depth_visible.iter().enumerate() {
        depth_token_of[pos] = rgb_count + i;
    }
    for (j, &pos) in depth_masked.iter().enumerate() {
        depth_token_of[pos] = rgb_count + depth_count + j;
    }
    let mut seq_len = rgb_count + depth_count + depth_masked.len();

    let rgb_token_of = if rgb_mask_tokens {
        let rgb_masked = rgb_mask.masked_indices();
        let rows = broadcast_row(tape, mask_token, rgb_masked.len())?;
        let pos = positions(tape, grid, d, &rgb_masked)?;
        let tok = tape.add(rows, pos)?;
        let modality = broadcast_row(tape, mod_rgb, rgb_masked.len())?;
        parts.push(tape.add(tok, modality)?);

        let mut map = alloc::vec![0usize; t];
        for (i, &pos) in rgb_visible.iter().enumerate() {
            map[pos] = i;
        }
        for (j, &pos) in rgb_masked.iter().enumerate() {
            map[pos] = seq_len + j;
        }
        seq_len += rgb_masked.len();
        Some(map)
    } else {
        None
    };

    let seq = tape.concat(&parts, 0)?;
    debug_assert_eq!(tape.value(seq).dims2()?.0, seq_len);
    Ok((
        seq,
        DecoderLayout {
            depth_token_of,
            rgb_token_of,
            seq_len,
        },
    ))
}

/// Predictions extracted from the decoded sequence.
pub struct Predictions {
    /// `(T, p*p)` depth prediction at every patch position.
    pub depth: Var,
    /// `(T, p*p*3)` RGB prediction, present when RGB mask tokens were
    /// assembled.
    pub rgb: Option<Var>,
}

/// Run the decoder blocks over the assembled sequence and apply the
/// prediction heads at every depth (and optionally RGB) patch position.
pub fn decode_predict<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    seq: Var,
    layout: &DecoderLayout,
    cfg: &ViTConfig,
) -> Result<Predictions> {
    let decoded = run_blocks(tape, bound, seq, "dec", cfg.dec_blocks, cfg.dec_heads)?;
    let depth_tokens = tape.index_select(decoded, 0, layout.depth_token_of.clone())?;
    let w = bound.get("head.depth.w")?;
    let b = bound.get("head.depth.b")?;
    let depth = linear(tape, depth_tokens, w, b)?;

    let rgb = match &layout.rgb_token_of {
        Some(map) if bound.has("head.rgb.w") => {
            let rgb_tokens = tape.index_select(decoded, 0, map.clone())?;
            let w = bound.get("head.rgb.w")?;
            let b = bound.get("head.rgb.b")?;
            Some(linear(tape, rgb_tokens, w, b)?)
        }
        _ => None,
    };
    Ok(Predictions { depth, rgb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_mask;
    use crate::model::init_stage2_params;
    use crate::numerics::gradcheck::NamedTensors;
    use crate::numerics::rng::{sample_gaussian, SeededRng};
    use crate::numerics::tensor::Tensor;
    use alloc::vec;

    fn setup(
        rgb_ratio: f64,
        depth_ratio: f64,
        rgb_mask_tokens: bool,
    ) -> (Tape<f64>, Var, DecoderLayout, ViTConfig) {
        let cfg = ViTConfig::gradcheck_tiny();
        let grid = (2, 2);
        let mut rng = SeededRng::new(10, 0);
        let params: NamedTensors<f64> =
            init_stage2_params(&cfg, &mut rng, rgb_mask_tokens).unwrap();
        let rgb_mask = sample_mask(4, rgb_ratio, &mut rng).unwrap();
        let depth_mask = sample_mask(4, depth_ratio, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &mut tape, false);
        let rgb_latents = {
            let t: Tensor<f64> = sample_gaussian(&mut rng, &[rgb_mask.visible_count(), cfg.enc_dim]);
            tape.constant(t)
        };
        let depth_latents = {
            let t: Tensor<f64> =
                sample_gaussian(&mut rng, &[depth_mask.visible_count(), cfg.enc_dim]);
            tape.constant(t)
        };
        let (seq, layout) = assemble_decoder_input(
            &mut tape,
            &bound,
            rgb_latents,
            depth_latents,
            None,
            &rgb_mask,
            &depth_mask,
            &cfg,
            grid,
            rgb_mask_tokens,
        )
        .unwrap();
        (tape, seq, layout, cfg)
    }

    #[test]
    fn sequence_length_counts() {
        let (tape, seq, layout, _) = setup(0.5, 0.5, false);
        // T=4, both ratios 0.5 -> 2 visible each, 2 masked depth.
        assert_eq!(layout.seq_len, 2 + 2 + 2);
        assert_eq!(tape.value(seq).shape(), &[6, 16]);
        assert!(layout.rgb_token_of.is_none());
    }

    #[test]
    fn rgb_mask_tokens_extend_sequence() {
        let (tape, seq, layout, _) = setup(0.5, 0.5, true);
        assert_eq!(layout.seq_len, 2 + 2 + 2 + 2);
        assert_eq!(tape.value(seq).dims2().unwrap().0, 8);
        assert!(layout.rgb_token_of.is_some());
    }

    #[test]
    fn zero_sigma_vector_matches_unconditioned_path() {
        let cfg = ViTConfig::gradcheck_tiny();
        let grid = (2, 2);
        let mut rng = SeededRng::new(11, 0);
        let params: NamedTensors<f64> = init_stage2_params(&cfg, &mut rng, false).unwrap();
        let rgb_mask = sample_mask(4, 0.5, &mut rng).unwrap();
        let depth_mask = sample_mask(4, 0.5, &mut rng).unwrap();
        let rgb_lat: Tensor<f64> = sample_gaussian(&mut rng, &[2, cfg.enc_dim]);
        let depth_lat: Tensor<f64> = sample_gaussian(&mut rng, &[2, cfg.enc_dim]);

        let run = |sigma: Option<Tensor<f64>>| {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&params, &mut tape, false);
            let r = tape.constant(rgb_lat.clone());
            let d = tape.constant(depth_lat.clone());
            let sv = sigma.map(|s| tape.constant(s));
            let (seq, _) = assemble_decoder_input(
                &mut tape, &bound, r, d, sv, &rgb_mask, &depth_mask, &cfg, grid, false,
            )
            .unwrap();
            tape.value(seq).clone()
        };
        let without = run(None);
        let with_zero = run(Some(Tensor::zeros(vec![1, cfg.dec_dim])));
        assert_eq!(without, with_zero);
    }

    #[test]
    fn predictions_cover_all_positions() {
        let (mut tape, seq, layout, cfg) = setup(0.5, 0.75, false);
        let params: NamedTensors<f64> =
            init_stage2_params(&cfg, &mut SeededRng::new(10, 0), false).unwrap();
        let bound = BoundParams::bind(&params, &mut tape, false);
        let preds = decode_predict(&mut tape, &bound, seq, &layout, &cfg).unwrap();
        assert_eq!(tape.value(preds.depth).shape(), &[4, 16]);
        assert!(preds.rgb.is_none());
    }

    #[test]
    fn zero_weight_head_gives_zero_predictions() {
        let cfg = ViTConfig::gradcheck_tiny();
        let mut rng = SeededRng::new(12, 0);
        let mut params: NamedTensors<f64> = init_stage2_params(&cfg, &mut rng, false).unwrap();
        let p2 = cfg.patch * cfg.patch;
        params.insert("head.depth.w".into(), Tensor::zeros(vec![cfg.dec_dim, p2]));
        params.insert("head.depth.b".into(), Tensor::zeros(vec![p2]));
        let rgb_mask = sample_mask(4, 0.5, &mut rng).unwrap();
        let depth_mask = sample_mask(4, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &mut tape, false);
        let r = {
            let t: Tensor<f64> = sample_gaussian(&mut rng, &[2, cfg.enc_dim]);
            tape.constant(t)
        };
        let d = {
            let t: Tensor<f64> = sample_gaussian(&mut rng, &[2, cfg.enc_dim]);
            tape.constant(t)
        };
        let (seq, layout) = assemble_decoder_input(
            &mut tape, &bound, r, d, None, &rgb_mask, &depth_mask, &cfg, (2, 2), false,
        )
        .unwrap();
        let preds = decode_predict(&mut tape, &bound, seq, &layout, &cfg).unwrap();
        assert!(tape.value(preds.depth).data().iter().all(|&v| v == 0.0));
    }
}
