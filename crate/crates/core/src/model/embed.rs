//! Fixed 2D sin-cos positional embeddings, patch embedding, and the
//! sinusoidal noise-level embedding with its two-layer MLP.

use crate::data::{Modality, PatchTensor};
use crate::error::Result;
use crate::model::{broadcast_row, linear, BoundParams};
use crate::numerics::element::Element;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use alloc::vec;
use alloc::vec::Vec;

/// 1D sin-cos features for a sequence of positions: half the dims carry
/// `sin(pos * w_k)`, half `cos(pos * w_k)`, with `w_k = 1 / 10000^(2k/dim)`.
fn sincos_1d(dim: usize, positions: &[f64]) -> Vec<f64> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim * positions.len());
    for &pos in positions {
        for k in 0..half {
            let omega = 1.0 / libm::pow(10_000.0, k as f64 / half as f64);
            out.push(libm::sin(pos * omega));
        }
        for k in 0..half {
            let omega = 1.0 / libm::pow(10_000.0, k as f64 / half as f64);
            out.push(libm::cos(pos * omega));
        }
    }
    out
}

/// Fixed positional embedding table `(gh * gw, dim)` over a 2D grid in
/// row-major order. Half the channels encode the row coordinate, half the
/// column coordinate.
pub fn sincos_2d<E: Element>(grid: (usize, usize), dim: usize) -> Tensor<E> {
    debug_assert!(dim % 4 == 0);
    let (gh, gw) = grid;
    let half = dim / 2;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for y in 0..gh {
        for x in 0..gw {
            let ys = sincos_1d(half, &[y as f64]);
            let xs = sincos_1d(half, &[x as f64]);
            data.extend(ys.iter().map(|&v| E::from_f64(v)));
            data.extend(xs.iter().map(|&v| E::from_f64(v)));
        }
    }
    Tensor::new(vec![gh * gw, dim], data).expect("consistent shape")
}

/// Sinusoidal features of a noise level: `[sin(sigma*w_k) .. cos(sigma*w_k)]`
/// with geometric frequencies spanning [1, 10^4].
pub fn sigma_features<E: Element>(sigma: f64, dim: usize) -> Tensor<E> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for k in 0..half {
        let omega = frequency(k, half);
        data.push(E::from_f64(libm::sin(sigma * omega)));
    }
    for k in 0..half {
        let omega = frequency(k, half);
        data.push(E::from_f64(libm::cos(sigma * omega)));
    }
    Tensor::new(vec![1, dim], data).expect("consistent shape")
}

fn frequency(k: usize, count: usize) -> f64 {
    if count <= 1 {
        1.0
    } else {
        libm::pow(10_000.0, k as f64 / (count - 1) as f64)
    }
}

/// Project flattened patches to encoder tokens and add the fixed positional
/// embedding plus the learned modality embedding: `(T, enc_dim)`.
pub fn patch_embed<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    patches: &PatchTensor<E>,
    encoder_prefix: &str,
) -> Result<Var> {
    let t = patches.patches;
    let x = tape.constant(patches.as_matrix());
    let w = bound.get(&alloc::format!("{encoder_prefix}.patch.w"))?;
    let b = bound.get(&alloc::format!("{encoder_prefix}.patch.b"))?;
    let projected = linear(tape, x, w, b)?;
    let dim = tape.value(projected).dims2()?.1;
    let pos = tape.constant(sincos_2d(patches.grid, dim));
    let with_pos = tape.add(projected, pos)?;
    let modality_name = match patches.modality {
        Modality::Rgb => "embed.modality.rgb",
        Modality::Depth => "embed.modality.depth",
    };
    let modality = bound.get(modality_name)?;
    let modality_rows = broadcast_row(tape, modality, t)?;
    tape.add(with_pos, modality_rows)
}

/// Noise-level conditioning vector `(1, dec_dim)`: sinusoidal features fed
/// through FC -> ReLU -> FC.
pub fn sigma_embedding<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    sigma: f64,
) -> Result<Var> {
    let dim = {
        let w1 = bound.get("dec.sigma.fc1.w")?;
        tape.value(w1).dims2()?.0
    };
    let features = tape.constant(sigma_features(sigma, dim));
    let w1 = bound.get("dec.sigma.fc1.w")?;
    let b1 = bound.get("dec.sigma.fc1.b")?;
    let w2 = bound.get("dec.sigma.fc2.w")?;
    let b2 = bound.get("dec.sigma.fc2.b")?;
    let h = linear(tape, features, w1, b1)?;
    let h = tape.relu(h)?;
    linear(tape, h, w2, b2)
}
