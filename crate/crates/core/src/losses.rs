//! The four training objectives: symmetric patch-level InfoNCE, masked depth
//! reconstruction, noise prediction on visible patches, and the weighted
//! stage combinations.
//!
//! Reconstruction reads only masked positions and noise prediction only
//! visible ones, so perturbing predictions on the complementary set leaves
//! each loss exactly unchanged.

use crate::data::{MaskPattern, PatchTensor};
use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::rng::{sample_gaussian, SeededRng};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use alloc::format;
use alloc::vec::Vec;

/// Loss weighting and sampling hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub sigma_max: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.01,
            tau: 0.07,
            sigma_max: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.sigma_max < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Per-sample record of the noise injected into the depth patches.
#[derive(Debug, Clone)]
pub struct NoiseRecord<E: Element> {
    pub sigma: f64,
    /// Standard-normal draw shaped like the depth patches, `(T, p*p)`.
    pub eps: Tensor<E>,
}

impl<E: Element> NoiseRecord<E> {
    /// The additive noise `sigma * eps`, the target of the denoising loss.
    pub fn noise(&self) -> Tensor<E> {
        let s = E::from_f64(self.sigma);
        self.eps.map(|v| s * v)
    }
}

/// Draw one noise level uniformly from `[0, sigma_max]` and add `sigma * e`
/// to the full (pre-masking) patch set. Depth is expected in normalized
/// [0, 1] units.
pub fn add_noise<E: Element>(
    patches: &PatchTensor<E>,
    sigma_max: f64,
    rng: &mut SeededRng,
) -> (PatchTensor<E>, NoiseRecord<E>) {
    let sigma = rng.uniform(0.0, sigma_max);
    let shape = [patches.patches, patches.patch_len()];
    let eps: Tensor<E> = sample_gaussian(rng, &shape);
    let record = NoiseRecord { sigma, eps };
    let noisy = if sigma == 0.0 {
        patches.clone()
    } else {
        let noise = record.noise();
        let mut data = Vec::with_capacity(patches.data().len());
        for (&x, &n) in patches.data().iter().zip(noise.data()) {
            data.push(x + n);
        }
        let m = Tensor::new(alloc::vec![shape[0], shape[1]], data).expect("consistent");
        PatchTensor::from_matrix(
            &m,
            patches.patch_size,
            patches.channels,
            patches.grid,
            patches.modality,
        )
        .expect("consistent")
    };
    (noisy, record)
}

fn check_rows_normalized<E: Element>(tape: &Tape<E>, z: Var, which: &str) -> Result<usize> {
    let t = tape.value(z);
    let (rows, _) = t.dims2()?;
    for r in 0..rows {
        let norm: f64 = t
            .row(r)
            .expect("row in range")
            .iter()
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::contract(format!(
                "{which} row {r} has norm {norm}, expected unit rows"
            )));
        }
    }
    Ok(rows)
}

/// Indices of the diagonal of a flattened `(n, n)` matrix.
fn diagonal_indices(n: usize) -> Vec<usize> {
    (0..n).map(|i| i * n + i).collect()
}

/// One InfoNCE direction from a `(N, N)` scaled-similarity matrix whose rows
/// are anchor-indexed: `-mean_i log softmax(row_i)[i]`.
fn nce_direction<E: Element>(tape: &mut Tape<E>, scaled: Var, n: usize) -> Result<Var> {
    let sm = tape.softmax(scaled, 1)?;
    let flat = tape.reshape(sm, alloc::vec![n * n])?;
    let diag = tape.index_select(flat, 0, diagonal_indices(n))?;
    let log_diag = tape.log(diag)?;
    let mean = tape.mean(log_diag)?;
    tape.mul_scalar(mean, -1.0)
}

/// Symmetric patch-level InfoNCE over l2-normalized embedding rows:
/// the average of the rgb-to-depth and depth-to-rgb directions, each a
/// softmax cross-entropy with the matching row as the positive and every
/// other row of the same image as a negative. The softmax applies
/// max-subtraction internally.
pub fn info_nce<E: Element>(tape: &mut Tape<E>, z_rgb: Var, z_depth: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    let n = check_rows_normalized(tape, z_rgb, "z_rgb")?;
    let m = check_rows_normalized(tape, z_depth, "z_depth")?;
    if n != m || n == 0 {
        return Err(Error::contract(format!("row counts {n} vs {m}")));
    }
    let zt = tape.transpose(z_depth)?;
    let sim = tape.matmul(z_rgb, zt)?;
    let scaled = tape.mul_scalar(sim, 1.0 / tau)?;
    let fwd = nce_direction(tape, scaled, n)?;
    let scaled_t = tape.transpose(scaled)?;
    let bwd = nce_direction(tape, scaled_t, n)?;
    let total = tape.add(fwd, bwd)?;
    tape.mul_scalar(total, 0.5)
}

/// Mean squared error over masked-position elements only.
pub fn depth_recon_loss<E: Element>(
    tape: &mut Tape<E>,
    pred: Var,
    target: Var,
    mask: &MaskPattern,
) -> Result<Var> {
    let masked = mask.masked_indices();
    if masked.is_empty() {
        return Err(Error::contract("reconstruction loss requires masked patches"));
    }
    let pred_m = tape.index_select(pred, 0, masked.clone())?;
    let target_m = tape.index_select(target, 0, masked)?;
    tape.mse(pred_m, target_m)
}

/// Mean squared error between predictions and the added noise `sigma * e`,
/// over visible-position elements only.
pub fn denoise_loss<E: Element>(
    tape: &mut Tape<E>,
    pred: Var,
    noise: &NoiseRecord<E>,
    mask: &MaskPattern,
) -> Result<Var> {
    let visible = mask.visible_indices();
    if visible.is_empty() {
        return Err(Error::contract("denoising loss requires visible patches"));
    }
    let target = tape.constant(noise.noise());
    let pred_v = tape.index_select(pred, 0, visible.clone())?;
    let target_v = tape.index_select(target, 0, visible)?;
    tape.mse(pred_v, target_v)
}

/// Stage-1 objective: the contrastive loss alone.
pub fn stage1_loss<E: Element>(
    tape: &mut Tape<E>,
    z_rgb: Var,
    z_depth: Var,
    weights: &LossWeights,
) -> Result<Var> {
    info_nce(tape, z_rgb, z_depth, weights.tau)
}

/// Stage-2 objective: `alpha * depth + beta * denoise`, plus an optional RGB
/// reconstruction term weighted like the depth term.
pub fn stage2_loss<E: Element>(
    tape: &mut Tape<E>,
    depth_term: Var,
    denoise_term: Option<Var>,
    rgb_term: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let mut total = tape.mul_scalar(depth_term, weights.alpha)?;
    if let Some(denoise) = denoise_term {
        let weighted = tape.mul_scalar(denoise, weights.beta)?;
        total = tape.add(total, weighted)?;
    }
    if let Some(rgb) = rgb_term {
        let weighted = tape.mul_scalar(rgb, weights.alpha)?;
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_mask, Modality};
    use alloc::vec;

    fn unit_rows(rows: &[&[f64]]) -> Tensor<f64> {
        let cols = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            let norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(r.iter().map(|v| v / norm));
        }
        Tensor::new(vec![rows.len(), cols], data).unwrap()
    }

    fn nce(z_rgb: Tensor<f64>, z_depth: Tensor<f64>, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(z_rgb);
        let b = tape.constant(z_depth);
        let loss = info_nce(&mut tape, a, b, tau).unwrap();
        tape.value(loss).scalar_value().unwrap()
    }

    /// Independent scalar-loop InfoNCE, sharing no code with the tape path.
    fn nce_oracle(z_rgb: &Tensor<f64>, z_depth: &Tensor<f64>, tau: f64) -> f64 {
        let (n, d) = z_rgb.dims2().unwrap();
        let sim = |i: usize, k: usize| -> f64 {
            (0..d)
                .map(|c| z_rgb.data()[i * d + c] * z_depth.data()[k * d + c])
                .sum::<f64>()
        };
        let direction = |row_of: &dyn Fn(usize, usize) -> f64| -> f64 {
            let mut total = 0.0;
            for i in 0..n {
                let logits: Vec<f64> = (0..n).map(|k| row_of(i, k) / tau).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
                total -= (logits[i] - max) - denom.ln();
            }
            total / n as f64
        };
        0.5 * (direction(&|i, k| sim(i, k)) + direction(&|i, k| sim(k, i)))
    }

    #[test]
    fn identical_embeddings_give_ln2() {
        let v = unit_rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let loss = nce(v.clone(), v, 1.0);
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let v = unit_rows(&[&[0.6, 0.8]]);
        assert_eq!(nce(v.clone(), v, 0.07), 0.0);
    }

    #[test]
    fn orthonormal_hand_case() {
        let v = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = nce(v.clone(), v, 1.0);
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
        assert!((loss - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn matches_loop_oracle_on_random_instances() {
        let mut rng = SeededRng::new(42, 0);
        for trial in 0..100 {
            let n = 2 + rng.below(6);
            let d = 2 + rng.below(6);
            let make = |rng: &mut SeededRng| {
                let raw: Tensor<f64> = sample_gaussian(rng, &[n, d]);
                let mut data = raw.into_data();
                for r in 0..n {
                    let norm: f64 = data[r * d..(r + 1) * d]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    for v in &mut data[r * d..(r + 1) * d] {
                        *v /= norm;
                    }
                }
                Tensor::new(vec![n, d], data).unwrap()
            };
            let z_rgb = make(&mut rng);
            let z_depth = make(&mut rng);
            let tau = 0.05 + rng.next_f64();
            let got = nce(z_rgb.clone(), z_depth.clone(), tau);
            let want = nce_oracle(&z_rgb, &z_depth, tau);
            assert!((got - want).abs() < 1e-6, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn non_normalized_rows_are_rejected() {
        let bad = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let good = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let mut tape = Tape::new();
        let a = tape.constant(bad);
        let b = tape.constant(good);
        assert!(matches!(
            info_nce(&mut tape, a, b, 0.07),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = SeededRng::new(7, 0);
        let z_rgb = unit_rows(&[&[1.0, 0.2, 0.1], &[0.3, 1.0, -0.4], &[-0.2, 0.5, 0.9]]);
        let z_depth = unit_rows(&[&[0.9, 0.1, 0.3], &[0.2, 0.8, -0.1], &[0.1, -0.6, 1.0]]);
        let base = nce(z_rgb.clone(), z_depth.clone(), 0.3);
        let mut perm: Vec<usize> = (0..3).collect();
        rng.shuffle(&mut perm);
        let permute = |t: &Tensor<f64>| {
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(t.row(i).unwrap());
            }
            Tensor::new(vec![3, 3], data).unwrap()
        };
        let permuted = nce(permute(&z_rgb), permute(&z_depth), 0.3);
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn scaling_similarities_with_temperature_is_stable() {
        // Holding s / tau fixed leaves the loss unchanged: recompute with
        // similarities pre-divided and tau = 1.
        let z_rgb = unit_rows(&[&[1.0, 0.2, 0.1], &[0.3, 1.0, -0.4]]);
        let z_depth = unit_rows(&[&[0.9, 0.1, 0.3], &[0.2, 0.8, -0.1]]);
        let tau = 0.25;
        let direct = nce(z_rgb.clone(), z_depth.clone(), tau);
        let recomputed = nce_oracle(&z_rgb, &z_depth, tau);
        assert!((direct - recomputed).abs() < 1e-12);
    }

    #[test]
    fn loss_vanishes_as_temperature_shrinks() {
        // Positives strictly dominate all negatives; at tau = 1e-3 the
        // softmax saturates and the loss collapses toward zero.
        let v = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = nce(v.clone(), v, 1e-3);
        assert!(loss >= 0.0);
        assert!(loss < 1e-2, "{loss}");
    }

    fn patch_matrix(t: usize, len: usize, rng: &mut SeededRng) -> Tensor<f64> {
        sample_gaussian(rng, &[t, len])
    }

    /// Independent elementwise-loop masked MSE.
    fn masked_mse_oracle(pred: &Tensor<f64>, target: &Tensor<f64>, rows: &[usize]) -> f64 {
        let (_, len) = pred.dims2().unwrap();
        let mut total = 0.0;
        for &r in rows {
            for c in 0..len {
                let d = pred.data()[r * len + c] - target.data()[r * len + c];
                total += d * d;
            }
        }
        total / (rows.len() * len) as f64
    }

    #[test]
    fn recon_loss_matches_oracle() {
        let mut rng = SeededRng::new(9, 0);
        for _ in 0..100 {
            let t = 2 + rng.below(6);
            let len = 4;
            let mask = sample_mask(t, 0.5, &mut rng).unwrap();
            if mask.masked_indices().is_empty() {
                continue;
            }
            let pred = patch_matrix(t, len, &mut rng);
            let target = patch_matrix(t, len, &mut rng);
            let mut tape = Tape::new();
            let p = tape.constant(pred.clone());
            let g = tape.constant(target.clone());
            let loss = depth_recon_loss(&mut tape, p, g, &mask).unwrap();
            let got = tape.value(loss).scalar_value().unwrap();
            let want = masked_mse_oracle(&pred, &target, &mask.masked_indices());
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn recon_single_patch_unit_case() {
        // One masked patch, target ones, pred zeros -> loss 1.
        let mut rng = SeededRng::new(1, 1);
        let mask = sample_mask(2, 0.5, &mut rng).unwrap();
        let pred = Tensor::zeros(vec![2, 4]);
        let target = Tensor::full(vec![2, 4], 1.0f64);
        let mut tape = Tape::new();
        let p = tape.constant(pred);
        let g = tape.constant(target);
        let loss = depth_recon_loss(&mut tape, p, g, &mask).unwrap();
        assert_eq!(tape.value(loss).scalar_value().unwrap(), 1.0);
    }

    #[test]
    fn recon_ignores_visible_positions_exactly() {
        let mut rng = SeededRng::new(2, 2);
        let t = 6;
        let mask = sample_mask(t, 0.5, &mut rng).unwrap();
        let pred = patch_matrix(t, 4, &mut rng);
        let target = patch_matrix(t, 4, &mut rng);
        let eval = |p: &Tensor<f64>| {
            let mut tape = Tape::new();
            let pv = tape.constant(p.clone());
            let g = tape.constant(target.clone());
            let loss = depth_recon_loss(&mut tape, pv, g, &mask).unwrap();
            tape.value(loss).scalar_value().unwrap()
        };
        let base = eval(&pred);
        let mut corrupted = pred.clone().into_data();
        for &v in mask.visible_indices().iter() {
            for c in 0..4 {
                corrupted[v * 4 + c] += 1000.0;
            }
        }
        let corrupted = Tensor::new(vec![t, 4], corrupted).unwrap();
        assert_eq!(base, eval(&corrupted));
    }

    #[test]
    fn denoise_loss_matches_oracle() {
        let mut rng = SeededRng::new(3, 3);
        for _ in 0..100 {
            let t = 2 + rng.below(6);
            let mask = sample_mask(t, 0.5, &mut rng).unwrap();
            let pred = patch_matrix(t, 4, &mut rng);
            let eps: Tensor<f64> = sample_gaussian(&mut rng, &[t, 4]);
            let record = NoiseRecord {
                sigma: rng.next_f64(),
                eps,
            };
            let mut tape = Tape::new();
            let p = tape.constant(pred.clone());
            let loss = denoise_loss(&mut tape, p, &record, &mask).unwrap();
            let got = tape.value(loss).scalar_value().unwrap();
            let want = masked_mse_oracle(&pred, &record.noise(), &mask.visible_indices());
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn denoise_exact_prediction_is_zero_regardless_of_masked() {
        let mut rng = SeededRng::new(4, 4);
        let t = 5;
        let mask = sample_mask(t, 0.6, &mut rng).unwrap();
        let eps: Tensor<f64> = sample_gaussian(&mut rng, &[t, 4]);
        let record = NoiseRecord { sigma: 0.2, eps };
        // Predict the noise exactly at visible rows, garbage elsewhere.
        let mut pred = record.noise().into_data();
        for &m in mask.masked_indices().iter() {
            for c in 0..4 {
                pred[m * 4 + c] = -777.0;
            }
        }
        let pred = Tensor::new(vec![t, 4], pred).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(pred);
        let loss = denoise_loss(&mut tape, p, &record, &mask).unwrap();
        assert_eq!(tape.value(loss).scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn zero_sigma_and_zero_prediction_give_zero_denoise() {
        let mask = MaskPattern::all_visible(3);
        let record = NoiseRecord::<f64> {
            sigma: 0.0,
            eps: Tensor::full(vec![3, 4], 0.37),
        };
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(vec![3, 4]));
        let loss = denoise_loss(&mut tape, p, &record, &mask).unwrap();
        assert_eq!(tape.value(loss).scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn add_noise_with_zero_sigma_max_is_identity() {
        let mut rng = SeededRng::new(5, 5);
        let m: Tensor<f64> = sample_gaussian(&mut rng, &[4, 16]);
        let patches = PatchTensor::from_matrix(&m, 4, 1, (2, 2), Modality::Depth).unwrap();
        let (noisy, record) = add_noise(&patches, 0.0, &mut rng);
        assert_eq!(noisy, patches);
        assert_eq!(record.sigma, 0.0);
    }

    #[test]
    fn noise_is_reconstructable_from_record() {
        let mut rng = SeededRng::new(6, 6);
        let m: Tensor<f64> = sample_gaussian(&mut rng, &[4, 16]);
        let patches = PatchTensor::from_matrix(&m, 4, 1, (2, 2), Modality::Depth).unwrap();
        let (noisy, record) = add_noise(&patches, 0.3, &mut rng);
        let noise = record.noise();
        for ((n, c), e) in noisy.data().iter().zip(patches.data()).zip(noise.data()) {
            assert!((n - c - e).abs() < 1e-12);
        }
        assert!(record.sigma >= 0.0 && record.sigma <= 0.3);
    }

    #[test]
    fn sigma_distribution_is_uniform_by_ks() {
        let mut rng = SeededRng::new(7, 7);
        let sigma_max = 0.25;
        let n = 10_000;
        let m: Tensor<f64> = sample_gaussian(&mut rng, &[1, 4]);
        let patches = PatchTensor::from_matrix(&m, 2, 1, (1, 1), Modality::Depth).unwrap();
        let mut sigmas: Vec<f64> = (0..n)
            .map(|_| add_noise(&patches, sigma_max, &mut rng).1.sigma)
            .collect();
        sigmas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d = 0.0f64;
        for (i, &s) in sigmas.iter().enumerate() {
            let cdf = s / sigma_max;
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        // 1% critical value: 1.628 / sqrt(n).
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn stage2_weighting() {
        let weights = LossWeights {
            alpha: 1.0,
            beta: 0.01,
            ..LossWeights::default()
        };
        let combine = |w: &LossWeights, with_denoise: bool| {
            let mut tape = Tape::<f64>::new();
            let d = tape.constant(Tensor::scalar(0.5));
            let n = tape.constant(Tensor::scalar(2.0));
            let total = stage2_loss(
                &mut tape,
                d,
                if with_denoise { Some(n) } else { None },
                None,
                w,
            )
            .unwrap();
            tape.value(total).scalar_value().unwrap()
        };
        // ScanNet-style weights: 1.0 * 0.5 + 0.01 * 2.0.
        assert!((combine(&weights, true) - 0.52).abs() < 1e-12);
        // SUN RGB-D-style weights: 1.0 * 0.5 + 0.1 * 2.0.
        let sun = LossWeights {
            beta: 0.1,
            ..weights.clone()
        };
        assert!((combine(&sun, true) - 0.70).abs() < 1e-12);
        // beta = 0 collapses to the reconstruction term.
        let none = LossWeights {
            beta: 0.0,
            ..weights
        };
        assert!((combine(&none, false) - 0.5).abs() < 1e-12);
    }
}
