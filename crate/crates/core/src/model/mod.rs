//! Transformer machinery: patch projection, ViT encoder over visible tokens,
//! noise-level embedding, decoder-input assembly with mask tokens, the shared
//! lightweight decoder, and prediction heads.

pub mod decoder;
pub mod embed;
pub mod encoder;

use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::gradcheck::NamedTensors;
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

/// Architecture hyperparameters. Desk-scale defaults keep CPU runs in
/// minutes; the full-scale geometry stays constructible for configuration
/// tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViTConfig {
    pub patch: usize,
    pub enc_dim: usize,
    pub enc_blocks: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_blocks: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            patch: 4,
            enc_dim: 64,
            enc_blocks: 4,
            enc_heads: 4,
            dec_dim: 64,
            dec_blocks: 2,
            dec_heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl ViTConfig {
    /// ViT-B encoder with the 8-block, 16-head, 512-dim decoder; for
    /// configuration validation only at desk scale.
    pub fn paper_vit_b() -> Self {
        ViTConfig {
            patch: 16,
            enc_dim: 768,
            enc_blocks: 12,
            enc_heads: 12,
            dec_dim: 512,
            dec_blocks: 8,
            dec_heads: 16,
            mlp_ratio: 4,
        }
    }

    /// Tiny geometry for double-precision gradient checks.
    pub fn gradcheck_tiny() -> Self {
        ViTConfig {
            patch: 4,
            enc_dim: 16,
            enc_blocks: 2,
            enc_heads: 2,
            dec_dim: 16,
            dec_blocks: 2,
            dec_heads: 2,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_dim == 0 || self.dec_dim == 0 || self.patch == 0 {
            return Err(Error::config("zero model extent"));
        }
        if self.enc_dim % self.enc_heads != 0 {
            return Err(Error::config(format!(
                "encoder dim {} not divisible by {} heads",
                self.enc_dim, self.enc_heads
            )));
        }
        if self.dec_dim % self.dec_heads != 0 {
            return Err(Error::config(format!(
                "decoder dim {} not divisible by {} heads",
                self.dec_dim, self.dec_heads
            )));
        }
        if self.enc_dim % 4 != 0 || self.dec_dim % 4 != 0 {
            return Err(Error::config("dims must be multiples of 4 for 2D sin-cos"));
        }
        Ok(())
    }

    /// Flattened patch input width (channels are always 3; depth is
    /// replicated to 3 channels before projection).
    pub fn patch_input_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Which parameter tree a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    /// One shared encoder, both modalities distinguished by embeddings.
    SharedEncoder,
    /// Modality-specific encoders plus decoder, heads, noise embedding.
    TwoEncoders,
}

fn trunc_normal<E: Element>(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| {
            // Resample outside two standard deviations.
            let mut z = rng.next_gaussian();
            while z.abs() > 2.0 {
                z = rng.next_gaussian();
            }
            E::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn insert_linear<E: Element>(
    params: &mut NamedTensors<E>,
    rng: &mut SeededRng,
    name: &str,
    din: usize,
    dout: usize,
) {
    params.insert(format!("{name}.w"), trunc_normal(rng, &[din, dout], 0.02));
    params.insert(format!("{name}.b"), Tensor::zeros(vec![dout]));
}

fn insert_layer_norm<E: Element>(params: &mut NamedTensors<E>, name: &str, dim: usize) {
    params.insert(format!("{name}.g"), Tensor::full(vec![dim], E::ONE));
    params.insert(format!("{name}.b"), Tensor::zeros(vec![dim]));
}

fn insert_encoder_tree<E: Element>(
    params: &mut NamedTensors<E>,
    rng: &mut SeededRng,
    prefix: &str,
    cfg: &ViTConfig,
) {
    insert_linear(params, rng, &format!("{prefix}.patch"), cfg.patch_input_dim(), cfg.enc_dim);
    for blk in 0..cfg.enc_blocks {
        let b = format!("{prefix}.blk{blk}");
        insert_layer_norm(params, &format!("{b}.ln1"), cfg.enc_dim);
        for proj in ["wq", "wk", "wv", "wo"] {
            insert_linear(params, rng, &format!("{b}.attn.{proj}"), cfg.enc_dim, cfg.enc_dim);
        }
        insert_layer_norm(params, &format!("{b}.ln2"), cfg.enc_dim);
        insert_linear(params, rng, &format!("{b}.mlp.fc1"), cfg.enc_dim, cfg.enc_dim * cfg.mlp_ratio);
        insert_linear(params, rng, &format!("{b}.mlp.fc2"), cfg.enc_dim * cfg.mlp_ratio, cfg.enc_dim);
    }
    insert_layer_norm(params, &format!("{prefix}.norm"), cfg.enc_dim);
}

fn insert_decoder_tree<E: Element>(
    params: &mut NamedTensors<E>,
    rng: &mut SeededRng,
    cfg: &ViTConfig,
    rgb_head: bool,
) {
    insert_linear(params, rng, "dec.embed", cfg.enc_dim, cfg.dec_dim);
    params.insert("dec.mask_token".to_string(), trunc_normal(rng, &[cfg.dec_dim], 0.02));
    params.insert("dec.modality.rgb".to_string(), trunc_normal(rng, &[cfg.dec_dim], 0.02));
    params.insert("dec.modality.depth".to_string(), trunc_normal(rng, &[cfg.dec_dim], 0.02));
    insert_linear(params, rng, "dec.sigma.fc1", cfg.dec_dim, cfg.dec_dim);
    insert_linear(params, rng, "dec.sigma.fc2", cfg.dec_dim, cfg.dec_dim);
    for blk in 0..cfg.dec_blocks {
        let b = format!("dec.blk{blk}");
        insert_layer_norm(params, &format!("{b}.ln1"), cfg.dec_dim);
        for proj in ["wq", "wk", "wv", "wo"] {
            insert_linear(params, rng, &format!("{b}.attn.{proj}"), cfg.dec_dim, cfg.dec_dim);
        }
        insert_layer_norm(params, &format!("{b}.ln2"), cfg.dec_dim);
        insert_linear(params, rng, &format!("{b}.mlp.fc1"), cfg.dec_dim, cfg.dec_dim * cfg.mlp_ratio);
        insert_linear(params, rng, &format!("{b}.mlp.fc2"), cfg.dec_dim * cfg.mlp_ratio, cfg.dec_dim);
    }
    insert_layer_norm(params, "dec.norm", cfg.dec_dim);
    let p2 = cfg.patch * cfg.patch;
    insert_linear(params, rng, "head.depth", cfg.dec_dim, p2);
    if rgb_head {
        insert_linear(params, rng, "head.rgb", cfg.dec_dim, p2 * 3);
    }
}

fn insert_modality_embeddings<E: Element>(
    params: &mut NamedTensors<E>,
    rng: &mut SeededRng,
    cfg: &ViTConfig,
) {
    params.insert("embed.modality.rgb".to_string(), trunc_normal(rng, &[cfg.enc_dim], 0.02));
    params.insert("embed.modality.depth".to_string(), trunc_normal(rng, &[cfg.enc_dim], 0.02));
}

/// Initialize the stage-1 parameter tree: one shared encoder plus
/// encoder-side modality embeddings.
pub fn init_stage1_params<E: Element>(cfg: &ViTConfig, rng: &mut SeededRng) -> Result<NamedTensors<E>> {
    cfg.validate()?;
    let mut params = BTreeMap::new();
    let mut r = rng.derive(0x1717);
    insert_encoder_tree(&mut params, &mut r, "enc.shared", cfg);
    insert_modality_embeddings(&mut params, &mut r, cfg);
    Ok(params)
}

/// Initialize the stage-2 parameter tree from scratch: two modality-specific
/// encoders, decoder, noise embedding, heads.
pub fn init_stage2_params<E: Element>(
    cfg: &ViTConfig,
    rng: &mut SeededRng,
    rgb_head: bool,
) -> Result<NamedTensors<E>> {
    cfg.validate()?;
    let mut params = BTreeMap::new();
    let mut r = rng.derive(0x2828);
    insert_encoder_tree(&mut params, &mut r, "enc.rgb", cfg);
    insert_encoder_tree(&mut params, &mut r, "enc.depth", cfg);
    insert_modality_embeddings(&mut params, &mut r, cfg);
    insert_decoder_tree(&mut params, &mut r, cfg, rgb_head);
    Ok(params)
}

/// Closed-form parameter counts, asserted against the maps in tests.
pub fn encoder_param_count(cfg: &ViTConfig) -> usize {
    let d = cfg.enc_dim;
    let patch = cfg.patch_input_dim() * d + d;
    let mlp = 2 * d * d * cfg.mlp_ratio + d * cfg.mlp_ratio + d;
    let block = 2 * (2 * d) + 4 * (d * d + d) + mlp;
    patch + cfg.enc_blocks * block + 2 * d
}

pub fn decoder_param_count(cfg: &ViTConfig, rgb_head: bool) -> usize {
    let d = cfg.dec_dim;
    let embed = cfg.enc_dim * d + d;
    let tokens = d + 2 * d; // mask token + two decoder modality embeddings
    let sigma = 2 * (d * d + d);
    let mlp = 2 * d * d * cfg.mlp_ratio + d * cfg.mlp_ratio + d;
    let block = 2 * (2 * d) + 4 * (d * d + d) + mlp;
    let p2 = cfg.patch * cfg.patch;
    let heads = (d * p2 + p2) + if rgb_head { d * p2 * 3 + p2 * 3 } else { 0 };
    embed + tokens + sigma + cfg.dec_blocks * block + 2 * d + heads
}

pub fn param_count(cfg: &ViTConfig, stage: StageKind, rgb_head: bool) -> usize {
    let modality = 2 * cfg.enc_dim;
    match stage {
        StageKind::SharedEncoder => encoder_param_count(cfg) + modality,
        StageKind::TwoEncoders => {
            2 * encoder_param_count(cfg) + modality + decoder_param_count(cfg, rgb_head)
        }
    }
}

/// Parameters registered on a tape, addressable by name.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Register every parameter as a tape leaf. With `trainable` false the
    /// forward pass records no nodes.
    pub fn bind<E: Element>(
        params: &NamedTensors<E>,
        tape: &mut Tape<E>,
        trainable: bool,
    ) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in params {
            vars.insert(name.clone(), tape.leaf(tensor.clone(), trainable));
        }
        BoundParams { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::internal(format!("parameter `{name}` not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collect gradients back out of the tape, keyed like the parameter map.
    /// Parameters untouched by the loss get zero gradients.
    pub fn gradients<E: Element>(&self, tape: &Tape<E>) -> NamedTensors<E> {
        let mut grads = BTreeMap::new();
        for (name, &var) in &self.vars {
            let g = match tape.grad(var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.value(var).shape().to_vec()),
            };
            grads.insert(name.clone(), g);
        }
        grads
    }
}

/// `x @ w + b`, with the bias broadcast over rows through a ones-column
/// matmul so everything stays inside the primitive set.
pub fn linear<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let (rows, _) = tape.value(xw).dims2()?;
    let b_len = tape.value(b).len();
    let ones = tape.constant(Tensor::full(vec![rows, 1], E::ONE));
    let b_row = tape.reshape(b, vec![1, b_len])?;
    let b_mat = tape.matmul(ones, b_row)?;
    tape.add(xw, b_mat)
}

/// Broadcast a `(d)` embedding vector to `(rows, d)` rows.
pub fn broadcast_row<E: Element>(tape: &mut Tape<E>, v: Var, rows: usize) -> Result<Var> {
    let len = tape.value(v).len();
    let ones = tape.constant(Tensor::full(vec![rows, 1], E::ONE));
    let row = tape.reshape(v, vec![1, len])?;
    tape.matmul(ones, row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_maps_match_closed_form_counts() {
        for cfg in [ViTConfig::default(), ViTConfig::gradcheck_tiny(), ViTConfig::paper_vit_b()] {
            let mut rng = SeededRng::new(0, 0);
            let p1: NamedTensors<f32> = init_stage1_params(&cfg, &mut rng).unwrap();
            let total1: usize = p1.values().map(|t| t.len()).sum();
            assert_eq!(total1, param_count(&cfg, StageKind::SharedEncoder, false));

            let p2: NamedTensors<f32> = init_stage2_params(&cfg, &mut rng, false).unwrap();
            let total2: usize = p2.values().map(|t| t.len()).sum();
            assert_eq!(total2, param_count(&cfg, StageKind::TwoEncoders, false));

            let p2r: NamedTensors<f32> = init_stage2_params(&cfg, &mut rng, true).unwrap();
            let total2r: usize = p2r.values().map(|t| t.len()).sum();
            assert_eq!(total2r, param_count(&cfg, StageKind::TwoEncoders, true));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ViTConfig::gradcheck_tiny();
        let a: NamedTensors<f32> = init_stage1_params(&cfg, &mut SeededRng::new(3, 1)).unwrap();
        let b: NamedTensors<f32> = init_stage1_params(&cfg, &mut SeededRng::new(3, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_divisibility_is_validated() {
        let cfg = ViTConfig {
            enc_dim: 64,
            enc_heads: 5,
            ..ViTConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn linear_bias_broadcasts() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64_slice(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let w = tape.leaf(Tensor::from_f64_slice(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let b = tape.leaf(Tensor::from_f64_slice(vec![3], &[0.5, -0.5, 1.0]).unwrap(), true);
        let y = linear(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 1.5, 4.0, 4.5, 4.5, 7.0]);
    }
}
