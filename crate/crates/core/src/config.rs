//! Curriculum configuration: every stage-1/stage-2 hyperparameter, ablation
//! switches, and the dataset recipe, with a canonical flat key-value text
//! form. The SHA-256 of that canonical text is the config fingerprint
//! carried by checkpoints and reports.

use crate::data::{AugmentConfig, SceneConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ViTConfig;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingVariant {
    /// Stage 1 contrastive, then stage 2 MIM + denoising (the curriculum).
    ContrastiveThenMim,
    /// MIM + denoising first, contrastive last.
    MimThenContrastive,
    /// One joint objective on masked inputs.
    Joint,
}

impl OrderingVariant {
    pub fn tag(self) -> &'static str {
        match self {
            OrderingVariant::ContrastiveThenMim => "contrastive-then-mim",
            OrderingVariant::MimThenContrastive => "mim-then-contrastive",
            OrderingVariant::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "contrastive-then-mim" => Ok(OrderingVariant::ContrastiveThenMim),
            "mim-then-contrastive" => Ok(OrderingVariant::MimThenContrastive),
            "joint" => Ok(OrderingVariant::Joint),
            _ => Err(Error::config(format!("unknown ordering `{s}`"))),
        }
    }

    pub fn all() -> [OrderingVariant; 3] {
        [
            OrderingVariant::ContrastiveThenMim,
            OrderingVariant::MimThenContrastive,
            OrderingVariant::Joint,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiseComponents {
    /// No noise added, no denoising term: pure masked reconstruction.
    None,
    /// Noise added to the input only; no prediction loss, no conditioning.
    NoiseInputOnly,
    /// Noise added, noise predicted, sigma embedding conditions the decoder.
    Full,
}

impl DenoiseComponents {
    pub fn tag(self) -> &'static str {
        match self {
            DenoiseComponents::None => "none",
            DenoiseComponents::NoiseInputOnly => "noise-input-only",
            DenoiseComponents::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DenoiseComponents::None),
            "noise-input-only" => Ok(DenoiseComponents::NoiseInputOnly),
            "full" => Ok(DenoiseComponents::Full),
            _ => Err(Error::config(format!("unknown denoise setting `{s}`"))),
        }
    }

    pub fn all() -> [DenoiseComponents; 3] {
        [
            DenoiseComponents::None,
            DenoiseComponents::NoiseInputOnly,
            DenoiseComponents::Full,
        ]
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 5e-2,
            eps: 1e-8,
        }
    }
}

/// Learning-rate schedule recipe; the trainer resolves it to step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        // Pre-training uses no warmup; fine-tuning sets warmup_epochs = 1.
        ScheduleSpec {
            base_lr: 1e-4,
            warmup_epochs: 0,
            warmup_start_lr: 1e-6,
        }
    }
}

/// The full two-stage training recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumConfig {
    pub vit: ViTConfig,
    pub weights: LossWeights,
    pub mask_ratio_rgb: f64,
    pub mask_ratio_depth: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleSpec,
    pub optim: OptimConfig,
    pub seed: u64,
    pub scene: SceneConfig,
    pub dataset_count: usize,
    pub dataset_seed: u64,
    /// Path of an on-disk manifest; empty means generate in memory.
    pub manifest: String,
    pub augment: AugmentConfig,
    pub ordering: OrderingVariant,
    pub rgb_reconstruction: bool,
    pub denoise: DenoiseComponents,
    pub cross_batch_negatives: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig::desk_scannet()
    }
}

impl CurriculumConfig {
    /// Desk-scale analogue of the ScanNet pre-training recipe: beta = 0.01,
    /// masking 0.8/0.8, AdamW {0.9, 0.95}, base lr 1e-4, weight decay 5e-2,
    /// cosine decay, and the 1:5 stage-epoch ratio.
    pub fn desk_scannet() -> Self {
        CurriculumConfig {
            vit: ViTConfig::default(),
            weights: LossWeights {
                alpha: 1.0,
                beta: 0.01,
                tau: 0.07,
                sigma_max: 0.25,
            },
            mask_ratio_rgb: 0.8,
            mask_ratio_depth: 0.8,
            stage1_epochs: 3,
            stage2_epochs: 15,
            batch_size: 16,
            schedule: ScheduleSpec::default(),
            optim: OptimConfig::default(),
            seed: 0,
            scene: SceneConfig::default(),
            dataset_count: 625,
            dataset_seed: 2024,
            manifest: String::new(),
            augment: AugmentConfig::default(),
            ordering: OrderingVariant::ContrastiveThenMim,
            rgb_reconstruction: false,
            denoise: DenoiseComponents::Full,
            cross_batch_negatives: false,
        }
    }

    /// Desk-scale analogue of the SUN RGB-D recipe: beta = 0.1, same 1:5
    /// stage ratio.
    pub fn desk_sunrgbd() -> Self {
        let mut cfg = CurriculumConfig::desk_scannet();
        cfg.weights.beta = 0.1;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.weights.validate()?;
        self.scene.validate()?;
        for (name, r) in [
            ("rgb", self.mask_ratio_rgb),
            ("depth", self.mask_ratio_depth),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("{name} mask ratio {r} outside [0, 1)")));
            }
        }
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.dataset_count == 0 {
            return Err(Error::config("dataset must be nonempty"));
        }
        if self.scene.patch != self.vit.patch {
            return Err(Error::config(format!(
                "scene patch {} vs model patch {}",
                self.scene.patch, self.vit.patch
            )));
        }
        Ok(())
    }

    /// Canonical key-value rendering: sorted dotted keys, one `key = value`
    /// per line. This text is the fingerprint input and the self-describing
    /// config emitted next to every run.
    pub fn render(&self) -> String {
        let mut lines: Vec<String> = self
            .entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}"))
            .collect();
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        alloc::vec![
            ("ablation.cross_batch_negatives", self.cross_batch_negatives.to_string()),
            ("ablation.denoise", self.denoise.tag().to_string()),
            ("ablation.ordering", self.ordering.tag().to_string()),
            ("ablation.rgb_reconstruction", self.rgb_reconstruction.to_string()),
            ("augment.blur_sigma_max", self.augment.blur_sigma_max.to_string()),
            ("augment.blur_sigma_min", self.augment.blur_sigma_min.to_string()),
            ("augment.brightness", self.augment.brightness.to_string()),
            ("augment.contrast", self.augment.contrast.to_string()),
            ("augment.saturation", self.augment.saturation.to_string()),
            ("data.classes", self.scene.classes.to_string()),
            ("data.count", self.dataset_count.to_string()),
            ("data.depth_max", self.scene.depth_max.to_string()),
            ("data.depth_min", self.scene.depth_min.to_string()),
            ("data.height", self.scene.height.to_string()),
            ("data.manifest", self.manifest.clone()),
            ("data.max_objects", self.scene.max_objects.to_string()),
            ("data.min_objects", self.scene.min_objects.to_string()),
            ("data.seed", self.dataset_seed.to_string()),
            ("data.width", self.scene.width.to_string()),
            ("loss.alpha", self.weights.alpha.to_string()),
            ("loss.beta", self.weights.beta.to_string()),
            ("loss.sigma_max", self.weights.sigma_max.to_string()),
            ("loss.tau", self.weights.tau.to_string()),
            ("model.dec_blocks", self.vit.dec_blocks.to_string()),
            ("model.dec_dim", self.vit.dec_dim.to_string()),
            ("model.dec_heads", self.vit.dec_heads.to_string()),
            ("model.enc_blocks", self.vit.enc_blocks.to_string()),
            ("model.enc_dim", self.vit.enc_dim.to_string()),
            ("model.enc_heads", self.vit.enc_heads.to_string()),
            ("model.mlp_ratio", self.vit.mlp_ratio.to_string()),
            ("model.patch", self.vit.patch.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("optim.weight_decay", self.optim.weight_decay.to_string()),
            ("schedule.base_lr", self.schedule.base_lr.to_string()),
            ("schedule.kind", "cosine-decay".to_string()),
            ("schedule.warmup_epochs", self.schedule.warmup_epochs.to_string()),
            ("schedule.warmup_start_lr", self.schedule.warmup_start_lr.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.mask_ratio_depth", self.mask_ratio_depth.to_string()),
            ("train.mask_ratio_rgb", self.mask_ratio_rgb.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.stage1_epochs", self.stage1_epochs.to_string()),
            ("train.stage2_epochs", self.stage2_epochs.to_string()),
        ]
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::config(format!("bad value `{what}` for `{key}`"));
        fn p_usize(v: &str) -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("`{v}` is not an integer")))
        }
        fn p_u64(v: &str) -> Result<u64> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("`{v}` is not an integer")))
        }
        fn p_f64(v: &str) -> Result<f64> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("`{v}` is not a number")))
        }
        fn p_bool(v: &str) -> Result<bool> {
            match v.trim() {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::config(format!("`{v}` is not a boolean"))),
            }
        }
        let v = value.trim();
        match key {
            "ablation.cross_batch_negatives" => self.cross_batch_negatives = p_bool(v)?,
            "ablation.denoise" => self.denoise = DenoiseComponents::parse(v)?,
            "ablation.ordering" => self.ordering = OrderingVariant::parse(v)?,
            "ablation.rgb_reconstruction" => self.rgb_reconstruction = p_bool(v)?,
            "augment.blur_sigma_max" => self.augment.blur_sigma_max = p_f64(v)?,
            "augment.blur_sigma_min" => self.augment.blur_sigma_min = p_f64(v)?,
            "augment.brightness" => self.augment.brightness = p_f64(v)?,
            "augment.contrast" => self.augment.contrast = p_f64(v)?,
            "augment.saturation" => self.augment.saturation = p_f64(v)?,
            "data.classes" => self.scene.classes = p_usize(v)?,
            "data.count" => self.dataset_count = p_usize(v)?,
            "data.depth_max" => self.scene.depth_max = p_f64(v)? as f32,
            "data.depth_min" => self.scene.depth_min = p_f64(v)? as f32,
            "data.height" => self.scene.height = p_usize(v)?,
            "data.manifest" => self.manifest = v.to_string(),
            "data.max_objects" => self.scene.max_objects = p_usize(v)?,
            "data.min_objects" => self.scene.min_objects = p_usize(v)?,
            "data.seed" => self.dataset_seed = p_u64(v)?,
            "data.width" => self.scene.width = p_usize(v)?,
            "loss.alpha" => self.weights.alpha = p_f64(v)?,
            "loss.beta" => self.weights.beta = p_f64(v)?,
            "loss.sigma_max" => self.weights.sigma_max = p_f64(v)?,
            "loss.tau" => self.weights.tau = p_f64(v)?,
            "model.dec_blocks" => self.vit.dec_blocks = p_usize(v)?,
            "model.dec_dim" => self.vit.dec_dim = p_usize(v)?,
            "model.dec_heads" => self.vit.dec_heads = p_usize(v)?,
            "model.enc_blocks" => self.vit.enc_blocks = p_usize(v)?,
            "model.enc_dim" => self.vit.enc_dim = p_usize(v)?,
            "model.enc_heads" => self.vit.enc_heads = p_usize(v)?,
            "model.mlp_ratio" => self.vit.mlp_ratio = p_usize(v)?,
            "model.patch" => {
                self.vit.patch = p_usize(v)?;
                self.scene.patch = self.vit.patch;
            }
            "optim.beta1" => self.optim.beta1 = p_f64(v)?,
            "optim.beta2" => self.optim.beta2 = p_f64(v)?,
            "optim.eps" => self.optim.eps = p_f64(v)?,
            "optim.weight_decay" => self.optim.weight_decay = p_f64(v)?,
            "schedule.base_lr" => self.schedule.base_lr = p_f64(v)?,
            "schedule.kind" => {
                if v != "cosine-decay" {
                    return Err(bad(v));
                }
            }
            "schedule.warmup_epochs" => self.schedule.warmup_epochs = p_usize(v)?,
            "schedule.warmup_start_lr" => self.schedule.warmup_start_lr = p_f64(v)?,
            "train.batch_size" => self.batch_size = p_usize(v)?,
            "train.mask_ratio_depth" => self.mask_ratio_depth = p_f64(v)?,
            "train.mask_ratio_rgb" => self.mask_ratio_rgb = p_f64(v)?,
            "train.seed" => self.seed = p_u64(v)?,
            "train.stage1_epochs" => self.stage1_epochs = p_usize(v)?,
            "train.stage2_epochs" => self.stage2_epochs = p_usize(v)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines into an existing config. `#` starts a
    /// comment line; blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = CurriculumConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical rendering.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.render().as_bytes());
        hasher.finalize().into()
    }
}

pub fn fingerprint_hex(fp: &[u8; 32]) -> String {
    let mut s = String::with_capacity(64);
    for b in fp {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_pretraining_table() {
        let cfg = CurriculumConfig::default();
        assert_eq!(cfg.weights.alpha, 1.0);
        assert_eq!(cfg.weights.beta, 0.01);
        assert_eq!(cfg.mask_ratio_rgb, 0.8);
        assert_eq!(cfg.mask_ratio_depth, 0.8);
        assert_eq!(cfg.optim.beta1, 0.9);
        assert_eq!(cfg.optim.beta2, 0.95);
        assert_eq!(cfg.schedule.base_lr, 1e-4);
        assert_eq!(cfg.optim.weight_decay, 5e-2);
        assert_eq!(cfg.stage2_epochs, 5 * cfg.stage1_epochs);
        assert_eq!(CurriculumConfig::desk_sunrgbd().weights.beta, 0.1);
    }

    #[test]
    fn render_parse_roundtrip() {
        let mut cfg = CurriculumConfig::desk_sunrgbd();
        cfg.seed = 9;
        cfg.ordering = OrderingVariant::Joint;
        cfg.mask_ratio_rgb = 0.5;
        let text = cfg.render();
        let parsed = CurriculumConfig::from_text(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn unknown_key_is_config_error() {
        let mut cfg = CurriculumConfig::default();
        assert!(matches!(
            cfg.apply_text("bogus.key = 1\n"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let mut cfg = CurriculumConfig::default();
        cfg.apply_text("# a comment\n\ntrain.seed = 5\n").unwrap();
        assert_eq!(cfg.seed, 5);
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let base = CurriculumConfig::default();
        let mut changed = base.clone();
        changed.weights.beta = 0.1;
        assert_ne!(base.fingerprint(), changed.fingerprint());
        let mut changed = base.clone();
        changed.denoise = DenoiseComponents::None;
        assert_ne!(base.fingerprint(), changed.fingerprint());
    }

    #[test]
    fn canonical_lines_contain_pinned_values() {
        let text = CurriculumConfig::default().render();
        for line in [
            "loss.alpha = 1",
            "loss.beta = 0.01",
            "train.mask_ratio_rgb = 0.8",
            "train.mask_ratio_depth = 0.8",
            "optim.beta1 = 0.9",
            "optim.beta2 = 0.95",
            "schedule.base_lr = 0.0001",
            "optim.weight_decay = 0.05",
            "schedule.kind = cosine-decay",
        ] {
            assert!(text.contains(line), "missing `{line}` in:\n{text}");
        }
    }
}
