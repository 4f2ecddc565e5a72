//! Synthetic RGB-D scenes and the patch-level plumbing around them:
//! deterministic scene generation, Gaussian-blur/color-jitter augmentation,
//! patchify/un-patchify, per-patch masking, and depth normalization.
//!
//! Scenes are layered colored rectangles and ellipses over a gradient
//! background, z-buffered per pixel so occlusion is exact, with shading tied
//! to depth (farther is darker) so the two modalities share information.

use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::rng::SeededRng;
use crate::numerics::tensor::Tensor;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub const GENERATOR_VERSION: u16 = 1;

/// Which modality a patch tensor carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub depth_min: f32,
    pub depth_max: f32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            patch: 4,
            depth_min: 0.5,
            depth_max: 5.0,
            min_objects: 3,
            max_objects: 8,
            classes: 5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.patch == 0 {
            return Err(Error::config("zero image or patch extent"));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.depth_min <= 0.0 || self.depth_max <= self.depth_min {
            return Err(Error::config("depth range must satisfy 0 < min < max"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least background + 1 object class"));
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return Err(Error::config("bad object count range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    pub generator_version: u16,
}

/// One paired color image, depth map, and optional per-pixel class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdSample {
    pub height: usize,
    pub width: usize,
    /// H*W*3 interleaved, each channel in [0, 1].
    pub rgb: Vec<f32>,
    /// H*W meters in [depth_min, depth_max].
    pub depth: Vec<f32>,
    /// H*W class ids in [0, classes), class 0 is background.
    pub labels: Option<Vec<u16>>,
    pub depth_min: f32,
    pub depth_max: f32,
    pub classes: usize,
    pub meta: SampleMeta,
}

impl RgbdSample {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct SceneObject {
    shape: Shape,
    cx: f32,
    cy: f32,
    half_w: f32,
    half_h: f32,
    depth: f32,
    class: u16,
    color: [f32; 3],
}

impl SceneObject {
    fn covers(&self, x: usize, y: usize) -> bool {
        let dx = (x as f32 + 0.5 - self.cx) / self.half_w;
        let dy = (y as f32 + 0.5 - self.cy) / self.half_h;
        match self.shape {
            Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            Shape::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }
}

/// Per-class base colors; object color = class color with a per-object hue
/// jitter, then shaded by depth.
const PALETTE: [[f32; 3]; 8] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.2],
    [0.8, 0.3, 0.85],
    [0.2, 0.85, 0.85],
    [0.95, 0.55, 0.2],
    [0.6, 0.6, 0.6],
];

fn shading(depth: f32, cfg: &SceneConfig) -> f32 {
    // Farther objects are darker, so RGB carries depth information.
    let t = (depth - cfg.depth_min) / (cfg.depth_max - cfg.depth_min);
    1.0 - 0.6 * t
}

fn sample_objects(rng: &mut SeededRng, cfg: &SceneConfig) -> Vec<SceneObject> {
    let count = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    let (h, w) = (cfg.height as f32, cfg.width as f32);
    (0..count)
        .map(|_| {
            let shape = if rng.next_f64() < 0.5 {
                Shape::Rect
            } else {
                Shape::Ellipse
            };
            let class = 1 + rng.below(cfg.classes - 1) as u16;
            let base = PALETTE[(class as usize - 1) % PALETTE.len()];
            let jitter = |v: f32, rng: &mut SeededRng| {
                (v + rng.uniform(-0.08, 0.08) as f32).clamp(0.05, 1.0)
            };
            let color = [
                jitter(base[0], rng),
                jitter(base[1], rng),
                jitter(base[2], rng),
            ];
            // Keep objects inside a margin so most are clearly visible.
            let cx = rng.uniform(0.15 * w as f64, 0.85 * w as f64) as f32;
            let cy = rng.uniform(0.15 * h as f64, 0.85 * h as f64) as f32;
            let half_w = rng.uniform(0.08 * w as f64, 0.28 * w as f64) as f32;
            let half_h = rng.uniform(0.08 * h as f64, 0.28 * h as f64) as f32;
            let depth = rng.uniform(
                cfg.depth_min as f64 + 0.1,
                cfg.depth_max as f64 - 0.5,
            ) as f32;
            SceneObject {
                shape,
                cx,
                cy,
                half_w,
                half_h,
                depth,
                class,
                color,
            }
        })
        .collect()
}

fn background_depth(y: usize, cfg: &SceneConfig) -> f32 {
    // Slanted far wall: deepest at the top, slightly nearer at the bottom.
    let t = y as f32 / (cfg.height.max(2) - 1) as f32;
    cfg.depth_max - 0.15 * (cfg.depth_max - cfg.depth_min) * t
}

fn background_color(x: usize, y: usize, cfg: &SceneConfig, tint: [f32; 3]) -> [f32; 3] {
    let tx = x as f32 / (cfg.width.max(2) - 1) as f32;
    let shade = shading(background_depth(y, cfg), cfg);
    [
        (0.25 + 0.2 * tx) * tint[0] * shade,
        (0.25 + 0.2 * (1.0 - tx)) * tint[1] * shade,
        (0.3 + 0.1 * tx) * tint[2] * shade,
    ]
}

/// Render a deterministic synthetic scene. Identical `(seed, cfg)` always
/// produce bit-identical samples.
pub fn generate_synthetic_scene(seed: u64, cfg: &SceneConfig) -> Result<RgbdSample> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed, 0x5ce4e).derive(GENERATOR_VERSION as u64);
    let objects = sample_objects(&mut rng, cfg);
    let bg_tint = [
        rng.uniform(0.7, 1.0) as f32,
        rng.uniform(0.7, 1.0) as f32,
        rng.uniform(0.7, 1.0) as f32,
    ];

    let n = cfg.height * cfg.width;
    let mut rgb = vec![0.0f32; n * 3];
    let mut depth = vec![0.0f32; n];
    let mut labels = vec![0u16; n];

    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let idx = y * cfg.width + x;
            let mut z = background_depth(y, cfg);
            let mut color = background_color(x, y, cfg, bg_tint);
            let mut class = 0u16;
            for obj in &objects {
                // Nearer object wins at every pixel.
                if obj.covers(x, y) && obj.depth < z {
                    z = obj.depth;
                    let s = shading(obj.depth, cfg);
                    color = [obj.color[0] * s, obj.color[1] * s, obj.color[2] * s];
                    class = obj.class;
                }
            }
            depth[idx] = z;
            labels[idx] = class;
            rgb[idx * 3] = color[0].clamp(0.0, 1.0);
            rgb[idx * 3 + 1] = color[1].clamp(0.0, 1.0);
            rgb[idx * 3 + 2] = color[2].clamp(0.0, 1.0);
        }
    }

    Ok(RgbdSample {
        height: cfg.height,
        width: cfg.width,
        rgb,
        depth,
        labels: Some(labels),
        depth_min: cfg.depth_min,
        depth_max: cfg.depth_max,
        classes: cfg.classes,
        meta: SampleMeta {
            seed,
            generator_version: GENERATOR_VERSION,
        },
    })
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Blur sigma is drawn uniformly from this range; 0 disables blur.
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            blur_sigma_min: 0.0,
            blur_sigma_max: 1.0,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            blur_sigma_min: 0.0,
            blur_sigma_max: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = libm::ceil(3.0 * sigma) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| libm::exp(-(i as f64 * i as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k.iter().map(|&v| v as f32).collect()
}

fn blur_channel(src: &[f32], h: usize, w: usize, kernel: &[f32]) -> Vec<f32> {
    let radius = (kernel.len() / 2) as i64;
    let mut mid = vec![0.0f32; src.len()];
    // Horizontal pass with edge clamping.
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * src[y * w + sx];
            }
            mid[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * mid[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Gaussian blur plus color jitter on the RGB channels. Depth and labels are
/// never touched; the output RGB is re-clamped to [0, 1].
pub fn augment(sample: &RgbdSample, rng: &mut SeededRng, cfg: &AugmentConfig) -> RgbdSample {
    let (h, w) = (sample.height, sample.width);
    let mut rgb = sample.rgb.clone();

    let sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max);
    if sigma > 0.0 {
        let kernel = gaussian_kernel(sigma);
        for ch in 0..3 {
            let plane: Vec<f32> = (0..h * w).map(|i| rgb[i * 3 + ch]).collect();
            let blurred = blur_channel(&plane, h, w, &kernel);
            for (i, v) in blurred.into_iter().enumerate() {
                rgb[i * 3 + ch] = v;
            }
        }
    }

    let brightness = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness) as f32;
    let contrast = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast) as f32;
    let saturation = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation) as f32;

    if brightness != 1.0 {
        for v in &mut rgb {
            *v *= brightness;
        }
    }
    if contrast != 1.0 {
        let mean = rgb.iter().copied().sum::<f32>() / rgb.len() as f32;
        for v in &mut rgb {
            *v = (*v - mean) * contrast + mean;
        }
    }
    if saturation != 1.0 {
        for px in rgb.chunks_exact_mut(3) {
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for v in px {
                *v = gray + (*v - gray) * saturation;
            }
        }
    }
    for v in &mut rgb {
        *v = v.clamp(0.0, 1.0);
    }

    RgbdSample {
        rgb,
        ..sample.clone()
    }
}

// ---------------------------------------------------------------------------
// Patchify

/// `T x p x p x c` patches in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor<E: Element> {
    data: Vec<E>,
    pub patches: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub grid: (usize, usize),
    pub modality: Modality,
}

impl<E: Element> PatchTensor<E> {
    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Elements per patch (`p * p * c`).
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, t: usize) -> &[E] {
        let len = self.patch_len();
        &self.data[t * len..(t + 1) * len]
    }

    /// View as a `(T, p*p*c)` matrix.
    pub fn as_matrix(&self) -> Tensor<E> {
        Tensor::new(vec![self.patches, self.patch_len()], self.data.clone())
            .expect("patch layout is consistent")
    }

    /// Replicate a single-channel patch tensor across `c` channels, matching
    /// the shared patch-projection shape of the two modalities.
    pub fn replicate_channels(&self, c: usize) -> PatchTensor<E> {
        assert_eq!(self.channels, 1, "replicate_channels expects 1 channel");
        let mut data = Vec::with_capacity(self.data.len() * c);
        for &v in &self.data {
            for _ in 0..c {
                data.push(v);
            }
        }
        PatchTensor {
            data,
            patches: self.patches,
            patch_size: self.patch_size,
            channels: c,
            grid: self.grid,
            modality: self.modality,
        }
    }

    pub fn from_matrix(
        m: &Tensor<E>,
        patch_size: usize,
        channels: usize,
        grid: (usize, usize),
        modality: Modality,
    ) -> Result<Self> {
        let (t, len) = m.dims2()?;
        if len != patch_size * patch_size * channels || t != grid.0 * grid.1 {
            return Err(Error::Dimension {
                op: "patch-from-matrix",
                detail: format!("{:?} vs p={patch_size}, c={channels}, grid={grid:?}", m.shape()),
            });
        }
        Ok(PatchTensor {
            data: m.data().to_vec(),
            patches: t,
            patch_size,
            channels,
            grid,
            modality,
        })
    }
}

/// Split an `H x W x c` image into `(h/p) * (w/p)` patches of `p x p x c`,
/// row-major in both the grid and within each patch.
pub fn patchify<E: Element>(
    image: &[E],
    h: usize,
    w: usize,
    c: usize,
    p: usize,
    modality: Modality,
) -> Result<PatchTensor<E>> {
    if h % p != 0 || w % p != 0 {
        return Err(Error::config(format!("image {h}x{w} not divisible by patch {p}")));
    }
    if image.len() != h * w * c {
        return Err(Error::Dimension {
            op: "patchify",
            detail: format!("buffer {} vs {h}x{w}x{c}", image.len()),
        });
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(image.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    let y = gy * p + py;
                    let x = gx * p + px;
                    for ch in 0..c {
                        data.push(image[(y * w + x) * c + ch]);
                    }
                }
            }
        }
    }
    Ok(PatchTensor {
        data,
        patches: gh * gw,
        patch_size: p,
        channels: c,
        grid: (gh, gw),
        modality,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<E: Element>(patches: &PatchTensor<E>) -> Vec<E> {
    let p = patches.patch_size;
    let c = patches.channels;
    let (gh, gw) = patches.grid;
    let (h, w) = (gh * p, gw * p);
    let mut image = vec![E::ZERO; h * w * c];
    for gy in 0..gh {
        for gx in 0..gw {
            let patch = patches.patch(gy * gw + gx);
            for py in 0..p {
                for px in 0..p {
                    let y = gy * p + py;
                    let x = gx * p + px;
                    for ch in 0..c {
                        image[(y * w + x) * c + ch] = patch[(py * p + px) * c + ch];
                    }
                }
            }
        }
    }
    image
}

// ---------------------------------------------------------------------------
// Masks

/// Per-patch visibility for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPattern {
    visible: Vec<bool>,
    pub mask_ratio: f64,
}

impl MaskPattern {
    pub fn all_visible(t: usize) -> Self {
        MaskPattern {
            visible: vec![true; t],
            mask_ratio: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn is_visible(&self, t: usize) -> bool {
        self.visible[t]
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.visible.len()).filter(|&i| self.visible[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.visible.len()).filter(|&i| !self.visible[i]).collect()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// Round half away from zero.
fn round_half_away(x: f64) -> usize {
    libm::floor(x + 0.5) as usize
}

/// Number of visible patches for a ratio: `round(T * (1 - ratio))`, at least 1.
pub fn visible_count_for(t: usize, mask_ratio: f64) -> usize {
    round_half_away(t as f64 * (1.0 - mask_ratio)).max(1)
}

/// Uniformly random visible subset without replacement.
pub fn sample_mask(t: usize, mask_ratio: f64, rng: &mut SeededRng) -> Result<MaskPattern> {
    if t == 0 {
        return Err(Error::contract("sample_mask requires at least one patch"));
    }
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::config(format!("mask ratio {mask_ratio} outside [0, 1)")));
    }
    let keep = visible_count_for(t, mask_ratio);
    let mut visible = vec![false; t];
    for i in rng.choose_indices(t, keep) {
        visible[i] = true;
    }
    Ok(MaskPattern {
        visible,
        mask_ratio,
    })
}

// ---------------------------------------------------------------------------
// Depth normalization

/// Map depth linearly from `[depth_min, depth_max]` onto [0, 1]. The
/// returned sample's depth buffer is in normalized units.
pub fn normalize_depth(sample: &RgbdSample) -> RgbdSample {
    let span = sample.depth_max - sample.depth_min;
    let depth = sample
        .depth
        .iter()
        .map(|&d| (d - sample.depth_min) / span)
        .collect();
    RgbdSample {
        depth,
        ..sample.clone()
    }
}

/// Invert [`normalize_depth`] for a single value.
pub fn denormalize_depth_value(v: f32, depth_min: f32, depth_max: f32) -> f32 {
    depth_min + v * (depth_max - depth_min)
}

/// Per-patch statistics captured by [`per_patch_normalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchStats<E> {
    pub mean: E,
    pub std: E,
}

/// Make every patch zero-mean, unit-std (population convention, std clamped
/// below by `eps`), returning the statistics for denormalization.
pub fn per_patch_normalize<E: Element>(
    patches: &PatchTensor<E>,
    eps: f64,
) -> (PatchTensor<E>, Vec<PatchStats<E>>) {
    let len = patches.patch_len();
    let inv_n = E::from_f64(1.0 / len as f64);
    let eps = E::from_f64(eps);
    let mut data = Vec::with_capacity(patches.data.len());
    let mut stats = Vec::with_capacity(patches.patches);
    for t in 0..patches.patches {
        let patch = patches.patch(t);
        let mean: E = patch.iter().copied().sum::<E>() * inv_n;
        let var: E = patch.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_n;
        let std = var.sqrt().maximum(eps);
        for &v in patch {
            data.push((v - mean) / std);
        }
        stats.push(PatchStats { mean, std });
    }
    (
        PatchTensor {
            data,
            patches: patches.patches,
            patch_size: patches.patch_size,
            channels: patches.channels,
            grid: patches.grid,
            modality: patches.modality,
        },
        stats,
    )
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::format(format!("unknown split `{s}`"))),
        }
    }
}

/// 80/10/10 split by index.
pub fn split_for_index(index: usize, count: usize) -> Split {
    let train_end = count * 8 / 10;
    let val_end = count * 9 / 10;
    if index < train_end {
        Split::Train
    } else if index < val_end {
        Split::Val
    } else {
        Split::Test
    }
}

/// Per-sample generation seed derived from the dataset base seed.
pub fn sample_seed(base_seed: u64, index: u64) -> u64 {
    SeededRng::new(base_seed, 0xda7a).derive(index).next_u64()
}

/// Description of a generated dataset: scene recipe, sample count, split
/// assignment, and the base seed everything derives from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub scene: SceneConfig,
    pub base_seed: u64,
    /// `(path, split)` records in index order; paths may be empty for
    /// in-memory datasets.
    pub entries: Vec<(alloc::string::String, Split)>,
}

impl DatasetManifest {
    pub fn for_generated(scene: SceneConfig, count: usize, base_seed: u64) -> Self {
        let entries = (0..count)
            .map(|i| (alloc::string::String::new(), split_for_index(i, count)))
            .collect();
        DatasetManifest {
            scene,
            base_seed,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// In-memory dataset: samples plus their split assignment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<RgbdSample>,
    pub splits: Vec<Split>,
    pub scene: SceneConfig,
}

impl Dataset {
    /// Generate `count` samples deterministically from `(scene, base_seed)`.
    pub fn generate(scene: &SceneConfig, count: usize, base_seed: u64) -> Result<Dataset> {
        scene.validate()?;
        let mut samples = Vec::with_capacity(count);
        let mut splits = Vec::with_capacity(count);
        for i in 0..count {
            samples.push(generate_synthetic_scene(sample_seed(base_seed, i as u64), scene)?);
            splits.push(split_for_index(i, count));
        }
        Ok(Dataset {
            samples,
            splits,
            scene: scene.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }
}
