//! "ShiftShapes": a procedural two-domain segmentation benchmark.
//!
//! Scenes are simple colored shapes on a background; the source and target
//! domains share scene geometry statistics and labels and differ only in
//! rendering (hue shift, brightness, blur, pixel noise) — a pure covariate
//! shift. Everything is reproducible from one seed; per-image RNGs are
//! derived so generation order cannot leak state between images.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::LabelMap;

/// Rendering parameters of one domain.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainSpec {
    /// One RGB color per class, values in [0, 1].
    pub base_palette: Vec<[f64; 3]>,
    pub noise_sigma: f64,
    /// Rotation of colors about the gray axis, radians.
    pub hue_shift: f64,
    pub brightness: f64,
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub blur_radius: f64,
}

impl DomainSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.base_palette.len() < classes {
            return Err(Error::Config(format!(
                "palette has {} colors for {} classes",
                self.base_palette.len(),
                classes
            )));
        }
        if self.noise_sigma < 0.0 || self.brightness <= 0.0 || self.blur_radius < 0.0 {
            return Err(Error::Config("invalid domain spec parameters".into()));
        }
        Ok(())
    }

    fn palette(classes: usize) -> Vec<[f64; 3]> {
        let base = [
            [0.20, 0.22, 0.25],
            [0.85, 0.25, 0.20],
            [0.20, 0.75, 0.30],
            [0.25, 0.35, 0.85],
            [0.80, 0.78, 0.25],
            [0.70, 0.30, 0.75],
        ];
        (0..classes).map(|c| base[c % base.len()]).collect()
    }

    /// Clean rendering: palette colors plus mild sensor noise.
    pub fn default_source(classes: usize) -> Self {
        DomainSpec {
            base_palette: Self::palette(classes),
            noise_sigma: 0.02,
            hue_shift: 0.0,
            brightness: 1.0,
            blur_radius: 0.0,
        }
    }

    /// Shifted rendering: rotated hue, darker, blurred, noisier.
    pub fn default_target(classes: usize) -> Self {
        DomainSpec {
            base_palette: Self::palette(classes),
            noise_sigma: 0.10,
            hue_shift: 0.7,
            brightness: 0.72,
            blur_radius: 1.2,
        }
    }

    /// Identity rendering (tests): paint palette colors and nothing else.
    pub fn identity(classes: usize) -> Self {
        DomainSpec {
            base_palette: Self::palette(classes),
            noise_sigma: 0.0,
            hue_shift: 0.0,
            brightness: 1.0,
            blur_radius: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ShapeKind {
    Circle,
    Rect,
    Triangle,
    Stripe,
    Blob,
}

/// Geometry of one placed shape.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PlacedShape {
    pub class: u8,
    pub kind: ShapeKind,
    /// Kind-specific parameters, in pixels.
    pub params: Vec<f64>,
}

/// Scene geometry plus its rasterized label map.
#[derive(Debug, Clone)]
pub struct Scene {
    pub shapes: Vec<PlacedShape>,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePreset {
    /// Background plus circle / rectangle / triangle / stripe classes.
    Shapes,
    /// Binary blob-foreground scenes for the CutMix path.
    Binary,
}

fn rasterize(shapes: &[PlacedShape], h: usize, w: usize) -> LabelMap {
    let mut labels = Array2::from_elem((h, w), 0u8);
    for shape in shapes {
        match shape.kind {
            ShapeKind::Circle | ShapeKind::Blob => {
                for circle in shape.params.chunks_exact(3) {
                    let (cy, cx, r) = (circle[0], circle[1], circle[2]);
                    for i in 0..h {
                        for j in 0..w {
                            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                            if dy * dy + dx * dx <= r * r {
                                labels[[i, j]] = shape.class;
                            }
                        }
                    }
                }
            }
            ShapeKind::Rect => {
                let (top, left, rh, rw) =
                    (shape.params[0], shape.params[1], shape.params[2], shape.params[3]);
                for i in 0..h {
                    for j in 0..w {
                        if (i as f64) >= top
                            && (i as f64) < top + rh
                            && (j as f64) >= left
                            && (j as f64) < left + rw
                        {
                            labels[[i, j]] = shape.class;
                        }
                    }
                }
            }
            ShapeKind::Triangle => {
                let p: Vec<(f64, f64)> =
                    shape.params.chunks_exact(2).map(|c| (c[0], c[1])).collect();
                let sign = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
                    (a.0 - c.0) * (b.1 - c.1) - (b.0 - c.0) * (a.1 - c.1)
                };
                for i in 0..h {
                    for j in 0..w {
                        let q = (i as f64, j as f64);
                        let d1 = sign(q, p[0], p[1]);
                        let d2 = sign(q, p[1], p[2]);
                        let d3 = sign(q, p[2], p[0]);
                        let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                        let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                        if !(neg && pos) {
                            labels[[i, j]] = shape.class;
                        }
                    }
                }
            }
            ShapeKind::Stripe => {
                let (vertical, offset, thickness) =
                    (shape.params[0] > 0.5, shape.params[1], shape.params[2]);
                for i in 0..h {
                    for j in 0..w {
                        let coord = if vertical { j as f64 } else { i as f64 };
                        if coord >= offset && coord < offset + thickness {
                            labels[[i, j]] = shape.class;
                        }
                    }
                }
            }
        }
    }
    LabelMap(labels)
}

/// Background class 0 plus up to `classes - 1` shapes, one shape kind per
/// class, included with probability 0.9 each; later shapes occlude earlier
/// ones.
pub fn generate_scene(
    classes: usize,
    size: (usize, usize),
    preset: ScenePreset,
    rng: &mut ChaCha8Rng,
) -> Scene {
    let (h, w) = size;
    assert!(classes >= 2, "need at least background and one shape class");
    assert!(h >= 16 && w >= 16, "scene too small");
    let hf = h as f64;
    let wf = w as f64;
    let mut shapes = Vec::new();

    if preset == ScenePreset::Binary {
        // one blob class; always present
        let cy = hf * (0.25 + 0.5 * rng.random::<f64>());
        let cx = wf * (0.25 + 0.5 * rng.random::<f64>());
        let mut params = Vec::new();
        for _ in 0..3 {
            let dy = (rng.random::<f64>() - 0.5) * hf / 3.0;
            let dx = (rng.random::<f64>() - 0.5) * wf / 3.0;
            let r = hf / 10.0 + rng.random::<f64>() * hf / 12.0;
            params.extend_from_slice(&[cy + dy, cx + dx, r]);
        }
        shapes.push(PlacedShape { class: 1, kind: ShapeKind::Blob, params });
        let labels = rasterize(&shapes, h, w);
        return Scene { shapes, labels };
    }

    for class in 1..classes {
        let include = rng.random::<f64>() < 0.9;
        let kind = match (class - 1) % 4 {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Rect,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Stripe,
        };
        // consume the same amount of randomness whether or not the shape is
        // kept, so per-class geometry does not depend on inclusion draws
        let params = match kind {
            ShapeKind::Circle => {
                let cy = hf * (0.2 + 0.6 * rng.random::<f64>());
                let cx = wf * (0.2 + 0.6 * rng.random::<f64>());
                let r = hf / 10.0 + rng.random::<f64>() * hf / 10.0;
                vec![cy, cx, r]
            }
            ShapeKind::Rect => {
                let rh = hf / 6.0 + rng.random::<f64>() * hf / 6.0;
                let rw = wf / 6.0 + rng.random::<f64>() * wf / 6.0;
                let top = rng.random::<f64>() * (hf - rh);
                let left = rng.random::<f64>() * (wf - rw);
                vec![top, left, rh, rw]
            }
            ShapeKind::Triangle => {
                let cy = hf * (0.25 + 0.5 * rng.random::<f64>());
                let cx = wf * (0.25 + 0.5 * rng.random::<f64>());
                let radius = hf / 8.0 + rng.random::<f64>() * hf / 8.0;
                let base = rng.random::<f64>() * std::f64::consts::TAU;
                let mut params = Vec::new();
                for k in 0..3 {
                    let jitter = (rng.random::<f64>() - 0.5) * 0.5;
                    let angle = base + k as f64 * std::f64::consts::TAU / 3.0 + jitter;
                    params.push(cy + radius * angle.sin());
                    params.push(cx + radius * angle.cos());
                }
                params
            }
            ShapeKind::Stripe => {
                let vertical = rng.random::<f64>() < 0.5;
                let span = if vertical { wf } else { hf };
                let thickness = span / 10.0 + rng.random::<f64>() * span / 15.0;
                let offset = rng.random::<f64>() * (span - thickness);
                vec![if vertical { 1.0 } else { 0.0 }, offset, thickness]
            }
            ShapeKind::Blob => unreachable!(),
        };
        if include {
            shapes.push(PlacedShape { class: class as u8, kind, params });
        }
    }
    let labels = rasterize(&shapes, h, w);
    Scene { shapes, labels }
}

/// Rotation of RGB about the gray axis by `theta` radians.
fn hue_matrix(theta: f64) -> [[f64; 3]; 3] {
    let c = theta.cos();
    let s = theta.sin();
    let a = c + (1.0 - c) / 3.0;
    let b = (1.0 - c) / 3.0 - s / 3f64.sqrt();
    let d = (1.0 - c) / 3.0 + s / 3f64.sqrt();
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn gaussian_blur(image: &mut Array3<f64>, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        kernel.push((-0.5 * (k as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (c, h, w) = image.dim();
    let mut tmp = image.clone();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let jj = (j as isize + ki as isize - radius).clamp(0, w as isize - 1);
                    acc += kv * image[[ch, i, jj as usize]];
                }
                tmp[[ch, i, j]] = acc;
            }
        }
    }
    for ch in 0..c {
        for j in 0..w {
            for i in 0..h {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let ii = (i as isize + ki as isize - radius).clamp(0, h as isize - 1);
                    acc += kv * tmp[[ch, ii as usize, j]];
                }
                image[[ch, i, j]] = acc;
            }
        }
    }
}

/// Paint the scene with palette colors, then hue shift, brightness, blur,
/// pixel noise and clipping; label maps are untouched by rendering.
pub fn render(scene: &Scene, spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Result<Array3<f64>> {
    let (h, w) = scene.labels.shape();
    let mut image = Array3::zeros((3, h, w));
    for ((i, j), &y) in scene.labels.0.indexed_iter() {
        let color = self_color(spec, y)?;
        for c in 0..3 {
            image[[c, i, j]] = color[c];
        }
    }
    let m = hue_matrix(spec.hue_shift);
    for i in 0..h {
        for j in 0..w {
            let (r, g, b) = (image[[0, i, j]], image[[1, i, j]], image[[2, i, j]]);
            for c in 0..3 {
                image[[c, i, j]] =
                    (m[c][0] * r + m[c][1] * g + m[c][2] * b) * spec.brightness;
            }
        }
    }
    gaussian_blur(&mut image, spec.blur_radius);
    if spec.noise_sigma > 0.0 {
        for v in image.iter_mut() {
            *v += gaussian(rng) * spec.noise_sigma;
        }
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(image)
}

fn self_color(spec: &DomainSpec, class: u8) -> Result<[f64; 3]> {
    spec.base_palette
        .get(class as usize)
        .copied()
        .ok_or_else(|| Error::Config(format!("no palette color for class {class}")))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One split: images `[3,H,W]` in [0,1] with aligned label maps.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<LabelMap>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchmarkConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub seed: u64,
    pub preset: ScenePreset,
    pub source_spec: DomainSpec,
    pub target_spec: DomainSpec,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            classes: 4,
            height: 64,
            width: 64,
            source_train: 200,
            target_train: 200,
            target_val: 100,
            seed: 17,
            preset: ScenePreset::Shapes,
            source_spec: DomainSpec::default_source(4),
            target_spec: DomainSpec::default_target(4),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.classes > 254 {
            return Err(Error::Config("too many classes for u8 labels".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("images must be at least 16x16".into()));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config("image sides must be divisible by 4".into()));
        }
        if self.source_train == 0 || self.target_train == 0 || self.target_val == 0 {
            return Err(Error::Config("all split sizes must be at least 1".into()));
        }
        if self.preset == ScenePreset::Binary && self.classes != 2 {
            return Err(Error::Config("binary preset requires classes = 2".into()));
        }
        self.source_spec.validate(self.classes)?;
        self.target_spec.validate(self.classes)
    }
}

/// The generated two-domain benchmark. Target-train labels exist for oracle
/// evaluation only and must never reach the training loop.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub source_train: Split,
    pub target_train: Split,
    pub target_val: Split,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

fn generate_split(
    cfg: &BenchmarkConfig,
    spec: &DomainSpec,
    stream: u64,
    count: usize,
) -> Result<Split> {
    let mut split = Split::default();
    for idx in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream, idx as u64));
        let scene = generate_scene(cfg.classes, (cfg.height, cfg.width), cfg.preset, &mut rng);
        let image = render(&scene, spec, &mut rng)?;
        // quantize through the storage dtype so in-memory and reloaded
        // datasets are bit-identical
        split.images.push(image.mapv(|v| v as f32 as f64));
        split.labels.push(scene.labels);
    }
    Ok(split)
}

/// Generate all three splits from one seed.
pub fn make_benchmark(config: &BenchmarkConfig) -> Result<Benchmark> {
    config.validate()?;
    Ok(Benchmark {
        source_train: generate_split(config, &config.source_spec, 1, config.source_train)?,
        target_train: generate_split(config, &config.target_spec, 2, config.target_train)?,
        target_val: generate_split(config, &config.target_spec, 3, config.target_val)?,
        config: config.clone(),
    })
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct SplitEntry {
    count: usize,
    images_file: String,
    labels_file: String,
    image_dtype: String,
    label_dtype: String,
    image_shape: [usize; 3],
    sha256: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    version: u32,
    fingerprint: String,
    config: BenchmarkConfig,
    splits: std::collections::BTreeMap<String, SplitEntry>,
}

fn split_bytes(split: &Split) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::new();
    for img in &split.images {
        for &v in img.iter() {
            images.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut labels = Vec::new();
    for l in &split.labels {
        labels.extend(l.0.iter().copied());
    }
    (images, labels)
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Combined content hash of the benchmark's raw arrays.
pub fn benchmark_fingerprint(b: &Benchmark) -> String {
    let splits = [&b.source_train, &b.target_train, &b.target_val];
    let bytes: Vec<(Vec<u8>, Vec<u8>)> = splits.iter().map(|s| split_bytes(s)).collect();
    let parts: Vec<&[u8]> = bytes.iter().flat_map(|(i, l)| [i.as_slice(), l.as_slice()]).collect();
    sha_hex(&parts)
}

/// Write the benchmark as raw little-endian arrays plus a manifest.
pub fn save_benchmark(b: &Benchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut splits = std::collections::BTreeMap::new();
    for (name, split) in [
        ("source_train", &b.source_train),
        ("target_train", &b.target_train),
        ("target_val", &b.target_val),
    ] {
        let (images, labels) = split_bytes(split);
        let images_file = format!("{name}.images.f32le");
        let labels_file = format!("{name}.labels.u8");
        fs::write(dir.join(&images_file), &images)?;
        fs::write(dir.join(&labels_file), &labels)?;
        splits.insert(
            name.to_string(),
            SplitEntry {
                count: split.len(),
                images_file,
                labels_file,
                image_dtype: "f32le".into(),
                label_dtype: "u8".into(),
                image_shape: [3, b.config.height, b.config.width],
                sha256: sha_hex(&[&images, &labels]),
            },
        );
    }
    let manifest = Manifest {
        version: 1,
        fingerprint: benchmark_fingerprint(b),
        config: b.config.clone(),
        splits,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

fn load_split(dir: &Path, entry: &SplitEntry, classes: usize) -> Result<Split> {
    if entry.image_dtype != "f32le" || entry.label_dtype != "u8" {
        return Err(Error::Format(format!(
            "unsupported dtypes {}/{}",
            entry.image_dtype, entry.label_dtype
        )));
    }
    let [c, h, w] = entry.image_shape;
    let images_raw = fs::read(dir.join(&entry.images_file))?;
    let labels_raw = fs::read(dir.join(&entry.labels_file))?;
    if sha_hex(&[&images_raw, &labels_raw]) != entry.sha256 {
        return Err(Error::Format(format!(
            "checksum mismatch in {}",
            entry.images_file
        )));
    }
    let px = c * h * w;
    if images_raw.len() != entry.count * px * 4 || labels_raw.len() != entry.count * h * w {
        return Err(Error::Format("split file sizes disagree with manifest".into()));
    }
    let mut split = Split::default();
    for idx in 0..entry.count {
        let mut img = Array3::zeros((c, h, w));
        let base = idx * px * 4;
        for (k, v) in img.iter_mut().enumerate() {
            let off = base + k * 4;
            *v = f32::from_le_bytes(images_raw[off..off + 4].try_into().unwrap()) as f64;
        }
        let labels = Array2::from_shape_vec(
            (h, w),
            labels_raw[idx * h * w..(idx + 1) * h * w].to_vec(),
        )
        .unwrap();
        split.images.push(img);
        split.labels.push(LabelMap::new(labels, classes)?);
    }
    Ok(split)
}

/// Load a previously saved benchmark, verifying checksums.
pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let text = fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
    if manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let classes = manifest.config.classes;
    let get = |name: &str| -> Result<&SplitEntry> {
        manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::Format(format!("manifest lacks split {name}")))
    };
    Ok(Benchmark {
        source_train: load_split(dir, get("source_train")?, classes)?,
        target_train: load_split(dir, get("target_train")?, classes)?,
        target_val: load_split(dir, get("target_val")?, classes)?,
        config: manifest.config,
    })
}

/// Fingerprint recorded in a saved dataset directory.
pub fn stored_fingerprint(dir: &Path) -> Result<String> {
    let text = fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
    Ok(manifest.fingerprint)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> BenchmarkConfig {
        BenchmarkConfig {
            classes: 4,
            height: 32,
            width: 32,
            source_train: 4,
            target_train: 4,
            target_val: 2,
            seed: 5,
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn scenes_are_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let s1 = generate_scene(4, (32, 32), ScenePreset::Shapes, &mut a);
        let s2 = generate_scene(4, (32, 32), ScenePreset::Shapes, &mut b);
        assert_eq!(s1.labels, s2.labels);
    }

    #[test]
    fn binary_preset_has_exactly_background_and_blob() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = generate_scene(2, (32, 32), ScenePreset::Binary, &mut rng);
        let mut present = std::collections::BTreeSet::new();
        for (_, _, y) in s.labels.non_ignored() {
            present.insert(y);
        }
        assert_eq!(present.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn class_presence_is_at_least_three_quarters() {
        let mut counts = [0usize; 4];
        let n = 1000;
        for idx in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(123, 9, idx as u64));
            let s = generate_scene(4, (64, 64), ScenePreset::Shapes, &mut rng);
            let mut present = [false; 4];
            for (_, _, y) in s.labels.non_ignored() {
                present[y as usize] = true;
            }
            for (c, p) in present.iter().enumerate() {
                if *p {
                    counts[c] += 1;
                }
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            assert!(
                count as f64 >= 0.75 * n as f64,
                "class {c} present in only {count}/{n} scenes"
            );
        }
    }

    #[test]
    fn identity_spec_renders_pure_palette() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = generate_scene(4, (32, 32), ScenePreset::Shapes, &mut rng);
        let spec = DomainSpec::identity(4);
        let img = render(&scene, &spec, &mut rng).unwrap();
        for ((i, j), &y) in scene.labels.0.indexed_iter() {
            for c in 0..3 {
                assert!((img[[c, i, j]] - spec.base_palette[y as usize][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rendering_never_alters_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scene = generate_scene(4, (32, 32), ScenePreset::Shapes, &mut rng);
        let before = scene.labels.clone();
        let _ = render(&scene, &DomainSpec::default_target(4), &mut rng).unwrap();
        assert_eq!(scene.labels, before);
    }

    #[test]
    fn noise_standard_deviation_matches_spec() {
        // mid-gray palette keeps clipping negligible
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = generate_scene(2, (256, 256), ScenePreset::Binary, &mut rng);
        let spec = DomainSpec {
            base_palette: vec![[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]],
            noise_sigma: 0.1,
            hue_shift: 0.0,
            brightness: 1.0,
            blur_radius: 0.0,
        };
        let img = render(&scene, &spec, &mut rng).unwrap();
        let n = img.len() as f64;
        let mean = img.iter().sum::<f64>() / n;
        let std =
            (img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.005, "std {std}");
    }

    #[test]
    fn benchmark_is_reproducible_and_round_trips() {
        let cfg = small_config();
        let a = make_benchmark(&cfg).unwrap();
        let b = make_benchmark(&cfg).unwrap();
        assert_eq!(benchmark_fingerprint(&a), benchmark_fingerprint(&b));

        let dir = std::env::temp_dir().join(format!("shiftshapes-test-{}", std::process::id()));
        save_benchmark(&a, &dir).unwrap();
        let loaded = load_benchmark(&dir).unwrap();
        assert_eq!(benchmark_fingerprint(&loaded), benchmark_fingerprint(&a));
        assert_eq!(stored_fingerprint(&dir).unwrap(), benchmark_fingerprint(&a));
        assert_eq!(loaded.source_train.images[0], a.source_train.images[0]);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_config();
        cfg.classes = 1;
        assert!(matches!(make_benchmark(&cfg), Err(Error::Config(_))));
        let mut cfg = small_config();
        cfg.height = 30;
        assert!(make_benchmark(&cfg).is_err());
    }

    #[test]
    fn domains_share_scene_labels() {
        let cfg = small_config();
        // same seed and stream means same scenes; only rendering differs
        let src = generate_split(&cfg, &cfg.source_spec, 7, 3).unwrap();
        let tgt = generate_split(&cfg, &cfg.target_spec, 7, 3).unwrap();
        for (a, b) in src.labels.iter().zip(&tgt.labels) {
            assert_eq!(a, b);
        }
        assert_ne!(src.images[0], tgt.images[0]);
    }
}
