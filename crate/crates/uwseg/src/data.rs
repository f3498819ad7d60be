//! Dataset ingestion, augmentation, and the synthetic scene generator.
//!
//! Real datasets are directories with `images/` and `masks/` holding 8-bit
//! RGB PNGs with matching stems; mask colors map to class indices through an
//! ordered palette file. Unknown mask colors are hard errors, never
//! nearest-matched. The synthetic generator rasterizes seeded geometric
//! shapes over a water-like attenuation gradient and is the desk-scale
//! stand-in for real data.

use crate::error::{Error, Result};
use crate::loss::IGNORE_LABEL;
use crate::tensor::{rng::SplitMix64, Tensor};

use std::path::Path;

// ---------------------------------------------------------------------------
// Palette
// ---------------------------------------------------------------------------

/// Ordered class-name -> RGB mapping; order defines class indices.
#[derive(Debug, Clone)]
pub struct Palette {
    entries: Vec<(String, [u8; 3])>,
}

impl Palette {
    pub fn new(entries: Vec<(String, [u8; 3])>) -> Result<Palette> {
        if entries.len() < 2 {
            return Err(Error::Config("palette needs at least 2 classes".into()));
        }
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                if entries[i].1 == entries[j].1 {
                    return Err(Error::Config(format!(
                        "palette colors must be unique: '{}' and '{}' share {:?}",
                        entries[i].0, entries[j].0, entries[i].1
                    )));
                }
            }
        }
        Ok(Palette { entries })
    }

    /// Parse the palette text format: one `name r g b` line per class in
    /// index order; '#' starts a comment.
    pub fn parse(text: &str) -> Result<Palette> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::Ingest(format!(
                    "palette line {}: expected 'name r g b', got '{line}'",
                    lineno + 1
                )));
            }
            let mut rgb = [0u8; 3];
            for (slot, p) in rgb.iter_mut().zip(&parts[1..]) {
                *slot = p.parse().map_err(|_| {
                    Error::Ingest(format!("palette line {}: bad color component '{p}'", lineno + 1))
                })?;
            }
            entries.push((parts[0].to_string(), rgb));
        }
        Palette::new(entries)
    }

    pub fn load(path: &Path) -> Result<Palette> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingest(format!("cannot read palette {}: {e}", path.display())))?;
        Palette::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(n, c)| format!("{n} {} {} {}\n", c[0], c[1], c[2]))
            .collect()
    }

    pub fn n_cls(&self) -> usize {
        self.entries.len()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn color(&self, idx: usize) -> [u8; 3] {
        self.entries[idx].1
    }

    pub fn index_of(&self, rgb: [u8; 3]) -> Option<u8> {
        self.entries.iter().position(|(_, c)| *c == rgb).map(|i| i as u8)
    }

    /// Deterministic palette for synthetic data: evenly spaced hues over a
    /// dark water background.
    pub fn synthetic(n_cls: usize) -> Palette {
        let mut entries = vec![("water".to_string(), [10u8, 40, 70])];
        for c in 1..n_cls {
            let hue = (c - 1) as f32 / (n_cls - 1).max(1) as f32;
            let rgb = hsv_to_rgb(hue * 300.0, 0.85, 0.9);
            entries.push((format!("class{c}"), rgb));
        }
        Palette::new(entries).expect("synthetic palette")
    }
}

fn hsv_to_rgb(h_deg: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = h_deg / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0) as u8, ((g + m) * 255.0) as u8, ((b + m) * 255.0) as u8]
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// One image/label pair. The image is a [3,H,W] tensor in [0,1]; the label
/// buffer is row-major H*W with values < n_cls or [`IGNORE_LABEL`].
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: Vec<u8>,
    pub h: usize,
    pub w: usize,
    pub source: String,
}

/// Convert an RGB mask image to class indices; exact palette match required.
pub fn mask_to_labels(mask: &image::RgbImage, palette: &Palette) -> Result<Vec<u8>> {
    let (w, h) = mask.dimensions();
    let mut labels = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let px = mask.get_pixel(x, y).0;
            match palette.index_of(px) {
                Some(idx) => labels.push(idx),
                None => {
                    return Err(Error::Ingest(format!(
                        "unknown mask color {:?} at pixel ({x}, {y}); not in the palette",
                        px
                    )))
                }
            }
        }
    }
    Ok(labels)
}

/// Render class indices back to an RGB mask through the palette. Ignored
/// pixels render black.
pub fn labels_to_mask(labels: &[u8], h: usize, w: usize, palette: &Palette) -> image::RgbImage {
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            let c = if l == IGNORE_LABEL { [0, 0, 0] } else { palette.color(l as usize) };
            img.put_pixel(x as u32, y as u32, image::Rgb(c));
        }
    }
    img
}

fn image_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32).0;
            for c in 0..3 {
                data[c * h * w + y * w + x] = px[c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(data, &[3, h, w]).expect("image tensor")
}

/// Tensor [3,H,W] in [0,1] back to an RGB image.
pub fn tensor_to_image(t: &Tensor) -> image::RgbImage {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let v = t.to_vec();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|c| (v[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

/// Load and pair an image with its color-coded mask.
pub fn load_pair(image_path: &Path, mask_path: &Path, palette: &Palette) -> Result<Sample> {
    let img = image::open(image_path)
        .map_err(|e| Error::Ingest(format!("cannot open image {}: {e}", image_path.display())))?
        .to_rgb8();
    let mask = image::open(mask_path)
        .map_err(|e| Error::Ingest(format!("cannot open mask {}: {e}", mask_path.display())))?
        .to_rgb8();
    if img.dimensions() != mask.dimensions() {
        return Err(Error::Ingest(format!(
            "size mismatch: image {} is {:?} but mask {} is {:?}",
            image_path.display(),
            img.dimensions(),
            mask_path.display(),
            mask.dimensions()
        )));
    }
    let labels = mask_to_labels(&mask, palette)?;
    let (w, h) = img.dimensions();
    Ok(Sample {
        image: image_to_tensor(&img),
        label: labels,
        h: h as usize,
        w: w as usize,
        source: image_path.display().to_string(),
    })
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AugmentPolicy {
    pub scale_range: (f32, f32),
    /// Output crop (height, width).
    pub crop: (usize, usize),
    pub hflip_p: f32,
}

impl AugmentPolicy {
    /// No-op policy at the given size.
    pub fn identity(h: usize, w: usize) -> AugmentPolicy {
        AugmentPolicy { scale_range: (1.0, 1.0), crop: (h, w), hflip_p: 0.0 }
    }

    pub fn validate(&self, input_multiple: usize) -> Result<()> {
        if self.crop.0 % input_multiple != 0 || self.crop.1 % input_multiple != 0 {
            return Err(Error::Config(format!(
                "crop {}x{} must be divisible by {input_multiple}",
                self.crop.0, self.crop.1
            )));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(Error::Config(format!("bad scale range {:?}", self.scale_range)));
        }
        if !(0.0..=1.0).contains(&self.hflip_p) {
            return Err(Error::Config(format!("bad hflip probability {}", self.hflip_p)));
        }
        Ok(())
    }
}

/// Bilinear image / nearest label resize to the given size.
pub fn resize_sample(s: &Sample, nh: usize, nw: usize) -> Sample {
    let img4 = s.image.reshape(&[1, 3, s.h, s.w]).expect("rank");
    let resized = crate::tensor::no_grad(|| img4.bilinear_resize(nh, nw).expect("resize"));
    let image = resized.reshape(&[3, nh, nw]).expect("rank");
    let mut label = vec![0u8; nh * nw];
    for y in 0..nh {
        let sy = (((y as f64 + 0.5) * s.h as f64 / nh as f64).floor() as usize).min(s.h - 1);
        for x in 0..nw {
            let sx = (((x as f64 + 0.5) * s.w as f64 / nw as f64).floor() as usize).min(s.w - 1);
            label[y * nw + x] = s.label[sy * s.w + sx];
        }
    }
    Sample { image, label, h: nh, w: nw, source: s.source.clone() }
}

fn reflect_index(i: isize, n: usize) -> usize {
    // mirror without edge repetition, folded for arbitrarily large pads
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Pad to at least (th, tw): reflect for the image, ignore-label for the mask.
pub fn pad_sample(s: &Sample, th: usize, tw: usize) -> Sample {
    if s.h >= th && s.w >= tw {
        return s.clone();
    }
    let (nh, nw) = (s.h.max(th), s.w.max(tw));
    let img = s.image.to_vec();
    let mut data = vec![0.0f32; 3 * nh * nw];
    let mut label = vec![IGNORE_LABEL; nh * nw];
    let off_y = (nh - s.h) / 2;
    let off_x = (nw - s.w) / 2;
    for y in 0..nh {
        let sy = reflect_index(y as isize - off_y as isize, s.h);
        for x in 0..nw {
            let sx = reflect_index(x as isize - off_x as isize, s.w);
            for c in 0..3 {
                data[c * nh * nw + y * nw + x] = img[c * s.h * s.w + sy * s.w + sx];
            }
            if y >= off_y && y < off_y + s.h && x >= off_x && x < off_x + s.w {
                label[y * nw + x] = s.label[(y - off_y) * s.w + (x - off_x)];
            }
        }
    }
    Sample {
        image: Tensor::from_vec(data, &[3, nh, nw]).expect("pad"),
        label,
        h: nh,
        w: nw,
        source: s.source.clone(),
    }
}

pub fn crop_at(s: &Sample, y0: usize, x0: usize, ch: usize, cw: usize) -> Sample {
    let img = s.image.to_vec();
    let mut data = vec![0.0f32; 3 * ch * cw];
    let mut label = vec![0u8; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            for c in 0..3 {
                data[c * ch * cw + y * cw + x] = img[c * s.h * s.w + (y0 + y) * s.w + (x0 + x)];
            }
            label[y * cw + x] = s.label[(y0 + y) * s.w + (x0 + x)];
        }
    }
    Sample {
        image: Tensor::from_vec(data, &[3, ch, cw]).expect("crop"),
        label,
        h: ch,
        w: cw,
        source: s.source.clone(),
    }
}

pub fn hflip_sample(s: &Sample) -> Sample {
    let img = s.image.to_vec();
    let mut data = vec![0.0f32; img.len()];
    let mut label = vec![0u8; s.label.len()];
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                data[c * s.h * s.w + y * s.w + x] = img[c * s.h * s.w + y * s.w + (s.w - 1 - x)];
            }
            label[y * s.w + x] = s.label[y * s.w + (s.w - 1 - x)];
        }
    }
    Sample {
        image: Tensor::from_vec(data, &[3, s.h, s.w]).expect("flip"),
        label,
        h: s.h,
        w: s.w,
        source: s.source.clone(),
    }
}

/// Random scale, crop (with reflect/ignore padding when needed), and
/// horizontal flip. Deterministic under the provided generator.
pub fn augment(s: &Sample, policy: &AugmentPolicy, rng: &mut SplitMix64) -> Sample {
    let scale = rng.uniform(policy.scale_range.0, policy.scale_range.1);
    let nh = ((s.h as f32 * scale).round() as usize).max(1);
    let nw = ((s.w as f32 * scale).round() as usize).max(1);
    let mut out = if (nh, nw) == (s.h, s.w) { s.clone() } else { resize_sample(s, nh, nw) };
    let (ch, cw) = policy.crop;
    out = pad_sample(&out, ch, cw);
    let y0 = if out.h > ch { rng.below(out.h - ch + 1) } else { 0 };
    let x0 = if out.w > cw { rng.below(out.w - cw + 1) } else { 0 };
    if (out.h, out.w) != (ch, cw) {
        out = crop_at(&out, y0, x0, ch, cw);
    }
    if rng.chance(policy.hflip_p) {
        out = hflip_sample(&out);
    }
    out
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Shape {
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
    /// Union of ellipses.
    Blob { parts: Vec<(f32, f32, f32, f32)> },
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match self {
            Shape::Rect { y0, x0, y1, x1 } => y >= *y0 && y < *y1 && x >= *x0 && x < *x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y as f32 - cy) / ry;
                let dx = (x as f32 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            Shape::Blob { parts } => parts.iter().any(|&(cy, cx, ry, rx)| {
                let dy = (y as f32 - cy) / ry;
                let dx = (x as f32 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Placement {
    pub class: u8,
    pub shape: Shape,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub size: usize,
    pub n_cls: usize,
    pub noise_sigma: f32,
    pub blur: bool,
    pub placements: Vec<Placement>,
    pub seed: u64,
}

impl SceneSpec {
    /// Seeded random scene: 1-2 shapes per foreground class.
    pub fn random(seed: u64, n_cls: usize, size: usize) -> SceneSpec {
        let mut rng = SplitMix64::new(seed);
        let mut placements = Vec::new();
        for class in 1..n_cls {
            let count = 1 + rng.below(2);
            for _ in 0..count {
                let shape = match rng.below(3) {
                    0 => {
                        let h = size / 8 + rng.below(size / 3);
                        let w = size / 8 + rng.below(size / 3);
                        let y0 = rng.below(size - h);
                        let x0 = rng.below(size - w);
                        Shape::Rect { y0, x0, y1: y0 + h, x1: x0 + w }
                    }
                    1 => Shape::Ellipse {
                        cy: rng.uniform(0.2, 0.8) * size as f32,
                        cx: rng.uniform(0.2, 0.8) * size as f32,
                        ry: rng.uniform(0.06, 0.2) * size as f32,
                        rx: rng.uniform(0.06, 0.2) * size as f32,
                    },
                    _ => {
                        let cy = rng.uniform(0.25, 0.75) * size as f32;
                        let cx = rng.uniform(0.25, 0.75) * size as f32;
                        let parts = (0..3)
                            .map(|_| {
                                (
                                    cy + rng.uniform(-0.08, 0.08) * size as f32,
                                    cx + rng.uniform(-0.08, 0.08) * size as f32,
                                    rng.uniform(0.05, 0.12) * size as f32,
                                    rng.uniform(0.05, 0.12) * size as f32,
                                )
                            })
                            .collect();
                        Shape::Blob { parts }
                    }
                };
                placements.push(Placement { class: class as u8, shape });
            }
        }
        SceneSpec { size, n_cls, noise_sigma: 0.02, blur: true, placements, seed }
    }
}

/// Rasterize a scene: attenuated blue-green background, per-class hue-banded
/// shapes, Gaussian pixel noise, optional 3x3 blur. The label map comes from
/// the same rasterization, so image and labels are pixel-consistent.
pub fn rasterize(spec: &SceneSpec) -> Sample {
    let n = spec.size;
    let mut rng = SplitMix64::new(spec.seed ^ 0x5ce9_e00d);
    let mut data = vec![0.0f32; 3 * n * n];
    let mut label = vec![0u8; n * n];

    for y in 0..n {
        // deeper water: darker and greener toward the bottom
        let depth = y as f32 / (n - 1).max(1) as f32;
        let bg = [
            0.04 + 0.06 * (1.0 - depth),
            0.25 + 0.18 * (1.0 - depth),
            0.35 + 0.22 * (1.0 - depth),
        ];
        for x in 0..n {
            for c in 0..3 {
                data[c * n * n + y * n + x] = bg[c];
            }
        }
    }

    for p in &spec.placements {
        let hue = (p.class as f32 - 1.0) / (spec.n_cls - 1).max(1) as f32 * 300.0;
        let rgb = hsv_to_rgb(hue, 0.85, 0.9);
        let base = [rgb[0] as f32 / 255.0, rgb[1] as f32 / 255.0, rgb[2] as f32 / 255.0];
        for y in 0..n {
            let depth_shade = 1.0 - 0.25 * (y as f32 / (n - 1).max(1) as f32);
            for x in 0..n {
                if p.shape.contains(y, x) {
                    label[y * n + x] = p.class;
                    for c in 0..3 {
                        data[c * n * n + y * n + x] = (base[c] * depth_shade).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    if spec.blur {
        let mut blurred = data.clone();
        for c in 0..3 {
            let plane = &data[c * n * n..(c + 1) * n * n];
            let dst = &mut blurred[c * n * n..(c + 1) * n * n];
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0f32;
                    let mut cnt = 0.0f32;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let yy = y as isize + dy;
                            let xx = x as isize + dx;
                            if yy < 0 || xx < 0 || yy >= n as isize || xx >= n as isize {
                                continue;
                            }
                            acc += plane[yy as usize * n + xx as usize];
                            cnt += 1.0;
                        }
                    }
                    dst[y * n + x] = acc / cnt;
                }
            }
        }
        data = blurred;
    }

    if spec.noise_sigma > 0.0 {
        for v in data.iter_mut() {
            *v = (*v + rng.normal() * spec.noise_sigma).clamp(0.0, 1.0);
        }
    }

    Sample {
        image: Tensor::from_vec(data, &[3, n, n]).expect("scene"),
        label,
        h: n,
        w: n,
        source: format!("synthetic:{}", spec.seed),
    }
}

/// Seeded synthetic underwater scene.
pub fn synth_scene(seed: u64, n_cls: usize, size: usize) -> Sample {
    rasterize(&SceneSpec::random(seed, n_cls, size))
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub palette: Palette,
}

impl Dataset {
    pub fn synthetic(seed: u64, n_cls: usize, size: usize, count: usize) -> Dataset {
        let samples = (0..count)
            .map(|i| synth_scene(seed.wrapping_add(i as u64), n_cls, size))
            .collect();
        Dataset { samples, palette: Palette::synthetic(n_cls) }
    }

    /// Load `root/images/*.png` with masks of matching stems under
    /// `root/masks/`.
    pub fn load_dir(root: &Path, palette: &Palette) -> Result<Dataset> {
        let images_dir = root.join("images");
        let masks_dir = root.join("masks");
        let mut stems: Vec<std::path::PathBuf> = std::fs::read_dir(&images_dir)
            .map_err(|e| Error::Ingest(format!("cannot list {}: {e}", images_dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        stems.sort();
        if stems.is_empty() {
            return Err(Error::Ingest(format!("no .png images under {}", images_dir.display())));
        }
        let mut samples = Vec::with_capacity(stems.len());
        for img_path in stems {
            let stem = img_path.file_name().expect("file name");
            let mask_path = masks_dir.join(stem);
            if !mask_path.exists() {
                return Err(Error::Ingest(format!(
                    "missing mask {} for image {}",
                    mask_path.display(),
                    img_path.display()
                )));
            }
            samples.push(load_pair(&img_path, &mask_path, palette)?);
        }
        Ok(Dataset { samples, palette: palette.clone() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Stack samples into a [B,3,H,W] image tensor and a flat label buffer.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Vec<u8>)> {
    let (h, w) = (samples[0].h, samples[0].w);
    let b = samples.len();
    let mut data = Vec::with_capacity(b * 3 * h * w);
    let mut labels = Vec::with_capacity(b * h * w);
    for s in samples {
        if s.h != h || s.w != w {
            return Err(Error::Shape(format!(
                "cannot stack {}x{} with {h}x{w}",
                s.h, s.w
            )));
        }
        data.extend_from_slice(&s.image.to_vec());
        labels.extend_from_slice(&s.label);
    }
    Ok((Tensor::from_vec(data, &[b, 3, h, w])?, labels))
}
