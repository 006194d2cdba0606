//! Unpaired two-domain datasets: a synthetic shape generator with
//! ground-truth masks, and a loader for folders of images.
//!
//! Images are `[3, H, W]` tensors with values in `[-1, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// How shape interiors are painted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FillRule {
    /// One color per shape, drawn from the palette.
    Flat { palette: Vec<[u8; 3]> },
    /// Diagonal stripes alternating between two colors.
    Stripes {
        colors: [[u8; 3]; 2],
        period: u32,
    },
}

impl FillRule {
    fn color(&self, shape: usize, x: u32, y: u32, palette_pick: usize) -> [u8; 3] {
        match self {
            FillRule::Flat { palette } => palette[palette_pick % palette.len()],
            FillRule::Stripes { colors, period } => {
                let band = ((x + y) / (period / 2).max(1)) as usize;
                colors[(band + shape) % 2]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: u32,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub count_a: usize,
    pub count_b: usize,
    pub seed: u64,
    pub background: [u8; 3],
    pub fill_a: FillRule,
    pub fill_b: FillRule,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_shapes: 1,
            max_shapes: 3,
            count_a: 64,
            count_b: 64,
            seed: 0,
            background: [25, 25, 35],
            fill_a: FillRule::Flat {
                palette: vec![[220, 90, 70], [90, 200, 110], [100, 140, 235]],
            },
            fill_b: FillRule::Stripes {
                colors: [[245, 245, 245], [200, 160, 40]],
                period: 8,
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(invalid!("synthetic image size must be >= 8, got {}", self.size));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(invalid!(
                "need 1 <= min_shapes <= max_shapes, got {}..{}",
                self.min_shapes,
                self.max_shapes
            ));
        }
        if self.max_shapes > 255 {
            return Err(invalid!("at most 255 shapes per image"));
        }
        for (name, rule) in [("fill_a", &self.fill_a), ("fill_b", &self.fill_b)] {
            match rule {
                FillRule::Flat { palette } if palette.is_empty() => {
                    return Err(invalid!("{name}: empty palette"))
                }
                FillRule::Stripes { period, .. } if *period < 2 => {
                    return Err(invalid!("{name}: stripe period must be >= 2"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

/// One shape of a layout, in pixel units.
///
/// Rectangles cover pixels `x0 <= x < x1`, `y0 <= y < y1`; ellipses cover
/// pixels whose centers satisfy `((x+.5-cx)/rx)² + ((y+.5-cy)/ry)² <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeDesc {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    /// Half extents `(rx, ry)`.
    pub scale: (f64, f64),
    pub palette_index: usize,
}

impl ShapeDesc {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        let (cx, cy) = self.center;
        let (rx, ry) = self.scale;
        match self.kind {
            ShapeKind::Rectangle => {
                let (x0, x1) = ((cx - rx) as u32, (cx + rx) as u32);
                let (y0, y1) = ((cy - ry) as u32, (cy + ry) as u32);
                (x0..x1).contains(&x) && (y0..y1).contains(&y)
            }
            ShapeKind::Ellipse => {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    /// Area of the continuous shape (rectangles use their pixel bounds).
    pub fn area(&self) -> f64 {
        let (cx, cy) = self.center;
        let (rx, ry) = self.scale;
        match self.kind {
            ShapeKind::Rectangle => {
                let w = (cx + rx) as u32 - (cx - rx) as u32;
                let h = (cy + ry) as u32 - (cy - ry) as u32;
                (w * h) as f64
            }
            ShapeKind::Ellipse => std::f64::consts::PI * rx * ry,
        }
    }
}

/// A rendered image with its per-pixel shape ids (0 = background, `k` =
/// the k-th shape of `layout`, later shapes on top).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: RgbImage,
    pub mask: GrayImage,
    pub layout: Vec<ShapeDesc>,
}

impl SynthSample {
    pub fn tensor(&self) -> Result<Tensor> {
        rgb_to_tensor(&self.image)
    }

    /// Foreground indicator, row-major.
    pub fn foreground(&self) -> Vec<bool> {
        self.mask.pixels().map(|p| p.0[0] > 0).collect()
    }
}

/// Random layout drawn from the distribution shared by both domains.
pub fn sample_layout<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Vec<ShapeDesc> {
    let size = cfg.size as f64;
    let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    (0..n)
        .map(|_| {
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Ellipse
            };
            let rx = rng.random_range(0.1..0.25) * size;
            let ry = rng.random_range(0.1..0.25) * size;
            let cx = rng.random_range(rx..size - rx);
            let cy = rng.random_range(ry..size - ry);
            ShapeDesc {
                kind,
                center: (cx, cy),
                scale: (rx, ry),
                palette_index: rng.random_range(0..256),
            }
        })
        .collect()
}

/// Renders `layout` with `fill` over a flat background.
pub fn render(layout: &[ShapeDesc], fill: &FillRule, size: u32, background: [u8; 3]) -> SynthSample {
    let mut image = RgbImage::from_pixel(size, size, Rgb(background));
    let mut mask = GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            if let Some(k) = layout.iter().rposition(|s| s.contains(x, y)) {
                let c = fill.color(k, x, y, layout[k].palette_index);
                image.put_pixel(x, y, Rgb(c));
                mask.put_pixel(x, y, image::Luma([(k + 1) as u8]));
            }
        }
    }
    SynthSample {
        image,
        mask,
        layout: layout.to_vec(),
    }
}

fn sample_rng(seed: u64, domain: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 32) | index as u64);
    rng
}

/// Both domains: independent layouts from the same distribution, rendered
/// with `fill_a` and `fill_b` respectively. No image of one domain is
/// derived from an image of the other.
pub fn generate_synth_dataset(cfg: &SynthConfig) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    cfg.validate()?;
    let domain = |d: u64, count: usize, fill: &FillRule| {
        (0..count)
            .map(|i| {
                let layout = sample_layout(cfg, &mut sample_rng(cfg.seed, d, i));
                render(&layout, fill, cfg.size, cfg.background)
            })
            .collect::<Vec<_>>()
    };
    Ok((domain(1, cfg.count_a, &cfg.fill_a), domain(2, cfg.count_b, &cfg.fill_b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub mask: String,
    pub layout: Vec<ShapeDesc>,
}

/// `manifest.json` of a synthetic dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub domain_a: Vec<SampleRecord>,
    pub domain_b: Vec<SampleRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `domainA/ domainB/ masksA/ masksB/` PNGs and `manifest.json`.
pub fn write_synth_dataset(cfg: &SynthConfig, root: &Path) -> Result<SynthManifest> {
    let (a, b) = generate_synth_dataset(cfg)?;
    let write_domain = |samples: &[SynthSample], img_dir: &str, mask_dir: &str| -> Result<Vec<SampleRecord>> {
        let idir = root.join(img_dir);
        let mdir = root.join(mask_dir);
        fs::create_dir_all(&idir).map_err(|e| Error::io(&idir, e))?;
        fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let name = format!("{i:06}.png");
                let ip = idir.join(&name);
                s.image.save(&ip).map_err(|e| Error::Image { path: ip, source: e })?;
                let mp = mdir.join(&name);
                s.mask.save(&mp).map_err(|e| Error::Image { path: mp, source: e })?;
                Ok(SampleRecord {
                    image: format!("{img_dir}/{name}"),
                    mask: format!("{mask_dir}/{name}"),
                    layout: s.layout.clone(),
                })
            })
            .collect()
    };
    let manifest = SynthManifest {
        config: cfg.clone(),
        domain_a: write_domain(&a, "domainA", "masksA")?,
        domain_b: write_domain(&b, "domainB", "masksB")?,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<SynthManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// `[3, H, W]` tensor in `[-1, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// Inverse of [`rgb_to_tensor`], clamping to the valid range.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let t = match t.rank() {
        4 if t.dims()[0] == 1 => t.squeeze(0)?,
        3 => t.clone(),
        _ => return Err(invalid!("expected a [3, H, W] image, got {:?}", t.dims())),
    };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(invalid!("expected 3 channels, got {c}"));
    }
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let u = v[ch * h * w + y as usize * w + x as usize];
            ((u.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    }))
}

/// Images of one folder, sorted by file name.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub names: Vec<String>,
    pub images: Vec<Tensor>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn sorted_files(path: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Every decodable image of `path`, resized to `size × size`.
/// Undecodable files are skipped with a warning.
pub fn load_image_folder(path: &Path, size: u32) -> Result<ImageSet> {
    let mut names = Vec::new();
    let mut images = Vec::new();
    for file in sorted_files(path)? {
        let img = match image::open(&file) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                continue;
            }
        };
        let img = if img.dimensions() == (size, size) {
            img
        } else {
            image::imageops::resize(&img, size, size, FilterType::Triangle)
        };
        names.push(file.file_name().unwrap_or_default().to_string_lossy().into_owned());
        images.push(rgb_to_tensor(&img)?);
    }
    if images.is_empty() {
        return Err(invalid!("{}: no decodable images", path.display()));
    }
    Ok(ImageSet { names, images })
}

/// Shape-id masks of a folder, keyed like [`load_image_folder`].
pub fn load_mask_folder(path: &Path) -> Result<Vec<(String, GrayImage)>> {
    sorted_files(path)?
        .into_iter()
        .map(|file| {
            let mask = image::open(&file)
                .map_err(|e| Error::Image {
                    path: file.clone(),
                    source: e,
                })?
                .to_luma8();
            Ok((
                file.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                mask,
            ))
        })
        .collect()
}

/// Two independent image collections. There is deliberately no index
/// relating an image of one domain to an image of the other.
#[derive(Debug, Clone)]
pub struct UnpairedDataset {
    pub a: Vec<Tensor>,
    pub b: Vec<Tensor>,
}

impl UnpairedDataset {
    pub fn new(a: Vec<Tensor>, b: Vec<Tensor>) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(invalid!(
                "both domains need images (got {} and {})",
                a.len(),
                b.len()
            ));
        }
        Ok(Self { a, b })
    }

    pub fn from_synth(a: &[SynthSample], b: &[SynthSample]) -> Result<Self> {
        Self::new(
            a.iter().map(SynthSample::tensor).collect::<Result<_>>()?,
            b.iter().map(SynthSample::tensor).collect::<Result<_>>()?,
        )
    }

    /// Loads `root/domainA` and `root/domainB`.
    pub fn load_dir(root: &Path, size: u32) -> Result<Self> {
        Self::new(
            load_image_folder(&root.join("domainA"), size)?.images,
            load_image_folder(&root.join("domainB"), size)?.images,
        )
    }

    /// Stacks the images at `idx` of one domain into `[B, 3, H, W]`.
    pub fn batch(images: &[Tensor], idx: &[usize]) -> Result<Tensor> {
        let picked: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
        Ok(Tensor::stack(&picked, 0)?)
    }
}
