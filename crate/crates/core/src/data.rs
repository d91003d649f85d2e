//! Image and mask loading, dataset manifests and splits, corner patches,
//! and overlay rendering.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use log::warn;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One image with its binary reference mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `(C, H, W)` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(1, H, W)` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
    pub source_path: PathBuf,
    pub split: Option<Split>,
}

impl SegSample {
    pub fn extents(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    /// Converts the image to `channels` (1 or 3): gray is replicated, colour
    /// is reduced with Rec. 601 luma weights.
    pub fn with_channels(mut self, channels: usize) -> Result<Self> {
        self.image = convert_channels(&self.image, channels)?;
        Ok(self)
    }
}

pub fn convert_channels(image: &Tensor<f32>, channels: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    match (c, channels) {
        (a, b) if a == b => Ok(image.clone()),
        (1, 3) => Tensor::from_fn(vec![3, h, w], |i| image.data()[i % plane]),
        (3, 1) => Tensor::from_fn(vec![1, h, w], |i| {
            let d = image.data();
            0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i]
        }),
        _ => Err(Error::invalid(format!("cannot convert {c} channels to {channels}"))),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::data(path, e.to_string()))
}

/// Reads an 8- or 16-bit gray or colour image as `(C, H, W)` in `[0, 1]`.
/// Alpha channels are dropped.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?;
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        Ok(rgb_to_tensor(&rgb))
    } else {
        let l = img.to_luma32f();
        let (w, h) = l.dimensions();
        Tensor::new(vec![1, h as usize, w as usize], l.into_raw())
    }
}

fn rgb_to_tensor(rgb: &ImageBuffer<Rgb<f32>, Vec<f32>>) -> Tensor<f32> {
    let (w, h) = rgb.dimensions();
    let plane = (w * h) as usize;
    let raw = rgb.as_raw();
    Tensor::from_fn(vec![3, h as usize, w as usize], |i| raw[(i % plane) * 3 + i / plane]).expect("non-empty image")
}

/// Bilinear resize of every channel of a `(C, H, W)` tensor.
pub fn resize_bilinear(image: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    let (c, ih, iw) = (s[0], s[1], s[2]);
    if (ih, iw) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let src = &image.data()[ch * ih * iw..(ch + 1) * ih * iw];
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(iw as u32, ih as u32, src.to_vec()).expect("plane size");
        out.extend(imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle).into_raw());
    }
    Tensor::new(vec![c, h, w], out)
}

/// Nearest-neighbour resize of a single plane, then `1` where the value is at
/// least half of the plane's maximum. An all-zero plane stays zero.
pub fn binarize_mask(plane: &[f32], ih: usize, iw: usize, h: usize, w: usize) -> Tensor<f32> {
    let resized = if (ih, iw) == (h, w) {
        plane.to_vec()
    } else {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(iw as u32, ih as u32, plane.to_vec()).expect("plane size");
        imageops::resize(&buf, w as u32, h as u32, FilterType::Nearest).into_raw()
    };
    let max = plane.iter().copied().fold(0.0f32, f32::max);
    let data = resized.iter().map(|&v| if max > 0.0 && v >= 0.5 * max { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![1, h, w], data).expect("non-empty mask")
}

/// Loads an image and its mask. With `resize_to` both are brought to
/// `(H, W)`; the image bilinearly, the mask by nearest neighbour.
pub fn load_sample(image_path: &Path, mask_path: &Path, resize_to: Option<(usize, usize)>) -> Result<SegSample> {
    let image = load_image(image_path)?;
    let m = open(mask_path)?.to_luma32f();
    let (mw, mh) = (m.width() as usize, m.height() as usize);
    let (ih, iw) = (image.shape()[1], image.shape()[2]);
    if (mh, mw) != (ih, iw) {
        return Err(Error::data(
            mask_path,
            format!("mask is {mw}x{mh} but image {} is {iw}x{ih}", image_path.display()),
        ));
    }
    let (h, w) = resize_to.unwrap_or((ih, iw));
    let image = resize_bilinear(&image, h, w)?;
    let mask = binarize_mask(m.as_raw(), mh, mw, h, w);
    Ok(SegSample { image, mask, source_path: image_path.to_path_buf(), split: None })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Option<Split>,
}

/// Tab-separated `image<TAB>mask[<TAB>split]` lines. Relative paths resolve
/// against the manifest's directory; blank lines and `#` comments are
/// skipped; a split of `-` or no third column leaves it unassigned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
    pub resize_to: Option<(usize, usize)>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path, name: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 || cols.len() > 3 {
                return Err(Error::data(base, format!("manifest line {}: expected 2 or 3 tab-separated columns", lineno + 1)));
            }
            let split = match cols.get(2).map(|s| s.trim()) {
                None | Some("") | Some("-") => None,
                Some(s) => Some(s.parse().map_err(|e: Error| Error::data(base, format!("line {}: {e}", lineno + 1)))?),
            };
            entries.push(ManifestEntry { image: base.join(cols[0].trim()), mask: base.join(cols[1].trim()), split });
        }
        Ok(Self { name: name.to_string(), entries, resize_to: None })
    }

    /// Reads a manifest file and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let m = Self::parse(&text, base, &name)?;
        for e in &m.entries {
            for p in [&e.image, &e.mask] {
                if !p.is_file() {
                    return Err(Error::data(p.clone(), "file not found"));
                }
            }
        }
        Ok(m)
    }

    pub fn load_entry(&self, index: usize) -> Result<SegSample> {
        let e = &self.entries[index];
        let mut s = load_sample(&e.image, &e.mask, self.resize_to)?;
        s.split = e.split;
        Ok(s)
    }
}

/// Named split conventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitConvention {
    /// Use the split column of each manifest entry.
    Manifest,
    Drive,
    Chase,
    Isic2016,
    Isic2017,
    CvcClinicDb,
    Mc,
    MoNuSeg,
    MoNuSegPatches,
}

impl FromStr for SplitConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k: String = s.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        Ok(match k.as_str() {
            "manifest" | "custom" => Self::Manifest,
            "drive" => Self::Drive,
            "chase" | "chasedb1" => Self::Chase,
            "isic2016" => Self::Isic2016,
            "isic2017" => Self::Isic2017,
            "cvcclinicdb" | "cvc" => Self::CvcClinicDb,
            "mc" | "montgomery" => Self::Mc,
            "monuseg" => Self::MoNuSeg,
            "monusegpatches" => Self::MoNuSegPatches,
            _ => return Err(Error::invalid(format!("unknown dataset convention `{s}`"))),
        })
    }
}

enum Rule {
    /// `(train, val, test)` in manifest order.
    Fixed(usize, usize, usize),
    /// Filename-sorted prefix with the train fraction.
    SortedPrefix(f64),
    /// Seeded shuffle; validation and test each get `floor(fraction · n)`.
    Shuffled(f64),
}

impl SplitConvention {
    fn rule(self) -> Option<(Rule, usize)> {
        Some(match self {
            Self::Manifest => return None,
            Self::Drive => (Rule::Fixed(20, 0, 20), 40),
            Self::Chase => (Rule::SortedPrefix(0.7), 28),
            Self::Isic2016 => (Rule::Fixed(900, 0, 379), 1279),
            Self::Isic2017 => (Rule::Fixed(2000, 150, 600), 2750),
            Self::CvcClinicDb => (Rule::Shuffled(0.1), 612),
            Self::Mc => (Rule::Fixed(100, 0, 38), 138),
            Self::MoNuSeg => (Rule::Fixed(30, 0, 14), 44),
            Self::MoNuSegPatches => (Rule::Fixed(120, 0, 56), 176),
        })
    }

    /// Conventions without a validation set that hold one out of train.
    pub fn holds_out_validation(self) -> bool {
        matches!(self, Self::Drive | Self::Mc)
    }
}

/// Indices into a manifest's entries.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// `floor(x + 0.5)` for non-negative `x`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

pub fn make_split(manifest: &DatasetManifest, convention: SplitConvention, seed: u64) -> Result<Splits> {
    let n = manifest.entries.len();
    if n == 0 {
        return Err(Error::invalid("manifest has no entries"));
    }
    let Some((rule, expected)) = convention.rule() else {
        let mut s = Splits::default();
        for (i, e) in manifest.entries.iter().enumerate() {
            match e.split {
                Some(Split::Train) => s.train.push(i),
                Some(Split::Val) => s.val.push(i),
                Some(Split::Test) => s.test.push(i),
                None => return Err(Error::data(e.image.clone(), "manifest entry has no split")),
            }
        }
        return Ok(s);
    };
    if n != expected {
        warn!("{convention:?} expects {expected} entries, manifest `{}` has {n}; splitting proportionally", manifest.name);
    }
    let take = |order: &[usize], tr: usize, va: usize| Splits {
        train: order[..tr].to_vec(),
        val: order[tr..tr + va].to_vec(),
        test: order[tr + va..].to_vec(),
    };
    let natural: Vec<usize> = (0..n).collect();
    Ok(match rule {
        Rule::Fixed(tr, va, te) => {
            if n == expected {
                take(&natural, tr, va)
            } else {
                let total = (tr + va + te) as f64;
                let t = round_half_up(n as f64 * tr as f64 / total).min(n);
                let v = round_half_up(n as f64 * va as f64 / total).min(n - t);
                take(&natural, t, v)
            }
        }
        Rule::SortedPrefix(frac) => {
            let mut order = natural;
            order.sort_by(|&a, &b| manifest.entries[a].image.file_name().cmp(&manifest.entries[b].image.file_name()));
            let t = round_half_up(n as f64 * frac).min(n);
            take(&order, t, 0)
        }
        Rule::Shuffled(frac) => {
            let order = Rng::new(seed).permutation(n);
            let k = (n as f64 * frac).floor() as usize;
            take(&order, n - 2 * k, k)
        }
    })
}

/// Moves the last `fraction` of the filename-sorted train split (at least
/// one entry when train has two or more) into validation.
pub fn hold_out_validation(manifest: &DatasetManifest, splits: &Splits, fraction: f64) -> Splits {
    let mut train = splits.train.clone();
    train.sort_by(|&a, &b| manifest.entries[a].image.file_name().cmp(&manifest.entries[b].image.file_name()));
    let k = if train.len() < 2 { 0 } else { round_half_up(train.len() as f64 * fraction).max(1) };
    let val = train.split_off(train.len() - k);
    Splits { train, val, test: splits.test.clone() }
}

/// Anchor offsets `(row, col)` of the four corner patches, in the order
/// top-left, top-right, bottom-left, bottom-right.
pub fn corner_offsets(h: usize, w: usize, size: usize) -> Result<[(usize, usize); 4]> {
    if size == 0 || h < size || w < size {
        return Err(Error::invalid(format!("cannot cut {size}x{size} patches from a {h}x{w} image")));
    }
    Ok([(0, 0), (0, w - size), (h - size, 0), (h - size, w - size)])
}

/// Four `size × size` corner patches of a `(C, H, W)` tensor.
pub fn corner_patches(image: &Tensor<f32>, size: usize) -> Result<[Tensor<f32>; 4]> {
    if image.rank() != 3 {
        return Err(Error::invalid(format!("corner patches need a (C, H, W) tensor, got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let offsets = corner_offsets(h, w, size)?;
    let cut = |(r0, c0): (usize, usize)| {
        Tensor::from_fn(vec![c, size, size], |i| {
            let ch = i / (size * size);
            let r = (i / size) % size;
            let col = i % size;
            image.data()[(ch * h + r0 + r) * w + c0 + col]
        })
    };
    Ok([cut(offsets[0])?, cut(offsets[1])?, cut(offsets[2])?, cut(offsets[3])?])
}

pub const MONUSEG_PATCH: usize = 512;

/// Corner patches of an image and its mask; each patch keeps the source path
/// with a `#k` suffix in corner order.
pub fn corner_patch_samples(sample: &SegSample, size: usize) -> Result<Vec<SegSample>> {
    let images = corner_patches(&sample.image, size)?;
    let masks = corner_patches(&sample.mask, size)?;
    Ok(images
        .into_iter()
        .zip(masks)
        .enumerate()
        .map(|(k, (image, mask))| SegSample {
            image,
            mask,
            source_path: PathBuf::from(format!("{}#{k}", sample.source_path.display())),
            split: sample.split,
        })
        .collect())
}

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];

fn hw(t: &Tensor<f32>) -> Result<(usize, usize)> {
    let s = t.shape();
    let r = s.len();
    if r < 2 || s[..r - 2].iter().any(|&d| d != 1) {
        return Err(Error::invalid(format!("expected a single (H, W) map, got shape {s:?}")));
    }
    Ok((s[r - 2], s[r - 1]))
}

/// TP green, TN black, FP red, FN blue. Any non-zero value counts as
/// foreground.
pub fn render_overlay(pred: &Tensor<f32>, reference: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w) = hw(pred)?;
    if hw(reference)? != (h, w) {
        return Err(Error::ShapeMismatch { op: "render_overlay", lhs: pred.shape().to_vec(), rhs: reference.shape().to_vec() });
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let c = match (pred.data()[i] != 0.0, reference.data()[i] != 0.0) {
            (true, true) => TP_COLOR,
            (false, false) => TN_COLOR,
            (true, false) => FP_COLOR,
            (false, true) => FN_COLOR,
        };
        *px = Rgb(c);
    }
    Ok(img)
}

/// Recovers `(pred, reference)` maps of shape `(1, H, W)` from an overlay.
pub fn decode_overlay(img: &RgbImage) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (w, h) = img.dimensions();
    let mut p = Vec::with_capacity((w * h) as usize);
    let mut r = Vec::with_capacity((w * h) as usize);
    for px in img.pixels() {
        let (a, b) = match px.0 {
            TP_COLOR => (1.0, 1.0),
            TN_COLOR => (0.0, 0.0),
            FP_COLOR => (1.0, 0.0),
            FN_COLOR => (0.0, 1.0),
            other => return Err(Error::invalid(format!("colour {other:?} is not an overlay colour"))),
        };
        p.push(a);
        r.push(b);
    }
    let shape = vec![1, h as usize, w as usize];
    Ok((Tensor::new(shape.clone(), p)?, Tensor::new(shape, r)?))
}

/// 8-bit gray image with 255 on non-zero pixels.
pub fn mask_image(mask: &Tensor<f32>) -> Result<ImageBuffer<Luma<u8>, Vec<u8>>> {
    let (h, w) = hw(mask)?;
    let data = mask.data().iter().map(|&v| if v != 0.0 { 255 } else { 0 }).collect();
    Ok(ImageBuffer::from_raw(w as u32, h as u32, data).expect("mask size"))
}

/// `(C, H, W)` tensor in `[0, 1]` as an 8-bit gray or RGB image.
pub fn tensor_image(image: &Tensor<f32>) -> Result<image::DynamicImage> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => Ok(image::DynamicImage::ImageLuma8(
            ImageBuffer::from_raw(w as u32, h as u32, image.data().iter().map(|&v| q(v)).collect()).expect("size"),
        )),
        3 => {
            let d = image.data();
            let raw = (0..3 * plane).map(|i| q(d[(i % 3) * plane + i / 3])).collect();
            Ok(image::DynamicImage::ImageRgb8(ImageBuffer::from_raw(w as u32, h as u32, raw).expect("size")))
        }
        _ => Err(Error::invalid(format!("cannot encode {c} channels as an image"))),
    }
}

/// `n` synthetic RGB images of a bright disk on a darker, noisy background,
/// with the disk as the mask. Centres and radii vary per image.
pub fn synthetic_disks(n: usize, size: usize, seed: u64) -> Result<Vec<SegSample>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = size as f64;
        let radius = rng.uniform(0.15 * s, 0.3 * s);
        let cy = rng.uniform(radius, s - radius);
        let cx = rng.uniform(radius, s - radius);
        let tint = [rng.uniform(0.6, 0.9), rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9)];
        let mut mask = vec![0.0f32; size * size];
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= radius * radius {
                    mask[y * size + x] = 1.0;
                }
            }
        }
        let mut image = vec![0.0f32; 3 * size * size];
        for c in 0..3 {
            for p in 0..size * size {
                let base = if mask[p] == 1.0 { tint[c] } else { 0.15 };
                image[c * size * size + p] = (base + 0.05 * rng.normal()).clamp(0.0, 1.0) as f32;
            }
        }
        out.push(SegSample {
            image: Tensor::new(vec![3, size, size], image)?,
            mask: Tensor::new(vec![1, size, size], mask)?,
            source_path: PathBuf::from(format!("disk_{i:03}.png")),
            split: Some(Split::Train),
        });
    }
    Ok(out)
}

/// Writes samples as PNG pairs plus a `manifest.tsv` into `dir`; returns the
/// manifest path.
pub fn write_dataset(dir: &Path, samples: &[SegSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for (i, s) in samples.iter().enumerate() {
        let img = format!("img_{i:03}.png");
        let msk = format!("mask_{i:03}.png");
        tensor_image(&s.image)?.save(dir.join(&img))?;
        mask_image(&s.mask)?.save(dir.join(&msk))?;
        let split = s.split.map_or("-".to_string(), |s| s.to_string());
        lines.push_str(&format!("{img}\t{msk}\t{split}\n"));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, lines)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(names: &[&str]) -> DatasetManifest {
        DatasetManifest {
            name: "t".into(),
            entries: names
                .iter()
                .map(|n| ManifestEntry { image: PathBuf::from(n), mask: PathBuf::from(n), split: None })
                .collect(),
            resize_to: None,
        }
    }

    fn numbered(n: usize) -> DatasetManifest {
        let names: Vec<String> = (0..n).map(|i| format!("{i:04}.png")).collect();
        manifest(&names.iter().map(String::as_str).collect::<Vec<_>>())
    }

    #[test]
    fn named_split_sizes() {
        assert_eq!(make_split(&numbered(40), SplitConvention::Drive, 0).unwrap().sizes(), (20, 0, 20));
        assert_eq!(make_split(&numbered(612), SplitConvention::CvcClinicDb, 7).unwrap().sizes(), (490, 61, 61));
        assert_eq!(make_split(&numbered(28), SplitConvention::Chase, 0).unwrap().sizes(), (20, 0, 8));
        assert_eq!(make_split(&numbered(2750), SplitConvention::Isic2017, 0).unwrap().sizes(), (2000, 150, 600));
        assert_eq!(make_split(&numbered(176), SplitConvention::MoNuSegPatches, 0).unwrap().sizes(), (120, 0, 56));
        // Proportional fallback.
        assert_eq!(make_split(&numbered(10), SplitConvention::Drive, 0).unwrap().sizes(), (5, 0, 5));
    }

    #[test]
    fn chase_uses_filename_order() {
        let m = manifest(&["b.png", "a.png", "d.png", "c.png"]);
        let s = make_split(&m, SplitConvention::Chase, 0).unwrap();
        // 70% of 4 = 2.8 -> 3
        assert_eq!(s.train, vec![1, 0, 3]);
        assert_eq!(s.test, vec![2]);
    }

    #[test]
    fn splits_partition_the_manifest() {
        for (conv, n) in [(SplitConvention::CvcClinicDb, 612), (SplitConvention::Chase, 28), (SplitConvention::Mc, 138)] {
            let s = make_split(&numbered(n), conv, 3).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn holdout_takes_the_last_tenth() {
        let m = numbered(40);
        let s = hold_out_validation(&m, &make_split(&m, SplitConvention::Drive, 0).unwrap(), 0.1);
        assert_eq!(s.sizes(), (18, 2, 20));
        assert_eq!(s.val, vec![18, 19]);
    }

    #[test]
    fn manifest_parsing() {
        let m = DatasetManifest::parse("# c\na.png\tam.png\ttrain\n\nb.png\tbm.png\n", Path::new("/d"), "x").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].image, PathBuf::from("/d/a.png"));
        assert_eq!(m.entries[0].split, Some(Split::Train));
        assert_eq!(m.entries[1].split, None);
        assert!(DatasetManifest::parse("a.png\n", Path::new("/d"), "x").is_err());
        assert!(make_split(&m, SplitConvention::Manifest, 0).is_err());
    }

    #[test]
    fn corner_geometry() {
        assert_eq!(corner_offsets(1000, 1000, 512).unwrap(), [(0, 0), (0, 488), (488, 0), (488, 488)]);
        assert!(corner_offsets(500, 1000, 512).is_err());
        let t = Tensor::from_fn(vec![2, 4, 4], |i| i as f32).unwrap();
        let p = corner_patches(&t, 4).unwrap();
        assert!(p.iter().all(|x| x == &t));
    }

    #[test]
    fn mask_binarization() {
        let m = binarize_mask(&[0.0, 0.4, 0.6, 1.0], 2, 2, 2, 2);
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 1.0]);
        let z = binarize_mask(&[0.0; 4], 2, 2, 4, 4);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let up = binarize_mask(&[0.0, 1.0, 1.0, 0.0], 2, 2, 5, 7);
        assert!(up.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn overlay_colours() {
        let ones = Tensor::ones(vec![1, 2, 3]).unwrap();
        let zeros = Tensor::zeros(vec![1, 2, 3]).unwrap();
        assert!(render_overlay(&ones, &ones).unwrap().pixels().all(|p| p.0 == TP_COLOR));
        assert!(render_overlay(&ones, &zeros).unwrap().pixels().all(|p| p.0 == FP_COLOR));
        assert!(render_overlay(&zeros, &ones).unwrap().pixels().all(|p| p.0 == FN_COLOR));
        let (p, r) = decode_overlay(&render_overlay(&ones, &zeros).unwrap()).unwrap();
        assert_eq!((p, r), (ones, zeros));
    }

    #[test]
    fn channel_conversion() {
        let g = Tensor::from_fn(vec![1, 2, 2], |i| i as f32 / 4.0).unwrap();
        let rgb = convert_channels(&g, 3).unwrap();
        assert_eq!(rgb.shape(), &[3, 2, 2]);
        let back = convert_channels(&rgb, 1).unwrap();
        for (a, b) in back.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
