//! Two unpaired image domains: decoding, rescaling, normalization and
//! epoch batching.
//!
//! Directory layout is `<root>/photos/*` and `<root>/monet/*` with PNG or
//! JPEG files, discovered in lexicographic path order.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageFormat, ImageReader, RgbImage};
use log::warn;

use crate::error::{Error, Result};
use crate::models::IMAGE_CHANNELS;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const PHOTO_DIR: &str = "photos";
pub const MONET_DIR: &str = "monet";

/// Decoded 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
    pub source: PathBuf,
}

impl ImageRecord {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, source: impl Into<PathBuf>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * IMAGE_CHANNELS {
            return Err(Error::Argument(format!(
                "{width}×{height} RGB image cannot hold {} bytes",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels, source: source.into() })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("record dims match its buffer")
    }

    fn from_rgb_image(img: RgbImage, source: PathBuf) -> Self {
        let (w, h) = img.dimensions();
        Self { width: w as usize, height: h as usize, pixels: img.into_raw(), source }
    }

    /// Atomically writes the image as PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.to_rgb_image()
            .write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
            .map_err(|e| Error::Decode { path: path.to_path_buf(), detail: e.to_string() })?;
        crate::io::write_atomic(path, &bytes)
    }
}

/// Decodes a PNG or baseline JPEG file to RGB.
pub fn decode_image(path: &Path) -> Result<ImageRecord> {
    let fail = |detail: String| Error::Decode { path: path.to_path_buf(), detail };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Jpeg) => {}
        Some(other) => return Err(fail(format!("unsupported format {other:?}"))),
        None => return Err(fail("unrecognized image format".into())),
    }
    let img = reader.decode().map_err(|e| fail(e.to_string()))?;
    Ok(ImageRecord::from_rgb_image(img.to_rgb8(), path.to_path_buf()))
}

fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Image files in `dir`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_path(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Result of decoding a directory.
#[derive(Debug, Default)]
pub struct DomainScan {
    pub records: Vec<ImageRecord>,
    pub failures: Vec<Error>,
}

/// Decodes every image in `dir`. In strict mode the first bad file aborts
/// the scan; otherwise it is logged, recorded and skipped.
pub fn load_domain(dir: &Path, strict: bool) -> Result<DomainScan> {
    let mut scan = DomainScan::default();
    for path in list_images(dir)? {
        match decode_image(&path) {
            Ok(rec) => scan.records.push(rec),
            Err(e) if strict => return Err(e),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                scan.failures.push(e);
            }
        }
    }
    Ok(scan)
}

/// `pixel / 127.5 − 1`, shaped `1×H×W×3`.
pub fn normalize_to_unit_range<T: Element>(img: &ImageRecord) -> Tensor<T> {
    let scale = T::from_f64_lossy(127.5);
    let data = img.pixels.iter().map(|&p| T::from_f64_lossy(f64::from(p)) / scale - T::one()).collect();
    Tensor::new([1, img.height, img.width, IMAGE_CHANNELS], data).expect("record dims match its buffer")
}

/// `(x + 1)·127.5`, rounded and clamped to a byte.
pub fn to_pixel<T: Element>(x: T) -> u8 {
    ((x.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Inverse of [`normalize_to_unit_range`] for one batch item.
pub fn denormalize<T: Element>(t: &Tensor<T>, batch_index: usize) -> Result<ImageRecord> {
    let item = t.batch_item(batch_index)?;
    let [_, h, w, c] = item.nhwc()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::shape("denormalize", format!("expected 3 channels, got {:?}", t.dims())));
    }
    ImageRecord::new(w, h, item.data().iter().map(|&v| to_pixel(v)).collect(), PathBuf::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AugmentPolicy {
    #[default]
    Resize,
    ResizeFlip,
}

/// Bilinear (triangle-filter) resize to `target×target`, plus a horizontal
/// flip with probability 0.5 under [`AugmentPolicy::ResizeFlip`].
pub fn augment(img: &ImageRecord, target: usize, rng: &mut Rng, policy: AugmentPolicy) -> Result<ImageRecord> {
    if target == 0 {
        return Err(Error::Argument("augment target size must be ≥ 1".into()));
    }
    let mut out = if img.width == target && img.height == target {
        img.clone()
    } else {
        let resized = imageops::resize(&img.to_rgb_image(), target as u32, target as u32, FilterType::Triangle);
        ImageRecord::from_rgb_image(resized, img.source.clone())
    };
    if policy == AugmentPolicy::ResizeFlip && rng.uniform() < 0.5 {
        out = ImageRecord::from_rgb_image(imageops::flip_horizontal(&out.to_rgb_image()), out.source);
    }
    Ok(out)
}

/// `floor(max(|A|, |B|) / batch)`
pub fn steps_per_epoch(n_photo: usize, n_monet: usize, batch: usize) -> usize {
    n_photo.max(n_monet) / batch.max(1)
}

/// Unpaired photo and Monet collections, pre-resized to the working size.
#[derive(Debug, Clone)]
pub struct UnpairedDataset {
    photos: Vec<ImageRecord>,
    monet: Vec<ImageRecord>,
    image_size: usize,
    policy: AugmentPolicy,
    seed: u64,
}

impl UnpairedDataset {
    pub fn new(
        photos: Vec<ImageRecord>,
        monet: Vec<ImageRecord>,
        image_size: usize,
        policy: AugmentPolicy,
        seed: u64,
    ) -> Result<Self> {
        if photos.is_empty() || monet.is_empty() {
            return Err(Error::Config(format!(
                "both domains need images (photos: {}, monet: {})",
                photos.len(),
                monet.len()
            )));
        }
        // resizing draws no randomness; flips happen per epoch
        let mut rng = Rng::new(seed);
        let prep = |recs: Vec<ImageRecord>, rng: &mut Rng| -> Result<Vec<ImageRecord>> {
            recs.iter().map(|r| augment(r, image_size, rng, AugmentPolicy::Resize)).collect()
        };
        Ok(Self {
            photos: prep(photos, &mut rng)?,
            monet: prep(monet, &mut rng)?,
            image_size,
            policy,
            seed,
        })
    }

    /// Reads `<root>/photos` and `<root>/monet`.
    pub fn from_root(root: &Path, image_size: usize, policy: AugmentPolicy, seed: u64, strict: bool) -> Result<Self> {
        let photos = load_domain(&root.join(PHOTO_DIR), strict)?;
        let monet = load_domain(&root.join(MONET_DIR), strict)?;
        Self::new(photos.records, monet.records, image_size, policy, seed)
    }

    pub fn photos(&self) -> &[ImageRecord] {
        &self.photos
    }

    pub fn monet(&self) -> &[ImageRecord] {
        &self.monet
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn steps_per_epoch(&self, batch: usize) -> usize {
        steps_per_epoch(self.photos.len(), self.monet.len(), batch)
    }

    /// Image indices drawn for each domain over one epoch, batch-major. The
    /// larger domain is a single permutation; the smaller repeats with a
    /// fresh permutation per pass.
    pub fn epoch_order(&self, batch: usize, epoch: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if batch == 0 {
            return Err(Error::Argument("batch size must be ≥ 1".into()));
        }
        let needed = self.steps_per_epoch(batch) * batch;
        let draw = |n: usize, stream: u64| {
            let mut rng = Rng::with_stream(self.seed, stream);
            let mut order = Vec::with_capacity(needed);
            while order.len() < needed {
                order.extend(rng.permutation(n));
            }
            order.truncate(needed);
            order
        };
        let e = epoch as u64;
        Ok((draw(self.photos.len(), 4 * e), draw(self.monet.len(), 4 * e + 1)))
    }

    /// Batch pairs for one epoch, `floor(max(|A|, |B|) / batch)` of them.
    pub fn batches<T: Element>(&self, batch: usize, epoch: usize) -> Result<UnpairedBatches<'_, T>> {
        let (photo_order, monet_order) = self.epoch_order(batch, epoch)?;
        Ok(UnpairedBatches {
            ds: self,
            batch,
            photo_order,
            monet_order,
            next: 0,
            flip_rng: Rng::with_stream(self.seed, 4 * epoch as u64 + 2),
            _elem: std::marker::PhantomData,
        })
    }

    fn tensor<T: Element>(&self, rec: &ImageRecord, rng: &mut Rng) -> Tensor<T> {
        let img = augment(rec, self.image_size, rng, self.policy).expect("image size is positive");
        normalize_to_unit_range(&img)
    }
}

pub struct UnpairedBatches<'a, T> {
    ds: &'a UnpairedDataset,
    batch: usize,
    photo_order: Vec<usize>,
    monet_order: Vec<usize>,
    next: usize,
    flip_rng: Rng,
    _elem: std::marker::PhantomData<T>,
}

impl<T: Element> Iterator for UnpairedBatches<'_, T> {
    type Item = (Tensor<T>, Tensor<T>);

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.next * self.batch;
        if start >= self.photo_order.len() {
            return None;
        }
        self.next += 1;
        let range = start..start + self.batch;
        let photos: Vec<Tensor<T>> = self.photo_order[range.clone()]
            .iter()
            .map(|&i| self.ds.tensor(&self.ds.photos[i], &mut self.flip_rng))
            .collect();
        let monet: Vec<Tensor<T>> = self.monet_order[range]
            .iter()
            .map(|&i| self.ds.tensor(&self.ds.monet[i], &mut self.flip_rng))
            .collect();
        Some((
            Tensor::stack(&photos).expect("uniform image size"),
            Tensor::stack(&monet).expect("uniform image size"),
        ))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.photo_order.len() / self.batch - self.next;
        (left, Some(left))
    }
}

impl<T: Element> ExactSizeIterator for UnpairedBatches<'_, T> {}
