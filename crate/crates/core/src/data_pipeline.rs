//! Raster and label handling: value-range normalization, overlapping patch
//! tiling and stitching, PNG I/O, dataset manifests and pair sampling.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_OVERLAP: usize = 32;

/// Number of label classes, background included.
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "building", "road", "tree"];

/// Prediction-map palette: background black, building red, road white,
/// tree green.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [[0, 0, 0], [255, 0, 0], [255, 255, 255], [0, 160, 0]];

/// Declared value range of a raster's samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// Integer intensities in `0..=255`.
    Byte,
    /// Floats in `[-1, 1]`, the network domain.
    Signed,
}

/// A multi-channel image stored as a `[1, C, H, W]` tensor plus its
/// declared value range.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage<T> {
    pixels: Tensor<T>,
    range: ValueRange,
}

impl<T: Scalar> RasterImage<T> {
    pub fn new(pixels: Tensor<T>, range: ValueRange) -> Result<Self> {
        if pixels.batch() != 1 {
            return Err(invalid_input!("raster must hold exactly one image, got batch {}", pixels.batch()));
        }
        let ok = match range {
            ValueRange::Byte => pixels
                .data()
                .iter()
                .all(|&v| v >= T::zero() && v <= T::lit(255.0) && v == v.round()),
            ValueRange::Signed => pixels.data().iter().all(|&v| v >= -T::one() && v <= T::one()),
        };
        if !ok {
            return Err(invalid_input!("raster contents outside declared range {range:?}"));
        }
        Ok(RasterImage { pixels, range })
    }

    /// Builds a byte raster from interleaved `H x W x C` samples.
    pub fn from_interleaved_u8(height: usize, width: usize, channels: usize, data: &[u8]) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(invalid_input!("expected {} samples, got {}", height * width * channels, data.len()));
        }
        let t = Tensor::from_fn([1, channels, height, width], |[_, c, y, x]| {
            T::lit(f64::from(data[(y * width + x) * channels + c]))
        });
        Ok(RasterImage { pixels: t, range: ValueRange::Byte })
    }

    /// Interleaved `H x W x C` bytes (rounding and clamping signed data).
    pub fn to_interleaved_u8(&self) -> Vec<u8> {
        let byte = match self.range {
            ValueRange::Byte => self.clone(),
            ValueRange::Signed => denormalize(self),
        };
        let [_, c, h, w] = byte.pixels.shape();
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(byte.pixels.at([0, ch, y, x]).to_u8().unwrap_or(0));
                }
            }
        }
        out
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor<T> {
        self.pixels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn channels(&self) -> usize {
        self.pixels.channels()
    }

    /// Per-channel mean of the samples.
    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels())
            .map(|c| {
                let p = self.pixels.plane_slice(0, c);
                p.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / p.len() as f64
            })
            .collect()
    }
}

/// Maps `0..=255` to `[-1, 1]` via `x / 127.5 - 1`.
pub fn normalize<T: Scalar>(image: &RasterImage<T>) -> RasterImage<T> {
    match image.range {
        ValueRange::Signed => image.clone(),
        ValueRange::Byte => {
            let k = T::lit(127.5);
            RasterImage {
                pixels: image.pixels.map(|v| (v / k - T::one()).max(-T::one()).min(T::one())),
                range: ValueRange::Signed,
            }
        }
    }
}

/// Inverse of [`normalize`], rounding to the nearest integer and clamping
/// to `0..=255`.
pub fn denormalize<T: Scalar>(image: &RasterImage<T>) -> RasterImage<T> {
    match image.range {
        ValueRange::Byte => image.clone(),
        ValueRange::Signed => {
            let k = T::lit(127.5);
            RasterImage {
                pixels: image
                    .pixels
                    .map(|v| ((v + T::one()) * k).round().max(T::zero()).min(T::lit(255.0))),
                range: ValueRange::Byte,
            }
        }
    }
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::with_classes(height, width, data, NUM_CLASSES)
    }

    pub fn with_classes(height: usize, width: usize, data: Vec<u8>, num_classes: usize) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid_input!("label raster needs {} ids, got {}", height * width, data.len()));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(invalid_input!("class id {bad} outside 0..{num_classes}"));
        }
        Ok(LabelRaster { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelRaster { height, width, data: vec![class; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Crops a window; labels are copied, never resampled.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(invalid_input!("crop outside label raster"));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in top..top + h {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + w]);
        }
        Ok(LabelRaster { height: h, width: w, data })
    }
}

/// Tiling of a raster into square, overlapping patches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub overlap: usize,
    pub height: usize,
    pub width: usize,
    /// Top-left corners, row-major.
    pub origins: Vec<(usize, usize)>,
}

/// Origins along one axis: multiples of the stride, with the final origin
/// clamped so the last patch ends at the border.
fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut o = 0;
    while o + patch < len {
        o += stride;
        out.push(o.min(len - patch));
    }
    out.dedup();
    out
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize, overlap: usize) -> Result<Self> {
        if patch_size == 0 || overlap >= patch_size {
            return Err(invalid_input!("overlap {overlap} must be smaller than patch size {patch_size}"));
        }
        if height < patch_size || width < patch_size {
            return Err(invalid_input!("image {height}x{width} is smaller than the {patch_size}px patch"));
        }
        let stride = patch_size - overlap;
        let rows = axis_origins(height, patch_size, stride);
        let cols = axis_origins(width, patch_size, stride);
        let origins = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(PatchGrid { patch_size, overlap, height, width, origins })
    }

    pub fn stride(&self) -> usize {
        self.patch_size - self.overlap
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if self
            .origins
            .iter()
            .any(|&(r, c)| r + p > self.height || c + p > self.width)
        {
            return Err(invalid_input!("patch grid origin outside {}x{}", self.height, self.width));
        }
        Ok(())
    }
}

/// Cuts `image` into overlapping square patches.
pub fn extract_patches<T: Scalar>(
    image: &Tensor<T>,
    patch_size: usize,
    overlap: usize,
) -> Result<(Vec<Tensor<T>>, PatchGrid)> {
    if image.batch() != 1 {
        return Err(invalid_input!("extract_patches takes a single image"));
    }
    let grid = PatchGrid::new(image.height(), image.width(), patch_size, overlap)?;
    let patches = grid
        .origins
        .iter()
        .map(|&(r, c)| crop(image, r, c, patch_size, patch_size))
        .collect();
    Ok((patches, grid))
}

/// Label patches on the same grid (no interpolation).
pub fn extract_label_patches(labels: &LabelRaster, grid: &PatchGrid) -> Result<Vec<LabelRaster>> {
    if (labels.height, labels.width) != (grid.height, grid.width) {
        return Err(invalid_input!("label raster does not match the patch grid"));
    }
    grid.origins
        .iter()
        .map(|&(r, c)| labels.crop(r, c, grid.patch_size, grid.patch_size))
        .collect()
}

pub fn crop<T: Scalar>(image: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn([1, image.channels(), h, w], |[_, c, y, x]| image.at([0, c, top + y, left + x]))
}

/// Extends `x` to `h x w` by repeating its last row and column.
pub fn pad_replicate<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    if (h, w) == (x.height(), x.width()) {
        return x.clone();
    }
    let (xh, xw) = (x.height(), x.width());
    Tensor::from_fn([x.batch(), x.channels(), h, w], |[n, c, y, xx]| {
        x.at([n, c, y.min(xh - 1), xx.min(xw - 1)])
    })
}

/// Applies a spatially aligned patch function to a whole raster. Rasters
/// that fit in one tile are edge-padded to a multiple of `multiple` and
/// processed at once; larger rasters are tiled with `patch_size`/`overlap`
/// and stitched. The output is cropped back to the input size.
pub fn map_tiled<T: Scalar>(
    image: &Tensor<T>,
    patch_size: usize,
    overlap: usize,
    multiple: usize,
    mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if image.batch() != 1 || image.height() == 0 || image.width() == 0 {
        return Err(invalid_input!("expected one non-empty image, got shape {:?}", image.shape()));
    }
    if multiple == 0 || patch_size % multiple != 0 || overlap >= patch_size {
        return Err(invalid_input!(
            "tile size {patch_size} must be a multiple of {multiple} and exceed the overlap {overlap}"
        ));
    }
    let (h, w) = (image.height(), image.width());
    if h <= patch_size && w <= patch_size {
        let padded = pad_replicate(image, h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
        return Ok(crop(&f(&padded)?, 0, 0, h, w));
    }
    let padded = pad_replicate(image, h.max(patch_size), w.max(patch_size));
    let (patches, grid) = extract_patches(&padded, patch_size, overlap)?;
    let outs = patches.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
    let out = stitch_patches(&outs, &grid, (padded.height(), padded.width()))?;
    Ok(crop(&out, 0, 0, h, w))
}

/// Reassembles patches; overlapping pixels take the uniform average of
/// every contribution.
pub fn stitch_patches<T: Scalar>(
    patches: &[Tensor<T>],
    grid: &PatchGrid,
    out_dims: (usize, usize),
) -> Result<Tensor<T>> {
    grid.validate()?;
    if out_dims != (grid.height, grid.width) {
        return Err(invalid_input!(
            "grid is for {}x{}, asked for {}x{}",
            grid.height,
            grid.width,
            out_dims.0,
            out_dims.1
        ));
    }
    if patches.len() != grid.len() || patches.is_empty() {
        return Err(invalid_input!("{} patches for a grid of {}", patches.len(), grid.len()));
    }
    let c = patches[0].channels();
    let p = grid.patch_size;
    for t in patches {
        if t.shape() != [1, c, p, p] {
            return Err(invalid_input!("patch shape {:?}, expected {:?}", t.shape(), [1, c, p, p]));
        }
    }
    let (h, w) = out_dims;
    let mut out = Tensor::zeros([1, c, h, w]);
    let mut count = vec![0u32; h * w];
    for (patch, &(r, col)) in patches.iter().zip(&grid.origins) {
        for y in 0..p {
            for x in 0..p {
                let k = &mut count[(r + y) * w + col + x];
                *k += 1;
                let inv = T::one() / T::from_u32(*k).expect("small count");
                for ch in 0..c {
                    // Running mean: exact when all contributions agree.
                    let idx = [0, ch, r + y, col + x];
                    let m = out.at(idx);
                    out.set(idx, m + (patch.at([0, ch, y, x]) - m) * inv);
                }
            }
        }
    }
    Ok(out)
}

/// Uniform independent draw of one item from each dataset.
pub fn sample_pair<'a, X>(a: &'a [X], b: &'a [X], rng: &mut impl Rng) -> Result<(&'a X, &'a X)> {
    let (i, j) = sample_pair_indices(a.len(), b.len(), rng)?;
    Ok((&a[i], &b[j]))
}

pub fn sample_pair_indices(len_a: usize, len_b: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if len_a == 0 || len_b == 0 {
        return Err(invalid_input!("cannot sample from an empty dataset"));
    }
    Ok((rng.random_range(0..len_a), rng.random_range(0..len_b)))
}

// ---------------------------------------------------------------------------
// PNG I/O

fn png_decoder(path: &Path) -> Result<png::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    dec.read_info().map_err(|e| Error::format(path, e))
}

/// Reads an 8-bit PNG as a byte raster (gray, gray+alpha, RGB or RGBA;
/// alpha is dropped).
pub fn read_image<T: Scalar>(path: &Path) -> Result<RasterImage<T>> {
    let mut reader = png_decoder(path)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (src_c, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let data: Vec<u8> = buf[..w * h * src_c]
        .chunks(src_c)
        .flat_map(|px| px[..keep].to_vec())
        .collect();
    RasterImage::from_interleaved_u8(h, w, keep, &data)
}

fn png_writer(path: &Path, w: usize, h: usize, color: png::ColorType) -> Result<png::Encoder<'static, BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    Ok(enc)
}

/// Writes a raster as 8-bit PNG (signed rasters are denormalized first).
pub fn write_image<T: Scalar>(path: &Path, image: &RasterImage<T>) -> Result<()> {
    let color = match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(invalid_input!("cannot write a {c}-channel PNG")),
    };
    let enc = png_writer(path, image.width(), image.height(), color)?;
    let mut w = enc.write_header().map_err(|e| Error::format(path, e))?;
    w.write_image_data(&image.to_interleaved_u8())
        .map_err(|e| Error::format(path, e))?;
    w.finish().map_err(|e| Error::format(path, e))
}

/// Reads a single-channel (or indexed) label PNG whose sample values are
/// class ids.
pub fn read_labels(path: &Path) -> Result<LabelRaster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    if !matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed)
        || info.bit_depth != png::BitDepth::Eight
    {
        return Err(Error::format(path, "labels must be 8-bit single-channel or indexed"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    LabelRaster::new(h, w, buf[..w * h].to_vec()).map_err(|e| Error::format(path, e))
}

/// Writes class ids as an 8-bit grayscale PNG.
pub fn write_labels(path: &Path, labels: &LabelRaster) -> Result<()> {
    let enc = png_writer(path, labels.width, labels.height, png::ColorType::Grayscale)?;
    let mut w = enc.write_header().map_err(|e| Error::format(path, e))?;
    w.write_image_data(&labels.data).map_err(|e| Error::format(path, e))?;
    w.finish().map_err(|e| Error::format(path, e))
}

/// Writes class ids as an indexed-color PNG with [`PALETTE`]. Reading it
/// back with [`read_labels`] returns the ids.
pub fn write_prediction_map(path: &Path, labels: &LabelRaster) -> Result<()> {
    let mut enc = png_writer(path, labels.width, labels.height, png::ColorType::Indexed)?;
    enc.set_palette(PALETTE.concat());
    let mut w = enc.write_header().map_err(|e| Error::format(path, e))?;
    w.write_image_data(&labels.data).map_err(|e| Error::format(path, e))?;
    w.finish().map_err(|e| Error::format(path, e))
}

// ---------------------------------------------------------------------------
// Manifests

pub const MANIFEST_VERSION: u32 = 1;

/// One image and its optional label raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

/// The images of one domain. Relative paths resolve against the directory
/// holding the manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub domain: String,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(domain: impl Into<String>, entries: Vec<ManifestEntry>) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            domain: domain.into(),
            entries,
            base_dir: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {}", m.version)));
        }
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn image_paths(&self) -> Vec<PathBuf> {
        self.entries.iter().map(|e| self.resolve(&e.image)).collect()
    }

    /// Loads every image, normalized to `[-1, 1]`.
    pub fn load_images<T: Scalar>(&self) -> Result<Vec<RasterImage<T>>> {
        self.image_paths()
            .iter()
            .map(|p| read_image(p).map(|r| normalize(&r)))
            .collect()
    }

    /// Loads every label raster; errors if an entry has none.
    pub fn load_labels(&self) -> Result<Vec<LabelRaster>> {
        self.entries
            .iter()
            .map(|e| {
                let p = e
                    .label
                    .as_ref()
                    .ok_or_else(|| invalid_input!("manifest entry {} has no label", e.image.display()))?;
                read_labels(&self.resolve(p))
            })
            .collect()
    }
}
