//! Single-channel rasters and the pixel-domain operations everything else builds on.
//!
//! Boundary handling is mirror reflection without repeating the edge sample
//! (`.. 2 1 | 0 1 2 .. n-1 | n-2 ..`) for both convolution and resampling.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::format;
use crate::kernel::BlurKernel;
use crate::rng::SeededStream;

/// Rec. 601 luma weights.
pub const REC601: [f64; 3] = [0.299, 0.587, 0.114];

/// Catmull-Rom member of the Keys cubic family.
pub const BICUBIC_A: f64 = -0.5;

/// A row-major raster of finite `f64` samples.
///
/// Images produced by the pixel operations in this module are clamped to `[0, 1]`;
/// transform coefficients (e.g. wavelet bands) reuse the type without that bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::arg(format!("image dimensions must be >= 1, got {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::arg(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("non-finite sample at index {i}")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0);
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0);
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    // Caller guarantees the length; used on hot paths.
    pub(crate) fn from_raw_parts(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn transposed(&self) -> Self {
        Self::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::arg(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + x0..row + x0 + width]);
        }
        Ok(Self::from_raw_parts(width, height, data))
    }

    pub fn center_crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width || height > self.height {
            return Err(Error::arg(format!(
                "center crop {width}x{height} larger than {}x{} image",
                self.width, self.height
            )));
        }
        self.crop((self.width - width) / 2, (self.height - height) / 2, width, height)
    }
}

/// How multi-channel files collapse to one plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelPolicy {
    #[default]
    Luminance,
    Average,
}

impl ChannelPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            ChannelPolicy::Luminance => "luminance",
            ChannelPolicy::Average => "average",
        }
    }
}

impl std::fmt::Display for ChannelPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "luminance" => Ok(ChannelPolicy::Luminance),
            "average" => Ok(ChannelPolicy::Average),
            _ => Err(Error::arg(format!("unknown channel policy {s:?} (luminance, average)"))),
        }
    }
}

/// Image files (`.png`, `.fqa`) directly inside `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "fqa")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Every image of [`list_images`] loaded as one plane, with its file stem.
pub fn load_dir(dir: impl AsRef<Path>, policy: ChannelPolicy) -> Result<Vec<(String, ImagePlane)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, load_image(&p, policy)?))
        })
        .collect()
}

/// Loads an 8/16-bit PNG or an FQA1 raw file as one plane in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>, policy: ChannelPolicy) -> Result<ImagePlane> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(format::RAW_MAGIC) {
        let (w, h, values) = format::read_raw(&mut bytes.as_slice())?;
        return ImagePlane::new(w, h, values).map(ImagePlane::clamped);
    }
    decode_png(&bytes, policy).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn decode_png(bytes: &[u8], policy: ChannelPolicy) -> Result<ImagePlane> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("PNG decode: {e}")))?;
    let depth = reader.info().bit_depth;
    if !matches!(depth, png::BitDepth::Eight | png::BitDepth::Sixteen) {
        return Err(Error::Format(format!("unsupported PNG bit depth {depth:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("PNG decode: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf[..info.buffer_size()]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect(),
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        other => return Err(Error::Format(format!("unsupported PNG bit depth {other:?}"))),
    };
    let stride = info.line_size / if info.bit_depth == png::BitDepth::Sixteen { 2 } else { 1 };
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &samples[y * stride..y * stride + w * channels];
        for px in row.chunks_exact(channels) {
            let v = match channels {
                1 | 2 => px[0],
                _ => match policy {
                    ChannelPolicy::Luminance => REC601[0] * px[0] + REC601[1] * px[1] + REC601[2] * px[2],
                    ChannelPolicy::Average => (px[0] + px[1] + px[2]) / 3.0,
                },
            };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    ImagePlane::new(w, h, data)
}

/// Writes an 8-bit grayscale PNG (values rounded from `[0, 1]`).
pub fn save_png(img: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("PNG encode: {e}")))?;
        let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Format(format!("PNG encode: {e}")))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes an RGB PNG from three planes of equal size.
pub fn save_png_rgb(planes: [&ImagePlane; 3], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = planes[0].dims();
    if planes.iter().any(|p| p.dims() != (w, h)) {
        return Err(Error::arg("RGB planes differ in size"));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("PNG encode: {e}")))?;
        let mut bytes = Vec::with_capacity(w * h * 3);
        for i in 0..w * h {
            for p in &planes {
                bytes.push(to_u8(p.data[i]));
            }
        }
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Format(format!("PNG encode: {e}")))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads the three color channels of a PNG separately (gray files yield three copies).
pub fn load_rgb(path: impl AsRef<Path>) -> Result<[ImagePlane; 3]> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(format::RAW_MAGIC) {
        let img = load_image(path, ChannelPolicy::Luminance)?;
        return Ok([img.clone(), img.clone(), img]);
    }
    let mut decoder = png::Decoder::new(Cursor::new(bytes.as_slice()));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: PNG decode: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: PNG decode: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let mut planes: [Vec<f64>; 3] = Default::default();
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * channels];
        for px in row.chunks_exact(channels) {
            for (c, plane) in planes.iter_mut().enumerate() {
                let s = if channels >= 3 { px[c] } else { px[0] };
                plane.push(s as f64 / 255.0);
            }
        }
    }
    let [r, g, b] = planes;
    Ok([
        ImagePlane::new(w, h, r)?,
        ImagePlane::new(w, h, g)?,
        ImagePlane::new(w, h, b)?,
    ])
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the FQA1 raw float format (values stored as `f32`).
pub fn save_raw(img: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    format::write_raw(&mut buf, img.width, img.height, &img.data).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Keys cubic convolution weight with `a = -0.5`.
#[inline]
pub fn cubic_weight(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

struct AxisTaps {
    start: Vec<isize>,
    weights: Vec<Vec<f64>>,
}

// Per output sample: source center (o + 0.5) / scale - 0.5. Downscaling stretches the
// cubic by 1/scale so the filter also acts as the anti-alias prefilter.
fn axis_taps(out_len: usize, scale: f64) -> AxisTaps {
    let stretch = if scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / stretch;
    let mut start = Vec::with_capacity(out_len);
    let mut weights = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let center = (o as f64 + 0.5) / scale - 0.5;
        let lo = (center - support).floor() as isize + 1;
        let hi = (center + support).ceil() as isize - 1;
        let mut w: Vec<f64> = (lo..=hi)
            .map(|i| cubic_weight((i as f64 - center) * stretch))
            .collect();
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        start.push(lo);
        weights.push(w);
    }
    AxisTaps { start, weights }
}

/// Output side length for a resample of `len` by `scale`.
pub fn scaled_len(len: usize, scale: f64) -> usize {
    (len as f64 * scale + 1e-9).floor() as usize
}

/// Catmull-Rom bicubic resampling by `scale` in both axes, clamped to `[0, 1]`.
pub fn resample_bicubic(img: &ImagePlane, scale: f64) -> Result<ImagePlane> {
    Ok(resample_values(img, scale)?.clamped())
}

/// As [`resample_bicubic`] but without the final clamp.
pub fn resample_values(img: &ImagePlane, scale: f64) -> Result<ImagePlane> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::arg(format!("resample scale must be > 0, got {scale}")));
    }
    let out_w = scaled_len(img.width, scale);
    let out_h = scaled_len(img.height, scale);
    if out_w == 0 || out_h == 0 {
        return Err(Error::arg(format!(
            "resampling {}x{} by {scale} gives an empty image",
            img.width, img.height
        )));
    }
    if scale == 1.0 {
        return Ok(img.clone());
    }
    let (w, h) = img.dims();
    let xt = axis_taps(out_w, scale);
    let yt = axis_taps(out_h, scale);

    // horizontal pass: out_w x h
    let mut tmp = vec![0.0; out_w * h];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        let dst = &mut tmp[y * out_w..(y + 1) * out_w];
        for (o, d) in dst.iter_mut().enumerate() {
            let s = xt.start[o];
            *d = xt.weights[o]
                .iter()
                .enumerate()
                .map(|(k, &wt)| wt * row[reflect(s + k as isize, w)])
                .sum();
        }
    }
    // vertical pass
    let mut out = vec![0.0; out_w * out_h];
    for (o, dst) in out.chunks_exact_mut(out_w).enumerate() {
        let s = yt.start[o];
        for (k, &wt) in yt.weights[o].iter().enumerate() {
            let src = &tmp[reflect(s + k as isize, h) * out_w..][..out_w];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += wt * v;
            }
        }
    }
    Ok(ImagePlane::from_raw_parts(out_w, out_h, out))
}

/// "Same"-size 2D convolution with reflect boundaries, clamped to `[0, 1]`.
pub fn convolve2d(img: &ImagePlane, kernel: &BlurKernel) -> Result<ImagePlane> {
    let (w, h) = img.dims();
    let out = convolve_values(img.data(), w, h, kernel)?;
    Ok(ImagePlane::from_raw_parts(w, h, out).clamped())
}

/// Unclamped convolution over a raw row-major buffer. Linear in `data`.
pub fn convolve_values(data: &[f64], width: usize, height: usize, kernel: &BlurKernel) -> Result<Vec<f64>> {
    let side = kernel.side();
    if side.is_multiple_of(2) {
        return Err(Error::arg(format!("kernel side must be odd, got {side}")));
    }
    if side > width.min(height) {
        return Err(Error::arg(format!(
            "kernel side {side} exceeds image {width}x{height}"
        )));
    }
    assert_eq!(data.len(), width * height);
    let c = side / 2;
    let pw = width + 2 * c;
    let ph = height + 2 * c;
    let mut padded = vec![0.0; pw * ph];
    for py in 0..ph {
        let sy = reflect(py as isize - c as isize, height);
        let src = &data[sy * width..(sy + 1) * width];
        let dst = &mut padded[py * pw..(py + 1) * pw];
        for (px, d) in dst.iter_mut().enumerate() {
            *d = src[reflect(px as isize - c as isize, width)];
        }
    }
    // out(y, x) = sum_{j,i} k(j, i) * img(y - (j - c), x - (i - c)); with the flipped
    // kernel this is a plain correlation over the padded buffer.
    let weights = kernel.weights();
    let mut out = vec![0.0; width * height];
    for j in 0..side {
        for i in 0..side {
            let wt = weights[(side - 1 - j) * side + (side - 1 - i)];
            if wt == 0.0 {
                continue;
            }
            for y in 0..height {
                let src = &padded[(y + j) * pw + i..][..width];
                let dst = &mut out[y * width..(y + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    Ok(out)
}

/// Geometry of a reproducible patch draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
    pub count: usize,
    pub seed: u64,
}

impl PatchSpec {
    pub fn new(size: usize, count: usize, seed: u64) -> Self {
        Self {
            size,
            stride: 1,
            count,
            seed,
        }
    }

    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        if self.size == 0 || self.stride == 0 || self.count == 0 {
            return Err(Error::arg(format!(
                "patch size, stride and count must be >= 1 (got {}, {}, {})",
                self.size, self.stride, self.count
            )));
        }
        if self.size > width.min(height) {
            return Err(Error::arg(format!(
                "patch size {} larger than {width}x{height} image",
                self.size
            )));
        }
        Ok(())
    }
}

/// Top-left offsets `(x, y)` of the patches [`sample_patches`] would cut.
///
/// Offsets lie on the stride lattice; each axis draws `below(positions)` from the
/// seeded stream, x before y.
pub fn sample_patch_offsets(width: usize, height: usize, spec: &PatchSpec) -> Result<Vec<(usize, usize)>> {
    spec.validate_for(width, height)?;
    let nx = ((width - spec.size) / spec.stride + 1) as u64;
    let ny = ((height - spec.size) / spec.stride + 1) as u64;
    let mut rng = SeededStream::new(spec.seed);
    Ok((0..spec.count)
        .map(|_| {
            let x = rng.below(nx) as usize * spec.stride;
            let y = rng.below(ny) as usize * spec.stride;
            (x, y)
        })
        .collect())
}

pub fn sample_patches(img: &ImagePlane, spec: &PatchSpec) -> Result<Vec<ImagePlane>> {
    sample_patch_offsets(img.width, img.height, spec)?
        .into_iter()
        .map(|(x, y)| img.crop(x, y, spec.size, spec.size))
        .collect()
}

/// Non-overlapping `size` tiles covering the image, centered; partial tiles dropped.
pub fn tile_patches(img: &ImagePlane, size: usize) -> Result<Vec<ImagePlane>> {
    if size == 0 || size > img.width.min(img.height) {
        return Err(Error::arg(format!(
            "tile size {size} does not fit {}x{} image",
            img.width, img.height
        )));
    }
    let nx = img.width / size;
    let ny = img.height / size;
    let x0 = (img.width - nx * size) / 2;
    let y0 = (img.height - ny * size) / 2;
    let mut out = Vec::with_capacity(nx * ny);
    for ty in 0..ny {
        for tx in 0..nx {
            out.push(img.crop(x0 + tx * size, y0 + ty * size, size, size)?);
        }
    }
    Ok(out)
}
