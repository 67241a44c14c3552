//! Procedural image corpus with natural-image statistics.
//!
//! Each image is a dead-leaves composition (opaque disks with a power-law radius
//! distribution, which is statistically scale invariant) over a `1/f` Gaussian field,
//! finished with a slight Gaussian blur so the finest scale is not aliased. Scale
//! invariance is what lets a downsampled copy of the corpus stand in for the corpus
//! itself, the property kernel estimation relies on.

use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::Result;
use crate::imaging::{self, ImagePlane};
use crate::kernel::{gaussian_kernel, KernelParams};
use crate::rng::SeededStream;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub count: usize,
    /// Side of each square image; a power of two keeps the field synthesis fast.
    pub size: usize,
    pub seed: u64,
    pub disks: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Amplitude of the `1/f` field added on top of the disks.
    pub field_gain: f64,
    /// Std-dev of the finishing blur, pixels.
    pub intrinsic_blur: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            count: 16,
            size: 1024,
            seed: 2021,
            disks: 60_000,
            min_radius: 1.5,
            max_radius: 4096.0,
            field_gain: 0.12,
            intrinsic_blur: 0.7,
        }
    }
}

/// Generates image `index` of the corpus; images are independent of each other.
pub fn generate_image(spec: &CorpusSpec, index: usize) -> Result<ImagePlane> {
    let n = spec.size;
    let mut rng = SeededStream::derive(spec.seed, index as u64);
    let field = pink_field(n, &mut rng);
    let mut data = vec![0.5; n * n];
    paint_disks(&mut data, n, spec, &mut rng);
    for (d, f) in data.iter_mut().zip(&field) {
        *d += spec.field_gain * f;
    }
    let img = ImagePlane::new(n, n, data)?;
    let side = 2 * (3.0 * spec.intrinsic_blur).ceil() as usize + 1;
    let k = gaussian_kernel(&KernelParams::isotropic(spec.intrinsic_blur)?, side.max(3))?;
    imaging::convolve2d(&img, &k)
}

/// All images of the corpus, generated on the worker pool.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<ImagePlane>> {
    crate::par::map_range(spec.count, |i| generate_image(spec, i)).into_iter().collect()
}

/// Writes the corpus as `img_XX.png` files and returns their paths in order.
pub fn write_corpus(spec: &CorpusSpec, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let images = generate(spec)?;
    let mut paths = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let p = dir.join(format!("img_{i:02}.png"));
        imaging::save_png(img, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Zero-mean field with amplitude spectrum `1/|f|`, scaled to unit std-dev.
///
/// An FFT-synthesized field is periodic over the image, which would make a whole
/// downsampled image look smoother at its borders than a tile cut from a larger
/// scene. Modes below one cycle per image are therefore added explicitly, as if the
/// image were a window into a canvas `CANVAS` times larger.
fn pink_field(n: usize, rng: &mut SeededStream) -> Vec<f64> {
    const CANVAS: usize = 8;
    let mut buf: Vec<Complex<f64>> = Vec::with_capacity(n * n);
    for ky in 0..n {
        let fy = if ky <= n / 2 { ky as f64 } else { ky as f64 - n as f64 };
        for kx in 0..n {
            let fx = if kx <= n / 2 { kx as f64 } else { kx as f64 - n as f64 };
            let f = (fx * fx + fy * fy).sqrt();
            let (a, b) = (rng.normal(), rng.normal());
            let amp = if f == 0.0 { 0.0 } else { 1.0 / f };
            buf.push(Complex::new(a * amp, b * amp));
        }
    }
    let fft = FftPlanner::new().plan_fft_inverse(n);
    fft.process(&mut buf);
    let mut t = vec![Complex::new(0.0, 0.0); n * n];
    for y in 0..n {
        for x in 0..n {
            t[x * n + y] = buf[y * n + x];
        }
    }
    fft.process(&mut t);
    // the real part of a transform of white complex noise is a real Gaussian field
    let mut out = vec![0.0; n * n];
    for x in 0..n {
        for y in 0..n {
            out[y * n + x] = t[x * n + y].re;
        }
    }

    // Canvas modes (kx, ky) / CANVAS cycles per image with |k| < CANVAS. Modes are
    // CANVAS times denser per axis, so each carries 1/CANVAS of the amplitude.
    let c = CANVAS as isize;
    let mut ex = vec![Complex::new(0.0, 0.0); n];
    let mut ey = vec![Complex::new(0.0, 0.0); n];
    for ky in -c + 1..c {
        for kx in -c + 1..c {
            let k2 = kx * kx + ky * ky;
            if k2 == 0 || k2 >= c * c {
                continue;
            }
            let f = (k2 as f64).sqrt() / CANVAS as f64;
            let amp = 1.0 / (f * CANVAS as f64);
            let coef = Complex::new(rng.normal() * amp, rng.normal() * amp);
            let w = 2.0 * std::f64::consts::PI / (n * CANVAS) as f64;
            for (i, (a, b)) in ex.iter_mut().zip(ey.iter_mut()).enumerate() {
                *a = Complex::from_polar(1.0, w * (kx as f64) * i as f64);
                *b = Complex::from_polar(1.0, w * (ky as f64) * i as f64);
            }
            for y in 0..n {
                let cy = coef * ey[y];
                let row = &mut out[y * n..(y + 1) * n];
                for (v, e) in row.iter_mut().zip(&ex) {
                    *v += (cy * e).re;
                }
            }
        }
    }

    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64).sqrt();
    out.iter_mut().for_each(|v| *v = (*v - mean) / sd.max(1e-12));
    out
}

/// Back-to-front opaque disks with anti-aliased rims; radii follow `p(r) ~ r^-3`.
fn paint_disks(data: &mut [f64], n: usize, spec: &CorpusSpec, rng: &mut SeededStream) {
    let (r0, r1) = (spec.min_radius, spec.max_radius);
    // inverse CDF of r^-3 truncated to [r0, r1]
    let (a, b) = (r0.powi(-2), r1.powi(-2));
    for _ in 0..spec.disks {
        let u = rng.uniform();
        let r = (a - u * (a - b)).powf(-0.5);
        // centers range over a margin of n/2 so borders are covered like the interior
        let cx = (rng.uniform() * 2.0 - 0.5) * n as f64;
        let cy = (rng.uniform() * 2.0 - 0.5) * n as f64;
        let value = 0.1 + 0.8 * rng.uniform();
        let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
        let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
        let x1 = (cx + r + 1.0).ceil().clamp(0.0, n as f64) as usize;
        let y1 = (cy + r + 1.0).ceil().clamp(0.0, n as f64) as usize;
        for y in y0..y1 {
            let dy = y as f64 + 0.5 - cy;
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                let cover = (r + 0.5 - (dx * dx + dy * dy).sqrt()).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let d = &mut data[y * n + x];
                    *d += cover * (value - *d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            count: 2,
            size: 128,
            disks: 2000,
            max_radius: 32.0,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn deterministic_and_distinct() {
        let s = small();
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert_eq!(a[0].dims(), (128, 128));
    }

    #[test]
    fn textured_and_in_range() {
        let img = generate_image(&small(), 0).unwrap();
        let m = img.mean();
        let var = img.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / img.data().len() as f64;
        assert!(var > 1e-3, "variance {var}");
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
