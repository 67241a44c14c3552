//! Frequency-density profiles and the frequency distance between image domains.
//!
//! Fourier convention: unnormalized forward DFT, `F(k) = sum_x f(x) e^{-2 pi i k x / N}`
//! in each axis, applied to the mean-subtracted patch. No window is applied.

use std::cell::RefCell;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::format::g9;
use crate::imaging::ImagePlane;
use crate::par;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

/// `|DFT|` of a square patch, row-major `size x size`, DC at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Magnitude {
    pub size: usize,
    pub values: Vec<f64>,
}

impl Magnitude {
    pub fn at(&self, ky: usize, kx: usize) -> f64 {
        self.values[ky * self.size + kx]
    }
}

/// Magnitude spectrum of the mean-subtracted square patch.
pub fn fft2_magnitude(img: &ImagePlane) -> Result<Magnitude> {
    if !img.is_square() {
        return Err(Error::arg(format!(
            "spectrum needs a square patch, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let n = img.width();
    let mean = img.mean();
    let mut buf: Vec<Complex<f64>> = img.data().iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    let fft = plan(n);
    // rows
    fft.process(&mut buf);
    // columns via transpose
    let mut t = vec![Complex::new(0.0, 0.0); n * n];
    for y in 0..n {
        for x in 0..n {
            t[x * n + y] = buf[y * n + x];
        }
    }
    fft.process(&mut t);
    let mut values = vec![0.0; n * n];
    for kx in 0..n {
        for ky in 0..n {
            values[ky * n + kx] = t[kx * n + ky].norm();
        }
    }
    Ok(Magnitude { size: n, values })
}

/// How a 2D magnitude collapses to one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum BinKind {
    /// Mean of the row-averaged (horizontal frequency) and column-averaged
    /// (vertical frequency) profiles.
    #[default]
    AxisAveraged,
    /// Mean over annuli of integer radius.
    Radial,
}

impl BinKind {
    pub fn name(&self) -> &'static str {
        match self {
            BinKind::AxisAveraged => "axis",
            BinKind::Radial => "radial",
        }
    }
}

impl fmt::Display for BinKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BinKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axis" | "axis-averaged" => Ok(BinKind::AxisAveraged),
            "radial" => Ok(BinKind::Radial),
            _ => Err(Error::arg(format!("unknown bin kind {s:?}"))),
        }
    }
}

/// Density per non-negative frequency index `l = 0..=size/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyProfile {
    pub bins: Vec<f64>,
    pub kind: BinKind,
    pub source_size: usize,
}

impl FrequencyProfile {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Sum of bins; near zero for textureless input.
    pub fn energy(&self) -> f64 {
        self.bins.iter().sum()
    }

    /// Sum of bins from index `from` upward.
    pub fn tail_energy(&self, from: usize) -> f64 {
        self.bins.iter().skip(from).sum()
    }
}

pub fn bin_count(size: usize) -> usize {
    size / 2 + 1
}

/// Profile of a single square patch.
pub fn patch_profile(img: &ImagePlane, kind: BinKind) -> Result<FrequencyProfile> {
    let m = fft2_magnitude(img)?;
    Ok(FrequencyProfile {
        bins: collapse(&m, kind),
        kind,
        source_size: m.size,
    })
}

/// Profiles along four frequency directions (0, 45, 90 and 135 degrees): each bin `l`
/// averages `|F|` over frequencies whose projection onto the direction rounds to `l`.
/// Axis averaging cannot tell a wide-and-narrow kernel from a round one of the same
/// total variance; these can. They carry kind `axis`.
pub fn oriented_profiles(img: &ImagePlane) -> Result<[FrequencyProfile; 4]> {
    let m = fft2_magnitude(img)?;
    let n = m.size;
    let nb = bin_count(n);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let dirs = [(1.0, 0.0), (h, h), (0.0, 1.0), (-h, h)];
    let mut bins = vec![vec![0.0; nb]; 4];
    let mut counts = vec![vec![0usize; nb]; 4];
    for ky in 0..n {
        let fy = if ky <= n / 2 { ky as f64 } else { ky as f64 - n as f64 };
        for kx in 0..n {
            let fx = if kx <= n / 2 { kx as f64 } else { kx as f64 - n as f64 };
            let v = m.at(ky, kx);
            for (d, (c, s)) in dirs.iter().enumerate() {
                let l = (fx * c + fy * s).abs().round() as usize;
                if l < nb {
                    bins[d][l] += v;
                    counts[d][l] += 1;
                }
            }
        }
    }
    let mut out = bins.into_iter().zip(counts).map(|(mut b, c)| {
        for (v, k) in b.iter_mut().zip(c) {
            if k > 0 {
                *v /= k as f64;
            }
        }
        FrequencyProfile {
            bins: b,
            kind: BinKind::AxisAveraged,
            source_size: n,
        }
    });
    Ok(std::array::from_fn(|_| out.next().expect("four directions")))
}

fn collapse(m: &Magnitude, kind: BinKind) -> Vec<f64> {
    let n = m.size;
    let nb = bin_count(n);
    let mut bins = vec![0.0; nb];
    match kind {
        BinKind::AxisAveraged => {
            for (l, b) in bins.iter_mut().enumerate() {
                let mirror = (n - l) % n;
                let mut row = 0.0;
                let mut col = 0.0;
                for k in 0..n {
                    row += 0.5 * (m.at(k, l) + m.at(k, mirror));
                    col += 0.5 * (m.at(l, k) + m.at(mirror, k));
                }
                *b = 0.5 * (row + col) / n as f64;
            }
        }
        BinKind::Radial => {
            let mut counts = vec![0usize; nb];
            for ky in 0..n {
                let fy = if ky <= n / 2 { ky as f64 } else { ky as f64 - n as f64 };
                for kx in 0..n {
                    let fx = if kx <= n / 2 { kx as f64 } else { kx as f64 - n as f64 };
                    let r = (fx * fx + fy * fy).sqrt().round() as usize;
                    if r < nb {
                        bins[r] += m.at(ky, kx);
                        counts[r] += 1;
                    }
                }
            }
            for (b, c) in bins.iter_mut().zip(counts) {
                if c > 0 {
                    *b /= c as f64;
                }
            }
        }
    }
    bins
}

/// A profile averaged over a domain of `image_count` patches.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainProfile {
    pub profile: FrequencyProfile,
    pub image_count: usize,
}

impl DomainProfile {
    pub fn bins(&self) -> &[f64] {
        &self.profile.bins
    }

    /// Line format: `# bins=<n> kind=<kind> size=<s> count=<N>`, then one bin per line.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# bins={} kind={} size={} count={}\n",
            self.profile.len(),
            self.profile.kind,
            self.profile.source_size,
            self.image_count
        );
        for b in &self.profile.bins {
            out.push_str(&g9(*b));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| Error::Format("profile header missing".into()))?;
        let (mut n, mut kind, mut size, mut count) = (None, None, None, None);
        for tok in header.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header token {tok:?}")))?;
            let bad = || Error::Format(format!("bad header value {tok:?}"));
            match k {
                "bins" => n = Some(v.parse::<usize>().map_err(|_| bad())?),
                "kind" => kind = Some(v.parse::<BinKind>().map_err(|_| bad())?),
                "size" => size = Some(v.parse::<usize>().map_err(|_| bad())?),
                "count" => count = Some(v.parse::<usize>().map_err(|_| bad())?),
                _ => return Err(Error::Format(format!("unknown header key {k:?}"))),
            }
        }
        let missing = |k: &str| Error::Format(format!("profile header lacks {k}"));
        let n = n.ok_or_else(|| missing("bins"))?;
        let bins = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad bin value {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if bins.len() != n {
            return Err(Error::Format(format!("header says {n} bins, found {}", bins.len())));
        }
        Ok(DomainProfile {
            profile: FrequencyProfile {
                bins,
                kind: kind.ok_or_else(|| missing("kind"))?,
                source_size: size.ok_or_else(|| missing("size"))?,
            },
            image_count: count.ok_or_else(|| missing("count"))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Domain frequency density: per-patch profiles averaged over the list.
///
/// Per-patch work may run in parallel; the sum runs in list order.
pub fn frequency_profile(patches: &[ImagePlane], kind: BinKind) -> Result<DomainProfile> {
    let first = patches
        .first()
        .ok_or_else(|| Error::arg("frequency profile of an empty patch list"))?;
    let size = first.width();
    if let Some(p) = patches.iter().find(|p| p.dims() != (size, size)) {
        return Err(Error::arg(format!(
            "patches must be square and equal-sized: {}x{} vs {size}x{size}",
            p.width(),
            p.height()
        )));
    }
    let per_patch = par::try_map(patches, |p| patch_profile(p, kind))?;
    Ok(average_profiles(&per_patch))
}

/// Averages already computed profiles (all of one size and kind) in order.
pub fn average_profiles(profiles: &[FrequencyProfile]) -> DomainProfile {
    assert!(!profiles.is_empty());
    let mut bins = vec![0.0; profiles[0].len()];
    for p in profiles {
        for (b, v) in bins.iter_mut().zip(&p.bins) {
            *b += v;
        }
    }
    let n = profiles.len() as f64;
    for b in &mut bins {
        *b /= n;
    }
    DomainProfile {
        profile: FrequencyProfile {
            bins,
            kind: profiles[0].kind,
            source_size: profiles[0].source_size,
        },
        image_count: profiles.len(),
    }
}

/// Mean absolute bin difference between two profiles.
pub fn profile_distance(a: &FrequencyProfile, b: &FrequencyProfile) -> Result<f64> {
    if a.len() != b.len() || a.kind != b.kind {
        return Err(Error::arg(format!(
            "profile mismatch: {} {} bins vs {} {} bins",
            a.kind,
            a.len(),
            b.kind,
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::arg("empty profiles"));
    }
    Ok(a.bins.iter().zip(&b.bins).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Frequency distance between two domains.
pub fn freq_distance(a: &DomainProfile, b: &DomainProfile) -> Result<f64> {
    profile_distance(&a.profile, &b.profile)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum NormMode {
    None,
    #[default]
    UnitSum,
    Log1p,
}

impl NormMode {
    pub fn name(&self) -> &'static str {
        match self {
            NormMode::None => "none",
            NormMode::UnitSum => "unit-sum",
            NormMode::Log1p => "log1p",
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormMode::None),
            "unit-sum" => Ok(NormMode::UnitSum),
            "log1p" => Ok(NormMode::Log1p),
            _ => Err(Error::arg(format!("unknown normalization {s:?}"))),
        }
    }
}

pub fn normalize_bins(p: &FrequencyProfile, mode: NormMode) -> Result<FrequencyProfile> {
    if p.bins.iter().any(|b| *b < 0.0 || !b.is_finite()) {
        return Err(Error::arg("profile bins must be finite and >= 0"));
    }
    let bins = match mode {
        NormMode::None => p.bins.clone(),
        NormMode::UnitSum => {
            let s: f64 = p.bins.iter().sum();
            if s <= 0.0 {
                return Err(Error::Degenerate("unit-sum normalization of an all-zero profile".into()));
            }
            p.bins.iter().map(|b| b / s).collect()
        }
        NormMode::Log1p => p.bins.iter().map(|b| b.ln_1p()).collect(),
    };
    Ok(FrequencyProfile {
        bins,
        kind: p.kind,
        source_size: p.source_size,
    })
}

pub fn normalize_profile(p: &DomainProfile, mode: NormMode) -> Result<DomainProfile> {
    Ok(DomainProfile {
        profile: normalize_bins(&p.profile, mode)?,
        image_count: p.image_count,
    })
}
