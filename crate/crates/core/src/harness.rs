//! Synthetic benchmark: degrade a corpus with known kernels, run the estimators on the
//! result as if it were an unlabeled source domain, and score the recovered kernels.
//!
//! The scores are estimator-level (kernel error, variance error, frequency distance,
//! re-degradation PSNR/SSIM on luminance) rather than the quality of a downstream
//! super-resolution network.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::estimator::{self, AblationMode, ConsistencyProblem, EstimatorConfig, GridSpec};
use crate::format::g9;
use crate::imaging::{self, ImagePlane};
use crate::kernel::{self, gaussian_kernel, KernelParams, TestKernelKind};
use crate::spectral::{self, BinKind};

/// Peak signal-to-noise ratio for [0, 1] images, capped at 100 dB.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_dims(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1,
/// averaged over window positions that lie fully inside the image.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = a.dims();
    if w.min(h) < SSIM_WINDOW {
        return Err(Error::arg(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);

    let (ad, bd) = (a.data(), b.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect() };
    let maps = [
        ad.to_vec(),
        bd.to_vec(),
        prod(&|x, _| x * x),
        prod(&|_, y| y * y),
        prod(&|x, y| x * y),
    ];
    let filtered: Vec<Vec<f64>> = maps.iter().map(|m| valid_filter(m, w, h, &g)).collect();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let n = filtered[0].len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (filtered[0][i], filtered[1][i]);
        let va = filtered[2][i] - ma * ma;
        let vb = filtered[3][i] - mb * mb;
        let cov = filtered[4][i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// Separable filtering keeping only positions where the window fits.
fn valid_filter(data: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn same_dims(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::arg(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorKind {
    Direct,
    FcaBoth,
    FcaFdc,
    FcaWd,
    BicubicBaseline,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        Self::Direct,
        Self::FcaBoth,
        Self::FcaFdc,
        Self::FcaWd,
        Self::BicubicBaseline,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::FcaBoth => "fca-both",
            Self::FcaFdc => "fca-fdc",
            Self::FcaWd => "fca-wd",
            Self::BicubicBaseline => "bicubic-baseline",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown estimator {s:?}")))
    }
}

/// Ground truth for one suite row group: a seeded family or fixed parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum TruthKernel {
    Family(TestKernelKind),
    Fixed { label: String, params: KernelParams },
}

impl TruthKernel {
    pub fn label(&self) -> String {
        match self {
            TruthKernel::Family(k) => k.name().to_string(),
            TruthKernel::Fixed { label, .. } => label.clone(),
        }
    }

    pub fn params(&self, seed: u64) -> KernelParams {
        match self {
            TruthKernel::Family(k) => kernel::synthesize_test_kernel(*k, seed),
            TruthKernel::Fixed { params, .. } => *params,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSuite {
    pub truths: Vec<TruthKernel>,
    pub seeds: Vec<u64>,
    pub estimators: Vec<EstimatorKind>,
    /// Side of the ground-truth kernels (and of kernels used for re-degradation).
    pub truth_side: usize,
    pub estimator: EstimatorConfig,
    pub grid: GridSpec,
    pub corpus_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for BenchmarkSuite {
    fn default() -> Self {
        Self {
            truths: vec![
                TruthKernel::Family(TestKernelKind::Iso1),
                TruthKernel::Family(TestKernelKind::Iso3),
            ],
            seeds: vec![0, 1, 2],
            estimators: vec![EstimatorKind::Direct, EstimatorKind::BicubicBaseline],
            truth_side: kernel::TEST_KERNEL_SIDE,
            estimator: EstimatorConfig::default(),
            grid: GridSpec::default(),
            corpus_dir: None,
            output_dir: None,
        }
    }
}

impl BenchmarkSuite {
    pub fn validate(&self) -> Result<()> {
        if self.truths.is_empty() {
            return Err(Error::arg("suite has no kernel kinds"));
        }
        if self.seeds.is_empty() {
            return Err(Error::arg("suite has no seeds"));
        }
        if self.estimators.is_empty() {
            return Err(Error::arg("suite has no estimators"));
        }
        if self.truth_side < 3 || self.truth_side.is_multiple_of(2) {
            return Err(Error::arg("truth_side must be odd and >= 3"));
        }
        self.estimator.validate()
    }

    /// Parses a `key=value` suite file. Blank lines and `#` comments are ignored.
    ///
    /// Suite keys: `kinds` (comma list of ISO.1, ISO.3, ISO.range, ANI), `fixed`
    /// (`label:r1:r2:theta`, repeatable), `seeds`, `estimators`, `corpus_dir`,
    /// `output_dir`, `truth_side`, `grid_r_count`. Any estimator key is accepted too.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_onto(text, BenchmarkSuite::default())
    }

    /// Like [`parse`](Self::parse) but keys override `base` instead of the defaults.
    pub fn parse_onto(text: &str, base: BenchmarkSuite) -> Result<Self> {
        let mut suite = base;
        let mut kinds: Option<Vec<TruthKernel>> = None;
        let mut fixed = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::arg(format!("suite line {}: {msg}: {raw:?}", i + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| at("expected key=value".into()))?;
            let list = || value.split(',').map(str::trim).filter(|s| !s.is_empty());
            match key {
                "kinds" => {
                    kinds = Some(
                        list()
                            .map(|s| s.parse().map(TruthKernel::Family))
                            .collect::<Result<_>>()
                            .map_err(|e| at(e.to_string()))?,
                    )
                }
                "fixed" => {
                    let parts: Vec<&str> = value.split(':').map(str::trim).collect();
                    let nums: Option<Vec<f64>> = parts.get(1..).map(|p| p.iter().filter_map(|v| v.parse().ok()).collect());
                    match (parts.len(), nums) {
                        (4, Some(n)) if n.len() == 3 => {
                            let params = KernelParams::new(n[0], n[1], n[2]).map_err(|e| at(e.to_string()))?;
                            fixed.push(TruthKernel::Fixed {
                                label: parts[0].to_string(),
                                params,
                            });
                        }
                        _ => return Err(at("fixed expects label:r1:r2:theta".into())),
                    }
                }
                "seeds" => {
                    suite.seeds = list()
                        .map(|s| s.parse::<u64>().map_err(|_| at(format!("bad seed {s:?}"))))
                        .collect::<Result<_>>()?
                }
                "estimators" => suite.estimators = list().map(str::parse).collect::<Result<_>>().map_err(|e| at(e.to_string()))?,
                "corpus_dir" => suite.corpus_dir = Some(PathBuf::from(value)),
                "output_dir" => suite.output_dir = Some(PathBuf::from(value)),
                "truth_side" => suite.truth_side = value.parse().map_err(|_| at("bad truth_side".into()))?,
                "grid_r_count" => {
                    let n: usize = value.parse().map_err(|_| at("bad grid_r_count".into()))?;
                    let (lo, hi) = (suite.estimator.r_min, suite.estimator.r_max);
                    suite.grid.r_values = GridSpec::evenly_spaced(n, lo, hi).map_err(|e| at(e.to_string()))?;
                }
                _ => {
                    if !suite.estimator.set(key, value).map_err(|e| at(e.to_string()))? {
                        return Err(at(format!("unknown key {key:?}")));
                    }
                }
            }
        }
        let mut truths = kinds.unwrap_or_else(|| if fixed.is_empty() { suite.truths.clone() } else { Vec::new() });
        truths.extend(fixed);
        suite.truths = truths;
        suite.validate()?;
        Ok(suite)
    }
}

/// One (kind, estimator, seed) cell. Scores are NaN when the estimator failed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub kind: String,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub truth: KernelParams,
    pub estimated: Option<KernelParams>,
    pub error: Option<String>,
    pub kernel_error: f64,
    pub sigma_sq_error: f64,
    pub d_bar: f64,
    pub d_bar_baseline: f64,
    /// `d_bar_baseline - d_bar`; positive when the estimate beats the delta kernel.
    pub d_bar_reduction: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub seconds: f64,
}

impl ScoreRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub rows: Vec<ScoreRow>,
}

impl SuiteResult {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(ScoreRow::ok)
    }

    pub fn scores_csv(&self) -> String {
        let mut s = String::from(SCORE_COLUMNS);
        s.push('\n');
        for r in &self.rows {
            let (e, status) = match (&r.estimated, &r.error) {
                (Some(p), None) => ([g9(p.r1), g9(p.r2), g9(p.theta), g9(p.sigma_sq())], "ok".to_string()),
                _ => (
                    std::array::from_fn(|_| "nan".to_string()),
                    format!("failed: {}", r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")),
                ),
            };
            let t = &r.truth;
            let cols = [
                r.kind.clone(),
                r.estimator.to_string(),
                r.seed.to_string(),
                status,
                g9(t.r1),
                g9(t.r2),
                g9(t.theta),
                g9(t.sigma_sq()),
                e[0].clone(),
                e[1].clone(),
                e[2].clone(),
                e[3].clone(),
                g9(r.kernel_error),
                g9(r.sigma_sq_error),
                g9(r.d_bar),
                g9(r.d_bar_baseline),
                g9(r.d_bar_reduction),
                g9(r.psnr),
                g9(r.ssim),
            ];
            s.push_str(&cols.join(","));
            s.push('\n');
        }
        s
    }

    pub fn timings_csv(&self) -> String {
        let mut s = String::from("kind,estimator,seed,seconds\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:.3}\n", r.kind, r.estimator, r.seed, r.seconds));
        }
        s
    }

    /// Mean and (population) standard deviation per (kind, estimator) over seeds,
    /// successful rows only.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "kind,estimator,rows,failed,kernel_error_mean,kernel_error_std,sigma_sq_error_mean,sigma_sq_error_std,\
             d_bar_reduction_mean,d_bar_reduction_std,psnr_mean,psnr_std,ssim_mean,ssim_std\n",
        );
        let mut keys: Vec<(String, EstimatorKind)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.kind.clone(), r.estimator)) {
                keys.push((r.kind.clone(), r.estimator));
            }
        }
        for (kind, est) in keys {
            let cell: Vec<&ScoreRow> = self.rows.iter().filter(|r| r.kind == kind && r.estimator == est).collect();
            let ok: Vec<&&ScoreRow> = cell.iter().filter(|r| r.ok()).collect();
            let stat = |f: &dyn Fn(&ScoreRow) -> f64| -> [String; 2] {
                if ok.is_empty() {
                    return ["nan".into(), "nan".into()];
                }
                let v: Vec<f64> = ok.iter().map(|r| f(r)).collect();
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
                [g9(m), g9(sd)]
            };
            let mut cols = vec![kind.clone(), est.to_string(), cell.len().to_string(), (cell.len() - ok.len()).to_string()];
            cols.extend(stat(&|r| r.kernel_error));
            cols.extend(stat(&|r| r.sigma_sq_error));
            cols.extend(stat(&|r| r.d_bar_reduction));
            cols.extend(stat(&|r| r.psnr));
            cols.extend(stat(&|r| r.ssim));
            s.push_str(&cols.join(","));
            s.push('\n');
        }
        s
    }

    /// Writes `scores.csv`, `summary.csv` and `timings.csv`. Only the timings vary
    /// between identical runs.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<[PathBuf; 3]> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            (dir.join("scores.csv"), self.scores_csv()),
            (dir.join("summary.csv"), self.summary_csv()),
            (dir.join("timings.csv"), self.timings_csv()),
        ];
        for (p, text) in &files {
            fs::write(p, text).map_err(|e| Error::io(p, e))?;
        }
        let [a, b, c] = files;
        Ok([a.0, b.0, c.0])
    }
}

pub const SCORE_COLUMNS: &str = "kind,estimator,seed,status,truth_r1,truth_r2,truth_theta,truth_sigma_sq,\
r1,r2,theta,sigma_sq,kernel_error,sigma_sq_abs_error,d_bar,d_bar_baseline,d_bar_reduction,psnr,ssim";

/// Per (kind, seed): the degraded corpus and what every estimator cell shares.
struct Group {
    label: String,
    seed: u64,
    truth: KernelParams,
    source: Vec<ImagePlane>,
    problem: ConsistencyProblem,
    baseline: f64,
}

/// Runs every (kind, seed, estimator) cell on `hr_corpus`. Cells run on the worker
/// pool; rows come back sorted by suite kind order, estimator order, then seed. A
/// failing estimator marks its row and the suite continues.
pub fn run_suite(suite: &BenchmarkSuite, hr_corpus: &[ImagePlane]) -> Result<SuiteResult> {
    suite.validate()?;
    if hr_corpus.is_empty() {
        return Err(Error::arg("empty benchmark corpus"));
    }
    let cfg = &suite.estimator;
    let down = crate::par::try_map(hr_corpus, |hr| kernel::downsample(hr, cfg.scale))?;

    let mut group_keys = Vec::new();
    for t in &suite.truths {
        for &seed in &suite.seeds {
            group_keys.push((t, seed));
        }
    }
    let groups = crate::par::try_map(&group_keys, |(t, seed)| -> Result<Group> {
        let truth = t.params(*seed);
        let k = gaussian_kernel(&truth, suite.truth_side)?;
        let source = down
            .iter()
            .map(|d| kernel::blur_downsampled(d, &k))
            .collect::<Result<Vec<_>>>()?;
        let problem = ConsistencyProblem::new(&source, cfg.scale, cfg.kernel_side, cfg.patch_size, cfg.bin_kind)?;
        let baseline = problem.distance(&KernelParams::delta())?;
        Ok(Group {
            label: t.label(),
            seed: *seed,
            truth,
            source,
            problem,
            baseline,
        })
    })?;

    let mut cells = Vec::new();
    for (gi, _) in groups.iter().enumerate() {
        for (ei, &e) in suite.estimators.iter().enumerate() {
            cells.push((gi, ei, e));
        }
    }
    let mut rows = crate::par::map(&cells, |&(gi, ei, est)| {
        let g = &groups[gi];
        let started = Instant::now();
        let row = score_cell(suite, g, est, &down);
        let seconds = started.elapsed().as_secs_f64();
        let row = match row {
            Ok(mut r) => {
                r.seconds = seconds;
                r
            }
            Err(e) => ScoreRow {
                kind: g.label.clone(),
                estimator: est,
                seed: g.seed,
                truth: g.truth,
                estimated: None,
                error: Some(e.to_string()),
                kernel_error: f64::NAN,
                sigma_sq_error: f64::NAN,
                d_bar: f64::NAN,
                d_bar_baseline: g.baseline,
                d_bar_reduction: f64::NAN,
                psnr: f64::NAN,
                ssim: f64::NAN,
                seconds,
            },
        };
        ((gi / suite.seeds.len(), ei, g.seed), row)
    });
    rows.sort_by_key(|(k, _)| *k);
    Ok(SuiteResult {
        rows: rows.into_iter().map(|(_, r)| r).collect(),
    })
}

fn score_cell(suite: &BenchmarkSuite, g: &Group, est: EstimatorKind, down: &[ImagePlane]) -> Result<ScoreRow> {
    let cfg = EstimatorConfig {
        seed: g.seed,
        ..suite.estimator.clone()
    };
    let estimated = match est {
        EstimatorKind::Direct => estimator::estimate_direct(&g.source, &cfg, &suite.grid)?.estimated,
        EstimatorKind::FcaBoth => estimator::estimate_fca(&g.source, &cfg, AblationMode::Both)?.estimated,
        EstimatorKind::FcaFdc => estimator::estimate_fca(&g.source, &cfg, AblationMode::FdcOnly)?.estimated,
        EstimatorKind::FcaWd => estimator::estimate_fca(&g.source, &cfg, AblationMode::WdOnly)?.estimated,
        EstimatorKind::BicubicBaseline => KernelParams::delta(),
    };
    let d_bar = g.problem.distance(&estimated)?;
    let k_est = gaussian_kernel(&estimated, suite.truth_side)?;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (d, truth_lr) in down.iter().zip(&g.source) {
        let lr = kernel::blur_downsampled(d, &k_est)?;
        psnr_sum += psnr(&lr, truth_lr)?;
        ssim_sum += ssim(&lr, truth_lr)?;
    }
    let n = down.len() as f64;
    Ok(ScoreRow {
        kind: g.label.clone(),
        estimator: est,
        seed: g.seed,
        truth: g.truth,
        estimated: Some(estimated),
        error: None,
        kernel_error: kernel::kernel_error(&estimated, &g.truth, suite.truth_side)?,
        sigma_sq_error: (estimated.sigma_sq() - g.truth.sigma_sq()).abs(),
        d_bar,
        d_bar_baseline: g.baseline,
        d_bar_reduction: g.baseline - d_bar,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        seconds: 0.0,
    })
}

/// Writes a CSV with a `bin` column and one density column per named domain, in
/// input order. Each domain is profiled over non-overlapping `patch`-sized tiles.
pub fn emit_profile_plot_data(
    domains: &[(String, Vec<ImagePlane>)],
    patch: usize,
    kind: BinKind,
    out: impl AsRef<Path>,
) -> Result<()> {
    if domains.is_empty() {
        return Err(Error::arg("no domains to plot"));
    }
    let mut columns = Vec::with_capacity(domains.len());
    for (name, images) in domains {
        if images.is_empty() {
            return Err(Error::arg(format!("domain {name:?} is empty")));
        }
        if name.contains(',') {
            return Err(Error::arg(format!("domain name {name:?} contains a comma")));
        }
        let mut tiles = Vec::new();
        for img in images {
            tiles.extend(imaging::tile_patches(img, patch)?);
        }
        columns.push(spectral::frequency_profile(&tiles, kind)?);
    }
    let mut s = String::from("bin");
    for (name, _) in domains {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for b in 0..spectral::bin_count(patch) {
        s.push_str(&b.to_string());
        for c in &columns {
            s.push(',');
            s.push_str(&g9(c.bins()[b]));
        }
        s.push('\n');
    }
    let out = out.as_ref();
    fs::write(out, s).map_err(|e| Error::io(out, e))
}
