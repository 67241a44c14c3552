//! Kernel estimation for an unlabeled source corpus.
//!
//! Both estimators search one global [`KernelParams`] so that `G(x) = (x down s) * k`
//! matches the corpus `x` in frequency density:
//!
//! * [`estimate_direct`] minimizes the frequency distance between `G(x)` and `x`,
//!   measured on the axis-averaged profile and on four oriented profiles (which make
//!   the kernel shape identifiable), by a coarse grid followed by coordinate descent.
//!   It is deterministic.
//! * [`estimate_fca`] trains the comparator and the wavelet discriminator alongside
//!   the kernel and moves the kernel down `lambda1 * L_fdc + lambda2 * L_wd` with
//!   simultaneous-perturbation gradients.

use std::f64::consts::{FRAC_PI_4, FRAC_PI_8, PI};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::fdc::{self, ComparatorModel, CurriculumSchedule, TrainState, Triplet};
use crate::format::g9;
use crate::imaging::{self, ImagePlane, PatchSpec};
use crate::kernel::{self, gaussian_kernel, wrap_angle, DegradationConfig, KernelParams, R_MAX, R_MIN};
use crate::nn::Adam;
use crate::rng::{mix, SeededStream};
use crate::spectral::{self, BinKind, DomainProfile, FrequencyProfile, NormMode};
use crate::wavelet::{self, DiscriminatorModel, DiscriminatorState};
use crate::TOOL_VERSION;

/// Which generator loss terms an adversarial run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AblationMode {
    #[default]
    Both,
    FdcOnly,
    WdOnly,
}

impl AblationMode {
    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Both => "both",
            AblationMode::FdcOnly => "fdc-only",
            AblationMode::WdOnly => "wd-only",
        }
    }

    fn weights(&self, lambda1: f64, lambda2: f64) -> (f64, f64) {
        match self {
            AblationMode::Both => (lambda1, lambda2),
            AblationMode::FdcOnly => (lambda1, 0.0),
            AblationMode::WdOnly => (0.0, lambda2),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(AblationMode::Both),
            "fdc-only" => Ok(AblationMode::FdcOnly),
            "wd-only" => Ok(AblationMode::WdOnly),
            _ => Err(Error::arg(format!("unknown ablation mode {s:?}"))),
        }
    }
}

/// Settings shared by both estimators; the adversarial loop uses all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub iterations: u64,
    pub images_per_step: usize,
    /// Side of the square patches profiles are computed on.
    pub patch_size: usize,
    pub scale: usize,
    pub kernel_side: usize,
    pub curriculum: CurriculumSchedule,
    pub r_min: f64,
    pub r_max: f64,
    pub seed: u64,
    pub bin_kind: BinKind,
    pub normalization: NormMode,
    pub fdc_lr: f64,
    pub wd_lr: f64,
    pub kernel_lr: f64,
    pub spsa_delta: f64,
    /// Iterations during which only the comparator and discriminator train.
    pub warmup: u64,
    /// Fraction of the final iterations whose kernel parameters are averaged.
    pub average_tail: f64,
    pub plateau_window: u64,
    /// Stop once consecutive windowed loss means differ by less than this fraction.
    pub plateau_tol: f64,
    pub divergence_factor: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.001,
            iterations: 2000,
            images_per_step: 4,
            patch_size: fdc::DEFAULT_PATCH,
            scale: kernel::DEFAULT_SCALE,
            kernel_side: kernel::DEFAULT_KERNEL_SIDE,
            curriculum: CurriculumSchedule::default(),
            r_min: R_MIN,
            r_max: R_MAX,
            seed: 0,
            bin_kind: BinKind::AxisAveraged,
            normalization: NormMode::default(),
            fdc_lr: 1e-3,
            wd_lr: 1e-3,
            kernel_lr: 0.02,
            spsa_delta: 0.02,
            warmup: 200,
            average_tail: 0.1,
            plateau_window: 100,
            plateau_tol: 1e-5,
            divergence_factor: 10.0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::arg(format!("{k}: {why}")));
        if !(self.lambda1 >= 0.0) {
            return bad("lambda1", "must be >= 0");
        }
        if !(self.lambda2 >= 0.0) {
            return bad("lambda2", "must be >= 0");
        }
        if self.iterations == 0 {
            return bad("iterations", "must be >= 1");
        }
        if self.images_per_step == 0 {
            return bad("images_per_step", "must be >= 1");
        }
        if self.patch_size < 4 || !self.patch_size.is_multiple_of(2) {
            return bad("patch_size", "must be even and >= 4");
        }
        if self.scale == 0 {
            return bad("scale", "must be >= 1");
        }
        if self.kernel_side < 3 || self.kernel_side.is_multiple_of(2) {
            return bad("kernel_side", "must be odd and >= 3");
        }
        if !(R_MIN <= self.r_min && self.r_min < self.r_max && self.r_max <= R_MAX) {
            return bad("r_min/r_max", &format!("need {R_MIN} <= r_min < r_max <= {R_MAX}"));
        }
        for (k, v) in [
            ("fdc_lr", self.fdc_lr),
            ("wd_lr", self.wd_lr),
            ("kernel_lr", self.kernel_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, "must be finite and >= 0");
            }
        }
        if !(self.spsa_delta > 0.0) {
            return bad("spsa_delta", "must be > 0");
        }
        if !(0.0..=1.0).contains(&self.average_tail) {
            return bad("average_tail", "must be in [0, 1]");
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence_factor", "must be > 1");
        }
        self.curriculum.validate()
    }

    /// `key=value` lines echoing every setting, in a fixed order.
    pub fn echo(&self) -> Vec<(String, String)> {
        let c = &self.curriculum;
        [
            ("lambda1", g9(self.lambda1)),
            ("lambda2", g9(self.lambda2)),
            ("iterations", self.iterations.to_string()),
            ("images_per_step", self.images_per_step.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("scale", self.scale.to_string()),
            ("kernel_side", self.kernel_side.to_string()),
            ("curriculum_start", g9(c.start_scale)),
            ("curriculum_end", g9(c.end_scale)),
            ("curriculum_steps", c.steps.to_string()),
            ("curriculum_decay", c.decay.to_string()),
            ("r_min", g9(self.r_min)),
            ("r_max", g9(self.r_max)),
            ("seed", self.seed.to_string()),
            ("bin_kind", self.bin_kind.to_string()),
            ("normalization", self.normalization.to_string()),
            ("fdc_lr", g9(self.fdc_lr)),
            ("wd_lr", g9(self.wd_lr)),
            ("kernel_lr", g9(self.kernel_lr)),
            ("spsa_delta", g9(self.spsa_delta)),
            ("warmup", self.warmup.to_string()),
            ("average_tail", g9(self.average_tail)),
            ("plateau_window", self.plateau_window.to_string()),
            ("plateau_tol", g9(self.plateau_tol)),
            ("divergence_factor", g9(self.divergence_factor)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one setting by its [`echo`](Self::echo) key. Returns `Ok(false)` for an
    /// unknown key; a value that does not parse is an error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::arg(format!("{key}: cannot parse {value:?}")))
        }
        fn named<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|e| Error::arg(format!("{key}: {e}")))
        }
        match key {
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "images_per_step" => self.images_per_step = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "scale" => self.scale = num(key, value)?,
            "kernel_side" => self.kernel_side = num(key, value)?,
            "curriculum_start" => self.curriculum.start_scale = num(key, value)?,
            "curriculum_end" => self.curriculum.end_scale = num(key, value)?,
            "curriculum_steps" => self.curriculum.steps = num(key, value)?,
            "curriculum_decay" => self.curriculum.decay = named(key, value)?,
            "r_min" => self.r_min = num(key, value)?,
            "r_max" => self.r_max = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "bin_kind" => self.bin_kind = named(key, value)?,
            "normalization" => self.normalization = named(key, value)?,
            "fdc_lr" => self.fdc_lr = num(key, value)?,
            "wd_lr" => self.wd_lr = num(key, value)?,
            "kernel_lr" => self.kernel_lr = num(key, value)?,
            "spsa_delta" => self.spsa_delta = num(key, value)?,
            "warmup" => self.warmup = num(key, value)?,
            "average_tail" => self.average_tail = num(key, value)?,
            "plateau_window" => self.plateau_window = num(key, value)?,
            "plateau_tol" => self.plateau_tol = num(key, value)?,
            "divergence_factor" => self.divergence_factor = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn project(&self, r1: f64, r2: f64, theta: f64) -> KernelParams {
        KernelParams {
            r1: r1.clamp(self.r_min, self.r_max),
            r2: r2.clamp(self.r_min, self.r_max),
            theta: wrap_angle(theta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub l_fdc: f64,
    pub l_wd: f64,
    pub l_total: f64,
    pub params: KernelParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    Plateau,
    Converged,
    Diverged,
}

impl StopReason {
    pub fn name(&self) -> &'static str {
        match self {
            StopReason::Budget => "budget",
            StopReason::Plateau => "plateau",
            StopReason::Converged => "converged",
            StopReason::Diverged => "diverged",
        }
    }
}

/// Outcome of one estimation run.
///
/// For the direct estimator each trace row is one coordinate-descent sweep and
/// `l_total` holds its objective; `l_fdc` and `l_wd` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationReport {
    pub method: String,
    pub ablation: Option<AblationMode>,
    pub estimated: KernelParams,
    pub trace: Vec<TraceRow>,
    /// Domain frequency distance between `G(x)` under the estimate and the corpus.
    pub freq_distance: f64,
    pub stop: StopReason,
    /// Wall-clock time; not serialized so report files stay reproducible.
    pub seconds: f64,
    pub config: Vec<(String, String)>,
}

impl EstimationReport {
    /// `[report]` and `[config]` key=value sections followed by a `[trace]` CSV.
    pub fn to_text(&self) -> String {
        let p = &self.estimated;
        let mut s = String::new();
        s.push_str("[report]\n");
        s.push_str(&format!("tool={TOOL_VERSION}\n"));
        s.push_str(&format!("rng={}\n", crate::rng::ALGORITHM));
        s.push_str(&format!("method={}\n", self.method));
        if let Some(a) = self.ablation {
            s.push_str(&format!("ablation={a}\n"));
        }
        s.push_str(&format!("r1={}\nr2={}\ntheta={}\n", g9(p.r1), g9(p.r2), g9(p.theta)));
        s.push_str(&format!(
            "sigma1_sq={}\nsigma2_sq={}\nsigma_sq={}\n",
            g9(p.r1 * p.r1),
            g9(p.r2 * p.r2),
            g9(p.sigma_sq())
        ));
        s.push_str(&format!("freq_distance={}\n", g9(self.freq_distance)));
        s.push_str(&format!("iterations={}\n", self.trace.len()));
        s.push_str(&format!("stop={}\n", self.stop.name()));
        s.push_str("[config]\n");
        for (k, v) in &self.config {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str("[trace]\niteration,l_fdc,l_wd,l_total,r1,r2,theta\n");
        for r in &self.trace {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iteration,
                g9(r.l_fdc),
                g9(r.l_wd),
                g9(r.l_total),
                g9(r.params.r1),
                g9(r.params.r2),
                g9(r.params.theta)
            ));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Estimated parameters and kernel side from a saved report.
    pub fn read_params(path: impl AsRef<Path>) -> Result<(KernelParams, Option<usize>)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let get = |key: &str| -> Result<Option<f64>> {
            let prefix = format!("{key}=");
            text.lines()
                .take_while(|l| *l != "[trace]")
                .find_map(|l| l.strip_prefix(&prefix))
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Format(format!("{}: bad {key} value {v:?}", path.display())))
                })
                .transpose()
        };
        let (r1, r2, theta) = (get("r1")?, get("r2")?, get("theta")?);
        let side = get("kernel_side")?.map(|v| v as usize);
        match (r1, r2, theta) {
            (Some(r1), Some(r2), Some(theta)) => Ok((KernelParams::new(r1, r2, theta)?, side)),
            _ => Err(Error::Format(format!("{}: report lacks r1/r2/theta", path.display()))),
        }
    }
}

struct SourceImage {
    x: ImagePlane,
    down: ImagePlane,
}

/// Per-tile profiles: the configured kind plus the four oriented ones.
type TileProfiles = (FrequencyProfile, [FrequencyProfile; 4]);

fn tile_profiles(img: &ImagePlane, patch: usize, kind: BinKind) -> Result<Vec<TileProfiles>> {
    imaging::tile_patches(img, patch)?
        .iter()
        .map(|t| Ok((spectral::patch_profile(t, kind)?, spectral::oriented_profiles(t)?)))
        .collect()
}

/// Domain profile of the configured kind and the four oriented domain profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainProfiles {
    pub profile: DomainProfile,
    pub oriented: [DomainProfile; 4],
}

impl DomainProfiles {
    fn from_tiles(tiles: &[TileProfiles]) -> Self {
        let main: Vec<FrequencyProfile> = tiles.iter().map(|t| t.0.clone()).collect();
        Self {
            profile: spectral::average_profiles(&main),
            oriented: std::array::from_fn(|d| {
                let v: Vec<FrequencyProfile> = tiles.iter().map(|t| t.1[d].clone()).collect();
                spectral::average_profiles(&v)
            }),
        }
    }
}

/// A corpus prepared for repeated evaluation of `G(x)` under different kernels.
pub struct ConsistencyProblem {
    images: Vec<SourceImage>,
    source: DomainProfiles,
    patch: usize,
    kind: BinKind,
    side: usize,
}

impl ConsistencyProblem {
    /// Caches `x down scale` per image and the corpus profiles over `patch`-sized tiles.
    /// Textureless images are dropped; an all-textureless corpus is an error.
    pub fn new(corpus: &[ImagePlane], scale: usize, kernel_side: usize, patch: usize, kind: BinKind) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::arg("empty corpus"));
        }
        let prepared = crate::par::try_map(corpus, |x| -> Result<Option<(SourceImage, Vec<TileProfiles>)>> {
            let down = kernel::downsample(x, scale)?;
            if down.width().min(down.height()) < patch.max(kernel_side) {
                return Err(Error::arg(format!(
                    "{}x{} image is too small: downsampled by {scale} it must hold a {patch}px patch",
                    x.width(),
                    x.height()
                )));
            }
            let profs = tile_profiles(x, patch, kind)?;
            let energy: f64 = profs.iter().map(|p| p.0.energy()).sum::<f64>() / profs.len() as f64;
            if energy < fdc::DEGENERATE_ENERGY {
                return Ok(None);
            }
            Ok(Some((SourceImage { x: x.clone(), down }, profs)))
        })?;
        let mut images = Vec::new();
        let mut tiles = Vec::new();
        for (img, profs) in prepared.into_iter().flatten() {
            images.push(img);
            tiles.extend(profs);
        }
        if images.is_empty() {
            return Err(Error::Estimation("corpus has no textured images".into()));
        }
        Ok(Self {
            images,
            source: DomainProfiles::from_tiles(&tiles),
            patch,
            kind,
            side: kernel_side,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn source_profiles(&self) -> &DomainProfiles {
        &self.source
    }

    /// `G(x)` for every image.
    pub fn generated(&self, p: &KernelParams) -> Result<Vec<ImagePlane>> {
        let k = gaussian_kernel(p, self.side)?;
        crate::par::try_map(&self.images, |im| kernel::blur_downsampled(&im.down, &k))
    }

    fn generated_one(&self, index: usize, k: &kernel::BlurKernel) -> Result<ImagePlane> {
        kernel::blur_downsampled(&self.images[index].down, k)
    }

    /// Domain profiles of `G(x)` over `patch`-sized tiles.
    pub fn generated_profiles(&self, p: &KernelParams) -> Result<DomainProfiles> {
        let k = gaussian_kernel(p, self.side)?;
        let per_image = crate::par::try_map(&self.images, |im| {
            tile_profiles(&kernel::blur_downsampled(&im.down, &k)?, self.patch, self.kind)
        })?;
        let all: Vec<TileProfiles> = per_image.into_iter().flatten().collect();
        Ok(DomainProfiles::from_tiles(&all))
    }

    /// Frequency distance between the `G(x)` domain and the corpus domain.
    pub fn distance(&self, p: &KernelParams) -> Result<f64> {
        spectral::freq_distance(&self.generated_profiles(p)?.profile, &self.source.profile)
    }

    /// What the direct estimator minimizes: the axis distance averaged with the mean
    /// distance over the four oriented profiles. The axis term pins the overall blur
    /// width, the oriented terms resolve its shape and angle.
    pub fn objective(&self, p: &KernelParams) -> Result<f64> {
        let g = self.generated_profiles(p)?;
        let mut total = 0.0;
        for (a, b) in g.oriented.iter().zip(&self.source.oriented) {
            total += spectral::freq_distance(a, b)?;
        }
        let axis = spectral::freq_distance(&g.profile, &self.source.profile)?;
        Ok(0.5 * (total / 4.0 + axis))
    }
}

/// Coarse grid and refinement settings for [`estimate_direct`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Candidate values for each of `r1` and `r2`.
    pub r_values: Vec<f64>,
    pub thetas: Vec<f64>,
    pub min_sweeps: usize,
    pub max_sweeps: usize,
    pub r_step: f64,
    pub theta_step: f64,
    /// Refinement stops once the radius step falls below this.
    pub min_r_step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        let n = 8;
        Self {
            r_values: (0..n).map(|i| R_MIN + (R_MAX - R_MIN) * i as f64 / (n - 1) as f64).collect(),
            thetas: vec![0.0, FRAC_PI_4],
            min_sweeps: 3,
            max_sweeps: 40,
            r_step: 0.2,
            theta_step: FRAC_PI_8,
            min_r_step: 0.005,
        }
    }
}

impl GridSpec {
    /// `n >= 2` radii evenly spaced over `[lo, hi]`, both ends included.
    pub fn evenly_spaced(n: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
        if n < 2 {
            return Err(Error::arg(format!("grid needs at least 2 radii, got {n}")));
        }
        Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
    }

    /// Grid points in evaluation order: `r1`, then `r2`, then `theta` ascending. A
    /// single angle is kept where `r1 == r2` since rotation has no effect there.
    pub fn points(&self) -> Result<Vec<KernelParams>> {
        if self.r_values.is_empty() || self.thetas.is_empty() {
            return Err(Error::arg("grid needs at least one radius and one angle"));
        }
        let mut rs = self.r_values.clone();
        rs.sort_by(f64::total_cmp);
        let mut ts: Vec<f64> = self.thetas.iter().map(|&t| wrap_angle(t)).collect();
        ts.sort_by(f64::total_cmp);
        let mut out = Vec::new();
        for &r1 in &rs {
            for &r2 in &rs {
                for (i, &t) in ts.iter().enumerate() {
                    if r1 == r2 && i > 0 {
                        continue;
                    }
                    out.push(KernelParams::new(r1, r2, t)?);
                }
            }
        }
        Ok(out)
    }
}

/// Every grid point with its objective, in [`GridSpec::points`] order.
pub fn grid_objectives(problem: &ConsistencyProblem, grid: &GridSpec) -> Result<Vec<(KernelParams, f64)>> {
    grid.points()?
        .into_iter()
        .map(|p| Ok((p, problem.objective(&p)?)))
        .collect()
}

/// Grid search plus coordinate descent on [`ConsistencyProblem::objective`].
pub fn estimate_direct(corpus: &[ImagePlane], cfg: &EstimatorConfig, grid: &GridSpec) -> Result<EstimationReport> {
    cfg.validate()?;
    let started = Instant::now();
    let problem = ConsistencyProblem::new(corpus, cfg.scale, cfg.kernel_side, cfg.patch_size, cfg.bin_kind)?;
    let mut best: Option<(KernelParams, f64)> = None;
    for (p, v) in grid_objectives(&problem, grid)? {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((p, v));
        }
    }
    let (mut p, mut v) = best.expect("grid is non-empty");
    let mut steps = [grid.r_step, grid.r_step, grid.theta_step];
    let mut trace = vec![row(0, v, p)];
    let mut sweeps = 0;
    while sweeps < grid.max_sweeps {
        let mut improved = false;
        for c in 0..3 {
            for dir in [1.0, -1.0] {
                let mut coords = [p.r1, p.r2, p.theta];
                coords[c] += dir * steps[c];
                let cand = cfg.project(coords[0], coords[1], coords[2]);
                if cand == p {
                    continue;
                }
                let cv = problem.objective(&cand)?;
                if cv < v {
                    p = cand;
                    v = cv;
                    improved = true;
                    break;
                }
            }
        }
        sweeps += 1;
        trace.push(row(sweeps as u64, v, p));
        if !improved {
            steps.iter_mut().for_each(|s| *s *= 0.5);
            if sweeps >= grid.min_sweeps && steps[0] < grid.min_r_step {
                break;
            }
        }
    }
    let stop = if sweeps < grid.max_sweeps { StopReason::Converged } else { StopReason::Budget };
    let mut config = cfg.echo();
    config.retain(|(k, _)| {
        ["patch_size", "scale", "kernel_side", "r_min", "r_max", "bin_kind"].contains(&k.as_str())
    });
    Ok(EstimationReport {
        method: "direct".into(),
        ablation: None,
        estimated: p,
        trace,
        freq_distance: problem.distance(&p)?,
        stop,
        seconds: started.elapsed().as_secs_f64(),
        config,
    })
}

fn row(iteration: u64, objective: f64, params: KernelParams) -> TraceRow {
    TraceRow {
        iteration,
        l_fdc: 0.0,
        l_wd: 0.0,
        l_total: objective,
        params,
    }
}

/// Per-iteration generator inputs that stay fixed across the perturbed evaluations.
struct StepSample {
    index: usize,
    triplet: Triplet,
    real_features: Vec<f64>,
    crop: (usize, usize),
}

struct GeneratorLoss {
    fdc: f64,
    wd: f64,
}

fn generator_loss(
    problem: &ConsistencyProblem,
    p: &KernelParams,
    samples: &[StepSample],
    comparator: &ComparatorModel,
    disc: &DiscriminatorModel,
    patch: usize,
    kind: BinKind,
) -> Result<(GeneratorLoss, Vec<Vec<f64>>)> {
    let k = gaussian_kernel(p, problem.side)?;
    let per = crate::par::try_map(samples, |s| -> Result<(f64, f64, Vec<f64>)> {
        let g = problem.generated_one(s.index, &k)?;
        let gp = g.crop(s.crop.0, s.crop.1, patch, patch)?;
        let prof = spectral::patch_profile(&gp, kind)?;
        let t = &s.triplet;
        let lf = fdc::fdc_consistency_loss(comparator, &prof, &t.anchor, &t.down, &t.up)?;
        let feats = wavelet::high_band_features(&gp)?;
        let lw = wavelet::wd_loss_generator(disc, &feats);
        Ok((lf, lw, feats))
    })?;
    let n = samples.len() as f64;
    let mut loss = GeneratorLoss { fdc: 0.0, wd: 0.0 };
    let mut fakes = Vec::with_capacity(per.len());
    for (lf, lw, f) in per {
        loss.fdc += lf / n;
        loss.wd += lw / n;
        fakes.push(f);
    }
    Ok((loss, fakes))
}

/// Partial or complete adversarial run; `error` is set when the run aborted.
#[derive(Debug)]
pub struct FcaRun {
    pub report: EstimationReport,
    pub comparator: ComparatorModel,
    pub discriminator: DiscriminatorModel,
    pub error: Option<Error>,
}

/// Adversarial estimation; the divergence guard turns into an error.
pub fn estimate_fca(corpus: &[ImagePlane], cfg: &EstimatorConfig, ablation: AblationMode) -> Result<EstimationReport> {
    let run = run_fca(corpus, cfg, ablation, None)?;
    match run.error {
        Some(e) => Err(e),
        None => Ok(run.report),
    }
}

/// The adversarial loop. Each iteration:
///
/// 1. builds `images_per_step` triplets at the current curriculum scale and takes one
///    comparator step on them;
/// 2. takes one discriminator step with anchor patches as real and `G(x)` crops as fake;
/// 3. after warmup, estimates the gradient of the generator loss with one pair of
///    Rademacher perturbations (same samples for both sides) and takes an Adam step
///    on `(r1, r2, theta)`, projected onto the bounds.
///
/// The estimate is the average of the parameters over the last `average_tail` of the
/// run (angles averaged on the doubled circle, since the kernel has period pi).
pub fn run_fca(
    corpus: &[ImagePlane],
    cfg: &EstimatorConfig,
    ablation: AblationMode,
    comparator: Option<ComparatorModel>,
) -> Result<FcaRun> {
    cfg.validate()?;
    let started = Instant::now();
    let patch = cfg.patch_size;
    let problem = ConsistencyProblem::new(corpus, cfg.scale, cfg.kernel_side, patch, cfg.bin_kind)?;
    let need = (patch as f64 * cfg.curriculum.start_scale).ceil() as usize;
    if let Some(x) = problem.images.iter().find(|im| im.x.width().min(im.x.height()) < need) {
        return Err(Error::arg(format!(
            "{}x{} image cannot hold the {need}px region the curriculum starts with",
            x.x.width(),
            x.x.height()
        )));
    }
    let bins = spectral::bin_count(patch);
    let comparator = match comparator {
        Some(c) if c.bins() != bins => {
            return Err(Error::arg(format!("comparator expects {} bins, patches give {bins}", c.bins())))
        }
        Some(c) => c,
        None => ComparatorModel::new(bins, fdc::DEFAULT_HIDDEN, cfg.normalization, mix(cfg.seed, 11)),
    };
    let mut fdc_state = TrainState::new(comparator, cfg.curriculum, cfg.seed);
    let mut wd_state = DiscriminatorState::new(DiscriminatorModel::new(wavelet::feature_len(patch), mix(cfg.seed, 12)));
    let (w_fdc, w_wd) = ablation.weights(cfg.lambda1, cfg.lambda2);

    let mut rng = SeededStream::derive(cfg.seed, 0x66_6361);
    let mut coords = [1.0_f64, 1.0, 0.0];
    let mut p = cfg.project(coords[0], coords[1], coords[2]);
    let mut adam = Adam::new(3);
    let mut trace: Vec<TraceRow> = Vec::with_capacity(cfg.iterations as usize);
    let mut smooth_init: Option<f64> = None;
    let mut stop = StopReason::Budget;
    let mut error = None;

    for it in 0..cfg.iterations {
        let scale = fdc_state.curriculum_scale();
        let mut samples = Vec::with_capacity(cfg.images_per_step);
        for _ in 0..cfg.images_per_step {
            let index = rng.below(problem.len() as u64) as usize;
            let spec = PatchSpec::new(patch, 1, rng.next_u64());
            let (gw, gh) = problem.images[index].down.dims();
            let crop = (
                rng.below((gw - patch + 1) as u64) as usize,
                rng.below((gh - patch + 1) as u64) as usize,
            );
            samples.push((index, spec, crop));
        }
        let built = crate::par::try_map(&samples, |(index, spec, crop)| -> Result<StepSample> {
            let triplet = fdc::make_triplet(&problem.images[*index].x, scale, spec, cfg.bin_kind)?;
            let real_features = wavelet::high_band_features(&triplet.anchor_patch)?;
            Ok(StepSample {
                index: *index,
                triplet,
                real_features,
                crop: *crop,
            })
        });
        let samples = match built {
            Ok(s) => s,
            Err(e) => {
                error = Some(e);
                break;
            }
        };
        let triplets: Vec<Triplet> = samples.iter().map(|s| s.triplet.clone()).collect();
        if let Err(e) = fdc::fdc_step(&mut fdc_state, &triplets, cfg.fdc_lr) {
            error = Some(e);
            break;
        }

        let step = (|| -> Result<(GeneratorLoss, [f64; 3])> {
            let (at_p, fakes) =
                generator_loss(&problem, &p, &samples, &fdc_state.model, &wd_state.model, patch, cfg.bin_kind)?;
            let reals: Vec<Vec<f64>> = samples.iter().map(|s| s.real_features.clone()).collect();
            wavelet::wd_step(&mut wd_state, &reals, &fakes, cfg.wd_lr)?;
            let mut grad = [0.0; 3];
            if it >= cfg.warmup && (w_fdc > 0.0 || w_wd > 0.0) {
                let signs: [f64; 3] = std::array::from_fn(|_| rng.sign());
                let plus = cfg.project(
                    coords[0] + cfg.spsa_delta * signs[0],
                    coords[1] + cfg.spsa_delta * signs[1],
                    coords[2] + cfg.spsa_delta * signs[2],
                );
                let minus = cfg.project(
                    coords[0] - cfg.spsa_delta * signs[0],
                    coords[1] - cfg.spsa_delta * signs[1],
                    coords[2] - cfg.spsa_delta * signs[2],
                );
                let total = |l: &GeneratorLoss| w_fdc * l.fdc + w_wd * l.wd;
                let lp = total(&generator_loss(&problem, &plus, &samples, &fdc_state.model, &wd_state.model, patch, cfg.bin_kind)?.0);
                let lm = total(&generator_loss(&problem, &minus, &samples, &fdc_state.model, &wd_state.model, patch, cfg.bin_kind)?.0);
                let spans = [
                    plus.r1 - minus.r1,
                    plus.r2 - minus.r2,
                    angle_diff(plus.theta, minus.theta),
                ];
                for c in 0..3 {
                    if spans[c].abs() > 1e-12 {
                        grad[c] = (lp - lm) / spans[c];
                    }
                }
            }
            Ok((at_p, grad))
        })();
        let (at_p, grad) = match step {
            Ok(v) => v,
            Err(e) => {
                error = Some(e);
                break;
            }
        };
        let total = w_fdc * at_p.fdc + w_wd * at_p.wd;
        trace.push(TraceRow {
            iteration: it,
            l_fdc: at_p.fdc,
            l_wd: at_p.wd,
            l_total: total,
            params: p,
        });
        if grad.iter().any(|g| *g != 0.0) {
            adam.step(&mut coords, &grad, cfg.kernel_lr);
            p = cfg.project(coords[0], coords[1], coords[2]);
            coords = [p.r1, p.r2, coords[2]];
        }

        const SMOOTH: usize = 10;
        if trace.len() >= SMOOTH {
            let recent = trace[trace.len() - SMOOTH..].iter().map(|r| r.l_total).sum::<f64>() / SMOOTH as f64;
            match smooth_init {
                None => smooth_init = Some(recent),
                Some(init) if init > 0.0 && recent > cfg.divergence_factor * init => {
                    stop = StopReason::Diverged;
                    error = Some(Error::Training {
                        message: format!(
                            "generator loss diverged at iteration {it}: smoothed {} > {} x initial {}",
                            g9(recent),
                            g9(cfg.divergence_factor),
                            g9(init)
                        ),
                        batch_index: None,
                    });
                    break;
                }
                _ => {}
            }
        }
        let w = cfg.plateau_window as usize;
        if w > 0 && it >= cfg.warmup && trace.len() >= cfg.warmup as usize + 2 * w {
            let n = trace.len();
            let mean = |rows: &[TraceRow]| rows.iter().map(|r| r.l_total).sum::<f64>() / rows.len() as f64;
            let (last, prev) = (mean(&trace[n - w..]), mean(&trace[n - 2 * w..n - w]));
            if (last - prev).abs() < cfg.plateau_tol * prev.abs().max(f64::MIN_POSITIVE) {
                stop = StopReason::Plateau;
                break;
            }
        }
    }

    let estimated = if trace.is_empty() { p } else { tail_average(&trace, cfg.average_tail, cfg) };
    let freq_distance = problem.distance(&estimated)?;
    let mut config = cfg.echo();
    config.push(("ablation".into(), ablation.to_string()));
    let report = EstimationReport {
        method: "fca".into(),
        ablation: Some(ablation),
        estimated,
        trace,
        freq_distance,
        stop,
        seconds: started.elapsed().as_secs_f64(),
        config,
    };
    Ok(FcaRun {
        report,
        comparator: fdc_state.model,
        discriminator: wd_state.model,
        error,
    })
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    if d > PI {
        d - 2.0 * PI
    } else {
        d
    }
}

fn tail_average(trace: &[TraceRow], fraction: f64, cfg: &EstimatorConfig) -> KernelParams {
    let n = ((trace.len() as f64 * fraction).round() as usize).clamp(1, trace.len());
    let tail = &trace[trace.len() - n..];
    let k = n as f64;
    let r1 = tail.iter().map(|r| r.params.r1).sum::<f64>() / k;
    let r2 = tail.iter().map(|r| r.params.r2).sum::<f64>() / k;
    let s: f64 = tail.iter().map(|r| (2.0 * r.params.theta).sin()).sum();
    let c: f64 = tail.iter().map(|r| (2.0 * r.params.theta).cos()).sum();
    cfg.project(r1, r2, 0.5 * s.atan2(c))
}

/// How the HR side of a generated pair is built from a source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HrPolicy {
    Source,
    #[default]
    Bicubic2x,
}

impl HrPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            HrPolicy::Source => "source",
            HrPolicy::Bicubic2x => "bicubic-2x",
        }
    }
}

impl fmt::Display for HrPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HrPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(HrPolicy::Source),
            "bicubic-2x" => Ok(HrPolicy::Bicubic2x),
            _ => Err(Error::arg(format!("unknown hr policy {s:?}"))),
        }
    }
}

/// A source image as one (luminance) or three (RGB) planes.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedImage {
    pub name: String,
    pub channels: Vec<ImagePlane>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairManifest {
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub skipped: Vec<(String, String)>,
    pub path: PathBuf,
}

/// Writes `hr/<name>.png` and `lr/<name>.png` for every source plus `manifest.txt`.
/// Color sources are degraded per channel with the same kernel. Paths in the
/// manifest are relative to `out_dir`.
pub fn generate_pairs(
    corpus: &[NamedImage],
    params: &KernelParams,
    scale: usize,
    kernel_side: usize,
    out_dir: impl AsRef<Path>,
    hr_policy: HrPolicy,
) -> Result<PairManifest> {
    params.validate()?;
    let out = out_dir.as_ref();
    for sub in ["hr", "lr"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let cfg = DegradationConfig::new(scale, kernel_side, *params);
    let results = crate::par::map(corpus, |img| -> Result<std::result::Result<(Vec<ImagePlane>, Vec<ImagePlane>), String>> {
        if img.channels.len() != 1 && img.channels.len() != 3 {
            return Err(Error::arg(format!("{}: expected 1 or 3 channels", img.name)));
        }
        let mut hrs = Vec::new();
        let mut lrs = Vec::new();
        for c in &img.channels {
            let hr = match hr_policy {
                HrPolicy::Source => c.clone(),
                HrPolicy::Bicubic2x => match imaging::resample_bicubic(c, 0.5) {
                    Ok(h) => h,
                    Err(e) => return Ok(Err(e.to_string())),
                },
            };
            let hr = match kernel::crop_to_multiple(&hr, scale) {
                Ok((h, _)) => h,
                Err(e) => return Ok(Err(e.to_string())),
            };
            match kernel::degrade(&hr, &cfg) {
                Ok(lr) => lrs.push(lr),
                Err(e) => return Ok(Err(e.to_string())),
            }
            hrs.push(hr);
        }
        Ok(Ok((hrs, lrs)))
    });
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    let mut lines = vec![
        "# pair manifest".to_string(),
        format!("tool={TOOL_VERSION}"),
        format!("rng={}", crate::rng::ALGORITHM),
        format!("r1={}", g9(params.r1)),
        format!("r2={}", g9(params.r2)),
        format!("theta={}", g9(params.theta)),
        format!("kernel_side={kernel_side}"),
        format!("scale={scale}"),
        format!("hr_policy={hr_policy}"),
    ];
    for (img, res) in corpus.iter().zip(results) {
        match res? {
            Ok((hrs, lrs)) => {
                let hr_rel = PathBuf::from("hr").join(format!("{}.png", img.name));
                let lr_rel = PathBuf::from("lr").join(format!("{}.png", img.name));
                write_planes(&hrs, &out.join(&hr_rel))?;
                write_planes(&lrs, &out.join(&lr_rel))?;
                lines.push(format!(
                    "pair {} {} hr={}x{} lr={}x{}",
                    hr_rel.display(),
                    lr_rel.display(),
                    hrs[0].width(),
                    hrs[0].height(),
                    lrs[0].width(),
                    lrs[0].height()
                ));
                pairs.push((hr_rel, lr_rel));
            }
            Err(why) => {
                lines.push(format!("skipped {} reason={why}", img.name));
                skipped.push((img.name.clone(), why));
            }
        }
    }
    let path = out.join("manifest.txt");
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(PairManifest { pairs, skipped, path })
}

fn write_planes(planes: &[ImagePlane], path: &Path) -> Result<()> {
    match planes {
        [g] => imaging::save_png(g, path),
        [r, g, b] => imaging::save_png_rgb([r, g, b], path),
        _ => unreachable!("channel count checked"),
    }
}

/// Frequency distance between a generated-LR domain and a source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub d_bar: f64,
    pub lr_profile: DomainProfile,
    pub source_profile: DomainProfile,
}

/// Profiles both sets over non-overlapping `patch`-sized tiles and compares them.
pub fn verify_consistency(lr: &[ImagePlane], source: &[ImagePlane], patch: usize, kind: BinKind) -> Result<ConsistencyReport> {
    if lr.is_empty() || source.is_empty() {
        return Err(Error::arg("both image sets must be non-empty"));
    }
    let tiles = |set: &[ImagePlane]| -> Result<Vec<ImagePlane>> {
        let mut out = Vec::new();
        for img in set {
            out.extend(imaging::tile_patches(img, patch)?);
        }
        Ok(out)
    };
    let lr_profile = spectral::frequency_profile(&tiles(lr)?, kind)?;
    let source_profile = spectral::frequency_profile(&tiles(source)?, kind)?;
    Ok(ConsistencyReport {
        d_bar: spectral::freq_distance(&lr_profile, &source_profile)?,
        lr_profile,
        source_profile,
    })
}
