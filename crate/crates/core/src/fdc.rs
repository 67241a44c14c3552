//! Frequency density comparator.
//!
//! A shared scalar encoder `E` maps a normalized frequency profile to an embedding;
//! the comparator is `C(a, b) = E(a) - E(b)`, so it is antisymmetric for any weights.
//! Training is self-supervised on triplets cut from the source images: a downsampled
//! view should compare as `+1` against its anchor, an upsampled view as `-1`, and
//! another patch of the same image as `0`. The resampling factor follows a curriculum
//! that shrinks towards 1.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imaging::{self, ImagePlane, PatchSpec};
use crate::nn::{self, Adam, Mlp, Trace, LEAKY_SLOPE};
use crate::rng::SeededStream;
use crate::spectral::{self, BinKind, FrequencyProfile, NormMode};

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];
pub const DEFAULT_PATCH: usize = 64;
/// Profiles with total density below this carry no ordering signal.
pub const DEGENERATE_ENERGY: f64 = 1e-6;
pub const CHECKPOINT_TAG: &str = "fdc";

#[derive(Debug, Clone, PartialEq)]
pub struct ComparatorModel {
    encoder: Mlp,
    normalization: NormMode,
}

impl ComparatorModel {
    pub fn new(bins: usize, hidden: [usize; 2], normalization: NormMode, seed: u64) -> Self {
        Self {
            encoder: Mlp::new(&[bins, hidden[0], hidden[1], 1], LEAKY_SLOPE, seed),
            normalization,
        }
    }

    /// All-zero weights: every comparison returns 0.
    pub fn zeros(bins: usize, hidden: [usize; 2], normalization: NormMode) -> Self {
        Self {
            encoder: Mlp::zeros(&[bins, hidden[0], hidden[1], 1], LEAKY_SLOPE),
            normalization,
        }
    }

    pub fn from_encoder(encoder: Mlp, normalization: NormMode) -> Result<Self> {
        if *encoder.sizes().last().unwrap() != 1 {
            return Err(Error::arg("comparator encoder must end in one unit"));
        }
        Ok(Self {
            encoder,
            normalization,
        })
    }

    pub fn bins(&self) -> usize {
        self.encoder.input_len()
    }

    pub fn normalization(&self) -> NormMode {
        self.normalization
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    fn input(&self, p: &FrequencyProfile) -> Result<Vec<f64>> {
        if p.len() != self.bins() {
            return Err(Error::arg(format!(
                "profile has {} bins, comparator expects {}",
                p.len(),
                self.bins()
            )));
        }
        Ok(spectral::normalize_bins(p, self.normalization)?.bins)
    }

    /// Scalar embedding `E(p)`.
    pub fn embed(&self, p: &FrequencyProfile) -> Result<f64> {
        Ok(self.encoder.forward(&self.input(p)?)[0])
    }

    fn embed_trace(&self, p: &FrequencyProfile) -> Result<(f64, Trace)> {
        let t = self.encoder.forward_trace(&self.input(p)?);
        Ok((t.output()[0], t))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nn::Checkpoint {
            tag: CHECKPOINT_TAG.into(),
            sizes: self.encoder.sizes().to_vec(),
            slope: self.encoder.slope(),
            normalization: Some(self.normalization),
            params: self.encoder.params().to_vec(),
        }
        .save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = nn::Checkpoint::load(path)?;
        if ck.tag != CHECKPOINT_TAG {
            return Err(Error::Format(format!("expected {CHECKPOINT_TAG} checkpoint, found {}", ck.tag)));
        }
        let norm = ck
            .normalization
            .ok_or_else(|| Error::Format("comparator checkpoint lacks normalization".into()))?;
        let enc = Mlp::from_params(&ck.sizes, ck.slope, ck.params)
            .ok_or_else(|| Error::Format("checkpoint parameter count mismatch".into()))?;
        Self::from_encoder(enc, norm)
    }
}

/// `C(a, b) = E(a) - E(b)`.
pub fn comparator_forward(model: &ComparatorModel, a: &FrequencyProfile, b: &FrequencyProfile) -> Result<f64> {
    Ok(model.embed(a)? - model.embed(b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decay {
    #[default]
    Linear,
    Geometric,
}

impl FromStr for Decay {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Decay::Linear),
            "geometric" => Ok(Decay::Geometric),
            _ => Err(Error::arg(format!("unknown decay {s:?}"))),
        }
    }
}

impl fmt::Display for Decay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decay::Linear => "linear",
            Decay::Geometric => "geometric",
        })
    }
}

/// Resampling factor for triplets as a function of the training iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumSchedule {
    pub start_scale: f64,
    pub end_scale: f64,
    pub steps: u64,
    pub decay: Decay,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            start_scale: 3.5,
            end_scale: 1.2,
            steps: 2000,
            decay: Decay::Linear,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start_scale > self.end_scale && self.end_scale > 1.0) {
            return Err(Error::arg(format!(
                "curriculum needs start > end > 1, got {} -> {}",
                self.start_scale, self.end_scale
            )));
        }
        Ok(())
    }

    /// Non-increasing in `iteration`; holds `end_scale` after `steps`.
    pub fn scale_at(&self, iteration: u64) -> f64 {
        let frac = if self.steps == 0 {
            1.0
        } else {
            (iteration as f64 / self.steps as f64).min(1.0)
        };
        match self.decay {
            Decay::Linear => self.start_scale + (self.end_scale - self.start_scale) * frac,
            Decay::Geometric => self.start_scale * (self.end_scale / self.start_scale).powf(frac),
        }
    }
}

/// Profiles of one training example, all from equal-size patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub down: FrequencyProfile,
    pub same: FrequencyProfile,
    pub up: FrequencyProfile,
    pub anchor: FrequencyProfile,
    /// Pixels behind `anchor`, kept for the wavelet discriminator.
    pub anchor_patch: ImagePlane,
    pub degenerate: bool,
}

/// Cuts the anchor, a downsampled view (by `1/scale`), an upsampled view (by `scale`)
/// around the same center, and a second patch at another position.
///
/// `spec.size` is the patch side, `spec.seed` picks positions; `spec.count` is ignored.
pub fn make_triplet(x: &ImagePlane, scale: f64, spec: &PatchSpec, kind: BinKind) -> Result<Triplet> {
    if !(scale > 1.0) {
        return Err(Error::arg(format!("triplet scale must be > 1, got {scale}")));
    }
    let p = spec.size;
    let (w, h) = x.dims();
    let down_side = (p as f64 * scale).ceil() as usize;
    if down_side > w.min(h) {
        return Err(Error::arg(format!(
            "{w}x{h} image cannot hold a {down_side}px region for scale {scale}"
        )));
    }
    let mut rng = SeededStream::new(spec.seed);
    // top-left of the down region; the anchor sits at its center
    let dx = rng.below((w - down_side + 1) as u64) as usize;
    let dy = rng.below((h - down_side + 1) as u64) as usize;
    let cx = dx + down_side / 2;
    let cy = dy + down_side / 2;

    let anchor_patch = x.crop(cx - p / 2, cy - p / 2, p, p)?;

    let region = x.crop(dx, dy, down_side, down_side)?;
    let down_patch = imaging::resample_bicubic(&region, 1.0 / scale)?.center_crop(p, p)?;

    let up_side = ((p as f64 / scale).ceil() as usize + 4).min(w.min(h));
    let ux = (cx + 1).saturating_sub(up_side / 2 + 1).min(w - up_side);
    let uy = (cy + 1).saturating_sub(up_side / 2 + 1).min(h - up_side);
    let up_region = x.crop(ux, uy, up_side, up_side)?;
    let up_full = imaging::resample_bicubic(&up_region, scale)?;
    if up_full.width() < p || up_full.height() < p {
        return Err(Error::arg("upsampled region smaller than patch"));
    }
    let up_patch = up_full.center_crop(p, p)?;

    let (mut sx, mut sy);
    let mut tries = 0;
    loop {
        sx = rng.below((w - p + 1) as u64) as usize;
        sy = rng.below((h - p + 1) as u64) as usize;
        tries += 1;
        if (sx, sy) != (cx - p / 2, cy - p / 2) || tries > 8 {
            break;
        }
    }
    let same_patch = x.crop(sx, sy, p, p)?;

    let prof = |im: &ImagePlane| spectral::patch_profile(im, kind);
    let t = Triplet {
        down: prof(&down_patch)?,
        same: prof(&same_patch)?,
        up: prof(&up_patch)?,
        anchor: prof(&anchor_patch)?,
        anchor_patch,
        degenerate: false,
    };
    let degenerate = [&t.down, &t.same, &t.up, &t.anchor]
        .iter()
        .any(|p| p.energy() < DEGENERATE_ENERGY);
    Ok(Triplet { degenerate, ..t })
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `|C(down, x) - 1| + |C(same, x)| + |C(up, x) + 1|`.
pub fn fdc_train_loss(model: &ComparatorModel, t: &Triplet) -> Result<f64> {
    let ea = model.embed(&t.anchor)?;
    let cd = model.embed(&t.down)? - ea;
    let cs = model.embed(&t.same)? - ea;
    let cu = model.embed(&t.up)? - ea;
    Ok((cd - 1.0).abs() + cs.abs() + (cu + 1.0).abs())
}

/// Loss and its gradient for one triplet (gradient accumulated into `grad`).
fn triplet_loss_grad(model: &ComparatorModel, t: &Triplet, grad: &mut [f64]) -> Result<f64> {
    let (ea, ta) = model.embed_trace(&t.anchor)?;
    let (ed, td) = model.embed_trace(&t.down)?;
    let (es, ts) = model.embed_trace(&t.same)?;
    let (eu, tu) = model.embed_trace(&t.up)?;
    let (cd, cs, cu) = (ed - ea, es - ea, eu - ea);
    let (gd, gs, gu) = (sgn(cd - 1.0), sgn(cs), sgn(cu + 1.0));
    let enc = &model.encoder;
    enc.backward(&td, &[gd], grad);
    enc.backward(&ts, &[gs], grad);
    enc.backward(&tu, &[gu], grad);
    enc.backward(&ta, &[-(gd + gs + gu)], grad);
    Ok((cd - 1.0).abs() + cs.abs() + (cu + 1.0).abs())
}

/// Mean loss over the non-degenerate triplets and its gradient.
pub fn batch_loss_grad(model: &ComparatorModel, batch: &[Triplet]) -> Result<(f64, Vec<f64>, usize)> {
    let mut grad = vec![0.0; model.encoder.params().len()];
    let mut scratch = vec![0.0; grad.len()];
    let mut loss = 0.0;
    let mut used = 0;
    for (i, t) in batch.iter().enumerate() {
        if t.degenerate {
            continue;
        }
        scratch.iter_mut().for_each(|g| *g = 0.0);
        let l = triplet_loss_grad(model, t, &mut scratch)?;
        if !l.is_finite() || scratch.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                message: "non-finite comparator gradient".into(),
                batch_index: Some(i),
            });
        }
        for (g, s) in grad.iter_mut().zip(&scratch) {
            *g += s;
        }
        loss += l;
        used += 1;
    }
    if used > 0 {
        let n = used as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        loss /= n;
    }
    Ok((loss, grad, used))
}

/// Comparator training state; a single owner mutates it.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ComparatorModel,
    pub optimizer: Adam,
    pub iteration: u64,
    pub seed: u64,
    pub schedule: CurriculumSchedule,
}

impl TrainState {
    pub fn new(model: ComparatorModel, schedule: CurriculumSchedule, seed: u64) -> Self {
        let n = model.encoder.params().len();
        Self {
            model,
            optimizer: Adam::new(n),
            iteration: 0,
            seed,
            schedule,
        }
    }

    /// Triplet scale for the next step.
    pub fn curriculum_scale(&self) -> f64 {
        self.schedule.scale_at(self.iteration)
    }
}

/// One Adam update on `batch`. Returns the mean pre-update loss; degenerate triplets
/// are skipped. On error the state is left untouched.
pub fn fdc_step(state: &mut TrainState, batch: &[Triplet], lr: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::arg("empty comparator batch"));
    }
    let (loss, grad, used) = batch_loss_grad(&state.model, batch)?;
    if used > 0 {
        state
            .optimizer
            .step(state.model.encoder.params_mut(), &grad, lr);
    }
    state.iteration += 1;
    Ok(loss)
}

/// Generator-side consistency loss:
/// `|C(g, down) + 1| + |C(g, x)| + |C(g, up) - 1|`.
pub fn fdc_consistency_loss(
    model: &ComparatorModel,
    g_profile: &FrequencyProfile,
    anchor: &FrequencyProfile,
    x_down: &FrequencyProfile,
    x_up: &FrequencyProfile,
) -> Result<f64> {
    let eg = model.embed(g_profile)?;
    consistency_from_embeddings(eg, model.embed(anchor)?, model.embed(x_down)?, model.embed(x_up)?)
}

pub(crate) fn consistency_from_embeddings(eg: f64, ea: f64, ed: f64, eu: f64) -> Result<f64> {
    Ok((eg - ed + 1.0).abs() + (eg - ea).abs() + (eg - eu - 1.0).abs())
}

/// Fraction of non-degenerate triplets with `C(down, x) > 0` and `C(up, x) < 0`.
pub fn ordering_accuracy(model: &ComparatorModel, triplets: &[Triplet]) -> Result<f64> {
    let mut ok = 0usize;
    let mut n = 0usize;
    for t in triplets.iter().filter(|t| !t.degenerate) {
        n += 1;
        if comparator_forward(model, &t.down, &t.anchor)? > 0.0 && comparator_forward(model, &t.up, &t.anchor)? < 0.0 {
            ok += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("no textured triplets to score".into()));
    }
    Ok(ok as f64 / n as f64)
}

/// Settings for standalone comparator training.
#[derive(Debug, Clone, PartialEq)]
pub struct FdcTrainConfig {
    pub patch_size: usize,
    pub hidden: [usize; 2],
    pub normalization: NormMode,
    pub bin_kind: BinKind,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr: f64,
    pub schedule: CurriculumSchedule,
    pub seed: u64,
}

impl Default for FdcTrainConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH,
            hidden: DEFAULT_HIDDEN,
            normalization: NormMode::default(),
            bin_kind: BinKind::AxisAveraged,
            batch_size: 8,
            iterations: 2000,
            lr: 1e-3,
            schedule: CurriculumSchedule::default(),
            seed: 0,
        }
    }
}

/// Builds `count` triplets at `scale` from randomly chosen sources; triplet preparation
/// runs on the worker pool.
pub fn sample_triplets(
    sources: &[ImagePlane],
    scale: f64,
    patch_size: usize,
    kind: BinKind,
    count: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if sources.is_empty() {
        return Err(Error::arg("no source images"));
    }
    crate::par::map_range(count, |i| {
        let mut rng = SeededStream::derive(seed, i as u64);
        let img = &sources[rng.below(sources.len() as u64) as usize];
        let spec = PatchSpec::new(patch_size, 1, rng.next_u64());
        make_triplet(img, scale, &spec, kind)
    })
    .into_iter()
    .collect()
}

/// Trains a comparator from scratch over the curriculum. Returns the final state and
/// the per-iteration mean loss.
pub fn train_comparator(sources: &[ImagePlane], cfg: &FdcTrainConfig) -> Result<(TrainState, Vec<f64>)> {
    cfg.schedule.validate()?;
    let bins = spectral::bin_count(cfg.patch_size);
    let model = ComparatorModel::new(bins, cfg.hidden, cfg.normalization, crate::rng::mix(cfg.seed, 1));
    let mut state = TrainState::new(model, cfg.schedule, cfg.seed);
    let mut curve = Vec::with_capacity(cfg.iterations as usize);
    for it in 0..cfg.iterations {
        let scale = state.curriculum_scale();
        let batch = sample_triplets(
            sources,
            scale,
            cfg.patch_size,
            cfg.bin_kind,
            cfg.batch_size,
            crate::rng::mix(cfg.seed, 1000 + it),
        )?;
        curve.push(fdc_step(&mut state, &batch, cfg.lr)?);
    }
    Ok((state, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{self, KernelParams};
    use crate::nn::{central_difference, relative_error};

    fn prof(bins: Vec<f64>) -> FrequencyProfile {
        FrequencyProfile {
            source_size: 2 * (bins.len() - 1),
            bins,
            kind: BinKind::AxisAveraged,
        }
    }

    fn textured(n: usize, seed: u64) -> ImagePlane {
        let mut r = SeededStream::new(seed);
        let img = ImagePlane::from_fn(n, n, |_, _| r.uniform());
        let k = kernel::gaussian_kernel(&KernelParams::isotropic(1.0).unwrap(), 7).unwrap();
        imaging::convolve2d(&img, &k).unwrap()
    }

    fn random_profile(n: usize, seed: u64) -> FrequencyProfile {
        let mut r = SeededStream::new(seed);
        prof((0..n).map(|_| 0.1 + r.uniform() * 5.0).collect())
    }

    #[test]
    fn antisymmetric_and_zero_on_self() {
        for seed in 0..5 {
            let m = ComparatorModel::new(9, [8, 4], NormMode::Log1p, seed);
            let p = random_profile(9, seed + 10);
            let q = random_profile(9, seed + 20);
            assert_eq!(comparator_forward(&m, &p, &p).unwrap(), 0.0);
            assert_eq!(
                comparator_forward(&m, &p, &q).unwrap(),
                -comparator_forward(&m, &q, &p).unwrap()
            );
        }
    }

    #[test]
    fn bin_mismatch_is_an_error() {
        let m = ComparatorModel::new(9, [8, 4], NormMode::None, 0);
        assert!(comparator_forward(&m, &random_profile(9, 1), &random_profile(8, 1)).is_err());
    }

    #[test]
    fn zero_model_losses() {
        let m = ComparatorModel::zeros(33, DEFAULT_HIDDEN, NormMode::UnitSum);
        let img = textured(160, 3);
        let t = make_triplet(&img, 2.0, &PatchSpec::new(64, 1, 5), BinKind::AxisAveraged).unwrap();
        assert_eq!(fdc_train_loss(&m, &t).unwrap(), 2.0);
        assert_eq!(
            fdc_consistency_loss(&m, &t.same, &t.anchor, &t.down, &t.up).unwrap(),
            2.0
        );
    }

    #[test]
    fn perfect_comparator_has_zero_losses() {
        // embeddings: down = 1, anchor = same = 0, up = -1 via a linear encoder reading bin 0
        let enc = Mlp::from_params(&[2, 1, 1, 1], LEAKY_SLOPE, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let m = ComparatorModel::from_encoder(enc, NormMode::None).unwrap();
        // E reads bin 0 while it stays positive: down 3, anchor/same 2, up 1
        let p = |v: f64| prof(vec![v, 0.0]);
        let t = Triplet {
            down: p(3.0),
            same: p(2.0),
            up: p(1.0),
            anchor: p(2.0),
            anchor_patch: ImagePlane::filled(2, 2, 0.0),
            degenerate: false,
        };
        assert_eq!(fdc_train_loss(&m, &t).unwrap(), 0.0);
        assert_eq!(
            fdc_consistency_loss(&m, &t.anchor, &t.anchor, &t.down, &t.up).unwrap(),
            0.0
        );
    }

    #[test]
    fn triplet_shape_and_determinism() {
        let img = textured(512, 1);
        let spec = PatchSpec::new(64, 1, 9);
        let t = make_triplet(&img, 3.5, &spec, BinKind::AxisAveraged).unwrap();
        for p in [&t.down, &t.same, &t.up, &t.anchor] {
            assert_eq!(p.len(), 33);
            assert_eq!(p.source_size, 64);
        }
        assert!(!t.degenerate);
        assert_eq!(t, make_triplet(&img, 3.5, &spec, BinKind::AxisAveraged).unwrap());
    }

    #[test]
    fn constant_triplet_is_degenerate() {
        let img = ImagePlane::filled(512, 512, 0.4);
        let t = make_triplet(&img, 3.5, &PatchSpec::new(64, 1, 0), BinKind::AxisAveraged).unwrap();
        assert!(t.degenerate);
        for p in [&t.down, &t.same, &t.up, &t.anchor] {
            assert!(p.energy() < DEGENERATE_ENERGY);
        }
        let mut state = TrainState::new(
            ComparatorModel::new(33, [8, 4], NormMode::UnitSum, 0),
            CurriculumSchedule::default(),
            0,
        );
        let before = state.model.clone();
        fdc_step(&mut state, &[t], 0.1).unwrap();
        assert_eq!(state.model, before);
    }

    #[test]
    fn triplet_errors() {
        let img = textured(128, 1);
        assert!(make_triplet(&img, 3.5, &PatchSpec::new(64, 1, 0), BinKind::AxisAveraged).is_err());
        assert!(make_triplet(&img, 1.0, &PatchSpec::new(32, 1, 0), BinKind::AxisAveraged).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let s = CurriculumSchedule {
            steps: 100,
            ..Default::default()
        };
        assert_eq!(s.scale_at(0), 3.5);
        assert!((s.scale_at(100) - 1.2).abs() < 1e-12);
        assert!((s.scale_at(1000) - 1.2).abs() < 1e-12);
        for decay in [Decay::Linear, Decay::Geometric] {
            let s = CurriculumSchedule { decay, ..s };
            let mut prev = f64::INFINITY;
            for t in 0..150 {
                let v = s.scale_at(t);
                assert!(v <= prev);
                prev = v;
            }
        }
        assert!(CurriculumSchedule {
            start_scale: 1.1,
            end_scale: 1.2,
            ..s
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let img = textured(200, 2);
        let batch = sample_triplets(&[img], 2.0, 32, BinKind::AxisAveraged, 4, 1).unwrap();
        let mut state = TrainState::new(
            ComparatorModel::new(17, [8, 4], NormMode::Log1p, 3),
            CurriculumSchedule::default(),
            0,
        );
        let before = state.model.clone();
        fdc_step(&mut state, &batch, 0.0).unwrap();
        assert_eq!(state.model, before);
        assert_eq!(state.iteration, 1);
        assert!(fdc_step(&mut state, &[], 0.1).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let img = textured(200, 4);
        let batch = sample_triplets(&[img], 2.0, 32, BinKind::AxisAveraged, 3, 8).unwrap();
        let model = ComparatorModel::new(17, [16, 8], NormMode::Log1p, 5);
        let (_, grad, _) = batch_loss_grad(&model, &batch).unwrap();
        let sizes = model.encoder().sizes().to_vec();
        let mut params = model.encoder().params().to_vec();
        let mut worst: f64 = 0.0;
        for i in 0..params.len() {
            let fd = central_difference(&mut params, i, 1e-4, |p| {
                let m = ComparatorModel::from_encoder(
                    Mlp::from_params(&sizes, LEAKY_SLOPE, p.to_vec()).unwrap(),
                    NormMode::Log1p,
                )
                .unwrap();
                batch_loss_grad(&m, &batch).unwrap().0
            });
            worst = worst.max(relative_error(grad[i], fd, 1e-6));
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fdc.ckpt");
        let m = ComparatorModel::new(33, DEFAULT_HIDDEN, NormMode::Log1p, 7);
        m.save(&path).unwrap();
        let back = ComparatorModel::load(&path).unwrap();
        assert_eq!(back.normalization(), NormMode::Log1p);
        assert_eq!(back.encoder().sizes(), m.encoder().sizes());
        for (a, b) in back.encoder().params().iter().zip(m.encoder().params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
