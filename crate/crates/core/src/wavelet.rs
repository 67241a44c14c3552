//! Single-level orthonormal Haar transform and the least-squares discriminator that
//! only sees high-frequency band statistics.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::ImagePlane;
use crate::nn::{self, Adam, Mlp, LEAKY_SLOPE};
use crate::spectral::{self, BinKind};

pub const CHECKPOINT_TAG: &str = "wd";
pub const DEFAULT_HIDDEN: [usize; 3] = [32, 32, 16];
// floor inside the log of band statistics
const STAT_FLOOR: f64 = 1e-6;

/// The four half-size sub-bands. `lh` holds horizontal structure (low-pass along x,
/// high-pass along y), `hl` vertical structure, `hh` diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBands {
    pub ll: ImagePlane,
    pub lh: ImagePlane,
    pub hl: ImagePlane,
    pub hh: ImagePlane,
    /// Whether a trailing column / row was dropped to make the input even.
    pub cropped: (bool, bool),
}

impl WaveletBands {
    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .map(|b| b.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn high_energy(&self) -> f64 {
        [&self.lh, &self.hl, &self.hh]
            .iter()
            .map(|b| b.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Orthonormal Haar analysis on 2x2 blocks `[a b; c d]`:
/// `ll = (a+b+c+d)/2`, `lh = (a+b-c-d)/2`, `hl = (a-b+c-d)/2`, `hh = (a-b-c+d)/2`.
pub fn haar_dwt(img: &ImagePlane) -> Result<WaveletBands> {
    let (w, h) = img.dims();
    if w < 2 || h < 2 {
        return Err(Error::arg(format!("Haar transform needs at least 2x2, got {w}x{h}")));
    }
    let (ew, eh) = (w & !1, h & !1);
    let (hw, hh_) = (ew / 2, eh / 2);
    let mut bands = [
        Vec::with_capacity(hw * hh_),
        Vec::with_capacity(hw * hh_),
        Vec::with_capacity(hw * hh_),
        Vec::with_capacity(hw * hh_),
    ];
    for by in 0..hh_ {
        for bx in 0..hw {
            let a = img.get(2 * bx, 2 * by);
            let b = img.get(2 * bx + 1, 2 * by);
            let c = img.get(2 * bx, 2 * by + 1);
            let d = img.get(2 * bx + 1, 2 * by + 1);
            bands[0].push(0.5 * (a + b + c + d));
            bands[1].push(0.5 * (a + b - c - d));
            bands[2].push(0.5 * (a - b + c - d));
            bands[3].push(0.5 * (a - b - c + d));
        }
    }
    let [ll, lh, hl, hh] = bands;
    Ok(WaveletBands {
        ll: ImagePlane::new(hw, hh_, ll)?,
        lh: ImagePlane::new(hw, hh_, lh)?,
        hl: ImagePlane::new(hw, hh_, hl)?,
        hh: ImagePlane::new(hw, hh_, hh)?,
        cropped: (ew != w, eh != h),
    })
}

/// Exact inverse of [`haar_dwt`] (on the even-cropped input). Not clamped.
pub fn haar_idwt(bands: &WaveletBands) -> Result<ImagePlane> {
    let dims = bands.ll.dims();
    if [&bands.lh, &bands.hl, &bands.hh].iter().any(|b| b.dims() != dims) {
        return Err(Error::arg("wavelet bands differ in size"));
    }
    let (hw, hh) = dims;
    let mut out = vec![0.0; 4 * hw * hh];
    let w = 2 * hw;
    for by in 0..hh {
        for bx in 0..hw {
            let s = bands.ll.get(bx, by);
            let v = bands.lh.get(bx, by);
            let hz = bands.hl.get(bx, by);
            let dg = bands.hh.get(bx, by);
            out[2 * by * w + 2 * bx] = 0.5 * (s + v + hz + dg);
            out[2 * by * w + 2 * bx + 1] = 0.5 * (s + v - hz - dg);
            out[(2 * by + 1) * w + 2 * bx] = 0.5 * (s - v + hz - dg);
            out[(2 * by + 1) * w + 2 * bx + 1] = 0.5 * (s - v - hz + dg);
        }
    }
    ImagePlane::new(w, 2 * hh, out)
}

/// Number of discriminator features for a square patch of side `patch`.
pub fn feature_len(patch: usize) -> usize {
    6 + spectral::bin_count(patch / 2)
}

/// Fixed-length high-band description of a square patch: per band (LH, HL, HH)
/// `ln(floor + mean|b|)` and `ln(floor + var b)`, then `log1p` of the frequency
/// profile pooled over the three bands.
pub fn high_band_features(patch: &ImagePlane) -> Result<Vec<f64>> {
    if !patch.is_square() || !patch.width().is_multiple_of(2) || patch.width() < 4 {
        return Err(Error::arg(format!(
            "discriminator patches must be square, even and >= 4, got {}x{}",
            patch.width(),
            patch.height()
        )));
    }
    let b = haar_dwt(patch)?;
    let mut f = Vec::with_capacity(feature_len(patch.width()));
    for band in [&b.lh, &b.hl, &b.hh] {
        let n = band.data().len() as f64;
        let mean_abs = band.data().iter().map(|v| v.abs()).sum::<f64>() / n;
        let mean = band.mean();
        let var = band.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        f.push((STAT_FLOOR + mean_abs).ln());
        f.push((STAT_FLOOR + var).ln());
    }
    let prof = spectral::frequency_profile(&[b.lh, b.hl, b.hh], BinKind::AxisAveraged)?;
    f.extend(prof.bins().iter().map(|v| v.ln_1p()));
    Ok(f)
}

/// Four fully-connected layers on [`high_band_features`], scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorModel {
    net: Mlp,
}

impl DiscriminatorModel {
    pub fn new(features: usize, seed: u64) -> Self {
        let h = DEFAULT_HIDDEN;
        Self {
            net: Mlp::new(&[features, h[0], h[1], h[2], 1], LEAKY_SLOPE, seed),
        }
    }

    pub fn zeros(features: usize) -> Self {
        let h = DEFAULT_HIDDEN;
        Self {
            net: Mlp::zeros(&[features, h[0], h[1], h[2], 1], LEAKY_SLOPE),
        }
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.layer_count() != 4 || *net.sizes().last().unwrap() != 1 {
            return Err(Error::arg("discriminator must have 4 layers and a scalar output"));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn score(&self, features: &[f64]) -> f64 {
        self.net.forward(features)[0]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nn::Checkpoint {
            tag: CHECKPOINT_TAG.into(),
            sizes: self.net.sizes().to_vec(),
            slope: self.net.slope(),
            normalization: None,
            params: self.net.params().to_vec(),
        }
        .save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = nn::Checkpoint::load(path)?;
        if ck.tag != CHECKPOINT_TAG {
            return Err(Error::Format(format!("expected {CHECKPOINT_TAG} checkpoint, found {}", ck.tag)));
        }
        let net = Mlp::from_params(&ck.sizes, ck.slope, ck.params)
            .ok_or_else(|| Error::Format("checkpoint parameter count mismatch".into()))?;
        Self::from_net(net)
    }
}

/// `WD(fake)^2 + (WD(real) - 1)^2`.
pub fn wd_loss_discriminator(model: &DiscriminatorModel, real_hf: &[f64], fake_hf: &[f64]) -> f64 {
    model.score(fake_hf).powi(2) + (model.score(real_hf) - 1.0).powi(2)
}

/// `(WD(fake) - 1)^2`.
pub fn wd_loss_generator(model: &DiscriminatorModel, fake_hf: &[f64]) -> f64 {
    (model.score(fake_hf) - 1.0).powi(2)
}

/// Batch discriminator loss (mean over each side) and its parameter gradient.
pub fn batch_loss_grad(
    model: &DiscriminatorModel,
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::arg("discriminator batches must be non-empty"));
    }
    let mut grad = vec![0.0; model.net.params().len()];
    let mut loss = 0.0;
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    for (i, f) in fake.iter().enumerate() {
        let t = model.net.forward_trace(f);
        let s = t.output()[0];
        loss += s * s / nf;
        model.net.backward(&t, &[2.0 * s / nf], &mut grad);
        check_finite(&grad, i)?;
    }
    for (i, r) in real.iter().enumerate() {
        let t = model.net.forward_trace(r);
        let s = t.output()[0];
        loss += (s - 1.0).powi(2) / nr;
        model.net.backward(&t, &[2.0 * (s - 1.0) / nr], &mut grad);
        check_finite(&grad, fake.len() + i)?;
    }
    Ok((loss, grad))
}

fn check_finite(grad: &[f64], index: usize) -> Result<()> {
    if grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::Training {
            message: "non-finite discriminator gradient".into(),
            batch_index: Some(index),
        })
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorState {
    pub model: DiscriminatorModel,
    pub optimizer: Adam,
    pub iteration: u64,
}

impl DiscriminatorState {
    pub fn new(model: DiscriminatorModel) -> Self {
        let n = model.net.params().len();
        Self {
            model,
            optimizer: Adam::new(n),
            iteration: 0,
        }
    }
}

/// One Adam update of the discriminator. Returns the pre-update batch loss. Error
/// indices count fake items first, then real items.
pub fn wd_step(state: &mut DiscriminatorState, real: &[Vec<f64>], fake: &[Vec<f64>], lr: f64) -> Result<f64> {
    let (loss, grad) = batch_loss_grad(&state.model, real, fake)?;
    state.optimizer.step(state.model.net.params_mut(), &grad, lr);
    state.iteration += 1;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{central_difference, relative_error};
    use crate::rng::SeededStream;
    use proptest::prelude::*;

    fn noise(w: usize, h: usize, seed: u64) -> ImagePlane {
        let mut r = SeededStream::new(seed);
        ImagePlane::from_fn(w, h, |_, _| r.uniform())
    }

    fn sq(img: &ImagePlane) -> f64 {
        img.data().iter().map(|v| v * v).sum()
    }

    #[test]
    fn constant_image_bands() {
        let b = haar_dwt(&ImagePlane::filled(8, 6, 0.3)).unwrap();
        assert!(b.ll.data().iter().all(|v| (v - 0.6).abs() < 1e-15));
        for band in [&b.lh, &b.hl, &b.hh] {
            assert!(band.data().iter().all(|v| *v == 0.0));
        }
    }

    // A 0/1 checkerboard is 0.5 (DC) plus a zero-mean period-2 pattern; all of the
    // zero-mean part lands in HH.
    #[test]
    fn checkerboard_detail_is_diagonal() {
        let img = ImagePlane::from_fn(16, 16, |x, y| ((x + y) % 2) as f64);
        let b = haar_dwt(&img).unwrap();
        assert_eq!(sq(&b.lh), 0.0);
        assert_eq!(sq(&b.hl), 0.0);
        let mean = img.mean();
        let ac: f64 = img.data().iter().map(|v| (v - mean).powi(2)).sum();
        assert!((sq(&b.hh) - ac).abs() < 1e-12);
    }

    #[test]
    fn odd_input_is_cropped() {
        let b = haar_dwt(&noise(9, 6, 1)).unwrap();
        assert_eq!(b.cropped, (true, false));
        assert_eq!(b.ll.dims(), (4, 3));
        assert!(haar_dwt(&noise(1, 6, 1)).is_err());
    }

    #[test]
    fn zero_bands_give_zero_image() {
        let z = ImagePlane::filled(4, 4, 0.0);
        let bands = WaveletBands {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
            cropped: (false, false),
        };
        assert!(haar_idwt(&bands).unwrap().data().iter().all(|v| *v == 0.0));
        let mut bad = bands.clone();
        bad.hh = ImagePlane::filled(3, 4, 0.0);
        assert!(haar_idwt(&bad).is_err());
    }

    #[test]
    fn low_pass_residual_equals_zeroed_energy() {
        let img = noise(32, 32, 4);
        let b = haar_dwt(&img).unwrap();
        let zeroed = b.high_energy();
        let z = ImagePlane::filled(16, 16, 0.0);
        let lp = haar_idwt(&WaveletBands {
            ll: b.ll.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
            cropped: (false, false),
        })
        .unwrap();
        let resid: f64 = img.data().iter().zip(lp.data()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((resid - zeroed).abs() < 1e-9);
    }

    #[test]
    fn natural_reconstruction_psnr() {
        let img = noise(64, 48, 2);
        let back = haar_idwt(&haar_dwt(&img).unwrap()).unwrap();
        let mse: f64 = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 3072.0;
        assert!(mse == 0.0 || 10.0 * (1.0 / mse).log10() > 100.0);
    }

    #[test]
    fn loss_examples() {
        // net outputs its single feature: 4 identity-ish layers on a 1-d input
        let ident = Mlp::from_params(&[1, 1, 1, 1, 1], LEAKY_SLOPE, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let m = DiscriminatorModel::from_net(ident).unwrap();
        assert_eq!(wd_loss_discriminator(&m, &[1.0], &[0.0]), 0.0);
        assert_eq!(wd_loss_discriminator(&m, &[0.0], &[1.0]), 2.0);
        assert_eq!(wd_loss_generator(&m, &[1.0]), 0.0);
        assert_eq!(wd_loss_generator(&m, &[0.0]), 1.0);
        // leaky slope compounds through three hidden layers for negative input
        let neg = -1.0 / LEAKY_SLOPE.powi(3);
        assert!((wd_loss_generator(&m, &[neg]) - 4.0).abs() < 1e-12);
        let z = DiscriminatorModel::zeros(5);
        assert_eq!(wd_loss_discriminator(&z, &[1.0; 5], &[2.0; 5]), 1.0);
    }

    #[test]
    fn features_have_fixed_length() {
        let f = high_band_features(&noise(64, 64, 3)).unwrap();
        assert_eq!(f.len(), feature_len(64));
        assert_eq!(feature_len(64), 23);
        assert!(f.iter().all(|v| v.is_finite()));
        assert!(high_band_features(&noise(63, 63, 3)).is_err());
    }

    #[test]
    fn zero_lr_and_gradient_check() {
        let real: Vec<Vec<f64>> = (0..4).map(|s| high_band_features(&noise(16, 16, s)).unwrap()).collect();
        let fake: Vec<Vec<f64>> = (0..3)
            .map(|s| high_band_features(&noise(16, 16, 100 + s).clamped()).unwrap().iter().map(|v| v * 0.9).collect())
            .collect();
        let mut st = DiscriminatorState::new(DiscriminatorModel::new(feature_len(16), 3));
        let before = st.model.clone();
        wd_step(&mut st, &real, &fake, 0.0).unwrap();
        assert_eq!(st.model, before);
        let (_, grad) = batch_loss_grad(&st.model, &real, &fake).unwrap();
        let sizes = st.model.net().sizes().to_vec();
        let mut params = st.model.net().params().to_vec();
        let mut worst: f64 = 0.0;
        for i in 0..params.len() {
            let fd = central_difference(&mut params, i, 1e-4, |p| {
                let m = DiscriminatorModel::from_net(Mlp::from_params(&sizes, LEAKY_SLOPE, p.to_vec()).unwrap()).unwrap();
                batch_loss_grad(&m, &real, &fake).unwrap().0
            });
            worst = worst.max(relative_error(grad[i], fd, 1e-6));
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn checkpoint_tag_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wd.ckpt");
        let m = DiscriminatorModel::new(23, 1);
        m.save(&p).unwrap();
        assert_eq!(DiscriminatorModel::load(&p).unwrap().net().sizes(), m.net().sizes());
        assert!(crate::fdc::ComparatorModel::load(&p).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_energy(hw in 1usize..12, hh in 1usize..12, seed in 0u64..1000) {
            let img = noise(2 * hw, 2 * hh, seed);
            let b = haar_dwt(&img).unwrap();
            prop_assert!((b.energy() - sq(&img)).abs() < 1e-6);
            let back = haar_idwt(&b).unwrap();
            for (a, c) in img.data().iter().zip(back.data()) {
                prop_assert!((a - c).abs() < 1e-6);
            }
        }
    }
}
