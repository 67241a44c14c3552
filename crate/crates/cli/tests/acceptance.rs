//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use freqadapt::corpus::{self, CorpusSpec};
use freqadapt::estimator::EstimatorConfig;
use freqadapt::fdc::{self, ComparatorModel, FdcTrainConfig};
use freqadapt::harness::{self, BenchmarkSuite, EstimatorKind, ScoreRow, SuiteResult, TruthKernel};
use freqadapt::imaging::{self, ImagePlane};
use freqadapt::kernel::{self, BlurKernel, KernelParams, TestKernelKind};
use freqadapt::nn::{self, Mlp, LEAKY_SLOPE};
use freqadapt::rng::SeededStream;
use freqadapt::spectral::{self, BinKind, DomainProfile, FrequencyProfile, NormMode};
use freqadapt::wavelet::{self, DiscriminatorModel};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rows<'a>(r: &'a SuiteResult, kind: &str, est: EstimatorKind) -> Vec<&'a ScoreRow> {
    r.rows.iter().filter(|x| x.kind == kind && x.estimator == est).collect()
}

fn sigma_sq(row: &ScoreRow) -> f64 {
    row.estimated.map_or(f64::NAN, |p| p.sigma_sq())
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",")
}

fn ani_truth() -> TruthKernel {
    TruthKernel::Fixed {
        label: "ANI.fixed".into(),
        params: KernelParams::new(3f64.sqrt(), 1.0, PI / 4.0).unwrap(),
    }
}

fn criterion1(a: &SuiteResult) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (kind, truth, tol) in [("ISO.1", 1.0, 0.3), ("ISO.3", 3.0, 0.6)] {
        let r = rows(a, kind, EstimatorKind::Direct);
        let s: Vec<f64> = r.iter().map(|x| sigma_sq(x)).collect();
        let slow = r.iter().map(|x| x.seconds).fold(0.0, f64::max);
        pass &= r.len() == 3 && s.iter().all(|v| (v - truth).abs() <= tol) && slow < 300.0;
        parts.push(format!("{kind} sigma^2=[{}] (truth {truth} +/-{tol}), max {slow:.1}s", fmt_list(&s)));
    }
    verdict(pass, parts.join("; "))
}

fn criterion2(a: &SuiteResult) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in ["ISO.1", "ISO.3"] {
        let d = rows(a, kind, EstimatorKind::Direct);
        let f = rows(a, kind, EstimatorKind::FcaBoth);
        let gaps: Vec<f64> = d.iter().zip(&f).map(|(d, f)| (sigma_sq(f) - sigma_sq(d)).abs()).collect();
        pass &= gaps.len() == 3 && gaps.iter().all(|g| *g <= 1.0);
        let s: Vec<f64> = f.iter().map(|x| sigma_sq(x)).collect();
        parts.push(format!("{kind} fca sigma^2=[{}] |fca-direct|=[{}]", fmt_list(&s), fmt_list(&gaps)));
    }
    let f = rows(a, "ANI.fixed", EstimatorKind::FcaBoth);
    let b = rows(a, "ANI.fixed", EstimatorKind::BicubicBaseline);
    let wins = f.iter().zip(&b).filter(|(f, b)| f.kernel_error < b.kernel_error).count();
    pass &= wins >= 2;
    let kerr: Vec<f64> = f.iter().map(|x| x.kernel_error).collect();
    parts.push(format!(
        "ANI kerr=[{}] vs baseline {:.4}, {wins}/3 better",
        fmt_list(&kerr),
        b.first().map_or(f64::NAN, |x| x.kernel_error)
    ));
    verdict(pass, parts.join("; "))
}

fn criterion3(a: &SuiteResult, b: &SuiteResult) -> Verdict {
    let mean = |r: &SuiteResult, e| {
        let v = rows(r, "ISO.3", e);
        v.iter().map(|x| x.kernel_error).sum::<f64>() / v.len() as f64
    };
    let both = mean(a, EstimatorKind::FcaBoth);
    let wd = mean(b, EstimatorKind::FcaWd);
    let fdc = mean(b, EstimatorKind::FcaFdc);
    verdict(
        both <= wd && fdc <= 1.5 * both,
        format!("mean kerr both={both:.5} wd-only={wd:.5} fdc-only={fdc:.5} (fdc/both={:.3})", fdc / both),
    )
}

fn criterion4(hr: &[ImagePlane]) -> Verdict {
    let cfg = FdcTrainConfig::default();
    let started = Instant::now();
    let (state, _) = fdc::train_comparator(&hr[..12], &cfg).unwrap();
    let held = &hr[12..];
    let mut accs = Vec::new();
    for (scale, seed) in [(1.5, 1501), (1.2, 1201)] {
        let t = fdc::sample_triplets(held, scale, cfg.patch_size, cfg.bin_kind, 400, seed).unwrap();
        accs.push(fdc::ordering_accuracy(&state.model, &t).unwrap());
    }
    verdict(
        accs[0] >= 0.95 && accs[1] >= 0.85,
        format!(
            "held-out accuracy {:.4} at 1.5 (>=0.95), {:.4} at 1.2 (>=0.85), trained in {:.0}s",
            accs[0],
            accs[1],
            started.elapsed().as_secs_f64()
        ),
    )
}

/// Max relative error of `grad` against central differences of `loss` at 100 coordinates.
fn gradient_check(params: &[f64], grad: &[f64], seed: u64, loss: impl Fn(&[f64]) -> f64) -> f64 {
    let mut rng = SeededStream::new(seed);
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let i = rng.below(p.len() as u64) as usize;
        let fd = nn::central_difference(&mut p, i, 1e-5, &loss);
        worst = worst.max(nn::relative_error(fd, grad[i], 1e-6));
    }
    worst
}

fn criterion5(down: &[ImagePlane]) -> Verdict {
    let patch = 64;
    let triplets = fdc::sample_triplets(down, 2.0, patch, BinKind::AxisAveraged, 8, 55).unwrap();
    let model = ComparatorModel::new(spectral::bin_count(patch), fdc::DEFAULT_HIDDEN, NormMode::default(), 5);
    let (_, grad, _) = fdc::batch_loss_grad(&model, &triplets).unwrap();
    let sizes = model.encoder().sizes().to_vec();
    let fdc_err = gradient_check(model.encoder().params(), &grad, 1, |p| {
        let enc = Mlp::from_params(&sizes, LEAKY_SLOPE, p.to_vec()).unwrap();
        let m = ComparatorModel::from_encoder(enc, model.normalization()).unwrap();
        fdc::batch_loss_grad(&m, &triplets).unwrap().0
    });

    let wd_patch = 32;
    let k = kernel::gaussian_kernel(&KernelParams::isotropic(1.5).unwrap(), 13).unwrap();
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for img in &down[..4] {
        for t in imaging::tile_patches(img, wd_patch).unwrap().into_iter().take(4) {
            real.push(wavelet::high_band_features(&t).unwrap());
            let blurred = imaging::convolve2d(&t, &k).unwrap();
            fake.push(wavelet::high_band_features(&blurred).unwrap());
        }
    }
    let disc = DiscriminatorModel::new(wavelet::feature_len(wd_patch), 7);
    let (_, grad) = wavelet::batch_loss_grad(&disc, &real, &fake).unwrap();
    let sizes = disc.net().sizes().to_vec();
    let wd_err = gradient_check(disc.net().params(), &grad, 2, |p| {
        let net = Mlp::from_params(&sizes, LEAKY_SLOPE, p.to_vec()).unwrap();
        let m = DiscriminatorModel::from_net(net).unwrap();
        wavelet::batch_loss_grad(&m, &real, &fake).unwrap().0
    });
    verdict(
        fdc_err < 1e-3 && wd_err < 1e-3,
        format!("max relative error FDC {fdc_err:.2e}, WD {wd_err:.2e} (<1e-3, 100 coordinates each)"),
    )
}

fn criterion6(results: &[&SuiteResult]) -> Verdict {
    let mut cells = 0;
    let mut bad = Vec::new();
    for r in results {
        for row in r.rows.iter().filter(|x| x.estimator != EstimatorKind::BicubicBaseline) {
            cells += 1;
            if !(row.d_bar < row.d_bar_baseline) {
                bad.push(format!("{}/{}/{}", row.kind, row.estimator, row.seed));
            }
        }
    }
    let detail = if bad.is_empty() {
        format!("{cells}/{cells} cells below the bicubic-only D")
    } else {
        format!("{} of {cells} cells not below baseline: {}", bad.len(), bad.join(" "))
    };
    verdict(bad.is_empty(), detail)
}

fn profile(bins: Vec<f64>) -> DomainProfile {
    DomainProfile {
        profile: FrequencyProfile {
            bins,
            kind: BinKind::AxisAveraged,
            source_size: 32,
        },
        image_count: 1,
    }
}

fn run_cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_freqadapt")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn cli_determinism(dir: &Path) -> bool {
    let corpus = dir.join("corpus");
    let c = corpus.to_str().unwrap();
    run_cli(&["make-corpus", "--out", c, "--count", "4", "--size", "512"]);
    let mut reports = Vec::new();
    let mut benches = Vec::new();
    for i in 0..2 {
        let rep = dir.join(format!("report{i}.txt"));
        let stdout = run_cli(&[
            "estimate",
            "--source",
            c,
            "--set",
            "patch_size=32",
            "--out",
            rep.to_str().unwrap(),
        ]);
        let text = String::from_utf8(stdout).unwrap();
        // the last line names the report file, which differs between runs
        let head: Vec<&str> = text.lines().filter(|l| !l.contains("report")).collect();
        reports.push((std::fs::read(&rep).unwrap(), head.join("\n")));

        let suite = dir.join("suite.txt");
        std::fs::write(&suite, "kinds=ISO.1\nseeds=0,1\nestimators=direct,bicubic-baseline\n").unwrap();
        let out = dir.join(format!("bench{i}"));
        run_cli(&[
            "benchmark",
            "--suite",
            suite.to_str().unwrap(),
            "--corpus",
            c,
            "--set",
            "patch_size=32",
            "--out",
            out.to_str().unwrap(),
        ]);
        benches.push((
            std::fs::read(out.join("scores.csv")).unwrap(),
            std::fs::read(out.join("summary.csv")).unwrap(),
        ));
    }
    reports[0] == reports[1] && benches[0] == benches[1]
}

fn criterion7() -> Verdict {
    let mut rng = SeededStream::new(77);
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let mut unit = true;
    let mut turn = true;
    for _ in 0..200 {
        let p = KernelParams::new(rng.uniform_in(0.1, 3.0), rng.uniform_in(0.1, 3.0), rng.uniform_in(0.0, 2.0 * PI)).unwrap();
        let k = kernel::gaussian_kernel(&p, 13).unwrap();
        unit &= (k.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        let q = KernelParams::new(p.r1, p.r2, p.theta + PI).unwrap();
        let kq = kernel::gaussian_kernel(&q, 13).unwrap();
        turn &= k.weights().iter().zip(kq.weights()).all(|(a, b)| (a - b).abs() <= 1e-12);
    }
    checks.push(("unit-sum", unit));
    checks.push(("theta+pi", turn));

    let mut haar = true;
    for (w, h) in [(32, 32), (18, 10), (64, 6)] {
        let img = ImagePlane::from_fn(w, h, |_, _| rng.normal());
        let b = wavelet::haar_dwt(&img).unwrap();
        let back = wavelet::haar_idwt(&b).unwrap();
        haar &= img.data().iter().zip(back.data()).all(|(a, b)| (a - b).abs() <= 1e-6);
        let e: f64 = img.data().iter().map(|v| v * v).sum();
        haar &= (b.energy() - e).abs() <= 1e-6 * e;
    }
    checks.push(("haar round trip+parseval", haar));

    let mut metric = true;
    for _ in 0..100 {
        let mut draw = || profile((0..17).map(|_| rng.uniform()).collect());
        let (a, b, c) = (draw(), draw(), draw());
        let d = |x: &DomainProfile, y: &DomainProfile| spectral::freq_distance(x, y).unwrap();
        metric &= d(&a, &a) == 0.0 && d(&a, &b) > 0.0 && d(&a, &b) == d(&b, &a);
        metric &= d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-15;
    }
    checks.push(("metric axioms", metric));

    let (w, h) = (23, 17);
    let x: Vec<f64> = (0..w * h).map(|_| rng.normal()).collect();
    let y: Vec<f64> = (0..w * h).map(|_| rng.normal()).collect();
    let mut delta = vec![0.0; 25];
    delta[12] = 1.0;
    let id = BlurKernel::from_weights(5, delta).unwrap();
    let k = kernel::gaussian_kernel(&KernelParams::new(1.3, 0.7, 0.4).unwrap(), 9).unwrap();
    let (a, b) = (0.7, -1.9);
    let mix: Vec<f64> = x.iter().zip(&y).map(|(x, y)| a * x + b * y).collect();
    let cx = imaging::convolve_values(&x, w, h, &k).unwrap();
    let cy = imaging::convolve_values(&y, w, h, &k).unwrap();
    let cm = imaging::convolve_values(&mix, w, h, &k).unwrap();
    let conv = imaging::convolve_values(&x, w, h, &id).unwrap() == x
        && cm.iter().zip(cx.iter().zip(&cy)).all(|(m, (p, q))| (m - (a * p + b * q)).abs() <= 1e-9);
    checks.push(("convolution identity+linearity", conv));

    let model = ComparatorModel::new(17, fdc::DEFAULT_HIDDEN, NormMode::default(), 3);
    let mut anti = true;
    for _ in 0..100 {
        let p = profile((0..17).map(|_| rng.uniform()).collect()).profile;
        let q = profile((0..17).map(|_| rng.uniform()).collect()).profile;
        let ab = fdc::comparator_forward(&model, &p, &q).unwrap();
        let ba = fdc::comparator_forward(&model, &q, &p).unwrap();
        anti &= ab.to_bits() == (-ba).to_bits() && fdc::comparator_forward(&model, &p, &p).unwrap() == 0.0;
    }
    checks.push(("comparator antisymmetry", anti));

    let small = corpus::generate(&CorpusSpec {
        count: 4,
        size: 512,
        disks: 15_000,
        max_radius: 1024.0,
        ..CorpusSpec::default()
    })
    .unwrap();
    let suite = BenchmarkSuite {
        truths: vec![TruthKernel::Family(TestKernelKind::IsoRange)],
        seeds: vec![0, 1],
        estimators: vec![EstimatorKind::Direct, EstimatorKind::BicubicBaseline],
        estimator: EstimatorConfig {
            patch_size: 32,
            ..EstimatorConfig::default()
        },
        ..BenchmarkSuite::default()
    };
    let r1 = harness::run_suite(&suite, &small).unwrap();
    let r2 = harness::run_suite(&suite, &small).unwrap();
    checks.push((
        "suite determinism",
        r1.scores_csv() == r2.scores_csv() && r1.summary_csv() == r2.summary_csv(),
    ));

    let dir = tempfile::tempdir().unwrap();
    checks.push(("cli determinism", cli_determinism(dir.path())));

    let pass = checks.iter().all(|(_, ok)| *ok);
    let detail = checks
        .iter()
        .map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "FAILED" }))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(pass, detail)
}

fn criterion8(down: &[ImagePlane]) -> Verdict {
    let tile = 64;
    let src: Vec<DomainProfile> = down
        .iter()
        .map(|d| spectral::frequency_profile(&imaging::tile_patches(d, tile).unwrap(), BinKind::AxisAveraged).unwrap())
        .collect();
    let mut means = Vec::new();
    for s2 in [0.5, 1.0, 2.0, 3.0] {
        let k = kernel::gaussian_kernel(&KernelParams::isotropic(f64::sqrt(s2)).unwrap(), 19).unwrap();
        let total: f64 = down
            .iter()
            .zip(&src)
            .map(|(d, s)| {
                let b = kernel::blur_downsampled(d, &k).unwrap();
                let p = spectral::frequency_profile(&imaging::tile_patches(&b, tile).unwrap(), BinKind::AxisAveraged)
                    .unwrap();
                spectral::freq_distance(&p, s).unwrap()
            })
            .sum();
        means.push(total / down.len() as f64);
    }
    let pass = means.windows(2).all(|w| w[1] > w[0]);
    verdict(pass, format!("mean D at sigma^2 0.5,1,2,3 = [{}]", means.iter().map(|m| format!("{m:.5}")).collect::<Vec<_>>().join(",")))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let hr = corpus::generate(&CorpusSpec::default()).unwrap();
    let down: Vec<ImagePlane> = hr.iter().map(|h| kernel::downsample(h, 4).unwrap()).collect();

    let suite_a = BenchmarkSuite {
        truths: vec![
            TruthKernel::Family(TestKernelKind::Iso1),
            TruthKernel::Family(TestKernelKind::Iso3),
            ani_truth(),
        ],
        seeds: SEEDS.to_vec(),
        estimators: vec![EstimatorKind::Direct, EstimatorKind::FcaBoth, EstimatorKind::BicubicBaseline],
        ..BenchmarkSuite::default()
    };
    let a = harness::run_suite(&suite_a, &hr).unwrap();
    let suite_b = BenchmarkSuite {
        truths: vec![TruthKernel::Family(TestKernelKind::Iso3)],
        seeds: SEEDS.to_vec(),
        estimators: vec![EstimatorKind::FcaFdc, EstimatorKind::FcaWd],
        ..BenchmarkSuite::default()
    };
    let b = harness::run_suite(&suite_b, &hr).unwrap();
    for r in a.rows.iter().chain(&b.rows).filter(|r| !r.ok()) {
        eprintln!("row {}/{}/{} failed: {:?}", r.kind, r.estimator, r.seed, r.error);
    }

    let verdicts = [
        criterion1(&a),
        criterion2(&a),
        criterion3(&a, &b),
        criterion4(&hr),
        criterion5(&down),
        criterion6(&[&a, &b]),
        criterion7(),
        criterion8(&down),
    ];
    let mut failed = 0;
    for (i, v) in verdicts.iter().enumerate() {
        println!("criterion {}: {} {}", i + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        verdicts.len() - failed,
        verdicts.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
