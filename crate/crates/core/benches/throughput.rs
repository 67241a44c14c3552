//! Parallel vs single-threaded throughput of the hot paths: objective evaluation of
//! the direct estimator and comparator triplet sampling. Without the `parallel`
//! feature only the sequential variants run.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use freqadapt::corpus::{self, CorpusSpec};
use freqadapt::estimator::ConsistencyProblem;
use freqadapt::fdc;
use freqadapt::kernel::{self, DegradationConfig, KernelParams};
use freqadapt::spectral::BinKind;
use freqadapt::ImagePlane;

fn source() -> Vec<ImagePlane> {
    let spec = CorpusSpec {
        count: 8,
        size: 512,
        disks: 15_000,
        ..CorpusSpec::default()
    };
    let cfg = DegradationConfig::new(4, 19, KernelParams::isotropic(1.0).unwrap());
    corpus::generate(&spec)
        .unwrap()
        .iter()
        .map(|hr| kernel::degrade(hr, &cfg).unwrap())
        .collect()
}

/// `exec` runs one measured call, either directly or inside a one-thread pool.
fn run<E: Fn(&(dyn Fn() + Sync))>(c: &mut Criterion, label: &str, src: &[ImagePlane], exec: E) {
    let problem = ConsistencyProblem::new(src, 4, 13, 32, BinKind::AxisAveraged).unwrap();
    let p = KernelParams::new(1.2, 0.9, 0.5).unwrap();
    c.bench_function(&format!("objective/{label}"), |b| {
        b.iter(|| exec(&|| {
            black_box(problem.objective(&p).unwrap());
        }))
    });
    c.bench_function(&format!("triplets/{label}"), |b| {
        b.iter(|| exec(&|| {
            black_box(fdc::sample_triplets(src, 1.5, 32, BinKind::AxisAveraged, 32, 7).unwrap());
        }))
    });
}

fn throughput(c: &mut Criterion) {
    let src = source();
    #[cfg(feature = "parallel")]
    {
        run(c, "parallel", &src, |f| f());
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        run(c, "sequential", &src, |f| single.install(f));
    }
    #[cfg(not(feature = "parallel"))]
    run(c, "sequential", &src, |f| f());
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = throughput
}
criterion_main!(benches);
