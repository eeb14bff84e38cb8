use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use metareg::geodesic::{shoot, ShootingConfig};
use metareg::grid::{GridDesc, MaskImage};
use metareg::metrics::Objective;
use metareg::operators::FluidKernel;
use metareg::optimize::grad_v0;
use metareg::par;
use metareg::synth::{make_pair, sample_v0, SynthSpec};

// threads = 1 runs the same code on a one-worker pool; build with
// --no-default-features for the plain sequential loops.
fn thread_counts() -> Vec<usize> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    if all > 1 {
        vec![1, all]
    } else {
        vec![1]
    }
}

fn bench_shoot(c: &mut Criterion) {
    let mut group = c.benchmark_group("shoot");
    group.sample_size(10);
    for n in [64, 128] {
        let grid = GridDesc::with_sizes(&[n, n]).unwrap();
        let kernel = FluidKernel::new(&grid, 3.0, 3).unwrap();
        let v0 = sample_v0(&kernel, 1.0, 1).unwrap();
        for threads in thread_counts() {
            group.bench_with_input(BenchmarkId::new(format!("{n}x{n}"), threads), &threads, |b, &t| {
                b.iter(|| par::with_threads(t, || shoot(&kernel, &v0, ShootingConfig::default()).unwrap()))
            });
        }
    }
    group.finish();
}

fn bench_gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("grad_v0");
    group.sample_size(10);
    for (dist, obj) in [("ssd", Objective::ssd(1.0)), ("rmi", Objective::rmi(1.0, Default::default()))] {
        let grid = GridDesc::with_sizes(&[64, 64]).unwrap();
        let pair = make_pair(&SynthSpec::new(grid.clone(), 3)).unwrap();
        let kernel = FluidKernel::new(&grid, 3.0, 3).unwrap();
        let v0 = sample_v0(&kernel, 0.5, 4).unwrap();
        let mask = MaskImage::zeros(&grid);
        for threads in thread_counts() {
            group.bench_with_input(BenchmarkId::new(dist, threads), &threads, |b, &t| {
                b.iter(|| {
                    par::with_threads(t, || {
                        grad_v0(&pair.source, &pair.target, &mask, &v0, &kernel, ShootingConfig::default(), &obj).unwrap()
                    })
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_shoot, bench_gradient);
criterion_main!(benches);
