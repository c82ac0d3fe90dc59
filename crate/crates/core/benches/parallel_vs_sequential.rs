//! Rayon data-parallel paths against their sequential counterparts.
//!
//! `cargo bench -p exdf-core` times the rayon build on the global pool and on
//! a one-thread pool; `cargo bench -p exdf-core --no-default-features` times
//! the sequential fallback. Results land under the same benchmark ids with a
//! `parallel`/`one-thread`/`sequential` suffix so criterion reports compare them.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use exdf_core::archive::{McmcConfig, PosteriorArchive};
use exdf_core::posterior::FusionData;
use exdf_core::predict::{shortfall_surface, PredictConfig, SurfaceStat};
use exdf_core::sampler::run_mcmc;
use exdf_core::simulate::{simulate, Simulation, SyntheticScenario};

fn fixture() -> (SyntheticScenario, Simulation) {
    let sc = SyntheticScenario::exceedance(6, 365, 10, 1);
    let sim = simulate(&sc).expect("scenario is valid");
    (sc, sim)
}

fn fit(sc: &SyntheticScenario, sim: &Simulation, n_chains: usize) -> PosteriorArchive {
    let data = FusionData::new(&sim.pairs, &sc.spec, None).expect("simulated data is valid");
    let cfg = McmcConfig { n_iter: 1_000, burn_in: 500, thin: 5, n_chains, seed: 3 };
    run_mcmc(&data, &sc.spec, &cfg).expect("fit succeeds")
}

/// An execution mode: the default pool, or a dedicated one-thread pool.
struct Mode {
    label: &'static str,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Mode {
    fn all() -> Vec<Mode> {
        #[cfg(feature = "parallel")]
        {
            let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool builds");
            vec![Mode { label: "parallel", pool: None }, Mode { label: "one-thread", pool: Some(one) }]
        }
        #[cfg(not(feature = "parallel"))]
        {
            vec![Mode { label: "sequential" }]
        }
    }

    fn run<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(f);
        }
        f()
    }
}

fn bench_chains(c: &mut Criterion) {
    let (sc, sim) = fixture();
    let mut group = c.benchmark_group("mcmc_four_chains");
    group.sample_size(10);
    for mode in Mode::all() {
        group.bench_function(BenchmarkId::from_parameter(mode.label), |b| b.iter(|| mode.run(|| fit(&sc, &sim, 4))));
    }
    group.finish();
}

fn bench_surface(c: &mut Criterion) {
    let (sc, sim) = fixture();
    let archive = fit(&sc, &sim, 1);
    let cfg = PredictConfig { n_draws: 50, seed: 9 };
    let mut group = c.benchmark_group("expected_shortfall_surface");
    group.sample_size(10);
    for mode in Mode::all() {
        group.bench_function(BenchmarkId::from_parameter(mode.label), |b| {
            b.iter(|| mode.run(|| shortfall_surface(&archive, &sim.grids, SurfaceStat::ExpectedShortfall, &cfg).expect("surface")))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_chains, bench_surface);
criterion_main!(benches);
