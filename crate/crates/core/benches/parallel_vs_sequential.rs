use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use matdetect::baseline::{fit_batch, IirOrders};
use matdetect::clustering::sweep_criteria_with;
use matdetect::detector::{Crnn, CrnnConfig};
use matdetect::features::{extract_features, FeatureConfig};
use matdetect::material_db::load_materials;
use matdetect::nn::{weighted_bce, Module, Tensor};
use matdetect::par::{map_range, Exec};
use matdetect::room_sim::{sample_room, simulate_air, Air, GeometryOptions, SimConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn airs(n: usize) -> Vec<Air> {
    let db = load_materials(concat!(env!("CARGO_MANIFEST_DIR"), "/data/sample_materials.txt")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = SimConfig::default();
    (0..n).map(|_| simulate_air(&sample_room(&mut rng, &db, &GeometryOptions::default()).unwrap(), &db, &cfg).unwrap()).collect()
}

fn simulation(c: &mut Criterion) {
    let db = load_materials(concat!(env!("CARGO_MANIFEST_DIR"), "/data/sample_materials.txt")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rooms: Vec<_> = (0..8).map(|_| sample_room(&mut rng, &db, &GeometryOptions::default()).unwrap()).collect();
    let cfg = SimConfig { duration: 0.1, ..Default::default() };
    let mut g = c.benchmark_group("simulate_8_airs");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_range(exec, rooms.len(), |i| simulate_air(&rooms[i], &db, &cfg).unwrap()))
        });
    }
    g.finish();
}

fn clustering(c: &mut Criterion) {
    let points = load_materials(concat!(env!("CARGO_MANIFEST_DIR"), "/data/sample_materials.txt")).unwrap().spectra_matrix();
    let mut g = c.benchmark_group("criterion_sweep_k2_12");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| sweep_criteria_with(exec, &points, 2, 12, 10, 3).unwrap()));
    }
    g.finish();
}

fn features(c: &mut Criterion) {
    let airs = airs(16);
    let cfg = FeatureConfig::default();
    let mut g = c.benchmark_group("features_16_airs");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_range(exec, airs.len(), |i| extract_features(&airs[i], &cfg).unwrap()))
        });
    }
    g.finish();
}

fn prony(c: &mut Criterion) {
    let responses: Vec<Vec<f64>> = airs(8).into_iter().map(|a| a.taps).collect();
    let orders = IirOrders { num_coeffs: 60, den_coeffs: 60 };
    let mut g = c.benchmark_group("prony_8_airs_60_60");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| fit_batch(exec, &responses, orders)));
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let cfg = CrnnConfig::default();
    let model = Crnn::<f32>::new(&cfg, 33, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs: Vec<Tensor<f32>> = (0..8).map(|_| Tensor::uniform(&[1, 1, 132, 33], 1.0, &mut rng)).collect();
    let ys: Vec<Tensor<f32>> =
        (0..8).map(|_| Tensor::new(vec![1, 3], (0..3).map(|_| f32::from(rng.gen_range(0u8..2))).collect()).unwrap()).collect();
    let w = vec![[1.0, 1.0]; 3];
    let mut g = c.benchmark_group("crnn_gradients_batch_8");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let per = map_range(exec, xs.len(), |i| {
                    let cache = model.forward(&xs[i]).unwrap();
                    let (_, gp) = weighted_bce(&cache.posteriors, &ys[i], &w).unwrap();
                    model.backward(&cache, &gp).unwrap()
                });
                let mut total = model.zeros_like();
                for p in &per {
                    total.accumulate(p);
                }
                total
            })
        });
    }
    g.finish();
}

criterion_group!(benches, simulation, clustering, features, prony, gradients);
criterion_main!(benches);
