use criterion::{black_box, criterion_group, criterion_main, Criterion};

use patchrefine_core::config::ExperimentConfig;
use patchrefine_core::metrics::{
    coverage_density, laplacian_variance_sharpness, lpips_patches, FeatureSet,
};
use patchrefine_core::nn::layers::Conv3d;
use patchrefine_core::nn::{Tensor, UNet};
use patchrefine_core::phantom::{generate_phantom, PhantomParams};
use patchrefine_core::refiner::traversal::plan_traversal;
use patchrefine_core::util::{rng_for, standard_normal_vec};
use patchrefine_core::PatchGrid;

fn conv(c: &mut Criterion) {
    let mut rng = rng_for(0, 0);
    for (cin, cout, side) in [(8, 16, 16), (3, 8, 16), (32, 32, 8)] {
        let mut layer = Conv3d::new(cin, cout, 3, 1, &mut rng);
        let x = Tensor::from_vec(
            cin,
            4,
            [side; 3],
            standard_normal_vec(&mut rng, cin * 4 * side.pow(3)),
        );
        c.bench_function(&format!("conv3d {cin}->{cout} 4x{side}^3"), |b| {
            b.iter(|| black_box(layer.forward(&x, false)))
        });
    }
}

fn unet(c: &mut Criterion) {
    let cfg = ExperimentConfig::cpu();
    let mut rng = rng_for(1, 0);
    let mut net = UNet::new(&cfg.refiner.spec, &mut rng).unwrap();
    let p = cfg.refiner.patch.patch_size;
    let x = Tensor::from_vec(
        3,
        4,
        [p; 3],
        standard_normal_vec(&mut rng, 3 * 4 * p.pow(3)),
    );
    let t = [3.0, 7.0, 11.0, 15.0];
    c.bench_function("refiner unet forward 4x16^3", |b| {
        b.iter(|| black_box(net.forward(&x, &t, false)))
    });
}

fn metrics(c: &mut Criterion) {
    let v = generate_phantom(2, [48; 3], &PhantomParams::default())
        .unwrap()
        .volume;
    c.bench_function("sharpness 48^3, 100 patches", |b| {
        b.iter(|| laplacian_variance_sharpness(&v, 0.5, 16, 100, &mut rng_for(3, 0)).unwrap())
    });
    let backbone = ExperimentConfig::desk().metrics.make_backbone().unwrap();
    c.bench_function("lpips 48^3, 100 patches", |b| {
        b.iter(|| {
            lpips_patches(
                &v,
                &v,
                100,
                32,
                0,
                Some(backbone.as_ref()),
                &mut rng_for(4, 0),
            )
            .unwrap()
        })
    });
    let mut rng = rng_for(5, 0);
    let mut cloud = |n| {
        let rows = (0..n)
            .map(|_| {
                standard_normal_vec(&mut rng, 32)
                    .into_iter()
                    .map(f64::from)
                    .collect()
            })
            .collect();
        FeatureSet::new(rows, "bench").unwrap()
    };
    let (real, gen) = (cloud(500), cloud(500));
    c.bench_function("coverage/density 500x500 dim 32 k 10", |b| {
        b.iter(|| coverage_density(&real, &gen, 10).unwrap())
    });
}

fn traversal(c: &mut Criterion) {
    let grid = PatchGrid::new([48; 3], 24, 12).unwrap();
    c.bench_function("plan traversal 48^3 p24 s12", |b| {
        b.iter(|| plan_traversal(black_box(&grid)).unwrap())
    });
}

criterion_group!(benches, conv, unet, metrics, traversal);
criterion_main!(benches);
