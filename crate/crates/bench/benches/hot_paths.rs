use criterion::{black_box, criterion_group, criterion_main, Criterion};
use figgen_core::diffusion::{ddim_step, timestep_ladder, Denoiser, LatentDiffusion};
use figgen_core::metrics::{fid, kid, FeatureSet};
use figgen_core::presets::micro_diffusion;
use figgen_core::text_encoder::ConditioningBatch;
use figgen_core::{DType, Device, ScheduleConfig, SeedStream};
use nalgebra::DMatrix;

fn unet_forward(c: &mut Criterion) {
    let dev = Device::Cpu;
    let model = LatentDiffusion::new(&micro_diffusion(), DType::F32, &dev, 0).unwrap();
    let unet = &model.config().unet;
    let batch = 8;
    let mut rng = SeedStream::new(1);
    let x = rng
        .normal_tensor(
            (batch, unet.in_channels, unet.latent_size, unet.latent_size),
            DType::F32,
            &dev,
        )
        .unwrap();
    let cond = ConditioningBatch::null(batch, model.max_len(), DType::F32, &dev).unwrap();
    let context = model.encode_text(&cond).unwrap();
    let timesteps: Vec<usize> = (0..batch).map(|i| i * 120).collect();
    c.bench_function("micro unet forward, batch 8", |b| {
        b.iter(|| {
            model
                .predict_eps(black_box(&x), &timesteps, &context, &cond.pad_mask)
                .unwrap()
        })
    });
}

fn ddim_ladder(c: &mut Criterion) {
    let dev = Device::Cpu;
    let schedule = ScheduleConfig::default().build().unwrap();
    let mut rng = SeedStream::new(2);
    let x = rng.normal_tensor((8, 4, 16, 16), DType::F32, &dev).unwrap();
    let eps = rng.normal_tensor((8, 4, 16, 16), DType::F32, &dev).unwrap();
    let ladder = timestep_ladder(1000, 200).unwrap();
    c.bench_function("200-step ddim updates, 8x4x16x16", |b| {
        b.iter(|| {
            let mut z = x.clone();
            for (i, &t) in ladder.iter().enumerate() {
                z = ddim_step(
                    &schedule,
                    &z,
                    &eps,
                    t,
                    ladder.get(i + 1).copied(),
                    0.0,
                    None,
                )
                .unwrap();
            }
            z
        })
    });
}

fn features(n: usize, d: usize, seed: u64) -> FeatureSet {
    let mut rng = SeedStream::new(seed);
    let f = DMatrix::from_fn(n, d, |_, _| rng.normal());
    FeatureSet::new(f, DMatrix::zeros(n, 2), "bench").unwrap()
}

fn metrics(c: &mut Criterion) {
    let (a, b) = (features(512, 112, 3), features(512, 112, 4));
    c.bench_function("fid 512x112", |bench| {
        bench.iter(|| fid(black_box(&a), black_box(&b)).unwrap())
    });
    c.bench_function("kid 512x112", |bench| {
        bench.iter(|| kid(black_box(&a), black_box(&b)).unwrap())
    });
}

criterion_group!(benches, unet_forward, ddim_ladder, metrics);
criterion_main!(benches);
