use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mambatrans_core::attention::{mmca, AttentionRoles, MmcaConfig, MmcaWeights};
use mambatrans_core::data::generate_scene;
use mambatrans_core::model::{ModelConfig, TranslatorModel};
use mambatrans_core::params::{Builder, ParamStore};
use mambatrans_core::ssm::{selective_scan_1d, SsmParams};
use mambatrans_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn scan(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = SsmParams::init(&mut Builder::new(&mut store, &mut rng), 32, 16);
    let x = random(&[1024, 32], 1);
    c.bench_function("selective_scan_1d L1024 C32 N16", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let xv = tape.constant(x.clone());
            black_box(selective_scan_1d(&tape, &p, xv, &params).unwrap());
        })
    });
}

fn conv(c: &mut Criterion) {
    let x = random(&[64, 64, 16], 2);
    let w = random(&[3, 3, 16, 16], 3);
    let bias = random(&[16], 4);
    c.bench_function("conv2d 64x64 16->16 k3", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(bias.clone()));
            black_box(tape.conv2d(xv, wv, bv, 1, 1).unwrap());
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = MmcaConfig::new(16, 2, AttentionRoles::TextQuery).unwrap();
    let w = MmcaWeights::init(&mut Builder::new(&mut store, &mut rng), cfg);
    let (img, mask, text) = (random(&[32, 32, 16], 6), random(&[32, 32, 16], 7), random(&[8, 16], 8));
    let vmask = Tensor::from_fn(vec![32, 32], |i| if i % 7 == 0 { 1.0 } else { 0.0 });
    c.bench_function("mmca 32x32 C16 text8", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let (iv, mv, tv, vv) = (
                tape.constant(img.clone()),
                tape.constant(mask.clone()),
                tape.constant(text.clone()),
                tape.constant(vmask.clone()),
            );
            black_box(mmca(&tape, &p, &w, tv, iv, mv, tv, vv).unwrap());
        })
    });
}

fn model_forward(c: &mut Criterion) {
    let model = TranslatorModel::<f32>::new(ModelConfig::desk(), 9).unwrap();
    let s = generate_scene(10, 64, 64, 3).unwrap();
    c.bench_function("translate desk model 64x64", |b| {
        b.iter(|| black_box(model.translate(&s.fused, &s.voted_mask, &s.text_ids).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = scan, conv, attention, model_forward
}
criterion_main!(benches);
