use std::hint::black_box;

use aad_core::autodiff::{zero_grads, Adam};
use aad_core::data::{generate_domain_pair, GeneratorConfig};
use aad_core::eval::wilcoxon_one_sample;
use aad_core::losses::{kd_loss, mmd_gaussian, source_ce, Temperature};
use aad_core::models::{ModelBundle, ModelConfig, SequenceEncoder};
use criterion::{criterion_group, criterion_main, Criterion};

fn encoder(c: &mut Criterion) {
    let ds = generate_domain_pair(&GeneratorConfig {
        per_class: 64,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let bundle = ModelBundle::init(&ModelConfig::default(), 0).unwrap();
    let docs: Vec<&[u32]> = ds.source_train[..64].iter().map(|x| x.tokens.as_slice()).collect();
    let labels: Vec<usize> = ds.source_train[..64].iter().map(|x| x.label).collect();
    let params = bundle
        .source
        .params()
        .into_iter()
        .chain(bundle.classifier.params())
        .collect::<Vec<_>>();

    c.bench_function("encode batch 64", |b| {
        b.iter(|| bundle.source.encode_batch(black_box(&docs)).unwrap())
    });
    c.bench_function("source step batch 64", |b| {
        let mut adam = Adam::new(5e-3);
        b.iter(|| {
            let rep = bundle.source.encode_batch(&docs).unwrap();
            let loss = source_ce(&bundle.classifier.logits(&rep).unwrap(), &labels).unwrap();
            zero_grads(&params);
            loss.backward().unwrap();
            adam.step(&params).unwrap();
        })
    });
    let rep = bundle.source.encode_batch(&docs).unwrap();
    let logits = bundle.classifier.logits(&rep).unwrap();
    c.bench_function("kd loss t=20 batch 64", |b| {
        let t = Temperature::new(20.0).unwrap();
        b.iter(|| kd_loss(&logits, black_box(&logits), t).unwrap())
    });
    c.bench_function("mmd batch 64x64", |b| {
        b.iter(|| mmd_gaussian(&rep, black_box(&rep), &[1.0]).unwrap())
    });
}

fn wilcoxon(c: &mut Criterion) {
    let xs: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
    c.bench_function("exact wilcoxon n=25", |b| {
        b.iter(|| wilcoxon_one_sample(black_box(&xs), 0.0).unwrap())
    });
}

criterion_group!(benches, encoder, wilcoxon);
criterion_main!(benches);
