//! Throughput of the hot paths: forward/backward, PGD, decoding and projection.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use robustlab::attacks::{pgd_attack, AttackConfig};
use robustlab::autodiff::{Reduction, Tape};
use robustlab::fonts::{decode_batch, SyntheticDataset, TrueDecoder};
use robustlab::manifold::{project_decoder, ProjectionConfig};
use robustlab::nn::{ArchitectureKind, Classifier};
use robustlab_bench::{classifier, dataset};

fn forward_backward(c: &mut Criterion, data: &SyntheticDataset, model: &Classifier, name: &str) {
    c.bench_function(&format!("forward_backward/{name}/batch100"), |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let params = model.network.bind(&mut tape, true);
            let x = tape.constant(data.images.clone());
            let out = model.forward(&mut tape, &params, x).unwrap();
            let loss = tape.cross_entropy(out.output, &data.labels, Reduction::Mean).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
}

fn kernels(c: &mut Criterion) {
    let data = dataset(100);
    for (kind, name) in [(ArchitectureKind::ConvSmall, "conv_small"), (ArchitectureKind::Mlp, "mlp")] {
        forward_backward(c, &data, &classifier(kind), name);
    }
    let model = classifier(ArchitectureKind::ConvSmall);
    let rows: Vec<usize> = (0..20).collect();
    let x = data.images.select_rows(&rows);
    let y = data.labels_of(&rows);
    let cfg = AttackConfig { iterations: 10, restarts: 1, early_stop: false, ..AttackConfig::linf(0.3) };
    c.bench_function("pgd_linf/20x10", |b| b.iter(|| black_box(pgd_attack(&model, &x, &y, &rows, &cfg).unwrap())));

    let decoder = TrueDecoder::for_examples(&data, &rows);
    let poses = data.pose_tensor(&rows);
    let ids: Vec<usize> = rows.iter().map(|&r| data.prototype_ids[r]).collect();
    let stacked = data.prototypes.stack(&ids);
    c.bench_function("decode_batch/20", |b| b.iter(|| black_box(decode_batch(&stacked, &poses).unwrap())));
    let proj = ProjectionConfig { iterations: 20, random_restarts: 0, ..ProjectionConfig::default() };
    c.bench_function("project_decoder/20x20", |b| {
        b.iter(|| black_box(project_decoder(&x, &decoder, std::slice::from_ref(&poses), &proj).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
