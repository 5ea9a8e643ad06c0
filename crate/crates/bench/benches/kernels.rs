use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use syncmatrix_core::autodiff::Tape;
use syncmatrix_core::estimators::{diag_avg_offset, sliding_window_offset, SyncClsConfig, SyncClsNet};
use syncmatrix_core::nn::gaussian;
use syncmatrix_core::seed::rng_from;
use syncmatrix_core::synthdata::{GenConfig, Generator};
use syncmatrix_core::{build_similarity_matrix, Encoder, EncoderConfig, FeatureStream, Modality, SimilarityMatrix};

fn streams(n: usize, dim: usize) -> (FeatureStream, FeatureStream) {
    let mut rng = rng_from(1);
    let a = FeatureStream::new(Modality::Audio, gaussian(&[n, dim], 1.0, &mut rng)).unwrap();
    let v = FeatureStream::new(Modality::Visual, gaussian(&[n, dim], 1.0, &mut rng)).unwrap();
    (a, v)
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3_forward_backward");
    for (c_in, c_out) in [(1, 64), (64, 64)] {
        let mut rng = rng_from(2);
        let x = gaussian(&[32, c_in, 11, 11], 1.0, &mut rng);
        let w = gaussian(&[c_out, c_in, 3, 3], 0.1, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{c_in}to{c_out}")), &(x, w), |b, (x, w)| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let wv = tape.param(w.clone());
                let y = tape.conv2d(xv, wv, 1).unwrap();
                let loss = tape.sum(y);
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn similarity(c: &mut Criterion) {
    let mut group = c.benchmark_group("similarity");
    for n in [11, 16, 64] {
        let (a, v) = streams(n, 32);
        group.bench_with_input(BenchmarkId::new("build", n), &(a.clone(), v.clone()), |b, (a, v)| {
            b.iter(|| black_box(build_similarity_matrix(a, v).unwrap()))
        });
        let m = build_similarity_matrix(&a, &v).unwrap();
        group.bench_with_input(BenchmarkId::new("diag_avg", n), &m, |b, m| {
            b.iter(|| black_box(diag_avg_offset(m).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("sliding_window", n), &(a, v), |b, (a, v)| {
            b.iter(|| black_box(sliding_window_offset(a, v).unwrap()))
        });
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let gen = Generator::new(GenConfig::default()).unwrap();
    let clip = gen.clip_at(3, 0, syncmatrix_core::OffsetLabel::new(2).unwrap());
    let enc = Encoder::new(EncoderConfig::default(), &mut rng_from(4)).unwrap();
    c.bench_function("encode_video_15_frames", |b| {
        b.iter(|| black_box(enc.encode(Modality::Visual, &clip.video_raw).unwrap()))
    });
}

fn synccls(c: &mut Criterion) {
    let mut group = c.benchmark_group("synccls_predict_batch32");
    let mut rng = rng_from(6);
    let matrices: Vec<SimilarityMatrix> = (0..32)
        .map(|_| {
            let a = FeatureStream::new(Modality::Audio, gaussian(&[11, 32], 1.0, &mut rng)).unwrap();
            let v = FeatureStream::new(Modality::Visual, gaussian(&[11, 32], 1.0, &mut rng)).unwrap();
            build_similarity_matrix(&a, &v).unwrap()
        })
        .collect();
    for (c1, c2, c3) in [(64, 64, 32), (256, 256, 128)] {
        let net = SyncClsNet::new(SyncClsConfig::with_widths(11, c1, c2, c3), &mut rng_from(5)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{c1}-{c2}-{c3}")), &matrices, |b, ms| {
            b.iter(|| black_box(net.predict_many(ms).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, similarity, encoder, synccls);
criterion_main!(benches);
