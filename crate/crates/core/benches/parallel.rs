use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chainrag::chain::Backends;
use chainrag::decoding::{decode, DecodeConfig};
use chainrag::eval::bootstrap_ci;
use chainrag::retrieval::{Bm25Index, Bm25Params, Document};
use chainrag::scenarios::MultiHop;
use chainrag::ExecMode;

const MODES: [(&str, ExecMode); 2] = [
    ("sequential", ExecMode::Sequential),
    ("parallel", ExecMode::Parallel),
];

fn synthetic_corpus(n: usize) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|i| {
            let text: Vec<String> = (0..60)
                .map(|_| format!("w{}", rng.gen_range(0..5000)))
                .collect();
            Document::new(format!("d{i}"), format!("t{i}"), text.join(" "))
        })
        .collect()
}

fn bench_bootstrap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<f64> = (0..1000)
        .map(|_| f64::from(u8::from(rng.gen_bool(0.4))))
        .collect();
    let mut group = c.benchmark_group("bootstrap_ci");
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| bootstrap_ci(black_box(&scores), 2000, 0.95, 7, mode).unwrap())
        });
    }
    group.finish();
}

fn bench_index(c: &mut Criterion) {
    let docs = synthetic_corpus(20_000);
    let mut group = c.benchmark_group("bm25_build");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| Bm25Index::build_with(docs.clone(), Bm25Params::default(), mode).unwrap())
        });
    }
    group.finish();
}

fn bench_best_of_n(c: &mut Criterion) {
    let s = MultiHop::new(1, 4).with_distractors(1.0).build();
    let (lm, index) = (s.backend(), s.index().unwrap());
    let backends = Backends::new(&lm, &index);
    let config = DecodeConfig::best_of_n(4, 8);
    let query = s.instance().query.clone();
    let mut group = c.benchmark_group("best_of_8");
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| decode(&query, &s.task(), &config, &backends, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_bootstrap, bench_index, bench_best_of_n);
criterion_main!(benches);
