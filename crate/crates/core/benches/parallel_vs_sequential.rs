use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use headwise_kv::assembler::{assemble, pack, packed_attention_with, reencode_temporal, PackedBuffer};
use headwise_kv::headcache::FrameKV;
use headwise_kv::model::{init_model, InputSchedule, ModelConfig};
use headwise_kv::rollout::{MemoryParams, Rollout, Strategy};
use headwise_kv::rope::RopeParams;
use headwise_kv::tensor::TokenMatrix;
use headwise_kv::{HeadId, Parallelism};

fn modes() -> Vec<(&'static str, Parallelism)> {
    let mut m = vec![("sequential", Parallelism::Sequential)];
    #[cfg(feature = "parallel")]
    m.push(("rayon", Parallelism::Rayon));
    m
}

/// `heads` heads of 64-dim keys, 16 tokens per frame, 3 current frames plus
/// `hist` cached frames each.
fn random_pack(heads: usize, hist: usize) -> PackedBuffer<f64> {
    let (s, d) = (16, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rope = RopeParams::for_head_dim(d);
    let spatial: Vec<_> = (0..s).map(|t| (t / 4, t % 4)).collect();
    let seqs: Vec<_> = (0..heads)
        .map(|h| {
            let frames: Vec<FrameKV> = (0..hist + 3)
                .map(|i| {
                    let k = TokenMatrix::from_fn(s, d, |_, _| rng.random_range(-1.0..1.0));
                    let v = TokenMatrix::from_fn(s, d, |_, _| rng.random_range(-1.0..1.0));
                    FrameKV::new(k, v, spatial.clone(), i).unwrap()
                })
                .collect();
            let q = TokenMatrix::from_fn(3 * s, d, |_, _| rng.random_range(-1.0..1.0));
            let seq = assemble(HeadId::new(0, h), frames[..hist].iter().collect(), &frames[hist..]);
            reencode_temporal::<f64>(&seq, &q, &rope).unwrap()
        })
        .collect();
    pack(&seqs).unwrap()
}

fn bench_packed_attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("packed_attention");
    for &(heads, hist) in &[(24, 8), (96, 18)] {
        let buf = random_pack(heads, hist);
        for (name, mode) in modes() {
            g.bench_with_input(BenchmarkId::new(name, format!("{heads}h_{hist}f")), &buf, |b, buf| {
                b.iter(|| packed_attention_with(buf, mode).unwrap())
            });
        }
    }
    g.finish();
}

fn bench_rollout_step(c: &mut Criterion) {
    let weights = init_model(ModelConfig::default()).unwrap();
    let inputs = InputSchedule::default();
    let mut g = c.benchmark_group("rollout_step");
    g.sample_size(20);
    for (name, mode) in modes() {
        // warm a window cache so the step attends a full history
        let mut r = Rollout::new(&weights, Strategy::UniformWindow { window: 21 }, MemoryParams::default(), mode).unwrap();
        for b in 1..=8 {
            r.step(&weights.block_input("p", b, 0, &inputs), "p").unwrap();
        }
        let input = weights.block_input("p", 9, 0, &inputs);
        g.bench_function(name, |b| b.iter(|| r.forward(&input, None).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_packed_attention, bench_rollout_step);
criterion_main!(benches);
