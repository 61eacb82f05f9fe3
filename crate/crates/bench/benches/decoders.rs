use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use groundnc::decode::{decode, BeamConfig, DecoderConfig, DecoderKind};
use groundnc::WorldSpec;
use groundnc_bench::Fixture;

fn decoders(c: &mut Criterion) {
    let f = Fixture::new(WorldSpec::default(), 5000, 20);
    let conditions = f.conditions();
    let vocab = f.world.vocab();
    let mut group = c.benchmark_group("decode-20-examples");
    for kind in DecoderKind::ALL {
        for beam in [1, 4, 16] {
            if kind == DecoderKind::Oracle && beam > 1 {
                continue;
            }
            let config = DecoderConfig::new(
                kind,
                BeamConfig {
                    beam,
                    max_len: f.world.spec().max_response_len,
                    ..Default::default()
                },
            );
            group.bench_with_input(BenchmarkId::new(kind.to_string(), beam), &config, |b, config| {
                b.iter(|| {
                    for condition in &conditions {
                        decode(config, &f.scorers, condition, vocab).unwrap();
                    }
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, decoders);
criterion_main!(benches);
