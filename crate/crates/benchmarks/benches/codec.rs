use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use shv_benchmarks::{publish, rows};
use shv_core::wire::{decode_packet, decode_payload, encode_packet, encode_payload};

fn bench_encode(c: &mut Criterion) {
    let mut g = c.benchmark_group("encode_publish");
    for &n in &[1usize, 64, 1024] {
        let packet = publish("/r1/c2/n3/power", n);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &packet, |b, p| {
            b.iter(|| encode_packet(black_box(p)).unwrap())
        });
    }
    g.finish();
}

fn bench_decode(c: &mut Criterion) {
    let mut g = c.benchmark_group("decode_publish");
    for &n in &[1usize, 64, 1024] {
        let bytes = encode_packet(&publish("/r1/c2/n3/power", n)).unwrap();
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &bytes, |b, bytes| {
            b.iter(|| decode_packet(black_box(bytes)).unwrap())
        });
    }
    g.finish();
}

fn bench_payload(c: &mut Criterion) {
    let bytes = encode_payload(&rows(1024, 1));
    c.bench_function("decode_payload_1024", |b| {
        b.iter(|| decode_payload(black_box(&bytes)).unwrap())
    });
}

criterion_group!(benches, bench_encode, bench_decode, bench_payload);
criterion_main!(benches);
