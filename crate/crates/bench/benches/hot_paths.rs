use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use slotbell_bench::{detection_pair, fair_bits, simulated_run};
use slotbell_core::coincidence::find_coincidences;
use slotbell_core::ingest::{encode_stream, parse_timetag_file};
use slotbell_core::randomness::lz76_phrase_count;
use slotbell_core::sync::{assign_detections, recover_pulse_numbering};
use slotbell_core::{SettingPair, Station};
use std::hint::black_box;

fn lz76(c: &mut Criterion) {
    let mut g = c.benchmark_group("lz76");
    for len in [1_000usize, 10_000, 100_000] {
        let bits = fair_bits(len, 3);
        g.throughput(Throughput::Elements(len as u64));
        g.bench_function(format!("{len}"), |b| b.iter(|| lz76_phrase_count(black_box(&bits)).unwrap()));
    }
    g.finish();
}

fn coincidences(c: &mut Criterion) {
    let (a, b) = detection_pair(1_000_000, 0.02, 11);
    let mut g = c.benchmark_group("coincidences");
    g.throughput(Throughput::Elements(a.len() as u64));
    g.bench_function("1e6 pulses", |bch| {
        bch.iter(|| find_coincidences(black_box(&a), black_box(&b), 1.0, SettingPair::new(0.0, 22.5)))
    });
    g.finish();
}

fn ingest_and_sync(c: &mut Criterion) {
    let (cfg, run) = simulated_run(200_000);
    let bytes = encode_stream(&run.alice);
    let mut g = c.benchmark_group("ingest");
    g.throughput(Throughput::Bytes(bytes.len() as u64));
    g.bench_function("parse", |b| b.iter(|| parse_timetag_file(black_box(&bytes)).unwrap()));
    g.finish();

    let pattern = cfg.pattern();
    let (ta, tb) = (run.alice.trigger_times(), run.bob.trigger_times());
    let mut g = c.benchmark_group("sync");
    g.throughput(Throughput::Elements(ta.len() as u64));
    g.bench_function("recover_numbering", |b| {
        b.iter(|| recover_pulse_numbering(black_box(&ta), black_box(&tb), &pattern).unwrap())
    });
    let map = recover_pulse_numbering(&ta, &tb, &pattern).unwrap();
    g.bench_function("assign", |b| {
        b.iter(|| assign_detections(&run.alice, Station::Alice, &map, cfg.trigger_delay_ns, cfg.pulse_duration_ns).unwrap())
    });
    g.finish();
}

criterion_group!(benches, lz76, coincidences, ingest_and_sync);
criterion_main!(benches);
