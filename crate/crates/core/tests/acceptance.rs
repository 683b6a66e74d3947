//! Release gate for the workspace: every test here checks one numbered
//! release criterion end to end, at the stated tolerance. The harness
//! result line per test doubles as the per-criterion pass/fail record;
//! each test also prints one evidence line with the measured numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shv_core::bench::{self, run_cell, ScalingModel, SweepCell};
use shv_core::clock::SimClock;
use shv_core::collectagent::{run_agent, AgentConfig, AgentCore};
use shv_core::model::{LevelDictionary, SensorId, SensorMetadata, Topic, Unit};
use shv_core::proptree::PtNode;
use shv_core::pusher::{
    run_pusher, run_pusher_with_clock, ConfigSource, ControlError, PluginAction, PusherConfig,
    PusherEngine,
};
use shv_core::querylib::QueryHandle;
use shv_core::storage::{MetadataStore, StorageError, Store, StoreConfig};
use shv_core::vsensor::{self, parse_expr, BinOp, EvalCtx, Expr, SeriesSource, VSensorDef};
use shv_core::wire::{decode_packet, encode_packet, encode_payload, DecodeOutcome, Packet};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read as _, Write as _};
use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

const S: u64 = 1_000_000_000;
const MS: u64 = 1_000_000;

/// The load-measuring tests must not overlap each other.
static LOAD_LOCK: Mutex<()> = Mutex::new(());

fn t(s: &str) -> Topic {
    s.parse().unwrap()
}

fn http(port: u16, method: &str, path: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).unwrap();
    write!(stream, "{method} {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut buf = String::new();
    stream.read_to_string(&mut buf).unwrap();
    let status = buf.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, buf.split("\r\n\r\n").nth(1).unwrap_or("").to_owned())
}

fn query_escape(topic: &str) -> String {
    topic.replace('/', "%2F")
}

/// Criterion 1: 100,000 distinct topics map to 100,000 distinct ids, the
/// mapping round-trips, and replaying the same topics against a reloaded
/// dictionary reproduces every id. Budget: 10 seconds.
#[test]
fn c01_id_assignment_is_a_bijection_over_100k_topics() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC01);
    let pool_sizes = [40usize, 60, 80, 120, 160, 200, 260, 320];
    let pools: Vec<Vec<String>> = pool_sizes
        .iter()
        .enumerate()
        .map(|(lvl, &n)| (0..n).map(|i| format!("{}{i}", (b'a' + lvl as u8) as char)).collect())
        .collect();

    let mut raw: HashSet<String> = HashSet::with_capacity(100_000);
    while raw.len() < 100_000 {
        let depth = rng.gen_range(2..=8usize);
        let mut s = String::new();
        for pool in pools.iter().take(depth) {
            s.push('/');
            s.push_str(&pool[rng.gen_range(0..pool.len())]);
        }
        raw.insert(s);
    }
    let topics: Vec<Topic> = raw.iter().map(|s| s.parse().unwrap()).collect();

    let dict = LevelDictionary::new();
    let mut sids: Vec<SensorId> = Vec::with_capacity(topics.len());
    let mut seen: HashMap<SensorId, usize> = HashMap::with_capacity(topics.len());
    for (i, topic) in topics.iter().enumerate() {
        let sid = dict.encode(topic).unwrap();
        if let Some(prev) = seen.insert(sid, i) {
            panic!("id collision: {} and {} both map to {sid:?}", topics[prev], topic);
        }
        sids.push(sid);
    }
    assert_eq!(seen.len(), 100_000, "some topics shared an id");
    for (topic, &sid) in topics.iter().zip(&sids) {
        assert_eq!(&dict.decode(sid).unwrap(), topic);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dictionary.tsv");
    dict.save(&path).unwrap();
    let reloaded = LevelDictionary::load(&path).unwrap();
    for (topic, &sid) in topics.iter().zip(&sids) {
        assert_eq!(reloaded.encode(topic).unwrap(), sid, "replay moved {topic}");
        assert_eq!(&reloaded.decode(sid).unwrap(), topic);
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    println!(
        "criterion 01: 100000 topics, 0 collisions, round-trip and reload replay exact, {elapsed:?}"
    );
}

/// Criterion 2: the wire codec reproduces the fixed frames byte for byte,
/// and 10,000 generated packets survive encode/decode, arbitrary split
/// points (every proper prefix asks for more bytes), and back-to-back
/// framing in one buffer.
#[test]
fn c02_wire_codec_golden_frames_and_split_tolerance() {
    let connect = Packet::Connect { client_id: "p1".into(), keep_alive_s: 60, clean_session: true };
    assert_eq!(
        encode_packet(&connect).unwrap(),
        [0x10, 0x0e, 0x00, 0x04, b'M', b'Q', b'T', b'T', 0x04, 0x02, 0x00, 0x3c, 0x00, 0x02, b'p', b'1']
    );
    let connack = Packet::ConnAck { session_present: false, return_code: 0 };
    assert_eq!(encode_packet(&connack).unwrap(), [0x20, 0x02, 0x00, 0x00]);
    let publish = Packet::Publish { topic: "/a/b".into(), payload: encode_payload(&[(1, 2)]) };
    assert_eq!(
        encode_packet(&publish).unwrap(),
        [
            0x30, 0x16, 0x00, 0x04, b'/', b'a', b'/', b'b', //
            0, 0, 0, 0, 0, 0, 0, 1, // timestamp 1, big endian
            0, 0, 0, 0, 0, 0, 0, 2, // value 2, big endian
        ]
    );
    assert_eq!(encode_packet(&Packet::PingReq).unwrap(), [0xc0, 0x00]);
    assert_eq!(encode_packet(&Packet::PingResp).unwrap(), [0xd0, 0x00]);
    assert_eq!(encode_packet(&Packet::Disconnect).unwrap(), [0xe0, 0x00]);

    let mut rng = ChaCha8Rng::seed_from_u64(0xC02);
    let alnum: Vec<char> = "abcdefghijklmnopqrstuvwxyz0123456789".chars().collect();
    let mut packets = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        packets.push(match rng.gen_range(0..6u8) {
            0 => Packet::Connect {
                client_id: (0..rng.gen_range(1..=23)).map(|_| alnum[rng.gen_range(0..alnum.len())]).collect(),
                keep_alive_s: rng.gen_range(0..=600),
                clean_session: rng.gen_bool(0.5),
            },
            1 => Packet::ConnAck {
                session_present: rng.gen_bool(0.5),
                return_code: rng.gen_range(0..=5),
            },
            2 => {
                let topic = format!(
                    "/r{}/n{}/s{}",
                    rng.gen_range(0..50u32),
                    rng.gen_range(0..50u32),
                    rng.gen_range(0..200u32)
                );
                let mut records: Vec<(u64, i64)> =
                    (0..rng.gen_range(0..=8)).map(|_| (rng.gen(), rng.gen())).collect();
                records.sort_unstable_by_key(|r| r.0);
                Packet::Publish { topic, payload: encode_payload(&records) }
            }
            3 => Packet::PingReq,
            4 => Packet::PingResp,
            _ => Packet::Disconnect,
        });
    }

    let mut stream = Vec::new();
    for p in &packets {
        let frame = encode_packet(p).unwrap();
        match decode_packet(&frame).unwrap() {
            DecodeOutcome::Packet { packet, consumed } => {
                assert_eq!(&packet, p);
                assert_eq!(consumed, frame.len());
            }
            DecodeOutcome::NeedMoreBytes => panic!("complete frame not decoded: {p:?}"),
        }
        for cut in 0..frame.len() {
            match decode_packet(&frame[..cut]) {
                Ok(DecodeOutcome::NeedMoreBytes) => {}
                other => panic!("{cut}-byte prefix of a {}-byte frame gave {other:?}", frame.len()),
            }
        }
        stream.extend_from_slice(&frame);
    }

    let mut off = 0;
    for p in &packets {
        match decode_packet(&stream[off..]).unwrap() {
            DecodeOutcome::Packet { packet, consumed } => {
                assert_eq!(&packet, p);
                off += consumed;
            }
            DecodeOutcome::NeedMoreBytes => panic!("stream truncated at offset {off}"),
        }
    }
    assert_eq!(off, stream.len());
    println!("criterion 02: golden frames exact; 10000 packets round-trip, split- and stream-safe");
}

/// Criterion 3: ten pushers with one hundred counter sensors each, driven
/// for sixty aligned one-second ticks, deliver exactly 60,000 readings
/// into storage: per sensor the full sequence 1..=60 on tick-aligned
/// timestamps, nothing lost, nothing duplicated. Budget: 60 seconds.
#[test]
fn c03_fleet_delivers_every_reading_exactly_once() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let agent = AgentCore::open(&AgentConfig {
        mqtt_port: 0,
        rest_port: None,
        cache_window_ns: 120 * S,
        writers: 2,
        store: StoreConfig::new(dir.path().join("store")),
    })
    .unwrap();

    let base = 1_000_000 * S;
    let mut engines = Vec::new();
    for i in 0..10 {
        let text = format!(
            "global {{\n    broker 127.0.0.1:1\n    mqttprefix /fleet/p{i}\n    mqttClientId fleet{i}\n    sendInterval 1000\n}}\nplugin tester {{\n    group g {{\n        interval 1000\n        sensors 100\n    }}\n}}\n"
        );
        let config = ConfigSource::Literal(text).read().unwrap();
        engines.push(PusherEngine::new(&config, base).unwrap());
    }

    let mut published = 0u64;
    for k in 1..=60u64 {
        let now = base + k * S;
        for e in engines.iter_mut() {
            let before = e.counters().sampled;
            assert_eq!(e.run_due(now), 1, "tick {k} skipped a group");
            assert_eq!(e.counters().sampled - before, 100, "tick {k} sampled short");
            for (topic, records) in e.force_flush() {
                published += records.len() as u64;
                agent.handle_publish(&topic.to_string(), &encode_payload(&records)).unwrap();
            }
        }
    }
    assert_eq!(published, 60_000);
    agent.drain().unwrap();

    let stats = agent.stats();
    assert_eq!(stats.readings, 60_000);
    assert_eq!(stats.stored, 60_000);
    assert_eq!(stats.malformed, 0);
    assert_eq!(stats.store_errors, 0);

    for i in 0..10 {
        for j in 0..100 {
            let topic = t(&format!("/fleet/p{i}/g/s{j}"));
            let sid = agent
                .dict()
                .lookup(&topic)
                .unwrap_or_else(|| panic!("{topic} never reached the agent"));
            let rows = agent.store().query(sid, 0, u64::MAX).unwrap();
            assert_eq!(rows.len(), 60, "{topic}");
            for (k, &(ts, v)) in rows.iter().enumerate() {
                assert_eq!(ts, base + (k as u64 + 1) * S, "{topic} stamp off the tick lattice");
                assert_eq!(ts % S, 0);
                assert_eq!(v, k as i64 + 1, "{topic} counter sequence broken");
            }
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!("criterion 03: 60000/60000 readings stored, sequences 1..=60 intact, {elapsed:?}");
}

/// Criterion 4: 100,000 randomized insert/query/delete_before/compact
/// operations against one store agree exactly with a brute-force shadow
/// model (last write wins, erase cutoffs are permanent). Budget: 60 s.
#[test]
fn c04_storage_agrees_with_brute_force_shadow_over_100k_ops() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = StoreConfig::new(dir.path());
    cfg.segment_bytes = 4 + 16 * 64; // 64 records per segment: constant rotation
    let store = Store::open(cfg).unwrap();

    const SIDS: usize = 14;
    let sid_of = |n: usize| SensorId(n as u128 + 1);
    let visible = |rows: &[(u64, i64)], floor: u64, t0: u64, t1: u64| -> Vec<(u64, i64)> {
        let mut map = BTreeMap::new();
        for &(ts, v) in rows {
            if ts >= floor.max(t0) && ts < t1 {
                map.insert(ts, v);
            }
        }
        map.into_iter().collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0xC04);
    let mut shadows: Vec<Vec<(u64, i64)>> = vec![Vec::new(); SIDS];
    let mut floor = 0u64;
    let (mut inserts, mut queries, mut deletes, mut compacts) = (0u64, 0u64, 0u64, 0u64);
    for _ in 0..100_000u32 {
        let roll: u8 = rng.gen_range(0..100);
        let n = rng.gen_range(0..SIDS);
        if roll < 90 {
            let ts = rng.gen_range(0..1u64 << 19);
            let v = rng.gen_range(-1_000i64..=1_000);
            store.insert(sid_of(n), ts, v).unwrap();
            shadows[n].push((ts, v));
            inserts += 1;
        } else if roll < 97 {
            let hi = rng.gen_range(1..=1u64 << 19);
            let lo = rng.gen_range(0..hi);
            let got = store.query(sid_of(n), lo, hi).unwrap();
            assert_eq!(got, visible(&shadows[n], floor, lo, hi), "query [{lo}, {hi}) diverged");
            queries += 1;
        } else if roll < 99 {
            let cutoff = rng.gen_range(0..1u64 << 19);
            let removed = store.delete_before(cutoff).unwrap();
            let want: u64 =
                shadows.iter().map(|rows| visible(rows, floor, 0, cutoff).len() as u64).sum();
            assert_eq!(removed, want, "delete_before({cutoff}) removal count diverged");
            floor = floor.max(cutoff);
            deletes += 1;
        } else {
            store.compact().unwrap();
            compacts += 1;
        }
    }
    for (n, rows) in shadows.iter().enumerate() {
        let got = store.query(sid_of(n), 0, u64::MAX).unwrap();
        assert_eq!(got, visible(rows, floor, 0, u64::MAX), "final sweep diverged for sid {n}");
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "criterion 04: {inserts} inserts / {queries} queries / {deletes} erases / {compacts} compactions, exact agreement, {elapsed:?}"
    );
}

/// Store wrapper that counts series reads, for the caching assertion.
struct CountingStore<'a> {
    inner: &'a Store,
    fetches: AtomicU64,
}

impl SeriesSource for CountingStore<'_> {
    fn raw_series(&self, sid: SensorId, t0: u64, t1: u64) -> Result<Vec<(u64, i64)>, StorageError> {
        self.fetches.fetch_add(1, Ordering::SeqCst);
        self.inner.query(sid, t0, t1)
    }
    fn write_back(&self, sid: SensorId, records: &[(u64, i64)]) -> Result<(), StorageError> {
        self.inner.insert_batch(sid, records)
    }
}

/// Same formula as production interpolation, written out independently:
/// exact hit, else strict bracket, else refuse.
fn ref_lerp(series: &[(u64, f64)], ts: u64) -> Option<f64> {
    let i = series.partition_point(|&(x, _)| x < ts);
    if let Some(&(x, v)) = series.get(i) {
        if x == ts {
            return Some(v);
        }
    }
    if i == 0 || i >= series.len() {
        return None;
    }
    let (t0, v0) = series[i - 1];
    let (t1, v1) = series[i];
    Some(v0 + (v1 - v0) * ((ts - t0) as f64 / (t1 - t0) as f64))
}

fn ref_grid(t_zero: u64, interval: u64, t0: u64, t1: u64) -> Vec<u64> {
    let mut g = if t0 <= t_zero { t_zero } else { t_zero + (t0 - t_zero).div_ceil(interval) * interval };
    let mut out = Vec::new();
    while g < t1 {
        out.push(g);
        g += interval;
    }
    out
}

fn ref_point(expr: &Expr, g: u64, memo: &HashMap<Topic, Vec<(u64, f64)>>) -> Option<f64> {
    match expr {
        Expr::Const(c) => Some(*c),
        Expr::Operand(topic) => ref_lerp(&memo[topic], g),
        Expr::Neg(inner) => ref_point(inner, g, memo).map(|v| -v),
        Expr::Bin { op, lhs, rhs } => {
            let l = ref_point(lhs, g, memo)?;
            let r = ref_point(rhs, g, memo)?;
            Some(match op {
                BinOp::Add => l + r,
                BinOp::Sub => l - r,
                BinOp::Mul => l * r,
                BinOp::Div => l / r,
            })
        }
    }
}

fn quantized(v: f64, scale: f64) -> f64 {
    (v / scale).round() * scale
}

/// Random expression tree over at most `budget` operand references.
/// Multiplication and division take constant right-hand sides so values
/// stay bounded and divisors stay away from zero; everything else is fair
/// game.
fn gen_expr(
    rng: &mut ChaCha8Rng,
    depth: usize,
    budget: &mut usize,
    phys: &[Topic],
    virt: &[Topic],
) -> Expr {
    let roll: u8 = rng.gen_range(0..100);
    if depth < 3 && *budget > 0 && roll < 55 {
        match rng.gen_range(0..4u8) {
            0 | 1 => {
                let op = if roll % 2 == 0 { BinOp::Add } else { BinOp::Sub };
                let lhs = gen_expr(rng, depth + 1, budget, phys, virt);
                let rhs = gen_expr(rng, depth + 1, budget, phys, virt);
                Expr::Bin { op, lhs: Box::new(lhs), rhs: Box::new(rhs) }
            }
            2 => {
                let lhs = gen_expr(rng, depth + 1, budget, phys, virt);
                let c = [0.25, 0.5, 2.0, 3.0][rng.gen_range(0..4)];
                Expr::Bin { op: BinOp::Mul, lhs: Box::new(lhs), rhs: Box::new(Expr::Const(c)) }
            }
            _ => {
                let lhs = gen_expr(rng, depth + 1, budget, phys, virt);
                let c = [2.0, 4.0, 5.0, 8.0][rng.gen_range(0..4)];
                Expr::Bin { op: BinOp::Div, lhs: Box::new(lhs), rhs: Box::new(Expr::Const(c)) }
            }
        }
    } else if depth < 3 && *budget > 0 && roll < 65 {
        Expr::Neg(Box::new(gen_expr(rng, depth + 1, budget, phys, virt)))
    } else if *budget > 0 {
        *budget -= 1;
        let topic = if !virt.is_empty() && rng.gen_bool(0.3) {
            virt[rng.gen_range(0..virt.len())].clone()
        } else {
            phys[rng.gen_range(0..phys.len())].clone()
        };
        Expr::Operand(topic)
    } else {
        Expr::Const(rng.gen_range(1..=9) as f64)
    }
}

/// Criterion 5: 200 random derived-sensor expressions over physical and
/// derived operands with mismatched sampling grids agree with an
/// independent brute-force evaluation at every grid point within 1e-9
/// relative error, and re-evaluating a cached window reads back only the
/// sensor's own series (no operand fetches). Budget: 60 seconds.
#[test]
fn c05_derived_sensors_match_brute_force_and_cache_their_results() {
    let start = Instant::now();
    const SPAN: u64 = 360 * S;
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(StoreConfig::new(dir.path().join("store"))).unwrap();
    let meta = MetadataStore::open(dir.path().join("metadata.pt")).unwrap();
    let dict = LevelDictionary::new();
    let watt = Unit::parse("W").unwrap();

    // Six feeds with deliberately incommensurate intervals and phases.
    let feeds: [(&str, u64, u64, f64); 6] = [
        ("/ph/s0", 700 * MS, 0, 0.001),
        ("/ph/s1", 1_000 * MS, 100 * MS, 0.01),
        ("/ph/s2", 1_300 * MS, 200 * MS, 0.1),
        ("/ph/s3", 2_000 * MS, 300 * MS, 1.0),
        ("/ph/s4", 3_000 * MS, 400 * MS, 2.5),
        ("/ph/s5", 500 * MS, 123 * MS, 0.5),
    ];
    let mut memo: HashMap<Topic, Vec<(u64, f64)>> = HashMap::new();
    let mut phys: Vec<Topic> = Vec::new();
    for (idx, &(name, interval, phase, scale)) in feeds.iter().enumerate() {
        let topic = t(name);
        meta.set_sensor(SensorMetadata::new(topic.clone(), watt.clone(), scale, interval, 0).unwrap())
            .unwrap();
        let sid = dict.encode(&topic).unwrap();
        let mut rows = Vec::new();
        let mut k = 0u64;
        loop {
            let ts = phase + k * interval;
            if ts > SPAN {
                break;
            }
            let raw = 1_000 + ((k * 7_919 + idx as u64 * 104_729) % 9_000) as i64;
            rows.push((ts, raw));
            k += 1;
        }
        store.insert_batch(sid, &rows).unwrap();
        memo.insert(topic.clone(), rows.iter().map(|&(ts, raw)| (ts, raw as f64 * scale)).collect());
        phys.push(topic);
    }

    let counting = CountingStore { inner: &store, fetches: AtomicU64::new(0) };
    let ctx = EvalCtx { meta: &meta, dict: &dict, series: &counting };
    let (w0, w1) = (60 * S, 180 * S);

    let mut rng = ChaCha8Rng::seed_from_u64(0xC05);
    let mut chains: HashMap<Topic, usize> = HashMap::new();
    let mut eligible: Vec<Topic> = Vec::new(); // derived operands shallow enough to nest further
    let mut checked_points = 0u64;
    for n in 0..200 {
        let mut budget = rng.gen_range(1..=4usize);
        let expr = gen_expr(&mut rng, 0, &mut budget, &phys, &eligible);
        let operands = expr.operands();
        assert!(!operands.is_empty() && operands.len() <= 4);
        let chain = 1 + operands.iter().map(|o| chains.get(o).copied().unwrap_or(0)).max().unwrap();

        let def = VSensorDef {
            topic: t(&format!("/vs/v{n}")),
            expr,
            unit: watt.clone(),
            eval_interval_ns: [500 * MS, 700 * MS, 900 * MS, 1_100 * MS, 1_500 * MS, 2_000 * MS]
                [rng.gen_range(0..6)],
            t_zero_ns: [0, 250 * MS, 500 * MS, 777 * MS][rng.gen_range(0..4)],
            scale: [0.001, 0.01, 0.1, 1.0][rng.gen_range(0..4)],
        };
        meta.define_vsensor(def.clone()).unwrap();

        // Reference series over the whole data span, quantized like the store.
        let mut full = Vec::new();
        for g in ref_grid(def.t_zero_ns, def.eval_interval_ns, 0, SPAN + 1) {
            if let Some(v) = ref_point(&def.expr, g, &memo) {
                full.push((g, quantized(v, def.scale)));
            }
        }

        let out = vsensor::evaluate(&def, w0, w1, &ctx).unwrap();
        assert_eq!(
            (out.skipped_gap, out.skipped_div_zero, out.skipped_range),
            (0, 0, 0),
            "{}: fixture should leave no holes",
            def.topic
        );
        let want_grid = ref_grid(def.t_zero_ns, def.eval_interval_ns, w0, w1);
        assert_eq!(out.points.len(), want_grid.len(), "{}: missing grid points", def.topic);
        for (&(ts, got), &g) in out.points.iter().zip(&want_grid) {
            assert_eq!(ts, g, "{}: off-grid timestamp", def.topic);
            let i = full
                .binary_search_by_key(&g, |&(x, _)| x)
                .unwrap_or_else(|_| panic!("{}: reference lacks {g}", def.topic));
            let want = full[i].1;
            assert!(
                (got - want).abs() <= 1e-9 * want.abs().max(1e-3),
                "{}: at {g} got {got}, brute force says {want}",
                def.topic
            );
            checked_points += 1;
        }

        // Second pass over the same window: one read (the sensor's own
        // cached series), zero operand traffic.
        let before = counting.fetches.load(Ordering::SeqCst);
        let again = vsensor::evaluate(&def, w0, w1, &ctx).unwrap();
        let reads = counting.fetches.load(Ordering::SeqCst) - before;
        assert_eq!(reads, 1, "{}: cached re-evaluation touched operands", def.topic);
        assert_eq!(again.points, out.points);

        memo.insert(def.topic.clone(), full);
        chains.insert(def.topic.clone(), chain);
        if chain <= 2 {
            eligible.push(def.topic.clone());
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "criterion 05: 200 expressions, {checked_points} grid points matched at 1e-9, cached re-reads clean, {elapsed:?}"
    );
}

/// Criterion 6: the machine-room fixture. Per-rack heat output is nine
/// tenths of electrical power by construction; summing four racks of each
/// and dividing must yield 0.9 within 1e-9 at every grid point, and the
/// energy integral of a stepped feed must match the hand-computed
/// trapezoid value.
#[test]
fn c06_machine_room_ratio_and_energy_integral() {
    let dir = tempfile::tempdir().unwrap();
    let qh = QueryHandle::open(dir.path()).unwrap();
    let watt = Unit::parse("W").unwrap();

    for r in 0..4u64 {
        let power = t(&format!("/mr/r{r}/power"));
        let heat = t(&format!("/mr/r{r}/heat"));
        for topic in [&power, &heat] {
            qh.metadata()
                .set_sensor(SensorMetadata::new(topic.clone(), watt.clone(), 1.0, 10 * S, 0).unwrap())
                .unwrap();
        }
        let mut p_rows = Vec::new();
        let mut h_rows = Vec::new();
        for k in 0..=60u64 {
            let ts = k * 10 * S;
            let watts = 1_000 + r as i64 * 10 + (k % 7) as i64 * 10; // multiples of ten
            p_rows.push((ts, watts));
            h_rows.push((ts, watts / 10 * 9));
        }
        qh.store().insert_batch(qh.dict().encode(&power).unwrap(), &p_rows).unwrap();
        qh.store().insert_batch(qh.dict().encode(&heat).unwrap(), &h_rows).unwrap();
    }

    let sum_of = |kind: &str| {
        format!("</mr/r0/{kind}> + </mr/r1/{kind}> + </mr/r2/{kind}> + </mr/r3/{kind}>")
    };
    for (topic, kind) in [("/mr/power_total", "power"), ("/mr/heat_total", "heat")] {
        qh.metadata()
            .define_vsensor(VSensorDef {
                topic: t(topic),
                expr: parse_expr(&sum_of(kind)).unwrap(),
                unit: watt.clone(),
                eval_interval_ns: 10 * S,
                t_zero_ns: 0,
                scale: 1.0,
            })
            .unwrap();
    }
    qh.metadata()
        .define_vsensor(VSensorDef {
            topic: t("/mr/efficiency"),
            expr: parse_expr("</mr/heat_total> / </mr/power_total>").unwrap(),
            unit: Unit::dimensionless(),
            eval_interval_ns: 10 * S,
            t_zero_ns: 0,
            scale: 1e-9,
        })
        .unwrap();

    let ratio = qh.fetch(&t("/mr/efficiency"), 0, 600 * S + 1).unwrap();
    assert_eq!(ratio.points.len(), 61);
    for &(ts, v) in &ratio.points {
        assert!((v - 0.9).abs() <= 1e-9, "efficiency at {ts}: {v}");
    }

    // Stepped feed: 1000 W through t=300 s, 2000 W after, sampled every
    // ten seconds. Trapezoids: 300*1000 + 10*(1000+2000)/2 + 290*2000.
    let feed = t("/mr/feed/power");
    qh.metadata()
        .set_sensor(SensorMetadata::new(feed.clone(), watt.clone(), 1.0, 10 * S, 0).unwrap())
        .unwrap();
    let rows: Vec<(u64, i64)> = (0..=60u64)
        .map(|k| (k * 10 * S, if k <= 30 { 1_000 } else { 2_000 }))
        .collect();
    qh.store().insert_batch(qh.dict().encode(&feed).unwrap(), &rows).unwrap();

    let (joules, unit) = qh.integral(&feed, 0, 600 * S + 1).unwrap();
    assert_eq!(unit.symbol(), "J");
    assert!((joules - 895_000.0).abs() <= 1e-6, "integral gave {joules} J");
    println!(
        "criterion 06: efficiency 0.9 at 61/61 points, stepped feed integrates to {joules} J"
    );
}

/// Criterion 7: the two-point scaling predictor reproduces its anchor
/// measurements, is exact on affine load curves to 1e-12, and matches the
/// worked example (0.5% at 1k sensors, 3% at 10k, so 1.75% at 5.5k).
#[test]
fn c07_scaling_predictor_exact_on_affine_loads() {
    let m = ScalingModel::new((1_000.0, 0.005), (10_000.0, 0.03)).unwrap();
    let predicted = m.predict(5_500.0);
    assert!((predicted - 0.0175).abs() <= 1e-12, "worked example gave {predicted}");

    let mut rng = ChaCha8Rng::seed_from_u64(0xC07);
    for _ in 0..500 {
        let a = rng.gen_range(1.0..1e6);
        let b = a + rng.gen_range(1.0..1e6);
        let alpha = rng.gen_range(-10.0..10.0);
        let beta = rng.gen_range(-1e-3..1e-3);
        let load = |s: f64| alpha + beta * s;
        let m = ScalingModel::new((a, load(a)), (b, load(b))).unwrap();
        for s in [a, b, rng.gen_range(a..=b)] {
            let err = (m.predict(s) - load(s)).abs();
            assert!(
                err <= 1e-12 * load(s).abs().max(1.0),
                "affine load missed at s={s}: err={err}"
            );
        }
    }
    println!("criterion 07: worked example 0.0175 exact, 500 affine curves within 1e-12");
}

/// Criterion 8: measured pusher CPU load at 100, 1000, and 10000
/// readings/s fits a line with r^2 >= 0.9, and stays at or below 5% of a
/// core at 1000 readings/s.
#[test]
fn c08_pusher_cpu_scales_linearly_with_reading_rate() {
    let _guard = LOAD_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let duration = Duration::from_secs(12);
    let warmup = Duration::from_secs(2);
    let cells = [
        SweepCell { pushers: 1, sensors: 100, interval_ms: 1_000 }, // 100/s
        SweepCell { pushers: 1, sensors: 100, interval_ms: 100 },   // 1000/s
        SweepCell { pushers: 1, sensors: 1_000, interval_ms: 100 }, // 10000/s
    ];
    let mut points = Vec::new();
    let mut load_at_1k = None;
    for cell in &cells {
        let rep = run_cell(cell, duration, warmup).unwrap();
        println!(
            "criterion 08: {} sensors @ {} ms -> offered {:.0}/s, pusher {:.4} cores",
            cell.sensors,
            cell.interval_ms,
            rep.offered_rps(),
            rep.pusher_cpu
        );
        points.push((rep.offered_rps(), rep.pusher_cpu));
        if cell.sensors == 100 && cell.interval_ms == 100 {
            load_at_1k = Some(rep.pusher_cpu);
        }
    }
    let fit = bench::fit(&points).unwrap();
    assert!(fit.r2 >= 0.9, "load does not scale linearly: r2 = {:.4}", fit.r2);
    let load = load_at_1k.unwrap();
    assert!(load <= 0.05, "pusher load at 1000 readings/s is {load:.4} cores");
    println!("criterion 08: linear fit r2 = {:.4}, load at 1000/s = {:.4} cores", fit.r2, load);
}

/// Criterion 9: a two-pusher fleet offering 20,000 readings/s for thirty
/// seconds loses nothing, every reading is accounted for, and the agent
/// stays under four cores.
#[test]
fn c09_sustained_twenty_thousand_readings_per_second_without_loss() {
    let _guard = LOAD_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let cell = SweepCell { pushers: 2, sensors: 1_000, interval_ms: 100 };
    let rep = run_cell(&cell, Duration::from_secs(30), Duration::from_secs(3)).unwrap();
    println!(
        "criterion 09: offered {:.0}/s, stored {:.0}/s, loss {:.6}, agent {:.3} cores, pusher rss {:.1} MiB",
        rep.offered_rps(),
        rep.stored_rps(),
        rep.loss(),
        rep.agent_cpu,
        rep.pusher_rss_mb
    );
    assert!(rep.offered >= 20_000 * 28, "offered only {} readings over the run", rep.offered);
    assert!(rep.balanced(), "readings vanished in flight: {rep:?}");
    assert_eq!(rep.dropped_pusher, 0, "pusher shed load: {rep:?}");
    assert_eq!(rep.dropped_agent, 0, "agent shed load: {rep:?}");
    assert_eq!(rep.stored, rep.offered, "loss is not zero: {rep:?}");
    assert_eq!(rep.loss(), 0.0);
    assert!(
        rep.agent_cpu > 0.0 && rep.agent_cpu < 4.0,
        "agent load out of range: {} cores",
        rep.agent_cpu
    );
}

/// Criterion 10: under a simulated clock stepped through 300 one-second
/// ticks, a 120 s cache window holds 120-121 entries and the status API
/// average over the window matches the closed form (181..=300 -> 240.5)
/// to 1e-12.
#[test]
fn c10_cache_window_trim_and_rest_average_under_simulated_clock() {
    let base = 1_000_000 * S;
    let text = "global {\n    broker 127.0.0.1:1\n    mqttprefix /t/n1\n    mqttClientId sim1\n    sendInterval 1000\n    cacheWindow 120000\n    restPort 0\n    threads 1\n}\nplugin tester {\n    group g {\n        interval 1000\n        sensors 2\n    }\n}\n";
    let source = ConfigSource::Literal(text.into());
    let config = source.read().unwrap();
    let clock = Arc::new(SimClock::new(base));
    let handle = run_pusher_with_clock(config, source, clock.clone()).unwrap();
    let engine = handle.engine();

    for k in 1..=300u64 {
        clock.set(base + k * S);
        let want = 2 * k;
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            handle.poke();
            let sampled = engine.lock().unwrap().counters().sampled;
            if sampled >= want {
                assert_eq!(sampled, want, "tick {k} oversampled");
                break;
            }
            assert!(Instant::now() < deadline, "tick {k} never sampled");
            std::thread::sleep(Duration::from_micros(300));
        }
    }

    let port = handle.rest_port().unwrap();
    let topic = "/t/n1/g/s0";
    let (status, body) = http(port, "GET", &format!("/sensors/cache?topic={}", query_escape(topic)));
    assert_eq!(status, 200);
    let rows = body.lines().count() - 1; // minus the header line
    assert!((120..=121).contains(&rows), "cache holds {rows} rows");
    let len = engine.lock().unwrap().cache_len(&t(topic)).unwrap();
    assert_eq!(len, rows, "status API and cache disagree on size");

    let (status, body) =
        http(port, "GET", &format!("/sensors/avg?topic={}&window=120000", query_escape(topic)));
    assert_eq!(status, 200);
    let avg: f64 = body.trim().parse().unwrap();
    assert!((avg - 240.5).abs() <= 1e-12 * 240.5, "window average came out as {avg}");

    let counters = handle.stop();
    assert_eq!(counters.sampled, 600);
    println!("criterion 10: {rows} cached rows after 300 ticks, window average {avg}");
}

fn plugin_node(group: &str, interval: &str, sensors: &str) -> PtNode {
    let mut node = PtNode::leaf("plugin", "tester");
    let mut g = PtNode::leaf("group", group);
    g.children.push(PtNode::leaf("interval", interval));
    g.children.push(PtNode::leaf("sensors", sensors));
    node.children.push(g);
    node
}

/// Criterion 11: plugin stop/start leaves a gap and resumes on the
/// aligned tick with counters intact, reload swaps state atomically (a
/// failed reload changes nothing, a renaming reload retires old topics),
/// and both status APIs return the documented status codes.
#[test]
fn c11_plugin_lifecycle_and_rest_status_codes() {
    // Lifecycle, driven tick by tick on an explicit clock.
    let base = 2_000_000 * S;
    let text = "global {\n    mqttprefix /t/n1\n    mqttClientId ctl1\n}\nplugin tester {\n    group g {\n        interval 1000\n        sensors 2\n    }\n}\n";
    let config = ConfigSource::Literal(text.into()).read().unwrap();
    let mut e = PusherEngine::new(&config, base).unwrap();
    let s0 = t("/t/n1/g/s0");
    fn tick(e: &mut PusherEngine, now: u64) -> u64 {
        let before = e.counters().sampled;
        e.run_due(now);
        e.counters().sampled - before
    }

    for k in 1..=3u64 {
        assert_eq!(tick(&mut e, base + k * S), 2);
    }
    assert_eq!(e.cache_latest(&s0), Some((base + 3 * S, 3.0)));

    // Stopped: ticks 4 and 5 pass unsampled.
    e.plugin_control("tester", PluginAction::Stop, base + 3 * S + S / 2).unwrap();
    assert_eq!(tick(&mut e, base + 4 * S), 0);
    assert_eq!(tick(&mut e, base + 5 * S), 0);
    assert_eq!(e.plugin_states(), vec![("tester".to_string(), false)]);
    assert_eq!(e.cache_latest(&s0), Some((base + 3 * S, 3.0)));

    // Restarted mid-interval: resumes on the next aligned tick, counter
    // continues where it left off (the gap stays a gap).
    e.plugin_control("tester", PluginAction::Start, base + 5 * S + S / 2).unwrap();
    assert_eq!(tick(&mut e, base + 6 * S), 2);
    assert_eq!(e.cache_latest(&s0), Some((base + 6 * S, 4.0)));

    // Reload rebuilds the plugin: counters start over.
    e.plugin_control("tester", PluginAction::Reload, base + 6 * S + S / 2).unwrap();
    assert_eq!(tick(&mut e, base + 7 * S), 2);
    assert_eq!(e.cache_latest(&s0), Some((base + 7 * S, 1.0)));

    // Failed reload: the running instance is untouched.
    let err = e.reload_plugin_with("tester", plugin_node("g", "0", "2"), base + 7 * S + S / 2);
    assert!(matches!(err, Err(ControlError::ReloadFailed(_))), "{err:?}");
    assert_eq!(tick(&mut e, base + 8 * S), 2);
    assert_eq!(e.cache_latest(&s0), Some((base + 8 * S, 2.0)));

    // Renaming reload: old topics retire, new ones start fresh.
    e.reload_plugin_with("tester", plugin_node("h", "1000", "2"), base + 8 * S + S / 2).unwrap();
    assert_eq!(tick(&mut e, base + 9 * S), 2);
    assert_eq!(e.cache_latest(&t("/t/n1/h/s0")), Some((base + 9 * S, 1.0)));
    assert!(e.sensors().iter().all(|tp| !tp.to_string().contains("/g/")));
    assert!(matches!(
        e.plugin_control("ghost", PluginAction::Stop, base),
        Err(ControlError::UnknownPlugin(_))
    ));

    // Pusher status API codes, against a live daemon on a dead broker.
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("pusher.pt");
    let good = "global {\n    broker 127.0.0.1:1\n    mqttprefix /t/n2\n    mqttClientId ctl2\n    sendInterval 200\n    restPort 0\n}\nplugin tester {\n    group g {\n        interval 100\n        sensors 2\n    }\n}\n";
    std::fs::write(&cfg_path, good).unwrap();
    let (config, source) = PusherConfig::load(&cfg_path).unwrap();
    let handle = run_pusher(config, source).unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while handle.engine().lock().unwrap().counters().sampled < 2 {
        assert!(Instant::now() < deadline, "daemon never sampled");
        std::thread::sleep(Duration::from_millis(5));
    }
    let port = handle.rest_port().unwrap();
    let s0 = query_escape("/t/n2/g/s0");

    assert_eq!(http(port, "GET", "/version").0, 200);
    assert_eq!(http(port, "GET", "/plugins").0, 200);
    assert_eq!(http(port, "GET", "/sensors").0, 200);
    assert_eq!(http(port, "GET", &format!("/sensors/avg?topic={s0}")).0, 200);
    let (status, body) = http(port, "GET", &format!("/sensors/cache?topic={s0}"));
    assert_eq!(status, 200);
    assert!(body.starts_with("sensor,timestamp,value"), "cache body: {body:?}");
    assert_eq!(http(port, "POST", "/plugins/tester?action=stop").0, 200);
    assert_eq!(http(port, "POST", "/plugins/tester?action=start").0, 200);
    assert_eq!(http(port, "POST", "/plugins/tester?action=reload").0, 200);

    assert_eq!(http(port, "GET", "/sensors/avg").0, 400, "missing topic");
    assert_eq!(http(port, "GET", "/sensors/avg?topic=no%20slash").0, 400, "malformed topic");
    assert_eq!(http(port, "GET", &format!("/sensors/avg?topic={s0}&window=soon")).0, 400);
    assert_eq!(http(port, "POST", "/plugins/tester?action=explode").0, 400);
    assert_eq!(http(port, "POST", "/plugins/tester").0, 400, "missing action");

    assert_eq!(http(port, "GET", "/sensors/avg?topic=%2Fnope").0, 404, "unknown sensor");
    assert_eq!(http(port, "POST", "/plugins/ghost?action=stop").0, 404, "unknown plugin");
    assert_eq!(http(port, "GET", "/no/such/route").0, 404);

    std::fs::write(&cfg_path, good.replace("sensors 2", "sensors 0")).unwrap();
    assert_eq!(http(port, "POST", "/plugins/tester?action=reload").0, 503, "broken reload");
    std::fs::write(&cfg_path, good.replace("plugin tester", "plugin sysfile")).unwrap();
    assert_eq!(http(port, "POST", "/plugins/tester?action=reload").0, 404, "plugin dropped");
    std::fs::write(&cfg_path, "broken {").unwrap();
    assert_eq!(http(port, "POST", "/plugins/tester?action=reload").0, 503, "unreadable config");
    handle.stop();

    // Agent status API codes.
    let dir2 = tempfile::tempdir().unwrap();
    let agent = run_agent(AgentConfig {
        mqtt_port: 0,
        rest_port: Some(0),
        cache_window_ns: 120 * S,
        writers: 0,
        store: StoreConfig::new(dir2.path().join("store")),
    })
    .unwrap();
    let aport = agent.rest_port().unwrap();

    let now_ns =
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap().as_nanos() as u64;
    agent.core().handle_publish("/z/old", &encode_payload(&[(now_ns - 600 * S, 7)])).unwrap();
    agent.core().handle_publish("/z/new", &encode_payload(&[(now_ns, 9)])).unwrap();
    let old = query_escape("/z/old");

    assert_eq!(http(aport, "GET", "/version").0, 200);
    assert_eq!(http(aport, "GET", "/sensors").0, 200);
    assert_eq!(http(aport, "GET", "/stats").0, 200);
    assert_eq!(http(aport, "GET", &format!("/sensors/latest?topic={}", query_escape("/z/new"))).0, 200);
    assert_eq!(http(aport, "GET", "/sensors/latest").0, 400, "missing topic");
    assert_eq!(http(aport, "GET", &format!("/sensors/avg?topic={old}&window=soon")).0, 400);
    assert_eq!(http(aport, "GET", "/sensors/latest?topic=%2Fghost").0, 404);
    // A reading far older than the cache window: current-value reads
    // refuse it, windowed averages still serve it.
    assert_eq!(http(aport, "GET", &format!("/sensors/latest?topic={old}")).0, 503);
    let (status, body) = http(aport, "GET", &format!("/sensors/avg?topic={old}"));
    assert_eq!((status, body.trim()), (200, "7"));
    agent.stop();

    println!("criterion 11: lifecycle gaps, aligned resume, atomic reload, and all status codes verified");
}
