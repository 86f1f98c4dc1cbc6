//! Fixtures shared by the integration suites.
#![allow(dead_code)]

pub mod props;

use kvsim::config::ClusterConfig;
use kvsim::costmodel::{GpuProfile, LinkProfile};
use kvsim::time::Nanos;
use kvsim::workload::{
    assign_priorities, inject_advisories, synthesize_arrivals, synthetic::SyntheticSpec, with_fixed_tokens, Anchor,
    AdvisoryRequest, ArrivalOptions, EventKind, PriorityClass, SessionId, SessionScript, TimedEvent, Trace, Turn,
    UserProfile, DEFAULT_MODEL_ID,
};

pub const SEED: u64 = 7;

pub fn ms(v: u64) -> Nanos {
    Nanos(v * 1_000_000)
}

/// Eight default nodes.
pub fn cluster8() -> ClusterConfig {
    ClusterConfig {
        nodes: 8,
        ..Default::default()
    }
}

/// 1000 chat sessions with ShareGPT-like shape at the default human pace.
pub fn sharegpt_trace(users: u32) -> Trace {
    let scripts = SyntheticSpec::sharegpt_like(1000).generate(SEED);
    let base = synthesize_arrivals(&scripts, users, SEED, &ArrivalOptions::default()).unwrap();
    inject_advisories(&base, 0.0, SEED)
}

/// 1000 heavy-tailed sessions, 256 concurrent users.
pub fn heavy_trace(miss: f64, high_fraction: f64) -> Trace {
    let mut scripts = SyntheticSpec::heavy_tailed(1000).generate(SEED);
    if high_fraction > 0.0 {
        assign_priorities(&mut scripts, high_fraction, SEED);
    }
    let base = synthesize_arrivals(&scripts, 256, SEED, &ArrivalOptions::default()).unwrap();
    inject_advisories(&base, miss, SEED)
}

/// The ShareGPT-like session structure at machine pace with every turn
/// replaced by a 1024-token prompt and a 1-token response.
pub fn prefill_heavy_trace() -> Trace {
    let heavy = SyntheticSpec::heavy_tailed(0);
    let mut spec = SyntheticSpec::sharegpt_like(1000);
    spec.reading_wpm = heavy.reading_wpm;
    spec.typing_wpm = heavy.typing_wpm;
    let scripts = spec.generate(SEED);
    let base = synthesize_arrivals(&scripts, 256, SEED, &ArrivalOptions::default()).unwrap();
    with_fixed_tokens(&inject_advisories(&base, 0.0, SEED), 1024, 1)
}

/// Two nodes with round numbers: prefill 1 ms/token, decode 10 ms x
/// (1 + b/10), 8000-byte blocks over a 1 MB/s network with 1 ms latency.
pub fn micro_cluster() -> ClusterConfig {
    let mut cfg = ClusterConfig {
        nodes: 2,
        ..Default::default()
    };
    cfg.gpu = GpuProfile {
        prefill_throughput: 1000.0,
        decode_base_ms: 10.0,
        decode_half_batch: 10.0,
        hbm_capacity: 1_000_000_000,
        kv_bytes_per_token: 1000,
        num_layers: 2,
        decode_curve: None,
    };
    cfg.link = LinkProfile {
        pcie_bandwidth: 1e9,
        disk_bandwidth: 1e6,
        network_bandwidth: 1e6,
        per_transfer_latency: 1e-3,
    };
    cfg
}

fn script(id: &str, turns: &[(u32, u32)]) -> SessionScript {
    SessionScript {
        session_id: SessionId::new(id),
        model_id: DEFAULT_MODEL_ID.into(),
        turns: turns.iter().map(|&(p, r)| Turn::from_tokens(p, r, 0.75)).collect(),
        user_profile: UserProfile::default(),
        priority_class: PriorityClass::Normal,
    }
}

fn event(s: &str, turn: u32, anchor: Anchor, offset: Nanos, advisory: bool) -> TimedEvent {
    let kind = if advisory {
        EventKind::Advisory(AdvisoryRequest {
            session_id: SessionId::new(s),
            model_id: DEFAULT_MODEL_ID.into(),
            expected_arrival: None,
            ordered: false,
            priority: None,
        })
    } else {
        EventKind::Inference
    };
    TimedEvent {
        time: Nanos::ZERO,
        anchor,
        offset,
        session_id: SessionId::new(s),
        turn_index: turn,
        kind,
    }
}

/// Three sessions on two nodes. `a` runs two turns and is advised 10 ms
/// after its first response, 10 ms ahead of its second request; `b` and
/// `c` are single-turn, `c` arriving 5 ms in.
pub fn micro_trace() -> Trace {
    let mut t = Trace::empty();
    t.header.generator = "micro".into();
    t.sessions = vec![script("a", &[(16, 2), (16, 2)]), script("b", &[(32, 2)]), script("c", &[(8, 2)])];
    t.events = vec![
        event("a", 0, Anchor::SessionStart, ms(0), false),
        event("a", 1, Anchor::TurnCompletion(0), ms(10), true),
        event("a", 1, Anchor::TurnCompletion(0), ms(20), false),
        event("b", 0, Anchor::SessionStart, ms(0), false),
        event("c", 0, Anchor::SessionStart, ms(5), false),
    ];
    t.concurrency_target = 3;
    t.normalize();
    t
}
