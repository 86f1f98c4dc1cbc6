//! Randomized invariant suites, one test per property.

mod common;

use common::props::SUITES;

fn suite(name: &str) {
    let (_, f) = SUITES.iter().find(|(n, _)| *n == name).expect("known suite");
    if let Err(e) = f() {
        panic!("{name}: {e}");
    }
}

#[test]
fn durability() {
    suite("durability");
}

#[test]
fn tier_capacity() {
    suite("tier capacity");
}

#[test]
fn single_owner() {
    suite("single owner");
}

#[test]
fn plan_follow() {
    suite("plan follow");
}

#[test]
fn eviction_order() {
    suite("eviction order");
}

#[test]
fn pipeline_plan() {
    suite("pipeline plan");
}

#[test]
fn determinism() {
    suite("determinism");
}

#[test]
fn token_conservation() {
    suite("token conservation");
}

#[test]
fn purge_skips_pinned() {
    suite("purge skips pinned");
}
