//! One test per acceptance criterion. Criteria run one at a time so the
//! timed ones are measured without competition from their siblings.

use std::sync::Mutex;

use ranger_cli::selftest::run_criterion;

static SERIAL: Mutex<()> = Mutex::new(());

fn criterion(id: usize) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let outcome = run_criterion(id).expect("known criterion");
    println!("{outcome}");
    assert!(outcome.passed, "{outcome}");
}

#[test]
fn c01_gradient_fidelity() {
    criterion(1);
}

#[test]
fn c02_moe_equivalences() {
    criterion(2);
}

#[test]
fn c03_load_balance_identities() {
    criterion(3);
}

#[test]
fn c04_routing_contract() {
    criterion(4);
}

#[test]
fn c05_retrieval_oracle() {
    criterion(5);
}

#[test]
fn c06_metric_oracles() {
    criterion(6);
}

#[test]
fn c07_decoding() {
    criterion(7);
}

#[test]
fn c08_overfit_capability() {
    criterion(8);
}

#[test]
fn c09_load_balance_effect() {
    criterion(9);
}

#[test]
fn c10_ablation_harness_structure() {
    criterion(10);
}

#[test]
fn c11_determinism() {
    criterion(11);
}
