//! Store compression into profile records and lineage across persistence.

use tidyloop_core::llm_backend::mock::MockBackend;
use tidyloop_core::llm_backend::Caller;
use tidyloop_core::preference::{PreferenceSource, PreferenceStore};
use tidyloop_core::session::{LoopConfig, Session, TranscriptEntry};

const STACKING: [&str; 9] = [
    "Do not stack the plates on the bowls.",
    "I prefer books laid flat rather than stacked.",
    "No stacking of the mugs please.",
    "Keep the notebooks not stacked on each other.",
    "I prefer cups placed directly on the table rather than stacked.",
    "Avoid stacking everything into one tower.",
    "Don't stack the magazines on the laptop.",
    "I prefer glasses not stacked inside each other.",
    "Lay flat the towels instead of piling them.",
];

fn seeded(budget: usize) -> PreferenceStore {
    let mut store = PreferenceStore::new(budget);
    for (i, t) in STACKING.iter().enumerate() {
        store.ingest_instruction(t, i as u64).unwrap();
    }
    store
}

#[test]
fn nine_records_compress_into_at_most_three() {
    let mut store = seeded(60);
    assert!(store.needs_profile());
    let backend = MockBackend::default();
    let mut log = Vec::new();
    let created = store.profile(&mut Caller::new(&backend, &mut log), 100).unwrap();
    assert!(!created.is_empty() && created.len() <= 3);
    for r in &created {
        assert_eq!(r.source, PreferenceSource::Profile);
        assert!(r.derived_from.len() >= 2);
    }
    assert!(store.token_estimate() <= store.token_budget);
    assert!(!store.profile_due);
    // every original record is archived, none is lost
    assert_eq!(store.records.iter().filter(|r| r.archived).count(), STACKING.len());
}

#[test]
fn lineage_survives_a_round_trip() {
    let mut store = seeded(60);
    let backend = MockBackend::default();
    let mut log = Vec::new();
    store.profile(&mut Caller::new(&backend, &mut log), 100).unwrap();

    let lines: Vec<String> = store.records.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    let records = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    let back = PreferenceStore::from_records(records, store.token_budget);
    assert_eq!(back.records, store.records);
    assert_eq!(back.next_id, store.next_id);
    for r in back.records.iter().filter(|r| r.source == PreferenceSource::Profile) {
        for parent in &r.derived_from {
            let p = back.get(parent).expect("parent kept");
            assert!(p.archived);
            assert_eq!(p.source, PreferenceSource::Instruction);
        }
    }
    assert!(!back.needs_profile());
}

#[test]
fn an_over_budget_session_profiles_before_planning() {
    let scene = serde_json::from_str(
        &std::fs::read_to_string(format!("{}/../../fixtures/table5.scene", env!("CARGO_MANIFEST_DIR"))).unwrap(),
    )
    .unwrap();
    let mut store = seeded(60);
    store.profile_due = true;
    let mut s = Session::new("p", scene, "Tidy the table.", LoopConfig::default()).with_store(store);
    let mock = MockBackend::default();
    s.step(&mock).unwrap();
    assert!(matches!(s.transcript.entries.first(), Some(TranscriptEntry::Profile { created }) if !created.is_empty()));
    assert!(s.store.token_estimate() <= s.store.token_budget);
    let json = serde_json::to_string(&s).unwrap();
    let back: Session = serde_json::from_str(&json).unwrap();
    assert_eq!(back.store, s.store);
}

#[test]
fn under_budget_store_refuses_to_profile() {
    let mut store = seeded(10_000);
    let backend = MockBackend::default();
    let mut log = Vec::new();
    assert!(store.profile(&mut Caller::new(&backend, &mut log), 1).is_err());
    assert!(log.is_empty());
}
