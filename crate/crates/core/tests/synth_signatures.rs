use intention_monitor::chain::{HOUR, TxStore};
use intention_monitor::features::{ADDRESS_FEATURES, HOURS, SET_WIDTH, feature_timeline, full_count_column};
use intention_monitor::paths::PathConfigs;
use intention_monitor::synth::{Kind, Scenario, ScenarioSpec, generate};

#[test]
fn hack_addresses_carry_their_path_signature() {
    let sc = Scenario::hack_universe(17);
    let u = generate(&sc).unwrap();
    let store = TxStore::from_records(u.records.clone());
    let configs = PathConfigs::default();
    let hacks: Vec<_> = u.truth.iter().filter(|t| t.kind == Kind::Hack).collect();
    assert_eq!(hacks.len(), 10);
    for t in hacks {
        let tl = feature_timeline(&store, &t.address, &configs, HOURS).unwrap();
        let st_bk = tl.rows[0][full_count_column(1)];
        assert!(st_bk >= 10.0, "{}: {st_bk} ST-BK paths at hour 1", t.address);
        let sweep = t.sweep_time.unwrap();
        for (i, row) in tl.rows.iter().enumerate() {
            let t_now = t.creation_time + (i as i64 + 1) * HOUR;
            let fr = row[full_count_column(2)] + row[full_count_column(3)];
            if t_now < sweep {
                assert_eq!(fr, 0.0, "{} row {}", t.address, i + 1);
            }
        }
        let after = &tl.rows[t.sweep_hour.unwrap() as usize - 1];
        assert!(after[ADDRESS_FEATURES.len() + 2 * SET_WIDTH..].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn class_balance_of_the_hack_dataset() {
    let sc = Scenario {
        seed: 5,
        start_time: 1_600_000_000 - 1_600_000_000 % HOUR,
        window_hours: 48,
        noise: 0.0,
        background_per_hour: 0,
        fill_to: None,
        specs: vec![
            ScenarioSpec::new(Kind::Hack, 23),
            ScenarioSpec { inputs: Some([2, 4]), ..ScenarioSpec::new(Kind::Merchant, 5_000) },
        ],
    };
    let u = generate(&sc).unwrap();
    let pos = u.labels.values().filter(|l| l.as_bit() == Some(1)).count();
    let neg = u.labels.values().filter(|l| l.as_bit() == Some(0)).count();
    let ratio = pos as f64 / neg as f64;
    assert!((ratio - 0.0046).abs() < 1e-12, "{ratio}");
}

#[test]
fn large_stream_count_survives_ingestion() {
    let sc = Scenario { fill_to: Some(299_767), ..Scenario::hack_universe(3) };
    let u = generate(&sc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    u.write(dir.path(), &sc).unwrap();
    let path = dir.path().join("transactions.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let lines = text.lines().filter(|l| !l.trim().is_empty()).count();
    let store = TxStore::load(&path).unwrap();
    assert_eq!(lines, 299_767);
    assert_eq!(store.tx_count(), lines);
}
