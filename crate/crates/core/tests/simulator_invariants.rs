use slipnap_core::simulator::{generate_dataset, generate_episode, SimulatorConfig, Split};
use slipnap_core::streamsync::{Condition, Modality};

fn small() -> SimulatorConfig {
    let mut cfg = SimulatorConfig::default();
    cfg.n_per_cell = 2;
    cfg
}

#[test]
fn dataset_is_balanced_across_conditions() {
    let cfg = small();
    let m = generate_dataset(&cfg).unwrap();
    let per_cond = cfg.objects.len() * cfg.patterns.len() * cfg.n_per_cell;
    for c in Condition::ALL {
        assert_eq!(m.entries.iter().filter(|e| e.condition == c).count(), per_cond, "{c}");
    }
    let total: usize = Split::ALL.iter().map(|&s| m.count(s)).sum();
    assert_eq!(total, m.entries.len());
}

#[test]
fn full_default_size() {
    let m = generate_dataset(&SimulatorConfig::default()).unwrap();
    assert!(m.entries.len() >= 576, "{}", m.entries.len());
}

#[test]
fn episodes_are_well_formed_and_deterministic() {
    let cfg = small();
    let m = generate_dataset(&cfg).unwrap();
    for entry in m.entries.iter().step_by(7) {
        let sc = cfg.scenario(entry).unwrap();
        let a = generate_episode(&sc).unwrap();
        a.streams.validate().unwrap();
        let (start, end) = a.streams.common_span().unwrap();
        assert!(start <= a.drop_time && a.drop_time < end, "{}", entry.id());
        for modality in Modality::ALL {
            let s = a.streams.stream(modality);
            assert!(s.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
            assert!(s.iter().all(|f| f.payload.iter().all(|v| v.is_finite())));
        }
        for f in a.streams.stream(Modality::Audio) {
            assert!(f.payload.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for f in a.streams.stream(Modality::Rgb) {
            assert!(f.payload.iter().all(|v| (0.0..=255.0).contains(v)));
        }
        assert_eq!(generate_episode(&sc).unwrap(), a);
    }
}

#[test]
fn distinct_seeds_give_distinct_episodes() {
    let cfg = small();
    let m = generate_dataset(&cfg).unwrap();
    let mut a = cfg.scenario(&m.entries[0]).unwrap();
    let x = generate_episode(&a).unwrap();
    a.seed ^= 1;
    let y = generate_episode(&a).unwrap();
    assert_ne!(x.streams, y.streams);
}
