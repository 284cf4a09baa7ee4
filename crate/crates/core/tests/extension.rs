use ccfi_core::checkpoint::{read_state, write_state};
use ccfi_core::*;

fn ids(range: std::ops::Range<usize>) -> Vec<ClassId> {
    range.map(|i| ClassId::new(format!("c{i}"))).collect()
}

fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| v.to_bits()).collect()
}

fn random_state(rng: &mut Rng, h: usize, k: usize) -> State {
    let head = Head::random(h, ids(0..k), 1.0, rng).unwrap();
    let mut adam = Adam::new(AdamConfig::with_step_size(1e-2), &head);
    adam.first = Weights::from_fn(h, k, |_, _| rng.normal(0.0, 1.0));
    adam.second = Weights::from_fn(h, k, |_, _| rng.uniform());
    adam.step = 7;
    let table = Table::from_matrix(Weights::from_fn(h, k, |_, _| rng.uniform() * 3.0)).unwrap();
    let anchor = Anchor::from_matrix(Weights::from_fn(h, k, |_, _| rng.normal(0.0, 1.0))).unwrap();
    State {
        head,
        adam,
        table,
        anchor,
        exemplars: Store::empty(0.01),
        round: 0,
    }
}

#[test]
fn extension_keeps_old_columns_bit_identical() {
    let mut rng = Rng::new(20);
    for case in 0..200 {
        let h = 1 + rng.index(8);
        let k = 1 + rng.index(5);
        let n = rng.index(4);
        let mut state = random_state(&mut rng, h, k);
        let before = state.clone();
        let range = state.extend_classes(ids(k..k + n), 0.02, &mut rng).unwrap();
        assert_eq!(range, k..k + n, "case {case}");
        state.check_invariants().unwrap();
        for c in 0..k {
            assert_eq!(
                bits(state.head.weights().column(c)),
                bits(before.head.weights().column(c))
            );
            assert_eq!(
                bits(state.table.values().column(c)),
                bits(before.table.values().column(c))
            );
            assert_eq!(
                bits(state.anchor.weights().column(c)),
                bits(before.anchor.weights().column(c))
            );
            assert_eq!(bits(state.adam.first.column(c)), bits(before.adam.first.column(c)));
            assert_eq!(bits(state.adam.second.column(c)), bits(before.adam.second.column(c)));
        }
        for c in k..k + n {
            assert!(state.table.values().column(c).iter().all(|&v| v == 0.0));
            assert!(state.adam.first.column(c).iter().all(|&v| v == 0.0));
            assert_eq!(
                bits(state.anchor.weights().column(c)),
                bits(state.head.weights().column(c))
            );
        }
    }
}

#[test]
fn penalty_ignores_new_columns() {
    let mut rng = Rng::new(21);
    for _ in 0..200 {
        let h = 1 + rng.index(8);
        let k = 1 + rng.index(5);
        let n = 1 + rng.index(3);
        let mut state = random_state(&mut rng, h, k);
        state.anchor = Anchor::from_head(&state.head);
        state.extend_classes(ids(k..k + n), 0.02, &mut rng).unwrap();
        for c in k..k + n {
            for v in state.head.weights_mut().column_mut(c) {
                *v += rng.normal(0.0, 5.0);
            }
        }
        assert_eq!(
            consolidation_term(&state.head, &state.anchor, &state.table).unwrap(),
            0.0
        );
        let grad = consolidation_gradient(&state.head, &state.anchor, &state.table, 1e25).unwrap();
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }
}

fn separable(seed: u64, classes: usize, per_class: usize) -> Vec<Example> {
    let mut rng = Rng::for_stream(seed, Stream::DataGen);
    let raw = gen_synthetic(classes, per_class, 16, 10.0, &mut rng).unwrap();
    FrozenExtractor::Identity.extract_all(&raw).unwrap()
}

#[test]
fn new_columns_rarely_change_predictions() {
    // seed 5; any seed should do, this one is pinned for reproducibility
    let data = separable(5, 6, 200);
    let mut train_set = Vec::new();
    let mut held_out = Vec::new();
    for (i, e) in data.into_iter().enumerate() {
        if i % 4 == 0 {
            held_out.push(e);
        } else {
            train_set.push(e);
        }
    }
    let mut rng = Rng::new(5);
    let mut head = Head::random(16, ids(0..6), 0.01, &mut rng).unwrap();
    let mut adam = Adam::new(AdamConfig::with_step_size(1e-2), &head);
    let config = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    train(&mut head, &mut adam, &train_set, &config, &mut rng).unwrap();
    let before: Vec<usize> = held_out.iter().map(|e| head.predict(&e.features).unwrap()).collect();
    assert_eq!(head.accuracy(&held_out).unwrap(), 1.0);
    extend_classes(&mut head, &mut adam, ids(6..10), NEW_COLUMN_STD, &mut rng).unwrap();
    let changed = held_out
        .iter()
        .zip(&before)
        .filter(|(e, &b)| head.predict(&e.features).unwrap() != b)
        .count();
    assert!(
        (changed as f64) < 0.05 * held_out.len() as f64,
        "{changed} of {}",
        held_out.len()
    );
}

fn retrain(state: &mut State, new_data: &[Example], epochs: usize, rng: &mut Rng) {
    let State {
        head,
        adam,
        table,
        anchor,
        exemplars,
        ..
    } = state;
    let config = RetrainConfig {
        batch_size: 16,
        ..RetrainConfig::default()
    };
    let mut session = RetrainSession::new(anchor, table, new_data, exemplars.examples().collect(), config).unwrap();
    for _ in 0..epochs {
        session.run_epoch(head, adam, rng).unwrap();
    }
}

fn two_increments(lifecycle: Lifecycle) -> (Table, Vec<Table>, State) {
    let data = separable(9, 5, 60);
    let of = |c: &[usize]| -> Vec<Example> {
        data.iter()
            .filter(|e| c.iter().any(|&i| e.label.as_str() == format!("c{i}")))
            .cloned()
            .collect()
    };
    let mut rng = Rng::new(9);
    let initial = of(&[0, 1, 2]);
    let mut head = Head::random(16, ids(0..3), 0.01, &mut rng).unwrap();
    let mut adam = Adam::new(AdamConfig::with_step_size(1e-2), &head);
    train(&mut head, &mut adam, &initial, &TrainConfig::default(), &mut rng).unwrap();
    let selection = SelectionConfig::new(0.05);
    let mut state =
        State::after_initial_training(head, adam, &initial, Selector::Fisher, &selection, &mut rng).unwrap();
    let initial_table = state.table.clone();
    let mut tables = Vec::new();
    for class in [3, 4] {
        let new_data = of(&[class]);
        state
            .extend_classes(ids(class..class + 1), NEW_COLUMN_STD, &mut rng)
            .unwrap();
        retrain(&mut state, &new_data, 3, &mut rng);
        refresh_anchor_and_table(&mut state, &new_data, Selector::Fisher, &selection, lifecycle, &mut rng).unwrap();
        state.round += 1;
        tables.push(state.table.clone());
    }
    (initial_table, tables, state)
}

#[test]
fn refresh_recomputes_old_columns_and_frozen_keeps_them() {
    let (initial, frozen, frozen_state) = two_increments(Lifecycle::Frozen);
    let (_, refreshed, refreshed_state) = two_increments(Lifecycle::Refresh);
    for c in 0..3 {
        assert_eq!(bits(frozen[1].values().column(c)), bits(initial.values().column(c)));
        assert_ne!(bits(refreshed[1].values().column(c)), bits(initial.values().column(c)));
    }
    // frozen tables only grow zero columns
    assert!(frozen[1].values().column(3).iter().all(|&v| v == 0.0));
    assert!(frozen[1].values().column(4).iter().all(|&v| v == 0.0));
    // the refreshed table learned about the round-1 class before round 2 began
    assert!(refreshed[0].values().column(3).iter().any(|&v| v > 0.0));
    // exemplar stores grow the same way under both policies
    assert_eq!(frozen_state.exemplars.len(), refreshed_state.exemplars.len());
    assert_eq!(refreshed_state.anchor.weights(), refreshed_state.head.weights());
}

#[test]
fn state_checkpoint_after_increments_is_bit_exact() {
    let (_, _, state) = two_increments(Lifecycle::Refresh);
    let mut bytes = Vec::new();
    write_state(&mut bytes, &state).unwrap();
    let back = read_state(bytes.as_slice()).unwrap();
    assert_eq!(back, state);
    assert_eq!(
        bits(back.head.weights().as_slice()),
        bits(state.head.weights().as_slice())
    );
    let mut again = Vec::new();
    write_state(&mut again, &back).unwrap();
    assert_eq!(again, bytes);
}
