mod common;

use common::*;
use dmfa_core::dmfa::ArchKind;
use dmfa_core::eval::evaluate_dmfa;
use dmfa_core::trainer::{run_epochs, train_dmfa, TrainConfig, TrainState};
use dmfa_core::{Dataset, ImageShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = unit_box_mixture(&mut rng, 2, 16, 2, 0.05, 0.02);
    Dataset::new(sample_unit_box(&gen, &mut rng, count), ImageShape::new(1, 4, 4)).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs,
        batch: 8,
        seed: 17,
        patch: (2, 2),
        arch: ArchKind::Dense,
        widths: Some(vec![32]),
        latent: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_a_small_set() {
    let train = data(16, 1);
    let cfg = TrainConfig { patch: (2, 4), ..config(200) };
    let out = train_dmfa(&train, &cfg).unwrap();
    let first = out.log.first().unwrap().mean_nll;
    let last = out.log.last().unwrap().mean_nll;
    assert!(out.log.iter().all(|r| r.mean_loss.is_finite()));
    assert!(last <= first - 5.0, "{first} -> {last}");
}

#[test]
fn same_seed_gives_identical_logs_and_metrics() {
    let (train, test) = (data(64, 2), data(32, 3));
    let a = train_dmfa(&train, &config(4)).unwrap();
    let b = train_dmfa(&train, &config(4)).unwrap();
    let strip = |log: &[dmfa_core::trainer::EpochLog]| {
        log.iter().map(|r| (r.epoch, r.mean_loss.to_bits(), r.mean_nll.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a.log), strip(&b.log));
    assert_eq!(a.net.params(), b.net.params());
    let ma = evaluate_dmfa(&a.net, &test, (2, 2), 0).unwrap();
    let mb = evaluate_dmfa(&b.net, &test, (2, 2), 0).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn resume_through_a_file_matches_an_uninterrupted_run() {
    let train = data(64, 4);
    let cfg = config(6);
    let full = train_dmfa(&train, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::init(&train, &cfg).unwrap();
    let mut head = run_epochs(&train, &cfg, &mut state, 3, Some(dir.path()), &mut |_| Ok(())).unwrap();
    let path = dir.path().join("partial.dmfa");
    state.save(&path, &cfg).unwrap();
    drop(state);
    let (mut resumed, stored) = TrainState::load(&path).unwrap();
    assert_eq!(stored, cfg);
    head.extend(run_epochs(&train, &stored, &mut resumed, 6, None, &mut |_| Ok(())).unwrap());
    for (x, y) in head.iter().zip(&full.log) {
        assert!((x.mean_nll - y.mean_nll).abs() <= 1e-4, "epoch {}: {} vs {}", x.epoch, x.mean_nll, y.mean_nll);
    }
    assert_eq!(resumed.net.params(), full.net.params());
}
