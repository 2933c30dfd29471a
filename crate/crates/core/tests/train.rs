mod common;

use lpt_core::data::TokenSequence;
use lpt_core::langevin::LangevinConfig;
use lpt_core::model::{Group, Lpt};
use lpt_core::numerics::{RngStreams, Stream};
use lpt_core::train::{finetune, pretrain, TrainConfig, TrainerState};
use rand::Rng;

/// Two-state chain over ids 3 and 4 that repeats its last symbol with probability 0.9.
fn markov(n: usize, len: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = RngStreams::new(seed).rng(Stream::Sampling, &[0]);
    (0..n)
        .map(|_| {
            let mut ids = vec![rng.random_range(3..5)];
            while ids.len() < len {
                let last = *ids.last().unwrap();
                ids.push(if rng.random::<f64>() < 0.9 { last } else { 7 - last });
            }
            ids.push(2);
            TokenSequence::new(ids).unwrap()
        })
        .collect()
}

fn small() -> Lpt {
    let cfg = common::reduced(5, 7);
    Lpt::new(cfg, &RngStreams::new(2)).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr_prior: 2e-3,
        lr_generator: 2e-3,
        lr_regressor: 2e-3,
        langevin: LangevinConfig {
            steps: 3,
            ..LangevinConfig::default()
        },
        ..TrainConfig::pretrain()
    }
}

fn group_bits(m: &Lpt, g: Group) -> Vec<u64> {
    let p = m.params();
    p.indices_of(g)
        .iter()
        .flat_map(|&i| p.tensor(i).data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn frozen_regressor_rate_freezes_only_the_regressor() {
    let mut m = small();
    let before = m.clone();
    let data: Vec<(TokenSequence, Vec<f64>)> = markov(32, 6, 1)
        .into_iter()
        .map(|x| {
            let y = x.content().iter().filter(|&&i| i == 3).count() as f64 / x.content().len() as f64;
            (x, vec![y])
        })
        .collect();
    let cfg = TrainConfig {
        lr_regressor: 0.0,
        ..quick(1)
    };
    let mut st = TrainerState::new(&m, cfg.weight_decay);
    finetune(&mut m, &data, &cfg, &RngStreams::new(3), &[0], &mut st, None).unwrap();
    assert_eq!(group_bits(&m, Group::Gamma), group_bits(&before, Group::Gamma));
    assert_ne!(group_bits(&m, Group::Alpha), group_bits(&before, Group::Alpha));
    assert_ne!(group_bits(&m, Group::Beta), group_bits(&before, Group::Beta));
}

#[test]
fn resumed_runs_continue_the_counters() {
    let data = markov(40, 6, 2);
    let streams = RngStreams::new(4);
    let mut m = small();
    let mut st = TrainerState::new(&m, 0.1);
    let a = pretrain(&mut m, &data, &quick(2), &streams, &[1], &mut st, None).unwrap();
    assert_eq!((st.epoch, st.step), (2, 6));
    let b = pretrain(&mut m, &data, &quick(1), &streams, &[1], &mut st, None).unwrap();
    assert_eq!(b.epochs[0].epoch, a.epochs[1].epoch + 1);
    assert_eq!(b.epochs[0].step, 9);
    assert_eq!((st.epoch, st.step), (3, 9));
}

#[test]
fn markov_likelihood_improves() {
    let data = markov(200, 10, 5);
    let mut m = Lpt::new(common::reduced(5, 11), &RngStreams::new(6)).unwrap();
    let mut st = TrainerState::new(&m, 0.1);
    let cfg = TrainConfig {
        batch_size: 32,
        ..quick(4)
    };
    let r = pretrain(&mut m, &data, &cfg, &RngStreams::new(6), &[2], &mut st, None).unwrap();
    let nll: Vec<f64> = r.epochs.iter().map(|e| e.seq_nll_per_token).collect();
    assert!(nll.iter().all(|v| v.is_finite()));
    // Uniform over {A, B, EOS} costs ln 3 ≈ 1.10 per token.
    assert!(nll[3] < nll[0] && nll[3] < 1.0, "{nll:?}");
}
