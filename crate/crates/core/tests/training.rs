use lmlcc::diffkit::{Adam, AdamConfig, Graph, PlateauScheduler};
use lmlcc::network::train::{evaluate_loss, train_step};
use lmlcc::network::{train, BackboneConfig, LmlccConfig, Mode, ModelConfig, Network, TrainConfig};
use lmlcc::phantom::{generate_dataset, PhantomDataset};
use lmlcc::{Network32, Patch32};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

fn phantoms(n: usize, seed: u64) -> Vec<Patch32> {
    let ds: PhantomDataset<f32> = generate_dataset(n, n, SIDE, seed).unwrap();
    ds.patches(true).unwrap()
}

fn backbone(seed: u64) -> Network32 {
    Network::new(ModelConfig::Backbone(BackboneConfig::desk(SIDE)), seed).unwrap()
}

#[test]
fn adam_drives_a_quadratic_to_zero() {
    let mut theta = vec![1.0f64];
    let mut adam = Adam::new(AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    });
    for _ in 0..100 {
        let grad = vec![2.0 * theta[0]];
        adam.update(&mut [theta.as_mut_slice()], &[grad.as_slice()]).unwrap();
    }
    assert!(theta[0].abs() < 0.05, "{}", theta[0]);
}

#[test]
fn plateau_schedule_halves_then_floors() {
    let mut s = PlateauScheduler::new(0.5, 10, 1e-6);
    let mut lr = 1e-3;
    let mut drops = Vec::new();
    for epoch in 1..=400 {
        let next = s.observe(1.0, lr);
        if next < lr {
            drops.push(epoch);
        }
        lr = next;
        assert!(lr >= 1e-6);
    }
    // The first epoch sets the reference; each drop then needs 11 flat epochs.
    assert_eq!(&drops[..3], &[12, 23, 34]);
    // 1e-3 / 2^10 < 1e-6, so the tenth drop lands on the floor.
    assert_eq!(drops.len(), 10);
    assert_eq!(lr, 1e-6);
}

fn loss_after_one_step(seed: u64) -> (f64, f64) {
    let patches = phantoms(4, seed);
    let batch: Vec<&Patch32> = patches.iter().collect();
    let mut net = backbone(seed);
    let mut adam = Adam::new(AdamConfig {
        lr: 1e-4,
        ..AdamConfig::default()
    });
    let (before, _) = train_step(&mut net, &mut adam, &batch, None).unwrap();
    let y: Vec<f32> = patches.iter().map(|p| f32::from(p.label.unwrap())).collect();
    let x = net.batch_tensor(&batch).unwrap();
    let mut g = Graph::new();
    let f = net.forward(&mut g, x, Mode::Train, false, None).unwrap();
    let l = g.bce(f.prob, &y).unwrap();
    (before, f64::from(g.value(l).item()))
}

#[test]
fn one_step_lowers_the_batch_loss() {
    let results: Vec<(f64, f64)> = (0..5).map(loss_after_one_step).collect();
    let decreased = results.iter().filter(|(b, a)| a < b).count();
    assert!(decreased >= 4, "{results:?}");
}

#[test]
fn desk_backbone_fits_twenty_phantoms() {
    let patches = phantoms(10, 2);
    let tc = TrainConfig {
        epochs: 15,
        batch_size: 4,
        ..TrainConfig::desk(2)
    };
    let out = train(backbone(2), &patches, &patches, &tc).unwrap();
    let (_, acc) = evaluate_loss(&out.best, &patches).unwrap();
    assert_eq!(acc, 1.0, "{:?}", out.log.last());
}

#[test]
fn eval_mode_ignores_dropout_and_batch() {
    let patches = phantoms(3, 3);
    let net = Network32::new(ModelConfig::Lmlcc(LmlccConfig::new(3, BackboneConfig::desk(SIDE))), 3).unwrap();
    let all = net.predict(&patches).unwrap();
    let refs: Vec<&Patch32> = patches.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let f = net
        .forward(&mut g, net.batch_tensor(&refs).unwrap(), Mode::Eval, false, Some(&mut rng))
        .unwrap();
    assert_eq!(g.value(f.prob).data(), all.as_slice());
    for (i, p) in patches.iter().enumerate() {
        let single = net.predict(std::slice::from_ref(p)).unwrap();
        assert_eq!(single[0], all[i]);
    }
}

#[test]
fn learning_rate_never_drops_below_floor() {
    let patches = phantoms(3, 4);
    let tc = TrainConfig {
        epochs: 8,
        lr_patience: 0,
        min_lr: 2e-4,
        ..TrainConfig::desk(4)
    };
    let out = train(backbone(4), &patches, &patches, &tc).unwrap();
    assert_eq!(out.log.len(), 8);
    assert!(out.log.iter().all(|e| e.lr >= 2e-4 && e.lr <= 1e-3));
    let best = out
        .log
        .iter()
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .unwrap();
    assert_eq!(out.best_epoch, best.epoch);
}

#[test]
fn invalid_schedules_are_rejected() {
    let patches = phantoms(2, 5);
    for tc in [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::desk(0)
        },
        TrainConfig {
            lr: -1.0,
            ..TrainConfig::desk(0)
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::desk(0)
        },
    ] {
        assert!(train(backbone(0), &patches, &patches, &tc).is_err());
    }
    assert!(train(backbone(0), &patches, &[], &TrainConfig::desk(0)).is_err());
}
