use marseg::datamodel::Subset;
use marseg::network::{Aggregation, NetworkConfig};
use marseg::synthcorpus::{generate_sequence, SceneSpec};
use marseg::training::{train_samples, TrainConfig};

fn corpus(t: usize) -> (Vec<marseg::datamodel::TemporalSample>, Vec<Subset>) {
    let mut samples = Vec::new();
    let mut subsets = Vec::new();
    for i in 0..6 {
        let seq = generate_sequence(&SceneSpec::random(300 + i, 32, 48, t + 2, i % 2 == 0)).unwrap();
        for s in seq.samples(t, false).unwrap() {
            samples.push(s);
            subsets.push(seq.subset);
        }
    }
    (samples, subsets)
}

#[test]
fn loss_decreases_on_a_short_run() {
    let (samples, subsets) = corpus(2);
    let net = NetworkConfig::with_strides(2, 8, &[2, 2], Aggregation::Conv3d, 3);
    let cfg = TrainConfig {
        epochs: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train_samples(&samples, &subsets, &net, &cfg).unwrap();
    let l = &out.losses;
    let head: f64 = l[..5].iter().map(|r| r.total).sum::<f64>() / 5.0;
    let tail: f64 = l[l.len() - 5..].iter().map(|r| r.total).sum::<f64>() / 5.0;
    assert!(tail < 0.8 * head, "loss {head:.3} -> {tail:.3}");
    assert!(l.iter().all(|r| r.total.is_finite()));
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (samples, subsets) = corpus(1);
    let net = NetworkConfig::with_strides(1, 8, &[2, 2], Aggregation::AvgPool3x3, 3);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 11,
        ..TrainConfig::default()
    };
    let a = train_samples(&samples, &subsets, &net, &cfg).unwrap();
    let b = train_samples(&samples, &subsets, &net, &cfg).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.network.to_checkpoint(), b.network.to_checkpoint());
}
