mod common;

use std::collections::BTreeSet;

use comprune::gates::*;
use comprune::spec::structure::analyze;
use comprune::spec::NodeKind;
use comprune::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::checks::{hand_sparsity, random_gate_config, random_tensor};

#[test]
fn gate_value_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = Gate::new(Granularity::Filter, "c", vec![0.5]);
    assert_eq!(g.value(Mode::Eval, &mut rng), vec![0.5]);
    assert_eq!(g.value(Mode::Train, &mut rng), vec![0.5]);
    assert_eq!(Gate::new(Granularity::Filter, "c", vec![1.2, -0.3]).value(Mode::Eval, &mut rng), vec![1.0, 0.0]);

    let mut noisy = g.clone();
    noisy.noise = GateNoise::Uniform { amplitude: 0.1 };
    let draw = |seed| noisy.value(Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed))[0];
    for seed in 0..50 {
        let v = draw(seed);
        assert!((0.4..=0.6).contains(&v), "{v}");
        assert_eq!(v.to_bits(), draw(seed).to_bits());
    }
    assert_eq!(noisy.value(Mode::Eval, &mut rng), vec![0.5]);
}

#[test]
fn filter_gate_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&[2, 3, 4, 4], &mut rng);
    assert_eq!(apply_filter_gate(&x, &[1.0; 3]).unwrap(), x);
    assert!(apply_filter_gate(&x, &[0.0; 3]).unwrap().data().iter().all(|&v| v == 0.0));

    let y = apply_filter_gate(&x, &[1.0, 0.0, 0.5]).unwrap();
    for (i, (a, b)) in x.data().iter().zip(y.data()).enumerate() {
        let expect = match (i / 16) % 3 {
            0 => *a,
            1 => 0.0,
            _ => a * 0.5,
        };
        assert_eq!(*b, expect);
    }
    assert!(apply_filter_gate(&x, &[1.0, 1.0]).is_err());
}

#[test]
fn structure_gate_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_tensor(&[2, 3, 4, 4], &mut rng);
    let out = random_tensor(&[2, 3, 4, 4], &mut rng);
    assert_eq!(apply_structure_gate(&out, 0.0, &s).unwrap(), s);
    let sum = apply_structure_gate(&out, 1.0, &s).unwrap();
    for i in 0..s.numel() {
        assert_eq!(sum.data()[i], out.data()[i] + s.data()[i]);
    }
    let twice = s.map(|v| 2.0 * v);
    let y = apply_structure_gate(&twice, 0.5, &s).unwrap();
    for (a, b) in y.data().iter().zip(twice.data()) {
        assert!((a - b).abs() <= 1e-15);
    }
    assert!(apply_structure_gate(&out, 0.5, &Tensor::zeros(&[2, 3, 2, 2])).is_err());
}

#[test]
fn sparsity_loss_examples() {
    let gates = vec![
        Gate::new(Granularity::Filter, "c", vec![1.0; 4]),
        Gate::new(Granularity::Layer, "l", vec![0.7]),
    ];
    assert_eq!(sparsity_loss(&gates, &SparsityConfig::uniform(0.0)), 0.0);
    let mut cfg = SparsityConfig::uniform(0.0);
    cfg.lambda_filter = 1.0;
    assert!((sparsity_loss(&gates[..1], &cfg) - 1.0).abs() < 1e-15);
}

#[test]
fn sparsity_loss_matches_hand_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for enabled in Granularity::all_subsets() {
        for _ in 0..20 {
            let (gates, cfg) = random_gate_config(&enabled, &mut rng);
            let hand = hand_sparsity(&gates, &cfg);
            let total: f64 = hand.values().sum();
            assert!((sparsity_loss(&gates, &cfg) - total).abs() <= 1e-12);
            for (g, v) in sparsity_terms(&gates, &cfg) {
                assert!(enabled.contains(&g));
                assert!((v - hand[&g]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn explicit_weights_override_counts() {
    let gates = vec![Gate::new(Granularity::Layer, "a", vec![0.5]), Gate::new(Granularity::Layer, "b", vec![0.5])];
    let mut cfg = SparsityConfig::uniform(1.0);
    cfg.weight_rule = WeightRule::Explicit { weights: [("layer:a".to_string(), 3.0)].into() };
    assert!((sparsity_loss(&gates, &cfg) - (3.0 * 0.5 + 0.5)).abs() < 1e-15);
    assert_eq!(gate_weight(&gates[1], &gates, &SparsityConfig::uniform(1.0)), 0.5);
}

#[test]
fn negative_lambda_is_rejected() {
    let mut cfg = SparsityConfig::uniform(1.0);
    cfg.lambda_branch = -0.1;
    assert!(cfg.validate().is_err());
    cfg.lambda_branch = f64::NAN;
    assert!(cfg.validate().is_err());
}

#[test]
fn init_gates_examples() {
    let spec = common::chain_spec(&[1, 8, 8], &[(4, 1), (6, 1), (5, 1)], 2);
    let structure = analyze(&spec).unwrap();
    assert!(init_gates(&spec, &structure, &BTreeSet::new(), 1).is_empty());

    let filter: BTreeSet<_> = [Granularity::Filter].into();
    let gates = init_gates(&spec, &structure, &filter, 1);
    let convs: Vec<(String, usize)> = spec
        .nodes
        .iter()
        .filter_map(|n| match n.kind {
            NodeKind::Conv { filters, .. } => Some((n.id.clone(), filters)),
            _ => None,
        })
        .collect();
    assert_eq!(gates.len(), 3);
    for (g, (id, f)) in gates.iter().zip(&convs) {
        assert_eq!(&g.attachment, id);
        assert_eq!(g.phi.len(), *f);
        assert_eq!(g.id, format!("filter:{id}"));
        assert!(g.phi.iter().all(|p| (0.0..1.0).contains(p)));
    }
    assert_eq!(gates, init_gates(&spec, &structure, &filter, 1));
    assert_ne!(gates, init_gates(&spec, &structure, &filter, 2));

    // No shortcuts in this chain, so no layer gates.
    let layer: BTreeSet<_> = [Granularity::Layer].into();
    assert!(init_gates(&spec, &structure, &layer, 1).is_empty());
}

#[test]
fn binarize_examples() {
    let gates = vec![Gate::new(Granularity::Filter, "c", vec![0.02, 0.9])];
    let t = |v: f64| Thresholds::from([(Granularity::Filter, v)]);
    let b = binarize_gates(&gates, &t(0.1)).unwrap();
    assert_eq!(b[0].phi, vec![0.0, 1.0]);
    assert_eq!(b[0].audit.as_deref(), Some(&[0.02, 0.9][..]));
    assert_eq!(binarize_gates(&gates, &t(0.0)).unwrap()[0].phi, vec![1.0, 1.0]);
    assert!(binarize_gates(&gates, &t(1.5)).is_err());
    assert_eq!(binarize_gates(&gates, &Thresholds::new()).unwrap(), gates);
}

#[test]
fn binarize_matches_comparison_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gates: Vec<Gate> = (0..40)
        .map(|i| {
            let g = Granularity::ALL[i % 4];
            let len = if g == Granularity::Filter { rng.gen_range(1..20) } else { 1 };
            Gate::new(g, format!("s{i}"), (0..len).map(|_| rng.gen::<f64>()).collect())
        })
        .collect();
    let thresholds: Thresholds = Granularity::ALL.into_iter().map(|g| (g, 0.3)).collect();
    let out = binarize_gates(&gates, &thresholds).unwrap();
    for (a, b) in gates.iter().zip(&out) {
        for (p, q) in a.phi.iter().zip(&b.phi) {
            assert_eq!(*q, if *p >= 0.3 { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn granularity_sets_parse_and_join() {
    let set = Granularity::parse_set("layer,filter").unwrap();
    assert_eq!(Granularity::join(&set), "filter,layer");
    assert_eq!(Granularity::all_subsets().len(), 15);
    let err = Granularity::parse_set("filter,bogus").unwrap_err().to_string();
    assert!(err.contains("bogus"), "{err}");
}
