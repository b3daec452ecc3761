mod common;

use comprune::autograd::{MergeInput, Tape, Var};
use comprune::gates::{sparsity_loss, sparsity_loss_on_tape, Gate, Granularity, SparsityConfig};
use comprune::spec::catalog;
use comprune::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::checks::{network_fd_errors, random_tensor, relative_error, FD_FLOOR, FD_STEP};

/// Checks `d/d(inputs) sum(op(inputs) * r)` against central differences
/// for every scalar of every input.
fn fd_check(inputs: Vec<Tensor>, op: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(inputs.len() as u64 * 31 + inputs[0].numel() as u64);
    let objective = |values: &[Tensor], r: Option<&Tensor>| -> (f64, Vec<Tensor>, Tensor) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = op(&mut tape, &leaves);
        let shape = tape.value(out).shape().to_vec();
        let r = r.cloned().unwrap_or_else(|| Tensor::from_fn(&shape, |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4));
        let rv = tape.leaf(r.clone());
        let prod = tape.mul(out, rv).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        let grads = tape.backward(loss).unwrap();
        let g = leaves.iter().map(|l| grads.get(*l).cloned().unwrap_or_else(|| tape.value(*l).zeros_like())).collect();
        (value, g, r)
    };
    let (_, analytic, r) = objective(&inputs, None);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let picks: Vec<usize> = if input.numel() <= 64 { (0..input.numel()).collect() } else { (0..64).map(|_| rng.gen_range(0..input.numel())).collect() };
        for i in picks {
            let mut shifted = inputs.clone();
            shifted[k].data_mut()[i] += FD_STEP;
            let up = objective(&shifted, Some(&r)).0;
            shifted[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = objective(&shifted, Some(&r)).0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric, FD_FLOOR));
        }
    }
    worst
}

/// Random values kept at least `gap` away from zero so relu kinks are not
/// straddled by the difference stencil.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor {
    random_tensor(shape, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

const TOL: f64 = 1e-6;

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = random_tensor(&[2, 3, 7, 7], &mut rng);
        let w = random_tensor(&[4, 3, 3, 3], &mut rng);
        let b = random_tensor(&[4], &mut rng);
        let e = fd_check(vec![x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap());
        assert!(e <= TOL, "stride {stride} pad {pad}: {e:e}");
    }
}

#[test]
fn dense_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = fd_check(vec![random_tensor(&[3, 5], &mut rng), random_tensor(&[5, 4], &mut rng), random_tensor(&[4], &mut rng)], |t, v| {
        t.dense(v[0], v[1], Some(v[2])).unwrap()
    });
    assert!(e <= TOL, "{e:e}");
}

#[test]
fn pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&[2, 2, 6, 6], &mut rng);
    assert!(fd_check(vec![x.clone()], |t, v| t.max_pool(v[0], 2, 2).unwrap()) <= TOL);
    assert!(fd_check(vec![x], |t, v| t.avg_pool(v[0], 3, 1).unwrap()) <= TOL);
}

#[test]
fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&[3, 2, 4, 4], &mut rng);
    let gamma = random_tensor(&[2], &mut rng);
    let beta = random_tensor(&[2], &mut rng);
    let e = fd_check(vec![x.clone(), gamma.clone(), beta.clone()], |t, v| t.batchnorm_train(v[0], v[1], v[2], 1e-5).unwrap().0);
    assert!(e <= TOL, "train: {e:e}");
    let (mean, var) = (random_tensor(&[2], &mut rng), Tensor::from_vec(vec![0.7, 1.9]));
    let e = fd_check(vec![x, gamma, beta], |t, v| t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap());
    assert!(e <= TOL, "eval: {e:e}");
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = away_from_zero(&[2, 3, 3, 3], 1e-2, &mut rng);
    let b = random_tensor(&[2, 3, 3, 3], &mut rng);
    assert!(fd_check(vec![a.clone()], |t, v| t.relu(v[0])) <= TOL);
    assert!(fd_check(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap()) <= TOL);
    assert!(fd_check(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap()) <= TOL);
    let scale = Tensor::from_vec(vec![0.3, -0.8, 1.4]);
    assert!(fd_check(vec![a.clone(), scale], |t, v| t.channel_scale(v[0], v[1]).unwrap()) <= TOL);
    assert!(fd_check(vec![a.clone(), Tensor::scalar(0.6)], |t, v| t.scalar_scale(v[0], v[1]).unwrap()) <= TOL);
    assert!(fd_check(vec![a], |t, v| t.reshape(v[0], &[6, 9]).unwrap()) <= TOL);
}

#[test]
fn merge_add_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let wide = random_tensor(&[2, 4, 3, 3], &mut rng);
    let narrow = random_tensor(&[2, 2, 3, 3], &mut rng);
    let e = fd_check(vec![wide, narrow], |t, v| {
        t.merge_add(
            vec![MergeInput { input: v[0], channel_map: None }, MergeInput { input: v[1], channel_map: Some(vec![3, 1]) }],
            4,
        )
        .unwrap()
    });
    assert!(e <= TOL, "{e:e}");
}

#[test]
fn gate_value_gradient_inside_and_at_clamp() {
    let phi = Tensor::from_vec(vec![0.2, 0.5, 0.9]);
    assert!(fd_check(vec![phi.clone()], |t, v| t.gate_value(v[0], None).unwrap()) <= TOL);
    let noise = [0.05, -0.1, 0.2];
    let mut tape = Tape::new();
    let p = tape.leaf(phi);
    let g = tape.gate_value(p, Some(&noise)).unwrap();
    assert_eq!(tape.value(g).data()[2], 1.0);
    let s = tape.sum(g);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 0.0]);
}

#[test]
fn loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random_tensor(&[4, 5], &mut rng).map(|v| 3.0 * v);
    let e = fd_check(vec![logits], |t, v| t.cross_entropy(v[0], &[1, 0, 4, 4]).unwrap());
    assert!(e <= TOL, "{e:e}");
    let w = away_from_zero(&[3, 4], 1e-2, &mut rng);
    assert!(fd_check(vec![w.clone()], |t, v| t.sum_squares(v[0])) <= TOL);
    assert!(fd_check(vec![w], |t, v| t.weighted_abs_sum(v[0], 0.25)) <= TOL);
}

#[test]
fn sparsity_penalty_gradient_and_value_match() {
    let gates = vec![
        Gate::new(Granularity::Filter, "a", vec![0.2, 0.4, 0.7, 0.1]),
        Gate::new(Granularity::Layer, "b", vec![0.3]),
        Gate::new(Granularity::Layer, "c", vec![0.8]),
    ];
    let cfg = SparsityConfig::uniform(2.0);
    let mut tape = Tape::new();
    let phis: Vec<Var> = gates.iter().map(|g| tape.leaf(Tensor::from_vec(g.phi.clone()))).collect();
    let loss = sparsity_loss_on_tape(&mut tape, &gates, &phis, &cfg).unwrap();
    assert!((tape.value(loss).item() - sparsity_loss(&gates, &cfg)).abs() < 1e-15);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(phis[0]).unwrap().data().iter().all(|&g| (g - 0.5).abs() < 1e-15));
    assert!((grads.get(phis[1]).unwrap().item() - 1.0).abs() < 1e-15);
}

fn assert_network_fd(name: &str, seed: u64) {
    let spec = common::scaffolded(&catalog::builtin(name).unwrap());
    let mut net = common::gated_network(&spec, &common::all_granularities(), seed);
    // Gate phis inside (0, 1), away from the clamp boundaries.
    for g in &mut net.gates {
        g.phi.iter_mut().for_each(|p| *p = 0.1 + 0.8 * *p);
    }
    let errors = network_fd_errors(&mut net, 100, seed);
    let (worst_name, worst) = errors.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    assert!(worst <= 1e-3, "{name}: {worst_name} relative error {worst:e}");
}

#[test]
fn network_gradients_mini_vgg8() {
    assert_network_fd("mini_vgg8", 21);
}

#[test]
fn network_gradients_mini_resnet() {
    assert_network_fd("mini_resnet", 22);
}
