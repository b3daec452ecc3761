//! End-to-end acceptance checks A1 to A8. Runs without the libtest harness
//! and prints one `PASS` or `FAIL` line per criterion.

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use comprune::gates::{sparsity_terms, Gate, Granularity};
use comprune::metrics::{count_flops, count_params};
use comprune::network::{init_weights, Network};
use comprune::pipeline::{combined_loss, prune_pipeline, ExperimentConfig};
use comprune::spec::catalog::{self, builtin};
use comprune::spec::shortcuts::{insert_shortcuts, insert_shortcuts_with_report, MismatchPolicy};
use comprune::spec::{validate, NodeKind};
use comprune::surgery::{apply_plan, plan_from_gates, verify_equivalence, PruningPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::checks::{cost_pair, hand_sparsity, network_fd_errors, primitive_oracle_worst, random_gate_config};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn a1_oracles() -> Outcome {
    let prims = primitive_oracle_worst(50, 11);
    let (prim_op, prim_worst) = prims.iter().fold(("", 0.0f64), |a, (k, v)| if *v > a.1 { (k, *v) } else { a });
    let mut fd_worst = (String::new(), 0.0f64);
    for (name, seed) in [("mini_vgg8", 21), ("mini_resnet", 22)] {
        let spec = common::scaffolded(&builtin(name).unwrap());
        let mut net = common::gated_network(&spec, &common::all_granularities(), seed);
        for g in &mut net.gates {
            g.phi.iter_mut().for_each(|p| *p = 0.1 + 0.8 * *p);
        }
        for (k, e) in network_fd_errors(&mut net, 100, seed) {
            if e > fd_worst.1 {
                fd_worst = (format!("{name}/{k}"), e);
            }
        }
    }
    check(
        prim_worst <= 1e-10 && fd_worst.1 <= 1e-3 && prims.len() >= 9,
        format!("{} primitives, worst {prim_op} {prim_worst:.2e}; gradient check worst {} rel. error {:.2e}", prims.len(), fd_worst.0, fd_worst.1),
    )
}

fn a2_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut nonempty = 0;
    for name in ["mini_vgg8", "mini_resnet"] {
        let spec = common::scaffolded(&builtin(name).unwrap());
        let base = common::gated_network(&spec, &common::all_granularities(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..100 {
            let gates = common::random_binary(&base.gates, rng.gen_range(0.05..0.8), &mut rng);
            let mut gated = Network::from_parts(&spec, base.weights.clone(), gates.clone(), 1).unwrap();
            let plan = plan_from_gates(&spec, &gates, &common::half_thresholds()).unwrap();
            let (pspec, pweights) = apply_plan(&spec, &gated.weights, &plan, true).unwrap();
            let mut pruned = Network::from_parts(&pspec, pweights, vec![], 1).unwrap();
            worst = worst.max(verify_equivalence(&mut gated, &mut pruned, 16, trial).unwrap());
            nonempty += usize::from(!plan.is_empty());
        }
    }
    check(worst <= 1e-8 && nonempty > 150, format!("200 assignments ({nonempty} non-empty plans), worst |diff| {worst:.2e}"))
}

fn a3_mnist() -> Outcome {
    let mut cfg = ExperimentConfig::load(config_path("mini_vgg8_mnist.json")).unwrap();
    cfg.out_dir = None;
    let out = prune_pipeline(&cfg).map_err(|e| e.to_string())?;
    let r = &out.report;
    let drop = 100.0 * (r.baseline_accuracy - r.pruned_accuracy);
    check(
        r.params_reduction_pct >= 50.0 && r.flops_reduction_pct >= 25.0 && drop <= 2.0,
        format!(
            "params -{:.2}%, FLOPs -{:.2}%, accuracy {:.2}% vs baseline {:.2}% (drop {drop:.2} pp)",
            r.params_reduction_pct,
            r.flops_reduction_pct,
            100.0 * r.pruned_accuracy,
            100.0 * r.baseline_accuracy
        ),
    )
}

fn a4_branches() -> Outcome {
    let base = ExperimentConfig::load(config_path("mini_resnet_synthetic.json")).unwrap();
    let mut good = 0;
    let mut notes = Vec::new();
    for seed in 0..10 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.out_dir = None;
        let r = prune_pipeline(&cfg).map_err(|e| format!("seed {seed}: {e}"))?.report;
        let removed = r.meta.removed_structures.get(&Granularity::Branch).map_or(0, Vec::len);
        let drop = 100.0 * (r.baseline_accuracy - r.pruned_accuracy);
        if removed >= 1 && drop <= 1.0 {
            good += 1;
        }
        notes.push(format!("{removed}/{drop:.1}"));
    }
    check(good >= 8, format!("{good}/10 seeds remove a block within 1 pp (removed/drop per seed: {})", notes.join(" ")))
}

fn a5_loss() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let subsets = Granularity::all_subsets();
    let (mut worst, mut leaked) = (0.0f64, 0);
    for i in 0..1000 {
        let enabled = &subsets[i % subsets.len()];
        let (gates, cfg) = random_gate_config(enabled, &mut rng);
        let (data, l2) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..0.1));
        let expect = data + hand_sparsity(&gates, &cfg).values().sum::<f64>() + l2;
        worst = worst.max((combined_loss(data, &gates, &cfg, l2) - expect).abs());
        let disabled: Vec<Gate> = gates.iter().filter(|g| !enabled.contains(&g.granularity)).cloned().collect();
        leaked += sparsity_terms(&disabled, &cfg).values().filter(|v| **v != 0.0).count();
        leaked += sparsity_terms(&gates, &cfg).keys().filter(|g| !enabled.contains(g)).count();
    }
    check(worst <= 1e-12 && leaked == 0, format!("1000 configs over 15 subsets, worst |diff| {worst:.2e}, disabled non-zero terms {leaked}"))
}

/// Removing `k` filters of `conv` (followed by batchnorm, ReLU and a conv
/// `next` at the same resolution) removes, per filter, its kernel and bias,
/// the batchnorm pair and one input slice of `next`.
fn closed_form(c_in: u64, kernel: u64, hw: u64, next_filters: u64, next_kernel: u64, k: u64) -> (u64, u64) {
    let params = k * (c_in * kernel * kernel + 1) + 2 * k + k * next_filters * next_kernel * next_kernel;
    let flops = k * hw * ((2 * c_in * kernel * kernel + 1) + 2 + 1 + 2 * next_filters * next_kernel * next_kernel);
    (params, flops)
}

fn a6_costs() -> Outcome {
    let mut specs = Vec::new();
    for spec in catalog::builtin_specs() {
        specs.push(common::scaffolded(&spec));
        specs.push(insert_shortcuts(&spec, Granularity::Layer, MismatchPolicy::Adapt).unwrap());
        specs.push(spec);
    }
    let mismatched: Vec<String> = specs.iter().filter(|s| cost_pair(s).0 != cost_pair(s).1).map(|s| s.name.clone()).collect();

    let spec = builtin("mini_vgg8").unwrap();
    let table = validate(&spec).unwrap();
    let weights = init_weights(&spec, &table, 0);
    let (p0, f0) = (count_params(&spec).unwrap(), count_flops(&spec).unwrap());
    let mut cases = 0;
    let mut wrong = Vec::new();
    for (conv, next) in [("conv1_1", "conv1_2"), ("conv2_1", "conv2_2"), ("conv3_1", "conv3_2")] {
        let (NodeKind::Conv { filters, kernel, .. }, NodeKind::Conv { filters: nf, kernel: nk, .. }) =
            (&spec.node(conv).unwrap().kind, &spec.node(next).unwrap().kind)
        else {
            return Err(format!("{conv} or {next} is not a convolution"));
        };
        let c_in = table.shape(spec.inputs_of(conv)[0]).unwrap()[0] as u64;
        let out = table.shape(conv).unwrap();
        for k in 1..*filters as u64 {
            let expect = closed_form(c_in, *kernel as u64, (out[1] * out[2]) as u64, *nf as u64, *nk as u64, k);
            let mut plan = PruningPlan::default();
            plan.filters.insert(conv.into(), (0..k as usize).collect());
            let (pruned, _) = apply_plan(&spec, &weights, &plan, false).unwrap();
            let got = (p0 - count_params(&pruned).unwrap(), f0 - count_flops(&pruned).unwrap());
            cases += 1;
            if got != expect {
                wrong.push(format!("{conv} k={k}: {got:?} vs {expect:?}"));
            }
        }
    }
    check(
        mismatched.is_empty() && wrong.is_empty(),
        format!("{} specs agree with the oracle (mismatches: {mismatched:?}); {cases} channel removals match closed forms (wrong: {wrong:?})", specs.len()),
    )
}

fn a7_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(config_path("mini_resnet_synthetic.json")).unwrap();
    cfg.granularities = BTreeSet::from([Granularity::Filter, Granularity::Branch]);
    cfg.seed = 4;
    let mut bytes = Vec::new();
    for run in ["first", "second"] {
        cfg.out_dir = Some(dir.path().join(run));
        prune_pipeline(&cfg).map_err(|e| e.to_string())?;
        let read = |f: &str| std::fs::read(dir.path().join(run).join(f)).unwrap();
        bytes.push((read("report.json"), read("plan.json")));
    }
    check(bytes[0] == bytes[1], format!("report.json {} bytes, plan.json {} bytes, identical: {}", bytes[0].0.len(), bytes[0].1.len(), bytes[0] == bytes[1]))
}

fn a8_vgg16() -> Outcome {
    let vgg = builtin("vgg16_custom").unwrap();
    let (skip, skipped) = insert_shortcuts_with_report(&vgg, Granularity::Layer, MismatchPolicy::Skip).map_err(|e| e.to_string())?;
    let (adapt, adapted) = insert_shortcuts_with_report(&vgg, Granularity::Layer, MismatchPolicy::Adapt).map_err(|e| e.to_string())?;
    let valid = validate(&skip).is_ok() && validate(&adapt).is_ok();
    check(
        skipped.skipped.len() == 4 && adapted.skipped.is_empty() && valid,
        format!("skip policy skips {} sites {:?}, adapt skips {}, both valid: {valid}", skipped.skipped.len(), skipped.skipped, adapted.skipped.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("A1", a1_oracles),
        ("A2", a2_equivalence),
        ("A3", a3_mnist),
        ("A4", a4_branches),
        ("A5", a5_loss),
        ("A6", a6_costs),
        ("A7", a7_determinism),
        ("A8", a8_vgg16),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{id} PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
