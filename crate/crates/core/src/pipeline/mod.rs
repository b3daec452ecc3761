//! Training, threshold search and the end-to-end prune protocol:
//! train with sparsity pressure, search thresholds, binarize, fine-tune with
//! binarized gates, cut, fine-tune the pruned network, report.

pub mod checkpoint;
pub mod config;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use config::{DataSource, DatasetConfig, ExperimentConfig, SearchPolicy};

use crate::data::{self, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::gates::{binarize_gates, init_gates, sparsity_loss, sparsity_loss_on_tape, Gate, Granularity, Mode, SparsityConfig, Thresholds};
use crate::metrics::{build_report, CompressionReport, ReportMeta};
use crate::network::{argmax, l2_penalty, Network};
use crate::optim::Sgd;
use crate::spec::shortcuts::insert_shortcuts;
use crate::spec::structure::analyze;
use crate::spec::{ModelSpec, NodeKind};
use crate::surgery::{apply_plan, plan_from_gates, verify_equivalence, PruningPlan};
use crate::tensor::Tensor;

/// Order in which thresholds are searched.
pub const SEARCH_ORDER: [Granularity; 4] = [Granularity::Block, Granularity::Branch, Granularity::Layer, Granularity::Filter];

/// Logit tolerance for the binarized-gates vs pruned-network check.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean training loss over the epoch's batches, penalties included.
    pub loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    /// Mean |phi| per granularity.
    pub mean_phi: BTreeMap<Granularity, f64>,
}

pub const METRICS_HEADER: &str = "phase,epoch,learning_rate,loss,train_accuracy,eval_accuracy,mean_phi_filter,mean_phi_layer,mean_phi_branch,mean_phi_block";

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in history {
        let _ = write!(out, "{},{},{},{:.6},{:.6},{}", r.phase, r.epoch, r.learning_rate, r.loss, r.train_accuracy, opt(r.eval_accuracy));
        for g in Granularity::ALL {
            let _ = write!(out, ",{}", opt(r.mean_phi.get(&g).copied()));
        }
        out.push('\n');
    }
    out
}

/// `data_loss + sparsity + l2`; granularities with a zero lambda add nothing.
pub fn combined_loss(data_loss: f64, gates: &[Gate], config: &SparsityConfig, l2: f64) -> f64 {
    data_loss + sparsity_loss(gates, config) + l2
}

pub fn mean_phi(gates: &[Gate]) -> BTreeMap<Granularity, f64> {
    let mut acc: BTreeMap<Granularity, (f64, usize)> = BTreeMap::new();
    for g in gates {
        let e = acc.entry(g.granularity).or_default();
        e.0 += g.phi.iter().map(|p| p.abs()).sum::<f64>();
        e.1 += g.phi.len();
    }
    acc.into_iter().map(|(g, (s, n))| (g, s / n.max(1) as f64)).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub phase: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub l2: f64,
    pub sparsity: SparsityConfig,
    /// Update gate phis; otherwise gates stay fixed.
    pub train_gates: bool,
    /// Parameter keys left untouched.
    pub frozen: BTreeSet<String>,
    pub seed: u64,
}

impl TrainOptions {
    pub fn new(phase: &str, epochs: usize, seed: u64) -> Self {
        Self {
            phase: phase.into(),
            epochs,
            batch_size: 64,
            learning_rate: 0.01,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            momentum: 0.9,
            l2: 0.0,
            sparsity: SparsityConfig::uniform(0.0),
            train_gates: false,
            frozen: BTreeSet::new(),
            seed,
        }
    }

    fn from_config(cfg: &ExperimentConfig, phase: &str, epochs: usize, seed: u64) -> Self {
        Self {
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            lr_milestones: cfg.lr_milestones.clone(),
            lr_decay: cfg.lr_decay,
            momentum: cfg.momentum,
            l2: cfg.l2,
            ..Self::new(phase, epochs, seed)
        }
    }

    /// Base rate times `lr_decay` for every milestone fraction already reached.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch as f64 >= m * self.epochs as f64).count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub velocity: BTreeMap<String, Tensor>,
}

fn gate_key(gate: &Gate) -> String {
    format!("gate/{}", gate.id)
}

/// Minibatch SGD over `train_set`, seeded shuffling, train-mode forward,
/// optional sparsity pressure on the gates and projection of phi onto
/// [0, 1] after every step. `on_epoch` sees each record as it is produced.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    opts: &TrainOptions,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_set.sample_shape() != net.spec.input_shape.as_slice() {
        return Err(Error::shape("train", &net.spec.input_shape, train_set.sample_shape()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    net.reseed(opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(2);
    let mut sgd = Sgd::new(opts.momentum);
    let sparse = opts.train_gates && Granularity::ALL.iter().any(|&g| opts.sparsity.lambda(g) != 0.0);
    let gate_index: HashMap<String, usize> = net.gates.iter().enumerate().map(|(i, g)| (gate_key(g), i)).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..opts.epochs {
        let lr = opts.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut correct) = (0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            let x = train_set.images.select(0, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let fwd = net.forward(&x, Mode::Train)?;
            let mut tape = fwd.tape;
            let k = net.spec.classes;
            correct += tape.value(fwd.logits).data().chunks(k).zip(&y).filter(|(row, &l)| argmax(row) == l).count();
            let data_loss = tape.cross_entropy(fwd.logits, &y)?;
            let loss = if sparse {
                let s = sparsity_loss_on_tape(&mut tape, &net.gates, &fwd.gate_phis, &opts.sparsity)?;
                tape.scalar_sum(&[data_loss, s])?
            } else {
                data_loss
            };
            let value = tape.value(loss).item() + l2_penalty(&net.weights.params, opts.l2);
            if !value.is_finite() {
                return Err(Error::Numerical(format!("{}: loss is {value} at epoch {epoch}, batch {b}", opts.phase)));
            }
            let mut grads = tape.backward(loss)?;

            let mut step_params = BTreeMap::new();
            let mut step_grads = BTreeMap::new();
            for (key, &var) in &fwd.params {
                if opts.frozen.contains(key) {
                    continue;
                }
                let w = net.weights.params.remove(key).expect("forward only reads known parameters");
                let mut g = grads.take(var).unwrap_or_else(|| w.zeros_like());
                if opts.l2 != 0.0 && key.ends_with(".weight") {
                    g.data_mut().iter_mut().zip(w.data()).for_each(|(gi, wi)| *gi += 2.0 * opts.l2 * wi);
                }
                step_grads.insert(key.clone(), g);
                step_params.insert(key.clone(), w);
            }
            if opts.train_gates {
                for (gate, &var) in net.gates.iter().zip(&fwd.gate_phis) {
                    let phi = Tensor::new(vec![gate.phi.len()], gate.phi.clone())?;
                    step_grads.insert(gate_key(gate), grads.take(var).unwrap_or_else(|| phi.zeros_like()));
                    step_params.insert(gate_key(gate), phi);
                }
            }
            let stepped = sgd.step(&mut step_params, &step_grads, lr);
            for (key, t) in step_params {
                match gate_index.get(&key) {
                    Some(&i) => {
                        net.gates[i].phi = t.into_data();
                        net.gates[i].project();
                    }
                    None => drop(net.weights.params.insert(key, t)),
                }
            }
            stepped?;
            loss_sum += value;
            batches += 1;
        }
        let eval_accuracy = match eval_set {
            Some(ds) if !ds.is_empty() => Some(net.accuracy(&ds.images, &ds.labels)?),
            _ => None,
        };
        let record = EpochRecord {
            phase: opts.phase.clone(),
            epoch: epoch + 1,
            learning_rate: lr,
            loss: loss_sum / batches.max(1) as f64,
            train_accuracy: correct as f64 / train_set.len().max(1) as f64,
            eval_accuracy,
            mean_phi: mean_phi(&net.gates),
        };
        log::info!(
            "{} epoch {}/{}: loss {:.4}, train acc {:.4}, eval acc {}",
            record.phase,
            record.epoch,
            opts.epochs,
            record.loss,
            record.train_accuracy,
            eval_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        );
        on_epoch(&record)?;
        history.push(record);
    }
    Ok(TrainOutcome { history, velocity: sgd.velocity().clone() })
}

/// Coordinate-wise search (block, branch, layer, filter) for the largest
/// grid threshold whose binarization costs at most `policy.max_drop`
/// percentage points of accuracy on `eval` relative to the continuous
/// gates. Earlier granularities stay binarized at their chosen threshold
/// while later ones are searched. A granularity where nothing passes gets
/// threshold 0 and a warning.
pub fn threshold_search(net: &Network, eval: &Dataset, granularities: &BTreeSet<Granularity>, policy: &SearchPolicy) -> Result<Thresholds> {
    if eval.is_empty() {
        return Err(Error::invalid("threshold_search", "evaluation set is empty"));
    }
    let mut probe = net.clone();
    let reference = probe.accuracy(&eval.images, &eval.labels)?;
    let grid = policy.grid();
    let mut chosen = Thresholds::new();
    for g in SEARCH_ORDER.into_iter().filter(|g| granularities.contains(g)) {
        if !net.gates.iter().any(|gate| gate.granularity == g) {
            log::info!("no {g} gates, skipping its threshold search");
            continue;
        }
        let mut cache: HashMap<Vec<bool>, f64> = HashMap::new();
        let mut found = None;
        for &t in grid.iter().rev() {
            let mut trial = chosen.clone();
            trial.insert(g, t);
            let gates = binarize_gates(&net.gates, &trial)?;
            let pattern: Vec<bool> = gates.iter().filter(|x| x.granularity == g).flat_map(|x| x.phi.iter().map(|&p| p > 0.5)).collect();
            let acc = match cache.get(&pattern) {
                Some(&a) => a,
                None => {
                    probe.gates = gates;
                    let a = probe.accuracy(&eval.images, &eval.labels)?;
                    cache.insert(pattern, a);
                    a
                }
            };
            if 100.0 * (reference - acc) <= policy.max_drop + 1e-9 {
                found = Some(t);
                break;
            }
        }
        let t = found.unwrap_or_else(|| {
            log::warn!("no {g} threshold keeps the accuracy drop within {} points; using 0", policy.max_drop);
            0.0
        });
        log::info!("{g} threshold {t} ({} patterns evaluated)", cache.len());
        chosen.insert(g, t);
    }
    Ok(chosen)
}

/// Train, validation and test splits after subsetting and normalization.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub normalization: Option<Normalization>,
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Loads and splits the configured dataset for a model with `spec`'s input.
pub fn prepare_data(cfg: &ExperimentConfig, spec: &ModelSpec) -> Result<Splits> {
    let d = &cfg.dataset;
    let seed = sub_seed(cfg.seed, 1);
    let (mut full, mut test) = match &d.source {
        DataSource::Idx { images, labels, test_images, test_labels } => {
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(data::load_idx(i, l)?),
                (None, None) => None,
                _ => return Err(Error::Config("test_images and test_labels must be given together".into())),
            };
            (data::load_idx(images, labels)?, test)
        }
        DataSource::Cifar { train, test } => {
            (data::load_cifar_batches(train)?, if test.is_empty() { None } else { Some(data::load_cifar_batches(test)?) })
        }
        DataSource::Synthetic { n_per_class } => (data::synthetic_planted(&spec.input_shape, *n_per_class, seed)?, None),
    };
    if let Some(name) = &d.name {
        full.name = name.clone();
        if let Some(t) = &mut test {
            t.name = name.clone();
        }
    }
    if let Some(n) = d.subset_per_class {
        full = data::subset(&full, n, sub_seed(seed, 2))?;
    }
    let test = match test {
        Some(t) => t,
        None => {
            let (train, test) = data::stratified_split(&full, d.test_fraction, sub_seed(seed, 3))?;
            full = train;
            test
        }
    };
    let (train, validation) = if d.validation_fraction > 0.0 {
        data::stratified_split(&full, d.validation_fraction, sub_seed(seed, 4))?
    } else {
        (full, test.clone())
    };
    let mut splits = Splits { train, validation, test, normalization: None };
    if d.normalize {
        if let Some(norm) = Normalization::for_dataset(&splits.train.name) {
            for ds in [&mut splits.train, &mut splits.validation, &mut splits.test] {
                norm.normalize(&mut ds.images)?;
            }
            splits.normalization = Some(norm);
        }
    }
    for ds in [&splits.train, &splits.validation, &splits.test] {
        if ds.sample_shape() != spec.input_shape.as_slice() {
            return Err(Error::Data(format!("samples are {:?} but model '{}' expects {:?}", ds.sample_shape(), spec.name, spec.input_shape)));
        }
        if ds.classes > spec.classes {
            return Err(Error::Data(format!("{} classes but model '{}' has {} outputs", ds.classes, spec.name, spec.classes)));
        }
    }
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(Error::Data("empty train or test split".into()));
    }
    Ok(splits)
}

/// Keys of conv and adapter parameters, frozen by `freeze_except_bn_dense`.
pub fn conv_parameter_keys(spec: &ModelSpec) -> BTreeSet<String> {
    spec.nodes
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::Conv { .. } | NodeKind::Adapter { .. }))
        .flat_map(|n| [format!("{}.weight", n.id), format!("{}.bias", n.id)])
        .collect()
}

/// The model with shortcuts inserted for every enabled structural granularity.
pub fn scaffold(spec: &ModelSpec, cfg: &ExperimentConfig) -> Result<ModelSpec> {
    let mut out = spec.clone();
    for &g in cfg.granularities.iter().filter(|g| g.is_structural()) {
        out = insert_shortcuts(&out, g, cfg.mismatch_policy)?;
    }
    Ok(out)
}

/// Fresh gates on every attachment point of the enabled granularities and
/// fresh weights, all from the config seed.
pub fn gated_network(cfg: &ExperimentConfig, gated_spec: &ModelSpec) -> Result<Network> {
    let structure = analyze(gated_spec)?;
    let mut gates = init_gates(gated_spec, &structure, &cfg.granularities, sub_seed(cfg.seed, 5));
    gates.iter_mut().for_each(|g| g.noise = cfg.gate_noise);
    Network::instantiate(gated_spec, gates, cfg.seed)
}

fn gated_train_options(cfg: &ExperimentConfig) -> TrainOptions {
    let mut opts = TrainOptions::from_config(cfg, "train", cfg.epochs, sub_seed(cfg.seed, 6));
    opts.sparsity = cfg.sparsity.restricted_to(&cfg.granularities);
    opts.train_gates = true;
    opts
}

/// The sparsity-training phase alone: writes `gated.ckpt` and `metrics.csv`
/// when `cfg.out_dir` is set.
pub fn train_gated(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    }
    let out = Artifacts { dir: cfg.out_dir.clone() };
    let base_spec = cfg.resolve_spec().map_err(|e| e.in_stage("spec"))?;
    let splits = prepare_data(cfg, &base_spec).map_err(|e| e.in_stage("data"))?;
    let gated_spec = scaffold(&base_spec, cfg).map_err(|e| e.in_stage("shortcuts"))?;
    let mut net = gated_network(cfg, &gated_spec).map_err(|e| e.in_stage("instantiate"))?;
    let mut history = Vec::new();
    let res = train(&mut net, &splits.train, Some(&splits.validation), &gated_train_options(cfg), &mut |r| {
        history.push(r.clone());
        out.write("metrics.csv", metrics_csv(&history))
    })
    .map_err(|e| e.in_stage("train"))?;
    let ckpt = Checkpoint::capture(&net, res.velocity, cfg.epochs, res.history);
    out.checkpoint("gated.ckpt", &ckpt)?;
    Ok(ckpt)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: CompressionReport,
    pub plan: PruningPlan,
    pub thresholds: Thresholds,
    pub pruned: Checkpoint,
    pub history: Vec<EpochRecord>,
}

struct Artifacts {
    dir: Option<PathBuf>,
}

impl Artifacts {
    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        if let Some(dir) = &self.dir {
            fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }

    fn checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        if let Some(dir) = &self.dir {
            ckpt.save(dir.join(name))?;
        }
        Ok(())
    }
}

/// Runs the full protocol; artifacts go to `cfg.out_dir` when set.
pub fn prune_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    }
    let out = Artifacts { dir: cfg.out_dir.clone() };
    out.write("config.json", cfg.to_json()?)?;

    let base_spec = cfg.resolve_spec().map_err(|e| e.in_stage("spec"))?;
    let splits = prepare_data(cfg, &base_spec).map_err(|e| e.in_stage("data"))?;
    let gated_spec = scaffold(&base_spec, cfg).map_err(|e| e.in_stage("shortcuts"))?;
    let (weight_seed, train_seed) = (cfg.seed, sub_seed(cfg.seed, 6));
    let mut net = gated_network(cfg, &gated_spec).map_err(|e| e.in_stage("instantiate"))?;

    let mut history: Vec<EpochRecord> = Vec::new();
    let phase_opts = |phase: &str, epochs: usize, spec: &ModelSpec, fine_tune: bool| {
        let mut o = TrainOptions::from_config(cfg, phase, epochs, train_seed);
        if fine_tune && cfg.freeze_except_bn_dense {
            o.frozen = conv_parameter_keys(spec);
        }
        o
    };
    let phases = [("", cfg.epochs, false), ("binarized_fine_tune", cfg.binarized_fine_tune_epochs, true), ("fine_tune", cfg.fine_tune_epochs, true)];
    let val = Some(&splits.validation);

    let baseline_accuracy = if cfg.train_baseline {
        let mut base = Network::instantiate(&base_spec, Vec::new(), weight_seed).map_err(|e| e.in_stage("baseline"))?;
        let mut velocity = BTreeMap::new();
        for (name, epochs, fine_tune) in phases {
            let phase = if name.is_empty() { "baseline".to_string() } else { format!("baseline_{name}") };
            let opts = phase_opts(&phase, epochs, &base_spec, fine_tune);
            let res = train(&mut base, &splits.train, val, &opts, &mut |_| Ok(())).map_err(|e| e.in_stage("baseline"))?;
            history.extend(res.history);
            velocity = res.velocity;
            out.write("metrics.csv", metrics_csv(&history))?;
        }
        out.checkpoint("baseline.ckpt", &Checkpoint::capture(&base, velocity, cfg.epochs, history.clone()))?;
        Some(base.accuracy(&splits.test.images, &splits.test.labels).map_err(|e| e.in_stage("baseline"))?)
    } else {
        None
    };

    let opts = gated_train_options(cfg);
    let res = train(&mut net, &splits.train, val, &opts, &mut |_| Ok(())).map_err(|e| e.in_stage("train"))?;
    history.extend(res.history);
    out.write("metrics.csv", metrics_csv(&history))?;
    out.checkpoint("gated.ckpt", &Checkpoint::capture(&net, res.velocity, cfg.epochs, history.clone()))?;
    let gated_accuracy = net.accuracy(&splits.test.images, &splits.test.labels).map_err(|e| e.in_stage("train"))?;

    let thresholds = match &cfg.threshold_search.forced {
        Some(forced) => forced.iter().filter(|(g, _)| cfg.granularities.contains(g)).map(|(&g, &t)| (g, t)).collect(),
        None => threshold_search(&net, &splits.validation, &cfg.granularities, &cfg.threshold_search).map_err(|e| e.in_stage("threshold_search"))?,
    };
    net.gates = binarize_gates(&net.gates, &thresholds).map_err(|e| e.in_stage("binarize"))?;
    let (_, epochs, _) = phases[1];
    let opts = phase_opts("binarized_fine_tune", epochs, &gated_spec, true);
    let res = train(&mut net, &splits.train, val, &opts, &mut |_| Ok(())).map_err(|e| e.in_stage("binarized_fine_tune"))?;
    history.extend(res.history);
    out.write("metrics.csv", metrics_csv(&history))?;
    out.checkpoint("binarized.ckpt", &Checkpoint::capture(&net, res.velocity, cfg.epochs + epochs, history.clone()))?;

    let plan = plan_from_gates(&net.spec, &net.gates, &thresholds).map_err(|e| e.in_stage("plan"))?;
    out.write("plan.json", plan.to_json()?)?;
    let (pruned_spec, pruned_weights) = apply_plan(&net.spec, &net.weights, &plan, cfg.keep_scaffold).map_err(|e| e.in_stage("surgery"))?;
    out.write("pruned_spec.json", pruned_spec.to_json()?)?;
    let mut pruned = Network::from_parts(&pruned_spec, pruned_weights, Vec::new(), train_seed).map_err(|e| e.in_stage("surgery"))?;
    let equivalence = if cfg.keep_scaffold {
        let diff = verify_equivalence(&mut net, &mut pruned, 16, sub_seed(cfg.seed, 7)).map_err(|e| e.in_stage("verify"))?;
        if diff > EQUIVALENCE_TOLERANCE {
            log::warn!("pruned network deviates from the binarized gated network by {diff:e}");
        }
        Some(diff)
    } else {
        None
    };

    let opts = phase_opts("fine_tune", cfg.fine_tune_epochs, &pruned_spec, true);
    let res = train(&mut pruned, &splits.train, val, &opts, &mut |_| Ok(())).map_err(|e| e.in_stage("fine_tune"))?;
    history.extend(res.history);
    out.write("metrics.csv", metrics_csv(&history))?;
    let total_epochs = cfg.epochs + cfg.binarized_fine_tune_epochs + cfg.fine_tune_epochs;
    let pruned_ckpt = Checkpoint::capture(&pruned, res.velocity, total_epochs, history.clone());
    out.checkpoint("pruned.ckpt", &pruned_ckpt)?;
    let pruned_accuracy = pruned.accuracy(&splits.test.images, &splits.test.labels).map_err(|e| e.in_stage("evaluate"))?;

    let mut removed_structures = BTreeMap::new();
    for g in [Granularity::Layer, Granularity::Branch, Granularity::Block] {
        if !plan.structures(g).is_empty() {
            removed_structures.insert(g, plan.structures(g).iter().cloned().collect());
        }
    }
    let meta = ReportMeta {
        dataset: splits.train.name.clone(),
        granularities: cfg.granularities.iter().copied().collect(),
        thresholds: thresholds.clone(),
        epochs: cfg.epochs,
        fine_tune_epochs: cfg.fine_tune_epochs,
        keep_scaffold: cfg.keep_scaffold,
        seed: cfg.seed,
        normalization: splits.normalization.as_ref().map(|n| (n.mean.clone(), n.std.clone())),
        equivalence_max_abs_diff: equivalence,
        removed_filters: plan.removed_filter_count(),
        removed_structures,
    };
    let baseline = baseline_accuracy.unwrap_or(gated_accuracy);
    let report = build_report((&base_spec, baseline), (&pruned_spec, pruned_accuracy), meta).map_err(|e| e.in_stage("report"))?;
    out.write("report.json", serde_json::to_string_pretty(&report)?)?;
    out.write("report.csv", format!("{}\n{}\n", CompressionReport::CSV_HEADER, report.csv_row()))?;
    log::info!("\n{}", report.table());
    Ok(PipelineOutcome { report, plan, thresholds, pruned: pruned_ckpt, history })
}

/// Reads `report.json` from a run directory (or the file itself).
pub fn load_report(path: &Path) -> Result<CompressionReport> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
    Ok(serde_json::from_str(&text)?)
}
