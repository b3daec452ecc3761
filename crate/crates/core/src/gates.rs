//! Learnable scaling-factor gates and their sparsity penalty.
//!
//! A gate multiplies the output of one structure. Filter gates hold one
//! factor per output channel of a conv stack; layer, branch and block gates
//! hold a single factor scaling a structure's contribution to its residual
//! sum. Driving a factor to zero mimics removing the structure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::spec::structure::Structure;
use crate::spec::ModelSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Filter,
    Layer,
    Branch,
    Block,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [Granularity::Filter, Granularity::Layer, Granularity::Branch, Granularity::Block];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Filter => "filter",
            Granularity::Layer => "layer",
            Granularity::Branch => "branch",
            Granularity::Block => "block",
        }
    }

    pub fn is_structural(self) -> bool {
        self != Granularity::Filter
    }

    /// Parses a comma-separated list such as `filter,layer`.
    pub fn parse_set(csv: &str) -> Result<BTreeSet<Granularity>> {
        let set = csv
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<BTreeSet<_>>>()?;
        if set.is_empty() {
            return Err(Error::Config("no granularities given".into()));
        }
        Ok(set)
    }

    /// The 15 nonempty combinations of the four granularities.
    pub fn all_subsets() -> Vec<BTreeSet<Granularity>> {
        (1u8..16)
            .map(|mask| Self::ALL.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, g)| *g).collect())
            .collect()
    }

    pub fn join(set: &BTreeSet<Granularity>) -> String {
        set.iter().map(|g| g.name()).collect::<Vec<_>>().join(",")
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown granularity '{s}' (expected filter, layer, branch or block)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GateNoise {
    #[default]
    None,
    /// Additive noise drawn from U(-amplitude, amplitude) on every training pass.
    Uniform { amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub id: String,
    pub granularity: Granularity,
    pub phi: Vec<f64>,
    /// Conv id for filter gates, structure id otherwise.
    pub attachment: String,
    #[serde(default)]
    pub noise: GateNoise,
    /// Pre-binarization values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<Vec<f64>>,
}

impl Gate {
    pub fn new(granularity: Granularity, attachment: impl Into<String>, phi: Vec<f64>) -> Self {
        let attachment = attachment.into();
        Self { id: format!("{granularity}:{attachment}"), granularity, phi, attachment, noise: GateNoise::None, audit: None }
    }

    /// Additive noise for one training pass, or `None` when the gate is
    /// deterministic in `mode`.
    pub fn draw_noise(&self, mode: Mode, rng: &mut impl Rng) -> Option<Vec<f64>> {
        match (mode, self.noise) {
            (Mode::Train, GateNoise::Uniform { amplitude }) if amplitude > 0.0 => {
                Some((0..self.phi.len()).map(|_| rng.gen_range(-amplitude..amplitude)).collect())
            }
            _ => None,
        }
    }

    pub fn value(&self, mode: Mode, rng: &mut impl Rng) -> Vec<f64> {
        let noise = self.draw_noise(mode, rng);
        self.phi
            .iter()
            .enumerate()
            .map(|(i, p)| (p + noise.as_ref().map_or(0.0, |n| n[i])).clamp(0.0, 1.0))
            .collect()
    }

    /// Projects phi back onto [0, 1].
    pub fn project(&mut self) {
        self.phi.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    }

    pub fn mean_abs(&self) -> f64 {
        self.phi.iter().map(|p| p.abs()).sum::<f64>() / self.phi.len() as f64
    }
}

/// Channel `c` of `x` times `values[c]`.
pub fn apply_filter_gate(x: &Tensor, values: &[f64]) -> Result<Tensor> {
    let (n, c, s) = x.channel_layout("apply_filter_gate")?;
    if values.len() != c {
        return Err(Error::shape("apply_filter_gate", x.shape(), &[values.len()]));
    }
    let mut out = x.clone();
    for b in 0..n {
        for (ch, g) in values.iter().enumerate() {
            out.data_mut()[(b * c + ch) * s..(b * c + ch + 1) * s].iter_mut().for_each(|v| *v *= g);
        }
    }
    Ok(out)
}

/// `structure_output * value + shortcut_input`.
pub fn apply_structure_gate(structure_output: &Tensor, value: f64, shortcut_input: &Tensor) -> Result<Tensor> {
    if structure_output.shape() != shortcut_input.shape() {
        return Err(Error::shape("apply_structure_gate", structure_output.shape(), shortcut_input.shape()));
    }
    let data = structure_output.data().iter().zip(shortcut_input.data()).map(|(o, s)| o * value + s).collect();
    Tensor::new(structure_output.shape().to_vec(), data)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum WeightRule {
    /// 1/len(phi) for filter gates, 1/(number of gates of the granularity)
    /// for structure gates.
    #[default]
    OneOverCount,
    /// Per-gate weights keyed by gate id; unlisted gates weigh 1.
    Explicit { weights: BTreeMap<String, f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub lambda_filter: f64,
    pub lambda_layer: f64,
    pub lambda_branch: f64,
    pub lambda_block: f64,
    #[serde(default)]
    pub weight_rule: WeightRule,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl SparsityConfig {
    pub fn uniform(lambda: f64) -> Self {
        Self { lambda_filter: lambda, lambda_layer: lambda, lambda_branch: lambda, lambda_block: lambda, weight_rule: WeightRule::OneOverCount }
    }

    pub fn lambda(&self, g: Granularity) -> f64 {
        match g {
            Granularity::Filter => self.lambda_filter,
            Granularity::Layer => self.lambda_layer,
            Granularity::Branch => self.lambda_branch,
            Granularity::Block => self.lambda_block,
        }
    }

    pub fn set_lambda(&mut self, g: Granularity, value: f64) {
        match g {
            Granularity::Filter => self.lambda_filter = value,
            Granularity::Layer => self.lambda_layer = value,
            Granularity::Branch => self.lambda_branch = value,
            Granularity::Block => self.lambda_block = value,
        }
    }

    /// Zeroes the lambdas of granularities outside `enabled`.
    pub fn restricted_to(&self, enabled: &BTreeSet<Granularity>) -> Self {
        let mut out = self.clone();
        for g in Granularity::ALL {
            if !enabled.contains(&g) {
                out.set_lambda(g, 0.0);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for g in Granularity::ALL {
            let l = self.lambda(g);
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("lambda for {g} must be a nonnegative number, got {l}")));
            }
        }
        Ok(())
    }
}

/// Weight of `gate` in its granularity's L1 term.
pub fn gate_weight(gate: &Gate, gates: &[Gate], config: &SparsityConfig) -> f64 {
    match &config.weight_rule {
        WeightRule::OneOverCount if gate.granularity == Granularity::Filter => 1.0 / gate.phi.len() as f64,
        WeightRule::OneOverCount => 1.0 / gates.iter().filter(|g| g.granularity == gate.granularity).count() as f64,
        WeightRule::Explicit { weights } => weights.get(&gate.id).copied().unwrap_or(1.0),
    }
}

/// The penalty split by granularity; disabled granularities are absent.
pub fn sparsity_terms(gates: &[Gate], config: &SparsityConfig) -> BTreeMap<Granularity, f64> {
    let mut terms = BTreeMap::new();
    for g in Granularity::ALL {
        let lambda = config.lambda(g);
        if lambda == 0.0 {
            continue;
        }
        let sum: f64 = gates
            .iter()
            .filter(|gate| gate.granularity == g)
            .map(|gate| gate_weight(gate, gates, config) * gate.phi.iter().map(|p| p.abs()).sum::<f64>())
            .sum();
        terms.insert(g, lambda * sum);
    }
    terms
}

pub fn sparsity_loss(gates: &[Gate], config: &SparsityConfig) -> f64 {
    sparsity_terms(gates, config).values().sum()
}

/// Records the sparsity penalty on `tape`, given each gate's phi leaf.
pub fn sparsity_loss_on_tape(tape: &mut Tape, gates: &[Gate], phis: &[Var], config: &SparsityConfig) -> Result<Var> {
    if gates.len() != phis.len() {
        return Err(Error::invalid("sparsity_loss", "one phi variable per gate required"));
    }
    let terms: Vec<Var> = gates
        .iter()
        .zip(phis)
        .filter_map(|(gate, &phi)| {
            let lambda = config.lambda(gate.granularity);
            (lambda != 0.0).then(|| tape.weighted_abs_sum(phi, lambda * gate_weight(gate, gates, config)))
        })
        .collect();
    tape.scalar_sum(&terms)
}

/// One gate per attachment point of every enabled granularity, phi drawn
/// from U(0, 1).
pub fn init_gates(spec: &ModelSpec, structure: &Structure, enabled: &BTreeSet<Granularity>, seed: u64) -> Vec<Gate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gates = Vec::new();
    for &g in enabled {
        let points = structure.attachments(spec, g);
        if points.is_empty() {
            log::warn!("{g} gates enabled but model '{}' has no {g} attachment points", spec.name);
        }
        for (attachment, len) in points {
            let phi = (0..len).map(|_| rng.gen::<f64>()).collect();
            gates.push(Gate::new(g, attachment, phi));
        }
    }
    gates
}

pub type Thresholds = BTreeMap<Granularity, f64>;

/// Snaps phi to {0, 1}: entries below the granularity's threshold become 0.
/// Gates whose granularity has no threshold are left as they are.
pub fn binarize_gates(gates: &[Gate], thresholds: &Thresholds) -> Result<Vec<Gate>> {
    if let Some((g, t)) = thresholds.iter().find(|(_, t)| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid("binarize_gates", format!("threshold {t} for {g} outside [0, 1]")));
    }
    Ok(gates
        .iter()
        .map(|gate| {
            let Some(&t) = thresholds.get(&gate.granularity) else {
                return gate.clone();
            };
            let mut out = gate.clone();
            out.audit.get_or_insert_with(|| gate.phi.clone());
            out.phi = gate.phi.iter().map(|&p| if p < t { 0.0 } else { 1.0 }).collect();
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_subsets() {
        let subsets = Granularity::all_subsets();
        assert_eq!(subsets.len(), 15);
        assert!(subsets.iter().all(|s| !s.is_empty()));
        assert_eq!(subsets.iter().collect::<BTreeSet<_>>().len(), 15);
    }

    #[test]
    fn parse_rejects_unknown_names() {
        let err = Granularity::parse_set("filter,bogus").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn eval_value_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Gate::new(Granularity::Layer, "c", vec![1.2]);
        assert_eq!(g.value(Mode::Eval, &mut rng), vec![1.0]);
        let g = Gate::new(Granularity::Layer, "c", vec![0.5]);
        assert_eq!(g.value(Mode::Train, &mut rng), vec![0.5]);
    }

    #[test]
    fn noisy_value_is_seeded_and_bounded() {
        let mut g = Gate::new(Granularity::Layer, "c", vec![0.5]);
        g.noise = GateNoise::Uniform { amplitude: 0.1 };
        let a = g.value(Mode::Train, &mut ChaCha8Rng::seed_from_u64(3));
        let b = g.value(Mode::Train, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!((0.4..=0.6).contains(&a[0]));
    }

    #[test]
    fn filter_weight_normalizes_by_length() {
        let gates = vec![Gate::new(Granularity::Filter, "c", vec![1.0; 4])];
        let cfg = SparsityConfig { lambda_filter: 1.0, ..SparsityConfig::uniform(0.0) };
        assert_eq!(sparsity_loss(&gates, &cfg), 1.0);
        assert_eq!(sparsity_loss(&gates, &SparsityConfig::uniform(0.0)), 0.0);
    }

    #[test]
    fn binarize_examples() {
        let gates = vec![Gate::new(Granularity::Filter, "c", vec![0.02, 0.9])];
        let t = Thresholds::from([(Granularity::Filter, 0.1)]);
        let b = binarize_gates(&gates, &t).unwrap();
        assert_eq!(b[0].phi, vec![0.0, 1.0]);
        assert_eq!(b[0].audit.as_deref(), Some(&[0.02, 0.9][..]));
        assert_eq!(binarize_gates(&b, &t).unwrap(), b);
        let zero = binarize_gates(&gates, &Thresholds::from([(Granularity::Filter, 0.0)])).unwrap();
        assert_eq!(zero[0].phi, vec![1.0, 1.0]);
    }
}
