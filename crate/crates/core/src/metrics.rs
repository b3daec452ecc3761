//! Parameter and FLOP cost model, and compression reports.
//!
//! FLOPs are counted per sample with a multiply-accumulate worth two FLOPs.
//! Conv: `2*Cout*Cin*Kh*Kw*H'*W'` plus `H'*W'*Cout` for the bias. Dense:
//! `2*D*M` plus `M` for the bias. Pooling, relu and add: one per output
//! element. Batchnorm: two per element. Flatten, dropout and the input: zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gates::{Granularity, Thresholds};
use crate::spec::{validate, AdapterOp, ModelSpec, NodeKind, ShapeTable};

pub const FLOP_CONVENTION: &str = "per-sample FLOPs, one multiply-accumulate = 2 FLOPs";

fn input_shape<'a>(spec: &ModelSpec, table: &'a ShapeTable, id: &str) -> &'a [usize] {
    spec.inputs_of(id).first().and_then(|p| table.shape(p)).unwrap_or(&[])
}

/// Trainable element count per node (gates and running statistics excluded).
pub fn params_per_node(spec: &ModelSpec) -> Result<BTreeMap<String, u64>> {
    if spec.nodes.is_empty() {
        return Ok(BTreeMap::new());
    }
    let table = validate(spec)?;
    let mut out = BTreeMap::new();
    for node in &spec.nodes {
        let cin = input_shape(spec, &table, &node.id).first().copied().unwrap_or(0) as u64;
        let n = match &node.kind {
            NodeKind::Conv { filters, kernel, bias, .. } => {
                let f = *filters as u64;
                f * cin * (*kernel as u64).pow(2) + if *bias { f } else { 0 }
            }
            NodeKind::Dense { units, bias } => {
                let m = *units as u64;
                cin * m + if *bias { m } else { 0 }
            }
            NodeKind::Batchnorm => 2 * cin,
            NodeKind::Adapter { op: AdapterOp::Project(c) } => *c as u64 * cin,
            _ => 0,
        };
        out.insert(node.id.clone(), n);
    }
    Ok(out)
}

pub fn count_params(spec: &ModelSpec) -> Result<u64> {
    Ok(params_per_node(spec)?.values().sum())
}

pub fn flops_per_node(spec: &ModelSpec) -> Result<BTreeMap<String, u64>> {
    if spec.nodes.is_empty() {
        return Ok(BTreeMap::new());
    }
    let table = validate(spec)?;
    let mut out = BTreeMap::new();
    for node in &spec.nodes {
        let shape = table.shape(&node.id).unwrap();
        let elems: u64 = shape.iter().map(|&d| d as u64).product();
        let cin = input_shape(spec, &table, &node.id).first().copied().unwrap_or(0) as u64;
        let spatial: u64 = shape.iter().skip(1).map(|&d| d as u64).product();
        let n = match &node.kind {
            NodeKind::Conv { filters, kernel, bias, .. } => {
                let f = *filters as u64;
                2 * f * cin * (*kernel as u64).pow(2) * spatial + if *bias { spatial * f } else { 0 }
            }
            NodeKind::Dense { units, bias } => {
                let m = *units as u64;
                2 * cin * m + if *bias { m } else { 0 }
            }
            NodeKind::Adapter { op: AdapterOp::Project(c) } => 2 * *c as u64 * cin * spatial,
            NodeKind::Pool { .. } | NodeKind::Relu | NodeKind::Add { .. } | NodeKind::Adapter { .. } => elems,
            NodeKind::Batchnorm => 2 * elems,
            NodeKind::Input | NodeKind::Flatten | NodeKind::Dropout { .. } => 0,
        };
        out.insert(node.id.clone(), n);
    }
    Ok(out)
}

pub fn count_flops(spec: &ModelSpec) -> Result<u64> {
    Ok(flops_per_node(spec)?.values().sum())
}

/// `100 * (1 - pruned / baseline)`; zero when the baseline is zero.
pub fn reduction_pct(baseline: f64, pruned: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - pruned / baseline)
    }
}

/// Context stored alongside the numbers of a report.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub granularities: Vec<Granularity>,
    pub thresholds: Thresholds,
    pub epochs: usize,
    pub fine_tune_epochs: usize,
    pub keep_scaffold: bool,
    pub seed: u64,
    /// Per-channel mean and standard deviation applied to the inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<(Vec<f64>, Vec<f64>)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalence_max_abs_diff: Option<f64>,
    #[serde(default)]
    pub removed_filters: usize,
    #[serde(default)]
    pub removed_structures: BTreeMap<Granularity, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub model: String,
    pub flop_convention: String,
    pub baseline_accuracy: f64,
    pub pruned_accuracy: f64,
    pub baseline_params: u64,
    pub pruned_params: u64,
    pub params_reduction_pct: f64,
    pub baseline_flops: u64,
    pub pruned_flops: u64,
    pub flops_reduction_pct: f64,
    #[serde(flatten)]
    pub meta: ReportMeta,
}

pub fn build_report(baseline: (&ModelSpec, f64), pruned: (&ModelSpec, f64), meta: ReportMeta) -> Result<CompressionReport> {
    let (bp, pp) = (count_params(baseline.0)?, count_params(pruned.0)?);
    let (bf, pf) = (count_flops(baseline.0)?, count_flops(pruned.0)?);
    if pp > bp || pf > bf {
        log::warn!("pruned model is larger than its baseline ({pp} vs {bp} params, {pf} vs {bf} FLOPs)");
    }
    Ok(CompressionReport {
        model: baseline.0.name.clone(),
        flop_convention: FLOP_CONVENTION.into(),
        baseline_accuracy: baseline.1,
        pruned_accuracy: pruned.1,
        baseline_params: bp,
        pruned_params: pp,
        params_reduction_pct: reduction_pct(bp as f64, pp as f64),
        baseline_flops: bf,
        pruned_flops: pf,
        flops_reduction_pct: reduction_pct(bf as f64, pf as f64),
        meta,
    })
}

impl CompressionReport {
    pub const CSV_HEADER: &'static str = "model,dataset,granularities,baseline_accuracy,pruned_accuracy,baseline_params,pruned_params,params_reduction_pct,baseline_flops,pruned_flops,flops_reduction_pct";

    fn granularity_label(&self) -> String {
        self.meta.granularities.iter().map(|g| g.name()).collect::<Vec<_>>().join("+")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{},{},{:.2},{},{},{:.2}",
            self.model,
            self.meta.dataset,
            self.granularity_label(),
            self.baseline_accuracy,
            self.pruned_accuracy,
            self.baseline_params,
            self.pruned_params,
            self.params_reduction_pct,
            self.baseline_flops,
            self.pruned_flops,
            self.flops_reduction_pct
        )
    }

    /// Aligned text table: dataset, granularities, accuracy, %params and %FLOPs reduction.
    pub fn table(&self) -> String {
        let rows = [
            ["Dataset", "Pruning", "Accuracy", "Baseline acc.", "Params↓", "%FLOPs↓"].map(String::from),
            [
                self.meta.dataset.clone(),
                self.granularity_label(),
                format!("{:.2}%", 100.0 * self.pruned_accuracy),
                format!("{:.2}%", 100.0 * self.baseline_accuracy),
                format!("{:.2}%", self.params_reduction_pct),
                format!("{:.2}%", self.flops_reduction_pct),
            ],
        ];
        let widths: Vec<usize> = (0..6).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap()).collect();
        let mut out = format!("{} ({})\n", self.model, self.flop_convention);
        for row in &rows {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}", w = *w)).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
