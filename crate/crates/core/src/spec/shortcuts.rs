//! Residual shortcut insertion around layers, branches and blocks.

use serde::{Deserialize, Serialize};

use super::structure::analyze;
use super::{AdapterOp, Edge, ModelSpec, NodeKind, NodeSpec};
use crate::error::{Error, Result};
use crate::gates::Granularity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MismatchPolicy {
    /// Leave sites whose entry and exit shapes differ without a shortcut.
    #[default]
    Skip,
    /// Bridge the difference with pooling and/or a 1x1 projection.
    Adapt,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ShortcutReport {
    pub inserted: Vec<String>,
    pub reused: Vec<String>,
    /// Sites left alone because of a shape mismatch.
    pub skipped: Vec<String>,
    pub adapters: Vec<String>,
}

fn spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] | [_, c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::invalid("make_dimension_adapter", format!("expected an activation shape, got {other:?}"))),
    }
}

/// Operations mapping an activation of shape `src` to shape `dst`: pooling
/// when the spatial size shrinks, then a projection when the depth differs.
/// Shapes are `[C, H, W]` or `[N, C, H, W]`.
pub fn adapter_ops(src: &[usize], dst: &[usize]) -> Result<Vec<AdapterOp>> {
    let (sc, sh, sw) = spatial(src)?;
    let (dc, dh, dw) = spatial(dst)?;
    let mut ops = Vec::new();
    if (sh, sw) != (dh, dw) {
        if dh > sh || dw > sw {
            return Err(Error::invalid("make_dimension_adapter", format!("destination {dst:?} is larger than source {src:?}")));
        }
        if sh % dh != 0 || sw % dw != 0 || sh / dh != sw / dw {
            return Err(Error::invalid("make_dimension_adapter", format!("non-integral spatial ratio from {src:?} to {dst:?}")));
        }
        ops.push(AdapterOp::Pool(sh / dh));
    }
    if sc != dc {
        ops.push(AdapterOp::Project(dc));
    }
    Ok(ops)
}

/// Adapter node chain for `adapter_ops`, ids derived from `base`.
pub fn make_dimension_adapter(base: &str, src: &[usize], dst: &[usize]) -> Result<Vec<NodeSpec>> {
    Ok(adapter_ops(src, dst)?
        .into_iter()
        .map(|op| {
            let suffix = match op {
                AdapterOp::Pool(_) => "pool",
                AdapterOp::Project(_) => "proj",
            };
            NodeSpec::new(format!("{base}_adapter_{suffix}"), NodeKind::Adapter { op }).artificial()
        })
        .collect())
}

/// Gives every site of `granularity` a residual shortcut, reusing existing ones.
pub fn insert_shortcuts(spec: &ModelSpec, granularity: Granularity, policy: MismatchPolicy) -> Result<ModelSpec> {
    insert_shortcuts_with_report(spec, granularity, policy).map(|(s, _)| s)
}

pub fn insert_shortcuts_with_report(
    spec: &ModelSpec,
    granularity: Granularity,
    policy: MismatchPolicy,
) -> Result<(ModelSpec, ShortcutReport)> {
    if !granularity.is_structural() {
        return Err(Error::invalid("insert_shortcuts", format!("unknown structural granularity '{granularity}'")));
    }
    let mut spec = spec.clone();
    let mut report = ShortcutReport::default();
    let ids: Vec<String> = analyze(&spec)?.sites(granularity).map(|s| s.id.clone()).collect();
    for id in ids {
        let structure = analyze(&spec)?;
        let site = structure.site(granularity, &id).expect("site ids are stable under insertion");
        if site.shortcut.is_some() {
            report.reused.push(id);
            continue;
        }
        let [exit] = site.exits.as_slice() else {
            return Err(Error::invalid("insert_shortcuts", format!("branches of block '{id}' do not merge into one node")));
        };
        let table = super::validate(&spec)?;
        let (src, dst) = (table.shape(&site.entry).unwrap(), table.shape(exit).unwrap());
        let adapters = if src == dst {
            Vec::new()
        } else if policy == MismatchPolicy::Skip {
            report.skipped.push(id);
            continue;
        } else {
            make_dimension_adapter(&spec.fresh_id(&id), src, dst)?
        };
        let add = NodeSpec::new(spec.fresh_id(&format!("{id}_shortcut_add")), NodeKind::plain_add()).artificial();
        let (entry, exit) = (site.entry.clone(), exit.clone());

        for e in spec.edges.iter_mut().filter(|e| e.0 == exit) {
            e.0 = add.id.clone();
        }
        spec.edges.push(Edge::new(&exit, &add.id));
        let mut prev = entry;
        for a in &adapters {
            spec.edges.push(Edge::new(&prev, &a.id));
            prev = a.id.clone();
        }
        spec.edges.push(Edge::new(&prev, &add.id));

        if granularity == Granularity::Layer {
            for br in &mut spec.branches {
                if let Some(pos) = br.nodes.iter().position(|n| *n == exit) {
                    br.nodes.insert(pos + 1, add.id.clone());
                }
            }
        }
        let at = spec.nodes.iter().position(|n| n.id == exit).unwrap() + 1;
        report.adapters.extend(adapters.iter().map(|a| a.id.clone()));
        let new_nodes: Vec<NodeSpec> = adapters.into_iter().chain(std::iter::once(add)).collect();
        spec.nodes.splice(at..at, new_nodes);
        report.inserted.push(id);
    }
    super::validate(&spec)?;
    Ok((spec, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_shapes_need_no_adapter() {
        assert!(adapter_ops(&[1, 32, 16, 16], &[1, 32, 16, 16]).unwrap().is_empty());
    }

    #[test]
    fn depth_mismatch_projects() {
        assert_eq!(adapter_ops(&[1, 32, 16, 16], &[1, 64, 16, 16]).unwrap(), vec![AdapterOp::Project(64)]);
    }

    #[test]
    fn depth_and_space_pool_then_project() {
        assert_eq!(
            adapter_ops(&[1, 32, 16, 16], &[1, 64, 8, 8]).unwrap(),
            vec![AdapterOp::Pool(2), AdapterOp::Project(64)]
        );
    }

    #[test]
    fn bad_ratios_are_rejected() {
        assert!(adapter_ops(&[32, 16, 16], &[32, 6, 6]).is_err());
        assert!(adapter_ops(&[32, 8, 8], &[32, 16, 16]).is_err());
    }
}
