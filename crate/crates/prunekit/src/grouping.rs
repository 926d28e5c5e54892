//! Layer grouping and sparsity accounting.
//!
//! Prunable layers are partitioned into contiguous groups; each group later
//! receives one pruning rate. Parameter counts are storage capacities
//! (weights plus biases); a parameter counts as pruned exactly when its
//! filter's mask is cleared.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::network::Network;

/// Partition of the prunable layers into named groups. `groups` holds
/// indices into `Network::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrouping {
    pub groups: Vec<Vec<usize>>,
    pub names: Vec<String>,
}

impl LayerGrouping {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

/// Network sparsity snapshot, overall and per group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityReport {
    pub overall: f64,
    pub per_group: Vec<f64>,
    pub params_total: usize,
    pub params_pruned: usize,
    pub per_group_params: Vec<usize>,
    pub per_group_pruned: Vec<usize>,
}

/// Evenly sized boundary positions for `n` groups over `len` layers; the
/// first `len % n` groups take the extra layer.
pub fn equal_depth_boundaries(len: usize, n: usize) -> Vec<usize> {
    let base = len / n;
    let extra = len % n;
    let mut cuts = Vec::with_capacity(n.saturating_sub(1));
    let mut pos = 0;
    for g in 0..n - 1 {
        pos += base + usize::from(g < extra);
        cuts.push(pos);
    }
    cuts
}

/// Cuts the network's prunable layers into `n` contiguous groups.
/// `boundaries` are strictly increasing positions in the prunable-layer
/// sequence (not raw layer indices), of length `n - 1`.
pub fn partition(net: &Network, n: usize, boundaries: &[usize]) -> Result<LayerGrouping> {
    let prunable = net.prunable_layer_indices();
    if n == 0 {
        return Err(Error::InvalidGrouping("need at least one group".into()));
    }
    if boundaries.len() + 1 != n {
        return Err(Error::InvalidGrouping(format!(
            "{} boundaries cannot cut {} groups",
            boundaries.len(),
            n
        )));
    }
    if n > prunable.len() {
        return Err(Error::InvalidGrouping(format!(
            "{} groups over {} prunable layers leaves an empty group",
            n,
            prunable.len()
        )));
    }
    let mut prev = 0usize;
    let mut groups = Vec::with_capacity(n);
    for (g, &b) in boundaries.iter().enumerate() {
        if b <= prev || b >= prunable.len() {
            return Err(Error::InvalidGrouping(format!(
                "boundary {b} at position {g} is not strictly inside ({prev}, {})",
                prunable.len()
            )));
        }
        groups.push(prunable[prev..b].to_vec());
        prev = b;
    }
    groups.push(prunable[prev..].to_vec());
    let names = (1..=n).map(|g| format!("group{g}")).collect();
    Ok(LayerGrouping { groups, names })
}

fn layer_param_counts(layer: &Layer) -> Option<(usize, usize)> {
    match layer {
        Layer::Conv(conv) => {
            let per = conv.params_per_filter();
            let pruned = conv.mask.iter().filter(|m| !**m).count() * per;
            Some((conv.param_count(), pruned))
        }
        Layer::Dense(dense) => {
            let per = dense.params_per_row();
            let pruned = dense.mask.iter().filter(|m| !**m).count() * per;
            Some((dense.param_count(), pruned))
        }
        _ => None,
    }
}

/// Per-group and total storage parameter counts of the grouped layers.
pub fn count_params(net: &Network, grouping: &LayerGrouping) -> (Vec<usize>, usize) {
    let per_group: Vec<usize> = grouping
        .groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|&i| layer_param_counts(&net.layers[i]).map_or(0, |(t, _)| t))
                .sum()
        })
        .collect();
    let total = per_group.iter().sum();
    (per_group, total)
}

/// Sparsity over the grouped (prunable) parameters only.
pub fn sparsity(net: &Network, grouping: &LayerGrouping) -> SparsityReport {
    let mut per_group_params = Vec::with_capacity(grouping.group_count());
    let mut per_group_pruned = Vec::with_capacity(grouping.group_count());
    for group in &grouping.groups {
        let mut total = 0usize;
        let mut pruned = 0usize;
        for &i in group {
            if let Some((t, p)) = layer_param_counts(&net.layers[i]) {
                total += t;
                pruned += p;
            }
        }
        per_group_params.push(total);
        per_group_pruned.push(pruned);
    }
    let params_total: usize = per_group_params.iter().sum();
    let params_pruned: usize = per_group_pruned.iter().sum();
    let ratio = |p: usize, t: usize| if t == 0 { 0.0 } else { p as f64 / t as f64 };
    SparsityReport {
        overall: ratio(params_pruned, params_total),
        per_group: per_group_pruned
            .iter()
            .zip(&per_group_params)
            .map(|(p, t)| ratio(*p, *t))
            .collect(),
        params_total,
        params_pruned,
        per_group_params,
        per_group_pruned,
    }
}
