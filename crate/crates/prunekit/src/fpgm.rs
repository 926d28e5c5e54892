//! Geometric-median filter pruning.
//!
//! Filters are ranked by their L2 distance to the layer's geometric median;
//! the closest filters are the most redundant and get pruned first. Soft
//! pruning zeroes them but leaves them trainable; hard pruning zeroes and
//! freezes them. The prune count per layer is round-half-to-even(rate * M),
//! capped so at least one filter always survives.

use crate::error::{Error, Result};
use crate::grouping::LayerGrouping;
use crate::layer::{ConvLayer, DenseLayer, Layer};
use crate::network::Network;
use crate::par;

pub const GM_TOL: f64 = 1e-6;
pub const GM_MAX_ITER: usize = 100;
/// Distance floor regularizing the Weiszfeld weights when an iterate lands
/// on a data point.
const DISTANCE_FLOOR: f64 = 1e-12;

/// Flattened filters of one layer: `rows` vectors of length `dim`.
#[derive(Debug, Clone)]
pub struct FilterMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

/// Geometric-median result for one layer.
#[derive(Debug, Clone)]
pub struct GMResult {
    pub median: Vec<f64>,
    pub distances: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

impl FilterMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidGrouping("filter matrix needs rows".into()));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("rows of uniform length {dim}"),
                actual: "ragged filter rows".into(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            data.extend_from_slice(r);
        }
        Ok(FilterMatrix {
            rows: rows.len(),
            dim,
            data,
        })
    }

    /// Filters of a conv layer, each flattened `[c, k, k]` row-major.
    pub fn from_conv(layer: &ConvLayer) -> Self {
        let m = layer.filter_count();
        let dim = layer.filters.numel() / m;
        FilterMatrix {
            rows: m,
            dim,
            data: layer.filters.data().iter().map(|v| *v as f64).collect(),
        }
    }

    /// Output rows of a dense layer.
    pub fn from_dense(layer: &DenseLayer) -> Self {
        FilterMatrix {
            rows: layer.out_dim(),
            dim: layer.in_dim(),
            data: layer.weights.data().iter().map(|v| *v as f64).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.data[m * self.dim..(m + 1) * self.dim]
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Sum of L2 distances from `x` to every filter: the quantity the geometric
/// median minimizes.
pub fn sum_distances(f: &FilterMatrix, x: &[f64]) -> f64 {
    (0..f.rows).map(|m| l2(f.row(m), x)).sum()
}

fn coordinate_mean(f: &FilterMatrix) -> Vec<f64> {
    let mut mean = vec![0.0; f.dim];
    for m in 0..f.rows {
        for (acc, v) in mean.iter_mut().zip(f.row(m)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= f.rows as f64;
    }
    mean
}

/// One Weiszfeld update: the distance-weighted mean of the filters around
/// the current iterate.
pub(crate) fn weiszfeld_step(f: &FilterMatrix, x: &[f64]) -> Vec<f64> {
    let mut numer = vec![0.0; f.dim];
    let mut denom = 0.0f64;
    for m in 0..f.rows {
        let d = l2(f.row(m), x).max(DISTANCE_FLOOR);
        let w = 1.0 / d;
        denom += w;
        for (acc, v) in numer.iter_mut().zip(f.row(m)) {
            *acc += w * v;
        }
    }
    for v in &mut numer {
        *v /= denom;
    }
    numer
}

/// Weiszfeld fixed-point iteration from the coordinate-wise mean.
/// Converged means successive iterates moved less than `tol` in L2.
pub fn geometric_median(f: &FilterMatrix, tol: f64, max_iter: usize) -> GMResult {
    assert!(tol > 0.0, "tolerance must be positive");
    let mut x = coordinate_mean(f);
    let mut converged = f.rows == 1;
    let mut iterations_used = 0;
    let mut objective = sum_distances(f, &x);
    for it in 0..max_iter {
        if converged {
            break;
        }
        let next = weiszfeld_step(f, &x);
        let moved = l2(&next, &x);
        let next_objective = sum_distances(f, &next);
        // Weiszfeld is monotone; allow rounding slack at convergence scale.
        debug_assert!(
            next_objective <= objective + 1e-9 * objective.max(1.0),
            "objective rose from {objective} to {next_objective}"
        );
        objective = next_objective;
        x = next;
        iterations_used = it + 1;
        if moved < tol {
            converged = true;
        }
    }
    let distances = (0..f.rows).map(|m| l2(f.row(m), &x)).collect();
    GMResult {
        median: x,
        distances,
        iterations_used,
        converged,
    }
}

/// Filter indices ordered by ascending distance to the geometric median;
/// the first entries are the most redundant. Ties break to the lower index.
pub fn rank_filters(f: &FilterMatrix, gm: &GMResult) -> Result<Vec<usize>> {
    if gm.distances.len() != f.rows {
        return Err(Error::RankingLengthMismatch {
            got: gm.distances.len(),
            filters: f.rows,
        });
    }
    let mut order: Vec<usize> = (0..f.rows).collect();
    order.sort_by(|&a, &b| {
        gm.distances[a]
            .total_cmp(&gm.distances[b])
            .then(a.cmp(&b))
    });
    Ok(order)
}

/// Number of filters to prune: round-half-to-even(rate * m), never all of
/// them.
pub fn prune_count(rate: f64, m: usize) -> usize {
    let p = (rate * m as f64).round_ties_even() as usize;
    p.min(m.saturating_sub(1))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::RateOutOfRange { rate });
    }
    Ok(())
}

/// Mask/zero/freeze operations shared by the prunable layer kinds.
trait FilterBank {
    fn unit_count(&self) -> usize;
    fn zero_unit(&mut self, i: usize, freeze: bool);
    fn restore_unit(&mut self, i: usize);
    fn frozen(&self, i: usize) -> bool;
}

impl FilterBank for ConvLayer {
    fn unit_count(&self) -> usize {
        self.filter_count()
    }
    fn zero_unit(&mut self, i: usize, freeze: bool) {
        self.zero_filter(i, freeze);
    }
    fn restore_unit(&mut self, i: usize) {
        self.mask[i] = true;
    }
    fn frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }
}

impl FilterBank for DenseLayer {
    fn unit_count(&self) -> usize {
        self.out_dim()
    }
    fn zero_unit(&mut self, i: usize, freeze: bool) {
        self.zero_filter(i, freeze);
    }
    fn restore_unit(&mut self, i: usize) {
        self.mask[i] = true;
    }
    fn frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }
}

fn apply_prune<B: FilterBank>(
    layer: &mut B,
    rate: f64,
    ranking: &[usize],
    freeze: bool,
) -> Result<usize> {
    check_rate(rate)?;
    let m = layer.unit_count();
    if ranking.len() != m {
        return Err(Error::RankingLengthMismatch {
            got: ranking.len(),
            filters: m,
        });
    }
    let p = prune_count(rate, m);
    let mut selected = vec![false; m];
    for &idx in &ranking[..p] {
        selected[idx] = true;
    }
    for i in 0..m {
        if selected[i] {
            layer.zero_unit(i, freeze);
        } else if !freeze && !layer.frozen(i) {
            // Soft pruning is re-decided each round: filters not selected
            // this time come back.
            layer.restore_unit(i);
        }
    }
    Ok(p)
}

/// Soft prune: zero the `round(rate*M)` most redundant filters but keep
/// them trainable; deselected filters are unmasked.
pub fn soft_prune_conv(layer: &mut ConvLayer, rate: f64, ranking: &[usize]) -> Result<usize> {
    apply_prune(layer, rate, ranking, false)
}

pub fn soft_prune_dense(layer: &mut DenseLayer, rate: f64, ranking: &[usize]) -> Result<usize> {
    apply_prune(layer, rate, ranking, false)
}

/// Hard prune: zero and freeze. Training never revives a frozen filter.
pub fn hard_prune_conv(layer: &mut ConvLayer, rate: f64, ranking: &[usize]) -> Result<usize> {
    apply_prune(layer, rate, ranking, true)
}

pub fn hard_prune_dense(layer: &mut DenseLayer, rate: f64, ranking: &[usize]) -> Result<usize> {
    apply_prune(layer, rate, ranking, true)
}

fn layer_ranking(layer: &Layer) -> Option<Result<Vec<usize>>> {
    let f = match layer {
        Layer::Conv(conv) => FilterMatrix::from_conv(conv),
        Layer::Dense(dense) => FilterMatrix::from_dense(dense),
        _ => return None,
    };
    let gm = geometric_median(&f, GM_TOL, GM_MAX_ITER);
    Some(rank_filters(&f, &gm))
}

fn prune_network(
    net: &mut Network,
    rates: &[f64],
    grouping: &LayerGrouping,
    freeze: bool,
) -> Result<()> {
    if rates.len() != grouping.group_count() {
        return Err(Error::RateDimensionMismatch {
            got: rates.len(),
            groups: grouping.group_count(),
        });
    }
    for &rate in rates {
        check_rate(rate)?;
    }
    // Rankings are read-only per layer and fan out in parallel; the
    // mutations below run in a fixed order.
    let jobs: Vec<(usize, f64)> = grouping
        .groups
        .iter()
        .zip(rates)
        .flat_map(|(group, &rate)| group.iter().map(move |&li| (li, rate)))
        .collect();
    let layers: &[Layer] = &net.layers;
    let rankings = par::map_indices(jobs.len(), |j| layer_ranking(&layers[jobs[j].0]));
    for ((layer_idx, rate), ranking) in jobs.into_iter().zip(rankings) {
        let ranking = ranking.transpose()?.ok_or_else(|| {
            Error::InvalidGrouping(format!("layer {layer_idx} holds no prunable filters"))
        })?;
        match &mut net.layers[layer_idx] {
            Layer::Conv(conv) => {
                apply_prune(conv, rate, &ranking, freeze)?;
            }
            Layer::Dense(dense) => {
                apply_prune(dense, rate, &ranking, freeze)?;
            }
            _ => unreachable!("ranking exists only for parameterized layers"),
        }
    }
    Ok(())
}

/// Applies one soft-pruning round across the whole network: each group's
/// rate selects filters per layer via a fresh geometric-median ranking.
pub fn soft_prune_network(
    net: &mut Network,
    rates: &[f64],
    grouping: &LayerGrouping,
) -> Result<()> {
    prune_network(net, rates, grouping, false)
}

/// Hard-prunes the network with per-group rates and freezes the selection.
pub fn hard_prune_network(
    net: &mut Network,
    rates: &[f64],
    grouping: &LayerGrouping,
) -> Result<()> {
    prune_network(net, rates, grouping, true)
}
