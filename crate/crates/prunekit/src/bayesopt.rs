//! Derivative-free minimization over a box: GP surrogate + lower-confidence
//! acquisition.
//!
//! The loop follows the classic recipe: evaluate `i0` seeded uniform points,
//! then repeatedly refit the surrogate, minimize the acquisition score over
//! seeded quasi-random candidates with local refinement, and evaluate the
//! winner, for exactly `total` objective evaluations.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gp::{self, GpState};
use crate::par;
use crate::rng;

/// Quasi-random candidates scored per acquisition.
pub const ACQUIRE_CANDIDATES: usize = 2048;
/// Coordinate-descent refinement steps on the best candidate.
pub const REFINE_STEPS: usize = 256;
/// Proposals closer than this to an existing observation get perturbed.
pub const DUPLICATE_RADIUS: f64 = 1e-9;
const PERTURB_AMPLITUDE: f64 = 1e-6;

/// Per-dimension closed search box.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds(Vec<(f64, f64)>);

impl Bounds {
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("bounds need at least one dimension".into()));
        }
        for (lo, hi) in &pairs {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("invalid bound ({lo}, {hi})")));
            }
        }
        Ok(Bounds(pairs))
    }

    /// `[0, min(t + offset, cap)]` in every dimension.
    pub fn rate_box(dims: usize, t: f64, offset: f64, cap: f64) -> Result<Self> {
        Bounds::new(vec![(0.0, (t + offset).min(cap)); dims])
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.0
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(&self.0) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Maps a point into the unit cube for the GP.
    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.0)
            .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.0.iter().map(|(lo, hi)| rng.gen_range(*lo..*hi)).collect()
    }
}

/// Optimizer budget and exploration weight.
#[derive(Debug, Clone, Copy)]
pub struct BoConfig {
    /// Initial random evaluations.
    pub initial_points: usize,
    /// Total objective evaluations.
    pub total: usize,
    /// Exploration weight in the confidence bound.
    pub kappa: f64,
    pub seed: u64,
}

impl BoConfig {
    fn validate(&self) -> Result<()> {
        if self.initial_points < 1 || self.initial_points > self.total {
            return Err(Error::BadBudget {
                i0: self.initial_points,
                total: self.total,
            });
        }
        Ok(())
    }
}

/// One objective evaluation as seen by the optimizer.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation {
    pub value: f64,
    pub was_penalty: bool,
}

impl From<f64> for Evaluation {
    fn from(value: f64) -> Self {
        Evaluation {
            value,
            was_penalty: false,
        }
    }
}

/// Complete log entry for one evaluation.
#[derive(Debug, Clone)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub point: Vec<f64>,
    pub value: f64,
    pub was_penalty: bool,
    pub seconds: f64,
}

/// Final optimizer result with the full evaluation log.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub history: Vec<HistoryRecord>,
}

/// Failure mid-loop, carrying everything evaluated so far.
#[derive(Debug)]
pub struct Aborted {
    pub iteration: usize,
    pub source: Error,
    pub history: Vec<HistoryRecord>,
}

impl From<Box<Aborted>> for Error {
    fn from(a: Box<Aborted>) -> Self {
        Error::ObjectiveAborted {
            iteration: a.iteration,
            source: Box::new(a.source),
        }
    }
}

/// Confidence-bound score for minimization: `mean - kappa * std`. Lower is
/// more promising.
pub fn ucb_score(gp: &GpState, x_unit: &[f64], kappa: f64) -> f64 {
    let (mean, std) = gp.posterior(x_unit);
    mean - kappa * std
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut result = 0.0;
    while i > 0 {
        result += (i % base) as f64 * inv;
        i /= base;
        inv /= base as f64;
    }
    result
}

const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Seeded Halton points in the box: the radical-inverse sequence per
/// dimension plus a seeded rotation, wrapped back into [0, 1).
fn halton_candidates(bounds: &Bounds, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let dims = bounds.dims();
    assert!(dims <= PRIMES.len(), "at most {} dimensions", PRIMES.len());
    let mut rng = rng::rng_from(seed);
    let shifts: Vec<f64> = (0..dims).map(|_| rng.gen_range(0.0..1.0)).collect();
    (0..n)
        .map(|i| {
            bounds
                .pairs()
                .iter()
                .enumerate()
                .map(|(d, (lo, hi))| {
                    let u = (radical_inverse(i + 1, PRIMES[d]) + shifts[d]).fract();
                    lo + u * (hi - lo)
                })
                .collect()
        })
        .collect()
}

/// Proposes the next point: best of [`ACQUIRE_CANDIDATES`] seeded Halton
/// candidates under [`ucb_score`], then [`REFINE_STEPS`] coordinate-descent
/// steps. Candidate scoring fans out in parallel and reduces by (score,
/// index), so the result is deterministic.
pub fn acquire_next(gp: &GpState, bounds: &Bounds, kappa: f64, seed: u64) -> Vec<f64> {
    let candidates = halton_candidates(bounds, ACQUIRE_CANDIDATES, seed);
    let scores = par::map_indices(candidates.len(), |i| {
        ucb_score(gp, &bounds.to_unit(&candidates[i]), kappa)
    });
    let mut best_idx = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best_idx] {
            best_idx = i;
        }
    }
    let mut x = candidates[best_idx].clone();
    let mut best = scores[best_idx];

    let dims = bounds.dims();
    let mut deltas: Vec<f64> = bounds.pairs().iter().map(|(lo, hi)| 0.05 * (hi - lo)).collect();
    let mut since_improvement = 0usize;
    for step in 0..REFINE_STEPS {
        let d = step % dims;
        let mut improved = false;
        for dir in [-1.0, 1.0] {
            let mut trial = x.clone();
            trial[d] = (trial[d] + dir * deltas[d]).clamp(bounds.pairs()[d].0, bounds.pairs()[d].1);
            let s = ucb_score(gp, &bounds.to_unit(&trial), kappa);
            if s < best {
                best = s;
                x = trial;
                improved = true;
            }
        }
        if improved {
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= dims {
                for delta in &mut deltas {
                    *delta *= 0.5;
                }
                since_improvement = 0;
            }
        }
    }
    x
}

/// Runs the optimization loop: exactly `cfg.total` evaluations of `f`, the
/// first `cfg.initial_points` at seeded uniform points. Returns the argmin
/// over the whole history (first wins ties).
pub fn optimize<F>(
    mut f: F,
    bounds: &Bounds,
    cfg: &BoConfig,
) -> std::result::Result<Outcome, Box<Aborted>>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    cfg.validate().map_err(|e| {
        Box::new(Aborted {
            iteration: 0,
            source: e,
            history: Vec::new(),
        })
    })?;
    let mut history: Vec<HistoryRecord> = Vec::with_capacity(cfg.total);
    let mut rng = rng::rng_from(cfg.seed);
    let mut lengthscale = gp::DEFAULT_LENGTHSCALE;

    for iteration in 0..cfg.total {
        let point = if iteration < cfg.initial_points {
            bounds.sample(&mut rng)
        } else {
            // Fit the surrogate on everything observed so far.
            let raw_inputs: Vec<Vec<f64>> =
                history.iter().map(|h| bounds.to_unit(&h.point)).collect();
            let raw_outputs: Vec<f64> = history.iter().map(|h| h.value).collect();
            let (inputs, outputs) = gp::dedupe(&raw_inputs, &raw_outputs);
            if history.len() % 10 == 0 {
                lengthscale = gp::select_lengthscale(&inputs, &outputs);
            }
            let state = match gp::fit(inputs, &outputs, lengthscale) {
                Ok(s) => s,
                Err(e) => {
                    return Err(Box::new(Aborted {
                        iteration,
                        source: e,
                        history,
                    }))
                }
            };
            let acq_seed = cfg.seed ^ ((iteration as u64 + 1) << 20);
            let mut proposal = acquire_next(&state, bounds, cfg.kappa, acq_seed);
            let near_existing = history.iter().any(|h| {
                h.point
                    .iter()
                    .zip(&proposal)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
                    < DUPLICATE_RADIUS
            });
            if near_existing {
                let mut prng = rng::rng_from(acq_seed ^ 0xD1CE);
                for v in proposal.iter_mut() {
                    *v += prng.gen_range(-PERTURB_AMPLITUDE..PERTURB_AMPLITUDE);
                }
                bounds.clamp(&mut proposal);
            }
            proposal
        };

        let started = Instant::now();
        match f(&point) {
            Ok(eval) => history.push(HistoryRecord {
                iteration,
                point,
                value: eval.value,
                was_penalty: eval.was_penalty,
                seconds: started.elapsed().as_secs_f64(),
            }),
            Err(e) => {
                return Err(Box::new(Aborted {
                    iteration,
                    source: e,
                    history,
                }))
            }
        }
    }

    let mut best = 0usize;
    for (i, h) in history.iter().enumerate() {
        if h.value < history[best].value {
            best = i;
        }
    }
    Ok(Outcome {
        best_point: history[best].point.clone(),
        best_value: history[best].value,
        history,
    })
}

/// Writes the evaluation log as CSV:
/// `iteration,phi_0..phi_{N-1},objective,was_penalty,seconds`.
pub fn write_history_csv(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let dims = history.first().map_or(0, |h| h.point.len());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let phis: Vec<String> = (0..dims).map(|d| format!("phi_{d}")).collect();
    writeln!(out, "iteration,{},objective,was_penalty,seconds", phis.join(","))?;
    for h in history {
        let phi: Vec<String> = h.point.iter().map(|v| format!("{v}")).collect();
        writeln!(
            out,
            "{},{},{},{},{:.6}",
            h.iteration,
            phi.join(","),
            h.value,
            h.was_penalty,
            h.seconds
        )?;
    }
    Ok(())
}
