//! Coordinate-ascent drivers: plain VB, deterministic annealing and
//! stochastic variational inference.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::expfam::{draw_with, FamilyId, NaturalParams};
use crate::graph::{Graph, NodeId, NodeKind};
use crate::linalg::SpdFactor;
use crate::plates::Field;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Update order; defaults to the latent nodes in construction order.
    pub order: Option<Vec<NodeId>>,
    pub max_sweeps: usize,
    /// Stop when |ΔL| < tol·|L| between consecutive sweeps.
    pub tol: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            order: None,
            max_sweeps: 200,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    /// Bound after each sweep.
    pub elbo: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub ms_per_sweep: Vec<f64>,
}

impl FitReport {
    pub fn final_elbo(&self) -> Option<f64> {
        self.elbo.last().copied()
    }
}

/// A fit that stopped on an error, with everything recorded before it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{error}")]
pub struct FitFailure {
    pub report: FitReport,
    pub error: Error,
}

impl From<Error> for FitFailure {
    fn from(error: Error) -> Self {
        Self {
            report: FitReport::default(),
            error,
        }
    }
}

pub type FitResult = std::result::Result<FitReport, FitFailure>;

/// Inverse temperatures per sweep; sweeps past the end run at β = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealingSchedule {
    betas: Vec<f64>,
}

impl AnnealingSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Configuration("annealing schedule is empty".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(Error::Configuration("annealing temperatures must lie in (0, 1]".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Configuration("annealing schedule must be non-decreasing".into()));
        }
        if *betas.last().expect("non-empty") != 1.0 {
            return Err(Error::Configuration("annealing schedule must end at 1".into()));
        }
        Ok(Self { betas })
    }

    /// Geometric ramp from `start` to 1 over `steps` sweeps.
    pub fn geometric(start: f64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Self::new(vec![1.0]);
        }
        let ratio = (1.0 / start).powf(1.0 / (steps - 1) as f64);
        let mut betas: Vec<f64> = (0..steps).map(|i| (start * ratio.powi(i as i32)).min(1.0)).collect();
        betas[steps - 1] = 1.0;
        Self::new(betas)
    }

    pub fn beta(&self, sweep: usize) -> f64 {
        self.betas.get(sweep).copied().unwrap_or(1.0)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// Minibatch schedule for stochastic variational inference.
#[derive(Debug, Clone, PartialEq)]
pub struct SviSchedule {
    /// Observed node whose plate axis is subsampled.
    pub observed: NodeId,
    /// Axis index within that node's plates.
    pub axis: usize,
    pub batch_size: usize,
    /// Delay τ ≥ 0.
    pub delay: f64,
    /// Forgetting rate κ in (0.5, 1].
    pub forgetting: f64,
    /// Nodes to treat as global; by default every latent node without the
    /// batch axis.
    pub globals: Option<Vec<NodeId>>,
}

impl SviSchedule {
    pub fn step_size(&self, t: usize) -> f64 {
        (t as f64 + self.delay).powf(-self.forgetting)
    }
}

fn resolve_order(graph: &Graph, order: &Option<Vec<NodeId>>) -> Result<Vec<NodeId>> {
    let latent = graph.latent_nodes();
    match order {
        None => Ok(latent),
        Some(o) => {
            let mut sorted = o.clone();
            sorted.sort_unstable();
            if sorted != latent {
                return Err(Error::Configuration(format!(
                    "update order {o:?} must list every latent node {latent:?} exactly once"
                )));
            }
            Ok(o.clone())
        }
    }
}

fn check_options(graph: &Graph, options: &FitOptions) -> Result<Vec<NodeId>> {
    if graph.observed_nodes().is_empty() {
        return Err(Error::Configuration("no observed nodes".into()));
    }
    if options.max_sweeps == 0 {
        return Err(Error::Configuration("max_sweeps must be at least 1".into()));
    }
    if !(options.tol > 0.0) {
        return Err(Error::Configuration("tolerance must be positive".into()));
    }
    resolve_order(graph, &options.order)
}

fn converged(prev: Option<f64>, cur: f64, tol: f64) -> bool {
    if tol.is_infinite() {
        return true;
    }
    prev.is_some_and(|p| (cur - p).abs() < tol * cur.abs())
}

fn millis(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn sweeps(graph: &mut Graph, options: &FitOptions, schedule: Option<&AnnealingSchedule>) -> FitResult {
    let order = check_options(graph, options)?;
    let mut report = FitReport::default();
    let outcome = (|| -> Result<()> {
        for t in 0..options.max_sweeps {
            let beta = schedule.map_or(1.0, |s| s.beta(t));
            let start = Instant::now();
            graph.set_beta(beta);
            for &id in &order {
                graph.update_node(id)?;
            }
            let elbo = graph.elbo()?;
            report.ms_per_sweep.push(millis(start));
            let prev = report.elbo.last().copied();
            report.elbo.push(elbo);
            report.sweeps += 1;
            let settled = beta == 1.0 && schedule.is_none_or(|s| t == 0 || s.beta(t - 1) == 1.0);
            if settled && converged(prev, elbo, options.tol) {
                report.converged = true;
                break;
            }
        }
        Ok(())
    })();
    graph.set_beta(1.0);
    match outcome {
        Ok(()) => Ok(report),
        Err(error) => Err(FitFailure { report, error }),
    }
}

/// Standard VB: update every latent node in turn until the bound settles.
pub fn run_vb(graph: &mut Graph, options: &FitOptions) -> FitResult {
    sweeps(graph, options, None)
}

/// VB with child messages scaled by β per sweep. Convergence is only
/// declared once β has reached 1.
pub fn run_annealed(graph: &mut Graph, options: &FitOptions, schedule: &AnnealingSchedule) -> FitResult {
    sweeps(graph, options, Some(schedule))
}

/// Whether a node with `plates` carries the axis that sits `from_end`
/// positions from the right of the observed node's plates.
fn carries_axis(plates: &[usize], from_end: usize, size: usize) -> bool {
    plates.len() >= from_end && plates[plates.len() - from_end] == size && size > 1
}

/// Stochastic variational inference. Each step updates the local nodes
/// (those carrying the batch axis) in full, then moves every global node
/// toward the estimate obtained from the minibatch messages rescaled by
/// N/M. Runs `max_sweeps` steps; the bound is evaluated on the full data
/// after each step.
pub fn run_svi(graph: &mut Graph, options: &FitOptions, schedule: &SviSchedule) -> FitResult {
    let order = check_options(graph, options)?;
    let obs_plates = graph.plates(schedule.observed)?.to_vec();
    if !graph.is_observed(schedule.observed)? {
        return Err(Error::Configuration(format!("node {} is not observed", schedule.observed)).into());
    }
    if schedule.axis >= obs_plates.len() {
        return Err(Error::Configuration(format!("batch axis {} outside plates {obs_plates:?}", schedule.axis)).into());
    }
    let n = obs_plates[schedule.axis];
    let m = schedule.batch_size;
    if m == 0 || m > n {
        return Err(Error::Configuration(format!("batch size {m} must lie in 1..={n}")).into());
    }
    if !(schedule.forgetting > 0.5 && schedule.forgetting <= 1.0) || !(schedule.delay >= 0.0) {
        return Err(Error::Configuration("need delay >= 0 and forgetting rate in (0.5, 1]".into()).into());
    }
    let from_end = obs_plates.len() - schedule.axis;
    let carrying: Vec<NodeId> = (0..graph.len())
        .filter(|&id| {
            matches!(graph.kind(id), Ok(NodeKind::Stochastic(_) | NodeKind::Mixture { .. }))
                && carries_axis(graph.plates(id).expect("node"), from_end, n)
        })
        .collect();
    let (locals, globals): (Vec<NodeId>, Vec<NodeId>) = match &schedule.globals {
        None => order.iter().partition(|id| carrying.contains(id)),
        Some(g) => {
            if let Some(bad) = g.iter().find(|id| carrying.contains(id)) {
                return Err(Error::Configuration(format!("global node {bad} carries the batch axis")).into());
            }
            if let Some(bad) = g.iter().find(|id| !order.contains(id)) {
                return Err(Error::Configuration(format!("global node {bad} is not latent")).into());
            }
            order.iter().partition(|id| !g.contains(id))
        }
    };

    let scale = n as f64 / m as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut report = FitReport::default();
    let outcome = (|| -> Result<()> {
        for t in 1..=options.max_sweeps {
            let start = Instant::now();
            if cursor + m > n {
                perm.shuffle(&mut rng);
                cursor = 0;
            }
            let mut w = vec![0.0; n];
            for &i in &perm[cursor..cursor + m] {
                w[i] = scale;
            }
            cursor += m;

            for &id in &locals {
                graph.update_node(id)?;
            }
            for &id in &carrying {
                let plates = graph.plates(id)?.to_vec();
                let mut shape = vec![1; plates.len()];
                shape[plates.len() - from_end] = n;
                graph.set_batch_weight(id, Some(Field::new(shape, 1, w.clone())));
            }
            let rho = schedule.step_size(t);
            let updated = globals
                .iter()
                .try_for_each(|&id| graph.update_node_blended(id, rho).map(|_| ()));
            for &id in &carrying {
                graph.set_batch_weight(id, None);
            }
            updated?;

            let elbo = graph.elbo()?;
            report.ms_per_sweep.push(millis(start));
            let prev = report.elbo.last().copied();
            report.elbo.push(elbo);
            report.sweeps += 1;
            report.converged = converged(prev, elbo, options.tol);
        }
        Ok(())
    })();
    match outcome {
        Ok(()) => Ok(report),
        Err(error) => Err(FitFailure { report, error }),
    }
}

/// Break symmetry by moving the posterior of a latent node to a random
/// point: categorical responsibilities are drawn from a flat Dirichlet,
/// continuous nodes are centred on a draw from their prior.
pub fn initialize_from_random(graph: &mut Graph, id: NodeId, seed: u64) -> Result<()> {
    let family = graph
        .family(id)?
        .ok_or_else(|| Error::Configuration(format!("node {id} is not stochastic")))?;
    if graph.is_fully_observed(id)? {
        return Err(Error::Configuration(format!("node {id} is fully observed")));
    }
    let plates = graph.plates(id)?.to_vec();
    let prior: Vec<Field> = graph.collect_prior(id)?.iter().map(|f| f.expand_to(&plates)).collect();
    let count: usize = plates.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: Vec<Vec<f64>> = family
        .block_sizes()
        .iter()
        .map(|s| Vec::with_capacity(s * count))
        .collect();
    for i in 0..count {
        let phi = NaturalParams::new(family, prior.iter().map(|f| f.elem(i).to_vec()).collect())?;
        let init = random_posterior(&phi, &mut rng)?;
        for (b, v) in blocks.iter_mut().zip(init) {
            b.extend(v);
        }
    }
    graph.set_natural(id, blocks)
}

fn random_posterior(prior: &NaturalParams, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let b = &prior.blocks;
    Ok(match prior.family {
        FamilyId::Categorical(k) => {
            let r = draw_with(&NaturalParams::dirichlet(&vec![1.0; k]), rng)?;
            vec![r.iter().map(|p| p.ln()).collect()]
        }
        FamilyId::Gaussian(d) => {
            let x = draw_with(prior, rng)?;
            let mut lx = vec![0.0; d];
            let prec: Vec<f64> = b[1].iter().map(|v| -2.0 * v).collect();
            crate::linalg::mat_vec(&prec, &x, &mut lx);
            vec![lx, b[1].clone()]
        }
        FamilyId::Gamma => {
            let x = draw_with(prior, rng)?[0];
            let a = b[1][0] + 1.0;
            vec![vec![-a / x], b[1].clone()]
        }
        FamilyId::Wishart(d) => {
            let lambda = draw_with(prior, rng)?;
            let n = 2.0 * b[1][0] + d as f64 + 1.0;
            let inv = SpdFactor::new(&lambda, d)?.inverse();
            vec![inv.iter().map(|v| -0.5 * n * v).collect(), b[1].clone()]
        }
        FamilyId::Dirichlet(k) => {
            let p = draw_with(prior, rng)?;
            vec![b[0].iter().zip(&p).map(|(a, p)| a + k as f64 * p).collect()]
        }
    })
}
