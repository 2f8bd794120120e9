//! Capacity-limited dispatch of tokens to expert buffers and the weighted
//! combine of expert outputs.
//!
//! Each expert owns one buffer of `C = ceil(f·k·T/E)` slots. Tokens claim
//! slots first-come-first-served in batch order; an assignment that finds
//! its buffer full is dropped and contributes nothing to the output.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gating::GateOutput;
use crate::mapping::MappingTable;
use crate::numeric::{gelu, Graph, Matrix, NodeId};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DispatchMode {
    /// Top-k of the router probabilities.
    #[default]
    RouterArgmax,
    /// The configured dataset → expert mapping, uniform among mapped experts.
    ForcedMapping,
}

impl FromStr for DispatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "router_argmax" => Ok(DispatchMode::RouterArgmax),
            "forced_mapping" => Ok(DispatchMode::ForcedMapping),
            other => Err(format!("unknown dispatch mode {other:?} (router_argmax, forced_mapping)")),
        }
    }
}

impl fmt::Display for DispatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DispatchMode::RouterArgmax => "router_argmax",
            DispatchMode::ForcedMapping => "forced_mapping",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingConfig {
    pub num_experts: usize,
    pub k: usize,
    pub capacity_factor: f64,
    pub dispatch_mode: DispatchMode,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            num_experts: 2,
            k: 1,
            capacity_factor: 1.25,
            dispatch_mode: DispatchMode::RouterArgmax,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Parameter("need at least one expert".into()));
        }
        if self.k == 0 || self.k > self.num_experts {
            return Err(Error::Parameter(format!(
                "k = {} must lie in [1, {}]",
                self.k, self.num_experts
            )));
        }
        if !(self.capacity_factor > 0.0) || !self.capacity_factor.is_finite() {
            return Err(Error::Parameter(format!(
                "capacity factor must be > 0, got {}",
                self.capacity_factor
            )));
        }
        if self.dispatch_mode == DispatchMode::ForcedMapping && self.k != 1 {
            return Err(Error::Parameter("forced_mapping dispatch requires k = 1".into()));
        }
        Ok(())
    }
}

/// Per-expert buffer size `ceil(f·k·T/E)`.
pub fn capacity(tokens: usize, cfg: &RoutingConfig) -> usize {
    let exact = cfg.capacity_factor * (cfg.k * tokens) as f64 / cfg.num_experts as f64;
    // absorb representation error so that e.g. 1.1·10 does not round up to 12
    (exact - exact.abs() * 1e-12).ceil().max(0.0) as usize
}

/// Two-layer feed-forward map `x ↦ W2·gelu(W1·x + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    /// H×D
    pub w1: Matrix<T>,
    /// 1×H
    pub b1: Matrix<T>,
    /// D×H
    pub w2: Matrix<T>,
    /// 1×D
    pub b2: Matrix<T>,
}

/// Graph handles of one [`FeedForward`]'s parameters.
#[derive(Clone, Copy, Debug)]
pub struct FeedForwardNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl<T: Scalar> FeedForward<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        FeedForward {
            w1: Matrix::zeros(hidden, dim),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(dim, hidden),
            b2: Matrix::zeros(1, dim),
        }
    }

    /// Gaussian weights with std `1/sqrt(fan_in)` (scaled by `out_scale` on
    /// the second layer), zero biases.
    pub fn random(dim: usize, hidden: usize, out_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let w1 = gaussian(hidden, dim, 1.0 / (dim as f64).sqrt(), rng);
        let w2 = gaussian(dim, hidden, out_scale / (hidden as f64).sqrt(), rng);
        FeedForward {
            w1,
            b1: Matrix::zeros(1, hidden),
            w2,
            b2: Matrix::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    fn check(&self) -> Result<()> {
        let (h, d) = self.w1.shape();
        if self.b1.shape() != (1, h) || self.w2.shape() != (d, h) || self.b2.shape() != (1, d) {
            return Err(Error::dim("feed-forward", "inconsistent parameter shapes"));
        }
        Ok(())
    }

    /// Row-wise application to an n×D matrix.
    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = x.matmul_transposed(&self.w1)?;
        add_row_in_place(&mut h, &self.b1);
        let h = h.map(gelu);
        let mut y = h.matmul_transposed(&self.w2)?;
        add_row_in_place(&mut y, &self.b2);
        Ok(y)
    }

    pub fn leaves(&self, graph: &mut Graph<T>) -> FeedForwardNodes {
        FeedForwardNodes {
            w1: graph.leaf(self.w1.clone()),
            b1: graph.leaf(self.b1.clone()),
            w2: graph.leaf(self.w2.clone()),
            b2: graph.leaf(self.b2.clone()),
        }
    }

    pub fn constants(&self, graph: &mut Graph<T>) -> FeedForwardNodes {
        FeedForwardNodes {
            w1: graph.constant(self.w1.clone()),
            b1: graph.constant(self.b1.clone()),
            w2: graph.constant(self.w2.clone()),
            b2: graph.constant(self.b2.clone()),
        }
    }
}

impl FeedForwardNodes {
    pub fn record<T: Scalar>(&self, graph: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let h = graph.matmul_t(x, self.w1)?;
        let h = graph.add_row(h, self.b1)?;
        let h = graph.gelu(h);
        let y = graph.matmul_t(h, self.w2)?;
        graph.add_row(y, self.b2)
    }

    pub fn to_vec(self) -> Vec<NodeId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

fn add_row_in_place<T: Scalar>(m: &mut Matrix<T>, row: &Matrix<T>) {
    for r in 0..m.rows() {
        for (x, &b) in m.row_mut(r).iter_mut().zip(row.as_slice()) {
            *x = *x + b;
        }
    }
}

pub(crate) fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix<T> {
    if std == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| T::lit(normal.sample(rng)))
}

/// The experts of one MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSet<T> {
    pub experts: Vec<FeedForward<T>>,
}

impl<T: Scalar> ExpertSet<T> {
    pub fn new(experts: Vec<FeedForward<T>>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Parameter("expert set is empty".into()))?;
        for e in &experts {
            e.check()?;
            if e.w1.shape() != first.w1.shape() {
                return Err(Error::dim("expert set", "experts differ in shape"));
            }
            if ![&e.w1, &e.b1, &e.w2, &e.b2].iter().all(|m| m.is_finite()) {
                return Err(Error::Parameter("expert parameters must be finite".into()));
            }
        }
        Ok(ExpertSet { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }
}

/// One (token, expert) pairing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment<T> {
    pub expert: usize,
    /// Gate probability of `expert` for this token.
    pub weight: T,
    /// Buffer slot, or `None` when the buffer was already full.
    pub slot: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DispatchPlan<T> {
    pub assignments: Vec<Vec<Assignment<T>>>,
    pub occupancy: Vec<usize>,
    pub capacity: usize,
}

impl<T: Scalar> DispatchPlan<T> {
    pub fn num_tokens(&self) -> usize {
        self.assignments.len()
    }

    pub fn num_experts(&self) -> usize {
        self.occupancy.len()
    }

    /// A token is dropped when none of its assignments found room.
    pub fn is_dropped(&self, token: usize) -> bool {
        self.assignments[token].iter().all(|a| a.slot.is_none())
    }

    pub fn dropped_assignments(&self) -> usize {
        self.assignments
            .iter()
            .flatten()
            .filter(|a| a.slot.is_none())
            .count()
    }

    /// The first-choice expert of each token, dropped or not.
    pub fn primary_expert(&self, token: usize) -> usize {
        self.assignments[token][0].expert
    }

    /// Tokens held by `expert`, in slot order.
    pub fn tokens_for_expert(&self, expert: usize) -> Vec<usize> {
        let mut held: Vec<(usize, usize)> = self
            .assignments
            .iter()
            .enumerate()
            .filter_map(|(t, list)| {
                list.iter()
                    .find(|a| a.expert == expert)
                    .and_then(|a| a.slot.map(|s| (s, t)))
            })
            .collect();
        held.sort_unstable();
        held.into_iter().map(|(_, t)| t).collect()
    }
}

/// Assigns every token to expert buffers.
///
/// `seed` drives the uniform choice among mapped experts in forced mode and
/// is ignored otherwise.
pub fn build_plan<T: Scalar>(
    gate: &GateOutput<T>,
    cfg: &RoutingConfig,
    mapping: Option<&MappingTable>,
    dataset_ids: &[usize],
    seed: u64,
) -> Result<DispatchPlan<T>> {
    cfg.validate()?;
    let tokens = gate.num_tokens();
    if gate.num_experts() != cfg.num_experts {
        return Err(Error::dim(
            "build_plan",
            format!("gate has {} experts, config {}", gate.num_experts(), cfg.num_experts),
        ));
    }
    if dataset_ids.len() != tokens {
        return Err(Error::dim(
            "build_plan",
            format!("{tokens} gated tokens, {} dataset ids", dataset_ids.len()),
        ));
    }

    let choices: Vec<Vec<usize>> = match cfg.dispatch_mode {
        DispatchMode::RouterArgmax => {
            if gate.topk.iter().any(|c| c.len() < cfg.k) {
                return Err(Error::Contract(format!("gate was built with fewer than k = {} choices", cfg.k)));
            }
            gate.topk
                .iter()
                .map(|c| c.iter().take(cfg.k).map(|ch| ch.expert).collect())
                .collect()
        }
        DispatchMode::ForcedMapping => {
            let mapping = mapping.ok_or_else(|| {
                Error::config(None, "forced_mapping dispatch needs a dataset -> expert mapping")
            })?;
            if mapping.num_experts() != cfg.num_experts {
                return Err(Error::config(
                    None,
                    format!(
                        "mapping is for {} experts, routing config has {}",
                        mapping.num_experts(),
                        cfg.num_experts
                    ),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            dataset_ids
                .iter()
                .map(|&d| {
                    let experts = mapping.experts(d)?;
                    let pick = if experts.len() == 1 {
                        experts[0]
                    } else {
                        experts[rng.random_range(0..experts.len())]
                    };
                    Ok(vec![pick])
                })
                .collect::<Result<_>>()?
        }
    };

    let cap = capacity(tokens, cfg);
    let mut occupancy = vec![0usize; cfg.num_experts];
    let assignments = choices
        .into_iter()
        .enumerate()
        .map(|(t, experts)| {
            experts
                .into_iter()
                .map(|e| {
                    let slot = (occupancy[e] < cap).then(|| {
                        occupancy[e] += 1;
                        occupancy[e] - 1
                    });
                    Assignment {
                        expert: e,
                        weight: gate.probs[(t, e)],
                        slot,
                    }
                })
                .collect()
        })
        .collect();
    Ok(DispatchPlan {
        assignments,
        occupancy,
        capacity: cap,
    })
}

fn check_plan<T: Scalar>(features: usize, experts: usize, plan: &DispatchPlan<T>) -> Result<()> {
    if plan.num_tokens() != features {
        return Err(Error::Contract(format!(
            "plan covers {} tokens, batch has {features}",
            plan.num_tokens()
        )));
    }
    if plan.num_experts() != experts {
        return Err(Error::Contract(format!(
            "plan routes to {} experts, layer has {experts}",
            plan.num_experts()
        )));
    }
    Ok(())
}

/// Anything that maps an n×D block of tokens to n×D outputs row by row.
pub trait Expert<T> {
    fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>>;
}

impl<T: Scalar> Expert<T> for FeedForward<T> {
    fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.apply(x)
    }
}

/// `y_t = Σ p_e(x_t)·e(x_t)` over the token's non-dropped assignments, in
/// ascending expert order; dropped tokens map to zero.
pub fn moe_forward<T: Scalar, X: Expert<T>>(
    features: &Matrix<T>,
    experts: &[X],
    plan: &DispatchPlan<T>,
) -> Result<Matrix<T>> {
    check_plan(features.rows(), experts.len(), plan)?;
    let mut out = Matrix::zeros(features.rows(), features.cols());
    for (e, expert) in experts.iter().enumerate() {
        let held = plan.tokens_for_expert(e);
        if held.is_empty() {
            continue;
        }
        let mut x = Matrix::zeros(held.len(), features.cols());
        for (j, &t) in held.iter().enumerate() {
            x.row_mut(j).copy_from_slice(features.row(t));
        }
        let y = expert.forward(&x)?;
        for (j, &t) in held.iter().enumerate() {
            let w = plan.assignments[t]
                .iter()
                .find(|a| a.expert == e)
                .map(|a| a.weight)
                .expect("held token has an assignment");
            for (o, &v) in out.row_mut(t).iter_mut().zip(y.row(j)) {
                *o = *o + v * w;
            }
        }
    }
    Ok(out)
}

/// Differentiable [`moe_forward`]. Combine weights are read from `probs`, so
/// gradients reach the router; each expert is recorded as its own region and
/// may be built on the thread pool when `parallel` is set.
pub fn moe_forward_node<T: Scalar>(
    graph: &mut Graph<T>,
    features: NodeId,
    probs: NodeId,
    experts: &[FeedForwardNodes],
    plan: &DispatchPlan<T>,
    parallel: bool,
) -> Result<NodeId> {
    let (rows, cols) = graph.value(features).shape();
    check_plan(rows, experts.len(), plan)?;
    let active: Vec<(usize, Vec<usize>)> = (0..experts.len())
        .map(|e| (e, plan.tokens_for_expert(e)))
        .filter(|(_, held)| !held.is_empty())
        .collect();
    if active.is_empty() {
        return Ok(graph.constant(Matrix::zeros(rows, cols)));
    }
    let inputs: Vec<Vec<NodeId>> = active
        .iter()
        .map(|&(e, _)| {
            let mut ins = vec![features, probs];
            ins.extend(experts[e].to_vec());
            ins
        })
        .collect();
    let outputs = graph.regions(inputs, parallel, |i, sub, locals| {
        let (e, held) = &active[i];
        let nodes = FeedForwardNodes {
            w1: locals[2],
            b1: locals[3],
            w2: locals[4],
            b2: locals[5],
        };
        let x = sub.gather_rows(locals[0], held.clone())?;
        let y = nodes.record(sub, x)?;
        let p = sub.gather_rows(locals[1], held.clone())?;
        let w = sub.column(p, *e)?;
        let y = sub.mul_col(y, w)?;
        sub.scatter_rows(y, held.clone(), rows)
    })?;
    let mut total = outputs[0];
    for &o in &outputs[1..] {
        total = graph.add(total, o)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DispatchStats {
    pub counts: Vec<usize>,
    pub dropped: usize,
    pub drop_rate: f64,
    /// Population std / mean of `counts`.
    pub occupancy_cov: f64,
}

pub fn dispatch_stats<T: Scalar>(plan: &DispatchPlan<T>) -> DispatchStats {
    let counts = plan.occupancy.clone();
    let dropped = plan.dropped_assignments();
    let total: usize = plan.assignments.iter().map(Vec::len).sum();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    DispatchStats {
        counts,
        dropped,
        drop_rate: if total == 0 { 0.0 } else { dropped as f64 / total as f64 },
        occupancy_cov: if mean == 0.0 { 0.0 } else { var.sqrt() / mean },
    }
}
