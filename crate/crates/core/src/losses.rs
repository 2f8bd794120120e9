//! Task and auxiliary losses.
//!
//! Balance losses follow the squared-coefficient-of-variation form: sum a
//! per-expert quantity over the (foreground) tokens and take
//! `Var/Mean²` with population variance. The importance quantity is the raw
//! gate probability; the load quantity is the probability passed through the
//! N(0, σ²) CDF with `σ = gate_noise / E`. The dataset-aware loss is a
//! cross-entropy between gate probabilities and the uniform distribution
//! over each token's mapped experts, or optionally a one-hot target on one
//! mapped expert drawn per token.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mapping::MappingTable;
use crate::numeric::{Graph, Matrix, NodeId};
use crate::scalar::Scalar;

/// Floor applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AuxMode {
    LoadBalancing,
    #[default]
    Damex,
    Both,
}

impl FromStr for AuxMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "load_balancing" => Ok(AuxMode::LoadBalancing),
            "damex" => Ok(AuxMode::Damex),
            "both" => Ok(AuxMode::Both),
            other => Err(format!("unknown aux mode {other:?} (load_balancing, damex, both)")),
        }
    }
}

impl fmt::Display for AuxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxMode::LoadBalancing => "load_balancing",
            AuxMode::Damex => "damex",
            AuxMode::Both => "both",
        })
    }
}

/// Target of the dataset-aware loss for datasets mapped to several experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DamexTarget {
    /// Uniform soft label over the mapped experts.
    #[default]
    Uniform,
    /// One mapped expert drawn uniformly per token, as a one-hot label.
    Sampled,
}

impl FromStr for DamexTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(DamexTarget::Uniform),
            "sampled" => Ok(DamexTarget::Sampled),
            other => Err(format!("unknown damex target {other:?} (uniform, sampled)")),
        }
    }
}

impl fmt::Display for DamexTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DamexTarget::Uniform => "uniform",
            DamexTarget::Sampled => "sampled",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub aux_weight: f64,
    pub aux_mode: AuxMode,
    pub gate_noise: f64,
    pub foreground_only: bool,
    pub damex_target: DamexTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            aux_weight: 0.1,
            aux_mode: AuxMode::Damex,
            gate_noise: 1.0,
            foreground_only: true,
            damex_target: DamexTarget::Uniform,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.aux_weight >= 0.0) || !self.aux_weight.is_finite() {
            return Err(Error::Parameter(format!("aux weight must be >= 0, got {}", self.aux_weight)));
        }
        if !(self.gate_noise > 0.0) || !self.gate_noise.is_finite() {
            return Err(Error::Parameter(format!("gate noise must be > 0, got {}", self.gate_noise)));
        }
        Ok(())
    }

    /// Tokens that count toward auxiliary losses.
    pub fn aux_mask(&self, foreground: &[bool]) -> Vec<bool> {
        if self.foreground_only {
            foreground.to_vec()
        } else {
            vec![true; foreground.len()]
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub task: f64,
    pub importance: f64,
    pub load: f64,
    pub load_balancing: f64,
    pub damex: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.task, self.importance, self.load, self.load_balancing, self.damex, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn mask_row<T: Scalar>(mask: &[bool], rows: usize, what: &str) -> Result<Matrix<T>> {
    if mask.len() != rows {
        return Err(Error::dim("loss mask", format!("{} flags for {rows} tokens", mask.len())));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateBatch(format!("{what}: every token is masked out")));
    }
    Ok(Matrix::row_vector(
        mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect(),
    ))
}

/// `Var(I)/Mean(I)²` with `I_e = Σ_masked p_e(x)`.
pub fn importance_node<T: Scalar>(graph: &mut Graph<T>, probs: NodeId, mask: &[bool]) -> Result<NodeId> {
    let m = mask_row(mask, graph.value(probs).rows(), "importance loss")?;
    let m = graph.constant(m);
    let per_expert = graph.matmul(m, probs)?;
    graph.squared_cv(per_expert)
}

/// `Var(L)/Mean(L)²` with `L_e = Σ_masked Φ(p_e(x))`, Φ the N(0, (gate_noise/E)²) CDF.
pub fn load_node<T: Scalar>(graph: &mut Graph<T>, probs: NodeId, gate_noise: T, mask: &[bool]) -> Result<NodeId> {
    if !(gate_noise > T::zero()) {
        return Err(Error::Parameter(format!("load loss needs gate noise > 0, got {gate_noise}")));
    }
    let (rows, experts) = graph.value(probs).shape();
    let m = mask_row(mask, rows, "load loss")?;
    let sigma = gate_noise / T::from_count(experts);
    let smoothed = graph.normal_cdf(probs, sigma)?;
    let m = graph.constant(m);
    let per_expert = graph.matmul(m, smoothed)?;
    graph.squared_cv(per_expert)
}

/// Mean over masked tokens of `−Σ_e q_e log max(p_e, 1e-12)`, `q` uniform on
/// the token's mapped experts.
pub fn damex_node<T: Scalar>(
    graph: &mut Graph<T>,
    probs: NodeId,
    dataset_ids: &[usize],
    mapping: &MappingTable,
    mask: &[bool],
) -> Result<NodeId> {
    damex_with_targets(graph, probs, dataset_ids, mapping, mask, None)
}

/// [`damex_node`] with a one-hot `q` on one mapped expert per token, drawn
/// uniformly from `seed`. Tokens with a single mapped expert are unaffected.
pub fn damex_node_sampled<T: Scalar>(
    graph: &mut Graph<T>,
    probs: NodeId,
    dataset_ids: &[usize],
    mapping: &MappingTable,
    mask: &[bool],
    seed: u64,
) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    damex_with_targets(graph, probs, dataset_ids, mapping, mask, Some(&mut rng))
}

fn damex_with_targets<T: Scalar>(
    graph: &mut Graph<T>,
    probs: NodeId,
    dataset_ids: &[usize],
    mapping: &MappingTable,
    mask: &[bool],
    mut sampler: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let (rows, experts) = graph.value(probs).shape();
    mask_row::<T>(mask, rows, "dataset-aware loss")?;
    if dataset_ids.len() != rows {
        return Err(Error::dim("damex loss", format!("{} dataset ids for {rows} tokens", dataset_ids.len())));
    }
    if mapping.num_experts() != experts {
        return Err(Error::Mapping(format!(
            "mapping covers {} experts, gate has {experts}",
            mapping.num_experts()
        )));
    }
    let count = T::from_count(mask.iter().filter(|&&m| m).count());
    let mut weights = Matrix::zeros(rows, experts);
    for (t, (&d, &m)) in dataset_ids.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = weights.row_mut(t);
        match sampler.as_deref_mut() {
            Some(rng) => {
                let mapped = mapping.experts(d)?;
                let e = mapped[rng.random_range(0..mapped.len())];
                row[e] = -T::one() / count;
            }
            None => {
                let q = mapping.target_distribution::<T>(d)?;
                for (w, qe) in row.iter_mut().zip(q) {
                    *w = -qe / count;
                }
            }
        }
    }
    let logp = graph.log_clamped(probs, T::lit(LOG_FLOOR));
    let weighted = graph.mul_const(logp, weights)?;
    Ok(graph.sum(weighted))
}

/// Mean softmax cross-entropy over tokens that are masked in and labelled.
pub fn task_node<T: Scalar>(
    graph: &mut Graph<T>,
    logits: NodeId,
    labels: &[Option<usize>],
    mask: &[bool],
) -> Result<NodeId> {
    let rows = graph.value(logits).rows();
    if labels.len() != rows || mask.len() != rows {
        return Err(Error::dim("task loss", format!("{rows} rows, {} labels, {} flags", labels.len(), mask.len())));
    }
    let targets: Vec<Option<usize>> = labels
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l } else { None })
        .collect();
    let n = targets.iter().filter(|t| t.is_some()).count();
    if n == 0 {
        return Err(Error::DegenerateBatch("task loss: no labelled tokens".into()));
    }
    let w = T::one() / T::from_count(n);
    graph.softmax_cross_entropy(logits, targets, vec![w; rows])
}

fn eval<T: Scalar>(build: impl FnOnce(&mut Graph<T>, NodeId) -> Result<NodeId>, probs: &Matrix<T>) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let out = build(&mut g, p)?;
    g.value(out).item()
}

pub fn importance_loss<T: Scalar>(probs: &Matrix<T>, mask: &[bool]) -> Result<T> {
    eval(|g, p| importance_node(g, p, mask), probs)
}

pub fn load_loss<T: Scalar>(probs: &Matrix<T>, gate_noise: T, mask: &[bool]) -> Result<T> {
    eval(|g, p| load_node(g, p, gate_noise, mask), probs)
}

pub fn load_balancing_loss<T: Scalar>(importance: T, load: T) -> T {
    (importance + load) * T::lit(0.5)
}

pub fn damex_loss<T: Scalar>(
    probs: &Matrix<T>,
    dataset_ids: &[usize],
    mapping: &MappingTable,
    mask: &[bool],
) -> Result<T> {
    eval(|g, p| damex_node(g, p, dataset_ids, mapping, mask), probs)
}

pub fn task_loss<T: Scalar>(logits: &Matrix<T>, labels: &[Option<usize>], mask: &[bool]) -> Result<T> {
    eval(|g, z| task_node(g, z, labels, mask), logits)
}

/// Auxiliary loss nodes of one MoE layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerAuxNodes {
    pub importance: NodeId,
    pub load: NodeId,
    pub damex: Option<NodeId>,
}

/// Records all auxiliary terms for one layer. The dataset-aware term is
/// present only when a mapping is supplied; `seed` drives sampled targets.
pub fn layer_aux_nodes<T: Scalar>(
    graph: &mut Graph<T>,
    probs: NodeId,
    dataset_ids: &[usize],
    foreground: &[bool],
    mapping: Option<&MappingTable>,
    cfg: &LossConfig,
    seed: u64,
) -> Result<LayerAuxNodes> {
    let mask = cfg.aux_mask(foreground);
    Ok(LayerAuxNodes {
        importance: importance_node(graph, probs, &mask)?,
        load: load_node(graph, probs, T::lit(cfg.gate_noise), &mask)?,
        damex: mapping
            .map(|m| match cfg.damex_target {
                DamexTarget::Uniform => damex_node(graph, probs, dataset_ids, m, &mask),
                DamexTarget::Sampled => damex_node_sampled(graph, probs, dataset_ids, m, &mask, seed),
            })
            .transpose()?,
    })
}

/// Averages the per-layer auxiliary terms, forms
/// `total = task + aux_weight · aux`, and returns the total node together
/// with the evaluated bundle.
pub fn total_node<T: Scalar>(
    graph: &mut Graph<T>,
    task: NodeId,
    layers: &[LayerAuxNodes],
    cfg: &LossConfig,
) -> Result<(NodeId, LossBundle)> {
    let mut bundle = LossBundle {
        task: graph.value(task).item()?.as_f64(),
        ..LossBundle::default()
    };
    if layers.is_empty() || cfg.aux_weight == 0.0 {
        for l in layers {
            accumulate_report(graph, l, layers.len(), &mut bundle)?;
        }
        bundle.total = bundle.task;
        return Ok((task, bundle));
    }

    let inv_layers = T::one() / T::from_count(layers.len());
    let mut aux_terms = Vec::new();
    for l in layers {
        accumulate_report(graph, l, layers.len(), &mut bundle)?;
        match cfg.aux_mode {
            AuxMode::LoadBalancing => aux_terms.push(balancing(graph, l)?),
            AuxMode::Damex => aux_terms.push(require_damex(l)?),
            AuxMode::Both => {
                let lb = balancing(graph, l)?;
                let dx = require_damex(l)?;
                aux_terms.push(graph.add(lb, dx)?);
            }
        }
    }
    let mut aux = aux_terms[0];
    for &a in &aux_terms[1..] {
        aux = graph.add(aux, a)?;
    }
    let aux = graph.scale(aux, inv_layers * T::lit(cfg.aux_weight));
    let total = graph.add(task, aux)?;
    bundle.total = graph.value(total).item()?.as_f64();
    Ok((total, bundle))
}

fn balancing<T: Scalar>(graph: &mut Graph<T>, l: &LayerAuxNodes) -> Result<NodeId> {
    let s = graph.add(l.importance, l.load)?;
    Ok(graph.scale(s, T::lit(0.5)))
}

fn require_damex(l: &LayerAuxNodes) -> Result<NodeId> {
    l.damex
        .ok_or_else(|| Error::config(None, "dataset-aware auxiliary loss needs a dataset -> expert mapping"))
}

fn accumulate_report<T: Scalar>(
    graph: &Graph<T>,
    l: &LayerAuxNodes,
    layers: usize,
    bundle: &mut LossBundle,
) -> Result<()> {
    let n = layers as f64;
    let imp = graph.value(l.importance).item()?.as_f64();
    let load = graph.value(l.load).item()?.as_f64();
    bundle.importance += imp / n;
    bundle.load += load / n;
    bundle.load_balancing += load_balancing_loss(imp, load) / n;
    if let Some(d) = l.damex {
        bundle.damex += graph.value(d).item()?.as_f64() / n;
    }
    Ok(())
}

/// Composes a bundle from already-evaluated per-layer terms.
pub fn total_loss(task: f64, layers: &[(f64, f64, Option<f64>)], cfg: &LossConfig) -> Result<LossBundle> {
    let n = layers.len().max(1) as f64;
    let mut b = LossBundle {
        task,
        ..LossBundle::default()
    };
    let mut aux = 0.0;
    for &(imp, load, damex) in layers {
        let lb = load_balancing_loss(imp, load);
        b.importance += imp / n;
        b.load += load / n;
        b.load_balancing += lb / n;
        b.damex += damex.unwrap_or(0.0) / n;
        let need = || damex.ok_or_else(|| Error::config(None, "dataset-aware loss needs a mapping"));
        aux += match cfg.aux_mode {
            AuxMode::LoadBalancing => lb,
            AuxMode::Damex => need()?,
            AuxMode::Both => lb + need()?,
        } / n;
    }
    b.total = task + cfg.aux_weight * aux;
    Ok(b)
}
