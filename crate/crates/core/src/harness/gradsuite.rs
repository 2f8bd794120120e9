//! Finite-difference verification of every loss and of the full model
//! objective on small random instances.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dispatch::{gaussian, DispatchMode, RoutingConfig};
use crate::error::{Error, Result};
use crate::gating::gate_node;
use crate::losses::{damex_node, importance_node, load_node, task_node, AuxMode, LossConfig};
use crate::mapping::MappingTable;
use crate::numeric::{finite_diff_check, Graph, Matrix, NodeId};
use crate::tokens::TokenBatch;

use super::model::{ForwardOptions, Model, ModelConfig};

pub const CHECKS: [&str; 6] = ["importance", "load", "load_balancing", "damex", "task", "model"];

#[derive(Clone, Debug, PartialEq)]
pub struct GradSuiteConfig {
    pub seed: u64,
    pub instances: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Test hook: perturb the analytic gradient of the named check so it fails.
    pub corrupt: Option<String>,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        GradSuiteConfig {
            seed: 0,
            instances: 100,
            eps: 1e-5,
            tolerance: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    /// Instance seed that produced the worst error.
    pub worst_seed: u64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSuiteReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }
}

const DIM: usize = 3;
const EXPERTS: usize = 3;
const TOKENS: usize = 7;
const CLASSES: usize = 3;
const GATE_NOISE: f64 = 1.0;
/// Smallest allowed top-1/top-2 probability gap, so that a finite-difference
/// step never flips a routing decision.
const MIN_GAP: f64 = 1e-3;
const MIN_RESOLVABLE: f64 = 1e-6;

struct Instance {
    x: Matrix<f64>,
    router: Matrix<f64>,
    head: Matrix<f64>,
    ids: Vec<usize>,
    foreground: Vec<bool>,
    labels: Vec<Option<usize>>,
    mapping: MappingTable,
}

impl Instance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let x = gaussian(TOKENS, DIM, 1.0, rng);
        let router = gaussian(EXPERTS, DIM, 1.0, rng);
        let head = gaussian(CLASSES, DIM, 1.0, rng);
        let ids: Vec<usize> = (0..TOKENS).map(|_| rng.random_range(0..3)).collect();
        let mut foreground: Vec<bool> = (0..TOKENS).map(|_| rng.random_bool(0.7)).collect();
        foreground[0] = true;
        foreground[1] = true;
        let labels = foreground
            .iter()
            .map(|&f| f.then(|| rng.random_range(0..CLASSES)))
            .collect();
        let mapping = MappingTable::new(EXPERTS, [(0, vec![0]), (1, vec![1, 2]), (2, vec![0])]).expect("valid mapping");
        Instance {
            x,
            router,
            head,
            ids,
            foreground,
            labels,
            mapping,
        }
    }

    fn batch(&self) -> TokenBatch<f64> {
        TokenBatch::new(self.x.clone(), self.ids.clone(), self.foreground.clone(), self.labels.clone())
            .expect("consistent instance")
    }

    /// Router loss as a function of the router weights.
    fn router_objective(&self, which: &str, g: &mut Graph<f64>, w: NodeId) -> Result<NodeId> {
        let x = g.constant(self.x.clone());
        let (_, probs) = gate_node(g, x, w)?;
        let mask = &self.foreground;
        match which {
            "importance" => importance_node(g, probs, mask),
            "load" => load_node(g, probs, GATE_NOISE, mask),
            "load_balancing" => {
                let i = importance_node(g, probs, mask)?;
                let l = load_node(g, probs, GATE_NOISE, mask)?;
                let s = g.add(i, l)?;
                Ok(g.scale(s, 0.5))
            }
            "damex" => damex_node(g, probs, &self.ids, &self.mapping, mask),
            other => Err(Error::Parameter(format!("unknown router check {other}"))),
        }
    }

    fn task_objective(&self, g: &mut Graph<f64>, head: NodeId) -> Result<NodeId> {
        let x = g.constant(self.x.clone());
        let logits = g.matmul_t(x, head)?;
        task_node(g, logits, &self.labels, &self.foreground)
    }
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        dim: DIM,
        hidden: 4,
        blocks: 2,
        classes: CLASSES,
        moe: true,
        routing: RoutingConfig {
            num_experts: EXPERTS,
            k: 1,
            // capacity >= tokens: nothing is dropped
            capacity_factor: EXPERTS as f64,
            dispatch_mode: DispatchMode::RouterArgmax,
        },
        loss: LossConfig {
            aux_weight: 0.1,
            aux_mode: AuxMode::Both,
            gate_noise: GATE_NOISE,
            foreground_only: true,
            ..LossConfig::default()
        },
        router_init: 1.0,
    }
}

fn min_gap(probs: &Matrix<f64>) -> f64 {
    (0..probs.rows())
        .map(|r| {
            let mut row = probs.row(r).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            row[0] - row[1]
        })
        .fold(f64::INFINITY, f64::min)
}

fn corrupt(grad: Matrix<f64>, name: &str, cfg: &GradSuiteConfig) -> Matrix<f64> {
    if cfg.corrupt.as_deref() == Some(name) {
        grad.map(|g| g * 1.1 + 1e-3)
    } else {
        grad
    }
}

fn check_router(inst: &Instance, name: &str, cfg: &GradSuiteConfig) -> Result<f64> {
    let mut g = Graph::new();
    let w = g.leaf(inst.router.clone());
    let out = inst.router_objective(name, &mut g, w)?;
    let grad = corrupt(g.backward(out)?.get(w), name, cfg);
    let f = |theta: &Matrix<f64>| {
        let mut g = Graph::new();
        let w = g.constant(theta.clone());
        let out = inst.router_objective(name, &mut g, w)?;
        g.value(out).item()
    };
    Ok(finite_diff_check(f, &inst.router, &grad, cfg.eps)?.max_rel_error)
}

fn check_task(inst: &Instance, cfg: &GradSuiteConfig) -> Result<f64> {
    let mut g = Graph::new();
    let h = g.leaf(inst.head.clone());
    let out = inst.task_objective(&mut g, h)?;
    let grad = corrupt(g.backward(out)?.get(h), "task", cfg);
    let f = |theta: &Matrix<f64>| {
        let mut g = Graph::new();
        let h = g.constant(theta.clone());
        let out = inst.task_objective(&mut g, h)?;
        g.value(out).item()
    };
    Ok(finite_diff_check(f, &inst.head, &grad, cfg.eps)?.max_rel_error)
}

/// Draws a model with a clear top-1 margin on every token (so a
/// finite-difference step never flips a routing decision) and with no
/// gradient coordinate in `(0, MIN_RESOLVABLE)`: below that size a central
/// difference of an O(1) loss is dominated by the rounding of the loss
/// itself. Coordinates that are exactly zero are kept.
fn well_conditioned_model(
    inst: &Instance,
    opts: &ForwardOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(Model<f64>, Vec<Matrix<f64>>)> {
    let batch = inst.batch();
    loop {
        let model = Model::new(small_model_config(), rng.random())?;
        let out = model.forward(&batch, opts)?;
        if !out.layers.iter().all(|l| min_gap(&l.gate.probs) > MIN_GAP) {
            continue;
        }
        let (_, grads, _) = model.loss_and_gradients(&batch, opts)?;
        let resolvable = grads
            .iter()
            .flat_map(|g| g.as_slice())
            .all(|&v| v == 0.0 || v.abs() >= MIN_RESOLVABLE);
        if resolvable {
            return Ok((model, grads));
        }
    }
}

fn check_model(inst: &Instance, rng: &mut ChaCha8Rng, cfg: &GradSuiteConfig) -> Result<f64> {
    let batch = inst.batch();
    let opts = ForwardOptions {
        trainable: true,
        mapping: Some(&inst.mapping),
        ..ForwardOptions::inference()
    };
    let (model, grads) = well_conditioned_model(inst, &opts, rng)?;
    let params: Vec<Matrix<f64>> = model.params().into_iter().cloned().collect();
    let mut worst = 0.0f64;
    for (i, (theta, grad)) in params.iter().zip(grads).enumerate() {
        let grad = corrupt(grad, "model", cfg);
        let f = |candidate: &Matrix<f64>| {
            let mut m = model.clone();
            *m.params_mut()[i] = candidate.clone();
            let mut g = Graph::new();
            let rec = m.record(&mut g, &batch, &opts)?;
            let (total, _) = m.record_loss(&mut g, &rec, &batch, opts.mapping)?;
            g.value(total).item()
        };
        worst = worst.max(finite_diff_check(f, theta, &grad, cfg.eps)?.max_rel_error);
    }
    Ok(worst)
}

/// Runs every check on `cfg.instances` instances seeded `seed, seed+1, ...`.
pub fn run_gradsuite(cfg: &GradSuiteConfig) -> Result<GradSuiteReport> {
    if let Some(name) = &cfg.corrupt {
        if !CHECKS.contains(&name.as_str()) {
            return Err(Error::Parameter(format!("unknown check {name:?}")));
        }
    }
    let start = Instant::now();
    let mut checks: Vec<CheckResult> = CHECKS
        .iter()
        .map(|&name| CheckResult {
            name,
            max_rel_error: 0.0,
            worst_seed: cfg.seed,
            passed: true,
        })
        .collect();
    for n in 0..cfg.instances {
        let seed = cfg.seed.wrapping_add(n as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = Instance::random(&mut rng);
        for c in checks.iter_mut() {
            let err = match c.name {
                "task" => check_task(&inst, cfg)?,
                "model" => check_model(&inst, &mut rng, cfg)?,
                name => check_router(&inst, name, cfg)?,
            };
            if err > c.max_rel_error || err.is_nan() {
                c.max_rel_error = err;
                c.worst_seed = seed;
            }
        }
    }
    for c in &mut checks {
        c.passed = c.max_rel_error <= cfg.tolerance;
    }
    Ok(GradSuiteReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_suite_passes() {
        let report = run_gradsuite(&GradSuiteConfig { instances: 5, ..Default::default() }).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checks.len(), CHECKS.len());
    }

    #[test]
    fn corruption_names_the_check() {
        for name in CHECKS {
            let cfg = GradSuiteConfig {
                instances: 2,
                corrupt: Some(name.to_string()),
                ..Default::default()
            };
            let report = run_gradsuite(&cfg).unwrap();
            assert_eq!(report.failing(), vec![name]);
        }
        let bad = GradSuiteConfig { corrupt: Some("nope".into()), ..Default::default() };
        assert!(run_gradsuite(&bad).is_err());
    }
}
