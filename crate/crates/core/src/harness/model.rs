//! Toy network of residual per-token blocks. Every second block (odd index)
//! is a mixture-of-experts block when MoE is enabled; the rest are dense
//! feed-forward blocks. A linear head maps to the union label space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dispatch::{
    build_plan, gaussian, moe_forward_node, DispatchMode, DispatchPlan, ExpertSet, FeedForward,
    FeedForwardNodes, RoutingConfig,
};
use crate::error::{Error, Result};
use crate::gating::{gate_node, GateOutput, RouterParams};
use crate::losses::{layer_aux_nodes, task_node, total_node, LossBundle, LossConfig};
use crate::mapping::MappingTable;
use crate::numeric::{Graph, Matrix, NodeId};
use crate::scalar::Scalar;
use crate::tokens::TokenBatch;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Size of the union label space.
    pub classes: usize,
    /// `false` builds an all-dense baseline.
    pub moe: bool,
    pub routing: RoutingConfig,
    pub loss: LossConfig,
    /// Std of the initial router weights.
    pub router_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 16,
            hidden: 32,
            blocks: 4,
            classes: 4,
            moe: true,
            routing: RoutingConfig::default(),
            loss: LossConfig::default(),
            router_init: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(Error::Parameter("dim, hidden and classes must be positive".into()));
        }
        if self.blocks < 2 {
            return Err(Error::Parameter(format!("need at least 2 blocks, got {}", self.blocks)));
        }
        if !(self.router_init >= 0.0) {
            return Err(Error::Parameter("router init std must be >= 0".into()));
        }
        self.routing.validate()?;
        self.loss.validate()
    }

    pub fn is_moe_block(&self, index: usize) -> bool {
        self.moe && index % 2 == 1
    }

    pub fn moe_blocks(&self) -> Vec<usize> {
        (0..self.blocks).filter(|&i| self.is_moe_block(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeBlock<T> {
    pub router: RouterParams<T>,
    pub experts: ExpertSet<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block<T> {
    Dense(FeedForward<T>),
    Moe(MoeBlock<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub blocks: Vec<Block<T>>,
    /// C×D
    pub head_w: Matrix<T>,
    /// 1×C
    pub head_b: Matrix<T>,
}

/// Separates the sampled-target stream from the forced-dispatch stream.
const TARGET_STREAM: u64 = 0x7461_7267_6574;

/// How a forward pass routes and records.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    /// Parameters become graph leaves (gradients wanted) rather than constants.
    pub trainable: bool,
    pub dispatch_mode: DispatchMode,
    pub mapping: Option<&'a MappingTable>,
    /// Seed for the forced-mapping expert choice.
    pub plan_seed: u64,
    /// Build expert regions on the thread pool.
    pub parallel: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn inference() -> Self {
        ForwardOptions {
            trainable: false,
            dispatch_mode: DispatchMode::RouterArgmax,
            mapping: None,
            plan_seed: 0,
            parallel: false,
        }
    }
}

/// Routing record of one MoE block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRouting<T> {
    pub block: usize,
    pub gate: GateOutput<T>,
    pub plan: DispatchPlan<T>,
}

pub struct Recorded<T> {
    /// Parameter nodes in [`Model::param_names`] order.
    pub params: Vec<NodeId>,
    pub logits: NodeId,
    pub layers: Vec<LayerRouting<T>>,
    pub probs: Vec<NodeId>,
    /// `plan_seed` of the pass; sampled loss targets derive from it.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub logits: Matrix<T>,
    pub layers: Vec<LayerRouting<T>>,
}

enum BlockNodes {
    Dense(FeedForwardNodes),
    Moe {
        router: NodeId,
        experts: Vec<FeedForwardNodes>,
    },
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.dim, config.hidden);
        let blocks = (0..config.blocks)
            .map(|i| {
                if config.is_moe_block(i) {
                    let router = RouterParams::new(
                        gaussian(config.routing.num_experts, d, config.router_init, &mut rng),
                        T::lit(config.loss.gate_noise),
                    )?;
                    let experts = (0..config.routing.num_experts)
                        .map(|_| FeedForward::random(d, h, 0.5, &mut rng))
                        .collect();
                    Ok(Block::Moe(MoeBlock {
                        router,
                        experts: ExpertSet::new(experts)?,
                    }))
                } else {
                    Ok(Block::Dense(FeedForward::random(d, h, 0.5, &mut rng)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let head_w = gaussian(config.classes, d, 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Model {
            head_b: Matrix::zeros(1, config.classes),
            head_w,
            blocks,
            config,
        })
    }

    /// Parameter names, fixed order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Dense(_) => {
                    for p in ["w1", "b1", "w2", "b2"] {
                        names.push(format!("block{i}.ffn.{p}"));
                    }
                }
                Block::Moe(m) => {
                    names.push(format!("block{i}.router"));
                    for e in 0..m.experts.len() {
                        for p in ["w1", "b1", "w2", "b2"] {
                            names.push(format!("block{i}.expert{e}.{p}"));
                        }
                    }
                }
            }
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }

    pub fn params(&self) -> Vec<&Matrix<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Dense(f) => out.extend([&f.w1, &f.b1, &f.w2, &f.b2]),
                Block::Moe(m) => {
                    out.push(&m.router.weights);
                    for f in &m.experts.experts {
                        out.extend([&f.w1, &f.b1, &f.w2, &f.b2]);
                    }
                }
            }
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            match b {
                Block::Dense(f) => out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]),
                Block::Moe(m) => {
                    out.push(&mut m.router.weights);
                    for f in &mut m.experts.experts {
                        out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
                    }
                }
            }
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Overwrites parameters in [`Model::param_names`] order.
    pub fn set_params(&mut self, values: Vec<Matrix<T>>) -> Result<()> {
        let slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::Contract(format!(
                "model has {} parameters, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::dim(
                    "set_params",
                    format!("{:?} vs {:?}", slot.shape(), v.shape()),
                ));
            }
            *slot = v;
        }
        Ok(())
    }

    /// Records the forward pass on `graph`.
    pub fn record(&self, graph: &mut Graph<T>, batch: &TokenBatch<T>, opts: &ForwardOptions) -> Result<Recorded<T>> {
        if batch.dim() != self.config.dim {
            return Err(Error::dim(
                "forward",
                format!("tokens have {} features, model expects {}", batch.dim(), self.config.dim),
            ));
        }
        let mut params = Vec::new();
        let mut put = |graph: &mut Graph<T>, m: &Matrix<T>| {
            let id = if opts.trainable {
                graph.leaf(m.clone())
            } else {
                graph.constant(m.clone())
            };
            params.push(id);
            id
        };
        let block_nodes: Vec<BlockNodes> = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Dense(f) => BlockNodes::Dense(ffn_nodes(graph, f, &mut put)),
                Block::Moe(m) => BlockNodes::Moe {
                    router: put(graph, &m.router.weights),
                    experts: m.experts.experts.iter().map(|f| ffn_nodes(graph, f, &mut put)).collect(),
                },
            })
            .collect();
        let head_w = put(graph, &self.head_w);
        let head_b = put(graph, &self.head_b);

        let mut h = graph.constant(batch.features.clone());
        let mut layers = Vec::new();
        let mut probs_nodes = Vec::new();
        for (i, nodes) in block_nodes.iter().enumerate() {
            let update = match nodes {
                BlockNodes::Dense(f) => f.record(graph, h)?,
                BlockNodes::Moe { router, experts } => {
                    let (logits, probs) = gate_node(graph, h, *router)?;
                    let gate = GateOutput::from_logits(graph.value(logits).clone(), self.config.routing.k)?;
                    let mut routing = self.config.routing.clone();
                    routing.dispatch_mode = opts.dispatch_mode;
                    let plan = build_plan(
                        &gate,
                        &routing,
                        opts.mapping,
                        &batch.dataset_ids,
                        opts.plan_seed.wrapping_add(i as u64),
                    )?;
                    let y = moe_forward_node(graph, h, probs, experts, &plan, opts.parallel)?;
                    layers.push(LayerRouting { block: i, gate, plan });
                    probs_nodes.push(probs);
                    y
                }
            };
            h = graph.add(h, update)?;
        }
        let logits = graph.matmul_t(h, head_w)?;
        let logits = graph.add_row(logits, head_b)?;
        Ok(Recorded {
            params,
            logits,
            layers,
            probs: probs_nodes,
            seed: opts.plan_seed,
        })
    }

    /// Value-only forward pass.
    pub fn forward(&self, batch: &TokenBatch<T>, opts: &ForwardOptions) -> Result<ForwardOutput<T>> {
        let mut graph = Graph::new();
        let opts = ForwardOptions {
            trainable: false,
            ..*opts
        };
        let rec = self.record(&mut graph, batch, &opts)?;
        Ok(ForwardOutput {
            logits: graph.value(rec.logits).clone(),
            layers: rec.layers,
        })
    }

    /// Records the training objective: task cross-entropy over foreground
    /// tokens plus the weighted auxiliary term averaged over MoE layers.
    pub fn record_loss(
        &self,
        graph: &mut Graph<T>,
        rec: &Recorded<T>,
        batch: &TokenBatch<T>,
        mapping: Option<&MappingTable>,
    ) -> Result<(NodeId, LossBundle)> {
        let task = task_node(graph, rec.logits, &batch.labels, &batch.foreground)?;
        let cfg = &self.config.loss;
        let aux = rec
            .probs
            .iter()
            .zip(&rec.layers)
            .map(|(&p, layer)| {
                let seed = (rec.seed ^ TARGET_STREAM).wrapping_add(layer.block as u64);
                layer_aux_nodes(graph, p, &batch.dataset_ids, &batch.foreground, mapping, cfg, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        total_node(graph, task, &aux, cfg)
    }

    /// Loss bundle and parameter gradients for one batch.
    pub fn loss_and_gradients(
        &self,
        batch: &TokenBatch<T>,
        opts: &ForwardOptions,
    ) -> Result<(LossBundle, Vec<Matrix<T>>, Vec<LayerRouting<T>>)> {
        let mut graph = Graph::new();
        let opts = ForwardOptions {
            trainable: true,
            ..*opts
        };
        let rec = self.record(&mut graph, batch, &opts)?;
        let (total, bundle) = self.record_loss(&mut graph, &rec, batch, opts.mapping)?;
        let grads = graph.backward(total)?;
        Ok((bundle, rec.params.iter().map(|&p| grads.get(p)).collect(), rec.layers))
    }
}

fn ffn_nodes<T: Scalar>(
    graph: &mut Graph<T>,
    f: &FeedForward<T>,
    put: &mut impl FnMut(&mut Graph<T>, &Matrix<T>) -> NodeId,
) -> FeedForwardNodes {
    FeedForwardNodes {
        w1: put(graph, &f.w1),
        b1: put(graph, &f.b1),
        w2: put(graph, &f.w2),
        b2: put(graph, &f.b2),
    }
}

/// Argmax of each logit row; ties go to the lower class.
pub fn predictions<T: Scalar>(logits: &Matrix<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
