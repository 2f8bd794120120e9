//! Mini-batch training and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dispatch::DispatchMode;
use crate::error::{Error, Result};
use crate::mapping::MappingTable;
use crate::numeric::Matrix;
use crate::scalar::Scalar;
use crate::tokens::TokenBatch;

use super::config::{Optimizer, RunConfig};
use super::data::Mixture;
use super::metrics::{collapse_score, routing_purity, utilization_matrix, EvalReport, LayerTrace, RunMetrics};
use super::model::{predictions, ForwardOptions, Model};

/// Loads the configured mixture: the CSV pair when given, else the preset.
pub fn load_data<T: Scalar>(cfg: &RunConfig) -> Result<Mixture<T>> {
    match (&cfg.data.train_csv, &cfg.data.eval_csv) {
        (Some(tr), Some(ev)) => Ok(Mixture {
            train: TokenBatch::read_csv(tr)?,
            eval: TokenBatch::read_csv(ev)?,
        }),
        _ => cfg.data.preset.generate(&cfg.data.options, cfg.data_seed()),
    }
}

/// Draws batches whose dataset composition is proportional to dataset
/// sizes, with at least one foreground token from every dataset.
pub struct BatchSampler {
    datasets: Vec<usize>,
    members: Vec<Vec<usize>>,
    foreground: Vec<Vec<usize>>,
    quotas: Vec<usize>,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new<T: Scalar>(data: &TokenBatch<T>, batch: usize, seed: u64) -> Result<Self> {
        let datasets = data.datasets();
        if datasets.is_empty() {
            return Err(Error::config(None, "training data is empty"));
        }
        if batch < datasets.len() {
            return Err(Error::config(
                None,
                format!("batch of {batch} cannot hold one token from each of {} datasets", datasets.len()),
            ));
        }
        let members: Vec<Vec<usize>> = datasets.iter().map(|&d| data.indices_of_dataset(d)).collect();
        let foreground: Vec<Vec<usize>> = members
            .iter()
            .map(|m| m.iter().copied().filter(|&i| data.foreground[i]).collect())
            .collect();
        if let Some(pos) = foreground.iter().position(Vec::is_empty) {
            return Err(Error::config(None, format!("dataset {} has no foreground tokens", datasets[pos])));
        }
        let total = data.len() as f64;
        let mut quotas: Vec<usize> = members
            .iter()
            .map(|m| ((batch as f64 * m.len() as f64 / total).round() as usize).max(1))
            .collect();
        // settle rounding on the largest dataset
        let largest = (0..quotas.len()).max_by_key(|&i| (members[i].len(), usize::MAX - i)).unwrap_or(0);
        let others: usize = quotas.iter().enumerate().filter(|&(i, _)| i != largest).map(|(_, q)| q).sum();
        quotas[largest] = batch.saturating_sub(others).max(1);
        Ok(BatchSampler {
            datasets,
            members,
            foreground,
            quotas,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Tokens drawn per dataset, in ascending dataset order.
    pub fn quotas(&self) -> Vec<(usize, usize)> {
        self.datasets.iter().copied().zip(self.quotas.iter().copied()).collect()
    }

    /// Indices into the training batch, in batch order.
    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut picked = Vec::new();
        for ((m, fg), &q) in self.members.iter().zip(&self.foreground).zip(&self.quotas) {
            picked.push(fg[self.rng.random_range(0..fg.len())]);
            for _ in 1..q {
                picked.push(m[self.rng.random_range(0..m.len())]);
            }
        }
        picked.shuffle(&mut self.rng);
        picked
    }
}

enum OptState<T> {
    Sgd,
    Adam {
        m: Vec<Matrix<T>>,
        v: Vec<Matrix<T>>,
        t: i32,
    },
}

struct Stepper<T> {
    lr: T,
    state: OptState<T>,
}

impl<T: Scalar> Stepper<T> {
    fn new(kind: Optimizer, lr: f64, params: &[&Matrix<T>]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Stepper {
            lr: T::lit(lr),
            state: match kind {
                Optimizer::Sgd => OptState::Sgd,
                Optimizer::Adam => OptState::Adam {
                    m: zeros(),
                    v: zeros(),
                    t: 0,
                },
            },
        }
    }

    fn apply(&mut self, params: Vec<&mut Matrix<T>>, grads: &[Matrix<T>]) {
        let lr = self.lr;
        match &mut self.state {
            OptState::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (x, &d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *x = *x - lr * d;
                    }
                }
            }
            OptState::Adam { m, v, t } => {
                let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
                *t += 1;
                let c1 = T::one() - b1.powi(*t);
                let c2 = T::one() - b2.powi(*t);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let slots = p.as_mut_slice().iter_mut().zip(g.as_slice());
                    for ((x, &d), (mi, vi)) in slots.zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice())) {
                        *mi = b1 * *mi + (T::one() - b1) * d;
                        *vi = b2 * *vi + (T::one() - b2) * d * d;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *x = *x - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub metrics: RunMetrics,
}

/// Trains a fresh model on `data`. Initialization, batch sampling and
/// forced-mapping choices all derive from `cfg.train.seed`.
///
/// On a non-finite loss the offending batch is written as CSV into
/// `dump_dir` (when given) and the run aborts.
pub fn train<T: Scalar>(cfg: &RunConfig, data: &Mixture<T>, dump_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let seed = cfg.train.seed;
    let mapping = cfg.mapping.as_ref();
    if let Some(m) = mapping {
        m.check_covers(data.train.datasets())?;
        m.check_covers(data.eval.datasets())?;
    }
    let mut model = Model::new(cfg.model.clone(), seed)?;
    let mut sampler = BatchSampler::new(&data.train, cfg.train.batch, seed.wrapping_add(1))?;
    let mut stepper = Stepper::new(cfg.train.optimizer, cfg.train.lr, &model.params());
    let mut metrics = RunMetrics::default();
    for step in 0..cfg.train.steps {
        let batch = data.train.select(&sampler.next_indices());
        let opts = ForwardOptions {
            trainable: true,
            dispatch_mode: cfg.model.routing.dispatch_mode,
            mapping,
            plan_seed: seed.wrapping_mul(0x9e37_79b9).wrapping_add(step as u64),
            parallel: cfg.train.parallel_experts,
        };
        let (bundle, grads, _) = model.loss_and_gradients(&batch, &opts)?;
        if !bundle.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            let mut detail = format!("{bundle:?}");
            if let Some(dir) = dump_dir {
                let path = dir.join(format!("nonfinite_batch_step{step}.csv"));
                std::fs::write(&path, batch.to_csv()).map_err(|e| Error::io(&path, e))?;
                detail.push_str(&format!("; batch written to {}", path.display()));
            }
            return Err(Error::NonFiniteLoss { step, detail });
        }
        metrics.steps.push((step, bundle));
        stepper.apply(model.params_mut(), &grads);
        let done = step + 1;
        let every = cfg.train.eval_every;
        if done == cfg.train.steps || (every > 0 && done % every == 0) {
            metrics.evals.push((done, evaluate(&model, &data.eval, mapping, cfg.train.batch)?));
        }
    }
    if cfg.train.steps == 0 {
        metrics.evals.push((0, evaluate(&model, &data.eval, mapping, cfg.train.batch)?));
    }
    Ok(TrainOutcome { model, metrics })
}

/// Router-argmax evaluation in chunks of `chunk` tokens (so capacity matches
/// training batches). Purity is reported only when a mapping is given.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &TokenBatch<T>,
    mapping: Option<&MappingTable>,
    chunk: usize,
) -> Result<EvalReport> {
    let (preds, traces) = routed_predictions(model, data, chunk)?;
    let mut accuracy: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (t, (&d, label)) in data.dataset_ids.iter().zip(&data.labels).enumerate() {
        if let Some(l) = label {
            let e = accuracy.entry(d).or_default();
            e.1 += 1;
            if preds[t] == *l {
                e.0 += 1;
            }
        }
    }
    let mask = &data.foreground;
    Ok(EvalReport {
        blocks: traces.iter().map(|t| t.block).collect(),
        accuracy: accuracy.into_iter().map(|(d, (h, n))| (d, h as f64 / n as f64)).collect(),
        purity: match mapping {
            Some(m) => routing_purity(&traces, &data.dataset_ids, m, mask)?,
            None => Vec::new(),
        },
        utilization: utilization_matrix(&traces, &data.dataset_ids, &data.datasets(), mask)?,
        collapse: collapse_score(&traces, mask),
        drop_rate: traces.iter().map(LayerTrace::drop_rate).collect(),
    })
}

/// Predicted classes and per-layer routing traces for every token.
pub fn routed_predictions<T: Scalar>(
    model: &Model<T>,
    data: &TokenBatch<T>,
    chunk: usize,
) -> Result<(Vec<usize>, Vec<LayerTrace>)> {
    let chunk = chunk.max(1);
    let mut preds = Vec::with_capacity(data.len());
    let mut traces: Vec<LayerTrace> = Vec::new();
    let opts = ForwardOptions {
        dispatch_mode: DispatchMode::RouterArgmax,
        ..ForwardOptions::inference()
    };
    for start in (0..data.len()).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(data.len())).collect();
        let out = model.forward(&data.select(&idx), &opts)?;
        preds.extend(predictions(&out.logits));
        for (i, r) in out.layers.iter().enumerate() {
            let t = LayerTrace::from_routing(r);
            match traces.get_mut(i) {
                Some(acc) => acc.extend(&t)?,
                None => traces.push(t),
            }
        }
    }
    Ok((preds, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{Preset, PresetOptions};

    #[test]
    fn sampler_quotas_and_minimum() {
        let opts = PresetOptions { shots: 50, ..Default::default() };
        let data: Mixture<f64> = Preset::Limited.generate(&opts, 0).unwrap();
        let mut s = BatchSampler::new(&data.train, 64, 1).unwrap();
        let q = s.quotas();
        assert_eq!(q.iter().map(|p| p.1).sum::<usize>(), 64);
        assert!(q[1].1 >= 1 && q[1].1 < q[0].1);
        for _ in 0..20 {
            let idx = s.next_indices();
            assert_eq!(idx.len(), 64);
            assert!(idx.iter().any(|&i| data.train.dataset_ids[i] == 1 && data.train.foreground[i]));
        }
        assert!(BatchSampler::new(&data.train, 1, 0).is_err());
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Matrix::from_rows(&[[1.0f64, -1.0]]);
        let g = Matrix::from_rows(&[[2.0, -0.5]]);
        let mut st = Stepper::new(Optimizer::Adam, 0.1, &[&p]);
        st.apply(vec![&mut p], &[g]);
        // first bias-corrected Adam step has magnitude lr in every coordinate
        assert!((p[(0, 0)] - 0.9).abs() < 1e-6 && (p[(0, 1)] + 0.9).abs() < 1e-6);
    }
}
