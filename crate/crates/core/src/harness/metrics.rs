//! Routing analyses: purity, utilization, collapse, plus the metrics CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::LossBundle;
use crate::mapping::MappingTable;
use crate::scalar::Scalar;

use super::model::LayerRouting;

/// Per-token routing record of one MoE layer, detached from the batch it
/// came from so records of several batches can be concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub block: usize,
    pub num_experts: usize,
    /// Row-major T×E gate probabilities.
    pub probs: Vec<f64>,
    /// First-choice expert per token.
    pub primary: Vec<usize>,
    /// Per token: no assignment found buffer room.
    pub dropped: Vec<bool>,
    pub dropped_assignments: usize,
    pub assignments: usize,
}

impl LayerTrace {
    pub fn from_routing<T: Scalar>(r: &LayerRouting<T>) -> Self {
        let n = r.plan.num_tokens();
        LayerTrace {
            block: r.block,
            num_experts: r.plan.num_experts(),
            probs: r.gate.probs.as_slice().iter().map(|p| p.as_f64()).collect(),
            primary: (0..n).map(|t| r.plan.primary_expert(t)).collect(),
            dropped: (0..n).map(|t| r.plan.is_dropped(t)).collect(),
            dropped_assignments: r.plan.dropped_assignments(),
            assignments: r.plan.assignments.iter().map(Vec::len).sum(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.primary.len()
    }

    pub fn prob_row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.num_experts..(t + 1) * self.num_experts]
    }

    /// Appends the tokens of `other` (same block and expert count).
    pub fn extend(&mut self, other: &LayerTrace) -> Result<()> {
        if other.block != self.block || other.num_experts != self.num_experts {
            return Err(Error::Contract("cannot merge traces of different layers".into()));
        }
        self.probs.extend_from_slice(&other.probs);
        self.primary.extend_from_slice(&other.primary);
        self.dropped.extend_from_slice(&other.dropped);
        self.dropped_assignments += other.dropped_assignments;
        self.assignments += other.assignments;
        Ok(())
    }

    pub fn drop_rate(&self) -> f64 {
        if self.assignments == 0 {
            0.0
        } else {
            self.dropped_assignments as f64 / self.assignments as f64
        }
    }
}

fn check_len(trace: &LayerTrace, n: usize) -> Result<()> {
    if trace.num_tokens() != n {
        return Err(Error::dim(
            "routing metrics",
            format!("trace has {} tokens, got {n} dataset ids", trace.num_tokens()),
        ));
    }
    Ok(())
}

/// Fraction of each dataset's masked tokens whose first-choice expert lies in
/// the dataset's mapped set, per layer. Datasets without masked tokens are
/// left out.
pub fn routing_purity(
    layers: &[LayerTrace],
    dataset_ids: &[usize],
    mapping: &MappingTable,
    mask: &[bool],
) -> Result<Vec<BTreeMap<usize, f64>>> {
    layers
        .iter()
        .map(|layer| {
            check_len(layer, dataset_ids.len())?;
            let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for (t, &d) in dataset_ids.iter().enumerate() {
                if !mask[t] {
                    continue;
                }
                let mapped = mapping.experts(d)?;
                let entry = hits.entry(d).or_default();
                entry.1 += 1;
                if mapped.contains(&layer.primary[t]) {
                    entry.0 += 1;
                }
            }
            Ok(hits.into_iter().map(|(d, (h, n))| (d, h as f64 / n as f64)).collect())
        })
        .collect()
}

/// Mean purity over datasets for each layer.
pub fn mean_purity(purity: &[BTreeMap<usize, f64>]) -> Vec<f64> {
    purity
        .iter()
        .map(|m| {
            if m.is_empty() {
                0.0
            } else {
                m.values().sum::<f64>() / m.len() as f64
            }
        })
        .collect()
}

/// |D|×E matrix of mean gate probabilities for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Utilization {
    pub block: usize,
    pub datasets: Vec<usize>,
    /// `None` for datasets without masked tokens.
    pub rows: Vec<Option<Vec<f64>>>,
}

pub fn utilization_matrix(
    layers: &[LayerTrace],
    dataset_ids: &[usize],
    datasets: &[usize],
    mask: &[bool],
) -> Result<Vec<Utilization>> {
    layers
        .iter()
        .map(|layer| {
            check_len(layer, dataset_ids.len())?;
            let e = layer.num_experts;
            let rows = datasets
                .iter()
                .map(|&d| {
                    let mut sum = vec![0.0; e];
                    let mut n = 0usize;
                    for (t, &id) in dataset_ids.iter().enumerate() {
                        if id == d && mask[t] {
                            n += 1;
                            for (s, &p) in sum.iter_mut().zip(layer.prob_row(t)) {
                                *s += p;
                            }
                        }
                    }
                    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
                })
                .collect();
            Ok(Utilization {
                block: layer.block,
                datasets: datasets.to_vec(),
                rows,
            })
        })
        .collect()
}

/// `1 − H(usage)/ln E` for an expert-usage distribution (need not be
/// normalized). A single expert has nothing to collapse onto and scores 0,
/// as does an empty distribution.
pub fn collapse_from_usage(usage: &[f64]) -> f64 {
    let total: f64 = usage.iter().sum();
    if usage.len() < 2 || total <= 0.0 {
        return 0.0;
    }
    let h: f64 = usage
        .iter()
        .filter(|&&u| u > 0.0)
        .map(|&u| {
            let p = u / total;
            -p * p.ln()
        })
        .sum();
    (1.0 - h / (usage.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Collapse score of the first-choice expert usage of masked tokens, per layer.
pub fn collapse_score(layers: &[LayerTrace], mask: &[bool]) -> Vec<f64> {
    layers
        .iter()
        .map(|layer| {
            let mut usage = vec![0.0; layer.num_experts];
            for (t, &e) in layer.primary.iter().enumerate() {
                if mask[t] {
                    usage[e] += 1.0;
                }
            }
            collapse_from_usage(&usage)
        })
        .collect()
}

/// One evaluation pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// MoE block index per layer.
    pub blocks: Vec<usize>,
    /// Foreground accuracy per dataset.
    pub accuracy: BTreeMap<usize, f64>,
    /// Per layer, per dataset. Empty when no mapping is known.
    pub purity: Vec<BTreeMap<usize, f64>>,
    pub utilization: Vec<Utilization>,
    pub collapse: Vec<f64>,
    pub drop_rate: Vec<f64>,
}

impl EvalReport {
    pub fn mean_purity(&self) -> Vec<f64> {
        mean_purity(&self.purity)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub steps: Vec<(usize, LossBundle)>,
    pub evals: Vec<(usize, EvalReport)>,
}

impl RunMetrics {
    pub fn last_eval(&self) -> Option<&EvalReport> {
        self.evals.last().map(|(_, r)| r)
    }

    /// Long-format CSV: `kind,step,layer,dataset,expert,metric,value`.
    /// `layer` is the block index. Unused columns are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,step,layer,dataset,expert,metric,value\n");
        let mut row = |kind: &str, step: usize, layer: Option<usize>, d: Option<usize>, e: Option<usize>, metric: &str, v: f64| {
            let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{kind},{step},{},{},{},{metric},{v:?}", opt(layer), opt(d), opt(e));
        };
        for (step, b) in &self.steps {
            for (name, v) in [
                ("task", b.task),
                ("importance", b.importance),
                ("load", b.load),
                ("load_balancing", b.load_balancing),
                ("damex", b.damex),
                ("total", b.total),
            ] {
                row("step", *step, None, None, None, name, v);
            }
        }
        for (step, r) in &self.evals {
            let step = *step;
            for (&d, &a) in &r.accuracy {
                row("eval", step, None, Some(d), None, "accuracy", a);
            }
            for (i, &block) in r.blocks.iter().enumerate() {
                if let Some(p) = r.purity.get(i) {
                    for (&d, &v) in p {
                        row("eval", step, Some(block), Some(d), None, "purity", v);
                    }
                }
                if let Some(u) = r.utilization.get(i) {
                    for (&d, cells) in u.datasets.iter().zip(&u.rows) {
                        for (e, &v) in cells.iter().flatten().enumerate() {
                            row("eval", step, Some(block), Some(d), Some(e), "utilization", v);
                        }
                    }
                }
                row("eval", step, Some(block), None, None, "collapse", r.collapse[i]);
                row("eval", step, Some(block), None, None, "drop_rate", r.drop_rate[i]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(primary: Vec<usize>, probs: Vec<f64>, e: usize) -> LayerTrace {
        let n = primary.len();
        LayerTrace {
            block: 1,
            num_experts: e,
            probs,
            primary,
            dropped: vec![false; n],
            dropped_assignments: 0,
            assignments: n,
        }
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse_from_usage(&[5.0, 5.0, 5.0, 5.0]), 0.0);
        assert_eq!(collapse_from_usage(&[0.0, 9.0, 0.0]), 1.0);
        let p: [f64; 4] = [0.7, 0.1, 0.1, 0.1];
        let h = -(0.7f64 * 0.7f64.ln() + 3.0 * 0.1 * 0.1f64.ln());
        assert!((collapse_from_usage(&p) - (1.0 - h / 4.0f64.ln())).abs() < 1e-15);
        assert_eq!(collapse_from_usage(&[3.0]), 0.0);
    }

    #[test]
    fn purity_counts_mapped_hits() {
        let m = MappingTable::new(2, [(0, vec![0]), (1, vec![1])]).unwrap();
        let t = trace(vec![0, 0, 1, 1, 0], vec![0.5; 10], 2);
        let p = routing_purity(&[t.clone()], &[0, 0, 1, 1, 1], &m, &[true; 5]).unwrap();
        assert_eq!(p[0][&0], 1.0);
        assert!((p[0][&1] - 2.0 / 3.0).abs() < 1e-15);
        let masked = routing_purity(&[t], &[0, 0, 1, 1, 1], &m, &[true, true, false, false, false]).unwrap();
        assert!(!masked[0].contains_key(&1));
        let unmapped = MappingTable::new(2, [(0, vec![0])]).unwrap();
        let t = trace(vec![0, 1], vec![0.5; 4], 2);
        assert!(matches!(routing_purity(&[t], &[0, 1], &unmapped, &[true; 2]), Err(Error::Mapping(_))));
    }

    #[test]
    fn utilization_rows_and_absent_datasets() {
        let t = trace(vec![0, 1, 0], vec![0.25, 0.75, 0.5, 0.5, 1.0, 0.0], 2);
        let u = utilization_matrix(&[t], &[0, 0, 1], &[0, 1, 2], &[true; 3]).unwrap();
        assert_eq!(u[0].rows[0], Some(vec![0.375, 0.625]));
        assert_eq!(u[0].rows[1], Some(vec![1.0, 0.0]));
        assert_eq!(u[0].rows[2], None);
    }

    #[test]
    fn csv_layout() {
        let mut m = RunMetrics::default();
        m.steps.push((0, LossBundle { task: 1.5, ..Default::default() }));
        let t = trace(vec![0, 1], vec![0.5; 4], 2);
        m.evals.push((
            1,
            EvalReport {
                blocks: vec![1],
                accuracy: [(0, 0.5)].into(),
                purity: vec![[(0, 1.0)].into()],
                utilization: utilization_matrix(&[t], &[0, 0], &[0], &[true; 2]).unwrap(),
                collapse: vec![0.0],
                drop_rate: vec![0.0],
            },
        ));
        let csv = m.to_csv();
        assert!(csv.starts_with("kind,step,layer,dataset,expert,metric,value\nstep,0,,,,task,1.5\n"));
        assert!(csv.contains("eval,1,,0,,accuracy,0.5\n"));
        assert!(csv.contains("eval,1,1,0,1,utilization,0.5\n"));
        assert!(csv.contains("eval,1,1,,,collapse,0.0\n"));
    }
}
