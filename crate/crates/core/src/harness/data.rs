//! Synthetic multi-dataset token mixtures: per-class Gaussian clusters
//! shifted by a per-dataset domain vector, plus unlabelled background tokens.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::scalar::Scalar;
use crate::tokens::TokenBatch;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassCluster {
    pub label: usize,
    pub mean: Vec<f64>,
    /// Per-coordinate standard deviation.
    pub spread: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub dataset_id: usize,
    /// Foreground training tokens.
    pub num_train: usize,
    /// Foreground evaluation tokens.
    pub num_eval: usize,
    pub classes: Vec<ClassCluster>,
    pub domain_offset: Vec<f64>,
    /// Per-coordinate standard deviation of background tokens, which are
    /// centred on the domain offset.
    pub background_spread: Vec<f64>,
    /// Share of background tokens among all tokens of the dataset, in [0, 1).
    pub background_fraction: f64,
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        self.domain_offset.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.label).collect()
    }

    fn background_count(&self, foreground: usize) -> usize {
        let bf = self.background_fraction;
        (foreground as f64 * bf / (1.0 - bf)).round() as usize
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let id = self.dataset_id;
        if self.num_train == 0 || self.num_eval == 0 {
            return Err(Error::config(None, format!("dataset {id}: token counts must be positive")));
        }
        if self.classes.is_empty() {
            return Err(Error::config(None, format!("dataset {id}: no classes")));
        }
        let dims_ok = self.dim() == dim
            && self.background_spread.len() == dim
            && self.classes.iter().all(|c| c.mean.len() == dim && c.spread.len() == dim);
        if !dims_ok {
            return Err(Error::config(None, format!("dataset {id}: inconsistent feature dimension")));
        }
        let positive = |v: &[f64]| v.iter().all(|&s| s > 0.0 && s.is_finite());
        let spreads_ok = self.classes.iter().all(|c| positive(&c.spread)) && positive(&self.background_spread);
        if !spreads_ok {
            return Err(Error::config(None, format!("dataset {id}: spreads must be positive")));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(Error::config(None, format!("dataset {id}: background fraction must be in [0, 1)")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixture<T> {
    pub train: TokenBatch<T>,
    pub eval: TokenBatch<T>,
}

/// Draws train and eval batches. Foreground labels cycle through each
/// dataset's classes so class counts are balanced; the combined batch is
/// shuffled.
pub fn generate_mixture<T: Scalar>(specs: &[DatasetSpec], seed: u64) -> Result<Mixture<T>> {
    let first = specs
        .first()
        .ok_or_else(|| Error::config(None, "mixture needs at least one dataset"))?;
    let dim = first.dim();
    if dim == 0 {
        return Err(Error::config(None, "feature dimension must be positive"));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate(dim)?;
        if specs[..i].iter().any(|o| o.dataset_id == s.dataset_id) {
            return Err(Error::config(None, format!("dataset {} listed twice", s.dataset_id)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = draw(specs, |s| s.num_train, &mut rng)?;
    let eval = draw(specs, |s| s.num_eval, &mut rng)?;
    Ok(Mixture { train, eval })
}

fn draw<T: Scalar>(
    specs: &[DatasetSpec],
    count: impl Fn(&DatasetSpec) -> usize,
    rng: &mut ChaCha8Rng,
) -> Result<TokenBatch<T>> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let dim = specs[0].dim();
    let mut rows: Vec<(Vec<f64>, usize, Option<usize>)> = Vec::new();
    for s in specs {
        let fg = count(s);
        for i in 0..fg {
            let c = &s.classes[i % s.classes.len()];
            let x = (0..dim)
                .map(|j| s.domain_offset[j] + c.mean[j] + c.spread[j] * unit.sample(rng))
                .collect();
            rows.push((x, s.dataset_id, Some(c.label)));
        }
        for _ in 0..s.background_count(fg) {
            let x = (0..dim)
                .map(|j| s.domain_offset[j] + s.background_spread[j] * unit.sample(rng))
                .collect();
            rows.push((x, s.dataset_id, None));
        }
    }
    rows.shuffle(rng);
    let mut data = Vec::with_capacity(rows.len() * dim);
    let mut ids = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (x, d, l) in rows {
        data.extend(x.into_iter().map(T::lit));
        ids.push(d);
        labels.push(l);
    }
    let n = ids.len();
    let foreground = labels.iter().map(Option::is_some).collect();
    TokenBatch::new(Matrix::from_vec(n, dim, data)?, ids, foreground, labels)
}

/// The three built-in regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// One majority dataset and one minority dataset with `shots` foreground
    /// training tokens; same label set, different domains and class layouts.
    Limited,
    /// Two datasets with the same label set and disjoint domain offsets.
    Domains,
    /// Two datasets with the same domain offset and disjoint label subsets.
    Divergent,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "limited" => Ok(Preset::Limited),
            "domains" => Ok(Preset::Domains),
            "divergent" => Ok(Preset::Divergent),
            other => Err(Error::config(
                None,
                format!("unknown preset {other:?} (expected limited, domains or divergent)"),
            )),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Limited => "limited",
            Preset::Domains => "domains",
            Preset::Divergent => "divergent",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PresetOptions {
    /// Feature dimension, at least 2. The last coordinate is the domain
    /// channel; the others carry class structure.
    pub dim: usize,
    /// Minority foreground training size for `limited`.
    pub shots: usize,
    /// Foreground training tokens per dataset (majority size for `limited`).
    pub train_per_dataset: usize,
    pub eval_per_dataset: usize,
    pub background_fraction: f64,
    pub geometry: Geometry,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            dim: 16,
            shots: 50,
            train_per_dataset: 1000,
            eval_per_dataset: 500,
            background_fraction: 0.2,
            geometry: Geometry::default(),
        }
    }
}

/// Cluster geometry shared by the presets.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    /// Std of class-mean coordinates.
    pub class_scale: f64,
    /// Within-class std on class coordinates.
    pub class_spread: f64,
    /// Offset of each domain along the domain channel (`+` for dataset 0,
    /// `-` for dataset 1).
    pub domain_shift: f64,
    /// Std on the domain channel.
    pub domain_spread: f64,
    /// Norm of a mean shared by every token of every dataset.
    pub common_shift: f64,
    pub background_spread: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            class_scale: 1.0,
            class_spread: 1.0,
            domain_shift: 1.0,
            domain_spread: 0.25,
            common_shift: 8.0,
            background_spread: 1.5,
        }
    }
}

const CLASSES_PER_DATASET: usize = 4;

impl Preset {
    /// Size of the union label space.
    pub fn num_classes(self) -> usize {
        match self {
            Preset::Divergent => 2 * CLASSES_PER_DATASET,
            Preset::Limited | Preset::Domains => CLASSES_PER_DATASET,
        }
    }

    /// Dataset specs for this preset. Class means and the common mean are
    /// drawn from `seed`.
    pub fn specs(self, opts: &PresetOptions, seed: u64) -> Result<Vec<DatasetSpec>> {
        if opts.dim < 2 {
            return Err(Error::config(None, "preset dimension must be at least 2"));
        }
        let g = &opts.geometry;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6765_6f6d);
        let dim = opts.dim;
        let channel = dim - 1;
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let means = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..dim).map(|j| if j == channel { 0.0 } else { g.class_scale * unit.sample(rng) }).collect())
                .collect()
        };
        let common = {
            let v: Vec<f64> = (0..dim).map(|j| if j == channel { 0.0 } else { unit.sample(&mut rng) }).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| g.common_shift * x / norm).collect::<Vec<_>>()
        };
        let offset = |sign: f64| -> Vec<f64> {
            let mut o = common.clone();
            o[channel] = sign * g.domain_shift;
            o
        };
        let spread = |content: f64| -> Vec<f64> {
            (0..dim).map(|j| if j == channel { g.domain_spread } else { content }).collect()
        };
        let clusters = |labels: std::ops::Range<usize>, means: &[Vec<f64>]| -> Vec<ClassCluster> {
            labels
                .zip(means)
                .map(|(label, mean)| ClassCluster {
                    label,
                    mean: mean.clone(),
                    spread: spread(g.class_spread),
                })
                .collect()
        };
        let spec = |id: usize, train: usize, classes: Vec<ClassCluster>, offset: Vec<f64>| DatasetSpec {
            dataset_id: id,
            num_train: train,
            num_eval: opts.eval_per_dataset,
            classes,
            domain_offset: offset,
            background_spread: spread(g.background_spread),
            background_fraction: opts.background_fraction,
        };
        let k = CLASSES_PER_DATASET;
        Ok(match self {
            Preset::Domains => {
                let shared = means(k, &mut rng);
                vec![
                    spec(0, opts.train_per_dataset, clusters(0..k, &shared), offset(1.0)),
                    spec(1, opts.train_per_dataset, clusters(0..k, &shared), offset(-1.0)),
                ]
            }
            Preset::Divergent => {
                let all = means(2 * k, &mut rng);
                vec![
                    spec(0, opts.train_per_dataset, clusters(0..k, &all[..k]), offset(0.0)),
                    spec(1, opts.train_per_dataset, clusters(k..2 * k, &all[k..]), offset(0.0)),
                ]
            }
            Preset::Limited => {
                if opts.shots == 0 {
                    return Err(Error::config(None, "shots must be positive"));
                }
                let major = means(k, &mut rng);
                let minor = means(k, &mut rng);
                vec![
                    spec(0, opts.train_per_dataset, clusters(0..k, &major), offset(1.0)),
                    spec(1, opts.shots, clusters(0..k, &minor), offset(-1.0)),
                ]
            }
        })
    }

    pub fn generate<T: Scalar>(self, opts: &PresetOptions, seed: u64) -> Result<Mixture<T>> {
        generate_mixture(&self.specs(opts, seed)?, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn labels_of(b: &TokenBatch<f64>, d: usize) -> BTreeSet<usize> {
        b.indices_of_dataset(d).iter().filter_map(|&i| b.labels[i]).collect()
    }

    #[test]
    fn same_seed_same_batches() {
        let opts = PresetOptions::default();
        let a: Mixture<f64> = Preset::Domains.generate(&opts, 3).unwrap();
        let b: Mixture<f64> = Preset::Domains.generate(&opts, 3).unwrap();
        assert_eq!(a, b);
        let c: Mixture<f64> = Preset::Domains.generate(&opts, 4).unwrap();
        assert_ne!(a.train.features, c.train.features);
    }

    #[test]
    fn limited_has_exact_minority_shots() {
        for shots in [50, 100, 1000] {
            let opts = PresetOptions { shots, ..Default::default() };
            let m: Mixture<f64> = Preset::Limited.generate(&opts, 1).unwrap();
            let fg = m.train.indices_of_dataset(1).iter().filter(|&&i| m.train.foreground[i]).count();
            assert_eq!(fg, shots);
            let major = m.train.indices_of_dataset(0).iter().filter(|&&i| m.train.foreground[i]).count();
            assert_eq!(major, opts.train_per_dataset);
        }
    }

    #[test]
    fn divergent_label_sets_are_disjoint() {
        let m: Mixture<f64> = Preset::Divergent.generate(&PresetOptions::default(), 2).unwrap();
        for b in [&m.train, &m.eval] {
            let (a, c) = (labels_of(b, 0), labels_of(b, 1));
            assert!(a.is_disjoint(&c));
            assert_eq!(a.len() + c.len(), Preset::Divergent.num_classes());
        }
    }

    #[test]
    fn domains_share_labels() {
        let m: Mixture<f64> = Preset::Domains.generate(&PresetOptions::default(), 2).unwrap();
        assert_eq!(labels_of(&m.train, 0), labels_of(&m.train, 1));
    }

    #[test]
    fn background_fraction_is_respected() {
        let opts = PresetOptions { background_fraction: 0.2, train_per_dataset: 800, ..Default::default() };
        let m: Mixture<f64> = Preset::Domains.generate(&opts, 9).unwrap();
        assert_eq!(m.train.len(), 2 * 1000);
        assert_eq!(m.train.foreground_count(), 1600);
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(generate_mixture::<f64>(&[], 0).is_err());
        let mut spec = Preset::Domains.specs(&PresetOptions::default(), 0).unwrap();
        spec[0].num_train = 0;
        assert!(matches!(generate_mixture::<f64>(&spec, 0), Err(Error::Config { .. })));
        let mut spec = Preset::Domains.specs(&PresetOptions::default(), 0).unwrap();
        spec[1].classes[0].spread[3] = 0.0;
        assert!(generate_mixture::<f64>(&spec, 0).is_err());
        assert!("bogus".parse::<Preset>().is_err());
        assert_eq!("limited".parse::<Preset>().unwrap(), Preset::Limited);
    }
}
