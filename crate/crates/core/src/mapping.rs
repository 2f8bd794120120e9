//! The dataset → expert assignment `h`.
//!
//! Text form, one line per dataset:
//!
//! ```text
//! dataset.0.experts = 0
//! dataset.1.experts = 0      # shares expert 0 with dataset 0
//! dataset.2.experts = 1,2    # split evenly over two experts
//! ```

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MappingTable {
    entries: BTreeMap<usize, Vec<usize>>,
    num_experts: usize,
}

impl MappingTable {
    /// Validates and builds a table. Expert sets are stored sorted.
    pub fn new(num_experts: usize, entries: impl IntoIterator<Item = (usize, Vec<usize>)>) -> Result<Self> {
        let mut table = MappingTable {
            entries: BTreeMap::new(),
            num_experts,
        };
        for (dataset, experts) in entries {
            table.insert(dataset, experts, None)?;
        }
        Ok(table)
    }

    fn insert(&mut self, dataset: usize, mut experts: Vec<usize>, line: Option<usize>) -> Result<()> {
        if experts.is_empty() {
            return Err(Error::config(line, format!("dataset {dataset} maps to no experts")));
        }
        if let Some(&bad) = experts.iter().find(|&&e| e >= self.num_experts) {
            return Err(Error::config(
                line,
                format!(
                    "dataset {dataset} maps to expert {bad}, but only {} experts exist",
                    self.num_experts
                ),
            ));
        }
        experts.sort_unstable();
        if experts.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config(
                line,
                format!("dataset {dataset} lists an expert more than once"),
            ));
        }
        if self.entries.insert(dataset, experts).is_some() {
            return Err(Error::config(line, format!("dataset {dataset} mapped twice")));
        }
        Ok(())
    }

    /// Parses `dataset.<id>.experts = <id>[,<id>...]` lines. Blank lines and
    /// `#` comments are skipped; anything else is an error.
    pub fn parse(text: &str, num_experts: usize) -> Result<Self> {
        let mut table = MappingTable {
            entries: BTreeMap::new(),
            num_experts,
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(Some(idx + 1), format!("expected `key = value`, got {line:?}")))?;
            table.parse_entry(key.trim(), value.trim(), idx + 1)?;
        }
        Ok(table)
    }

    /// Adds one `dataset.<id>.experts` entry coming from a config file.
    pub(crate) fn parse_entry(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let dataset = key
            .strip_prefix("dataset.")
            .and_then(|rest| rest.strip_suffix(".experts"))
            .and_then(|id| id.parse::<usize>().ok())
            .ok_or_else(|| {
                Error::config(Some(line), format!("expected `dataset.<id>.experts`, got {key:?}"))
            })?;
        let experts = value
            .split(',')
            .map(|s| {
                let s = s.trim();
                s.parse::<usize>()
                    .map_err(|_| Error::config(Some(line), format!("bad expert id {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.insert(dataset, experts, Some(line))
    }

    /// One line per dataset, ascending ids. Inverse of [`MappingTable::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (d, experts) in &self.entries {
            let ids: Vec<String> = experts.iter().map(|e| e.to_string()).collect();
            out.push_str(&format!("dataset.{d}.experts = {}\n", ids.join(",")));
        }
        out
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    /// Mapped dataset ids, ascending.
    pub fn datasets(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn experts(&self, dataset: usize) -> Result<&[usize]> {
        self.entries
            .get(&dataset)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Mapping(format!("dataset {dataset} has no expert mapping")))
    }

    pub fn contains(&self, dataset: usize, expert: usize) -> bool {
        self.entries
            .get(&dataset)
            .is_some_and(|e| e.binary_search(&expert).is_ok())
    }

    /// Uniform distribution over `h(dataset)`, zero elsewhere. The last
    /// mapped entry absorbs rounding so the vector sums to exactly one when
    /// added in index order.
    pub fn target_distribution<T: Scalar>(&self, dataset: usize) -> Result<Vec<T>> {
        let experts = self.experts(dataset)?;
        let mass = T::one() / T::from_count(experts.len());
        let mut q = vec![T::zero(); self.num_experts];
        let (&last, rest) = experts.split_last().expect("entries are non-empty");
        let mut partial = T::zero();
        for &e in rest {
            q[e] = mass;
            partial = partial + mass;
        }
        q[last] = T::one() - partial;
        Ok(q)
    }

    /// Every id in `datasets` must be mapped.
    pub fn check_covers(&self, datasets: impl IntoIterator<Item = usize>) -> Result<()> {
        for d in datasets {
            self.experts(d)?;
        }
        Ok(())
    }

    /// Same datasets and set sizes, experts drawn uniformly at random.
    pub fn randomized(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = self
            .entries
            .iter()
            .map(|(&d, experts)| {
                let mut picked = sample(&mut rng, self.num_experts, experts.len()).into_vec();
                picked.sort_unstable();
                (d, picked)
            })
            .collect();
        MappingTable {
            entries,
            num_experts: self.num_experts,
        }
    }

    /// The i-th listed dataset ↦ expert `i mod E`.
    pub fn round_robin(datasets: &[usize], num_experts: usize) -> Result<Self> {
        Self::new(
            num_experts,
            datasets
                .iter()
                .enumerate()
                .map(|(i, &d)| (d, vec![i % num_experts.max(1)])),
        )
    }
}

pub(crate) fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}
