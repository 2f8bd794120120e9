//! Tokens and token batches, plus the CSV exchange format.
//!
//! CSV layout: header `dataset_id,foreground,label,f0..f{D-1}`, one token per
//! row, `label` empty for background tokens.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Token<T> {
    pub features: Vec<T>,
    pub dataset_id: usize,
    pub foreground: bool,
    /// Class in the union label space; present iff `foreground`.
    pub label: Option<usize>,
}

/// Column-oriented batch of tokens sharing one feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<T> {
    pub features: Matrix<T>,
    pub dataset_ids: Vec<usize>,
    pub foreground: Vec<bool>,
    pub labels: Vec<Option<usize>>,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn new(
        features: Matrix<T>,
        dataset_ids: Vec<usize>,
        foreground: Vec<bool>,
        labels: Vec<Option<usize>>,
    ) -> Result<Self> {
        let n = features.rows();
        if dataset_ids.len() != n || foreground.len() != n || labels.len() != n {
            return Err(Error::dim(
                "token batch",
                format!(
                    "{n} feature rows, {} dataset ids, {} flags, {} labels",
                    dataset_ids.len(),
                    foreground.len(),
                    labels.len()
                ),
            ));
        }
        for (i, (&fg, label)) in foreground.iter().zip(&labels).enumerate() {
            if fg != label.is_some() {
                return Err(Error::Contract(format!(
                    "token {i}: label must be present iff the token is foreground"
                )));
            }
        }
        Ok(TokenBatch {
            features,
            dataset_ids,
            foreground,
            labels,
        })
    }

    pub fn from_tokens(tokens: &[Token<T>]) -> Result<Self> {
        let dim = tokens.first().map_or(0, |t| t.features.len());
        let mut data = Vec::with_capacity(tokens.len() * dim);
        for (i, t) in tokens.iter().enumerate() {
            if t.features.len() != dim {
                return Err(Error::dim(
                    "token batch",
                    format!("token {i} has {} features, expected {dim}", t.features.len()),
                ));
            }
            data.extend_from_slice(&t.features);
        }
        Self::new(
            Matrix::from_vec(tokens.len(), dim, data)?,
            tokens.iter().map(|t| t.dataset_id).collect(),
            tokens.iter().map(|t| t.foreground).collect(),
            tokens.iter().map(|t| t.label).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.dataset_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn token(&self, i: usize) -> Token<T> {
        Token {
            features: self.features.row(i).to_vec(),
            dataset_id: self.dataset_ids[i],
            foreground: self.foreground[i],
            label: self.labels[i],
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.iter().filter(|&&f| f).count()
    }

    /// Rows picked by `index`, in that order.
    pub fn select(&self, index: &[usize]) -> Self {
        let mut features = Matrix::zeros(index.len(), self.dim());
        for (j, &i) in index.iter().enumerate() {
            features.row_mut(j).copy_from_slice(self.features.row(i));
        }
        TokenBatch {
            features,
            dataset_ids: index.iter().map(|&i| self.dataset_ids[i]).collect(),
            foreground: index.iter().map(|&i| self.foreground[i]).collect(),
            labels: index.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(parts: &[Self]) -> Result<Self> {
        let dim = parts.first().map_or(0, |p| p.dim());
        let mut tokens = Vec::new();
        for p in parts {
            if p.dim() != dim && !p.is_empty() {
                return Err(Error::dim("concat", format!("dims {dim} and {}", p.dim())));
            }
            tokens.extend((0..p.len()).map(|i| p.token(i)));
        }
        if tokens.is_empty() {
            return Self::new(Matrix::zeros(0, dim), vec![], vec![], vec![]);
        }
        Self::from_tokens(&tokens)
    }

    /// Sorted distinct dataset ids.
    pub fn datasets(&self) -> Vec<usize> {
        let mut ids = self.dataset_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn indices_of_dataset(&self, dataset: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.dataset_ids[i] == dataset)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset_id,foreground,label");
        for j in 0..self.dim() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(
                out,
                "{},{},",
                self.dataset_ids[i],
                u8::from(self.foreground[i])
            );
            if let Some(l) = self.labels[i] {
                let _ = write!(out, "{l}");
            }
            for &v in self.features.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::config(Some(line), msg);
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::config(Some(1), "empty token file"))?;
        let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[..3] != ["dataset_id", "foreground", "label"] {
            return Err(bad(1, "header must start with dataset_id,foreground,label".into()));
        }
        let dim = cols.len() - 3;
        for (j, c) in cols[3..].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(bad(1, format!("expected column f{j}, found {c:?}")));
            }
        }
        let mut tokens = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 3 {
                return Err(bad(
                    line_no,
                    format!("{} fields, expected {}", fields.len(), dim + 3),
                ));
            }
            let dataset_id = fields[0]
                .parse()
                .map_err(|_| bad(line_no, format!("bad dataset id {:?}", fields[0])))?;
            let foreground = match fields[1] {
                "1" => true,
                "0" => false,
                other => return Err(bad(line_no, format!("foreground must be 0 or 1, got {other:?}"))),
            };
            let label = if fields[2].is_empty() {
                None
            } else {
                Some(
                    fields[2]
                        .parse()
                        .map_err(|_| bad(line_no, format!("bad label {:?}", fields[2])))?,
                )
            };
            if foreground != label.is_some() {
                return Err(bad(line_no, "label must be present iff foreground=1".into()));
            }
            let features = fields[3..]
                .iter()
                .map(|s| {
                    s.parse::<T>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| bad(line_no, format!("bad feature value {s:?}")))
                })
                .collect::<Result<Vec<T>>>()?;
            tokens.push(Token {
                features,
                dataset_id,
                foreground,
                label,
            });
        }
        if tokens.is_empty() {
            return Self::new(Matrix::zeros(0, dim), vec![], vec![], vec![]);
        }
        Self::from_tokens(&tokens)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| match e {
            Error::Config { line, message } => Error::Format {
                path: path.to_path_buf(),
                message: match line {
                    Some(l) => format!("line {l}: {message}"),
                    None => message,
                },
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TokenBatch<f64> {
        TokenBatch::from_tokens(&[
            Token { features: vec![0.1, -2.5], dataset_id: 0, foreground: true, label: Some(3) },
            Token { features: vec![1e-300, 7.0], dataset_id: 1, foreground: false, label: None },
        ])
        .unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let b = sample();
        let text = b.to_csv();
        assert!(text.starts_with("dataset_id,foreground,label,f0,f1\n0,1,3,0.1,-2.5\n1,0,,"));
        assert_eq!(TokenBatch::<f64>::from_csv(&text).unwrap(), b);
    }

    #[test]
    fn csv_rejects_label_on_background() {
        let text = "dataset_id,foreground,label,f0\n0,0,2,1.0\n";
        let err = TokenBatch::<f64>::from_csv(text).unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(2), .. }), "{err}");
    }

    #[test]
    fn csv_rejects_bad_header_and_ragged_rows() {
        assert!(TokenBatch::<f64>::from_csv("id,fg,label,f0\n").is_err());
        assert!(TokenBatch::<f64>::from_csv("dataset_id,foreground,label,f0\n0,1,1\n").is_err());
    }

    #[test]
    fn label_iff_foreground() {
        let r = TokenBatch::new(Matrix::<f64>::zeros(1, 1), vec![0], vec![true], vec![None]);
        assert!(r.is_err());
    }

    #[test]
    fn select_and_concat() {
        let b = sample();
        let s = b.select(&[1, 0, 1]);
        assert_eq!(s.dataset_ids, vec![1, 0, 1]);
        let c = TokenBatch::concat(&[b.clone(), b.clone()]).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.datasets(), vec![0, 1]);
        assert_eq!(c.indices_of_dataset(1), vec![1, 3]);
    }
}
