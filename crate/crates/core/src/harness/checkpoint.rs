//! Text checkpoints.
//!
//! ```text
//! DAMEX-CKPT v1
//! config <n>
//! <n lines of resolved run config>
//! param block0.ffn.w1 32 16
//! <rows*cols values, whitespace separated>
//! ...
//! end
//! ```
//!
//! Values are written in scientific notation with enough significant digits
//! to round-trip exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::scalar::Scalar;

use super::config::RunConfig;
use super::model::Model;

pub const MAGIC: &str = "DAMEX-CKPT v1";

pub fn to_text<T: Scalar>(model: &Model<T>, config: &RunConfig) -> String {
    let cfg = config.to_text();
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "config {}", cfg.lines().count());
    out.push_str(&cfg);
    let prec = T::ROUND_TRIP_DIGITS - 1;
    for (name, m) in model.param_names().iter().zip(model.params()) {
        let _ = writeln!(out, "param {name} {} {}", m.rows(), m.cols());
        let vals: Vec<String> = m.as_slice().iter().map(|v| format!("{v:.prec$e}")).collect();
        let _ = writeln!(out, "{}", vals.join(" "));
    }
    out.push_str("end\n");
    out
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, config: &RunConfig) -> Result<()> {
    std::fs::write(path, to_text(model, config)).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint. Errors carry the 1-based line number.
pub fn from_text<T: Scalar>(text: &str) -> Result<(Model<T>, RunConfig)> {
    let bad = |line: usize, msg: String| Error::config(Some(line), msg);
    let lines: Vec<&str> = text.lines().collect();
    if lines.first().map(|l| l.trim_end()) != Some(MAGIC) {
        return Err(bad(1, format!("missing `{MAGIC}` header")));
    }
    let n: usize = lines
        .get(1)
        .and_then(|l| l.strip_prefix("config "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| bad(2, "expected `config <lines>`".into()))?;
    if lines.len() < 2 + n {
        return Err(bad(lines.len(), "truncated config block".into()));
    }
    let config = RunConfig::parse(&lines[2..2 + n].join("\n")).map_err(|e| match e {
        Error::Config { line: Some(l), message } => bad(l + 2, message),
        other => other,
    })?;
    let mut model = Model::<T>::new(config.model.clone(), 0)?;
    let names = model.param_names();
    let mut values = Vec::with_capacity(names.len());
    let mut i = 2 + n;
    for name in &names {
        let header = lines.get(i).ok_or_else(|| bad(i + 1, format!("missing parameter {name}")))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (rows, cols) = match parts.as_slice() {
            ["param", got, r, c] if got == name => (
                r.parse::<usize>().map_err(|_| bad(i + 1, "bad row count".into()))?,
                c.parse::<usize>().map_err(|_| bad(i + 1, "bad column count".into()))?,
            ),
            _ => return Err(bad(i + 1, format!("expected `param {name} <rows> <cols>`"))),
        };
        let data_line = lines.get(i + 1).ok_or_else(|| bad(i + 2, format!("missing values for {name}")))?;
        let data = data_line
            .split_whitespace()
            .map(|v| v.parse::<T>().map_err(|_| bad(i + 2, format!("bad value {v:?}"))))
            .collect::<Result<Vec<T>>>()?;
        if data.len() != rows * cols {
            return Err(bad(i + 2, format!("{name}: expected {} values, got {}", rows * cols, data.len())));
        }
        values.push(Matrix::from_vec(rows, cols, data)?);
        i += 2;
    }
    if lines.get(i).map(|l| l.trim()) != Some("end") {
        return Err(bad(i + 1, "expected `end`".into()));
    }
    model.set_params(values).map_err(|e| bad(i + 1, e.to_string()))?;
    Ok((model, config))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, RunConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> RunConfig {
        RunConfig::parse("dataset.0.experts = 0\ndataset.1.experts = 1\nmodel.hidden = 5\nmodel.dim = 3").unwrap()
    }

    #[test]
    fn exact_round_trip() {
        let cfg = config();
        let model = Model::<f64>::new(cfg.model.clone(), 11).unwrap();
        let text = to_text(&model, &cfg);
        assert!(text.starts_with("DAMEX-CKPT v1\n"));
        let (back, cfg2) = from_text::<f64>(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(cfg2.to_text(), cfg.to_text());
        assert_eq!(to_text(&back, &cfg2), text);
    }

    #[test]
    fn f32_round_trip() {
        let cfg = config();
        let model = Model::<f32>::new(cfg.model.clone(), 2).unwrap();
        let (back, _) = from_text::<f32>(&to_text(&model, &cfg)).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_files_rejected() {
        let cfg = config();
        let text = to_text(&Model::<f64>::new(cfg.model.clone(), 1).unwrap(), &cfg);
        assert!(from_text::<f64>("nope").is_err());
        let truncated: String = text.lines().take(text.lines().count() - 3).collect::<Vec<_>>().join("\n");
        assert!(from_text::<f64>(&truncated).is_err());
        let garbled = text.replacen("param head.w", "param head.x", 1);
        assert!(matches!(from_text::<f64>(&garbled), Err(Error::Config { line: Some(_), .. })));
    }
}
