//! Text checkpoints.
//!
//! ```text
//! POINTCAPS-CKPT v1
//! encoder.conv1.weight 3 16 1 3
//! -1.2345678901234567e-1 ...
//! ```
//!
//! Values use 17 significant digits, so a save/load round trip is exact.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use super::config::ModelConfig;
use super::state::ModelState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_HEADER: &str = "POINTCAPS-CKPT v1";

pub fn checkpoint_to_string<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> String {
    let mut out = String::from(CHECKPOINT_HEADER);
    out.push('\n');
    for (name, t) in tensors {
        let _ = write!(out, "{name} {}", t.rank());
        for d in t.shape() {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        for (i, v) in t.data().iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

/// Parses every named tensor of a checkpoint, in file order.
pub fn parse_checkpoint(text: &str, origin: &Path) -> Result<IndexMap<String, Tensor>> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h.trim() == CHECKPOINT_HEADER => {}
        Some((_, h)) if h.starts_with("POINTCAPS-CKPT") => {
            return Err(Error::Version(format!("unsupported checkpoint version `{}`", h.trim())))
        }
        _ => return Err(perr(1, format!("missing `{CHECKPOINT_HEADER}` header"))),
    }
    let mut tensors = IndexMap::new();
    while let Some((lineno, header)) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = header.split_whitespace().collect();
        let name = fields[0].to_string();
        let rank: usize = fields
            .get(1)
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| perr(lineno, format!("bad tensor header `{header}`")))?;
        if fields.len() != rank + 2 {
            return Err(perr(lineno, format!("`{name}`: rank {rank} but {} extents", fields.len() - 2)));
        }
        let shape: Vec<usize> = fields[2..]
            .iter()
            .map(|d| d.parse().map_err(|_| perr(lineno, format!("bad extent `{d}`"))))
            .collect::<Result<_>>()?;
        let (vline, values) = lines
            .next()
            .ok_or_else(|| perr(lineno + 1, format!("`{name}`: missing values")))?;
        let data: Vec<f64> = values
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| perr(vline, format!("bad value `{v}`"))))
            .collect::<Result<_>>()?;
        let t = Tensor::new(shape, data).map_err(|e| perr(vline, format!("`{name}`: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(perr(lineno, format!("duplicate tensor `{name}`")));
        }
    }
    Ok(tensors)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(state.tensors())).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks it against `config`'s layout.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<ModelState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelState::from_tensors(config, parse_checkpoint(&text, path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig::micro(32, 3);
        let state = ModelState::init(&cfg, 11).unwrap();
        let text = checkpoint_to_string(state.tensors());
        let back = ModelState::from_tensors(&cfg, parse_checkpoint(&text, Path::new("m")).unwrap()).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn awkward_values_survive() {
        let name = "t".to_string();
        let t = Tensor::new([4], vec![0.1, -1.0 / 3.0, 1e-300, f64::MAX]).unwrap();
        let text = checkpoint_to_string([(&name, &t)]);
        let back = parse_checkpoint(&text, Path::new("m")).unwrap();
        assert_eq!(back["t"], t);
    }

    #[test]
    fn header_and_version_errors() {
        assert!(matches!(
            parse_checkpoint("POINTCAPS-CKPT v9\n", Path::new("m")),
            Err(Error::Version(_))
        ));
        assert!(matches!(parse_checkpoint("hello\n", Path::new("m")), Err(Error::Parse { .. })));
        let bad = "POINTCAPS-CKPT v1\nw 2 2 2\n1 2 3\n";
        assert!(matches!(parse_checkpoint(bad, Path::new("m")), Err(Error::Parse { line: 3, .. })));
    }
}
