//! Versioned text container for models and ensembles.
//!
//! ```text
//! advgauntlet-model v1
//! key=value            (dims, temperatures, seeds, defense label)
//! end
//! projection D P       (D rows of P entries in {-1,0,1})
//! mean P / stddev P    (one row each)
//! layer i weight O I   (O rows of I entries)
//! layer i bias O       (one row)
//! ```
//!
//! Reals are written with 17 significant digits, which round-trips `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Dense, MlpModel, Normalizer, ProjectionMatrix, TrainingMeta, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::scalar::{fmt_exact, parse_exact, Scalar};

pub const MODEL_HEADER: &str = "advgauntlet-model v1";
pub const ENSEMBLE_HEADER: &str = "advgauntlet-ensemble v1";

fn push_row<F: Scalar>(out: &mut String, row: impl Iterator<Item = F>) {
    let mut first = true;
    for v in row {
        if !first {
            out.push(' ');
        }
        first = false;
        out.push_str(&fmt_exact(v));
    }
    out.push('\n');
}

fn encode<F: Scalar>(m: &MlpModel<F>, out: &mut String) {
    let p = &m.projection;
    out.push_str(MODEL_HEADER);
    out.push('\n');
    let _ = writeln!(out, "scalar={}", F::NAME);
    let _ = writeln!(out, "original_dim={}", p.original_dim());
    let _ = writeln!(out, "projected_dim={}", p.projected_dim());
    let _ = writeln!(out, "hidden_count={}", m.hidden_count());
    let _ = writeln!(out, "hidden_dim={}", m.hidden_dim());
    let _ = writeln!(out, "class_count={CLASS_COUNT}");
    let _ = writeln!(out, "temperature={}", fmt_exact(m.temperature));
    let _ = writeln!(out, "train_temperature={}", fmt_exact(m.train_temperature));
    let _ = writeln!(out, "projection_seed={}", p.seed());
    let _ = writeln!(out, "train_seed={}", m.training.seed);
    let _ = writeln!(out, "defense={}", m.training.defense);
    out.push_str("end\n");

    let _ = writeln!(out, "projection {} {}", p.original_dim(), p.projected_dim());
    let mut dense = vec![0i8; p.projected_dim()];
    for j in 0..p.original_dim() {
        dense.iter_mut().for_each(|d| *d = 0);
        for &(col, sign) in p.row(j) {
            dense[col as usize] = sign;
        }
        let row: Vec<String> = dense.iter().map(i8::to_string).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    let _ = writeln!(out, "mean {}", m.normalizer.mean.len());
    push_row(out, m.normalizer.mean.iter().copied());
    let _ = writeln!(out, "stddev {}", m.normalizer.stddev.len());
    push_row(out, m.normalizer.stddev.iter().copied());
    for (i, layer) in m.layers.iter().enumerate() {
        let _ = writeln!(out, "layer {i} weight {} {}", layer.fan_out(), layer.fan_in());
        for row in layer.weight.rows() {
            push_row(out, row.iter().copied());
        }
        let _ = writeln!(out, "layer {i} bias {}", layer.bias.len());
        push_row(out, layer.bias.iter().copied());
    }
}

pub fn write_model<F: Scalar>(model: &MlpModel<F>, path: &Path) -> Result<()> {
    let mut out = String::new();
    encode(model, &mut out);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_ensemble<F: Scalar>(models: &[MlpModel<F>], path: &Path) -> Result<()> {
    let mut out = format!("{ENSEMBLE_HEADER}\ncount={}\n", models.len());
    for m in models {
        encode(m, &mut out);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Self {
            path,
            inner: text.lines().enumerate(),
            line: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.line, msg)
    }

    fn next(&mut self) -> Result<&'a str> {
        match self.inner.next() {
            Some((n, l)) => {
                self.line = n + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                Err(self.err("unexpected end of file"))
            }
        }
    }

    /// Reads a section header such as `layer 0 weight 128 256` and returns
    /// its trailing dimensions.
    fn section(&mut self, prefix: &str, ndims: usize) -> Result<Vec<usize>> {
        let line = self.next()?;
        let rest = line
            .strip_prefix(prefix)
            .ok_or_else(|| self.err(format!("expected `{prefix}`, found `{line}`")))?;
        let dims: Vec<usize> = rest
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.err(format!("bad dimensions in `{line}`")))?;
        if dims.len() != ndims {
            return Err(self.err(format!("expected {ndims} dimensions in `{line}`")));
        }
        Ok(dims)
    }

    fn row<F: Scalar>(&mut self, len: usize) -> Result<Vec<F>> {
        let line = self.next()?;
        let row: Vec<F> = line
            .split(' ')
            .map(parse_exact)
            .collect::<Option<_>>()
            .ok_or_else(|| self.err("bad real value"))?;
        if row.len() != len {
            return Err(self.err(format!("expected {len} values, found {}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(self.err("non-finite parameter"));
        }
        Ok(row)
    }

    fn matrix<F: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Array2<F>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.row::<F>(cols)?);
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches data"))
    }
}

fn decode<F: Scalar>(lines: &mut Lines<'_>) -> Result<MlpModel<F>> {
    let header = lines.next()?;
    if header != MODEL_HEADER {
        return Err(Error::Version(format!("expected `{MODEL_HEADER}`, found `{header}`")));
    }
    let mut meta = BTreeMap::new();
    loop {
        let line = lines.next()?;
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| lines.err(format!("bad metadata line `{line}`")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let (path, meta_line) = (lines.path, lines.line);
    let get = |key: &str| {
        meta.get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::parse(path, meta_line, format!("missing metadata `{key}`")))
    };
    if get("scalar")? != F::NAME {
        return Err(Error::Version(format!(
            "model stores {} parameters, reader expects {}",
            get("scalar")?,
            F::NAME
        )));
    }
    let int = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::parse(path, meta_line, format!("bad `{key}`")))
    };
    let real = |key: &str| -> Result<F> {
        parse_exact(get(key)?).ok_or_else(|| Error::parse(path, meta_line, format!("bad `{key}`")))
    };
    let hidden_count = int("hidden_count")?;
    if int("class_count")? != CLASS_COUNT {
        return Err(Error::parse(path, meta_line, "only binary models are supported"));
    }
    let temperature = real("temperature")?;
    let train_temperature = real("train_temperature")?;
    let seed: u64 = get("projection_seed")?
        .parse()
        .map_err(|_| Error::parse(path, meta_line, "bad `projection_seed`"))?;

    let train_seed: u64 = get("train_seed")?
        .parse()
        .map_err(|_| Error::parse(path, meta_line, "bad `train_seed`"))?;
    let defense = get("defense")?.to_string();

    let original_dim = int("original_dim")?;
    let projected_dim = int("projected_dim")?;
    let hidden_dim = int("hidden_dim")?;

    let dims = lines.section("projection", 2)?;
    let (d, p) = (dims[0], dims[1]);
    if d != original_dim || p != projected_dim {
        return Err(lines.err("projection shape disagrees with metadata"));
    }
    let mut rows = Vec::with_capacity(d);
    for _ in 0..d {
        let line = lines.next()?;
        let mut row = Vec::new();
        let mut count = 0;
        for (col, tok) in line.split(' ').enumerate() {
            count += 1;
            match tok {
                "0" => {}
                "1" => row.push((col as u32, 1)),
                "-1" => row.push((col as u32, -1)),
                other => return Err(lines.err(format!("bad projection entry `{other}`"))),
            }
        }
        if count != p {
            return Err(lines.err(format!("expected {p} projection entries, found {count}")));
        }
        rows.push(row);
    }
    let projection = ProjectionMatrix::from_rows(p, seed, rows)?;

    let n = lines.section("mean", 1)?[0];
    let mean = Array1::from(lines.row::<F>(n)?);
    let n = lines.section("stddev", 1)?[0];
    let stddev = Array1::from(lines.row::<F>(n)?);

    let mut layers = Vec::with_capacity(hidden_count + 1);
    for i in 0..=hidden_count {
        let dims = lines.section(&format!("layer {i} weight"), 2)?;
        let weight = lines.matrix::<F>(dims[0], dims[1])?;
        let n = lines.section(&format!("layer {i} bias"), 1)?[0];
        let bias = Array1::from(lines.row::<F>(n)?);
        layers.push(Dense { weight, bias });
    }
    let mut model = MlpModel::from_parts(projection, Normalizer { mean, stddev }, layers, temperature)
        .map_err(|e| lines.err(e.to_string()))?;
    model.train_temperature = train_temperature;
    model.training = TrainingMeta {
        seed: train_seed,
        defense,
    };
    if model.hidden_dim() != hidden_dim {
        return Err(lines.err("hidden_dim disagrees with layer shapes"));
    }
    Ok(model)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_model<F: Scalar>(path: &Path) -> Result<MlpModel<F>> {
    let text = read_text(path)?;
    let mut lines = Lines::new(path, &text);
    let model = decode(&mut lines)?;
    if let Some((n, extra)) = lines.inner.next() {
        return Err(Error::parse(path, n + 1, format!("trailing content `{extra}`")));
    }
    Ok(model)
}

/// Reads either an ensemble file or a single model (as a one-member list).
pub fn read_ensemble<F: Scalar>(path: &Path) -> Result<Vec<MlpModel<F>>> {
    let text = read_text(path)?;
    if text.starts_with(MODEL_HEADER) {
        return Ok(vec![read_model(path)?]);
    }
    let mut lines = Lines::new(path, &text);
    let header = lines.next()?;
    if header != ENSEMBLE_HEADER {
        return Err(Error::Version(format!(
            "expected `{ENSEMBLE_HEADER}`, found `{header}`"
        )));
    }
    let count_line = lines.next()?;
    let count: usize = count_line
        .strip_prefix("count=")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| lines.err(format!("bad count line `{count_line}`")))?;
    (0..count).map(|_| decode(&mut lines)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SparseBinaryVector;
    use crate::model::Arch;
    use rand::Rng;

    fn model(seed: u64) -> MlpModel<f64> {
        let projection = ProjectionMatrix::new(60, 16, seed).unwrap();
        let mut rng = crate::seed::rng(seed);
        let normalizer = Normalizer {
            mean: Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0)),
            stddev: Array1::from_shape_fn(16, |_| rng.gen_range(0.1..2.0)),
        };
        let mut m = MlpModel::init(projection, normalizer, Arch::new(2, 7), seed).unwrap();
        for l in m.layers.iter_mut() {
            l.bias.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        }
        m.temperature = 1.0;
        m.train_temperature = 10.0;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        let m = model(3);
        write_model(&m, &path).unwrap();
        let back: MlpModel<f64> = read_model(&path).unwrap();
        assert_eq!(back, m);
        let mut rng = crate::seed::rng(99);
        for _ in 0..100 {
            let bits: Vec<bool> = (0..60).map(|_| rng.gen_bool(0.2)).collect();
            let x = SparseBinaryVector::from_dense(&bits);
            assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
        }
    }

    #[test]
    fn corrupted_header_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        write_model(&model(1), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replacen("v1", "v9", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_model::<f64>(&path), Err(Error::Version(_))));
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        write_model(&model(1), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(read_model::<f64>(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn scalar_width_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        write_model(&model(1), &path).unwrap();
        assert!(matches!(read_model::<f32>(&path), Err(Error::Version(_))));
    }

    #[test]
    fn ensemble_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.model");
        let members: Vec<_> = (0..3).map(model).collect();
        write_ensemble(&members, &path).unwrap();
        assert_eq!(read_ensemble::<f64>(&path).unwrap(), members);
        let single = dir.path().join("s.model");
        write_model(&members[0], &single).unwrap();
        assert_eq!(read_ensemble::<f64>(&single).unwrap(), members[..1].to_vec());
    }
}
