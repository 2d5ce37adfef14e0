//! Parameter checkpoint file.
//!
//! ```text
//! oilca-checkpoint v1
//! kind <model kind>
//! seed <u64>
//! step <u64>
//! meta <key> <value>            (zero or more)
//! tensor <name> <rows> <cols> <activation|->   (one per tensor, in data order)
//! end
//! <rows*cols little-endian f64 per tensor, in declared order>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::mlp::{Activation, Layer, Mlp};
use super::tensor::Tensor2;

const MAGIC: &str = "oilca-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub activation: Option<Activation>,
    pub value: Tensor2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub step: u64,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, msg: msg.into() }
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, step: u64) -> Self {
        Self { kind: kind.to_string(), seed, step, meta: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: &Tensor2) {
        self.tensors.push(TensorEntry { name: name.into(), activation: None, value: value.clone() });
    }

    pub fn push_mlp(&mut self, prefix: &str, mlp: &Mlp) {
        for (i, l) in mlp.layers().iter().enumerate() {
            self.tensors.push(TensorEntry {
                name: format!("{prefix}.{i}.weight"),
                activation: Some(l.activation),
                value: l.weight.clone(),
            });
            self.tensors.push(TensorEntry { name: format!("{prefix}.{i}.bias"), activation: None, value: l.bias.clone() });
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format { offset: 0, msg: format!("checkpoint lacks meta `{key}`") })
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| Error::Format { offset: 0, msg: format!("meta `{key}` = `{raw}` unparsable") })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format { offset: 0, msg: format!("checkpoint kind `{}`, expected `{kind}`", self.kind) });
        }
        Ok(())
    }

    /// Looks up a tensor by name and checks its shape.
    pub fn tensor(&self, name: &str, rows: usize, cols: usize) -> Result<&Tensor2> {
        let e = self
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format { offset: 0, msg: format!("checkpoint lacks tensor `{name}`") })?;
        if e.value.shape() != (rows, cols) {
            return Err(Error::Dimension(format!(
                "tensor `{name}` is {:?}, expected {rows}x{cols}",
                e.value.shape()
            )));
        }
        Ok(&e.value)
    }

    /// Rebuilds an MLP stored under `prefix`, requiring the given dims and activations.
    pub fn mlp(&self, prefix: &str, dims: &[usize], acts: &[Activation]) -> Result<Mlp> {
        let mut layers = Vec::with_capacity(acts.len());
        for (i, &act) in acts.iter().enumerate() {
            let wname = format!("{prefix}.{i}.weight");
            let weight = self.tensor(&wname, dims[i], dims[i + 1])?.clone();
            let stored = self.tensors.iter().find(|e| e.name == wname).and_then(|e| e.activation);
            if stored != Some(act) {
                return Err(Error::Dimension(format!("layer `{wname}` activation {stored:?}, expected {act:?}")));
            }
            let bias = self.tensor(&format!("{prefix}.{i}.bias"), 1, dims[i + 1])?.clone();
            layers.push(Layer { weight, bias, activation: act });
        }
        if self.tensors.iter().any(|e| e.name == format!("{prefix}.{}.weight", acts.len())) {
            return Err(Error::Dimension(format!("`{prefix}` has more than {} layers", acts.len())));
        }
        Mlp::from_layers(layers)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\nkind {}\nseed {}\nstep {}\n", self.kind, self.seed, self.step);
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for e in &self.tensors {
            let act = e.activation.map_or("-", Activation::name);
            header.push_str(&format!("tensor {} {} {} {act}\n", e.name, e.value.rows(), e.value.cols()));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for e in &self.tensors {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<(usize, String)> {
            let start = *pos;
            let rel = bytes[start..].iter().position(|&b| b == b'\n').ok_or_else(|| fmt_err(start, "unterminated header"))?;
            *pos = start + rel + 1;
            let line = std::str::from_utf8(&bytes[start..start + rel]).map_err(|_| fmt_err(start, "header is not UTF-8"))?;
            Ok((start, line.to_string()))
        };

        let (off, magic) = next_line(&mut pos)?;
        if magic != MAGIC {
            return Err(fmt_err(off, format!("bad magic `{magic}`")));
        }
        let mut ck = Checkpoint::new("", 0, 0);
        let mut shapes = Vec::new();
        loop {
            let (off, line) = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            let bad = || fmt_err(off, format!("malformed header line `{line}`"));
            match parts[0] {
                "kind" if parts.len() == 2 => ck.kind = parts[1].to_string(),
                "seed" if parts.len() == 2 => ck.seed = parts[1].parse().map_err(|_| bad())?,
                "step" if parts.len() == 2 => ck.step = parts[1].parse().map_err(|_| bad())?,
                "meta" if parts.len() >= 3 => {
                    ck.meta.insert(parts[1].to_string(), parts[2..].join(" "));
                }
                "tensor" if parts.len() == 5 => {
                    let rows: usize = parts[2].parse().map_err(|_| bad())?;
                    let cols: usize = parts[3].parse().map_err(|_| bad())?;
                    let act = match parts[4] {
                        "-" => None,
                        a => Some(Activation::parse(a).ok_or_else(bad)?),
                    };
                    shapes.push((parts[1].to_string(), rows, cols, act));
                }
                _ => return Err(bad()),
            }
        }
        let need: usize = shapes.iter().map(|(_, r, c, _)| r * c * 8).sum();
        if bytes.len() - pos != need {
            return Err(fmt_err(pos, format!("payload has {} bytes, header declares {need}", bytes.len() - pos)));
        }
        for (name, rows, cols, act) in shapes {
            let n = rows * cols;
            let data: Vec<f64> = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let value = Tensor2::new(rows, cols, data).map_err(|e| fmt_err(pos, format!("tensor `{name}`: {e}")))?;
            pos += 8 * n;
            ck.tensors.push(TensorEntry { name, activation: act, value });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
