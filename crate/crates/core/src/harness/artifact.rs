//! Binary artifact container for datasets, models and reports.
//!
//! Layout: magic `KLTW`, a little-endian `u32` version, then records until
//! end of file. A record is `u32` name length, name bytes, a dtype byte
//! (0 = little-endian f64, 1 = UTF-8 bytes), `u32` rank, `u64` dims and the
//! raw payload. Every file carries a `meta` record (JSON) naming the object
//! kind; a pretty-printed copy of it is written next to the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::dataset::{Controls, Dataset, Sample};
use super::report::ErrorReport;
use crate::error::{Error, Result};
use crate::field::{Field, FieldKind, Grid};
use crate::kl::KlBasis;
use crate::latent::mlp::Mlp;
use crate::latent::{LatentMap, LinearMap};
use crate::transfer::{ConditionSpec, ControlBases, LinearProblem, ProblemSetup, SurrogateModel};

pub const MAGIC: &[u8; 4] = b"KLTW";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_BYTES: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
struct Record {
    dims: Vec<usize>,
    payload: Payload,
}

/// Named records of one container file.
#[derive(Clone, Debug, Default, PartialEq)]
struct Container {
    records: BTreeMap<String, Record>,
}

impl Container {
    fn put(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) {
        self.records.insert(
            name.to_string(),
            Record {
                dims,
                payload: Payload::F64(data),
            },
        );
    }

    fn put_vec(&mut self, name: &str, data: &[f64]) {
        self.put(name, vec![data.len()], data.to_vec());
    }

    /// Column-major matrix, stored with dims `[rows, cols]`.
    fn put_matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        self.put(name, vec![m.nrows(), m.ncols()], m.as_slice().to_vec());
    }

    fn put_meta(&mut self, meta: &Value) {
        let bytes = serde_json::to_vec(meta).expect("JSON values always serialize");
        self.records.insert(
            "meta".into(),
            Record {
                dims: vec![bytes.len()],
                payload: Payload::Bytes(bytes),
            },
        );
    }

    fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.records.get(name) {
            Some(Record {
                dims,
                payload: Payload::F64(v),
            }) => Ok((dims, v)),
            Some(_) => Err(Error::format(0, format!("record `{name}` is not a float array"))),
            None => Err(Error::format(0, format!("missing record `{name}`"))),
        }
    }

    fn get_vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.1.to_vec())
    }

    fn get_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let (dims, v) = self.get(name)?;
        if dims.len() != 2 {
            return Err(Error::format(0, format!("record `{name}` is not a matrix")));
        }
        Ok(DMatrix::from_column_slice(dims[0], dims[1], v))
    }

    fn meta(&self) -> Result<Value> {
        match self.records.get("meta") {
            Some(Record {
                payload: Payload::Bytes(b),
                ..
            }) => serde_json::from_slice(b).map_err(|e| Error::format(0, format!("bad meta record: {e}"))),
            _ => Err(Error::format(0, "missing meta record")),
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match rec.payload {
                Payload::F64(_) => DTYPE_F64,
                Payload::Bytes(_) => DTYPE_BYTES,
            });
            out.extend_from_slice(&(rec.dims.len() as u32).to_le_bytes());
            for d in &rec.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &rec.payload {
                Payload::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Payload::Bytes(b) => out.extend_from_slice(b),
            }
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "not a KLTW artifact (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported artifact version {version}")));
        }
        let mut c = Container::default();
        while r.pos < bytes.len() {
            let start = r.pos as u64;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(start, "record name is not UTF-8"))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(start, "record dims overflow"))?;
            let payload = match dtype {
                DTYPE_F64 => {
                    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::format(start, "record too large"))?)?;
                    Payload::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                            .collect(),
                    )
                }
                DTYPE_BYTES => Payload::Bytes(r.take(count)?.to_vec()),
                other => return Err(Error::format(r.pos as u64 - 1, format!("unknown dtype code {other}"))),
            };
            if c.records.insert(name.clone(), Record { dims, payload }).is_some() {
                return Err(Error::format(start, format!("duplicate record `{name}`")));
            }
        }
        Ok(c)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.pos as u64,
                format!("truncated artifact: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Objects that can be stored as artifacts.
#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Dataset(Dataset),
    Model(SurrogateModel),
    Report(ErrorReport),
}

impl Artifact {
    pub fn kind(&self) -> &'static str {
        match self {
            Artifact::Dataset(_) => "dataset",
            Artifact::Model(_) => "model",
            Artifact::Report(_) => "report",
        }
    }
}

/// Path of the JSON manifest written next to an artifact.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn save_artifact(path: &Path, object: &Artifact) -> Result<()> {
    let c = match object {
        Artifact::Dataset(d) => encode_dataset(d)?,
        Artifact::Model(m) => encode_model(m)?,
        Artifact::Report(r) => {
            let mut c = Container::default();
            c.put_meta(&json!({ "kind": "report", "report": to_value(r)? }));
            c
        }
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, c.encode())?;
    let mut manifest = c.meta()?;
    let arrays: BTreeMap<&String, &Vec<usize>> =
        c.records.iter().filter(|(n, _)| n.as_str() != "meta").map(|(n, r)| (n, &r.dims)).collect();
    manifest["arrays"] = to_value(&arrays)?;
    std::fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::invalid(e.to_string()))?,
    )?;
    Ok(())
}

pub fn load_artifact(path: &Path) -> Result<Artifact> {
    decode_artifact(&std::fs::read(path)?)
}

/// Decodes an artifact from its bytes. Nothing is returned unless the whole
/// file parses.
pub fn decode_artifact(bytes: &[u8]) -> Result<Artifact> {
    let c = Container::decode(bytes)?;
    let meta = c.meta()?;
    match meta.get("kind").and_then(Value::as_str) {
        Some("dataset") => Ok(Artifact::Dataset(decode_dataset(&c, &meta)?)),
        Some("model") => Ok(Artifact::Model(decode_model(&c, &meta)?)),
        Some("report") => Ok(Artifact::Report(from_value(&meta["report"])?)),
        other => Err(Error::format(0, format!("unknown artifact kind {other:?}"))),
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    match load_artifact(path)? {
        Artifact::Dataset(d) => Ok(d),
        other => Err(Error::format(0, format!("expected a dataset, found a {}", other.kind()))),
    }
}

pub fn load_model(path: &Path) -> Result<SurrogateModel> {
    match load_artifact(path)? {
        Artifact::Model(m) => Ok(m),
        other => Err(Error::format(0, format!("expected a model, found a {}", other.kind()))),
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::invalid(e.to_string()))
}

fn from_value<T: for<'de> Deserialize<'de>>(v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::format(0, format!("bad metadata: {e}")))
}

fn put_basis(c: &mut Container, prefix: &str, b: &KlBasis) -> Value {
    c.put_vec(&format!("{prefix}.mean"), b.mean());
    c.put_vec(&format!("{prefix}.eigenvalues"), b.eigenvalues());
    c.put_matrix(&format!("{prefix}.modes"), b.modes());
    c.put_vec(&format!("{prefix}.rtol"), &[b.rtol()]);
    json!({ "kind": b.kind() })
}

fn get_basis(c: &Container, prefix: &str, grid: Grid, meta: &Value) -> Result<KlBasis> {
    let kind: FieldKind = from_value(&meta["kind"])?;
    let rtol = c.get_vec(&format!("{prefix}.rtol"))?;
    KlBasis::from_parts(
        grid,
        kind,
        c.get_vec(&format!("{prefix}.mean"))?,
        c.get_vec(&format!("{prefix}.eigenvalues"))?,
        c.get_matrix(&format!("{prefix}.modes"))?,
        rtol.first().copied().unwrap_or(0.0),
    )
    .map_err(|e| Error::format(0, format!("basis `{prefix}`: {e}")))
}

fn field(grid: Grid, kind: FieldKind, values: Vec<f64>, what: &str) -> Result<Field> {
    Field::new(grid, kind, values).map_err(|e| Error::format(0, format!("{what}: {e}")))
}

/// Rows of a sample-major matrix record.
fn rows(c: &Container, name: &str, n: usize) -> Result<Vec<Vec<f64>>> {
    let (dims, v) = c.get(name)?;
    if dims.len() != 2 || dims[0] != n {
        return Err(Error::format(0, format!("record `{name}` does not hold {n} rows")));
    }
    Ok(v.chunks(dims[1].max(1)).take(n).map(<[f64]>::to_vec).collect())
}

fn put_rows(c: &mut Container, name: &str, rows: impl Iterator<Item = Vec<f64>>, width: usize) {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend(r);
        n += 1;
    }
    c.put(name, vec![n, width], data);
}

fn encode_dataset(d: &Dataset) -> Result<Container> {
    let mut c = Container::default();
    let grid = *d.setup.grid();
    let n = d.len();
    let setup = match &d.setup {
        ProblemSetup::Linear(p) => {
            c.put_vec("setup.k", p.k.values());
            json!({ "problem": "linear", "x_star": p.x_star })
        }
        ProblemSetup::Nonlinear { .. } => json!({ "problem": "nonlinear" }),
    };
    let latent_width = d.samples.first().map_or(0, |s| s.latent.len());
    if d.samples.iter().any(|s| s.latent.len() != latent_width) {
        return Err(Error::invalid("dataset samples carry latents of different lengths"));
    }
    put_rows(&mut c, "latent", d.samples.iter().map(|s| s.latent.clone()), latent_width);
    put_rows(&mut c, "solution", d.samples.iter().map(|s| s.solution.values().to_vec()), grid.len());
    match &d.setup {
        ProblemSetup::Linear(_) => {
            let mut f = Vec::with_capacity(n);
            let mut q = Vec::with_capacity(n);
            let mut ibc = Vec::with_capacity(n);
            for s in &d.samples {
                let Controls::Linear { f: sf, q: sq, h0, hl, hr } = &s.controls else {
                    return Err(Error::invalid("linear dataset holds nonlinear controls"));
                };
                f.push(sf.values().to_vec());
                q.push(sq.values().to_vec());
                ibc.push(vec![*h0, *hl, *hr]);
            }
            put_rows(&mut c, "f", f.into_iter(), grid.len());
            put_rows(&mut c, "q", q.into_iter(), grid.time_nodes());
            put_rows(&mut c, "ibc", ibc.into_iter(), 3);
        }
        ProblemSetup::Nonlinear { .. } => {
            let mut k = Vec::with_capacity(n);
            for s in &d.samples {
                let Controls::Nonlinear { k: sk } = &s.controls else {
                    return Err(Error::invalid("nonlinear dataset holds linear controls"));
                };
                k.push(sk.values().to_vec());
            }
            put_rows(&mut c, "k", k.into_iter(), grid.space_nodes());
        }
    }
    c.put_meta(&json!({
        "kind": "dataset",
        "grid": to_value(&grid)?,
        "setup": setup,
        "condition": to_value(&d.condition)?,
        "seed": d.seed,
        "n_samples": n,
    }));
    Ok(c)
}

fn decode_dataset(c: &Container, meta: &Value) -> Result<Dataset> {
    let grid: Grid = from_value(&meta["grid"])?;
    let condition: ConditionSpec = from_value(&meta["condition"])?;
    let seed: u64 = from_value(&meta["seed"])?;
    let n: usize = from_value(&meta["n_samples"])?;
    let latents = rows(c, "latent", n)?;
    let solutions = rows(c, "solution", n)?;
    let (setup, controls): (ProblemSetup, Vec<Controls>) = match meta["setup"]["problem"].as_str() {
        Some("linear") => {
            let k = field(grid, FieldKind::SpaceOnly, c.get_vec("setup.k")?, "conductivity")?;
            let x_star: f64 = from_value(&meta["setup"]["x_star"])?;
            let f = rows(c, "f", n)?;
            let q = rows(c, "q", n)?;
            let ibc = rows(c, "ibc", n)?;
            let mut controls = Vec::with_capacity(n);
            for ((f, q), b) in f.into_iter().zip(q).zip(ibc) {
                if b.len() != 3 {
                    return Err(Error::format(0, "IBC record must have three columns"));
                }
                controls.push(Controls::Linear {
                    f: field(grid, FieldKind::SpaceTime, f, "source f")?,
                    q: field(grid, FieldKind::TimeOnly, q, "source q")?,
                    h0: b[0],
                    hl: b[1],
                    hr: b[2],
                });
            }
            (ProblemSetup::Linear(LinearProblem { grid, k, x_star }), controls)
        }
        Some("nonlinear") => {
            let ks = rows(c, "k", n)?;
            let controls = ks
                .into_iter()
                .map(|k| Ok(Controls::Nonlinear { k: field(grid, FieldKind::SpaceOnly, k, "conductivity")? }))
                .collect::<Result<_>>()?;
            (ProblemSetup::Nonlinear { grid }, controls)
        }
        other => return Err(Error::format(0, format!("unknown problem tag {other:?}"))),
    };
    let samples = controls
        .into_iter()
        .zip(latents)
        .zip(solutions)
        .map(|((controls, latent), sol)| {
            Ok(Sample {
                controls,
                latent,
                solution: field(grid, FieldKind::SpaceTime, sol, "solution")?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        setup,
        condition,
        seed,
        samples,
    })
}

fn encode_model(m: &SurrogateModel) -> Result<Container> {
    let mut c = Container::default();
    let state = put_basis(&mut c, "state", &m.state);
    let controls = match &m.controls {
        ControlBases::Linear {
            f,
            q,
            ibc_mean,
            k,
            x_star,
        } => {
            c.put_vec("controls.k_field", k.values());
            json!({
                "problem": "linear",
                "f": put_basis(&mut c, "controls.f", f),
                "q": put_basis(&mut c, "controls.q", q),
                "ibc_mean": ibc_mean,
                "x_star": x_star,
            })
        }
        ControlBases::Nonlinear { k, ibc } => json!({
            "problem": "nonlinear",
            "k": put_basis(&mut c, "controls.k", k),
            "ibc": ibc,
        }),
    };
    let map = match &m.map {
        LatentMap::Linear(l) => {
            c.put_matrix("map.w", &l.w);
            if let Some(b) = &l.bias {
                c.put_vec("map.bias", b.as_slice());
            }
            json!({ "type": "linear", "bias": l.bias.is_some() })
        }
        LatentMap::Mlp(net) => {
            for (i, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
                c.put_matrix(&format!("map.w{i}"), w);
                c.put_vec(&format!("map.b{i}"), b.as_slice());
            }
            json!({ "type": "mlp", "widths": net.widths() })
        }
    };
    c.put_meta(&json!({
        "kind": "model",
        "grid": to_value(&m.grid)?,
        "gamma": m.gamma,
        "condition": to_value(&m.condition)?,
        "state": state,
        "controls": controls,
        "map": map,
    }));
    Ok(c)
}

fn decode_model(c: &Container, meta: &Value) -> Result<SurrogateModel> {
    let grid: Grid = from_value(&meta["grid"])?;
    let state = get_basis(c, "state", grid, &meta["state"])?;
    let cm = &meta["controls"];
    let controls = match cm["problem"].as_str() {
        Some("linear") => ControlBases::Linear {
            f: get_basis(c, "controls.f", grid, &cm["f"])?,
            q: get_basis(c, "controls.q", grid, &cm["q"])?,
            ibc_mean: from_value(&cm["ibc_mean"])?,
            k: field(grid, FieldKind::SpaceOnly, c.get_vec("controls.k_field")?, "conductivity")?,
            x_star: from_value(&cm["x_star"])?,
        },
        Some("nonlinear") => ControlBases::Nonlinear {
            k: get_basis(c, "controls.k", grid, &cm["k"])?,
            ibc: from_value(&cm["ibc"])?,
        },
        other => return Err(Error::format(0, format!("unknown problem tag {other:?}"))),
    };
    let mm = &meta["map"];
    let map = match mm["type"].as_str() {
        Some("linear") => {
            let bias = if mm["bias"].as_bool() == Some(true) {
                Some(DVector::from_vec(c.get_vec("map.bias")?))
            } else {
                None
            };
            LatentMap::Linear(LinearMap {
                w: c.get_matrix("map.w")?,
                bias,
            })
        }
        Some("mlp") => {
            let widths: Vec<usize> = from_value(&mm["widths"])?;
            let layers = widths.len().saturating_sub(1);
            let mut weights = Vec::with_capacity(layers);
            let mut biases = Vec::with_capacity(layers);
            for i in 0..layers {
                weights.push(c.get_matrix(&format!("map.w{i}"))?);
                biases.push(DVector::from_vec(c.get_vec(&format!("map.b{i}"))?));
            }
            LatentMap::Mlp(Mlp::from_parts(weights, biases).map_err(|e| Error::format(0, format!("network: {e}")))?)
        }
        other => return Err(Error::format(0, format!("unknown map type {other:?}"))),
    };
    Ok(SurrogateModel {
        grid,
        state,
        controls,
        map,
        gamma: from_value(&meta["gamma"])?,
        condition: from_value(&meta["condition"])?,
    })
}
