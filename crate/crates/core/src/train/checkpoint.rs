//! Directory checkpoints: a `manifest.txt` of `key=value` lines and one
//! binary record per tensor.
//!
//! Record layout: the magic `CAAT1`, a `u8` version, a `u32` name length and
//! UTF-8 name, a `u32` rank count, that many `u64` extents, then the values
//! as little-endian `f64`. Integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::model::{CaatModel, ModelConfig};
use super::optim::{AdamW, AdamWConfig};
use crate::collectives::CommLedger;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CAAT1";
pub const VERSION: u8 = 1;
const MANIFEST: &str = "manifest.txt";
const LEDGER: &str = "ledger.csv";
const FORMAT: &str = "caat-checkpoint";

pub fn write_tensor_record<T: Scalar, W: Write>(
    mut w: W,
    name: &str,
    t: &Tensor<T>,
) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_f64_lossless().to_le_bytes())?;
    }
    Ok(())
}

/// Parses one record. `what` names the source in error messages.
pub fn read_tensor_record<T: Scalar, R: Read>(
    mut r: R,
    what: &Path,
) -> Result<(String, Tensor<T>)> {
    let fail = |reason: String| Error::checkpoint(what, reason);
    let mut read = |buf: &mut [u8], field: &str| {
        r.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => fail(format!("truncated while reading {field}")),
            _ => Error::Io(e),
        })
    };
    let mut magic = [0u8; 5];
    read(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(fail(format!("bad magic {magic:?}")));
    }
    let mut b1 = [0u8; 1];
    read(&mut b1, "version")?;
    if b1[0] != VERSION {
        return Err(fail(format!("unsupported version {}", b1[0])));
    }
    let mut b4 = [0u8; 4];
    read(&mut b4, "name length")?;
    let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
    read(&mut name, "name")?;
    let name = String::from_utf8(name).map_err(|_| fail("name is not UTF-8".into()))?;
    read(&mut b4, "rank")?;
    let ndim = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut b8 = [0u8; 8];
    for _ in 0..ndim {
        read(&mut b8, "extents")?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && ndim > 0)
        .ok_or_else(|| fail(format!("invalid extents {shape:?}")))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        read(&mut b8, "values")?;
        data.push(T::cst(f64::from_le_bytes(b8)));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(fail("trailing bytes after the last value".into()));
    }
    Ok((name, Tensor::new(shape, data)?))
}

/// Ordered `key=value` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest(pub BTreeMap<String, String>);

impl Manifest {
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("manifest is missing `{key}`")))
    }

    pub fn parse_value<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("manifest value `{key}={raw}` is malformed")))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1))
            })?;
            out.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(out))
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Everything restored from a checkpoint directory.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: CaatModel<T>,
    pub optimizer: Option<AdamW<T>>,
    pub step: u64,
    pub ledger: CommLedger,
    pub manifest: Manifest,
}

fn record_path(dir: &Path, group: &str, name: &str) -> PathBuf {
    dir.join(group).join(format!("{name}.bin"))
}

fn write_record<T: Scalar>(path: &Path, name: &str, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_tensor_record(&mut w, name, t)?;
    w.flush()?;
    Ok(())
}

fn read_record<T: Scalar>(path: &Path, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let (found, t) = read_tensor_record(bytes.as_slice(), path)?;
    if found != name {
        return Err(Error::checkpoint(
            path,
            format!("holds `{found}`, expected `{name}`"),
        ));
    }
    if t.shape() != shape {
        return Err(Error::checkpoint(
            path,
            format!(
                "extents {:?} do not match the model's {:?}",
                t.shape(),
                shape
            ),
        ));
    }
    Ok(t)
}

/// Writes `model`, optional optimizer state and the communication ledger.
/// `extra` entries are copied into the manifest verbatim.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    model: &CaatModel<T>,
    optimizer: Option<&AdamW<T>>,
    step: u64,
    ledger: &CommLedger,
    extra: &Manifest,
) -> Result<()> {
    fs::create_dir_all(dir.join("params"))?;
    let names = model.param_names();
    for (name, t) in names.iter().zip(model.params()) {
        write_record(&record_path(dir, "params", name), name, t)?;
    }
    let mut manifest = extra.clone();
    let c = model.config();
    manifest.set("format", FORMAT);
    manifest.set("version", VERSION);
    manifest.set("step", step);
    manifest.set("model.vocab", c.vocab);
    manifest.set("model.hidden", c.hidden);
    manifest.set("model.heads", c.heads);
    manifest.set("model.layers", c.layers);
    manifest.set("model.ranks", c.ranks);
    manifest.set("model.max_seq", c.max_seq);
    manifest.set("model.p", c.p);
    manifest.set("model.scale_private", c.scale_private);
    manifest.set("tensors", names.len());
    if let Some(opt) = optimizer {
        fs::create_dir_all(dir.join("adam_m"))?;
        fs::create_dir_all(dir.join("adam_v"))?;
        for ((name, m), v) in names
            .iter()
            .zip(opt.first_moments())
            .zip(opt.second_moments())
        {
            write_record(&record_path(dir, "adam_m", name), name, m)?;
            write_record(&record_path(dir, "adam_v", name), name, v)?;
        }
        let oc = opt.config;
        manifest.set("adam.step", opt.step_count());
        manifest.set("adam.lr", oc.lr);
        manifest.set("adam.beta1", oc.beta1);
        manifest.set("adam.beta2", oc.beta2);
        manifest.set("adam.eps", oc.eps);
        manifest.set("adam.weight_decay", oc.weight_decay);
    }
    let mut w = BufWriter::new(fs::File::create(dir.join(LEDGER))?);
    ledger.write_csv(&mut w)?;
    w.flush()?;
    fs::write(dir.join(MANIFEST), manifest.render())?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::checkpoint(&manifest_path, e.to_string()))?;
    let manifest = Manifest::parse(&text)?;
    if manifest.get("format") != Some(FORMAT) {
        return Err(Error::checkpoint(
            &manifest_path,
            "not a checkpoint manifest",
        ));
    }
    if manifest.parse_value::<u8>("version")? != VERSION {
        return Err(Error::checkpoint(
            &manifest_path,
            "unsupported checkpoint version",
        ));
    }
    let config = ModelConfig {
        vocab: manifest.parse_value("model.vocab")?,
        hidden: manifest.parse_value("model.hidden")?,
        heads: manifest.parse_value("model.heads")?,
        layers: manifest.parse_value("model.layers")?,
        ranks: manifest.parse_value("model.ranks")?,
        max_seq: manifest.parse_value("model.max_seq")?,
        p: manifest.parse_value("model.p")?,
        scale_private: manifest.parse_value("model.scale_private")?,
    };
    let mut model = CaatModel::<T>::init(config, 0)?;
    let names = model.param_names();
    for (name, slot) in names.iter().zip(model.params_mut()) {
        *slot = read_record(&record_path(dir, "params", name), name, slot.shape())?;
    }
    let optimizer = if manifest.get("adam.step").is_some() {
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (name, p) in names.iter().zip(model.params()) {
            m.push(read_record(
                &record_path(dir, "adam_m", name),
                name,
                p.shape(),
            )?);
            v.push(read_record(
                &record_path(dir, "adam_v", name),
                name,
                p.shape(),
            )?);
        }
        let config = AdamWConfig {
            lr: manifest.parse_value("adam.lr")?,
            beta1: manifest.parse_value("adam.beta1")?,
            beta2: manifest.parse_value("adam.beta2")?,
            eps: manifest.parse_value("adam.eps")?,
            weight_decay: manifest.parse_value("adam.weight_decay")?,
        };
        Some(AdamW::from_state(
            config,
            manifest.parse_value("adam.step")?,
            m,
            v,
        )?)
    } else {
        None
    };
    let ledger_path = dir.join(LEDGER);
    let ledger = match fs::File::open(&ledger_path) {
        Ok(f) => CommLedger::read_csv(io::BufReader::new(f))?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => CommLedger::new(),
        Err(e) => return Err(Error::checkpoint(&ledger_path, e.to_string())),
    };
    Ok(Checkpoint {
        model,
        optimizer,
        step: manifest.parse_value("step")?,
        ledger,
        manifest,
    })
}
