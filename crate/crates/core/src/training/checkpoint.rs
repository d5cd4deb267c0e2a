//! Binary checkpoint container.
//!
//! Layout: magic `TCMOA1`; `u32` tensor count; per tensor a `u32`-prefixed
//! UTF-8 name, `u32` rank, `u64` extents and little-endian `f64` payload;
//! then a `u64`-prefixed `key=value` text block echoing the settings and
//! run state. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::optim::{AdamState, EmaState};
use super::TrainState;
use crate::autodiff::Tensor;
use crate::config::Settings;
use crate::error::{Error, Result};
use crate::model::TcMoaModel;

pub const MAGIC: &[u8; 6] = b"TCMOA1";

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format { kind: "checkpoint", detail: detail.into() }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let store = &state.model.params;
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (_, e) in store.iter() {
        tensors.push((format!("param/{}", e.name), &e.value));
    }
    for (id, t) in &state.ema.shadow {
        tensors.push((format!("ema/{}", store.entry(*id).name), t));
    }
    for (id, (m, v)) in &state.adam.moments {
        let name = &store.entry(*id).name;
        tensors.push((format!("adam_m/{name}"), m));
        tensors.push((format!("adam_v/{name}"), v));
    }
    let mut out = MAGIC.to_vec();
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        push_tensor(&mut out, name, t);
    }
    let mut text = state.settings.to_text();
    text.push_str(&format!("state.step={}\n", state.step));
    text.push_str(&format!("state.adam_t={}\n", state.adam.t));
    let mse = state.pretrain_mse.map_or("none".to_string(), |v| v.to_string());
    text.push_str(&format!("state.pretrain_mse={mse}\n"));
    out.extend((text.len() as u64).to_le_bytes());
    out.extend(text.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| malformed(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(malformed("bad magic"));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| malformed("tensor name is not utf-8"))?.to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| malformed("tensor too large"))?, "payload")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| malformed(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(malformed(format!("duplicate tensor {name}")));
        }
    }
    let text_len = r.u64("config length")? as usize;
    let text = std::str::from_utf8(r.take(text_len, "config")?).map_err(|_| malformed("config is not utf-8"))?;
    if r.pos != bytes.len() {
        return Err(malformed("trailing bytes"));
    }

    let mut settings = Settings::default();
    let mut run = BTreeMap::new();
    let mut settings_text = String::new();
    for line in text.lines() {
        match line.strip_prefix("state.") {
            Some(rest) => {
                let (k, v) = rest.split_once('=').ok_or_else(|| malformed(format!("bad state line `{line}`")))?;
                run.insert(k.to_string(), v.to_string());
            }
            None => {
                settings_text.push_str(line);
                settings_text.push('\n');
            }
        }
    }
    settings.apply_text(&settings_text)?;
    let get = |k: &str| run.get(k).ok_or_else(|| malformed(format!("missing state.{k}")));
    let step: u64 = get("step")?.parse().map_err(|_| malformed("bad state.step"))?;
    let adam_t: u64 = get("adam_t")?.parse().map_err(|_| malformed("bad state.adam_t"))?;
    let pretrain_mse = match get("pretrain_mse")?.as_str() {
        "none" => None,
        v => Some(v.parse().map_err(|_| malformed("bad state.pretrain_mse"))?),
    };

    let mut model = TcMoaModel::new(settings.model.clone(), 0)?;
    let ids: Vec<_> = model.params.ids().collect();
    let mut take = |key: String, expect: &[usize]| -> Result<Tensor> {
        let t = tensors.remove(&key).ok_or_else(|| malformed(format!("missing tensor {key}")))?;
        if t.shape() != expect {
            return Err(malformed(format!("{key} has shape {:?}, expected {:?}", t.shape(), expect)));
        }
        Ok(t)
    };
    for &id in &ids {
        let e = model.params.entry(id);
        let t = take(format!("param/{}", e.name), e.value.shape())?;
        *model.params.get_mut(id) = t;
    }
    let mut ema = EmaState::default();
    for id in model.params.ids_where(|r| r.has_ema()) {
        let e = model.params.entry(id);
        ema.shadow.insert(id, take(format!("ema/{}", e.name), e.value.shape())?);
    }
    let mut adam = AdamState { t: adam_t, ..Default::default() };
    for id in model.params.ids_where(|r| r.is_trainable()) {
        let e = model.params.entry(id);
        let m = take(format!("adam_m/{}", e.name), e.value.shape())?;
        let v = take(format!("adam_v/{}", e.name), e.value.shape())?;
        adam.moments.insert(id, (m, v));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(malformed(format!("unexpected tensor {extra}")));
    }
    Ok(TrainState { settings, model, adam, ema, step, pretrain_mse })
}

pub fn save(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(state))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainState> {
    decode(&fs::read(path)?)
}
