//! Checkpoint file: a text manifest terminated by `end`, then the raw
//! little-endian arrays in manifest order.

use std::collections::HashMap;
use std::path::Path;

use super::{Adam, Model, TrainConfig, TrainState};
use crate::encoders::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &str = "ssir-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn groups(state: &TrainState) -> Vec<(String, &ParamStore<f32>)> {
    vec![
        ("model1".into(), &state.models[0]),
        ("model2".into(), &state.models[1]),
        ("cls".into(), &state.classifier),
    ]
}

fn arrays(state: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for (g, store) in groups(state) {
        for (n, t) in store.names.iter().zip(&store.tensors) {
            out.push((format!("{g}.{n}"), t));
        }
    }
    for (k, (g, store)) in groups(state).into_iter().enumerate() {
        let a = &state.adam[k];
        for (i, n) in store.names.iter().enumerate() {
            out.push((format!("adam.{g}.m.{n}"), &a.m[i]));
            out.push((format!("adam.{g}.v.{n}"), &a.v[i]));
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    let mut head = format!("{MAGIC}\nconfig_hash = {}\ndtype = {}\niteration = {}\n", cfg.hash(), f32::DTYPE, state.iteration);
    let steps: Vec<String> = state.adam.iter().map(|a| a.step.to_string()).collect();
    head += &format!("adam_step = {}\n", steps.join(" "));
    for line in cfg.to_text().lines() {
        head += &format!("config.{line}\n");
    }
    let mut body = Vec::new();
    for (name, t) in arrays(state) {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        head += &format!("entry = {name};{};{};{}\n", dims.join("x"), body.len(), t.len() * f32::BYTES);
        for &v in &t.data {
            v.write_le(&mut body);
        }
    }
    head += "end\n";
    let mut bytes = head.into_bytes();
    bytes.extend_from_slice(&body);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint. When `expected` is given its hash must match the
/// stored one.
pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let split = bytes.windows(5).position(|w| w == b"\nend\n").ok_or_else(|| bad("manifest has no `end` line".into()))?;
    let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("manifest is not text".into()))?;
    let body = &bytes[split + 5..];
    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut fields = HashMap::new();
    let mut config_text = String::new();
    let mut entries = Vec::new();
    for line in lines {
        let (k, v) = line.split_once(" = ").ok_or_else(|| bad(format!("bad manifest line `{line}`")))?;
        if let Some(ck) = k.strip_prefix("config.") {
            config_text += &format!("{ck} = {v}\n");
        } else if k == "entry" {
            entries.push(v.to_string());
        } else {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    let field = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing `{k}`")));
    if field("dtype")? != f32::DTYPE {
        return Err(bad(format!("unsupported dtype {}", field("dtype")?)));
    }
    let config = TrainConfig::parse(&config_text).map_err(|e| bad(format!("embedded config: {e}")))?;
    let stored = field("config_hash")?;
    if *stored != config.hash() {
        return Err(bad(format!("config hash {stored} does not match the embedded config")));
    }
    if let Some(exp) = expected {
        if exp.hash() != *stored {
            return Err(bad(format!("config hash {stored} does not match the current config {}", exp.hash())));
        }
    }
    let iteration: usize = field("iteration")?.parse().map_err(|_| bad("bad iteration".into()))?;
    let steps: Vec<u64> = field("adam_step")?
        .split(' ')
        .map(|s| s.parse().map_err(|_| bad("bad adam_step".into())))
        .collect::<Result<_>>()?;
    if steps.len() != 3 {
        return Err(bad("adam_step needs three values".into()));
    }

    // the expected layout comes from a fresh state for this config
    let mut state = Model::new(&config)?.init_state(&config);
    state.iteration = iteration;
    for (k, s) in steps.iter().enumerate() {
        state.adam[k].step = *s;
    }
    let mut table: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for e in &entries {
        let parts: Vec<&str> = e.split(';').collect();
        if parts.len() != 4 {
            return Err(bad(format!("entry `{e}` needs name;shape;offset;bytes")));
        }
        let name = parts[0];
        let shape: Vec<usize> = parts[1]
            .split('x')
            .map(|d| d.parse().map_err(|_| bad(format!("entry {name}: bad shape"))))
            .collect::<Result<_>>()?;
        let off: usize = parts[2].parse().map_err(|_| bad(format!("entry {name}: bad offset")))?;
        let len: usize = parts[3].parse().map_err(|_| bad(format!("entry {name}: bad length")))?;
        if len != shape.iter().product::<usize>() * f32::BYTES || off + len > body.len() {
            return Err(bad(format!("entry {name}: {len} bytes at {off} do not fit shape {shape:?} in {} bytes", body.len())));
        }
        let data = body[off..off + len].chunks_exact(f32::BYTES).map(f32::read_le).collect();
        if table.insert(name.to_string(), (shape, data)).is_some() {
            return Err(bad(format!("entry {name} listed twice")));
        }
    }
    let mut fill = |name: String, t: &mut Tensor<f32>| -> Result<()> {
        let (shape, data) = table.remove(&name).ok_or_else(|| bad(format!("entry {name} missing")))?;
        if shape != t.shape {
            return Err(bad(format!("entry {name}: shape {shape:?}, expected {:?}", t.shape)));
        }
        t.data = data;
        Ok(())
    };
    let TrainState { models, classifier, adam, .. } = &mut state;
    let [m1, m2] = models;
    for (k, (g, store)) in [("model1", m1), ("model2", m2), ("cls", classifier)].into_iter().enumerate() {
        let Adam { m, v, .. } = &mut adam[k];
        for (i, n) in store.names.iter().enumerate() {
            fill(format!("{g}.{n}"), &mut store.tensors[i])?;
            fill(format!("adam.{g}.m.{n}"), &mut m[i])?;
            fill(format!("adam.{g}.v.{n}"), &mut v[i])?;
        }
    }
    if let Some(extra) = table.keys().next() {
        return Err(bad(format!("unexpected entry {extra}")));
    }
    Ok(Checkpoint { config, state })
}
