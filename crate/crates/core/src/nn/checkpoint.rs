//! Binary checkpoint format.
//!
//! ```text
//! magic "CAVM" | version u32 | config_len u32 | config JSON
//! tensor_count u32 | tensors...
//! tensor: name_len u32 | name UTF-8 | ndim u32 | dims u32 * ndim | f32 LE data
//! ```
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::network::{ModelConfig, Network};
use super::train::{TrainedModel, TrainingLog};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CAVM";
pub const CHECKPOINT_VERSION: u32 = 1;

type Tensor = (Vec<usize>, Vec<f32>);

fn named_tensors(net: &Network<f32>) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, b) in net.blocks.iter().enumerate() {
        let p = format!("blocks.{i}");
        out.push((
            format!("{p}.conv.weight"),
            (vec![3, 3, b.in_channels, b.out_channels], b.weight.clone()),
        ));
        out.push((
            format!("{p}.conv.bias"),
            (vec![b.out_channels], b.bias.clone()),
        ));
        if let Some(bn) = &b.bn {
            for (name, v) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                out.push((format!("{p}.bn.{name}"), (vec![b.out_channels], v.clone())));
            }
        }
    }
    let dense = |name: &str, d: &super::network::Dense<f32>, out: &mut Vec<(String, Tensor)>| {
        out.push((
            format!("{name}.weight"),
            (vec![d.inputs, d.outputs], d.weight.clone()),
        ));
        out.push((format!("{name}.bias"), (vec![d.outputs], d.bias.clone())));
    };
    if let Some(h) = &net.hidden {
        dense("hidden", h, &mut out);
    }
    dense("head", &net.head, &mut out);
    out
}

pub fn encode(net: &Network<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&net.config)?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    let tensors = named_tensors(net);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, (dims, data)) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Network<f32>> {
    let fail = |reason: String| Error::format(path, reason);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(fail)? != CHECKPOINT_MAGIC {
        return Err(fail("missing CAVM header".into()));
    }
    let version = r.u32().map_err(fail)? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::SchemaMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let len = r.u32().map_err(fail)?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len).map_err(fail)?).map_err(|e| fail(e.to_string()))?;
    let count = r.u32().map_err(fail)?;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32().map_err(fail)?;
        let name = String::from_utf8(r.take(len).map_err(fail)?.to_vec())
            .map_err(|e| fail(e.to_string()))?;
        let ndim = r.u32().map_err(fail)?;
        let dims = (0..ndim)
            .map(|_| r.u32())
            .collect::<std::result::Result<Vec<_>, _>>();
        let dims = dims.map_err(fail)?;
        let numel: usize = dims.iter().product();
        let data = r
            .take(numel * 4)
            .map_err(fail)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(name, (dims, data));
    }
    let mut net = Network::<f32>::init(&config, 0)?;
    for (name, (dims, data)) in named_tensors(&net) {
        let (found_dims, _) = tensors
            .get(&name)
            .ok_or_else(|| fail(format!("missing tensor `{name}`")))?;
        if *found_dims != dims {
            return Err(fail(format!(
                "tensor `{name}` has shape {found_dims:?}, expected {dims:?}"
            )));
        }
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
    }
    let mut take = |name: String| tensors.remove(&name).map(|(_, d)| d).unwrap_or_default();
    for (i, b) in net.blocks.iter_mut().enumerate() {
        b.weight = take(format!("blocks.{i}.conv.weight"));
        b.bias = take(format!("blocks.{i}.conv.bias"));
        if let Some(bn) = &mut b.bn {
            bn.gamma = take(format!("blocks.{i}.bn.gamma"));
            bn.beta = take(format!("blocks.{i}.bn.beta"));
            bn.running_mean = take(format!("blocks.{i}.bn.running_mean"));
            bn.running_var = take(format!("blocks.{i}.bn.running_var"));
        }
    }
    if let Some(h) = &mut net.hidden {
        h.weight = take("hidden.weight".into());
        h.bias = take("hidden.bias".into());
    }
    net.head.weight = take("head.weight".into());
    net.head.bias = take("head.bias".into());
    Ok(net)
}

pub fn save_network(net: &Network<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)?)?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network<f32>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    decode(&std::fs::read(path)?, path)
}

/// Writes `<stem>.cavm` and `<stem>.log.json`.
pub fn save_model(model: &TrainedModel, stem: &Path) -> Result<()> {
    save_network(&model.network, &stem.with_extension("cavm"))?;
    std::fs::write(
        stem.with_extension("log.json"),
        serde_json::to_vec_pretty(&model.log)?,
    )?;
    Ok(())
}

pub fn load_model(stem: &Path) -> Result<TrainedModel> {
    let network = load_network(&stem.with_extension("cavm"))?;
    let log_path = stem.with_extension("log.json");
    let log: TrainingLog = match std::fs::read(&log_path) {
        Ok(bytes) => {
            serde_json::from_slice(&bytes).map_err(|e| Error::format(&log_path, e.to_string()))?
        }
        Err(_) => return Err(Error::MissingArtifact(log_path.display().to_string())),
    };
    Ok(TrainedModel { network, log })
}
