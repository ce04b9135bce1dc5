//! Binary model checkpoints: `SDCKPT01`, a little-endian u64 header length,
//! a JSON header (layer specs, whitening layout, training metadata), then
//! every parameter and running statistic as little-endian f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Model;
use crate::nn::{LayerSpec, Network, Shape};
use crate::training::TrainConfig;
use crate::whitening::{group_ranges, RunningGroup, WhiteningConfig, WhiteningState};

const MAGIC: &[u8; 8] = b"SDCKPT01";

/// What was trained, on what.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub dataset: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    input: Shape,
    encoder: Vec<LayerSpec>,
    classifier: Vec<LayerSpec>,
    seed: u64,
    param_count: usize,
    whitening: Option<WhiteningConfig>,
    has_running: bool,
    meta: CheckpointMeta,
}

pub fn encode(model: &Model, meta: &CheckpointMeta) -> Vec<u8> {
    let running = model.whitening.as_ref().and_then(|w| w.running());
    let header = Header {
        input: model.net.input_shape(),
        encoder: model.net.encoder.specs(),
        classifier: model.net.classifier.specs(),
        seed: model.net.seed,
        param_count: model.net.param_count(),
        whitening: model.whitening.as_ref().map(|w| w.cfg),
        has_running: running.is_some(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("plain data serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut push = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    model.net.params_flat().into_iter().for_each(&mut push);
    for g in running.into_iter().flatten() {
        g.mean.iter().copied().for_each(&mut push);
        g.transform.data().iter().copied().for_each(&mut push);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::format(16, "truncated checkpoint header"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::format(16, format!("bad checkpoint header: {e}")))?;
    let body = &bytes[16 + len..];
    if body.len() % 8 != 0 {
        return Err(Error::format(16 + len, "checkpoint body is not a whole number of f64 values"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut net = Network::new(header.input, &header.encoder, &header.classifier, header.seed)?;
    if net.param_count() != header.param_count || values.len() < header.param_count {
        return Err(Error::format(16 + len, "parameter count does not match the layer specs"));
    }
    net.set_params_flat(&values[..header.param_count])?;
    let mut rest = &values[header.param_count..];
    let whitening = match header.whitening {
        None => None,
        Some(cfg) if !header.has_running => Some(WhiteningState::new(net.feature_dim(), cfg)?),
        Some(cfg) => {
            let dim = net.feature_dim();
            let mut running = Vec::new();
            for r in group_ranges(dim, cfg.group_size) {
                let n = r.len();
                if rest.len() < n + n * n {
                    return Err(Error::format(bytes.len(), "truncated running statistics"));
                }
                running.push(RunningGroup {
                    mean: rest[..n].to_vec(),
                    transform: Matrix::from_vec(n, n, rest[n..n + n * n].to_vec())?,
                });
                rest = &rest[n + n * n..];
            }
            Some(WhiteningState::from_running(dim, cfg, running)?)
        }
    };
    if !rest.is_empty() {
        return Err(Error::format(bytes.len() - 8 * rest.len(), "trailing values after checkpoint body"));
    }
    Ok((Model { net, whitening }, header.meta))
}

pub fn save(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, encode(model, meta))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::model::Architecture;
    use crate::training::{fit, TrainMode};

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = make_synthetic(SyntheticKind::PlantedPatch, 80, 16, 2).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::SaliencyDecor,
            arch: Architecture::Mlp { hidden: 6 },
            features: 5,
            group_size: 2,
            batch_size: 16,
            epochs: 1,
            ..Default::default()
        };
        let model = fit(&ds, &cfg, None).unwrap().model;
        let meta = CheckpointMeta { train: cfg, dataset: ds.name.clone() };
        let bytes = encode(&model, &meta);
        let (back, meta_back) = decode(&bytes).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(back.net, model.net);
        let bits = |m: &Model| -> Vec<u64> {
            m.whitening
                .as_ref()
                .unwrap()
                .running()
                .unwrap()
                .iter()
                .flat_map(|g| g.mean.iter().chain(g.transform.data()).map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(bits(&back), bits(&model));
        assert_eq!(encode(&back, &meta), bytes);
        assert_eq!(back.logits(&ds.test_x).unwrap(), model.logits(&ds.test_x).unwrap());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        assert!(matches!(decode(b"nonsense"), Err(Error::Format { offset: 0, .. })));
        let model = Model::new(Shape::flat(4), 2, Architecture::Mlp { hidden: 3 }, 2, None, 0).unwrap();
        let meta = CheckpointMeta { train: TrainConfig::default(), dataset: "x".into() };
        let mut bytes = encode(&model, &meta);
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }
}
