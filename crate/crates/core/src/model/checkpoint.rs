//! Versioned binary checkpoint.
//!
//! Layout (little-endian):
//!
//! ```text
//! "AMELCKPT"            8 bytes
//! version               u32
//! config                u32 length + JSON-encoded ModelConfig
//! tensor count          u32
//! per tensor            u32 ndim, ndim x u32 extent, f32 values
//! norm-state count      u32
//! per batch-norm layer  u32 channels, f32 running_mean, f32 running_var, u64 updates_seen
//! ```
//!
//! Tensors follow declaration order: base parameters, then each expert's
//! parameters. Batch-norm states follow backbone order, then expert order.
//! Values are stored as 32-bit floats, so a reload rounds parameters.

use std::fs;
use std::path::Path;

use super::{AmelModel, BlockNorm, ModelConfig};
use crate::autodiff::BatchNormState;
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{shape_err, AmelError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "AMELCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bn_states(model: &AmelModel) -> Vec<&BatchNormState> {
    let backbone = model.backbone.iter().filter_map(|b| match &b.norm {
        BlockNorm::Batch(bn) => Some(&bn.state),
        BlockNorm::Instance => None,
    });
    let experts = model.experts.iter().filter_map(|e| e.bn.as_ref().map(|bn| &bn.state));
    backbone.chain(experts).collect()
}

fn bn_states_mut(model: &mut AmelModel) -> Vec<&mut BatchNormState> {
    let backbone = model.backbone.iter_mut().filter_map(|b| match &mut b.norm {
        BlockNorm::Batch(bn) => Some(&mut bn.state),
        BlockNorm::Instance => None,
    });
    let experts = model
        .experts
        .iter_mut()
        .filter_map(|e| e.bn.as_mut().map(|bn| &mut bn.state));
    backbone.chain(experts).collect()
}

fn all_params(model: &AmelModel) -> Vec<&Tensor> {
    let mut out = model.base_params();
    for e in &model.experts {
        out.extend(e.params());
    }
    out
}

pub fn encode(model: &AmelModel) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC.as_bytes());
    w.u32(CHECKPOINT_VERSION);
    w.blob(&serde_json::to_vec(&model.config)?);
    let params = all_params(model);
    w.u32(params.len() as u32);
    for p in params {
        w.u32(p.ndim() as u32);
        for &d in p.shape() {
            w.u32(d as u32);
        }
        w.f32s(p.data());
    }
    let states = bn_states(model);
    w.u32(states.len() as u32);
    for s in states {
        w.u32(s.channels() as u32);
        w.f32s(&s.running_mean);
        w.f32s(&s.running_var);
        w.u64(s.updates_seen);
    }
    Ok(w.into_inner())
}

pub fn decode(bytes: &[u8]) -> Result<AmelModel> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(AmelError::BadVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config: ModelConfig = serde_json::from_slice(r.blob("config")?)?;
    let mut model = AmelModel::new(config, 0)?;

    let count = r.u32("tensor count")? as usize;
    let expected = all_params(&model).len();
    if count != expected {
        return Err(shape_err(
            "checkpoint",
            format!("{} tensors stored, config implies {}", count, expected),
        ));
    }

    let mut loaded = Vec::with_capacity(count);
    for i in 0..count {
        let section = format!("tensor {}", i);
        let ndim = r.u32(&section)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&section)? as usize);
        }
        let n = shape.iter().product();
        loaded.push(Tensor::new(&shape, r.f32s(n, &section)?)?);
    }
    let mut loaded = loaded.into_iter();
    for t in model.base_params_mut() {
        assign(t, loaded.next().unwrap())?;
    }
    for e in &mut model.experts {
        for t in e.params_mut() {
            assign(t, loaded.next().unwrap())?;
        }
    }

    let n_states = r.u32("norm-state count")? as usize;
    let mut states = bn_states_mut(&mut model);
    if n_states != states.len() {
        return Err(shape_err(
            "checkpoint",
            format!("{} norm states stored, config implies {}", n_states, states.len()),
        ));
    }
    for (i, s) in states.iter_mut().enumerate() {
        let section = format!("norm state {}", i);
        let c = r.u32(&section)? as usize;
        if c != s.channels() {
            return Err(shape_err("checkpoint", format!("{}: {} channels", section, c)));
        }
        s.running_mean = r.f32s(c, &section)?;
        s.running_var = r.f32s(c, &section)?;
        s.updates_seen = r.u64(&section)?;
    }
    Ok(model)
}

fn assign(target: &mut Tensor, value: Tensor) -> Result<()> {
    if target.shape() != value.shape() {
        return Err(shape_err(
            "checkpoint",
            format!("stored {:?}, expected {:?}", value.shape(), target.shape()),
        ));
    }
    *target = value;
    Ok(())
}

pub fn save(model: &AmelModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<AmelModel> {
    decode(&fs::read(path)?)
}

/// Rounds every parameter and running statistic to `f32`, matching what a
/// save/load cycle produces.
pub fn round_to_storage(model: &mut AmelModel) {
    let round = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    for t in model.base_params_mut() {
        round(t);
    }
    for e in &mut model.experts {
        for t in e.params_mut() {
            round(t);
        }
    }
    for s in bn_states_mut(model) {
        s.running_mean.iter_mut().for_each(|v| *v = *v as f32 as f64);
        s.running_var.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_matches_storage_rounding() {
        let mut model = AmelModel::new(ModelConfig::micro(2), 7).unwrap();
        model.experts[1].bn.as_mut().unwrap().state.updates_seen = 12;
        let back = decode(&encode(&model).unwrap()).unwrap();
        round_to_storage(&mut model);
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_magic_and_truncation() {
        let model = AmelModel::new(ModelConfig::micro(2), 1).unwrap();
        let mut bytes = encode(&model).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        match decode(truncated) {
            Err(AmelError::UnexpectedEnd { section }) => assert!(section.starts_with("norm state")),
            other => panic!("unexpected {:?}", other),
        }
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(AmelError::BadMagic { .. })));
    }

    #[test]
    fn version_is_checked() {
        let model = AmelModel::new(ModelConfig::micro(2), 1).unwrap();
        let mut bytes = encode(&model).unwrap();
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(AmelError::BadVersion { found: 9, .. })));
    }
}
