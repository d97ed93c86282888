//! Binary checkpoint: magic `HCT1`, format version, the JSON-encoded
//! config, then the named parameter arrays as dimension lists plus
//! little-endian f32 data. Save and load round-trip bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::config::{HctConfig, ModelTask};
use super::params::HctParams;
use crate::numerics::Tensor;
use crate::{HctError, Result};

const MAGIC: &[u8; 4] = b"HCT1";
const VERSION: u32 = 1;

fn write_u32(out: &mut impl Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    input
        .read_exact(&mut buf)
        .map_err(|_| HctError::Format("checkpoint truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(input: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    input
        .read_exact(&mut buf)
        .map_err(|_| HctError::Format("checkpoint truncated".into()))?;
    Ok(buf)
}

/// Serializes config and parameters to a writer.
pub fn write_checkpoint(
    params: &HctParams<f32>,
    config: &HctConfig,
    mut out: impl Write,
) -> Result<()> {
    out.write_all(MAGIC)?;
    write_u32(&mut out, VERSION)?;
    let config_json = serde_json::to_vec(config)
        .map_err(|e| HctError::Format(format!("config serialization: {e}")))?;
    write_u32(&mut out, config_json.len() as u32)?;
    out.write_all(&config_json)?;

    let named = params.named();
    write_u32(&mut out, named.len() as u32)?;
    for (name, tensor) in named {
        write_u32(&mut out, name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        write_u32(&mut out, tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            write_u32(&mut out, d as u32)?;
        }
        for &v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parses a checkpoint from a reader, validating magic, version, config,
/// and that the arrays match the config's expected names and shapes.
pub fn read_checkpoint(mut input: impl Read) -> Result<(HctParams<f32>, HctConfig)> {
    let magic = read_exact(&mut input, 4)?;
    if magic != MAGIC {
        return Err(HctError::Format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(HctError::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let config_len = read_u32(&mut input)? as usize;
    let config_json = read_exact(&mut input, config_len)?;
    let config: HctConfig = serde_json::from_slice(&config_json)
        .map_err(|e| HctError::Format(format!("config deserialization: {e}")))?;
    config.validate()?;

    let n_arrays = read_u32(&mut input)? as usize;
    let mut arrays: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..n_arrays {
        let name_len = read_u32(&mut input)? as usize;
        let name = String::from_utf8(read_exact(&mut input, name_len)?)
            .map_err(|_| HctError::Format("array name is not UTF-8".into()))?;
        let ndims = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(read_u32(&mut input)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = read_exact(&mut input, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if arrays.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(HctError::Format(format!("duplicate array {name:?}")));
        }
    }

    let mut params = HctParams::with_shapes(&config)?;
    for (name, tensor) in params.named_mut() {
        let loaded = arrays.remove(&name).ok_or_else(|| {
            HctError::Format(format!("checkpoint lacks array {name:?}"))
        })?;
        if loaded.shape() != tensor.shape() {
            return Err(HctError::Format(format!(
                "array {name:?} has shape {:?}, config expects {:?}",
                loaded.shape(),
                tensor.shape()
            )));
        }
        *tensor = loaded;
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(HctError::Format(format!(
            "checkpoint has unexpected array {extra:?}"
        )));
    }
    Ok((params, config))
}

/// Writes a checkpoint file.
pub fn save_checkpoint(params: &HctParams<f32>, config: &HctConfig, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, config, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<(HctParams<f32>, HctConfig)> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

/// Reads a checkpoint and insists on the expected head.
pub fn load_checkpoint_for_task(
    path: &Path,
    expected: ModelTask,
) -> Result<(HctParams<f32>, HctConfig)> {
    let (params, config) = load_checkpoint(path)?;
    if config.task != expected {
        return Err(HctError::TaskMismatch(format!(
            "checkpoint {} holds a {} model, expected {expected}",
            path.display(),
            config.task
        )));
    }
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;

    #[test]
    fn roundtrip_is_bit_exact() {
        let config = HctConfig::two_class();
        let params: HctParams<f32> = init_params(&config, 21).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&params, &config, &mut buf).unwrap();
        let (loaded, loaded_config) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(config, loaded_config);
        for ((na, ta), (nb, tb)) in params.named().iter().zip(loaded.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            for (x, y) in ta.iter().zip(tb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{na}");
            }
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let err = read_checkpoint(&b"XXXX rest does not matter"[..]);
        assert!(matches!(err, Err(HctError::Format(_))));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let config = HctConfig::two_class();
        let params: HctParams<f32> = init_params(&config, 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&params, &config, &mut buf).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(matches!(
            read_checkpoint(buf.as_slice()),
            Err(HctError::Format(_))
        ));
    }

    #[test]
    fn wrong_version_rejected() {
        let config = HctConfig::two_class();
        let params: HctParams<f32> = init_params(&config, 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&params, &config, &mut buf).unwrap();
        buf[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(buf.as_slice()),
            Err(HctError::Format(_))
        ));
    }

    #[test]
    fn task_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.hct");
        let config = HctConfig::two_class();
        let params: HctParams<f32> = init_params(&config, 3).unwrap();
        save_checkpoint(&params, &config, &path).unwrap();
        assert!(load_checkpoint_for_task(&path, ModelTask::TwoClass).is_ok());
        assert!(matches!(
            load_checkpoint_for_task(&path, ModelTask::MultiClass),
            Err(HctError::TaskMismatch(_))
        ));
    }
}
