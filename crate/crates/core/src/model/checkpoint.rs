//! Self-describing binary checkpoints.
//!
//! Layout: magic, format version, a JSON header (model config, adapter
//! config, mask provenance), then each named tensor as raw little-endian
//! f64. Values round-trip bitwise.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AdapterConfig, ModelConfig, Regime};

use super::nn::ParamKind;
use super::{SpanModel, TinyEncoder};

const MAGIC: &[u8; 4] = b"SLQA";
const VERSION: u32 = 1;

/// Which parameters were trainable when the checkpoint was written, and
/// under which regime and seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub regime: Option<Regime>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub trainable_paths: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    adapter: Option<AdapterConfig>,
    provenance: MaskProvenance,
}

pub fn save_checkpoint(
    model: &SpanModel<TinyEncoder>,
    provenance: &MaskProvenance,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut tensors: Vec<(String, ParamKind, usize, usize, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |p, kind, t| {
        tensors.push((
            p.to_string(),
            kind,
            t.value.nrows(),
            t.value.ncols(),
            t.value.iter().copied().collect(),
        ));
    });

    let header = Header {
        model: model.config().clone(),
        adapter: model.encoder.adapter_config().copied(),
        provenance: provenance.clone(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint {
            path: display.clone(),
            message: e.to_string(),
        })?;

    let file = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(&display, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)
        .map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    w.write_u64::<LittleEndian>(tensors.len() as u64)
        .map_err(io_err)?;
    for (path_str, kind, rows, cols, data) in &tensors {
        w.write_u32::<LittleEndian>(path_str.len() as u32)
            .map_err(io_err)?;
        w.write_all(path_str.as_bytes()).map_err(io_err)?;
        w.write_u8(kind.code()).map_err(io_err)?;
        w.write_u64::<LittleEndian>(*rows as u64).map_err(io_err)?;
        w.write_u64::<LittleEndian>(*cols as u64).map_err(io_err)?;
        for v in data {
            w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(SpanModel<TinyEncoder>, MaskProvenance)> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = std::io::BufReader::new(file);
    let corrupt = |message: &str| Error::Checkpoint {
        path: display.clone(),
        message: message.to_string(),
    };
    let io_err = |e: std::io::Error| Error::io(&display, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let header_len = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Checkpoint {
        path: display.clone(),
        message: format!("bad header: {e}"),
    })?;

    let tensor_count = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut tensors: HashMap<String, (ParamKind, Array2<f64>)> =
        HashMap::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let path_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut path_bytes = vec![0u8; path_len];
        r.read_exact(&mut path_bytes).map_err(io_err)?;
        let path_str = String::from_utf8(path_bytes).map_err(|_| corrupt("non-utf8 path"))?;
        let kind_code = r.read_u8().map_err(io_err)?;
        let kind = ParamKind::from_code(kind_code)
            .ok_or_else(|| corrupt(&format!("bad kind code {kind_code}")))?;
        let rows = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let cols = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let mut data = vec![0f64; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(io_err)?;
        let array = Array2::from_shape_vec((rows, cols), data)
            .map_err(|_| corrupt("bad tensor shape"))?;
        tensors.insert(path_str, (kind, array));
    }

    let mut model = SpanModel::new(&header.model, 0)?;
    if let Some(adapter) = &header.adapter {
        model.insert_adapters(adapter, 0)?;
    }

    let mut missing = Vec::new();
    model.visit_params_mut(&mut |p, kind, t| match tensors.remove(p) {
        Some((stored_kind, array)) => {
            debug_assert_eq!(stored_kind, kind);
            if array.raw_dim() == t.value.raw_dim() {
                t.value = array;
            } else {
                missing.push(format!("{p} (shape mismatch)"));
            }
        }
        None => missing.push(p.to_string()),
    });
    if !missing.is_empty() {
        return Err(corrupt(&format!("missing tensors: {}", missing.join(", "))));
    }
    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.keys().cloned().collect();
        return Err(corrupt(&format!("unknown tensors: {}", extra.join(", "))));
    }

    Ok((model, header.provenance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut cfg = ModelConfig::toy();
        cfg.hidden_size = 32;
        cfg.num_heads = 4;
        cfg.ffn_size = 64;
        cfg.vocab_size = 256;
        cfg.head_hidden_size = 16;
        let mut model = SpanModel::new(&cfg, 42).unwrap();
        model
            .insert_adapters(&AdapterConfig::default(), 42)
            .unwrap();

        let provenance = MaskProvenance {
            regime: Some(Regime::Adapters),
            seed: Some(42),
            trainable_paths: vec!["head.fc1.weight".into()],
        };

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &provenance, &path).unwrap();
        let (loaded, loaded_prov) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_prov, provenance);

        let mut originals = Vec::new();
        model.visit_params(&mut |p, _, t| originals.push((p.to_string(), t.value.clone())));
        let mut idx = 0;
        loaded.visit_params(&mut |p, _, t| {
            let (op, ov) = &originals[idx];
            assert_eq!(p, op);
            assert!(t
                .value
                .iter()
                .zip(ov.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
            idx += 1;
        });
        assert_eq!(idx, originals.len());

        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &loaded_prov, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
