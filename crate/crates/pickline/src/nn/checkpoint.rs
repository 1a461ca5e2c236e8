//! Binary network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PKLN" | u32 version | u32 meta_len | meta JSON | u64 n_params | n_params x f64
//! ```
//!
//! The meta JSON holds the layer specs plus an arbitrary `extra` value for
//! model-level metadata (vocabulary, configs). Parameters are written in
//! layer order, block order (dense: weights then biases; lstm: wx, wh, b;
//! embedding: table), little-endian 64-bit floats. Identical parameters
//! produce byte-identical files.

use super::network::{LayerParams, Network};
use super::{LayerKind, NetworkSpec};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PKLN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Container holding several networks plus model-level metadata.
pub const CONTAINER_MAGIC: &[u8; 4] = b"PKLM";

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: NetworkSpec,
    extra: serde_json::Value,
}

pub fn write_network<W: Write>(out: &mut W, net: &Network, extra: &serde_json::Value) -> Result<()> {
    let meta = serde_json::to_vec(&Meta { spec: net.spec().clone(), extra: extra.clone() })
        .map_err(|e| Error::Parse(format!("meta encode: {e}")))?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(meta.len() as u32).to_le_bytes())?;
    out.write_all(&meta)?;
    out.write_all(&(net.param_count() as u64).to_le_bytes())?;
    for layer in net.params() {
        for block in layer.blocks() {
            for v in block {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_network<R: Read>(input: &mut R) -> Result<(Network, serde_json::Value)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a network checkpoint (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    input.read_exact(&mut u32buf)?;
    let meta_len = u32::from_le_bytes(u32buf) as usize;
    let mut meta_buf = vec![0u8; meta_len];
    input.read_exact(&mut meta_buf)?;
    let meta: Meta = serde_json::from_slice(&meta_buf).map_err(|e| Error::Parse(format!("meta decode: {e}")))?;

    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u64buf)?;
    let n_params = u64::from_le_bytes(u64buf) as usize;
    let mut flat = vec![0.0f64; n_params];
    let mut f64buf = [0u8; 8];
    for v in &mut flat {
        input.read_exact(&mut f64buf)?;
        *v = f64::from_le_bytes(f64buf);
    }

    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<Vec<f64>> {
        if cursor + n > flat.len() {
            return Err(Error::Parse("checkpoint payload shorter than layer specs require".into()));
        }
        let out = flat[cursor..cursor + n].to_vec();
        cursor += n;
        Ok(out)
    };
    let mut params = Vec::with_capacity(meta.spec.layers.len());
    for l in &meta.spec.layers {
        let p = match l.kind {
            LayerKind::Dense => LayerParams::Dense {
                w: super::Mat { rows: l.output_dim, cols: l.input_dim, data: take(l.output_dim * l.input_dim)? },
                b: take(l.output_dim)?,
            },
            LayerKind::Lstm => LayerParams::Lstm {
                wx: super::Mat { rows: 4 * l.output_dim, cols: l.input_dim, data: take(4 * l.output_dim * l.input_dim)? },
                wh: super::Mat { rows: 4 * l.output_dim, cols: l.output_dim, data: take(4 * l.output_dim * l.output_dim)? },
                b: take(4 * l.output_dim)?,
            },
            LayerKind::Embedding => LayerParams::Embedding {
                table: super::Mat { rows: l.input_dim, cols: l.output_dim, data: take(l.input_dim * l.output_dim)? },
            },
            _ => LayerParams::None,
        };
        params.push(p);
    }
    if cursor != flat.len() {
        return Err(Error::Parse("checkpoint payload longer than layer specs require".into()));
    }
    Ok((Network::from_parts(meta.spec, params)?, meta.extra))
}

/// Writes a versioned container: kind tag, metadata JSON and any number of
/// embedded network checkpoints (length-prefixed).
pub fn write_container<W: Write>(out: &mut W, kind: &str, meta: &serde_json::Value, nets: &[&Network]) -> Result<()> {
    out.write_all(CONTAINER_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let head = serde_json::to_vec(&serde_json::json!({ "kind": kind, "meta": meta }))
        .map_err(|e| Error::Parse(format!("container meta encode: {e}")))?;
    out.write_all(&(head.len() as u32).to_le_bytes())?;
    out.write_all(&head)?;
    out.write_all(&(nets.len() as u32).to_le_bytes())?;
    for net in nets {
        let mut blob = Vec::new();
        write_network(&mut blob, net, &serde_json::Value::Null)?;
        out.write_all(&(blob.len() as u64).to_le_bytes())?;
        out.write_all(&blob)?;
    }
    Ok(())
}

pub fn read_container<R: Read>(input: &mut R) -> Result<(String, serde_json::Value, Vec<Network>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Parse("not a model container (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported container version {version}")));
    }
    input.read_exact(&mut u32buf)?;
    let head_len = u32::from_le_bytes(u32buf) as usize;
    let mut head = vec![0u8; head_len];
    input.read_exact(&mut head)?;
    let head: serde_json::Value = serde_json::from_slice(&head).map_err(|e| Error::Parse(format!("container meta: {e}")))?;
    let kind = head.get("kind").and_then(|v| v.as_str()).unwrap_or_default().to_string();
    let meta = head.get("meta").cloned().unwrap_or(serde_json::Value::Null);
    input.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut nets = Vec::with_capacity(count);
    let mut u64buf = [0u8; 8];
    for _ in 0..count {
        input.read_exact(&mut u64buf)?;
        let len = u64::from_le_bytes(u64buf) as usize;
        let mut blob = vec![0u8; len];
        input.read_exact(&mut blob)?;
        let (net, _) = read_network(&mut blob.as_slice())?;
        nets.push(net);
    }
    Ok((kind, meta, nets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec, Loss};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_is_identity_and_bytes_are_stable() {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::lstm(3, 4),
                LayerSpec::dropout(4, 0.2),
                LayerSpec::dense(4, 3, Activation::Softmax),
            ],
            Loss::CrossEntropy,
        )
        .unwrap();
        let net = Network::init(spec, &mut StdRng::seed_from_u64(77)).unwrap();
        let extra = serde_json::json!({"purpose": "test", "vocab": ["a", "b", "end"]});

        let mut bytes1 = Vec::new();
        write_network(&mut bytes1, &net, &extra).unwrap();
        let mut bytes2 = Vec::new();
        write_network(&mut bytes2, &net, &extra).unwrap();
        assert_eq!(bytes1, bytes2, "identical parameters must serialize byte-identically");
        assert_eq!(&bytes1[..4], CHECKPOINT_MAGIC);

        let (restored, extra2) = read_network(&mut bytes1.as_slice()).unwrap();
        assert_eq!(restored, net);
        assert_eq!(extra2, extra);
    }

    #[test]
    fn container_roundtrip() {
        let spec = NetworkSpec::new(vec![LayerSpec::dense(2, 2, Activation::Identity)], Loss::Mse).unwrap();
        let a = Network::init(spec.clone(), &mut StdRng::seed_from_u64(1)).unwrap();
        let b = Network::init(spec, &mut StdRng::seed_from_u64(2)).unwrap();
        let meta = serde_json::json!({"k": 2});
        let mut bytes = Vec::new();
        write_container(&mut bytes, "pair", &meta, &[&a, &b]).unwrap();
        let (kind, meta2, nets) = read_container(&mut bytes.as_slice()).unwrap();
        assert_eq!(kind, "pair");
        assert_eq!(meta2, meta);
        assert_eq!(nets, vec![a, b]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let bytes = b"NOPE\x01\x00\x00\x00";
        assert!(read_network(&mut bytes.as_slice()).is_err());
    }
}
