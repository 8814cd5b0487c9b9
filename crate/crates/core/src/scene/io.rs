//! `BEVPC1` point-cloud files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic  "BEVPC1"          6 bytes
//! n      u64               point count
//! f      u32               feature width (always 9)
//! flags  u32               bit 0 semantic labels, bit 1 instance labels,
//!                          bit 2 instance features, bit 3 semantic logits
//! d      u32               feature width, present iff bit 2
//! k      u32               logit width, present iff bit 3
//! n·f    f64               point features
//! n      u32               semantic labels (bit 0)
//! n      u32               instance labels (bit 1)
//! n·d    f64               instance features (bit 2)
//! n·k    f64               semantic logits (bit 3)
//! ```

use std::path::Path;

use super::{PointCloud, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::numeric::checkpoint::ByteReader;
use crate::numeric::Tensor;

pub const POINT_CLOUD_MAGIC: &[u8; 6] = b"BEVPC1";

pub const FLAG_SEMANTIC: u32 = 1;
pub const FLAG_INSTANCE: u32 = 1 << 1;
pub const FLAG_FEATURES: u32 = 1 << 2;
pub const FLAG_LOGITS: u32 = 1 << 3;

pub fn encode(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let mut flags = 0;
    if cloud.gt_semantic.is_some() {
        flags |= FLAG_SEMANTIC;
    }
    if cloud.gt_instance.is_some() {
        flags |= FLAG_INSTANCE;
    }
    if cloud.instance_features.is_some() {
        flags |= FLAG_FEATURES;
    }
    if cloud.semantic_logits.is_some() {
        flags |= FLAG_LOGITS;
    }
    let mut out = Vec::with_capacity(32 + n * NUM_FEATURES * 8);
    out.extend_from_slice(POINT_CLOUD_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(NUM_FEATURES as u32).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    if let Some(t) = &cloud.instance_features {
        out.extend_from_slice(&(t.last_dim() as u32).to_le_bytes());
    }
    if let Some(t) = &cloud.semantic_logits {
        out.extend_from_slice(&(t.last_dim() as u32).to_le_bytes());
    }
    for v in cloud.features() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for labels in [&cloud.gt_semantic, &cloud.gt_instance].into_iter().flatten() {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    for t in [&cloud.instance_features, &cloud.semantic_logits].into_iter().flatten() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = ByteReader::new(bytes);
    if r.take(6, "magic")? != POINT_CLOUD_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let n_at = r.offset();
    let n = usize::try_from(r.u64("point count")?).map_err(|_| Error::Parse {
        offset: n_at,
        message: "point count too large".into(),
    })?;
    let f_at = r.offset();
    let f = r.u32("feature width")? as usize;
    if f != NUM_FEATURES {
        return Err(Error::Parse {
            offset: f_at,
            message: format!("feature width {f}, expected {NUM_FEATURES}"),
        });
    }
    let flags_at = r.offset();
    let flags = r.u32("flags")?;
    if flags & !(FLAG_SEMANTIC | FLAG_INSTANCE | FLAG_FEATURES | FLAG_LOGITS) != 0 {
        return Err(Error::Parse {
            offset: flags_at,
            message: format!("unknown flag bits {flags:#x}"),
        });
    }
    let d = if flags & FLAG_FEATURES != 0 { Some(r.u32("feature dim")? as usize) } else { None };
    let k = if flags & FLAG_LOGITS != 0 { Some(r.u32("logit dim")? as usize) } else { None };

    let payload_at = r.offset();
    let need = n
        .checked_mul(NUM_FEATURES)
        .and_then(|v| v.checked_mul(8))
        .ok_or(Error::Parse {
            offset: n_at,
            message: "point count overflows".into(),
        })?;
    if need > r.remaining() {
        return Err(Error::Parse {
            offset: payload_at,
            message: format!("truncated payload: {n} points need {need} bytes, {} left", r.remaining()),
        });
    }
    let mut features = Vec::with_capacity(n * NUM_FEATURES);
    for _ in 0..n * NUM_FEATURES {
        features.push(r.f64("point features")?);
    }
    let read_labels = |r: &mut ByteReader, what: &str| -> Result<Vec<u32>> { (0..n).map(|_| r.u32(what)).collect() };
    let semantic = if flags & FLAG_SEMANTIC != 0 { Some(read_labels(&mut r, "semantic labels")?) } else { None };
    let instance = if flags & FLAG_INSTANCE != 0 { Some(read_labels(&mut r, "instance labels")?) } else { None };
    let read_rows = |r: &mut ByteReader, width: usize, what: &str| -> Result<Tensor> {
        let data = (0..n * width).map(|_| r.f64(what)).collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![n, width], data)
    };
    let inst_features = match d {
        Some(d) => Some(read_rows(&mut r, d, "instance features")?),
        None => None,
    };
    let logits = match k {
        Some(k) => Some(read_rows(&mut r, k, "semantic logits")?),
        None => None,
    };
    if !r.is_empty() {
        return Err(Error::Parse {
            offset: r.offset(),
            message: format!("{} trailing bytes", r.remaining()),
        });
    }
    let mut pc = PointCloud::new(features)?;
    pc.gt_semantic = semantic;
    pc.gt_instance = instance;
    pc.instance_features = inst_features;
    pc.semantic_logits = logits;
    Ok(pc)
}

pub fn save(cloud: &PointCloud, path: &Path) -> Result<()> {
    std::fs::write(path, encode(cloud)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    #[test]
    fn generated_scene_round_trips() {
        let pc = generate_scene(&SceneSpec {
            density: 20.0,
            seed: 3,
            ..SceneSpec::default()
        })
        .unwrap();
        let bytes = encode(&pc);
        assert_eq!(decode(&bytes).unwrap(), pc);
    }

    #[test]
    fn empty_cloud_round_trips() {
        let pc = PointCloud::empty();
        let bytes = encode(&pc);
        assert_eq!(bytes.len(), 6 + 8 + 4 + 4);
        assert_eq!(decode(&bytes).unwrap(), pc);
    }

    #[test]
    fn extra_channels_round_trip() {
        let mut pc = PointCloud::new(vec![0.5; 18]).unwrap();
        pc.instance_features = Some(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.0]).unwrap());
        pc.semantic_logits = Some(Tensor::new(vec![2, 1], vec![0.25, f64::MAX]).unwrap());
        assert_eq!(decode(&encode(&pc)).unwrap(), pc);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode(&PointCloud::empty());
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload_names_offset() {
        let pc = PointCloud::new(vec![1.0; 27]).unwrap();
        let bytes = encode(&pc);
        match decode(&bytes[..bytes.len() - 1]).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 22),
            e => panic!("unexpected {e}"),
        }
    }
}
