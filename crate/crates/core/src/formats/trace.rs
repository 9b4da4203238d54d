//! `TRDQ` trace container.
//!
//! ```text
//! magic "TRDQ" | version u32 | count u32
//! count x { layer_id u32 | timestep u32 | branch u8 | rows u32 | cols u32 | rows*cols f64 }
//! ```
//!
//! Linear-layer inputs use the layer id directly. Attention probabilities
//! of block `b` are stored under `ATTENTION_FLAG | b`.

use super::{write_atomic, ByteReader, ByteWriter};
use crate::attention::{AttentionRecord, Branch};
use crate::error::{Result, TrdqError};
use crate::tensor::Tensor2D;
use crate::timebank::TimestepTrace;
use crate::toydit::{BranchTrace, Capture};
use std::path::Path;

pub const TRACE_MAGIC: &[u8; 4] = b"TRDQ";
pub const TRACE_VERSION: u32 = 1;
pub const ATTENTION_FLAG: u32 = 0x8000_0000;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub layer_id: u32,
    pub timestep: u32,
    pub branch: Branch,
    pub data: Tensor2D,
}

impl TraceRecord {
    pub fn is_attention(&self) -> bool {
        self.layer_id & ATTENTION_FLAG != 0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceFile {
    pub records: Vec<TraceRecord>,
}

impl TraceFile {
    pub fn from_capture(capture: &Capture) -> Result<Self> {
        let mut records = Vec::with_capacity(capture.activations.len() + capture.attention.len());
        for bt in &capture.activations {
            if bt.trace.layer_id & ATTENTION_FLAG != 0 {
                return Err(TrdqError::format(format!(
                    "layer id {} collides with the attention flag",
                    bt.trace.layer_id
                )));
            }
            records.push(TraceRecord {
                layer_id: bt.trace.layer_id,
                timestep: bt.trace.timestep,
                branch: bt.branch,
                data: bt.trace.activations.clone(),
            });
        }
        for a in &capture.attention {
            if a.block_id & ATTENTION_FLAG != 0 {
                return Err(TrdqError::format(format!(
                    "block id {} too large",
                    a.block_id
                )));
            }
            records.push(TraceRecord {
                layer_id: ATTENTION_FLAG | a.block_id,
                timestep: a.timestep,
                branch: a.branch,
                data: a.attn.clone(),
            });
        }
        Ok(Self { records })
    }

    /// Linear-layer inputs with their branch.
    pub fn activations(&self) -> Vec<BranchTrace> {
        self.records
            .iter()
            .filter(|r| !r.is_attention())
            .map(|r| BranchTrace {
                branch: r.branch,
                trace: TimestepTrace {
                    layer_id: r.layer_id,
                    timestep: r.timestep,
                    activations: r.data.clone(),
                },
            })
            .collect()
    }

    pub fn attention(&self) -> Vec<AttentionRecord> {
        self.records
            .iter()
            .filter(|r| r.is_attention())
            .map(|r| AttentionRecord {
                block_id: r.layer_id & !ATTENTION_FLAG,
                timestep: r.timestep,
                branch: r.branch,
                attn: r.data.clone(),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(TRACE_MAGIC);
        w.u32(TRACE_VERSION);
        w.len32(self.records.len())?;
        for r in &self.records {
            w.u32(r.layer_id);
            w.u32(r.timestep);
            w.u8(r.branch.to_u8());
            w.len32(r.data.rows())?;
            w.len32(r.data.cols())?;
            w.f64s(r.data.data());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "trace file");
        r.expect_magic(TRACE_MAGIC)?;
        r.expect_version(TRACE_VERSION)?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(bytes.len() / 17));
        for i in 0..count {
            let layer_id = r.u32()?;
            let timestep = r.u32()?;
            let raw = r.u8()?;
            let branch = Branch::from_u8(raw).ok_or_else(|| {
                TrdqError::format(format!("record {i}: unknown branch tag {raw}"))
            })?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| TrdqError::format(format!("record {i}: size overflows")))?;
            let data = Tensor2D::new(rows, cols, r.f64s(n)?)?;
            records.push(TraceRecord {
                layer_id,
                timestep,
                branch,
                data,
            });
        }
        r.finish()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TraceFile {
        TraceFile {
            records: vec![
                TraceRecord {
                    layer_id: 3,
                    timestep: 1,
                    branch: Branch::Conditional,
                    data: Tensor2D::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 1e300]])
                        .unwrap(),
                },
                TraceRecord {
                    layer_id: ATTENTION_FLAG | 2,
                    timestep: 20,
                    branch: Branch::Unconditional,
                    data: Tensor2D::from_rows(&[vec![0.25, 0.75, 0.1]]).unwrap(),
                },
            ],
        }
    }

    #[test]
    fn layout_matches_documented_header() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"TRDQ");
        assert_eq!(
            u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
            TRACE_VERSION
        );
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(bytes[20], 0);
        assert_eq!(u32::from_le_bytes(bytes[21..25].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[25..29].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[29..37].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 12 + 17 + 4 * 8 + 17 + 3 * 8);
    }

    #[test]
    fn round_trip_bit_exact() {
        let t = sample();
        let back = TraceFile::from_bytes(&t.to_bytes().unwrap()).unwrap();
        assert_eq!(back.to_bytes().unwrap(), t.to_bytes().unwrap());
        assert!(back.records[0].data.get(0, 1).is_sign_negative());
        assert_eq!(back.attention().len(), 1);
        assert_eq!(back.attention()[0].block_id, 2);
        assert_eq!(back.activations().len(), 1);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            TraceFile::from_bytes(&bad),
            Err(TrdqError::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            TraceFile::from_bytes(&bad),
            Err(TrdqError::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[20] = 7;
        assert!(matches!(
            TraceFile::from_bytes(&bad),
            Err(TrdqError::Format(_))
        ));
        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            assert!(
                matches!(
                    TraceFile::from_bytes(&bytes[..cut]),
                    Err(TrdqError::Format(_))
                ),
                "cut {cut}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            TraceFile::from_bytes(&long),
            Err(TrdqError::Format(_))
        ));
        let mut huge = bytes;
        huge[21..25].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[25..29].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            TraceFile::from_bytes(&huge),
            Err(TrdqError::Format(_))
        ));
    }
}
