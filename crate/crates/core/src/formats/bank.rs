//! `TRDB` parameter-bank container.
//!
//! ```text
//! magic "TRDB" | version u32
//! block_size u32 | grouping u8 (0 per-step, 1 buckets) | bucket count u32
//! schedule_len u32 | seed u64 | alpha f64 | max_greedy_steps u32 | stop_tol f64
//! toggles u8 (bit 0 smooth, 1 r1, 2 permute, 3 r2) | entry count u32
//! entries, ordered by (layer, group):
//!   layer u32 | group u32 | channels u32 | delta alpha f64 | delta channels x f64
//!   r1: blocks u32 | block size u32 | blocks x size^2 f64 (row-major)
//!   permutation channels x u32
//!   r2: as r1
//! ```

use super::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Result, TrdqError};
use crate::rotation::{
    BalancingParams, BalancingToggles, BlockRotation, RotationBlock, RotationBuildConfig,
};
use crate::smoothing::SmoothingDiag;
use crate::tensor::{PermutationVector, Tensor2D};
use crate::timebank::{CalibrationSettings, Grouping, TimeParamBank};
use std::collections::BTreeMap;
use std::path::Path;

pub const BANK_MAGIC: &[u8; 4] = b"TRDB";
pub const BANK_VERSION: u32 = 1;

fn toggles_to_bits(t: BalancingToggles) -> u8 {
    t.smooth as u8 | (t.r1 as u8) << 1 | (t.permute as u8) << 2 | (t.r2 as u8) << 3
}

fn toggles_from_bits(b: u8) -> Result<BalancingToggles> {
    if b & !0x0f != 0 {
        return Err(TrdqError::format(format!("unknown toggle bits {b:#04x}")));
    }
    Ok(BalancingToggles {
        smooth: b & 1 != 0,
        r1: b & 2 != 0,
        permute: b & 4 != 0,
        r2: b & 8 != 0,
    })
}

fn write_rotation(w: &mut ByteWriter, r: &BlockRotation) -> Result<()> {
    w.len32(r.blocks().len())?;
    w.len32(r.block_size())?;
    for b in r.blocks() {
        w.f64s(b.matrix().data());
    }
    Ok(())
}

fn read_rotation(r: &mut ByteReader, channels: usize) -> Result<BlockRotation> {
    let count = r.u32()? as usize;
    let size = r.u32()? as usize;
    if count.checked_mul(size) != Some(channels) {
        return Err(TrdqError::format(format!(
            "rotation of {count} x {size} does not cover {channels} channels"
        )));
    }
    let blocks = (0..count)
        .map(|_| {
            let data = r.f64s(size * size)?;
            RotationBlock::new(Tensor2D::new(size, size, data)?)
                .map_err(|e| TrdqError::format(format!("{e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    BlockRotation::new(blocks)
}

pub fn bank_to_bytes(bank: &TimeParamBank) -> Result<Vec<u8>> {
    let s = bank.settings();
    let mut w = ByteWriter::default();
    w.bytes(BANK_MAGIC);
    w.u32(BANK_VERSION);
    w.len32(s.rotation.block_size)?;
    match s.grouping {
        Grouping::PerStep => {
            w.u8(0);
            w.u32(0);
        }
        Grouping::Buckets(k) => {
            w.u8(1);
            w.len32(k)?;
        }
    }
    w.u32(s.schedule_len);
    w.u64(s.rotation.rng_seed);
    w.f64(s.alpha);
    w.len32(s.rotation.max_greedy_steps)?;
    w.f64(s.rotation.stop_tol);
    w.u8(toggles_to_bits(s.toggles));
    w.len32(bank.entries().len())?;
    for (&(layer, group), bp) in bank.entries() {
        w.u32(layer);
        w.len32(group)?;
        w.len32(bp.channels())?;
        w.f64(bp.delta.alpha());
        w.f64s(bp.delta.delta());
        write_rotation(&mut w, &bp.r1)?;
        for &i in bp.p.entries() {
            w.len32(i)?;
        }
        write_rotation(&mut w, &bp.r2)?;
    }
    Ok(w.finish())
}

pub fn bank_from_bytes(bytes: &[u8]) -> Result<TimeParamBank> {
    let mut r = ByteReader::new(bytes, "bank file");
    r.expect_magic(BANK_MAGIC)?;
    r.expect_version(BANK_VERSION)?;
    let block_size = r.u32()? as usize;
    let grouping = match (r.u8()?, r.u32()?) {
        (0, _) => Grouping::PerStep,
        (1, k) => Grouping::Buckets(k as usize),
        (tag, _) => return Err(TrdqError::format(format!("unknown grouping tag {tag}"))),
    };
    let schedule_len = r.u32()?;
    let rng_seed = r.u64()?;
    let alpha = r.f64()?;
    let max_greedy_steps = r.u32()? as usize;
    let stop_tol = r.f64()?;
    let toggles = toggles_from_bits(r.u8()?)?;
    let rotation = RotationBuildConfig {
        block_size,
        max_greedy_steps,
        rng_seed,
        stop_tol,
    };
    rotation
        .validate()
        .map_err(|e| TrdqError::format(format!("bank header: {e}")))?;
    let settings = CalibrationSettings {
        alpha,
        rotation,
        grouping,
        schedule_len,
        toggles,
    };
    let count = r.u32()? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let layer = r.u32()?;
        let group = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let delta_alpha = r.f64()?;
        let delta = SmoothingDiag::new(r.f64s(channels)?, delta_alpha)
            .map_err(|e| TrdqError::format(format!("{e}")))?;
        let r1 = read_rotation(&mut r, channels)?;
        let p = (0..channels)
            .map(|_| Ok(r.u32()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let p = PermutationVector::new(p).map_err(|e| TrdqError::format(format!("{e}")))?;
        let r2 = read_rotation(&mut r, channels)?;
        let bp = BalancingParams::new(delta, r1, p, r2)?;
        if entries.insert((layer, group), bp).is_some() {
            return Err(TrdqError::format(format!(
                "duplicate bank entry (layer {layer}, group {group})"
            )));
        }
    }
    r.finish()?;
    TimeParamBank::from_entries(settings, entries)
}

pub fn write_bank(bank: &TimeParamBank, path: &Path) -> Result<()> {
    write_atomic(path, &bank_to_bytes(bank)?)
}

pub fn read_bank(path: &Path) -> Result<TimeParamBank> {
    bank_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::timebank::{calibrate_bank, TimestepTrace};

    fn bank() -> TimeParamBank {
        let mut rng = seeded(11);
        let mut traces = Vec::new();
        let mut weights = BTreeMap::new();
        for layer in [0u32, 5] {
            weights.insert(layer, Tensor2D::randn(32, 8, 1.0, &mut rng));
            for t in 1..=4 {
                let mut x = Tensor2D::randn(6, 32, 1.0, &mut rng);
                x.set(0, (t as usize * 7) % 32, 40.0);
                traces.push(TimestepTrace {
                    layer_id: layer,
                    timestep: t,
                    activations: x,
                });
            }
        }
        let mut s = CalibrationSettings::new(4).with_grouping(Grouping::Buckets(2));
        s.rotation.block_size = 16;
        s.rotation.rng_seed = 99;
        calibrate_bank(&traces, &weights, &s).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = bank();
        let bytes = bank_to_bytes(&b).unwrap();
        let back = bank_from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(bank_to_bytes(&back).unwrap(), bytes);
        for (k, bp) in b.entries() {
            let other = &back.entries()[k];
            let bits = |t: &Tensor2D| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&bp.r1.to_dense()), bits(&other.r1.to_dense()));
            assert_eq!(bits(&bp.r2.to_dense()), bits(&other.r2.to_dense()));
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = bank_to_bytes(&bank()).unwrap();
        let mut bad = bytes.clone();
        bad[3] = b'Q';
        assert!(matches!(bank_from_bytes(&bad), Err(TrdqError::Format(_))));
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(bank_from_bytes(&bad), Err(TrdqError::Format(_))));
        for cut in [2, 8, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(bank_from_bytes(&bytes[..cut]), Err(TrdqError::Format(_))),
                "cut {cut}"
            );
        }
    }
}
