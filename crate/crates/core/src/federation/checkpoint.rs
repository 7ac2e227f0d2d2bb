//! Binary checkpoints: `"FDCK"`, `u32` version, `u64` config hash, then named
//! blocks of `(u32 name length, name bytes, u64 count, f64 LE values)`.

use std::fs;
use std::path::Path;

use super::FederationState;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: u64,
    pub blocks: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

fn state_blocks(state: &FederationState) -> Vec<(String, Vec<f64>)> {
    let mut blocks = vec![
        ("round".to_string(), vec![state.round as f64]),
        ("embedding".to_string(), state.embed.flatten()),
    ];
    if let Some(h) = &state.heads.client_head {
        blocks.push(("client_head".to_string(), h.params.clone()));
    }
    for (i, h) in state.heads.target_heads.iter().enumerate() {
        blocks.push((format!("target_head.{i}"), h.params.clone()));
    }
    for (i, m) in state.momentum.iter().enumerate() {
        if let Some(m) = m {
            blocks.push((format!("momentum.{i}"), m.clone()));
        }
    }
    blocks
}

pub fn write_checkpoint(path: &Path, config_hash: u64, state: &FederationState) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash.to_le_bytes());
    for (name, values) in state_blocks(state) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::data("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::data(format!("{}: not a checkpoint", path.display())));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let config_hash = c.u64()?;
    let mut blocks = Vec::new();
    while c.pos < buf.len() {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::data("block name is not UTF-8"))?;
        let count = usize::try_from(c.u64()?).map_err(|_| Error::data("block too large"))?;
        let bytes = c.take(count.checked_mul(8).ok_or_else(|| Error::data("block too large"))?)?;
        let values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        blocks.push((name, values));
    }
    Ok(Checkpoint {
        version,
        config_hash,
        blocks,
    })
}

/// Loads checkpoint values into a state of matching shape.
pub fn restore_checkpoint(ck: &Checkpoint, state: &mut FederationState) -> Result<()> {
    let need = |name: &str| {
        ck.block(name)
            .ok_or_else(|| Error::data(format!("checkpoint lacks block {name}")))
    };
    let round = need("round")?;
    state.round = round.first().copied().unwrap_or(0.0) as usize;
    state.embed.read_flat(need("embedding")?)?;
    if let Some(h) = &mut state.heads.client_head {
        let v = need("client_head")?;
        if v.len() != h.params.len() {
            return Err(Error::data("client head size mismatch"));
        }
        h.params.copy_from_slice(v);
    }
    for (i, h) in state.heads.target_heads.iter_mut().enumerate() {
        let v = need(&format!("target_head.{i}"))?;
        if v.len() != h.params.len() {
            return Err(Error::data("target head size mismatch"));
        }
        h.params.copy_from_slice(v);
    }
    for (i, m) in state.momentum.iter_mut().enumerate() {
        *m = ck.block(&format!("momentum.{i}")).map(<[f64]>::to_vec);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::{FederationConfig, LrSchedule, Mode};
    use crate::net::NetConfig;

    #[test]
    fn round_trip_restores_state() {
        let net = NetConfig::linear(3, 2, 2, false);
        let cfg = FederationConfig {
            rounds: 1,
            local_steps: 1,
            lr: 0.1,
            lambda: 0.8,
            weight_decay: 0.0,
            momentum: 0.9,
            schedule: LrSchedule::Constant,
            batch_size: None,
            shared_target: false,
            mode: Mode::Feddrm,
            seed: 3,
        };
        let mut state = FederationState::init(&net, 2, 3, &cfg).unwrap();
        state.round = 7;
        state.heads.target_heads[1].params[2] = -0.25;
        state.momentum[0] = Some(vec![1.5; 4]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        write_checkpoint(&path, 0xdead_beef, &state).unwrap();
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[..4], b"FDCK");
        assert_eq!(&raw[8..16], &0xdead_beefu64.to_le_bytes());
        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.config_hash, 0xdead_beef);
        let mut fresh = FederationState::init(&net, 2, 3, &FederationConfig { seed: 99, ..cfg }).unwrap();
        restore_checkpoint(&ck, &mut fresh).unwrap();
        assert_eq!(fresh, state);
        fs::write(&path, &raw[..raw.len() - 3]).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
