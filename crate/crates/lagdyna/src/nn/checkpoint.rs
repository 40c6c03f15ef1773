//! Binary weight checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "LNN1"                      4-byte magic
//! u32   width count
//! u32*  layer widths
//! u8    activation (0 = softplus, 1 = tanh)
//! u16   role-tag byte length
//! ...   role tag, UTF-8
//! f64*  flat weights, one per parameter
//! ```
//!
//! The role tag distinguishes otherwise identical files ("model", "policy",
//! "critic"); an empty tag is fine.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, NetworkArch, ScalarNetwork};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LNN1";

impl ScalarNetwork {
    pub fn save_checkpoint(&self, path: &Path, role: &str) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        let widths = self.arch().widths();
        w.write_all(&(widths.len() as u32).to_le_bytes())?;
        for &width in widths {
            w.write_all(&(width as u32).to_le_bytes())?;
        }
        let act = match self.arch().activation() {
            Activation::Softplus => 0u8,
            Activation::Tanh => 1u8,
        };
        w.write_all(&[act])?;
        let role_bytes = role.as_bytes();
        if role_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint("role tag too long".into()));
        }
        w.write_all(&(role_bytes.len() as u16).to_le_bytes())?;
        w.write_all(role_bytes)?;
        for &v in self.weights() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(ScalarNetwork, String)> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }

        let count = read_u32(&mut r, "width count")? as usize;
        if !(2..=64).contains(&count) {
            return Err(Error::Checkpoint(format!(
                "implausible width count {count}"
            )));
        }
        let mut widths = Vec::with_capacity(count);
        for _ in 0..count {
            widths.push(read_u32(&mut r, "layer width")? as usize);
        }

        let mut act_byte = [0u8; 1];
        read_exact(&mut r, &mut act_byte, "activation tag")?;
        let activation = match act_byte[0] {
            0 => Activation::Softplus,
            1 => Activation::Tanh,
            other => {
                return Err(Error::Checkpoint(format!("unknown activation tag {other}")));
            }
        };

        let mut len_bytes = [0u8; 2];
        read_exact(&mut r, &mut len_bytes, "role length")?;
        let role_len = u16::from_le_bytes(len_bytes) as usize;
        let mut role_bytes = vec![0u8; role_len];
        read_exact(&mut r, &mut role_bytes, "role tag")?;
        let role = String::from_utf8(role_bytes)
            .map_err(|_| Error::Checkpoint("role tag is not UTF-8".into()))?;

        let arch = NetworkArch::new(widths, activation)
            .map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;
        let mut weights = Vec::with_capacity(arch.param_count());
        let mut buf = [0u8; 8];
        for _ in 0..arch.param_count() {
            read_exact(&mut r, &mut buf, "weight")?;
            weights.push(f64::from_le_bytes(buf));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after weights".into()));
        }

        let net = ScalarNetwork::new(arch, weights)
            .map_err(|e| Error::Checkpoint(format!("invalid weights: {e}")))?;
        Ok((net, role))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}
