//! Binary training checkpoints.
//!
//! Layout: magic `HACK`, version (u32 LE), header length (u32 LE), JSON
//! header, then little-endian f64 payload: weights block by block, Adam first
//! and second moments in the same order, the multipliers, and `ρ`. Numbers
//! that the computation depends on live in the payload so they round-trip
//! bit for bit.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Matrix;
use crate::model::AuctionSetting;
use crate::network::{NetworkParams, NetworkShape};
use crate::train::{LagrangeState, OptimizerKind, OptimizerState, TrainConfig, TrainState};

const MAGIC: &[u8; 4] = b"HACK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    setting: AuctionSetting,
    config: TrainConfig,
    config_hash: String,
    shape: NetworkShape,
    optimizer: OptimizerKind,
    optimizer_step: u64,
    iteration: u64,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub setting: AuctionSetting,
    pub config: TrainConfig,
    /// Hash of the configuration that produced this state.
    pub config_hash: String,
    pub state: TrainState,
}

fn write_blocks<W: Write>(out: &mut W, blocks: &[Matrix]) -> io::Result<()> {
    for b in blocks {
        for v in b.iter() {
            out.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn read_blocks<R: Read>(input: &mut R, shapes: &[(usize, usize)]) -> Result<Vec<Matrix>, CheckpointError> {
    shapes
        .iter()
        .map(|&(r, c)| {
            let mut buf = vec![0.0; r * c];
            input.read_f64_into::<LittleEndian>(&mut buf)?;
            Matrix::from_shape_vec((r, c), buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
        })
        .collect()
}

pub fn write_checkpoint<W: Write>(out: &mut W, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let st = &ck.state;
    let header = Header {
        setting: ck.setting.clone(),
        config: ck.config.clone(),
        config_hash: ck.config_hash.clone(),
        shape: st.params.shape(),
        optimizer: st.optimizer.kind,
        optimizer_step: st.optimizer.step,
        iteration: st.iteration,
        seed: st.seed,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(json.len() as u32)?;
    out.write_all(&json)?;
    write_blocks(out, st.params.blocks())?;
    write_blocks(out, &st.optimizer.first)?;
    write_blocks(out, &st.optimizer.second)?;
    for l in &st.lagrange.lambda {
        out.write_f64::<LittleEndian>(*l)?;
    }
    out.write_f64::<LittleEndian>(st.lagrange.rho)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = input.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let h: Header = serde_json::from_slice(&json).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let shapes = h.shape.block_shapes();
    let blocks = read_blocks(input, &shapes)?;
    let params = NetworkParams::from_blocks(h.shape, blocks).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let first = read_blocks(input, &shapes)?;
    let second = read_blocks(input, &shapes)?;
    let mut lambda = vec![0.0; h.shape.agents()];
    input.read_f64_into::<LittleEndian>(&mut lambda)?;
    let rho = input.read_f64::<LittleEndian>()?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint {
        setting: h.setting,
        config: h.config,
        config_hash: h.config_hash,
        state: TrainState {
            params,
            optimizer: OptimizerState { kind: h.optimizer, step: h.optimizer_step, first, second },
            lagrange: LagrangeState { lambda, rho },
            iteration: h.iteration,
            seed: h.seed,
        },
    })
}
