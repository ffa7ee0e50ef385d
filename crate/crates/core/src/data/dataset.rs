//! Binary sample container.
//!
//! Layout: magic `HADS`, format version (u32 LE), header length (u32 LE),
//! JSON header, then per sample: `m` quality factors (f64 LE), `m·n`
//! adjacency bytes (0/1), `m+n` values (f64 LE).

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ValueDomain;
use crate::model::{AuctionInstance, AuctionSetting, BidProfile, Sample};

const MAGIC: &[u8; 4] = b"HADS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("bad dataset header: {0}")]
    Header(String),
    #[error("sample {index}: {reason}")]
    Sample { index: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub setting: AuctionSetting,
    pub domain: ValueDomain,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub setting: AuctionSetting,
    pub domain: ValueDomain,
    pub samples: Vec<Sample>,
}

pub fn write_dataset<W: Write>(out: &mut W, data: &Dataset) -> Result<(), DatasetError> {
    let header = DatasetHeader { setting: data.setting.clone(), domain: data.domain, count: data.samples.len() };
    let json = serde_json::to_vec(&header).map_err(|e| DatasetError::Header(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(json.len() as u32)?;
    out.write_all(&json)?;
    let (m, n) = (data.setting.stores(), data.setting.brands());
    for (index, s) in data.samples.iter().enumerate() {
        if s.instance.stores() != m || s.values.stores().len() != m || s.values.brands().len() != n {
            return Err(DatasetError::Sample { index, reason: "dimensions differ from setting".into() });
        }
        for a in s.instance.alphas() {
            out.write_f64::<LittleEndian>(*a)?;
        }
        for row in s.instance.adjacency() {
            for &linked in row {
                out.write_u8(linked as u8)?;
            }
        }
        for v in s.values.stores().iter().chain(s.values.brands()) {
            out.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(input: &mut R) -> Result<Dataset, DatasetError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(DatasetError::Version(version));
    }
    let len = input.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: DatasetHeader = serde_json::from_slice(&json).map_err(|e| DatasetError::Header(e.to_string()))?;
    let (m, n) = (header.setting.stores(), header.setting.brands());
    let mut samples = Vec::with_capacity(header.count);
    let mut adjacency_bytes = vec![0u8; m * n];
    for index in 0..header.count {
        let mut alphas = vec![0.0; m];
        input.read_f64_into::<LittleEndian>(&mut alphas)?;
        input.read_exact(&mut adjacency_bytes)?;
        let adjacency: Vec<Vec<bool>> = (0..m).map(|i| adjacency_bytes[i * n..(i + 1) * n].iter().map(|&b| b == 1).collect()).collect();
        let mut values = vec![0.0; m + n];
        input.read_f64_into::<LittleEndian>(&mut values)?;
        let bad = |e: crate::model::ModelError| DatasetError::Sample { index, reason: e.to_string() };
        let instance = AuctionInstance::new(alphas, adjacency).map_err(bad)?;
        let values = BidProfile::from_agents(&values, m).map_err(bad)?;
        samples.push(Sample { instance, values });
    }
    Ok(Dataset { setting: header.setting, domain: header.domain, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, PopulationSpec, Preset, ValueLaw};
    use crate::rng::substream;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = PopulationSpec::new(Preset::D, ValueLaw::LOGNORMAL, 0.5);
        let data = Dataset {
            setting: Preset::D.setting(2).unwrap(),
            domain: ValueDomain::UNIT,
            samples: generate(&spec, 40, &mut substream(5, "rt")),
        };
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        let back = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(back, data);
        let mut again = Vec::new();
        write_dataset(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_dataset(&mut &b"NOPE...."[..]), Err(DatasetError::BadMagic)));
        let mut truncated = Vec::new();
        let data = Dataset {
            setting: Preset::A.setting(1).unwrap(),
            domain: ValueDomain::UNIT,
            samples: generate(&PopulationSpec::new(Preset::A, ValueLaw::Uniform, 0.5), 3, &mut substream(1, "t")),
        };
        write_dataset(&mut truncated, &data).unwrap();
        truncated.truncate(truncated.len() - 5);
        assert!(matches!(read_dataset(&mut truncated.as_slice()), Err(DatasetError::Io(_))));
    }
}
