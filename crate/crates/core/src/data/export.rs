//! Line-delimited exports: per-image heat maps keyed by factor name, and
//! per-image inference records (state, marginals, grid descriptor).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FactorState;
use crate::representation::{GridDescriptor, HeatMapStack, PatchMarginals};

/// Heat maps of one image; each map is a row-major grid (`height` rows of
/// `width` values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMapRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub maps: IndexMap<String, Vec<Vec<f64>>>,
}

impl HeatMapRecord {
    pub fn from_stack(stack: &HeatMapStack, names: &[String]) -> Result<Self> {
        stack.check()?;
        if names.len() != stack.k() {
            return Err(Error::Dimension(format!(
                "{} names for {} heat maps",
                names.len(),
                stack.k()
            )));
        }
        let w = stack.width as usize;
        let maps = names
            .iter()
            .zip(&stack.maps)
            .map(|(n, m)| (n.clone(), m.chunks(w.max(1)).map(<[f64]>::to_vec).collect()))
            .collect();
        Ok(HeatMapRecord {
            image_id: stack.image_id.clone(),
            width: stack.width,
            height: stack.height,
            maps,
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.maps.keys().cloned().collect()
    }

    pub fn grid(&self, factor: &str) -> Option<&Vec<Vec<f64>>> {
        self.maps.get(factor)
    }

    pub fn to_stack(&self) -> Result<HeatMapStack> {
        let maps: Vec<Vec<f64>> = self.maps.values().map(|g| g.concat()).collect();
        for (name, grid) in &self.maps {
            if grid.len() != self.height as usize || grid.iter().any(|r| r.len() != self.width as usize) {
                return Err(Error::Dimension(format!(
                    "{}: map '{name}' is not {}x{}",
                    self.image_id, self.width, self.height
                )));
            }
        }
        let stack = HeatMapStack {
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            maps,
        };
        stack.check()?;
        Ok(stack)
    }
}

/// Inference output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub image_id: String,
    pub state: FactorState,
    pub marginals: PatchMarginals,
    pub descriptor: GridDescriptor,
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Loads a heat-map export; every record must list the same factors in the
/// same order. Returns the factor names and the stacks.
pub fn load_heatmaps(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<HeatMapStack>)> {
    let records: Vec<HeatMapRecord> = read_jsonl(&path)?;
    let names = records.first().map(HeatMapRecord::names).unwrap_or_default();
    let mut stacks = Vec::with_capacity(records.len());
    for r in &records {
        if r.names() != names {
            return Err(Error::Vocabulary(format!(
                "{}: factor list differs from the first record",
                r.image_id
            )));
        }
        stacks.push(r.to_stack()?);
    }
    Ok((names, stacks))
}

pub fn save_heatmaps(path: impl AsRef<Path>, stacks: &[HeatMapStack], names: &[String]) -> Result<()> {
    let records = stacks
        .iter()
        .map(|s| HeatMapRecord::from_stack(s, names))
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(path, &records)
}
