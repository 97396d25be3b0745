//! Line-delimited dataset files: one JSON record per line, each describing
//! one periodic unit with element symbols and row-wise basis vectors.
//!
//! The loader is total: every non-blank line either yields a valid unit or
//! an error located by its 1-based line number. Numeric fields round-trip
//! exactly through save and load.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::element;
use crate::unit::PeriodicUnit;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    /// Element symbols, one per atom.
    pub species: Vec<String>,
    /// Rows are the basis vectors a, b, c in Angstroms. The in-memory
    /// lattice keeps basis vectors as columns, so conversion transposes.
    pub lattice: [[f64; 3]; 3],
    /// One row per atom, Cartesian Angstroms unless flagged fractional.
    pub coords: Vec<[f64; 3]>,
    #[serde(default)]
    pub coords_are_fractional: bool,
}

impl DatasetRecord {
    /// Converts to a periodic unit, resolving symbols and the fractional
    /// flag. Does not check geometric validity; the loader does.
    pub fn to_unit(&self) -> Result<PeriodicUnit> {
        let mut species = Vec::with_capacity(self.species.len());
        for sym in &self.species {
            species.push(element::atomic_number(sym)?);
        }
        let lattice = Matrix3::from_columns(&[
            Vector3::from(self.lattice[0]),
            Vector3::from(self.lattice[1]),
            Vector3::from(self.lattice[2]),
        ]);
        let coords = self
            .coords
            .iter()
            .map(|row| {
                let v = Vector3::from(*row);
                if self.coords_are_fractional {
                    lattice * v
                } else {
                    v
                }
            })
            .collect();
        PeriodicUnit::new(species, coords, lattice)
    }

    /// Describes a unit as a record with Cartesian coordinates.
    pub fn from_unit(id: impl Into<String>, unit: &PeriodicUnit) -> Self {
        let col = |i: usize| {
            let c = unit.lattice.column(i);
            [c[0], c[1], c[2]]
        };
        DatasetRecord {
            id: id.into(),
            species: unit
                .species
                .iter()
                .map(|&z| {
                    element::symbol(z)
                        .expect("unit species are valid atomic numbers")
                        .to_string()
                })
                .collect(),
            lattice: [col(0), col(1), col(2)],
            coords: unit.coords.iter().map(|c| [c.x, c.y, c.z]).collect(),
            coords_are_fractional: false,
        }
    }
}

/// Loads records paired with the units they describe. Blank lines are
/// skipped; anything else must parse and validate.
pub fn load_named(path: impl AsRef<Path>) -> Result<Vec<(String, PeriodicUnit)>> {
    let file = File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if record.species.len() != record.coords.len() {
            return Err(Error::Validation {
                line: line_no,
                reason: format!(
                    "{} species but {} coordinate rows",
                    record.species.len(),
                    record.coords.len()
                ),
            });
        }
        let unit = match record.to_unit() {
            Ok(u) => u,
            Err(e @ Error::UnknownElement(_)) => return Err(e),
            Err(e) => {
                return Err(Error::Validation {
                    line: line_no,
                    reason: e.to_string(),
                })
            }
        };
        if let Some(v) = unit.validate().first() {
            return Err(Error::Validation {
                line: line_no,
                reason: v.to_string(),
            });
        }
        out.push((record.id, unit));
    }
    Ok(out)
}

/// Loads the units of a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<PeriodicUnit>> {
    Ok(load_named(path)?.into_iter().map(|(_, u)| u).collect())
}

/// Writes records as one JSON object per line, atomically.
pub fn save_dataset(records: &[DatasetRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })?);
        body.push('\n');
    }
    write_atomic(path.as_ref(), body.as_bytes())
}

/// Writes a file through a temporary sibling and a rename, so readers never
/// observe a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
