//! Region label volumes and their names.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nifti;
use crate::volume::{Dims, Volume3D};

pub const BACKGROUND: &str = "background";

/// Labels are stored as reals holding integers; anything further than this
/// from an integer is rejected.
const INTEGER_TOLERANCE: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    labels: Volume3D,
    ids: Vec<u32>,
    names: BTreeMap<u32, String>,
}

impl Atlas {
    pub fn new(labels: Volume3D, names: BTreeMap<u32, String>) -> Result<Self> {
        let mut ids = Vec::with_capacity(labels.data().len());
        for (i, &v) in labels.data().iter().enumerate() {
            let r = v.round();
            if !(v >= 0.0) || (v - r).abs() >= INTEGER_TOLERANCE || r > u32::MAX as f32 {
                let [x, y, z] = labels.dims().coords(i);
                return Err(Error::Atlas(format!(
                    "label {v} at ({x},{y},{z}) is not a non-negative integer"
                )));
            }
            let id = r as u32;
            if id != 0 && !names.contains_key(&id) {
                return Err(Error::Atlas(format!("region id {id} has no name")));
            }
            ids.push(id);
        }
        Ok(Atlas { labels, ids, names })
    }

    pub fn dims(&self) -> Dims {
        self.labels.dims()
    }

    pub fn labels(&self) -> &Volume3D {
        &self.labels
    }

    pub fn names(&self) -> &BTreeMap<u32, String> {
        &self.names
    }

    /// Region id per voxel, in volume order.
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn region_at(&self, x: usize, y: usize, z: usize) -> Option<u32> {
        if !self.dims().contains(x, y, z) {
            return None;
        }
        Some(self.ids[self.dims().index(x, y, z)])
    }

    /// Name of the region under a voxel; `"background"` for id 0 or
    /// coordinates outside the grid.
    pub fn lookup(&self, x: usize, y: usize, z: usize) -> &str {
        match self.region_at(x, y, z) {
            Some(0) | None => BACKGROUND,
            Some(id) => self
                .names
                .get(&id)
                .map(String::as_str)
                .unwrap_or(BACKGROUND),
        }
    }

    pub fn name(&self, region: u32) -> Option<&str> {
        self.names.get(&region).map(String::as_str)
    }

    pub fn region_by_name(&self, name: &str) -> Option<u32> {
        self.names
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .map(|(id, _)| *id)
    }

    pub fn mask(&self, region: u32) -> Vec<bool> {
        self.ids.iter().map(|&id| id == region).collect()
    }

    /// Region ids that actually occur in the label volume, ascending.
    pub fn present_regions(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.ids.iter().copied().filter(|&id| id != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    pub fn ensure_dims(&self, expected: Dims) -> Result<()> {
        self.labels.ensure_dims(expected)
    }
}

pub fn parse_names(text: &str) -> Result<BTreeMap<u32, String>> {
    let mut names = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, name) = line.split_once('\t').ok_or_else(|| {
            Error::Atlas(format!("line {}: expected \"id<TAB>name\"", lineno + 1))
        })?;
        let id: u32 = id
            .trim()
            .parse()
            .map_err(|_| Error::Atlas(format!("line {}: bad region id {id:?}", lineno + 1)))?;
        if names.insert(id, name.to_string()).is_some() {
            return Err(Error::Atlas(format!(
                "line {}: duplicate region id {id}",
                lineno + 1
            )));
        }
    }
    Ok(names)
}

pub fn format_names(names: &BTreeMap<u32, String>) -> String {
    let mut out = String::new();
    for (id, name) in names {
        out.push_str(&format!("{id}\t{name}\n"));
    }
    out
}

/// Loads a label volume and its name table, optionally checking the grid
/// against a reference.
pub fn load_atlas(
    labels_path: impl AsRef<Path>,
    names_path: impl AsRef<Path>,
    reference: Option<Dims>,
) -> Result<Atlas> {
    let labels = nifti::read_volume(labels_path)?;
    if let Some(expected) = reference {
        labels.ensure_dims(expected)?;
    }
    let names_path = names_path.as_ref();
    let text = fs::read_to_string(names_path).map_err(|e| Error::io(names_path, e))?;
    Atlas::new(labels, parse_names(&text)?)
}

pub fn save_atlas(
    atlas: &Atlas,
    labels_path: impl AsRef<Path>,
    names_path: impl AsRef<Path>,
) -> Result<()> {
    nifti::write_volume(atlas.labels(), labels_path)?;
    let names_path = names_path.as_ref();
    fs::write(names_path, format_names(atlas.names())).map_err(|e| Error::io(names_path, e))
}
