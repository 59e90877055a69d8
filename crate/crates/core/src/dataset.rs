//! On-disk cohorts: a `dataset.json` index next to one NIfTI volume per
//! subject and an atlas label volume with its names file.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{load_atlas, save_atlas};
use crate::error::{Error, Result};
use crate::nifti::{read_volume, write_volume};
use crate::phantom::Cohort;
use crate::subject::SubjectRecord;
use crate::volume::Dims;

pub const INDEX_FILE: &str = "dataset.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    #[serde(flatten)]
    pub record: SubjectRecord,
    /// Relative to the dataset directory.
    pub volume: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub dims: Dims,
    pub atlas_labels: PathBuf,
    pub atlas_names: PathBuf,
    pub subjects: Vec<SubjectEntry>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn save_cohort(cohort: &Cohort, dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    let dir = dir.as_ref();
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let dims = cohort.atlas.dims();
    save_atlas(&cohort.atlas, dir.join("atlas.nii"), dir.join("atlas.txt"))?;
    let subjects: Vec<SubjectEntry> = cohort
        .subjects
        .par_iter()
        .map(|(r, v)| {
            let rel = PathBuf::from("volumes").join(format!("{}.nii", r.id));
            write_volume(v, dir.join(&rel))?;
            Ok(SubjectEntry {
                record: r.clone(),
                volume: rel,
            })
        })
        .collect::<Result<_>>()?;
    let index = DatasetIndex {
        format_version: FORMAT_VERSION,
        dims,
        atlas_labels: "atlas.nii".into(),
        atlas_names: "atlas.txt".into(),
        subjects,
    };
    write_json(&dir.join(INDEX_FILE), &index)?;
    Ok(index)
}

pub fn read_index(dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    let path = dir.as_ref().join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if index.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "dataset format version {} (expected {FORMAT_VERSION})",
            index.format_version
        )));
    }
    let mut ids: Vec<&str> = index
        .subjects
        .iter()
        .map(|s| s.record.id.as_str())
        .collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Data(format!("duplicate subject id {}", w[0])));
    }
    for s in &index.subjects {
        s.record.validate().map_err(Error::Data)?;
    }
    Ok(index)
}

pub fn load_cohort(dir: impl AsRef<Path>) -> Result<Cohort> {
    let dir = dir.as_ref();
    let index = read_index(dir)?;
    let atlas = load_atlas(
        dir.join(&index.atlas_labels),
        dir.join(&index.atlas_names),
        Some(index.dims),
    )?;
    let subjects = index
        .subjects
        .par_iter()
        .map(|s| {
            let v = read_volume(dir.join(&s.volume))?;
            v.ensure_dims(index.dims)?;
            Ok((s.record.clone(), v))
        })
        .collect::<Result<_>>()?;
    Ok(Cohort { subjects, atlas })
}
