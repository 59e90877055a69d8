use serde::{Deserialize, Serialize};

use crate::atlas::Atlas;
use crate::error::{Error, Result};
use crate::volume::Volume3D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSum {
    pub id: u32,
    pub name: String,
    pub voxels: usize,
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRelevance {
    /// Regions with at least one voxel, by id.
    pub regions: Vec<RegionSum>,
    pub background: f64,
}

impl RegionRelevance {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.regions.iter().find(|r| r.name == name).map(|r| r.sum)
    }

    pub fn by_id(&self, id: u32) -> Option<f64> {
        self.regions.iter().find(|r| r.id == id).map(|r| r.sum)
    }
}

/// Sum of map values inside each atlas region.
pub fn region_relevance(map: &Volume3D, atlas: &Atlas) -> Result<RegionRelevance> {
    map.ensure_dims(atlas.dims())?;
    let mut regions: Vec<RegionSum> = atlas
        .present_regions()
        .into_iter()
        .map(|id| RegionSum {
            id,
            name: atlas.name(id).unwrap_or_default().to_string(),
            voxels: 0,
            sum: 0.0,
        })
        .collect();
    let mut background = 0.0;
    for (&id, &v) in atlas.ids().iter().zip(map.data()) {
        if id == 0 {
            background += v as f64;
            continue;
        }
        let r = regions
            .binary_search_by_key(&id, |r| r.id)
            .expect("present region");
        regions[r].sum += v as f64;
        regions[r].voxels += 1;
    }
    Ok(RegionRelevance {
        regions,
        background,
    })
}

/// Sum of intensities inside `region` times the voxel volume, in ml.
pub fn region_volume(v: &Volume3D, atlas: &Atlas, region: u32) -> Result<f64> {
    v.ensure_dims(atlas.dims())?;
    if region == 0 || atlas.name(region).is_none() {
        return Err(Error::Atlas(format!("unknown region id {region}")));
    }
    let s: f64 = atlas
        .ids()
        .iter()
        .zip(v.data())
        .filter(|(&id, _)| id == region)
        .map(|(_, &x)| x as f64)
        .sum();
    Ok(s * v.voxel_volume_ml())
}

pub fn region_volume_by_name(v: &Volume3D, atlas: &Atlas, name: &str) -> Result<f64> {
    let id = atlas
        .region_by_name(name)
        .ok_or_else(|| Error::Atlas(format!("unknown region {name:?}")))?;
    region_volume(v, atlas, id)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::volume::Dims;

    fn atlas(d: Dims, region: &[usize]) -> Atlas {
        let mut labels = vec![0.0; d.len()];
        for &i in region {
            labels[i] = 3.0;
        }
        let names = BTreeMap::from([(3, "Hippocampus".to_string())]);
        Atlas::new(Volume3D::new(d, 1.5, labels).unwrap(), names).unwrap()
    }

    #[test]
    fn background_only() {
        let d = Dims::new(2, 2, 2);
        let a = atlas(d, &[]);
        let m = Volume3D::new(d, 1.5, vec![1.0; 8]).unwrap();
        let r = region_relevance(&m, &a).unwrap();
        assert!(r.regions.is_empty());
        assert_eq!(r.background, 8.0);
    }

    #[test]
    fn one_voxel_region() {
        let d = Dims::new(2, 2, 2);
        let a = atlas(d, &[5]);
        let mut data = vec![0.0; 8];
        data[5] = 0.7;
        let r = region_relevance(&Volume3D::new(d, 1.5, data).unwrap(), &a).unwrap();
        assert_eq!(r.regions.len(), 1);
        assert_eq!(r.get("Hippocampus"), Some(0.7f32 as f64));
    }

    #[test]
    fn volume_arithmetic() {
        let d = Dims::new(5, 4, 1);
        let a = atlas(d, &(0..10).collect::<Vec<_>>());
        let v = Volume3D::new(d, 1.5, vec![1.0; 20]).unwrap();
        assert!((region_volume(&v, &a, 3).unwrap() - 0.03375).abs() < 1e-15);
        let z = Volume3D::zeros(d, 1.5).unwrap();
        assert_eq!(region_volume(&z, &a, 3).unwrap(), 0.0);
        let v2 = v.map(|x| 2.0 * x);
        assert_eq!(
            region_volume(&v2, &a, 3).unwrap(),
            2.0 * region_volume(&v, &a, 3).unwrap()
        );
        assert!(matches!(region_volume(&v, &a, 4), Err(Error::Atlas(_))));
        assert!(matches!(
            region_volume_by_name(&v, &a, "Amygdala"),
            Err(Error::Atlas(_))
        ));
    }

    #[test]
    fn dims_mismatch() {
        let a = atlas(Dims::new(2, 2, 2), &[1]);
        let m = Volume3D::zeros(Dims::new(2, 2, 3), 1.5).unwrap();
        assert!(matches!(region_relevance(&m, &a), Err(Error::Dims { .. })));
    }
}
