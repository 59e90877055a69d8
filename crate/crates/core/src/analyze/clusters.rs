use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(try_from = "u32", into = "u32")]
pub enum Connectivity {
    /// Shared faces.
    #[default]
    Six,
    /// Shared faces, edges or corners.
    TwentySix,
}

impl TryFrom<u32> for Connectivity {
    type Error = Error;
    fn try_from(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::InvalidParameter(format!(
                "connectivity {n} is not 6 or 26"
            ))),
        }
    }
}

impl From<Connectivity> for u32 {
    fn from(c: Connectivity) -> u32 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl FromStr for Connectivity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .parse::<u32>()
            .map_err(|_| Error::InvalidParameter(format!("connectivity {s:?} is not 6 or 26")))?
            .try_into()
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u32::from(*self))
    }
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let n = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => n == 1,
                        Connectivity::TwentySix => n > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Member coordinates in increasing linear-index order.
    pub voxels: Vec<[usize; 3]>,
    pub size: usize,
    pub volume_ml: f64,
    pub sum_relevance: f64,
    pub peak_value: f64,
    pub peak: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    /// Ordered by `sum_relevance`, largest first.
    pub clusters: Vec<Cluster>,
    pub threshold: f64,
    pub min_size: usize,
    pub connectivity: Connectivity,
}

impl ClusterSet {
    pub fn total_relevance(&self) -> f64 {
        self.clusters.iter().map(|c| c.sum_relevance).sum()
    }
}

/// Connected components of `{voxel : value >= threshold}` with at least
/// `min_size` voxels.
pub fn extract_clusters(
    map: &Volume3D,
    threshold: f64,
    min_size: usize,
    connectivity: Connectivity,
) -> Result<ClusterSet> {
    if min_size == 0 {
        return Err(Error::InvalidParameter(
            "min_size must be at least 1".into(),
        ));
    }
    if threshold.is_nan() {
        return Err(Error::InvalidParameter("threshold is NaN".into()));
    }
    let d = map.dims();
    let data = map.data();
    let above: Vec<bool> = data.iter().map(|&v| v as f64 >= threshold).collect();
    let mut seen = vec![false; data.len()];
    let offsets = connectivity.offsets();
    let mut clusters = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if !above[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let [x, y, z] = d.coords(i);
            for o in &offsets {
                let (nx, ny, nz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                if nx < 0 || ny < 0 || nz < 0 {
                    continue;
                }
                let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                if !d.contains(nx, ny, nz) {
                    continue;
                }
                let j = d.index(nx, ny, nz);
                if above[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if members.len() < min_size {
            continue;
        }
        members.sort_unstable();
        let mut peak = members[0];
        for &i in &members[1..] {
            if data[i] > data[peak] {
                peak = i;
            }
        }
        clusters.push(Cluster {
            size: members.len(),
            volume_ml: members.len() as f64 * map.voxel_volume_ml(),
            sum_relevance: members.iter().map(|&i| data[i] as f64).sum(),
            peak_value: data[peak] as f64,
            peak: d.coords(peak),
            voxels: members.iter().map(|&i| d.coords(i)).collect(),
        });
    }
    clusters.sort_by(|a, b| b.sum_relevance.total_cmp(&a.sum_relevance));
    Ok(ClusterSet {
        clusters,
        threshold,
        min_size,
        connectivity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBin {
    /// Inclusive size range.
    pub min_size: usize,
    pub max_size: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeHistogram {
    pub bin_width: usize,
    pub bins: Vec<SizeBin>,
}

/// Cluster sizes in `bins` equal-width bins starting at size 1; the width is
/// `ceil(max_size / bins)`.
pub fn cluster_size_histogram(cs: &ClusterSet, bins: usize) -> Result<SizeHistogram> {
    if bins == 0 {
        return Err(Error::InvalidParameter("bins must be at least 1".into()));
    }
    let max = cs.clusters.iter().map(|c| c.size).max().unwrap_or(0);
    let width = max.div_ceil(bins).max(1);
    let mut out: Vec<SizeBin> = (0..bins)
        .map(|i| SizeBin {
            min_size: 1 + i * width,
            max_size: (i + 1) * width,
            count: 0,
        })
        .collect();
    for c in &cs.clusters {
        out[(c.size - 1) / width].count += 1;
    }
    Ok(SizeHistogram {
        bin_width: width,
        bins: out,
    })
}
