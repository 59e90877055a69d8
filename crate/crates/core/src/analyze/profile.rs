use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceProfile {
    pub axis: usize,
    pub positive: Vec<f64>,
    /// Sums of negative values (non-positive numbers).
    pub negative: Vec<f64>,
}

impl SliceProfile {
    pub fn total(&self) -> f64 {
        self.positive.iter().chain(&self.negative).sum()
    }
}

/// Positive and negative relevance per slice along `axis`.
pub fn slice_profile(map: &Volume3D, axis: usize) -> Result<SliceProfile> {
    if axis > 2 {
        return Err(Error::InvalidParameter(format!(
            "axis {axis} is not 0, 1 or 2"
        )));
    }
    let d = map.dims();
    let n = d.axis_len(axis);
    let mut positive = vec![0.0; n];
    let mut negative = vec![0.0; n];
    for (i, &v) in map.data().iter().enumerate() {
        let k = d.coords(i)[axis];
        let v = v as f64;
        if v > 0.0 {
            positive[k] += v;
        } else if v < 0.0 {
            negative[k] += v;
        }
    }
    Ok(SliceProfile {
        axis,
        positive,
        negative,
    })
}
