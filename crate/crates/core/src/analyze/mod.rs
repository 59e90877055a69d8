//! Quantities derived from relevance maps: clusters, per-slice profiles,
//! per-region sums and the occlusion scan.

mod clusters;
mod occlusion;
mod profile;
mod regions;

pub use clusters::{
    cluster_size_histogram, extract_clusters, Cluster, ClusterSet, Connectivity, SizeBin,
    SizeHistogram,
};
pub use occlusion::{
    default_cube_edge, occlusion_scan, OcclusionConfig, OcclusionResult, Preprocess,
};
pub use profile::{slice_profile, SliceProfile};
pub use regions::{
    region_relevance, region_volume, region_volume_by_name, RegionRelevance, RegionSum,
};
