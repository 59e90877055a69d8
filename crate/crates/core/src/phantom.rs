//! Synthetic "brain-like" cohorts with controllable regional atrophy.
//!
//! A phantom volume is
//!
//! ```text
//! v(p) = base(p) * jitter(region(p)) * (1 - k * severity * [p in target])
//!        + brain(p) * trend(p, record)
//!        + brain(p) * N(0, noise_sd)
//! ```
//!
//! where `base` is a fixed smooth blob pattern per region, `jitter` a
//! per-subject random scale per region, and
//!
//! ```text
//! trend(p, r) = age_slope * (age - age_ref) * w(p)
//!             + tiv_slope * (tiv - tiv_ref) / 100
//!             + sex_offset * sex + field_offset * fs
//! ```
//!
//! with `w(p) = target_age_weight` inside the target region and 1 elsewhere.
//! Voxels outside the brain are exactly zero.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::Atlas;
use crate::error::{Error, Result};
use crate::subject::{Amyloid, FieldStrength, Group, Sex, SubjectRecord};
use crate::volume::{Dims, Volume3D};

pub const REGION_NAMES: [&str; 4] = ["Hippocampus", "Temporal", "Parietal", "Frontal"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityRange {
    pub lo: f64,
    pub hi: f64,
}

impl SeverityRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        SeverityRange { lo, hi }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupCovariates {
    pub age_mean: f64,
    pub age_sd: f64,
    pub female_fraction: f64,
    pub field_3t_fraction: f64,
    pub amyloid_pos_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateTrend {
    pub age_ref: f64,
    /// Intensity change per year of age.
    pub age_slope: f64,
    /// Multiplier on the age slope inside the target region.
    pub target_age_weight: f64,
    pub tiv_ref: f64,
    /// Intensity change per 100 ml of TIV.
    pub tiv_slope: f64,
    pub sex_offset: f64,
    pub field_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub voxel_size_mm: f32,
    pub target_region_id: u32,
    pub severity_cn: SeverityRange,
    pub severity_mci: SeverityRange,
    pub severity_ad: SeverityRange,
    /// Fractional intensity loss in the target region at severity 1.
    pub atrophy_factor: f64,
    pub noise_sd: f64,
    /// SD of the per-subject, per-region multiplicative intensity scale.
    pub region_jitter_sd: f64,
    pub cn: GroupCovariates,
    pub mci: GroupCovariates,
    pub ad: GroupCovariates,
    pub tiv_mean_female: f64,
    pub tiv_mean_male: f64,
    pub tiv_sd: f64,
    pub trend: CovariateTrend,
    /// Seed of the fixed anatomical blob pattern shared by all subjects.
    pub structure_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        // Group covariate defaults follow the ADNI-GO/2 training sample:
        // age mean/SD, female share, 3T share, amyloid-positive share.
        PhantomSpec {
            dims: Dims::new(32, 32, 40),
            voxel_size_mm: 4.5,
            target_region_id: 1,
            severity_cn: SeverityRange::new(0.0, 0.0),
            severity_mci: SeverityRange::new(0.2, 0.5),
            severity_ad: SeverityRange::new(0.5, 0.9),
            atrophy_factor: 0.45,
            noise_sd: 0.05,
            region_jitter_sd: 0.06,
            cn: GroupCovariates {
                age_mean: 75.4,
                age_sd: 6.6,
                female_fraction: 130.0 / 254.0,
                field_3t_fraction: 183.0 / 254.0,
                amyloid_pos_fraction: 77.0 / 254.0,
            },
            mci: GroupCovariates {
                age_mean: 74.1,
                age_sd: 8.1,
                female_fraction: 93.0 / 220.0,
                field_3t_fraction: 171.0 / 220.0,
                amyloid_pos_fraction: 141.0 / 220.0,
            },
            ad: GroupCovariates {
                age_mean: 75.0,
                age_sd: 8.0,
                female_fraction: 80.0 / 189.0,
                field_3t_fraction: 154.0 / 189.0,
                amyloid_pos_fraction: 161.0 / 189.0,
            },
            tiv_mean_female: 1400.0,
            tiv_mean_male: 1580.0,
            tiv_sd: 120.0,
            trend: CovariateTrend {
                age_ref: 75.0,
                age_slope: -0.004,
                target_age_weight: 1.5,
                tiv_ref: 1500.0,
                tiv_slope: 0.012,
                sex_offset: -0.01,
                field_offset: 0.015,
            },
            structure_seed: 0x5eed_b1a5,
        }
    }
}

impl PhantomSpec {
    pub fn severity_range(&self, group: Group) -> SeverityRange {
        match group {
            Group::CN => self.severity_cn,
            Group::MCI => self.severity_mci,
            Group::AD => self.severity_ad,
        }
    }

    pub fn covariates(&self, group: Group) -> &GroupCovariates {
        match group {
            Group::CN => &self.cn,
            Group::MCI => &self.mci,
            Group::AD => &self.ad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.dims.min_dim() < 8 {
            return bad(format!("phantom dims {} too small", self.dims));
        }
        if !(self.voxel_size_mm > 0.0) {
            return bad("voxel size must be positive".into());
        }
        if !(1..=REGION_NAMES.len() as u32).contains(&self.target_region_id) {
            return bad(format!(
                "target region {} is not a phantom region",
                self.target_region_id
            ));
        }
        if self.severity_cn != SeverityRange::new(0.0, 0.0) {
            return bad("control severity must be exactly 0".into());
        }
        for (name, r) in [("MCI", self.severity_mci), ("AD", self.severity_ad)] {
            if !(0.0 <= r.lo && r.lo <= r.hi && r.hi <= 1.0) {
                return bad(format!(
                    "{name} severity range [{}, {}] not within [0, 1]",
                    r.lo, r.hi
                ));
            }
        }
        if self.severity_mci.lo > self.severity_ad.lo || self.severity_mci.hi > self.severity_ad.hi
        {
            return bad("MCI severity range must not exceed the AD range".into());
        }
        if !(0.0..=1.0).contains(&self.atrophy_factor) {
            return bad("atrophy factor must lie in [0, 1]".into());
        }
        if !(self.noise_sd >= 0.0) || !(self.region_jitter_sd >= 0.0) || !(self.tiv_sd >= 0.0) {
            return bad("standard deviations must be non-negative".into());
        }
        for g in Group::ALL {
            let c = self.covariates(g);
            for f in [
                c.female_fraction,
                c.field_3t_fraction,
                c.amyloid_pos_fraction,
            ] {
                if !(0.0..=1.0).contains(&f) {
                    return bad(format!("{g} covariate fraction {f} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Additive covariate term at a brain voxel of the given region.
    pub fn trend_at(&self, region: u32, record: &SubjectRecord) -> f64 {
        let t = &self.trend;
        let w = if region == self.target_region_id {
            t.target_age_weight
        } else {
            1.0
        };
        t.age_slope * (record.age - t.age_ref) * w
            + t.tiv_slope * (record.tiv - t.tiv_ref) / 100.0
            + t.sex_offset * record.sex.code()
            + t.field_offset * record.field_strength.code()
    }
}

fn normalized(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 - 0.5
}

fn ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum()
}

/// The fixed phantom parcellation: bilateral "hippocampus" (1), temporal
/// (2), parietal (3) and frontal (4) compartments of an ellipsoidal brain.
pub fn phantom_atlas(dims: Dims, voxel_size_mm: f32) -> Result<Atlas> {
    let labels = Volume3D::from_fn(dims, voxel_size_mm, |x, y, z| {
        let p = [
            normalized(x, dims.nx),
            normalized(y, dims.ny),
            normalized(z, dims.nz),
        ];
        if ellipsoid(p, [0.0; 3], [0.42, 0.44, 0.44]) > 1.0 {
            return 0.0;
        }
        let hippo_r = [0.07, 0.13, 0.075];
        if ellipsoid(p, [-0.17, -0.02, -0.1], hippo_r) <= 1.0
            || ellipsoid(p, [0.17, -0.02, -0.1], hippo_r) <= 1.0
        {
            1.0
        } else if p[2] < -0.08 {
            2.0
        } else if p[1] < 0.0 {
            3.0
        } else {
            4.0
        }
    })?;
    let names: BTreeMap<u32, String> = REGION_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| (i as u32 + 1, n.to_string()))
        .collect();
    Atlas::new(labels, names)
}

/// Subject-independent base intensity: a per-region level modulated by a
/// few smooth Gaussian blobs.
fn base_pattern(spec: &PhantomSpec, atlas: &Atlas) -> Vec<f64> {
    const LEVELS: [f64; 5] = [0.0, 0.75, 0.6, 0.55, 0.5];
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.structure_seed);
    let blobs: Vec<([f64; 3], f64, f64)> = (0..12)
        .map(|_| {
            let c = [
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
            ];
            let width = rng.random_range(0.08..0.18);
            let amp = rng.random_range(-0.15..0.15);
            (c, width, amp)
        })
        .collect();
    atlas
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &region)| {
            if region == 0 {
                return 0.0;
            }
            let [x, y, z] = dims.coords(i);
            let p = [
                normalized(x, dims.nx),
                normalized(y, dims.ny),
                normalized(z, dims.nz),
            ];
            let modulation: f64 = blobs
                .iter()
                .map(|(c, w, a)| {
                    let d2: f64 = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum();
                    a * (-d2 / (2.0 * w * w)).exp()
                })
                .sum();
            LEVELS[region as usize] * (1.0 + modulation)
        })
        .collect()
}

/// Reusable generator holding the atlas and base pattern for one spec.
#[derive(Debug, Clone)]
pub struct PhantomGenerator {
    spec: PhantomSpec,
    atlas: Atlas,
    base: Vec<f64>,
}

impl PhantomGenerator {
    pub fn new(spec: PhantomSpec) -> Result<Self> {
        spec.validate()?;
        let atlas = phantom_atlas(spec.dims, spec.voxel_size_mm)?;
        let base = base_pattern(&spec, &atlas);
        Ok(PhantomGenerator { spec, atlas, base })
    }

    pub fn spec(&self) -> &PhantomSpec {
        &self.spec
    }

    pub fn atlas(&self) -> &Atlas {
        &self.atlas
    }

    /// Deterministic in `(spec, record, seed)`.
    pub fn generate(&self, record: &SubjectRecord, seed: u64) -> Result<Volume3D> {
        record.validate().map_err(Error::InvalidParameter)?;
        let range = self.spec.severity_range(record.group);
        if record.lesion_severity < range.lo || record.lesion_severity > range.hi {
            return Err(Error::InvalidParameter(format!(
                "{}: severity {} outside the {} range [{}, {}]",
                record.id, record.lesion_severity, record.group, range.lo, range.hi
            )));
        }
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter_dist = Normal::new(0.0, spec.region_jitter_sd).expect("validated sd");
        let jitter: Vec<f64> = (0..=REGION_NAMES.len())
            .map(|_| (1.0 + jitter_dist.sample(&mut rng)).max(0.0))
            .collect();
        let noise = Normal::new(0.0, spec.noise_sd).expect("validated sd");
        let atrophy = 1.0 - spec.atrophy_factor * record.lesion_severity;
        let trends: Vec<f64> = (0..=REGION_NAMES.len() as u32)
            .map(|r| spec.trend_at(r, record))
            .collect();

        let data = self
            .atlas
            .ids()
            .iter()
            .zip(&self.base)
            .map(|(&region, &base)| {
                if region == 0 {
                    return 0.0;
                }
                let mut v = base * jitter[region as usize];
                if region == spec.target_region_id {
                    v *= atrophy;
                }
                v += trends[region as usize];
                if spec.noise_sd > 0.0 {
                    v += noise.sample(&mut rng);
                }
                v as f32
            })
            .collect();
        Volume3D::new(spec.dims, spec.voxel_size_mm, data)
    }
}

pub fn generate_phantom(spec: &PhantomSpec, record: &SubjectRecord, seed: u64) -> Result<Volume3D> {
    PhantomGenerator::new(spec.clone())?.generate(record, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub cn: usize,
    pub mci: usize,
    pub ad: usize,
}

impl GroupCounts {
    pub const fn new(cn: usize, mci: usize, ad: usize) -> Self {
        GroupCounts { cn, mci, ad }
    }

    pub fn total(&self) -> usize {
        self.cn + self.mci + self.ad
    }

    pub fn get(&self, g: Group) -> usize {
        match g {
            Group::CN => self.cn,
            Group::MCI => self.mci,
            Group::AD => self.ad,
        }
    }
}

impl std::str::FromStr for GroupCounts {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|e| format!("bad count {p:?}: {e}"))
            })
            .collect::<std::result::Result<_, _>>()?;
        match parts[..] {
            [cn, mci, ad] => Ok(GroupCounts { cn, mci, ad }),
            _ => Err(format!("expected three comma-separated counts, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub subjects: Vec<(SubjectRecord, Volume3D)>,
    pub atlas: Atlas,
}

impl Cohort {
    pub fn records(&self) -> Vec<SubjectRecord> {
        self.subjects.iter().map(|(r, _)| r.clone()).collect()
    }
}

fn subject_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step so neighbouring indices get unrelated streams
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws the covariates of subject `index` of `group`.
pub fn draw_record(spec: &PhantomSpec, group: Group, index: usize, seed: u64) -> SubjectRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(seed, index) ^ 0xC0DE);
    let cov = spec.covariates(group);
    let age = Normal::new(cov.age_mean, cov.age_sd)
        .map(|d| d.sample(&mut rng))
        .unwrap_or(cov.age_mean)
        .clamp(55.0, 95.0);
    let sex = if rng.random_bool(cov.female_fraction) {
        Sex::F
    } else {
        Sex::M
    };
    let tiv_mean = match sex {
        Sex::F => spec.tiv_mean_female,
        Sex::M => spec.tiv_mean_male,
    };
    let tiv = Normal::new(tiv_mean, spec.tiv_sd)
        .map(|d| d.sample(&mut rng))
        .unwrap_or(tiv_mean)
        .max(900.0);
    let field_strength = if rng.random_bool(cov.field_3t_fraction) {
        FieldStrength::T3
    } else {
        FieldStrength::T1_5
    };
    let amyloid = Some(if rng.random_bool(cov.amyloid_pos_fraction) {
        Amyloid::Pos
    } else {
        Amyloid::Neg
    });
    let range = spec.severity_range(group);
    let lesion_severity = if range.hi > range.lo {
        rng.random_range(range.lo..=range.hi)
    } else {
        range.lo
    };
    SubjectRecord {
        id: format!("sub-{:04}", index + 1),
        group,
        age,
        sex,
        tiv,
        field_strength,
        amyloid,
        lesion_severity,
    }
}

/// Generates `counts` subjects (controls first, then MCI, then AD).
pub fn generate_cohort(spec: &PhantomSpec, counts: GroupCounts, seed: u64) -> Result<Cohort> {
    let generator = PhantomGenerator::new(spec.clone())?;
    let plan: Vec<(usize, Group)> = Group::ALL
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g, counts.get(g)))
        .enumerate()
        .collect();
    let subjects = plan
        .par_iter()
        .map(|&(index, group)| {
            let record = draw_record(spec, group, index, seed);
            let volume = generator.generate(&record, subject_seed(seed, index))?;
            Ok((record, volume))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        subjects,
        atlas: generator.atlas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            dims: Dims::new(16, 16, 20),
            ..PhantomSpec::default()
        }
    }

    fn record(group: Group, severity: f64) -> SubjectRecord {
        SubjectRecord {
            id: "s".into(),
            group,
            age: 72.0,
            sex: Sex::F,
            tiv: 1450.0,
            field_strength: FieldStrength::T3,
            amyloid: None,
            lesion_severity: severity,
        }
    }

    fn target_mean(spec: &PhantomSpec, atlas: &Atlas, v: &Volume3D) -> f64 {
        let (s, n) = atlas
            .ids()
            .iter()
            .zip(v.data())
            .filter(|(&id, _)| id == spec.target_region_id)
            .fold((0.0, 0usize), |(s, n), (_, &x)| (s + x as f64, n + 1));
        s / n as f64
    }

    #[test]
    fn atlas_has_four_regions_and_background() {
        let atlas = phantom_atlas(Dims::new(32, 32, 40), 4.5).unwrap();
        assert_eq!(atlas.present_regions(), vec![1, 2, 3, 4]);
        let hippo = atlas.mask(1).iter().filter(|&&m| m).count();
        assert!(hippo > 50, "target region has {hippo} voxels");
        assert_eq!(atlas.lookup(0, 0, 0), "background");
    }

    #[test]
    fn deterministic_without_noise() {
        let spec = PhantomSpec {
            noise_sd: 0.0,
            ..small_spec()
        };
        let r = record(Group::CN, 0.0);
        assert_eq!(
            generate_phantom(&spec, &r, 3).unwrap(),
            generate_phantom(&spec, &r, 3).unwrap()
        );
    }

    #[test]
    fn severity_lowers_only_the_target_region() {
        let spec = PhantomSpec {
            noise_sd: 0.0,
            severity_ad: SeverityRange::new(0.5, 1.0),
            ..small_spec()
        };
        let g = PhantomGenerator::new(spec.clone()).unwrap();
        let healthy = g.generate(&record(Group::AD, 0.5), 9).unwrap();
        let sick = g.generate(&record(Group::AD, 1.0), 9).unwrap();
        assert!(target_mean(&spec, g.atlas(), &sick) < target_mean(&spec, g.atlas(), &healthy));
        for ((&id, a), b) in g.atlas().ids().iter().zip(healthy.data()).zip(sick.data()) {
            if id != spec.target_region_id {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn age_difference_is_exactly_the_trend_term() {
        let spec = small_spec();
        let g = PhantomGenerator::new(spec.clone()).unwrap();
        let young = record(Group::CN, 0.0);
        let old = SubjectRecord {
            age: 82.0,
            ..young.clone()
        };
        let a = g.generate(&young, 5).unwrap();
        let b = g.generate(&old, 5).unwrap();
        for ((&id, x), y) in g.atlas().ids().iter().zip(a.data()).zip(b.data()) {
            // documented formula, evaluated by hand
            let expected = if id == 0 {
                0.0
            } else if id == 1 {
                -0.004 * 10.0 * 1.5
            } else {
                -0.004 * 10.0
            };
            assert!(
                ((y - x) as f64 - expected).abs() < 1e-5,
                "{} vs {expected}",
                y - x
            );
        }
    }

    #[test]
    fn monotone_in_severity() {
        let spec = PhantomSpec {
            severity_ad: SeverityRange::new(0.0, 1.0),
            severity_mci: SeverityRange::new(0.0, 0.5),
            ..small_spec()
        };
        let g = PhantomGenerator::new(spec.clone()).unwrap();
        let mut last = f64::INFINITY;
        for s in [0.0, 0.1, 0.3, 0.6, 0.9, 1.0] {
            let m = target_mean(
                &spec,
                g.atlas(),
                &g.generate(&record(Group::AD, s), 77).unwrap(),
            );
            assert!(m <= last);
            last = m;
        }
    }

    #[test]
    fn severity_outside_group_range_is_rejected() {
        let spec = small_spec();
        assert!(generate_phantom(&spec, &record(Group::MCI, 0.9), 1).is_err());
        assert!(generate_phantom(&spec, &record(Group::CN, 0.1), 1).is_err());
    }

    #[test]
    fn invalid_spec_ordering() {
        let spec = PhantomSpec {
            severity_mci: SeverityRange::new(0.6, 0.95),
            ..small_spec()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn cohort_counts_and_determinism() {
        let spec = small_spec();
        let c = generate_cohort(&spec, GroupCounts::new(10, 0, 0), 4).unwrap();
        assert_eq!(c.subjects.len(), 10);
        assert!(c
            .subjects
            .iter()
            .all(|(r, _)| r.group == Group::CN && r.lesion_severity == 0.0));

        let a = generate_cohort(&spec, GroupCounts::new(3, 4, 5), 11).unwrap();
        let b = generate_cohort(&spec, GroupCounts::new(3, 4, 5), 11).unwrap();
        assert_eq!(a.subjects, b.subjects);
        let groups: Vec<Group> = a.subjects.iter().map(|(r, _)| r.group).collect();
        assert_eq!(groups.iter().filter(|&&g| g == Group::MCI).count(), 4);
        for (r, _) in &a.subjects {
            let range = spec.severity_range(r.group);
            assert!(r.lesion_severity >= range.lo && r.lesion_severity <= range.hi);
        }
    }

    #[test]
    fn counts_parse() {
        let c: GroupCounts = "10, 20,30".parse().unwrap();
        assert_eq!(c, GroupCounts::new(10, 20, 30));
        assert!("1,2".parse::<GroupCounts>().is_err());
    }
}
