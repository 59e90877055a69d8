//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use relevis_core::analyze::Connectivity;
use relevis_core::Volume3D;

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components by union-find over all neighbour pairs, as sorted
/// lists of linear indices, components ordered by first index.
pub fn components(map: &Volume3D, threshold: f64, conn: Connectivity) -> Vec<Vec<usize>> {
    let d = map.dims();
    let on: Vec<bool> = map.data().iter().map(|&v| v as f64 >= threshold).collect();
    let mut parent: Vec<usize> = (0..on.len()).collect();
    let full = conn == Connectivity::TwentySix;
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let i = d.index(x, y, z);
                if !on[i] {
                    continue;
                }
                for (dx, dy, dz) in forward_offsets(full) {
                    let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if a < 0
                        || b < 0
                        || c < 0
                        || a >= d.nx as isize
                        || b >= d.ny as isize
                        || c >= d.nz as isize
                    {
                        continue;
                    }
                    let j = d.index(a as usize, b as usize, c as usize);
                    if on[j] {
                        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                        if ri != rj {
                            parent[ri.max(rj)] = ri.min(rj);
                        }
                    }
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..on.len() {
        if on[i] {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

/// Half of the neighbourhood; the other half is covered from the
/// neighbour's side.
fn forward_offsets(full: bool) -> Vec<(isize, isize, isize)> {
    let mut v = Vec::new();
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let n = dx.abs() + dy.abs() + dz.abs();
                let lexi_pos = (dz, dy, dx) > (0, 0, 0);
                if lexi_pos && (full || n == 1) {
                    v.push((dx, dy, dz));
                }
            }
        }
    }
    v
}

/// Mann-Whitney AUC by comparing every positive/negative pair.
pub fn brute_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Best Youden J over every cut between adjacent distinct scores, with the
/// smallest such cut; higher score is positive. J is compared on exact
/// counts.
pub fn brute_youden(scores: &[f64], labels: &[usize]) -> Option<(f64, f64)> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let pos = labels.iter().filter(|&&l| l == 1).count() as i64;
    let neg = labels.len() as i64 - pos;
    let mut best: Option<(f64, i64)> = None;
    for w in distinct.windows(2) {
        let t = 0.5 * (w[0] + w[1]);
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **s > t && **l == 1)
            .count() as i64;
        let tn = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **s < t && **l == 0)
            .count() as i64;
        // J scaled by pos * neg
        let j = tp * neg + tn * pos - pos * neg;
        if best.is_none_or(|(_, bj)| j > bj) {
            best = Some((t, j));
        }
    }
    best.map(|(t, j)| (t, j as f64 / (pos * neg) as f64))
}
