use std::collections::HashMap;

use crate::error::{ensure, Result};
use crate::types::{GaussianPrimitive, GaussianScene};

/// Weighted mean of one scalar field; exact when all members agree.
fn mean_of(values: impl Iterator<Item = f64> + Clone, w: &[f64]) -> f64 {
    let mut it = values.clone();
    let first = it.next().expect("non-empty bucket");
    if it.all(|v| v == first) {
        return first;
    }
    values.zip(w).map(|(v, wi)| v * wi).sum()
}

/// Buckets Gaussians by `floor(mu / voxel_size)` and collapses each bucket
/// to its confidence-weighted mean.
///
/// Quaternions are sign-aligned to the bucket's most confident member
/// before averaging and renormalized after. Merged centres are clamped to
/// the members' range, so they stay in their voxel and a second merge is a
/// no-op. A bucket with zero total confidence is averaged uniformly. The
/// merged Gaussian keeps the most confident member's source view and the
/// bucket's total confidence.
pub fn voxel_merge(scene: &GaussianScene, voxel_size: f64) -> Result<GaussianScene> {
    ensure!(voxel_size > 0.0 && voxel_size.is_finite(), "voxel_size must be positive, got {voxel_size}");
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        let key = g.mu.map(|c| (c / voxel_size).floor() as i64);
        let b = *index.entry(key).or_insert_with(|| {
            buckets.push(Vec::new());
            buckets.len() - 1
        });
        buckets[b].push(i);
    }
    let mut out = GaussianScene::new(scene.sh_degree);
    for members in buckets {
        if members.len() == 1 {
            let i = members[0];
            out.push(scene.gaussians[i].clone(), scene.source_view[i], scene.confidence[i]);
            continue;
        }
        let conf: Vec<f64> = members.iter().map(|&i| scene.confidence[i]).collect();
        let total: f64 = conf.iter().sum();
        let w: Vec<f64> = if total > 0.0 {
            conf.iter().map(|c| c / total).collect()
        } else {
            vec![1.0 / members.len() as f64; members.len()]
        };
        let best = members
            .iter()
            .copied()
            .enumerate()
            .fold(0, |b, (k, _)| if conf[k] > conf[b] { k } else { b });
        let gs: Vec<&GaussianPrimitive> = members.iter().map(|&i| &scene.gaussians[i]).collect();

        let mu = std::array::from_fn(|a| {
            let m = mean_of(gs.iter().map(|g| g.mu[a]), &w);
            let lo = gs.iter().map(|g| g.mu[a]).fold(f64::INFINITY, f64::min);
            let hi = gs.iter().map(|g| g.mu[a]).fold(f64::NEG_INFINITY, f64::max);
            m.clamp(lo, hi)
        });
        let scale = std::array::from_fn(|a| mean_of(gs.iter().map(|g| g.scale[a]), &w));
        let opacity = mean_of(gs.iter().map(|g| g.opacity), &w).clamp(0.0, 1.0);
        let k = gs[0].sh_coeffs.len();
        let sh_coeffs = (0..k)
            .map(|j| std::array::from_fn(|c| mean_of(gs.iter().map(|g| g.sh_coeffs[j][c]), &w)))
            .collect();

        let r = gs[best].rot;
        let aligned: Vec<[f64; 4]> = gs
            .iter()
            .map(|g| {
                let d: f64 = (0..4).map(|a| g.rot[a] * r[a]).sum();
                if d < 0.0 {
                    g.rot.map(|v| -v)
                } else {
                    g.rot
                }
            })
            .collect();
        let rot = if aligned.iter().all(|q| *q == aligned[0]) {
            aligned[0]
        } else {
            let q: [f64; 4] = std::array::from_fn(|a| aligned.iter().zip(&w).map(|(q, wi)| q[a] * wi).sum());
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                q.map(|v| v / n)
            } else {
                r
            }
        };
        out.push(
            GaussianPrimitive { mu, rot, scale, opacity, sh_coeffs },
            scene.source_view[members[best]],
            total,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mu: [f64; 3]) -> GaussianPrimitive {
        GaussianPrimitive::isotropic(mu, 0.1, 0.5, [0.2, 0.4, 0.6])
    }

    #[test]
    fn confidence_weighted_centre() {
        let mut s = GaussianScene::new(0);
        s.push(g([0.0, 0.0, 0.0]), 0, 1.0);
        s.push(g([1.0, 0.0, 0.0]), 1, 3.0);
        let m = voxel_merge(&s, 2.0).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.gaussians[0].mu, [0.75, 0.0, 0.0]);
        assert_eq!(m.source_view, vec![1]);
        assert_eq!(m.confidence, vec![4.0]);
    }

    #[test]
    fn zero_confidence_falls_back_to_uniform() {
        let mut s = GaussianScene::new(0);
        s.push(g([0.0, 0.0, 0.0]), 0, 0.0);
        s.push(g([1.0, 0.0, 0.0]), 0, 0.0);
        assert_eq!(voxel_merge(&s, 2.0).unwrap().gaussians[0].mu, [0.5, 0.0, 0.0]);
    }

    #[test]
    fn rejects_non_positive_voxel() {
        assert!(voxel_merge(&GaussianScene::new(0), 0.0).is_err());
    }
}
