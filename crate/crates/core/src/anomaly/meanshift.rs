use serde::{Deserialize, Serialize};

use super::{AnomalyError, Result};

const MAX_ITERS: usize = 300;
const MINORITY_FRACTION: f64 = 0.2;
const DISTANCE_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub center: [f64; 2],
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftResult {
    pub clusters: Vec<Cluster>,
    /// Index of the most populated cluster.
    pub largest: usize,
    pub minority_flag: bool,
    /// Distance of the farthest flagged cluster, in units of 3·bandwidth.
    pub score: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Flat-kernel mean shift. A cluster holding under 20% of the points whose
/// center lies at least 3·bandwidth from the largest cluster raises the flag.
pub fn meanshift_outlier(points: &[[f64; 2]], bandwidth: f64) -> Result<MeanShiftResult> {
    if points.len() < 2 {
        return Err(AnomalyError::TooFewPoints(points.len()));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(AnomalyError::BadParameter(format!("bandwidth {bandwidth}")));
    }
    let tol = 1e-4 * bandwidth;
    let modes: Vec<[f64; 2]> = points
        .iter()
        .map(|&start| {
            let mut x = start;
            for _ in 0..MAX_ITERS {
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
                for p in points {
                    if dist(*p, x) <= bandwidth {
                        sx += p[0];
                        sy += p[1];
                        n += 1;
                    }
                }
                if n == 0 {
                    break;
                }
                let next = [sx / n as f64, sy / n as f64];
                let moved = dist(next, x);
                x = next;
                if moved < tol {
                    break;
                }
            }
            x
        })
        .collect();

    let mut clusters: Vec<Cluster> = Vec::new();
    for (i, m) in modes.iter().enumerate() {
        match clusters.iter_mut().find(|c| dist(c.center, *m) <= bandwidth / 2.0) {
            Some(c) => c.members.push(i),
            None => clusters.push(Cluster {
                center: *m,
                members: vec![i],
            }),
        }
    }
    for c in clusters.iter_mut() {
        let k = c.members.len() as f64;
        c.center = [
            c.members.iter().map(|&i| modes[i][0]).sum::<f64>() / k,
            c.members.iter().map(|&i| modes[i][1]).sum::<f64>() / k,
        ];
    }
    let mut largest = 0;
    for (i, c) in clusters.iter().enumerate() {
        if c.members.len() > clusters[largest].members.len() {
            largest = i;
        }
    }
    let n = points.len() as f64;
    let reach = DISTANCE_FACTOR * bandwidth;
    let mut score = 0.0f64;
    for (i, c) in clusters.iter().enumerate() {
        if i == largest {
            continue;
        }
        let d = dist(c.center, clusters[largest].center);
        if (c.members.len() as f64) < MINORITY_FRACTION * n && d >= reach {
            score = score.max(d / reach);
        }
    }
    Ok(MeanShiftResult {
        clusters,
        largest,
        minority_flag: score > 0.0,
        score,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    fn blob(rng: &mut ChaCha8Rng, c: [f64; 2], sd: f64, n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                [c[0] + sd * a, c[1] + sd * b]
            })
            .collect()
    }

    #[test]
    fn single_blob_is_not_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = meanshift_outlier(&blob(&mut rng, [0.5, 0.5], 0.05, 40), 0.15).unwrap();
        assert!(!r.minority_flag);
        assert_eq!(r.clusters[r.largest].members.len(), 40);
    }

    #[test]
    fn distant_minority_cluster_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts = blob(&mut rng, [0.5, 0.5], 0.05, 40);
        pts.extend(blob(&mut rng, [0.95, 0.05], 0.01, 5));
        let r = meanshift_outlier(&pts, 0.15).unwrap();
        assert_eq!(r.clusters.len(), 2);
        assert!(r.minority_flag && r.score >= 1.0);
    }

    #[test]
    fn equal_clusters_are_not_a_minority() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = blob(&mut rng, [0.2, 0.2], 0.02, 20);
        pts.extend(blob(&mut rng, [0.8, 0.8], 0.02, 20));
        let r = meanshift_outlier(&pts, 0.1).unwrap();
        assert_eq!(r.clusters.len(), 2);
        assert!(!r.minority_flag);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let r = meanshift_outlier(&[[0.3, 0.3]; 6], 0.1).unwrap();
        assert_eq!(r.clusters.len(), 1);
        assert!(!r.minority_flag);
        assert!(matches!(meanshift_outlier(&[[0.0, 0.0]], 0.1), Err(AnomalyError::TooFewPoints(1))));
    }
}
