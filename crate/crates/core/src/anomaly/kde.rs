use super::{AnomalyError, Result};

const GRID: usize = 256;
const FLOOR: f64 = 1e-10;

/// Gaussian KDE of `xs` evaluated on `grid`, normalized to a discrete
/// distribution with a small floor so the divergence stays finite.
fn kde_on_grid(xs: &[f64], grid: &[f64], bandwidth: f64) -> Vec<f64> {
    let mut p: Vec<f64> = grid
        .iter()
        .map(|g| {
            xs.iter()
                .map(|x| {
                    let z = (g - x) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    let s: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v = *v / s + FLOOR;
    }
    let s: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= s;
    }
    p
}

/// Jeffreys divergence KL(p||q) + KL(q||p).
fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a / b).ln()).sum()
}

/// Divergence between the windows before and after index `i`.
pub fn kde_kl_score(series: &[f64], i: usize, window: usize, bandwidth: f64) -> f64 {
    let before = &series[i - window..i];
    let after = &series[i..i + window];
    let (lo, hi) = before
        .iter()
        .chain(after)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let lo = lo - 3.0 * bandwidth;
    let hi = hi + 3.0 * bandwidth;
    let step = (hi - lo) / (GRID - 1) as f64;
    let grid: Vec<f64> = (0..GRID).map(|k| lo + step * k as f64).collect();
    let p = kde_on_grid(before, &grid, bandwidth);
    let q = kde_on_grid(after, &grid, bandwidth);
    symmetric_kl(&p, &q)
}

/// Scores for every candidate index `window..=len-window`.
pub fn kde_kl_scores(series: &[f64], window: usize, bandwidth: f64) -> Result<Vec<(usize, f64)>> {
    if window == 0 || series.len() < 2 * window {
        return Err(AnomalyError::SeriesTooShort {
            len: series.len(),
            window,
        });
    }
    if !(bandwidth > 0.0) {
        return Err(AnomalyError::BadParameter(format!("bandwidth {bandwidth}")));
    }
    if series.iter().any(|x| !x.is_finite()) {
        return Err(AnomalyError::BadParameter("series has non-finite values".into()));
    }
    Ok((window..=series.len() - window)
        .map(|i| (i, kde_kl_score(series, i, window, bandwidth)))
        .collect())
}

/// Change points whose score exceeds `threshold`, keeping only the
/// strongest index within any one window.
pub fn kde_kl_changepoint(series: &[f64], window: usize, bandwidth: f64, threshold: f64) -> Result<Vec<(usize, f64)>> {
    let scores = kde_kl_scores(series, window, bandwidth)?;
    let mut cands: Vec<(usize, f64)> = scores.into_iter().filter(|&(_, s)| s > threshold).collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(usize, f64)> = Vec::new();
    for (i, s) in cands {
        if kept.iter().all(|&(j, _)| i.abs_diff(j) >= window) {
            kept.push((i, s));
        }
    }
    kept.sort_by_key(|&(i, _)| i);
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    #[test]
    fn constant_series_has_no_change() {
        let s = vec![3.0; 80];
        assert!(kde_kl_changepoint(&s, 20, 0.5, 1e-9).unwrap().is_empty());
        assert!(kde_kl_scores(&s, 20, 0.5).unwrap().iter().all(|&(_, v)| v.abs() < 1e-12));
    }

    #[test]
    fn step_is_found_at_the_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..100)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                (if i < 50 { 0.0 } else { 5.0 }) + 0.1 * z
            })
            .collect();
        let cps = kde_kl_changepoint(&s, 20, 0.1, 1.0).unwrap();
        assert_eq!(cps.len(), 1);
        assert!(cps[0].0.abs_diff(50) <= 1, "{cps:?}");
    }

    #[test]
    fn reversal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let r: Vec<f64> = s.iter().rev().copied().collect();
        let fwd = kde_kl_scores(&s, 15, 0.3).unwrap();
        let back = kde_kl_scores(&r, 15, 0.3).unwrap();
        for &(i, v) in &fwd {
            let (_, w) = back.iter().find(|(j, _)| *j == s.len() - i).unwrap();
            assert!((v - w).abs() < 1e-9);
        }
    }

    #[test]
    fn short_series_is_rejected() {
        assert!(matches!(
            kde_kl_changepoint(&[1.0; 10], 6, 1.0, 0.1),
            Err(AnomalyError::SeriesTooShort { len: 10, window: 6 })
        ));
    }
}
