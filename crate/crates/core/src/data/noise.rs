use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::cloud::PointCloud;
use crate::error::{Error, Result};

fn normal(sigma: f64) -> Result<Normal<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Input(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    Normal::new(0.0, sigma).map_err(|e| Error::Input(e.to_string()))
}

/// Adds i.i.d. `N(0, sigma)` noise to every coordinate. Labels, part labels
/// and normals are kept.
pub fn perturb_gaussian(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    let dist = normal(sigma)?;
    let mut out = cloud.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut out.points {
        for v in p.iter_mut() {
            *v += dist.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Replaces `count` distinct, randomly chosen points by draws from
/// `N(0, sigma)` per coordinate. Their part labels become unknown.
pub fn add_outliers(cloud: &PointCloud, count: usize, sigma: f64, seed: u64) -> Result<PointCloud> {
    let dist = normal(sigma)?;
    let n = cloud.len();
    if count > n {
        return Err(Error::Input(format!("cannot replace {count} of {n} points")));
    }
    let mut out = cloud.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        out.points[i] = [dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng)];
        if let Some(parts) = &mut out.part_labels {
            parts[i] = None;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shapes::{generate_shape, ShapeKind};

    #[test]
    fn zero_sigma_is_identity() {
        let c = generate_shape(ShapeKind::Sphere, 64, 0).unwrap();
        assert_eq!(perturb_gaussian(&c, 0.0, 1).unwrap(), c);
        assert_eq!(add_outliers(&c, 0, 0.2, 1).unwrap(), c);
    }

    #[test]
    fn empirical_std_matches_sigma() {
        let c = generate_shape(ShapeKind::Plane, 2048, 0).unwrap();
        let p = perturb_gaussian(&c, 0.2, 42).unwrap();
        let diffs: Vec<f64> = c
            .points
            .iter()
            .zip(&p.points)
            .flat_map(|(a, b)| (0..3).map(move |k| b[k] - a[k]))
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.2).abs() < 0.02, "std {std}");
    }

    #[test]
    fn outliers_replace_exactly_count_points() {
        let c = generate_shape(ShapeKind::Cube, 2048, 0).unwrap();
        let o = add_outliers(&c, 100, 0.2, 3).unwrap();
        let changed = c.points.iter().zip(&o.points).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 100);
        let unknown = o.part_labels.unwrap().iter().filter(|p| p.is_none()).count();
        assert_eq!(unknown, 100);
        assert_eq!(o.label, c.label);
    }

    #[test]
    fn invalid_arguments() {
        let c = generate_shape(ShapeKind::Cube, 32, 0).unwrap();
        assert!(matches!(perturb_gaussian(&c, -0.1, 0), Err(Error::Input(_))));
        assert!(matches!(add_outliers(&c, 33, 0.2, 0), Err(Error::Input(_))));
    }
}
