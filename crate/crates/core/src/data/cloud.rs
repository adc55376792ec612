use crate::error::{Error, Result};

/// A labelled point set with optional normals and per-point part labels.
///
/// A part label of `None` marks a point whose part is unknown, such as an
/// injected outlier.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub normals: Option<Vec<[f64; 3]>>,
    pub label: usize,
    pub part_labels: Option<Vec<Option<usize>>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, label: usize) -> Self {
        PointCloud {
            points,
            normals: None,
            label,
            part_labels: None,
        }
    }

    pub fn with_normals(mut self, normals: Vec<[f64; 3]>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(Error::Input(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_parts(mut self, parts: Vec<Option<usize>>) -> Result<Self> {
        if parts.len() != self.points.len() {
            return Err(Error::Input(format!(
                "{} part labels for {} points",
                parts.len(),
                self.points.len()
            )));
        }
        self.part_labels = Some(parts);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len().max(1) as f64;
        c.map(|v| v / n)
    }

    /// Largest distance from the origin.
    pub fn radius(&self) -> f64 {
        self.points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Centres on the centroid, then scales so the farthest point lies on
    /// the unit sphere. A cloud of identical points is only centred.
    pub fn normalize(&mut self) {
        let c = self.centroid();
        for p in &mut self.points {
            for k in 0..3 {
                p[k] -= c[k];
            }
        }
        let r = self.radius();
        if r > 0.0 {
            for p in &mut self.points {
                for v in p.iter_mut() {
                    *v /= r;
                }
            }
        }
    }

    pub fn normalized(mut self) -> Self {
        self.normalize();
        self
    }

    /// Checks lengths, finiteness and unit normals.
    pub fn validate(&self) -> Result<()> {
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("point cloud has non-finite coordinates".into()));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.points.len() {
                return Err(Error::Input("normal count differs from point count".into()));
            }
            for n in normals {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if (len - 1.0).abs() > 1e-6 {
                    return Err(Error::Input(format!("normal {n:?} is not unit length")));
                }
            }
        }
        if let Some(parts) = &self.part_labels {
            if parts.len() != self.points.len() {
                return Err(Error::Input("part label count differs from point count".into()));
            }
        }
        Ok(())
    }

    /// `[x y z]` or `[x y z nx ny nz]` rows, flattened.
    pub fn features(&self, channels: usize) -> Result<Vec<f64>> {
        match channels {
            3 => Ok(self.points.iter().flatten().copied().collect()),
            6 => {
                let normals = self
                    .normals
                    .as_ref()
                    .ok_or_else(|| Error::Input("six input channels need normals".into()))?;
                Ok(self
                    .points
                    .iter()
                    .zip(normals)
                    .flat_map(|(p, n)| p.iter().chain(n).copied())
                    .collect())
            }
            c => Err(Error::Config(format!("unsupported channel count {c}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_centres_and_scales() {
        let mut c = PointCloud::new(vec![[1.0, 1.0, 1.0], [3.0, 1.0, 1.0], [2.0, 4.0, 1.0]], 0);
        c.normalize();
        let m = c.centroid();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        assert!((c.radius() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_stay_finite() {
        let c = PointCloud::new(vec![[0.5, 0.5, 0.5]; 8], 1).normalized();
        assert!(c.points.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn length_mismatches_are_input_errors() {
        let c = PointCloud::new(vec![[0.0; 3]; 3], 0);
        assert!(c.clone().with_normals(vec![[0.0, 0.0, 1.0]; 2]).is_err());
        assert!(c.with_parts(vec![Some(0); 4]).is_err());
    }

    #[test]
    fn features_need_normals_for_six_channels() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]], 0);
        assert_eq!(c.features(3).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(c.features(6).is_err());
        let c = c.with_normals(vec![[0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(c.features(6).unwrap(), vec![1.0, 2.0, 3.0, 0.0, 0.0, 1.0]);
    }
}
