//! Synthetic clustered datasets with known generating centers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::objective::{Dataset, GroundTruth};
use crate::sampling::master_rng;

/// Rejection attempts allowed per center before giving up.
pub const PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Dimension.
    pub n: usize,
    /// Number of samples.
    pub m: usize,
    /// Number of clusters.
    pub k: usize,
    pub min_center_dist: f64,
    /// Standard deviation of the isotropic noise around each center.
    pub cluster_sigma: f64,
    /// Centers are drawn uniformly from `[-box_half_width, box_half_width]^n`.
    pub box_half_width: f64,
    pub seed: u64,
    /// Optional per-cluster deviations overriding `cluster_sigma`.
    pub cluster_sigmas: Option<Vec<f64>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 10,
            m: 10_000,
            k: 10,
            min_center_dist: 5.0,
            cluster_sigma: 1.0,
            box_half_width: 10.0,
            seed: 0,
            cluster_sigmas: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n", self.n), ("m", self.m), ("k", self.k)] {
            if v == 0 {
                return Err(Error::invalid(name, "must be >= 1"));
            }
        }
        if !(self.min_center_dist >= 0.0) {
            return Err(Error::invalid("min_center_dist", "must be >= 0"));
        }
        if !(self.cluster_sigma > 0.0) {
            return Err(Error::invalid("cluster_sigma", "must be > 0"));
        }
        if !(self.box_half_width > 0.0) {
            return Err(Error::invalid("box", "must be > 0"));
        }
        if let Some(s) = &self.cluster_sigmas {
            if s.len() != self.k {
                return Err(Error::invalid(
                    "cluster_sigmas",
                    format!("{} values for {} clusters", s.len(), self.k),
                ));
            }
            if s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::invalid("cluster_sigmas", "every value must be > 0"));
            }
        }
        Ok(())
    }

    fn sigma(&self, cluster: usize) -> f64 {
        self.cluster_sigmas
            .as_ref()
            .map_or(self.cluster_sigma, |s| s[cluster])
    }
}

/// Samples `k` separated centers, then `m` points around uniformly chosen centers.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = master_rng(spec.seed);
    let n = spec.n;
    let min_sq = spec.min_center_dist * spec.min_center_dist;
    let mut centers: Vec<f64> = Vec::with_capacity(spec.k * n);
    let mut candidate = vec![0.0; n];
    for placed in 0..spec.k {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            for c in candidate.iter_mut() {
                *c = rng.random_range(-spec.box_half_width..=spec.box_half_width);
            }
            ok = centers
                .chunks_exact(n)
                .take(placed)
                .all(|c| crate::model::sq_dist(c, &candidate) >= min_sq);
            if ok {
                break;
            }
        }
        if !ok {
            return Err(Error::Placement {
                k: spec.k,
                n,
                min_dist: spec.min_center_dist,
                half_width: spec.box_half_width,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
        centers.extend_from_slice(&candidate);
    }

    let mut points = Vec::with_capacity(spec.m * n);
    for _ in 0..spec.m {
        let c = rng.random_range(0..spec.k);
        let sigma = spec.sigma(c);
        for j in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            points.push(centers[c * n + j] + sigma * z);
        }
    }
    let truth = GroundTruth::new(ModelState::new(spec.k, n, centers)?);
    Ok((Dataset::new(spec.m, n, points)?, truth))
}
