//! Square lattices, neighborhoods, and CAR confounder fields.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::{rng_from_seed, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjacency {
    /// Edge-sharing neighbors (up to 4).
    #[default]
    Rook,
    /// Edge- or corner-sharing neighbors (up to 8).
    Queen,
}

impl std::str::FromStr for Adjacency {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rook" => Ok(Adjacency::Rook),
            "queen" => Ok(Adjacency::Queen),
            other => config_err(format!("unknown adjacency '{other}'")),
        }
    }
}

/// An `l x l` lattice with row-major region indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub l: usize,
    pub adjacency: Adjacency,
    #[serde(default)]
    pub torus: bool,
    /// Sorted ascending; this order is the canonical neighbor order.
    pub neighbors: Vec<Vec<usize>>,
}

impl Grid {
    pub fn new(l: usize, adjacency: Adjacency) -> Result<Self> {
        Self::build(l, adjacency, false)
    }

    /// Wrap-around lattice; every region has the full neighbor count. Needs `l >= 3`
    /// so that no region is its own neighbor twice over.
    pub fn torus(l: usize, adjacency: Adjacency) -> Result<Self> {
        if l < 3 {
            return config_err(format!("torus grid needs l >= 3, got {l}"));
        }
        Self::build(l, adjacency, true)
    }

    pub fn build(l: usize, adjacency: Adjacency, torus: bool) -> Result<Self> {
        if l == 0 {
            return config_err("grid side length must be positive");
        }
        if torus && l < 3 {
            return config_err(format!("torus grid needs l >= 3, got {l}"));
        }
        let offsets: &[(i64, i64)] = match adjacency {
            Adjacency::Rook => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Adjacency::Queen => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        };
        let li = l as i64;
        let mut neighbors = Vec::with_capacity(l * l);
        for r in 0..li {
            for c in 0..li {
                let mut nb: Vec<usize> = offsets
                    .iter()
                    .filter_map(|&(dr, dc)| {
                        let (mut rr, mut cc) = (r + dr, c + dc);
                        if torus {
                            rr = rr.rem_euclid(li);
                            cc = cc.rem_euclid(li);
                        } else if rr < 0 || cc < 0 || rr >= li || cc >= li {
                            return None;
                        }
                        Some((rr * li + cc) as usize)
                    })
                    .collect();
                nb.sort_unstable();
                nb.dedup();
                neighbors.push(nb);
            }
        }
        Ok(Grid {
            l,
            adjacency,
            torus,
            neighbors,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.l * self.l
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Dense 0/1 adjacency matrix.
    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        let r = self.n_regions();
        let mut w = DMatrix::zeros(r, r);
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                w[(i, j)] = 1.0;
            }
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarConfig {
    pub rho: f64,
    pub tau2: f64,
}

impl Default for CarConfig {
    fn default() -> Self {
        CarConfig { rho: 0.9, tau2: 1.0 }
    }
}

impl CarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return config_err(format!("CAR rho must lie in [0, 1), got {}", self.rho));
        }
        if !(self.tau2 > 0.0 && self.tau2.is_finite()) {
            return config_err(format!("CAR tau2 must be positive, got {}", self.tau2));
        }
        Ok(())
    }
}

/// Precision matrix `(D_w - rho W) / tau2`. Isolated regions get unit degree
/// so the field stays proper on a single-region grid.
pub fn car_precision(grid: &Grid, cfg: &CarConfig) -> DMatrix<f64> {
    let w = grid.adjacency_matrix();
    let r = grid.n_regions();
    let mut q = -cfg.rho * w;
    for i in 0..r {
        q[(i, i)] = grid.degree(i).max(1) as f64;
    }
    q / cfg.tau2
}

/// Zero-mean Gaussian field with CAR precision, factorized once.
#[derive(Clone, Debug)]
pub struct CarSampler {
    /// Lower Cholesky factor of the precision matrix.
    chol_l: DMatrix<f64>,
}

impl CarSampler {
    pub fn new(grid: &Grid, cfg: &CarConfig) -> Result<Self> {
        cfg.validate()?;
        let q = car_precision(grid, cfg);
        match q.cholesky() {
            Some(c) => Ok(CarSampler { chol_l: c.l() }),
            None => config_err("CAR precision matrix is not positive definite"),
        }
    }

    /// `x = L^{-T} z` with `z ~ N(0, I)`, so `Cov(x) = (L L^T)^{-1}`.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let n = self.chol_l.nrows();
        let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
        let x = self
            .chol_l
            .transpose()
            .solve_upper_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        x.iter().copied().collect()
    }

    /// Log-density of `x` under the field (up to nothing: fully normalized).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let n = self.chol_l.nrows();
        let xv = DVector::from_column_slice(x);
        // x^T Q x = |L^T x|^2
        let lt_x = self.chol_l.transpose() * &xv;
        let log_det_q: f64 = 2.0 * self.chol_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_det_q - 0.5 * lt_x.norm_squared()
    }
}

pub fn car_sample(grid: &Grid, cfg: &CarConfig, seed: u64) -> Result<Vec<f64>> {
    let sampler = CarSampler::new(grid, cfg)?;
    Ok(sampler.sample(&mut rng_from_seed(seed)))
}

/// Affine min-max map into `[0, 1]`; a constant field maps to 0.5.
pub fn min_max_normalize(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
}

/// Replaces each time point's feature vector by the concatenation of the last
/// `lags` vectors (oldest first). The first `lags - 1` time points are dropped.
pub fn lag_concatenate(series: &[Vec<f64>], lags: usize) -> Result<Vec<Vec<f64>>> {
    if lags == 0 {
        return config_err("lag count must be at least 1");
    }
    if lags > series.len() {
        return config_err(format!("lag count {lags} exceeds series length {}", series.len()));
    }
    Ok(series.windows(lags).map(|w| w.concat()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_grid_examples() {
        let g = Grid::new(2, Adjacency::Rook).unwrap();
        assert_eq!(g.neighbors[0], vec![1, 2]);
        assert_eq!(g.neighbors[3], vec![1, 2]);
        assert!(Grid::new(1, Adjacency::Rook).unwrap().neighbors[0].is_empty());
        assert_eq!(Grid::new(3, Adjacency::Rook).unwrap().neighbors[4], vec![1, 3, 5, 7]);
        assert_eq!(
            Grid::new(3, Adjacency::Queen).unwrap().neighbors[4],
            vec![0, 1, 2, 3, 5, 6, 7, 8]
        );
        assert!(Grid::new(0, Adjacency::Rook).is_err());
        assert!(Grid::torus(2, Adjacency::Rook).is_err());
    }

    #[test]
    fn torus_degrees_are_uniform() {
        let g = Grid::torus(4, Adjacency::Rook).unwrap();
        assert!((0..16).all(|i| g.degree(i) == 4));
        assert_eq!(g.neighbors[0], vec![1, 3, 4, 12]);
        let q = Grid::torus(3, Adjacency::Queen).unwrap();
        assert!((0..9).all(|i| q.degree(i) == 8));
    }

    proptest! {
        #[test]
        fn grid_symmetry_and_degree_bounds(l in 1usize..=10, queen in any::<bool>()) {
            let adj = if queen { Adjacency::Queen } else { Adjacency::Rook };
            let full = if queen { 8 } else { 4 };
            let g = Grid::new(l, adj).unwrap();
            for i in 0..g.n_regions() {
                let nb = &g.neighbors[i];
                prop_assert!(!nb.contains(&i));
                prop_assert!(nb.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(nb.len() <= full);
                for &j in nb {
                    prop_assert!(g.neighbors[j].contains(&i));
                }
                let (r, c) = (i / l, i % l);
                if r > 0 && c > 0 && r + 1 < l && c + 1 < l {
                    prop_assert_eq!(nb.len(), full);
                }
            }
        }
    }

    #[test]
    fn grid_json_round_trip() {
        let g = Grid::new(3, Adjacency::Queen).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("\"adjacency\":\"queen\""));
        assert_eq!(serde_json::from_str::<Grid>(&s).unwrap(), g);
    }

    #[test]
    fn car_rejects_bad_config() {
        let g = Grid::new(3, Adjacency::Rook).unwrap();
        assert!(car_sample(&g, &CarConfig { rho: 1.0, tau2: 1.0 }, 1).is_err());
        assert!(car_sample(&g, &CarConfig { rho: 0.5, tau2: 0.0 }, 1).is_err());
    }

    #[test]
    fn car_independent_variances_at_rho_zero() {
        let g = Grid::new(3, Adjacency::Rook).unwrap();
        let cfg = CarConfig { rho: 0.0, tau2: 1.0 };
        let s = CarSampler::new(&g, &cfg).unwrap();
        let mut rng = rng_from_seed(1);
        let n = 10_000;
        let mut sq = vec![0.0; 9];
        for _ in 0..n {
            for (acc, v) in sq.iter_mut().zip(s.sample(&mut rng)) {
                *acc += v * v;
            }
        }
        for i in 0..9 {
            let want = 1.0 / g.degree(i) as f64;
            let got = sq[i] / n as f64;
            assert!((got - want).abs() < 0.05 * want, "region {i}: {got} vs {want}");
        }
    }

    #[test]
    fn car_covariance_matches_inverse_precision() {
        let g = Grid::new(3, Adjacency::Rook).unwrap();
        let cfg = CarConfig { rho: 0.5, tau2: 1.0 };
        let oracle = car_precision(&g, &cfg).try_inverse().unwrap();
        let s = CarSampler::new(&g, &cfg).unwrap();
        let mut rng = rng_from_seed(2);
        let n = 20_000;
        let mut cov = DMatrix::<f64>::zeros(9, 9);
        let mut mean = vec![0.0; 9];
        for _ in 0..n {
            let x = s.sample(&mut rng);
            for i in 0..9 {
                mean[i] += x[i];
                for j in 0..9 {
                    cov[(i, j)] += x[i] * x[j];
                }
            }
        }
        cov /= n as f64;
        for i in 0..9 {
            for j in 0..9 {
                assert!((cov[(i, j)] - oracle[(i, j)]).abs() < 0.02, "({i},{j})");
            }
            // zero mean within 3 standard errors
            let se = (oracle[(i, i)] / n as f64).sqrt();
            assert!((mean[i] / n as f64).abs() < 3.0 * se);
        }
    }

    #[test]
    fn car_determinism_and_finite_density() {
        let g = Grid::new(4, Adjacency::Queen).unwrap();
        let cfg = CarConfig::default();
        let a = car_sample(&g, &cfg, 5).unwrap();
        assert_eq!(a, car_sample(&g, &cfg, 5).unwrap());
        assert_ne!(a, car_sample(&g, &cfg, 6).unwrap());
        assert!(CarSampler::new(&g, &cfg).unwrap().log_density(&a).is_finite());
    }

    #[test]
    fn single_region_field_is_proper() {
        let g = Grid::new(1, Adjacency::Rook).unwrap();
        let x = car_sample(&g, &CarConfig::default(), 3).unwrap();
        assert_eq!(x.len(), 1);
        assert!(x[0].is_finite());
    }

    #[test]
    fn min_max_examples() {
        let mut v = vec![2.0, 4.0, 3.0];
        min_max_normalize(&mut v);
        assert_eq!(v, vec![0.0, 1.0, 0.5]);
        let mut c = vec![7.0];
        min_max_normalize(&mut c);
        assert_eq!(c, vec![0.5]);
    }

    #[test]
    fn lag_examples() {
        let s = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert_eq!(lag_concatenate(&s, 1).unwrap(), s);
        assert_eq!(lag_concatenate(&s, 2).unwrap(), vec![vec![1.0, 2.0], vec![2.0, 3.0]]);
        assert!(lag_concatenate(&s, 4).is_err());
        assert!(lag_concatenate(&s, 0).is_err());
    }
}
