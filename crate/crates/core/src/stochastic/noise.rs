use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::TimeGrid;
use crate::error::{Error, Result};

/// Which family of random numbers a stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    Common = 0,
    Idiosyncratic = 1,
    Initial = 2,
    Auxiliary = 3,
}

const WORLD_BITS: u32 = 30;
const PATH_BITS: u32 = 32;

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, role, world, path)`. Draws inside the
/// stream are consumed in step order, so a `(path, step)` pair always maps to
/// the same variates no matter how many other paths exist.
pub fn stream_rng(seed: u64, role: StreamRole, world: u64, path: u64) -> ChaCha8Rng {
    assert!(world < (1 << WORLD_BITS), "world index out of range");
    assert!(path < (1 << PATH_BITS), "path index out of range");
    let mut key = [0u8; 32];
    let mut sm = seed;
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut sm).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(((role as u64) << (WORLD_BITS + PATH_BITS)) | (world << PATH_BITS) | path);
    rng
}

/// Initial law of the state. Only a point mass or a Gaussian is supported.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Point(Vec<f64>),
    Gaussian {
        mean: Vec<f64>,
        /// Row-major `n x n` covariance.
        cov: Vec<f64>,
    },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point(x) => x.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InitialLaw::Point(x) => {
                if x.is_empty() || x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("initial point mass must be a finite non-empty vector".into()));
                }
            }
            InitialLaw::Gaussian { mean, cov } => {
                let n = mean.len();
                if n == 0 || cov.len() != n * n {
                    return Err(Error::Config(format!(
                        "initial covariance must be {n}x{n} (got {} entries)",
                        cov.len()
                    )));
                }
                self.cov_root()?;
            }
        }
        Ok(())
    }

    /// Symmetric square root of the covariance (row-major), allowing
    /// semidefinite matrices.
    fn cov_root(&self) -> Result<Vec<f64>> {
        let InitialLaw::Gaussian { mean, cov } = self else {
            return Ok(Vec::new());
        };
        let n = mean.len();
        let m = DMatrix::from_row_slice(n, n, cov);
        if (&m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
            return Err(Error::Config("initial covariance must be symmetric".into()));
        }
        let eig = SymmetricEigen::new(m);
        if eig.eigenvalues.iter().any(|&l| l < -1e-12) {
            return Err(Error::Config("initial covariance must be positive semidefinite".into()));
        }
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt) * eig.eigenvectors.transpose();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(root[(i, j)]);
            }
        }
        Ok(out)
    }

    /// Draws the initial state of one path into `out`.
    fn sample_into(&self, root: &[f64], rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            InitialLaw::Point(x) => out.copy_from_slice(x),
            InitialLaw::Gaussian { mean, .. } => {
                let n = mean.len();
                let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                for i in 0..n {
                    out[i] = mean[i] + (0..n).map(|j| root[i * n + j] * z[j]).sum::<f64>();
                }
            }
        }
    }
}

/// Common-noise path, idiosyncratic increments and initial states of one
/// world (one realisation of the common noise).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    grid: TimeGrid,
    noise_dim: usize,
    state_dim: usize,
    paths: usize,
    seed: u64,
    world: u64,
    common: Vec<f64>,
    idio: Vec<f64>,
    initial: Vec<f64>,
}

impl NoiseBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn paths(&self) -> usize {
        self.paths
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn world(&self) -> u64 {
        self.world
    }

    /// Common increment `ΔW⁰_k` (length `d`).
    pub fn common(&self, k: usize) -> &[f64] {
        let d = self.noise_dim;
        &self.common[k * d..(k + 1) * d]
    }

    /// Whole common path, `K x d` row-major.
    pub fn common_path(&self) -> &[f64] {
        &self.common
    }

    /// Idiosyncratic increment `ΔW^p_k` (length `d`).
    pub fn idio(&self, path: usize, k: usize) -> &[f64] {
        let d = self.noise_dim;
        let base = (path * self.grid.steps() + k) * d;
        &self.idio[base..base + d]
    }

    /// All increments of one path, `K x d` row-major.
    pub fn idio_path(&self, path: usize) -> &[f64] {
        let len = self.grid.steps() * self.noise_dim;
        &self.idio[path * len..(path + 1) * len]
    }

    pub fn initial(&self, path: usize) -> &[f64] {
        let n = self.state_dim;
        &self.initial[path * n..(path + 1) * n]
    }

    /// Reorders paths: path `p` of the result is path `order[p]` of `self`.
    pub fn permute_paths(&self, order: &[usize]) -> Result<NoiseBundle> {
        if order.len() != self.paths {
            return Err(Error::Config("permutation length must equal the path count".into()));
        }
        let mut seen = vec![false; self.paths];
        for &p in order {
            if p >= self.paths || seen[p] {
                return Err(Error::Config("not a permutation".into()));
            }
            seen[p] = true;
        }
        let mut out = self.clone();
        out.idio.clear();
        out.initial.clear();
        for &p in order {
            out.idio.extend_from_slice(self.idio_path(p));
            out.initial.extend_from_slice(self.initial(p));
        }
        Ok(out)
    }
}

/// World 0 of [`sample_world`].
pub fn sample_noise(grid: TimeGrid, paths: usize, d: usize, mu0: &InitialLaw, seed: u64) -> Result<NoiseBundle> {
    sample_world(grid, paths, d, mu0, seed, 0)
}

/// Samples one world. Common, idiosyncratic and initial draws come from
/// disjoint streams keyed by `(seed, role, world, path)`.
pub fn sample_world(
    grid: TimeGrid,
    paths: usize,
    d: usize,
    mu0: &InitialLaw,
    seed: u64,
    world: u64,
) -> Result<NoiseBundle> {
    if paths == 0 {
        return Err(Error::Config("path count must be ≥ 1".into()));
    }
    if d == 0 {
        return Err(Error::Config("noise dimension must be ≥ 1".into()));
    }
    mu0.validate()?;
    let root = mu0.cov_root()?;
    let steps = grid.steps();
    let sd = grid.dt().sqrt();
    let n = mu0.dim();

    let mut rng = stream_rng(seed, StreamRole::Common, world, 0);
    let common: Vec<f64> = (0..steps * d)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut idio = Vec::with_capacity(paths * steps * d);
    let mut initial = vec![0.0; paths * n];
    for p in 0..paths {
        let mut rng = stream_rng(seed, StreamRole::Idiosyncratic, world, p as u64);
        idio.extend((0..steps * d).map(|_| sd * rng.sample::<f64, _>(StandardNormal)));
        let mut rng = stream_rng(seed, StreamRole::Initial, world, p as u64);
        mu0.sample_into(&root, &mut rng, &mut initial[p * n..(p + 1) * n]);
    }

    Ok(NoiseBundle {
        grid,
        noise_dim: d,
        state_dim: n,
        paths,
        seed,
        world,
        common,
        idio,
        initial,
    })
}

/// Worlds `first_world..first_world + worlds` of [`sample_world`].
pub fn sample_worlds(
    grid: TimeGrid,
    worlds: usize,
    paths: usize,
    d: usize,
    mu0: &InitialLaw,
    seed: u64,
    first_world: u64,
) -> Result<Vec<NoiseBundle>> {
    (0..worlds as u64)
        .map(|w| sample_world(grid, paths, d, mu0, seed, first_world + w))
        .collect()
}

/// Keeps the first `n_players` idiosyncratic streams and initial states; the
/// common path is shared verbatim.
pub fn restrict_players(bundle: &NoiseBundle, n_players: usize) -> Result<NoiseBundle> {
    if n_players > bundle.paths {
        return Err(Error::Index {
            what: "restrict_players: requested players exceed available paths",
            index: n_players,
            limit: bundle.paths,
        });
    }
    if n_players == 0 {
        return Err(Error::Config("player count must be ≥ 1".into()));
    }
    let len = bundle.grid.steps() * bundle.noise_dim;
    Ok(NoiseBundle {
        paths: n_players,
        idio: bundle.idio[..n_players * len].to_vec(),
        initial: bundle.initial[..n_players * bundle.state_dim].to_vec(),
        ..bundle.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss() -> InitialLaw {
        InitialLaw::Gaussian {
            mean: vec![0.5],
            cov: vec![1.0],
        }
    }

    #[test]
    fn same_seed_same_bundle() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let a = sample_noise(g, 5, 2, &gauss(), 11).unwrap();
        let b = sample_noise(g, 5, 2, &gauss(), 11).unwrap();
        assert_eq!(a, b);
        let c = sample_noise(g, 5, 2, &gauss(), 12).unwrap();
        assert!(a.common_path() != c.common_path());
        assert!(a.idio_path(0) != c.idio_path(0));
    }

    #[test]
    fn adding_paths_keeps_existing_streams() {
        let g = TimeGrid::new(1.0, 6).unwrap();
        let small = sample_noise(g, 3, 1, &gauss(), 5).unwrap();
        let large = sample_noise(g, 40, 1, &gauss(), 5).unwrap();
        assert_eq!(small.common_path(), large.common_path());
        for p in 0..3 {
            assert_eq!(small.idio_path(p), large.idio_path(p));
            assert_eq!(small.initial(p), large.initial(p));
        }
        assert_eq!(restrict_players(&large, 3).unwrap(), small);
    }

    #[test]
    fn restriction_rules() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let b = sample_noise(g, 10, 1, &gauss(), 1).unwrap();
        assert_eq!(restrict_players(&b, 10).unwrap(), b);
        assert_eq!(restrict_players(&b, 1).unwrap().common_path(), b.common_path());
        assert_eq!(
            restrict_players(&restrict_players(&b, 8).unwrap(), 4).unwrap(),
            restrict_players(&b, 4).unwrap()
        );
        assert!(matches!(restrict_players(&b, 11), Err(Error::Index { .. })));
    }

    #[test]
    fn worlds_have_distinct_common_paths() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let a = sample_world(g, 2, 1, &gauss(), 1, 0).unwrap();
        let b = sample_world(g, 2, 1, &gauss(), 1, 1).unwrap();
        assert!(a.common_path() != b.common_path());
    }

    #[test]
    fn point_mass_initial_states() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let b = sample_noise(g, 3, 1, &InitialLaw::Point(vec![2.0, -1.0]), 0).unwrap();
        for p in 0..3 {
            assert_eq!(b.initial(p), &[2.0, -1.0]);
        }
    }

    #[test]
    fn indefinite_covariance_rejected() {
        let law = InitialLaw::Gaussian {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 2.0, 2.0, 1.0],
        };
        assert!(law.validate().is_err());
    }

    #[test]
    fn permutation_moves_streams() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        let b = sample_noise(g, 3, 1, &gauss(), 9).unwrap();
        let p = b.permute_paths(&[2, 0, 1]).unwrap();
        assert_eq!(p.idio_path(0), b.idio_path(2));
        assert_eq!(p.initial(1), b.initial(0));
        assert!(b.permute_paths(&[0, 0, 1]).is_err());
    }
}
