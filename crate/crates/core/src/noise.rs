//! Finite-mode Q-Wiener increments with counter-addressed random streams.
//!
//! Draw `(path, step, mode)` always comes from ChaCha stream `path` at word
//! offset `4 (step m + mode)`, so ensembles are reproducible independently of
//! how paths are scheduled across threads.

use std::io::{Read, Write};

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

const MAGIC: &[u8; 8] = b"FBSEENS1";

/// Diagonal covariance of the driving noise and the stream key.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    eigenvalues: Vec<f64>,
    seed: u64,
}

impl NoiseSpec {
    pub fn new(eigenvalues: Vec<f64>, seed: u64) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::domain("NoiseSpec", "at least one mode is required"));
        }
        if let Some(bad) = eigenvalues.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
            return Err(Error::domain("NoiseSpec", format!("eigenvalue {bad} must be finite and >= 0")));
        }
        Ok(Self { eigenvalues, seed })
    }

    pub fn modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Path-major storage of one vector per (path, node).
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessArray {
    n_paths: usize,
    n_nodes: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProcessArray {
    pub fn zeros(n_paths: usize, n_nodes: usize, width: usize) -> Self {
        Self { n_paths, n_nodes, width, data: vec![0.0; n_paths * n_nodes * width] }
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn offset(&self, path: usize, node: usize) -> usize {
        debug_assert!(path < self.n_paths && node < self.n_nodes);
        (path * self.n_nodes + node) * self.width
    }

    pub fn get(&self, path: usize, node: usize) -> &[f64] {
        let o = self.offset(path, node);
        &self.data[o..o + self.width]
    }

    pub fn get_mut(&mut self, path: usize, node: usize) -> &mut [f64] {
        let o = self.offset(path, node);
        &mut self.data[o..o + self.width]
    }

    /// All nodes of one path, concatenated.
    pub fn path(&self, path: usize) -> &[f64] {
        let len = self.n_nodes * self.width;
        &self.data[path * len..(path + 1) * len]
    }

    pub fn paths_mut(&mut self) -> impl IndexedParallelIterator<Item = &mut [f64]> {
        let len = (self.n_nodes * self.width).max(1);
        self.data.par_chunks_mut(len)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Mean over paths at one node.
    pub fn mean_at(&self, node: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.width];
        for p in 0..self.n_paths {
            for (a, v) in acc.iter_mut().zip(self.get(p, node)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= self.n_paths as f64);
        acc
    }
}

/// Brownian increments `ΔB^k = √λ_k Δβ_k` for every path and step.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    spec: NoiseSpec,
    increments: ProcessArray,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn n_paths(&self) -> usize {
        self.increments.n_paths
    }

    pub fn modes(&self) -> usize {
        self.spec.modes()
    }

    /// Increment over `[t_step, t_{step+1}]`.
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        self.increments.get(path, step)
    }

    pub fn increments(&self) -> &ProcessArray {
        &self.increments
    }

    /// Running values `B(t_i)` on every node, `B(0) = 0`.
    pub fn brownian_values(&self) -> ProcessArray {
        let (n, m) = (self.grid.n_steps(), self.modes());
        let mut out = ProcessArray::zeros(self.n_paths(), n + 1, m);
        out.paths_mut().enumerate().for_each(|(p, row)| {
            for i in 0..n {
                let dw = self.increment(p, i);
                for k in 0..m {
                    row[(i + 1) * m + k] = row[i * m + k] + dw[k];
                }
            }
        });
        out
    }

    /// Rebuilds the ensemble with the increments of each path replaced by
    /// those of `source[path]` on steps `>= from_step`.
    pub fn with_future_from(&self, from_step: usize, source: &[usize]) -> Self {
        let mut out = self.clone();
        let m = self.modes();
        for (p, &src) in source.iter().enumerate() {
            for i in from_step..self.grid.n_steps() {
                out.increments.get_mut(p, i)[..m].copy_from_slice(self.increment(src, i));
            }
        }
        out
    }

    /// Writes the little-endian layout: magic, `n_paths`, `n_steps`, `modes`,
    /// `seed` (u64 each), horizon `b`, eigenvalues, increments (f64 each,
    /// path-major then step then mode).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.n_paths() as u64, self.grid.n_steps() as u64, self.modes() as u64, self.spec.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.grid.b().to_le_bytes())?;
        for v in self.spec.eigenvalues.iter().chain(self.increments.as_slice()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Io("not a path ensemble dump".into()));
        }
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut word)?;
            Ok(word)
        };
        let n_paths = u64::from_le_bytes(next(&mut r)?) as usize;
        let n_steps = u64::from_le_bytes(next(&mut r)?) as usize;
        let modes = u64::from_le_bytes(next(&mut r)?) as usize;
        let seed = u64::from_le_bytes(next(&mut r)?);
        let b = f64::from_le_bytes(next(&mut r)?);
        let eigenvalues = (0..modes).map(|_| next(&mut r).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        let grid = TimeGrid::new(b, n_steps)?;
        let spec = NoiseSpec::new(eigenvalues, seed)?;
        let mut increments = ProcessArray::zeros(n_paths, n_steps, modes);
        for v in increments.data.iter_mut() {
            *v = f64::from_le_bytes(next(&mut r)?);
        }
        Ok(Self { grid, spec, increments })
    }
}

fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draws for one path in `(step, mode)` order.
fn path_normals(seed: u64, path: usize, out: &mut [f64]) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng.set_word_pos(0);
    for z in out.iter_mut() {
        let u1 = unit_open(rng.next_u64());
        let u2 = unit_open(rng.next_u64());
        *z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

/// Draws `n_paths` independent increment paths on `grid`.
pub fn generate_paths(spec: &NoiseSpec, grid: &TimeGrid, n_paths: usize) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::domain("generate_paths", "n_paths must be >= 1"));
    }
    let m = spec.modes();
    let total = n_paths
        .checked_mul(grid.n_steps())
        .and_then(|v| v.checked_mul(m))
        .filter(|&v| v <= isize::MAX as usize / 8)
        .ok_or_else(|| Error::domain("generate_paths", "ensemble too large"))?;
    let mut increments = ProcessArray { n_paths, n_nodes: grid.n_steps(), width: m, data: Vec::new() };
    increments.data.try_reserve_exact(total).map_err(|e| Error::Io(format!("allocation failed: {e}")))?;
    increments.data.resize(total, 0.0);
    let scales: Vec<f64> = spec.eigenvalues.iter().map(|l| (l * grid.dt()).sqrt()).collect();
    increments.paths_mut().enumerate().for_each(|(p, row)| {
        path_normals(spec.seed, p, row);
        for (k, v) in row.iter_mut().enumerate() {
            *v *= scales[k % m];
        }
    });
    Ok(PathEnsemble { grid: grid.clone(), spec: spec.clone(), increments })
}
