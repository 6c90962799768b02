//! Seeded simulation of the driving noise: Brownian increments plus Poisson
//! counts for a finite set of jump atoms.
//!
//! Every path draws from its own ChaCha stream (`seed`, stream = path index),
//! so a bundle is bit-identical regardless of how many threads generate it.
//!
//! CSV layout (one row per path): `path, dB_0 .. dB_{N-1}, dN_{j}_{n}` for
//! every atom `j` and step `n` (atom-major).

use std::io::{Read, Write};

use ndarray::{Array2, Array3, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpAtom {
    pub mark: f64,
    pub intensity: f64,
}

/// Lévy measure supported on finitely many marks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct JumpAtomMeasure {
    atoms: Vec<JumpAtom>,
}

impl JumpAtomMeasure {
    pub fn new(atoms: Vec<JumpAtom>) -> Result<Self> {
        for (i, a) in atoms.iter().enumerate() {
            if !(a.intensity.is_finite() && a.intensity > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "atom {i}: intensity must be positive, got {}",
                    a.intensity
                )));
            }
            if !a.mark.is_finite() || a.mark == 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "atom {i}: mark must be finite and nonzero, got {}",
                    a.mark
                )));
            }
            if atoms[..i].iter().any(|b| b.mark == a.mark) {
                return Err(Error::InvalidParameter(format!(
                    "atom {i}: duplicate mark {}",
                    a.mark
                )));
            }
        }
        Ok(Self { atoms })
    }

    /// No jumps at all.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn atoms(&self) -> &[JumpAtom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn marks(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.mark).collect()
    }

    pub fn intensities(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.intensity).collect()
    }
}

/// Immutable per-path noise sample. Increments are stored as drawn; running
/// levels are cached for use as regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    grid: TimeGrid,
    measure: JumpAtomMeasure,
    seed: u64,
    brownian: Array2<f64>,
    jumps: Array3<u32>,
    brownian_level: Array2<f64>,
    jump_total: Array3<u32>,
}

impl NoiseBundle {
    /// Draws `paths` independent paths: `dB ~ N(0, dt)`, `dN_j ~ Poisson(nu_j dt)`.
    pub fn simulate(grid: TimeGrid, measure: JumpAtomMeasure, paths: usize, seed: u64) -> Self {
        let n = grid.num_steps();
        let j = measure.len();
        let sqrt_dt = grid.dt().sqrt();
        let poissons: Vec<Poisson<f64>> = measure
            .atoms()
            .iter()
            .map(|a| Poisson::new(a.intensity * grid.dt()).expect("positive rate"))
            .collect();

        let rows: Vec<(Vec<f64>, Vec<u32>)> = (0..paths)
            .into_par_iter()
            .map(|m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(m as u64);
                let mut db = Vec::with_capacity(n);
                let mut dn = Vec::with_capacity(n * j);
                for _ in 0..n {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    db.push(z * sqrt_dt);
                    for p in &poissons {
                        dn.push(p.sample(&mut rng) as u32);
                    }
                }
                (db, dn)
            })
            .collect();

        let mut brownian = Array2::zeros((paths, n));
        let mut jumps = Array3::zeros((paths, n, j));
        for (m, (db, dn)) in rows.into_iter().enumerate() {
            for step in 0..n {
                brownian[[m, step]] = db[step];
                for atom in 0..j {
                    jumps[[m, step, atom]] = dn[step * j + atom];
                }
            }
        }
        Self::assemble(grid, measure, seed, brownian, jumps)
    }

    /// Full binary tree: every sign pattern of `dB = ±sqrt(dt)`, no jumps.
    /// Path `m` takes `+sqrt(dt)` at step `n` when bit `N-1-n` of `m` is clear,
    /// so paths sharing a prefix are contiguous.
    pub fn binary_tree(grid: TimeGrid) -> Result<Self> {
        let n = grid.num_steps();
        if n > 20 {
            return Err(Error::TooLarge(format!("binary tree with {n} steps")));
        }
        let paths = 1usize << n;
        let h = grid.dt().sqrt();
        let brownian = Array2::from_shape_fn((paths, n), |(m, step)| {
            if (m >> (n - 1 - step)) & 1 == 0 {
                h
            } else {
                -h
            }
        });
        let jumps = Array3::zeros((paths, n, 0));
        Ok(Self::assemble(
            grid,
            JumpAtomMeasure::empty(),
            0,
            brownian,
            jumps,
        ))
    }

    /// Bundle from explicit increments (shape `M x N` and `M x N x J`).
    pub fn from_parts(
        grid: TimeGrid,
        measure: JumpAtomMeasure,
        seed: u64,
        brownian: Array2<f64>,
        jumps: Array3<u32>,
    ) -> Result<Self> {
        let (m, n) = brownian.dim();
        if n != grid.num_steps() {
            return Err(Error::InvalidParameter(format!(
                "brownian increments have {n} steps, grid has {}",
                grid.num_steps()
            )));
        }
        if jumps.dim() != (m, n, measure.len()) {
            return Err(Error::InvalidParameter(format!(
                "jump counts have shape {:?}, expected {:?}",
                jumps.dim(),
                (m, n, measure.len())
            )));
        }
        Ok(Self::assemble(grid, measure, seed, brownian, jumps))
    }

    fn assemble(
        grid: TimeGrid,
        measure: JumpAtomMeasure,
        seed: u64,
        brownian: Array2<f64>,
        jumps: Array3<u32>,
    ) -> Self {
        let (m, n) = brownian.dim();
        let j = measure.len();
        let mut brownian_level = Array2::zeros((m, n + 1));
        let mut jump_total = Array3::zeros((m, n + 1, j));
        for path in 0..m {
            for step in 0..n {
                brownian_level[[path, step + 1]] =
                    brownian_level[[path, step]] + brownian[[path, step]];
                for atom in 0..j {
                    jump_total[[path, step + 1, atom]] =
                        jump_total[[path, step, atom]] + jumps[[path, step, atom]];
                }
            }
        }
        Self {
            grid,
            measure,
            seed,
            brownian,
            jumps,
            brownian_level,
            jump_total,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn measure(&self) -> &JumpAtomMeasure {
        &self.measure
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_paths(&self) -> usize {
        self.brownian.nrows()
    }

    pub fn num_atoms(&self) -> usize {
        self.measure.len()
    }

    /// `M x N` Brownian increments.
    pub fn brownian_increments(&self) -> &Array2<f64> {
        &self.brownian
    }

    /// `M x N x J` raw Poisson counts.
    pub fn jump_counts(&self) -> &Array3<u32> {
        &self.jumps
    }

    pub fn db(&self, path: usize, step: usize) -> f64 {
        self.brownian[[path, step]]
    }

    /// Brownian increments of every path at `step`.
    pub fn db_column(&self, step: usize) -> ArrayView1<'_, f64> {
        self.brownian.column(step)
    }

    /// Compensated count `dN - nu dt`.
    pub fn compensated(&self, path: usize, step: usize, atom: usize) -> f64 {
        self.jumps[[path, step, atom]] as f64
            - self.measure.atoms()[atom].intensity * self.grid.dt()
    }

    /// `B(t_step)` per path.
    pub fn brownian_level(&self, step: usize) -> ArrayView1<'_, f64> {
        self.brownian_level.column(step)
    }

    /// Running count of atom `atom` up to node `step`.
    pub fn jump_total(&self, path: usize, step: usize, atom: usize) -> u32 {
        self.jump_total[[path, step, atom]]
    }

    /// Terminal jump totals of one path (one entry per atom).
    pub fn terminal_jump_totals(&self, path: usize) -> Vec<u32> {
        let n = self.grid.num_steps();
        (0..self.num_atoms())
            .map(|j| self.jump_total[[path, n, j]])
            .collect()
    }

    /// Bundle whose increments after node `step` are taken from `other`.
    /// Used to check that fitted quantities up to `step` ignore the future.
    pub fn splice_future(&self, other: &NoiseBundle, step: usize) -> Result<Self> {
        if other.brownian.dim() != self.brownian.dim() || other.jumps.dim() != self.jumps.dim() {
            return Err(Error::InvalidParameter("bundle shapes differ".into()));
        }
        let mut brownian = self.brownian.clone();
        let mut jumps = self.jumps.clone();
        for s in step..self.grid.num_steps() {
            brownian
                .index_axis_mut(Axis(1), s)
                .assign(&other.brownian.index_axis(Axis(1), s));
            jumps
                .index_axis_mut(Axis(1), s)
                .assign(&other.jumps.index_axis(Axis(1), s));
        }
        Ok(Self::assemble(
            self.grid,
            self.measure.clone(),
            self.seed,
            brownian,
            jumps,
        ))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let n = self.grid.num_steps();
        let j = self.num_atoms();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["path".to_string()];
        header.extend((0..n).map(|s| format!("dB_{s}")));
        for atom in 0..j {
            header.extend((0..n).map(|s| format!("dN_{atom}_{s}")));
        }
        w.write_record(&header)?;
        for m in 0..self.num_paths() {
            let mut row = vec![m.to_string()];
            row.extend((0..n).map(|s| self.brownian[[m, s]].to_string()));
            for atom in 0..j {
                row.extend((0..n).map(|s| self.jumps[[m, s, atom]].to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(
        reader: R,
        grid: TimeGrid,
        measure: JumpAtomMeasure,
        seed: u64,
    ) -> Result<Self> {
        let n = grid.num_steps();
        let j = measure.len();
        let mut r = csv::Reader::from_reader(reader);
        let mut db_rows = Vec::new();
        let mut dn_rows = Vec::new();
        for record in r.records() {
            let record = record?;
            if record.len() != 1 + n + n * j {
                return Err(Error::InvalidParameter(format!(
                    "noise row has {} fields, expected {}",
                    record.len(),
                    1 + n + n * j
                )));
            }
            let parse_f = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::InvalidParameter(format!("bad increment `{s}`: {e}")))
            };
            let parse_u = |s: &str| {
                s.parse::<u32>()
                    .map_err(|e| Error::InvalidParameter(format!("bad count `{s}`: {e}")))
            };
            let db = (1..=n)
                .map(|i| parse_f(&record[i]))
                .collect::<Result<Vec<_>>>()?;
            let dn = (1 + n..1 + n + n * j)
                .map(|i| parse_u(&record[i]))
                .collect::<Result<Vec<_>>>()?;
            db_rows.push(db);
            dn_rows.push(dn);
        }
        let m = db_rows.len();
        let brownian = Array2::from_shape_fn((m, n), |(p, s)| db_rows[p][s]);
        let jumps = Array3::from_shape_fn((m, n, j), |(p, s, a)| dn_rows[p][a * n + s]);
        Self::from_parts(grid, measure, seed, brownian, jumps)
    }
}
