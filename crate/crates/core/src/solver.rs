//! Thin conic-program builder and solver backend.
//!
//! Problems are assembled row by row as
//!
//! ```text
//! minimize    ½ xᵀPx + qᵀx
//! subject to  A_eq x = b_eq
//!             A_in x ≤ b_in
//!             (b_k − A_k x) ∈ SOC_k      for each cone block k
//! ```
//!
//! and handed to a [`ConicBackend`]. The reference backend is Clarabel's
//! primal-dual interior-point method.

use std::io::{self, Write};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("solver setup failed: {0}")]
    Setup(String),
    #[error("solver finished with status {0}")]
    Status(String),
}

/// A sparse row: `(column, coefficient)` pairs.
pub type Row = Vec<(usize, f64)>;

#[derive(Debug, Clone, Default)]
pub struct ConicProblem {
    pub n: usize,
    pub q: Vec<f64>,
    /// Upper-triangular triplets of P.
    pub p: Vec<(usize, usize, f64)>,
    eq: Vec<(Row, f64)>,
    ineq: Vec<(Row, f64)>,
    socs: Vec<Vec<(Row, f64)>>,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    /// Multipliers of the equality rows, in insertion order.
    pub y_eq: Vec<f64>,
    /// Multipliers of the inequality rows, in insertion order (≥ 0).
    pub y_ineq: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub almost: bool,
}

impl ConicProblem {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            q: vec![0.0; n],
            ..Default::default()
        }
    }

    pub fn add_var(&mut self) -> usize {
        self.n += 1;
        self.q.push(0.0);
        self.n - 1
    }

    /// Adds `row·x = rhs`; returns the row index among equalities.
    pub fn eq(&mut self, row: Row, rhs: f64) -> usize {
        self.eq.push((row, rhs));
        self.eq.len() - 1
    }

    /// Adds `row·x ≤ rhs`; returns the row index among inequalities.
    pub fn le(&mut self, row: Row, rhs: f64) -> usize {
        self.ineq.push((row, rhs));
        self.ineq.len() - 1
    }

    /// Adds `row·x ≥ rhs`.
    pub fn ge(&mut self, row: Row, rhs: f64) -> usize {
        let neg = row.into_iter().map(|(j, a)| (j, -a)).collect();
        self.le(neg, -rhs)
    }

    /// Adds a second-order cone `‖(e_1, …, e_k)‖ ≤ e_0` where each entry
    /// is an affine expression `row·x + c`.
    pub fn soc(&mut self, entries: Vec<(Row, f64)>) {
        // Clarabel wants b − A x ∈ K, so A = −row and b = c.
        let block = entries
            .into_iter()
            .map(|(row, c)| (row.into_iter().map(|(j, a)| (j, -a)).collect(), c))
            .collect();
        self.socs.push(block);
    }

    /// Adds `y ≥ k·x²` (k ≥ 0) for affine `y = y_row·x + y_off` and
    /// `x = x_row·x + x_off`, as a second-order cone in standard form:
    /// `‖(y − s, 2√(k s)·x)‖ ≤ y + s` with a fixed positive scale `s`.
    pub fn quad_epigraph(&mut self, y: Row, y_off: f64, x: Row, x_off: f64, k: f64, scale: f64) {
        debug_assert!(k >= 0.0 && scale > 0.0);
        let c = 2.0 * (k * scale).sqrt();
        let xs: Row = x.iter().map(|&(j, a)| (j, a * c)).collect();
        self.soc(vec![
            (y.clone(), y_off + scale),
            (y, y_off - scale),
            (xs, x_off * c),
        ]);
    }

    pub fn n_eq(&self) -> usize {
        self.eq.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq.len()
    }

    fn assemble(&self) -> (CscMatrix<f64>, CscMatrix<f64>, Vec<f64>, Vec<SupportedConeT<f64>>) {
        let (mut ri, mut ci, mut vi) = (Vec::new(), Vec::new(), Vec::new());
        let mut b = Vec::new();
        let mut r = 0;
        for (row, rhs) in self.eq.iter().chain(self.ineq.iter()) {
            for &(j, a) in row {
                ri.push(r);
                ci.push(j);
                vi.push(a);
            }
            b.push(*rhs);
            r += 1;
        }
        let mut cones = Vec::new();
        if !self.eq.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(self.eq.len()));
        }
        if !self.ineq.is_empty() {
            cones.push(SupportedConeT::NonnegativeConeT(self.ineq.len()));
        }
        for block in &self.socs {
            for (row, c) in block {
                for &(j, a) in row {
                    ri.push(r);
                    ci.push(j);
                    vi.push(a);
                }
                b.push(*c);
                r += 1;
            }
            cones.push(SupportedConeT::SecondOrderConeT(block.len()));
        }
        let a = CscMatrix::new_from_triplets(r, self.n, ri, ci, vi);
        let (pi, pj, pv) = self.p.iter().fold(
            (Vec::new(), Vec::new(), Vec::new()),
            |(mut i, mut j, mut v), &(r, c, x)| {
                let (r, c) = if r <= c { (r, c) } else { (c, r) };
                i.push(r);
                j.push(c);
                v.push(x);
                (i, j, v)
            },
        );
        let p = CscMatrix::new_from_triplets(self.n, self.n, pi, pj, pv);
        (p, a, b, cones)
    }

    /// Writes the program in a plain sparse text format:
    ///
    /// ```text
    /// n <vars> eq <rows> ineq <rows> soc <dim> <dim> ...
    /// q <j> <value>                  (nonzero linear cost)
    /// p <i> <j> <value>              (upper-triangular quadratic cost)
    /// e <row> <j> <value> / eb <row> <rhs>
    /// i <row> <j> <value> / ib <row> <rhs>
    /// s <block> <row> <j> <value> / sb <block> <row> <const>
    /// ```
    ///
    /// SOC rows are stored as the affine entries `row·x + c` of
    /// `‖(e_1, …)‖ ≤ e_0`.
    pub fn write_sparse<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "n {} eq {} ineq {} soc", self.n, self.eq.len(), self.ineq.len())?;
        for block in &self.socs {
            write!(w, " {}", block.len())?;
        }
        writeln!(w)?;
        for (j, &v) in self.q.iter().enumerate() {
            if v != 0.0 {
                writeln!(w, "q {j} {v:e}")?;
            }
        }
        for &(i, j, v) in &self.p {
            writeln!(w, "p {i} {j} {v:e}")?;
        }
        for (tag, rows) in [("e", &self.eq), ("i", &self.ineq)] {
            for (r, (row, rhs)) in rows.iter().enumerate() {
                for &(j, a) in row {
                    writeln!(w, "{tag} {r} {j} {a:e}")?;
                }
                writeln!(w, "{tag}b {r} {rhs:e}")?;
            }
        }
        for (k, block) in self.socs.iter().enumerate() {
            for (r, (row, c)) in block.iter().enumerate() {
                for &(j, a) in row {
                    writeln!(w, "s {k} {r} {j} {:e}", -a)?;
                }
                writeln!(w, "sb {k} {r} {c:e}")?;
            }
        }
        Ok(())
    }
}

/// Anything that can solve a [`ConicProblem`] and report equality duals.
pub trait ConicBackend: Send + Sync {
    fn solve(&self, problem: &ConicProblem) -> Result<ConicSolution, SolverError>;
}

#[derive(Debug, Clone)]
pub struct Clarabel {
    pub tol: f64,
    pub max_iter: u32,
    /// Iterative refinement tolerances of the KKT solves. The library
    /// defaults refine far below the interior point tolerance, which costs
    /// a third of the solve time on long horizons without changing the
    /// result.
    pub refine_reltol: f64,
    pub refine_abstol: f64,
}

impl Default for Clarabel {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            refine_reltol: 1e-8,
            refine_abstol: 1e-9,
        }
    }
}

impl ConicBackend for Clarabel {
    fn solve(&self, problem: &ConicProblem) -> Result<ConicSolution, SolverError> {
        let (p, a, b, cones) = problem.assemble();
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(self.max_iter)
            .tol_gap_abs(self.tol)
            .tol_gap_rel(self.tol)
            .tol_feas(self.tol)
            .iterative_refinement_reltol(self.refine_reltol)
            .iterative_refinement_abstol(self.refine_abstol)
            .build()
            .map_err(|e| SolverError::Setup(e.to_string()))?;
        let mut solver = DefaultSolver::new(&p, &problem.q, &a, &b, &cones, settings)
            .map_err(|e| SolverError::Setup(e.to_string()))?;
        solver.solve();
        let sol = &solver.solution;
        let almost = match sol.status {
            SolverStatus::Solved => false,
            SolverStatus::AlmostSolved => true,
            s => return Err(SolverError::Status(format!("{s:?}"))),
        };
        let ne = problem.eq.len();
        let ni = problem.ineq.len();
        Ok(ConicSolution {
            x: sol.x.clone(),
            y_eq: sol.z[..ne].to_vec(),
            y_ineq: sol.z[ne..ne + ni].to_vec(),
            objective: sol.obj_val,
            iterations: sol.iterations,
            almost,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_lp_with_duals() {
        // min x0 + 2 x1  s.t. x0 + x1 = 1, x ≥ 0  →  x = (1, 0), y = 1.
        let mut p = ConicProblem::new(2);
        p.q = vec![1.0, 2.0];
        p.eq(vec![(0, 1.0), (1, 1.0)], 1.0);
        p.ge(vec![(0, 1.0)], 0.0);
        p.ge(vec![(1, 1.0)], 0.0);
        let s = Clarabel::default().solve(&p).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-7);
        assert!(s.x[1].abs() < 1e-7);
        // Clarabel's equality dual enters the Lagrangian as + yᵀ(Ax − b).
        assert!((s.y_eq[0].abs() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_epigraph_is_tight() {
        // min y  s.t. y ≥ 3 x², x = 2  →  y = 12.
        let mut p = ConicProblem::new(2);
        p.q = vec![0.0, 1.0];
        p.eq(vec![(0, 1.0)], 2.0);
        p.quad_epigraph(vec![(1, 1.0)], 0.0, vec![(0, 1.0)], 0.0, 3.0, 1.0);
        let s = Clarabel::default().solve(&p).unwrap();
        assert!((s.x[1] - 12.0).abs() < 1e-6, "{}", s.x[1]);
    }

    #[test]
    fn sparse_dump_lists_every_block() {
        let mut p = ConicProblem::new(2);
        p.q = vec![0.0, 1.0];
        p.eq(vec![(0, 1.0)], 2.0);
        p.le(vec![(1, 1.0)], 5.0);
        p.quad_epigraph(vec![(1, 1.0)], 0.0, vec![(0, 1.0)], 0.0, 3.0, 1.0);
        let mut out = Vec::new();
        p.write_sparse(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("n 2 eq 1 ineq 1 soc 3\n"));
        assert!(text.contains("eb 0 2e0"));
        assert!(text.contains("ib 0 5e0"));
    }
}
