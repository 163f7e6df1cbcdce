//! Euclidean projections onto the convex sets every iteration kernel relies
//! on: halfspaces, hyperplanes, affine sets, boxes, and polyhedral
//! intersections of those (via Dykstra's alternating projections).

use crate::error::{Error, Result};
use crate::linalg::{dist, dot, norm, Matrix};

/// Default tolerance for polyhedral projections.
pub const PROJECTION_TOL: f64 = 1e-10;
/// Default sweep budget for polyhedral projections.
pub const PROJECTION_MAX_ITER: usize = 10_000;

/// A closed halfspace `{ w : normal · w <= offset }`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    normal: Vec<f64>,
    offset: f64,
    norm_sq: f64,
}

impl Halfspace {
    pub fn new(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let norm_sq = dot(&normal, &normal);
        if norm_sq <= 0.0 || !norm_sq.is_finite() {
            return Err(Error::ZeroNormal);
        }
        Ok(Halfspace {
            normal,
            offset,
            norm_sq,
        })
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Signed violation `normal · w - offset` (positive means infeasible).
    pub fn violation(&self, point: &[f64]) -> f64 {
        dot(&self.normal, point) - self.offset
    }
}

/// Affine set `{ w : E w = d }`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSet {
    matrix: Matrix,
    rhs: Vec<f64>,
}

impl AffineSet {
    pub fn new(matrix: Matrix, rhs: Vec<f64>) -> Result<Self> {
        if matrix.rows() != rhs.len() {
            return Err(Error::Dimension {
                what: "affine set rhs",
                expected: matrix.rows(),
                got: rhs.len(),
            });
        }
        Ok(AffineSet { matrix, rhs })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// `‖E w − d‖` at a point.
    pub fn residual(&self, point: &[f64]) -> f64 {
        let r = self.matrix.matvec(point);
        r.iter()
            .zip(&self.rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-coordinate bounds; entries may be infinite on either side.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                what: "bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (lo, up) in lower.iter().zip(&upper) {
            if lo > up {
                return Err(Error::Infeasible { residual: lo - up });
            }
        }
        Ok(Bounds { lower, upper })
    }

    fn clamp(&self, point: &[f64]) -> Vec<f64> {
        point
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, up))| v.max(*lo).min(*up))
            .collect()
    }

    fn violation(&self, point: &[f64]) -> f64 {
        point
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, up))| (lo - v).max(v - up).max(0.0))
            .fold(0.0_f64, f64::max)
    }
}

/// Project onto a single halfspace (closed form).
pub fn project_halfspace(point: &[f64], hs: &Halfspace) -> Result<Vec<f64>> {
    if point.len() != hs.dim() {
        return Err(Error::Dimension {
            what: "project_halfspace point",
            expected: hs.dim(),
            got: point.len(),
        });
    }
    let viol = hs.violation(point);
    if viol <= 0.0 {
        return Ok(point.to_vec());
    }
    let step = viol / hs.norm_sq;
    Ok(point
        .iter()
        .zip(&hs.normal)
        .map(|(p, a)| p - step * a)
        .collect())
}

/// Project onto the hyperplane `{ w : a · w = b }` (closed form).
pub fn project_hyperplane(point: &[f64], a: &[f64], b: f64) -> Result<Vec<f64>> {
    let norm_sq = dot(a, a);
    if norm_sq <= 0.0 || !norm_sq.is_finite() {
        return Err(Error::ZeroNormal);
    }
    if point.len() != a.len() {
        return Err(Error::Dimension {
            what: "project_hyperplane point",
            expected: a.len(),
            got: point.len(),
        });
    }
    let step = (dot(a, point) - b) / norm_sq;
    Ok(point.iter().zip(a).map(|(p, ai)| p - step * ai).collect())
}

/// Project onto `{ w : E w = d }` via the normal-equations correction
/// `point − Eᵀ (E Eᵀ)⁻¹ (E point − d)`. Redundant-but-consistent rows are
/// handled through the eigen-pseudoinverse of `E Eᵀ`; inconsistent systems
/// are rejected with the violated residual.
pub fn project_affine(point: &[f64], set: &AffineSet) -> Result<Vec<f64>> {
    let e = set.matrix();
    if point.len() != e.cols() {
        return Err(Error::Dimension {
            what: "project_affine point",
            expected: e.cols(),
            got: point.len(),
        });
    }
    if e.rows() == 0 {
        return Ok(point.to_vec());
    }
    let mut r = e.matvec(point);
    for (ri, di) in r.iter_mut().zip(set.rhs()) {
        *ri -= di;
    }
    let gram = e.matmul(&e.transpose());
    let lambda = match gram.solve(&r) {
        Ok(l) => l,
        Err(Error::SingularSystem) => pseudo_solve(&gram, &r),
        Err(other) => return Err(other),
    };
    let correction = e.t_matvec(&lambda);
    let out: Vec<f64> = point
        .iter()
        .zip(&correction)
        .map(|(p, c)| p - c)
        .collect();
    let residual = set.residual(&out);
    let scale = set.rhs().iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    if residual > 1e-8 * scale {
        return Err(Error::InconsistentEqualities { residual });
    }
    Ok(out)
}

/// Minimum-norm solve of a symmetric PSD system through its eigensystem.
fn pseudo_solve(gram: &Matrix, rhs: &[f64]) -> Vec<f64> {
    let (vals, vecs) = gram.sym_eigen();
    let n = rhs.len();
    let cutoff = 1e-12 * vals.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut out = vec![0.0; n];
    for k in 0..n {
        if vals[k].abs() <= cutoff {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|i| vecs.get(i, k)).collect();
        let coeff = dot(&col, rhs) / vals[k];
        for i in 0..n {
            out[i] += coeff * col[i];
        }
    }
    out
}

/// A polyhedron: halfspaces, optional affine equalities, optional box.
/// Construction probes the set for feasibility by projecting the origin, so
/// an empty intersection is reported up front rather than mid-run.
#[derive(Debug, Clone)]
pub struct PolyhedralSet {
    dim: usize,
    halfspaces: Vec<Halfspace>,
    equalities: Option<AffineSet>,
    bounds: Option<Bounds>,
}

impl PolyhedralSet {
    pub fn new(
        dim: usize,
        halfspaces: Vec<Halfspace>,
        equalities: Option<AffineSet>,
        bounds: Option<Bounds>,
    ) -> Result<Self> {
        for hs in &halfspaces {
            if hs.dim() != dim {
                return Err(Error::Dimension {
                    what: "halfspace dimension",
                    expected: dim,
                    got: hs.dim(),
                });
            }
        }
        if let Some(eq) = &equalities {
            if eq.dim() != dim {
                return Err(Error::Dimension {
                    what: "equality dimension",
                    expected: dim,
                    got: eq.dim(),
                });
            }
        }
        if let Some(b) = &bounds {
            if b.lower.len() != dim {
                return Err(Error::Dimension {
                    what: "bounds dimension",
                    expected: dim,
                    got: b.lower.len(),
                });
            }
        }
        let set = PolyhedralSet {
            dim,
            halfspaces,
            equalities,
            bounds,
        };
        if !set.is_unconstrained() {
            set.project(&vec![0.0; dim], PROJECTION_TOL, PROJECTION_MAX_ITER)?;
        }
        Ok(set)
    }

    /// The whole ambient space (no constraints).
    pub fn whole_space(dim: usize) -> Self {
        PolyhedralSet {
            dim,
            halfspaces: Vec::new(),
            equalities: None,
            bounds: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces
    }

    pub fn equalities(&self) -> Option<&AffineSet> {
        self.equalities.as_ref()
    }

    pub fn bounds(&self) -> Option<&Bounds> {
        self.bounds.as_ref()
    }

    pub fn is_unconstrained(&self) -> bool {
        self.halfspaces.is_empty() && self.equalities.is_none() && self.bounds.is_none()
    }

    /// Merge the constraints of two sets over the same ambient space.
    pub fn intersect(&self, other: &PolyhedralSet) -> Result<PolyhedralSet> {
        if self.dim != other.dim {
            return Err(Error::Dimension {
                what: "intersect",
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut halfspaces = self.halfspaces.clone();
        halfspaces.extend(other.halfspaces.iter().cloned());
        let equalities = match (&self.equalities, &other.equalities) {
            (None, None) => None,
            (Some(e), None) | (None, Some(e)) => Some(e.clone()),
            (Some(a), Some(b)) => {
                let mut rows: Vec<Vec<f64>> =
                    (0..a.matrix.rows()).map(|i| a.matrix.row(i).to_vec()).collect();
                rows.extend((0..b.matrix.rows()).map(|i| b.matrix.row(i).to_vec()));
                let mut rhs = a.rhs.clone();
                rhs.extend(&b.rhs);
                Some(AffineSet::new(Matrix::from_rows(&rows)?, rhs)?)
            }
        };
        let bounds = match (&self.bounds, &other.bounds) {
            (None, None) => None,
            (Some(b), None) | (None, Some(b)) => Some(b.clone()),
            (Some(a), Some(b)) => {
                let lower = a
                    .lower
                    .iter()
                    .zip(&b.lower)
                    .map(|(x, y)| x.max(*y))
                    .collect();
                let upper = a
                    .upper
                    .iter()
                    .zip(&b.upper)
                    .map(|(x, y)| x.min(*y))
                    .collect();
                Some(Bounds::new(lower, upper)?)
            }
        };
        PolyhedralSet::new(self.dim, halfspaces, equalities, bounds)
    }

    /// Largest constraint violation at a point (0 when feasible).
    pub fn max_violation(&self, point: &[f64]) -> f64 {
        let mut v = 0.0_f64;
        for hs in &self.halfspaces {
            v = v.max(hs.violation(point));
        }
        if let Some(eq) = &self.equalities {
            let r = eq.matrix.matvec(point);
            for (ri, di) in r.iter().zip(&eq.rhs) {
                v = v.max((ri - di).abs());
            }
        }
        if let Some(b) = &self.bounds {
            v = v.max(b.violation(point));
        }
        v
    }

    pub fn contains(&self, point: &[f64], tol: f64) -> bool {
        self.max_violation(point) <= tol
    }

    /// Nearest point in the set via Dykstra's alternating projections with
    /// correction terms, cycling box → equalities → halfspaces.
    pub fn project(&self, point: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
        if point.len() != self.dim {
            return Err(Error::Dimension {
                what: "project point",
                expected: self.dim,
                got: point.len(),
            });
        }
        if self.is_unconstrained() {
            return Ok(point.to_vec());
        }

        enum Block<'a> {
            Box(&'a Bounds),
            Affine(&'a AffineSet),
            Halfspace(&'a Halfspace),
        }
        let mut blocks: Vec<Block> = Vec::new();
        if let Some(b) = &self.bounds {
            blocks.push(Block::Box(b));
        }
        if let Some(eq) = &self.equalities {
            blocks.push(Block::Affine(eq));
        }
        for hs in &self.halfspaces {
            blocks.push(Block::Halfspace(hs));
        }

        let mut x = point.to_vec();
        let mut corrections = vec![vec![0.0; self.dim]; blocks.len()];
        let mut best_violation = f64::INFINITY;
        let mut stalled = 0usize;
        for _sweep in 0..max_iter {
            let x_prev = x.clone();
            for (block, corr) in blocks.iter().zip(corrections.iter_mut()) {
                let y: Vec<f64> = x.iter().zip(corr.iter()).map(|(a, c)| a + c).collect();
                let x_new = match block {
                    Block::Box(b) => b.clamp(&y),
                    Block::Affine(eq) => project_affine(&y, eq)?,
                    Block::Halfspace(hs) => project_halfspace(&y, hs)?,
                };
                for ((c, yi), xi) in corr.iter_mut().zip(&y).zip(&x_new) {
                    *c = yi - xi;
                }
                x = x_new;
            }
            let change = dist(&x, &x_prev);
            let violation = self.max_violation(&x);
            if change < tol && violation <= tol {
                return Ok(x);
            }
            // Infeasibility shows up as corrections that grow without the
            // residual improving; give the sweep a generous window first.
            if violation < best_violation - tol * 1e-3 {
                best_violation = violation;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= 500 && best_violation > tol {
                    return Err(Error::Infeasible {
                        residual: best_violation,
                    });
                }
            }
        }
        Err(Error::ProjectionMaxIter {
            max_iter,
            residual: self.max_violation(&x),
            best: x,
        })
    }

    /// Projection with the crate-default tolerance and budget.
    pub fn project_default(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.project(point, PROJECTION_TOL, PROJECTION_MAX_ITER)
    }
}
