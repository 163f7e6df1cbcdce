//! Problem data model: quadratic objectives, the special quadratic design
//! class with linear coupling, per-agent subspaces with explicit linear
//! transitions, and assembly of the centralized aggregate problem.

use crate::error::{Error, Result};
use crate::geometry::PolyhedralSet;
use crate::linalg::{dot, Matrix};

/// `f(w) = wᵀ Q w + Pᵀ w + constant` with `Q` symmetric positive
/// semidefinite. The constant does not affect minimizers or gradients; it is
/// carried so reported objective values match the modeled expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    q: Matrix,
    p: Vec<f64>,
    constant: f64,
}

impl QuadraticObjective {
    pub fn new(q: Matrix, p: Vec<f64>) -> Result<Self> {
        QuadraticObjective::with_constant(q, p, 0.0)
    }

    pub fn with_constant(q: Matrix, p: Vec<f64>, constant: f64) -> Result<Self> {
        if q.rows() != q.cols() {
            return Err(Error::Dimension {
                what: "objective matrix",
                expected: q.rows(),
                got: q.cols(),
            });
        }
        if p.len() != q.rows() {
            return Err(Error::Dimension {
                what: "objective linear term",
                expected: q.rows(),
                got: p.len(),
            });
        }
        let scale = q.max_abs().max(1.0);
        if !q.is_symmetric(1e-12 * scale) {
            return Err(Error::Unsupported("objective matrix is not symmetric".into()));
        }
        if q.rows() > 0 {
            let min_eig = q.sym_eigenvalues()[0];
            if min_eig < -1e-9 * scale {
                return Err(Error::Unsupported(format!(
                    "objective matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})"
                )));
            }
        }
        Ok(QuadraticObjective { q, p, constant })
    }

    pub fn zero(dim: usize) -> Self {
        QuadraticObjective {
            q: Matrix::zeros(dim, dim),
            p: vec![0.0; dim],
            constant: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        dot(&self.q.matvec(w), w) + dot(&self.p, w) + self.constant
    }

    /// Full gradient `2 Q w + P`.
    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = self.q.matvec(w);
        for (gi, pi) in g.iter_mut().zip(&self.p) {
            *gi = 2.0 * *gi + pi;
        }
        g
    }

    /// Largest curvature `λ_max(2Q)`, used for stepsize bounds.
    pub fn lipschitz(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        2.0 * self.q.sym_eigenvalues().last().copied().unwrap_or(0.0).max(0.0)
    }

    /// Sum of two objectives over the same space.
    pub fn add(&self, other: &QuadraticObjective) -> Result<QuadraticObjective> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension {
                what: "objective sum",
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let n = self.dim();
        let mut q = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                q.set(i, j, self.q.get(i, j) + other.q.get(i, j));
            }
        }
        let p = self.p.iter().zip(&other.p).map(|(a, b)| a + b).collect();
        Ok(QuadraticObjective {
            q,
            p,
            constant: self.constant + other.constant,
        })
    }

    /// Pull back through a linear map `u = M w`: the objective
    /// `u ↦ uᵀQu + Pᵀu + c` becomes a quadratic in `w`.
    pub fn compose(&self, m: &Matrix) -> Result<QuadraticObjective> {
        if m.rows() != self.dim() {
            return Err(Error::Dimension {
                what: "objective composition",
                expected: self.dim(),
                got: m.rows(),
            });
        }
        let q = m.transpose().matmul(&self.q).matmul(m);
        let p = m.t_matvec(&self.p);
        // Symmetrize away rounding asymmetry before revalidating.
        let n = q.rows();
        let mut qs = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                qs.set(i, j, 0.5 * (q.get(i, j) + q.get(j, i)));
            }
        }
        QuadraticObjective::with_constant(qs, p, self.constant)
    }
}

/// Gradient of a quadratic objective restricted to the listed components.
pub fn gradient_quadratic(
    obj: &QuadraticObjective,
    w: &[f64],
    z_indices: &[usize],
) -> Result<Vec<f64>> {
    if w.len() != obj.dim() {
        return Err(Error::Dimension {
            what: "gradient_quadratic point",
            expected: obj.dim(),
            got: w.len(),
        });
    }
    let full = obj.gradient(w);
    z_indices
        .iter()
        .map(|&i| {
            full.get(i).copied().ok_or(Error::Dimension {
                what: "gradient_quadratic index",
                expected: obj.dim(),
                got: i,
            })
        })
        .collect()
}

/// The special quadratic design class: per-agent weights `c_i > 0`, targets
/// `t_i`, linear coupling `y = B z`, and one shared linear inequality
/// `Σ_r (λ_r z_r + μ_r y_r) <= b`.
///
/// The derived coefficients `b'_i = 1 − Σ_r b_ri` (column sums) are cached at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecialQdp {
    c: Vec<f64>,
    t: Vec<f64>,
    b: Matrix,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    budget: f64,
    b_prime: Vec<f64>,
}

impl SpecialQdp {
    pub fn new(
        c: Vec<f64>,
        t: Vec<f64>,
        b: Matrix,
        lambda: Vec<f64>,
        mu: Vec<f64>,
        budget: f64,
    ) -> Result<Self> {
        let m = c.len();
        for (name, len) in [("t", t.len()), ("lambda", lambda.len()), ("mu", mu.len())] {
            if len != m {
                return Err(Error::Dimension {
                    what: match name {
                        "t" => "special qdp targets",
                        "lambda" => "special qdp lambda",
                        _ => "special qdp mu",
                    },
                    expected: m,
                    got: len,
                });
            }
        }
        if b.rows() != m || b.cols() != m {
            return Err(Error::Dimension {
                what: "special qdp coupling matrix",
                expected: m,
                got: b.rows(),
            });
        }
        if let Some(bad) = c.iter().position(|&ci| ci <= 0.0) {
            return Err(Error::Unsupported(format!(
                "c_{bad} = {} must be strictly positive",
                c[bad]
            )));
        }
        let b_prime = compute_b_prime(&b);
        Ok(SpecialQdp {
            c,
            t,
            b,
            lambda,
            mu,
            budget,
            b_prime,
        })
    }

    /// Unconstrained instance (`λ = μ = 0`, budget unbounded).
    pub fn unconstrained(c: Vec<f64>, t: Vec<f64>, b: Matrix) -> Result<Self> {
        let m = c.len();
        SpecialQdp::new(c, t, b, vec![0.0; m], vec![0.0; m], f64::INFINITY)
    }

    pub fn num_agents(&self) -> usize {
        self.c.len()
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn coupling_matrix(&self) -> &Matrix {
        &self.b
    }

    /// Cached `b'_i = 1 − Σ_r b_ri`.
    pub fn b_prime(&self) -> &[f64] {
        &self.b_prime
    }

    /// `y_i = Σ_r b_ir z_r`.
    pub fn eval_coupling(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.num_agents() {
            return Err(Error::Dimension {
                what: "eval_coupling",
                expected: self.num_agents(),
                got: z.len(),
            });
        }
        Ok(self.b.matvec(z))
    }

    /// `Σ_i c_i (z_i − y_i − t_i)²` with `y` from the coupling map.
    pub fn objective_value(&self, z: &[f64]) -> Result<f64> {
        let y = self.eval_coupling(z)?;
        Ok(self
            .c
            .iter()
            .zip(z.iter().zip(y.iter().zip(&self.t)))
            .map(|(ci, (zi, (yi, ti)))| {
                let r = zi - yi - ti;
                ci * r * r
            })
            .sum())
    }

    /// The substituted per-agent gradient component as printed in the
    /// derivation: `2 c_i b'_i (b'_i z_i − t_i)`.
    pub fn gradient_special(&self, z: &[f64], agent: usize) -> f64 {
        let (ci, bi, ti, zi) = (self.c[agent], self.b_prime[agent], self.t[agent], z[agent]);
        2.0 * ci * bi * (bi * zi - ti)
    }

    /// The substituted gradient assembled over all agents (the scalar
    /// subtracted inside each agent's projected update).
    pub fn gradient_substituted_sum(&self, z: &[f64]) -> f64 {
        (0..self.num_agents())
            .map(|i| self.gradient_special(z, i))
            .sum()
    }

    /// Exact chain-rule gradient of [`objective_value`] with respect to every
    /// coordinate: `∂/∂z_s = Σ_i 2 c_i (z_i − y_i − t_i)(δ_is − b_is)`.
    ///
    /// This and [`gradient_special`] agree only under restrictive coupling
    /// structure; [`substitution_divergence`] quantifies the gap.
    pub fn gradient_chain(&self, z: &[f64]) -> Result<Vec<f64>> {
        let y = self.eval_coupling(z)?;
        let m = self.num_agents();
        let mut g = vec![0.0; m];
        for i in 0..m {
            let r = 2.0 * self.c[i] * (z[i] - y[i] - self.t[i]);
            g[i] += r;
            for s in 0..m {
                g[s] -= r * self.b.get(i, s);
            }
        }
        Ok(g)
    }

    /// Max absolute gap between the printed substituted gradient components
    /// and the exact chain-rule gradient at `z`. Reported, not resolved.
    pub fn substitution_divergence(&self, z: &[f64]) -> Result<f64> {
        let chain = self.gradient_chain(z)?;
        Ok((0..self.num_agents())
            .map(|i| (self.gradient_special(z, i) - chain[i]).abs())
            .fold(0.0_f64, f64::max))
    }

    /// Expand into explicit quadratic coordinates over `z`:
    /// `Σ c_i ((e_i − b_i)ᵀ z − t_i)²`.
    pub fn to_quadratic(&self) -> Result<QuadraticObjective> {
        let m = self.num_agents();
        let mut q = Matrix::zeros(m, m);
        let mut p = vec![0.0; m];
        let mut constant = 0.0;
        for i in 0..m {
            let u: Vec<f64> = (0..m)
                .map(|s| if s == i { 1.0 } else { 0.0 } - self.b.get(i, s))
                .collect();
            for a in 0..m {
                if u[a] == 0.0 {
                    continue;
                }
                for bidx in 0..m {
                    let add = self.c[i] * u[a] * u[bidx];
                    if add != 0.0 {
                        q.set(a, bidx, q.get(a, bidx) + add);
                    }
                }
            }
            for s in 0..m {
                p[s] += -2.0 * self.c[i] * self.t[i] * u[s];
            }
            constant += self.c[i] * self.t[i] * self.t[i];
        }
        QuadraticObjective::with_constant(q, p, constant)
    }

    /// The shared inequality `Σ_r (λ_r z_r + μ_r y_r) <= b` with `y`
    /// substituted, as a halfspace over `z`. `None` when the budget is
    /// unbounded or all coefficients vanish.
    pub fn shared_constraint(&self) -> Result<Option<crate::geometry::Halfspace>> {
        if !self.budget.is_finite() {
            return Ok(None);
        }
        let m = self.num_agents();
        let mut coeffs = self.lambda.clone();
        for r in 0..m {
            if self.mu[r] == 0.0 {
                continue;
            }
            for s in 0..m {
                coeffs[s] += self.mu[r] * self.b.get(r, s);
            }
        }
        if coeffs.iter().all(|&c| c == 0.0) {
            return Ok(None);
        }
        Ok(Some(crate::geometry::Halfspace::new(coeffs, self.budget)?))
    }
}

pub fn compute_b_prime(b: &Matrix) -> Vec<f64> {
    (0..b.cols())
        .map(|i| 1.0 - (0..b.rows()).map(|r| b.get(r, i)).sum::<f64>())
        .collect()
}

/// One incoming coupling entry: a linear row over `[x_source ++ z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingIn {
    pub source: usize,
    /// `1 × (source_state_dim + ambient_dim)` row.
    pub map: Matrix,
}

/// One agent's subproblem over the ambient design vector.
///
/// The transition is explicit (`x_i = X_i(y_i, z)`, one evaluation) and all
/// maps are linear; nonlinear couplings and implicit states are out of scope.
#[derive(Debug, Clone)]
pub struct Subspace {
    pub id: usize,
    /// Ambient design indices owned exclusively by this agent.
    pub local_vars: Vec<usize>,
    /// Ambient design indices of the shared variables this agent touches.
    pub shared_vars: Vec<usize>,
    pub state_dim: usize,
    pub coupling_in: Vec<CouplingIn>,
    /// `state_dim × (coupling_dim + ambient_dim)`: `x = T [y; z]`.
    pub transition: Matrix,
    /// Objective over the stacked `[x; y; z]`.
    pub objective: QuadraticObjective,
    /// Feasible set over the ambient design coordinates.
    pub feasible_set: PolyhedralSet,
}

impl Subspace {
    pub fn coupling_dim(&self) -> usize {
        self.coupling_in.len()
    }

    /// Design indices this agent touches (locals then shared).
    pub fn design_indices(&self) -> Vec<usize> {
        let mut v = self.local_vars.clone();
        v.extend(&self.shared_vars);
        v
    }

    /// `y_i` from the source agents' states and the ambient design vector.
    pub fn eval_couplings(&self, source_states: &[Vec<f64>], z: &[f64]) -> Result<Vec<f64>> {
        let mut y = Vec::with_capacity(self.coupling_in.len());
        for coupling in &self.coupling_in {
            let x_src = source_states.get(coupling.source).ok_or(Error::Dimension {
                what: "coupling source",
                expected: source_states.len(),
                got: coupling.source,
            })?;
            let mut stacked = x_src.clone();
            stacked.extend_from_slice(z);
            if stacked.len() != coupling.map.cols() {
                return Err(Error::Dimension {
                    what: "coupling map input",
                    expected: coupling.map.cols(),
                    got: stacked.len(),
                });
            }
            y.push(coupling.map.matvec(&stacked)[0]);
        }
        Ok(y)
    }

    /// Explicit transition `x_i = X_i(y_i, z)`.
    pub fn eval_transition(&self, y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.coupling_dim() {
            return Err(Error::Dimension {
                what: "transition coupling input",
                expected: self.coupling_dim(),
                got: y.len(),
            });
        }
        let mut stacked = y.to_vec();
        stacked.extend_from_slice(z);
        if stacked.len() != self.transition.cols() {
            return Err(Error::Dimension {
                what: "transition input",
                expected: self.transition.cols(),
                got: stacked.len(),
            });
        }
        Ok(self.transition.matvec(&stacked))
    }

    /// `f_i(x, y, z)` on the stacked variables.
    pub fn objective_at(&self, x: &[f64], y: &[f64], z: &[f64]) -> f64 {
        let mut stacked = Vec::with_capacity(x.len() + y.len() + z.len());
        stacked.extend_from_slice(x);
        stacked.extend_from_slice(y);
        stacked.extend_from_slice(z);
        self.objective.value(&stacked)
    }
}

/// One agent's iterate: its slices of the design vector plus the evaluated
/// state and coupling values at an iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignState {
    pub agent: usize,
    pub local: Vec<f64>,
    pub shared_estimate: Vec<f64>,
    pub state: Vec<f64>,
    pub coupling: Vec<f64>,
    pub iteration: usize,
}

impl DesignState {
    /// Slice an ambient estimate into the subspace's views, evaluating the
    /// coupling and state values for the record.
    pub fn from_ambient(
        sub: &Subspace,
        ambient: &[f64],
        source_states: &[Vec<f64>],
        iteration: usize,
    ) -> Result<Self> {
        let coupling = sub.eval_couplings(source_states, ambient)?;
        let state = sub.eval_transition(&coupling, ambient)?;
        Ok(DesignState {
            agent: sub.id,
            local: sub.local_vars.iter().map(|&i| ambient[i]).collect(),
            shared_estimate: sub.shared_vars.iter().map(|&i| ambient[i]).collect(),
            state,
            coupling,
            iteration,
        })
    }
}

/// Ambient-space linear expressions for each agent's state and coupling
/// variables, resolved from the transition/coupling declarations.
#[derive(Debug, Clone)]
pub struct ResolvedMaps {
    /// Per agent: `state_dim × ambient`, `x_i = X_i z`.
    pub state: Vec<Matrix>,
    /// Per agent: `coupling_dim × ambient`, `y_i = Y_i z`.
    pub coupling: Vec<Matrix>,
}

/// Express every `x_i` and `y_i` as linear maps of the ambient design vector
/// by substituting couplings through transitions. Errors when the
/// declarations are cyclic (implicit state, out of scope).
pub fn resolve_maps(subspaces: &[Subspace], ambient_dim: usize) -> Result<ResolvedMaps> {
    let n = subspaces.len();
    let mut state: Vec<Option<Matrix>> = vec![None; n];
    let mut coupling: Vec<Option<Matrix>> = vec![None; n];

    for _pass in 0..=2 * n {
        let mut progressed = false;
        for (idx, sub) in subspaces.iter().enumerate() {
            if coupling[idx].is_none() {
                // y_i resolvable once every source with a nonzero x-block has
                // a resolved state map.
                let ready = sub.coupling_in.iter().all(|c| {
                    let src_state_dim = subspaces[c.source].state_dim;
                    let x_block_zero =
                        (0..src_state_dim).all(|j| c.map.get(0, j) == 0.0);
                    x_block_zero || state[c.source].is_some()
                });
                if ready {
                    let mut rows = Vec::with_capacity(sub.coupling_in.len());
                    for c in &sub.coupling_in {
                        let src_state_dim = subspaces[c.source].state_dim;
                        let mut row = vec![0.0; ambient_dim];
                        for j in 0..ambient_dim {
                            row[j] = c.map.get(0, src_state_dim + j);
                        }
                        if let Some(xsrc) = &state[c.source] {
                            for s in 0..src_state_dim {
                                let w = c.map.get(0, s);
                                if w != 0.0 {
                                    for j in 0..ambient_dim {
                                        row[j] += w * xsrc.get(s, j);
                                    }
                                }
                            }
                        }
                        rows.push(row);
                    }
                    coupling[idx] = Some(if rows.is_empty() {
                        Matrix::zeros(0, ambient_dim)
                    } else {
                        Matrix::from_rows(&rows)?
                    });
                    progressed = true;
                }
            }
            if state[idx].is_none() {
                let cdim = sub.coupling_dim();
                let y_block_zero = (0..sub.state_dim)
                    .all(|r| (0..cdim).all(|j| sub.transition.get(r, j) == 0.0));
                if y_block_zero || coupling[idx].is_some() {
                    let mut rows = Vec::with_capacity(sub.state_dim);
                    for r in 0..sub.state_dim {
                        let mut row = vec![0.0; ambient_dim];
                        for j in 0..ambient_dim {
                            row[j] = sub.transition.get(r, cdim + j);
                        }
                        if let Some(y) = &coupling[idx] {
                            for s in 0..cdim {
                                let w = sub.transition.get(r, s);
                                if w != 0.0 {
                                    for j in 0..ambient_dim {
                                        row[j] += w * y.get(s, j);
                                    }
                                }
                            }
                        }
                        rows.push(row);
                    }
                    state[idx] = Some(if rows.is_empty() {
                        Matrix::zeros(0, ambient_dim)
                    } else {
                        Matrix::from_rows(&rows)?
                    });
                    progressed = true;
                }
            }
        }
        if state.iter().all(Option::is_some) && coupling.iter().all(Option::is_some) {
            return Ok(ResolvedMaps {
                state: state.into_iter().map(Option::unwrap).collect(),
                coupling: coupling.into_iter().map(Option::unwrap).collect(),
            });
        }
        if !progressed {
            break;
        }
    }
    Err(Error::Unsupported(
        "cyclic state/coupling dependence; explicit one-pass transitions required".into(),
    ))
}

/// The centralized problem: substituted objective over the ambient design
/// vector, pooled constraint set, ownership and naming metadata.
#[derive(Debug, Clone)]
pub struct AggregateProblem {
    pub objective: QuadraticObjective,
    pub feasible: PolyhedralSet,
    pub dim: usize,
    pub var_names: Vec<String>,
    /// Per ambient variable, the agents that own it.
    pub owners: Vec<Vec<usize>>,
    pub maps: ResolvedMaps,
}

/// Assemble the centralized equivalent of a distributed instance: couplings
/// substituted into every objective, constraint sets intersected.
pub fn build_global_aggregate(subspaces: &[Subspace], ambient_dim: usize) -> Result<AggregateProblem> {
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); ambient_dim];
    for sub in subspaces {
        for &v in sub.local_vars.iter().chain(&sub.shared_vars) {
            if v >= ambient_dim {
                return Err(Error::Dimension {
                    what: "ambient variable index",
                    expected: ambient_dim,
                    got: v,
                });
            }
            owners[v].push(sub.id);
        }
    }
    for sub in subspaces {
        for &v in &sub.local_vars {
            if owners[v].len() != 1 {
                return Err(Error::Unsupported(format!(
                    "local variable {v} of agent {} is claimed by several agents",
                    sub.id
                )));
            }
        }
    }

    let maps = resolve_maps(subspaces, ambient_dim)?;
    let mut objective = QuadraticObjective::zero(ambient_dim);
    let mut feasible = PolyhedralSet::whole_space(ambient_dim);
    for (idx, sub) in subspaces.iter().enumerate() {
        let stacked_dim = sub.state_dim + sub.coupling_dim() + ambient_dim;
        if sub.objective.dim() != stacked_dim {
            return Err(Error::Dimension {
                what: "subspace objective",
                expected: stacked_dim,
                got: sub.objective.dim(),
            });
        }
        // M maps z to the stacked [x; y; z].
        let mut m = Matrix::zeros(stacked_dim, ambient_dim);
        for r in 0..sub.state_dim {
            for j in 0..ambient_dim {
                m.set(r, j, maps.state[idx].get(r, j));
            }
        }
        for r in 0..sub.coupling_dim() {
            for j in 0..ambient_dim {
                m.set(sub.state_dim + r, j, maps.coupling[idx].get(r, j));
            }
        }
        for j in 0..ambient_dim {
            m.set(sub.state_dim + sub.coupling_dim() + j, j, 1.0);
        }
        objective = objective.add(&sub.objective.compose(&m)?)?;
        feasible = feasible.intersect(&sub.feasible_set)?;
    }

    Ok(AggregateProblem {
        objective,
        feasible,
        dim: ambient_dim,
        var_names: (0..ambient_dim).map(|i| format!("z{}", i + 1)).collect(),
        owners,
        maps,
    })
}
