//! Iteration kernels: average consensus, constrained consensus, the
//! distributed projected subgradient step, the interleaved and multi-step
//! collaborative design iterations, derived mixing weights for the special
//! quadratic class, and stepsize schedules.
//!
//! Every kernel is a pure function from the iteration-k snapshot to the
//! iteration-k+1 states; agents never communicate inside a step, so callers
//! may evaluate agents concurrently and publish after the barrier.

use crate::error::{Error, Result};
use crate::geometry::PolyhedralSet;
use crate::graph::{EdgeSet, WeightMatrix};
use crate::linalg::Matrix;
use crate::model::SpecialQdp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepsizeKind {
    Constant,
    Harmonic,
}

/// `α_k = base` (constant) or `α_k = base / (k+1)` (harmonic). The harmonic
/// rule has divergent sum and convergent square-sum by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepsizeSchedule {
    pub kind: StepsizeKind,
    pub base: f64,
}

impl StepsizeSchedule {
    pub fn constant(base: f64) -> Self {
        StepsizeSchedule {
            kind: StepsizeKind::Constant,
            base,
        }
    }

    pub fn harmonic(base: f64) -> Self {
        StepsizeSchedule {
            kind: StepsizeKind::Harmonic,
            base,
        }
    }

    pub fn at(&self, k: usize) -> f64 {
        match self.kind {
            StepsizeKind::Constant => self.base,
            StepsizeKind::Harmonic => self.base / (k as f64 + 1.0),
        }
    }
}

fn check_states(states: &[Vec<f64>], weights: &WeightMatrix) -> Result<usize> {
    let m = weights.num_agents();
    if states.len() != m {
        return Err(Error::Dimension {
            what: "agent states",
            expected: m,
            got: states.len(),
        });
    }
    let dim = states.first().map_or(0, Vec::len);
    for s in states {
        if s.len() != dim {
            return Err(Error::Dimension {
                what: "state vector",
                expected: dim,
                got: s.len(),
            });
        }
    }
    Ok(dim)
}

/// Convex combinations `v_i = Σ_j a_ij z_j`.
pub fn mix(states: &[Vec<f64>], weights: &WeightMatrix) -> Result<Vec<Vec<f64>>> {
    let dim = check_states(states, weights)?;
    let m = states.len();
    let mut out = vec![vec![0.0; dim]; m];
    for i in 0..m {
        for j in 0..m {
            let a = weights.get(i, j);
            if a == 0.0 {
                continue;
            }
            for d in 0..dim {
                out[i][d] += a * states[j][d];
            }
        }
    }
    Ok(out)
}

/// Damped combinations `v_i = z_i + α (Σ_j a_ij z_j − z_i)`; `α = 1` is the
/// plain convex combination (returned exactly).
pub fn mix_damped(states: &[Vec<f64>], weights: &WeightMatrix, alpha: f64) -> Result<Vec<Vec<f64>>> {
    if alpha == 1.0 {
        return mix(states, weights);
    }
    let mixed = mix(states, weights)?;
    Ok(states
        .iter()
        .zip(&mixed)
        .map(|(z, v)| {
            z.iter()
                .zip(v)
                .map(|(zi, vi)| zi + alpha * (vi - zi))
                .collect()
        })
        .collect())
}

/// Raw matrix action `v_i = Σ_j m_ij z_j` for matrices that are not valid
/// mixing weights (e.g. the derived weights of the special quadratic class).
pub fn mix_with_matrix(states: &[Vec<f64>], matrix: &Matrix) -> Result<Vec<Vec<f64>>> {
    if states.len() != matrix.rows() {
        return Err(Error::Dimension {
            what: "agent states",
            expected: matrix.rows(),
            got: states.len(),
        });
    }
    let dim = states.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; dim]; states.len()];
    for i in 0..states.len() {
        for j in 0..states.len() {
            let a = matrix.get(i, j);
            if a == 0.0 {
                continue;
            }
            for d in 0..dim {
                out[i][d] += a * states[j][d];
            }
        }
    }
    Ok(out)
}

/// One average-consensus sweep: `z_i ← z_i + Σ_j a_ij (z_j − z_i)`.
pub fn consensus_step(states: &[Vec<f64>], weights: &WeightMatrix) -> Result<Vec<Vec<f64>>> {
    let dim = check_states(states, weights)?;
    let m = states.len();
    let mut out = states.to_vec();
    for i in 0..m {
        for j in 0..m {
            let a = weights.get(i, j);
            if a == 0.0 || i == j {
                continue;
            }
            for d in 0..dim {
                out[i][d] += a * (states[j][d] - states[i][d]);
            }
        }
    }
    Ok(out)
}

/// Constrained consensus: mix, then project each agent onto its own set.
pub fn constrained_consensus_step(
    states: &[Vec<f64>],
    weights: &WeightMatrix,
    sets: &[PolyhedralSet],
) -> Result<Vec<Vec<f64>>> {
    check_sets(states, sets)?;
    let mixed = mix(states, weights)?;
    mixed
        .iter()
        .zip(sets)
        .map(|(v, set)| set.project_default(v))
        .collect()
}

fn check_sets(states: &[Vec<f64>], sets: &[PolyhedralSet]) -> Result<()> {
    if sets.len() != states.len() {
        return Err(Error::Dimension {
            what: "constraint sets",
            expected: states.len(),
            got: sets.len(),
        });
    }
    Ok(())
}

/// Projected subgradient step: `z_i ← P_i[v_i − α_k d_i]` with `v_i` the
/// mixed point. The caller must have evaluated `gradients[i]` at `v_i`
/// (two-phase contract: mix first via [`mix`], then differentiate there).
pub fn projected_subgradient_step(
    states: &[Vec<f64>],
    weights: &WeightMatrix,
    sets: &[PolyhedralSet],
    gradients: &[Vec<f64>],
    alpha_k: f64,
) -> Result<Vec<Vec<f64>>> {
    check_sets(states, sets)?;
    if gradients.len() != states.len() {
        return Err(Error::Dimension {
            what: "gradients",
            expected: states.len(),
            got: gradients.len(),
        });
    }
    let mixed = mix(states, weights)?;
    mixed
        .iter()
        .zip(gradients.iter().zip(sets))
        .map(|(v, (g, set))| {
            if g.len() != v.len() {
                return Err(Error::Dimension {
                    what: "gradient vector",
                    expected: v.len(),
                    got: g.len(),
                });
            }
            let stepped: Vec<f64> = v.iter().zip(g).map(|(vi, gi)| vi - alpha_k * gi).collect();
            set.project_default(&stepped)
        })
        .collect()
}

/// Which form of the interleaved update to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterleavedMode {
    /// As printed: `P_i[α Σ_j a_ij z_j − γ d_i]` with the gradient taken at
    /// the agent's previous point `z_i(k)`. The leading `α` scales the whole
    /// mixed sum, so `α ≠ 1` breaks the convex-combination structure.
    Literal,
    /// `α` damps the mixing instead (`v_i = z_i + α(Σ a_ij z_j − z_i)`), and
    /// the gradient is taken at the mixed point `v_i`. With `α = 1` this is
    /// exactly the projected subgradient step.
    Standard,
}

/// One interleaved collaborative-design step. `gradient(i, point)` supplies
/// agent `i`'s objective gradient at the mode's evaluation point.
pub fn cmdo_interleaved_step<G>(
    gradient: G,
    states: &[Vec<f64>],
    weights: &WeightMatrix,
    alpha: f64,
    gamma: f64,
    sets: &[PolyhedralSet],
    mode: InterleavedMode,
) -> Result<Vec<Vec<f64>>>
where
    G: Fn(usize, &[f64]) -> Vec<f64>,
{
    check_sets(states, sets)?;
    match mode {
        InterleavedMode::Literal => {
            let mixed = mix(states, weights)?;
            (0..states.len())
                .map(|i| {
                    let g = gradient(i, &states[i]);
                    let stepped: Vec<f64> = mixed[i]
                        .iter()
                        .zip(&g)
                        .map(|(vi, gi)| alpha * vi - gamma * gi)
                        .collect();
                    sets[i].project_default(&stepped)
                })
                .collect()
        }
        InterleavedMode::Standard => {
            let mixed = mix_damped(states, weights, alpha)?;
            (0..states.len())
                .map(|i| {
                    let stepped: Vec<f64> = if gamma == 0.0 {
                        mixed[i].clone()
                    } else {
                        let g = gradient(i, &mixed[i]);
                        mixed[i]
                            .iter()
                            .zip(&g)
                            .map(|(vi, gi)| vi - gamma * gi)
                            .collect()
                    };
                    sets[i].project_default(&stepped)
                })
                .collect()
        }
    }
}

/// Objective and gradient access for the multi-step iteration. Both are
/// evaluated on ambient design vectors; coupling and state refreshes are
/// linear in the design estimate, so the hooks fold them in pointwise.
pub struct MultistepHooks<'a> {
    pub objective: &'a dyn Fn(usize, &[f64]) -> f64,
    pub gradient: &'a dyn Fn(usize, &[f64]) -> Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct MultistepParams {
    /// Mixing damping `α_i(k)`.
    pub alpha: f64,
    /// Inner gradient-descent step budget.
    pub inner_budget: usize,
    /// Initial inner stepsize (backtracking halves it on objective increase).
    pub inner_step: f64,
    /// Outer iteration index, for error diagnostics.
    pub iteration: usize,
}

/// One multi-step iteration: damped mixing of (owned) shared estimates,
/// implicit coupling/state refresh through the hooks, a fixed budget of
/// backtracking gradient-descent steps from the mixed point, projection onto
/// each agent's set.
pub fn cmdo_multistep_iteration(
    hooks: &MultistepHooks,
    states: &[Vec<f64>],
    weights: &WeightMatrix,
    active_edges: Option<&EdgeSet>,
    params: MultistepParams,
    sets: &[PolyhedralSet],
    masks: Option<&[Vec<usize>]>,
) -> Result<Vec<Vec<f64>>> {
    check_sets(states, sets)?;
    let effective;
    let weights = match active_edges {
        Some(active) => {
            effective = weights.effective(active);
            &effective
        }
        None => weights,
    };
    let mixed = match masks {
        None => mix_damped(states, weights, params.alpha)?,
        Some(masks) => masked_damped_mix(states, weights, params.alpha, masks)?,
    };
    let mut out = Vec::with_capacity(states.len());
    for (i, start) in mixed.iter().enumerate() {
        let owned = masks.map(|m| m[i].as_slice());
        let optimized = inner_descent(hooks, i, start, params, owned)?;
        out.push(sets[i].project_default(&optimized)?);
    }
    Ok(out)
}

/// Damped mixing where each component is averaged only among the agents that
/// own it, with dropped weight folding into the diagonal (the discrepancy
/// form keeps every per-component matrix row stochastic).
fn masked_damped_mix(
    states: &[Vec<f64>],
    weights: &WeightMatrix,
    alpha: f64,
    masks: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let dim = check_states(states, weights)?;
    if masks.len() != states.len() {
        return Err(Error::Dimension {
            what: "ownership masks",
            expected: states.len(),
            got: masks.len(),
        });
    }
    let m = states.len();
    let mut owner_of = vec![Vec::new(); dim];
    for (agent, mask) in masks.iter().enumerate() {
        for &c in mask {
            if c >= dim {
                return Err(Error::Dimension {
                    what: "ownership mask component",
                    expected: dim,
                    got: c,
                });
            }
            owner_of[c].push(agent);
        }
    }
    let mut out = states.to_vec();
    for c in 0..dim {
        let owners = &owner_of[c];
        for &i in owners {
            let mut delta = 0.0;
            for &j in owners {
                if j == i {
                    continue;
                }
                delta += weights.get(i, j) * (states[j][c] - states[i][c]);
            }
            out[i][c] = states[i][c] + alpha * delta;
        }
    }
    let _ = m;
    Ok(out)
}

/// Fixed-budget gradient descent with backtracking halving. An inner step
/// whose objective cannot be made non-increasing counts as a rise; three
/// consecutive rises abort with diagnostics.
fn inner_descent(
    hooks: &MultistepHooks,
    agent: usize,
    start: &[f64],
    params: MultistepParams,
    owned: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let mut z = start.to_vec();
    let mut consecutive = 0usize;
    for _ in 0..params.inner_budget {
        let f0 = (hooks.objective)(agent, &z);
        let mut g = (hooks.gradient)(agent, &z);
        if g.len() != z.len() {
            return Err(Error::Dimension {
                what: "hook gradient",
                expected: z.len(),
                got: g.len(),
            });
        }
        if let Some(owned) = owned {
            let mut masked = vec![0.0; g.len()];
            for &c in owned {
                masked[c] = g[c];
            }
            g = masked;
        }
        let mut step = params.inner_step;
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<f64> = z.iter().zip(&g).map(|(zi, gi)| zi - step * gi).collect();
            let f1 = (hooks.objective)(agent, &cand);
            if f1 <= f0 + 1e-12 * f0.abs().max(1.0) {
                z = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if accepted {
            consecutive = 0;
        } else {
            consecutive += 1;
            if consecutive >= 3 {
                return Err(Error::InnerDivergence {
                    agent,
                    iteration: params.iteration,
                    consecutive,
                    objective: f0,
                });
            }
        }
    }
    Ok(z)
}

/// The derived mixing weights of the special quadratic class:
/// `a'_ij = a_ij − 2 α_i c_j b'_j²` and `β_ij = 2 α_i c_j b'_j²`,
/// so `a'_ij + β_ij = a_ij` identically.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedWeights {
    pub a_prime: Matrix,
    pub beta: Matrix,
}

pub fn build_derived_weights(
    problem: &SpecialQdp,
    weights: &WeightMatrix,
    alpha: &[f64],
) -> Result<DerivedWeights> {
    let m = problem.num_agents();
    if weights.num_agents() != m {
        return Err(Error::Dimension {
            what: "derived weights matrix",
            expected: m,
            got: weights.num_agents(),
        });
    }
    if alpha.len() != m {
        return Err(Error::Dimension {
            what: "derived weights alpha",
            expected: m,
            got: alpha.len(),
        });
    }
    let mut a_prime = Matrix::zeros(m, m);
    let mut beta = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let bp = problem.b_prime()[j];
            let term = 2.0 * alpha[i] * problem.c()[j] * bp * bp;
            beta.set(i, j, term);
            a_prime.set(i, j, weights.get(i, j) - term);
        }
    }
    Ok(DerivedWeights { a_prime, beta })
}

/// One interleaved step for the special quadratic class in per-agent scalar
/// coordinates: `z_i ← P_i[Σ_j a_ij z_j − α_i Σ_j 2 c_j b'_j (b'_j z_j − t_j)]`.
pub fn special_interleaved_step(
    problem: &SpecialQdp,
    states: &[f64],
    weights: &WeightMatrix,
    alpha: &[f64],
    sets: &[PolyhedralSet],
) -> Result<Vec<f64>> {
    let m = problem.num_agents();
    if states.len() != m || alpha.len() != m || sets.len() != m {
        return Err(Error::Dimension {
            what: "special interleaved inputs",
            expected: m,
            got: states.len().min(alpha.len()).min(sets.len()),
        });
    }
    let g_sum = problem.gradient_substituted_sum(states);
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mixed: f64 = (0..m).map(|j| weights.get(i, j) * states[j]).sum();
        let stepped = mixed - alpha[i] * g_sum;
        out.push(sets[i].project_default(&[stepped])?[0]);
    }
    Ok(out)
}

/// The same step through the derived weights: `z_i ← P_i[Σ_j (a'_ij z_j +
/// 2 α_i c_j b'_j t_j)]`, i.e. the gradient folded into the mixing matrix
/// with the target drive expanded consistently.
pub fn special_rewritten_step(
    problem: &SpecialQdp,
    states: &[f64],
    weights: &WeightMatrix,
    alpha: &[f64],
    sets: &[PolyhedralSet],
) -> Result<Vec<f64>> {
    let m = problem.num_agents();
    let derived = build_derived_weights(problem, weights, alpha)?;
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..m {
            acc += derived.a_prime.get(i, j) * states[j]
                + 2.0 * alpha[i] * problem.c()[j] * problem.b_prime()[j] * problem.t()[j];
        }
        out.push(sets[i].project_default(&[acc])?[0]);
    }
    Ok(out)
}

/// Feed the same snapshot through the direct interleaved form and the
/// derived-weight rewriting; the return value is the largest per-agent
/// deviation between the two outputs (diagnostic, expected at rounding
/// level).
pub fn step_equivalence_check(
    problem: &SpecialQdp,
    states: &[f64],
    weights: &WeightMatrix,
    alpha: &[f64],
    sets: &[PolyhedralSet],
) -> Result<f64> {
    let direct = special_interleaved_step(problem, states, weights, alpha, sets)?;
    let rewritten = special_rewritten_step(problem, states, weights, alpha, sets)?;
    Ok(direct
        .iter()
        .zip(&rewritten)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_weights, CommGraph, WeightScheme};
    use crate::linalg::dist;

    fn uniform(m: usize) -> WeightMatrix {
        build_weights(&CommGraph::complete(m).unwrap(), WeightScheme::Uniform).unwrap()
    }

    fn whole(m: usize, dim: usize) -> Vec<PolyhedralSet> {
        (0..m).map(|_| PolyhedralSet::whole_space(dim)).collect()
    }

    fn hs1(normal: f64, offset: f64) -> PolyhedralSet {
        PolyhedralSet::new(
            1,
            vec![crate::geometry::Halfspace::new(vec![normal], offset).unwrap()],
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn consensus_identical_states_unchanged() {
        let w = uniform(3);
        let states = vec![vec![2.0, -1.0]; 3];
        let out = consensus_step(&states, &w).unwrap();
        assert_eq!(out, states);
    }

    #[test]
    fn consensus_two_agents_average() {
        let w = uniform(2);
        let out = consensus_step(&[vec![0.0], vec![2.0]], &w).unwrap();
        assert!((out[0][0] - 1.0).abs() < 1e-15);
        assert!((out[1][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn consensus_path_metropolis_preserves_mean() {
        let g = CommGraph::path(3).unwrap();
        let w = build_weights(&g, WeightScheme::Metropolis).unwrap();
        let out = consensus_step(&[vec![0.0], vec![0.0], vec![3.0]], &w).unwrap();
        let mean: f64 = out.iter().map(|s| s[0]).sum::<f64>() / 3.0;
        assert!((mean - 1.0).abs() <= 1e-12);
        assert!((out[1][0] - 1.0).abs() < 1e-15);
        assert!((out[2][0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constrained_consensus_whole_space_is_mixing() {
        let w = uniform(3);
        let states = vec![vec![1.0, 0.0], vec![0.0, 3.0], vec![-1.0, 0.0]];
        let plain = mix(&states, &w).unwrap();
        let constrained = constrained_consensus_step(&states, &w, &whole(3, 2)).unwrap();
        for (a, b) in plain.iter().zip(&constrained) {
            assert!(dist(a, b) < 1e-15);
        }
    }

    #[test]
    fn constrained_consensus_opposite_halfspaces() {
        let w = uniform(2);
        let sets = vec![hs1(1.0, 0.0), hs1(-1.0, 0.0)]; // w <= 0 and w >= 0
        let out = constrained_consensus_step(&[vec![-1.0], vec![1.0]], &w, &sets).unwrap();
        assert!(out[0][0].abs() < 1e-12);
        assert!(out[1][0].abs() < 1e-12);
    }

    #[test]
    fn constrained_consensus_fixed_point_in_intersection() {
        let w = uniform(2);
        let eq = crate::geometry::AffineSet::new(
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            vec![5.0],
        )
        .unwrap();
        let set = PolyhedralSet::new(1, vec![], Some(eq), None).unwrap();
        let sets = vec![set.clone(), set];
        let out = constrained_consensus_step(&[vec![5.0], vec![5.0]], &w, &sets).unwrap();
        assert!((out[0][0] - 5.0).abs() < 1e-12);
        assert!((out[1][0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn subgradient_zero_step_reduces_to_constrained_consensus() {
        let w = uniform(2);
        let sets = vec![hs1(1.0, 0.5), hs1(-1.0, 0.5)];
        let states = vec![vec![-1.0], vec![1.0]];
        let gradients = vec![vec![7.0], vec![-3.0]];
        let with_grad = projected_subgradient_step(&states, &w, &sets, &gradients, 0.0).unwrap();
        let without = constrained_consensus_step(&states, &w, &sets).unwrap();
        for (a, b) in with_grad.iter().zip(&without) {
            assert!(dist(a, b) <= 1e-12);
        }
    }

    #[test]
    fn subgradient_single_agent_quadratic() {
        // f = w², α = 0.25, z = 1 → 0.5
        let g = CommGraph::new(1, []).unwrap();
        let w = build_weights(&g, WeightScheme::Uniform).unwrap();
        let sets = whole(1, 1);
        let states = vec![vec![1.0]];
        let v = mix(&states, &w).unwrap();
        let gradients = vec![vec![2.0 * v[0][0]]];
        let out = projected_subgradient_step(&states, &w, &sets, &gradients, 0.25).unwrap();
        assert!((out[0][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn subgradient_projects_back_to_feasible() {
        // f = w², set {w >= 0}, α = 1, z = 0.5 → gradient step to −0.5 → 0
        let g = CommGraph::new(1, []).unwrap();
        let w = build_weights(&g, WeightScheme::Uniform).unwrap();
        let sets = vec![hs1(-1.0, 0.0)];
        let states = vec![vec![0.5]];
        let gradients = vec![vec![1.0]];
        let out = projected_subgradient_step(&states, &w, &sets, &gradients, 1.0).unwrap();
        assert!(out[0][0].abs() < 1e-15);
    }

    #[test]
    fn interleaved_gamma_zero_is_constrained_consensus() {
        let w = uniform(3);
        let sets = vec![hs1(1.0, 1.0), hs1(1.0, 2.0), hs1(-1.0, 5.0)];
        let states = vec![vec![0.5], vec![1.5], vec![-2.0]];
        let grad = |_: usize, p: &[f64]| vec![100.0 * p[0]]; // must be ignored
        for mode in [InterleavedMode::Literal, InterleavedMode::Standard] {
            let step =
                cmdo_interleaved_step(grad, &states, &w, 1.0, 0.0, &sets, mode).unwrap();
            let cc = constrained_consensus_step(&states, &w, &sets).unwrap();
            for (a, b) in step.iter().zip(&cc) {
                assert!(dist(a, b) <= 1e-12);
            }
        }
    }

    #[test]
    fn interleaved_standard_matches_projected_subgradient_per_step() {
        let g = CommGraph::ring(4).unwrap();
        let w = build_weights(&g, WeightScheme::Metropolis).unwrap();
        let set = hs1(1.0, 2.0);
        let sets: Vec<_> = (0..4).map(|_| set.clone()).collect();
        let q = |p: &[f64]| vec![2.0 * p[0] + 0.7];
        let mut a_states = vec![vec![0.3], vec![-1.0], vec![2.0], vec![0.9]];
        let mut b_states = a_states.clone();
        for k in 0..25 {
            let alpha_k = 1.0 / (k as f64 + 1.0);
            a_states = cmdo_interleaved_step(
                |_, p| q(p),
                &a_states,
                &w,
                1.0,
                alpha_k,
                &sets,
                InterleavedMode::Standard,
            )
            .unwrap();
            let v = mix(&b_states, &w).unwrap();
            let gradients: Vec<Vec<f64>> = v.iter().map(|p| q(p)).collect();
            b_states =
                projected_subgradient_step(&b_states, &w, &sets, &gradients, alpha_k).unwrap();
            for (a, b) in a_states.iter().zip(&b_states) {
                assert!(dist(a, b) <= 1e-12, "diverged at step {k}");
            }
        }
    }

    #[test]
    fn convex_hull_containment_without_updates() {
        let g = CommGraph::ring(5).unwrap();
        let w = build_weights(&g, WeightScheme::Metropolis).unwrap();
        let mut states: Vec<Vec<f64>> =
            (0..5).map(|i| vec![i as f64, (i as f64) * -0.5]).collect();
        let lo: Vec<f64> = (0..2)
            .map(|d| states.iter().map(|s| s[d]).fold(f64::INFINITY, f64::min))
            .collect();
        let hi: Vec<f64> = (0..2)
            .map(|d| states.iter().map(|s| s[d]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for _ in 0..100 {
            states = consensus_step(&states, &w).unwrap();
            for s in &states {
                for d in 0..2 {
                    assert!(s[d] >= lo[d] - 1e-12 && s[d] <= hi[d] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn mean_preserved_under_doubly_stochastic_weights() {
        let g = CommGraph::ring(6).unwrap();
        let w = build_weights(&g, WeightScheme::Metropolis).unwrap();
        let states: Vec<Vec<f64>> = (0..6).map(|i| vec![(i * i) as f64 - 3.0]).collect();
        let mean0: f64 = states.iter().map(|s| s[0]).sum::<f64>() / 6.0;
        let out = consensus_step(&states, &w).unwrap();
        let mean1: f64 = out.iter().map(|s| s[0]).sum::<f64>() / 6.0;
        assert!((mean0 - mean1).abs() <= 1e-12);
    }

    #[test]
    fn multistep_budget_zero_full_alpha_is_constrained_consensus() {
        let w = uniform(3);
        let sets = vec![hs1(1.0, 1.0), hs1(1.0, 2.0), hs1(-1.0, 5.0)];
        let states = vec![vec![0.5], vec![1.5], vec![-2.0]];
        let objective = |_: usize, p: &[f64]| p[0] * p[0];
        let gradient = |_: usize, p: &[f64]| vec![2.0 * p[0]];
        let hooks = MultistepHooks {
            objective: &objective,
            gradient: &gradient,
        };
        let out = cmdo_multistep_iteration(
            &hooks,
            &states,
            &w,
            None,
            MultistepParams {
                alpha: 1.0,
                inner_budget: 0,
                inner_step: 0.1,
                iteration: 0,
            },
            &sets,
            None,
        )
        .unwrap();
        let cc = constrained_consensus_step(&states, &w, &sets).unwrap();
        for (a, b) in out.iter().zip(&cc) {
            assert!(dist(a, b) <= 1e-12);
        }
    }

    #[test]
    fn multistep_single_agent_finds_constrained_minimizer() {
        // Isotropic objective (x−2)² + (y−3)² over {x + y <= 0}: the
        // constrained minimizer is the projection of (2, 3), i.e. (−0.5, 0.5).
        let g = CommGraph::new(1, []).unwrap();
        let w = build_weights(&g, WeightScheme::Uniform).unwrap();
        let set = PolyhedralSet::new(
            2,
            vec![crate::geometry::Halfspace::new(vec![1.0, 1.0], 0.0).unwrap()],
            None,
            None,
        )
        .unwrap();
        let objective =
            |_: usize, p: &[f64]| (p[0] - 2.0).powi(2) + (p[1] - 3.0).powi(2);
        let gradient = |_: usize, p: &[f64]| vec![2.0 * (p[0] - 2.0), 2.0 * (p[1] - 3.0)];
        let hooks = MultistepHooks {
            objective: &objective,
            gradient: &gradient,
        };
        let mut states = vec![vec![0.0, 0.0]];
        for k in 0..2000 {
            states = cmdo_multistep_iteration(
                &hooks,
                &states,
                &w,
                None,
                MultistepParams {
                    alpha: 1.0,
                    inner_budget: 4,
                    inner_step: 0.2,
                    iteration: k,
                },
                std::slice::from_ref(&set),
                None,
            )
            .unwrap();
        }
        assert!(dist(&states[0], &[-0.5, 0.5]) < 1e-6, "got {:?}", states[0]);
    }

    #[test]
    fn multistep_reports_divergence_on_ascent_hooks() {
        let g = CommGraph::new(1, []).unwrap();
        let w = build_weights(&g, WeightScheme::Uniform).unwrap();
        let objective = |_: usize, p: &[f64]| p[0] * p[0];
        // Deliberately inconsistent hook: points uphill, so no halving helps.
        let gradient = |_: usize, p: &[f64]| vec![-2.0 * p[0]];
        let hooks = MultistepHooks {
            objective: &objective,
            gradient: &gradient,
        };
        let states = vec![vec![1.0]];
        let err = cmdo_multistep_iteration(
            &hooks,
            &states,
            &w,
            None,
            MultistepParams {
                alpha: 1.0,
                inner_budget: 10,
                inner_step: 0.5,
                iteration: 7,
            },
            &whole(1, 1),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InnerDivergence { agent: 0, .. }));
    }

    #[test]
    fn masked_mix_touches_only_owners() {
        let g = CommGraph::ring(3).unwrap();
        let w = build_weights(&g, WeightScheme::Metropolis).unwrap();
        let states = vec![vec![1.0, 10.0], vec![3.0, 20.0], vec![5.0, 30.0]];
        // Component 0 owned by agents 0 and 1; component 1 only by agent 2.
        let masks = vec![vec![0], vec![0], vec![1]];
        let out = masked_damped_mix(&states, &w, 1.0, &masks).unwrap();
        assert!(out[0][0] > 1.0 && out[1][0] < 3.0); // moved toward each other
        assert_eq!(out[0][1], 10.0); // untouched non-owned components
        assert_eq!(out[1][1], 20.0);
        assert_eq!(out[2][1], 30.0); // sole owner has nobody to mix with
        assert_eq!(out[2][0], 5.0);
    }

    fn sample_qdp(m: usize, zero_targets: bool) -> SpecialQdp {
        let mut b = Matrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    b.set(i, j, 0.1 * ((i + 2 * j) % 3) as f64 - 0.05);
                }
            }
        }
        let c: Vec<f64> = (0..m).map(|i| 0.5 + 0.25 * i as f64).collect();
        let t: Vec<f64> = if zero_targets {
            vec![0.0; m]
        } else {
            (0..m).map(|i| (i as f64) - 1.25).collect()
        };
        SpecialQdp::unconstrained(c, t, b).unwrap()
    }

    #[test]
    fn derived_weights_vanish_with_zero_alpha() {
        let p = sample_qdp(3, false);
        let w = uniform(3);
        let d = build_derived_weights(&p, &w, &[0.0; 3]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d.beta.get(i, j), 0.0);
                assert_eq!(d.a_prime.get(i, j), w.get(i, j));
            }
        }
    }

    #[test]
    fn derived_weights_vanish_when_columns_sum_to_one() {
        // b'_j = 0 for every column annihilates both update matrices.
        let mut b = Matrix::zeros(2, 2);
        b.set(0, 0, 0.5);
        b.set(1, 0, 0.5);
        b.set(0, 1, 1.0);
        let p = SpecialQdp::unconstrained(vec![1.0, 1.0], vec![0.0, 0.0], b).unwrap();
        let w = uniform(2);
        let d = build_derived_weights(&p, &w, &[0.3, 0.3]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(d.beta.get(i, j), 0.0);
                assert_eq!(d.a_prime.get(i, j), w.get(i, j));
            }
        }
    }

    #[test]
    fn derived_weights_hand_values() {
        // m=2 uniform a=1/2, alpha=0.1, c=(1,1), B=0 so b'=1:
        // a'_ij = 0.5 − 0.2 = 0.3 and beta_ij = 0.2.
        let p = SpecialQdp::unconstrained(vec![1.0, 1.0], vec![0.0, 0.0], Matrix::zeros(2, 2))
            .unwrap();
        let w = uniform(2);
        let d = build_derived_weights(&p, &w, &[0.1, 0.1]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((d.a_prime.get(i, j) - 0.3).abs() < 1e-15);
                assert!((d.beta.get(i, j) - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn derived_weights_split_identity() {
        let p = sample_qdp(4, false);
        let w = uniform(4);
        let alpha = [0.05, 0.1, 0.15, 0.2];
        let d = build_derived_weights(&p, &w, &alpha).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let recombined = d.a_prime.get(i, j) + d.beta.get(i, j);
                assert!((recombined - w.get(i, j)).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn step_equivalence_zero_alpha_is_exact() {
        let p = sample_qdp(3, false);
        let w = uniform(3);
        let sets = whole(3, 1);
        let dev =
            step_equivalence_check(&p, &[0.4, -0.2, 1.1], &w, &[0.0; 3], &sets).unwrap();
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn step_equivalence_random_instance() {
        let p = sample_qdp(4, false);
        let w = uniform(4);
        let sets = whole(4, 1);
        let alpha = [0.05; 4];
        let dev =
            step_equivalence_check(&p, &[0.4, -0.2, 1.1, 0.3], &w, &alpha, &sets).unwrap();
        assert!(dev <= 1e-12, "deviation {dev}");
    }

    #[test]
    fn zero_target_instances_reduce_to_projected_consensus() {
        let p = sample_qdp(4, true);
        let w = uniform(4);
        let sets: Vec<PolyhedralSet> = (0..4)
            .map(|i| hs1(1.0, 2.0 + i as f64)) // z_i <= 2 + i
            .collect();
        let alpha = [0.04; 4];
        let derived = build_derived_weights(&p, &w, &alpha).unwrap();
        let mut direct = vec![0.9, -0.7, 0.3, 1.8];
        let mut consensus_form = direct.clone();
        for _ in 0..30 {
            direct = special_interleaved_step(&p, &direct, &w, &alpha, &sets).unwrap();
            let mixed = mix_with_matrix(
                &consensus_form.iter().map(|&z| vec![z]).collect::<Vec<_>>(),
                &derived.a_prime,
            )
            .unwrap();
            consensus_form = mixed
                .iter()
                .zip(&sets)
                .map(|(v, set)| set.project_default(v).map(|p| p[0]))
                .collect::<Result<Vec<f64>>>()
                .unwrap();
            for (a, b) in direct.iter().zip(&consensus_form) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn harmonic_stepsize_rule() {
        let s = StepsizeSchedule::harmonic(2.0);
        assert_eq!(s.at(0), 2.0);
        assert_eq!(s.at(1), 1.0);
        assert_eq!(s.at(3), 0.5);
        let c = StepsizeSchedule::constant(0.3);
        assert_eq!(c.at(0), 0.3);
        assert_eq!(c.at(1000), 0.3);
    }
}
