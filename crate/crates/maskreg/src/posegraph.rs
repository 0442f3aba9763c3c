//! Pose-graph fusion of pairwise registration posteriors: Levenberg-Marquardt
//! over SE(3) tangent updates, maximizing the joint Gaussian probability of
//! all relative-transform measurements. The first node is held fixed as the
//! gauge constraint.

use crate::geometry::{exp6, log6, GeometryError, RigidTransform, Vec6};
use nalgebra::{DMatrix, DVector, Matrix6};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseGraphError {
    #[error("graph is not connected")]
    Disconnected,
    #[error("graph has no nodes")]
    Empty,
    #[error("edge references unknown node id {0}")]
    UnknownNode(usize),
    #[error("duplicate node id {0}")]
    DuplicateNode(usize),
    #[error("normal equations are singular")]
    SingularSystem,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone)]
pub struct PoseNode {
    pub id: usize,
    pub pose: RigidTransform,
}

#[derive(Debug, Clone)]
pub struct PoseEdge {
    pub from: usize,
    pub to: usize,
    /// Measured transform mapping `from`'s frame into `to`'s frame.
    pub measurement: RigidTransform,
    /// Inverse of the registration covariance.
    pub information: Matrix6<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    pub nodes: Vec<PoseNode>,
    pub edges: Vec<PoseEdge>,
}

#[derive(Debug, Clone)]
pub struct OptimizeConfig {
    pub max_iter: usize,
    /// Terminate when the chi-squared decrease falls below this.
    pub tol: f64,
    /// Initial LM damping.
    pub damping: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-12, damping: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    /// Optimized poses, in node order.
    pub poses: Vec<RigidTransform>,
    pub chi2: f64,
    /// Chi-squared after each accepted step, starting with the initial value.
    pub chi2_trace: Vec<f64>,
    pub iterations: usize,
}

/// Tangent-space mismatch between the measurement and the current relative pose.
pub fn edge_residual(
    edge: &PoseEdge,
    x_from: &RigidTransform,
    x_to: &RigidTransform,
) -> Result<Vec6, GeometryError> {
    let rel = x_from.inverse().compose(x_to);
    log6(&edge.measurement.inverse().compose(&rel))
}

impl PoseGraph {
    pub fn add_node(&mut self, id: usize, pose: RigidTransform) {
        self.nodes.push(PoseNode { id, pose });
    }

    pub fn add_edge(
        &mut self,
        from: usize,
        to: usize,
        measurement: RigidTransform,
        information: Matrix6<f64>,
    ) {
        self.edges.push(PoseEdge { from, to, measurement, information });
    }

    fn index_of(&self, id: usize) -> Result<usize, PoseGraphError> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or(PoseGraphError::UnknownNode(id))
    }

    fn validate(&self) -> Result<Vec<(usize, usize)>, PoseGraphError> {
        if self.nodes.is_empty() {
            return Err(PoseGraphError::Empty);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if self.nodes[..i].iter().any(|m| m.id == n.id) {
                return Err(PoseGraphError::DuplicateNode(n.id));
            }
        }
        let mut pairs = Vec::with_capacity(self.edges.len());
        for e in &self.edges {
            pairs.push((self.index_of(e.from)?, self.index_of(e.to)?));
        }
        // connectivity via BFS over undirected edges
        let n = self.nodes.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &(a, b) in &pairs {
                let other = if a == i { b } else if b == i { a } else { continue };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(PoseGraphError::Disconnected);
        }
        Ok(pairs)
    }
}

fn chi2(
    graph: &PoseGraph,
    pairs: &[(usize, usize)],
    poses: &[RigidTransform],
) -> Result<f64, GeometryError> {
    let mut total = 0.0;
    for (e, &(fi, ti)) in graph.edges.iter().zip(pairs) {
        let r = edge_residual(e, &poses[fi], &poses[ti])?;
        total += (r.transpose() * e.information * r)[(0, 0)];
    }
    Ok(total)
}

/// Central-difference Jacobian of an edge residual with respect to a
/// right-multiplicative tangent perturbation of one endpoint.
fn numeric_jacobian(
    edge: &PoseEdge,
    x_from: &RigidTransform,
    x_to: &RigidTransform,
    wrt_from: bool,
) -> Result<Matrix6<f64>, GeometryError> {
    const STEP: f64 = 1e-6;
    let mut jac = Matrix6::zeros();
    for k in 0..6 {
        let mut d = Vec6::zeros();
        d[k] = STEP;
        let (hi, lo) = if wrt_from {
            (
                edge_residual(edge, &x_from.compose(&exp6(d)), x_to)?,
                edge_residual(edge, &x_from.compose(&exp6(-d)), x_to)?,
            )
        } else {
            (
                edge_residual(edge, x_from, &x_to.compose(&exp6(d)))?,
                edge_residual(edge, x_from, &x_to.compose(&exp6(-d)))?,
            )
        };
        jac.set_column(k, &((hi - lo) / (2.0 * STEP)));
    }
    Ok(jac)
}

/// Levenberg-Marquardt over all poses but the first.
pub fn optimize(
    graph: &PoseGraph,
    config: &OptimizeConfig,
) -> Result<OptimizeResult, PoseGraphError> {
    let pairs = graph.validate()?;
    let n = graph.nodes.len();
    let mut poses: Vec<RigidTransform> = graph.nodes.iter().map(|n| n.pose).collect();
    let mut current_chi2 = chi2(graph, &pairs, &poses)?;
    let mut trace = vec![current_chi2];
    let mut lambda = config.damping;
    let dim = 6 * (n - 1); // node 0 fixed

    if dim == 0 {
        return Ok(OptimizeResult { poses, chi2: current_chi2, chi2_trace: trace, iterations: 0 });
    }

    let mut iterations = 0;
    'outer: for _ in 0..config.max_iter {
        iterations += 1;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for (e, &(fi, ti)) in graph.edges.iter().zip(&pairs) {
            let r = edge_residual(e, &poses[fi], &poses[ti])?;
            let omega = e.information;
            let blocks: [(usize, Matrix6<f64>); 2] = [
                (fi, numeric_jacobian(e, &poses[fi], &poses[ti], true)?),
                (ti, numeric_jacobian(e, &poses[fi], &poses[ti], false)?),
            ];
            for &(bi, jb) in &blocks {
                if bi == 0 {
                    continue;
                }
                let gi = (bi - 1) * 6;
                let gb = jb.transpose() * omega * r;
                for k in 0..6 {
                    g[gi + k] += gb[k];
                }
                for &(bj, jc) in &blocks {
                    if bj == 0 {
                        continue;
                    }
                    let gj = (bj - 1) * 6;
                    let hb = jb.transpose() * omega * jc;
                    for a in 0..6 {
                        for b in 0..6 {
                            h[(gi + a, gj + b)] += hb[(a, b)];
                        }
                    }
                }
            }
        }

        // LM inner loop: raise damping until a step is accepted
        for _ in 0..16 {
            let mut damped = h.clone();
            for i in 0..dim {
                damped[(i, i)] += lambda * (h[(i, i)].abs() + 1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-&g));
            let mut trial = poses.clone();
            for (i, pose) in trial.iter_mut().enumerate().skip(1) {
                let mut d = Vec6::zeros();
                for k in 0..6 {
                    d[k] = delta[(i - 1) * 6 + k];
                }
                *pose = pose.compose(&exp6(d));
            }
            let trial_chi2 = chi2(graph, &pairs, &trial)?;
            if trial_chi2 <= current_chi2 {
                let decrease = current_chi2 - trial_chi2;
                poses = trial;
                current_chi2 = trial_chi2;
                trace.push(current_chi2);
                lambda = (lambda * 0.5).max(1e-12);
                if decrease < config.tol {
                    break 'outer;
                }
                continue 'outer;
            }
            lambda *= 10.0;
        }
        // no acceptable step found
        break;
    }

    Ok(OptimizeResult { poses, chi2: current_chi2, chi2_trace: trace, iterations })
}

/// Inverts a registration covariance into an edge information matrix,
/// flooring eigenvalues so planar-prior (rank-deficient) covariances stay
/// usable.
pub fn information_from_covariance(cov: &Matrix6<f64>, floor: f64) -> Matrix6<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut inv_eigs = eig.eigenvalues;
    for i in 0..6 {
        inv_eigs[i] = 1.0 / inv_eigs[i].max(floor);
    }
    &eig.eigenvectors * Matrix6::from_diagonal(&inv_eigs) * eig.eigenvectors.transpose()
}
