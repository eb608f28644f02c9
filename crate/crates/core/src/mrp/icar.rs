//! Intrinsic CAR structure: connected components, scaling factors and a
//! sum-to-zero basis per component.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::MrpError;

/// Undirected area adjacency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct AreaGraph {
    areas: Vec<String>,
    neighbors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawGraph {
    areas: Vec<String>,
    #[serde(default)]
    edges: Vec<[String; 2]>,
}

impl TryFrom<RawGraph> for AreaGraph {
    type Error = MrpError;

    fn try_from(r: RawGraph) -> Result<Self, MrpError> {
        let idx = |name: &str| {
            r.areas
                .iter()
                .position(|a| a == name)
                .ok_or_else(|| MrpError::Graph(format!("edge names unknown area `{name}`")))
        };
        let edges = r
            .edges
            .iter()
            .map(|[a, b]| Ok((idx(a)?, idx(b)?)))
            .collect::<Result<Vec<_>, MrpError>>()?;
        AreaGraph::new(r.areas, &edges)
    }
}

impl From<AreaGraph> for RawGraph {
    fn from(g: AreaGraph) -> Self {
        let edges = g
            .edges()
            .map(|(a, b)| [g.areas[a].clone(), g.areas[b].clone()])
            .collect();
        RawGraph { areas: g.areas, edges }
    }
}

impl AreaGraph {
    pub fn new(areas: Vec<String>, edges: &[(usize, usize)]) -> Result<Self, MrpError> {
        if areas.is_empty() {
            return Err(MrpError::Graph("no areas".into()));
        }
        let n = areas.len();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(MrpError::Graph(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(MrpError::Graph(format!("self-loop on `{}`", areas[a])));
            }
            if !neighbors[a].contains(&b) {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        Ok(AreaGraph { areas, neighbors })
    }

    /// Builds from a neighbor list, which must be symmetric.
    pub fn from_neighbors(areas: Vec<String>, neighbors: Vec<Vec<usize>>) -> Result<Self, MrpError> {
        if neighbors.len() != areas.len() {
            return Err(MrpError::Graph("neighbor list length differs from area count".into()));
        }
        for (a, nb) in neighbors.iter().enumerate() {
            for &b in nb {
                if b >= areas.len() || !neighbors[b].contains(&a) {
                    return Err(MrpError::Graph(format!("adjacency not symmetric at ({a}, {b})")));
                }
            }
        }
        let edges: Vec<(usize, usize)> = neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, nb)| nb.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect();
        Self::new(areas, &edges)
    }

    pub fn areas(&self) -> &[String] {
        &self.areas
    }

    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    pub fn neighbors(&self, a: usize) -> &[usize] {
        &self.neighbors[a]
    }

    /// Neighbor count of an area.
    pub fn degree(&self, a: usize) -> usize {
        self.neighbors[a].len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, nb)| nb.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let n = crate::domain::normalize(name);
        self.areas.iter().position(|a| crate::domain::normalize(a) == n)
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut i = 0;
            while i < comp.len() {
                for &b in &self.neighbors[comp[i]] {
                    if !seen[b] {
                        seen[b] = true;
                        comp.push(b);
                    }
                }
                i += 1;
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Graph Laplacian restricted to `nodes`.
    pub fn laplacian(&self, nodes: &[usize]) -> DMatrix<f64> {
        let n = nodes.len();
        let mut q = DMatrix::zeros(n, n);
        for (i, &a) in nodes.iter().enumerate() {
            for &b in &self.neighbors[a] {
                if let Some(j) = nodes.iter().position(|&x| x == b) {
                    q[(i, j)] = -1.0;
                    q[(i, i)] += 1.0;
                }
            }
        }
        q
    }
}

/// Orthonormal basis of the vectors summing to zero, as the columns of an
/// `n × (n-1)` Helmert matrix.
pub fn helmert_basis(n: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(n, n.saturating_sub(1));
    for k in 1..n {
        let c = 1.0 / ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            h[(i, k - 1)] = c;
        }
        h[(k, k - 1)] = -(k as f64) * c;
    }
    h
}

/// Geometric mean of the marginal variances under the generalized inverse of
/// a connected component's ICAR precision.
pub fn component_scaling_factor(q: &DMatrix<f64>) -> f64 {
    let n = q.nrows();
    let j = DMatrix::from_element(n, n, 1.0 / n as f64);
    let inv = (q + &j)
        .try_inverse()
        .expect("Laplacian plus the constant projector is invertible for a connected component");
    let ginv = inv - j;
    (ginv.diagonal().iter().map(|v| v.ln()).sum::<f64>() / n as f64).exp()
}

/// ICAR structure of one connected component with at least two areas.
#[derive(Debug, Clone)]
pub struct IcarComponent {
    pub nodes: Vec<usize>,
    pub epsilon: f64,
    /// Sum-to-zero basis; ψ on `nodes` equals `basis · w`.
    pub basis: DMatrix<f64>,
    /// Precision of the basis coordinates, `Bᵀ Q B`.
    pub precision: DMatrix<f64>,
    /// Lower Cholesky factor of `precision`.
    pub chol: DMatrix<f64>,
}

impl IcarComponent {
    pub fn dim(&self) -> usize {
        self.nodes.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct IcarStructure {
    pub components: Vec<IcarComponent>,
    /// Areas without neighbors; they carry only the unstructured term.
    pub isolated: Vec<usize>,
    /// Per area: the scaling factor of its component, `None` for isolated areas.
    pub epsilon_of: Vec<Option<f64>>,
}

impl IcarStructure {
    pub fn new(graph: &AreaGraph) -> Self {
        let mut components = Vec::new();
        let mut isolated = Vec::new();
        let mut epsilon_of = vec![None; graph.len()];
        for nodes in graph.components() {
            if nodes.len() == 1 {
                isolated.push(nodes[0]);
                continue;
            }
            let q = graph.laplacian(&nodes);
            let epsilon = component_scaling_factor(&q);
            let basis = helmert_basis(nodes.len());
            let precision = basis.transpose() * &q * &basis;
            let chol = precision
                .clone()
                .cholesky()
                .expect("reduced ICAR precision is positive definite")
                .l();
            for &a in &nodes {
                epsilon_of[a] = Some(epsilon);
            }
            components.push(IcarComponent {
                nodes,
                epsilon,
                basis,
                precision,
                chol,
            });
        }
        IcarStructure {
            components,
            isolated,
            epsilon_of,
        }
    }

    /// Number of free coordinates per choice.
    pub fn dim(&self) -> usize {
        self.components.iter().map(IcarComponent::dim).sum()
    }

    /// Expands basis coordinates into ψ over every area (zero on isolated areas).
    pub fn expand(&self, w: &[f64], n_areas: usize) -> Vec<f64> {
        let mut psi = vec![0.0; n_areas];
        let mut off = 0;
        for c in &self.components {
            let d = c.dim();
            let wv = DVector::from_column_slice(&w[off..off + d]);
            let v = &c.basis * wv;
            for (i, &a) in c.nodes.iter().enumerate() {
                psi[a] = v[i];
            }
            off += d;
        }
        psi
    }

    /// Pulls a gradient over ψ back onto the basis coordinates.
    pub fn pull_back(&self, g_psi: &[f64], out: &mut [f64]) {
        let mut off = 0;
        for c in &self.components {
            let d = c.dim();
            let g = DVector::from_iterator(c.nodes.len(), c.nodes.iter().map(|&a| g_psi[a]));
            let gw = c.basis.transpose() * g;
            for m in 0..d {
                out[off + m] += gw[m];
            }
            off += d;
        }
    }

    /// ICAR log density of the coordinates (pairwise-difference form) and its gradient.
    pub fn log_density(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let mut lp = 0.0;
        let mut off = 0;
        for c in &self.components {
            let d = c.dim();
            let wv = DVector::from_column_slice(&w[off..off + d]);
            let mw = &c.precision * &wv;
            lp -= 0.5 * wv.dot(&mw);
            for m in 0..d {
                grad[off + m] -= mw[m];
            }
            off += d;
        }
        lp
    }

    /// Draws coordinates from the proper density on the sum-to-zero subspace.
    pub fn draw(&self, z: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        let mut off = 0;
        for c in &self.components {
            let d = c.dim();
            let zv = DVector::from_column_slice(&z[off..off + d]);
            // w = L⁻ᵀ z has covariance (L Lᵀ)⁻¹
            let w = c
                .chol
                .transpose()
                .solve_upper_triangular(&zv)
                .expect("Cholesky factor has a positive diagonal");
            out.extend(w.iter());
            off += d;
        }
        out
    }
}

/// Scaling factor for each area's component; isolated areas report `None`.
pub fn icar_scaling_factor(graph: &AreaGraph) -> Vec<Option<f64>> {
    IcarStructure::new(graph).epsilon_of
}
