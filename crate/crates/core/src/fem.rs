//! P1 (CG1) finite elements on structured triangulations of the unit square.

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::linalg::{dot, CsrMatrix};

pub type Point = [f64; 2];

/// Direction of the diagonals splitting each grid square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Diagonal {
    /// One diagonal from bottom-left to top-right, two triangles per square.
    Right,
    /// Both diagonals, four triangles per square around a midpoint node.
    Crossed,
}

/// Structured triangular mesh of `[0, 1]^2`.
///
/// Grid nodes are numbered row-major in `(y, x)`; for [`Diagonal::Crossed`]
/// the square midpoints follow, also row-major.
#[derive(Debug, Clone)]
pub struct Mesh2D {
    n: usize,
    diagonal: Diagonal,
    nodes: Vec<Point>,
    cells: Vec<[usize; 3]>,
}

impl Mesh2D {
    pub fn unit_square(n: usize, diagonal: Diagonal) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("mesh needs at least one cell per side"));
        }
        let h = 1.0 / n as f64;
        let grid = |i: usize, j: usize| j * (n + 1) + i;
        let mut nodes = Vec::with_capacity((n + 1) * (n + 1) + n * n);
        for j in 0..=n {
            for i in 0..=n {
                nodes.push([i as f64 * h, j as f64 * h]);
            }
        }
        let mut cells = Vec::new();
        match diagonal {
            Diagonal::Right => {
                cells.reserve(2 * n * n);
                for j in 0..n {
                    for i in 0..n {
                        let (v0, v1, v2, v3) = (grid(i, j), grid(i + 1, j), grid(i, j + 1), grid(i + 1, j + 1));
                        cells.push([v0, v1, v3]);
                        cells.push([v0, v3, v2]);
                    }
                }
            }
            Diagonal::Crossed => {
                let base = nodes.len();
                for j in 0..n {
                    for i in 0..n {
                        nodes.push([(i as f64 + 0.5) * h, (j as f64 + 0.5) * h]);
                    }
                }
                cells.reserve(4 * n * n);
                for j in 0..n {
                    for i in 0..n {
                        let (v0, v1, v2, v3) = (grid(i, j), grid(i + 1, j), grid(i, j + 1), grid(i + 1, j + 1));
                        let c = base + j * n + i;
                        // bottom, right, top, left
                        cells.push([v0, v1, c]);
                        cells.push([v1, v3, c]);
                        cells.push([v3, v2, c]);
                        cells.push([v2, v0, c]);
                    }
                }
            }
        }
        Ok(Self {
            n,
            diagonal,
            nodes,
            cells,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn diagonal(&self) -> Diagonal {
        self.diagonal
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn cells(&self) -> &[[usize; 3]] {
        &self.cells
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn signed_area(&self, cell: usize) -> f64 {
        let [a, b, c] = self.cells[cell].map(|v| self.nodes[v]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    /// Indices of grid nodes on the boundary of the square.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        let n = self.n;
        (0..(n + 1) * (n + 1))
            .filter(|&v| {
                let (i, j) = (v % (n + 1), v / (n + 1));
                i == 0 || j == 0 || i == n || j == n
            })
            .collect()
    }

    /// Cell containing `p`, found by grid arithmetic.
    pub fn locate(&self, p: Point) -> Result<usize> {
        let [x, y] = p;
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::OutOfDomain { x, y });
        }
        let n = self.n;
        let nf = n as f64;
        let i = ((x * nf).floor() as usize).min(n - 1);
        let j = ((y * nf).floor() as usize).min(n - 1);
        let xi = x * nf - i as f64;
        let eta = y * nf - j as f64;
        let square = j * n + i;
        Ok(match self.diagonal {
            Diagonal::Right => 2 * square + usize::from(eta > xi),
            Diagonal::Crossed => {
                let below_main = eta <= xi;
                let below_anti = eta <= 1.0 - xi;
                let quadrant = match (below_main, below_anti) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, false) => 2,
                    (false, true) => 3,
                };
                4 * square + quadrant
            }
        })
    }
}

/// Barycentric coordinates of `p` with respect to triangle `(a, b, c)`.
pub fn barycentric(tri: [Point; 3], p: Point) -> [f64; 3] {
    let [a, b, c] = tri;
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
    let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

/// Per-cell geometry of an affine triangle.
#[derive(Debug, Clone, Copy)]
pub struct CellGeometry {
    pub area: f64,
    /// gradients of the three barycentric (basis) functions
    pub grads: [[f64; 2]; 3],
}

impl CellGeometry {
    fn new(tri: [Point; 3]) -> Self {
        let [a, b, c] = tri;
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let g1 = [(c[1] - a[1]) / det, -(c[0] - a[0]) / det];
        let g2 = [-(b[1] - a[1]) / det, (b[0] - a[0]) / det];
        let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
        Self {
            area: 0.5 * det.abs(),
            grads: [g0, g1, g2],
        }
    }

    pub fn grad_of(&self, local: [f64; 3]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (a, v) in local.iter().enumerate() {
            g[0] += v * self.grads[a][0];
            g[1] += v * self.grads[a][1];
        }
        g
    }
}

/// Degree-2 three-point rule on the reference triangle, in barycentric
/// coordinates. Each point carries weight `area / 3`.
pub const QUAD_POINTS: [[f64; 3]; 3] = [
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
];

#[inline]
pub fn interp_at(local: [f64; 3], bary: [f64; 3]) -> f64 {
    local[0] * bary[0] + local[1] * bary[1] + local[2] * bary[2]
}

/// Continuous piecewise-linear Lagrange space on a [`Mesh2D`].
#[derive(Debug)]
pub struct FunctionSpace {
    mesh: Mesh2D,
    geometry: Vec<CellGeometry>,
    mass: OnceLock<CsrMatrix>,
    stiffness: OnceLock<CsrMatrix>,
}

impl FunctionSpace {
    pub fn new(mesh: Mesh2D) -> Arc<Self> {
        let geometry = mesh
            .cells()
            .iter()
            .map(|c| CellGeometry::new(c.map(|v| mesh.nodes()[v])))
            .collect();
        Arc::new(Self {
            mesh,
            geometry,
            mass: OnceLock::new(),
            stiffness: OnceLock::new(),
        })
    }

    pub fn mesh(&self) -> &Mesh2D {
        &self.mesh
    }

    pub fn ndofs(&self) -> usize {
        self.mesh.num_nodes()
    }

    pub fn geometry(&self) -> &[CellGeometry] {
        &self.geometry
    }

    pub fn local_values(&self, cell: usize, coeffs: &[f64]) -> [f64; 3] {
        self.mesh.cells[cell].map(|v| coeffs[v])
    }

    /// Assembles a bilinear form from per-cell 3x3 element matrices.
    pub fn assemble_matrix<F>(&self, mut element: F) -> CsrMatrix
    where
        F: FnMut(usize, &CellGeometry) -> [[f64; 3]; 3],
    {
        let mut triplets = Vec::with_capacity(9 * self.mesh.num_cells());
        for (c, cell) in self.mesh.cells.iter().enumerate() {
            let ke = element(c, &self.geometry[c]);
            for a in 0..3 {
                for b in 0..3 {
                    triplets.push((cell[a], cell[b], ke[a][b]));
                }
            }
        }
        CsrMatrix::from_triplets(self.ndofs(), self.ndofs(), &triplets)
    }

    /// Assembles a linear form from per-cell element vectors.
    pub fn assemble_vector<F>(&self, mut element: F) -> Vec<f64>
    where
        F: FnMut(usize, &CellGeometry) -> [f64; 3],
    {
        let mut out = vec![0.0; self.ndofs()];
        for (c, cell) in self.mesh.cells.iter().enumerate() {
            let fe = element(c, &self.geometry[c]);
            for a in 0..3 {
                out[cell[a]] += fe[a];
            }
        }
        out
    }

    /// Consistent mass matrix `M_ij = (phi_j, phi_i)`.
    pub fn mass(&self) -> &CsrMatrix {
        self.mass.get_or_init(|| assemble_mass(self))
    }

    /// Stiffness matrix `K_ij = (grad phi_j, grad phi_i)` with natural
    /// boundary conditions.
    pub fn stiffness(&self) -> &CsrMatrix {
        self.stiffness.get_or_init(|| assemble_stiffness(self))
    }

    /// Point evaluation of a coefficient vector.
    pub fn evaluate(&self, coeffs: &[f64], points: &[Point]) -> Result<Vec<f64>> {
        if coeffs.len() != self.ndofs() {
            return Err(Error::invalid("coefficient vector does not match the space"));
        }
        points
            .iter()
            .map(|&p| {
                let c = self.mesh.locate(p)?;
                let tri = self.mesh.cells[c].map(|v| self.mesh.nodes[v]);
                Ok(interp_at(self.local_values(c, coeffs), barycentric(tri, p)))
            })
            .collect()
    }
}

pub fn assemble_mass(space: &FunctionSpace) -> CsrMatrix {
    space.assemble_matrix(|_, geo| {
        let mut ke = [[0.0; 3]; 3];
        for q in QUAD_POINTS {
            let w = geo.area / 3.0;
            for a in 0..3 {
                for b in 0..3 {
                    ke[a][b] += w * q[a] * q[b];
                }
            }
        }
        ke
    })
}

pub fn assemble_stiffness(space: &FunctionSpace) -> CsrMatrix {
    space.assemble_matrix(|_, geo| {
        let mut ke = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                ke[a][b] = geo.area * (geo.grads[a][0] * geo.grads[b][0] + geo.grads[a][1] * geo.grads[b][1]);
            }
        }
        ke
    })
}

/// `A = delta * M + gamma * K`.
pub fn assemble_shifted_stiffness(space: &FunctionSpace, delta: f64, gamma: f64) -> Result<CsrMatrix> {
    if !(delta > 0.0) || !(gamma > 0.0) {
        return Err(Error::invalid(format!(
            "delta and gamma must be positive (got delta={delta}, gamma={gamma})"
        )));
    }
    Ok(space.mass().linear_combination(delta, space.stiffness(), gamma))
}

/// A finite element function: nodal coefficients over a [`FunctionSpace`].
#[derive(Debug, Clone)]
pub struct FeFunction {
    space: Arc<FunctionSpace>,
    coeffs: Vec<f64>,
}

impl FeFunction {
    pub fn new(space: Arc<FunctionSpace>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != space.ndofs() {
            return Err(Error::invalid(format!(
                "expected {} coefficients, got {}",
                space.ndofs(),
                coeffs.len()
            )));
        }
        Ok(Self { space, coeffs })
    }

    pub fn zeros(space: Arc<FunctionSpace>) -> Self {
        let n = space.ndofs();
        Self {
            space,
            coeffs: vec![0.0; n],
        }
    }

    /// Nodal interpolant of `g`.
    pub fn interpolate(space: Arc<FunctionSpace>, g: impl Fn(Point) -> f64) -> Self {
        let coeffs = space.mesh().nodes().iter().map(|&p| g(p)).collect();
        Self { space, coeffs }
    }

    pub fn space(&self) -> &Arc<FunctionSpace> {
        &self.space
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn same_space(&self, other: &FeFunction) -> bool {
        Arc::ptr_eq(&self.space, &other.space)
    }

    pub fn evaluate(&self, points: &[Point]) -> Result<Vec<f64>> {
        self.space.evaluate(&self.coeffs, points)
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.space, &self.coeffs)
    }

    pub fn h1_norm(&self) -> f64 {
        h1_norm(&self.space, &self.coeffs)
    }
}

pub fn l2_norm(space: &FunctionSpace, c: &[f64]) -> f64 {
    dot(c, &space.mass().mul_vec(c)).max(0.0).sqrt()
}

pub fn h1_norm(space: &FunctionSpace, c: &[f64]) -> f64 {
    let m = dot(c, &space.mass().mul_vec(c));
    let k = dot(c, &space.stiffness().mul_vec(c));
    (m + k).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use std::f64::consts::PI;

    fn space(n: usize, d: Diagonal) -> Arc<FunctionSpace> {
        FunctionSpace::new(Mesh2D::unit_square(n, d).unwrap())
    }

    #[test]
    fn mesh_counts() {
        let m = Mesh2D::unit_square(64, Diagonal::Right).unwrap();
        assert_eq!((m.num_nodes(), m.num_cells()), (4225, 8192));
        let m = Mesh2D::unit_square(1, Diagonal::Right).unwrap();
        assert_eq!((m.num_nodes(), m.num_cells()), (4, 2));
        let m = Mesh2D::unit_square(1, Diagonal::Crossed).unwrap();
        assert_eq!((m.num_nodes(), m.num_cells()), (5, 4));
        let m = Mesh2D::unit_square(5, Diagonal::Crossed).unwrap();
        assert_eq!((m.num_nodes(), m.num_cells()), (36 + 25, 100));
    }

    #[test]
    fn zero_cells_rejected() {
        assert!(matches!(
            Mesh2D::unit_square(0, Diagonal::Right),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn areas_positive_and_sum_to_one() {
        for d in [Diagonal::Right, Diagonal::Crossed] {
            for n in [1, 3, 10] {
                let m = Mesh2D::unit_square(n, d).unwrap();
                let mut total = 0.0;
                for c in 0..m.num_cells() {
                    let a = m.signed_area(c);
                    assert!(a > 0.0);
                    total += a;
                }
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn node_ordering_is_row_major() {
        let m = Mesh2D::unit_square(4, Diagonal::Crossed).unwrap();
        assert_eq!(m.nodes()[1], [0.25, 0.0]);
        assert_eq!(m.nodes()[5], [0.0, 0.25]);
        assert_eq!(m.nodes()[25], [0.125, 0.125]);
        assert_eq!(m.nodes()[26], [0.375, 0.125]);
    }

    #[test]
    fn mass_sums_to_area_and_is_spd() {
        for d in [Diagonal::Right, Diagonal::Crossed] {
            let s = space(6, d);
            let m = s.mass();
            assert!((m.sum() - 1.0).abs() < 1e-12);
            assert!(m.max_asymmetry() < 1e-12);
            assert!(crate::linalg::Cholesky::factor(m).is_ok());
        }
        let s = space(1, Diagonal::Right);
        let m = s.mass().to_dense();
        assert_eq!(m.shape(), (4, 4));
        let eig = SymmetricEigen::new(m);
        assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn stiffness_annihilates_constants() {
        for d in [Diagonal::Right, Diagonal::Crossed] {
            let s = space(7, d);
            let k1 = s.stiffness().mul_vec(&vec![1.0; s.ndofs()]);
            assert!(k1.iter().all(|v| v.abs() < 1e-13));
        }
    }

    #[test]
    fn mass_integrates_sine_squared() {
        let s = space(32, Diagonal::Right);
        let f = FeFunction::interpolate(s.clone(), |p| (PI * p[0]).sin() * (PI * p[1]).sin());
        let v = dot(f.coeffs(), &s.mass().mul_vec(f.coeffs()));
        assert!((v - 0.25).abs() < 1e-3, "{v}");
    }

    #[test]
    fn shifted_stiffness_properties() {
        let s = space(8, Diagonal::Right);
        let (delta, gamma) = (0.4, 0.04);
        let a = assemble_shifted_stiffness(&s, delta, gamma).unwrap();
        let ones = vec![1.0; s.ndofs()];
        let a1 = a.mul_vec(&ones);
        let m1 = s.mass().mul_vec(&ones);
        for (x, y) in a1.iter().zip(&m1) {
            assert!((x - delta * y).abs() < 1e-14);
        }
        // the "gamma = 0" limit of the form is delta * M
        let a0 = s.mass().linear_combination(delta, s.stiffness(), 0.0);
        for i in 0..s.ndofs() {
            for (j, v) in a0.row(i) {
                assert!((v - delta * s.mass().get(i, j)).abs() < 1e-14);
            }
        }
        // smallest generalized eigenvalue of (A, M) via a dense oracle
        let md = s.mass().to_dense();
        let ad = a.to_dense();
        let l = md.clone().cholesky().unwrap().l();
        let linv = l.clone().try_inverse().unwrap();
        let c: DMatrix<f64> = &linv * ad * linv.transpose();
        let eig = SymmetricEigen::new(c);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((min - 0.4).abs() < 1e-10, "{min}");

        assert!(assemble_shifted_stiffness(&s, 0.0, 0.1).is_err());
        assert!(assemble_shifted_stiffness(&s, 0.1, -1.0).is_err());
    }

    #[test]
    fn evaluation_reproduces_affine_and_nodes() {
        for d in [Diagonal::Right, Diagonal::Crossed] {
            let s = space(5, d);
            let f = FeFunction::interpolate(s.clone(), |p| p[0] + 2.0 * p[1]);
            let pts = [[0.0, 0.0], [1.0, 1.0], [0.13, 0.77], [0.5, 0.5], [0.999, 0.001], [0.3, 0.3]];
            let vals = f.evaluate(&pts).unwrap();
            for (p, v) in pts.iter().zip(vals) {
                assert!((v - (p[0] + 2.0 * p[1])).abs() < 1e-14);
            }
            let g = FeFunction::interpolate(s.clone(), |p| (3.0 * p[0]).sin() + p[1] * p[1]);
            let at_nodes = g.evaluate(s.mesh().nodes()).unwrap();
            for (a, b) in at_nodes.iter().zip(g.coeffs()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn located_cell_matches_brute_force_scan() {
        for d in [Diagonal::Right, Diagonal::Crossed] {
            let s = space(2, d);
            let mesh = s.mesh();
            let f = FeFunction::interpolate(s.clone(), |p| p[0] * p[0]);
            let p = [0.5, 0.5];
            let v = f.evaluate(&[p]).unwrap()[0];
            // brute force: any cell whose barycentric coords are all >= 0
            let mut found = None;
            for cell in mesh.cells() {
                let tri = cell.map(|i| mesh.nodes()[i]);
                let b = barycentric(tri, p);
                if b.iter().all(|&x| x >= -1e-14) {
                    found = Some(interp_at(cell.map(|i| f.coeffs()[i]), b));
                    break;
                }
            }
            assert!((v - found.unwrap()).abs() < 1e-14);
            // (0.5,0.5) is a mesh node on n=2 so the value is exact
            assert!((v - 0.25).abs() < 1e-14);

            let q = [0.3, 0.6];
            let c = mesh.locate(q).unwrap();
            let b = barycentric(mesh.cells()[c].map(|i| mesh.nodes()[i]), q);
            assert!(b.iter().all(|&x| x >= -1e-14));
        }
    }

    #[test]
    fn out_of_domain_rejected() {
        let s = space(3, Diagonal::Right);
        let f = FeFunction::zeros(s);
        assert!(matches!(f.evaluate(&[[1.01, 0.5]]), Err(Error::OutOfDomain { .. })));
        assert!(matches!(f.evaluate(&[[0.5, -0.1]]), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn partition_of_unity() {
        for d in [Diagonal::Right, Diagonal::Crossed] {
            let s = space(4, d);
            let mesh = s.mesh();
            for p in [[0.11, 0.93], [0.5, 0.25], [1.0, 0.0], [0.62, 0.62]] {
                let c = mesh.locate(p).unwrap();
                let b = barycentric(mesh.cells()[c].map(|i| mesh.nodes()[i]), p);
                assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn norms() {
        let s = space(32, Diagonal::Right);
        let z = FeFunction::zeros(s.clone());
        assert_eq!((z.l2_norm(), z.h1_norm()), (0.0, 0.0));
        let one = FeFunction::interpolate(s.clone(), |_| 1.0);
        assert!((one.l2_norm() - 1.0).abs() < 1e-12);
        assert!((one.h1_norm() - 1.0).abs() < 1e-12);
        let f = FeFunction::interpolate(s.clone(), |p| (PI * p[0]).sin() * (PI * p[1]).sin());
        assert!((f.l2_norm() - 0.5).abs() < 2e-3);
        assert!((f.h1_norm() - (0.25 + PI * PI / 2.0).sqrt()).abs() < 2e-2);
        let x = FeFunction::interpolate(s, |p| p[0]);
        assert!((x.l2_norm() - (1.0f64 / 3.0).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn interpolate_constant() {
        let s = space(3, Diagonal::Crossed);
        let f = FeFunction::interpolate(s, |_| 2.5);
        assert!(f.coeffs().iter().all(|&c| c == 2.5));
    }
}
