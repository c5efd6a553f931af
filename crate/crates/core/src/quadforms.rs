//! Dense operators with weighted inner products, lattice Laplacians, actions,
//! potentials and the summation-by-parts identity with half bonds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blockavg;
use crate::error::{Error, Result};
use crate::geometry::{LatticeGeometry, MultiscaleLayout, RegionSequence, SiteSet};
use crate::greens;
use crate::linalg;

/// Matrix from one indexed site set to another. `mat` is codomain by domain;
/// the weights define `<u, v> = sum w_i u_i v_i` on each side.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOperator {
    pub dom: Vec<usize>,
    pub cod: Vec<usize>,
    pub mat: DMatrix<f64>,
    pub dom_w: DVector<f64>,
    pub cod_w: DVector<f64>,
}

impl DenseOperator {
    pub fn new(dom: Vec<usize>, cod: Vec<usize>, mat: DMatrix<f64>, dom_w: DVector<f64>, cod_w: DVector<f64>) -> Result<Self> {
        if mat.nrows() != cod.len() || mat.ncols() != dom.len() || dom_w.len() != dom.len() || cod_w.len() != cod.len() {
            return Err(Error::Shape(format!(
                "matrix {}x{} with {} codomain and {} domain labels",
                mat.nrows(),
                mat.ncols(),
                cod.len(),
                dom.len()
            )));
        }
        Ok(DenseOperator { dom, cod, mat, dom_w, cod_w })
    }

    /// Self-map on `sites` with one uniform weight.
    pub fn uniform(sites: Vec<usize>, mat: DMatrix<f64>, w: f64) -> Self {
        let n = sites.len();
        DenseOperator {
            dom: sites.clone(),
            cod: sites,
            mat,
            dom_w: DVector::from_element(n, w),
            cod_w: DVector::from_element(n, w),
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.mat * v
    }

    /// Adjoint with respect to the weights: `W_dom^{-1} A^T W_cod`.
    pub fn adjoint(&self) -> Self {
        let mut m = self.mat.transpose();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                m[(i, j)] *= self.cod_w[j] / self.dom_w[i];
            }
        }
        DenseOperator { dom: self.cod.clone(), cod: self.dom.clone(), mat: m, dom_w: self.cod_w.clone(), cod_w: self.dom_w.clone() }
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &DenseOperator) -> Result<Self> {
        if inner.cod != self.dom {
            return Err(Error::Shape("composition across different site sets".into()));
        }
        Ok(DenseOperator {
            dom: inner.dom.clone(),
            cod: self.cod.clone(),
            mat: &self.mat * &inner.mat,
            dom_w: inner.dom_w.clone(),
            cod_w: self.cod_w.clone(),
        })
    }

    pub fn inner_cod(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        u.iter().zip(v.iter()).zip(self.cod_w.iter()).map(|((a, b), w)| a * b * w).sum()
    }

    pub fn inner_dom(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        u.iter().zip(v.iter()).zip(self.dom_w.iter()).map(|((a, b), w)| a * b * w).sum()
    }

    /// `max |A - A*|` for a self-map.
    pub fn self_adjoint_defect(&self) -> f64 {
        linalg::max_abs(&(&self.mat - &self.adjoint().mat))
    }

    /// Bilinear form matrix `W A` of a self-map.
    pub fn form_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.cod_w) * &self.mat
    }

    /// Sub-operator on the given codomain and domain positions.
    pub fn restrict(&self, rows: &[usize], cols: &[usize]) -> Self {
        DenseOperator {
            dom: cols.iter().map(|&c| self.dom[c]).collect(),
            cod: rows.iter().map(|&r| self.cod[r]).collect(),
            mat: linalg::submatrix(&self.mat, rows, cols),
            dom_w: linalg::subvector(&self.dom_w, cols),
            cod_w: linalg::subvector(&self.cod_w, rows),
        }
    }
}

/// `-Delta` on the whole periodic lattice:
/// `eta^-2 sum_mu (2 f(x) - f(x+e_mu) - f(x-e_mu))`, neighbours with multiplicity.
pub fn neg_laplacian_matrix(geom: &LatticeGeometry) -> DMatrix<f64> {
    let n = geom.n_sites();
    let h2 = geom.spacing().powi(-2);
    let mut m = DMatrix::zeros(n, n);
    for x in 0..n {
        for mu in 0..geom.d {
            for dir in [-1isize, 1] {
                let y = geom.shift(x, mu, dir);
                m[(x, x)] += h2;
                m[(x, y)] -= h2;
            }
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub enum Boundary {
    /// `1_Omega (-Delta) 1_Omega`.
    Dirichlet,
    /// Bonds leaving `Omega` are dropped.
    Neumann,
    /// Bonds to sites in `neumann` are dropped, all other exterior bonds are Dirichlet.
    Mixed { neumann: SiteSet },
    /// The off-diagonal block `1_Omega (-Delta) 1_{Omega^c}`.
    Cross,
}

pub fn laplacian(geom: &LatticeGeometry, omega: &SiteSet, bc: &Boundary) -> Result<DenseOperator> {
    if omega.is_empty() {
        return Err(Error::Precondition("Laplacian on an empty region".into()));
    }
    let full = neg_laplacian_matrix(geom);
    let rows = omega.indices();
    let w = geom.site_weight();
    let h2 = geom.spacing().powi(-2);
    let drop_bond = |y: usize| -> bool {
        match bc {
            Boundary::Neumann => !omega.contains(y),
            Boundary::Mixed { neumann } => !omega.contains(y) && neumann.contains(y),
            _ => false,
        }
    };
    match bc {
        Boundary::Cross => {
            let cols = omega.complement().indices();
            let mat = linalg::submatrix(&full, &rows, &cols);
            DenseOperator::new(
                cols.clone(),
                rows.clone(),
                mat,
                DVector::from_element(cols.len(), w),
                DVector::from_element(rows.len(), w),
            )
        }
        _ => {
            let mut mat = linalg::submatrix(&full, &rows, &rows);
            for (a, &x) in rows.iter().enumerate() {
                for mu in 0..geom.d {
                    for dir in [-1isize, 1] {
                        if drop_bond(geom.shift(x, mu, dir)) {
                            mat[(a, a)] -= h2;
                        }
                    }
                }
            }
            Ok(DenseOperator::uniform(rows, mat, w))
        }
    }
}

/// One-block completion of squares: the stiffness after integrating out a level.
pub fn next_stiffness(a_k: f64, a: f64, l: usize) -> f64 {
    let c = a / (l * l) as f64;
    a * a_k / (a_k + c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionParams {
    pub a: f64,
    pub l: usize,
    pub d: usize,
    pub mu_bar: f64,
    /// `a_1, ..., a_kmax`.
    pub stiffness: Vec<f64>,
}

impl ActionParams {
    pub fn new(a: f64, l: usize, d: usize, mu_bar: f64, kmax: usize) -> Self {
        let mut stiffness = vec![a];
        while stiffness.len() < kmax.max(1) {
            let last = *stiffness.last().unwrap();
            stiffness.push(next_stiffness(last, a, l));
        }
        ActionParams { a, l, d, mu_bar, stiffness }
    }

    pub fn a_level(&self, j: usize) -> f64 {
        self.stiffness[j - 1]
    }

    /// `a_j^{(k)} = a_j L^{2(k-j)}`.
    pub fn scaled(&self, j: usize, k: usize) -> f64 {
        self.a_level(j) * (self.l as f64).powi(2 * (k as i32 - j as i32))
    }

    /// Stiffness per multiscale entry; exterior entries get zero.
    pub fn layout_stiffness(&self, layout: &MultiscaleLayout) -> DVector<f64> {
        let k = layout.depth;
        DVector::from_iterator(
            layout.len(),
            layout.entries.iter().map(|e| if e.level == 0 { 0.0 } else { self.scaled(e.level, k) }),
        )
    }

    pub fn with_mu(&self, mu_bar: f64) -> Self {
        ActionParams { mu_bar, ..self.clone() }
    }
}

/// Coupling constants and the derived small-field thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingState {
    pub lambda: f64,
    pub mu_bar: f64,
    pub l: usize,
    pub nlevels: u32,
    pub p_exp: u32,
    pub r_exp: u32,
    pub delta: f64,
}

impl CouplingState {
    pub fn new(lambda: f64, mu_bar: f64, l: usize, nlevels: u32) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= (-1f64).exp()) {
            return Err(Error::Precondition(format!("lambda = {lambda} must lie in (0, e^-1]")));
        }
        if !(0.0..=1.0).contains(&mu_bar) {
            return Err(Error::Precondition(format!("mu_bar = {mu_bar} must lie in [0, 1]")));
        }
        Ok(CouplingState { lambda, mu_bar, l, nlevels, p_exp: 3, r_exp: 1, delta: 0.01 })
    }

    /// `lambda_k = L^{-(N-k)} lambda`.
    pub fn lambda_k(&self, k: u32) -> f64 {
        self.lambda * (self.l as f64).powi(k as i32 - self.nlevels as i32)
    }

    pub fn mu_bar_k(&self, k: u32) -> f64 {
        self.mu_bar * (self.l as f64).powi(2 * (k as i32 - self.nlevels as i32))
    }

    pub fn p_k(&self, k: u32) -> f64 {
        (-self.lambda_k(k).ln()).powi(self.p_exp as i32)
    }

    pub fn r_k(&self, k: u32) -> f64 {
        (-self.lambda_k(k).ln()).powi(self.r_exp as i32)
    }

    /// Integer layer count `[r_k]`.
    pub fn r_layers(&self, k: u32) -> usize {
        self.r_k(k).floor().max(1.0) as usize
    }

    pub fn alpha_k(&self, k: u32) -> f64 {
        self.mu_bar_k(k).sqrt().max(self.lambda_k(k).powf(0.25))
    }
}

/// `1/2 sum_e a_e w_e (Phi_e - (Q phi)_e)^2` over entries whose block lies in `within`.
pub fn averaging_energy(
    layout: &MultiscaleLayout,
    stiff: &DVector<f64>,
    big_phi: &DVector<f64>,
    phi: &DVector<f64>,
    within: Option<&SiteSet>,
) -> f64 {
    let w = layout.weights();
    let qphi = blockavg::layout_average(layout, phi);
    layout
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| within.map_or(true, |s| s.contains(e.sites[0])))
        .map(|(p, _)| 0.5 * stiff[p] * w[p] * (big_phi[p] - qphi[p]).powi(2))
        .sum()
}

/// `<f, g>_Lambda = eta^d sum_{x in Lambda} f g`.
pub fn inner_on(geom: &LatticeGeometry, f: &DVector<f64>, g: &DVector<f64>, lambda: &SiteSet) -> f64 {
    geom.site_weight() * lambda.indices().iter().map(|&i| f[i] * g[i]).sum::<f64>()
}

/// `<d f, d g>_{*,Lambda}`: full weight for bonds inside `Lambda`, half for bonds crossing its boundary.
pub fn half_bond_inner(geom: &LatticeGeometry, f: &DVector<f64>, g: &DVector<f64>, lambda: &SiteSet) -> f64 {
    let h = geom.spacing();
    let mut s = 0.0;
    for x in 0..geom.n_sites() {
        for mu in 0..geom.d {
            let y = geom.shift(x, mu, 1);
            let w = match (lambda.contains(x), lambda.contains(y)) {
                (true, true) => 1.0,
                (false, false) => 0.0,
                _ => 0.5,
            };
            if w > 0.0 {
                s += w * (f[y] - f[x]) / h * (g[y] - g[x]) / h;
            }
        }
    }
    geom.site_weight() * s
}

/// `||d f||^2` over bonds with both ends in `lambda`.
pub fn bond_norm_sq(geom: &LatticeGeometry, f: &DVector<f64>, lambda: &SiteSet) -> f64 {
    let h = geom.spacing();
    let mut s = 0.0;
    for x in lambda.indices() {
        for mu in 0..geom.d {
            let y = geom.shift(x, mu, 1);
            if lambda.contains(y) {
                s += ((f[y] - f[x]) / h).powi(2);
            }
        }
    }
    geom.site_weight() * s
}

/// Boundary term `1/2 sum_{x in Lambda, x' in Lambda^c nn} eta^{d-1} df(x,x') (g(x) + g(x'))`.
pub fn boundary_term(geom: &LatticeGeometry, f: &DVector<f64>, g: &DVector<f64>, lambda: &SiteSet) -> f64 {
    let h = geom.spacing();
    let hd1 = h.powi(geom.d as i32 - 1);
    let mut s = 0.0;
    for x in lambda.indices() {
        for mu in 0..geom.d {
            for dir in [-1isize, 1] {
                let y = geom.shift(x, mu, dir);
                if !lambda.contains(y) {
                    s += 0.5 * hd1 * (f[y] - f[x]) / h * (g[x] + g[y]);
                }
            }
        }
    }
    s
}

/// Residual of `<df, dg>_{*,Lambda} = <-Delta f, g>_Lambda + b_Lambda(df, g)`.
pub fn summation_by_parts(geom: &LatticeGeometry, f: &DVector<f64>, g: &DVector<f64>, lambda: &SiteSet) -> f64 {
    let lap = neg_laplacian_matrix(geom) * f;
    half_bond_inner(geom, f, g, lambda) - inner_on(geom, &lap, g, lambda) - boundary_term(geom, f, g, lambda)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionKind {
    /// `S_k(Omega_1, Phi, phi)` with Dirichlet conditions on `Omega_1`.
    Full,
    /// `S*_k(Lambda, Phi, phi)` with half bonds.
    Star,
    /// `S*_k + V_k`.
    Plus { eps: f64, mu: f64, lambda: f64 },
    /// `S*_k + V^u_k` built from the previous couplings.
    PlusUnrenormalized { eps_prev: f64, mu_prev: f64, lambda: f64 },
}

/// Evaluate an action. `phi` is a full-lattice vector; for [`ActionKind::Full`] its
/// values outside `Omega_1` are ignored and `lambda_set` is unused.
pub fn action(
    kind: &ActionKind,
    geom: &LatticeGeometry,
    seq: &RegionSequence,
    params: &ActionParams,
    lambda_set: &SiteSet,
    big_phi: &DVector<f64>,
    phi: &DVector<f64>,
) -> f64 {
    let layout = MultiscaleLayout::new(geom, seq, false);
    let stiff = params.layout_stiffness(&layout);
    match kind {
        ActionKind::Full => {
            let o1 = seq.omega1(geom);
            let mut p = phi.clone();
            for i in o1.complement().indices() {
                p[i] = 0.0;
            }
            let lap = neg_laplacian_matrix(geom) * &p;
            averaging_energy(&layout, &stiff, big_phi, &p, None)
                + 0.5 * inner_on(geom, &lap, &p, &o1)
                + 0.5 * params.mu_bar * inner_on(geom, &p, &p, &o1)
        }
        _ => {
            let star = averaging_energy(&layout, &stiff, big_phi, phi, Some(lambda_set))
                + 0.5 * half_bond_inner(geom, phi, phi, lambda_set)
                + 0.5 * params.mu_bar * inner_on(geom, phi, phi, lambda_set);
            let l = geom.l as f64;
            match *kind {
                ActionKind::Plus { eps, mu, lambda } => star + potential(geom, lambda_set, phi, eps, mu, lambda),
                ActionKind::PlusUnrenormalized { eps_prev, mu_prev, lambda } => {
                    star + potential(geom, lambda_set, phi, l.powi(geom.d as i32) * eps_prev, l * l * mu_prev, lambda)
                }
                _ => star,
            }
        }
    }
}

/// `V(Lambda, phi) = eps Vol + mu/2 ||phi||^2 + lambda/4 int phi^4`.
pub fn potential(geom: &LatticeGeometry, lambda_set: &SiteSet, phi: &DVector<f64>, eps: f64, mu: f64, lambda: f64) -> f64 {
    let w = geom.site_weight();
    let idx = lambda_set.indices();
    let vol = w * idx.len() as f64;
    let p2: f64 = idx.iter().map(|&i| phi[i] * phi[i]).sum::<f64>() * w;
    let p4: f64 = idx.iter().map(|&i| phi[i].powi(4)).sum::<f64>() * w;
    eps * vol + 0.5 * mu * p2 + 0.25 * lambda * p4
}

/// `Delta_{k,Omega} = a - a Q G Q^* a` on multiscale fields (no exterior slots).
pub fn fluct_kernel_delta(geom: &LatticeGeometry, seq: &RegionSequence, params: &ActionParams) -> Result<DenseOperator> {
    let layout = MultiscaleLayout::new(geom, seq, false);
    let stiff = params.layout_stiffness(&layout);
    let g = greens::dense_green(geom, seq, params)?;
    let q = blockavg::layout_matrix(&layout, geom.n_sites());
    let q_om = linalg::submatrix(&q, &(0..layout.len()).collect::<Vec<_>>(), &g.dom);
    let qstar = blockavg::layout_adjoint_matrix(&layout, geom).select_rows(g.dom.iter());
    let a = DMatrix::from_diagonal(&stiff);
    let mat = &a - &a * q_om * &g.mat * qstar * &a;
    let w = DVector::from_vec(layout.weights());
    DenseOperator::new((0..layout.len()).collect(), (0..layout.len()).collect(), mat, w.clone(), w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Region;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn constants_in_kernel() {
        let g = LatticeGeometry::with_side(2, 2, 1, 0, 4).unwrap();
        let m = neg_laplacian_matrix(&g);
        let v = m * DVector::from_element(16, 3.0);
        assert!(v.amax() < 1e-13);
    }

    #[test]
    fn dirichlet_chain_spectrum() {
        // 4 sites of a 16-site ring: Dirichlet block is the path Laplacian
        let g = LatticeGeometry::with_side(2, 1, 0, 0, 16).unwrap();
        let om = SiteSet::from_indices(16, 3..7);
        let op = laplacian(&g, &om, &Boundary::Dirichlet).unwrap();
        let mut ev: Vec<f64> = op.mat.symmetric_eigen().eigenvalues.iter().cloned().collect();
        ev.sort_by(f64::total_cmp);
        for (n, e) in ev.iter().enumerate() {
            let exact = 2.0 - 2.0 * (std::f64::consts::PI * (n + 1) as f64 / 5.0).cos();
            assert!((e - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn neumann_kills_constants() {
        let g = LatticeGeometry::with_side(2, 2, 1, 0, 8).unwrap();
        let om = Region::cube_box(&g, 2, [1, 1, 0], [2, 2, 1]).unwrap().site_set(&g);
        let op = laplacian(&g, &om, &Boundary::Neumann).unwrap();
        let v = &op.mat * DVector::from_element(op.dom.len(), 1.0);
        assert!(v.amax() < 1e-12);
        let mixed = laplacian(&g, &om, &Boundary::Mixed { neumann: om.complement() }).unwrap();
        assert_eq!(mixed.mat, op.mat);
        let dir = laplacian(&g, &om, &Boundary::Mixed { neumann: SiteSet::empty(64) }).unwrap();
        assert_eq!(dir.mat, laplacian(&g, &om, &Boundary::Dirichlet).unwrap().mat);
    }

    #[test]
    fn quadratic_form_decomposes_over_region() {
        let g = LatticeGeometry::with_side(2, 2, 1, 0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi = rand_vec(64, &mut rng);
        let mu = 0.3;
        let om = Region::cube_box(&g, 2, [0, 1, 0], [3, 2, 1]).unwrap().site_set(&g);
        let w = g.site_weight();
        let full = (neg_laplacian_matrix(&g) + DMatrix::identity(64, 64) * mu) * &phi;
        let total = 0.5 * w * phi.dot(&full);
        let (oi, ci) = (om.indices(), om.complement().indices());
        let pin = linalg::subvector(&phi, &oi);
        let pout = linalg::subvector(&phi, &ci);
        let dir_in = laplacian(&g, &om, &Boundary::Dirichlet).unwrap();
        let dir_out = laplacian(&g, &om.complement(), &Boundary::Dirichlet).unwrap();
        let cross = laplacian(&g, &om, &Boundary::Cross).unwrap();
        let parts = 0.5 * w * pout.dot(&(&dir_out.mat * &pout + &pout * mu))
            + w * pin.dot(&(&cross.mat * &pout))
            + 0.5 * w * pin.dot(&(&dir_in.mat * &pin + &pin * mu));
        assert!((total - parts).abs() < 1e-13 * total.abs().max(1.0));
    }

    #[test]
    fn stiffness_from_one_block_minimization() {
        // one coarse block of L^d fine blocks, minimize over the fine block values
        let (a, l, d) = (1.3, 2usize, 2usize);
        let ak = 0.9;
        let nb = l.pow(d as u32);
        let c = a / (l * l) as f64 * nb as f64; // coarse weight L^d, fine weight 1
        // quadratic in u: c (F - mean u)^2 + ak sum (u - v)^2, solve densely
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..nb).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = 0.7;
        let mut h = DMatrix::from_element(nb, nb, c / (nb * nb) as f64);
        let mut rhs = DVector::from_element(nb, c * f / nb as f64);
        for i in 0..nb {
            h[(i, i)] += ak;
            rhs[i] += ak * v[i];
        }
        let u = h.clone().lu().solve(&rhs).unwrap();
        let mean_u = u.mean();
        let val = 0.5 * c * (f - mean_u).powi(2) + 0.5 * ak * u.iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let vbar = v.iter().sum::<f64>() / nb as f64;
        let ak1 = next_stiffness(ak, a, l);
        let predicted = 0.5 * ak1 / (l * l) as f64 * nb as f64 * (f - vbar).powi(2);
        assert!((val - predicted).abs() < 1e-13);
        let p = ActionParams::new(1.0, 2, 3, 0.0, 3);
        assert!((p.a_level(2) - 1.0 / 1.25).abs() < 1e-15);
        assert!((p.a_level(3) - 1.0 / (1.0 + 0.25 + 0.0625)).abs() < 1e-15);
    }

    #[test]
    fn half_bonds_are_additive() {
        let g = LatticeGeometry::with_side(2, 2, 1, 0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = rand_vec(64, &mut rng);
        let a = Region::cube_box(&g, 2, [0, 0, 0], [2, 4, 1]).unwrap().site_set(&g);
        let b = a.complement();
        let s = half_bond_inner(&g, &f, &f, &a) + half_bond_inner(&g, &f, &f, &b);
        let t = half_bond_inner(&g, &f, &f, &SiteSet::full(64));
        assert!((s - t).abs() < 1e-13 * t);
    }

    #[test]
    fn star_action_additive_and_plus_vacuum() {
        let g = LatticeGeometry::with_side(2, 1, 1, 0, 16).unwrap();
        let seq = RegionSequence::full(&g).unwrap();
        let p = ActionParams::new(1.0, 2, 1, 0.2, 1);
        let layout = MultiscaleLayout::new(&g, &seq, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bp = rand_vec(layout.len(), &mut rng);
        let phi = rand_vec(16, &mut rng);
        let a = SiteSet::from_indices(16, 0..6);
        let b = a.complement();
        let s = |l: &SiteSet| action(&ActionKind::Star, &g, &seq, &p, l, &bp, &phi);
        assert!((s(&a) + s(&b) - s(&SiteSet::full(16))).abs() < 1e-13);
        let zero_f = DVector::zeros(layout.len());
        let zero = DVector::zeros(16);
        let plus = ActionKind::Plus { eps: 0.7, mu: 0.1, lambda: 0.05 };
        let v = action(&plus, &g, &seq, &p, &a, &zero_f, &zero);
        assert!((v - 0.7 * 6.0 * 0.5).abs() < 1e-15);
        assert_eq!(action(&ActionKind::Star, &g, &seq, &p, &a, &zero_f, &zero), 0.0);
    }

    #[test]
    fn potential_values() {
        let g = LatticeGeometry::with_side(2, 1, 0, 0, 8).unwrap();
        let one = DVector::from_element(8, 1.0);
        let s = SiteSet::from_indices(8, [2]);
        assert!((potential(&g, &s, &one, 0.4, 0.6, 0.8) - (0.4 + 0.3 + 0.2)).abs() < 1e-15);
        // difference between the renormalized and unrenormalized potentials
        let phi = DVector::from_fn(8, |i, _| i as f64 * 0.1);
        let all = SiteSet::full(8);
        let vk = potential(&g, &all, &phi, 0.3, 0.2, 0.1);
        let vu = potential(&g, &all, &phi, 2.0 * 0.1, 4.0 * 0.04, 0.1);
        let diff = (0.3 - 0.2) * 8.0 + 0.5 * (0.2 - 0.16) * phi.dot(&phi);
        assert!((vk - vu - diff).abs() < 1e-13);
    }

    #[test]
    fn coupling_chain() {
        let c = CouplingState::new(0.01, 0.5, 2, 6).unwrap();
        assert_eq!(c.lambda_k(6), 0.01);
        for k in 0..6 {
            assert_eq!(c.lambda_k(k + 1), 2.0 * c.lambda_k(k));
            assert!(c.p_k(k + 1) < c.p_k(k) && c.r_k(k + 1) < c.r_k(k));
            assert!(1.0 / c.alpha_k(k) <= c.lambda_k(k).powf(-0.25) + 1e-12);
        }
        assert!(CouplingState::new(0.5, 0.1, 2, 3).is_err());
    }

    #[test]
    fn delta_kernel_is_psd_and_self_adjoint() {
        let g = LatticeGeometry::with_side(2, 1, 2, 0, 16).unwrap();
        let o2 = Region::cube_box(&g, 4, [1, 0, 0], [2, 1, 1]).unwrap();
        let o1 = Region::cube_box(&g, 2, [1, 0, 0], [6, 1, 1]).unwrap();
        let seq = RegionSequence::new(&g, vec![o1, o2]).unwrap();
        let p = ActionParams::new(1.0, 2, 1, 0.1, 2);
        let dk = fluct_kernel_delta(&g, &seq, &p).unwrap();
        assert!(dk.self_adjoint_defect() < 1e-12);
        assert!(linalg::min_eigenvalue(&linalg::symmetrize(&dk.form_matrix())) > -1e-12);
    }

    proptest! {
        #[test]
        fn sbp_identity_ring(seed in 0u64..1000, bits in 1u32..255) {
            let g = LatticeGeometry::with_side(2, 1, 1, 0, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = rand_vec(8, &mut rng);
            let h = rand_vec(8, &mut rng);
            let lam = SiteSet::from_indices(8, (0..8).filter(|i| bits >> i & 1 == 1));
            prop_assert!(summation_by_parts(&g, &f, &h, &lam).abs() < 1e-12);
        }

        #[test]
        fn sbp_identity_2d(seed in 0u64..1000, bits in 1u32..65535) {
            let g = LatticeGeometry::with_side(2, 2, 1, 0, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = rand_vec(16, &mut rng);
            let h = rand_vec(16, &mut rng);
            let lam = SiteSet::from_indices(16, (0..16).filter(|i| bits >> i & 1 == 1));
            prop_assert!(summation_by_parts(&g, &f, &h, &lam).abs() < 1e-11);
        }
    }
}
