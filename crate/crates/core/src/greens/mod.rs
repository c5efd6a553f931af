//! Green's functions of `-Delta + mu + Q^* a Q` with Dirichlet conditions on `Omega_1`,
//! the minimizers they produce, local inverses, random-walk expansions and decay tables.

mod decay;
mod freeflow;
mod identities;
mod localized;
mod walk;

pub use freeflow::{free_flow_check, iterated_collapse, polarize, CollapseReport, FreeFlowReport, GaussianMarginal};
pub use decay::{decay_profile, fit_decay, DecayFit, DecayRow, DecayTable, twoone_constant};
pub use identities::{joint_functional, verify_expansion_identities, IdentityResiduals};
pub use localized::{localized_field, unit_field_from, LocalizedVariant};
pub use walk::{CoverCube, RandomWalkExpansion, WalkDiagnostics, WeakeningCheck};

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::blockavg;
use crate::error::{Error, Result};
use crate::geometry::{LatticeGeometry, MultiscaleLayout, RegionSequence, SiteSet};
use crate::linalg;
use crate::quadforms::{neg_laplacian_matrix, ActionParams, DenseOperator};

/// The defining operator `H = [-Delta + mu + Q^* a Q]_{Omega_1}` together with the
/// pieces needed to form sources.
#[derive(Clone, Debug)]
pub struct GreenSystem {
    pub geom: LatticeGeometry,
    /// Sites of `Omega_1`, in increasing order.
    pub sites: Vec<usize>,
    /// Sites outside `Omega_1`.
    pub ext: Vec<usize>,
    pub layout: MultiscaleLayout,
    pub stiff: DVector<f64>,
    pub mu_bar: f64,
    pub h: DMatrix<f64>,
    /// `Q^*` with rows restricted to `Omega_1`.
    qstar: DMatrix<f64>,
    /// `[Delta]_{Omega_1, Omega_1^c}`.
    cross: DMatrix<f64>,
}

impl GreenSystem {
    pub fn new(geom: &LatticeGeometry, seq: &RegionSequence, params: &ActionParams) -> Result<Self> {
        let layout = MultiscaleLayout::new(geom, seq, false);
        let stiff = params.layout_stiffness(&layout);
        Self::with_stiffness(geom, seq, stiff, params.mu_bar)
    }

    /// Same operator with an explicit stiffness per layout entry.
    pub fn with_stiffness(geom: &LatticeGeometry, seq: &RegionSequence, stiff: DVector<f64>, mu_bar: f64) -> Result<Self> {
        let layout = MultiscaleLayout::new(geom, seq, false);
        if stiff.len() != layout.len() {
            return Err(Error::Shape(format!("{} stiffness values for {} entries", stiff.len(), layout.len())));
        }
        let o1 = seq.omega1(geom);
        if o1.is_empty() {
            return Err(Error::Precondition("Omega_1 is empty".into()));
        }
        let sites = o1.indices();
        let ext = o1.complement().indices();
        let lap = neg_laplacian_matrix(geom);
        let n = geom.n_sites();
        let q = linalg::submatrix(&blockavg::layout_matrix(&layout, n), &(0..layout.len()).collect::<Vec<_>>(), &sites);
        let qstar = blockavg::layout_adjoint_matrix(&layout, geom).select_rows(sites.iter());
        let mut h = linalg::submatrix(&lap, &sites, &sites) + &qstar * DMatrix::from_diagonal(&stiff) * q;
        for i in 0..sites.len() {
            h[(i, i)] += mu_bar;
        }
        let cross = -linalg::submatrix(&lap, &sites, &ext);
        Ok(GreenSystem { geom: geom.clone(), sites, ext, layout, stiff, mu_bar, h, qstar, cross })
    }

    pub fn green(&self) -> Result<DMatrix<f64>> {
        linalg::spd_inverse(&self.h)
    }

    /// `Q^* a Phi + [Delta]_{Omega_1, Omega_1^c} phi` on `Omega_1`; `phi` is a full-lattice vector.
    pub fn source(&self, big_phi: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64> {
        let a_phi = self.stiff.component_mul(big_phi);
        let ext = linalg::subvector(phi, &self.ext);
        &self.qstar * a_phi + &self.cross * ext
    }

    /// The minimizer on `Omega_1` embedded in a full-lattice vector that keeps `phi` outside.
    pub fn solve(&self, big_phi: &DVector<f64>, phi: &DVector<f64>) -> Result<DVector<f64>> {
        let chol = self
            .h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("defining operator, min eigenvalue {:.3e}", linalg::min_eigenvalue(&self.h))))?;
        let inner = chol.solve(&self.source(big_phi, phi));
        let mut out = phi.clone();
        for (a, &i) in self.sites.iter().enumerate() {
            out[i] = inner[a];
        }
        Ok(out)
    }

    pub fn local_index(&self) -> HashMap<usize, usize> {
        self.sites.iter().enumerate().map(|(a, &i)| (i, a)).collect()
    }
}

/// `G_{k,Omega}` as an operator on functions on `Omega_1`.
pub fn dense_green(geom: &LatticeGeometry, seq: &RegionSequence, params: &ActionParams) -> Result<DenseOperator> {
    let sys = GreenSystem::new(geom, seq, params)?;
    let g = linalg::symmetrize(&sys.green()?);
    Ok(DenseOperator::uniform(sys.sites, g, geom.site_weight()))
}

/// `phi_{k,Omega}(phi_ext, Phi)` as a full-lattice vector equal to `phi` off `Omega_1`.
pub fn minimizer(
    geom: &LatticeGeometry,
    seq: &RegionSequence,
    params: &ActionParams,
    big_phi: &DVector<f64>,
    phi: &DVector<f64>,
) -> Result<DVector<f64>> {
    GreenSystem::new(geom, seq, params)?.solve(big_phi, phi)
}

/// Inverse of the defining operator on `tilde ∩ Omega_1`, Neumann across the part of the
/// boundary inside `Omega_1` and Dirichlet on the part shared with its boundary.
pub fn local_green(sys: &GreenSystem, tilde: &SiteSet) -> Result<DenseOperator> {
    let geom = &sys.geom;
    let index = sys.local_index();
    let local: Vec<usize> = sys.sites.iter().enumerate().filter(|(_, &i)| tilde.contains(i)).map(|(a, _)| a).collect();
    if local.is_empty() {
        return Err(Error::Precondition("cover cube misses Omega_1".into()));
    }
    let mut h = linalg::submatrix(&sys.h, &local, &local);
    let h2 = geom.spacing().powi(-2);
    for (b, &a) in local.iter().enumerate() {
        let x = sys.sites[a];
        for mu in 0..geom.d {
            for dir in [-1isize, 1] {
                let y = geom.shift(x, mu, dir);
                if index.contains_key(&y) && !tilde.contains(y) {
                    h[(b, b)] -= h2;
                }
            }
        }
    }
    let g = linalg::symmetrize(&linalg::spd_inverse(&h)?);
    Ok(DenseOperator::uniform(local.iter().map(|&a| sys.sites[a]).collect(), g, geom.site_weight()))
}

/// The fields of the two-level minimization problem.
#[derive(Clone, Debug)]
pub struct MinimizerBundle {
    /// Joint minimizer in `phi`, full lattice with the exterior field kept.
    pub phi0: DVector<f64>,
    /// `Phi_{k,Omega}` with its part on `Omega_{k+1}` replaced by the minimizer.
    pub psi: DVector<f64>,
    /// Layout of `psi` (depth `k`).
    pub layout: MultiscaleLayout,
    /// Layout of the input field (depth `k+1`).
    pub plus_layout: MultiscaleLayout,
    /// Stiffness on `plus_layout` used by `G^0`: `a_j^{(k)}` below the top level, `a_{k+1}/L^2` on it.
    pub plus_stiff: DVector<f64>,
    pub g0: DMatrix<f64>,
}

/// The multiscale stiffness of `G^0` on a sequence of depth `k+1` over a level-`k` lattice.
pub fn plus_stiffness(geom: &LatticeGeometry, params: &ActionParams, plus_layout: &MultiscaleLayout) -> DVector<f64> {
    let k = geom.k as usize;
    let l2 = (params.l * params.l) as f64;
    DVector::from_iterator(
        plus_layout.len(),
        plus_layout.entries.iter().map(|e| {
            if e.level == k + 1 {
                params.a_level(k + 1) / l2
            } else {
                params.scaled(e.level, k)
            }
        }),
    )
}

/// Drop the last region of a sequence.
pub fn truncate(geom: &LatticeGeometry, seq_plus: &RegionSequence) -> Result<RegionSequence> {
    let mut r = seq_plus.regions.clone();
    r.pop();
    RegionSequence::new(geom, r)
}

fn check_plus(geom: &LatticeGeometry, seq_plus: &RegionSequence, params: &ActionParams) -> Result<()> {
    let k = geom.k as usize;
    if k == 0 || seq_plus.depth() != k + 1 {
        return Err(Error::Precondition(format!("need k >= 1 and a sequence of depth k+1, got k={k}, depth {}", seq_plus.depth())));
    }
    if params.stiffness.len() < k + 1 {
        return Err(Error::Precondition("stiffness table too short".into()));
    }
    Ok(())
}

/// Solve the joint minimization of the two-level problem.
pub fn minimizer_bundle(
    geom: &LatticeGeometry,
    seq_plus: &RegionSequence,
    params: &ActionParams,
    big_phi_plus: &DVector<f64>,
    phi: &DVector<f64>,
) -> Result<MinimizerBundle> {
    check_plus(geom, seq_plus, params)?;
    let k = geom.k as usize;
    let plus_layout = MultiscaleLayout::new(geom, seq_plus, false);
    if big_phi_plus.len() != plus_layout.len() {
        return Err(Error::Shape("input field does not match the depth k+1 layout".into()));
    }
    let plus_stiff = plus_stiffness(geom, params, &plus_layout);
    let sys0 = GreenSystem::with_stiffness(geom, seq_plus, plus_stiff.clone(), params.mu_bar)?;
    let phi0 = sys0.solve(big_phi_plus, phi)?;
    let g0 = sys0.green()?;

    let seq = truncate(geom, seq_plus)?;
    let layout = MultiscaleLayout::new(geom, &seq, false);
    let pos: HashMap<(usize, usize), usize> =
        plus_layout.entries.iter().enumerate().map(|(p, e)| ((e.level, e.block), p)).collect();
    let a = params.a;
    let l2 = (params.l * params.l) as f64;
    let c = a / l2 / (params.a_level(k) + a / l2);
    let mean = |sites: &[usize]| sites.iter().map(|&s| phi0[s]).sum::<f64>() / sites.len() as f64;
    let mut psi = DVector::zeros(layout.len());
    for (p, e) in layout.entries.iter().enumerate() {
        if let Some(&q) = pos.get(&(e.level, e.block)) {
            psi[p] = big_phi_plus[q];
            continue;
        }
        // a level-k block under Omega_{k+1}
        let big = geom.block_of(e.sites[0], (k + 1) as u32);
        let q = *pos.get(&(k + 1, big)).ok_or_else(|| Error::Geometry("level-k block outside both layouts".into()))?;
        let coarse = geom.block_sites(big, (k + 1) as u32);
        psi[p] = mean(&e.sites) - c * mean(&coarse) + c * big_phi_plus[q];
    }
    Ok(MinimizerBundle { phi0, psi, layout, plus_layout, plus_stiff, g0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Region;

    fn line16() -> (LatticeGeometry, RegionSequence) {
        let g = LatticeGeometry::new(2, 1, 4, 3, 1, 1).unwrap();
        let r = Region::from_cubes(&g, 4, &[[1, 0, 0], [2, 0, 0]]).unwrap();
        (g.clone(), RegionSequence::new(&g, vec![r]).unwrap())
    }

    #[test]
    fn green_inverts_defining_operator() {
        let (g, seq) = line16();
        let p = ActionParams::new(1.0, 2, 1, 0.1, 2);
        let sys = GreenSystem::new(&g, &seq, &p).unwrap();
        let gm = sys.green().unwrap();
        let id = &gm * &sys.h;
        assert!(linalg::max_abs(&(id - DMatrix::identity(8, 8))) < 1e-12);
        assert!(dense_green(&g, &seq, &p).unwrap().self_adjoint_defect() < 1e-12);
    }

    #[test]
    fn empty_increment_is_plain_resolvent() {
        // full-torus one-level Omega with zero stiffness: [-Delta + mu]^{-1}
        let g = LatticeGeometry::with_side(2, 1, 1, 1, 8).unwrap();
        let seq = RegionSequence::full(&g).unwrap();
        let lay = MultiscaleLayout::new(&g, &seq, false);
        let sys = GreenSystem::with_stiffness(&g, &seq, DVector::zeros(lay.len()), 0.5).unwrap();
        let gm = sys.green().unwrap();
        let e = (neg_laplacian_matrix(&g) + DMatrix::identity(8, 8) * 0.5).symmetric_eigen();
        let spec = &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|x| 1.0 / x)) * e.eigenvectors.transpose();
        assert!(linalg::max_abs(&(gm - spec)) < 1e-12);
    }

    #[test]
    fn dirichlet_monotone_in_region() {
        let g = LatticeGeometry::new(2, 1, 4, 3, 1, 1).unwrap();
        let p = ActionParams::new(1.0, 2, 1, 0.0, 2);
        let big = Region::from_cubes(&g, 4, &[[0, 0, 0], [1, 0, 0], [2, 0, 0]]).unwrap();
        let small = Region::from_cubes(&g, 4, &[[1, 0, 0], [2, 0, 0]]).unwrap();
        let gb = dense_green(&g, &RegionSequence::new(&g, vec![big]).unwrap(), &p).unwrap();
        let gs = dense_green(&g, &RegionSequence::new(&g, vec![small]).unwrap(), &p).unwrap();
        let pos = |op: &DenseOperator, s: usize| op.dom.iter().position(|&x| x == s).unwrap();
        for &x in &gs.dom {
            for &y in &gs.dom {
                assert!(gs.mat[(pos(&gs, x), pos(&gs, y))] <= gb.mat[(pos(&gb, x), pos(&gb, y))] + 1e-14);
            }
        }
    }

    #[test]
    fn neumann_constant_response() {
        // zero stiffness, Neumann everywhere inside: G 1 = 1/mu
        let g = LatticeGeometry::with_side(2, 1, 1, 1, 16).unwrap();
        let seq = RegionSequence::full(&g).unwrap();
        let lay = MultiscaleLayout::new(&g, &seq, false);
        let sys = GreenSystem::with_stiffness(&g, &seq, DVector::zeros(lay.len()), 0.25).unwrap();
        let tilde = SiteSet::from_indices(16, 4..12);
        let loc = local_green(&sys, &tilde).unwrap();
        let out = &loc.mat * DVector::from_element(8, 1.0);
        assert!(out.iter().all(|v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn zero_inputs_give_zero_minimizers() {
        let g = LatticeGeometry::new(2, 1, 4, 3, 1, 1).unwrap();
        let o1 = Region::from_cubes(&g, 4, &[[0, 0, 0], [1, 0, 0], [2, 0, 0]]).unwrap();
        let o2 = Region::from_cubes(&g, 8, &[[0, 0, 0]]).unwrap();
        let seq = RegionSequence::new(&g, vec![o1, o2]).unwrap();
        let p = ActionParams::new(1.0, 2, 1, 0.0, 3);
        let lay = MultiscaleLayout::new(&g, &seq, false);
        let b = minimizer_bundle(&g, &seq, &p, &DVector::zeros(lay.len()), &DVector::zeros(16)).unwrap();
        assert!(b.phi0.amax() == 0.0 && b.psi.amax() == 0.0);
    }

    #[test]
    fn constant_fields_reproduce_constant() {
        // mu = 0, Phi = c on every slot, exterior = c: the minimizer is c
        let (g, seq) = line16();
        let p = ActionParams::new(1.0, 2, 1, 0.0, 2);
        let lay = MultiscaleLayout::new(&g, &seq, false);
        let c = 1.7;
        let phi = minimizer(&g, &seq, &p, &DVector::from_element(lay.len(), c), &DVector::from_element(16, c)).unwrap();
        assert!(phi.iter().all(|v| (v - c).abs() < 1e-12));
    }
}
