//! The two-level minimization problem evaluated directly, and the exact identities
//! relating its minimizers, minimum and quadratic expansion.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{minimizer, minimizer_bundle, truncate, GreenSystem, MinimizerBundle};
use crate::error::{Error, Result};
use crate::geometry::{LatticeGeometry, MultiscaleLayout, RegionSequence, SiteSet};
use crate::linalg;
use crate::quadforms::{self, averaging_energy, boundary_term, half_bond_inner, inner_on, ActionParams};

/// Bond sum `eta^d sum_{x,mu} (df)^2 = <f, -Delta f>` on the whole torus.
pub(super) fn gradient_energy(geom: &LatticeGeometry, f: &DVector<f64>) -> f64 {
    let h = geom.spacing();
    let mut s = 0.0;
    for x in 0..geom.n_sites() {
        for mu in 0..geom.d {
            s += ((f[geom.shift(x, mu, 1)] - f[x]) / h).powi(2);
        }
    }
    geom.site_weight() * s
}

/// Top-level coupling `(a/2L^2) ||Phi_{k+1} - Q Phi_k||^2` on `Omega_{k+1}`.
pub(super) fn coupling_energy(
    geom: &LatticeGeometry,
    params: &ActionParams,
    plus_layout: &MultiscaleLayout,
    big_phi_plus: &DVector<f64>,
    layout: &MultiscaleLayout,
    big_phi: &DVector<f64>,
) -> f64 {
    let k = geom.k as usize;
    let l2 = (params.l * params.l) as f64;
    let pos: HashMap<usize, usize> =
        layout.entries.iter().enumerate().filter(|(_, e)| e.level == k).map(|(p, e)| (e.block, p)).collect();
    let w = plus_layout.weights();
    let mut s = 0.0;
    for (p, e) in plus_layout.entries.iter().enumerate() {
        if e.level != k + 1 {
            continue;
        }
        let subs: Vec<usize> = e.sites.iter().map(|&x| geom.block_of(x, k as u32)).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let mean = subs.iter().map(|b| big_phi[pos[b]]).sum::<f64>() / subs.len() as f64;
        s += 0.5 * params.a / l2 * w[p] * (big_phi_plus[p] - mean).powi(2);
    }
    s
}

/// `J(Phi_{k+1}, Phi_{k,Omega}, phi)`: the top coupling, the multiscale averaging terms
/// and `1/2 <phi, (-Delta + mu) phi>` over the whole torus.
pub fn joint_functional(
    geom: &LatticeGeometry,
    seq_plus: &RegionSequence,
    params: &ActionParams,
    big_phi_plus: &DVector<f64>,
    big_phi: &DVector<f64>,
    phi: &DVector<f64>,
) -> Result<f64> {
    let seq = truncate(geom, seq_plus)?;
    let layout = MultiscaleLayout::new(geom, &seq, false);
    let plus_layout = MultiscaleLayout::new(geom, seq_plus, false);
    let stiff = params.layout_stiffness(&layout);
    Ok(coupling_energy(geom, params, &plus_layout, big_phi_plus, &layout, big_phi)
        + averaging_energy(&layout, &stiff, big_phi, phi, None)
        + 0.5 * gradient_energy(geom, phi)
        + 0.5 * params.mu_bar * geom.site_weight() * phi.norm_squared())
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IdentityResiduals {
    /// Joint minimizer by direct quadratic minimization against the bundle.
    pub brute_phi: f64,
    pub brute_psi: f64,
    /// `phi^0 = phi_{k,Omega}(phi_ext, Psi)`.
    pub loopy: f64,
    /// The first two terms at the minimum collapse to the `a_{k+1}` term.
    pub collapse: f64,
    /// Value of `J` at the minimum against the closed form.
    pub value_at_min: f64,
    /// Linear terms of the expansion vanish.
    pub linear_terms: f64,
    /// Quadratic expansion with `Delta_{k,Omega} + a L^-2 Q^T Q`.
    pub quadratic: f64,
    /// `S*` expansion with the boundary term.
    pub star_expansion: f64,
    /// `J*` decomposition with the remainder `R`.
    pub jstar: f64,
    /// `|R|`, logged.
    pub remainder: f64,
}

impl IdentityResiduals {
    pub fn max(&self) -> f64 {
        [
            self.brute_phi,
            self.brute_psi,
            self.loopy,
            self.collapse,
            self.value_at_min,
            self.linear_terms,
            self.quadratic,
            self.star_expansion,
            self.jstar,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn rel(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(1e-300)
}

fn vrel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1e-300)
}

/// Check every identity of the two-level problem for the given fields and `Lambda`,
/// with `z` a field on the level-`k` blocks of `Omega_{k+1}` (in layout order).
pub fn verify_expansion_identities(
    geom: &LatticeGeometry,
    seq_plus: &RegionSequence,
    params: &ActionParams,
    lambda: &SiteSet,
    big_phi_plus: &DVector<f64>,
    phi: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<IdentityResiduals> {
    let k = geom.k as usize;
    let sets = seq_plus.site_sets(geom);
    let top = &sets[k];
    if !top.is_subset(lambda) || !lambda.is_subset(&sets[k - 1]) {
        return Err(Error::Precondition("need Omega_{k+1} ⊂ Lambda ⊂ Omega_k".into()));
    }
    if (0..geom.n_blocks(k as u32)).any(|b| {
        let inside = geom.block_sites(b, k as u32).iter().filter(|&&x| lambda.contains(x)).count();
        inside != 0 && inside != geom.block_sites(b, k as u32).len()
    }) {
        return Err(Error::Precondition("Lambda must be a union of level-k blocks".into()));
    }
    let b: MinimizerBundle = minimizer_bundle(geom, seq_plus, params, big_phi_plus, phi)?;
    let seq = truncate(geom, seq_plus)?;
    let layout = &b.layout;
    let stiff = params.layout_stiffness(layout);
    let top_pos: Vec<usize> =
        (0..layout.len()).filter(|&p| layout.entries[p].level == k && top.contains(layout.entries[p].sites[0])).collect();
    if z.len() != top_pos.len() {
        return Err(Error::Shape(format!("z has {} values for {} blocks", z.len(), top_pos.len())));
    }
    let mut res = IdentityResiduals::default();

    // brute force: minimize J over phi on Omega_1 and Phi_k on Omega_{k+1}
    let o1 = sets[0].indices();
    let nv = o1.len() + top_pos.len();
    let assemble = |y: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let mut f = phi.clone();
        for (a, &x) in o1.iter().enumerate() {
            f[x] = y[a];
        }
        let mut big = b.psi.clone();
        for (a, &p) in top_pos.iter().enumerate() {
            big[p] = y[o1.len() + a];
        }
        (big, f)
    };
    let jval = |y: &DVector<f64>| -> Result<f64> {
        let (big, f) = assemble(y);
        joint_functional(geom, seq_plus, params, big_phi_plus, &big, &f)
    };
    let j0 = jval(&DVector::zeros(nv))?;
    let mut diag = vec![0.0; nv];
    let mut ones = vec![0.0; nv];
    for i in 0..nv {
        let mut e = DVector::zeros(nv);
        e[i] = 1.0;
        ones[i] = jval(&e)?;
        e[i] = -1.0;
        diag[i] = ones[i] + jval(&e)? - 2.0 * j0;
    }
    let mut hess = DMatrix::zeros(nv, nv);
    for i in 0..nv {
        hess[(i, i)] = diag[i];
        for j in 0..i {
            let mut e = DVector::zeros(nv);
            e[i] = 1.0;
            e[j] = 1.0;
            let v = jval(&e)? - ones[i] - ones[j] + j0;
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let grad = DVector::from_fn(nv, |i, _| ones[i] - j0 - 0.5 * diag[i]);
    let y = -linalg::spd_inverse(&hess)? * grad;
    let (big_min, phi_min) = assemble(&y);
    res.brute_phi = vrel(&phi_min, &b.phi0);
    res.brute_psi = vrel(&big_min, &b.psi);
    let j_min = jval(&y)?;

    res.loopy = vrel(&minimizer(geom, &seq, params, &b.psi, phi)?, &b.phi0);

    // averages over Omega_{k+1} entries
    let l2 = (params.l * params.l) as f64;
    let ak = params.a_level(k);
    let ak1 = params.a_level(k + 1);
    let plus_w = b.plus_layout.weights();
    let w = layout.weights();
    let top_plus: Vec<usize> = (0..b.plus_layout.len()).filter(|&p| b.plus_layout.entries[p].level == k + 1).collect();
    let mean = |f: &DVector<f64>, sites: &[usize]| sites.iter().map(|&s| f[s]).sum::<f64>() / sites.len() as f64;
    let coupling = coupling_energy(geom, params, &b.plus_layout, big_phi_plus, layout, &b.psi);
    let lower: f64 = top_pos.iter().map(|&p| 0.5 * ak * w[p] * (b.psi[p] - mean(&b.phi0, &layout.entries[p].sites)).powi(2)).sum();
    let collapsed: f64 = top_plus
        .iter()
        .map(|&p| 0.5 * ak1 / l2 * plus_w[p] * (big_phi_plus[p] - mean(&b.phi0, &b.plus_layout.entries[p].sites)).powi(2))
        .sum();
    res.collapse = rel(coupling + lower, collapsed, collapsed.abs().max(1.0));

    // closed form of the minimum
    let lap = quadforms::neg_laplacian_matrix(geom);
    let ext_set = sets[0].complement();
    let mut ext = phi.clone();
    for &x in &o1 {
        ext[x] = 0.0;
    }
    let mut inner0 = b.phi0.clone();
    for x in ext_set.indices() {
        inner0[x] = 0.0;
    }
    let ext_part = 0.5 * inner_on(geom, &(&lap * &ext), &ext, &ext_set) + 0.5 * params.mu_bar * inner_on(geom, &ext, &ext, &ext_set);
    let cross_part = inner_on(geom, &(&lap * &inner0), &ext, &ext_set);
    let s0 = averaging_energy(&b.plus_layout, &b.plus_stiff, big_phi_plus, &inner0, None)
        + 0.5 * inner_on(geom, &(&lap * &inner0), &inner0, &sets[0])
        + 0.5 * params.mu_bar * inner_on(geom, &inner0, &inner0, &sets[0]);
    let closed = ext_part + cross_part + s0;
    res.value_at_min = rel(j_min, closed, closed.abs().max(1.0));

    // linear terms: (a/L^2) Q^T (Phi_{k+1} - Q Psi) = (a_{k+1}/L^2) Q^T (Phi_{k+1} - Q_{k+1} phi0) = a_k (Psi - Q_k phi0)
    let mut lin = 0.0f64;
    let plus_pos: HashMap<usize, usize> = top_plus.iter().map(|&p| (b.plus_layout.entries[p].block, p)).collect();
    let psi_pos: HashMap<usize, usize> = top_pos.iter().map(|&p| (layout.entries[p].block, p)).collect();
    for &p in &top_pos {
        let e = &layout.entries[p];
        let big = geom.block_of(e.sites[0], (k + 1) as u32);
        let q = plus_pos[&big];
        let coarse = &b.plus_layout.entries[q].sites;
        let subs: std::collections::BTreeSet<usize> = coarse.iter().map(|&x| geom.block_of(x, k as u32)).collect();
        let qpsi = subs.iter().map(|bb| b.psi[psi_pos[bb]]).sum::<f64>() / subs.len() as f64;
        let t1 = params.a / l2 * (big_phi_plus[q] - qpsi);
        let t2 = ak1 / l2 * (big_phi_plus[q] - mean(&b.phi0, coarse));
        let t3 = ak * (b.psi[p] - mean(&b.phi0, &e.sites));
        let sc = t1.abs().max(t3.abs()).max(1.0);
        lin = lin.max((t1 - t2).abs() / sc).max((t1 - t3).abs() / sc);
    }
    res.linear_terms = lin;

    // expansion in Z
    let mut zfull = DVector::zeros(layout.len());
    for (a, &p) in top_pos.iter().enumerate() {
        zfull[p] = z[a];
    }
    let sys = GreenSystem::new(geom, &seq, params)?;
    let zcal = sys.solve(&zfull, &DVector::zeros(geom.n_sites()))?;
    let delta = quadforms::fluct_kernel_delta(geom, &seq, params)?;
    let mut zq = 0.0;
    for (a, &p) in top_pos.iter().enumerate() {
        let dz: f64 = top_pos.iter().enumerate().map(|(c, &q)| delta.mat[(p, q)] * z[c]).sum();
        zq += w[p] * z[a] * dz;
    }
    let mut qq = 0.0;
    for &q in &top_plus {
        let subs: std::collections::BTreeSet<usize> =
            b.plus_layout.entries[q].sites.iter().map(|&x| geom.block_of(x, k as u32)).collect();
        let m = subs.iter().map(|bb| zfull[psi_pos[bb]]).sum::<f64>() / subs.len() as f64;
        qq += plus_w[q] * m * m;
    }
    let quad = 0.5 * zq + 0.5 * params.a / l2 * qq;
    let shifted_psi = &b.psi + &zfull;
    let shifted_phi = &b.phi0 + &zcal;
    let j_shift = joint_functional(geom, seq_plus, params, big_phi_plus, &shifted_psi, &shifted_phi)?;
    res.quadratic = rel(j_shift, closed + quad, j_shift.abs().max(1.0));

    // S* expansion around the minimizer
    let star = |big: &DVector<f64>, f: &DVector<f64>| {
        averaging_energy(layout, &stiff, big, f, Some(lambda))
            + 0.5 * half_bond_inner(geom, f, f, lambda)
            + 0.5 * params.mu_bar * inner_on(geom, f, f, lambda)
    };
    let cross_avg: f64 = top_pos
        .iter()
        .filter(|&&p| lambda.contains(layout.entries[p].sites[0]))
        .map(|&p| ak * w[p] * zfull[p] * (b.psi[p] - mean(&b.phi0, &layout.entries[p].sites)))
        .sum();
    let bterm = boundary_term(geom, &b.phi0, &zcal, lambda);
    let lhs = star(&shifted_psi, &shifted_phi);
    let rhs = star(&b.psi, &b.phi0) + star(&zfull, &zcal) + cross_avg + bterm;
    res.star_expansion = rel(lhs, rhs, lhs.abs().max(1.0));

    // J* decomposition
    let jstar_lhs = coupling_energy(geom, params, &b.plus_layout, big_phi_plus, layout, &shifted_psi) + star(&shifted_psi, &shifted_phi);
    let s_star0 = averaging_energy(&b.plus_layout, &b.plus_stiff, big_phi_plus, &b.phi0, Some(lambda))
        + 0.5 * half_bond_inner(geom, &b.phi0, &b.phi0, lambda)
        + 0.5 * params.mu_bar * inner_on(geom, &b.phi0, &b.phi0, lambda);
    let outside = lambda.complement();
    let qz = averaging_energy(layout, &stiff, &DVector::zeros(layout.len()), &zcal, Some(&outside));
    let remainder = -(qz + 0.5 * half_bond_inner(geom, &zcal, &zcal, &outside) + 0.5 * params.mu_bar * inner_on(geom, &zcal, &zcal, &outside));
    let jstar_rhs = s_star0 + quad + remainder + bterm;
    res.jstar = rel(jstar_lhs, jstar_rhs, jstar_lhs.abs().max(1.0));
    res.remainder = remainder.abs();
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Region;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identities_on_a_line() {
        // 16 sites, k = 1: Omega_1 = 3 cubes of 4, Omega_2 = one cube of 8, Lambda in between
        let g = LatticeGeometry::new(2, 1, 4, 3, 1, 1).unwrap();
        let o1 = Region::from_cubes(&g, 4, &[[0, 0, 0], [1, 0, 0], [2, 0, 0]]).unwrap();
        let o2 = Region::from_cubes(&g, 8, &[[0, 0, 0]]).unwrap();
        let seq = RegionSequence::new(&g, vec![o1, o2]).unwrap();
        let lambda = SiteSet::from_indices(16, 0..10);
        let p = ActionParams::new(1.0, 2, 1, 0.3, 3);
        let lay = MultiscaleLayout::new(&g, &seq, false);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let big = DVector::from_fn(lay.len(), |_, _| rng.gen_range(-1.0..1.0));
            let phi = DVector::from_fn(16, |_, _| rng.gen_range(-1.0..1.0));
            let z = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let r = verify_expansion_identities(&g, &seq, &p, &lambda, &big, &phi, &z).unwrap();
            assert!(r.max() < 1e-10, "{r:?}");
        }
    }

    #[test]
    fn zero_shift_is_value_at_minimum() {
        let g = LatticeGeometry::new(2, 1, 4, 3, 1, 1).unwrap();
        let o1 = Region::from_cubes(&g, 4, &[[0, 0, 0], [1, 0, 0], [2, 0, 0]]).unwrap();
        let o2 = Region::from_cubes(&g, 8, &[[0, 0, 0]]).unwrap();
        let seq = RegionSequence::new(&g, vec![o1, o2]).unwrap();
        let p = ActionParams::new(1.0, 2, 1, 0.0, 3);
        let lay = MultiscaleLayout::new(&g, &seq, false);
        let big = DVector::from_fn(lay.len(), |i, _| (i as f64).cos());
        let phi = DVector::from_fn(16, |i, _| (i as f64 * 0.3).sin());
        let r = verify_expansion_identities(&g, &seq, &p, &SiteSet::from_indices(16, 0..12), &big, &phi, &DVector::zeros(4)).unwrap();
        assert!(r.quadratic < 1e-12 && r.remainder == 0.0);
        let cut = SiteSet::from_indices(16, 0..9);
        assert!(verify_expansion_identities(&g, &seq, &p, &cut, &big, &phi, &DVector::zeros(4)).is_err());
    }
}
