//! Block averaging `Q`, its powers `Q_j`, the multiscale `Q_{k,Omega}`, adjoints
//! and the completion operators that carry multiscale fields to the unit lattice.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{Field, LatticeGeometry, MultiscaleField, MultiscaleLayout, RegionSequence};
use crate::linalg;
use crate::quadforms::DenseOperator;

#[derive(Clone, Debug, PartialEq)]
pub enum AveragingKind {
    Power(u32),
    Multiscale,
    Completion,
    TildeCompletion,
    Adjoint(Box<AveragingKind>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AveragingOperator {
    pub kind: AveragingKind,
    pub op: DenseOperator,
}

impl AveragingOperator {
    pub fn adjoint(&self) -> Self {
        AveragingOperator { kind: AveragingKind::Adjoint(Box::new(self.kind.clone())), op: self.op.adjoint() }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.op.apply(v)
    }

    /// Maximal deviation of a row sum from one.
    pub fn row_sum_defect(&self) -> f64 {
        self.op.mat.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Mean over `L^j` blocks; output indexed lexicographically on the block grid.
pub fn apply_q(f: &Field, j: u32) -> Result<Field> {
    let g = &f.geom;
    let bs = g.block_side(j);
    g.check_divides(bs)?;
    if !f.support.is_full() {
        return Err(Error::Precondition("averaging needs a field on the full torus".into()));
    }
    let coarse = if g.k >= j {
        LatticeGeometry { k: g.k - j, ..g.clone() }
    } else {
        // coarser than the unit lattice: keep the site count, drop the physical spacing
        LatticeGeometry { k: 0, mvol: g.mvol + g.k - j, ..g.clone() }
    };
    let mut vals = vec![0.0; g.n_blocks(j)];
    let inv = 1.0 / (bs.pow(g.d as u32)) as f64;
    for (i, v) in f.values.iter().enumerate() {
        vals[g.block_of(i, j)] += v * inv;
    }
    Ok(Field::on_torus(coarse, vals))
}

/// `Q_j` as a dense operator from fine sites to blocks of side `L^j`.
pub fn q_power(geom: &LatticeGeometry, j: u32) -> Result<AveragingOperator> {
    let bs = geom.block_side(j);
    geom.check_divides(bs)?;
    let n = geom.n_sites();
    let nb = geom.n_blocks(j);
    let vol = bs.pow(geom.d as u32) as f64;
    let mut m = DMatrix::zeros(nb, n);
    for i in 0..n {
        m[(geom.block_of(i, j), i)] = 1.0 / vol;
    }
    let op = DenseOperator::new(
        (0..n).collect(),
        (0..nb).collect(),
        m,
        DVector::from_element(n, geom.site_weight()),
        DVector::from_element(nb, geom.site_weight() * vol),
    )?;
    Ok(AveragingOperator { kind: AveragingKind::Power(j), op })
}

/// Entry-wise block means of a fine field on a multiscale layout.
pub fn layout_average(layout: &MultiscaleLayout, phi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        layout.len(),
        layout.entries.iter().map(|e| e.sites.iter().map(|&s| phi[s]).sum::<f64>() / e.sites.len() as f64),
    )
}

/// Matrix of `Q_{k,Omega}` (entries by fine sites).
pub fn layout_matrix(layout: &MultiscaleLayout, n_sites: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(layout.len(), n_sites);
    for (p, e) in layout.entries.iter().enumerate() {
        let w = 1.0 / e.sites.len() as f64;
        for &s in &e.sites {
            m[(p, s)] = w;
        }
    }
    m
}

/// Matrix of the weighted adjoint `Q_{k,Omega}^*`: block-constant extension.
pub fn layout_adjoint_matrix(layout: &MultiscaleLayout, geom: &LatticeGeometry) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(geom.n_sites(), layout.len());
    for (p, e) in layout.entries.iter().enumerate() {
        for &s in &e.sites {
            m[(s, p)] = 1.0;
        }
    }
    m
}

pub fn multiscale_q(geom: &LatticeGeometry, seq: &RegionSequence, with_exterior: bool) -> Result<(MultiscaleLayout, AveragingOperator)> {
    let layout = MultiscaleLayout::new(geom, seq, with_exterior);
    let n = geom.n_sites();
    let op = DenseOperator::new(
        (0..n).collect(),
        (0..layout.len()).collect(),
        layout_matrix(&layout, n),
        DVector::from_element(n, geom.site_weight()),
        DVector::from_vec(layout.weights()),
    )?;
    Ok((layout, AveragingOperator { kind: AveragingKind::Multiscale, op }))
}

pub fn apply_multiscale_q(phi: &Field, seq: &RegionSequence) -> MultiscaleField {
    let layout = MultiscaleLayout::new(&phi.geom, seq, false);
    let v = DVector::from_vec(phi.values.clone());
    MultiscaleField { values: layout_average(&layout, &v).iter().cloned().collect() }
}

/// `Q_{T^0,Omega}`: from a multiscale field with exterior slots to the unit lattice
/// (blocks of side `L^k`), averaging what remains in each unit block.
pub fn completion(geom: &LatticeGeometry, layout: &MultiscaleLayout) -> Result<AveragingOperator> {
    let k = geom.k;
    let nb = geom.n_blocks(k);
    let unit_vol = geom.block_side(k).pow(geom.d as u32) as f64;
    let mut m = DMatrix::zeros(nb, layout.len());
    for (p, e) in layout.entries.iter().enumerate() {
        let b = geom.block_of(e.sites[0], k);
        if e.sites.iter().any(|&s| geom.block_of(s, k) != b) {
            return Err(Error::Geometry("multiscale entry straddles unit blocks".into()));
        }
        m[(b, p)] = e.sites.len() as f64 / unit_vol;
    }
    let op = DenseOperator::new(
        (0..layout.len()).collect(),
        (0..nb).collect(),
        m,
        DVector::from_vec(layout.weights()),
        DVector::from_element(nb, geom.site_weight() * unit_vol),
    )?;
    Ok(AveragingOperator { kind: AveragingKind::Completion, op })
}

/// Residual of `Q_{T^0,Omega} Q_{Omega} phi = Q_k phi` over the standard basis.
pub fn completion_compose(geom: &LatticeGeometry, seq: &RegionSequence) -> Result<f64> {
    let (layout, q) = multiscale_q(geom, seq, true)?;
    let c = completion(geom, &layout)?;
    let qk = q_power(geom, geom.k)?;
    Ok(linalg::max_abs(&(&c.op.mat * &q.op.mat - &qk.op.mat)))
}

/// The multiscale injection of a unit-lattice field: each slot copies the value
/// of the unit block containing it.
pub fn tilde_completion(geom: &LatticeGeometry, layout: &MultiscaleLayout, unit: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(layout.len(), layout.entries.iter().map(|e| unit[geom.block_of(e.sites[0], geom.k)]))
}

pub fn tilde_completion_operator(geom: &LatticeGeometry, layout: &MultiscaleLayout) -> Result<AveragingOperator> {
    let nb = geom.n_blocks(geom.k);
    let mut m = DMatrix::zeros(layout.len(), nb);
    for (p, e) in layout.entries.iter().enumerate() {
        m[(p, geom.block_of(e.sites[0], geom.k))] = 1.0;
    }
    let unit_vol = geom.block_side(geom.k).pow(geom.d as u32) as f64;
    let op = DenseOperator::new(
        (0..nb).collect(),
        (0..layout.len()).collect(),
        m,
        DVector::from_element(nb, geom.site_weight() * unit_vol),
        DVector::from_vec(layout.weights()),
    )?;
    Ok(AveragingOperator { kind: AveragingKind::TildeCompletion, op })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Region;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_level_1d() -> (LatticeGeometry, RegionSequence) {
        let g = LatticeGeometry::with_side(2, 1, 2, 0, 8).unwrap();
        let o2 = Region::cube_box(&g, 4, [1, 0, 0], [1, 1, 1]).unwrap();
        let o1 = Region::cube_box(&g, 2, [1, 0, 0], [3, 1, 1]).unwrap();
        (g.clone(), RegionSequence::new(&g, vec![o1, o2]).unwrap())
    }

    #[test]
    fn hand_mean() {
        let g = LatticeGeometry::with_side(2, 1, 1, 0, 4).unwrap();
        let f = Field::on_torus(g, vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(apply_q(&f, 1).unwrap().values, vec![2.0, 6.0]);
    }

    #[test]
    fn semigroup_of_means() {
        let g = LatticeGeometry::with_side(2, 2, 2, 0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Field::on_torus(g.clone(), vals);
        let once = apply_q(&f, 2).unwrap();
        let twice = apply_q(&apply_q(&f, 1).unwrap(), 1).unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!((a - b).abs() < 1e-14);
        }
        let c = apply_q(&Field::constant(g, 2.5), 1).unwrap();
        assert!(c.values.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn adjoint_is_block_extension_and_projection() {
        let g = LatticeGeometry::with_side(2, 2, 1, 0, 4).unwrap();
        let q = q_power(&g, 1).unwrap();
        let qs = q.adjoint();
        assert!(q.row_sum_defect() < 1e-15);
        assert!(qs.op.mat.iter().all(|&x| x == 0.0 || (x - 1.0).abs() < 1e-15));
        let p = &qs.op.mat * &q.op.mat;
        assert!(linalg::max_abs(&(&p * &p - &p)) < 1e-14);
        let id = &q.op.mat * &qs.op.mat;
        assert!(linalg::max_abs(&(id - DMatrix::identity(4, 4))) < 1e-14);
    }

    #[test]
    fn multiscale_means_match_blocks() {
        let (g, seq) = two_level_1d();
        let phi: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let ms = apply_multiscale_q(&Field::on_torus(g.clone(), phi), &seq);
        // delta Omega_1 = sites 2,3 (one L-block), Omega_2 = sites 4..8
        assert_eq!(ms.values, vec![2.5, 5.5]);
        let layout = MultiscaleLayout::new(&g, &seq, false);
        assert_eq!(ms.component(&layout, 2), vec![(1, 5.5)]);
    }

    #[test]
    fn completion_identity() {
        let (g, seq) = two_level_1d();
        assert!(completion_compose(&g, &seq).unwrap() < 1e-14);
        let full = RegionSequence::full(&LatticeGeometry::with_side(2, 1, 1, 0, 8).unwrap()).unwrap();
        let g1 = LatticeGeometry::with_side(2, 1, 1, 0, 8).unwrap();
        assert!(completion_compose(&g1, &full).unwrap() < 1e-14);
    }

    #[test]
    fn tilde_completion_recovers_unit_field() {
        let (g, seq) = two_level_1d();
        let (layout, q) = multiscale_q(&g, &seq, true).unwrap();
        let unit = DVector::from_vec(vec![1.5, -2.0]);
        let inj = tilde_completion(&g, &layout, &unit);
        let ext = q_power(&g, 2).unwrap().adjoint().apply(&unit);
        assert!((q.apply(&ext) - &inj).amax() < 1e-15);
        let c = completion(&g, &layout).unwrap();
        assert!((c.apply(&inj) - unit).amax() < 1e-15);
        let t = tilde_completion_operator(&g, &layout).unwrap();
        assert!((t.apply(&DVector::from_element(2, 3.0)).add_scalar(-3.0)).amax() < 1e-15);
    }

    proptest! {
        #[test]
        fn adjoint_pairing(seed in 0u64..500) {
            let (g, seq) = two_level_1d();
            let (_, q) = multiscale_q(&g, &seq, false).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = DVector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0));
            let big = DVector::from_fn(q.op.cod.len(), |_, _| rng.gen_range(-1.0..1.0));
            let lhs = q.op.inner_cod(&q.apply(&f), &big);
            let rhs = q.op.inner_dom(&f, &q.adjoint().apply(&big));
            prop_assert!((lhs - rhs).abs() < 1e-14);
        }

        #[test]
        fn averaging_contracts(seed in 0u64..500) {
            let g = LatticeGeometry::with_side(2, 2, 1, 0, 8).unwrap();
            let q = q_power(&g, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = DVector::from_fn(64, |_, _| rng.gen_range(-1.0..1.0));
            let qf = q.apply(&f);
            prop_assert!(q.op.inner_cod(&qf, &qf) <= q.op.inner_dom(&f, &f) + 1e-14);
        }

        #[test]
        fn scale_commutes_with_average(vals in proptest::collection::vec(-3.0f64..3.0, 16)) {
            use crate::geometry::{scale_field, ScaleDirection};
            let g = LatticeGeometry::new(2, 0, 1, 4, 1, 0).unwrap();
            let f = Field::on_torus(g, vals);
            let a = apply_q(&scale_field(&f, ScaleDirection::Up).unwrap(), 1).unwrap();
            let b = scale_field(&apply_q(&f, 1).unwrap(), ScaleDirection::Up).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-13);
            }
        }
    }
}
