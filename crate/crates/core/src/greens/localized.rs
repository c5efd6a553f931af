//! Fields localized to the buffer of a single cube.

use nalgebra::DVector;
use serde::Serialize;

use super::GreenSystem;
use crate::error::{Error, Result};
use crate::geometry::{LatticeGeometry, MultiscaleLayout, RegionSequence};
use crate::quadforms::ActionParams;

/// Which levels of the global multiscale field feed the unit-lattice injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LocalizedVariant {
    /// `Phi_k` only.
    Interior,
    /// `Q Phi_{k-1}` and `Phi_k`.
    Boundary,
    /// `Q Phi_{k-1}`, `Phi_k` and `Q^T Phi_{k+1}`.
    Primed,
}

impl LocalizedVariant {
    fn levels(self, k: usize) -> Vec<usize> {
        match self {
            LocalizedVariant::Interior => vec![k],
            LocalizedVariant::Boundary => vec![k.saturating_sub(1), k],
            LocalizedVariant::Primed => vec![k.saturating_sub(1), k, k + 1],
        }
    }
}

/// A field on unit blocks (side `L^k`) from the selected levels of a multiscale field:
/// finer entries are averaged, coarser ones are extended. Unit blocks that receive
/// nothing are zero.
pub fn unit_field_from(
    geom: &LatticeGeometry,
    layout: &MultiscaleLayout,
    field: &DVector<f64>,
    variant: LocalizedVariant,
) -> Result<DVector<f64>> {
    if field.len() != layout.len() {
        return Err(Error::Shape("field does not match its layout".into()));
    }
    let k = geom.k as usize;
    let levels = variant.levels(k);
    let nb = geom.n_blocks(geom.k);
    let mut sum = vec![0.0; nb];
    let mut count = vec![0usize; nb];
    for (p, e) in layout.entries.iter().enumerate() {
        if e.level == 0 || !levels.contains(&e.level) {
            continue;
        }
        for &s in &e.sites {
            let b = geom.block_of(s, geom.k);
            sum[b] += field[p];
            count[b] += 1;
        }
    }
    Ok(DVector::from_iterator(nb, (0..nb).map(|b| if count[b] == 0 { 0.0 } else { sum[b] / count[b] as f64 })))
}

/// `phi_{k,Omega(box)}` fed by the injection of a unit-lattice field into the buffer's
/// multiscale slots (exterior slots included).
pub fn localized_field(
    geom: &LatticeGeometry,
    buffer: &RegionSequence,
    params: &ActionParams,
    unit: &DVector<f64>,
) -> Result<DVector<f64>> {
    if unit.len() != geom.n_blocks(geom.k) {
        return Err(Error::Shape("unit field has the wrong number of blocks".into()));
    }
    let sys = GreenSystem::new(geom, buffer, params)?;
    let big = DVector::from_iterator(sys.layout.len(), sys.layout.entries.iter().map(|e| unit[geom.block_of(e.sites[0], geom.k)]));
    let ext = DVector::from_fn(geom.n_sites(), |x, _| unit[geom.block_of(x, geom.k)]);
    sys.solve(&big, &ext)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Region;

    fn setup() -> (LatticeGeometry, RegionSequence, Region) {
        // 1D, L = 2, M = 2, k = 1, 64 sites; core cube 3 of side 4
        let g = LatticeGeometry::new(2, 1, 6, 5, 1, 1).unwrap();
        let core = Region::from_cubes(&g, 4, &[[7, 0, 0]]).unwrap();
        let (buf, sat) = RegionSequence::build_buffer(&g, &core, 2).unwrap();
        assert!(!sat);
        (g, buf, core)
    }

    #[test]
    fn constant_input_reproduced() {
        let (g, buf, _) = setup();
        let p = ActionParams::new(1.0, 2, 1, 0.0, 2);
        let unit = DVector::from_element(g.n_blocks(1), -0.6);
        let phi = localized_field(&g, &buf, &p, &unit).unwrap();
        assert!(phi.iter().all(|v| (v + 0.6).abs() < 1e-12));
    }

    #[test]
    fn output_on_core_ignores_far_data() {
        let (g, buf, core) = setup();
        let p = ActionParams::new(1.0, 2, 1, 0.2, 2);
        let nb = g.n_blocks(1);
        let unit: DVector<f64> = DVector::from_fn(nb, |i, _| (i as f64 * 0.37).sin());
        let base = localized_field(&g, &buf, &p, &unit).unwrap();
        let reach = buf.omega1(&g);
        let mut moved = unit.clone();
        for b in 0..nb {
            let near = g.block_sites(b, 1).iter().any(|&s| (0..g.n_sites()).any(|x| reach.contains(x) && g.sup_dist(x, s) <= 1));
            if !near {
                moved[b] += 5.0;
            }
        }
        let out = localized_field(&g, &buf, &p, &moved).unwrap();
        for x in core.site_set(&g).indices() {
            assert_eq!(out[x], base[x]);
        }
    }

    #[test]
    fn interior_uses_top_level_only() {
        let g = LatticeGeometry::new(2, 1, 6, 5, 1, 1).unwrap();
        let seq = RegionSequence::full(&g).unwrap();
        let lay = MultiscaleLayout::new(&g, &seq, false);
        let f = DVector::from_fn(lay.len(), |i, _| i as f64);
        let u = unit_field_from(&g, &lay, &f, LocalizedVariant::Interior).unwrap();
        assert_eq!(u, f);
    }
}
