//! Measured off-diagonal decay of the Green's function between multiscale blocks.

use nalgebra::DVector;
use rand::Rng;
use serde::Serialize;

use super::GreenSystem;
use crate::error::Result;
use crate::geometry::{LatticeGeometry, RegionSequence};

#[derive(Clone, Debug, Serialize)]
pub struct DecayRow {
    pub j: usize,
    pub j_prime: usize,
    pub y: usize,
    pub y_prime: usize,
    pub d_omega: f64,
    pub value: f64,
    /// `G`, `dG` or `holder`.
    pub kind: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayFit {
    pub kind: &'static str,
    pub slope: f64,
    pub intercept: f64,
    /// `-slope`.
    pub rate: f64,
    pub r_squared: f64,
    pub points: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayTable {
    pub rows: Vec<DecayRow>,
    pub fits: Vec<DecayFit>,
}

impl DecayTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("j,j_prime,y,y_prime,d_Omega,value,kind\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{:.6},{:.6e},{}\n", r.j, r.j_prime, r.y, r.y_prime, r.d_omega, r.value, r.kind));
        }
        s
    }

    pub fn fit(&self, kind: &str) -> Option<&DecayFit> {
        self.fits.iter().find(|f| f.kind == kind)
    }
}

/// Ordinary least squares of `ln value` on `d_Omega` for rows above `floor`.
pub fn fit_decay(rows: &[DecayRow], kind: &'static str, floor: f64) -> Option<DecayFit> {
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.kind == kind && r.value > floor).map(|r| (r.d_omega, r.value.ln())).collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(DecayFit { kind, slope, intercept: my - slope * mx, rate: -slope, r_squared, points: pts.len() })
}

/// For each pair of multiscale blocks `(Delta_y, Delta_y')`: `max |G 1_{Delta_y'}|` on `Delta_y`,
/// the largest lattice derivative there, and the Hoelder quotient of that derivative with
/// exponent `alpha` over neighbouring pairs.
pub fn decay_profile(geom: &LatticeGeometry, seq: &RegionSequence, sys: &GreenSystem, alpha: f64) -> Result<DecayTable> {
    let g = sys.green()?;
    let n = geom.n_sites();
    let eta = geom.spacing();
    let index = sys.local_index();
    let blocks = &sys.layout.entries;
    let reps: Vec<usize> = blocks.iter().map(|e| e.sites[e.sites.len() / 2]).collect();
    let dists: Vec<Vec<f64>> = reps.iter().map(|&x| seq.scaled_distances(geom, x)).collect();
    let mut rows = Vec::new();
    for (q, eq) in blocks.iter().enumerate() {
        // u = G 1_{Delta_y'} as a full-lattice vector, zero off Omega_1
        let mut u: DVector<f64> = DVector::zeros(n);
        for (a, &x) in sys.sites.iter().enumerate() {
            u[x] = eq.sites.iter().map(|s| g[(a, index[s])]).sum::<f64>();
        }
        let grad = |x: usize, mu: usize| (u[geom.shift(x, mu, 1)] - u[x]) / eta;
        for (p, ep) in blocks.iter().enumerate() {
            let d_omega = dists[p][reps[q]];
            let value = ep.sites.iter().map(|&x| u[x].abs()).fold(0.0, f64::max);
            let mut dval: f64 = 0.0;
            let mut hval: f64 = 0.0;
            for &x in &ep.sites {
                for mu in 0..geom.d {
                    let gx = grad(x, mu);
                    dval = dval.max(gx.abs());
                    for nu in 0..geom.d {
                        let y = geom.shift(x, nu, 1);
                        hval = hval.max((grad(y, mu) - gx).abs() / eta.powf(alpha));
                    }
                }
            }
            for (kind, v) in [("G", value), ("dG", dval), ("holder", hval)] {
                rows.push(DecayRow { j: ep.level, j_prime: eq.level, y: ep.block, y_prime: eq.block, d_omega, value: v, kind });
            }
        }
    }
    let fits = ["G", "dG", "holder"].iter().filter_map(|k| fit_decay(&rows, k, 1e-14)).collect();
    Ok(DecayTable { rows, fits })
}

/// Largest observed `|phi_{k,Omega}| / (|phi_ext|_inf + |Phi|_inf)` over random inputs.
pub fn twoone_constant(sys: &GreenSystem, samples: usize, rng: &mut impl Rng) -> Result<f64> {
    let n = sys.geom.n_sites();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let big = DVector::from_fn(sys.layout.len(), |_, _| rng.gen_range(-1.0..1.0));
        let ext = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let phi = sys.solve(&big, &ext)?;
        let inner = sys.sites.iter().map(|&x| phi[x].abs()).fold(0.0, f64::max);
        worst = worst.max(inner / (ext.amax() + big.amax()));
    }
    Ok(worst)
}
