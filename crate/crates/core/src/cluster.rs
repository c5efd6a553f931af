//! Cluster expansion with holes on a handful of cubes.
//!
//! Polymers are connected cube sets that take each hole (face component of the
//! complement of `omega`) whole or not at all. Two polymers interact only when
//! they share a cube of `omega`. Everything is indexed by cube masks, so the
//! Mayer coefficients, the integrated activities and the logarithm are exact
//! recursions over subsets; brute-force sums over families and field
//! configurations serve as oracles.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::polymers::{self, bit, members, size, Adjacency, CubeGraph, CubeSet, DistMode};

/// Largest cube count handled by the subset recursions.
pub const MAX_CLUSTER_CUBES: usize = 12;

pub fn omega_connected(x1: CubeSet, x2: CubeSet, omega: CubeSet) -> bool {
    x1 & x2 & omega != 0
}

#[derive(Clone, Debug)]
pub struct HoleSystem {
    pub g: CubeGraph,
    pub omega: CubeSet,
    pub lambda: CubeSet,
    pub sites_per_cube: usize,
}

impl HoleSystem {
    pub fn new(g: CubeGraph, omega: CubeSet, lambda: CubeSet, sites_per_cube: usize) -> Result<Self> {
        if g.len() > MAX_CLUSTER_CUBES {
            return Err(Error::Cap(format!("{} cubes; at most {MAX_CLUSTER_CUBES}", g.len())));
        }
        if lambda & !omega != 0 || omega & !g.all() != 0 {
            return Err(Error::Precondition("need lambda inside omega inside the grid".into()));
        }
        if sites_per_cube == 0 {
            return Err(Error::Precondition("each cube needs a site".into()));
        }
        Ok(HoleSystem { g, omega, lambda, sites_per_cube })
    }

    pub fn n_cubes(&self) -> usize {
        self.g.len()
    }

    pub fn n_sites(&self) -> usize {
        self.g.len() * self.sites_per_cube
    }

    pub fn holes(&self) -> Vec<CubeSet> {
        polymers::holes(&self.g, self.omega)
    }

    pub fn is_polymer(&self, x: CubeSet) -> bool {
        polymers::is_mod_member(&self.g, x, self.omega, Adjacency::Face)
    }

    /// Polymers with holes meeting `lambda`, in mask order.
    pub fn polymers(&self) -> Vec<CubeSet> {
        (1..=self.g.all()).filter(|&x| x & self.lambda != 0 && self.is_polymer(x)).collect()
    }

    /// Integration sites inside `s`.
    pub fn lambda_sites(&self, s: CubeSet) -> Vec<usize> {
        members(s & self.lambda)
            .flat_map(|c| (0..self.sites_per_cube).map(move |t| c * self.sites_per_cube + t))
            .collect()
    }

    pub fn sites(&self, s: CubeSet) -> Vec<usize> {
        members(s).flat_map(|c| (0..self.sites_per_cube).map(move |t| c * self.sites_per_cube + t)).collect()
    }

    pub fn dm_mod(&self, x: CubeSet) -> Result<f64> {
        Ok(polymers::distance_dm(&self.g, x, DistMode::Mod(self.omega))?.value)
    }

    fn lowest_omega(&self, s: CubeSet) -> Option<usize> {
        let t = s & self.omega;
        (t != 0).then(|| t.trailing_zeros() as usize)
    }
}

/// `H(X, phi', phi)` reading fields only on the sites of `X`.
pub type FieldFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Activity {
    Const(f64),
    Field(FieldFn),
}

impl Activity {
    pub fn eval(&self, phi_prime: &[f64], phi: &[f64]) -> f64 {
        match self {
            Activity::Const(v) => *v,
            Activity::Field(f) => f(phi_prime, phi),
        }
    }

    fn scaled(&self, factor: f64) -> Activity {
        match self {
            Activity::Const(v) => Activity::Const(v * factor),
            Activity::Field(f) => {
                let f = f.clone();
                Activity::Field(Arc::new(move |a, b| factor * f(a, b)))
            }
        }
    }
}

impl std::fmt::Debug for Activity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activity::Const(v) => write!(f, "Const({v})"),
            Activity::Field(_) => write!(f, "Field(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ActivitySystem {
    pub acts: BTreeMap<CubeSet, Activity>,
    pub phi_prime: Vec<f64>,
}

impl ActivitySystem {
    pub fn new(sys: &HoleSystem, acts: BTreeMap<CubeSet, Activity>, phi_prime: Vec<f64>) -> Result<Self> {
        if phi_prime.len() != sys.n_sites() {
            return Err(Error::Shape("background field must cover every site".into()));
        }
        for &x in acts.keys() {
            if x & sys.omega == 0 || !sys.is_polymer(x) {
                return Err(Error::Precondition(format!("{x:#b} is not a polymer meeting omega")));
            }
        }
        Ok(ActivitySystem { acts, phi_prime })
    }

    /// `H(X) = sign(X) h0 exp(-kappa d_M(X mod))` on every polymer, with signs
    /// alternating in mask order.
    pub fn constant_decaying(sys: &HoleSystem, h0: f64, kappa: f64) -> Result<Self> {
        let mut acts = BTreeMap::new();
        for (i, x) in sys.polymers().into_iter().enumerate() {
            let sign = if i % 3 == 1 { -1.0 } else { 1.0 };
            acts.insert(x, Activity::Const(sign * h0 * (-kappa * sys.dm_mod(x)?).exp()));
        }
        Self::new(sys, acts, vec![0.0; sys.n_sites()])
    }

    /// Field-dependent activities bounded by `h0 exp(-kappa d_M(X mod))` when
    /// `|phi| <= 1`: the decay envelope times the mean of `phi` over the
    /// integration sites of `X`, tilted by the background on `X`.
    pub fn field_decaying(sys: &HoleSystem, h0: f64, kappa: f64, phi_prime: Vec<f64>) -> Result<Self> {
        let mut acts = BTreeMap::new();
        for x in sys.polymers() {
            let env = h0 * (-kappa * sys.dm_mod(x)?).exp();
            let lam = sys.lambda_sites(x);
            let all = sys.sites(x);
            let f: FieldFn = Arc::new(move |pp: &[f64], p: &[f64]| {
                let mean = lam.iter().map(|&s| p[s]).sum::<f64>() / lam.len().max(1) as f64;
                let tilt = all.iter().map(|&s| pp[s]).sum::<f64>() / all.len() as f64;
                env * mean * (0.5 + 0.5 * tilt.tanh())
            });
            acts.insert(x, Activity::Field(f));
        }
        Self::new(sys, acts, phi_prime)
    }

    /// Copy with every activity not inside `y` scaled by `factor`.
    pub fn perturbed_outside(&self, y: CubeSet, factor: f64) -> Self {
        let acts = self
            .acts
            .iter()
            .map(|(&x, a)| (x, if x & !y == 0 { a.clone() } else { a.scaled(factor) }))
            .collect();
        ActivitySystem { acts, phi_prime: self.phi_prime.clone() }
    }

    /// Activity values at one field configuration, indexed by mask.
    fn values(&self, n_cubes: usize, phi: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; 1 << n_cubes];
        for (&x, a) in &self.acts {
            h[x as usize] = a.eval(&self.phi_prime, phi);
        }
        h
    }

    /// Largest change of any `H(X)` when both fields are shifted off `X`.
    pub fn support_leak(&self, sys: &HoleSystem, mu: &SiteMeasure) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (phi, _) in configurations(sys, mu)? {
            for (&x, a) in &self.acts {
                let inside = sys.sites(x);
                let shift = |v: &[f64]| -> Vec<f64> {
                    v.iter().enumerate().map(|(s, &f)| if inside.contains(&s) { f } else { f + 0.37 }).collect()
                };
                let moved = a.eval(&shift(&self.phi_prime), &shift(&phi));
                worst = worst.max((moved - a.eval(&self.phi_prime, &phi)).abs());
            }
        }
        Ok(worst)
    }

    /// Largest `|H(X)| exp(kappa d_M(X mod))` over the measure support.
    pub fn envelope(&self, sys: &HoleSystem, mu: &SiteMeasure, kappa: f64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (phi, _) in configurations(sys, mu)? {
            for (&x, a) in &self.acts {
                worst = worst.max(a.eval(&self.phi_prime, &phi).abs() * (kappa * sys.dm_mod(x)?).exp());
            }
        }
        Ok(worst)
    }
}

/// Single-site probability measure with finite support.
#[derive(Clone, Debug, Serialize)]
pub struct SiteMeasure {
    pub points: Vec<(f64, f64)>,
    /// `-log` of the mass kept when a rule was clipped and renormalized.
    pub clip_log_norm: f64,
}

impl SiteMeasure {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        let total: f64 = points.iter().map(|p| p.1).sum();
        if points.is_empty() || (total - 1.0).abs() > 1e-12 || points.iter().any(|p| p.1 < 0.0) {
            return Err(Error::Precondition(format!("single-site weights sum to {total}")));
        }
        Ok(SiteMeasure { points, clip_log_norm: 0.0 })
    }

    pub fn plus_minus() -> Self {
        SiteMeasure { points: vec![(-1.0, 0.5), (1.0, 0.5)], clip_log_norm: 0.0 }
    }

    /// Gauss-Hermite rule for a centered normal of variance `var`.
    pub fn gaussian(nodes: usize, var: f64) -> Self {
        let (x, w) = linalg::gauss_hermite_normal(nodes);
        SiteMeasure { points: x.iter().zip(&w).map(|(x, w)| (x * var.sqrt(), *w)).collect(), clip_log_norm: 0.0 }
    }

    /// Gaussian rule with nodes beyond `cut` dropped and the rest renormalized.
    pub fn clipped_gaussian(nodes: usize, var: f64, cut: f64) -> Result<Self> {
        let g = Self::gaussian(nodes, var);
        let kept: Vec<(f64, f64)> = g.points.into_iter().filter(|p| p.0.abs() <= cut).collect();
        let mass: f64 = kept.iter().map(|p| p.1).sum();
        if mass <= 0.0 {
            return Err(Error::Precondition("clipping removed every node".into()));
        }
        Ok(SiteMeasure { points: kept.iter().map(|&(x, w)| (x, w / mass)).collect(), clip_log_norm: -mass.ln() })
    }
}

/// Every configuration on the integration sites (others held at zero) with
/// its product weight, in lexicographic order.
pub fn configurations(sys: &HoleSystem, mu: &SiteMeasure) -> Result<Vec<(Vec<f64>, f64)>> {
    let sites = sys.lambda_sites(sys.lambda);
    let q = mu.points.len();
    let total = (q as f64).powi(sites.len() as i32);
    if total > 1e6 {
        return Err(Error::Cap(format!("{total} configurations")));
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut idx = vec![0usize; sites.len()];
    loop {
        let mut phi = vec![0.0; sys.n_sites()];
        let mut w = 1.0;
        for (k, &s) in sites.iter().enumerate() {
            phi[s] = mu.points[idx[k]].0;
            w *= mu.points[idx[k]].1;
        }
        out.push((phi, w));
        let mut k = 0;
        while k < idx.len() {
            idx[k] += 1;
            if idx[k] < q {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == idx.len() {
            break;
        }
    }
    Ok(out)
}

/// Sum over subsets: `out[S] = sum_{X ⊆ S} v[X]`.
fn subset_sums(mut v: Vec<f64>, n: usize) -> Vec<f64> {
    for i in 0..n {
        for s in 0..v.len() {
            if s & (1 << i) != 0 {
                v[s] += v[s ^ (1 << i)];
            }
        }
    }
    v
}

/// Inverse of [`subset_sums`].
fn mobius(mut v: Vec<f64>, n: usize) -> Vec<f64> {
    for i in 0..n {
        for s in 0..v.len() {
            if s & (1 << i) != 0 {
                v[s] -= v[s ^ (1 << i)];
            }
        }
    }
    v
}

/// Mayer coefficients `K(S)` for activity values `h` (indexed by mask), from
/// `exp(sum_{X ⊆ S} H) = sum over omega-disjoint collections of prod K`,
/// peeling off the collection member through the lowest omega cube of `S`.
pub fn mayer_k(sys: &HoleSystem, h: &[f64]) -> Vec<f64> {
    let n = sys.n_cubes();
    let a: Vec<f64> = subset_sums(h.to_vec(), n).into_iter().map(f64::exp).collect();
    let mut k = vec![0.0; 1 << n];
    for s in 1usize..(1 << n) {
        let Some(c) = sys.lowest_omega(s as CubeSet) else { continue };
        let cb = 1usize << c;
        let mut v = a[s] - a[s ^ cb];
        let rest = s ^ cb;
        // proper subsets Y of S through c
        let mut sub = rest;
        loop {
            let y = sub | cb;
            if y != s && k[y] != 0.0 {
                v -= k[y] * a[s & !(y & sys.omega as usize)];
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        k[s] = v;
    }
    k
}

/// `K(Y)` by summing over every omega-connected family of polymers whose
/// union is `Y`; exponential in the number of polymers.
pub fn mayer_k_bruteforce(sys: &HoleSystem, h: &BTreeMap<CubeSet, f64>) -> Result<BTreeMap<CubeSet, f64>> {
    let list: Vec<(CubeSet, f64)> = h.iter().filter(|(_, v)| **v != 0.0).map(|(&x, &v)| (x, v.exp() - 1.0)).collect();
    if list.len() > 22 {
        return Err(Error::Cap(format!("{} polymers in the family sum", list.len())));
    }
    let mut out = BTreeMap::new();
    for fam in 1u64..(1u64 << list.len()) {
        let idx: Vec<usize> = members(fam).collect();
        // omega-connectivity of the family
        let mut comp = bit(0);
        let mut frontier = comp;
        while frontier != 0 {
            let mut next = 0;
            for a in members(frontier) {
                for b in 0..idx.len() {
                    if comp & bit(b) == 0 && omega_connected(list[idx[a]].0, list[idx[b]].0, sys.omega) {
                        next |= bit(b);
                    }
                }
            }
            frontier = next & !comp;
            comp |= frontier;
        }
        if size(comp) != idx.len() {
            continue;
        }
        let union = idx.iter().fold(0, |u, &i| u | list[i].0);
        let prod: f64 = idx.iter().map(|&i| list[i].1).product();
        *out.entry(union).or_insert(0.0) += prod;
    }
    Ok(out)
}

/// Sum over omega-disjoint collections of `prod w(Y_j)` with all `Y_j ⊆ S`, for
/// every `S`.
pub fn collection_sums(sys: &HoleSystem, w: &[f64]) -> Vec<f64> {
    let n = sys.n_cubes();
    let mut b = vec![1.0; 1 << n];
    for s in 1usize..(1 << n) {
        let Some(c) = sys.lowest_omega(s as CubeSet) else { continue };
        let cb = 1usize << c;
        let rest = s ^ cb;
        let mut v = b[rest];
        let mut sub = rest;
        loop {
            let y = sub | cb;
            if w[y] != 0.0 {
                v += w[y] * b[s & !(y & sys.omega as usize)];
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        b[s] = v;
    }
    b
}

#[derive(Clone, Debug, Serialize)]
pub struct Integrated {
    /// `K^#(Y)` integrating only the sites of `Y ∩ Λ`.
    pub k_sharp: Vec<f64>,
    /// Same, integrating over every site of `Λ`.
    pub k_sharp_full: Vec<f64>,
    /// Brute-force `Ξ = ∫ exp(sum H) dμ`.
    pub xi_bruteforce: f64,
}

/// Integrates the Mayer coefficients against the product measure.
pub fn integrate(sys: &HoleSystem, acts: &ActivitySystem, mu: &SiteMeasure) -> Result<Integrated> {
    let n = sys.n_cubes();
    let configs = configurations(sys, mu)?;
    let sites = sys.lambda_sites(sys.lambda);
    let reference = mu.points[0].0;
    let per: Vec<(Vec<f64>, f64)> = configs
        .par_iter()
        .map(|(phi, _)| {
            let h = acts.values(n, phi);
            let total: f64 = h.iter().sum();
            (mayer_k(sys, &h), total.exp())
        })
        .collect();
    let mut k_full = vec![0.0; 1 << n];
    let mut k_fact = vec![0.0; 1 << n];
    let mut xi = 0.0;
    for ((phi, w), (k, e)) in configs.iter().zip(&per) {
        xi += w * e;
        for s in 0..(1usize << n) {
            if k[s] == 0.0 {
                continue;
            }
            k_full[s] += w * k[s];
            let inside = sys.lambda_sites(s as CubeSet);
            let outside_at_ref = sites.iter().all(|site| inside.contains(site) || phi[*site] == reference);
            if outside_at_ref {
                let wi: f64 = inside
                    .iter()
                    .map(|&site| mu.points.iter().find(|p| p.0 == phi[site]).map(|p| p.1).unwrap_or(0.0))
                    .product();
                k_fact[s] += wi * k[s];
            }
        }
    }
    Ok(Integrated { k_sharp: k_fact, k_sharp_full: k_full, xi_bruteforce: xi })
}

/// Exact `H^#` from `log Ξ(S) = sum_{Y ⊆ S} H^#(Y)` by Mobius inversion.
pub fn h_sharp_exact(sys: &HoleSystem, k_sharp: &[f64]) -> Result<Vec<f64>> {
    let b = collection_sums(sys, k_sharp);
    if let Some(bad) = b.iter().position(|&v| v <= 0.0) {
        return Err(Error::NonConvergence(format!("collection sum {} on {bad:#b} is not positive", b[bad])));
    }
    Ok(mobius(b.into_iter().map(f64::ln).collect(), sys.n_cubes()))
}

/// `H^#` truncated at `order` activities: the coefficient of `t^m` in
/// `log Ξ_t(S)` with every `K^#` scaled by `t`, inverted over subsets.
pub fn h_sharp_series(sys: &HoleSystem, k_sharp: &[f64], order: usize) -> Vec<f64> {
    let n = sys.n_cubes();
    let m = order + 1;
    let mut b: Vec<Vec<f64>> = vec![vec![0.0; m]; 1 << n];
    for row in b.iter_mut() {
        row[0] = 1.0;
    }
    for s in 1usize..(1 << n) {
        let Some(c) = sys.lowest_omega(s as CubeSet) else { continue };
        let cb = 1usize << c;
        let rest = s ^ cb;
        let mut v = b[rest].clone();
        let mut sub = rest;
        loop {
            let y = sub | cb;
            if k_sharp[y] != 0.0 {
                let other = &b[s & !(y & sys.omega as usize)];
                for p in 1..m {
                    v[p] += k_sharp[y] * other[p - 1];
                }
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        b[s] = v;
    }
    let logs: Vec<f64> = b
        .iter()
        .map(|bs| {
            let mut l = vec![0.0; m];
            for p in 1..m {
                let mut acc = bs[p];
                for j in 1..p {
                    acc -= j as f64 * l[j] * bs[p - j] / p as f64;
                }
                l[p] = acc;
            }
            l.iter().sum()
        })
        .collect();
    mobius(logs, n)
}

/// Signed count of connected spanning subgraphs of the graph on `n` vertices
/// with adjacency masks `adj`: `sum (-1)^{#edges}`.
pub fn ursell(adj: &[u64]) -> f64 {
    let n = adj.len();
    if n == 0 {
        return 0.0;
    }
    let full = (1u64 << n) - 1;
    // every spanning subgraph of W: prod over edges (1 - 1), so 1 iff W has no edge
    let free = |w: u64| members(w).all(|i| adj[i] & w & !bit(i) == 0);
    let mut conn = vec![0.0; 1 << n];
    for v in 1..=full {
        if v & 1 == 0 {
            continue;
        }
        let mut c = if free(v) { 1.0 } else { 0.0 };
        let rest = v & !1;
        let mut sub = rest;
        // proper subsets U of V containing vertex 0
        loop {
            let u = sub | 1;
            if u != v {
                let w = v & !u;
                if free(w) {
                    c -= conn[u as usize];
                }
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        conn[v as usize] = c;
    }
    conn[full as usize]
}

/// `H^#(Y)` from the truncated series over multisets of polymers with union
/// `Y`, weighting each by the truncated function of the omega-incompatibility
/// graph and `1/prod(multiplicity!)`.
pub fn h_sharp_ursell(sys: &HoleSystem, k_sharp: &[f64], y: CubeSet, order: usize) -> f64 {
    let parts: Vec<(CubeSet, f64)> = (1..=y)
        .filter(|&z| z & !y == 0 && k_sharp[z as usize] != 0.0)
        .map(|z| (z, k_sharp[z as usize]))
        .collect();
    fn rec(
        sys: &HoleSystem,
        parts: &[(CubeSet, f64)],
        y: CubeSet,
        start: usize,
        chosen: &mut Vec<usize>,
        order: usize,
        acc: &mut f64,
    ) {
        if !chosen.is_empty() && chosen.iter().fold(0, |u, &i| u | parts[i].0) == y {
            let adj: Vec<u64> = chosen
                .iter()
                .map(|&i| {
                    chosen.iter().enumerate().fold(0u64, |m, (b, &j)| {
                        if omega_connected(parts[i].0, parts[j].0, sys.omega) {
                            m | bit(b)
                        } else {
                            m
                        }
                    })
                })
                .collect();
            let mut fact = 1.0;
            let mut run = 1;
            for w in 1..chosen.len() {
                if chosen[w] == chosen[w - 1] {
                    run += 1;
                    fact *= run as f64;
                } else {
                    run = 1;
                }
            }
            let prod: f64 = chosen.iter().map(|&i| parts[i].1).product();
            *acc += ursell(&adj) * prod / fact;
        }
        if chosen.len() == order {
            return;
        }
        for i in start..parts.len() {
            chosen.push(i);
            rec(sys, parts, y, i, chosen, order, acc);
            chosen.pop();
        }
    }
    let mut acc = 0.0;
    rec(sys, &parts, y, 0, &mut Vec::new(), order, &mut acc);
    acc
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Least-squares fit of `log |H^#(Y)|` against `d_M(Y mod)`.
pub fn decay_fit(sys: &HoleSystem, h_sharp: &[f64]) -> Result<DecayFit> {
    let mut pts = Vec::new();
    for (y, &v) in h_sharp.iter().enumerate() {
        if y == 0 || v.abs() < 1e-300 || !sys.is_polymer(y as CubeSet) {
            continue;
        }
        pts.push((sys.dm_mod(y as CubeSet)?, v.abs().ln()));
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / n, sy / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(DecayFit { slope, intercept: my - slope * mx, points: pts.len() })
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub xi_expansion: f64,
    pub xi_bruteforce: f64,
    pub rel_gap: f64,
    pub max_hsharp: f64,
    /// Largest `|H^#(Y)|` on sets that are not polymers (should vanish).
    pub off_support: f64,
    /// Largest change of a `K^#` when integrating all sites instead of `Y ∩ Λ`.
    pub factorization_gap: f64,
    pub series_tail: f64,
    pub series_order: usize,
    pub fitted_decay: DecayFit,
    pub envelope: f64,
}

/// Full chain: Mayer coefficients, integration, exponentiation, comparison
/// with the brute-force integral and the truncated series.
pub fn full_pipeline(
    sys: &HoleSystem,
    acts: &ActivitySystem,
    mu: &SiteMeasure,
    kappa: f64,
    series_order: usize,
) -> Result<(PipelineReport, Vec<f64>)> {
    let int = integrate(sys, acts, mu)?;
    let hs = h_sharp_exact(sys, &int.k_sharp)?;
    let xi_expansion = hs.iter().sum::<f64>().exp();
    let series = h_sharp_series(sys, &int.k_sharp, series_order);
    let series_tail = hs.iter().zip(&series).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut max_hsharp: f64 = 0.0;
    let mut off_support: f64 = 0.0;
    for (y, &v) in hs.iter().enumerate() {
        if y != 0 && sys.is_polymer(y as CubeSet) {
            max_hsharp = max_hsharp.max(v.abs());
        } else {
            off_support = off_support.max(v.abs());
        }
    }
    let factorization_gap =
        int.k_sharp.iter().zip(&int.k_sharp_full).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let report = PipelineReport {
        xi_expansion,
        xi_bruteforce: int.xi_bruteforce,
        rel_gap: linalg::rel_diff(xi_expansion, int.xi_bruteforce),
        max_hsharp,
        off_support,
        factorization_gap,
        series_tail,
        series_order,
        fitted_decay: decay_fit(sys, &hs)?,
        envelope: acts.envelope(sys, mu, kappa)?,
    };
    Ok((report, hs))
}

/// Largest change of `H^#(Y)` when every activity not inside `Y` is scaled.
pub fn local_influence(sys: &HoleSystem, acts: &ActivitySystem, mu: &SiteMeasure, y: CubeSet, factor: f64) -> Result<f64> {
    let base = h_sharp_exact(sys, &integrate(sys, acts, mu)?.k_sharp)?;
    let moved = h_sharp_exact(sys, &integrate(sys, &acts.perturbed_outside(y, factor), mu)?.k_sharp)?;
    Ok((0..base.len())
        .filter(|&z| z as CubeSet & !y == 0)
        .map(|z| (base[z] - moved[z]).abs())
        .fold(0.0, f64::max))
}

/// Largest `h0` on `grid` for which the order-`order` series is within `tol`
/// of the exact `H^#`.
pub fn largest_convergent_h0(
    sys: &HoleSystem,
    mu: &SiteMeasure,
    kappa: f64,
    order: usize,
    tol: f64,
    grid: &[f64],
) -> Result<Option<f64>> {
    let mut best = None;
    for &h0 in grid {
        let acts = ActivitySystem::constant_decaying(sys, h0, kappa)?;
        let int = integrate(sys, &acts, mu)?;
        let ok = match h_sharp_exact(sys, &int.k_sharp) {
            Ok(hs) => {
                let s = h_sharp_series(sys, &int.k_sharp, order);
                hs.iter().zip(&s).all(|(a, b)| (a - b).abs() <= tol)
            }
            Err(_) => false,
        };
        if ok {
            best = Some(h0);
        }
    }
    Ok(best)
}
