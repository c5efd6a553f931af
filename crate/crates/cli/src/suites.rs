//! The computations behind each subcommand. Every function here is pure given
//! the config: no I/O, no clocks.

use msrg::cluster::{full_pipeline, local_influence, ActivitySystem, HoleSystem, PipelineReport, SiteMeasure};
use msrg::fieldregions::{partition_identity, CubeMask, IdentityKind, PartitionConfig};
use msrg::fluctuation::FluctuationProblem;
use msrg::geometry::{LatticeGeometry, MultiscaleLayout, Region, RegionSequence, SiteSet};
use msrg::greens::{
    decay_profile, free_flow_check, iterated_collapse, verify_expansion_identities, CollapseReport, DecayFit,
    FreeFlowReport, RandomWalkExpansion,
};
use msrg::polymers::{
    bit, enumerate_polymers, polymer_rows, sum_bounds_suite, tree_lemma_exhaustive, Adjacency, Cube, CubeGraph,
    LemmaSummary, PolymerKind, PolymerRow, SumBoundsReport,
};
use msrg::quadforms::{summation_by_parts, ActionParams, CouplingState};
use msrg::renormflow::{
    decompose_over_region, lambda_chain_ulps, random_field, trajectory, Corrections, Couplings, LocalFamily,
    SyntheticSpec,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;

pub type Result<T> = std::result::Result<T, SuiteError>;

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error("infeasible size: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Core(#[from] msrg::Error),
}

/// Per-suite seeds, drawn from one generator in a fixed order so every
/// subcommand sees the same streams.
#[derive(Clone, Debug)]
pub struct Seeds {
    pub collapse: u64,
    pub free_flow: u64,
    pub minimizer: u64,
    pub summation: u64,
    pub cluster: u64,
    pub renorm: u64,
    pub partition: u64,
}

impl Seeds {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Seeds {
            collapse: rng.gen(),
            free_flow: rng.gen(),
            minimizer: rng.gen(),
            summation: rng.gen(),
            cluster: rng.gen(),
            renorm: rng.gen(),
            partition: rng.gen(),
        }
    }
}

fn rvec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

fn params(c: &ExperimentConfig) -> ActionParams {
    ActionParams::new(c.a, c.l, c.d, c.mu_bar, c.nlevels as usize + 1)
}

/// Regions for levels `1..=depth`: the deepest is the origin cube, each coarser
/// one drops its last cube when that cube misses the next region.
pub fn nested_regions(g: &LatticeGeometry, depth: u32) -> Result<RegionSequence> {
    let side = g.side();
    let mut regions = Vec::new();
    let deepest = g.cube_side(depth);
    let next = if side / deepest >= 2 {
        Region::from_cubes(g, deepest, &[[0, 0, 0]])?
    } else {
        Region::full(g, deepest)?
    };
    let mut inner = next.site_set(g);
    regions.push(next);
    for j in (1..depth).rev() {
        let full = Region::full(g, g.cube_side(j))?;
        let last = full.n_cubes() - 1;
        let dropped = full.cube_sites(g, last);
        let r = if dropped.iter().any(|&x| inner.contains(x)) {
            full
        } else {
            let mut mask = full.cube_mask().to_vec();
            mask[last] = false;
            Region::from_mask(g.cube_side(j), side / g.cube_side(j), g.d, mask)
        };
        inner = r.site_set(g);
        regions.push(r);
    }
    regions.reverse();
    Ok(RegionSequence::new(g, regions)?)
}

// ---------------------------------------------------------------------- flow

pub fn collapse(c: &ExperimentConfig, seed: u64) -> Result<CollapseReport> {
    let g = LatticeGeometry::with_side(c.l, c.d, c.nlevels - 1, c.m, c.side)?;
    let seq = nested_regions(&g, c.nlevels)?;
    Ok(iterated_collapse(&g, &seq, &params(c), c.samples, seed)?)
}

pub fn free_flow(c: &ExperimentConfig, seed: u64) -> Result<FreeFlowReport> {
    let g = LatticeGeometry::with_side(c.l, c.d, c.nlevels, c.m, c.side)?;
    let seq = nested_regions(&g, c.nlevels)?;
    Ok(free_flow_check(&g, &seq, &params(c), c.samples, seed)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowSummary {
    pub collapse: CollapseReport,
    pub free_flow: FreeFlowReport,
    pub lambda_chain_ulps: u64,
    pub trajectory: Vec<Couplings>,
}

pub fn flow(c: &ExperimentConfig, s: &Seeds) -> Result<FlowSummary> {
    let cs = CouplingState::new(c.lambda, c.mu_bar, c.l, c.nlevels)?;
    let traj = trajectory(&cs, 0.0, 0.0, |_| Corrections::default());
    Ok(FlowSummary {
        collapse: collapse(c, s.collapse)?,
        free_flow: free_flow(c, s.free_flow)?,
        lambda_chain_ulps: lambda_chain_ulps(&cs, &traj),
        trajectory: traj,
    })
}

// -------------------------------------------------------------------- verify

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub check: String,
    pub residual: f64,
    pub passed: bool,
}

fn minimizer(c: &ExperimentConfig, seed: u64) -> Result<f64> {
    let g = LatticeGeometry::with_side(c.l, c.d, c.nlevels - 1, c.m, c.side)?;
    let seq = nested_regions(&g, c.nlevels)?;
    let lay = MultiscaleLayout::new(&g, &seq, false);
    let lambda = seq.site_sets(&g).pop().expect("depth >= 2");
    let zlen = lambda.len() / g.block_side(g.k).pow(g.d as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..c.samples {
        let big = rvec(&mut rng, lay.len());
        let phi = rvec(&mut rng, g.n_sites());
        let z = rvec(&mut rng, zlen);
        let r = verify_expansion_identities(&g, &seq, &params(c), &lambda, &big, &phi, &z)?;
        worst = worst.max(r.max());
    }
    Ok(worst)
}

fn summation(c: &ExperimentConfig, seed: u64) -> Result<f64> {
    let g = LatticeGeometry::with_side(c.l, c.d, 0, 0, c.side)?;
    let n = g.n_sites();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..c.samples {
        let f = rvec(&mut rng, n);
        let h = rvec(&mut rng, n);
        let lam = SiteSet::from_mask((0..n).map(|_| rng.gen_bool(0.5)).collect());
        worst = worst.max(summation_by_parts(&g, &f, &h, &lam).abs());
    }
    Ok(worst)
}

/// 1D torus whose top cube grid has at least three cubes.
fn covariance(c: &ExperimentConfig) -> Result<f64> {
    let mut mvol = 2;
    while c.l.pow(mvol - 2) < 3 {
        mvol += 1;
    }
    let g = LatticeGeometry::new(c.l, 0, mvol + 1, mvol, 1, 1)?;
    let p = ActionParams::new(c.a, c.l, 1, c.mu_bar, 3);
    let fp = FluctuationProblem::global(&g, &p)?;
    let mut worst = 0.0f64;
    for r in [0.0, 0.1, 1.0, 10.0, 100.0, 1e4] {
        worst = worst.max(fp.resolvent_identity_residual(r)?);
    }
    Ok(worst)
}

/// Two rows of three unit squares with the middle of the top row a hole.
pub fn holed_grid() -> Result<HoleSystem> {
    let cubes = (0..6).map(|i| Cube { lo: vec![(i % 3) as i64, (i / 3) as i64], side: 1 }).collect();
    let grid = CubeGraph::from_cubes(2, None, cubes)?;
    let omega = grid.all() & !bit(4);
    Ok(HoleSystem::new(grid, omega, omega, 1)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct ClusterSummary {
    pub h0: f64,
    pub phi_prime: Vec<f64>,
    pub pipeline: PipelineReport,
    pub local_influence: f64,
    #[serde(skip)]
    pub h_sharp: Vec<f64>,
    #[serde(skip)]
    pub polymers: Vec<u64>,
}

pub fn cluster(c: &ExperimentConfig, seed: u64) -> Result<ClusterSummary> {
    let sys = holed_grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi_prime: Vec<f64> = (0..sys.n_sites()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let acts = ActivitySystem::field_decaying(&sys, c.h0, 1.0, phi_prime.clone())?;
    let mu = SiteMeasure::plus_minus();
    let (pipeline, h_sharp) = full_pipeline(&sys, &acts, &mu, 1.0, 4)?;
    let infl = local_influence(&sys, &acts, &mu, 0b001011, 3.0)?;
    Ok(ClusterSummary { h0: c.h0, phi_prime, pipeline, local_influence: infl, h_sharp, polymers: sys.polymers() })
}

/// Decomposition residual and the largest symmetric `nu`, on the 2D 16-torus family.
fn renorm(seed: u64) -> Result<(f64, f64)> {
    let g = LatticeGeometry::with_side(2, 2, 0, 1, 16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = 0.0f64;
    let mut nu = 0.0f64;
    for symmetric in [true, false] {
        let fam = LocalFamily::synthetic(&g, 2, &SyntheticSpec { symmetric, seed: rng.gen(), ..Default::default() })?;
        for t in 0..4 {
            let lambda: CubeMask = if t == 0 { fam.lat.full() } else { rng.gen_range(1..=fam.lat.full()) };
            let dec = decompose_over_region(&fam, lambda, &random_field(&g, rng.gen()))?;
            residual = residual.max(dec.residual);
            if symmetric {
                nu = dec.nu.iter().fold(nu, |m, v| m.max(v.abs()));
            }
        }
    }
    Ok((residual, nu))
}

fn partition_failures(c: &ExperimentConfig, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let cfg = PartitionConfig { samples: c.samples, seed, ..Default::default() };
    IdentityKind::ALL
        .iter()
        .map(|&k| {
            let r = partition_identity(k, &cfg)?;
            Ok((k.name(), ((r.samples - r.exact) + (r.samples - r.grouped_exact)) as f64))
        })
        .collect()
}

pub fn verify(c: &ExperimentConfig, s: &Seeds) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut push = |suite, check: &str, residual: f64| {
        out.push(Check { suite, check: check.to_string(), residual, passed: residual <= c.tol });
    };
    push("flow", "iterated averaging collapse", collapse(c, s.collapse)?.max_rel);
    push("flow", "free flow closed form", free_flow(c, s.free_flow)?.max_abs);
    push("minimizer", "expansion identities", minimizer(c, s.minimizer)?);
    push("minimizer", "summation by parts", summation(c, s.summation)?);
    push("fluctuation", "covariance resolvent identity", covariance(c)?);
    push("cluster", "expansion vs brute force", cluster(c, s.cluster)?.pipeline.rel_gap);
    let (residual, nu) = renorm(s.renorm)?;
    push("renorm", "decomposition", residual);
    push("renorm", "symmetric nu", nu);
    let cs = CouplingState::new(c.lambda, c.mu_bar, c.l, c.nlevels)?;
    let ulps = lambda_chain_ulps(&cs, &trajectory(&cs, 0.0, 0.0, |_| Corrections::default()));
    push("renorm", "coupling chain", ulps as f64 * f64::EPSILON);
    for (name, fails) in partition_failures(c, s.partition)? {
        push("partition", &format!("{name} indicator sum"), fails);
    }
    Ok(out)
}

// --------------------------------------------------------------------- decay

#[derive(Clone, Debug, Serialize)]
pub struct DecayRun {
    pub big_m: usize,
    pub sites: usize,
    pub fit: Option<DecayFit>,
    pub ratio: f64,
    pub residual_norm: f64,
    pub final_rel_error: f64,
    pub orders: usize,
    #[serde(skip)]
    pub csv: Vec<[String; 8]>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecaySummary {
    pub runs: Vec<DecayRun>,
    /// Fitted rate of the larger cube at least that of the smaller.
    pub rate_nondecreasing: bool,
}

pub const DECAY_MAX_SITES: usize = 1024;

/// Random-walk expansion and decay fit for `M = L^2` and `M = L^3`.
pub fn decay(c: &ExperimentConfig) -> Result<DecaySummary> {
    let mut runs = Vec::new();
    for m in [2u32, 3] {
        // one level-1 cube per side is too few for a distance profile
        let mvol = m + 3;
        let g = LatticeGeometry::new(c.l, m, mvol + 1, mvol, c.d, 1)?;
        if g.n_sites() > DECAY_MAX_SITES {
            return Err(SuiteError::Infeasible(format!(
                "decay scan at M = {} needs {} sites, limit {DECAY_MAX_SITES}",
                g.big_m(),
                g.n_sites()
            )));
        }
        let seq = RegionSequence::full(&g)?;
        let p = ActionParams::new(c.a, c.l, c.d, 0.0, 2);
        let w = RandomWalkExpansion::new(&g, &seq, &p)?;
        let (_, diag) = w.partial_sums(12, 1e-12)?;
        let table = decay_profile(&g, &seq, &w.sys, 0.75)?;
        let csv = table
            .rows
            .iter()
            .map(|r| {
                [
                    g.big_m().to_string(),
                    r.j.to_string(),
                    r.j_prime.to_string(),
                    r.y.to_string(),
                    r.y_prime.to_string(),
                    format!("{:.6}", r.d_omega),
                    format!("{:.6e}", r.value),
                    r.kind.to_string(),
                ]
            })
            .collect();
        runs.push(DecayRun {
            big_m: g.big_m(),
            sites: g.n_sites(),
            fit: table.fit("G").cloned(),
            ratio: diag.ratio,
            residual_norm: diag.residual_norm,
            final_rel_error: diag.rel_errors.last().copied().unwrap_or(f64::NAN),
            orders: diag.rel_errors.len(),
            csv,
        });
    }
    let rate = |r: &DecayRun| r.fit.as_ref().map_or(f64::NAN, |f| f.rate);
    let rate_nondecreasing = rate(&runs[1]) >= rate(&runs[0]);
    Ok(DecaySummary { runs, rate_nondecreasing })
}

// ------------------------------------------------------------------ polymers

#[derive(Clone, Debug, Serialize)]
pub struct PolymerSummary {
    pub tree_lemma: LemmaSummary,
    pub tree_lemma_holds: bool,
    pub sums: SumBoundsReport,
    pub listed: usize,
    #[serde(skip)]
    pub rows: Vec<PolymerRow>,
}

pub fn polymers() -> Result<PolymerSummary> {
    let lemma = tree_lemma_exhaustive(2, 4, 4)?;
    let torus = CubeGraph::grid(2, 4, true)?;
    let sums = sum_bounds_suite(&torus, 0, bit(0) | bit(10), torus.all() & !bit(5), 4.0, 2.0)?;
    let grid = CubeGraph::grid(2, 3, false)?;
    let list = enumerate_polymers(&grid, Adjacency::Face, 4, PolymerKind::Connected)?;
    let rows = polymer_rows(&grid, &list);
    Ok(PolymerSummary { tree_lemma_holds: lemma.all_hold(), tree_lemma: lemma, sums, listed: rows.len(), rows })
}
