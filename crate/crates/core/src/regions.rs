//! Off/on region partitions and the essential-region, crossing-region and
//! monotone-environment checks.

use serde::{Deserialize, Serialize};

use crate::carrier::CarrierTables;
use crate::error::{Error, Result};
use crate::persistence::Transforms;
use crate::tree::{Model, NodeId};

pub const REGION_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub len: usize,
    /// Sub-off-regions as inclusive index intervals.
    pub off: Vec<(usize, usize)>,
    /// Sub-on-regions (complement intervals); empty unless `full_cover`.
    pub on: Vec<(usize, usize)>,
    pub full_cover: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Off(usize),
    On(usize),
}

pub fn partition_from_boundary(pairs: &[(usize, usize)], len: usize, full_cover: bool) -> Result<RegionPartition> {
    for (b, &(l, r)) in pairs.iter().enumerate() {
        if l > r || r >= len {
            return Err(Error::Boundary(format!("pair {b} ({l}, {r}) is disordered or outside 0..{len}")));
        }
        if b > 0 && pairs[b - 1].1 >= l {
            return Err(Error::Boundary(format!("pairs {} and {b} overlap", b - 1)));
        }
    }
    let mut on = Vec::new();
    if full_cover {
        let mut start = 0;
        for &(l, r) in pairs {
            if l > start {
                on.push((start, l - 1));
            }
            start = r + 1;
        }
        if start < len {
            on.push((start, len - 1));
        }
    }
    Ok(RegionPartition { len, off: pairs.to_vec(), on, full_cover })
}

impl RegionPartition {
    pub fn region_of(&self, state: usize) -> Option<Region> {
        if let Some(b) = self.off.iter().position(|&(l, r)| l <= state && state <= r) {
            return Some(Region::Off(b));
        }
        self.on.iter().position(|&(l, r)| l <= state && state <= r).map(Region::On)
    }

    pub fn in_off(&self, state: usize) -> bool {
        self.off.iter().any(|&(l, r)| l <= state && state <= r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalCertificate {
    pub interval: (usize, usize),
    pub point: Option<usize>,
    /// `min_{s' inside} W(point) − W(s')`; must be ≥ 0.
    pub inside_margin: f64,
    /// `min_{s outside} W(s) − W(point)`; must be ≥ 0.
    pub outside_margin: f64,
    pub passed: bool,
    /// Worst violating state when the check failed.
    pub witness: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssentialCertificate {
    pub agent: usize,
    pub period: usize,
    pub node: NodeId,
    pub intervals: Vec<IntervalCertificate>,
    pub passed: bool,
}

/// Def.-style essential test of `intervals` inside the state set `space`,
/// with `W = Mg + δ̄` given on the whole grid. When `points` is given the
/// essential points are fixed, otherwise each interval is searched and the
/// largest passing node is recorded.
pub fn essential_intervals(
    w: &[f64],
    intervals: &[(usize, usize)],
    space: &[usize],
    points: Option<&[usize]>,
    tol: f64,
) -> Vec<IntervalCertificate> {
    let inside_any = |s: usize| intervals.iter().any(|&(l, r)| l <= s && s <= r);
    let outside: Vec<usize> = space.iter().copied().filter(|&s| !inside_any(s)).collect();
    let eval = |(l, r): (usize, usize), p: usize| {
        let mut inside_margin = f64::INFINITY;
        let mut in_w = None;
        for s in l..=r {
            let d = w[p] - w[s];
            if d < inside_margin {
                inside_margin = d;
                in_w = Some(s);
            }
        }
        let mut outside_margin = f64::INFINITY;
        let mut out_w = None;
        for &s in &outside {
            let d = w[s] - w[p];
            if d < outside_margin {
                outside_margin = d;
                out_w = Some(s);
            }
        }
        let passed = inside_margin >= -tol && outside_margin >= -tol;
        let witness = if passed {
            None
        } else if inside_margin < -tol {
            in_w
        } else {
            out_w
        };
        IntervalCertificate { interval: (l, r), point: Some(p), inside_margin, outside_margin, passed, witness }
    };
    intervals
        .iter()
        .enumerate()
        .map(|(b, &iv)| match points {
            Some(pts) => eval(iv, pts[b]),
            None => {
                let mut best_fail: Option<IntervalCertificate> = None;
                for p in (iv.0..=iv.1).rev() {
                    let c = eval(iv, p);
                    if c.passed {
                        return c;
                    }
                    let score = c.inside_margin.min(c.outside_margin);
                    if best_fail.as_ref().is_none_or(|f| score > f.inside_margin.min(f.outside_margin)) {
                        best_fail = Some(c);
                    }
                }
                let mut c = best_fail.expect("interval is nonempty");
                c.point = None;
                c
            }
        })
        .collect()
}

fn w_values(carriers: &CarrierTables, transforms: &Transforms, mode: usize, agent: usize, node: NodeId) -> Result<Vec<f64>> {
    let c = carriers.cell(mode, node, agent).ok_or(Error::NotParticipating { agent })?;
    (0..c.mg.len()).map(|s| transforms.w_value(carriers, mode, agent, node, s)).collect()
}

/// Essential test of the off-region partition at one node.
pub fn check_essential(
    model: &Model,
    carriers: &CarrierTables,
    transforms: &Transforms,
    mode: usize,
    agent: usize,
    node: NodeId,
) -> Result<EssentialCertificate> {
    let cell = transforms.cell(mode, node, agent).ok_or(Error::NotParticipating { agent })?;
    check_essential_intervals(model, carriers, transforms, mode, agent, node, &cell.partition.off, None)
}

/// Essential test of arbitrary intervals on the full grid.
#[allow(clippy::too_many_arguments)]
pub fn check_essential_intervals(
    model: &Model,
    carriers: &CarrierTables,
    transforms: &Transforms,
    mode: usize,
    agent: usize,
    node: NodeId,
    intervals: &[(usize, usize)],
    points: Option<&[usize]>,
) -> Result<EssentialCertificate> {
    let w = w_values(carriers, transforms, mode, agent, node)?;
    let space: Vec<usize> = (0..w.len()).collect();
    let intervals = essential_intervals(&w, intervals, &space, points, REGION_TOL);
    let passed = intervals.iter().all(|c| c.passed);
    Ok(EssentialCertificate { agent, period: model.tree.node(node).period, node, intervals, passed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingWitness {
    pub child: NodeId,
    /// State outside the candidate region.
    pub state: usize,
    /// State inside the candidate region.
    pub inside: usize,
    pub successor: usize,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominatedRegion {
    pub agent: usize,
    pub node: NodeId,
    pub dcr_ok: bool,
    pub dcr_witness: Option<CrossingWitness>,
    /// Cut level attaining the largest intersection (smallest such level).
    pub level: Option<f64>,
    pub states: Vec<usize>,
}

fn cdf(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}

/// Kernels of `agent` from every grid state, one set per child where the
/// agent participates.
fn child_cdfs(model: &Model, agent: usize, node: NodeId) -> Vec<(NodeId, Vec<Vec<f64>>)> {
    let nd = model.tree.node(node);
    if nd.period == model.horizon() {
        return Vec::new();
    }
    let m = model.game.grid(agent, nd.period).len();
    let next_m = model.game.grid(agent, nd.period + 1).len();
    let mut children: Vec<NodeId> = model
        .tree
        .nodes()
        .iter()
        .filter(|c| c.parent == Some(node) && c.present[agent])
        .map(|c| c.id)
        .collect();
    children.sort_unstable();
    children
        .into_iter()
        .map(|child| {
            let rows = (0..m)
                .map(|s| {
                    let mut p = vec![0.0; next_m];
                    for mv in model.moves(agent, child, s, false) {
                        p[mv.next] += mv.prob;
                    }
                    cdf(&p)
                })
                .collect();
            (child, rows)
        })
        .collect()
}

/// Crossing-region check: `F(·|s) ≤ F(·|s')` for `s'` in the region and `s`
/// outside it, under every joint action at the node.
pub fn check_dcr(model: &Model, agent: usize, node: NodeId, region: &[usize]) -> (bool, Option<CrossingWitness>) {
    let m = model.game.grid(agent, model.tree.node(node).period).len();
    let inside = |s: usize| region.contains(&s);
    let mut worst: Option<CrossingWitness> = None;
    for (child, rows) in child_cdfs(model, agent, node) {
        for s in (0..m).filter(|&s| !inside(s)) {
            for &sp in region {
                for x in 0..rows[s].len() {
                    let gap = rows[s][x] - rows[sp][x];
                    if gap > REGION_TOL && worst.as_ref().is_none_or(|w| gap > w.gap) {
                        worst = Some(CrossingWitness { child, state: s, inside: sp, successor: x, gap });
                    }
                }
            }
        }
    }
    (worst.is_none(), worst)
}

pub fn dominated_region(
    model: &Model,
    carriers: &CarrierTables,
    mode: usize,
    agent: usize,
    node: NodeId,
    candidate: &[usize],
) -> Result<DominatedRegion> {
    let cell = carriers.cell(mode, node, agent).ok_or(Error::NotParticipating { agent })?;
    let (dcr_ok, dcr_witness) = check_dcr(model, agent, node, candidate);
    if !dcr_ok {
        return Ok(DominatedRegion { agent, node, dcr_ok, dcr_witness, level: None, states: Vec::new() });
    }
    let zeta = &cell.zeta;
    let mut levels: Vec<f64> = zeta.clone();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut best: (Option<f64>, Vec<usize>) = (None, Vec::new());
    for y in levels {
        let cut: Vec<usize> = candidate.iter().copied().filter(|&s| zeta[s] <= y).collect();
        let better = match (&best.0, cut.len().cmp(&best.1.len())) {
            (None, _) => true,
            (_, std::cmp::Ordering::Greater) => true,
            (_, std::cmp::Ordering::Equal) => cut.last() > best.1.last(),
            _ => false,
        };
        if better {
            best = (Some(y), cut);
        }
    }
    Ok(DominatedRegion { agent, node, dcr_ok, dcr_witness: None, level: best.0, states: best.1 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Increasing,
    Decreasing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneWitness {
    pub agent: usize,
    pub node: NodeId,
    pub state: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneVerdict {
    pub passed: bool,
    pub orientation: Option<Orientation>,
    pub witness: Option<MonotoneWitness>,
}

/// Monotone environment: ζ nondecreasing with first-order dominant
/// dynamics, or the mirror orientation, on every node.
pub fn detect_monotone(model: &Model, carriers: &CarrierTables, mode: usize) -> MonotoneVerdict {
    let mut first_fail = None;
    for orient in [Orientation::Increasing, Orientation::Decreasing] {
        match monotone_witness(model, carriers, mode, orient) {
            None => return MonotoneVerdict { passed: true, orientation: Some(orient), witness: None },
            Some(w) => {
                if first_fail.is_none() {
                    first_fail = Some(w);
                }
            }
        }
    }
    MonotoneVerdict { passed: false, orientation: None, witness: first_fail }
}

fn monotone_witness(model: &Model, carriers: &CarrierTables, mode: usize, orient: Orientation) -> Option<MonotoneWitness> {
    let sign = match orient {
        Orientation::Increasing => 1.0,
        Orientation::Decreasing => -1.0,
    };
    for node in model.tree.nodes() {
        for agent in node.present_agents() {
            let cell = carriers.cell(mode, node.id, agent)?;
            for s in 1..cell.zeta.len() {
                if sign * (cell.zeta[s] - cell.zeta[s - 1]) < -REGION_TOL {
                    return Some(MonotoneWitness {
                        agent,
                        node: node.id,
                        state: s,
                        reason: format!("marginal carrier {:?} fails between states {} and {s}", orient, s - 1),
                    });
                }
            }
            for (child, rows) in child_cdfs(model, agent, node.id) {
                for s in 1..rows.len() {
                    for x in 0..rows[s].len() {
                        // increasing orientation needs F(x|s) nonincreasing in s
                        if sign * (rows[s][x] - rows[s - 1][x]) > REGION_TOL {
                            return Some(MonotoneWitness {
                                agent,
                                node: node.id,
                                state: s,
                                reason: format!("CDF ordering fails at successor {x} (child {child})"),
                            });
                        }
                    }
                }
            }
        }
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MembershipMode {
    H,
    K,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipVerdict {
    pub mode: MembershipMode,
    pub passed: bool,
    pub cells: usize,
    pub failures: Vec<EssentialCertificate>,
}

/// Membership in the horizontal (H) or knowledgeable (K) essential sets.
pub fn membership(
    model: &Model,
    carriers: &CarrierTables,
    transforms: &Transforms,
    mode: usize,
    which: MembershipMode,
) -> Result<MembershipVerdict> {
    let mut failures = Vec::new();
    let mut cells = 0;
    for node in model.tree.nodes() {
        for agent in node.present_agents() {
            let tc = transforms.cell(mode, node.id, agent).ok_or(Error::NotParticipating { agent })?;
            let part = &tc.partition;
            if part.off.is_empty() {
                continue;
            }
            cells += 1;
            let cert = match which {
                MembershipMode::H => check_essential_intervals(
                    model,
                    carriers,
                    transforms,
                    mode,
                    agent,
                    node.id,
                    &part.off,
                    Some(&tc.d_up),
                )?,
                MembershipMode::K => {
                    if !part.full_cover {
                        return Err(Error::NotFullCover);
                    }
                    let w = w_values(carriers, transforms, mode, agent, node.id)?;
                    let mut all = Vec::new();
                    for (&(l, r), &d) in part.off.iter().zip(&tc.d_up) {
                        let space: Vec<usize> = (l..=r).collect();
                        let mut pieces = Vec::new();
                        if d > l {
                            pieces.push((l, d - 1));
                        }
                        if d < r {
                            pieces.push((d + 1, r));
                        }
                        all.extend(essential_intervals(&w, &pieces, &space, None, REGION_TOL));
                    }
                    for (&(l, r), &d) in part.on.iter().zip(&tc.d_down) {
                        let space: Vec<usize> = (l..=r).collect();
                        all.extend(essential_intervals(&w, &[(d, d)], &space, Some(&[d]), REGION_TOL));
                    }
                    let passed = all.iter().all(|c| c.passed);
                    EssentialCertificate { agent, period: node.period, node: node.id, intervals: all, passed }
                }
            };
            if !cert.passed {
                failures.push(cert);
            }
        }
    }
    Ok(MembershipVerdict { mode: which, passed: failures.is_empty(), cells, failures })
}
