//! Coupling policies and off-switch functions from the task policy, the
//! horizontal cutoff check, the posted factor η and the DCM zero conditions.

use serde::{Deserialize, Serialize};

use crate::carrier::CarrierTables;
use crate::error::{Error, Result};
use crate::mechanism::{CouplingPolicy, CouplingTable, Mechanism, OffSwitch, OffSwitchTable, Variant};
use crate::persistence::{TransformKind, Transforms};
use crate::regions::{MembershipMode, REGION_TOL};
use crate::tree::{Model, NodeId, Opponents};
use crate::verify::{Verdict, Witness};

/// The carrier mode used for synthesis: others obedient.
pub const OBEDIENT: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingDiagnostics {
    /// Largest C1 mismatch at non-representative generating states.
    pub generator_residual: f64,
    pub worst: Option<(usize, NodeId, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizontalCell {
    pub agent: usize,
    pub node: NodeId,
    pub period: usize,
    /// Boundary points must not exceed the marginal carrier on the on-region.
    pub lower_ok: bool,
    /// Interior boundary points and projection points share one value.
    pub level_ok: bool,
    pub phi_spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizontalReport {
    pub passed: bool,
    pub cells: Vec<HorizontalCell>,
    /// Largest per-node spread of the per-region φ values.
    pub max_phi_spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaEntry {
    pub agent: usize,
    pub node: NodeId,
    pub period: usize,
    pub value: f64,
    /// Spread of the C2 solution over parent generating states and L.
    pub spread: f64,
    pub consistent: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthesisOutput {
    pub variant: Variant,
    pub coupling: CouplingTable,
    pub phi: OffSwitchTable,
    /// Per node and agent: one level per sub-off-region (and per sub-on
    /// region for the knowledgeable variant, after the off-regions).
    pub levels: Vec<Vec<Vec<f64>>>,
    pub eta: Vec<EtaEntry>,
    pub horizontal: Option<HorizontalReport>,
    pub coupling_diagnostics: CouplingDiagnostics,
}

impl SynthesisOutput {
    pub fn mechanism(&self) -> Mechanism {
        Mechanism::new(CouplingPolicy::Table(self.coupling.clone()), OffSwitch::Table(self.phi.clone()))
    }

    /// η at a node, 0 when absent (period 1 uses φ itself).
    pub fn eta_at(&self, agent: usize, node: NodeId) -> Option<f64> {
        self.eta.iter().find(|e| e.agent == agent && e.node == node).map(|e| e.value)
    }
}

fn obedient_carriers(carriers: &CarrierTables) -> Result<()> {
    match carriers.modes.get(OBEDIENT) {
        Some(Opponents::Obedient) => Ok(()),
        _ => Err(Error::Scenario("synthesis needs carrier tables whose first mode is obedient".into())),
    }
}

/// Expected-coupling representative: `Eρ(a) = ζ(s_a) − E[u(s_a, a, ·)]`
/// with `s_a` the largest state generating `a`, constant in others' actions.
pub fn coupling_from_c1(model: &Model, carriers: &CarrierTables) -> Result<(CouplingTable, CouplingDiagnostics)> {
    obedient_carriers(carriers)?;
    let n = model.agents();
    let per_node: Vec<Result<(Vec<Vec<f64>>, f64, Option<(usize, NodeId, usize)>)>> =
        crate::par::map(model.exec, model.tree.nodes(), |nd| {
            let mut cells = vec![Vec::new(); n];
            let mut worst = 0.0;
            let mut at = None;
            let k = nd.period;
            for i in nd.present_agents() {
                let menu = nd.menu(i).unwrap();
                let cell = carriers.cell(OBEDIENT, nd.id, i).unwrap();
                let grid = model.game.grid(i, k);
                let mut e_rho = Vec::with_capacity(menu.len());
                for a in 0..menu.len() {
                    let eu = |s: usize| -> Result<f64> {
                        let mut acc = 0.0;
                        for b in model.branches(i, &Opponents::Obedient, nd.id, a) {
                            acc += b.prob * model.game.reward(i, k, grid.value(s), &b.values)?;
                        }
                        Ok(acc)
                    };
                    let rep = menu.representative(a);
                    let r = cell.zeta[rep] - eu(rep)?;
                    for &g in &menu.generators[a] {
                        if g != rep {
                            let d = (cell.zeta[g] - eu(g)? - r).abs();
                            if d > worst {
                                worst = d;
                                at = Some((i, nd.id, g));
                            }
                        }
                    }
                    e_rho.push(r);
                }
                cells[i] = (0..nd.joint_count())
                    .map(|code| model.tree.decode(nd.id, code)[i].map_or(0.0, |a| e_rho[a]))
                    .collect();
            }
            Ok((cells, worst, at))
        });
    let mut table = Vec::with_capacity(per_node.len());
    let mut diag = CouplingDiagnostics { generator_residual: 0.0, worst: None };
    for r in per_node {
        let (cells, worst, at) = r?;
        if worst > diag.generator_residual {
            diag.generator_residual = worst;
            diag.worst = at;
        }
        table.push(cells);
    }
    Ok((CouplingTable { cells: table }, diag))
}

/// Closed-form off-switch values. Returns the per-state table and the
/// per-region levels.
pub fn build_cutoff(
    model: &Model,
    carriers: &CarrierTables,
    transforms: &Transforms,
) -> Result<(OffSwitchTable, Vec<Vec<Vec<f64>>>)> {
    obedient_carriers(carriers)?;
    let n = model.agents();
    let variant = model.variant;
    let per_node: Vec<Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>> = crate::par::map(model.exec, model.tree.nodes(), |nd| {
        let mut phi = vec![Vec::new(); n];
        let mut levels = vec![Vec::new(); n];
        for i in nd.present_agents() {
            let tc = transforms.cell(OBEDIENT, nd.id, i).unwrap();
            let len = tc.up.len();
            let w = |s: usize| transforms.w_value(carriers, OBEDIENT, i, nd.id, s);
            match variant {
                Variant::Ir => {
                    let v = w(0)?;
                    phi[i] = vec![v; len];
                    levels[i] = vec![v];
                }
                Variant::Horizontal => {
                    let lv: Vec<f64> = tc.d_up.iter().map(|&d| w(d)).collect::<Result<_>>()?;
                    let fill = if lv.is_empty() {
                        (0..len).map(&w).collect::<Result<Vec<_>>>()?.into_iter().fold(f64::INFINITY, f64::min)
                    } else {
                        lv.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    };
                    let mut row = vec![fill; len];
                    for (&(l, r), &v) in tc.partition.off.iter().zip(&lv) {
                        row[l..=r].fill(v);
                    }
                    phi[i] = row;
                    levels[i] = lv;
                }
                Variant::Knowledgeable => {
                    if !tc.partition.full_cover {
                        return Err(Error::NotFullCover);
                    }
                    let mut row = vec![0.0; len];
                    let mut lv = Vec::new();
                    for (&(l, r), &d) in tc.partition.off.iter().zip(&tc.d_up) {
                        let v = w(tc.project(d, TransformKind::Jump)?)?;
                        row[l..=r].fill(v);
                        lv.push(v);
                    }
                    for (&(l, r), &d) in tc.partition.on.iter().zip(&tc.d_down) {
                        let v = w(tc.project(d, TransformKind::Jump)?)?;
                        row[l..=r].fill(v);
                        lv.push(v);
                    }
                    phi[i] = row;
                    levels[i] = lv;
                }
            }
        }
        Ok((phi, levels))
    });
    let mut cells = Vec::with_capacity(per_node.len());
    let mut levels = Vec::with_capacity(per_node.len());
    for r in per_node {
        let (p, l) = r?;
        cells.push(p);
        levels.push(l);
    }
    Ok((OffSwitchTable { cells }, levels))
}

/// Horizontal cutoff conditions on the marginal carrier, per node.
pub fn horizontal_report(
    model: &Model,
    carriers: &CarrierTables,
    transforms: &Transforms,
    levels: &[Vec<Vec<f64>>],
) -> HorizontalReport {
    let mut cells = Vec::new();
    let mut passed = true;
    let mut max_phi_spread: f64 = 0.0;
    for nd in model.tree.nodes() {
        for i in nd.present_agents() {
            let zeta = &carriers.cell(OBEDIENT, nd.id, i).unwrap().zeta;
            let tc = transforms.cell(OBEDIENT, nd.id, i).unwrap();
            let last = zeta.len() - 1;
            let part = &tc.partition;
            let onr: Vec<usize> = (0..zeta.len()).filter(|&s| !part.in_off(s)).collect();
            let ends: Vec<usize> = part.off.iter().flat_map(|&(l, r)| [l, r]).collect();
            let lower_ok = ends.iter().all(|&p| onr.iter().all(|&s| zeta[p] <= zeta[s] + REGION_TOL));
            let mut level_pts: Vec<usize> = ends.iter().copied().filter(|&p| p != 0 && p != last).collect();
            level_pts.extend(tc.d_up.iter().copied());
            let lo = level_pts.iter().map(|&p| zeta[p]).fold(f64::INFINITY, f64::min);
            let hi = level_pts.iter().map(|&p| zeta[p]).fold(f64::NEG_INFINITY, f64::max);
            let level_ok = level_pts.is_empty() || hi - lo <= REGION_TOL;
            let lv = &levels[nd.id][i][..part.off.len()];
            let spread = if lv.is_empty() {
                0.0
            } else {
                lv.iter().copied().fold(f64::NEG_INFINITY, f64::max) - lv.iter().copied().fold(f64::INFINITY, f64::min)
            };
            max_phi_spread = max_phi_spread.max(spread);
            passed &= lower_ok && level_ok;
            cells.push(HorizontalCell { agent: i, node: nd.id, period: nd.period, lower_ok, level_ok, phi_spread: spread });
        }
    }
    HorizontalReport { passed, cells, max_phi_spread }
}

/// Expected flow utility `E[u + ρ]` at a grid state with menu action `action`.
pub(crate) fn expected_z(
    model: &Model,
    mech: &Mechanism,
    agent: usize,
    node: NodeId,
    action: usize,
    state: usize,
) -> Result<f64> {
    let k = model.tree.node(node).period;
    let s = model.game.grid(agent, k).value(state);
    let mut acc = 0.0;
    for b in model.branches(agent, &Opponents::Obedient, node, action) {
        acc += b.prob * (model.game.reward(agent, k, s, &b.values)? + mech.coupling_value(model, agent, node, &b.actions)?);
    }
    Ok(acc)
}

/// Posted factor solved from the C2 identity at every non-root node. The
/// emitted value uses the representative parent state and its maximizing L.
pub fn posted_factor_eta(
    model: &Model,
    carriers: &CarrierTables,
    mech: &Mechanism,
    tol: f64,
) -> Result<Vec<EtaEntry>> {
    obedient_carriers(carriers)?;
    let per_node: Vec<Result<Vec<EtaEntry>>> = crate::par::map(model.exec, model.tree.nodes(), |nd| {
        let mut out = Vec::new();
        for i in nd.present_agents() {
            let Some(pid) = nd.parent else {
                out.push(EtaEntry {
                    agent: i,
                    node: nd.id,
                    period: 1,
                    value: mech.off_value(i, 1, Some(nd.id), 0),
                    spread: 0.0,
                    consistent: true,
                });
                continue;
            };
            let parent = model.tree.node(pid);
            let a = nd.history.last().unwrap().actions[i].expect("present agent acted in the parent");
            let menu = parent.menu(i).unwrap();
            let cell = carriers.cell(OBEDIENT, pid, i).unwrap();
            let len = model.game.grid(i, nd.period).len();
            let phis: Vec<f64> = (0..len).map(|s| mech.off_value(i, nd.period, Some(nd.id), s)).collect();
            let phi = phis[0];
            let (plo, phi_hi) = phis.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &g in &menu.generators[a] {
                let ez = expected_z(model, mech, i, pid, a, g)?;
                for row in &cell.g {
                    lo = lo.min(plo + ez - row[g]);
                    hi = hi.max(phi_hi + ez - row[g]);
                }
            }
            let rep = menu.representative(a);
            let l_star = cell.arg_l[rep];
            let value = phi + expected_z(model, mech, i, pid, a, rep)? - cell.g[l_star - parent.period][rep];
            out.push(EtaEntry {
                agent: i,
                node: nd.id,
                period: nd.period,
                value,
                spread: hi - lo,
                consistent: hi - lo <= tol,
            });
        }
        Ok(out)
    });
    let mut out = Vec::new();
    for r in per_node {
        out.extend(r?);
    }
    Ok(out)
}

/// Runs the whole pipeline on a model: ρ, φ, η and the horizontal report.
pub fn synthesize(model: &Model, carriers: &CarrierTables, transforms: &Transforms) -> Result<SynthesisOutput> {
    let (coupling, coupling_diagnostics) = coupling_from_c1(model, carriers)?;
    let (phi, levels) = build_cutoff(model, carriers, transforms)?;
    let horizontal =
        (model.variant == Variant::Horizontal).then(|| horizontal_report(model, carriers, transforms, &levels));
    let mut out = SynthesisOutput {
        variant: model.variant,
        coupling,
        phi,
        levels,
        eta: Vec::new(),
        horizontal,
        coupling_diagnostics,
    };
    out.eta = posted_factor_eta(model, carriers, &out.mechanism(), 1e-9)?;
    Ok(out)
}

/// Zero conditions `Mg + δ̄ = 0` at the projection points.
pub fn check_dcm_zero(
    model: &Model,
    carriers: &CarrierTables,
    transforms: &Transforms,
    which: MembershipMode,
    tol: f64,
) -> Result<Verdict> {
    let mut v = Verdict::new(match which {
        MembershipMode::H => "dcm_zero_h",
        MembershipMode::K => "dcm_zero_k",
    }, tol);
    for nd in model.tree.nodes() {
        for i in nd.present_agents() {
            let tc = transforms.cell(OBEDIENT, nd.id, i).unwrap();
            let mut pts: Vec<usize> = tc.d_up.clone();
            if which == MembershipMode::K {
                if !tc.partition.full_cover {
                    return Err(Error::NotFullCover);
                }
                pts = pts.iter().map(|&p| tc.project(p, TransformKind::Jump)).collect::<Result<_>>()?;
                pts.extend(tc.d_down.iter().copied());
            }
            for p in pts {
                let w = transforms.w_value(carriers, OBEDIENT, i, nd.id, p)?;
                v.observe(w.abs(), || Witness::at(i, nd.period, nd.id, p, format!("Mg + δ̄ = {w:e}")));
            }
        }
    }
    Ok(v.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;

    #[test]
    fn coupling_reduces_to_zeta_without_rewards() {
        let m = instances::zero_reward_model();
        let c = CarrierTables::obedient(&m).unwrap();
        let (table, diag) = coupling_from_c1(&m, &c).unwrap();
        assert_eq!(diag.generator_residual, 0.0);
        for nd in m.tree.nodes() {
            let cell = c.cell(OBEDIENT, nd.id, 0).unwrap();
            let menu = nd.menu(0).unwrap();
            for code in 1..nd.joint_count() {
                let a = m.tree.decode(nd.id, code)[0].unwrap();
                assert_eq!(table.cells[nd.id][0][code], cell.zeta[menu.representative(a)]);
            }
        }
    }

    #[test]
    fn terminal_coupling_is_mg_minus_reward() {
        let m = instances::g1_model(Variant::Ir, &[]);
        let c = CarrierTables::obedient(&m).unwrap();
        let (table, _) = coupling_from_c1(&m, &c).unwrap();
        let horizon = m.horizon();
        let grid = m.game.grid(0, horizon);
        for &id in m.tree.layer(horizon) {
            let nd = m.tree.node(id);
            let cell = c.cell(OBEDIENT, id, 0).unwrap();
            let menu = nd.menu(0).unwrap();
            for s in 0..grid.len() {
                let a = menu.state_action[s];
                let u = grid.value(s) * menu.actions[a];
                let code = m.tree.joint_code(id, &[Some(a)]);
                assert!((table.cells[id][0][code] - (cell.mg[s] - u)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ir_cutoff_at_terminal_is_mg_at_bottom() {
        let m = instances::g1_model(Variant::Ir, &[]);
        let c = CarrierTables::obedient(&m).unwrap();
        let t = Transforms::build(&m, &c, false).unwrap();
        let (phi, _) = build_cutoff(&m, &c, &t).unwrap();
        for &id in m.tree.layer(m.horizon()) {
            let mg = c.cell(OBEDIENT, id, 0).unwrap().mg[0];
            assert!(phi.cells[id][0].iter().all(|&v| v == mg));
        }
    }

    #[test]
    fn eta_at_root_is_phi() {
        let m = instances::g1_model(Variant::Ir, &[]);
        let c = CarrierTables::obedient(&m).unwrap();
        let t = Transforms::build(&m, &c, false).unwrap();
        let out = synthesize(&m, &c, &t).unwrap();
        let root = out.eta.iter().find(|e| e.node == 0).unwrap();
        assert_eq!(root.value, out.phi.cells[0][0][0]);
    }

    #[test]
    fn state_dependent_phi_breaks_eta_consistency() {
        let m = instances::g1_model(Variant::Ir, &[]);
        let c = CarrierTables::obedient(&m).unwrap();
        let t = Transforms::build(&m, &c, false).unwrap();
        let out = synthesize(&m, &c, &t).unwrap();
        let id = m.tree.layer(2)[0];
        let base = out.eta.iter().find(|e| e.node == id).unwrap();
        let mut phi = out.phi.clone();
        for (s, v) in phi.cells[id][0].iter_mut().enumerate() {
            *v += 0.1 * s as f64;
        }
        let mech = Mechanism::new(CouplingPolicy::Table(out.coupling.clone()), OffSwitch::Table(phi));
        let eta = posted_factor_eta(&m, &c, &mech, 1e-9).unwrap();
        let e = eta.iter().find(|e| e.node == id).unwrap();
        assert!(!e.consistent);
        assert!(e.spread >= base.spread + 0.4 - 1e-12);
    }

    #[test]
    fn dcm_zero_trivial_and_generic() {
        let m = instances::g1_model(Variant::Ir, &[]);
        let c = CarrierTables::obedient(&m).unwrap();
        let t = Transforms::build(&m, &c, false).unwrap();
        // θ = s̲ makes Mg vanish at the bottom state
        assert!(check_dcm_zero(&m, &c, &t, MembershipMode::H, 1e-9).unwrap().passed);
        let m = instances::g1_model(Variant::Horizontal, &[(0.5, 0.75)]);
        let c = CarrierTables::obedient(&m).unwrap();
        let t = Transforms::build(&m, &c, true).unwrap();
        let v = check_dcm_zero(&m, &c, &t, MembershipMode::H, 1e-9).unwrap();
        assert!(!v.passed);
        assert!(v.witness.is_some());
    }
}
