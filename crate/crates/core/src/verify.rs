//! Verdicts over a synthesized or user-supplied mechanism.

use serde::{Deserialize, Serialize};

use crate::carrier::CarrierTables;
use crate::equilibrium::{solve_indifference, Continuation, Conjecture, ValueTables};
use crate::error::{Error, Result};
use crate::mechanism::{Mechanism, Variant};
use crate::persistence::{TransformKind, Transforms};
use crate::synthesis::{expected_z, SynthesisOutput, OBEDIENT};
use crate::tree::{Model, NodeId, Opponents};

pub const EXACT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Exact,
    Mc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub agent: usize,
    pub period: usize,
    pub node: NodeId,
    pub state: usize,
    /// Deviating menu action or pretended state, when relevant.
    pub deviation: Option<usize>,
    pub detail: String,
}

impl Witness {
    pub fn at(agent: usize, period: usize, node: NodeId, state: usize, detail: String) -> Self {
        Witness { agent, period, node, state, deviation: None, detail }
    }

    pub fn with_deviation(mut self, d: usize) -> Self {
        self.deviation = Some(d);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    /// Worst violation seen (0 when every check holds with margin).
    pub worst: f64,
    pub tol: f64,
    pub mode: EvalMode,
    pub checked: usize,
    pub witness: Option<Witness>,
    pub note: Option<String>,
}

impl Verdict {
    pub fn new(name: &str, tol: f64) -> Self {
        Verdict {
            name: name.to_string(),
            passed: true,
            worst: 0.0,
            tol,
            mode: EvalMode::Exact,
            checked: 0,
            witness: None,
            note: None,
        }
    }

    /// Records one check with violation size `residual`; the witness is only
    /// built for a new worst violation beyond tolerance.
    pub fn observe(&mut self, residual: f64, witness: impl FnOnce() -> Witness) {
        self.checked += 1;
        let residual = if residual.is_nan() { f64::INFINITY } else { residual };
        if residual > self.worst {
            self.worst = residual;
            if residual > self.tol {
                self.witness = Some(witness());
            }
        }
    }

    pub fn finish(mut self) -> Self {
        self.passed = self.worst <= self.tol;
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn with_mode(mut self, mode: EvalMode) -> Self {
        self.mode = mode;
        self
    }

    /// Verdict for a boolean condition with no residual.
    pub fn flag(name: &str, passed: bool, note: impl Into<String>) -> Self {
        let mut v = Verdict::new(name, 0.0);
        v.checked = 1;
        if !passed {
            v.worst = 1.0;
        }
        v.with_note(note).finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoicMode {
    /// Everybody stays: on-rent nonnegative and truthful reporting optimal.
    Ir,
    /// Quit exactly on the designed off-region.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoicReport {
    pub mode: DoicMode,
    pub oaic: Verdict,
    pub raic: Verdict,
    /// Region alignment of the best-response quit decisions (off mode).
    pub alignment: Option<Verdict>,
    pub min_on_rent: f64,
    /// Largest |Z| at the bottom state over all cells.
    pub bottom_on_rent: f64,
}

impl DoicReport {
    pub fn passed(&self) -> bool {
        self.oaic.passed && self.raic.passed && self.alignment.as_ref().is_none_or(|a| a.passed)
    }

    pub fn verdicts(&self) -> Vec<Verdict> {
        let mut v = vec![self.oaic.clone(), self.raic.clone()];
        v.extend(self.alignment.clone());
        v
    }
}

/// Enumerates every agent, node, state and menu deviation.
pub fn check_doic(
    model: &Model,
    mech: &Mechanism,
    values: &ValueTables,
    mode: DoicMode,
    cont: Continuation,
    tol: f64,
) -> Result<DoicReport> {
    let conj = Conjecture::Obedient;
    let mut oaic = Verdict::new("oaic", tol);
    let mut raic = Verdict::new("raic", tol);
    let mut align = Verdict::new("off_region_alignment", tol);
    let mut min_on_rent = f64::INFINITY;
    let mut bottom: f64 = 0.0;
    for nd in model.tree.nodes() {
        let k = nd.period;
        for i in nd.present_agents() {
            let menu = nd.menu(i).unwrap();
            for s in 0..model.game.grid(i, k).len() {
                let br = values.best_response(model, mech, i, nd.id, s, &conj, cont)?;
                let a = menu.state_action[s];
                let z = br.stay_values[a] - br.off_value;
                min_on_rent = min_on_rent.min(z);
                if s == 0 {
                    bottom = bottom.max(z.abs());
                }
                let best_stay = br.stay_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let designed_quit = model.plan.quits(i, k, s);
                match mode {
                    DoicMode::Ir => {
                        oaic.observe((-z).max(0.0), || {
                            Witness::at(i, k, nd.id, s, format!("on-rent {z:e} below zero"))
                        });
                    }
                    DoicMode::Off => {
                        let r = if designed_quit { z.max(0.0) } else { (-z).max(0.0) };
                        oaic.observe(r, || Witness::at(i, k, nd.id, s, format!("on-rent {z:e} has the wrong sign")));
                        align.observe(if br.quit == designed_quit { 0.0 } else { 1.0 }, || {
                            Witness::at(i, k, nd.id, s, format!("best response quit={} against designed {}", br.quit, designed_quit))
                        });
                    }
                }
                if !(mode == DoicMode::Off && designed_quit) {
                    let gap = best_stay - br.stay_values[a];
                    let dev = br.stay_values.iter().position(|&v| v == best_stay).unwrap();
                    raic.observe(gap.max(0.0), || {
                        Witness::at(i, k, nd.id, s, format!("deviation gains {gap:e}")).with_deviation(dev)
                    });
                }
            }
        }
    }
    Ok(DoicReport {
        mode,
        oaic: oaic.finish(),
        raic: raic.finish(),
        alignment: (mode == DoicMode::Off).then(|| align.finish()),
        min_on_rent,
        bottom_on_rent: bottom,
    })
}

/// Transform identity: the obedient payoff-to-go equals `Mg + δ̄` at the
/// up-projected state.
pub fn check_transform_identity(
    model: &Model,
    mech: &Mechanism,
    values: &ValueTables,
    carriers: &CarrierTables,
    transforms: &Transforms,
    tol: f64,
) -> Result<Verdict> {
    let mut v = Verdict::new("transform_identity", tol);
    for nd in model.tree.nodes() {
        for i in nd.present_agents() {
            for s in 0..model.game.grid(i, nd.period).len() {
                let lam = values.lambda_obedient(model, mech, i, nd.id, s, Continuation::OneShot)?;
                let p = transforms.project(OBEDIENT, i, nd.id, s, TransformKind::Up)?;
                let w = transforms.w_value(carriers, OBEDIENT, i, nd.id, p)?;
                let r = (lam - w).abs();
                v.observe(r, || Witness::at(i, nd.period, nd.id, s, format!("Λ = {lam}, Mg + δ̄ = {w}")));
            }
        }
    }
    Ok(v.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayoffFlowReport {
    pub c1: Verdict,
    pub c2: Verdict,
    pub c3: Verdict,
}

impl PayoffFlowReport {
    pub fn verdicts(&self) -> Vec<Verdict> {
        vec![self.c1.clone(), self.c2.clone(), self.c3.clone()]
    }
}

/// Distribution over (node, state) after `steps` periods when the agent
/// plays `action` first and obediently afterwards.
fn forward(
    model: &Model,
    agent: usize,
    node: NodeId,
    action: usize,
    state: usize,
    steps: usize,
) -> Vec<(NodeId, usize, f64)> {
    let mut cur = vec![(node, state, 1.0)];
    for step in 0..steps {
        let mut next = Vec::new();
        for &(id, s, p) in &cur {
            let a = if step == 0 { action } else { model.tree.node(id).menu(agent).unwrap().state_action[s] };
            for b in model.branches(agent, &Opponents::Obedient, id, a) {
                let child = b.child.expect("child exists before the horizon");
                for mv in model.moves(agent, child, s, false) {
                    next.push((child, mv.next, p * b.prob * mv.prob));
                }
            }
        }
        cur = next;
    }
    cur
}

pub fn check_payoff_flow(
    model: &Model,
    carriers: &CarrierTables,
    synth: &SynthesisOutput,
    values: &ValueTables,
    tol: f64,
) -> Result<PayoffFlowReport> {
    let mech = synth.mechanism();
    let horizon = model.horizon();
    let mut c1 = Verdict::new("c1", tol);
    let mut c3 = Verdict::new("c3", tol);
    // max over L of the left side against min over L of the right side
    let mut uniform_gap = f64::NEG_INFINITY;
    for nd in model.tree.nodes() {
        let k = nd.period;
        for i in nd.present_agents() {
            let menu = nd.menu(i).unwrap();
            let cell = carriers.cell(OBEDIENT, nd.id, i).unwrap();
            let m = cell.zeta.len();
            for s in 0..m {
                let ez = expected_z(model, &mech, i, nd.id, menu.state_action[s], s)?;
                let r = (ez - cell.zeta[s]).abs();
                c1.observe(r, || Witness::at(i, k, nd.id, s, format!("E[u + ρ] = {ez}, ζ = {}", cell.zeta[s])));
            }
            // expected η at L+1 along the deviation path, per (s, â, L)
            let eta_at = |id: NodeId| synth.eta_at(i, id).unwrap_or(0.0);
            for s in 0..m {
                for hat in 0..m {
                    let a_hat = menu.state_action[hat];
                    let mut lhs_max = f64::NEG_INFINITY;
                    let mut rhs_min = f64::INFINITY;
                    for l in k..=horizon {
                        let row = l - k;
                        let lhs = cell.g[row][hat] - cell.g[row][s];
                        let lam_hat = values.prospect(model, &mech, i, nd.id, a_hat, hat, l, &Conjecture::Obedient)?;
                        let lam_dev = values.prospect(model, &mech, i, nd.id, a_hat, s, l, &Conjecture::Obedient)?;
                        let eta = if l == horizon {
                            0.0
                        } else {
                            forward(model, i, nd.id, a_hat, s, l + 1 - k).iter().map(|&(id, _, p)| p * eta_at(id)).sum()
                        };
                        let rhs = lam_hat - lam_dev - eta;
                        lhs_max = lhs_max.max(lhs);
                        rhs_min = rhs_min.min(rhs);
                        c3.observe((lhs - rhs).max(0.0), || {
                            Witness::at(i, k, nd.id, s, format!("carrier gap {lhs:e} exceeds {rhs:e} at L = {l}"))
                                .with_deviation(hat)
                        });
                    }
                    uniform_gap = uniform_gap.max(lhs_max - rhs_min);
                }
            }
        }
    }
    let mut c2 = Verdict::new("c2", tol);
    for e in &synth.eta {
        c2.observe(e.spread, || {
            Witness::at(e.agent, e.period, e.node, 0, format!("η spread {:e} over parent states and L", e.spread))
        });
    }
    Ok(PayoffFlowReport {
        c1: c1.finish(),
        c2: c2.finish().with_note("identity required for every L; η taken at the maximizing L"),
        c3: c3.finish().with_note(format!(
            "checked per L at the emitted η; uniform form (max over L against min over L) {}",
            if uniform_gap <= tol { "holds".to_string() } else { format!("fails by {uniform_gap:e}") }
        )),
    })
}

/// Constrained monotone condition on the grid.
pub fn check_constrained_monotone(model: &Model, carriers: &CarrierTables, tol: f64) -> Result<Verdict> {
    let horizon = model.horizon();
    let mut v = Verdict::new("constrained_monotone", tol);
    for nd in model.tree.nodes() {
        let k = nd.period;
        for i in nd.present_agents() {
            let menu = nd.menu(i).unwrap();
            let m = model.game.grid(i, k).len();
            for sp in 0..m {
                let frozen = menu.state_action[sp];
                for s in 0..m {
                    if s == sp {
                        continue;
                    }
                    let mut lhs = f64::NEG_INFINITY;
                    let mut rhs = f64::NEG_INFINITY;
                    for l in k..=horizon {
                        lhs = lhs.max(carriers.obedient_integral(model, OBEDIENT, i, nd.id, sp, s, l)?);
                        rhs = rhs.max(carriers.frozen_integral(model, OBEDIENT, i, nd.id, frozen, sp, s, l)?);
                    }
                    v.observe((rhs - lhs).max(0.0), || {
                        Witness::at(i, k, nd.id, s, format!("frozen integral {rhs:e} beats {lhs:e}")).with_deviation(sp)
                    });
                }
            }
        }
    }
    Ok(v.finish())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeHorizon {
    /// Planned quit horizon of the best response.
    Planned,
    /// L = T.
    Terminal,
    /// Maximizing L of the carrier.
    #[default]
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub verdict: Verdict,
    pub bound: f64,
    /// Cells left out because the maximizer changes next to them.
    pub excluded: Vec<(usize, NodeId, usize)>,
}

/// `∂V/∂s` by finite differences against `q` at the chosen horizon.
pub fn check_envelope(
    model: &Model,
    mech: &Mechanism,
    values: &ValueTables,
    carriers: &CarrierTables,
    horizon_rule: EnvelopeHorizon,
    lipschitz: f64,
) -> Result<EnvelopeReport> {
    let mut bound: f64 = 0.0;
    let mut excluded = Vec::new();
    let mut worst_dev: Vec<(f64, Witness)> = Vec::new();
    let mut checked = 0;
    for nd in model.tree.nodes() {
        let k = nd.period;
        for i in nd.present_agents() {
            let grid = model.game.grid(i, k);
            let m = grid.len();
            if m < 2 {
                continue;
            }
            let menu = nd.menu(i).unwrap();
            let cell = carriers.cell(OBEDIENT, nd.id, i).unwrap();
            let mut v = Vec::with_capacity(m);
            let mut truthful = Vec::with_capacity(m);
            let mut l_star = Vec::with_capacity(m);
            for s in 0..m {
                let br = values.best_response(model, mech, i, nd.id, s, &Conjecture::Obedient, Continuation::OneShot)?;
                let best = br.stay_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !best.is_finite() {
                    return Err(Error::Solver(format!("non-finite value at agent {i}, node {}, state {s}", nd.id)));
                }
                v.push(best);
                truthful.push(br.action == menu.state_action[s]);
                l_star.push(match horizon_rule {
                    EnvelopeHorizon::Planned => br.planned_l,
                    EnvelopeHorizon::Terminal => model.horizon(),
                    EnvelopeHorizon::Argmax => cell.arg_l[s],
                });
            }
            let step = (1..m).map(|s| grid.value(s) - grid.value(s - 1)).fold(0.0, f64::max);
            let b = 5.0 * step * lipschitz;
            bound = bound.max(b);
            for s in 0..m {
                let (lo, hi) = (s.saturating_sub(1), (s + 1).min(m - 1));
                if (lo..=hi).any(|x| !truthful[x] || l_star[x] != l_star[s]) {
                    excluded.push((i, nd.id, s));
                    continue;
                }
                let fd = (v[hi] - v[lo]) / (grid.value(hi) - grid.value(lo));
                let q = cell.q[l_star[s] - k][s];
                let dev = (fd - q).abs();
                checked += 1;
                let excess = dev - b;
                if excess > 0.0 {
                    worst_dev.push((
                        excess,
                        Witness::at(i, k, nd.id, s, format!("finite difference {fd} against q = {q}")),
                    ));
                }
            }
        }
    }
    let mut verdict = Verdict::new("envelope", 0.0);
    verdict.checked = checked;
    if let Some((e, w)) = worst_dev.into_iter().max_by(|a, b| a.0.total_cmp(&b.0)) {
        verdict.worst = e;
        verdict.witness = Some(w);
    }
    let verdict = verdict
        .finish()
        .with_note(format!("bound 5 × grid step × Lipschitz ({lipschitz}); {} kink cells excluded", excluded.len()));
    Ok(EnvelopeReport { verdict, bound, excluded })
}

/// Maximum-sensitive obedience: the derivative of the upper envelope of
/// the truthful prospects equals the largest prospect derivative.
pub fn check_mso(model: &Model, mech: &Mechanism, values: &ValueTables, tol: f64) -> Result<Verdict> {
    let horizon = model.horizon();
    let mut v = Verdict::new("mso", tol);
    for nd in model.tree.nodes() {
        let k = nd.period;
        for i in nd.present_agents() {
            let grid = model.game.grid(i, k);
            let m = grid.len();
            if m < 2 {
                continue;
            }
            let menu = nd.menu(i).unwrap();
            // g[L-k][s]: truthful prospects
            let mut g = vec![vec![0.0; m]; horizon - k + 1];
            for s in 0..m {
                for (row, l) in (k..=horizon).enumerate() {
                    g[row][s] =
                        values.prospect(model, mech, i, nd.id, menu.state_action[s], s, l, &Conjecture::Obedient)?;
                }
            }
            let env: Vec<f64> = (0..m).map(|s| g.iter().map(|r| r[s]).fold(f64::NEG_INFINITY, f64::max)).collect();
            for s in 0..m {
                let (lo, hi) = (s.saturating_sub(1), (s + 1).min(m - 1));
                let dx = grid.value(hi) - grid.value(lo);
                let d_env = (env[hi] - env[lo]) / dx;
                let d_max = g.iter().map(|r| (r[hi] - r[lo]) / dx).fold(f64::NEG_INFINITY, f64::max);
                let r = (d_env - d_max).abs();
                v.observe(r, || Witness::at(i, k, nd.id, s, format!("envelope slope {d_env} against {d_max}")));
            }
        }
    }
    Ok(v.finish())
}

/// Closed-form φ levels against the indifference solver.
pub fn check_phi_uniqueness(
    model: &Model,
    synth: &SynthesisOutput,
    transforms: &Transforms,
    tol: f64,
) -> Result<Verdict> {
    let points = |agent: usize, node: NodeId| -> Vec<usize> {
        match model.variant {
            Variant::Ir => vec![0],
            _ => transforms.cell(OBEDIENT, node, agent).map(|c| c.d_up.clone()).unwrap_or_default(),
        }
    };
    if model.variant == Variant::Knowledgeable {
        return Ok(Verdict::flag("phi_uniqueness", true, "not evaluated for the knowledgeable variant"));
    }
    let solved = solve_indifference(model, &synth.mechanism(), &points, tol * 1e-3)?;
    let mut v = Verdict::new("phi_uniqueness", tol);
    for c in &solved {
        let closed = &synth.levels[c.node][c.agent];
        for (b, &(p, level)) in c.levels.iter().enumerate() {
            let r = (closed[b] - level).abs();
            v.observe(r, || Witness::at(c.agent, c.period, c.node, p, format!("closed form {} against solved {level}", closed[b])));
        }
    }
    Ok(v.finish())
}
