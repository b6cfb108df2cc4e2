//! Agent-side engine: prospects, payoff-to-go, on-rents, best responses,
//! desired quit distributions, the quit-time fixed point and simulation.

use serde::{Deserialize, Serialize};

use crate::carrier::{path_rng, pick};
use crate::error::{Error, Result};
use crate::mechanism::{Directive, Mechanism};
use crate::par;
use crate::tree::{Branch, Model, NodeId, Opponents};

pub const TIE_TOL: f64 = 1e-9;

/// How the value of staying is continued after the current period.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Continuation {
    /// Stay now, then follow the own obedient quit plan state by state.
    #[default]
    OneShot,
    /// Commit today to a participation horizon L and take the best one.
    Planned,
}

/// Beliefs about other agents' quit behaviour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Conjecture {
    /// Others follow their obedient quit plan.
    Obedient,
    /// `plans[j][k-1]` is the probability that agent j quits in period k
    /// (index T is never).
    Plans(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueCell {
    pub period: usize,
    /// Obedient prospect, rows indexed by `L - period`.
    pub g: Vec<Vec<f64>>,
    /// Value of staying now and following the own quit plan afterwards.
    pub stay: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ValueTables {
    pub modes: Vec<Opponents>,
    /// `cells[node][mode][agent]`
    cells: Vec<Vec<Vec<Option<ValueCell>>>>,
}

#[derive(Clone, Debug, PartialEq)]
struct FirstStep {
    g: Vec<f64>,
    stay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestResponse {
    pub quit: bool,
    pub action: usize,
    /// Best participation horizon for the chosen action (planned reading).
    pub planned_l: usize,
    pub on_rent: f64,
    /// Stay value of each menu action.
    pub stay_values: Vec<f64>,
    pub off_value: f64,
}

fn z_value(model: &Model, mech: &Mechanism, agent: usize, node: NodeId, s: f64, b: &Branch) -> Result<f64> {
    let k = model.tree.node(node).period;
    Ok(model.game.reward(agent, k, s, &b.values)? + mech.coupling_value(model, agent, node, &b.actions)?)
}

/// Value after the own OM decision at `(child, state)` under the own plan.
fn continuation(model: &Model, mech: &Mechanism, next: &ValueCell, agent: usize, child: NodeId, state: usize) -> f64 {
    if model.plan.quits(agent, next.period, state) {
        mech.off_value(agent, next.period, Some(child), state)
    } else {
        next.stay[state]
    }
}

#[allow(clippy::too_many_arguments)]
fn first_step(
    model: &Model,
    mech: &Mechanism,
    cells: &[Vec<Vec<Option<ValueCell>>>],
    mode: usize,
    opp: &Opponents,
    agent: usize,
    node: NodeId,
    action: usize,
    state: usize,
) -> Result<FirstStep> {
    let k = model.tree.node(node).period;
    let horizon = model.horizon();
    let s = model.game.grid(agent, k).value(state);
    let rows = horizon - k + 1;
    let mut g = vec![0.0; rows];
    let mut stay = 0.0;
    for b in model.branches(agent, opp, node, action) {
        let z = z_value(model, mech, agent, node, s, &b)?;
        let mut g_next = vec![0.0; rows];
        let mut cont = 0.0;
        if k < horizon {
            let child = b.child.expect("child exists before the horizon");
            let next = cells[child][mode][agent].as_ref().expect("child value cell built");
            for mv in model.moves(agent, child, state, false) {
                g_next[0] += mv.prob * mech.off_value(agent, k + 1, Some(child), mv.next);
                for (row, slot) in g_next.iter_mut().enumerate().skip(1) {
                    *slot += mv.prob * next.g[row - 1][mv.next];
                }
                cont += mv.prob * continuation(model, mech, next, agent, child, mv.next);
            }
        }
        for row in 0..rows {
            g[row] += b.prob * (z + g_next[row]);
        }
        stay += b.prob * (z + cont);
    }
    Ok(FirstStep { g, stay })
}

impl ValueTables {
    pub fn build(model: &Model, mech: &Mechanism, modes: Vec<Opponents>) -> Result<Self> {
        let mut cells: Vec<Vec<Vec<Option<ValueCell>>>> =
            vec![vec![vec![None; model.agents()]; modes.len()]; model.tree.len()];
        for t in (1..=model.horizon()).rev() {
            let built: Vec<Result<Vec<Vec<Option<ValueCell>>>>> = model.map_layer(t, |node| {
                let nd = model.tree.node(node);
                let mut per_mode = Vec::with_capacity(modes.len());
                for (m, opp) in modes.iter().enumerate() {
                    let mut per_agent = vec![None; model.agents()];
                    for i in nd.present_agents() {
                        let menu = nd.menu(i).unwrap();
                        let len = model.game.grid(i, t).len();
                        let mut g = vec![vec![0.0; len]; model.horizon() - t + 1];
                        let mut stay = vec![0.0; len];
                        for s in 0..len {
                            let fs = first_step(model, mech, &cells, m, opp, i, node, menu.state_action[s], s)?;
                            for (row, v) in fs.g.into_iter().enumerate() {
                                g[row][s] = v;
                            }
                            stay[s] = fs.stay;
                        }
                        per_agent[i] = Some(ValueCell { period: t, g, stay });
                    }
                    per_mode.push(per_agent);
                }
                Ok(per_mode)
            });
            for (&node, res) in model.tree.layer(t).iter().zip(built) {
                cells[node] = res?;
            }
        }
        Ok(ValueTables { modes, cells })
    }

    pub fn obedient(model: &Model, mech: &Mechanism) -> Result<Self> {
        Self::build(model, mech, vec![Opponents::Obedient])
    }

    /// Obedient mode plus every deterministic quit-plan mode.
    pub fn with_plans(model: &Model, mech: &Mechanism) -> Result<Self> {
        let mut modes = vec![Opponents::Obedient];
        modes.extend(model.all_plans());
        Self::build(model, mech, modes)
    }

    pub fn cell(&self, mode: usize, node: NodeId, agent: usize) -> Option<&ValueCell> {
        self.cells[node][mode][agent].as_ref()
    }

    fn mixture(&self, model: &Model, agent: usize, conj: &Conjecture) -> Result<Vec<(usize, f64)>> {
        match conj {
            Conjecture::Obedient => {
                let m = self
                    .modes
                    .iter()
                    .position(|o| *o == Opponents::Obedient)
                    .ok_or_else(|| Error::Scenario("value tables lack the obedient mode".into()))?;
                Ok(vec![(m, 1.0)])
            }
            Conjecture::Plans(x) => {
                let never = model.horizon() + 1;
                let mut out = Vec::new();
                for (m, o) in self.modes.iter().enumerate() {
                    let Opponents::Plan(l) = o else { continue };
                    if l[agent] != never {
                        continue;
                    }
                    let mut w = 1.0;
                    for (j, &lj) in l.iter().enumerate() {
                        if j != agent {
                            w *= x[j][lj - 1];
                        }
                    }
                    if w > 0.0 {
                        out.push((m, w));
                    }
                }
                if out.is_empty() {
                    return Err(Error::Scenario("value tables lack plan modes for this conjecture".into()));
                }
                Ok(out)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        model: &Model,
        mech: &Mechanism,
        agent: usize,
        node: NodeId,
        action: usize,
        state: usize,
        conj: &Conjecture,
    ) -> Result<FirstStep> {
        let nd = model.tree.node(node);
        let menu = nd.menu(agent).ok_or(Error::NotParticipating { agent })?;
        if action >= menu.len() {
            return Err(Error::NotInMenu { agent, index: action, size: menu.len() });
        }
        let mut acc: Option<FirstStep> = None;
        for (m, w) in self.mixture(model, agent, conj)? {
            let fs = first_step(model, mech, &self.cells, m, &self.modes[m], agent, node, action, state)?;
            match acc.as_mut() {
                None => {
                    acc = Some(FirstStep { g: fs.g.iter().map(|v| w * v).collect(), stay: w * fs.stay });
                }
                Some(a) => {
                    for (x, v) in a.g.iter_mut().zip(&fs.g) {
                        *x += w * v;
                    }
                    a.stay += w * fs.stay;
                }
            }
        }
        Ok(acc.expect("mixture is nonempty"))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn prospect(
        &self,
        model: &Model,
        mech: &Mechanism,
        agent: usize,
        node: NodeId,
        action: usize,
        state: usize,
        l: usize,
        conj: &Conjecture,
    ) -> Result<f64> {
        let k = model.tree.node(node).period;
        if l < k || l > model.horizon() {
            return Err(Error::Period { period: l, horizon: model.horizon() });
        }
        Ok(self.step(model, mech, agent, node, action, state, conj)?.g[l - k])
    }

    /// `(max_L G, argmax L)` with ties to the largest L.
    #[allow(clippy::too_many_arguments)]
    pub fn max_prospect(
        &self,
        model: &Model,
        mech: &Mechanism,
        agent: usize,
        node: NodeId,
        action: usize,
        state: usize,
        conj: &Conjecture,
    ) -> Result<(f64, usize)> {
        let k = model.tree.node(node).period;
        let fs = self.step(model, mech, agent, node, action, state, conj)?;
        Ok(argmax_l(&fs.g, k))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn stay_value(
        &self,
        model: &Model,
        mech: &Mechanism,
        agent: usize,
        node: NodeId,
        action: usize,
        state: usize,
        conj: &Conjecture,
        cont: Continuation,
    ) -> Result<f64> {
        let fs = self.step(model, mech, agent, node, action, state, conj)?;
        Ok(match cont {
            Continuation::OneShot => fs.stay,
            Continuation::Planned => argmax_l(&fs.g, model.tree.node(node).period).0,
        })
    }

    pub fn off_value(&self, model: &Model, mech: &Mechanism, agent: usize, node: NodeId, state: usize) -> f64 {
        mech.off_value(agent, model.tree.node(node).period, Some(node), state)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn on_rent(
        &self,
        model: &Model,
        mech: &Mechanism,
        agent: usize,
        node: NodeId,
        action: usize,
        state: usize,
        conj: &Conjecture,
        cont: Continuation,
    ) -> Result<f64> {
        Ok(self.stay_value(model, mech, agent, node, action, state, conj, cont)?
            - self.off_value(model, mech, agent, node, state))
    }

    /// Payoff-to-go of a given OM decision and first action.
    #[allow(clippy::too_many_arguments)]
    pub fn payoff_to_go(
        &self,
        model: &Model,
        mech: &Mechanism,
        agent: usize,
        node: NodeId,
        quit: bool,
        action: usize,
        state: usize,
        conj: &Conjecture,
        cont: Continuation,
    ) -> Result<f64> {
        if quit {
            Ok(self.off_value(model, mech, agent, node, state))
        } else {
            self.stay_value(model, mech, agent, node, action, state, conj, cont)
        }
    }

    /// Obedient payoff-to-go: own plan today, obedient action when staying.
    pub fn lambda_obedient(&self, model: &Model, mech: &Mechanism, agent: usize, node: NodeId, state: usize, cont: Continuation) -> Result<f64> {
        let k = model.tree.node(node).period;
        if model.plan.quits(agent, k, state) {
            return Ok(self.off_value(model, mech, agent, node, state));
        }
        let a = model.tree.node(node).menu(agent).ok_or(Error::NotParticipating { agent })?.state_action[state];
        self.stay_value(model, mech, agent, node, a, state, &Conjecture::Obedient, cont)
    }

    /// `max(φ, best stay value)` over menu actions.
    #[allow(clippy::too_many_arguments)]
    pub fn lambda(
        &self,
        model: &Model,
        mech: &Mechanism,
        agent: usize,
        node: NodeId,
        state: usize,
        conj: &Conjecture,
        cont: Continuation,
    ) -> Result<f64> {
        let br = self.best_response(model, mech, agent, node, state, conj, cont)?;
        Ok(br.off_value.max(br.stay_values[br.action]))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn best_response(
        &self,
        model: &Model,
        mech: &Mechanism,
        agent: usize,
        node: NodeId,
        state: usize,
        conj: &Conjecture,
        cont: Continuation,
    ) -> Result<BestResponse> {
        let nd = model.tree.node(node);
        let k = nd.period;
        let menu = nd.menu(agent).ok_or(Error::NotParticipating { agent })?;
        if menu.is_empty() {
            return Err(Error::NotInMenu { agent, index: 0, size: 0 });
        }
        let mut stay_values = Vec::with_capacity(menu.len());
        let mut planned = Vec::with_capacity(menu.len());
        for a in 0..menu.len() {
            let fs = self.step(model, mech, agent, node, a, state, conj)?;
            let (gmax, l) = argmax_l(&fs.g, k);
            planned.push(l);
            stay_values.push(match cont {
                Continuation::OneShot => fs.stay,
                Continuation::Planned => gmax,
            });
        }
        let obedient = menu.state_action[state];
        let best = stay_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let action = if stay_values[obedient] >= best - TIE_TOL {
            obedient
        } else {
            stay_values.iter().position(|&v| v == best).unwrap()
        };
        let off_value = self.off_value(model, mech, agent, node, state);
        let on_rent = stay_values[action] - off_value;
        let quit = resolve_quit(on_rent, model.directive(), model.plan.quits(agent, k, state));
        Ok(BestResponse { quit, action, planned_l: planned[action], on_rent, stay_values, off_value })
    }
}

pub(crate) fn resolve_quit(on_rent: f64, directive: Directive, in_off: bool) -> bool {
    if on_rent > TIE_TOL {
        false
    } else if on_rent < -TIE_TOL {
        true
    } else {
        match directive {
            Directive::Stay => false,
            Directive::QuitOnOffRegion => in_off,
        }
    }
}

fn argmax_l(g: &[f64], k: usize) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, k);
    for (row, &v) in g.iter().enumerate() {
        if v >= best.0 {
            best = (v, k + row);
        }
    }
    best
}

/// First-hit quit distribution `χ[agent][k-1]`, k = 1..=T+1, from `node`
/// under the obedient process where everybody keeps participating.
/// Entries before the node's period are zero; absent agents get `None`.
pub fn chi_from_off_region(model: &Model, node: NodeId) -> Vec<Option<Vec<f64>>> {
    let horizon = model.horizon();
    let never = Opponents::never(&model.game);
    let nd = model.tree.node(node);
    (0..model.agents())
        .map(|i| {
            if !nd.present[i] {
                return None;
            }
            let mut chi = vec![0.0; horizon + 1];
            let belief = model.beliefs.stay(node, i).unwrap();
            let mut alive: Vec<(NodeId, usize, f64)> =
                belief.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(s, &p)| (node, s, p)).collect();
            for k in nd.period..=horizon {
                let mut next = Vec::new();
                for &(cur, s, p) in &alive {
                    if model.plan.quits(i, k, s) {
                        chi[k - 1] += p;
                        continue;
                    }
                    if k == horizon {
                        chi[horizon] += p;
                        continue;
                    }
                    let a = model.tree.node(cur).menu(i).unwrap().state_action[s];
                    for b in model.branches(i, &never, cur, a) {
                        let child = b.child.expect("child exists before the horizon");
                        for mv in model.moves(i, child, s, false) {
                            next.push((child, mv.next, p * b.prob * mv.prob));
                        }
                    }
                }
                next.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
                let mut merged: Vec<(NodeId, usize, f64)> = Vec::with_capacity(next.len());
                for e in next {
                    match merged.last_mut() {
                        Some(last) if last.0 == e.0 && last.1 == e.1 => last.2 += e.2,
                        _ => merged.push(e),
                    }
                }
                alive = merged;
            }
            Some(chi)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub node: NodeId,
    pub chi: Vec<Option<Vec<f64>>>,
    pub mu: Vec<Option<Vec<f64>>>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residuals of the first iterations (at most 64 entries).
    pub history: Vec<f64>,
    /// `μ` equals `χ` on every period.
    pub matches_chi: bool,
    /// `μ` equals `χ` on the quit-now mass only.
    pub matches_chi_now: bool,
}

pub const FP_DAMPING: f64 = 0.5;
pub const FP_TOL: f64 = 1e-8;
pub const FP_MAX_ITER: usize = 10_000;

/// Distribution of the planned quit time of `agent` at `node` given
/// conjectures about the others.
pub fn planned_quit_distribution(
    model: &Model,
    mech: &Mechanism,
    values: &ValueTables,
    agent: usize,
    node: NodeId,
    conj: &Conjecture,
) -> Result<Vec<f64>> {
    let nd = model.tree.node(node);
    let k = nd.period;
    let horizon = model.horizon();
    let menu = nd.menu(agent).ok_or(Error::NotParticipating { agent })?;
    let belief = model.beliefs.stay(node, agent).unwrap();
    let mut out = vec![0.0; horizon + 1];
    for (s, &p) in belief.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        // best prospect for each participation horizon, over menu actions
        let mut best_by_l = vec![f64::NEG_INFINITY; horizon - k + 1];
        for a in 0..menu.len() {
            let fs = values.step(model, mech, agent, node, a, s, conj)?;
            for (row, v) in fs.g.iter().enumerate() {
                best_by_l[row] = best_by_l[row].max(*v);
            }
        }
        let (future, l) = argmax_l(&best_by_l, k);
        let phi = values.off_value(model, mech, agent, node, s);
        let quit_now = resolve_quit(future - phi, model.directive(), model.plan.quits(agent, k, s));
        let tau = if quit_now { k } else { l + 1 };
        out[tau - 1] += p;
    }
    Ok(out)
}

pub fn om_fixed_point(model: &Model, mech: &Mechanism, values: &ValueTables, node: NodeId) -> Result<FixedPointReport> {
    let chi = chi_from_off_region(model, node);
    let n = model.agents();
    let present: Vec<usize> = model.tree.node(node).present_agents().collect();
    let mut mu = chi.clone();
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let full = |mu: &[Option<Vec<f64>>]| -> Vec<Vec<f64>> {
        // absent agents never act: all mass on "already gone"
        (0..n)
            .map(|j| mu[j].clone().unwrap_or_else(|| {
                let mut v = vec![0.0; model.horizon() + 1];
                v[0] = 1.0;
                v
            }))
            .collect()
    };
    if present.len() <= 1 {
        // no opponents to conjecture about
        let conj = Conjecture::Plans(full(&mu));
        for &i in &present {
            mu[i] = Some(planned_quit_distribution(model, mech, values, i, node, &conj)?);
        }
        residual = 0.0;
    } else {
        while iterations < FP_MAX_ITER {
            let conj = Conjecture::Plans(full(&mu));
            let mut xs = Vec::with_capacity(present.len());
            for &i in &present {
                xs.push(planned_quit_distribution(model, mech, values, i, node, &conj)?);
            }
            residual = 0.0;
            for (&i, x) in present.iter().zip(&xs) {
                let m = mu[i].as_ref().unwrap();
                for (a, b) in x.iter().zip(m) {
                    residual = residual.max((a - b).abs());
                }
            }
            if history.len() < 64 {
                history.push(residual);
            }
            if residual < FP_TOL {
                break;
            }
            for (&i, x) in present.iter().zip(xs) {
                let m = mu[i].as_mut().unwrap();
                for (a, b) in m.iter_mut().zip(x) {
                    *a = (1.0 - FP_DAMPING) * *a + FP_DAMPING * b;
                }
            }
            iterations += 1;
        }
    }
    let k = model.tree.node(node).period;
    let mut matches_chi = true;
    let mut matches_chi_now = true;
    for &i in &present {
        let (m, c) = (mu[i].as_ref().unwrap(), chi[i].as_ref().unwrap());
        if m.iter().zip(c).any(|(a, b)| (a - b).abs() > 1e-6) {
            matches_chi = false;
        }
        if (m[k - 1] - c[k - 1]).abs() > 1e-6 {
            matches_chi_now = false;
        }
    }
    Ok(FixedPointReport {
        node,
        chi,
        mu,
        residual,
        iterations,
        converged: residual < FP_TOL,
        history,
        matches_chi,
        matches_chi_now,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Obedient,
    BestResponse(Continuation),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutcome {
    pub paths: usize,
    pub seed: u64,
    /// `quit_counts[agent][k-1]` for k = 1..=T; index T counts never-quit.
    pub quit_counts: Vec<Vec<usize>>,
    pub quit_frequency: Vec<Vec<f64>>,
    /// `state_hist[agent][k-1][state]`: visits at the start of period k.
    pub state_hist: Vec<Vec<Vec<usize>>>,
    /// `action_hist[agent][k-1][menu index]`.
    pub action_hist: Vec<Vec<Vec<usize>>>,
    pub mean_payoff: Vec<f64>,
    pub payoff_std_err: Vec<f64>,
}

struct PathResult {
    quit_at: Vec<usize>,
    states: Vec<Vec<Option<usize>>>,
    actions: Vec<Vec<Option<usize>>>,
    payoff: Vec<f64>,
}

pub fn simulate_outcome(
    model: &Model,
    mech: &Mechanism,
    values: &ValueTables,
    strategy: Strategy,
    paths: usize,
    seed: u64,
) -> Result<SimulationOutcome> {
    let n = model.agents();
    let horizon = model.horizon();
    let results: Vec<Result<PathResult>> = par::map_range(model.exec, paths, |p| {
        let mut rng = path_rng(seed, p as u64);
        let mut states: Vec<usize> = (0..n).map(|i| pick(&mut rng, model.game.initial(i).iter().copied())).collect();
        let mut present = vec![true; n];
        let mut res = PathResult {
            quit_at: vec![horizon + 1; n],
            states: vec![vec![None; horizon]; n],
            actions: vec![vec![None; horizon]; n],
            payoff: vec![0.0; n],
        };
        let mut node = model.tree.root();
        for k in 1..=horizon {
            let mut actions = vec![None; n];
            for i in 0..n {
                if !present[i] {
                    continue;
                }
                let s = states[i];
                res.states[i][k - 1] = Some(s);
                let (quit, action) = match strategy {
                    Strategy::Obedient => {
                        (model.plan.quits(i, k, s), model.tree.node(node).menu(i).unwrap().state_action[s])
                    }
                    Strategy::BestResponse(cont) => {
                        let br = values.best_response(model, mech, i, node, s, &Conjecture::Obedient, cont)?;
                        (br.quit, br.action)
                    }
                };
                if quit {
                    res.quit_at[i] = k;
                    res.payoff[i] += mech.off_value(i, k, Some(node), s);
                    present[i] = false;
                } else {
                    actions[i] = Some(action);
                    res.actions[i][k - 1] = Some(action);
                }
            }
            if actions.iter().all(|a| a.is_none()) {
                break;
            }
            let vals = model.tree.action_values(node, &actions)?;
            for i in (0..n).filter(|&i| actions[i].is_some()) {
                let s = model.game.grid(i, k).value(states[i]);
                res.payoff[i] += model.game.reward(i, k, s, &vals)? + mech.coupling_value(model, i, node, &actions)?;
            }
            if k == horizon {
                break;
            }
            let child = model.tree.child(node, &actions).expect("tree covers every joint action");
            for i in (0..n).filter(|&i| actions[i].is_some()) {
                let moves = model.moves(i, child, states[i], false);
                states[i] = moves[pick(&mut rng, moves.iter().map(|m| m.prob))].next;
            }
            node = child;
        }
        Ok(res)
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut quit_counts = vec![vec![0; horizon + 1]; n];
    let mut state_hist: Vec<Vec<Vec<usize>>> =
        (0..n).map(|i| (1..=horizon).map(|t| vec![0; model.game.grid(i, t).len()]).collect()).collect();
    let max_menu = |i: usize, t: usize| {
        model.tree.layer(t).iter().filter_map(|&id| model.tree.node(id).menu(i).map(|m| m.len())).max().unwrap_or(0)
    };
    let mut action_hist: Vec<Vec<Vec<usize>>> =
        (0..n).map(|i| (1..=horizon).map(|t| vec![0; max_menu(i, t)]).collect()).collect();
    let mut sums = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for r in &results {
        for i in 0..n {
            quit_counts[i][r.quit_at[i] - 1] += 1;
            for t in 0..horizon {
                if let Some(s) = r.states[i][t] {
                    state_hist[i][t][s] += 1;
                }
                if let Some(a) = r.actions[i][t] {
                    action_hist[i][t][a] += 1;
                }
            }
            sums[i] += r.payoff[i];
            sq[i] += r.payoff[i] * r.payoff[i];
        }
    }
    let np = results.len().max(1) as f64;
    let mean_payoff: Vec<f64> = sums.iter().map(|s| s / np).collect();
    let payoff_std_err = (0..n)
        .map(|i| {
            let var = (sq[i] / np - mean_payoff[i].powi(2)).max(0.0);
            (var / np).sqrt()
        })
        .collect();
    let quit_frequency = quit_counts.iter().map(|row| row.iter().map(|&c| c as f64 / np).collect()).collect();
    Ok(SimulationOutcome {
        paths: results.len(),
        seed,
        quit_counts,
        quit_frequency,
        state_hist,
        action_hist,
        mean_payoff,
        payoff_std_err,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolvedCutoff {
    pub agent: usize,
    pub node: NodeId,
    pub period: usize,
    /// Projection point and solved level per sub-off-region.
    pub levels: Vec<(usize, f64)>,
    pub iterations: usize,
}

/// Solves for the off-switch level of each sub-off-region by bisection on
/// the level that makes the on-rent vanish at the region's projection
/// point. Only the coupling policy of `mech` is used; future off-switch
/// values come from the solver itself, layer by layer.
pub fn solve_indifference(
    model: &Model,
    mech: &Mechanism,
    points: &(dyn Fn(usize, NodeId) -> Vec<usize> + Sync),
    tol: f64,
) -> Result<Vec<SolvedCutoff>> {
    let n = model.agents();
    let horizon = model.horizon();
    // stay[node][agent][state], phi[node][agent][state]
    let mut stay: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; n]; model.tree.len()];
    let mut phi: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; n]; model.tree.len()];
    let mut out = Vec::new();
    for t in (1..=horizon).rev() {
        type LayerOut = Vec<(usize, Vec<f64>, Vec<f64>, SolvedCutoff)>;
        let layer: Vec<Result<LayerOut>> = model.map_layer(t, |node| {
            let nd = model.tree.node(node);
            let mut res = Vec::new();
            for i in nd.present_agents() {
                let menu = nd.menu(i).unwrap();
                let len = model.game.grid(i, t).len();
                let mut sv = vec![0.0; len];
                for (s, slot) in sv.iter_mut().enumerate() {
                    let v = model.game.grid(i, t).value(s);
                    let mut acc = 0.0;
                    for b in model.branches(i, &Opponents::Obedient, node, menu.state_action[s]) {
                        let z = z_value(model, mech, i, node, v, &b)?;
                        let mut cont = 0.0;
                        if t < horizon {
                            let child = b.child.unwrap();
                            let st = stay[child][i].as_ref().unwrap();
                            let ph = phi[child][i].as_ref().unwrap();
                            for mv in model.moves(i, child, s, false) {
                                let c = if model.plan.quits(i, t + 1, mv.next) { ph[mv.next] } else { st[mv.next] };
                                cont += mv.prob * c;
                            }
                        }
                        acc += b.prob * (z + cont);
                    }
                    *slot = acc;
                }
                let pts = points(i, node);
                let mut levels = Vec::with_capacity(pts.len());
                let mut iterations = 0;
                for &p in &pts {
                    // on-rent at the point as a function of the level c
                    let f = |c: f64| sv[p] - c;
                    let (mut lo, mut hi) = (sv[p] - 1.0, sv[p] + 1.0);
                    while f(lo) < 0.0 {
                        lo -= 2.0 * (hi - lo);
                    }
                    while f(hi) > 0.0 {
                        hi += 2.0 * (hi - lo);
                    }
                    while hi - lo > tol * 1e-3 && iterations < 10_000 {
                        let mid = 0.5 * (lo + hi);
                        if f(mid) > 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                        iterations += 1;
                    }
                    if hi - lo > tol {
                        return Err(Error::Solver(format!("no bracket convergence at agent {i}, node {node}")));
                    }
                    levels.push((p, 0.5 * (lo + hi)));
                }
                let ph = assign_levels(model, i, t, len, &levels);
                res.push((i, sv, ph, SolvedCutoff { agent: i, node, period: t, levels, iterations }));
            }
            Ok(res)
        });
        for (&node, r) in model.tree.layer(t).iter().zip(layer) {
            for (i, sv, ph, solved) in r? {
                stay[node][i] = Some(sv);
                phi[node][i] = Some(ph);
                out.push(solved);
            }
        }
    }
    out.sort_by_key(|c| (c.node, c.agent));
    Ok(out)
}

/// Per-state off-switch values from per-region levels: states in a
/// sub-off-region take its level, every other state takes the maximum.
pub(crate) fn assign_levels(model: &Model, agent: usize, period: usize, len: usize, levels: &[(usize, f64)]) -> Vec<f64> {
    let top = levels.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![top; len];
    for (&(l, r), &(_, v)) in model.boundary.get(agent, period).iter().zip(levels) {
        out[l..=r].fill(v);
    }
    out
}
