//! Brute-force reference evaluation for small instances. Menus are
//! recomputed from the task policy, beliefs about other agents come from
//! enumerating their state paths, and expectations enumerate the joint
//! future of every agent without any table or memo.

use serde::{Deserialize, Serialize};

use crate::carrier::CarrierTables;
use crate::equilibrium::{resolve_quit, Continuation, Conjecture, ValueTables, TIE_TOL};
use crate::error::Result;
use crate::mechanism::{action_menu, Mechanism, Menu};
use crate::model::{Record, StepContext};
use crate::synthesis::OBEDIENT;
use crate::tree::{Model, NodeId};
use crate::verify::{Verdict, Witness};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Stop {
    /// Stay through period L, then receive φ at L+1.
    Through(usize),
    /// Follow the own quit plan after the first period.
    Plan,
}

pub struct Oracle<'a> {
    model: &'a Model,
    mech: &'a Mechanism,
}

impl<'a> Oracle<'a> {
    pub fn new(model: &'a Model, mech: &'a Mechanism) -> Self {
        Oracle { model, mech }
    }

    fn menu(&self, agent: usize, period: usize, history: &[Record]) -> Menu {
        action_menu(&self.model.game, agent, period, history, &self.model.task).expect("menu of a valid history")
    }

    /// Distribution of `agent`'s current state at `node` given the public
    /// history and, with `stay`, having stayed under the quit plan so far.
    /// `None` when the history has probability zero.
    pub fn posterior(&self, node: NodeId, agent: usize, stay: bool) -> Option<Vec<f64>> {
        let model = self.model;
        let nd = model.tree.node(node);
        let game = &model.game;
        let mut paths: Vec<(Vec<usize>, f64)> =
            game.initial(agent).iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(s, &p)| (vec![s], p)).collect();
        for k in 1..nd.period {
            let rec = &nd.history[k - 1];
            let a = rec.actions[agent]?;
            let menu = self.menu(agent, k, &nd.history[..k - 1]);
            let ctx = StepContext { agent, period: k, history: &nd.history[..k] };
            let grid = game.grid(agent, k);
            let mut next = Vec::new();
            for (path, p) in paths {
                let s = *path.last().unwrap();
                if menu.state_action[s] != a || (stay && model.plan.quits(agent, k, s)) {
                    continue;
                }
                for mv in game.moves(&ctx, grid.value(s), false).expect("moves") {
                    let mut np = path.clone();
                    np.push(mv.next);
                    next.push((np, p * mv.prob));
                }
            }
            paths = next;
        }
        let total: f64 = paths.iter().map(|p| p.1).sum();
        if total <= 0.0 {
            return None;
        }
        let mut out = vec![0.0; game.grid(agent, nd.period).len()];
        for (path, p) in paths {
            out[*path.last().unwrap()] += p / total;
        }
        Some(out)
    }

    /// Joint draws of the other agents' current states.
    fn others(&self, node: NodeId, agent: usize) -> Option<Vec<(Vec<Option<usize>>, f64)>> {
        let nd = self.model.tree.node(node);
        let mut out = vec![(vec![None; self.model.agents()], 1.0)];
        for j in nd.present_agents().filter(|&j| j != agent) {
            let post = self.posterior(node, j, true)?;
            let mut next = Vec::new();
            for (states, p) in &out {
                for (s, &q) in post.iter().enumerate() {
                    if q > 0.0 {
                        let mut v = states.clone();
                        v[j] = Some(s);
                        next.push((v, p * q));
                    }
                }
            }
            out = next;
        }
        Some(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn future(
        &self,
        agent: usize,
        k: usize,
        start: usize,
        history: &[Record],
        states: &[Option<usize>],
        first: Option<usize>,
        stop: Stop,
    ) -> f64 {
        let model = self.model;
        let horizon = model.horizon();
        if k == horizon + 1 {
            return 0.0;
        }
        let path: Vec<Vec<Option<usize>>> = history.iter().map(|r| r.actions.clone()).collect();
        let node = model.tree.find(&path).expect("tree holds every history");
        let own = states[agent].unwrap();
        if k > start {
            let leave = match stop {
                Stop::Through(l) => k == l + 1,
                Stop::Plan => model.plan.quits(agent, k, own),
            };
            if leave {
                return self.mech.off_value(agent, k, Some(node), own);
            }
        }
        let n = model.agents();
        let mut actions = vec![None; n];
        let mut staying = states.to_vec();
        for j in 0..n {
            let Some(s) = states[j] else { continue };
            if j == agent {
                actions[j] = Some(first.unwrap_or_else(|| self.menu(j, k, history).state_action[s]));
            } else if model.plan.quits(j, k, s) {
                staying[j] = None;
            } else {
                actions[j] = Some(self.menu(j, k, history).state_action[s]);
            }
        }
        let values: Vec<Option<f64>> = (0..n)
            .map(|j| actions[j].map(|a| self.menu(j, k, history).actions[a]))
            .collect();
        let s_val = model.game.grid(agent, k).value(own);
        let z = model.game.reward(agent, k, s_val, &values).expect("reward")
            + self.mech.coupling_value(model, agent, node, &actions).expect("coupling");
        if k == horizon {
            return z;
        }
        let mut next_history = history.to_vec();
        next_history.push(Record { actions: actions.clone(), values });
        // joint transitions of every agent still playing
        let mut joint: Vec<(Vec<Option<usize>>, f64)> = vec![(vec![None; n], 1.0)];
        for j in (0..n).filter(|&j| actions[j].is_some()) {
            let s = staying[j].unwrap();
            let ctx = StepContext { agent: j, period: k, history: &next_history };
            let moves = model.game.moves(&ctx, model.game.grid(j, k).value(s), false).expect("moves");
            let mut next = Vec::with_capacity(joint.len() * moves.len());
            for (st, p) in &joint {
                for mv in &moves {
                    let mut v = st.clone();
                    v[j] = Some(mv.next);
                    next.push((v, p * mv.prob));
                }
            }
            joint = next;
        }
        let mut acc = 0.0;
        for (st, p) in joint {
            acc += p * self.future(agent, k + 1, start, &next_history, &st, None, stop);
        }
        z + acc
    }

    fn expect(&self, agent: usize, node: NodeId, action: usize, state: usize, stop: Stop) -> Option<f64> {
        let nd = self.model.tree.node(node);
        let mut acc = 0.0;
        for (mut states, p) in self.others(node, agent)? {
            states[agent] = Some(state);
            acc += p * self.future(agent, nd.period, nd.period, &nd.history, &states, Some(action), stop);
        }
        Some(acc)
    }

    pub fn prospect(&self, agent: usize, node: NodeId, action: usize, state: usize, l: usize) -> Option<f64> {
        self.expect(agent, node, action, state, Stop::Through(l))
    }

    pub fn stay_value(&self, agent: usize, node: NodeId, action: usize, state: usize) -> Option<f64> {
        self.expect(agent, node, action, state, Stop::Plan)
    }

    pub fn on_rent(&self, agent: usize, node: NodeId, action: usize, state: usize) -> Option<f64> {
        let k = self.model.tree.node(node).period;
        Some(self.stay_value(agent, node, action, state)? - self.mech.off_value(agent, k, Some(node), state))
    }

    /// Obedient payoff-to-go.
    pub fn lambda(&self, agent: usize, node: NodeId, state: usize) -> Option<f64> {
        let nd = self.model.tree.node(node);
        if self.model.plan.quits(agent, nd.period, state) {
            return Some(self.mech.off_value(agent, nd.period, Some(node), state));
        }
        let a = self.menu(agent, nd.period, &nd.history).state_action[state];
        self.stay_value(agent, node, a, state)
    }

    /// Best value over quitting and every menu action, and the quit choice.
    pub fn best_response(&self, agent: usize, node: NodeId, state: usize) -> Option<(f64, bool)> {
        let nd = self.model.tree.node(node);
        let menu = self.menu(agent, nd.period, &nd.history);
        let mut best = f64::NEG_INFINITY;
        for a in 0..menu.len() {
            best = best.max(self.stay_value(agent, node, a, state)?);
        }
        let phi = self.mech.off_value(agent, nd.period, Some(node), state);
        let quit = resolve_quit(best - phi, self.model.directive(), self.model.plan.quits(agent, nd.period, state));
        Some((best.max(phi), quit))
    }

    /// Impulse response by enumerating own paths, with the first action
    /// frozen at `action` and others obedient.
    pub fn impulse_response(&self, agent: usize, node: NodeId, action: usize, state: usize, l: usize) -> Option<f64> {
        let nd = self.model.tree.node(node);
        let mut acc = 0.0;
        for (mut states, p) in self.others(node, agent)? {
            states[agent] = Some(state);
            acc += p * self.q_rec(agent, nd.period, l, &nd.history, &states, Some(action), 1.0);
        }
        Some(acc)
    }

    #[allow(clippy::too_many_arguments)]
    fn q_rec(
        &self,
        agent: usize,
        k: usize,
        l: usize,
        history: &[Record],
        states: &[Option<usize>],
        first: Option<usize>,
        prod: f64,
    ) -> f64 {
        let model = self.model;
        let n = model.agents();
        let mut actions = vec![None; n];
        for j in 0..n {
            let Some(s) = states[j] else { continue };
            if j == agent {
                actions[j] = Some(first.unwrap_or_else(|| self.menu(j, k, history).state_action[s]));
            } else if !model.plan.quits(j, k, s) {
                actions[j] = Some(self.menu(j, k, history).state_action[s]);
            }
        }
        let values: Vec<Option<f64>> = (0..n)
            .map(|j| actions[j].map(|a| self.menu(j, k, history).actions[a]))
            .collect();
        let own = states[agent].unwrap();
        let s_val = model.game.grid(agent, k).value(own);
        let du = model.game.reward_derivative(agent, k, s_val, &values).expect("reward derivative");
        let here = prod * du;
        if k == l {
            return here;
        }
        let mut next_history = history.to_vec();
        next_history.push(Record { actions: actions.clone(), values });
        let mut joint: Vec<(Vec<Option<usize>>, f64, f64)> = vec![(vec![None; n], 1.0, prod)];
        for j in (0..n).filter(|&j| actions[j].is_some()) {
            let s = states[j].unwrap();
            let ctx = StepContext { agent: j, period: k, history: &next_history };
            let moves = model.game.moves(&ctx, model.game.grid(j, k).value(s), j == agent).expect("moves");
            let mut next = Vec::new();
            for (st, p, d) in &joint {
                for mv in &moves {
                    let mut v = st.clone();
                    v[j] = Some(mv.next);
                    next.push((v, p * mv.prob, if j == agent { d * mv.ds } else { *d }));
                }
            }
            joint = next;
        }
        let mut acc = here;
        for (st, p, d) in joint {
            acc += p * self.q_rec(agent, k + 1, l, &next_history, &st, None, d);
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub verdict: Verdict,
    pub nodes_checked: usize,
    pub nodes_skipped: usize,
    /// Worst absolute difference per quantity.
    pub prospect: f64,
    pub on_rent: f64,
    pub lambda: f64,
    pub best_response: f64,
    pub impulse_response: f64,
}

/// Compares table values with the oracle on every reachable node, state,
/// menu action and horizon.
pub fn compare(
    model: &Model,
    mech: &Mechanism,
    values: &ValueTables,
    carriers: &CarrierTables,
    tol: f64,
) -> Result<OracleReport> {
    let oracle = Oracle::new(model, mech);
    let conj = Conjecture::Obedient;
    let cont = Continuation::OneShot;
    let mut v = Verdict::new("oracle_equivalence", tol);
    let mut worst = [0.0f64; 5];
    let mut checked = 0;
    let mut skipped = 0;
    for nd in model.tree.nodes() {
        let k = nd.period;
        for i in nd.present_agents() {
            if oracle.others(nd.id, i).is_none() {
                skipped += 1;
                continue;
            }
            checked += 1;
            let menu = nd.menu(i).unwrap();
            for s in 0..model.game.grid(i, k).len() {
                let mut note = |slot: usize, table: f64, reference: f64, what: &str, dev: Option<usize>| {
                    let d = (table - reference).abs();
                    worst[slot] = worst[slot].max(d);
                    v.observe(d, || {
                        let w = Witness::at(i, k, nd.id, s, format!("{what}: table {table}, oracle {reference}"));
                        match dev {
                            Some(a) => w.with_deviation(a),
                            None => w,
                        }
                    });
                };
                for a in 0..menu.len() {
                    for l in k..=model.horizon() {
                        let t = values.prospect(model, mech, i, nd.id, a, s, l, &conj)?;
                        note(0, t, oracle.prospect(i, nd.id, a, s, l).unwrap(), "prospect", Some(a));
                        let t = carriers.impulse_response(model, OBEDIENT, i, nd.id, a, s, l)?;
                        note(4, t, oracle.impulse_response(i, nd.id, a, s, l).unwrap(), "impulse response", Some(a));
                    }
                    let t = values.on_rent(model, mech, i, nd.id, a, s, &conj, cont)?;
                    note(1, t, oracle.on_rent(i, nd.id, a, s).unwrap(), "on-rent", Some(a));
                }
                let t = values.lambda_obedient(model, mech, i, nd.id, s, cont)?;
                note(2, t, oracle.lambda(i, nd.id, s).unwrap(), "payoff-to-go", None);
                let br = values.best_response(model, mech, i, nd.id, s, &conj, cont)?;
                let (best, quit) = oracle.best_response(i, nd.id, s).unwrap();
                let chosen = if br.quit { br.off_value } else { br.stay_values[br.action] };
                note(3, chosen, best, "best-response value", Some(br.action));
                if (br.on_rent).abs() > TIE_TOL {
                    note(3, br.quit as u8 as f64, quit as u8 as f64, "quit decision", None);
                }
            }
        }
    }
    Ok(OracleReport {
        verdict: v.finish(),
        nodes_checked: checked,
        nodes_skipped: skipped,
        prospect: worst[0],
        on_rent: worst[1],
        lambda: worst[2],
        best_response: worst[3],
        impulse_response: worst[4],
    })
}
