//! Projection operators, up/jump transforms, the transformed-process
//! expectation and the δ̄ deviation term.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::carrier::{path_rng, pick, CarrierTables, McEstimate};
use crate::error::{Error, Result};
use crate::model::SupportMode;
use crate::par;
use crate::regions::{partition_from_boundary, RegionPartition};
use crate::tree::{Model, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    /// Sub-off-regions collapse to their marginal-carrier maximizer.
    Up,
    /// Additionally, sub-on-regions collapse to their marginal-carrier minimizer.
    Jump,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformCell {
    pub partition: RegionPartition,
    /// Projection point of each sub-off-region.
    pub d_up: Vec<usize>,
    /// Projection point of each sub-on-region (empty without full cover).
    pub d_down: Vec<usize>,
    pub up: Vec<usize>,
    pub jump: Option<Vec<usize>>,
    pub delta: Vec<f64>,
}

impl TransformCell {
    pub fn project(&self, state: usize, kind: TransformKind) -> Result<usize> {
        match kind {
            TransformKind::Up => Ok(self.up[state]),
            TransformKind::Jump => self.jump.as_ref().map(|j| j[state]).ok_or(Error::NotFullCover),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Transforms {
    /// `cells[node][mode][agent]`, modes as in the carrier tables.
    cells: Vec<Vec<Vec<Option<TransformCell>>>>,
}

/// Largest index attaining the max (or min) of `f` on `[l, r]`.
fn arg_extreme(f: &[f64], l: usize, r: usize, max: bool) -> usize {
    let mut best = l;
    for s in l..=r {
        let better = if max { f[s] >= f[best] } else { f[s] <= f[best] };
        if better {
            best = s;
        }
    }
    best
}

impl Transforms {
    pub fn build(model: &Model, carriers: &CarrierTables, full_cover: bool) -> Result<Self> {
        let n_modes = carriers.modes.len();
        let mut cells: Vec<Vec<Vec<Option<TransformCell>>>> =
            vec![vec![vec![None; model.agents()]; n_modes]; model.tree.len()];
        for t in (1..=model.horizon()).rev() {
            let built: Vec<Result<Vec<Vec<Option<TransformCell>>>>> = model.map_layer(t, |node| {
                let mut per_mode = Vec::with_capacity(n_modes);
                for m in 0..n_modes {
                    let mut per_agent = vec![None; model.agents()];
                    for i in model.tree.node(node).present_agents() {
                        per_agent[i] = Some(build_cell(model, carriers, &cells, m, i, node, full_cover)?);
                    }
                    per_mode.push(per_agent);
                }
                Ok(per_mode)
            });
            for (&node, res) in model.tree.layer(t).iter().zip(built) {
                cells[node] = res?;
            }
        }
        Ok(Transforms { cells })
    }

    pub fn cell(&self, mode: usize, node: NodeId, agent: usize) -> Option<&TransformCell> {
        self.cells[node][mode][agent].as_ref()
    }

    fn require(&self, mode: usize, node: NodeId, agent: usize) -> Result<&TransformCell> {
        self.cell(mode, node, agent).ok_or(Error::NotParticipating { agent })
    }

    pub fn project(&self, mode: usize, agent: usize, node: NodeId, state: usize, kind: TransformKind) -> Result<usize> {
        self.require(mode, node, agent)?.project(state, kind)
    }

    pub fn delta_bar(&self, mode: usize, agent: usize, node: NodeId, state: usize) -> Result<f64> {
        Ok(self.require(mode, node, agent)?.delta[state])
    }

    /// `Mg + δ̄` at a state.
    pub fn w_value(&self, carriers: &CarrierTables, mode: usize, agent: usize, node: NodeId, state: usize) -> Result<f64> {
        let c = carriers.cell(mode, node, agent).ok_or(Error::NotParticipating { agent })?;
        Ok(c.mg[state] + self.delta_bar(mode, agent, node, state)?)
    }

    /// Exact expectation of `Σ_{k=t+1}^{L} K(agent, node_k, ûs_k)` along the
    /// transformed process started at `state`. The start state is used as
    /// given; each later state is a transition followed by a projection.
    #[allow(clippy::too_many_arguments)]
    pub fn uppt_expectation(
        &self,
        model: &Model,
        carriers: &CarrierTables,
        mode: usize,
        agent: usize,
        node: NodeId,
        state: usize,
        l: usize,
        kind: TransformKind,
        integrand: &(dyn Fn(usize, NodeId, usize) -> Result<f64> + Sync),
    ) -> Result<f64> {
        let k = model.tree.node(node).period;
        if l < k || l > model.horizon() {
            return Err(Error::Period { period: l, horizon: model.horizon() });
        }
        self.uppt_rec(model, carriers, mode, agent, node, state, l, kind, integrand)
    }

    #[allow(clippy::too_many_arguments)]
    fn uppt_rec(
        &self,
        model: &Model,
        carriers: &CarrierTables,
        mode: usize,
        agent: usize,
        node: NodeId,
        state: usize,
        l: usize,
        kind: TransformKind,
        integrand: &(dyn Fn(usize, NodeId, usize) -> Result<f64> + Sync),
    ) -> Result<f64> {
        let k = model.tree.node(node).period;
        if k >= l {
            return Ok(0.0);
        }
        let menu = model.tree.node(node).menu(agent).unwrap();
        let mut acc = 0.0;
        for b in model.branches(agent, &carriers.modes[mode], node, menu.state_action[state]) {
            let child = b.child.expect("child exists before the horizon");
            for mv in model.moves(agent, child, state, false) {
                let next = self.project(mode, agent, child, mv.next, kind)?;
                let inner = integrand(agent, child, next)?
                    + self.uppt_rec(model, carriers, mode, agent, child, next, l, kind, integrand)?;
                acc += b.prob * mv.prob * inner;
            }
        }
        Ok(acc)
    }

    /// Sampled version of [`Transforms::uppt_expectation`]; also returns the
    /// number of projected states found strictly inside a sub-off-region
    /// away from its projection point (the barrier property says zero).
    #[allow(clippy::too_many_arguments)]
    pub fn uppt_expectation_mc(
        &self,
        model: &Model,
        carriers: &CarrierTables,
        mode: usize,
        agent: usize,
        node: NodeId,
        state: usize,
        l: usize,
        kind: TransformKind,
        integrand: &(dyn Fn(usize, NodeId, usize) -> Result<f64> + Sync),
        samples: usize,
        seed: u64,
    ) -> Result<(McEstimate, usize)> {
        let opp = &carriers.modes[mode];
        let paths: Vec<Result<(f64, usize)>> = par::map_range(model.exec, samples, |p| {
            let mut rng = path_rng(seed, p as u64);
            let mut cur = node;
            let mut s = state;
            let mut acc = 0.0;
            let mut inside = 0;
            while model.tree.node(cur).period < l {
                let a = model.tree.node(cur).menu(agent).unwrap().state_action[s];
                let brs = model.branches(agent, opp, cur, a);
                let b = &brs[pick(&mut rng, brs.iter().map(|b| b.prob))];
                let child = b.child.expect("child exists before the horizon");
                let moves = model.moves(agent, child, s, false);
                let mv = moves[pick(&mut rng, moves.iter().map(|m| m.prob))];
                s = self.project(mode, agent, child, mv.next, kind)?;
                cur = child;
                let cell = self.require(mode, cur, agent)?;
                if barrier_breach(cell, s) {
                    inside += 1;
                }
                acc += integrand(agent, cur, s)?;
            }
            Ok((acc, inside))
        });
        let paths = paths.into_iter().collect::<Result<Vec<_>>>()?;
        let n = paths.len() as f64;
        let mean = paths.iter().map(|p| p.0).sum::<f64>() / n;
        let var = if paths.len() > 1 { paths.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        let breaches = paths.iter().map(|p| p.1).sum();
        Ok((McEstimate { mean, std_err: (var / n).sqrt(), samples: paths.len() }, breaches))
    }

    /// Projected states reachable at period `k` from `(node, state)`.
    /// Requires the full-support check in `mode` to pass.
    #[allow(clippy::too_many_arguments)]
    pub fn uppt_support(
        &self,
        model: &Model,
        carriers: &CarrierTables,
        mode: usize,
        agent: usize,
        node: NodeId,
        state: usize,
        k: usize,
        support: SupportMode,
    ) -> Result<BTreeSet<usize>> {
        if !model.validate_full_support(support).passed {
            return Err(Error::NoFullSupport);
        }
        let start = model.tree.node(node).period;
        if k <= start || k > model.horizon() {
            return Err(Error::Period { period: k, horizon: model.horizon() });
        }
        let mut frontier: BTreeSet<(NodeId, usize)> = BTreeSet::from([(node, state)]);
        for _ in start..k {
            let mut next_frontier = BTreeSet::new();
            for &(cur, s) in &frontier {
                let a = model.tree.node(cur).menu(agent).unwrap().state_action[s];
                for b in model.branches(agent, &carriers.modes[mode], cur, a) {
                    if b.prob <= 0.0 {
                        continue;
                    }
                    let child = b.child.expect("child exists before the horizon");
                    for mv in model.moves(agent, child, s, false) {
                        if mv.prob > 0.0 {
                            next_frontier.insert((child, self.project(mode, agent, child, mv.next, TransformKind::Up)?));
                        }
                    }
                }
            }
            frontier = next_frontier;
        }
        Ok(frontier.into_iter().map(|(_, s)| s).collect())
    }

    /// Exhaustive barrier audit: counts reachable projected states that lie
    /// inside a sub-off-region but differ from its projection point.
    pub fn barrier_violations(&self, model: &Model, carriers: &CarrierTables, mode: usize) -> Result<(usize, usize)> {
        let mut checked = 0;
        let mut bad = 0;
        for i in 0..model.agents() {
            let root = model.tree.root();
            let mut frontier: BTreeSet<(NodeId, usize)> = BTreeSet::new();
            for (s, &p) in model.game.initial(i).iter().enumerate() {
                if p > 0.0 {
                    frontier.insert((root, s));
                }
            }
            while !frontier.is_empty() {
                let mut next_frontier = BTreeSet::new();
                for &(cur, s) in &frontier {
                    if model.tree.node(cur).period == model.horizon() {
                        continue;
                    }
                    let a = model.tree.node(cur).menu(i).unwrap().state_action[s];
                    for b in model.branches(i, &carriers.modes[mode], cur, a) {
                        let child = b.child.expect("child exists before the horizon");
                        for mv in model.moves(i, child, s, false) {
                            let p = self.project(mode, i, child, mv.next, TransformKind::Up)?;
                            checked += 1;
                            if barrier_breach(self.require(mode, child, i)?, p) {
                                bad += 1;
                            }
                            next_frontier.insert((child, p));
                        }
                    }
                }
                frontier = next_frontier;
            }
        }
        Ok((checked, bad))
    }
}

fn barrier_breach(cell: &TransformCell, state: usize) -> bool {
    cell.partition
        .off
        .iter()
        .zip(&cell.d_up)
        .any(|(&(l, r), &d)| l <= state && state <= r && state != d)
}

fn build_cell(
    model: &Model,
    carriers: &CarrierTables,
    cells: &[Vec<Vec<Option<TransformCell>>>],
    mode: usize,
    agent: usize,
    node: NodeId,
    full_cover: bool,
) -> Result<TransformCell> {
    let nd = model.tree.node(node);
    let k = nd.period;
    let carrier = carriers.cell(mode, node, agent).expect("carrier cell built");
    let m = carrier.zeta.len();
    let partition = partition_from_boundary(model.boundary.get(agent, k), m, full_cover)?;
    let zeta = &carrier.zeta;
    let d_up: Vec<usize> = partition.off.iter().map(|&(l, r)| arg_extreme(zeta, l, r, true)).collect();
    let d_down: Vec<usize> = partition.on.iter().map(|&(l, r)| arg_extreme(zeta, l, r, false)).collect();
    let mut up: Vec<usize> = (0..m).collect();
    for (&(l, r), &d) in partition.off.iter().zip(&d_up) {
        up[l..=r].fill(d);
    }
    let jump = partition.full_cover.then(|| {
        let mut j = up.clone();
        for (&(l, r), &d) in partition.on.iter().zip(&d_down) {
            j[l..=r].fill(d);
        }
        j
    });

    let mut delta = vec![0.0; m];
    if k < model.horizon() {
        let menu = nd.menu(agent).unwrap();
        for (s, slot) in delta.iter_mut().enumerate() {
            let mut acc = 0.0;
            for b in model.branches(agent, &carriers.modes[mode], node, menu.state_action[s]) {
                let child = b.child.expect("child exists before the horizon");
                let cc = carriers.cell(mode, child, agent).expect("carrier cell built");
                let tc = cells[child][mode][agent].as_ref().expect("child transform built");
                for mv in model.moves(agent, child, s, false) {
                    let p = tc.up[mv.next];
                    let u = cc.mg[p] - cc.mg[mv.next];
                    acc += b.prob * mv.prob * (u + tc.delta[p]);
                }
            }
            *slot = acc;
        }
    }
    Ok(TransformCell { partition, d_up, d_down, up, jump, delta })
}
