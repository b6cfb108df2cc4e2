//! Exhaustive public-history tree, beliefs about other agents' states, and
//! the outcome expansion used by every backward-induction table.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::{action_menu, BoundaryProfile, Directive, Menu, TaskPolicy, Variant};
use crate::model::{BaseGame, FullSupportReport, Move, Record, StepContext, SupportMode};
use crate::par::{self, Exec};

pub type NodeId = usize;

pub const DEFAULT_NODE_LIMIT: usize = 250_000;

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub period: usize,
    pub parent: Option<NodeId>,
    pub history: Vec<Record>,
    /// Agents still in the mechanism when period `period` opens.
    pub present: Vec<bool>,
    pub menus: Vec<Option<Menu>>,
    strides: Vec<usize>,
    joint_count: usize,
    children: HashMap<Vec<Option<usize>>, NodeId>,
}

impl Node {
    pub fn menu(&self, agent: usize) -> Option<&Menu> {
        self.menus[agent].as_ref()
    }

    pub fn present_agents(&self) -> impl Iterator<Item = usize> + '_ {
        self.present.iter().enumerate().filter_map(|(j, p)| p.then_some(j))
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn child_count(&self) -> usize {
        self.children.len()
    }
}

#[derive(Clone, Debug)]
pub struct HistoryTree {
    nodes: Vec<Node>,
    layers: Vec<Vec<NodeId>>,
    lookup: HashMap<Vec<Vec<Option<usize>>>, NodeId>,
}

fn subsets(present: &[usize]) -> Vec<Vec<usize>> {
    let n = present.len();
    (1..(1usize << n))
        .map(|mask| (0..n).filter(|k| mask & (1 << k) != 0).map(|k| present[k]).collect())
        .collect()
}

impl HistoryTree {
    pub fn build(game: &BaseGame, task: &TaskPolicy, limit: usize) -> Result<Self> {
        let agents = game.agents();
        let horizon = game.horizon();
        let mut nodes: Vec<Node> = Vec::new();
        let mut layers: Vec<Vec<NodeId>> = vec![Vec::new(); horizon];
        let mut lookup = HashMap::new();

        let root_menus = (0..agents)
            .map(|j| action_menu(game, j, 1, &[], task).map(Some))
            .collect::<Result<Vec<_>>>()?;
        nodes.push(Self::make_node(0, 1, None, Vec::new(), vec![true; agents], root_menus));
        layers[0].push(0);
        lookup.insert(Vec::new(), 0);

        for k in 1..horizon {
            let parents = layers[k - 1].clone();
            for pid in parents {
                let present: Vec<usize> = nodes[pid].present_agents().collect();
                for subset in subsets(&present) {
                    let radices: Vec<usize> =
                        subset.iter().map(|&j| nodes[pid].menus[j].as_ref().map_or(0, |m| m.len())).collect();
                    let total: usize = radices.iter().product();
                    for mut code in 0..total {
                        let mut actions = vec![None; agents];
                        let mut values = vec![None; agents];
                        for (slot, &j) in subset.iter().enumerate() {
                            let a = code % radices[slot];
                            code /= radices[slot];
                            actions[j] = Some(a);
                            values[j] = Some(nodes[pid].menus[j].as_ref().unwrap().actions[a]);
                        }
                        let mut history = nodes[pid].history.clone();
                        history.push(Record { actions: actions.clone(), values });
                        let mut present_next = vec![false; agents];
                        let mut menus = vec![None; agents];
                        for &j in &subset {
                            present_next[j] = true;
                            menus[j] = Some(action_menu(game, j, k + 1, &history, task)?);
                        }
                        let id = nodes.len();
                        if id >= limit {
                            return Err(Error::TreeTooLarge { limit });
                        }
                        let key: Vec<Vec<Option<usize>>> = history.iter().map(|r| r.actions.clone()).collect();
                        nodes[pid].children.insert(actions, id);
                        nodes.push(Self::make_node(id, k + 1, Some(pid), history, present_next, menus));
                        layers[k].push(id);
                        lookup.insert(key, id);
                    }
                }
            }
        }
        Ok(HistoryTree { nodes, layers, lookup })
    }

    fn make_node(
        id: NodeId,
        period: usize,
        parent: Option<NodeId>,
        history: Vec<Record>,
        present: Vec<bool>,
        menus: Vec<Option<Menu>>,
    ) -> Node {
        let mut strides = Vec::with_capacity(present.len());
        let mut acc = 1;
        for m in &menus {
            strides.push(acc);
            acc *= m.as_ref().map_or(1, |m| m.len() + 1);
        }
        Node { id, period, parent, history, present, menus, strides, joint_count: acc, children: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> NodeId {
        0
    }

    /// Node ids of period `period` (1-based).
    pub fn layer(&self, period: usize) -> &[NodeId] {
        &self.layers[period - 1]
    }

    pub fn child(&self, id: NodeId, actions: &[Option<usize>]) -> Option<NodeId> {
        self.nodes[id].children.get(actions).copied()
    }

    /// Node reached by the given sequence of per-period action-index vectors.
    pub fn find(&self, history: &[Vec<Option<usize>>]) -> Option<NodeId> {
        self.lookup.get(history).copied()
    }

    /// Mixed-radix code of a joint action at a node; absent slots code as 0.
    pub fn joint_code(&self, id: NodeId, actions: &[Option<usize>]) -> usize {
        let node = &self.nodes[id];
        actions
            .iter()
            .zip(&node.strides)
            .map(|(a, s)| a.map_or(0, |a| (a + 1) * s))
            .sum()
    }

    pub fn decode(&self, id: NodeId, mut code: usize) -> Vec<Option<usize>> {
        let node = &self.nodes[id];
        node.menus
            .iter()
            .map(|m| {
                let radix = m.as_ref().map_or(1, |m| m.len() + 1);
                let c = code % radix;
                code /= radix;
                c.checked_sub(1)
            })
            .collect()
    }

    pub fn action_values(&self, id: NodeId, actions: &[Option<usize>]) -> Result<Vec<Option<f64>>> {
        let node = &self.nodes[id];
        actions
            .iter()
            .enumerate()
            .map(|(j, a)| match (a, node.menus[j].as_ref()) {
                (None, _) => Ok(None),
                (Some(k), Some(m)) if *k < m.len() => Ok(Some(m.actions[*k])),
                (Some(k), m) => Err(Error::NotInMenu { agent: j, index: *k, size: m.map_or(0, |m| m.len()) }),
            })
            .collect()
    }
}

/// Per agent and period: which states quit under the obedient OM plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuitPlan {
    pub quit: Vec<Vec<Vec<bool>>>,
}

impl QuitPlan {
    pub fn from_design(game: &BaseGame, boundary: &BoundaryProfile, variant: Variant) -> Self {
        let quit = (0..game.agents())
            .map(|i| {
                (1..=game.horizon())
                    .map(|t| {
                        let m = game.grid(i, t).len();
                        (0..m)
                            .map(|s| variant != Variant::Ir && boundary.contains(i, t, s))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        QuitPlan { quit }
    }

    pub fn quits(&self, agent: usize, period: usize, state: usize) -> bool {
        self.quit[agent][period - 1][state]
    }
}

/// How other agents behave inside an expectation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opponents {
    /// Obedient OM plan: quit exactly on the quit set, otherwise play σ.
    Obedient,
    /// Deterministic quit periods per agent (T+1 = never); present at period
    /// k iff k is before the planned quit period.
    Plan(Vec<usize>),
}

impl Opponents {
    pub fn never(game: &BaseGame) -> Self {
        Opponents::Plan(vec![game.horizon() + 1; game.agents()])
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub prob: f64,
    pub actions: Vec<Option<usize>>,
    pub values: Vec<Option<f64>>,
    /// Child node in the next period; `None` at the horizon.
    pub child: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Beliefs {
    /// `plain[node][agent]`: state distribution filtered on public actions.
    plain: Vec<Vec<Option<Vec<f64>>>>,
    /// Like `plain`, also conditioned on having stayed under the quit plan.
    stay: Vec<Vec<Option<Vec<f64>>>>,
    fallbacks: usize,
}

impl Beliefs {
    fn build(game: &BaseGame, tree: &HistoryTree, plan: &QuitPlan) -> Result<Self> {
        let n = game.agents();
        let mut plain: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; n]; tree.len()];
        let mut stay = plain.clone();
        let mut fallbacks = 0;
        for j in 0..n {
            plain[0][j] = Some(game.initial(j).to_vec());
            stay[0][j] = Some(game.initial(j).to_vec());
        }
        for t in 2..=game.horizon() {
            for &id in tree.layer(t) {
                let node = tree.node(id);
                let pid = node.parent.expect("non-root node has a parent");
                let parent = tree.node(pid);
                let rec = node.history.last().unwrap();
                for j in node.present_agents() {
                    let a = rec.actions[j].unwrap();
                    let menu = parent.menu(j).unwrap();
                    let gens = &menu.generators[a];
                    let quit = |s: usize| plan.quits(j, t - 1, s);
                    let pb = plain[pid][j].as_ref().unwrap();
                    let sb = stay[pid][j].as_ref().unwrap();
                    let (p_filt, fb1) = filter(pb, gens, |_| true);
                    let (s_filt, fb2) = filter(sb, gens, |s| !quit(s));
                    fallbacks += fb1 as usize + fb2 as usize;
                    plain[id][j] = Some(propagate(game, j, t - 1, &node.history, &p_filt)?);
                    stay[id][j] = Some(propagate(game, j, t - 1, &node.history, &s_filt)?);
                }
            }
        }
        Ok(Beliefs { plain, stay, fallbacks })
    }

    pub fn plain(&self, node: NodeId, agent: usize) -> Option<&[f64]> {
        self.plain[node][agent].as_deref()
    }

    pub fn stay(&self, node: NodeId, agent: usize) -> Option<&[f64]> {
        self.stay[node][agent].as_deref()
    }

    /// Number of filtering steps that hit a zero-mass event and fell back.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }
}

/// Restrict `prior` to `gens` and `keep`; falls back to action-only and then
/// uniform over generators when the event has zero mass.
fn filter(prior: &[f64], gens: &[usize], keep: impl Fn(usize) -> bool) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; prior.len()];
    let mut total = 0.0;
    for &s in gens {
        if keep(s) {
            out[s] = prior[s];
            total += prior[s];
        }
    }
    let mut fell_back = false;
    if total <= 0.0 {
        fell_back = true;
        for &s in gens {
            out[s] = prior[s];
            total += prior[s];
        }
    }
    if total <= 0.0 {
        for &s in gens {
            out[s] = 1.0;
        }
        total = gens.len() as f64;
    }
    for x in &mut out {
        *x /= total;
    }
    (out, fell_back)
}

fn propagate(game: &BaseGame, agent: usize, period: usize, history: &[Record], dist: &[f64]) -> Result<Vec<f64>> {
    let grid = game.grid(agent, period);
    let mut out = vec![0.0; game.grid(agent, period + 1).len()];
    let ctx = StepContext { agent, period, history };
    for (s, &p) in dist.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for mv in game.moves(&ctx, grid.value(s), false)? {
            out[mv.next] += p * mv.prob;
        }
    }
    Ok(out)
}

/// Everything fixed before ρ and φ are chosen: the game, σ, the boundary
/// profile, the variant, and the derived tree and beliefs.
#[derive(Clone, Debug)]
pub struct Model {
    pub game: Arc<BaseGame>,
    pub task: TaskPolicy,
    pub boundary: BoundaryProfile,
    pub variant: Variant,
    pub plan: QuitPlan,
    pub tree: HistoryTree,
    pub beliefs: Beliefs,
    /// Anchor θ per agent and period, as a grid index.
    pub theta: Vec<Vec<usize>>,
    /// Trapezoid refinement factor for carrier integrals.
    pub refinement: usize,
    pub exec: Exec,
}

impl Model {
    pub fn build(game: Arc<BaseGame>, task: TaskPolicy, boundary: BoundaryProfile, variant: Variant) -> Result<Self> {
        Self::build_with_limit(game, task, boundary, variant, DEFAULT_NODE_LIMIT)
    }

    pub fn build_with_limit(
        game: Arc<BaseGame>,
        task: TaskPolicy,
        boundary: BoundaryProfile,
        variant: Variant,
        limit: usize,
    ) -> Result<Self> {
        boundary.validate(&game)?;
        let tree = HistoryTree::build(&game, &task, limit)?;
        let plan = QuitPlan::from_design(&game, &boundary, variant);
        let beliefs = Beliefs::build(&game, &tree, &plan)?;
        let theta = vec![vec![0; game.horizon()]; game.agents()];
        Ok(Model { game, task, boundary, variant, plan, tree, beliefs, theta, refinement: 1, exec: Exec::default() })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn with_theta(mut self, theta: Vec<Vec<usize>>) -> Result<Self> {
        if theta.len() != self.game.agents() || theta.iter().any(|r| r.len() != self.game.horizon()) {
            return Err(Error::Grid("theta needs one anchor per agent and period".into()));
        }
        for (i, row) in theta.iter().enumerate() {
            for (t0, &th) in row.iter().enumerate() {
                if th >= self.game.grid(i, t0 + 1).len() {
                    return Err(Error::Grid(format!("anchor {th} outside grid of agent {i}, period {}", t0 + 1)));
                }
            }
        }
        self.theta = theta;
        Ok(self)
    }

    pub fn with_refinement(mut self, r: usize) -> Self {
        self.refinement = r.max(1);
        self
    }

    pub fn horizon(&self) -> usize {
        self.game.horizon()
    }

    pub fn agents(&self) -> usize {
        self.game.agents()
    }

    pub fn directive(&self) -> Directive {
        self.variant.directive()
    }

    pub fn theta(&self, agent: usize, period: usize) -> usize {
        self.theta[agent][period - 1]
    }

    /// Every distinct opponent mode needed for conjectures.
    pub fn all_plans(&self) -> Vec<Opponents> {
        let n = self.agents();
        let choices = self.horizon() + 1;
        let mut out = Vec::new();
        let total = choices.pow(n as u32);
        for mut code in 0..total {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(code % choices + 1);
                code /= choices;
            }
            out.push(Opponents::Plan(v));
        }
        out
    }

    /// Joint outcomes of the other present agents at `node` when `agent`
    /// plays menu index `own`.
    pub fn branches(&self, agent: usize, opp: &Opponents, node: NodeId, own: usize) -> Vec<Branch> {
        let nd = self.tree.node(node);
        let k = nd.period;
        let n = self.agents();
        let mut partial: Vec<(f64, Vec<Option<usize>>)> = vec![(1.0, {
            let mut v = vec![None; n];
            v[agent] = Some(own);
            v
        })];
        for j in nd.present_agents().filter(|&j| j != agent) {
            let menu = nd.menu(j).unwrap();
            let mut outcomes: Vec<(Option<usize>, f64)> = Vec::new();
            match opp {
                Opponents::Obedient => {
                    let b = self.beliefs.stay(node, j).unwrap();
                    let mut q = 0.0;
                    let mut mass = vec![0.0; menu.len()];
                    for (s, &p) in b.iter().enumerate() {
                        if self.plan.quits(j, k, s) {
                            q += p;
                        } else {
                            mass[menu.state_action[s]] += p;
                        }
                    }
                    if q > 0.0 {
                        outcomes.push((None, q));
                    }
                    outcomes.extend(mass.into_iter().enumerate().filter(|(_, m)| *m > 0.0).map(|(a, m)| (Some(a), m)));
                }
                Opponents::Plan(l) => {
                    if k < l[j] {
                        let b = self.beliefs.plain(node, j).unwrap();
                        let mut mass = vec![0.0; menu.len()];
                        for (s, &p) in b.iter().enumerate() {
                            mass[menu.state_action[s]] += p;
                        }
                        outcomes.extend(
                            mass.into_iter().enumerate().filter(|(_, m)| *m > 0.0).map(|(a, m)| (Some(a), m)),
                        );
                    } else {
                        outcomes.push((None, 1.0));
                    }
                }
            }
            let mut next = Vec::with_capacity(partial.len() * outcomes.len());
            for (p, acts) in &partial {
                for &(a, q) in &outcomes {
                    let mut v = acts.clone();
                    v[j] = a;
                    next.push((p * q, v));
                }
            }
            partial = next;
        }
        partial
            .into_iter()
            .map(|(prob, actions)| {
                let values = self.tree.action_values(node, &actions).expect("menu indices are valid");
                let child = if k < self.horizon() { self.tree.child(node, &actions) } else { None };
                Branch { prob, actions, values, child }
            })
            .collect()
    }

    /// Transitions of `agent` from grid state `state` into the child node.
    pub fn moves(&self, agent: usize, child: NodeId, state: usize, with_derivative: bool) -> Vec<Move> {
        let c = self.tree.node(child);
        let period = c.period - 1;
        let s = self.game.grid(agent, period).value(state);
        let ctx = StepContext { agent, period, history: &c.history };
        self.game.moves(&ctx, s, with_derivative).expect("shock support is fixed")
    }

    /// Like [`Model::moves`], at an off-grid state value.
    pub fn moves_at(&self, agent: usize, child: NodeId, s: f64, with_derivative: bool) -> Result<Vec<Move>> {
        let c = self.tree.node(child);
        let ctx = StepContext { agent, period: c.period - 1, history: &c.history };
        self.game.moves(&ctx, s, with_derivative)
    }

    /// Full-support check probing every history in the tree.
    pub fn validate_full_support(&self, mode: SupportMode) -> FullSupportReport {
        let probes: Vec<Vec<Vec<Record>>> = (2..=self.horizon())
            .map(|t| self.tree.layer(t).iter().map(|&id| self.tree.node(id).history.clone()).collect())
            .collect();
        self.game.validate_full_support_with(mode, &probes, "all tree histories")
    }

    /// Runs `f` over the nodes of a layer with the configured executor.
    pub fn map_layer<R: Send>(&self, period: usize, f: impl Fn(NodeId) -> R + Sync + Send) -> Vec<R> {
        par::map(self.exec, self.tree.layer(period), |&id| f(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionSet, AdditiveDynamics, Grid, ProductReward, ShockModel};

    fn game(n: usize, t: usize) -> Arc<BaseGame> {
        Arc::new(
            BaseGame::stationary(
                n,
                t,
                Grid::uniform(0.0, 1.0, 5).unwrap(),
                ActionSet::new(0.0, 1.0).unwrap(),
                ShockModel::uniform(vec![-0.25, 0.0, 0.25]).unwrap(),
                Arc::new(AdditiveDynamics::default()),
                Arc::new(ProductReward::default()),
            )
            .unwrap(),
        )
    }

    #[test]
    fn tree_sizes() {
        let g = game(2, 3);
        let tree = HistoryTree::build(&g, &TaskPolicy::Identity, DEFAULT_NODE_LIMIT).unwrap();
        assert_eq!(tree.layer(1).len(), 1);
        assert_eq!(tree.layer(2).len(), 35);
        assert_eq!(tree.len(), 961);
        let g = game(1, 3);
        let tree = HistoryTree::build(&g, &TaskPolicy::Identity, DEFAULT_NODE_LIMIT).unwrap();
        assert_eq!(tree.len(), 1 + 5 + 25);
    }

    #[test]
    fn size_guard() {
        let g = game(2, 3);
        let err = HistoryTree::build(&g, &TaskPolicy::Identity, 100).unwrap_err();
        assert!(err.to_string().contains("--mode mc"));
    }

    #[test]
    fn joint_code_roundtrip() {
        let g = game(2, 2);
        let tree = HistoryTree::build(&g, &TaskPolicy::Identity, DEFAULT_NODE_LIMIT).unwrap();
        for code in 0..tree.node(0).joint_count() {
            let acts = tree.decode(0, code);
            assert_eq!(tree.joint_code(0, &acts), code);
        }
    }

    #[test]
    fn find_matches_child() {
        let g = game(2, 3);
        let tree = HistoryTree::build(&g, &TaskPolicy::Identity, DEFAULT_NODE_LIMIT).unwrap();
        let c = tree.child(0, &[Some(1), None]).unwrap();
        let cc = tree.child(c, &[Some(3), None]).unwrap();
        assert_eq!(tree.find(&[vec![Some(1), None], vec![Some(3), None]]), Some(cc));
        assert_eq!(tree.node(cc).period, 3);
        assert!(tree.child(c, &[Some(3), Some(0)]).is_none());
    }

    #[test]
    fn beliefs_reveal_state_under_identity() {
        let g = game(2, 2);
        let m = Model::build(g.clone(), TaskPolicy::Identity, BoundaryProfile::ir(&g), Variant::Ir).unwrap();
        let c = m.tree.child(0, &[Some(2), Some(4)]).unwrap();
        let b = m.beliefs.plain(c, 1).unwrap();
        // state 1.0 moves to {0.75, 1.0, 1.0}
        assert!((b[3] - 1.0 / 3.0).abs() < 1e-15);
        assert!((b[4] - 2.0 / 3.0).abs() < 1e-15);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn branch_probabilities_sum_to_one() {
        let g = game(2, 3);
        let bp = BoundaryProfile::uniform_values(&g, &[(0.0, 0.25)]).unwrap();
        let m = Model::build(g, TaskPolicy::Identity, bp, Variant::Horizontal).unwrap();
        for id in [0, 7, 100] {
            if !m.tree.node(id).present[0] {
                continue;
            }
            for opp in [Opponents::Obedient, Opponents::Plan(vec![2, 2])] {
                let br = m.branches(0, &opp, id, 0);
                let total: f64 = br.iter().map(|b| b.prob).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
