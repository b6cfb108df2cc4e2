//! Task policies, action menus, coupling policies and off-switch functions.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BaseGame, Record};
use crate::tree::{Model, NodeId};

type TaskFn = dyn Fn(usize, usize, usize, f64, &[Record]) -> f64 + Send + Sync;
type CouplingFn = dyn Fn(&CouplingQuery<'_>) -> f64 + Send + Sync;
type OffSwitchFn = dyn Fn(usize, usize, NodeId, usize) -> f64 + Send + Sync;

/// The task policy σ. Actions are evaluated on grid nodes only.
#[derive(Clone)]
pub enum TaskPolicy {
    Identity,
    Linear { slope: f64, intercept: f64 },
    /// `table[agent][period-1][state]`, history-independent.
    Table(Vec<Vec<Vec<f64>>>),
    /// `(agent, period, state index, state value, history) -> action`.
    Custom(Arc<TaskFn>),
}

impl fmt::Debug for TaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskPolicy::Identity => write!(f, "Identity"),
            TaskPolicy::Linear { slope, intercept } => {
                write!(f, "Linear {{ slope: {slope}, intercept: {intercept} }}")
            }
            TaskPolicy::Table(t) => f.debug_tuple("Table").field(t).finish(),
            TaskPolicy::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl TaskPolicy {
    pub fn custom(f: impl Fn(usize, usize, usize, f64, &[Record]) -> f64 + Send + Sync + 'static) -> Self {
        TaskPolicy::Custom(Arc::new(f))
    }

    pub fn action(&self, agent: usize, period: usize, state: usize, s: f64, history: &[Record]) -> f64 {
        match self {
            TaskPolicy::Identity => s,
            TaskPolicy::Linear { slope, intercept } => slope * s + intercept,
            TaskPolicy::Table(t) => t[agent][period - 1][state],
            TaskPolicy::Custom(f) => f(agent, period, state, s, history),
        }
    }
}

/// Deduplicated, sorted action menu with the back-map to generating states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Menu {
    pub actions: Vec<f64>,
    /// Generating states of each action, ascending.
    pub generators: Vec<Vec<usize>>,
    /// Menu index of σ at each grid state.
    pub state_action: Vec<usize>,
}

impl Menu {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Largest state generating `action`; used wherever a single
    /// representative is needed.
    pub fn representative(&self, action: usize) -> usize {
        *self.generators[action].last().expect("menu action without generator")
    }

    pub fn is_injective(&self) -> bool {
        self.generators.iter().all(|g| g.len() == 1)
    }
}

fn same_action(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

/// Menu of agent `agent` at period `period` after `history` (length period−1).
pub fn action_menu(
    game: &BaseGame,
    agent: usize,
    period: usize,
    history: &[Record],
    task: &TaskPolicy,
) -> Result<Menu> {
    game.check_agent(agent)?;
    game.check_period(period)?;
    if history.len() != period - 1 {
        return Err(Error::HistoryLength { expected: period - 1, got: history.len() });
    }
    let grid = game.grid(agent, period);
    let bounds = game.actions(agent, period);
    let mut raw = Vec::with_capacity(grid.len());
    for (k, &s) in grid.nodes().iter().enumerate() {
        let a = task.action(agent, period, k, s, history);
        if !a.is_finite() || !bounds.contains(a) {
            return Err(Error::ActionOutOfRange { agent, period, value: a, lo: bounds.lo, hi: bounds.hi });
        }
        raw.push(a);
    }
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&x, &y| raw[x].total_cmp(&raw[y]).then(x.cmp(&y)));
    let mut actions: Vec<f64> = Vec::new();
    let mut generators: Vec<Vec<usize>> = Vec::new();
    let mut state_action = vec![0; raw.len()];
    for k in order {
        match actions.last() {
            Some(&last) if same_action(last, raw[k]) => {}
            _ => {
                actions.push(raw[k]);
                generators.push(Vec::new());
            }
        }
        let idx = actions.len() - 1;
        generators[idx].push(k);
        state_action[k] = idx;
    }
    for g in &mut generators {
        g.sort_unstable();
    }
    Ok(Menu { actions, generators, state_action })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Ir,
    Horizontal,
    Knowledgeable,
}

/// How a zero on-rent is resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    Stay,
    QuitOnOffRegion,
}

impl Variant {
    pub fn directive(self) -> Directive {
        match self {
            Variant::Ir => Directive::Stay,
            _ => Directive::QuitOnOffRegion,
        }
    }
}

/// Boundary profile as grid-index pairs `pairs[agent][period-1] = [(l, r), ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryProfile {
    pub pairs: Vec<Vec<Vec<(usize, usize)>>>,
}

impl BoundaryProfile {
    /// Singleton lower region `{s̲}` in every period.
    pub fn ir(game: &BaseGame) -> Self {
        BoundaryProfile {
            pairs: (0..game.agents()).map(|_| vec![vec![(0, 0)]; game.horizon()]).collect(),
        }
    }

    pub fn empty(game: &BaseGame) -> Self {
        BoundaryProfile {
            pairs: (0..game.agents()).map(|_| vec![Vec::new(); game.horizon()]).collect(),
        }
    }

    /// Same value pairs for every agent and period.
    pub fn uniform_values(game: &BaseGame, pairs: &[(f64, f64)]) -> Result<Self> {
        let values = (0..game.agents())
            .map(|_| vec![pairs.to_vec(); game.horizon()])
            .collect();
        Self::from_values(game, values)
    }

    pub fn from_values(game: &BaseGame, values: Vec<Vec<Vec<(f64, f64)>>>) -> Result<Self> {
        if values.len() != game.agents() || values.iter().any(|v| v.len() != game.horizon()) {
            return Err(Error::Boundary("one list of pairs per agent and period required".into()));
        }
        let mut pairs = Vec::with_capacity(values.len());
        for (i, per_agent) in values.iter().enumerate() {
            let mut rows = Vec::with_capacity(per_agent.len());
            for (t0, list) in per_agent.iter().enumerate() {
                let grid = game.grid(i, t0 + 1);
                let mut row = Vec::with_capacity(list.len());
                for &(l, r) in list {
                    let li = grid.index_of(l).ok_or_else(|| {
                        Error::Boundary(format!("{l} is not a grid node (agent {i}, period {})", t0 + 1))
                    })?;
                    let ri = grid.index_of(r).ok_or_else(|| {
                        Error::Boundary(format!("{r} is not a grid node (agent {i}, period {})", t0 + 1))
                    })?;
                    row.push((li, ri));
                }
                rows.push(row);
            }
            pairs.push(rows);
        }
        let profile = BoundaryProfile { pairs };
        profile.validate(game)?;
        Ok(profile)
    }

    pub fn validate(&self, game: &BaseGame) -> Result<()> {
        if self.pairs.len() != game.agents() || self.pairs.iter().any(|v| v.len() != game.horizon()) {
            return Err(Error::Boundary("one list of pairs per agent and period required".into()));
        }
        for (i, per_agent) in self.pairs.iter().enumerate() {
            for (t0, row) in per_agent.iter().enumerate() {
                let m = game.grid(i, t0 + 1).len();
                for (b, &(l, r)) in row.iter().enumerate() {
                    if l > r || r >= m {
                        return Err(Error::Boundary(format!(
                            "pair {b} ({l}, {r}) is disordered or outside the grid (agent {i}, period {})",
                            t0 + 1
                        )));
                    }
                    if b > 0 && row[b - 1].1 >= l {
                        return Err(Error::Boundary(format!(
                            "pairs {} and {b} overlap (agent {i}, period {})",
                            b - 1,
                            t0 + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, agent: usize, period: usize) -> &[(usize, usize)] {
        &self.pairs[agent][period - 1]
    }

    pub fn contains(&self, agent: usize, period: usize, state: usize) -> bool {
        self.get(agent, period).iter().any(|&(l, r)| l <= state && state <= r)
    }
}

/// Arguments of a coupling query. `code` is the joint-action code of the
/// node, see [`crate::tree::HistoryTree::joint_code`].
#[derive(Clone, Copy, Debug)]
pub struct CouplingQuery<'a> {
    pub agent: usize,
    pub period: usize,
    pub node: NodeId,
    pub code: usize,
    pub history: &'a [Record],
    pub actions: &'a [Option<usize>],
    pub values: &'a [Option<f64>],
}

/// Dense coupling table: `cells[node][agent][code]`; empty when the agent is
/// not present at the node.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingTable {
    pub cells: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Default)]
pub enum CouplingPolicy {
    #[default]
    Zero,
    Table(CouplingTable),
    Custom(Arc<CouplingFn>),
}

impl fmt::Debug for CouplingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CouplingPolicy::Zero => write!(f, "Zero"),
            CouplingPolicy::Table(t) => write!(f, "Table({} nodes)", t.cells.len()),
            CouplingPolicy::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl CouplingPolicy {
    pub fn custom(f: impl Fn(&CouplingQuery<'_>) -> f64 + Send + Sync + 'static) -> Self {
        CouplingPolicy::Custom(Arc::new(f))
    }

    pub fn value(&self, q: &CouplingQuery<'_>) -> f64 {
        match self {
            CouplingPolicy::Zero => 0.0,
            CouplingPolicy::Table(t) => t.cells[q.node][q.agent][q.code],
            CouplingPolicy::Custom(f) => f(q),
        }
    }
}

/// Off-switch values `cells[node][agent][state]`; empty when absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OffSwitchTable {
    pub cells: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Default)]
pub enum OffSwitch {
    #[default]
    Zero,
    Table(OffSwitchTable),
    /// `(agent, period, node, state index) -> value`.
    Custom(Arc<OffSwitchFn>),
}

impl fmt::Debug for OffSwitch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OffSwitch::Zero => write!(f, "Zero"),
            OffSwitch::Table(t) => write!(f, "Table({} nodes)", t.cells.len()),
            OffSwitch::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl OffSwitch {
    pub fn custom(f: impl Fn(usize, usize, NodeId, usize) -> f64 + Send + Sync + 'static) -> Self {
        OffSwitch::Custom(Arc::new(f))
    }

    pub fn value(&self, agent: usize, period: usize, node: NodeId, state: usize) -> f64 {
        match self {
            OffSwitch::Zero => 0.0,
            OffSwitch::Table(t) => t.cells[node][agent][state],
            OffSwitch::Custom(f) => f(agent, period, node, state),
        }
    }
}

/// Coupling policy and off-switch. The task policy, boundary profile and
/// variant belong to the [`Model`] the mechanism is evaluated on.
#[derive(Clone, Debug, Default)]
pub struct Mechanism {
    pub coupling: CouplingPolicy,
    pub off_switch: OffSwitch,
}

impl Mechanism {
    pub fn new(coupling: CouplingPolicy, off_switch: OffSwitch) -> Self {
        Mechanism { coupling, off_switch }
    }

    /// Coupling value at `node` for the joint action `actions`.
    pub fn coupling_value(&self, model: &Model, agent: usize, node: NodeId, actions: &[Option<usize>]) -> Result<f64> {
        let n = model.tree.node(node);
        if actions.len() != model.game.agents() {
            return Err(Error::ProfileDimension { expected: model.game.agents(), got: actions.len() });
        }
        let values = model.tree.action_values(node, actions)?;
        let code = model.tree.joint_code(node, actions);
        Ok(self.coupling.value(&CouplingQuery {
            agent,
            period: n.period,
            node,
            code,
            history: &n.history,
            actions,
            values: &values,
        }))
    }

    /// φ at a node; `None` stands for period T+1 where φ is zero.
    pub fn off_value(&self, agent: usize, period: usize, node: Option<NodeId>, state: usize) -> f64 {
        match node {
            Some(n) => self.off_switch.value(agent, period, n, state),
            None => 0.0,
        }
    }

    /// Single-period utility with the off-menu decision: φ when quitting,
    /// `u + ρ` otherwise.
    pub fn utility_with_om(
        &self,
        model: &Model,
        agent: usize,
        node: Option<NodeId>,
        quit: bool,
        actions: &[Option<usize>],
        state: usize,
    ) -> Result<f64> {
        let Some(node) = node else {
            // period T+1
            return if quit { Ok(0.0) } else { Err(Error::Period { period: model.game.horizon() + 1, horizon: model.game.horizon() }) };
        };
        let period = model.tree.node(node).period;
        if quit {
            return Ok(self.off_switch.value(agent, period, node, state));
        }
        let values = model.tree.action_values(node, actions)?;
        let s = model.game.grid(agent, period).value(state);
        let u = model.game.reward(agent, period, s, &values)?;
        Ok(u + self.coupling_value(model, agent, node, actions)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionSet, AdditiveDynamics, Grid, ProductReward, ShockModel};

    fn g1() -> BaseGame {
        BaseGame::stationary(
            1,
            2,
            Grid::uniform(0.0, 1.0, 5).unwrap(),
            ActionSet::new(0.0, 1.0).unwrap(),
            ShockModel::uniform(vec![-0.25, 0.0, 0.25]).unwrap(),
            Arc::new(AdditiveDynamics::default()),
            Arc::new(ProductReward::default()),
        )
        .unwrap()
    }

    #[test]
    fn identity_menu_is_grid() {
        let g = g1();
        let m = action_menu(&g, 0, 1, &[], &TaskPolicy::Identity).unwrap();
        assert_eq!(m.actions, g.grid(0, 1).nodes());
        assert!(m.is_injective());
    }

    #[test]
    fn constant_menu_is_singleton() {
        let g = g1();
        let m = action_menu(&g, 0, 1, &[], &TaskPolicy::Linear { slope: 0.0, intercept: 0.3 }).unwrap();
        assert_eq!(m.actions, vec![0.3]);
        assert_eq!(m.generators[0], vec![0, 1, 2, 3, 4]);
        assert_eq!(m.representative(0), 4);
    }

    #[test]
    fn reflected_menu() {
        let g = g1();
        let m = action_menu(&g, 0, 1, &[], &TaskPolicy::Linear { slope: -1.0, intercept: 1.0 }).unwrap();
        assert_eq!(m.actions, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(m.state_action, vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn out_of_range_image_rejected() {
        let g = g1();
        let err = action_menu(&g, 0, 1, &[], &TaskPolicy::Linear { slope: 2.0, intercept: 0.0 });
        assert!(matches!(err, Err(Error::ActionOutOfRange { .. })));
    }

    #[test]
    fn boundary_validation() {
        let g = g1();
        assert!(BoundaryProfile::uniform_values(&g, &[(0.0, 0.25), (0.75, 1.0)]).is_ok());
        assert!(BoundaryProfile::uniform_values(&g, &[(0.5, 0.25)]).is_err());
        assert!(BoundaryProfile::uniform_values(&g, &[(0.0, 0.5), (0.5, 1.0)]).is_err());
        assert!(BoundaryProfile::uniform_values(&g, &[(0.1, 0.5)]).is_err());
    }
}
