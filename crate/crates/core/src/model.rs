//! Discretized base game: grids, shocks, state dynamics and rewards.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NODE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    nodes: Vec<f64>,
}

impl Grid {
    pub fn uniform(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::Grid(format!("need at least 2 points, got {points}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Grid(format!("bounds [{lo}, {hi}] are not increasing")));
        }
        let step = (hi - lo) / (points - 1) as f64;
        let mut nodes: Vec<f64> = (0..points).map(|k| lo + step * k as f64).collect();
        nodes[points - 1] = hi;
        Ok(Grid { nodes })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Grid(format!("need at least 2 points, got {}", nodes.len())));
        }
        if nodes.iter().any(|x| !x.is_finite()) {
            return Err(Error::Grid("non-finite node".into()));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Grid("nodes must be strictly increasing".into()));
        }
        Ok(Grid { nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.nodes[0]
    }

    pub fn hi(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Average spacing; equals the exact spacing on uniform grids.
    pub fn step(&self) -> f64 {
        (self.hi() - self.lo()) / (self.len() - 1) as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn value(&self, idx: usize) -> f64 {
        self.nodes[idx]
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo(), self.hi())
    }

    /// Index of the nearest node after clamping; ties go to the larger node.
    pub fn snap(&self, x: f64) -> usize {
        let x = self.clamp(x);
        let upper = self.nodes.partition_point(|&v| v < x);
        if upper == 0 {
            return 0;
        }
        if upper == self.nodes.len() {
            return upper - 1;
        }
        let below = x - self.nodes[upper - 1];
        let above = self.nodes[upper] - x;
        if above <= below {
            upper
        } else {
            upper - 1
        }
    }

    /// Index of the node equal to `x` up to a small tolerance.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let idx = self.snap(x);
        let scale = 1.0 + x.abs().max(self.nodes[idx].abs());
        ((self.nodes[idx] - x).abs() <= NODE_TOL * scale).then_some(idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub lo: f64,
    pub hi: f64,
}

impl ActionSet {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Grid(format!("action bounds [{lo}, {hi}] are invalid")));
        }
        Ok(ActionSet { lo, hi })
    }

    pub fn contains(&self, a: f64) -> bool {
        let tol = 1e-12 * (1.0 + a.abs());
        a >= self.lo - tol && a <= self.hi + tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShockModel {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl ShockModel {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shock("empty support".into()));
        }
        if values.len() != weights.len() {
            return Err(Error::Shock(format!(
                "{} values but {} weights",
                values.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Shock("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Shock(format!("weights sum to {total}, not 1")));
        }
        Ok(ShockModel { values, weights })
    }

    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::Shock("empty support".into()));
        }
        let mut weights = vec![1.0 / n as f64; n];
        // make the sum exactly one for the validation step
        let head: f64 = weights[..n - 1].iter().sum();
        weights[n - 1] = 1.0 - head;
        Self::new(values, weights)
    }

    pub fn degenerate(value: f64) -> Self {
        ShockModel { values: vec![value], weights: vec![1.0] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Shocks are idiosyncratic: each agent draws independently.
    pub fn idiosyncratic(&self) -> bool {
        true
    }

    pub fn index_of(&self, omega: f64) -> Result<usize> {
        self.values
            .iter()
            .position(|&v| (v - omega).abs() <= 1e-12 * (1.0 + v.abs()))
            .ok_or(Error::UnknownShock(omega))
    }
}

/// One period of public history: the menu index chosen by each participant
/// (`None` for agents no longer present) together with the action values.
#[derive(Clone, Debug)]
pub struct Record {
    pub actions: Vec<Option<usize>>,
    pub values: Vec<Option<f64>>,
}

impl Record {
    pub fn participants(&self) -> impl Iterator<Item = usize> + '_ {
        self.actions
            .iter()
            .enumerate()
            .filter_map(|(j, a)| a.map(|_| j))
    }

    pub fn is_present(&self, agent: usize) -> bool {
        self.actions.get(agent).is_some_and(|a| a.is_some())
    }
}

impl PartialEq for Record {
    fn eq(&self, other: &Self) -> bool {
        self.actions == other.actions
    }
}

impl Eq for Record {}

impl Hash for Record {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.actions.hash(state);
    }
}

/// Inputs to a single transition. `period` is the period being left and
/// `history` already contains that period's record, so it has `period` entries.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub agent: usize,
    pub period: usize,
    pub history: &'a [Record],
}

impl<'a> StepContext<'a> {
    pub fn profile(&self) -> &'a [Option<f64>] {
        match self.history.last() {
            Some(r) => &r.values,
            None => &[],
        }
    }

    pub fn own_action(&self) -> Option<f64> {
        self.profile().get(self.agent).copied().flatten()
    }

    pub fn others_sum(&self) -> f64 {
        self.profile()
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != self.agent)
            .filter_map(|(_, a)| *a)
            .sum()
    }
}

pub trait Dynamics: Send + Sync + fmt::Debug {
    /// Raw (unclamped) next state.
    fn next_state(&self, ctx: &StepContext<'_>, s: f64, omega: f64) -> f64;

    fn state_derivative(&self, _ctx: &StepContext<'_>, _s: f64, _omega: f64) -> Option<f64> {
        None
    }
}

pub trait Reward: Send + Sync + fmt::Debug {
    fn value(&self, agent: usize, period: usize, s: f64, profile: &[Option<f64>]) -> f64;

    fn state_derivative(
        &self,
        _agent: usize,
        _period: usize,
        _s: f64,
        _profile: &[Option<f64>],
    ) -> Option<f64> {
        None
    }
}

/// `κ = persistence·s + drift + action_coef·a_i + cross_coef·Σ_{j≠i} a_j + ω`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveDynamics {
    pub persistence: f64,
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub action_coef: f64,
    #[serde(default)]
    pub cross_coef: f64,
}

impl Default for AdditiveDynamics {
    fn default() -> Self {
        AdditiveDynamics { persistence: 1.0, drift: 0.0, action_coef: 0.0, cross_coef: 0.0 }
    }
}

impl Dynamics for AdditiveDynamics {
    fn next_state(&self, ctx: &StepContext<'_>, s: f64, omega: f64) -> f64 {
        let mut x = self.persistence * s + self.drift + omega;
        if self.action_coef != 0.0 {
            x += self.action_coef * ctx.own_action().unwrap_or(0.0);
        }
        if self.cross_coef != 0.0 {
            x += self.cross_coef * ctx.others_sum();
        }
        x
    }

    fn state_derivative(&self, _ctx: &StepContext<'_>, _s: f64, _omega: f64) -> Option<f64> {
        Some(self.persistence)
    }
}

/// State-independent draws: `κ = level + ω`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IidDynamics {
    #[serde(default)]
    pub level: f64,
}

impl Dynamics for IidDynamics {
    fn next_state(&self, _ctx: &StepContext<'_>, _s: f64, omega: f64) -> f64 {
        self.level + omega
    }

    fn state_derivative(&self, _ctx: &StepContext<'_>, _s: f64, _omega: f64) -> Option<f64> {
        Some(0.0)
    }
}

type DynFn = dyn Fn(&StepContext<'_>, f64, f64) -> f64 + Send + Sync;
type RewardFn = dyn Fn(usize, usize, f64, &[Option<f64>]) -> f64 + Send + Sync;

/// Dynamics from a closure, with an optional analytic derivative.
#[derive(Clone)]
pub struct FnDynamics {
    f: Arc<DynFn>,
    df: Option<Arc<DynFn>>,
}

impl FnDynamics {
    pub fn new(f: impl Fn(&StepContext<'_>, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        FnDynamics { f: Arc::new(f), df: None }
    }

    pub fn with_derivative(
        mut self,
        df: impl Fn(&StepContext<'_>, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.df = Some(Arc::new(df));
        self
    }
}

impl fmt::Debug for FnDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnDynamics").field("analytic_derivative", &self.df.is_some()).finish()
    }
}

impl Dynamics for FnDynamics {
    fn next_state(&self, ctx: &StepContext<'_>, s: f64, omega: f64) -> f64 {
        (self.f)(ctx, s, omega)
    }

    fn state_derivative(&self, ctx: &StepContext<'_>, s: f64, omega: f64) -> Option<f64> {
        self.df.as_ref().map(|df| df(ctx, s, omega))
    }
}

/// `u = scale·s·a_i − cost·a_i²/2 + cross·Σ_{j≠i} a_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductReward {
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub cost: f64,
    #[serde(default)]
    pub cross: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ProductReward {
    fn default() -> Self {
        ProductReward { scale: 1.0, cost: 0.0, cross: 0.0 }
    }
}

impl Reward for ProductReward {
    fn value(&self, agent: usize, _period: usize, s: f64, profile: &[Option<f64>]) -> f64 {
        let a = profile[agent].unwrap_or(0.0);
        let others: f64 = profile
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != agent)
            .filter_map(|(_, x)| *x)
            .sum();
        self.scale * s * a - 0.5 * self.cost * a * a + self.cross * others
    }

    fn state_derivative(
        &self,
        agent: usize,
        _period: usize,
        _s: f64,
        profile: &[Option<f64>],
    ) -> Option<f64> {
        Some(self.scale * profile[agent].unwrap_or(0.0))
    }
}

/// Additively separable reward `u = slope_t·s + intercept + linear·a + quadratic·a²`.
/// `slope` holds one coefficient per period; a single entry applies to all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveReward {
    pub slope: Vec<f64>,
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub linear: f64,
    #[serde(default)]
    pub quadratic: f64,
}

impl AdditiveReward {
    fn slope_at(&self, period: usize) -> f64 {
        match self.slope.len() {
            0 => 0.0,
            1 => self.slope[0],
            n => self.slope[(period - 1).min(n - 1)],
        }
    }
}

impl Reward for AdditiveReward {
    fn value(&self, agent: usize, period: usize, s: f64, profile: &[Option<f64>]) -> f64 {
        let a = profile[agent].unwrap_or(0.0);
        self.slope_at(period) * s + self.intercept + self.linear * a + self.quadratic * a * a
    }

    fn state_derivative(
        &self,
        _agent: usize,
        period: usize,
        _s: f64,
        _profile: &[Option<f64>],
    ) -> Option<f64> {
        Some(self.slope_at(period))
    }
}

#[derive(Clone)]
pub struct FnReward {
    f: Arc<RewardFn>,
    df: Option<Arc<RewardFn>>,
}

impl FnReward {
    pub fn new(
        f: impl Fn(usize, usize, f64, &[Option<f64>]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnReward { f: Arc::new(f), df: None }
    }

    pub fn with_derivative(
        mut self,
        df: impl Fn(usize, usize, f64, &[Option<f64>]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.df = Some(Arc::new(df));
        self
    }
}

impl fmt::Debug for FnReward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnReward").field("analytic_derivative", &self.df.is_some()).finish()
    }
}

impl Reward for FnReward {
    fn value(&self, agent: usize, period: usize, s: f64, profile: &[Option<f64>]) -> f64 {
        (self.f)(agent, period, s, profile)
    }

    fn state_derivative(
        &self,
        agent: usize,
        period: usize,
        s: f64,
        profile: &[Option<f64>],
    ) -> Option<f64> {
        self.df.as_ref().map(|df| df(agent, period, s, profile))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportMode {
    #[default]
    Strict,
    Reachable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportViolation {
    pub agent: usize,
    pub period: usize,
    /// Source state index; `None` for a column (successor never reached).
    pub state: Option<usize>,
    pub successor: usize,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullSupportReport {
    pub passed: bool,
    pub mode: SupportMode,
    pub eps_min: f64,
    pub probes: usize,
    pub violations: Vec<SupportViolation>,
    pub note: String,
}

/// A successor on the next-period grid with its probability and, when
/// requested, the derivative of the (clamped) transition map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Move {
    pub next: usize,
    pub prob: f64,
    pub shock: usize,
    pub ds: f64,
}

#[derive(Clone, Debug)]
pub struct BaseGame {
    agents: usize,
    horizon: usize,
    grids: Vec<Vec<Grid>>,
    actions: Vec<Vec<ActionSet>>,
    shocks: ShockModel,
    initial: Vec<Vec<f64>>,
    dynamics: Arc<dyn Dynamics>,
    reward: Arc<dyn Reward>,
    eps_min: f64,
    finite_differences: bool,
}

impl BaseGame {
    /// `grids[i][t-1]` and `actions[i][t-1]`; the initial distribution is
    /// uniform over the period-1 grid until set otherwise.
    pub fn new(
        grids: Vec<Vec<Grid>>,
        actions: Vec<Vec<ActionSet>>,
        shocks: ShockModel,
        dynamics: Arc<dyn Dynamics>,
        reward: Arc<dyn Reward>,
    ) -> Result<Self> {
        let agents = grids.len();
        if agents == 0 {
            return Err(Error::Grid("no agents".into()));
        }
        let horizon = grids[0].len();
        if horizon == 0 {
            return Err(Error::Grid("horizon must be at least 1".into()));
        }
        if grids.iter().any(|g| g.len() != horizon) {
            return Err(Error::Grid("every agent needs one grid per period".into()));
        }
        if actions.len() != agents || actions.iter().any(|a| a.len() != horizon) {
            return Err(Error::Grid("every agent needs one action set per period".into()));
        }
        let initial = grids
            .iter()
            .map(|g| {
                let m = g[0].len();
                vec![1.0 / m as f64; m]
            })
            .collect();
        Ok(BaseGame {
            agents,
            horizon,
            grids,
            actions,
            shocks,
            initial,
            dynamics,
            reward,
            eps_min: 1e-9,
            finite_differences: true,
        })
    }

    /// Same grid and action set for every agent and period.
    pub fn stationary(
        agents: usize,
        horizon: usize,
        grid: Grid,
        actions: ActionSet,
        shocks: ShockModel,
        dynamics: Arc<dyn Dynamics>,
        reward: Arc<dyn Reward>,
    ) -> Result<Self> {
        Self::new(
            vec![vec![grid; horizon]; agents],
            vec![vec![actions; horizon]; agents],
            shocks,
            dynamics,
            reward,
        )
    }

    pub fn with_initial(mut self, initial: Vec<Vec<f64>>) -> Result<Self> {
        if initial.len() != self.agents {
            return Err(Error::Grid("initial distribution per agent required".into()));
        }
        for (i, p) in initial.iter().enumerate() {
            if p.len() != self.grids[i][0].len() {
                return Err(Error::Grid(format!("initial distribution of agent {i} has wrong length")));
            }
            let total: f64 = p.iter().sum();
            if p.iter().any(|x| *x < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Grid(format!("initial distribution of agent {i} is not a distribution")));
            }
        }
        self.initial = initial;
        Ok(self)
    }

    pub fn with_eps_min(mut self, eps: f64) -> Self {
        self.eps_min = eps;
        self
    }

    pub fn without_finite_differences(mut self) -> Self {
        self.finite_differences = false;
        self
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn shocks(&self) -> &ShockModel {
        &self.shocks
    }

    pub fn eps_min(&self) -> f64 {
        self.eps_min
    }

    pub fn initial(&self, agent: usize) -> &[f64] {
        &self.initial[agent]
    }

    pub fn grid(&self, agent: usize, period: usize) -> &Grid {
        &self.grids[agent][period - 1]
    }

    pub fn actions(&self, agent: usize, period: usize) -> ActionSet {
        self.actions[agent][period - 1]
    }

    pub fn dynamics(&self) -> &Arc<dyn Dynamics> {
        &self.dynamics
    }

    pub fn reward_model(&self) -> &Arc<dyn Reward> {
        &self.reward
    }

    pub fn check_period(&self, period: usize) -> Result<()> {
        if period == 0 || period > self.horizon {
            return Err(Error::Period { period, horizon: self.horizon });
        }
        Ok(())
    }

    pub fn check_agent(&self, agent: usize) -> Result<()> {
        if agent >= self.agents {
            return Err(Error::Agent { agent, agents: self.agents });
        }
        Ok(())
    }

    fn check_step(&self, agent: usize, period: usize, history: &[Record]) -> Result<()> {
        self.check_agent(agent)?;
        if period == 0 || period >= self.horizon {
            return Err(Error::Period { period, horizon: self.horizon.saturating_sub(1) });
        }
        if history.len() != period {
            return Err(Error::HistoryLength { expected: period, got: history.len() });
        }
        Ok(())
    }

    /// Next-period state, clamped and snapped to the period `period + 1` grid.
    /// `history` must include the record of `period`.
    pub fn transition(
        &self,
        agent: usize,
        period: usize,
        s: f64,
        history: &[Record],
        omega: f64,
    ) -> Result<f64> {
        self.check_step(agent, period, history)?;
        self.shocks.index_of(omega)?;
        let ctx = StepContext { agent, period, history };
        let next = self.grid(agent, period + 1);
        Ok(next.value(next.snap(self.dynamics.next_state(&ctx, s, omega))))
    }

    /// Successors of `s` with probabilities, one entry per shock value.
    pub fn moves(&self, ctx: &StepContext<'_>, s: f64, with_derivative: bool) -> Result<Vec<Move>> {
        let next = self.grid(ctx.agent, ctx.period + 1);
        let mut out = Vec::with_capacity(self.shocks.len());
        for (k, (&omega, &w)) in self.shocks.values.iter().zip(&self.shocks.weights).enumerate() {
            let raw = self.dynamics.next_state(ctx, s, omega);
            let ds = if with_derivative { self.raw_derivative(ctx, s, omega, raw, next)? } else { 0.0 };
            out.push(Move { next: next.snap(raw), prob: w, shock: k, ds });
        }
        Ok(out)
    }

    fn raw_derivative(
        &self,
        ctx: &StepContext<'_>,
        s: f64,
        omega: f64,
        raw: f64,
        next: &Grid,
    ) -> Result<f64> {
        if raw < next.lo() || raw > next.hi() {
            return Ok(0.0);
        }
        if let Some(d) = self.dynamics.state_derivative(ctx, s, omega) {
            return Ok(d);
        }
        if !self.finite_differences {
            return Err(Error::NoDerivative);
        }
        let h = self.grid(ctx.agent, ctx.period).step() / 10.0;
        let up = self.dynamics.next_state(ctx, s + h, omega);
        let dn = self.dynamics.next_state(ctx, s - h, omega);
        Ok((up - dn) / (2.0 * h))
    }

    /// Derivative of the clamped transition map in the current state.
    pub fn transition_derivative(
        &self,
        agent: usize,
        period: usize,
        s: f64,
        history: &[Record],
        omega: f64,
    ) -> Result<f64> {
        self.check_step(agent, period, history)?;
        self.shocks.index_of(omega)?;
        let ctx = StepContext { agent, period, history };
        let raw = self.dynamics.next_state(&ctx, s, omega);
        self.raw_derivative(&ctx, s, omega, raw, self.grid(agent, period + 1))
    }

    /// Dense next-period distribution over the grid of `period + 1`.
    pub fn kernel(&self, agent: usize, period: usize, s: f64, history: &[Record]) -> Result<Vec<f64>> {
        self.check_step(agent, period, history)?;
        let ctx = StepContext { agent, period, history };
        let mut p = vec![0.0; self.grid(agent, period + 1).len()];
        for mv in self.moves(&ctx, s, false)? {
            p[mv.next] += mv.prob;
        }
        Ok(p)
    }

    /// `P(next state ≤ s_prime | s, h)` for the transition into `next_period`.
    pub fn transition_cdf(
        &self,
        agent: usize,
        next_period: usize,
        s_prime: f64,
        s: f64,
        history: &[Record],
    ) -> Result<f64> {
        let period = next_period.checked_sub(1).ok_or(Error::Period { period: 0, horizon: self.horizon })?;
        let grid = self.grid(agent, next_period.min(self.horizon).max(1)).clone();
        let p = self.kernel(agent, period, s, history)?;
        let mut acc = 0.0;
        for (k, mass) in p.iter().enumerate() {
            if grid.value(k) <= s_prime + 1e-12 {
                acc += mass;
            }
        }
        Ok(acc.min(1.0))
    }

    pub fn reward(&self, agent: usize, period: usize, s: f64, profile: &[Option<f64>]) -> Result<f64> {
        self.check_agent(agent)?;
        self.check_period(period)?;
        if profile.len() != self.agents {
            return Err(Error::ProfileDimension { expected: self.agents, got: profile.len() });
        }
        if profile[agent].is_none() {
            return Err(Error::NotParticipating { agent });
        }
        Ok(self.reward.value(agent, period, s, profile))
    }

    pub fn reward_derivative(
        &self,
        agent: usize,
        period: usize,
        s: f64,
        profile: &[Option<f64>],
    ) -> Result<f64> {
        if let Some(d) = self.reward.state_derivative(agent, period, s, profile) {
            return Ok(d);
        }
        if !self.finite_differences {
            return Err(Error::NoDerivative);
        }
        let h = self.grid(agent, period).step() / 10.0;
        let up = self.reward.value(agent, period, s + h, profile);
        let dn = self.reward.value(agent, period, s - h, profile);
        Ok((up - dn) / (2.0 * h))
    }

    /// Probe histories of length `period` where every agent plays the same
    /// action bound in every period.
    pub fn default_probes(&self, period: usize) -> Vec<Vec<Record>> {
        let mut probes = Vec::new();
        for pick_hi in [false, true] {
            let values: Vec<Option<f64>> = (0..self.agents)
                .map(|j| {
                    let a = self.actions(j, period);
                    Some(if pick_hi { a.hi } else { a.lo })
                })
                .collect();
            let rec = Record { actions: vec![Some(0); self.agents], values };
            probes.push(vec![rec; period]);
        }
        probes
    }

    pub fn validate_full_support(&self, mode: SupportMode) -> FullSupportReport {
        let probes: Vec<Vec<Vec<Record>>> =
            (1..self.horizon).map(|t| self.default_probes(t)).collect();
        self.validate_full_support_with(mode, &probes, "constant-action probes")
    }

    /// `probes[t-1]` lists the histories (each of length t) used at period t.
    pub fn validate_full_support_with(
        &self,
        mode: SupportMode,
        probes: &[Vec<Vec<Record>>],
        note: &str,
    ) -> FullSupportReport {
        let eps = self.eps_min;
        let mut violations = Vec::new();
        let mut count = 0;
        for agent in 0..self.agents {
            for period in 1..self.horizon {
                let here = self.grid(agent, period);
                let next_len = self.grid(agent, period + 1).len();
                for h in probes.get(period - 1).map(|v| v.as_slice()).unwrap_or(&[]) {
                    if !h.last().is_some_and(|r| r.is_present(agent)) {
                        continue;
                    }
                    count += 1;
                    let rows: Vec<Vec<f64>> = here
                        .nodes()
                        .iter()
                        .map(|&s| self.kernel(agent, period, s, h).unwrap_or_else(|_| vec![0.0; next_len]))
                        .collect();
                    match mode {
                        SupportMode::Strict => {
                            for (si, row) in rows.iter().enumerate() {
                                for (k, &m) in row.iter().enumerate() {
                                    if m < eps {
                                        violations.push(SupportViolation {
                                            agent,
                                            period,
                                            state: Some(si),
                                            successor: k,
                                            mass: m,
                                        });
                                    }
                                }
                            }
                        }
                        SupportMode::Reachable => {
                            for k in 0..next_len {
                                let best = rows.iter().map(|r| r[k]).fold(0.0, f64::max);
                                if best < eps {
                                    violations.push(SupportViolation {
                                        agent,
                                        period,
                                        state: None,
                                        successor: k,
                                        mass: best,
                                    });
                                }
                            }
                            for (si, row) in rows.iter().enumerate() {
                                let first = row.iter().position(|&m| m >= eps);
                                let last = row.iter().rposition(|&m| m >= eps);
                                if let (Some(a), Some(b)) = (first, last) {
                                    for (k, &m) in row.iter().enumerate().take(b).skip(a) {
                                        if m < eps {
                                            violations.push(SupportViolation {
                                                agent,
                                                period,
                                                state: Some(si),
                                                successor: k,
                                                mass: m,
                                            });
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        violations.sort_by(|a, b| {
            (a.agent, a.period, a.state, a.successor).cmp(&(b.agent, b.period, b.state, b.successor))
        });
        violations.dedup_by(|a, b| {
            (a.agent, a.period, a.state, a.successor) == (b.agent, b.period, b.state, b.successor)
        });
        FullSupportReport {
            passed: violations.is_empty(),
            mode,
            eps_min: eps,
            probes: count,
            violations,
            note: format!(
                "discrete surrogate for strictly increasing CDFs ({note}); strict = every successor has mass ≥ eps_min"
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1() -> BaseGame {
        BaseGame::stationary(
            1,
            3,
            Grid::uniform(0.0, 1.0, 5).unwrap(),
            ActionSet::new(0.0, 1.0).unwrap(),
            ShockModel::uniform(vec![-0.25, 0.0, 0.25]).unwrap(),
            Arc::new(AdditiveDynamics::default()),
            Arc::new(ProductReward::default()),
        )
        .unwrap()
    }

    fn hist(t: usize) -> Vec<Record> {
        vec![Record { actions: vec![Some(0)], values: vec![Some(0.5)] }; t]
    }

    #[test]
    fn snap_ties_go_up() {
        let g = Grid::uniform(0.0, 1.0, 5).unwrap();
        assert_eq!(g.snap(0.125), 1);
        assert_eq!(g.snap(0.124), 0);
        assert_eq!(g.snap(-3.0), 0);
        assert_eq!(g.snap(7.0), 4);
        assert_eq!(g.index_of(0.75), Some(3));
        assert_eq!(g.index_of(0.7), None);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(Grid::uniform(0.0, 1.0, 1).is_err());
        assert!(Grid::uniform(1.0, 0.0, 3).is_err());
        assert!(Grid::from_nodes(vec![0.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn shock_weights_validated() {
        assert!(ShockModel::new(vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(ShockModel::new(vec![0.0], vec![1.0]).is_ok());
        assert!(ShockModel::new(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn g1_transitions() {
        let g = g1();
        let h = hist(1);
        assert_eq!(g.transition(0, 1, 0.5, &h, 0.0).unwrap(), 0.5);
        assert_eq!(g.transition(0, 1, 0.5, &h, 0.25).unwrap(), 0.75);
        assert_eq!(g.transition(0, 1, 1.0, &h, 0.25).unwrap(), 1.0);
        assert!(matches!(g.transition(0, 1, 0.5, &h, 0.1), Err(Error::UnknownShock(_))));
        assert!(matches!(
            g.transition(0, 1, 0.5, &hist(2), 0.0),
            Err(Error::HistoryLength { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn g1_cdf() {
        let g = g1();
        let h = hist(1);
        assert!((g.transition_cdf(0, 2, 0.5, 0.5, &h).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.transition_cdf(0, 2, 1.0, 0.5, &h).unwrap(), 1.0);
        let p = g.kernel(0, 1, 0.0, &h).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_shock_cdf_below_state_is_zero() {
        let g = BaseGame::stationary(
            1,
            2,
            Grid::uniform(0.0, 1.0, 5).unwrap(),
            ActionSet::new(0.0, 1.0).unwrap(),
            ShockModel::degenerate(0.0),
            Arc::new(AdditiveDynamics::default()),
            Arc::new(ProductReward::default()),
        )
        .unwrap();
        assert_eq!(g.transition_cdf(0, 2, 0.5 - 1e-6, 0.5, &hist(1)).unwrap(), 0.0);
        let report = g.validate_full_support(SupportMode::Strict);
        assert!(!report.passed);
        // per probe and state: every successor except the image
        assert_eq!(report.violations.len(), 5 * 4);
    }

    #[test]
    fn product_reward() {
        let g = g1();
        assert_eq!(g.reward(0, 1, 0.5, &[Some(1.0)]).unwrap(), 0.5);
        assert_eq!(g.reward(0, 1, 0.0, &[Some(0.7)]).unwrap(), 0.0);
        assert!(matches!(
            g.reward(0, 1, 0.5, &[Some(1.0), None]),
            Err(Error::ProfileDimension { .. })
        ));
    }

    #[test]
    fn g1_support_modes() {
        let g = g1();
        let strict = g.validate_full_support(SupportMode::Strict);
        assert!(!strict.passed);
        assert!(strict.violations.iter().any(|v| v.state == Some(2) && v.successor == 0));
        assert!(g.validate_full_support(SupportMode::Reachable).passed);
    }

    #[test]
    fn finite_difference_fallback() {
        let dynamics = FnDynamics::new(|_, s, w| 0.5 * s + w);
        let reward = FnReward::new(|_, _, s, _| 3.0 * s);
        let g = BaseGame::stationary(
            1,
            2,
            Grid::uniform(0.0, 1.0, 5).unwrap(),
            ActionSet::new(0.0, 1.0).unwrap(),
            ShockModel::degenerate(0.0),
            Arc::new(dynamics),
            Arc::new(reward),
        )
        .unwrap();
        let h = hist(1);
        assert!((g.transition_derivative(0, 1, 0.5, &h, 0.0).unwrap() - 0.5).abs() < 1e-9);
        assert!((g.reward_derivative(0, 1, 0.5, &[Some(0.0)]).unwrap() - 3.0).abs() < 1e-9);
        let g = g.without_finite_differences();
        assert!(matches!(g.reward_derivative(0, 1, 0.5, &[Some(0.0)]), Err(Error::NoDerivative)));
    }

    #[test]
    fn clamped_image_has_zero_derivative() {
        let g = g1();
        let h = hist(1);
        assert_eq!(g.transition_derivative(0, 1, 1.0, &h, 0.25).unwrap(), 0.0);
        assert_eq!(g.transition_derivative(0, 1, 0.5, &h, 0.25).unwrap(), 1.0);
    }
}
