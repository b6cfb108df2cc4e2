//! Reference instances used by the tests, the benches and the bundled
//! CLI scenarios.

use rand::Rng;

use crate::mechanism::Variant;
use crate::model::{ActionSet, AdditiveDynamics, AdditiveReward, IidDynamics, ProductReward, SupportMode};
use crate::par::Exec;
use crate::scenario::{DynamicsSpec, GridSpec, RewardSpec, Scenario, ShockSpec, TaskSpec};
use crate::tree::{Model, DEFAULT_NODE_LIMIT};

fn base(name: &str, agents: usize, horizon: usize, variant: Variant) -> Scenario {
    Scenario {
        name: name.to_string(),
        agents,
        horizon,
        grid: Some(GridSpec::Uniform { lo: 0.0, hi: 1.0, points: 5 }),
        period_grids: None,
        actions: ActionSet { lo: 0.0, hi: 1.0 },
        shocks: ShockSpec { values: vec![-0.25, 0.0, 0.25], weights: None },
        initial: None,
        dynamics: DynamicsSpec::Additive(AdditiveDynamics::default()),
        reward: RewardSpec::Product(ProductReward::default()),
        task: TaskSpec::Identity,
        variant,
        boundary: Vec::new(),
        period_boundary: None,
        full_cover: false,
        theta: None,
        refinement: 1,
        lipschitz: 1.0,
        support_mode: SupportMode::Reachable,
        eps_min: None,
        node_limit: DEFAULT_NODE_LIMIT,
        mechanism: None,
    }
}

/// Five states on [0, 1], shocks {−¼, 0, ¼}, clamped random walk,
/// `u = s·a`, identity task policy, three periods.
pub fn g1(variant: Variant, boundary: &[(f64, f64)]) -> Scenario {
    let mut s = base("g1", 1, 3, variant);
    s.boundary = boundary.to_vec();
    s.full_cover = variant == Variant::Knowledgeable;
    s
}

pub fn g1_model(variant: Variant, boundary: &[(f64, f64)]) -> Model {
    g1(variant, boundary).model(Exec::default()).expect("g1 builds")
}

/// Period grids widening by one shock step on each side per period, so the
/// random walk never clamps.
pub fn expanding_grids(horizon: usize) -> Vec<GridSpec> {
    (1..=horizon)
        .map(|t| {
            let w = 0.25 * (t - 1) as f64;
            GridSpec::Uniform { lo: -w, hi: 1.0 + w, points: 5 + 2 * (t - 1) }
        })
        .collect()
}

/// Additively separable instance `u = slope_t·s + R(a)` with `κ = s + ω`
/// on widening grids and the identity task policy.
pub fn g2_with(agents: usize, horizon: usize, slope: Vec<f64>, linear: f64, quadratic: f64) -> Scenario {
    let mut s = base("g2", agents, horizon, Variant::Ir);
    s.grid = None;
    s.period_grids = Some(expanding_grids(horizon));
    let w = 0.25 * (horizon - 1) as f64;
    s.actions = ActionSet { lo: -w, hi: 1.0 + w };
    s.reward = RewardSpec::Additive(AdditiveReward { slope, intercept: 0.0, linear, quadratic });
    s
}

/// Unit-slope instance with `R ≡ 0`.
pub fn g2(horizon: usize) -> Scenario {
    g2_with(1, horizon, vec![1.0], 0.0, 0.0)
}

/// Two agents on the unit-slope instance; each quits at the bottom state
/// of every period's grid.
pub fn g2_pair_bottom_quit(horizon: usize) -> Scenario {
    let mut s = g2_with(2, horizon, vec![1.0], 0.0, 0.0);
    s.name = "g2-pair".into();
    s.variant = Variant::Horizontal;
    s.period_boundary = Some(
        (1..=horizon)
            .map(|t| {
                let lo = -0.25 * (t - 1) as f64;
                vec![(lo, lo)]
            })
            .collect(),
    );
    s
}

/// Single-agent instance with state-independent draws and a marginal
/// carrier that dips to the same level at ¼ and ¾; both are off-regions.
pub fn iid_dip(horizon: usize) -> Scenario {
    let mut s = base("iid-dip", 1, horizon, Variant::Horizontal);
    s.dynamics = DynamicsSpec::Iid(IidDynamics { level: 0.5 });
    s.shocks = ShockSpec { values: vec![-0.5, -0.25, 0.0, 0.25, 0.5], weights: None };
    s.actions = ActionSet { lo: -3.0, hi: 3.0 };
    s.task = TaskSpec::Table { table: vec![vec![vec![-2.0, -1.0, 2.0, -3.0, 3.0]; horizon]] };
    s.boundary = vec![(0.25, 0.25), (0.75, 0.75)];
    s
}

/// Rewards vanish identically.
pub fn zero_reward(horizon: usize) -> Scenario {
    let mut s = base("zero-reward", 1, horizon, Variant::Ir);
    s.reward = RewardSpec::Additive(AdditiveReward { slope: vec![0.0], intercept: 0.0, linear: 0.0, quadratic: 0.0 });
    s
}

pub fn zero_reward_model() -> Model {
    zero_reward(3).model(Exec::default()).expect("instance builds")
}

/// Random small instance: at most two agents, three periods, five states
/// and three shocks; two agents get two periods.
pub fn random_small<R: Rng>(rng: &mut R) -> Scenario {
    let agents = rng.gen_range(1..=2);
    let horizon = if agents == 1 { rng.gen_range(2..=3) } else { 2 };
    let variant = if rng.gen_bool(0.5) { Variant::Ir } else { Variant::Horizontal };
    let mut s = base("random-small", agents, horizon, variant);
    let points = rng.gen_range(3..=5);
    s.grid = Some(GridSpec::Uniform { lo: 0.0, hi: 1.0, points });
    let step = 1.0 / (points - 1) as f64;
    s.shocks = ShockSpec {
        values: vec![-step, 0.0, step],
        weights: Some({
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = w.iter().sum();
            let mut w: Vec<f64> = w.iter().map(|x| x / total).collect();
            w[2] = 1.0 - w[0] - w[1];
            w
        }),
    };
    s.dynamics = DynamicsSpec::Additive(AdditiveDynamics {
        persistence: rng.gen_range(0.5..1.0),
        drift: rng.gen_range(-0.1..0.1),
        action_coef: rng.gen_range(-0.2..0.2),
        cross_coef: if agents == 2 { rng.gen_range(-0.2..0.2) } else { 0.0 },
    });
    s.reward = RewardSpec::Product(ProductReward {
        scale: rng.gen_range(0.5..2.0),
        cost: rng.gen_range(0.0..1.0),
        cross: if agents == 2 { rng.gen_range(-0.5..0.5) } else { 0.0 },
    });
    s.actions = ActionSet { lo: -2.0, hi: 2.0 };
    s.task = TaskSpec::Table {
        table: (0..agents)
            .map(|_| (0..horizon).map(|_| (0..points).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect())
            .collect(),
    };
    if variant == Variant::Horizontal {
        let l = rng.gen_range(0..points);
        let r = rng.gen_range(l..points);
        s.boundary = vec![(l as f64 * step, r as f64 * step)];
    }
    s
}

/// Random additively separable instance with positive slopes and a random
/// task policy table.
pub fn random_g2<R: Rng>(rng: &mut R) -> Scenario {
    let horizon = rng.gen_range(2..=3);
    let slope: Vec<f64> = (0..horizon).map(|_| rng.gen_range(0.25..2.0)).collect();
    let quadratic = if rng.gen_bool(0.5) { rng.gen_range(-1.0..1.0) } else { 0.0 };
    let mut s = g2_with(1, horizon, slope, rng.gen_range(-1.0..1.0), quadratic);
    s.name = "random-g2".into();
    let (lo, hi) = (s.actions.lo, s.actions.hi);
    s.task = TaskSpec::Table {
        table: vec![(1..=horizon).map(|t| (0..3 + 2 * t).map(|_| rng.gen_range(lo..hi)).collect()).collect()],
    };
    s
}
