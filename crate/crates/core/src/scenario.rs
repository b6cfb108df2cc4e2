//! JSON scenario files: base game, task policy, boundary profile, variant
//! and optionally a fixed mechanism.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::{
    BoundaryProfile, CouplingPolicy, CouplingTable, Mechanism, OffSwitch, OffSwitchTable, TaskPolicy, Variant,
};
use crate::model::{
    ActionSet, AdditiveDynamics, AdditiveReward, BaseGame, Dynamics, Grid, IidDynamics, ProductReward, Reward,
    ShockModel, SupportMode,
};
use crate::par::Exec;
use crate::tree::{Model, DEFAULT_NODE_LIMIT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Uniform { lo: f64, hi: f64, points: usize },
    Nodes(Vec<f64>),
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        match self {
            GridSpec::Uniform { lo, hi, points } => Grid::uniform(*lo, *hi, *points),
            GridSpec::Nodes(n) => Grid::from_nodes(n.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShockSpec {
    pub values: Vec<f64>,
    /// Uniform when omitted.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DynamicsSpec {
    Additive(AdditiveDynamics),
    Iid(IidDynamics),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    Product(ProductReward),
    Additive(AdditiveReward),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Identity,
    Linear { slope: f64, intercept: f64 },
    /// `table[agent][period-1][state]`.
    Table { table: Vec<Vec<Vec<f64>>> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    #[serde(default)]
    pub coupling: Option<CouplingTable>,
    #[serde(default)]
    pub off_switch: Option<OffSwitchTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub agents: usize,
    pub horizon: usize,
    /// Grid shared by every agent and period unless `period_grids` is set.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// One grid per period, shared by the agents.
    #[serde(default)]
    pub period_grids: Option<Vec<GridSpec>>,
    pub actions: ActionSet,
    pub shocks: ShockSpec,
    #[serde(default)]
    pub initial: Option<Vec<Vec<f64>>>,
    pub dynamics: DynamicsSpec,
    pub reward: RewardSpec,
    #[serde(default = "identity")]
    pub task: TaskSpec,
    pub variant: Variant,
    /// Boundary pairs by value, applied to every agent and period.
    #[serde(default)]
    pub boundary: Vec<(f64, f64)>,
    /// Boundary pairs by value per period (shared by the agents).
    #[serde(default)]
    pub period_boundary: Option<Vec<Vec<(f64, f64)>>>,
    /// Materialize the on-regions (needed by the knowledgeable variant).
    #[serde(default)]
    pub full_cover: bool,
    /// Anchor θ as grid indices `[agent][period-1]`; bottom state by default.
    #[serde(default)]
    pub theta: Option<Vec<Vec<usize>>>,
    #[serde(default = "one_usize")]
    pub refinement: usize,
    /// Lipschitz constant used by the envelope bound.
    #[serde(default = "one_f64")]
    pub lipschitz: f64,
    #[serde(default)]
    pub support_mode: SupportMode,
    #[serde(default)]
    pub eps_min: Option<f64>,
    #[serde(default = "node_limit")]
    pub node_limit: usize,
    /// Fixed mechanism; `verify` synthesizes one when absent.
    #[serde(default)]
    pub mechanism: Option<MechanismSpec>,
}

fn identity() -> TaskSpec {
    TaskSpec::Identity
}

fn one_usize() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

fn node_limit() -> usize {
    DEFAULT_NODE_LIMIT
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn validate(&self) -> Result<()> {
        if self.agents == 0 || self.horizon == 0 {
            return Err(Error::Scenario("agents and horizon must be positive".into()));
        }
        match (&self.grid, &self.period_grids) {
            (None, None) => return Err(Error::Scenario("either grid or period_grids is required".into())),
            (_, Some(g)) if g.len() != self.horizon => {
                return Err(Error::Scenario(format!("period_grids has {} entries, horizon is {}", g.len(), self.horizon)))
            }
            _ => {}
        }
        if let Some(b) = &self.period_boundary {
            if b.len() != self.horizon {
                return Err(Error::Scenario("period_boundary needs one entry per period".into()));
            }
        }
        if self.variant == Variant::Knowledgeable && !self.full_cover {
            return Err(Error::Scenario("the knowledgeable variant needs full_cover".into()));
        }
        Ok(())
    }

    pub fn game(&self) -> Result<BaseGame> {
        let grids: Vec<Grid> = match &self.period_grids {
            Some(g) => g.iter().map(GridSpec::build).collect::<Result<_>>()?,
            None => vec![self.grid.as_ref().unwrap().build()?; self.horizon],
        };
        let shocks = match &self.shocks.weights {
            Some(w) => ShockModel::new(self.shocks.values.clone(), w.clone())?,
            None => ShockModel::uniform(self.shocks.values.clone())?,
        };
        let dynamics: Arc<dyn Dynamics> = match &self.dynamics {
            DynamicsSpec::Additive(d) => Arc::new(d.clone()),
            DynamicsSpec::Iid(d) => Arc::new(d.clone()),
        };
        let reward: Arc<dyn Reward> = match &self.reward {
            RewardSpec::Product(r) => Arc::new(r.clone()),
            RewardSpec::Additive(r) => Arc::new(r.clone()),
        };
        let mut game = BaseGame::new(
            vec![grids; self.agents],
            vec![vec![self.actions; self.horizon]; self.agents],
            shocks,
            dynamics,
            reward,
        )?;
        if let Some(init) = &self.initial {
            game = game.with_initial(init.clone())?;
        }
        if let Some(eps) = self.eps_min {
            game = game.with_eps_min(eps);
        }
        Ok(game)
    }

    pub fn task(&self) -> TaskPolicy {
        match &self.task {
            TaskSpec::Identity => TaskPolicy::Identity,
            TaskSpec::Linear { slope, intercept } => TaskPolicy::Linear { slope: *slope, intercept: *intercept },
            TaskSpec::Table { table } => TaskPolicy::Table(table.clone()),
        }
    }

    pub fn boundary(&self, game: &BaseGame) -> Result<BoundaryProfile> {
        if self.variant == Variant::Ir {
            return Ok(BoundaryProfile::ir(game));
        }
        match &self.period_boundary {
            Some(per) => BoundaryProfile::from_values(game, vec![per.clone(); self.agents]),
            None => BoundaryProfile::uniform_values(game, &self.boundary),
        }
    }

    pub fn model(&self, exec: Exec) -> Result<Model> {
        let game = Arc::new(self.game()?);
        let boundary = self.boundary(&game)?;
        let mut model = Model::build_with_limit(game, self.task(), boundary, self.variant, self.node_limit)?
            .with_exec(exec)
            .with_refinement(self.refinement);
        if let Some(theta) = &self.theta {
            model = model.with_theta(theta.clone())?;
        }
        Ok(model)
    }

    /// The fixed mechanism, when the scenario carries one.
    pub fn mechanism(&self) -> Option<Mechanism> {
        self.mechanism.as_ref().map(|m| {
            Mechanism::new(
                m.coupling.clone().map_or(CouplingPolicy::Zero, CouplingPolicy::Table),
                m.off_switch.clone().map_or(OffSwitch::Zero, OffSwitch::Table),
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "agents": 1, "horizon": 2,
        "grid": {"lo": 0.0, "hi": 1.0, "points": 5},
        "actions": {"lo": 0.0, "hi": 1.0},
        "shocks": {"values": [-0.25, 0.0, 0.25]},
        "dynamics": {"kind": "additive", "persistence": 1.0},
        "reward": {"kind": "product"},
        "variant": "ir"
    }"#;

    #[test]
    fn minimal_scenario_builds() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.task, TaskSpec::Identity);
        assert_eq!(s.refinement, 1);
        let m = s.model(Exec::Sequential).unwrap();
        assert_eq!(m.tree.len(), 6);
        assert!(s.mechanism().is_none());
    }

    #[test]
    fn roundtrip() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        let back = Scenario::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn knowledgeable_needs_cover() {
        let text = MINIMAL.replace("\"ir\"", "\"knowledgeable\"");
        assert!(matches!(Scenario::from_json(&text), Err(Error::Scenario(_))));
    }

    #[test]
    fn bad_period_grids() {
        let text = MINIMAL.replace(r#""grid": {"lo": 0.0, "hi": 1.0, "points": 5}"#, r#""period_grids": [[0.0, 1.0]]"#);
        assert!(Scenario::from_json(&text).is_err());
    }
}
