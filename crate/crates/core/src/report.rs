//! JSON and CSV export. Row order is deterministic: node, agent, state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::equilibrium::{Continuation, Conjecture, FixedPointReport, SimulationOutcome, ValueTables};
use crate::error::Result;
use crate::mechanism::{Mechanism, OffSwitchTable};
use crate::persistence::{TransformKind, Transforms};
use crate::synthesis::{SynthesisOutput, OBEDIENT};
use crate::tree::Model;
use crate::verify::Verdict;

/// Bumped whenever a field of [`RunReport`] changes meaning.
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub scenario: String,
    pub command: String,
    pub mode: String,
    pub seed: u64,
    pub samples: usize,
    pub tol: f64,
    /// All requested verdicts passed.
    pub passed: bool,
    pub verdicts: Vec<Verdict>,
    /// Reported but not requested; they do not affect `passed`.
    #[serde(default)]
    pub diagnostics: Vec<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_point: Option<FixedPointReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(scenario: &str, command: &str, mode: &str, seed: u64, samples: usize, tol: f64) -> Self {
        RunReport {
            schema: REPORT_SCHEMA,
            scenario: scenario.to_string(),
            command: command.to_string(),
            mode: mode.to_string(),
            seed,
            samples,
            tol,
            passed: true,
            verdicts: Vec::new(),
            diagnostics: Vec::new(),
            simulation: None,
            fixed_point: None,
            notes: Vec::new(),
        }
    }

    pub fn push(&mut self, v: Verdict) {
        self.passed &= v.passed;
        self.verdicts.push(v);
    }

    pub fn push_diagnostic(&mut self, v: Verdict) {
        self.diagnostics.push(v);
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Header first, so an empty series still yields a header-only file.
pub fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct StateRow {
    agent: usize,
    period: usize,
    node: usize,
    state: usize,
    s: f64,
    value: f64,
}

#[derive(Serialize)]
struct ProjectionRow {
    agent: usize,
    period: usize,
    node: usize,
    state: usize,
    projected: usize,
}

#[derive(Serialize)]
struct CouplingRow {
    agent: usize,
    period: usize,
    node: usize,
    code: usize,
    value: f64,
}

#[derive(Serialize)]
struct QuitRow {
    agent: usize,
    period: usize,
    count: usize,
    frequency: f64,
}

#[derive(Serialize)]
struct VerdictRow<'a> {
    name: &'a str,
    passed: bool,
    worst: f64,
    tol: f64,
    checked: usize,
}

const STATE_HEADER: &[&str] = &["agent", "period", "node", "state", "s", "value"];

fn state_rows(model: &Model, f: impl Fn(usize, usize, usize) -> Result<f64>) -> Result<Vec<StateRow>> {
    let mut rows = Vec::new();
    for nd in model.tree.nodes() {
        for i in nd.present_agents() {
            let grid = model.game.grid(i, nd.period);
            for s in 0..grid.len() {
                rows.push(StateRow { agent: i, period: nd.period, node: nd.id, state: s, s: grid.value(s), value: f(nd.id, i, s)? });
            }
        }
    }
    Ok(rows)
}

pub fn write_phi(path: &Path, model: &Model, phi: &OffSwitchTable) -> Result<()> {
    write_rows(path, STATE_HEADER, &state_rows(model, |node, i, s| Ok(phi.cells[node][i][s]))?)
}

pub fn write_on_rent(path: &Path, model: &Model, mech: &Mechanism, values: &ValueTables) -> Result<()> {
    let rows = state_rows(model, |node, i, s| {
        let a = model.tree.node(node).menu(i).unwrap().state_action[s];
        values.on_rent(model, mech, i, node, a, s, &Conjecture::Obedient, Continuation::OneShot)
    })?;
    write_rows(path, STATE_HEADER, &rows)
}

pub fn write_coupling(path: &Path, model: &Model, synth: &SynthesisOutput) -> Result<()> {
    let mut rows = Vec::new();
    for nd in model.tree.nodes() {
        for i in nd.present_agents() {
            for (code, &value) in synth.coupling.cells[nd.id][i].iter().enumerate() {
                rows.push(CouplingRow { agent: i, period: nd.period, node: nd.id, code, value });
            }
        }
    }
    write_rows(path, &["agent", "period", "node", "code", "value"], &rows)
}

pub fn write_projection(path: &Path, model: &Model, transforms: &Transforms) -> Result<()> {
    let mut rows = Vec::new();
    for nd in model.tree.nodes() {
        for i in nd.present_agents() {
            for s in 0..model.game.grid(i, nd.period).len() {
                let projected = transforms.project(OBEDIENT, i, nd.id, s, TransformKind::Up)?;
                rows.push(ProjectionRow { agent: i, period: nd.period, node: nd.id, state: s, projected });
            }
        }
    }
    write_rows(path, &["agent", "period", "node", "state", "projected"], &rows)
}

pub fn write_quits(path: &Path, sim: &SimulationOutcome) -> Result<()> {
    let mut rows = Vec::new();
    for (i, counts) in sim.quit_counts.iter().enumerate() {
        for (k, &count) in counts.iter().enumerate() {
            rows.push(QuitRow { agent: i, period: k + 1, count, frequency: sim.quit_frequency[i][k] });
        }
    }
    write_rows(path, &["agent", "period", "count", "frequency"], &rows)
}

pub fn write_verdicts(path: &Path, verdicts: &[Verdict]) -> Result<()> {
    let rows: Vec<VerdictRow<'_>> = verdicts
        .iter()
        .map(|v| VerdictRow { name: &v.name, passed: v.passed, worst: v.worst, tol: v.tol, checked: v.checked })
        .collect();
    write_rows(path, &["name", "passed", "worst", "tol", "checked"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_csv_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.csv");
        let v = vec![Verdict::flag("a", true, ""), Verdict::flag("b", false, "")];
        write_verdicts(&p, &v).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "name,passed,worst,tol,checked\na,true,0.0,0.0,1\nb,false,1.0,0.0,1\n");
    }

    #[test]
    fn empty_verdicts_give_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.csv");
        write_verdicts(&p, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "name,passed,worst,tol,checked\n");
    }

    #[test]
    fn json_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RunReport::new("x", "verify", "exact", 1, 10, 1e-9);
        r.push(Verdict::flag("a", true, "note"));
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        r.write_json(&a).unwrap();
        r.write_json(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(RunReport::load(&a).unwrap(), r);
    }

    #[test]
    fn report_tracks_pass() {
        let mut r = RunReport::new("x", "verify", "exact", 1, 10, 1e-9);
        r.push(Verdict::flag("a", true, ""));
        assert!(r.passed);
        r.push(Verdict::flag("b", false, ""));
        assert!(!r.passed);
    }
}
