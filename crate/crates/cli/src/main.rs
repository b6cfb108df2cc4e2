//! `offmenu`: synthesize, verify and simulate delegation mechanisms with
//! off-menu actions from a JSON scenario.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use offmenu_core::equilibrium::{
    chi_from_off_region, om_fixed_point, simulate_outcome, Continuation, Strategy, ValueTables, FP_TOL,
};
use offmenu_core::mechanism::Variant;
use offmenu_core::oracle;
use offmenu_core::par::Exec;
use offmenu_core::persistence::TransformKind;
use offmenu_core::regions::MembershipMode;
use offmenu_core::report::{self, RunReport};
use offmenu_core::scenario::{MechanismSpec, Scenario};
use offmenu_core::synthesis::{check_dcm_zero, OBEDIENT};
use offmenu_core::verify::{self, DoicMode, EnvelopeHorizon, EvalMode, Verdict, Witness};
use offmenu_core::Analysis;

const SUBSCRIPTION: &str = include_str!("../scenarios/subscription.json");
const G2_APPENDIX: &str = include_str!("../scenarios/g2-appendix.json");

#[derive(Parser)]
#[command(name = "offmenu", version, about = "Mechanisms with off-menu actions: synthesis, verification, simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build ρ and φ for the scenario and export the scenario with the mechanism embedded.
    Synthesize(Common),
    /// Run the requested checks against the scenario's mechanism (synthesized when absent).
    Verify(VerifyArgs),
    /// Sample paths under the obedient or best-response strategy.
    Simulate(SimulateArgs),
    /// Full pipeline: synthesize, verify and simulate into one report.
    Report(VerifyArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario JSON file, or a bundled scenario: subscription, g2-appendix.
    scenario: String,
    #[arg(long, value_enum, default_value_t = Mode::Exact)]
    mode: Mode,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Monte Carlo paths (simulation and mc-mode checks).
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 lets rayon decide, 1 runs sequentially.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args, Clone)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Checks whose verdicts decide the exit code; the rest are reported as
    /// diagnostics. `all` requests every check.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "doic")]
    checks: Vec<Check>,
}

#[derive(Args, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = StrategyArg::BestResponse)]
    strategy: StrategyArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Exact,
    Mc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Obedient,
    BestResponse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Check {
    All,
    Doic,
    Transform,
    PayoffFlow,
    Cm,
    Envelope,
    Mso,
    Phi,
    Barrier,
    Dcm,
    Support,
    Oracle,
}

const EVERY_CHECK: [Check; 11] = [
    Check::Doic,
    Check::Transform,
    Check::PayoffFlow,
    Check::Cm,
    Check::Envelope,
    Check::Mso,
    Check::Phi,
    Check::Barrier,
    Check::Dcm,
    Check::Support,
    Check::Oracle,
];

fn load_scenario(arg: &str) -> Result<Scenario> {
    let path = Path::new(arg);
    if path.exists() {
        return Scenario::load(path).with_context(|| format!("invalid scenario {}", path.display()));
    }
    let text = match arg {
        "subscription" => SUBSCRIPTION,
        "g2-appendix" => G2_APPENDIX,
        _ => bail!("no scenario file or bundled scenario named {arg:?} (bundled: subscription, g2-appendix)"),
    };
    Ok(Scenario::from_json(text)?)
}

fn setup(c: &Common) -> Result<(Scenario, Exec)> {
    #[cfg(feature = "parallel")]
    if c.threads > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(c.threads).build_global()?;
    }
    let exec = if c.threads == 1 { Exec::Sequential } else { Exec::Parallel };
    let scenario = load_scenario(&c.scenario)?;
    fs::create_dir_all(&c.out).with_context(|| format!("cannot create {}", c.out.display()))?;
    Ok((scenario, exec))
}

fn analyse(scenario: &Scenario, exec: Exec) -> Result<Analysis> {
    let model = scenario.model(exec).context("building the history tree")?;
    Ok(match scenario.mechanism() {
        Some(mech) => Analysis::with_mechanism(model, mech, scenario.full_cover)?,
        None => Analysis::synthesized(model, scenario.full_cover)?,
    })
}

fn new_report(command: &str, scenario: &Scenario, c: &Common) -> RunReport {
    let mode = match c.mode {
        Mode::Exact => "exact",
        Mode::Mc => "mc",
    };
    RunReport::new(&scenario.name, command, mode, c.seed, c.samples, c.tol)
}

fn synthesize(scenario: &Scenario, a: &Analysis, c: &Common, report: &mut RunReport) -> Result<()> {
    let Some(synth) = &a.synthesis else {
        bail!("the scenario carries a fixed mechanism; remove it to synthesize");
    };
    let mut exported = scenario.clone();
    exported.mechanism =
        Some(MechanismSpec { coupling: Some(synth.coupling.clone()), off_switch: Some(synth.phi.clone()) });
    fs::write(c.out.join("scenario.json"), exported.to_json()? + "\n")?;
    report::write_phi(&c.out.join("phi.csv"), &a.model, &synth.phi)?;
    report::write_coupling(&c.out.join("coupling.csv"), &a.model, synth)?;
    report::write_projection(&c.out.join("projection.csv"), &a.model, &a.transforms)?;
    report::write_on_rent(&c.out.join("on_rent.csv"), &a.model, &a.mechanism, &a.values)?;
    let mut gen = Verdict::new("coupling_generators", c.tol);
    gen.observe(synth.coupling_diagnostics.generator_residual, || {
        let (i, node, s) = synth.coupling_diagnostics.worst.unwrap_or_default();
        Witness::at(i, a.model.tree.node(node).period, node, s, "C1 mismatch at a non-representative state".into())
    });
    report.push(gen.finish());
    if let Some(h) = &synth.horizontal {
        report.push(Verdict::flag(
            "horizontal_cutoff",
            h.passed,
            format!("largest per-region cutoff spread {:e}", h.max_phi_spread),
        ));
    }
    let inconsistent = synth.eta.iter().filter(|e| !e.consistent).count();
    report.push_diagnostic(Verdict::flag(
        "posted_factor",
        inconsistent == 0,
        format!("{inconsistent} of {} nodes without a single consistent η", synth.eta.len()),
    ));
    Ok(())
}

fn run_check(check: Check, scenario: &Scenario, a: &Analysis, c: &Common) -> Result<Vec<Verdict>> {
    let (m, mech, values) = (&a.model, &a.mechanism, &a.values);
    let tol = c.tol;
    Ok(match check {
        Check::All => Vec::new(),
        Check::Doic => {
            let mode = if m.variant == Variant::Ir { DoicMode::Ir } else { DoicMode::Off };
            let r = verify::check_doic(m, mech, values, mode, Continuation::OneShot, tol)?;
            let mut v = r.verdicts();
            if mode == DoicMode::Ir {
                let mut bottom = Verdict::new("bottom_on_rent", tol);
                bottom.observe(r.bottom_on_rent, || Witness::at(0, 0, 0, 0, "largest |Z| at the bottom state".into()));
                v.push(bottom.finish());
            }
            v
        }
        Check::Transform => {
            let v = verify::check_transform_identity(m, mech, values, &a.carriers, &a.transforms, tol)?;
            vec![if m.agents() > 1 { v.with_note("identity is exact for a single agent only") } else { v }]
        }
        Check::PayoffFlow => match &a.synthesis {
            Some(s) => verify::check_payoff_flow(m, &a.carriers, s, values, tol)?.verdicts(),
            None => Vec::new(),
        },
        Check::Cm => vec![verify::check_constrained_monotone(m, &a.carriers, tol)?],
        Check::Envelope => {
            vec![verify::check_envelope(m, mech, values, &a.carriers, EnvelopeHorizon::Argmax, scenario.lipschitz)?.verdict]
        }
        Check::Mso => vec![verify::check_mso(m, mech, values, tol)?],
        Check::Phi => match &a.synthesis {
            Some(s) => vec![verify::check_phi_uniqueness(m, s, &a.transforms, tol.max(1e-6))?],
            None => Vec::new(),
        },
        Check::Barrier => {
            let (checked, bad) = a.transforms.barrier_violations(m, &a.carriers, OBEDIENT)?;
            let mut v = Verdict::new("barrier", 0.0);
            v.observe(bad as f64, || Witness::at(0, 0, 0, 0, format!("{bad} projected states off their point")));
            v.checked = checked;
            let mut out = vec![v.finish()];
            if c.mode == Mode::Mc {
                let zero = |_: usize, _: usize, _: usize| Ok(0.0);
                let mut breaches = 0;
                for i in 0..m.agents() {
                    for (s, &p) in m.game.initial(i).iter().enumerate() {
                        if p > 0.0 {
                            let (_, b) = a.transforms.uppt_expectation_mc(
                                m,
                                &a.carriers,
                                OBEDIENT,
                                i,
                                m.tree.root(),
                                s,
                                m.horizon(),
                                TransformKind::Up,
                                &zero,
                                c.samples,
                                c.seed,
                            )?;
                            breaches += b;
                        }
                    }
                }
                let mut mc = Verdict::new("barrier_sampled", 0.0).with_mode(EvalMode::Mc);
                mc.observe(breaches as f64, || Witness::at(0, 0, 0, 0, format!("{breaches} sampled breaches")));
                mc.checked = c.samples;
                out.push(mc.finish());
                out.push(impulse_mc(a, c)?);
            }
            out
        }
        Check::Dcm => {
            let which = if m.variant == Variant::Knowledgeable { MembershipMode::K } else { MembershipMode::H };
            vec![check_dcm_zero(m, &a.carriers, &a.transforms, which, tol)?]
        }
        Check::Support => {
            let r = m.validate_full_support(scenario.support_mode);
            vec![Verdict::flag("full_support", r.passed, format!("{} probes; {}", r.probes, r.note))]
        }
        Check::Oracle => vec![oracle::compare(m, mech, values, &a.carriers, tol)?.verdict],
    })
}

/// Sampled impulse responses at the root against the exact tables.
fn impulse_mc(a: &Analysis, c: &Common) -> Result<Verdict> {
    let m = &a.model;
    let root = m.tree.root();
    let mut v = Verdict::new("impulse_response_sampled", 4.0).with_mode(EvalMode::Mc);
    for i in m.tree.node(root).present_agents() {
        let menu = m.tree.node(root).menu(i).unwrap();
        let cell = a.carriers.cell(OBEDIENT, root, i).unwrap();
        for s in 0..m.game.grid(i, 1).len() {
            let est =
                a.carriers.impulse_response_mc(m, OBEDIENT, i, root, menu.state_action[s], s, c.samples, c.seed)?;
            for (row, e) in est.iter().enumerate() {
                let exact = cell.q[row][s];
                let z = if e.std_err > 0.0 { (e.mean - exact).abs() / e.std_err } else { (e.mean - exact).abs() / c.tol };
                v.observe(z, || Witness::at(i, 1, root, s, format!("sampled {} against exact {exact} at L = {}", e.mean, row + 1)));
            }
        }
    }
    Ok(v.finish().with_note("worst is the largest |mean − exact| in standard errors"))
}

fn verify(scenario: &Scenario, a: &Analysis, args: &VerifyArgs, report: &mut RunReport) -> Result<()> {
    let synthesis_only = [Check::PayoffFlow, Check::Phi];
    let mut requested: Vec<Check> =
        if args.checks.contains(&Check::All) { EVERY_CHECK.to_vec() } else { args.checks.clone() };
    if a.synthesis.is_none() {
        if let Some(c) = args.checks.iter().find(|c| synthesis_only.contains(c)) {
            let name = c.to_possible_value().map(|v| v.get_name().to_owned()).unwrap_or_default();
            bail!("check {name} needs a synthesized mechanism but the scenario fixes one");
        }
        requested.retain(|c| !synthesis_only.contains(c));
    }
    for check in EVERY_CHECK {
        // the oracle is exponential in the tree size; only on request
        if check == Check::Oracle && !requested.contains(&check) {
            continue;
        }
        if a.synthesis.is_none() && synthesis_only.contains(&check) {
            continue;
        }
        for v in run_check(check, scenario, a, &args.common)? {
            if requested.contains(&check) {
                report.push(v);
            } else {
                report.push_diagnostic(v);
            }
        }
    }
    let c = &args.common;
    let verdicts: Vec<Verdict> = report.verdicts.iter().chain(&report.diagnostics).cloned().collect();
    report::write_verdicts(&c.out.join("verdicts.csv"), &verdicts)?;
    report::write_on_rent(&c.out.join("on_rent.csv"), &a.model, &a.mechanism, &a.values)?;
    report::write_projection(&c.out.join("projection.csv"), &a.model, &a.transforms)?;
    Ok(())
}

fn simulate(a: &Analysis, c: &Common, strategy: StrategyArg, report: &mut RunReport) -> Result<()> {
    let strategy = match strategy {
        StrategyArg::Obedient => Strategy::Obedient,
        StrategyArg::BestResponse => Strategy::BestResponse(Continuation::OneShot),
    };
    let sim = simulate_outcome(&a.model, &a.mechanism, &a.values, strategy, c.samples, c.seed)?;
    report::write_quits(&c.out.join("quits.csv"), &sim)?;
    let chi = chi_from_off_region(&a.model, a.model.tree.root());
    let n = sim.paths as f64;
    let mut freq = Verdict::new("quit_frequency", 3.0).with_mode(EvalMode::Mc);
    for (i, dist) in chi.iter().enumerate() {
        let Some(dist) = dist else { continue };
        for (k, &p) in dist.iter().enumerate() {
            let f = sim.quit_frequency[i][k];
            let p = p.clamp(0.0, 1.0);
            let sigma = (p * (1.0 - p) / n).sqrt();
            let z = if sigma > 1e-12 {
                (f - p).abs() / sigma
            } else if (f - p).abs() <= 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            freq.observe(z, || Witness::at(i, k + 1, 0, 0, format!("frequency {f} against χ = {p}")));
        }
    }
    report.push(freq.finish().with_note("worst is |frequency − χ| in binomial standard deviations"));
    let plans = ValueTables::with_plans(&a.model, &a.mechanism)?;
    let fp = om_fixed_point(&a.model, &a.mechanism, &plans, a.model.tree.root())?;
    let mut fpv = Verdict::new("fixed_point", FP_TOL);
    fpv.observe(fp.residual, || Witness::at(0, 1, 0, 0, format!("{} iterations", fp.iterations)));
    report.push(fpv.finish());
    report.fixed_point = Some(fp);
    report.simulation = Some(sim);
    Ok(())
}

fn finish(report: &RunReport, out: &Path) -> Result<ExitCode> {
    report.write_json(&out.join("report.json"))?;
    for v in &report.verdicts {
        println!("{} {:<28} worst {:<12.4e} tol {:e}", if v.passed { "PASS" } else { "FAIL" }, v.name, v.worst, v.tol);
    }
    for v in &report.diagnostics {
        println!("info {:<28} worst {:<12.4e} {}", v.name, v.worst, if v.passed { "ok" } else { "not met" });
    }
    println!("report written to {}", out.join("report.json").display());
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synthesize(c) => {
            let (scenario, exec) = setup(&c)?;
            let a = analyse(&scenario, exec)?;
            let mut report = new_report("synthesize", &scenario, &c);
            synthesize(&scenario, &a, &c, &mut report)?;
            report::write_verdicts(&c.out.join("verdicts.csv"), &report.verdicts)?;
            finish(&report, &c.out)
        }
        Command::Verify(args) => {
            let (scenario, exec) = setup(&args.common)?;
            let a = analyse(&scenario, exec)?;
            let mut report = new_report("verify", &scenario, &args.common);
            verify(&scenario, &a, &args, &mut report)?;
            finish(&report, &args.common.out)
        }
        Command::Simulate(args) => {
            let (scenario, exec) = setup(&args.common)?;
            let a = analyse(&scenario, exec)?;
            let mut report = new_report("simulate", &scenario, &args.common);
            simulate(&a, &args.common, args.strategy, &mut report)?;
            report::write_verdicts(&args.common.out.join("verdicts.csv"), &report.verdicts)?;
            finish(&report, &args.common.out)
        }
        Command::Report(args) => {
            let (scenario, exec) = setup(&args.common)?;
            let a = analyse(&scenario, exec)?;
            let mut report = new_report("report", &scenario, &args.common);
            if a.synthesis.is_some() {
                synthesize(&scenario, &a, &args.common, &mut report)?;
            }
            verify(&scenario, &a, &args, &mut report)?;
            simulate(&a, &args.common, StrategyArg::BestResponse, &mut report)?;
            let verdicts: Vec<Verdict> = report.verdicts.iter().chain(&report.diagnostics).cloned().collect();
            report::write_verdicts(&args.common.out.join("verdicts.csv"), &verdicts)?;
            finish(&report, &args.common.out)
        }
    }
}
