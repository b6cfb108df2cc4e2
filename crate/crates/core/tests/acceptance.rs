//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always show up
//! in `cargo test` output.

use std::process::ExitCode;
use std::time::Instant;

use offmenu_core::equilibrium::{chi_from_off_region, om_fixed_point, simulate_outcome, Continuation, Strategy, ValueTables};
use offmenu_core::instances;
use offmenu_core::mechanism::Variant;
use offmenu_core::oracle;
use offmenu_core::par::Exec;
use offmenu_core::persistence::TransformKind;
use offmenu_core::regions::detect_monotone;
use offmenu_core::synthesis::OBEDIENT;
use offmenu_core::verify::{
    check_constrained_monotone, check_doic, check_envelope, check_mso, check_phi_uniqueness,
    check_transform_identity, DoicMode, EnvelopeHorizon,
};
use offmenu_core::{Analysis, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;
const MC_PATHS: usize = 10_000;

type Outcome = Result<(bool, String)>;

fn analysis(s: &offmenu_core::scenario::Scenario) -> Result<Analysis> {
    Analysis::synthesized(s.model(Exec::default())?, s.full_cover)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst: f64 = 0.0;
    let mut nodes = 0;
    let mut ok = true;
    let instances = 24;
    for _ in 0..instances {
        let a = analysis(&instances::random_small(&mut rng))?;
        let r = oracle::compare(&a.model, &a.mechanism, &a.values, &a.carriers, TOL)?;
        worst = worst.max(r.verdict.worst);
        nodes += r.nodes_checked;
        ok &= r.verdict.passed && r.nodes_checked > 0;
    }
    Ok((ok, format!("{instances} instances, {nodes} agent-nodes, worst |Δ| = {worst:.3e}")))
}

fn ir_doic() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, s) in [("g1", instances::g1(Variant::Ir, &[])), ("g2", instances::g2(3))] {
        let a = analysis(&s)?;
        let monotone = detect_monotone(&a.model, &a.carriers, OBEDIENT).passed;
        let r = check_doic(&a.model, &a.mechanism, &a.values, DoicMode::Ir, Continuation::OneShot, TOL)?;
        ok &= monotone && r.oaic.passed && r.min_on_rent >= -TOL && r.bottom_on_rent <= TOL;
        let raic = match &r.raic.witness {
            None => "raic pass".to_string(),
            Some(w) => format!("raic gap {:.3e} at period {} state {}", r.raic.worst, w.period, w.state),
        };
        detail.push(format!(
            "{name}: monotone {monotone}, min Z = {:.3e}, max |Z(s̲)| = {:.3e}, {raic}",
            r.min_on_rent, r.bottom_on_rent
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn transform_identity() -> Outcome {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for s in [
        instances::g1(Variant::Ir, &[]),
        instances::g1(Variant::Horizontal, &[(0.5, 0.75)]),
        instances::g1(Variant::Horizontal, &[(0.0, 0.25), (0.75, 1.0)]),
        instances::iid_dip(3),
        instances::g2(3),
    ] {
        let a = analysis(&s)?;
        let v = check_transform_identity(&a.model, &a.mechanism, &a.values, &a.carriers, &a.transforms, TOL)?;
        ok &= v.passed;
        worst = worst.max(v.worst);
    }
    Ok((ok, format!("5 instances, worst |Λ − (Mg + δ̄)| = {worst:.3e}")))
}

fn barrier() -> Outcome {
    let mut checked = 0;
    let mut bad = 0;
    let mut breaches = 0;
    let mut paths = 0;
    for s in [
        instances::g1(Variant::Horizontal, &[(0.25, 0.5)]),
        instances::g1(Variant::Horizontal, &[(0.0, 0.25), (0.75, 1.0)]),
        instances::iid_dip(3),
    ] {
        let a = analysis(&s)?;
        let (c, b) = a.transforms.barrier_violations(&a.model, &a.carriers, OBEDIENT)?;
        checked += c;
        bad += b;
        let root = a.model.tree.root();
        let horizon = a.model.horizon();
        let zero = |_: usize, _: usize, _: usize| Ok(0.0);
        let (_, br) = a.transforms.uppt_expectation_mc(
            &a.model,
            &a.carriers,
            OBEDIENT,
            0,
            root,
            0,
            horizon,
            TransformKind::Up,
            &zero,
            MC_PATHS,
            7,
        )?;
        breaches += br;
        paths += MC_PATHS;
    }
    Ok((bad == 0 && breaches == 0, format!("{bad} of {checked} enumerated transitions, {breaches} breaches in {paths} sampled paths")))
}

fn empty_off_region() -> Outcome {
    let mut nonzero = 0;
    let mut cells = 0;
    for s in [instances::g1(Variant::Horizontal, &[]), instances::g2_with(1, 3, vec![1.0], 0.5, 0.0)] {
        let mut s = s;
        s.variant = Variant::Horizontal;
        s.boundary.clear();
        let a = analysis(&s)?;
        for nd in a.model.tree.nodes() {
            for i in nd.present_agents() {
                for st in 0..a.model.game.grid(i, nd.period).len() {
                    cells += 1;
                    if a.transforms.delta_bar(OBEDIENT, i, nd.id, st)? != 0.0 {
                        nonzero += 1;
                    }
                }
            }
        }
    }
    Ok((nonzero == 0 && cells > 0, format!("{nonzero} nonzero δ̄ entries out of {cells}")))
}

fn horizontal_consistency() -> Outcome {
    let a = analysis(&instances::iid_dip(3))?;
    let h = a.synthesis.as_ref().unwrap().horizontal.clone().expect("horizontal variant");
    Ok((h.passed && h.max_phi_spread <= TOL, format!("check passed: {}, max per-b φ spread = {:.3e}", h.passed, h.max_phi_spread)))
}

fn envelope() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, s) in [
        ("g2", instances::g2(3)),
        ("g2 sloped", instances::g2_with(1, 3, vec![1.0, 0.5, 2.0], 0.3, -0.5)),
    ] {
        let lip = s.lipschitz;
        let a = analysis(&s)?;
        let doic = check_doic(&a.model, &a.mechanism, &a.values, DoicMode::Ir, Continuation::OneShot, TOL)?;
        if !doic.passed() {
            ok = false;
            detail.push(format!("{name}: not DOIC"));
            continue;
        }
        let r = check_envelope(&a.model, &a.mechanism, &a.values, &a.carriers, EnvelopeHorizon::Argmax, lip)?;
        ok &= r.verdict.passed && r.verdict.checked > 0;
        detail.push(format!(
            "{name}: {} cells, {} excluded, worst excess {:.3e} over bound {:.3}",
            r.verdict.checked,
            r.excluded.len(),
            r.verdict.worst,
            r.bound
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn g2_mso() -> Outcome {
    let a = analysis(&instances::g2(3))?;
    let v = check_mso(&a.model, &a.mechanism, &a.values, TOL)?;
    Ok((v.passed, format!("residual {:.3e} over {} cells", v.worst, v.checked)))
}

fn two_agent_fixed_point() -> Outcome {
    let s = instances::g2_pair_bottom_quit(2);
    let a = analysis(&s)?;
    let root = a.model.tree.root();
    let doic = check_doic(&a.model, &a.mechanism, &a.values, DoicMode::Off, Continuation::OneShot, TOL)?;
    let chi = chi_from_off_region(&a.model, root);
    let sim = simulate_outcome(
        &a.model,
        &a.mechanism,
        &a.values,
        Strategy::BestResponse(Continuation::OneShot),
        MC_PATHS,
        11,
    )?;
    let mut worst_z: f64 = 0.0;
    let mut ok = doic.passed();
    for (i, c) in chi.iter().enumerate() {
        let c = c.as_ref().unwrap();
        for (k, &p) in c.iter().enumerate() {
            let f = sim.quit_frequency[i][k];
            let sigma = (p * (1.0 - p) / MC_PATHS as f64).sqrt();
            if sigma == 0.0 {
                ok &= f == p;
            } else {
                let z = (f - p).abs() / sigma;
                worst_z = worst_z.max(z);
                ok &= z <= 3.0;
            }
        }
    }
    let plans = ValueTables::with_plans(&a.model, &a.mechanism)?;
    let fp = om_fixed_point(&a.model, &a.mechanism, &plans, root)?;
    ok &= fp.residual <= 1e-8;
    Ok((ok, format!("off-region DOIC {}, worst |freq − χ|/σ = {worst_z:.2}, fixed-point residual {:.3e} after {} iterations", doic.passed(), fp.residual, fp.iterations)))
}

fn phi_uniqueness() -> Outcome {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for s in [
        instances::g1(Variant::Ir, &[]),
        instances::g1(Variant::Horizontal, &[(0.5, 0.75)]),
        instances::iid_dip(3),
        instances::g2(3),
    ] {
        let a = analysis(&s)?;
        let v = check_phi_uniqueness(&a.model, a.synthesis.as_ref().unwrap(), &a.transforms, 1e-6)?;
        ok &= v.passed && v.checked > 0;
        worst = worst.max(v.worst);
    }
    Ok((ok, format!("4 instances, worst |closed form − solved| = {worst:.3e}")))
}

fn g2_implication() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut premise = 0;
    let mut cm_pass = 0;
    let mut drawn = 0;
    while premise < 10 && drawn < 200 {
        drawn += 1;
        let a = analysis(&instances::random_g2(&mut rng))?;
        let d = check_doic(&a.model, &a.mechanism, &a.values, DoicMode::Ir, Continuation::OneShot, TOL)?;
        let mso = check_mso(&a.model, &a.mechanism, &a.values, TOL)?;
        if !(d.passed() && d.bottom_on_rent <= TOL && mso.passed) {
            continue;
        }
        premise += 1;
        if check_constrained_monotone(&a.model, &a.carriers, TOL)?.passed {
            cm_pass += 1;
        }
    }
    Ok((premise >= 10 && cm_pass == premise, format!("{drawn} drawn, {premise} satisfy the premise, {cm_pass} pass CM")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("oracle equivalence", oracle_equivalence),
        ("IR-DOIC on-rent", ir_doic),
        ("transform identity", transform_identity),
        ("barrier", barrier),
        ("empty off-region", empty_off_region),
        ("horizontal per-b consistency", horizontal_consistency),
        ("envelope", envelope),
        ("MSO on the separable instance", g2_mso),
        ("two-agent quit frequencies and fixed point", two_agent_fixed_point),
        ("closed-form cutoff against solver", phi_uniqueness),
        ("DOIC, zero bottom rent and MSO imply CM", g2_implication),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} [{:>2}] {name}: {detail} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            n + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
