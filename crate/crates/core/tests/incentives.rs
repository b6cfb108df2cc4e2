//! Incentive checks, quit distributions and the simulator on the reference
//! instances, including constructed violations.

use offmenu_core::carrier::CarrierTables;
use offmenu_core::equilibrium::{
    chi_from_off_region, om_fixed_point, planned_quit_distribution, simulate_outcome, Conjecture, Continuation,
    Strategy, ValueTables,
};
use offmenu_core::instances;
use offmenu_core::mechanism::{CouplingPolicy, Mechanism, OffSwitch, Variant};
use offmenu_core::par::Exec;
use offmenu_core::scenario::TaskSpec;
use offmenu_core::verify::{
    check_constrained_monotone, check_doic, check_envelope, check_mso, check_payoff_flow, check_phi_uniqueness,
    DoicMode, EnvelopeHorizon,
};
use offmenu_core::Analysis;

const TOL: f64 = 1e-9;

fn synthesized(s: &offmenu_core::scenario::Scenario) -> Analysis {
    Analysis::synthesized(s.model(Exec::Sequential).unwrap(), s.full_cover).unwrap()
}

#[test]
fn ir_bottom_state_has_zero_rent_and_stays() {
    let a = synthesized(&instances::g1(Variant::Ir, &[]));
    for nd in a.model.tree.nodes() {
        let br = a
            .values
            .best_response(&a.model, &a.mechanism, 0, nd.id, 0, &Conjecture::Obedient, Continuation::OneShot)
            .unwrap();
        assert!(br.on_rent.abs() <= TOL, "node {}", nd.id);
        assert!(!br.quit);
    }
}

#[test]
fn perturbed_coupling_breaks_raic_at_the_middle_state() {
    let a = synthesized(&instances::g2(3));
    let synth = a.synthesis.as_ref().unwrap();
    let base = check_doic(&a.model, &a.mechanism, &a.values, DoicMode::Ir, Continuation::OneShot, TOL).unwrap();
    assert!(base.passed());
    let mut table = synth.coupling.clone();
    for nd in a.model.tree.nodes() {
        let menu = nd.menu(0).unwrap();
        let mid = menu.state_action[a.model.game.grid(0, nd.period).len() / 2];
        let code = a.model.tree.joint_code(nd.id, &[Some(mid)]);
        table.cells[nd.id][0][code] += 0.1;
    }
    let mech = Mechanism::new(CouplingPolicy::Table(table), OffSwitch::Table(synth.phi.clone()));
    let values = ValueTables::obedient(&a.model, &mech).unwrap();
    let r = check_doic(&a.model, &mech, &values, DoicMode::Ir, Continuation::OneShot, TOL).unwrap();
    assert!(!r.raic.passed);
    assert!((r.raic.worst - 0.1).abs() < 1e-9);
    let w = r.raic.witness.unwrap();
    let nd = a.model.tree.node(w.node);
    let mid = nd.menu(0).unwrap().state_action[a.model.game.grid(0, nd.period).len() / 2];
    assert_eq!(w.deviation, Some(mid));
}

#[test]
fn raised_off_switch_makes_quitting_dominant() {
    let a = synthesized(&instances::g1(Variant::Ir, &[]));
    let mut phi = a.synthesis.as_ref().unwrap().phi.clone();
    for &id in a.model.tree.layer(2) {
        for v in phi.cells[id][0].iter_mut() {
            *v += 1.0;
        }
    }
    let mech = Mechanism::new(a.mechanism.coupling.clone(), OffSwitch::Table(phi));
    let values = ValueTables::obedient(&a.model, &mech).unwrap();
    let r = check_doic(&a.model, &mech, &values, DoicMode::Ir, Continuation::OneShot, TOL).unwrap();
    assert!(!r.oaic.passed);
    assert_eq!(r.oaic.witness.unwrap().period, 2);
    assert!(r.min_on_rent < -0.5);
}

#[test]
fn payoff_flow_on_separable_instance() {
    let a = synthesized(&instances::g2(3));
    let synth = a.synthesis.as_ref().unwrap();
    let r = check_payoff_flow(&a.model, &a.carriers, synth, &a.values, TOL).unwrap();
    assert!(r.c1.passed);
    assert!(r.c3.passed);
    // literal C2 cannot hold for every L when g varies with L
    assert!(!r.c2.passed);
}

#[test]
fn halved_coupling_breaks_c1() {
    let a = synthesized(&instances::g1(Variant::Ir, &[]));
    let mut synth = a.synthesis.clone().unwrap();
    assert!(check_payoff_flow(&a.model, &a.carriers, &synth, &a.values, TOL).unwrap().c1.passed);
    for node in synth.coupling.cells.iter_mut() {
        for agent in node.iter_mut() {
            for v in agent.iter_mut() {
                *v *= 0.5;
            }
        }
    }
    assert!(!check_payoff_flow(&a.model, &a.carriers, &synth, &a.values, TOL).unwrap().c1.passed);
}

#[test]
fn constrained_monotone_pass_and_reversed_policy_fail() {
    let a = synthesized(&instances::g2(3));
    assert!(check_constrained_monotone(&a.model, &a.carriers, TOL).unwrap().passed);
    let mut s = instances::g1(Variant::Ir, &[]);
    s.task = TaskSpec::Linear { slope: -1.0, intercept: 1.0 };
    let m = s.model(Exec::Sequential).unwrap();
    let c = CarrierTables::obedient(&m).unwrap();
    let v = check_constrained_monotone(&m, &c, TOL).unwrap();
    assert!(!v.passed);
    assert!(v.witness.is_some());
}

#[test]
fn envelope_excludes_kinks_and_reports_them() {
    let a = synthesized(&instances::g1(Variant::Ir, &[]));
    let r = check_envelope(&a.model, &a.mechanism, &a.values, &a.carriers, EnvelopeHorizon::Argmax, 1.0).unwrap();
    assert!(!r.excluded.is_empty());
    assert!(r.verdict.note.as_deref().unwrap().contains(&format!("{} kink cells excluded", r.excluded.len())));
    let a = synthesized(&instances::g2(3));
    let r = check_envelope(&a.model, &a.mechanism, &a.values, &a.carriers, EnvelopeHorizon::Argmax, 1.0).unwrap();
    assert!(r.verdict.passed && r.excluded.is_empty());
}

#[test]
fn mso_fails_when_prospects_cross() {
    let s = instances::g2_with(1, 3, vec![1.0, -2.0, 1.0], 0.0, 0.0);
    let a = Analysis::with_mechanism(s.model(Exec::Sequential).unwrap(), Mechanism::default(), false).unwrap();
    let v = check_mso(&a.model, &a.mechanism, &a.values, TOL).unwrap();
    assert!(!v.passed);
    let w = v.witness.unwrap();
    assert_eq!(w.period, 2);
    assert_eq!(w.state, 0);
    assert!((v.worst - 1.0).abs() < 1e-9);
}

#[test]
fn phi_matches_solver_on_g1() {
    let a = synthesized(&instances::g1(Variant::Ir, &[]));
    let v = check_phi_uniqueness(&a.model, a.synthesis.as_ref().unwrap(), &a.transforms, 1e-6).unwrap();
    assert!(v.passed && v.checked > 0);
}

#[test]
fn chi_matches_first_hit_enumeration() {
    let m = instances::g1_model(Variant::Horizontal, &[(0.25, 0.25)]).with_exec(Exec::Sequential);
    let chi = chi_from_off_region(&m, m.tree.root());
    let chi = chi[0].as_ref().unwrap();
    // first hit of state index 1 on the clamped walk, three periods
    let next = |s: usize, w: i64| (s as i64 + w).clamp(0, 4) as usize;
    let mut expect = [0.0; 4];
    fn walk(k: usize, s: usize, p: f64, expect: &mut [f64; 4], next: &dyn Fn(usize, i64) -> usize) {
        if s == 1 {
            expect[k - 1] += p;
        } else if k == 3 {
            expect[3] += p;
        } else {
            for w in [-1, 0, 1] {
                walk(k + 1, next(s, w), p / 3.0, expect, next);
            }
        }
    }
    for (s, &p) in m.game.initial(0).iter().enumerate() {
        walk(1, s, p, &mut expect, &next);
    }
    for k in 0..4 {
        assert!((chi[k] - expect[k]).abs() < 1e-12);
    }
    assert!((chi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn off_region_pair_best_response_is_obedient() {
    let a = synthesized(&instances::g2_pair_bottom_quit(2));
    for nd in a.model.tree.nodes() {
        for i in nd.present_agents() {
            let menu = nd.menu(i).unwrap();
            for s in 0..a.model.game.grid(i, nd.period).len() {
                let br = a
                    .values
                    .best_response(&a.model, &a.mechanism, i, nd.id, s, &Conjecture::Obedient, Continuation::OneShot)
                    .unwrap();
                assert_eq!(br.quit, a.model.plan.quits(i, nd.period, s));
                if !br.quit {
                    assert_eq!(br.action, menu.state_action[s]);
                }
            }
        }
    }
}

#[test]
fn fixed_point_survives_grid_search_over_conjectures() {
    let a = synthesized(&instances::g2_pair_bottom_quit(2));
    let plans = ValueTables::with_plans(&a.model, &a.mechanism).unwrap();
    let root = a.model.tree.root();
    let fp = om_fixed_point(&a.model, &a.mechanism, &plans, root).unwrap();
    assert!(fp.converged);
    let steps = 10;
    for x in 0..=steps {
        for y in 0..=steps - x {
            let opp = vec![x as f64 / steps as f64, y as f64 / steps as f64, (steps - x - y) as f64 / steps as f64];
            for i in 0..2 {
                let mut conj = fp.mu.iter().map(|m| m.clone().unwrap()).collect::<Vec<_>>();
                conj[1 - i] = opp.clone();
                let x_i =
                    planned_quit_distribution(&a.model, &a.mechanism, &plans, i, root, &Conjecture::Plans(conj)).unwrap();
                let mu_i = fp.mu[i].as_ref().unwrap();
                for k in 0..3 {
                    assert!((x_i[k] - mu_i[k]).abs() < 1e-9, "agent {i} conj {opp:?}");
                }
            }
        }
    }
}

#[test]
fn simulation_is_reproducible_across_executors() {
    let s = instances::g2_pair_bottom_quit(2);
    let seq = synthesized(&s);
    let par = Analysis::synthesized(s.model(Exec::Parallel).unwrap(), false).unwrap();
    let strategy = Strategy::BestResponse(Continuation::OneShot);
    let a = simulate_outcome(&seq.model, &seq.mechanism, &seq.values, strategy, 2000, 3).unwrap();
    let b = simulate_outcome(&seq.model, &seq.mechanism, &seq.values, strategy, 2000, 3).unwrap();
    let c = simulate_outcome(&par.model, &par.mechanism, &par.values, strategy, 2000, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    let d = simulate_outcome(&seq.model, &seq.mechanism, &seq.values, strategy, 2000, 4).unwrap();
    assert_ne!(a.quit_counts, d.quit_counts);
    for counts in &a.quit_counts {
        assert_eq!(counts.iter().sum::<usize>(), 2000);
    }
}
