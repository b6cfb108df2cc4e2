//! Carrier and transform tables against closed forms and brute-force
//! enumeration written independently of the engine.

use offmenu_core::carrier::CarrierTables;
use offmenu_core::instances;
use offmenu_core::mechanism::{Mechanism, Variant};
use offmenu_core::oracle::Oracle;
use offmenu_core::par::Exec;
use offmenu_core::persistence::{TransformKind, Transforms};
use offmenu_core::model::SupportMode;
use offmenu_core::synthesis::OBEDIENT;
use offmenu_core::tree::Model;

const G1_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const G1_SHOCKS: [f64; 3] = [-0.25, 0.0, 0.25];

/// Successor index on the G1 grid: clamped random walk.
fn g1_next(s: usize, w: usize) -> usize {
    let x = (G1_GRID[s] + G1_SHOCKS[w]).clamp(0.0, 1.0);
    (x * 4.0).round() as usize
}

fn seq(m: Model) -> Model {
    m.with_exec(Exec::Sequential)
}

#[test]
fn g2_impulse_response_counts_remaining_periods() {
    let horizon = 3;
    let m = instances::g2(horizon).model(Exec::Sequential).unwrap();
    let c = CarrierTables::obedient(&m).unwrap();
    for nd in m.tree.nodes() {
        let t = nd.period;
        let cell = c.cell(OBEDIENT, nd.id, 0).unwrap();
        let grid = m.game.grid(0, t);
        for l in t..=horizon {
            for s in 0..grid.len() {
                assert_eq!(cell.q[l - t][s], (l - t + 1) as f64, "q at t={t}, L={l}, s={s}");
            }
        }
        for s in 0..grid.len() {
            let expect = (horizon - t + 1) as f64 * (grid.value(s) - grid.lo());
            assert!((cell.g[horizon - t][s] - expect).abs() < 1e-12);
            assert!((cell.mg[s] - expect).abs() < 1e-12);
            assert_eq!(cell.arg_l[s], horizon);
        }
    }
}

#[test]
fn terminal_marginal_carrier_is_max_carrier() {
    let m = instances::g1_model(Variant::Ir, &[]);
    let c = CarrierTables::obedient(&m).unwrap();
    for &id in m.tree.layer(m.horizon()) {
        let cell = c.cell(OBEDIENT, id, 0).unwrap();
        assert_eq!(cell.zeta, cell.mg);
    }
}

#[test]
fn max_carrier_matches_scan_over_horizons() {
    let m = instances::g1_model(Variant::Ir, &[]);
    let c = CarrierTables::obedient(&m).unwrap();
    for nd in m.tree.nodes() {
        let cell = c.cell(OBEDIENT, nd.id, 0).unwrap();
        for s in 0..5 {
            let mut best = (f64::NEG_INFINITY, 0);
            for (row, g) in cell.g.iter().enumerate() {
                if g[s] >= best.0 {
                    best = (g[s], nd.period + row);
                }
            }
            let (v, l) = c.max_carrier(&m, OBEDIENT, 0, nd.id, None, s).unwrap();
            assert_eq!(v, best.0);
            assert_eq!(l, best.1);
            assert_eq!(cell.arg_l[s], best.1);
        }
    }
}

#[test]
fn g1_impulse_response_matches_pathwise_oracle() {
    let m = instances::g1_model(Variant::Ir, &[]);
    let c = CarrierTables::obedient(&m).unwrap();
    let mech = Mechanism::default();
    let oracle = Oracle::new(&m, &mech);
    for nd in m.tree.nodes() {
        let menu = nd.menu(0).unwrap();
        for s in 0..5 {
            for l in nd.period..=m.horizon() {
                let a = menu.state_action[s];
                let table = c.impulse_response(&m, OBEDIENT, 0, nd.id, a, s, l).unwrap();
                let reference = oracle.impulse_response(0, nd.id, a, s, l).unwrap();
                assert!((table - reference).abs() < 1e-12, "node {} s {s} L {l}", nd.id);
            }
        }
    }
}

/// Expected sum of `f(period, state)` over periods t+1..=L on the G1 walk
/// with an optional projection applied after every transition.
fn g1_brute(t: usize, s: usize, l: usize, proj: &dyn Fn(usize, usize) -> usize, f: &dyn Fn(usize, usize) -> f64) -> f64 {
    if t >= l {
        return 0.0;
    }
    (0..3)
        .map(|w| {
            let next = proj(t + 1, g1_next(s, w));
            (f(t + 1, next) + g1_brute(t + 1, next, l, proj, f)) / 3.0
        })
        .sum()
}

#[test]
fn empty_off_region_expectation_is_plain_expectation() {
    let m = seq(instances::g1_model(Variant::Horizontal, &[]));
    let c = CarrierTables::obedient(&m).unwrap();
    let tr = Transforms::build(&m, &c, false).unwrap();
    let integrand = |_: usize, node: usize, s: usize| Ok(G1_GRID[s] + m.tree.node(node).period as f64);
    let f = |k: usize, s: usize| G1_GRID[s] + k as f64;
    for s in 0..5 {
        for l in 1..=3 {
            let v = tr.uppt_expectation(&m, &c, OBEDIENT, 0, 0, s, l, TransformKind::Up, &integrand).unwrap();
            assert!((v - g1_brute(1, s, l, &|_, x| x, &f)).abs() < 1e-12);
        }
        for k in 0..m.tree.len() {
            if m.tree.node(k).period <= 3 {
                assert_eq!(tr.delta_bar(OBEDIENT, 0, k, s).unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn one_sub_off_region_two_steps_matches_enumeration() {
    let m = seq(instances::g1_model(Variant::Horizontal, &[(0.25, 0.5)]));
    let c = CarrierTables::obedient(&m).unwrap();
    let tr = Transforms::build(&m, &c, false).unwrap();
    // projection read off the partition: states in [l, r] go to the
    // recorded point, others stay; the point is the same on every node of
    // a layer for this instance because the walk is history-free
    let point = |k: usize| {
        let id = m.tree.layer(k)[0];
        let cell = tr.cell(OBEDIENT, id, 0).unwrap();
        (cell.partition.off[0], cell.d_up[0])
    };
    for k in 1..=3 {
        for &id in m.tree.layer(k) {
            assert_eq!(tr.cell(OBEDIENT, id, 0).unwrap().d_up[0], point(k).1);
        }
    }
    let proj = |k: usize, s: usize| {
        let ((lo, hi), d) = point(k);
        if (lo..=hi).contains(&s) {
            d
        } else {
            s
        }
    };
    let f = |_: usize, s: usize| G1_GRID[s] * G1_GRID[s];
    let integrand = |_: usize, _: usize, s: usize| Ok(G1_GRID[s] * G1_GRID[s]);
    for s in 0..5 {
        let v = tr.uppt_expectation(&m, &c, OBEDIENT, 0, 0, s, 3, TransformKind::Up, &integrand).unwrap();
        assert!((v - g1_brute(1, s, 3, &proj, &f)).abs() < 1e-12, "start {s}");
    }
}

#[test]
fn projection_leaves_on_region_alone_and_picks_largest_on_ties() {
    // zero rewards make ζ constant, so every sub-off-region projects to its
    // right end
    let mut sc = instances::zero_reward(3);
    sc.variant = Variant::Horizontal;
    sc.boundary = vec![(0.0, 0.25), (0.5, 0.75)];
    let m = sc.model(Exec::Sequential).unwrap();
    let c = CarrierTables::obedient(&m).unwrap();
    let tr = Transforms::build(&m, &c, false).unwrap();
    for nd in m.tree.nodes() {
        let cell = tr.cell(OBEDIENT, nd.id, 0).unwrap();
        assert_eq!(cell.d_up, vec![1, 3]);
        let up: Vec<usize> = (0..5).map(|s| cell.project(s, TransformKind::Up).unwrap()).collect();
        assert_eq!(up, vec![1, 1, 3, 3, 4]);
    }
}

#[test]
fn reachable_projected_support_matches_bfs() {
    let m = seq(instances::g1_model(Variant::Horizontal, &[(0.5, 0.75)]));
    let c = CarrierTables::obedient(&m).unwrap();
    let tr = Transforms::build(&m, &c, false).unwrap();
    for s in 0..5 {
        for k in 2..=3 {
            let got = tr.uppt_support(&m, &c, OBEDIENT, 0, 0, s, k, SupportMode::Reachable).unwrap();
            let mut frontier = std::collections::BTreeSet::from([s]);
            for step in 2..=k {
                let id = m.tree.layer(step)[0];
                let cell = tr.cell(OBEDIENT, id, 0).unwrap();
                frontier = frontier
                    .iter()
                    .flat_map(|&x| (0..3).map(move |w| g1_next(x, w)))
                    .map(|x| cell.project(x, TransformKind::Up).unwrap())
                    .collect();
            }
            assert_eq!(got, frontier, "start {s}, period {k}");
        }
    }
}

#[test]
fn strict_support_mode_refuses_clamped_walk() {
    let m = seq(instances::g1_model(Variant::Horizontal, &[(0.5, 0.75)]));
    let c = CarrierTables::obedient(&m).unwrap();
    let tr = Transforms::build(&m, &c, false).unwrap();
    assert!(tr.uppt_support(&m, &c, OBEDIENT, 0, 0, 2, 2, SupportMode::Strict).is_err());
}

#[test]
fn delta_bar_matches_projected_recursion() {
    let m = seq(instances::g1_model(Variant::Horizontal, &[(0.5, 0.75)]));
    let c = CarrierTables::obedient(&m).unwrap();
    let tr = Transforms::build(&m, &c, false).unwrap();
    let root: Vec<f64> = (0..5).map(|s| tr.delta_bar(OBEDIENT, 0, 0, s).unwrap()).collect();
    // independent recursion on the projected walk
    let mg = |k: usize, s: usize| c.cell(OBEDIENT, m.tree.layer(k)[0], 0).unwrap().mg[s];
    let proj = |k: usize, s: usize| tr.cell(OBEDIENT, m.tree.layer(k)[0], 0).unwrap().project(s, TransformKind::Up).unwrap();
    fn rec(k: usize, s: usize, mg: &dyn Fn(usize, usize) -> f64, proj: &dyn Fn(usize, usize) -> usize) -> f64 {
        if k == 3 {
            return 0.0;
        }
        (0..3)
            .map(|w| {
                let raw = g1_next(s, w);
                let p = proj(k + 1, raw);
                (mg(k + 1, p) - mg(k + 1, raw) + rec(k + 1, p, mg, proj)) / 3.0
            })
            .sum()
    }
    let independent: Vec<f64> = (0..5).map(|s| rec(1, s, &mg, &proj)).collect();
    for s in 0..5 {
        assert!((root[s] - independent[s]).abs() < 1e-12);
    }
}

#[test]
fn g1_root_tables_frozen() {
    let m = seq(instances::g1_model(Variant::Horizontal, &[(0.5, 0.75)]));
    let c = CarrierTables::obedient(&m).unwrap();
    let tr = Transforms::build(&m, &c, false).unwrap();
    let cell = c.cell(OBEDIENT, 0, 0).unwrap();
    let zeta = [-7.0 / 288.0, 3.0 / 288.0, 30.0 / 288.0, 75.0 / 288.0, 157.0 / 288.0];
    let delta = [5.0 / 288.0, 5.0 / 36.0, 5.0 / 32.0, 5.0 / 36.0, 5.0 / 288.0];
    let t = tr.cell(OBEDIENT, 0, 0).unwrap();
    assert_eq!(t.d_up, vec![3]);
    for s in 0..5 {
        assert!((cell.zeta[s] - zeta[s]).abs() < 1e-12);
        assert!((t.delta[s] - delta[s]).abs() < 1e-12);
        assert_eq!(cell.arg_l[s], 3);
    }
}
