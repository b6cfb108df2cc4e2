use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use offmenu_core::report::RunReport;

fn offmenu(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_offmenu"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn verdict<'a>(r: &'a RunReport, name: &str) -> &'a offmenu_core::verify::Verdict {
    r.verdicts.iter().chain(&r.diagnostics).find(|v| v.name == name).unwrap_or_else(|| panic!("{name} missing"))
}

#[test]
fn subscription_report_carries_ir_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let out = offmenu(&["report", "subscription", "--samples", "2000"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = RunReport::load(&dir.path().join("report.json")).unwrap();
    assert!(r.passed);
    for name in ["oaic", "raic", "bottom_on_rent", "fixed_point", "quit_frequency"] {
        assert!(r.verdicts.iter().any(|v| v.name == name && v.passed), "{name}");
    }
    for file in ["phi.csv", "coupling.csv", "projection.csv", "on_rent.csv", "quits.csv", "verdicts.csv", "scenario.json"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
}

#[test]
fn g2_mso_pass_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let out = offmenu(&["verify", "g2-appendix", "--checks", "mso,cm"], dir.path());
    assert!(out.status.success());
    let r = RunReport::load(&dir.path().join("report.json")).unwrap();
    assert_eq!(r.verdicts.len(), 2);
    assert!(verdict(&r, "mso").passed);
    // unrequested checks still appear, without deciding the exit code
    assert!(!verdict(&r, "c2").passed);
}

#[test]
fn requested_failure_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = offmenu(&["verify", "g2-appendix", "--checks", "payoff-flow"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let csv = fs::read_to_string(dir.path().join("verdicts.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("c2,false")));
}

#[test]
fn invalid_scenario_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"name": "bad"}"#).unwrap();
    let out = offmenu(&["verify", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = offmenu(&["verify", "no-such-scenario"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exported_mechanism_verifies_without_resynthesis() {
    let dir = tempfile::tempdir().unwrap();
    assert!(offmenu(&["synthesize", "subscription"], dir.path()).status.success());
    let exported = dir.path().join("scenario.json");
    let second = dir.path().join("second");
    let out = offmenu(&["verify", exported.to_str().unwrap(), "--checks", "doic,mso"], &second);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let out = offmenu(&["verify", exported.to_str().unwrap(), "--checks", "phi"], &second);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["simulate", "subscription", "--seed", "7", "--samples", "3000"];
    assert!(offmenu(&args, a.path()).status.success());
    assert!(offmenu(&[&args[..], &["--threads", "1"]].concat(), b.path()).status.success());
    for file in ["report.json", "quits.csv"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
}

#[test]
fn mc_mode_adds_sampled_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let out = offmenu(&["verify", "subscription", "--mode", "mc", "--checks", "barrier", "--samples", "500"], dir.path());
    assert!(out.status.success());
    let r = RunReport::load(&dir.path().join("report.json")).unwrap();
    assert_eq!(r.mode, "mc");
    assert!(verdict(&r, "barrier_sampled").passed);
    assert!(verdict(&r, "impulse_response_sampled").passed);
}
