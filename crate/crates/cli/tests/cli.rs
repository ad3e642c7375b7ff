use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

const SMALL: &str = r#"
[mesh]
h_target = 0.08
[modes]
n_modes = 12
[time]
dt = 0.01
horizon = 0.5
[data]
u0_modes = [[1, 0.01], [2, 0.005]]
u1_modes = [[3, 0.01]]
forcing = "bump"
forcing_amplitude = 0.1
[seeds]
probes = 11
verify = 5
"#;

fn fwave(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fwave"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_config(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn hashes(dir: &Path) -> BTreeMap<String, String> {
    manifest(dir)["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| {
            (
                a["path"].as_str().unwrap().to_string(),
                a["sha256"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

#[test]
fn every_subcommand_writes_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = "[verify]\nxie_series = 20\nlinf_last_level = 2\nlinf_h_target = 0.1\nlinf_probes = 2\npoincare_random = 10\n";
    write_config(tmp.path(), "c.toml", &format!("{SMALL}{extra}"));
    for cmd in ["mesh", "eigs", "solve-linear", "solve-westervelt", "verify"] {
        let out = format!("o_{cmd}");
        let (code, err) = fwave(
            tmp.path(),
            &[cmd, "--config", "c.toml", "--out", &out, "--threads", "2"],
        );
        assert_eq!(code, 0, "{cmd}: {err}");
        let m = manifest(&tmp.path().join(&out));
        assert_eq!(m["status"], "ok");
        assert_eq!(m["experiment"], cmd);
        for key in ["c", "nu", "eps", "alpha"] {
            assert!(
                m["config"]["physics"][key].is_number(),
                "{cmd}: physics.{key} missing"
            );
        }
        assert!(m["wall_time_seconds"].is_number());
        for (path, _) in hashes(&tmp.path().join(&out)) {
            assert!(tmp.path().join(&out).join(path).is_file());
        }
    }
}

#[test]
fn alpha_zero_reproduces_linear_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(
        tmp.path(),
        "c.toml",
        &format!("{SMALL}[physics]\nalpha = 0.0\n"),
    );
    assert_eq!(
        fwave(
            tmp.path(),
            &["solve-linear", "--config", "c.toml", "--out", "lin"]
        )
        .0,
        0
    );
    assert_eq!(
        fwave(
            tmp.path(),
            &["solve-westervelt", "--config", "c.toml", "--out", "wes"]
        )
        .0,
        0
    );
    let a = std::fs::read(tmp.path().join("lin/trajectory.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("wes/trajectory.csv")).unwrap();
    assert!(a == b, "trajectories differ");
}

#[test]
fn rerun_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "c.toml", SMALL);
    assert_eq!(
        fwave(
            tmp.path(),
            &["solve-linear", "--config", "c.toml", "--out", "a"]
        )
        .0,
        0
    );
    assert_eq!(
        fwave(
            tmp.path(),
            &["solve-linear", "--config", "c.toml", "--out", "b"]
        )
        .0,
        0
    );
    for f in ["trajectory.csv", "energy.csv", "linear.json"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn thread_count_and_manifest_replay_do_not_change_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let gated = SMALL.replace(
        "forcing_amplitude = 0.1",
        "forcing_amplitude = 0.1\ngate_fraction = 0.5",
    );
    write_config(tmp.path(), "c.toml", &gated);
    let args = ["solve-westervelt", "--config", "c.toml"];
    assert_eq!(
        fwave(
            tmp.path(),
            &[&args[..], &["--out", "t1", "--threads", "1"]].concat()
        )
        .0,
        0
    );
    assert_eq!(
        fwave(
            tmp.path(),
            &[&args[..], &["--out", "t4", "--threads", "4"]].concat()
        )
        .0,
        0
    );
    let replay = [
        "solve-westervelt",
        "--config",
        "t1/manifest.json",
        "--out",
        "r3",
        "--threads",
        "3",
    ];
    assert_eq!(fwave(tmp.path(), &replay).0, 0);
    let h1 = hashes(&tmp.path().join("t1"));
    assert_eq!(h1.len(), 4);
    assert_eq!(h1, hashes(&tmp.path().join("t4")));
    assert_eq!(h1, hashes(&tmp.path().join("r3")));
}

#[test]
fn mosco_report_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"
[mesh]
h_target = 0.1
[modes]
n_modes = 8
[time]
dt = 0.02
horizon = 0.2
[solver]
n_probes = 16
[mosco]
first_level = 1
last_level = 2
reference_level = 3
[seeds]
probes = 3
verify = 4
"#;
    write_config(tmp.path(), "m.toml", cfg);
    let (code, err) = fwave(tmp.path(), &["mosco", "--config", "m.toml", "--out", "o"]);
    assert_eq!(code, 0, "{err}");
    let r: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("o/mosco.json")).unwrap())
            .unwrap();
    let levels = r["levels"].as_array().unwrap();
    assert_eq!(
        levels
            .iter()
            .map(|l| l["m"].as_u64().unwrap())
            .collect::<Vec<_>>(),
        vec![1, 2]
    );
    let keys = [
        "m",
        "is_reference",
        "n_vertices",
        "n_triangles",
        "lambda_1",
        "sym_diff_area",
        "e_m",
        "xnorm",
        "F_values",
        "F_gaps",
        "iterations",
        "max_ratio",
        "gate",
        "status",
    ];
    for l in levels.iter().chain(std::iter::once(&r["reference"])) {
        for k in keys {
            assert!(l.get(k).is_some(), "missing {k}");
        }
        assert_eq!(l["status"], "ok");
        assert_eq!(l["F_values"].as_array().unwrap().len(), 6);
    }
    assert_eq!(r["reference"]["m"], 3);
    assert_eq!(r["reference"]["is_reference"], true);
    for k in [
        "sym_diff_strictly_decreasing",
        "e_final_nonincreasing",
        "f_gaps_decreasing",
        "uniform_bound_holds",
    ] {
        assert!(r["checks"].get(k).is_some(), "missing check {k}");
    }
    for k in ["budget", "radius", "amplitude", "params", "options"] {
        assert!(r.get(k).is_some(), "missing {k}");
    }
    let csv = std::fs::read_to_string(tmp.path().join("o/mosco.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 6);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "bad.toml", "[mesh]\nh_target = -1.0\n");
    let (code, err) = fwave(tmp.path(), &["mesh", "--config", "bad.toml", "--out", "o1"]);
    assert_eq!(code, 2);
    assert!(err.contains("mesh.h_target"), "{err}");

    write_config(tmp.path(), "typo.toml", "[mesh]\nh_targt = 0.1\n");
    assert_eq!(fwave(tmp.path(), &["mesh", "--config", "typo.toml"]).0, 2);

    write_config(tmp.path(), "noseed.toml", "");
    let (code, err) = fwave(
        tmp.path(),
        &["verify", "--config", "noseed.toml", "--out", "o2"],
    );
    assert_eq!(code, 2);
    assert!(err.contains("seeds"), "{err}");

    write_config(tmp.path(), "other.toml", "experiment = \"mosco\"\n");
    assert_eq!(
        fwave(
            tmp.path(),
            &["eigs", "--config", "other.toml", "--out", "o3"]
        )
        .0,
        2
    );

    let big = SMALL.replace(
        "u0_modes = [[1, 0.01], [2, 0.005]]",
        "u0_modes = [[1, 50.0]]",
    );
    write_config(
        tmp.path(),
        "big.toml",
        &format!("{big}[solver]\nradius = 100.0\n"),
    );
    let (code, err) = fwave(
        tmp.path(),
        &["solve-westervelt", "--config", "big.toml", "--out", "o4"],
    );
    assert_eq!(code, 4, "{err}");
    assert_eq!(manifest(&tmp.path().join("o4"))["exit_code"], 4);

    write_config(
        tmp.path(),
        "forced.toml",
        &format!("{big}[solver]\nradius = 100.0\noverride_gate = true\n"),
    );
    let (code, err) = fwave(
        tmp.path(),
        &["solve-westervelt", "--config", "forced.toml", "--out", "o5"],
    );
    assert_eq!(code, 3, "{err}");
    let log = std::fs::read_to_string(tmp.path().join("o5/iteration_log.csv")).unwrap();
    assert!(log.trim_end().ends_with("diverged"));
}

#[test]
fn book_config_example_is_valid() {
    let chapter = include_str!("../../../book/src/cli.md");
    let start = chapter.find("```toml\n").unwrap() + "```toml\n".len();
    let text = &chapter[start..start + chapter[start..].find("```").unwrap()];
    let cfg = fwave_cli::RunConfig::from_toml(text).unwrap();
    cfg.validate(fwave_cli::Experiment::SolveWestervelt).unwrap();
}
