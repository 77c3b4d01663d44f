use std::path::Path;
use std::process::{Command, Output};

use walkplan::analysis::{series_io, SpeedSeries};

fn walkplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_walkplan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_is_deterministic_with_provenance() {
    let a = walkplan(&["simulate", "--terrain", "UD", "--strategy", "horizon:3"]);
    let b = walkplan(&["simulate", "--terrain", "UD", "--strategy", "horizon:3"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# walkplan "));
    let hash_line = lines.next().unwrap();
    assert_eq!(hash_line.len(), "# config ".len() + 64);
    assert!(text.contains("\ni,b_multiple,delta,u,v_plus,tau,v_mid,t_mid,time_gain\n"));
    assert_eq!(csv_rows(&text).len(), 14);

    let json = walkplan(&["simulate", "--terrain", "UD", "--format", "json"]);
    let doc: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(doc["steps"].as_array().unwrap().len(), 14);
    assert_eq!(doc["provenance"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn out_files_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let o = walkplan(&[
            "sweep-horizon",
            "--terrain",
            "UD",
            "--m",
            "1-3",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
        assert!(stdout(&o).contains("UD: 3 horizons"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn control_nominal_has_no_excess() {
    let o = walkplan(&[
        "simulate",
        "--terrain",
        "control",
        "--strategy",
        "nominal",
        "--format",
        "json",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(doc["summary"]["work_excess"].as_f64().unwrap().abs() < 1e-12);
    assert!(doc["summary"]["final_time_gain"].as_f64().unwrap().abs() < 1e-9);
}

#[test]
fn long_horizon_on_two_steps_equals_full() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.terrain");
    std::fs::write(
        &path,
        "name = two\npad_before = 0\npad_after = 0\nheights = 1 0\n",
    )
    .unwrap();
    let t = path.to_str().unwrap();
    let h = csv_rows(&stdout(&walkplan(&[
        "simulate",
        "--terrain",
        t,
        "--strategy",
        "horizon:3",
    ])));
    let f = csv_rows(&stdout(&walkplan(&[
        "simulate",
        "--terrain",
        t,
        "--strategy",
        "min-energy",
    ])));
    assert_eq!(h.len(), 2);
    for (a, b) in h.iter().zip(&f) {
        let (ua, ub): (f64, f64) = (a[3].parse().unwrap(), b[3].parse().unwrap());
        assert!((ua - ub).abs() < 1e-6, "{ua} vs {ub}");
    }
}

fn write_subjects(path: &Path, model: &SpeedSeries, copies: usize) {
    let series: Vec<SpeedSeries> = (0..copies)
        .map(|k| {
            let mut s = model.clone();
            s.label = format!("s{k}");
            // Small, distinct offsets so the per-step spread is nonzero.
            for (i, v) in s.speeds.iter_mut().enumerate() {
                *v += 1e-3 * (((i * 7 + k * 3) % 5) as f64 - 2.0);
            }
            s
        })
        .collect();
    let mut f = std::fs::File::create(path).unwrap();
    series_io::write_series(&mut f, &[], &series).unwrap();
}

#[test]
fn compare_model_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.csv");
    let o = walkplan(&[
        "simulate",
        "--terrain",
        "P",
        "--series",
        "--out",
        model_path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let set = series_io::read_series(std::fs::File::open(&model_path).unwrap()).unwrap();
    let model = &set.series[0];
    assert_eq!(model.terrain, "P");

    // The model mean duplicated exactly: rho is 1.
    let twins = dir.path().join("twins.csv");
    let copies: Vec<SpeedSeries> = ["a", "b"]
        .iter()
        .map(|l| {
            let mut s = model.clone();
            s.label = (*l).to_string();
            s
        })
        .collect();
    series_io::write_series(std::fs::File::create(&twins).unwrap(), &[], &copies).unwrap();
    let o = walkplan(&[
        "compare",
        "--data",
        twins.to_str().unwrap(),
        "--model",
        model_path.to_str().unwrap(),
        "--shuffles",
        "20",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((doc["pearson_rho"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bits/step"));

    // Jittered subjects around the model: positive information per step.
    let data = dir.path().join("subjects.csv");
    write_subjects(&data, model, 5);
    let args = [
        "compare",
        "--data",
        data.to_str().unwrap(),
        "--shuffles",
        "200",
        "--seed",
        "4",
    ];
    let a = walkplan(&args);
    let b = walkplan(&args);
    assert_eq!(
        a.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&a.stderr)
    );
    assert_eq!(a.stdout, b.stdout);
    let doc: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert!(doc["bits_per_step"].as_f64().unwrap() > 0.0);
    assert!(doc["pearson_rho"].as_f64().unwrap() > 0.99);
    let ci = doc["rho_ci95"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() < ci[1].as_f64().unwrap());

    // Live solve on another terrain does not match the data.
    let o = walkplan(&[
        "compare",
        "--data",
        data.to_str().unwrap(),
        "--terrain",
        "UD",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("terrain mismatch"));
}

#[test]
fn exit_codes() {
    let o = walkplan(&["simulate", "--terrain", "nowhere"]);
    assert_eq!(o.status.code(), Some(2));
    let o = walkplan(&["simulate", "--strategy", "fastest"]);
    assert_eq!(o.status.code(), Some(2));
    let o = walkplan(&["--speed", "-1", "terrains", "list"]);
    assert_eq!(o.status.code(), Some(2));
    let o = walkplan(&["simulate", "--terrain", "P", "--strategy", "nominal"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("falls backward"));
    let o = walkplan(&["simulate", "--terrain", "P", "--max-iterations", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!o.stdout.is_empty());
    let o = walkplan(&["bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# slow walking\nspeed = 1.0\nformat = json\n").unwrap();
    let c = cfg.to_str().unwrap();
    let slow = walkplan(&[
        "--config",
        c,
        "simulate",
        "--terrain",
        "control",
        "--strategy",
        "nominal",
    ]);
    assert_eq!(slow.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_slice(&slow.stdout).unwrap();
    assert_eq!(doc["provenance"]["config"]["speed"], "1");
    let fast = walkplan(&[
        "--config",
        c,
        "--speed",
        "1.5",
        "simulate",
        "--terrain",
        "control",
        "--strategy",
        "nominal",
    ]);
    let doc: serde_json::Value = serde_json::from_slice(&fast.stdout).unwrap();
    assert_eq!(doc["provenance"]["config"]["speed"], "1.5");
    assert!((doc["params"]["pushoff"].as_f64().unwrap() - 0.0342).abs() < 1e-12);

    std::fs::write(&cfg, "sped = 1.0\n").unwrap();
    let o = walkplan(&["--config", c, "terrains", "list"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
}

#[test]
fn terrains_subcommands() {
    let list = stdout(&walkplan(&["terrains", "list"]));
    for name in ["control", "U", "D", "UD", "D&UD", "P", "C1", "C2"] {
        assert!(
            list.lines()
                .any(|l| l.split_whitespace().next() == Some(name)),
            "{name}"
        );
    }
    assert!(list.contains("canonical") && list.contains("approximate"));
    let export = stdout(&walkplan(&["terrains", "export", "P"]));
    assert_eq!(export, "name = P\nunit_height = 0.075\npad_before = 6\npad_after = 6\nheights = 1 2 3 3 3 3 2 1 0\n");
    let show = stdout(&walkplan(&["--pad", "2", "terrains", "show", "U"]));
    assert!(show.contains("# steps 5"));
    assert!(show.contains("# disturbances 0.00000 0.00000 0.09508 0.00000 0.00000"));
}

#[test]
fn plot_script_references_input() {
    let o = walkplan(&["plot-script", "--kind", "sweep", "--input", "sweep.csv"]);
    let text = stdout(&o);
    assert!(text.contains("plot 'sweep.csv' using 1:2"));
    assert!(text.contains("plot 'sweep.csv' using 1:4"));
}
