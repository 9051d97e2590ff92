use std::path::Path;
use std::process::{Command, Output};

use ddflow::microgrid::report::Table;

fn ddflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_data_reports_rank() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let out = ddflow(&[
        "generate-data",
        "--samples",
        "9",
        "--seed",
        "0",
        "--out",
        s(&data),
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("PE: rank 9/9"), "{}", stdout(&out));
    assert!(data.exists());

    let short = ddflow(&[
        "generate-data",
        "--samples",
        "8",
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    assert_eq!(code(&short), 1);
    assert!(String::from_utf8_lossy(&short.stderr).contains("rank 8 < 9"));

    let all = dir.path().join("all.csv");
    let out = ddflow(&[
        "generate-data",
        "--samples",
        "21",
        "--mode",
        "all-pairs",
        "--out",
        s(&all),
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("PE: rank 21/21"), "{}", stdout(&out));
}

#[test]
fn solve_opf_variants_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    assert_eq!(
        code(&ddflow(&[
            "generate-data",
            "--samples",
            "9",
            "--out",
            s(&data)
        ])),
        0
    );

    let inj = "--injections=0.6,-0.3,0.4,0.2,_";
    let reference = dir.path().join("ref.csv");
    let out = ddflow(&[
        "solve-opf",
        "--variant",
        "reference",
        inj,
        "--out",
        s(&reference),
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let dd = dir.path().join("dd.csv");
    let out = ddflow(&[
        "solve-opf",
        "--variant",
        "dd-convex",
        "--data",
        s(&data),
        inj,
        "--out",
        s(&dd),
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("max tightness residual"));
    let (a, b) = (
        std::fs::read_to_string(&reference).unwrap(),
        std::fs::read_to_string(&dd).unwrap(),
    );
    let value = |text: &str, key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key},")))
            .unwrap_or_else(|| panic!("{key} missing"))
            .parse()
            .unwrap()
    };
    assert!((value(&a, "objective") - value(&b, "objective")).abs() < 1e-5);

    let out = ddflow(&[
        "solve-opf",
        "--variant",
        "dd-generalized",
        "--data",
        s(&data),
        inj,
        "--out",
        s(&dd),
    ]);
    assert_eq!(code(&out), 5, "{out:?}");

    let out = ddflow(&[
        "solve-opf",
        "--variant",
        "reference",
        inj,
        "--line-limit",
        "0.1",
        "--out",
        s(&dd),
    ]);
    assert_eq!(code(&out), 2, "{out:?}");

    let out = ddflow(&["solve-opf", "--variant", "dd", inj, "--out", s(&dd)]);
    assert_ne!(code(&out), 0);
}

#[test]
fn schema_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.csv");
    assert_eq!(
        code(&ddflow(&["solve-opf", "--variant", "reference", "--beta"])),
        4
    );
    let missing = ddflow(&[
        "solve-opf",
        "--variant",
        "reference",
        "--grid",
        "/nonexistent.toml",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&missing), 4);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "nodes = [1, 2\n").unwrap();
    let res = ddflow(&[
        "generate-data",
        "--samples",
        "9",
        "--grid",
        s(&bad),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 4, "{res:?}");
    std::fs::write(&bad, "nodes = [1, 2]\nlines = []\n").unwrap();
    let res = ddflow(&[
        "generate-data",
        "--samples",
        "9",
        "--grid",
        s(&bad),
        "--out",
        s(&out),
    ]);
    assert_ne!(code(&res), 0);
    assert!(String::from_utf8_lossy(&res.stderr).contains("disconnected"));

    let cfg = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../configs/table1.toml"
    ))
    .unwrap();
    let no_beta: String = cfg
        .lines()
        .filter(|l| !l.trim_start().starts_with("beta"))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, no_beta).unwrap();
    let res = ddflow(&[
        "run-mpc",
        "--config",
        s(&path),
        "--variant",
        "reference",
        "--profiles",
        "seed:0",
        "--steps",
        "1",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&res), 4, "{res:?}");
    assert!(String::from_utf8_lossy(&res.stderr).contains("beta"));
    assert_eq!(code(&ddflow(&["--help"])), 0);
}

#[test]
fn mpc_runs_compare() {
    let dir = tempfile::tempdir().unwrap();
    let run = |variant: &str, steps: &str, name: &str| {
        let d = dir.path().join(name);
        let out = ddflow(&[
            "run-mpc",
            "--variant",
            variant,
            "--profiles",
            "seed:3",
            "--steps",
            steps,
            "--out-dir",
            s(&d),
        ]);
        assert_eq!(code(&out), 0, "{out:?}");
        d
    };
    let a = run("reference", "4", "a");
    let b = run("dd-convex", "4", "b");
    let c = run("reference", "3", "c");
    for f in ["results.csv", "solve_times.csv", "kpis.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let t = Table::read(std::fs::File::open(a.join("results.csv")).unwrap()).unwrap();
    assert_eq!(t.rows.len(), 4);
    assert_eq!(t.column("k").unwrap(), vec![0.0, 1.0, 2.0, 3.0]);

    let one = run("reference", "1", "one");
    let kpi = Table::read(std::fs::File::open(one.join("kpis.csv")).unwrap()).unwrap();
    let res = Table::read(std::fs::File::open(one.join("results.csv")).unwrap()).unwrap();
    let step: f64 = ["cost_sw", "cost_p"]
        .iter()
        .map(|c| res.column(c).unwrap()[0])
        .sum();
    assert!((kpi.column("mean_operating_cost").unwrap()[0] - step).abs() < 1e-12);
    assert_eq!(
        kpi.column("mean_loss_cost").unwrap(),
        res.column("cost_loss").unwrap()
    );

    let same = ddflow(&["compare", "--runs", s(&a), s(&a)]);
    assert_eq!(code(&same), 0);
    let out = ddflow(&["compare", "--runs", s(&a), s(&b)]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS"));
    assert_eq!(code(&ddflow(&["compare", "--runs", s(&a), s(&c)])), 5);
}
