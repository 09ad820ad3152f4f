use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gossipq");

const SMALL: &str = r#"
algorithm = "ecd"
gamma = 0.05
T = 50
seed = 4

[topology]
kind = "ring"
n = 6

[problem]
kind = "quadratic"
dim = 5
noise = 0.1

[compressor]
kind = "quantize"
levels = 16
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn gossipq(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = gossipq(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn seed_flag_changes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let a = gossipq(&["run", "--config", &cfg]);
    let b = gossipq(&["run", "--config", &cfg, "--seed", "5"]);
    assert_ne!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&b.stdout).contains("# seed = 5"));
}

#[test]
fn trace_starts_with_metadata_block() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("gamma = 0.05", "gamma = \"theory\"");
    let cfg = write_config(dir.path(), "theory.toml", &text);
    let o = gossipq(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "# algorithm = \"ecd\"");
    let header = lines.iter().position(|l| !l.starts_with('#')).unwrap();
    assert_eq!(lines[header], "t,loss,grad_norm2,consensus,q_norm2,g_norm2,bits");
    let gamma_line = lines[..header].iter().find(|l| l.starts_with("# gamma = ") && !l.contains("theory")).unwrap();
    let gamma: f64 = gamma_line.trim_start_matches("# gamma = ").parse().unwrap();
    assert!(gamma > 0.0 && gamma < 1.0);
    assert_eq!(lines.len() - header - 1, 50);
}

#[test]
fn diverged_run_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("gamma = 0.05", "gamma = 5.0").replace("T = 50", "T = 500");
    let cfg = write_config(dir.path(), "huge.toml", &text);
    let o = gossipq(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).lines().any(|l| l.starts_with("diverged")));
}

#[test]
fn config_errors_exit_with_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (SMALL.replace("algorithm = \"ecd\"", "algorithm = \"\""), "algorithm"),
        (SMALL.replace("T = 50", "T = 50\nbogus = 1"), "bogus"),
        (
            SMALL
                .replace("algorithm = \"ecd\"", "algorithm = \"dcd\"")
                .replace("kind = \"quantize\"\nlevels = 16", "kind = \"synthetic\"\nnoise_bound = 0.1"),
            "compressor",
        ),
    ];
    for (k, (text, key)) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("bad{k}.toml"), text);
        let o = gossipq(&["run", "--config", &cfg]);
        assert_eq!(o.status.code(), Some(1));
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(&format!("`{key}`")), "{err}");
    }
    let o = gossipq(&["run", "--config", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn theory_prints_constants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = gossipq(&["theory", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8(o.stdout).unwrap();
    for key in ["rho = ", "mu = ", "dcd_feasible = ", "D1 = ", "C1 = ", "gamma_dcd = ", "gamma_ecd = "] {
        assert!(out.lines().any(|l| l.starts_with(key)), "missing {key}");
    }
}

#[test]
fn cost_grid_shape() {
    let o = gossipq(&["cost", "--bandwidths", "1e9,1e7", "--latencies", "0.001,0.002,0.005"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "bandwidth,latency,allreduce_s,decen_full_s,decen_compressed_s");
    assert_eq!(rows.len(), 7);
    assert!(rows[1].starts_with("1000000000,0.001,"));
    assert_eq!(gossipq(&["cost", "--levels", "0"]).status.code(), Some(1));
}

#[test]
fn seed_sweep_rows_differ_only_in_seed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let det = SMALL.replace("kind = \"quantize\"\nlevels = 16", "kind = \"identity\"");
    let cfg = write_config(dir.path(), "det.toml", &det);
    let o = gossipq(&["sweep", "--config", &cfg, "--axis", "seed", "--values", "1,2,3,4,5"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> =
        out.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (k + 1).to_string());
        assert_eq!(r[1], (k + 1).to_string());
        assert_eq!(r[2], "completed");
    }
    // Init is drawn per seed, so only gamma and step counts are shared.
    assert!(rows.iter().all(|r| r[3] == rows[0][3] && r[4] == rows[0][4]));
}

#[test]
fn sweep_records_bad_values_as_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = gossipq(&["sweep", "--config", &cfg, "--axis", "gamma", "--values", "0.05,abc"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0.05,4,completed,"));
    assert!(rows[1].starts_with("abc,4,error:"));
    let bad_axis = gossipq(&["sweep", "--config", &cfg, "--axis", "width", "--values", "1"]);
    assert_eq!(bad_axis.status.code(), Some(1));
}
