use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DMatrix;
use noisestab::cli::{self, ExperimentConfig};
use noisestab::linalg::C64;
use noisestab::Error;

const BIN: &str = env!("CARGO_BIN_EXE_noisestab");

fn small_config(controller: &str, mask: &str) -> String {
    format!(
        r#"
[model]
kind = "advection_diffusion"
n = 50
nu = 0.01
c = -0.5

[mask]
{mask}

[controller]
kind = "real"
{controller}

[sde]
dt = 2e-3
t_end = 20.0
paths = 8
seed = 3
"#
    )
}

fn run(dir: &Path, args: &[&str], config: &str) -> Output {
    let cfg = dir.join("exp.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--quiet")
        .env_remove("NOISESTAB_OUT")
        .output()
        .unwrap()
}

#[test]
fn zero_sigma_fails_certification() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["run"], &small_config("sigma = 0.0", "lo = 0.3\nhi = 0.5"));
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let cert = fs::read_to_string(dir.path().join("out/certificate.json")).unwrap();
    assert!(cert.contains("\"FAIL\""));
}

#[test]
fn tuned_controller_passes_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_config("sigma = 8.0", "lo = 0.3\nhi = 0.5");
    let oa = run(a.path(), &["run"], &cfg);
    let ob = run(b.path(), &["run"], &cfg);
    assert_eq!(oa.status.code(), Some(0), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(ob.status.code(), Some(0));
    for f in ["spectrum.csv", "spectrum.json", "synthesis.json", "ensemble.csv", "certificate.json", "paths/path_0007.csv"] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    let header = fs::read_to_string(a.path().join("out/paths/path_0000.csv")).unwrap();
    assert!(header.starts_with("t,norm_X,norm_Xu,norm_Xs\n"));
}

#[test]
fn certify_reads_stored_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config("sigma = 8.0", "lo = 0.3\nhi = 0.5");
    assert_eq!(run(dir.path(), &["simulate"], &cfg).status.code(), Some(0));
    let input = dir.path().join("out");
    let out = run(dir.path(), &["certify", "--input", input.to_str().unwrap()], &cfg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(input.join("certificate.json")).unwrap().contains("\"PASS\""));
}

#[test]
fn empty_mask_is_a_model_stage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["run"], &small_config("sigma = 1.0", "lo = 0.501\nhi = 0.502"));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `model`"), "{err}");
}

#[test]
fn invalid_config_is_rejected_before_computing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config("sigma = 1.0", "lo = 0.3\nhi = 0.5").replace("dt = 2e-3", "dt = -1.0");
    let out = run(dir.path(), &["run"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `config`"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn matrix_file_model_runs_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let a = DMatrix::from_row_slice(3, 3, &[-0.4, 0.1, 0.0, 0.0, 1.0, 0.2, 0.0, 0.0, 2.0]).map(|v| C64::new(v, 0.0));
    cli::write_matrix(&dir.path().join("a.txt"), &a, true).unwrap();
    let (back, real) = cli::read_matrix(&dir.path().join("a.txt")).unwrap();
    assert!(real);
    assert_eq!(back, a);
    let cfg = "[model]\nkind = \"matrix\"\npath = \"a.txt\"\n[controller]\nkind = \"complex\"\nsigma = 1.0\n";
    let out = run(dir.path(), &["spectrum"], cfg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json = fs::read_to_string(dir.path().join("out/spectrum.json")).unwrap();
    assert!(json.contains("\"N\": 2"), "{json}");
}

#[test]
fn identity_matrix_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("id.txt");
    cli::write_matrix(&p, &DMatrix::<C64>::identity(4, 4), false).unwrap();
    let m = cli::matrix_roundtrip(&p).unwrap();
    assert_eq!(m.generator(), &DMatrix::<C64>::identity(4, 4));
    fs::write(&p, "4 4 real\n1 0 0\n").unwrap();
    match cli::read_matrix(&p) {
        Err(Error::MatrixFormat(msg)) => assert!(msg.contains("expected 16") && msg.contains("found 3")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bundled_config_is_valid() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/advdiff_real.toml");
    let cfg = ExperimentConfig::load(&p).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.sde.paths, 64);
}
