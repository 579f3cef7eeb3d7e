use std::path::Path;
use std::process::{Command, Output};

fn entangle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entangle")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_config(dir: &Path) -> String {
    let mut cfg = entangle_core::harness::ExperimentConfig::default();
    cfg.model = entangle_core::denoiser::DenoiserConfig::reduced();
    cfg.dataset.size = 64;
    cfg.training.steps = 5;
    cfg.training.batch_size = 2;
    cfg.training.heldout = 4;
    cfg.audit.n_images = 2;
    cfg.audit.prompts = vec!["square".into()];
    let path = dir.join("exp.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&entangle(&["nonsense"])), 1);
    assert_eq!(code(&entangle(&["audit", "--sampler", "euler"])), 1);
    assert_eq!(code(&entangle(&["audit", "--q", "1.5"])), 1);
    assert_eq!(code(&entangle(&["--help"])), 0);
}

#[test]
fn missing_files_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("absent.json");
    assert_eq!(code(&entangle(&["audit", "--checkpoint", ckpt.to_str().unwrap()])), 2);
    assert_eq!(code(&entangle(&["report", "--out", dir.path().to_str().unwrap()])), 2);
}

#[test]
fn failed_gradient_check_exits_with_three() {
    assert_eq!(code(&entangle(&["gradcheck", "--latents", "1"])), 0);
    assert_eq!(code(&entangle(&["gradcheck", "--latents", "1", "--tol", "1e-14"])), 3);
}

#[test]
fn train_audit_mitigate_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (cfg, out_s) = (small_config(dir.path()), out.to_str().unwrap().to_string());
    let c = |args: &[&str]| {
        let o = entangle(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    c(&["train", "--config", &cfg, "--out", &out_s]);
    assert!(out.join("model.json").exists() && out.join("training.json").exists());
    c(&["audit", "--config", &cfg, "--out", &out_s, "--heatmaps", "on"]);
    let first = std::fs::read(out.join("audit/metrics.csv")).unwrap();
    let first_json = std::fs::read(out.join("audit/summary.json")).unwrap();
    c(&["audit", "--config", &cfg, "--out", &out_s, "--heatmaps", "on"]);
    assert_eq!(first, std::fs::read(out.join("audit/metrics.csv")).unwrap());
    assert_eq!(first_json, std::fs::read(out.join("audit/summary.json")).unwrap());
    assert!(out.join("audit/heatmaps/square-s1000_green.pgm").exists());

    c(&["mitigate", "--config", &cfg, "--out", &out_s, "--lambda", "10"]);
    let energy = std::fs::read_to_string(out.join("mitigate/energy/square-s1001.csv")).unwrap();
    assert!(energy.starts_with("t,energy,grad_norm,ms"));
    assert_eq!(energy.lines().count(), 51);

    let rep = c(&["report", "--out", &out_s]);
    let text = String::from_utf8(rep.stdout).unwrap();
    assert!(text.contains("## Mitigation (λ = 10)"), "{text}");
    assert!(out.join("report.md").exists());
}

#[test]
fn generate_dataset_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("data");
    let o = entangle(&["generate-dataset", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(code(&o), 0);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["size"], 64);
    assert_eq!(manifest["seed"], 4);
    assert!(out.join("images/00063.ppm").exists());
}
