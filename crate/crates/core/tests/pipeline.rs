use entangle_core::attribution::{attribution_set, recorded_aggregate};
use entangle_core::denoiser::{Denoiser, DenoiserConfig};
use entangle_core::guidance::{run_cfg_sampling, run_guided_batch, run_guided_sampling};
use entangle_core::harness::experiment::{evaluate, summary_json, write_outputs, RunMode};
use entangle_core::harness::{generate_dataset, DatasetConfig, ExperimentConfig};
use entangle_core::metrics::encode_csv;
use entangle_core::Exec;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model = DenoiserConfig::reduced();
    cfg.audit.prompts = vec!["circle".into(), "bar".into()];
    cfg.audit.n_images = 3;
    cfg
}

fn model(cfg: &ExperimentConfig) -> Denoiser {
    Denoiser::new(cfg.model.clone(), 21).unwrap()
}

#[test]
fn dataset_frequencies_follow_config() {
    let mut d = DatasetConfig::default();
    d.size = 10_000;
    let data = generate_dataset(&d, 8, 3).unwrap();
    let with_color = data.items.iter().filter(|i| i.caption.len() == 3).count() as f64 / 1e4;
    assert!((with_color - 0.5).abs() < 0.02, "{with_color}");
    for (shape, counts) in &data.manifest.counts {
        let total: usize = counts.iter().sum();
        let major = d.majority_color(shape).unwrap();
        let idx = ["red", "green", "blue"].iter().position(|c| *c == major).unwrap();
        let share = counts[idx] as f64 / total as f64;
        assert!((share - 0.9).abs() < 0.02, "{shape}: {share}");
        assert!((total as f64 / 1e4 - 1.0 / 3.0).abs() < 0.02);
    }
}

#[test]
fn attribution_with_generation_prompt_reproduces_trace() {
    let cfg = small_config();
    let m = model(&cfg);
    let schedule = cfg.schedule.build().unwrap();
    let mut g = cfg.guidance_for("circle", 4).unwrap();
    g.attribution_prompt = g.prompt.clone();
    let (_, trace) = run_cfg_sampling(&m, &schedule, &g).unwrap();
    trace.check_complete().unwrap();
    let attr = m.embed(&g.prompt).unwrap();
    let ours = attribution_set(&m, &trace, &attr, 1).unwrap();
    let recorded = recorded_aggregate(&trace, 1).unwrap();
    assert_eq!(ours.aggregate.values, recorded.aggregate.values);
    for (x, y) in ours.blockwise.iter().zip(&recorded.blockwise) {
        assert_eq!(x.values, y.values);
    }
}

#[test]
fn zero_lambda_matches_plain_guidance_bitwise() {
    let cfg = small_config();
    let m = model(&cfg);
    let schedule = cfg.schedule.build().unwrap();
    let mut g = cfg.guidance_for("bar", 9).unwrap();
    g.lambda = 0.0;
    let (z, trace) = run_cfg_sampling(&m, &schedule, &g).unwrap();
    let guided = run_guided_sampling(&m, &schedule, &g).unwrap();
    assert_eq!(guided.final_latent, z);
    assert_eq!(guided.trace.records, trace.records);
    assert_eq!(guided.energy.steps.len(), schedule.total_steps());
    assert!(guided.energy.grad_norms().iter().all(|&n| n == 0.0));
}

#[test]
fn guided_batch_is_identical_across_strategies() {
    let cfg = small_config();
    let m = model(&cfg);
    let schedule = cfg.schedule.build().unwrap();
    let g = cfg.guidance_for("circle", 0).unwrap();
    let seq = run_guided_batch(Exec::Sequential, &m, &schedule, &g, &[1, 2, 3]).unwrap();
    let par = run_guided_batch(Exec::Parallel, &m, &schedule, &g, &[1, 2, 3]).unwrap();
    for (a, b) in seq.iter().zip(&par) {
        assert_eq!(a.final_latent, b.final_latent);
        assert_eq!(a.energy.energies(), b.energy.energies());
    }
}

#[test]
fn audit_outputs_are_byte_identical() {
    let cfg = small_config();
    let m = model(&cfg);
    let a = evaluate(&m, &cfg, RunMode::Audit).unwrap();
    let b = evaluate(&m, &cfg, RunMode::Audit).unwrap();
    assert_eq!(encode_csv(&a.reports).unwrap(), encode_csv(&b.reports).unwrap());
    assert_eq!(summary_json(&a, &cfg), summary_json(&b, &cfg));

    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &a, &cfg).unwrap();
    let csv = std::fs::read(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, encode_csv(&a.reports).unwrap());
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn mitigate_at_zero_lambda_reports_audit_numbers() {
    let mut cfg = small_config();
    cfg.guidance.lambda = 0.0;
    let m = model(&cfg);
    let a = evaluate(&m, &cfg, RunMode::Audit).unwrap();
    let g = evaluate(&m, &cfg, RunMode::Mitigate).unwrap();
    for (ra, rg) in a.reports.iter().zip(&g.reports) {
        assert_eq!(ra.images, rg.images);
        assert_eq!(ra.miou, rg.miou);
    }
    let traces: Vec<_> = g.images.iter().flatten().map(|r| r.energy.as_ref().unwrap().steps.len()).collect();
    assert!(traces.iter().all(|&n| n == cfg.schedule.build().unwrap().total_steps()));
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    let cfg = small_config();
    std::fs::write(&path, cfg.to_json()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    std::fs::write(&path, cfg.to_json().replace("\"n_images\"", "\"n_imgs\"")).unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
}
