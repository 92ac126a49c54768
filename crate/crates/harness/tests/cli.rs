use std::path::Path;
use std::process::{Command, Output};

use nvib_harness::config::RunConfig;
use nvib_harness::run::{self, CHECKPOINT_FILE, LOSS_FILE, METRICS_FILE};

const SHORT: &str = "steps = 40\nlog_every = 10\nsamples = 12\nlm_steps = 30\n";

fn nvib(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvib")).args(args).current_dir(cwd).env_remove("NVIB_OUT_DIR").output().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("short.cfg"), SHORT).unwrap();
    dir
}

fn metric(csv: &str, key: &str) -> f64 {
    csv.lines().find_map(|l| l.strip_prefix(&format!("{key},"))).unwrap().parse().unwrap()
}

#[test]
fn fixed_seed_training_is_byte_identical() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = nvib(&["train", "--config", "short.cfg", "--seed", "7", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [METRICS_FILE, LOSS_FILE, CHECKPOINT_FILE] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let o = nvib(&["train", "--config", "short.cfg", "--seed", "8", "--out", "c"], dir.path());
    assert!(o.status.success());
    assert_ne!(
        std::fs::read(dir.path().join("a").join(METRICS_FILE)).unwrap(),
        std::fs::read(dir.path().join("c").join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn reloaded_checkpoint_reproduces_validation_loss() {
    let dir = setup();
    let o = nvib(&["train", "--config", "short.cfg", "--out", "r"], dir.path());
    assert!(o.status.success());
    let saved = std::fs::read_to_string(dir.path().join("r").join(METRICS_FILE)).unwrap();
    let o = nvib(&["eval", "--checkpoint", "r/model.ckpt", "--out", "e"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let again = std::fs::read_to_string(dir.path().join("e").join(METRICS_FILE)).unwrap();
    assert!((metric(&saved, "loss") - metric(&again, "loss")).abs() < 1e-9);

    let report = run::eval_checkpoint(&dir.path().join("r").join(CHECKPOINT_FILE), None).unwrap();
    assert!((report.loss.total - metric(&saved, "loss")).abs() < 1e-9);
}

#[test]
fn loss_curve_has_one_row_per_logged_step() {
    let dir = setup();
    assert!(nvib(&["train", "--config", "short.cfg", "--out", "r"], dir.path()).status.success());
    let text = std::fs::read_to_string(dir.path().join("r").join(LOSS_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,l_r,l_d,l_g,total");
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[4].starts_with("40,"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = setup();
    let o = nvib(
        &["train", "--config", "short.cfg", "--variant", "VTS-0.5", "--lambda-g", "0.3", "--out", "r"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, cfg, _) = run::load_checkpoint(&dir.path().join("r").join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(cfg.lambda_g_prime, 0.3);
    assert_eq!(cfg.steps, 40);
    assert_eq!(cfg.variant.to_string(), "VTS-0.5");
}

#[test]
fn output_directory_defaults_to_the_environment() {
    let dir = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_nvib"))
        .args(["train", "--config", "short.cfg"])
        .current_dir(dir.path())
        .env("NVIB_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("from_env").join(CHECKPOINT_FILE).exists());
}

#[test]
fn generate_and_plot_write_their_files() {
    let dir = setup();
    assert!(nvib(&["train", "--config", "short.cfg", "--out", "r"], dir.path()).status.success());
    let o = nvib(&["generate", "--out", "r"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let samples = std::fs::read_to_string(dir.path().join("r").join("samples.txt")).unwrap();
    assert_eq!(samples.lines().count(), 12);
    for what in ["fig3", "loss-curves", "nu-vs-length"] {
        let o = nvib(&["plot", what, "--out", "r"], dir.path());
        assert!(o.status.success(), "{what}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["fig3.csv", "fig3.svg", "loss_curves.svg", "nu_vs_length.csv", "nu_vs_length.svg"] {
        assert!(dir.path().join("r").join(f).exists(), "{f}");
    }
}

#[test]
fn fig3_curves_cross_once_between_three_tenths_and_one() {
    let dir = setup();
    assert!(nvib(&["plot", "fig3", "--out", "p"], dir.path()).status.success());
    let text = std::fs::read_to_string(dir.path().join("p").join("fig3.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    let signs: Vec<bool> = rows.iter().map(|r| r[1] < r[2]).collect();
    let flips: Vec<usize> = (1..signs.len()).filter(|&i| signs[i] != signs[i - 1]).collect();
    assert_eq!(flips.len(), 1);
    let alpha = rows[flips[0]][0];
    assert!(alpha > 0.3 && alpha < 1.0, "crossing at {alpha}");
}

#[test]
fn untrained_nvae_keeps_every_vector() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let data = run::load_data(&cfg, None).unwrap();
    let mc = cfg.model_config(data.train.vocab.len(), data.train.max_len()).unwrap();
    let model = nvib_model::Autoencoder::new(mc, cfg.seed).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    nvib_model::checkpoint::save(&path, &model, &run::checkpoint_metadata(&cfg, &data.train.vocab)).unwrap();
    nvib_harness::plot::emit_nu_vs_length(dir.path(), &path).unwrap();
    let text = std::fs::read_to_string(dir.path().join("nu_vs_length.csv")).unwrap();
    for line in text.lines().skip(1) {
        let nu: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(nu > 0.99, "{line}");
    }
}

#[test]
fn exit_codes_distinguish_usage_from_failure() {
    let dir = setup();
    assert_eq!(nvib(&[], dir.path()).status.code(), Some(2));
    assert_eq!(nvib(&["train", "--variant", "nope"], dir.path()).status.code(), Some(2));
    assert_eq!(nvib(&["eval", "--checkpoint", "missing.ckpt"], dir.path()).status.code(), Some(2));
    assert_eq!(nvib(&["plot", "nu-vs-length", "--out", "none"], dir.path()).status.code(), Some(2));
    assert_eq!(nvib(&["verify", "everything"], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.cfg"), "steps = many\n").unwrap();
    assert_eq!(nvib(&["train", "--config", "bad.cfg"], dir.path()).status.code(), Some(2));
    let o = nvib(&["verify", "attention"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 failed"));
}
