//! End-to-end runs of the `deblur` binary on a tiny model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &str = "\
# small enough for a debug build
image_size = 16
channels = 4,8
latent_dim = 2
hidden = 8
g_hidden = 8
kernel_size = 3
batch_size = 8
n_images = 24
epochs = 2
warmup_epochs = 1
ckpt_every = 1
samples = 4
";

fn deblur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deblur"))
        .args(args)
        .env_remove("DEBLUR_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("tiny.cfg");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn manifest_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("manifest.cfg")).unwrap();
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .find_map(|l| {
            l.split_once('=')
                .filter(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| panic!("{key} missing from manifest"))
}

/// One trained run shared by the read-only command tests.
fn trained() -> &'static Path {
    static RUN: OnceLock<tempfile::TempDir> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "");
        let out = dir.path().join("run");
        let o = deblur(&["train", "--config", s(&cfg), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        dir
    })
    .path()
}

fn ckpt() -> PathBuf {
    trained().join("run/ckpt_epoch2.dbve")
}

#[test]
fn train_writes_the_run_tree() {
    let run = trained().join("run");
    for f in ["manifest.cfg", "metrics.csv", "ckpt_epoch1.dbve", "ckpt_epoch2.dbve"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    for e in ["epoch001", "epoch002"] {
        assert!(run.join(format!("samples/{e}_generated.pgm")).is_file());
        assert!(run.join(format!("samples/{e}_recon.pgm")).is_file());
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(
        rows[0],
        "epoch,phase,recon,logdet,kl,beta,total,g_loss,mean_kernel_m2,psnr,ssim"
    );
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1,warmup,") && rows[2].starts_with("2,wiener,"));
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = deblur(&[
        "train",
        "--config",
        s(&dir.path().join("absent.cfg")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn unknown_keys_list_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = deblur(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
        "--bogus=1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("bogus") && err.contains("warmup_epochs") && err.contains("latent_dim"),
        "{err}"
    );
}

#[test]
fn overrides_beat_the_file_which_beats_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 1\nwarmup_epochs = 1\nbeta = 0.5\n");
    let out = dir.path().join("o");
    let o = deblur(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--beta=2",
        "--lr",
        "0.001",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest_value(&out, "beta"), "2");
    assert_eq!(manifest_value(&out, "lr"), "0.001");
    assert_eq!(manifest_value(&out, "epochs"), "1");
    assert_eq!(manifest_value(&out, "c"), "0.025");
}

#[test]
fn environment_seed_is_only_a_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 1\nwarmup_epochs = 1\n");
    let run = |out: &str, extra: &[&str]| {
        let out = dir.path().join(out);
        let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        let o = Command::new(env!("CARGO_BIN_EXE_deblur"))
            .args(&args)
            .env("DEBLUR_SEED", "41")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        manifest_value(&out, "seed")
    };
    assert_eq!(run("env", &[]), "41");
    assert_eq!(run("cli", &["--seed=3"]), "3");
}

#[test]
fn generate_is_reproducible_from_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    let draw = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = deblur(&[
            "generate",
            "--ckpt",
            s(&ckpt()),
            "--out",
            s(&out),
            "--n",
            "16",
            "--seed",
            seed,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join("samples/generated.pgm")).unwrap()
    };
    let a = draw("a", "7");
    assert_eq!(a, draw("b", "7"));
    assert_ne!(a, draw("c", "8"));
}

#[test]
fn spectrum_of_data_against_itself_has_zero_gap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = deblur(&["spectrum", "--data", "shapes:40", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let gap = fs::read_to_string(out.join("spectra/gap.csv")).unwrap();
    let row: Vec<f64> = gap
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!((row[0], row[1]), (0.0, 0.0));
    for f in ["data.pgm", "reconstruction.pgm", "radial.csv"] {
        assert!(out.join("spectra").join(f).is_file());
    }
}

#[test]
fn analysis_commands_leave_the_checkpoint_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let before = fs::read(ckpt()).unwrap();
    for cmd in ["reconstruct", "estimate-kernel", "evaluate"] {
        let out = dir.path().join(cmd);
        let o = deblur(&[
            cmd,
            "--ckpt",
            s(&ckpt()),
            "--data",
            "shapes:24",
            "--out",
            s(&out),
            "--n",
            "4",
        ]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        assert!(out.join("manifest.cfg").is_file());
    }
    let o = deblur(&[
        "spectrum",
        "--ckpt",
        s(&ckpt()),
        "--data",
        "shapes:24",
        "--out",
        s(&dir.path().join("sp")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(ckpt()).unwrap(), before);

    let kernels = fs::read_to_string(dir.path().join("estimate-kernel/kernels/summary.csv")).unwrap();
    assert!(kernels.lines().count() >= 2);
    assert!(dir.path().join("reconstruct/samples/reconstruct.pgm").is_file());
    assert!(dir.path().join("evaluate/summary.csv").is_file());
}

#[test]
fn unreadable_checkpoints_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.dbve");
    fs::write(&junk, b"DBVE but not really").unwrap();
    for ck in [dir.path().join("absent.dbve"), junk] {
        let o = deblur(&["generate", "--ckpt", s(&ck), "--out", s(&dir.path().join("o"))]);
        assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    }
}

#[test]
fn ablation_runs_one_directory_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 1\nwarmup_epochs = 0\n");
    let summary_rows = |out: &Path| fs::read_to_string(out.join("summary.csv")).unwrap().lines().count() - 1;

    let single = dir.path().join("single");
    let o = deblur(&["ablate", "--config", s(&cfg), "--out", s(&single)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(summary_rows(&single), 1);

    let grid = dir.path().join("grid");
    let o = deblur(&[
        "ablate",
        "--config",
        s(&cfg),
        "--out",
        s(&grid),
        "--grid",
        "C=0.01,0.1;beta=0.5,1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(summary_rows(&grid), 4);
    let dirs = fs::read_dir(&grid)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(dirs, 4);
}

#[test]
fn malformed_grids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for g in ["C", "C=", "nonsense=1", "C=0.1;C=0.2"] {
        let o = deblur(&[
            "ablate",
            "--config",
            s(&cfg),
            "--out",
            s(&dir.path().join("o")),
            "--grid",
            g,
        ]);
        assert_eq!(o.status.code(), Some(2), "grid {g:?}");
    }
}
