//! Acceptance criterion A10: any two runs of any subcommand with identical
//! config + seed + corpus produce identical logs, checkpoints (hash-equal)
//! and outputs.
//!
//! Wall-clock timing columns are measurements, not outputs; the per-frame
//! CSV comparison masks its `ms` column and nothing else.

use std::path::{Path, PathBuf};
use std::process::Command;

fn repo_fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lucid_a10_{tag}_{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Micro configuration: tiny architectures, one epoch each, fast enough to
/// run every subcommand twice.
const MICRO_CONFIG: &str = r#"
seed = 11

[data]
patch = 32
pairs = 6
scale = 2

[train]
epochs_pretrain = 1
epochs_single = 1
epochs_video = 1
batch_size = 2
steps_per_epoch = 2
clips_per_epoch = 1
clip_len = 4
delta_t = 2
pretrain_crop = 16
queue_size = 16
reverse_kind = "noise"
disc_widths = [8, 16]

[train.encoder_cfg]
base_width = 4
blocks_per_stage = 1
proj_dim = 8

[train.enhancer_cfg]
embed_dim = 8
heads = 2
window = 4
blocks = 1
scale = 2
repr_channels = 16
compress_mid = 8
shallow_mid = 4
recon_expand = 16
mlp_ratio = 1
bicubic_skip = true

[train.propagation_cfg]
d_c_dim = 8
model_dim = 8
layers = 1
heads = 2
ff_ratio = 1
context = 4

[scheduler]
delta_t = 2
warm_start = true
"#;

fn run_lucid(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_lucid"))
        .args(args)
        .output()
        .expect("spawn lucid");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Recursively collect relative paths and content digests, masking the
/// timing column of per-frame CSVs.
fn digest_tree(root: &Path) -> Vec<(String, String)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let bytes = std::fs::read(&path).unwrap();
            let content = if path.file_name().is_some_and(|n| n == "frames.csv") {
                // mask the ms column: index,source,ms,flops
                let text = String::from_utf8_lossy(&bytes);
                let masked: Vec<String> = text
                    .lines()
                    .map(|l| {
                        let parts: Vec<&str> = l.split(',').collect();
                        if parts.len() == 4 && parts[0] != "index" {
                            format!("{},{},MS,{}", parts[0], parts[1], parts[3])
                        } else {
                            l.to_string()
                        }
                    })
                    .collect();
                masked.join("\n").into_bytes()
            } else {
                bytes
            };
            let digest = {
                use std::collections::hash_map::DefaultHasher;
                use std::hash::{Hash, Hasher};
                let mut h = DefaultHasher::new();
                content.hash(&mut h);
                format!("{:016x}", h.finish())
            };
            out.push((rel, digest));
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

fn assert_identical_trees(a: &Path, b: &Path, what: &str) {
    let ta = digest_tree(a);
    let tb = digest_tree(b);
    assert_eq!(
        ta.len(),
        tb.len(),
        "{what}: file counts differ ({} vs {})",
        ta.len(),
        tb.len()
    );
    for ((ra, da), (rb, db)) in ta.iter().zip(tb.iter()) {
        assert_eq!(ra, rb, "{what}: tree layout differs");
        assert_eq!(da, db, "{what}: {ra} differs between runs");
    }
}

#[test]
fn a10_subcommands_are_deterministic() {
    let base = scratch("root");
    let cfg_path = base.join("micro.toml");
    std::fs::write(&cfg_path, MICRO_CONFIG).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let corpus = repo_fixtures();
    let corpus = corpus.to_str().unwrap();

    // --- degrade -----------------------------------------------------------
    let (d1, d2) = (base.join("deg1"), base.join("deg2"));
    for out in [&d1, &d2] {
        let (code, _, err) = run_lucid(&[
            "degrade", "--config", cfg, "--out-dir", out.to_str().unwrap(),
            "--corpus", corpus, "--count", "4", "--clips", "1", "--clip-len", "4",
        ]);
        assert_eq!(code, 0, "degrade failed: {err}");
    }
    assert_identical_trees(&d1, &d2, "degrade");

    // --- pretrain-dam ------------------------------------------------------
    let (p1, p2) = (base.join("pre1"), base.join("pre2"));
    for out in [&p1, &p2] {
        let (code, _, err) = run_lucid(&[
            "pretrain-dam", "--config", cfg, "--out-dir", out.to_str().unwrap(),
            "--corpus", corpus,
        ]);
        assert_eq!(code, 0, "pretrain-dam failed: {err}");
    }
    assert_identical_trees(&p1, &p2, "pretrain-dam");

    // --- train (stage 2), initialized from the pretrain run -----------------
    let (t1, t2) = (base.join("tr1"), base.join("tr2"));
    for (out, init) in [(&t1, &p1), (&t2, &p2)] {
        let (code, _, err) = run_lucid(&[
            "train", "--config", cfg, "--out-dir", out.to_str().unwrap(),
            "--corpus", corpus, "--init-from", init.join("final").to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "train failed: {err}");
    }
    assert_identical_trees(&t1, &t2, "train");

    // --- train-drpm (stage 3) on the degraded clips --------------------------
    let (v1, v2) = (base.join("drpm1"), base.join("drpm2"));
    for (out, (init, deg)) in [(&v1, (&t1, &d1)), (&v2, (&t2, &d2))] {
        let (code, _, err) = run_lucid(&[
            "train-drpm", "--config", cfg, "--out-dir", out.to_str().unwrap(),
            "--corpus", corpus,
            "--lq-clips", deg.join("clips_lq").to_str().unwrap(),
            "--init-from", init.join("final").to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "train-drpm failed: {err}");
    }
    assert_identical_trees(&v1, &v2, "train-drpm");

    // --- enhance + enhance-video + eval + viz-repr ---------------------------
    let lq_image = d1.join("pairs/train/pair_000000_lq.png");
    let (e1, e2) = (base.join("enh1"), base.join("enh2"));
    for (out, weights) in [(&e1, &v1), (&e2, &v2)] {
        std::fs::create_dir_all(out).unwrap();
        let (code, _, err) = run_lucid(&[
            "enhance", "--config", cfg, "--out-dir", out.to_str().unwrap(),
            "--input", lq_image.to_str().unwrap(),
            "--output", out.join("enhanced.png").to_str().unwrap(),
            "--weights", weights.join("final").to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "enhance failed: {err}");
    }
    assert_identical_trees(&e1, &e2, "enhance");

    let clip_dir = d1.join("clips_lq/clip_000");
    let (ev1, ev2) = (base.join("ev1"), base.join("ev2"));
    for (out, weights) in [(&ev1, &v1), (&ev2, &v2)] {
        let (code, _, err) = run_lucid(&[
            "enhance-video", "--config", cfg, "--out-dir", out.to_str().unwrap(),
            "--input", clip_dir.to_str().unwrap(),
            "--output", out.join("frames").to_str().unwrap(),
            "--weights", weights.join("final").to_str().unwrap(),
            "--delta-t", "2",
        ]);
        assert_eq!(code, 0, "enhance-video failed: {err}");
    }
    assert_identical_trees(&ev1, &ev2, "enhance-video");

    let (m1, m2) = (base.join("ev1_metrics"), base.join("ev2_metrics"));
    for (out, frames) in [(&m1, &ev1), (&m2, &ev2)] {
        let (code, _, err) = run_lucid(&[
            "eval", "--config", cfg, "--out-dir", out.to_str().unwrap(),
            "--enhanced", frames.join("frames").to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "eval failed: {err}");
    }
    assert_identical_trees(&m1, &m2, "eval");

    let (r1, r2) = (base.join("viz1"), base.join("viz2"));
    for (out, weights) in [(&r1, &v1), (&r2, &v2)] {
        let (code, _, err) = run_lucid(&[
            "viz-repr", "--config", cfg, "--out-dir", out.to_str().unwrap(),
            "--corpus", corpus,
            "--weights", weights.join("final").to_str().unwrap(),
            "--per-cell", "2", "--patch", "32",
        ]);
        assert_eq!(code, 0, "viz-repr failed: {err}");
    }
    assert_identical_trees(&r1, &r2, "viz-repr");

    // --- budget: stdout must be identical ------------------------------------
    let (
        (c1, out1, _),
        (c2, out2, _),
    ) = (
        run_lucid(&["budget", "--config", cfg, "--out-dir", base.join("b1").to_str().unwrap()]),
        run_lucid(&["budget", "--config", cfg, "--out-dir", base.join("b2").to_str().unwrap()]),
    );
    assert_eq!(c1, 0);
    assert_eq!(c2, 0);
    assert_eq!(out1, out2, "budget output differs between runs");

    println!("[A10] PASS - degrade/pretrain-dam/train/train-drpm/enhance/enhance-video/eval/viz-repr/budget all reproduce byte-identically (timing column masked)");
    std::fs::remove_dir_all(&base).ok();
}

#[test]
fn cli_usage_errors_exit_2() {
    let (code, _, _) = run_lucid(&[] as &[&str]);
    assert_eq!(code, 2, "no arguments must exit 2");
    let (code, _, _) = run_lucid(&["no-such-subcommand"]);
    assert_eq!(code, 2, "unknown subcommand must exit 2");
    let (code, _, _) = run_lucid(&["--help"]);
    assert_eq!(code, 0, "--help exits 0");
}
