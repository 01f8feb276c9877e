use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--n_way", "3", "--frames", "8", "--feat_dim", "4", "--motif_len", "2", "--n_state", "4", "--episodes", "3",
];

fn manta(args: &[&str], extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manta"))
        .args(args)
        .args(extra)
        .output()
        .expect("spawn manta")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn train_into(dir: &Path) {
    let o = manta(&["train", "--out", dir.to_str().unwrap()], TINY);
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn train_writes_outputs_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    train_into(dir.path());
    let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss_total"].as_f64().unwrap().is_finite());
    }
    let dtw = fs::read_to_string(dir.path().join("dtw.csv")).unwrap();
    assert!(dtw.starts_with("episode,scale,dtw"));

    let ck = dir.path().join("checkpoint.manta");
    let o = manta(
        &["eval", "--checkpoint", ck.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--episodes", "6"],
        &[],
    );
    assert!(o.status.success(), "{}", text(&o));
    let confusion = fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    let rows: Vec<_> = confusion.lines().collect();
    assert_eq!(rows[0], "truth,pred_0,pred_1,pred_2");
    let total: usize = rows[1..]
        .iter()
        .flat_map(|r| r.split(',').skip(1).map(|c| c.parse::<usize>().unwrap()))
        .sum();
    assert_eq!(total, 6 * 3);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let strip = |dir: &Path| -> Vec<serde_json::Value> {
        fs::read_to_string(dir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_into(a.path());
    train_into(b.path());
    assert_eq!(strip(a.path()), strip(b.path()));
    assert_eq!(
        fs::read(a.path().join("checkpoint.manta")).unwrap(),
        fs::read(b.path().join("checkpoint.manta")).unwrap()
    );
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny\nn_way = 3\nframes = 8\nfeat_dim = 4\nmotif_len = 2\nn_state = 4\nepisodes = 5\n").unwrap();
    let o = manta(
        &["train", "--config", cfg.to_str().unwrap(), "--episodes", "2", "--out", dir.path().to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", text(&o));
    let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "n_way = 3\nwidth = 8\n").unwrap();
    let o = manta(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let msg = text(&o);
    assert!(msg.contains("line 2") && msg.contains("width"), "{msg}");

    let o = manta(&["train", "--width", "8"], &[]);
    assert!(!o.status.success());
}

#[test]
fn invalid_value_is_an_error() {
    let o = manta(&["train", "--n_way", "1", "--episodes", "0", "--out", "/nonexistent/never"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_rule() {
    let small = ["--n_state", "2", "--scales", "1,2"];
    let o = manta(&["gradcheck"], &small);
    assert!(o.status.success(), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("outer.b_proj"));

    let o = manta(&["gradcheck", "--corrupt-backward", "silu"], &small);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));

    let o = manta(&["gradcheck", "--corrupt-backward", "nonsense"], &small);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fixtures_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = manta(&["gen-fixtures", "--count", "2", "--out", d.path().to_str().unwrap()], TINY);
        assert!(o.status.success(), "{}", text(&o));
    }
    for name in ["episode_0000.mepb", "episode_0001.mepb"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert_eq!(&x[..4], b"MEPB");
        assert_eq!(x, fs::read(b.path().join(name)).unwrap());
    }
}
