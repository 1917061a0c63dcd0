use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 3
count = 6
sessions = 3

[encoder]
point_widths = [16, 32]
head_widths = [32]
d = 16

[relnet]
model_width = 16
ff_width = 32
head_hidden = 16

[train]
stage1_epochs = 2
stage2_epochs = 2
stats_subset = 50

[eval]
queries = 4
"#;

const CHAIN: &[&str] = &["gen-data", "prepare", "train-encoder", "train-relnet", "build-index", "session-replay", "eval"];

fn partfit(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partfit"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let out = partfit(workdir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// The last stderr line, parsed as the error record.
fn failure(out: &Output) -> Value {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(err.lines().last().unwrap()).unwrap_or_else(|e| panic!("{e}: {err}"))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn chain(workdir: &Path, config: &Path) {
    let cfg = config.to_str().unwrap();
    for cmd in CHAIN {
        ok(workdir, &["--config", cfg, cmd]);
    }
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap()
}

#[test]
fn full_chain_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().join("run");
    chain(&wd, &tiny_config(tmp.path()));
    for rel in ["raw.json", "dataset", "model.ckpt", "index.bin", "eval/table.tsv", "eval/table.txt", "metrics.json", "replay.json"] {
        assert!(wd.join(rel).exists(), "{rel} missing");
    }
    for cmd in CHAIN {
        let m = read_json(wd.join(format!("manifests/{cmd}.json")));
        assert_eq!(m["command"], *cmd);
        assert_eq!(m["seeds"]["data"], 3);
    }
    let index = read_json(wd.join("manifests/build-index.json"));
    assert!(index["inputs"]["model.ckpt"].is_string());
    let metrics = read_json(wd.join("metrics.json"));
    assert_eq!(metrics["label_hit_rate"]["trials"], 4);
    assert_eq!(metrics["sessions"]["outcomes"].as_array().unwrap().len(), 3);

    // Retrieval on a held-out object, by name, then from a query file in an
    // arbitrary frame.
    let replay = read_json(wd.join("replay.json"));
    let object = replay["outcomes"][0]["object_id"].as_str().unwrap().to_string();
    let ranking: Value = serde_json::from_str(&ok(&wd, &["retrieve", "--object", &object, "--remove", "0", "-k", "5"])).unwrap();
    let cands = ranking["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 5);
    for (i, c) in cands.iter().enumerate() {
        assert_eq!(c["rank"], i);
    }
    let lp: Vec<f64> = cands.iter().map(|c| c["log_prob"].as_f64().unwrap()).collect();
    assert!(lp.windows(2).all(|w| w[0] >= w[1]));

    let cube = |c: [f32; 3]| -> Vec<[f32; 3]> {
        (0..400)
            .map(|i| {
                let (a, b, z) = ((i % 7) as f32 / 7.0, ((i / 7) % 7) as f32 / 7.0, (i / 49) as f32 / 9.0);
                [c[0] + a, c[1] + b, c[2] + z * 0.3]
            })
            .collect()
    };
    let query = serde_json::json!({
        "class": "table",
        "parts": [{ "points": cube([10.0, 0.0, 0.0]) }, { "points": cube([12.0, 0.0, 0.0]), "label": "leg" }],
        "slots": [{ "centroid": [11.0, 0.5, -1.0] }],
    });
    let qpath = tmp.path().join("query.json");
    std::fs::write(&qpath, query.to_string()).unwrap();
    let out_path = tmp.path().join("ranking.json");
    ok(&wd, &["retrieve", "--query", qpath.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    let r = read_json(out_path);
    assert_eq!(r["class"], "table");
    assert_eq!(r["candidates"].as_array().unwrap().len(), 10);

    // The server answers on the chosen address and stops when killed.
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let mut server = Command::new(env!("CARGO_BIN_EXE_partfit"))
        .arg("--workdir")
        .arg(&wd)
        .arg("serve")
        .env("PARTFIT_LISTEN", addr.to_string())
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    let part = cands[0]["part_id"].as_u64().unwrap();
    let body = http_get(addr, &format!("/v1/warehouse/parts/{part}"));
    server.kill().unwrap();
    server.wait().unwrap();
    let view: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(view["part_id"], part);
    assert_eq!(view["label"], cands[0]["label"]);
}

/// Retries until the server is up.
fn http_get(addr: std::net::SocketAddr, path: &str) -> String {
    use std::io::{Read, Write};
    for _ in 0..200 {
        if let Ok(mut s) = std::net::TcpStream::connect(addr) {
            write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
            let mut resp = String::new();
            s.read_to_string(&mut resp).unwrap();
            let (head, body) = resp.split_once("\r\n\r\n").unwrap();
            assert!(head.starts_with("HTTP/1.1 200"), "{head}");
            return body.to_string();
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    panic!("server never came up on {addr}");
}

#[test]
fn two_workdirs_produce_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    chain(&a, &cfg);
    let cfg_s = cfg.to_str().unwrap();
    for cmd in CHAIN {
        ok(&b, &["--config", cfg_s, "--threads", "2", cmd]);
    }
    // The eval tables carry wall-clock timings, so they are compared through
    // the timing-free digest instead.
    for rel in ["raw.json", "model.ckpt", "index.bin", "metrics.json", "replay.json"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel} differs");
    }
    for cmd in CHAIN {
        let (ma, mb) = (read_json(a.join(format!("manifests/{cmd}.json"))), read_json(b.join(format!("manifests/{cmd}.json"))));
        let strip = |m: &Value| {
            let mut o = m["outputs"].clone();
            let o2 = o.as_object_mut().unwrap();
            o2.remove("eval/table.tsv");
            o2.remove("eval/table.txt");
            o
        };
        assert_eq!(strip(&ma), strip(&mb), "{cmd}");
        assert_eq!(ma["inputs"], mb["inputs"], "{cmd}");
    }
}

#[test]
fn stale_or_edited_artifacts_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().join("run");
    let cfg = tiny_config(tmp.path());
    let cfg_s = cfg.to_str().unwrap();
    for cmd in ["gen-data", "prepare", "train-encoder", "train-relnet", "build-index"] {
        ok(&wd, &["--config", cfg_s, cmd]);
    }
    let object = read_json(wd.join("dataset/manifest.json"))["holdout"][0].as_str().unwrap().to_string();

    // A retrained encoder no longer matches the index.
    ok(&wd, &["--config", cfg_s, "--seed", "99", "train-encoder"]);
    ok(&wd, &["--config", cfg_s, "--seed", "99", "train-relnet"]);
    let out = partfit(&wd, &["retrieve", "--object", &object, "--remove", "0"]);
    let e = failure(&out);
    assert_eq!(e["error"], "hash-mismatch");
    let msg = e["message"].as_str().unwrap();
    let model = TinyModel::hashes(&wd);
    assert!(msg.contains(&model.index_encoder) && msg.contains(&model.model_encoder), "{msg}");

    // Rebuilding the index fixes it; editing the index afterwards does not.
    ok(&wd, &["build-index"]);
    ok(&wd, &["retrieve", "--object", &object, "--remove", "0"]);
    let idx = wd.join("index.bin");
    let mut bytes = std::fs::read(&idx).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&idx, bytes).unwrap();
    let e = failure(&partfit(&wd, &["retrieve", "--object", &object, "--remove", "0"]));
    assert_eq!(e["error"], "hash-mismatch");
    assert!(e["message"].as_str().unwrap().contains("index.bin changed since build-index wrote it"));
}

/// Encoder digests as each artifact records them.
struct TinyModel {
    index_encoder: String,
    model_encoder: String,
}

impl TinyModel {
    fn hashes(wd: &Path) -> Self {
        let index = partfit_core::retrieval::WarehouseIndex::load(&wd.join("index.bin")).unwrap();
        let model = partfit_core::model::TrainedModel::load(&wd.join("model.ckpt")).unwrap();
        TinyModel {
            index_encoder: index.encoder_hash().to_string(),
            model_encoder: model.encoder_hash(),
        }
    }
}

#[test]
fn stochastic_commands_need_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().join("run");
    let e = failure(&partfit(&wd, &["gen-data"]));
    assert_eq!(e["error"], "usage");
    assert!(e["message"].as_str().unwrap().contains("--seed"));

    let no_seed = tmp.path().join("noseed.json");
    std::fs::write(&no_seed, r#"{"count": 2}"#).unwrap();
    let out = partfit(&wd, &["--config", no_seed.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(failure(&out)["error"], "usage");

    ok(&wd, &["--config", no_seed.to_str().unwrap(), "--seed", "4", "gen-data"]);
    // The workdir now remembers the seed.
    ok(&wd, &["prepare"]);
}

#[test]
fn bad_inputs_are_categorized() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().join("run");
    let typo = tmp.path().join("typo.toml");
    std::fs::write(&typo, "seed = 1\ncuont = 3\n").unwrap();
    assert_eq!(failure(&partfit(&wd, &["--config", typo.to_str().unwrap(), "gen-data"]))["error"], "config");

    let e = failure(&partfit(&wd, &["--seed", "1", "prepare"]));
    assert_eq!(e["error"], "usage");
    assert!(e["message"].as_str().unwrap().contains("raw.json"));
}

#[test]
fn selftest_runs_small_suites() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().join("run");
    let out = ok(
        &wd,
        &["selftest", "--gradient-trials", "3", "--invariance-cases", "2", "--dbscan-instances", "5"],
    );
    assert!(out.lines().count() >= 4, "{out}");
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    let m = read_json(wd.join("manifests/selftest.json"));
    assert!(m["outputs"]["report"].is_string());
}
