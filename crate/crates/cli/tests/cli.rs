use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deepsearch"));
    for (k, _) in std::env::vars() {
        if k.starts_with("DEEPSEARCH_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.lines().last().unwrap_or_default())
        .unwrap_or_else(|e| panic!("bad summary {text:?}: {e}"))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn words(n: usize, tag: &str) -> String {
    (0..n)
        .map(|i| format!("{tag}{i}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_lines(path: &Path, rows: &[Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, text).unwrap();
}

fn read_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn dir_files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).unwrap();
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn ingest_counts_passages_and_refuses_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus.jsonl");
    let sizes = [600usize, 100, 1100];
    let rows: Vec<Value> = sizes
        .iter()
        .enumerate()
        .map(|(i, n)| serde_json::json!({"title": format!("doc {i}"), "body": words(*n, "w")}))
        .collect();
    write_lines(&corpus, &rows);
    let expected: usize = sizes.iter().map(|n| n.div_ceil(512)).sum();
    let index = tmp.path().join("index");

    let o = run(&[
        "--offline",
        "ingest",
        "--corpus",
        p(&corpus),
        "--index",
        p(&index),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = stdout_json(&o);
    assert_eq!(s["doc_count"], 3);
    assert_eq!(s["passage_count"], expected);
    assert_eq!(s["image_count"], 0);

    let again = run(&[
        "--offline",
        "ingest",
        "--corpus",
        p(&corpus),
        "--index",
        p(&index),
    ]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));

    write_lines(&corpus, &rows[..1]);
    let forced = run(&[
        "--offline",
        "ingest",
        "--corpus",
        p(&corpus),
        "--index",
        p(&index),
        "--force",
    ]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
    assert_eq!(stdout_json(&forced)["passage_count"], 2);
}

#[test]
fn ingest_of_an_empty_manifest_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("empty.jsonl");
    fs::write(&corpus, "").unwrap();
    let index = tmp.path().join("index");
    let o = run(&[
        "--offline",
        "ingest",
        "--corpus",
        p(&corpus),
        "--index",
        p(&index),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("corpus is empty"), "{}", stderr(&o));
    assert!(!index.exists());
}

#[test]
fn smoke_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = run(&[
            "--offline",
            "--seed",
            "11",
            "pipeline-smoke",
            "--out",
            p(dir),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("checks passed"));
    }
    let (fa, fb) = (dir_files(&a), dir_files(&b));
    assert!(fa.len() >= 12, "only {} files", fa.len());
    assert_eq!(fa, fb);
    let report: Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["seed"], 11);
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.iter().all(|c| c["passed"] == true));
}

#[test]
fn smoke_fault_is_an_invariant_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    let o = run(&[
        "--offline",
        "pipeline-smoke",
        "--out",
        p(&out),
        "--fault",
        "drop-edge-member",
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("edge cardinality"), "{}", stderr(&o));
    let report: Value =
        serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
}

#[test]
fn smoke_needs_offline() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["pipeline-smoke", "--out", p(&tmp.path().join("s"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "seed = 3\noffline = true\n").unwrap();
    let seed_of = |env: Option<&str>, flag: Option<&str>, name: &str| -> Value {
        let out = tmp.path().join(name);
        let mut c = bin();
        c.args(["--config", p(&cfg)]);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        if let Some(e) = env {
            c.env("DEEPSEARCH_SEED", e);
        }
        let o = c
            .args(["pipeline-smoke", "--out", p(&out)])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let r: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
        r["seed"].clone()
    };
    assert_eq!(seed_of(None, None, "file"), 3);
    assert_eq!(seed_of(Some("5"), None, "env"), 5);
    assert_eq!(seed_of(Some("5"), Some("9"), "flag"), 9);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "sede = 3\n").unwrap();
    let o = run(&[
        "--config",
        p(&cfg),
        "--offline",
        "pipeline-smoke",
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(code(&o), 2);
}

fn qa_row(i: usize, answer: Option<&str>) -> Value {
    let mut v = serde_json::json!({
        "id": format!("q{i}"),
        "question": format!("In which year did landmark {i} open?"),
        "query_image": "i0.0",
        "image_ref": format!("seeds/x{i}.jpg"),
        "evidence_ids": ["t1.0"],
        "level": "intra",
        "source_edges": ["e0"],
    });
    if let Some(a) = answer {
        v["answer"] = Value::from(a);
    }
    v
}

#[test]
fn export_rl_keeps_valid_pairs_and_reports_bad_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let qa = tmp.path().join("qa.jsonl");
    let mut rows: Vec<Value> = (0..5)
        .map(|i| qa_row(i, Some(&format!("19{i}0"))))
        .collect();
    write_lines(&qa, &rows);
    let out = tmp.path().join("rl.jsonl");
    let o = run(&["export-rl", "--qa", p(&qa), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout_json(&o)["records"], 5);
    let records = read_lines(&out);
    assert_eq!(records.len(), 5);
    for (r, q) in records.iter().zip(&rows) {
        assert_eq!(r["id"], q["id"]);
        assert_eq!(r["question"], q["question"]);
        assert_eq!(r["image_ref"], q["image_ref"]);
        assert_eq!(r["golden"], q["answer"]);
        assert_eq!(r["candidates"], serde_json::json!([q["answer"]]));
    }

    rows.insert(2, qa_row(9, None));
    write_lines(&qa, &rows);
    let o = run(&["export-rl", "--qa", p(&qa), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = stdout_json(&o);
    assert_eq!(s["records"], 5);
    assert_eq!(s["rejected"][0]["line"], 3);
    assert_eq!(s["rejected"][0]["reason"], "missing golden answer");
    assert!(stderr(&o).contains("line 3"));
    assert_eq!(read_lines(&out).len(), 5);
}

#[test]
fn staged_commands_chain_offline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = d.join("c.toml");
    fs::write(
        &cfg,
        "offline = true\nseed = 4\n[hypersearch]\nk = 2\nd = 2\n",
    )
    .unwrap();
    let seeds = d.join("seeds.jsonl");
    write_lines(
        &seeds,
        &[serde_json::json!({"image_path": "seeds/a.jpg", "category": "arts"})],
    );
    let c = p(&cfg);

    let graphs = d.join("graphs.jsonl");
    let o = run(&[
        "--config",
        c,
        "build-graph",
        "--seeds",
        p(&seeds),
        "--out",
        p(&graphs),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // K=2, D=2: seed, 2K children, then 2K children for each of them.
    let k = 2usize;
    let level1 = 2 * k;
    assert_eq!(stdout_json(&o)["nodes"], 1 + level1 + level1 * 2 * k);
    assert_eq!(stdout_json(&o)["edges"], 1 + level1);

    let qa = d.join("qa.jsonl");
    let o = run(&[
        "--config",
        c,
        "gen-qa",
        "--graphs",
        p(&graphs),
        "--out",
        p(&qa),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pairs = read_lines(&qa);
    assert_eq!(stdout_json(&o)["pairs"], pairs.len());
    assert!(!pairs.is_empty());

    let kept = d.join("kept.jsonl");
    let o = run(&[
        "--config",
        c,
        "filter-qa",
        "--qa",
        p(&qa),
        "--out",
        p(&kept),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = stdout_json(&o);
    let rejected = read_lines(&kept.with_extension("rejected.jsonl"));
    assert_eq!(s["kept"], read_lines(&kept).len());
    assert_eq!(
        s["rejected"].as_u64().unwrap() + s["quarantined"].as_u64().unwrap(),
        rejected.len() as u64
    );
    assert_eq!(read_lines(&kept).len() + rejected.len(), pairs.len());
}

#[test]
fn fixture_web_dedup_links_existing_nodes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let web = d.join("web.json");
    fs::write(
        &web,
        serde_json::json!({
            "pages": {
                "https://a.test/1": "First page\nlink: https://a.test/2",
                "https://a.test/2": "Second page\nlink: https://a.test/1"
            },
            "reverse": {"seed.jpg": ["https://a.test/1", "https://a.test/2"]},
            "visual": {"seed.jpg": ["v1.jpg", "v2.jpg"]}
        })
        .to_string(),
    )
    .unwrap();
    let seeds = d.join("seeds.jsonl");
    write_lines(
        &seeds,
        &[serde_json::json!({"image_path": "seed.jpg", "category": "arts"})],
    );
    let cfg = d.join("c.toml");
    fs::write(&cfg, "offline = true\n[hypersearch]\nk = 2\nd = 2\n").unwrap();
    let out = d.join("g.jsonl");
    let o = run(&[
        "--config",
        p(&cfg),
        "build-graph",
        "--seeds",
        p(&seeds),
        "--web",
        p(&web),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // Depth 2 finds only URLs already in the graph, so no node is added.
    assert_eq!(stdout_json(&o)["nodes"], 5);
    let g = &read_lines(&out)[0]["graph"];
    let nodes = g["nodes"].as_object().unwrap();
    let mut urls: Vec<&str> = nodes.values().filter_map(|x| x["url"].as_str()).collect();
    let n = urls.len();
    urls.sort();
    urls.dedup();
    assert_eq!(urls.len(), n);
    let edges = g["edges"].as_array().unwrap();
    let members = |id: &str| -> Vec<String> {
        let e = edges.iter().find(|e| e["parent_node"] == id).unwrap();
        e["members"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| m.as_str().unwrap().to_string())
            .collect()
    };
    assert_eq!(members("t1.0"), ["t1.0", "t1.1"]);
    assert_eq!(members("t1.1"), ["t1.1", "t1.0"]);
    assert!(!g["provenance"]["dedup_links"]
        .as_array()
        .unwrap()
        .is_empty());
}

#[test]
fn score_rollouts_rewards_and_advantages() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = d.join("c.toml");
    fs::write(&cfg, "offline = true\n[reward]\nalpha = 0.8\n").unwrap();
    let lp = |n: usize| serde_json::json!({"theta": vec![-1.0; n], "old": vec![-1.0; n], "ref": vec![-1.0; n]});
    let rollouts = d.join("r.jsonl");
    write_lines(
        &rollouts,
        &[
            serde_json::json!({"question_id": "q", "raw_text": "<think>t</think>\n<answer>1900</answer>",
                "golden": "1900", "token_logprobs": lp(4)}),
            serde_json::json!({"question_id": "q", "raw_text": "<answer>1800</answer>",
                "golden": "1900", "token_logprobs": lp(2)}),
        ],
    );
    let out = d.join("s.jsonl");
    let o = run(&[
        "--config",
        p(&cfg),
        "score-rollouts",
        "--rollouts",
        p(&rollouts),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let g = &read_lines(&out)[0];
    assert_eq!(g["r_format"], serde_json::json!([1, 0]));
    assert_eq!(g["r_acc"], serde_json::json!([1, 0]));
    let alpha = 0.8;
    let r: Vec<f64> = g["rewards"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert!((r[0] - (alpha * 1.0 + (1.0 - alpha) * 1.0)).abs() < 1e-12);
    assert!(r[1].abs() < 1e-12);
    let a: Vec<f64> = g["advantages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert!(a[0] > 0.0 && a[1] < 0.0);
    assert!((a[0] + a[1]).abs() < 1e-9);
}

#[test]
fn serve_tools_answers_health_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c.jsonl");
    write_lines(
        &corpus,
        &[serde_json::json!({"title": "t", "body": "the mill opened in 1931"})],
    );
    let index = tmp.path().join("index");
    let o = run(&[
        "--offline",
        "ingest",
        "--corpus",
        p(&corpus),
        "--index",
        p(&index),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = bin()
        .args([
            "--offline",
            "serve-tools",
            "--index",
            p(&index),
            "--addr",
            &addr,
        ])
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let mut ok = false;
    for _ in 0..100 {
        if let Ok(mut s) = std::net::TcpStream::connect(&addr) {
            use std::io::{Read, Write};
            write!(
                s,
                "GET /healthz HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n"
            )
            .unwrap();
            let mut resp = String::new();
            let _ = s.read_to_string(&mut resp);
            ok = resp.starts_with("HTTP/1.1 200");
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    child.kill().ok();
    child.wait().ok();
    assert!(ok, "server never answered on {addr}");
}
