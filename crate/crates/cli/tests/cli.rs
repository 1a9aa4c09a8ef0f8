use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

const SUBCOMMANDS: [&str; 8] = [
    "explain",
    "eval-seg",
    "eval-points",
    "eval-perturb",
    "serve",
    "make-tiny",
    "fd-battery",
    "parity",
];

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture(rel: &str) -> String {
    fixtures().join(rel).to_string_lossy().into_owned()
}

fn legrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_legrad"))
        .args(args)
        .env_remove("LEGRAD_MODEL_DIR")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn help_text() -> String {
    let mut text = String::new();
    for sub in std::iter::once("").chain(SUBCOMMANDS) {
        let args: Vec<&str> = if sub.is_empty() {
            vec!["--help"]
        } else {
            vec![sub, "--help"]
        };
        let out = legrad(&args);
        assert_eq!(code(&out), 0, "legrad {sub} --help");
        text.push_str(&format!("$ legrad {sub} --help\n"));
        text.push_str(&String::from_utf8(out.stdout).unwrap());
        text.push('\n');
    }
    text
}

#[test]
fn help_matches_snapshot() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots/help.txt");
    let text = help_text();
    if std::env::var_os("LEGRAD_UPDATE_SNAPSHOTS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
    }
    let want = std::fs::read_to_string(&path)
        .expect("snapshot missing; rerun with LEGRAD_UPDATE_SNAPSHOTS=1");
    assert!(
        text == want,
        "help output changed; rerun with LEGRAD_UPDATE_SNAPSHOTS=1 and review the diff"
    );
}

#[test]
fn every_flag_has_a_description() {
    let text = help_text();
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        let t = line.trim_start();
        if !t.starts_with("--") && !t.starts_with("-h,") && !t.starts_with("-V,") {
            continue;
        }
        // Description either follows on the same line after two spaces or on
        // the next, further indented line.
        let same_line = t.split_once("  ").map(|(_, d)| d.trim()).unwrap_or("");
        let next = lines.get(i + 1).map(|l| l.trim()).unwrap_or("");
        let desc = if same_line.is_empty() {
            next
        } else {
            same_line
        };
        let desc = desc.split(" [").next().unwrap();
        assert!(
            !desc.is_empty() && !desc.starts_with("--") && !desc.starts_with('['),
            "undocumented flag: {line}"
        );
    }
}

fn explain_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "explain",
        "--model",
        &fixture_static("tiny_cls.lgtc"),
        "--image",
        &fixture_static("images/disc.png"),
        "--out-dir",
        dir.to_str().unwrap(),
    ]
    .into_iter()
    .map(str::to_string)
    .collect::<Vec<_>>();
    if !extra
        .iter()
        .any(|a| *a == "--class-index" || *a == "--query" || *a == "--embedding")
    {
        args.extend(["--query".into(), "cat".into()]);
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    legrad(&refs)
}

fn fixture_static(rel: &str) -> String {
    fixture(rel)
}

#[test]
fn explain_writes_three_files_matching_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = explain_into(dir.path(), &["--name", "cls_disc_cat"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let listed: Vec<&str> = std::str::from_utf8(&out.stdout).unwrap().lines().collect();
    assert_eq!(listed.len(), 3);
    let files = read_dir_sorted(dir.path());
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "cls_disc_cat.json",
            "cls_disc_cat_heatmap.png",
            "cls_disc_cat_overlay.png"
        ]
    );
    for (name, bytes) in &files {
        let golden = std::fs::read(fixtures().join("golden").join(name)).unwrap();
        assert!(*bytes == golden, "{name} differs from the golden file");
    }
    let heat = image::load_from_memory(&files[1].1).unwrap();
    assert_eq!((heat.width(), heat.height()), (16, 16));
}

#[test]
fn explain_default_stem_and_model_dir_lookup() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_legrad"))
        .args([
            "explain",
            "--model",
            "tiny_pool",
            "--image",
            &fixture("images/square.png"),
            "--query",
            "dog",
        ])
        .arg("--out-dir")
        .arg(dir.path())
        .env("LEGRAD_MODEL_DIR", fixtures())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["square.json", "square_heatmap.png", "square_overlay.png"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
}

#[test]
fn explain_twice_is_byte_identical_for_every_method() {
    for method in [
        "legrad",
        "raw_attention",
        "rollout",
        "gradcam",
        "attentioncam",
    ] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for d in [&a, &b] {
            let out = explain_into(d.path(), &["--method", method, "--suppress-background"]);
            assert_eq!(code(&out), 0, "{method}: {}", stderr(&out));
        }
        assert!(
            read_dir_sorted(a.path()) == read_dir_sorted(b.path()),
            "{method}"
        );
    }
}

#[test]
fn single_layer_spec_uses_that_layer_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = explain_into(dir.path(), &["--layers", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let json: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("disc.json")).unwrap()).unwrap();
    assert_eq!(json["layer_range"], serde_json::json!([3]));
    assert_eq!(json["per_layer"].as_array().unwrap().len(), 1);
    assert_eq!(json["per_layer"][0]["layer"], 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let out = explain_into(dir.path(), &["--query", "kat"]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("did you mean: cat"),
        "{}",
        stderr(&out)
    );

    let out = explain_into(dir.path(), &["--query", "zzzzzzzz"]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("known labels: cat, dog, car, tree, sky"),
        "{}",
        stderr(&out)
    );

    for extra in [
        &["--layers", "4"][..],
        &["--layers", "nope"],
        &["--class-index", "9"],
        &["--embedding", "missing"],
        &["--method", "lime"],
        &["--threshold", "2"],
        &["--classifier", "nope"],
    ] {
        let out = explain_into(dir.path(), extra);
        assert_eq!(code(&out), 2, "{extra:?}: {}", stderr(&out));
    }
    let out = legrad(&[
        "explain",
        "--model",
        &fixture("tiny_cls.lgtc"),
        "--image",
        &fixture("images/disc.png"),
    ]);
    assert_eq!(code(&out), 2, "missing query");
    let out = legrad(&[
        "explain",
        "--model",
        &fixture("tiny_cls.lgtc"),
        "--image",
        "/nonexistent.png",
        "--query",
        "cat",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let out = legrad(&[
        "explain",
        "--model",
        "/nonexistent.lgtc",
        "--image",
        &fixture("images/disc.png"),
        "--query",
        "cat",
    ]);
    assert_eq!(code(&out), 3);
    let bad = dir.path().join("bad.lgtc");
    std::fs::write(&bad, b"LGTC\x01\x00\x00\x00garbage").unwrap();
    let out = legrad(&[
        "explain",
        "--model",
        bad.to_str().unwrap(),
        "--image",
        &fixture("images/disc.png"),
        "--query",
        "cat",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let out = legrad(&["frobnicate"]);
    assert_eq!(code(&out), 2);
}

fn eval(
    sub: &str,
    manifest: &str,
    extra: &[&str],
    workers: &str,
) -> (Output, Vec<(String, Vec<u8>)>) {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        sub.to_string(),
        "--model".into(),
        fixture("tiny_cls.lgtc"),
        "--manifest".into(),
        fixture(manifest),
        "--out-dir".into(),
        dir.path().to_string_lossy().into_owned(),
        "--workers".into(),
        workers.into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = legrad(&refs);
    let files = if code(&out) == 0 {
        read_dir_sorted(dir.path())
    } else {
        Vec::new()
    };
    (out, files)
}

fn report(files: &[(String, Vec<u8>)]) -> Value {
    let (_, bytes) = files.iter().find(|(n, _)| n == "report.json").unwrap();
    serde_json::from_slice(bytes).unwrap()
}

#[test]
fn eval_seg_reports_table_shaped_csv() {
    let (out, files) = eval(
        "eval-seg",
        "manifest_seg.jsonl",
        &["--threshold", "0.5"],
        "1",
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["report.csv", "report.json"]);
    let csv = String::from_utf8(files[0].1.clone()).unwrap();
    assert!(
        csv.starts_with("method,images,skipped,pixel_acc,miou,map\nlegrad,3,0,"),
        "{csv}"
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout), csv);
    let r = report(&files);
    assert_eq!(r["params"]["protocol"]["protocol"], "segmentation");
    assert_eq!(r["samples"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_points_reports_p_miou() {
    let (out, files) = eval(
        "eval-points",
        "manifest_points.jsonl",
        &["--limit", "2"],
        "1",
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = report(&files);
    assert!(r["aggregate"]["p_miou"].is_f64());
    assert_eq!(r["aggregate"]["images"], 2);
}

#[test]
fn eval_perturb_reports_curve_and_auc() {
    let (out, files) = eval(
        "eval-perturb",
        "manifest_perturb.jsonl",
        &[
            "--mode",
            "negative",
            "--class-source",
            "target",
            "--limit",
            "100",
        ],
        "1",
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = report(&files);
    assert_eq!(r["aggregate"]["mean_curve"].as_array().unwrap().len(), 10);
    assert!(r["aggregate"]["auc"].is_f64());
    assert_eq!(r["params"]["protocol"]["mode"], "negative");
    assert_eq!(r["params"]["protocol"]["class_source"], "target");
    let csv = String::from_utf8(files[0].1.clone()).unwrap();
    assert!(csv.starts_with("method,mode,class_source,images,skipped,auc,acc_0,"));
}

#[test]
fn eval_runs_are_byte_identical_and_worker_independent() {
    for (sub, manifest, extra) in [
        ("eval-seg", "manifest_seg.jsonl", &[][..]),
        ("eval-points", "manifest_points.jsonl", &[]),
        (
            "eval-perturb",
            "manifest_perturb.jsonl",
            &["--class-source", "target"],
        ),
    ] {
        let (o1, a) = eval(sub, manifest, extra, "1");
        let (o2, b) = eval(sub, manifest, extra, "1");
        let (o3, c) = eval(sub, manifest, extra, "3");
        for o in [&o1, &o2, &o3] {
            assert_eq!(code(o), 0, "{sub}: {}", stderr(o));
        }
        assert!(a == b, "{sub}: two single-threaded runs differ");
        assert!(a == c, "{sub}: worker count changed the report");
        assert!(o1.stdout == o2.stdout);
    }
}

#[test]
fn eval_missing_manifest_is_a_usage_error() {
    let (out, _) = eval("eval-seg", "no_such_manifest.jsonl", &[], "1");
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn make_tiny_is_reproducible_and_matches_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a.lgtc", "b.lgtc"] {
        let path = dir.path().join(name);
        let out = legrad(&[
            "make-tiny",
            "--out",
            path.to_str().unwrap(),
            "--seed",
            "7",
            "--layers",
            "3",
            "--heads",
            "2",
            "--width",
            "16",
            "--patches",
            "16",
            "--pooling",
            "cls",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        outputs.push((out.stdout.len(), std::fs::read(path).unwrap()));
    }
    assert!(outputs[0].1 == outputs[1].1);
    assert!(outputs[0].1 == std::fs::read(fixtures().join("tiny_cls.lgtc")).unwrap());

    let out = legrad(&[
        "make-tiny",
        "--out",
        dir.path().join("c.lgtc").to_str().unwrap(),
        "--patches",
        "15",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn fd_battery_passes_and_is_reproducible() {
    let a = legrad(&["fd-battery", "--json"]);
    let b = legrad(&["fd-battery", "--json"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert!(a.stdout == b.stdout);
    let report: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(
        report["rows"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["seed"].as_u64().unwrap())
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        20
    );
    let strict = legrad(&["fd-battery", "--tolerance", "1e-12"]);
    assert_eq!(code(&strict), 4);
}

#[test]
fn parity_command() {
    for (name, precision) in [
        ("parity_cls_f64.lgtc", "f64"),
        ("parity_pool_f64.lgtc", "f64"),
        ("parity_cls_f32.lgtc", "f32"),
        ("parity_pool_f32.lgtc", "f32"),
    ] {
        let a = legrad(&["parity", &fixture(name), "--precision", precision]);
        let b = legrad(&["parity", &fixture(name), "--precision", precision]);
        assert_eq!(code(&a), 0, "{name}: {}", stderr(&a));
        assert!(a.stdout == b.stdout);
    }
    let out = legrad(&["parity", &fixture("tiny_cls.lgtc")]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(
        s,
        "GET {path} HTTP/1.1\r\nHost: 127.0.0.1\r\nConnection: close\r\n\r\n"
    )
    .ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    Some(buf)
}

#[test]
fn serve_starts_answers_and_stops() {
    let port = free_port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_legrad"))
        .args([
            "serve",
            "--host",
            "127.0.0.1",
            "--port",
            &port.to_string(),
            "--model-dir",
            &fixture(""),
        ])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let response = loop {
        if let Some(r) = http_get(port, "/v1/models") {
            break r;
        }
        assert!(Instant::now() < deadline, "server did not come up");
        assert!(child.try_wait().unwrap().is_none(), "server exited early");
        std::thread::sleep(Duration::from_millis(50));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"tiny_cls\""));
    assert!(response.contains("\"tiny_pool\""));
}

#[test]
fn serve_failures() {
    let out = legrad(&["serve", "--model-dir", "/nonexistent/models"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let busy = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = busy.local_addr().unwrap().port().to_string();
    let out = legrad(&["serve", "--model-dir", &fixture(""), "--port", &port]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
    assert!(stderr(&out).contains("cannot bind"));

    let out = legrad(&["serve", "--model-dir", &fixture(""), "--host", "not-an-ip"]);
    assert_eq!(code(&out), 2);
    let out = legrad(&["serve"]);
    assert_eq!(code(&out), 2);
}
