use std::path::Path;
use std::process::{Command, Output};

use certfg::io::{parse_dataset, ReportDocument};
use certfg::objective::assemble_q;
use certfg::sparse::CsrMatrix;

fn certfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_certfg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn generate(dir: &Path, name: &str, extra: &[&str]) -> String {
    let path = dir.join(name).to_str().unwrap().to_string();
    let mut args = vec!["generate", "-o", &path];
    args.extend_from_slice(extra);
    let out = certfg(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn missing_input_is_a_usage_error() {
    let out = certfg(&["solve", "/nonexistent/graph.g2o"]);
    assert_eq!(out.status.code(), Some(1));
    let out = certfg(&["solve"]);
    assert_eq!(out.status.code(), Some(1));
    let out = certfg(&["solve", "x.g2o", "--init", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.g2o");
    std::fs::write(&path, "EDGE_SE2 0 1 1.0 0.0\n").unwrap();
    let out = certfg(&["solve", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_noise_problem_certifies_with_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "grid.g2o", &["--topology", "grid2d", "--size", "4", "--seed", "3"]);
    let report = dir.path().join("report.json");
    let q = dir.path().join("q.txt");
    let estimate = dir.path().join("estimate.g2o");
    let out = certfg(&[
        "solve",
        &input,
        "-q",
        "-o",
        report.to_str().unwrap(),
        "--export-q",
        q.to_str().unwrap(),
        "--estimate-out",
        estimate.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let text = std::fs::read_to_string(&report).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    for field in [
        "status",
        "levels",
        "sdp_value",
        "rounded_value",
        "refined_value",
        "term_rank",
        "certified",
        "opt_time_s",
        "total_time_s",
        "problem_class",
        "init",
        "seed",
        "p0",
        "config",
    ] {
        assert!(json.get(field).is_some(), "report lacks `{field}`");
    }
    let doc = ReportDocument::from_json(&text).unwrap();
    assert!(doc.certified);
    assert!(doc.sdp_value.unwrap() < 1e-8);

    // The exported triplets reproduce the assembled matrix.
    let graph = parse_dataset(Path::new(&input)).unwrap().graph;
    let file = std::io::BufReader::new(std::fs::File::open(&q).unwrap());
    let exported = CsrMatrix::read_symmetric_triplets(file).unwrap();
    let assembled = assemble_q(&graph).matrix().to_dense();
    assert!((exported.to_dense() - assembled).amax() <= 1e-12);

    // The estimate is itself a valid dataset over the same graph.
    let reparsed = parse_dataset(&estimate).unwrap();
    assert_eq!(reparsed.graph.num_poses(), graph.num_poses());
}

#[test]
fn report_goes_to_stdout_without_output_flag() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), "chain.g2o", &["--size", "6", "--dim", "3"]);
    let out = certfg(&["solve", &input, "-q"]);
    assert_eq!(out.status.code(), Some(0));
    let doc = ReportDocument::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(doc.term_rank, 3);
}

#[test]
fn uncertified_run_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(
        dir.path(),
        "noisy.g2o",
        &[
            "--size",
            "20",
            "--rotation-sigma",
            "0.5",
            "--translation-sigma",
            "0.5",
            "--loop-closure-probability",
            "0.5",
            "--seed",
            "9",
        ],
    );
    let out = certfg(&["solve", &input, "-q", "--init", "random", "--max-iters", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let doc = ReportDocument::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert!(!doc.certified);
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--topology", "grid3d", "--size", "3", "--rotation-kappa", "50", "--translation-sigma", "0.1"];
    let a = generate(dir.path(), "a.g2o", &[&args[..], &["--seed", "4"]].concat());
    let b = generate(dir.path(), "b.g2o", &[&args[..], &["--seed", "4"]].concat());
    let c = generate(dir.path(), "c.g2o", &[&args[..], &["--seed", "5"]].concat());
    let read = |p: &str| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}
