use std::path::Path;
use std::process::Command;

use spect_cli::pipeline::{read_manifest, run_pipeline, StageStatus};
use spect_cli::StudyConfig;
use spect_core::io::sha256_hex;

const TINY: &str = r#"
name = "tiny"
seed = 7

[grid]
nx = 40
ny = 40
nz = 24
pitch = 8.0

[geometry]
n_views = 24

[noise]
total_counts = 200000.0

[[variants]]
algorithm = "osem"
iterations = 2
subsets = 4

[[variants]]
algorithm = "osem"
iterations = 2
subsets = 4
filter = true

[[variants]]
algorithm = "map-ent"
iterations = 3
gamma = 0.1
"#;

fn tiny(out: &Path) -> StudyConfig {
    let mut c = StudyConfig::from_toml_str(TINY, "tiny.toml").unwrap();
    c.output_dir = out.to_path_buf();
    c
}

fn run(c: &StudyConfig) -> (spect_cli::Manifest, Vec<(String, StageStatus)>) {
    let mut log = Vec::new();
    let m = run_pipeline(c, &mut |name, st| log.push((name.to_string(), st))).unwrap();
    (m, log)
}

fn spect(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_spect")).args(args).output().unwrap()
}

#[test]
fn manifest_lists_every_output_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let (m, log) = run(&tiny(dir.path()));
    assert_eq!(m.status, "ok");
    assert!(log.iter().all(|(_, s)| *s == StageStatus::Ran));
    let names: Vec<&str> = log.iter().map(|(n, _)| n.as_str()).collect();
    for stage in ["phantom", "project", "addnoise", "reconstruct:osem-s4-n2", "filter:osem-s4-n2", "report"] {
        assert!(names.contains(&stage), "{stage} missing from {names:?}");
    }

    let mut on_disk = Vec::new();
    for e in walk(dir.path()) {
        let rel = e.strip_prefix(dir.path()).unwrap().to_string_lossy().to_string();
        if rel != "manifest.json" {
            on_disk.push(rel);
        }
    }
    on_disk.sort();
    let mut listed: Vec<String> = m.files.iter().map(|f| f.path.clone()).collect();
    listed.sort();
    assert_eq!(listed, on_disk);
    for f in &m.files {
        assert_eq!(f.sha256, sha256_hex(&std::fs::read(dir.path().join(&f.path)).unwrap()), "{}", f.path);
    }
    assert!(listed.contains(&"report/rc_all.csv".to_string()));
    assert_eq!(read_manifest(dir.path()).unwrap(), m);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn rerun_is_cached_and_identical() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path());
    let (first, _) = run(&c);
    let bytes = std::fs::read(dir.path().join("manifest.json")).unwrap();
    let (second, log) = run(&c);
    assert!(log.iter().all(|(_, s)| *s == StageStatus::Cached), "{log:?}");
    assert_eq!(first, second);
    assert_eq!(bytes, std::fs::read(dir.path().join("manifest.json")).unwrap());
}

#[test]
fn changed_variant_reruns_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    run(&c);
    c.variants[2].gamma = Some(0.05);
    let (_, log) = run(&c);
    let status = |name: &str| log.iter().find(|(n, _)| n == name).map(|(_, s)| *s);
    assert_eq!(status("phantom"), Some(StageStatus::Cached));
    assert_eq!(status("addnoise"), Some(StageStatus::Cached));
    assert_eq!(status("reconstruct:osem-s4-n2"), Some(StageStatus::Cached));
    assert_eq!(status("reconstruct:mapent-g0.05-n3"), Some(StageStatus::Ran));
    assert_eq!(status("report"), Some(StageStatus::Ran));
}

#[test]
fn tampered_output_is_regenerated() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path());
    let (first, _) = run(&c);
    std::fs::write(dir.path().join("noisy/projections.f32"), b"garbage").unwrap();
    let (second, log) = run(&c);
    assert!(log.contains(&("addnoise".to_string(), StageStatus::Ran)));
    assert_eq!(first.files, second.files);
}

#[test]
fn failing_stage_still_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.grid.nx = 30;
    assert!(run_pipeline(&c, &mut |_, _| {}).is_err());
    let m = read_manifest(dir.path()).unwrap();
    assert_eq!(m.status, "failed");
    assert!(m.error.unwrap().contains("does not fit"));
}

#[test]
fn zero_variants_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.split("[[variants]]").next().unwrap();
    let cfg = dir.path().join("empty.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = spect(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("variants"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().to_string();
    let out = spect(&["project", "--activity", &d("nope"), "--attenuation", &d("nope2"), "--out", &d("p")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn chained_subcommands_match_run() {
    let dir = tempfile::tempdir().unwrap();
    let study = dir.path().join("study");
    run(&tiny(&study));

    let d = |p: &str| dir.path().join(p).to_string_lossy().to_string();
    let steps: [Vec<String>; 5] = [
        vec!["phantom", "--preset", "nema-6", "--dims", "40,40,24", "--pitch", "8", "--out", &d("phantom")]
            .into_iter()
            .map(String::from)
            .collect(),
        vec![
            "project".into(),
            "--activity".into(),
            d("phantom/activity"),
            "--attenuation".into(),
            d("phantom/attenuation"),
            "--views".into(),
            "24".into(),
            "--out".into(),
            d("clean"),
        ],
        vec![
            "addnoise".into(),
            "--input".into(),
            d("clean"),
            "--counts".into(),
            "200000".into(),
            "--seed".into(),
            "7".into(),
            "--out".into(),
            d("noisy"),
        ],
        vec![
            "reconstruct".into(),
            "--projections".into(),
            d("noisy"),
            "--attenuation".into(),
            d("phantom/attenuation"),
            "--algo".into(),
            "osem".into(),
            "--iters".into(),
            "2".into(),
            "--subsets".into(),
            "4".into(),
            "--out".into(),
            d("recon"),
        ],
        vec!["filter".into(), "--input".into(), d("recon"), "--out".into(), d("filtered")],
    ];
    for args in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = spect(&args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let same = |a: &str, b: &str| {
        assert_eq!(std::fs::read(study.join(a)).unwrap(), std::fs::read(dir.path().join(b)).unwrap(), "{a} vs {b}");
    };
    same("phantom/activity.f32", "phantom/activity.f32");
    same("projections/clean.f32", "clean.f32");
    same("noisy/projections.f32", "noisy.f32");
    same("recon/osem-s4-n2/iter_0001.f32", "recon/iter_0001.f32");
    same("recon/osem-s4-n2/final.f32", "recon/final.f32");
    same("filtered/osem-s4-n2/final.f32", "filtered/final.f32");
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let mut manifests = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_spect"))
            .env("SPECT_THREADS", threads)
            .args(["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        manifests.push(std::fs::read(out.join("manifest.json")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
}
