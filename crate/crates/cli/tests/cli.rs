use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fastds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastds"))
        .args(args)
        .env_remove("BBOX_WORKERS")
        .output()
        .expect("spawn fastds")
}

fn ok_json(args: &[&str]) -> Value {
    let out = fastds(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json stdout")
}

fn create(dir: &Path, spec: &str, extra: &[&str]) -> String {
    let out = dir.join("d.bbox").to_str().unwrap().to_owned();
    let from = format!("synthetic:{spec}");
    let mut args = vec!["create", "--from", &from, "--out", &out, "--json"];
    args.extend_from_slice(extra);
    ok_json(&args);
    out
}

#[test]
fn created_file_validates() {
    let t = tempfile::tempdir().unwrap();
    let path = create(t.path(), "300x16x16x3", &["--page-size", "65536", "--compress-prob", "0.5"]);
    let v = ok_json(&["validate", &path, "--json"]);
    assert_eq!(v["valid"], true);
    assert_eq!(v["violations"].as_array().unwrap().len(), 0);
}

#[test]
fn invalid_page_size_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("x.bbox");
    for bad in ["1000", "32768", "100000"] {
        let o = fastds(&["create", "--from", "synthetic:4x4x4x3", "--out", out.to_str().unwrap(), "--page-size", bad]);
        assert_eq!(o.status.code(), Some(2), "page size {bad}");
        assert!(!out.exists());
    }
}

#[test]
fn zero_compression_probability_stores_everything_raw() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("d.bbox");
    let v = ok_json(&[
        "create", "--from", "synthetic:100x8x8x3", "--out", out.to_str().unwrap(),
        "--page-size", "65536", "--compress-prob", "0", "--json",
    ]);
    assert_eq!(v["codec_counts"]["raw"], 100);
    assert_eq!(v["codec_counts"]["rle"], 0);
}

#[test]
fn inspect_reports_the_default_page_size() {
    let t = tempfile::tempdir().unwrap();
    let path = create(t.path(), "20x8x8x3", &[]);
    let v = ok_json(&["inspect", &path, "--json"]);
    assert_eq!(v["page_size"], 8_388_608);
    assert_eq!(v["num_samples"], 20);
    assert_eq!(v["num_pages"], 1);
    let names: Vec<&str> = v["fields"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["label", "image"]);
}

#[test]
fn bad_magic_and_out_of_range_are_data_errors() {
    let t = tempfile::tempdir().unwrap();
    let junk = t.path().join("junk");
    std::fs::write(&junk, vec![7u8; 4096]).unwrap();
    let o = fastds(&["inspect", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));

    let path = create(t.path(), "10x8x8x3", &["--page-size", "65536"]);
    let o = fastds(&["inspect", &path, "--sample", "10"]);
    assert_eq!(o.status.code(), Some(1));
    let o = fastds(&["inspect", t.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sample_view_offsets_are_consistent_with_the_header() {
    let t = tempfile::tempdir().unwrap();
    let path = create(t.path(), "500x24x24x3", &["--page-size", "65536"]);
    let h = ok_json(&["inspect", &path, "--json"]);
    let heap = h["heap_offset"].as_u64().unwrap();
    let alloc = h["alloc_table_offset"].as_u64().unwrap();
    let page = h["page_size"].as_u64().unwrap();
    for i in ["0", "250", "499"] {
        let s = ok_json(&["inspect", &path, "--sample", i, "--json"]);
        let img = &s["cells"][1];
        assert_eq!(img["field"], "image");
        let (off, len) = (img["offset"].as_u64().unwrap(), img["len"].as_u64().unwrap());
        assert!(off >= heap && off + len <= alloc, "sample {i}: {off}+{len}");
        assert_eq!(off % 64, 0);
        let pages = img["pages"].as_array().unwrap();
        assert_eq!(pages[0].as_u64().unwrap(), (off - heap) / page);
        assert_eq!(pages[1].as_u64().unwrap(), (off + len - 1 - heap) / page);
    }
}

#[test]
fn read_only_bench_fetches_each_page_once() {
    let t = tempfile::tempdir().unwrap();
    let path = create(t.path(), "400x16x16x3", &["--page-size", "65536"]);
    let pages = ok_json(&["inspect", &path, "--json"])["num_pages"].as_u64().unwrap();
    let json = t.path().join("r.json");
    let o = fastds(&[
        "bench", "--data", &path, "--mode", "read-only", "--order", "quasi-random",
        "--batch-size", "16", "--workers", "2", "--out", json.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("mode read-only\n"));
    let r: Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let c = &r["counters"];
    assert_eq!(c["page_fetches"].as_u64().unwrap(), pages);
    assert_eq!(c["page_reloads"], 0);
    assert_eq!(c["samples"], 400);
}

#[test]
fn bench_counters_repeat_across_runs() {
    let t = tempfile::tempdir().unwrap();
    let path = create(t.path(), "300x12x12x3", &["--page-size", "65536"]);
    let run = |name: &str| {
        let out = t.path().join(name);
        let o = fastds(&["bench", "--data", &path, "--seed", "5", "--batch-size", "8", "--workers", "3", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        let r: Value = serde_json::from_slice(&std::fs::read(out).unwrap()).unwrap();
        ["page_fetches", "page_reloads", "batches", "label_digest", "file_opens"].map(|k| r["counters"][k].clone())
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn file_per_sample_without_a_directory_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let path = create(t.path(), "10x8x8x3", &["--page-size", "65536"]);
    let o = fastds(&["bench", "--data", &path, "--loader", "file-per-sample"]);
    assert_eq!(o.status.code(), Some(2));
    let o = fastds(&["bench", "--data", &path, "--mode", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exported_directory_and_container_agree_in_sample_dump_and_bench() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path().join("tree");
    let out = t.path().join("c.bbox");
    ok_json(&[
        "create", "--from", "synthetic:60x8x8x3", "--export-dir", dir.to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--page-size", "65536", "--json",
    ]);
    let bench = |loader: &str| {
        let r = t.path().join(format!("{loader}.json"));
        let o = fastds(&[
            "bench", "--data", out.to_str().unwrap(), "--dir", dir.to_str().unwrap(), "--loader", loader,
            "--batch-size", "6", "--workers", "2", "--out", r.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_slice::<Value>(&std::fs::read(r).unwrap()).unwrap()
    };
    let (c, f) = (bench("container"), bench("file-per-sample"));
    let (c, f) = (&c["counters"], &f["counters"]);
    assert_eq!(c["label_digest"], f["label_digest"]);
    assert_eq!(c["file_opens"], 1);
    assert_eq!(f["file_opens"], 60);

    let dump = |workers: &str| {
        ok_json(&["sample-dump", out.to_str().unwrap(), "--batch-size", "7", "--workers", workers, "--json"])
    };
    let one = dump("1");
    assert_eq!(one.as_array().unwrap().len(), 60);
    assert_eq!(one, dump("4"));
}

#[test]
fn unknown_flags_exit_with_usage_code() {
    assert_eq!(fastds(&["validate", "--frobnicate", "x"]).status.code(), Some(2));
    assert_eq!(fastds(&["no-such-command"]).status.code(), Some(2));
}
