mod common;

use std::path::Path;

use common::{build_fixture, run_cli, schema_dir};
use sdad_core::manifest::load_manifest;
use serde_json::Value;

fn check_schema(name: &str, doc: &Value) {
    let path = schema_dir().join(format!("{name}.schema.json"));
    let schema: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = v
        .iter_errors(doc)
        .map(|e| format!("{} at {}", e, e.instance_path()))
        .collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{doc:#}");
}

fn json_run(args: &[&str]) -> (i32, Value) {
    let mut full = vec!["--json"];
    full.extend_from_slice(args);
    let (code, out, _) = run_cli(&full);
    (
        code,
        serde_json::from_str(&out).unwrap_or_else(|e| panic!("{e}: {out}")),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn validate_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let f = build_fixture(d.path(), 2, true);
    let (code, doc) = json_run(&[
        "validate",
        "--manifest",
        p(&f.manifest_path),
        "--check-files",
    ]);
    assert_eq!(code, 0);
    check_schema("validate", &doc);
    assert_eq!(doc["result"]["samples"], 18);

    std::fs::remove_file(d.path().join("images/s0_0.png")).unwrap();
    let (code, doc) = json_run(&[
        "validate",
        "--manifest",
        p(&f.manifest_path),
        "--check-files",
    ]);
    assert_eq!(code, 1);
    check_schema("error", &doc);

    let bad = d.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"not\":\"a header\"}\n").unwrap();
    let (code, _, err) = run_cli(&["validate", "--manifest", p(&bad)]);
    assert_eq!(code, 1);
    assert!(err.starts_with("sdad validate:"), "{err}");
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(run_cli(&["frobnicate"]).0, 1);
    assert_eq!(run_cli(&["validate"]).0, 1);
    let (code, out, _) = run_cli(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("augment"));
}

/// Label, augment, and evaluate a small dataset end to end on the mock backend.
#[test]
fn mock_pipeline_json_outputs() {
    let d = tempfile::tempdir().unwrap();
    let f = build_fixture(d.path(), 3, false);
    let labeled = d.path().join("labeled.jsonl");
    let (code, doc) = json_run(&[
        "analyze",
        "--manifest",
        p(&f.manifest_path),
        "--store",
        p(&f.store_path),
        "--bank",
        p(&f.bank_path),
        "--write-manifest",
        p(&labeled),
    ]);
    assert_eq!(code, 0, "{doc:#}");
    check_schema("analyze", &doc);
    assert_eq!(doc["result"]["labeled_now"], 27);
    // Rows sit next to their bank entry, so labels come back as built.
    let m = load_manifest(&labeled).unwrap();
    for s in &m.samples {
        let k: usize = s.id[1..s.id.find('_').unwrap()].parse().unwrap();
        assert_eq!(
            s.subgroup.as_ref(),
            Some(&m.taxonomy.enumerate()[k]),
            "{}",
            s.id
        );
    }

    let out = d.path().join("aug");
    let (code, doc) = json_run(&[
        "augment",
        "--manifest",
        p(&labeled),
        "--palette",
        p(&f.palette_path),
        "--bank",
        p(&f.bank_path),
        "--backend",
        "mock",
        "--dimension",
        "64",
        "--n-synth",
        "18",
        "--seed",
        "7",
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 0, "{doc:#}");
    check_schema("augment", &doc);
    let aug = load_manifest(out.join("manifest.jsonl")).unwrap();
    assert_eq!(aug.samples.len(), 27 + 18);
    let (code, doc) = json_run(&[
        "validate",
        "--manifest",
        p(&out.join("manifest.jsonl")),
        "--check-files",
    ]);
    assert_eq!(code, 0, "{doc:#}");

    let (code, doc) = json_run(&[
        "eval-fd",
        "--features-a",
        p(&f.store_path),
        "--features-b",
        p(&f.store_path),
        "--per-subgroup",
        "--manifest-a",
        p(&labeled),
        "--manifest-b",
        p(&labeled),
    ]);
    assert_eq!(code, 0, "{doc:#}");
    check_schema("eval-fd", &doc);
    assert!(doc["result"]["fd"].as_f64().unwrap().abs() < 1e-8);

    let masks = d.path().join("masks");
    let (code, doc) = json_run(&[
        "eval-seg",
        "--gt-dir",
        p(&masks),
        "--pred-dir",
        p(&masks),
        "--palette",
        p(&f.palette_path),
        "--manifest",
        p(&labeled),
    ]);
    assert_eq!(code, 0, "{doc:#}");
    check_schema("eval-seg", &doc);
    assert_eq!(doc["result"]["miou"], 1.0);
    assert_eq!(doc["result"]["per_subgroup"][0]["images"], 3);

    let (code, doc) = json_run(&[
        "eval-seg",
        "--gt-dir",
        p(&masks),
        "--pred-dir",
        p(&masks),
        "--palette",
        p(&f.palette_path),
        "--include-empty-as-nan",
    ]);
    assert_eq!(code, 0, "{doc:#}");
    check_schema("eval-seg", &doc);

    let routes = d.path().join("routes.jsonl");
    std::fs::write(
        &routes,
        concat!(
            r#"{"route_id":"r0","subgroup":[0,0],"rc":1.0,"events":[]}"#,
            "\n",
            r#"{"route_id":"r1","subgroup":[1,1],"rc":0.5,"events":[{"kind":"red_light","count":2}]}"#,
            "\n",
        ),
    )
    .unwrap();
    let (code, doc) = json_run(&["eval-drive", "--routes", p(&routes)]);
    assert_eq!(code, 0, "{doc:#}");
    check_schema("eval-drive", &doc);
    let ds = doc["result"]["ds"].as_f64().unwrap();
    assert!((ds - (1.0 + 0.5 * 0.49) / 2.0).abs() < 1e-12);

    let t = &m.taxonomy;
    let values = |offset: f64| -> serde_json::Map<String, Value> {
        t.enumerate()
            .iter()
            .enumerate()
            .map(|(i, sg)| (t.phrase(sg), Value::from(offset + i as f64)))
            .collect()
    };
    let input = d.path().join("fid.json");
    std::fs::write(
        &input,
        serde_json::json!({"metric": "FID", "values": values(10.0), "overall": {"label": "pooled", "value": 12.0}})
            .to_string(),
    )
    .unwrap();
    let base = d.path().join("base.json");
    std::fs::write(
        &base,
        serde_json::json!({"metric": "FID", "values": values(20.0)}).to_string(),
    )
    .unwrap();
    let (code, doc) = json_run(&["report", "--inputs", p(&input), "--baseline", p(&base)]);
    assert_eq!(code, 0, "{doc:#}");
    check_schema("report", &doc);
    let (code, text, _) = run_cli(&["report", "--inputs", p(&input), "--format", "csv"]);
    assert_eq!(code, 0);
    assert!(text.starts_with("subgroup,value"), "{text}");
}

#[test]
fn augment_output_is_stable_across_runs() {
    let d = tempfile::tempdir().unwrap();
    let f = build_fixture(d.path(), 2, true);
    let run = |out: &str| {
        let (code, doc) = json_run(&[
            "augment",
            "--manifest",
            p(&f.manifest_path),
            "--palette",
            p(&f.palette_path),
            "--backend",
            "mock:3",
            "--n-synth",
            "9",
            "--seed",
            "11",
            "--out",
            p(&d.path().join(out)),
        ]);
        assert_eq!(code, 0, "{doc:#}");
        doc["result"]["manifest_sha256"]
            .as_str()
            .unwrap()
            .to_string()
    };
    assert_eq!(run("a"), run("b"));
    assert_eq!(
        common::snapshot(&d.path().join("a")).len(),
        common::snapshot(&d.path().join("b")).len()
    );
}

#[test]
fn config_file_with_interpolation() {
    let d = tempfile::tempdir().unwrap();
    let f = build_fixture(d.path(), 2, true);
    std::env::set_var("SDAD_TEST_FIXTURE_DIR", d.path());
    let cfg = d.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"manifest":"${SDAD_TEST_FIXTURE_DIR}/manifest.jsonl",
            "palette":"palette.json",
            "out_dir":"out",
            "backend":{"kind":{"kind":"mock","seed":1},"max_in_flight":2},
            "plan":{"n_synth":4,"seed":5,"target_policy":"balance_to_uniform"},
            "log_level":"error"}"#,
    )
    .unwrap();
    let (code, doc) = json_run(&["--config", p(&cfg), "augment"]);
    assert_eq!(code, 0, "{doc:#}");
    check_schema("augment", &doc);
    let used = &doc["provenance"]["config"];
    assert_eq!(used["plan"]["target_policy"], "balance_to_uniform");
    assert_eq!(used["manifest"], p(&f.manifest_path));
    assert!(d.path().join("out/manifest.jsonl").exists());

    // A different plan may not reuse the output directory.
    let (code, doc) = json_run(&["--config", p(&cfg), "augment", "--n-synth", "2"]);
    assert_eq!(code, 1);
    assert!(doc["error"]["message"]
        .as_str()
        .unwrap()
        .contains("fresh output directory"));

    // Flags override config values.
    let fresh = d.path().join("out2");
    let (code, doc) = json_run(&[
        "--config",
        p(&cfg),
        "augment",
        "--n-synth",
        "2",
        "--out",
        p(&fresh),
    ]);
    assert_eq!(code, 0, "{doc:#}");
    assert_eq!(doc["result"]["n_synth"], 2);

    let typo = d.path().join("typo.json");
    std::fs::write(&typo, r#"{"manifset":"x"}"#).unwrap();
    let (code, doc) = json_run(&["--config", p(&typo), "validate"]);
    assert_eq!(code, 1);
    check_schema("error", &doc);

    let unset = d.path().join("unset.json");
    std::fs::write(
        &unset,
        r#"{"manifest":"${SDAD_TEST_SURELY_UNSET_VAR}/m.jsonl"}"#,
    )
    .unwrap();
    let (code, _, err) = run_cli(&["--config", p(&unset), "validate"]);
    assert_eq!(code, 1);
    assert!(err.contains("SDAD_TEST_SURELY_UNSET_VAR"), "{err}");
}

#[test]
fn unreachable_backend_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let f = build_fixture(d.path(), 1, true);
    let url = format!("remote:{}", common::dead_url());
    let (code, doc) = json_run(&[
        "augment",
        "--manifest",
        p(&f.manifest_path),
        "--palette",
        p(&f.palette_path),
        "--bank",
        p(&f.bank_path),
        "--backend",
        &url,
        "--dimension",
        "64",
        "--n-synth",
        "3",
        "--seed",
        "1",
        "--out",
        p(&d.path().join("o")),
    ]);
    assert_eq!(code, 2, "{doc:#}");
    check_schema("error", &doc);
}

#[test]
fn caption_bundle_for_one_sample() {
    let d = tempfile::tempdir().unwrap();
    let f = build_fixture(d.path(), 1, false);
    let (code, doc) = json_run(&[
        "caption",
        "--manifest",
        p(&f.manifest_path),
        "--palette",
        p(&f.palette_path),
        "--backend",
        "mock",
        "--dimension",
        "64",
        "--bank",
        p(&f.bank_path),
        "--store",
        p(&f.store_path),
        "--sample",
        "s4_0",
        "--target",
        "Rain, Night",
    ]);
    assert_eq!(code, 0, "{doc:#}");
    check_schema("caption", &doc);
    let r = &doc["result"];
    let t = &f.manifest.taxonomy;
    // Unlabeled, so the source comes from the store row.
    assert_eq!(
        serde_json::from_value::<sdad_core::manifest::Subgroup>(r["source_subgroup"].clone())
            .unwrap(),
        t.enumerate()[4]
    );
    let prompt = r["prompt"].as_str().unwrap();
    for c in common::CLASSES {
        assert!(prompt.contains(c), "{prompt}");
    }
    let styled = r["styled_caption"].as_str().unwrap();
    assert!(
        styled.starts_with(r["base_caption"].as_str().unwrap()),
        "{styled}"
    );

    let (code, doc) = json_run(&[
        "caption",
        "--manifest",
        p(&f.manifest_path),
        "--palette",
        p(&f.palette_path),
        "--backend",
        "mock",
        "--bank",
        p(&f.bank_path),
        "--sample",
        "nope",
    ]);
    assert_eq!(code, 1);
    check_schema("error", &doc);
}
