#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rankforge"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn rankforge")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "rankforge {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas")
}

pub fn load_json(path: &Path) -> Value {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn check_json(path: &Path, schema: &str) -> Value {
    let schema = load_json(&schema_dir().join(schema));
    let validator = jsonschema::options()
        .should_validate_formats(true)
        .build(&schema)
        .expect("schema compiles");
    let doc = load_json(path);
    let errors: Vec<String> = validator.iter_errors(&doc).map(|e| e.to_string()).collect();
    assert!(
        errors.is_empty(),
        "{} violates schema: {errors:#?}",
        path.display()
    );
    doc
}

/// Checks a CSV against its column descriptor and returns the rows keyed by column name.
pub fn check_csv(path: &Path, schema: &str) -> Vec<BTreeMap<String, String>> {
    let schema = load_json(&schema_dir().join(schema));
    let columns = schema["columns"].as_array().expect("columns");
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("header").split(',').collect();
    let names: Vec<&str> = columns
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(header, names, "{} header", path.display());

    let cells: Vec<(jsonschema::Validator, bool)> = columns
        .iter()
        .map(|c| {
            let mut s = c.as_object().unwrap().clone();
            s.remove("name");
            let nullable = s
                .remove("nullable")
                .and_then(|v| v.as_bool())
                .unwrap_or(false);
            (
                jsonschema::validator_for(&Value::Object(s)).unwrap(),
                nullable,
            )
        })
        .collect();

    let mut rows = Vec::new();
    for (line_no, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(
            fields.len(),
            names.len(),
            "{} row {}",
            path.display(),
            line_no + 1
        );
        let mut row = BTreeMap::new();
        for ((field, (validator, nullable)), name) in fields.iter().zip(&cells).zip(&names) {
            if field.is_empty() {
                assert!(
                    *nullable,
                    "{} row {}: {name} is empty",
                    path.display(),
                    line_no + 1
                );
            } else {
                let value = serde_json::from_str::<Value>(field)
                    .ok()
                    .filter(Value::is_number)
                    .unwrap_or_else(|| json!(field));
                assert!(
                    validator.is_valid(&value),
                    "{} row {}: {name} = {field:?}",
                    path.display(),
                    line_no + 1
                );
            }
            row.insert(name.to_string(), field.to_string());
        }
        rows.push(row);
    }
    rows
}

pub fn run_records(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name.starts_with("run_") && name.ends_with(".json")
        })
        .collect();
    out.sort();
    out
}

/// Every file under `dir` with its bytes; run records have their timestamps blanked.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            let name = rel.file_name().unwrap().to_string_lossy().into_owned();
            let bytes = fs::read(&path).unwrap();
            let bytes = if name.starts_with("run_") {
                let mut v: Value = serde_json::from_slice(&bytes).unwrap();
                v["started_at"] = Value::Null;
                v["finished_at"] = Value::Null;
                let text = serde_json::to_string(&v).unwrap();
                text.replace(path_str(root), "<out>").into_bytes()
            } else {
                String::from_utf8(bytes.clone())
                    .map(|t| t.replace(path_str(root), "<out>").into_bytes())
                    .unwrap_or(bytes)
            };
            out.insert(rel, bytes);
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// `Err` names the first file that differs between the two output trees.
pub fn same_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let (sa, sb) = (snapshot(a), snapshot(b));
    if sa.keys().ne(sb.keys()) {
        return Err(format!(
            "{} and {} hold different files",
            a.display(),
            b.display()
        ));
    }
    match sa.iter().find(|(k, v)| *v != &sb[*k]) {
        Some((k, _)) => Err(format!("{} differs between runs", k.display())),
        None => Ok(sa.len()),
    }
}

pub fn assert_same_outputs(a: &Path, b: &Path) {
    if let Err(e) = same_outputs(a, b) {
        panic!("{e}");
    }
}

/// A small synthetic dataset in `dir`; returns the manifest path.
pub fn small_dataset(dir: &Path, seed: u64) -> PathBuf {
    let seed = seed.to_string();
    run_ok(&[
        "synth",
        "--images",
        "60",
        "--seed",
        &seed,
        "--out",
        path_str(dir),
    ]);
    dir.join("manifest.json")
}
