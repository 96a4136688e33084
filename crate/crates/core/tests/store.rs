use std::fs::OpenOptions;
use std::io::Write;

use serde::{Deserialize, Serialize};

use firstprune::store::{load_records, quarantine_path, RecordFile, RecordLog, RunManifest, RunStore, Stamped};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Row {
    i: u64,
    text: String,
}

fn manifest(run_id: &str) -> RunManifest {
    RunManifest {
        run_id: run_id.into(),
        config: serde_json::json!({}),
        config_hash: "c".into(),
        dataset_hash: "d".into(),
        started_at_unix: 0,
        finished_at_unix: None,
        backends: Default::default(),
        code_version: "test".into(),
    }
}

#[test]
fn hundred_thousand_appends_reload_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.jsonl");
    let log = RecordLog::open(&path).unwrap();
    for chunk in (0..100_000u64).collect::<Vec<_>>().chunks(1000) {
        let lines: Vec<String> = chunk
            .iter()
            .map(|&i| serde_json::to_string(&Row { i, text: format!("line\n{i}") }).unwrap())
            .collect();
        log.append_lines(&lines).unwrap();
    }
    let rows: Vec<Row> = load_records(&path).unwrap();
    assert_eq!(rows.len(), 100_000);
    assert!(rows.iter().enumerate().all(|(k, r)| r.i == k as u64));
}

#[test]
fn concurrent_blocks_never_interleave() {
    let dir = tempfile::tempdir().unwrap();
    let log = RecordLog::open(dir.path().join("rows.jsonl")).unwrap();
    std::thread::scope(|s| {
        for t in 0..8u64 {
            let log = &log;
            s.spawn(move || {
                for b in 0..200u64 {
                    let lines: Vec<String> = (0..5)
                        .map(|k| serde_json::to_string(&Row { i: t * 1000 + b, text: k.to_string() }).unwrap())
                        .collect();
                    log.append_lines(&lines).unwrap();
                }
            });
        }
    });
    let rows: Vec<Row> = load_records(log.path()).unwrap();
    assert_eq!(rows.len(), 8 * 200 * 5);
    for block in rows.chunks(5) {
        assert!(block.iter().all(|r| r.i == block[0].i));
        let order: Vec<&str> = block.iter().map(|r| r.text.as_str()).collect();
        assert_eq!(order, ["0", "1", "2", "3", "4"]);
    }
}

#[test]
fn a_torn_tail_is_quarantined_when_the_store_reopens() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = RunStore::create(dir.path(), manifest("r1"), true).unwrap();
        for i in 0..3 {
            store.append(RecordFile::Records, &Row { i, text: "ok".into() }).unwrap();
        }
    }
    let path = dir.path().join(RecordFile::Records.file_name());
    OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap()
        .write_all(br#"{"run_id":"r1","i":3,"te"#)
        .unwrap();

    let store = RunStore::create(dir.path(), manifest("r1"), true).unwrap();
    let before: Vec<Row> = store.load(RecordFile::Records).unwrap();
    assert_eq!(before.len(), 3);
    store.append(RecordFile::Records, &Row { i: 3, text: "again".into() }).unwrap();
    let after: Vec<Stamped<Row>> = load_records(&path).unwrap();
    assert_eq!(after.iter().map(|r| r.inner.i).collect::<Vec<_>>(), [0, 1, 2, 3]);
    assert!(after.iter().all(|r| r.run_id == "r1"));
    let quarantined = std::fs::read_to_string(quarantine_path(&path)).unwrap();
    assert!(quarantined.contains(r#""te"#));
}
