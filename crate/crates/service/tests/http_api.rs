use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use nnaug_core::dataset::{DatasetManifest, Source, Split};
use nnaug_core::dedup::{CandidatePair, HashedImage, LeakageReport, PHash, SplitSpec};
use nnaug_core::matrix::Matrix;
use nnaug_core::prompts::{simple_prompt, ClassSynset};
use nnaug_core::{jsonl, Index};
use nnaug_service::{router, AppState, ServiceConfig, SplitsFile, VerdictStore};
use nnaug_testkit::{encode_png, random_catalog, synthetic_manifest, synthetic_photo};
use reqwest::StatusCode;
use serde_json::{json, Value};

fn candidate_pairs(n: usize) -> Vec<CandidatePair> {
    (0..n)
        .map(|i| {
            let l = HashedImage::new(format!("aug/{i:05}"), PHash(i as u64));
            let r = HashedImage::new(format!("val/{i:05}"), PHash(i as u64 ^ 0b111));
            CandidatePair::new("test", &l, &r, 3)
        })
        .collect()
}

fn seed_store(dir: &Path, pairs: usize) {
    let mut s = VerdictStore::open(dir, 64).unwrap();
    s.add_pairs(candidate_pairs(pairs)).unwrap();
    s.set_splits(SplitsFile {
        augmentation_size: Some(126_861),
        splits: vec![SplitSpec {
            name: "test".into(),
            size: 50_000,
            exclude_confirmed: true,
        }],
    })
    .unwrap();
}

async fn start(dir: &Path) -> (String, reqwest::Client) {
    let cfg = ServiceConfig {
        addr: "127.0.0.1:0".into(),
        store: dir.to_path_buf(),
        workers: 2,
        snapshot_every: 64,
    };
    let state = AppState::open(&cfg).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    (format!("http://{addr}"), reqwest::Client::new())
}

async fn get_json(c: &reqwest::Client, url: String) -> (StatusCode, Value) {
    let r = c.get(url).send().await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

async fn post_json(c: &reqwest::Client, url: String, body: Value) -> (StatusCode, Value) {
    let r = c.post(url).json(&body).send().await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn review_loop_reaches_expected_estimate() {
    let dir = tempfile::tempdir().unwrap();
    seed_store(dir.path(), 2377);
    let (base, c) = start(dir.path()).await;

    let (_, report) = get_json(&c, format!("{base}/v1/reports/leakage")).await;
    assert_eq!(report["splits"][0]["confirmed"], 0);
    assert_eq!(report["splits"][0]["estimated"], Value::Null);

    let mut reviewed = 0;
    while reviewed < 500 {
        let (status, page) = get_json(&c, format!("{base}/v1/pairs?status=pending&limit=64")).await;
        assert_eq!(status, StatusCode::OK);
        for p in page.as_array().unwrap() {
            assert_eq!(p["verdict"], "pending");
            if reviewed == 500 {
                break;
            }
            let verdict = if reviewed % 125 == 7 { "true_duplicate" } else { "not_duplicate" };
            let key = p["pair_key"].as_str().unwrap();
            let (status, pair) =
                post_json(&c, format!("{base}/v1/pairs/{key}/verdict"), json!({"verdict": verdict, "reviewer": "r1"})).await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(pair["verdict"], verdict);
            reviewed += 1;
        }
    }
    let (_, report) = get_json(&c, format!("{base}/v1/reports/leakage")).await;
    let report: LeakageReport = serde_json::from_value(report).unwrap();
    let s = &report.splits[0];
    assert_eq!((s.candidates, s.reviewed, s.confirmed, s.estimated), (2377, 500, 4, Some(19)));
    assert_eq!(report.exclusions.len(), 4);

    let (_, confirmed) = get_json(&c, format!("{base}/v1/pairs?status=true_duplicate&limit=100")).await;
    assert_eq!(confirmed.as_array().unwrap().len(), 4);
    let (_, pending) = get_json(&c, format!("{base}/v1/pairs?limit=10000")).await;
    assert_eq!(pending.as_array().unwrap().len(), 1877);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn verdict_errors_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    seed_store(dir.path(), 3);
    let (base, c) = start(dir.path()).await;
    let key = candidate_pairs(1)[0].pair_key.clone();
    let url = format!("{base}/v1/pairs/{key}/verdict");

    let (s, _) = post_json(&c, url.clone(), json!({"verdict": "true_duplicate", "reviewer": "a"})).await;
    assert_eq!(s, StatusCode::OK);
    let (_, report) = get_json(&c, format!("{base}/v1/reports/leakage")).await;
    assert_eq!(report["splits"][0]["confirmed"], 1);
    post_json(&c, url.clone(), json!({"verdict": "true_duplicate", "reviewer": "a"})).await;
    let log = std::fs::read_to_string(dir.path().join("verdicts.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let (s, err) = post_json(&c, url.clone(), json!({"verdict": "maybe"})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"], "InvalidVerdict");
    let (s, err) = post_json(&c, url.clone(), json!({"verdict": "pending"})).await;
    assert_eq!((s, err["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("InvalidVerdict")));
    let (s, err) = post_json(&c, format!("{base}/v1/pairs/ffff/verdict"), json!({"verdict": "not_duplicate"})).await;
    assert_eq!((s, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownPair")));
    let (s, _) = get_json(&c, format!("{base}/v1/pairs?status=bogus")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    // a different reviewer's verdict replaces the first
    post_json(&c, url.clone(), json!({"verdict": "not_duplicate", "reviewer": "b"})).await;
    let (_, report) = get_json(&c, format!("{base}/v1/reports/leakage")).await;
    assert_eq!(report["splits"][0]["confirmed"], 0);
    assert_eq!(report["splits"][0]["reviewed"], 1);
}

async fn wait_for_job(c: &reqwest::Client, base: &str, id: &str) -> Value {
    for _ in 0..600 {
        let (_, job) = get_json(c, format!("{base}/v1/jobs/{id}")).await;
        if job["state"] == "done" || job["state"] == "failed" {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn retrieve_job_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    let records = random_catalog(3, 2000, 8);
    let index_path = work.path().join("catalog.crix");
    Index::build(records.clone()).unwrap().save(&index_path).unwrap();
    let synsets = [ClassSynset::new("n01", &["tench"]), ClassSynset::new("n02", &["goldfish"])];
    let prompts: Vec<_> = synsets.iter().map(|s| simple_prompt(s, false).unwrap()).collect();
    jsonl::write(work.path().join("prompts.jsonl"), &prompts).unwrap();
    let rows: Vec<Vec<f32>> = records[..2].iter().map(|r| r.embedding.values().to_vec()).collect();
    Matrix::from_rows(&rows).unwrap().save(work.path().join("queries.crmx")).unwrap();

    let (base, c) = start(dir.path()).await;
    let params = json!({
        "index": index_path,
        "prompts": work.path().join("prompts.jsonl"),
        "queries": work.path().join("queries.crmx"),
        "out": work.path().join("retrieved"),
        "policy": {"target_per_class": 20},
    });
    let (s, job) = post_json(&c, format!("{base}/v1/jobs"), json!({"kind": "retrieve", "params": params, "idempotency_key": "k1"})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert!(matches!(job["state"].as_str(), Some("queued" | "running")));
    let id = job["job_id"].as_str().unwrap().to_string();
    let (s, again) = post_json(&c, format!("{base}/v1/jobs"), json!({"kind": "retrieve", "params": params, "idempotency_key": "k1"})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(again["job_id"], id.as_str());

    let done = wait_for_job(&c, &base, &id).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["result"]["complete"], 2);
    let lines = std::fs::read_to_string(work.path().join("retrieved/n01.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 20);
    assert!(work.path().join("retrieved/status.json").exists());

    let (s, err) = get_json(&c, format!("{base}/v1/jobs/nope")).await;
    assert_eq!((s, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownJob")));
    let (s, err) = post_json(&c, format!("{base}/v1/jobs"), json!({"kind": "retrieve", "params": {"index": "x"}})).await;
    assert_eq!((s, err["error"].as_str()), (StatusCode::BAD_REQUEST, Some("BadParams")));
    let (s, _) = post_json(&c, format!("{base}/v1/jobs"), json!({"kind": "train_model", "params": {}})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn failed_job_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let (base, c) = start(dir.path()).await;
    let params = json!({"index": "/nonexistent/idx", "prompts": "/nonexistent/p", "queries": "/nonexistent/q", "out": "/nonexistent/o"});
    let (_, job) = post_json(&c, format!("{base}/v1/jobs"), json!({"kind": "retrieve", "params": params})).await;
    let done = wait_for_job(&c, &base, job["job_id"].as_str().unwrap()).await;
    assert_eq!(done["state"], "failed");
    assert!(done["error"].as_str().is_some());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scan_then_assemble_with_exclusions() {
    let dir = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    // augmentation images: pool ids are "pool:<class>:<i>", stored as <class>/... on disk
    let aug = work.path().join("aug");
    let val = work.path().join("val");
    std::fs::create_dir_all(aug.join("pool:a")).unwrap();
    std::fs::create_dir_all(&val).unwrap();
    for i in 0..3u64 {
        std::fs::write(aug.join("pool:a").join(format!("{i:05}.png")), encode_png(&synthetic_photo(i))).unwrap();
    }
    std::fs::write(val.join("v0.png"), encode_png(&synthetic_photo(1))).unwrap();
    std::fs::write(val.join("v1.png"), encode_png(&synthetic_photo(50))).unwrap();

    seed_store(dir.path(), 0);
    let (base, c) = start(dir.path()).await;
    let (_, job) = post_json(
        &c,
        format!("{base}/v1/jobs"),
        json!({"kind": "dedup_scan", "params": {"left": aug, "right": val, "split": "test"}}),
    )
    .await;
    let done = wait_for_job(&c, &base, job["job_id"].as_str().unwrap()).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["result"]["pairs_added"], 1);
    let (_, pending) = get_json(&c, format!("{base}/v1/pairs")).await;
    let pair = &pending[0];
    assert_eq!(pair["left_id"], "pool:a/00001");
    assert_eq!(pair["distance"], 0);
    let key = pair["pair_key"].as_str().unwrap();
    post_json(&c, format!("{base}/v1/pairs/{key}/verdict"), json!({"verdict": "true_duplicate"})).await;

    let original = synthetic_manifest("train", Split::Train, Source::Original, &[("a".into(), 2)]);
    // pool ids are chosen to match the hashed file ids
    let mut pool = synthetic_manifest("pool", Split::Pool, Source::Retrieved, &[("a".into(), 3)]);
    for r in &mut pool.records {
        r.image_id = r.image_id.replacen("pool:a:", "pool:a/", 1);
    }
    original.save(work.path().join("train.jsonl")).unwrap();
    pool.save(work.path().join("pool.jsonl")).unwrap();
    let (_, job) = post_json(
        &c,
        format!("{base}/v1/jobs"),
        json!({"kind": "assemble_replicas", "params": {
            "original": work.path().join("train.jsonl"),
            "pool": work.path().join("pool.jsonl"),
            "replicas": 2,
            "seed": 4,
            "name": "exp",
        }}),
    )
    .await;
    let done = wait_for_job(&c, &base, job["job_id"].as_str().unwrap()).await;
    assert_eq!(done["state"], "done", "{done}");

    for r in 0..2 {
        let resp = c.get(format!("{base}/v1/datasets/exp-merged-{r}/manifest")).send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        let text = resp.text().await.unwrap();
        let m = DatasetManifest::read_from(text.as_bytes()).unwrap();
        assert!(m.records.iter().all(|rec| rec.image_id != "pool:a/00001"));
        let replica_text = c.get(format!("{base}/v1/datasets/exp-replica-{r}/manifest")).send().await.unwrap().text().await.unwrap();
        let replica = DatasetManifest::read_from(replica_text.as_bytes()).unwrap();
        let excluded = replica.records.iter().filter(|x| x.image_id == "pool:a/00001").count();
        assert_eq!(m.len(), 2 + replica.len() - excluded);
    }
    let (s, err) = get_json(&c, format!("{base}/v1/datasets/nope/manifest")).await;
    assert_eq!((s, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownDataset")));
    let (s, _) = get_json(&c, format!("{base}/v1/datasets/..%2Fjobs/manifest")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn images_are_served_from_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let img_dir = dir.path().join("images/n01");
    std::fs::create_dir_all(&img_dir).unwrap();
    let png = encode_png(&synthetic_photo(3));
    std::fs::write(img_dir.join("42.png"), &png).unwrap();
    std::fs::write(img_dir.join("43.png"), b"not an image").unwrap();
    let (base, c) = start(dir.path()).await;

    let resp = c.get(format!("{base}/v1/images/n01/42")).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    assert_eq!(resp.bytes().await.unwrap().as_ref(), png.as_slice());
    for missing in ["n01/43", "n01/44", "nope"] {
        let (s, err) = get_json(&c, format!("{base}/v1/images/{missing}")).await;
        assert_eq!((s, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownImage")), "{missing}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn interrupted_jobs_fail_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let stale = json!({"job_id": "j1", "kind": "download", "state": "running", "progress": 0.5, "params": {}, "idempotency_key": "x"});
    std::fs::write(dir.path().join("jobs.jsonl"), format!("{stale}\n")).unwrap();
    let (base, c) = start(dir.path()).await;
    let (_, job) = get_json(&c, format!("{base}/v1/jobs/j1")).await;
    assert_eq!(job["state"], "failed");
    // the key still maps to the old job: it is never executed twice
    let (s, again) = post_json(
        &c,
        format!("{base}/v1/jobs"),
        json!({"kind": "download", "params": {"manifest": "m", "out": "o"}, "idempotency_key": "x"}),
    )
    .await;
    assert_eq!((s, again["job_id"].as_str()), (StatusCode::OK, Some("j1")));
}
