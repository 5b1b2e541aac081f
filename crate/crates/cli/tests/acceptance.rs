//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use image::{DynamicImage, Rgb, RgbImage};
use nnaug_core::cluster::{kmeans, KMeansConfig, K_PRESETS};
use nnaug_core::dataset::{exclude_insufficient_classes, make_replicas, merge, pool_target, stratified_subsample, PoolMode, Source, Split};
use nnaug_core::dedup::{
    estimate_true_duplicates, hamming, leakage_report, phash64, render_percent, scan, CandidatePair, HashedImage, LeakageReport, PHash,
    SplitSpec, Verdict,
};
use nnaug_core::index::EmbeddingIndex;
use nnaug_core::prompts::{simple_prompt, ClassSynset, ClipTemplates};
use nnaug_core::retrieval::{filter_record, plan_fetch_sizes, retrieve_class, DedupChecker, FilterDecision, RejectReason, RetrievalPolicy, RetrievalStatus};
use nnaug_service::{SplitsFile, VerdictStore};
use nnaug_testkit::{
    acceptable_within_cap, blobs, brute_force_pairs, class_sizes, exhaustive_knn, jpeg_robustness, programmed_catalog, random_catalog,
    random_unit, rng, same_partition, simulate_retrieval, synthetic_manifest,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn within(limit: Duration, start: Instant) -> Result<String, String> {
    let took = start.elapsed();
    check(took <= limit, || format!("took {took:.1?}, limit {limit:?}"))?;
    Ok(format!("{took:.1?}"))
}

fn knn_oracle() -> Outcome {
    let start = Instant::now();
    let dims = [8usize, 64, 512];
    let mut queries = 0;
    for c in 0..20u64 {
        let dim = dims[c as usize % 3];
        let n = [10_000, 6_000, 2_500][c as usize % 3] - (c as usize * 37);
        let records = random_catalog(c, n, dim);
        let index = EmbeddingIndex::build(records.clone()).map_err(|e| e.to_string())?;
        let mut r = rng(c + 100);
        for qi in 0..4 {
            // half the queries hit catalog vectors, which are duplicated, to force ties
            let q = if qi % 2 == 0 { random_unit(&mut r, dim) } else { records[r.gen_range(0..n)].embedding.clone() };
            let k = [1, 10, 100, 1000][qi];
            let got = index.query_knn(&q, k).map_err(|e| e.to_string())?;
            check(got == exhaustive_knn(&records, &q, k), || format!("catalog {c} (d={dim}) query {qi} differs"))?;
            queries += 1;
        }
    }
    Ok(format!("20 catalogs, {queries} queries, {}", within(Duration::from_secs(60), start)?))
}

fn fetch_schedule() -> Outcome {
    let sizes = plan_fetch_sizes(&RetrievalPolicy::default());
    check(sizes == [182, 364, 728, 1456, 1820], || format!("got {sizes:?}"))?;
    check(sizes[0] as f64 == (1.4f64 * 130.0).ceil(), || "first size".into())?;
    Ok(format!("{sizes:?}"))
}

fn filter_boundaries() -> Outcome {
    let policy = RetrievalPolicy::default();
    let mut rec = random_catalog(1, 1, 4).remove(0);
    rec.nsfw = false;
    let mut decide = |score: f32, nsfw: bool| {
        rec.aesthetics_score = score;
        rec.nsfw = nsfw;
        filter_record(&rec, &policy)
    };
    check(decide(4.99, false) == FilterDecision::Reject(RejectReason::LowAesthetics), || "4.99 not rejected".into())?;
    check(decide(5.00, false) == FilterDecision::Accept, || "5.00 not accepted".into())?;
    for score in [0.0, 5.0, 9.9] {
        check(decide(score, true) == FilterDecision::Reject(RejectReason::Nsfw), || format!("nsfw at {score} not rejected"))?;
    }
    Ok("4.99 rejected, 5.00 accepted, NSFW rejected".into())
}

fn retrieval_simulation() -> Outcome {
    let start = Instant::now();
    let policy = RetrievalPolicy::default();
    let schedule = plan_fetch_sizes(&policy);
    let (records, classes) = programmed_catalog(2024, 100, 2000, 16, (0.02, 0.2));
    let index = EmbeddingIndex::build(records.clone()).map_err(|e| e.to_string())?;
    let (mut complete, mut insufficient) = (0, 0);
    for class in &classes {
        let got = retrieve_class(&index, &class.wnid, &class.query, &policy, &DedupChecker::url_only()).map_err(|e| e.to_string())?;
        let sim = simulate_retrieval(&records, &class.query, &schedule, 130, 5.0);
        let ids: Vec<u64> = got.accepted.iter().map(|a| a.record_id).collect();
        check(ids == sim.accepted, || format!("{}: accepted set differs from simulation", class.wnid))?;
        let enough = acceptable_within_cap(&records, &class.query, 1820, 5.0) >= 130;
        match (enough, got.status) {
            (true, RetrievalStatus::Complete) if got.accepted.len() == 130 => complete += 1,
            (false, RetrievalStatus::Insufficient) => insufficient += 1,
            _ => return Err(format!("{}: status {:?} with {} accepted", class.wnid, got.status, got.accepted.len())),
        }
    }
    check(complete > 0 && insufficient > 0, || "rates do not straddle the target".into())?;
    Ok(format!("{complete} complete, {insufficient} insufficient, {}", within(Duration::from_secs(300), start)?))
}

fn duplicate_estimator() -> Outcome {
    let est = estimate_true_duplicates(2377, 500, 4).map_err(|e| e.to_string())?;
    check(est == 19, || format!("estimate {est}"))?;
    let pct = render_percent(11.0 / 126_861.0);
    check(pct == "0.009%", || format!("rendered {pct}"))?;
    Ok(format!("estimate {est}, leakage {pct}"))
}

fn hash_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng(7);
    for _ in 0..100_000 {
        let (a, b, c) = (PHash(r.gen()), PHash(r.gen()), PHash(r.gen()));
        check(hamming(a, a) == 0, || "identity".into())?;
        check(hamming(a, b) == hamming(b, a), || "symmetry".into())?;
        check(hamming(a, c) <= hamming(a, b) + hamming(b, c), || "triangle inequality".into())?;
        check(hamming(a, b) == (a.0 ^ b.0).count_ones(), || "popcount".into())?;
    }
    check(hamming(PHash(0), PHash(u64::MAX)) == 64, || "max distance".into())?;

    let base = HashedImage::new("l", PHash(0));
    let at = |d: u32| HashedImage::new(format!("r{d}"), PHash(if d == 0 { 0 } else { u64::MAX >> (64 - d) }));
    let pairs = scan(&[base], &[at(9), at(10), at(11)], 10, "test").map_err(|e| e.to_string())?;
    check(pairs.len() == 1 && pairs[0].distance == 9, || format!("radius boundary: {pairs:?}"))?;

    let left = nnaug_testkit::clustered_hashes(1, 10_000, "a");
    let right = nnaug_testkit::clustered_hashes(2, 10_000, "b");
    let got = scan(&left, &right, 10, "test").map_err(|e| e.to_string())?;
    let mut triples: Vec<_> = got.iter().map(|p| (p.left_id.clone(), p.right_id.clone(), p.distance)).collect();
    triples.sort();
    check(triples == brute_force_pairs(&left, &right, 10), || "scan differs from brute force".into())?;

    let uniform = DynamicImage::ImageRgb8(RgbImage::from_pixel(300, 200, Rgb([120, 40, 200])));
    let h = phash64(&uniform).map_err(|e| e.to_string())?;
    check(h == PHash(0), || format!("uniform image hashed to {h}"))?;

    let (ok, total) = jpeg_robustness(200, 90, 10);
    check(ok * 100 >= total * 95, || format!("JPEG q90 robustness {ok}/{total}"))?;
    Ok(format!(
        "{} pairs on 10^4 x 10^4, JPEG q90 {ok}/{total}, {}",
        got.len(),
        within(Duration::from_secs(300), start)?
    ))
}

fn replica_protocol() -> Outcome {
    let sizes = class_sizes(5, 40, 20, 60);
    let train = synthetic_manifest("train", Split::Train, Source::Original, &sizes);
    let targets = train.class_counts();
    let pool_sizes: Vec<(String, usize)> = pool_target(&targets, 3, PoolMode::PerClass).map_err(|e| e.to_string())?.into_iter().collect();
    let pool = synthetic_manifest("pool", Split::Pool, Source::Retrieved, &pool_sizes);
    let replicas = make_replicas(&pool, &targets, 5, 9).map_err(|e| e.to_string())?;
    check(replicas.len() == 5, || "replica count".into())?;
    let mut merged = Vec::new();
    for rep in &replicas {
        check(rep.class_counts() == targets, || format!("{} misses targets", rep.name))?;
        let m = merge(&train, rep, &HashSet::new()).map_err(|e| e.to_string())?;
        check(m.len() == 2 * train.len(), || format!("merge of {} has {} records", rep.name, m.len()))?;
        merged.push(m);
    }
    let statuses: HashMap<String, RetrievalStatus> = sizes
        .iter()
        .enumerate()
        .map(|(i, (c, _))| (c.clone(), if i % 4 == 1 { RetrievalStatus::Insufficient } else { RetrievalStatus::Complete }))
        .collect();
    let mut all = vec![train.clone(), pool.clone()];
    all.extend(replicas);
    all.extend(merged);
    let (kept, log) = exclude_insufficient_classes(&all, &statuses);
    check(log.classes.len() == 10, || format!("{} classes excluded", log.classes.len()))?;
    let dropped: HashSet<&str> = log.classes.iter().map(|c| c.class_wnid.as_str()).collect();
    for m in &kept {
        check(m.records.iter().all(|r| !dropped.contains(r.class_wnid.as_str())), || format!("{} keeps an excluded class", m.name))?;
    }
    Ok(format!("5 replicas exact, merges doubled, 10 classes absent from {} manifests", kept.len()))
}

fn subsample_bounds() -> Outcome {
    let sizes = class_sizes(3, 1000, 740, 1300);
    let full = synthetic_manifest("train", Split::Train, Source::Original, &sizes);
    let sub = stratified_subsample(&full, 0.1, 0).map_err(|e| e.to_string())?;
    let counts = sub.class_counts();
    for (c, n) in &sizes {
        let want = (*n as f64 * 0.1).round() as usize;
        check(counts[c] == want, || format!("{c}: {} of {n}, want {want}", counts[c]))?;
    }
    let (lo, hi) = (*counts.values().min().unwrap(), *counts.values().max().unwrap());
    check(lo == 74 && hi == 130, || format!("range {lo}..{hi}"))?;
    Ok(format!("{} images, per class {lo}..={hi}", sub.len()))
}

fn kmeans_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng(11);
    let pts: Vec<Vec<f64>> = (0..400).map(|_| (0..16).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
    let m = kmeans(&pts, 1, 0, KMeansConfig::default()).map_err(|e| e.to_string())?;
    for j in 0..16 {
        let mean = pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64;
        check((m.centroids[0][j] - mean).abs() <= 1e-6, || format!("k=1 centroid off at {j}"))?;
    }
    for run in 0..100u64 {
        let mut r = rng(run);
        let n = r.gen_range(30..400);
        let dim = r.gen_range(2..32);
        let pts: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let k = K_PRESETS[run as usize % 4].max(r.gen_range(1..=15));
        let m = kmeans(&pts, k, run, KMeansConfig::default()).map_err(|e| e.to_string())?;
        check(m.inertia_history.windows(2).all(|w| w[1] <= w[0]), || format!("run {run}: inertia rose"))?;
    }
    let centers: Vec<Vec<f64>> = (0..5).map(|i| (0..8).map(|j| if j == i { 50.0 } else { 0.0 }).collect()).collect();
    for seed in 0..20 {
        let (pts, truth) = blobs(seed, &centers, 50, 1.0);
        let m = kmeans(&pts, 5, seed, KMeansConfig::default()).map_err(|e| e.to_string())?;
        check(same_partition(&m.assignments, &truth), || format!("blob seed {seed} not recovered"))?;
    }
    Ok(format!("k=1 mean, 100 monotone runs, 20/20 blob sets, {}", within(Duration::from_secs(120), start)?))
}

struct Server {
    child: Child,
    base: String,
}

fn start_server(store: &Path) -> Result<Server, String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_nnaug"))
        .args(["serve", "--addr", "127.0.0.1:0", "--store"])
        .arg(store)
        .env("NNAUG_SNAPSHOT_EVERY", "97")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
    let addr = line.trim().strip_prefix("listening on ").ok_or_else(|| format!("unexpected banner {line:?}"))?;
    Ok(Server {
        child,
        base: format!("http://{addr}"),
    })
}

fn verdict_plan() -> (Vec<CandidatePair>, Vec<(String, Verdict)>) {
    let pairs: Vec<CandidatePair> = (0..2377u64)
        .map(|i| {
            let l = HashedImage::new(format!("aug/{i:05}"), PHash(i * 0x9E37_79B9));
            let r = HashedImage::new(format!("test/{i:05}"), PHash((i * 0x9E37_79B9) ^ 0x5));
            CandidatePair::new("test", &l, &r, 2)
        })
        .collect();
    let plan = pairs
        .iter()
        .take(1000)
        .enumerate()
        .map(|(i, p)| (p.pair_key.clone(), if i % 250 == 3 { Verdict::TrueDuplicate } else { Verdict::NotDuplicate }))
        .collect();
    (pairs, plan)
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::TrueDuplicate => "true_duplicate",
        Verdict::NotDuplicate => "not_duplicate",
        Verdict::Pending => "pending",
    }
}

fn post_verdict(client: &reqwest::blocking::Client, base: &str, key: &str, v: Verdict) -> Result<(), String> {
    let resp = client
        .post(format!("{base}/v1/pairs/{key}/verdict"))
        .json(&serde_json::json!({"verdict": verdict_name(v), "reviewer": "auditor"}))
        .send()
        .map_err(|e| e.to_string())?;
    check(resp.status().is_success(), || format!("HTTP {}", resp.status()))
}

fn service_durability() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (pairs, plan) = verdict_plan();
    let splits = SplitsFile {
        augmentation_size: Some(126_861),
        splits: vec![SplitSpec {
            name: "test".into(),
            size: 50_000,
            exclude_confirmed: true,
        }],
    };
    {
        let mut store = VerdictStore::open(dir.path(), 97).map_err(|e| e.to_string())?;
        store.add_pairs(pairs.clone()).map_err(|e| e.to_string())?;
        store.set_splits(splits.clone()).map_err(|e| e.to_string())?;
    }
    let expected: LeakageReport = {
        let verdicts: HashMap<&str, Verdict> = plan.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let reviewed: Vec<CandidatePair> = pairs
            .iter()
            .cloned()
            .map(|mut p| {
                p.verdict = verdicts.get(p.pair_key.as_str()).copied().unwrap_or(Verdict::Pending);
                p
            })
            .collect();
        leakage_report(&reviewed, &splits.splits, splits.augmentation_size).map_err(|e| e.to_string())?
    };

    let client = reqwest::blocking::Client::builder().timeout(Duration::from_secs(10)).build().map_err(|e| e.to_string())?;
    // first run: a reviewer thread posts while the server is killed under it
    let mut first = start_server(dir.path())?;
    let acked = Arc::new(AtomicUsize::new(0));
    let reviewer = {
        let acked = acked.clone();
        let plan = plan.clone();
        let client = client.clone();
        let base = first.base.clone();
        std::thread::spawn(move || {
            for (key, v) in &plan {
                if post_verdict(&client, &base, key, *v).is_err() {
                    break;
                }
                acked.fetch_add(1, Ordering::SeqCst);
            }
        })
    };
    while acked.load(Ordering::SeqCst) < 487 {
        std::thread::sleep(Duration::from_millis(1));
    }
    first.child.kill().map_err(|e| e.to_string())?;
    first.child.wait().map_err(|e| e.to_string())?;
    reviewer.join().map_err(|_| "reviewer thread panicked".to_string())?;
    let acked = acked.load(Ordering::SeqCst);
    check(acked < plan.len(), || "server was not killed mid-run".into())?;

    // second run: every acknowledged verdict must still be there
    let mut second = start_server(dir.path())?;
    let pairs_now: Vec<CandidatePair> = client
        .get(format!("{}/v1/pairs?status=pending&limit=10000", second.base))
        .send()
        .and_then(|r| r.json())
        .map_err(|e| e.to_string())?;
    let still_pending: HashSet<String> = pairs_now.into_iter().map(|p| p.pair_key).collect();
    let lost = plan[..acked].iter().filter(|(k, _)| still_pending.contains(k)).count();
    check(lost == 0, || format!("{lost} acknowledged verdicts lost"))?;
    for (key, v) in &plan[acked..] {
        post_verdict(&client, &second.base, key, *v)?;
    }
    let fetch_report = |base: &str| -> Result<LeakageReport, String> {
        client
            .get(format!("{base}/v1/reports/leakage"))
            .send()
            .and_then(|r| r.json())
            .map_err(|e| e.to_string())
    };
    let after = fetch_report(&second.base)?;
    second.child.kill().map_err(|e| e.to_string())?;
    second.child.wait().map_err(|e| e.to_string())?;

    let mut third = start_server(dir.path())?;
    let replayed = fetch_report(&third.base)?;
    third.child.kill().map_err(|e| e.to_string())?;
    third.child.wait().map_err(|e| e.to_string())?;
    check(after == expected, || format!("report after resume differs: {after:?}"))?;
    check(replayed == expected, || "replayed report differs".into())?;
    let s = &replayed.splits[0];
    Ok(format!(
        "killed after {acked} acks, 0 lost, reviewed {} confirmed {} estimated {:?}, {}",
        s.reviewed,
        s.confirmed,
        s.estimated,
        within(Duration::from_secs(120), start)?
    ))
}

fn prompt_goldens() -> Outcome {
    let shark = ClassSynset::new("n01494475", &["tiger shark", "Galeocerdo Cuvieri"]);
    let desktop = ClassSynset::new("n03180011", &["desktop computer"]);
    let papillon = ClassSynset::new("n02086910", &["papillon"]);
    let a = simple_prompt(&shark, false).map_err(|e| e.to_string())?.text;
    let b = simple_prompt(&desktop, true).map_err(|e| e.to_string())?.text;
    let templates = ClipTemplates::bundled();
    let id = templates.iter().position(|t| t == "a photo of many {}.").ok_or("template missing")? as u32;
    let c = templates.render(&papillon, id).map_err(|e| e.to_string())?.text;
    check(a == "A photo of tiger shark, Galeocerdo Cuvieri.", || format!("got {a:?}"))?;
    check(b == "A photo of desktopcomputer.", || format!("got {b:?}"))?;
    check(c == "a photo of many papillon.", || format!("got {c:?}"))?;
    Ok("3 strings byte-exact".into())
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("k-NN oracle equivalence", knn_oracle),
        ("over-fetch schedule", fetch_schedule),
        ("filter boundaries", filter_boundaries),
        ("retrieval simulation", retrieval_simulation),
        ("duplicate estimator", duplicate_estimator),
        ("hash suite", hash_suite),
        ("replica protocol", replica_protocol),
        ("subsample bounds", subsample_bounds),
        ("k-means", kmeans_suite),
        ("service durability", service_durability),
        ("prompt golden strings", prompt_goldens),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match std::panic::catch_unwind(run) {
            Ok(Ok(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
