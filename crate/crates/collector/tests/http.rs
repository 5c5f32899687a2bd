use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use oddity_collector::{router, Collector, CollectorConfig};
use oddity_core::corpus::{Corpus, QcPolicy, Stimulus};
use oddity_core::sampler::enumerate_all_triplets;
use serde_json::{json, Value};
use tower::ServiceExt;

const ADMIN: &str = "admin-secret-token";

fn config(dir: &Path, stimuli: usize, per_triplet: usize) -> CollectorConfig {
    let stim: Vec<Stimulus> = (0..stimuli)
        .map(|i| Stimulus { id: format!("s{i}"), source_ref: format!("s{i}.png"), attributes: None })
        .collect();
    let ids: Vec<String> = stim.iter().map(|s| s.id.clone()).collect();
    let mut c = CollectorConfig::new(dir.join("data"), stim, enumerate_all_triplets(&ids).unwrap(), ADMIN);
    c.judgments_per_triplet = per_triplet;
    c.seed = Some(7);
    c
}

struct Client {
    app: axum::Router,
}

impl Client {
    fn new(cfg: CollectorConfig) -> Client {
        Client { app: router(Arc::new(Collector::open(cfg).unwrap())) }
    }

    async fn call(&self, method: &str, uri: &str, headers: &[(&str, &str)], body: Option<Value>) -> (StatusCode, Value) {
        let mut b = Request::builder().method(method).uri(uri);
        for (k, v) in headers {
            b = b.header(*k, *v);
        }
        let req = match body {
            Some(v) => b.header("content-type", "application/json").body(Body::from(v.to_string())).unwrap(),
            None => b.body(Body::empty()).unwrap(),
        };
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
        (status, v)
    }

    async fn register(&self, nationality: &str) -> String {
        let body = json!({
            "demographics": {"nationality": nationality},
            "consent": {"collection": true, "usage": true, "publication": true}
        });
        let (s, v) = self.call("POST", "/api/annotators", &[], Some(body)).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        v["token"].as_str().unwrap().to_string()
    }

    async fn next(&self, token: &str) -> Value {
        let auth = format!("Bearer {token}");
        let (s, v) = self.call("GET", "/api/tasks/next?kind=three_afc", &[("authorization", &auth)], None).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        v
    }

    async fn judge(&self, token: &str, task_id: &str, choice: Value) -> (StatusCode, Value) {
        let auth = format!("Bearer {token}");
        let uri = format!("/api/tasks/{task_id}/judgment");
        self.call("POST", &uri, &[("authorization", &auth)], Some(json!({"choice": choice, "response_ms": 0}))).await
    }
}

#[tokio::test]
async fn registration_requires_all_three_consents() {
    let d = tempfile::tempdir().unwrap();
    let c = Client::new(config(d.path(), 5, 1));
    for consent in [
        json!({"collection": true, "usage": true, "publication": false}),
        json!({"collection": false, "usage": true, "publication": true}),
        json!({}),
    ] {
        let (s, v) = c.call("POST", "/api/annotators", &[], Some(json!({"consent": consent}))).await;
        assert_eq!(s, StatusCode::FORBIDDEN);
        assert_eq!(v["code"], "consent_required");
    }
    let (s, v) = c.call("GET", "/api/progress", &[], None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["annotators"], 0);
}

#[tokio::test]
async fn errors_share_one_body_shape() {
    let d = tempfile::tempdir().unwrap();
    let c = Client::new(config(d.path(), 5, 1));
    let (s, v) = c.call("GET", "/api/tasks/next", &[], None).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::UNAUTHORIZED, Some("unauthorized")));
    let (s, v) = c.call("POST", "/api/annotators", &[], Some(json!("not an object"))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid")));
    let (s, v) = c.call("GET", "/nope", &[], None).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let t = c.register("x").await;
    let auth = format!("Bearer {t}");
    let (s, v) = c.call("GET", "/api/tasks/next?kind=essay", &[("authorization", &auth)], None).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid")));
    let (s, _) = c.call("GET", "/img/s0", &[], None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = c.call("GET", "/api/grids/0", &[], None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn pool_exhaustion_and_no_repeats() {
    let d = tempfile::tempdir().unwrap();
    // 4 stimuli give 4 triplets; two judgments each
    let c = Client::new(config(d.path(), 4, 2));
    let a = c.register("x").await;
    let b = c.register("y").await;
    let z = c.register("z").await;
    let mut seen_a = std::collections::HashSet::new();
    for _ in 0..4 {
        let t = c.next(&a).await;
        assert_eq!(t["status"], "assigned");
        assert!(seen_a.insert(t["task"]["triplet_index"].as_u64().unwrap()));
    }
    assert_eq!(c.next(&a).await["status"], "complete");
    for _ in 0..4 {
        assert_eq!(c.next(&b).await["status"], "assigned");
    }
    // every triplet has its two servings
    assert_eq!(c.next(&z).await["status"], "complete");
}

#[tokio::test]
async fn choices_map_through_the_display_permutation() {
    let d = tempfile::tempdir().unwrap();
    let c = Client::new(config(d.path(), 5, 1));
    let a = c.register("x").await;
    let b = c.register("y").await;
    let t = c.next(&a).await;
    let id = t["task"]["task_id"].as_str().unwrap().to_string();

    let (s, v) = c.judge(&a, &id, json!(3)).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid")));
    let (s, _) = c.judge(&b, &id, json!(0)).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, _) = c.judge(&a, &id, json!(2)).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = c.judge(&a, &id, json!(2)).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::CONFLICT, Some("conflict")));

    let (_, summary) =
        c.call("POST", "/api/admin/export", &[("x-admin-token", ADMIN)], Some(json!({"qc": false}))).await;
    let corpus = Corpus::load_dir(Path::new(summary["directory"].as_str().unwrap())).unwrap();
    let j = &corpus.judgments[0];
    assert_eq!(j.triplet[j.odd_one_out as usize], t["task"]["display"][2].as_str().unwrap());
    assert_eq!(j.chosen_slot(), 2);
}

#[tokio::test]
async fn acknowledged_writes_survive_a_restart() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), 5, 1);
    let token;
    {
        let c = Client::new(cfg.clone());
        token = c.register("x").await;
        for choice in [json!(0), json!(1), Value::Null] {
            let t = c.next(&token).await;
            let (s, _) = c.judge(&token, t["task"]["task_id"].as_str().unwrap(), choice).await;
            assert_eq!(s, StatusCode::OK);
        }
    }
    let c = Client::new(cfg);
    let auth = format!("Bearer {token}");
    let (_, p) = c.call("GET", "/api/progress", &[("authorization", &auth)], None).await;
    assert_eq!(p["judgments"], 2);
    assert_eq!(p["empty_submissions"], 1);
    assert_eq!(p["session"]["tasks_completed"], 3);
}

#[tokio::test]
async fn export_requires_admin_and_is_idempotent() {
    let d = tempfile::tempdir().unwrap();
    let c = Client::new(config(d.path(), 5, 1));
    let a = c.register("x").await;
    for _ in 0..4 {
        let t = c.next(&a).await;
        c.judge(&a, t["task"]["task_id"].as_str().unwrap(), json!(1)).await;
    }
    let (s, v) = c.call("POST", "/api/admin/export", &[], Some(json!({}))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::FORBIDDEN, Some("admin_required")));
    let (s, _) = c.call("POST", "/api/admin/export", &[("x-admin-token", "wrong-token")], Some(json!({}))).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, _) =
        c.call("POST", "/api/admin/export", &[("x-admin-token", ADMIN)], Some(json!({"name": "../escape"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let read_all = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let (_, first) = c.call("POST", "/api/admin/export", &[("x-admin-token", ADMIN)], Some(json!({"name": "e1"}))).await;
    let (_, second) = c.call("POST", "/api/admin/export", &[("x-admin-token", ADMIN)], Some(json!({"name": "e2"}))).await;
    let one = read_all(Path::new(first["directory"].as_str().unwrap()));
    assert_eq!(one, read_all(Path::new(second["directory"].as_str().unwrap())));
    assert!(one.iter().any(|(n, _)| n == "judgments.jsonl"));
    let corpus = Corpus::load_dir(Path::new(first["directory"].as_str().unwrap())).unwrap();
    assert_eq!(corpus.judgments.len(), 4);
    assert_eq!(corpus.annotators[0].nationality.as_deref(), Some("x"));
}

#[tokio::test]
async fn qc_export_drops_a_position_spammer() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = config(d.path(), 7, 2);
    cfg.qc_policies = vec![QcPolicy::deterministic("position", 0.5, 10)];
    let c = Client::new(cfg);
    let spammer = c.register("x").await;
    let honest = c.register("y").await;
    for (i, who) in [&spammer, &honest].into_iter().enumerate() {
        for k in 0..20 {
            let t = c.next(who).await;
            // the spammer always clicks the left slot; the honest one varies
            let choice = if i == 0 { 0 } else { k % 3 };
            c.judge(who, t["task"]["task_id"].as_str().unwrap(), json!(choice)).await;
        }
    }
    let (s, v) =
        c.call("POST", "/api/admin/export", &[("x-admin-token", ADMIN)], Some(json!({"qc": true, "name": "qc"}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["judgments"], 20);
    assert_eq!(v["exclusions"]["excluded_annotators"].as_array().unwrap().len(), 1);
    let dir = Path::new(v["directory"].as_str().unwrap());
    assert!(dir.join("exclusions.json").exists());
    let corpus = Corpus::load_dir(dir).unwrap();
    assert!(corpus.judgments.iter().all(|j| j.annotator_id != v["exclusions"]["excluded_annotators"][0]));
}

#[tokio::test]
async fn images_are_served_from_inside_the_image_directory() {
    let d = tempfile::tempdir().unwrap();
    let img = d.path().join("img");
    std::fs::create_dir_all(&img).unwrap();
    std::fs::write(img.join("s0.png"), b"\x89PNG").unwrap();
    let mut cfg = config(d.path(), 5, 1);
    cfg.stimuli[1].source_ref = "../secret.png".into();
    cfg.image_dir = Some(img);
    let c = Client::new(cfg);
    let req = Request::builder().uri("/img/s0").body(Body::empty()).unwrap();
    let resp = c.app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let (s, _) = c.call("GET", "/img/s1", &[], None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, _) = c.call("GET", "/img/unknown", &[], None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn empty_log_exports_empty_but_valid_files() {
    let d = tempfile::tempdir().unwrap();
    let c = Client::new(config(d.path(), 5, 1));
    for qc in [false, true] {
        let (s, v) =
            c.call("POST", "/api/admin/export", &[("x-admin-token", ADMIN)], Some(json!({"qc": qc}))).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        let dir = Path::new(v["directory"].as_str().unwrap());
        for f in ["judgments.jsonl", "ratings.jsonl", "labels.jsonl", "annotators.jsonl", "stimuli.jsonl"] {
            assert!(dir.join(f).exists(), "{f}");
        }
        let corpus = Corpus::load_dir(dir).unwrap();
        assert!(corpus.judgments.is_empty() && corpus.annotators.is_empty());
        assert_eq!(corpus.stimuli.len(), 5);
        assert_eq!(dir.join("exclusions.json").exists(), qc);
    }
}

#[test]
fn high_target_triplets_reach_distinct_annotators() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = config(d.path(), 3, 25);
    cfg.snapshot_every = 0;
    let c = Collector::open(cfg).unwrap();
    let mut who = std::collections::HashSet::new();
    loop {
        let reg = c.register(Default::default(), consent()).unwrap();
        match c.next_task(Some(&reg.token), oddity_collector::TaskKind::ThreeAfc).unwrap() {
            oddity_collector::NextTask::Assigned { task } => assert!(who.insert(task.annotator_id)),
            oddity_collector::NextTask::Complete { .. } => break,
        }
        // one triplet only: a second request from the same annotator is complete
        assert!(matches!(
            c.next_task(Some(&reg.token), oddity_collector::TaskKind::ThreeAfc).unwrap(),
            oddity_collector::NextTask::Complete { .. }
        ));
    }
    assert_eq!(who.len(), 25);
}

fn consent() -> oddity_collector::Consent {
    oddity_collector::Consent { collection: true, usage: true, publication: true }
}

#[test]
fn concurrent_requests_never_over_assign() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = config(d.path(), 6, 3);
    cfg.snapshot_every = 7;
    let c = Arc::new(Collector::open(cfg.clone()).unwrap());
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let c = Arc::clone(&c);
            std::thread::spawn(move || {
                let reg = c.register(Default::default(), consent()).unwrap();
                let mut n = 0;
                while let oddity_collector::NextTask::Assigned { task } =
                    c.next_task(Some(&reg.token), oddity_collector::TaskKind::ThreeAfc).unwrap()
                {
                    c.submit_judgment(Some(&reg.token), &task.task_id, Some(0), None).unwrap();
                    n += 1;
                }
                n
            })
        })
        .collect();
    let total: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
    // C(6,3) = 20 triplets, 3 judgments each
    assert_eq!(total, 60);
    let corpus = c.corpus();
    let mut per = std::collections::HashMap::new();
    let mut pairs = std::collections::HashSet::new();
    for j in &corpus.judgments {
        *per.entry(j.triplet.clone()).or_insert(0) += 1;
        assert!(pairs.insert((j.annotator_id.clone(), j.triplet.clone())));
    }
    assert!(per.values().all(|&n| n == 3));
    drop(c);
    assert_eq!(Collector::open(cfg).unwrap().corpus(), corpus);
}

#[tokio::test]
async fn session_round_trip_with_grids_and_a_fast_spammer() {
    use oddity_core::embedder::ModelParams;
    use oddity_core::insight::build_grid;

    let d = tempfile::tempdir().unwrap();
    let mut cfg = config(d.path(), 3, 1);
    let n = 120;
    cfg.stimuli = (0..n)
        .map(|i| Stimulus { id: format!("s{i}"), source_ref: format!("s{i}.png"), attributes: None })
        .collect();
    let ids: Vec<String> = cfg.stimuli.iter().map(|s| s.id.clone()).collect();
    cfg.triplets = oddity_core::sampler::sample_triplets(&ids, 300, 3, &Default::default()).unwrap();
    let w = ndarray::Array2::from_shape_fn((n, 2), |(i, k)| ((i * (7 + 6 * k)) % 97) as f64 / 97.0 + 0.01);
    let params = ModelParams::unconditional(ids.clone(), w).unwrap();
    cfg.grids = vec![build_grid(&params, 0, None).unwrap(), build_grid(&params, 1, None).unwrap()];
    cfg.probes = vec!["s5".into()];
    let c = Client::new(cfg);

    let honest = c.register("x").await;
    let auth = format!("Bearer {honest}");
    let h = [("authorization", auth.as_str())];
    let mut shown = Vec::new();
    for k in 0..5u8 {
        let t = c.next(&honest).await;
        let id = t["task"]["task_id"].as_str().unwrap().to_string();
        // wait long enough to report a plausible client-side time
        tokio::time::sleep(std::time::Duration::from_millis(3)).await;
        let slot = k % 3;
        let resp = json!({"choice": slot, "response_ms": 2});
        let (s, v) = c.call("POST", &format!("/api/tasks/{id}/judgment"), &h, Some(resp)).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        shown.push((t["task"]["display"][slot as usize].as_str().unwrap().to_string(), t["task"]["issued_at_ms"].clone()));
    }
    for pct in [75, 20] {
        let (_, t) = c.call("GET", "/api/tasks/next?kind=grid_rating", &h, None).await;
        assert_eq!(t["status"], "assigned", "{t}");
        let dim = t["task"]["dimension"].as_u64().unwrap();
        let (s, g) = c.call("GET", &format!("/api/grids/{dim}"), &[], None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(g["columns"].as_array().unwrap().len(), 100);
        let uri = format!("/api/tasks/{}/rating", t["task"]["task_id"].as_str().unwrap());
        let (s, v) = c.call("POST", &uri, &h, Some(json!({"column_percentile": pct}))).await;
        assert_eq!(s, StatusCode::OK, "{v}");
    }
    let (_, t) = c.call("GET", "/api/tasks/next?kind=grid_label", &h, None).await;
    let uri = format!("/api/tasks/{}/labels", t["task"]["task_id"].as_str().unwrap());
    let (s, _) = c.call("POST", &uri, &h, Some(json!({"labels": []}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = c.call("POST", &uri, &h, Some(json!({"labels": ["smiling", "older"]}))).await;
    assert_eq!(s, StatusCode::OK);

    // response_ms beyond the server-observed time is refused
    let t = c.next(&honest).await;
    let id = t["task"]["task_id"].as_str().unwrap();
    let (s, _) = c.call("POST", &format!("/api/tasks/{id}/judgment"), &h, Some(json!({"choice": 0, "response_ms": 60000}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let spammer = c.register("y").await;
    for _ in 0..120 {
        let t = c.next(&spammer).await;
        let (s, _) = c.judge(&spammer, t["task"]["task_id"].as_str().unwrap(), json!(1)).await;
        assert_eq!(s, StatusCode::OK);
    }

    let (_, raw) = c.call("POST", "/api/admin/export", &[("x-admin-token", ADMIN)], Some(json!({"name": "raw"}))).await;
    let corpus = Corpus::load_dir(Path::new(raw["directory"].as_str().unwrap())).unwrap();
    let mine: Vec<_> = corpus.judgments.iter().filter(|j| j.annotator_id == corpus.annotators[0].id).collect();
    assert_eq!(mine.len(), 5);
    for (j, (stim, _)) in mine.iter().zip(&shown) {
        assert_eq!(&j.triplet[j.odd_one_out as usize], stim);
        assert_eq!(j.response_ms, Some(2));
    }
    assert_eq!(corpus.ratings.iter().map(|r| r.column_percentile).collect::<Vec<_>>(), vec![75, 20]);
    assert_eq!(corpus.labels.len(), 1);
    assert_eq!(corpus.judgments.len(), 125);

    let (_, qc) = c
        .call("POST", "/api/admin/export", &[("x-admin-token", ADMIN)], Some(json!({"qc": true, "name": "qc"})))
        .await;
    let fast1 = &qc["exclusions"]["per_policy"][0];
    assert_eq!(fast1["policy"], "fast_1");
    assert_eq!(fast1["annotators"].as_array().unwrap().len(), 1);
    let kept = Corpus::load_dir(Path::new(qc["directory"].as_str().unwrap())).unwrap();
    assert_eq!(kept.judgments.len(), 5);
    assert_eq!(kept.ratings.len(), 2);
    assert_eq!(kept.annotators.len(), 2);
}
