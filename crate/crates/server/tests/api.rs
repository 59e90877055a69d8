use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use relevis_core::dataset::save_cohort;
use relevis_core::lrp::{relevance_map, RuleConfig};
use relevis_core::nn::{build_model, save_model};
use relevis_core::{generate_cohort, Dims, GroupCounts, PhantomSpec, Volume3D};
use relevis_server::{
    router, Catalog, CatalogConfig, ModelConfig, SLICE_HEIGHT_HEADER, SLICE_WIDTH_HEADER,
};
use serde_json::Value;
use tower::ServiceExt;

const DIMS: Dims = Dims::new(16, 16, 20);

fn spec() -> PhantomSpec {
    PhantomSpec {
        dims: DIMS,
        ..Default::default()
    }
}

/// Dataset plus two untrained models written under `dir`; returns the
/// catalog file path.
fn write_catalog(dir: &Path) -> std::path::PathBuf {
    let cohort = generate_cohort(&spec(), GroupCounts::new(3, 2, 2), 1).unwrap();
    save_cohort(&cohort, dir.join("data")).unwrap();
    for (id, seed) in [("m1", 1), ("m2", 2)] {
        save_model(
            &build_model(DIMS, seed).unwrap(),
            dir.join(format!("{id}.bin")),
        )
        .unwrap();
    }
    let cfg = CatalogConfig {
        dataset: "data".into(),
        models: ["m1", "m2"]
            .iter()
            .map(|id| ModelConfig {
                id: id.to_string(),
                path: format!("{id}.bin").into(),
                residualizer: None,
            })
            .collect(),
        rule: RuleConfig::default(),
        cache_capacity: 4,
        static_dir: None,
    };
    let path = dir.join("catalog.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    catalog: Catalog,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let path = write_catalog(dir.path());
    Fixture {
        app: router(Catalog::load(&path).unwrap()),
        catalog: Catalog::load(&path).unwrap(),
        _dir: dir,
    }
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }

    fn floats(&self) -> Vec<f32> {
        self.body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect()
    }

    fn header(&self, name: &str) -> usize {
        self.headers[name].to_str().unwrap().parse().unwrap()
    }
}

async fn call(app: &Router, req: Request<Body>) -> Reply {
    let r = app.clone().oneshot(req).await.unwrap();
    let status = r.status();
    let headers = r.headers().clone();
    let body = r.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        headers,
        body,
    }
}

async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}

fn subject(f: &Fixture, i: usize) -> (String, &Volume3D) {
    let (r, v) = &f.catalog.cohort.subjects[i];
    (r.id.clone(), v)
}

#[tokio::test]
async fn participants_and_models() {
    let f = fixture();
    let r = get(&f.app, "/api/participants").await;
    assert_eq!(r.status, StatusCode::OK);
    let list = r.json();
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 7);
    for (p, (rec, v)) in list.iter().zip(&f.catalog.cohort.subjects) {
        assert_eq!(p["id"], rec.id.as_str());
        assert_eq!(p["group"], rec.group.as_str());
        assert_eq!(p["age"], rec.age);
        let want = f.catalog.models[0].model.predict(v).unwrap().p_disease();
        assert_eq!(p["p_disease"].as_f64().unwrap(), want);
    }
    let other = get(&f.app, "/api/participants?model=m2").await.json();
    assert_ne!(other[0]["p_disease"], list[0]["p_disease"]);

    let models = get(&f.app, "/api/models").await.json();
    assert_eq!(models[1]["id"], "m2");
    assert_eq!(
        models[0]["parameter_count"],
        f.catalog.models[0].model.parameter_count()
    );
    assert_eq!(models[0]["residualized"], false);
}

#[tokio::test]
async fn prediction_matches_forward_pass() {
    let f = fixture();
    let (id, v) = subject(&f, 2);
    let r = get(&f.app, &format!("/api/prediction/{id}?model=m2"))
        .await
        .json();
    let p = f.catalog.models[1].model.predict(v).unwrap();
    assert_eq!(r["p_cn"].as_f64().unwrap(), p.probabilities[0]);
    assert_eq!(r["p_ad"].as_f64().unwrap(), p.probabilities[1]);
    let r = get(&f.app, "/api/prediction/nobody").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.json()["error"], "unknown subject");
    assert!(r.json()["detail"].is_string());
}

#[tokio::test]
async fn background_slices_are_exact_planes() {
    let f = fixture();
    let (id, v) = subject(&f, 0);
    for (axis, index) in [(0, 3), (1, 15), (2, 19)] {
        let r = get(
            &f.app,
            &format!("/api/slice/{id}/background/{axis}/{index}"),
        )
        .await;
        assert_eq!(r.status, StatusCode::OK);
        let plane = v.slice(axis, index).unwrap();
        assert_eq!(r.floats(), plane.values);
        assert_eq!(r.header(SLICE_WIDTH_HEADER), plane.width);
        assert_eq!(r.header(SLICE_HEIGHT_HEADER), plane.height);
    }
    let r = get(&f.app, &format!("/api/slice/{id}/background/2/20")).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.json()["error"], "out of range");
    let r = get(&f.app, &format!("/api/slice/{id}/background/3/0")).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = get(&f.app, &format!("/api/slice/{id}/other/0/0")).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn relevance_is_gated_cached_and_exact() {
    let f = fixture();
    let (id, v) = subject(&f, 4);
    let slice_uri = format!("/api/slice/{id}/relevance/2/7?model=m1");
    let r = get(&f.app, &slice_uri).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["error"], "not computed");
    let r = get(&f.app, &format!("/api/clusters/{id}/m1")).await;
    assert_eq!(r.json()["error"], "not computed");

    let req = serde_json::json!({ "subject_id": id, "model_id": "m1" });
    let first = post(&f.app, "/api/relevance", req.clone()).await;
    assert_eq!(first.status, StatusCode::OK);
    let second = post(&f.app, "/api/relevance", req).await;
    assert_eq!(first.body, second.body);

    let fresh = relevance_map(&f.catalog.models[0].model, v, 1, &RuleConfig::default()).unwrap();
    let body = first.json();
    assert_eq!(body["map_id"], format!("{id}/m1/1"));
    assert_eq!(body["total_relevance"].as_f64().unwrap(), fresh.sum());
    assert_eq!(body["slice_profiles"].as_array().unwrap().len(), 3);
    assert_eq!(
        body["slice_profiles"][2]["positive"]
            .as_array()
            .unwrap()
            .len(),
        20
    );

    let r = get(&f.app, &slice_uri).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.floats(), fresh.map.slice(2, 7).unwrap().values);

    // target 0 is a separate map
    let r = get(&f.app, &format!("{slice_uri}&target=0")).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let r = post(
        &f.app,
        "/api/relevance",
        serde_json::json!({ "subject_id": id, "model_id": "m1", "target_class": 2 }),
    )
    .await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = post(
        &f.app,
        "/api/relevance",
        serde_json::json!({ "subject_id": id }),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["error"], "invalid body");
}

#[tokio::test]
async fn cache_evicts_beyond_capacity() {
    let f = fixture();
    let ids: Vec<String> = (0..5).map(|i| subject(&f, i).0).collect();
    for id in &ids {
        let r = post(
            &f.app,
            "/api/relevance",
            serde_json::json!({ "subject_id": id, "model_id": "m2" }),
        )
        .await;
        assert_eq!(r.status, StatusCode::OK);
    }
    // capacity 4: the first map is gone, the last four remain
    let r = get(
        &f.app,
        &format!("/api/slice/{}/relevance/0/0?model=m2", ids[0]),
    )
    .await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    for id in &ids[1..] {
        let r = get(&f.app, &format!("/api/slice/{id}/relevance/0/0?model=m2")).await;
        assert_eq!(r.status, StatusCode::OK);
    }
}

#[tokio::test]
async fn clusters_cover_the_map() {
    let f = fixture();
    let (id, _) = subject(&f, 5);
    let rel = post(
        &f.app,
        "/api/relevance",
        serde_json::json!({ "subject_id": id, "model_id": "m1" }),
    )
    .await
    .json();
    let positive = rel["positive_relevance"].as_f64().unwrap();
    let max_abs = rel["max_abs"].as_f64().unwrap();

    let all = get(
        &f.app,
        &format!("/api/clusters/{id}/m1?threshold=0&min_size=1&connectivity=26"),
    )
    .await;
    assert_eq!(all.status, StatusCode::OK);
    let all = all.json();
    let clustered = all["clustered_relevance"].as_f64().unwrap();
    assert!(
        (clustered - positive).abs() <= 1e-9 * positive.abs().max(1.0),
        "{clustered} vs {positive}"
    );
    let clusters = all["clusters"]["clusters"].as_array().unwrap();
    let sizes: u64 = clusters.iter().map(|c| c["size"].as_u64().unwrap()).sum();
    let binned: u64 = all["histogram"]["bins"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["count"].as_u64().unwrap())
        .sum();
    assert_eq!(binned as usize, clusters.len());
    assert!(sizes > 0);
    assert!(clusters[0]["volume_ml"].as_f64().unwrap() > 0.0);

    let none = get(
        &f.app,
        &format!("/api/clusters/{id}/m1?threshold={}", max_abs * 2.0),
    )
    .await
    .json();
    assert!(none["clusters"]["clusters"].as_array().unwrap().is_empty());
    assert!(none["histogram"]["bins"]
        .as_array()
        .unwrap()
        .iter()
        .all(|b| b["count"] == 0));

    let rel_q = get(
        &f.app,
        &format!("/api/clusters/{id}/m1?threshold=0.5&relative=true&summary=true"),
    )
    .await
    .json();
    assert_eq!(rel_q["threshold"].as_f64().unwrap(), 0.5 * max_abs);
    assert!(rel_q["clusters"]["clusters"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["voxels"].as_array().unwrap().is_empty()));

    let again = get(
        &f.app,
        &format!("/api/clusters/{id}/m1?threshold=0&min_size=1&connectivity=26"),
    )
    .await;
    assert_eq!(again.json(), all);
    let r = get(&f.app, &format!("/api/clusters/{id}/m1?connectivity=8")).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = get(&f.app, &format!("/api/clusters/{id}/m1?bogus=1")).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn atlas_lookup_and_masks() {
    let f = fixture();
    let atlas = &f.catalog.cohort.atlas;
    let hippo = atlas.region_by_name("Hippocampus").unwrap();
    let i = atlas.ids().iter().position(|&r| r == hippo).unwrap();
    let [x, y, z] = DIMS.coords(i);
    let r = get(&f.app, &format!("/api/atlas/lookup?x={x}&y={y}&z={z}"))
        .await
        .json();
    assert_eq!(r["region"], "Hippocampus");
    let r = get(&f.app, "/api/atlas/lookup?x=0&y=0&z=0").await.json();
    assert_eq!(r["region"], "background");
    let r = get(&f.app, "/api/atlas/lookup?x=99&y=0&z=0").await.json();
    assert_eq!(r["region"], "background");
    let r = get(&f.app, "/api/atlas/lookup?x=1").await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    let r = get(&f.app, &format!("/api/atlas/mask/Hippocampus/2/{z}")).await;
    assert_eq!(r.status, StatusCode::OK);
    let want: Vec<u8> = atlas
        .labels()
        .slice(2, z)
        .unwrap()
        .values
        .iter()
        .map(|&v| u8::from(v as u32 == hippo))
        .collect();
    assert_eq!(r.body, want);
    assert_eq!(r.body[y * DIMS.nx + x], 1);
    let by_id = get(&f.app, &format!("/api/atlas/mask/{hippo}/2/{z}")).await;
    assert_eq!(by_id.body, want);
    let r = get(&f.app, "/api/atlas/mask/Nowhere/2/0").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let regions = get(&f.app, "/api/atlas/regions").await.json();
    assert!(regions
        .as_array()
        .unwrap()
        .iter()
        .any(|r| r["name"] == "Hippocampus"));
}

#[test]
fn bad_catalogs_fail_at_startup() {
    let dir = tempfile::tempdir().unwrap();
    assert!(Catalog::load(dir.path().join("missing.json")).is_err());
    let path = write_catalog(dir.path());
    let text = std::fs::read_to_string(&path).unwrap();

    let unknown = text.replacen('{', "{\"extra\": 1,", 1);
    std::fs::write(&path, unknown).unwrap();
    assert!(Catalog::load(&path).is_err());

    save_model(
        &build_model(Dims::new(8, 8, 8), 0).unwrap(),
        dir.path().join("m2.bin"),
    )
    .unwrap();
    std::fs::write(&path, &text).unwrap();
    let e = Catalog::load(&path).err().unwrap().to_string();
    assert!(e.contains("m2"), "{e}");
}
