use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rayon::prelude::*;
use relevis_core::analyze::{
    cluster_size_histogram, extract_clusters, slice_profile, ClusterSet, Connectivity,
};
use relevis_core::analyze::{SizeHistogram, SliceProfile};
use relevis_core::lrp::relevance_map;
use relevis_core::nn::Prediction;
use relevis_core::{Dims, Slice2D, SubjectRecord, Volume3D};
use serde::{Deserialize, Serialize};

use crate::cache::LruCache;
use crate::catalog::Catalog;

pub const SLICE_WIDTH_HEADER: &str = "x-slice-width";
pub const SLICE_HEIGHT_HEADER: &str = "x-slice-height";
pub const SLICE_AXIS_HEADER: &str = "x-slice-axis";

const DEFAULT_TARGET: usize = 1;
const DEFAULT_BINS: usize = 10;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            error,
            detail: detail.into(),
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid parameter", detail)
    }

    fn internal(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail)
    }
}

impl From<relevis_core::Error> for ApiError {
    fn from(e: relevis_core::Error) -> Self {
        match e {
            relevis_core::Error::InvalidParameter(d) => Self::bad_request(d),
            other => Self::internal(other.to_string()),
        }
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(e.status(), "invalid body", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.error, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct MapKey {
    subject: usize,
    model: usize,
    target: usize,
}

struct ComputedMap {
    map: Volume3D,
    /// Serialized [`RelevanceResponse`], so repeated requests get the
    /// same bytes.
    body: Vec<u8>,
    max_abs: f64,
}

pub struct AppState {
    catalog: Catalog,
    maps: LruCache<MapKey, ComputedMap>,
    predictions: Mutex<HashMap<(usize, usize), Prediction>>,
    intensity: Vec<[f32; 2]>,
}

impl AppState {
    pub fn new(catalog: Catalog) -> Self {
        let intensity = catalog
            .cohort
            .subjects
            .iter()
            .map(|(_, v)| {
                v.data()
                    .iter()
                    .fold([f32::INFINITY, f32::NEG_INFINITY], |[lo, hi], &x| {
                        [lo.min(x), hi.max(x)]
                    })
            })
            .collect();
        AppState {
            maps: LruCache::new(catalog.cache_capacity),
            predictions: Mutex::new(HashMap::new()),
            catalog,
            intensity,
        }
    }

    fn subject(&self, id: &str) -> ApiResult<usize> {
        self.catalog
            .subject_index(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown subject", id))
    }

    fn model(&self, id: Option<&str>) -> ApiResult<usize> {
        match id {
            None => Ok(0),
            Some(id) => self
                .catalog
                .model_index(id)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown model", id)),
        }
    }

    fn key(&self, subject: &str, model: Option<&str>, target: Option<usize>) -> ApiResult<MapKey> {
        let target = target.unwrap_or(DEFAULT_TARGET);
        if target > 1 {
            return Err(ApiError::bad_request(format!(
                "target class {target} is not 0 or 1"
            )));
        }
        Ok(MapKey {
            subject: self.subject(subject)?,
            model: self.model(model)?,
            target,
        })
    }

    fn computed(&self, key: &MapKey) -> ApiResult<Arc<ComputedMap>> {
        self.maps.peek(key).ok_or_else(|| {
            ApiError::new(
                StatusCode::CONFLICT,
                "not computed",
                format!(
                    "no relevance map for subject {} and model {}; POST /api/relevance first",
                    self.catalog.cohort.subjects[key.subject].0.id,
                    self.catalog.models[key.model].id
                ),
            )
        })
    }

    fn map_id(&self, key: &MapKey) -> String {
        format!(
            "{}/{}/{}",
            self.catalog.cohort.subjects[key.subject].0.id,
            self.catalog.models[key.model].id,
            key.target
        )
    }
}

type Shared = Arc<AppState>;

pub fn routes(state: Shared) -> Router {
    Router::new()
        .route("/api/participants", get(participants))
        .route("/api/models", get(models))
        .route("/api/relevance", post(relevance))
        .route("/api/slice/{subject}/{kind}/{axis}/{index}", get(slice))
        .route("/api/clusters/{subject}/{model}", get(clusters))
        .route("/api/atlas/lookup", get(atlas_lookup))
        .route("/api/atlas/regions", get(atlas_regions))
        .route("/api/atlas/mask/{region}/{axis}/{index}", get(atlas_mask))
        .route("/api/prediction/{subject}", get(prediction))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

/// Predictions of `model` for `subjects`, computing the missing ones.
async fn predictions(
    state: &Shared,
    model: usize,
    subjects: Vec<usize>,
) -> ApiResult<Vec<Prediction>> {
    let missing: Vec<usize> = {
        let known = state.predictions.lock().unwrap();
        subjects
            .iter()
            .copied()
            .filter(|&s| !known.contains_key(&(s, model)))
            .collect()
    };
    if !missing.is_empty() {
        let st = state.clone();
        let fresh = blocking(move || {
            missing
                .par_iter()
                .map(|&s| {
                    let input = st.catalog.model_input(s, model)?;
                    Ok((s, st.catalog.models[model].model.predict(&input)?))
                })
                .collect::<ApiResult<Vec<_>>>()
        })
        .await?;
        let mut known = state.predictions.lock().unwrap();
        for (s, p) in fresh {
            known.insert((s, model), p);
        }
    }
    let known = state.predictions.lock().unwrap();
    Ok(subjects.iter().map(|&s| known[&(s, model)]).collect())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelQuery {
    model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    #[serde(flatten)]
    pub record: SubjectRecord,
    /// Probability of the disease class under the selected model.
    pub p_disease: f64,
    /// Minimum and maximum of the stored volume, for a fixed grey window.
    pub intensity_range: [f32; 2],
}

async fn participants(
    State(state): State<Shared>,
    q: Result<Query<ModelQuery>, QueryRejection>,
) -> ApiResult<Json<Vec<Participant>>> {
    let Query(q) = q?;
    let model = state.model(q.model.as_deref())?;
    let n = state.catalog.cohort.subjects.len();
    let preds = predictions(&state, model, (0..n).collect()).await?;
    let out = state
        .catalog
        .cohort
        .subjects
        .iter()
        .zip(preds)
        .zip(&state.intensity)
        .map(|(((record, _), p), range)| Participant {
            record: record.clone(),
            p_disease: p.p_disease(),
            intensity_range: *range,
        })
        .collect();
    Ok(Json(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub input_dims: Dims,
    pub parameter_count: usize,
    pub residualized: bool,
}

async fn models(State(state): State<Shared>) -> Json<Vec<ModelInfo>> {
    Json(
        state
            .catalog
            .models
            .iter()
            .map(|m| ModelInfo {
                id: m.id.clone(),
                input_dims: m.model.input_dims(),
                parameter_count: m.model.parameter_count(),
                residualized: m.residualizer.is_some(),
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelevanceRequest {
    pub subject_id: String,
    pub model_id: String,
    #[serde(default)]
    pub target_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceResponse {
    pub map_id: String,
    pub subject_id: String,
    pub model_id: String,
    pub target_class: usize,
    pub total_relevance: f64,
    pub positive_relevance: f64,
    pub negative_relevance: f64,
    pub max_abs: f64,
    /// Sagittal, coronal and axial profiles.
    pub slice_profiles: Vec<SliceProfile>,
}

async fn relevance(
    State(state): State<Shared>,
    body: Result<Json<RelevanceRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let key = state.key(&req.subject_id, Some(&req.model_id), req.target_class)?;
    let st = state.clone();
    let (computed, hit) = state
        .maps
        .get_or_compute(&key, || blocking(move || compute_map(&st, key)))
        .await?;
    tracing::debug!(map = %state.map_id(&key), cached = hit, "relevance");
    Ok((
        [(header::CONTENT_TYPE, "application/json")],
        computed.body.clone(),
    )
        .into_response())
}

fn compute_map(state: &AppState, key: MapKey) -> ApiResult<ComputedMap> {
    let c = &state.catalog;
    let input = c.model_input(key.subject, key.model)?;
    let rm = relevance_map(&c.models[key.model].model, &input, key.target, &c.rule)?;
    let slice_profiles = (0..3)
        .map(|axis| slice_profile(&rm.map, axis))
        .collect::<relevis_core::Result<Vec<_>>>()?;
    let resp = RelevanceResponse {
        map_id: state.map_id(&key),
        subject_id: c.cohort.subjects[key.subject].0.id.clone(),
        model_id: c.models[key.model].id.clone(),
        target_class: key.target,
        total_relevance: rm.sum(),
        positive_relevance: rm.positive_sum(),
        negative_relevance: rm.negative_sum(),
        max_abs: rm.max_abs(),
        slice_profiles,
    };
    let body = serde_json::to_vec(&resp).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(ComputedMap {
        max_abs: rm.max_abs(),
        map: rm.map,
        body,
    })
}

fn check_axis(axis: usize, index: usize, dims: Dims) -> ApiResult<()> {
    if axis > 2 {
        return Err(ApiError::bad_request(format!(
            "axis {axis} is not 0, 1 or 2"
        )));
    }
    if index >= dims.axis_len(axis) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "out of range",
            format!(
                "slice {index} outside 0..{} on axis {axis}",
                dims.axis_len(axis)
            ),
        ));
    }
    Ok(())
}

fn plane_response(axis: usize, width: usize, height: usize, bytes: Vec<u8>) -> Response {
    let mut r = bytes.into_response();
    let h = r.headers_mut();
    h.insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static("application/octet-stream"),
    );
    h.insert(SLICE_WIDTH_HEADER, HeaderValue::from(width));
    h.insert(SLICE_HEIGHT_HEADER, HeaderValue::from(height));
    h.insert(SLICE_AXIS_HEADER, HeaderValue::from(axis));
    r
}

fn slice_response(axis: usize, s: Slice2D) -> Response {
    let bytes = s.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    plane_response(axis, s.width, s.height, bytes)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SliceQuery {
    model: Option<String>,
    target: Option<usize>,
}

async fn slice(
    State(state): State<Shared>,
    path: Result<Path<(String, String, usize, usize)>, PathRejection>,
    q: Result<Query<SliceQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Path((subject, kind, axis, index)) = path?;
    let Query(q) = q?;
    check_axis(axis, index, state.catalog.dims())?;
    let s = match kind.as_str() {
        "background" => {
            let i = state.subject(&subject)?;
            state.catalog.cohort.subjects[i].1.slice(axis, index)?
        }
        "relevance" => {
            let key = state.key(&subject, q.model.as_deref(), q.target)?;
            state.computed(&key)?.map.slice(axis, index)?
        }
        other => {
            return Err(ApiError::bad_request(format!(
                "slice kind {other} is not background or relevance"
            )))
        }
    };
    Ok(slice_response(axis, s))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterQuery {
    #[serde(default)]
    threshold: f64,
    min_size: Option<usize>,
    connectivity: Option<u32>,
    bins: Option<usize>,
    target: Option<usize>,
    /// Threshold as a fraction of the map's largest absolute value.
    #[serde(default)]
    relative: bool,
    /// Omit per-voxel membership lists.
    #[serde(default)]
    summary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersResponse {
    pub map_id: String,
    /// Threshold on the raw relevance scale.
    pub threshold: f64,
    pub clusters: ClusterSet,
    pub histogram: SizeHistogram,
    pub clustered_relevance: f64,
    pub slice_profiles: Vec<SliceProfile>,
}

async fn clusters(
    State(state): State<Shared>,
    path: Result<Path<(String, String)>, PathRejection>,
    q: Result<Query<ClusterQuery>, QueryRejection>,
) -> ApiResult<Json<ClustersResponse>> {
    let Path((subject, model)) = path?;
    let Query(q) = q?;
    let key = state.key(&subject, Some(&model), q.target)?;
    let computed = state.computed(&key)?;
    let connectivity = match q.connectivity {
        None => Connectivity::default(),
        Some(n) => Connectivity::try_from(n)?,
    };
    if !q.threshold.is_finite() {
        return Err(ApiError::bad_request("threshold must be finite"));
    }
    let threshold = if q.relative {
        q.threshold * computed.max_abs
    } else {
        q.threshold
    };
    let map_id = state.map_id(&key);
    let resp = blocking(move || {
        let mut cs = extract_clusters(
            &computed.map,
            threshold,
            q.min_size.unwrap_or(1),
            connectivity,
        )?;
        let histogram = cluster_size_histogram(&cs, q.bins.unwrap_or(DEFAULT_BINS))?;
        let clustered_relevance = cs.total_relevance();
        if q.summary {
            cs.clusters.iter_mut().for_each(|c| c.voxels.clear());
        }
        let slice_profiles = (0..3)
            .map(|axis| slice_profile(&computed.map, axis))
            .collect::<relevis_core::Result<Vec<_>>>()?;
        Ok(ClustersResponse {
            map_id,
            threshold,
            clusters: cs,
            histogram,
            clustered_relevance,
            slice_profiles,
        })
    })
    .await?;
    Ok(Json(resp))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LookupQuery {
    x: usize,
    y: usize,
    z: usize,
}

async fn atlas_lookup(
    State(state): State<Shared>,
    q: Result<Query<LookupQuery>, QueryRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let Query(q) = q?;
    let atlas = &state.catalog.cohort.atlas;
    let id = atlas.region_at(q.x, q.y, q.z).unwrap_or(0);
    Ok(Json(
        serde_json::json!({ "region": atlas.lookup(q.x, q.y, q.z), "id": id }),
    ))
}

#[derive(Debug, Serialize)]
struct RegionInfo<'a> {
    id: u32,
    name: &'a str,
    voxels: usize,
}

async fn atlas_regions(State(state): State<Shared>) -> Json<serde_json::Value> {
    let atlas = &state.catalog.cohort.atlas;
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &id in atlas.ids() {
        *counts.entry(id).or_default() += 1;
    }
    let regions: Vec<RegionInfo> = atlas
        .names()
        .iter()
        .map(|(&id, name)| RegionInfo {
            id,
            name,
            voxels: counts.get(&id).copied().unwrap_or(0),
        })
        .collect();
    Json(serde_json::json!(regions))
}

/// One byte per voxel, 1 inside the region.
async fn atlas_mask(
    State(state): State<Shared>,
    path: Result<Path<(String, usize, usize)>, PathRejection>,
) -> ApiResult<Response> {
    let Path((region, axis, index)) = path?;
    let atlas = &state.catalog.cohort.atlas;
    let id = atlas
        .region_by_name(&region)
        .or_else(|| region.parse().ok().filter(|id| atlas.name(*id).is_some()))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown region", region.clone()))?;
    check_axis(axis, index, atlas.dims())?;
    let s = atlas.labels().slice(axis, index)?;
    let bytes = s.values.iter().map(|&v| u8::from(v as u32 == id)).collect();
    Ok(plane_response(axis, s.width, s.height, bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub subject_id: String,
    pub model_id: String,
    pub p_cn: f64,
    /// Probability of the disease class.
    pub p_ad: f64,
    pub logits: [f64; 2],
    pub predicted_class: usize,
}

async fn prediction(
    State(state): State<Shared>,
    path: Result<Path<String>, PathRejection>,
    q: Result<Query<ModelQuery>, QueryRejection>,
) -> ApiResult<Json<PredictionResponse>> {
    let Path(subject) = path?;
    let Query(q) = q?;
    let s = state.subject(&subject)?;
    let m = state.model(q.model.as_deref())?;
    let p = predictions(&state, m, vec![s]).await?[0];
    Ok(Json(PredictionResponse {
        subject_id: subject,
        model_id: state.catalog.models[m].id.clone(),
        p_cn: p.probabilities[0],
        p_ad: p.probabilities[1],
        logits: p.logits,
        predicted_class: p.predicted_class(),
    }))
}
