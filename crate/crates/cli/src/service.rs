//! Inference service: immutable state loaded once, JSON handlers, and the
//! generation path shared with the `generate` subcommand.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::Context;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use stylefit::domain::{load_catalog, Catalog, FeatureSource, HighCategory, Template};
use stylefit::encoder::FeatureTable;
use stylefit::generation::{generate, GenerationRequest, DEFAULT_BEAM};
use stylefit::model::{Model, ModelScorer};
use stylefit::synthgen::{cluster_hue, hsv_to_rgb, PlantedStructure, IMAGE_SIZE};
use stylefit::{checkpoint, Error};
use tower_http::cors::CorsLayer;

/// Frozen model, catalog and derived lookup tables. Never mutated after
/// construction.
pub struct ServiceState {
    model: &'static Model<f32>,
    scorer: ModelScorer<'static, f32>,
    catalog: Catalog,
    data_dir: PathBuf,
    planted: Option<PlantedStructure>,
}

impl ServiceState {
    /// The model is leaked: the state lives for the rest of the process.
    pub fn new(model: Model<f32>, catalog: Catalog, table: &FeatureTable, data_dir: PathBuf) -> anyhow::Result<Self> {
        let model: &'static Model<f32> = Box::leak(Box::new(model));
        let scorer = model.scorer(&catalog, table)?;
        let planted = PlantedStructure::load(&data_dir).ok();
        Ok(Self {
            model,
            scorer,
            catalog,
            data_dir,
            planted,
        })
    }

    pub fn load(checkpoint_path: &Path, data_dir: &Path) -> anyhow::Result<Self> {
        let model = checkpoint::load::<f32>(checkpoint_path)
            .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
        let (catalog, _) = load_catalog(data_dir).with_context(|| format!("loading data from {}", data_dir.display()))?;
        let table = FeatureTable::from_catalog(&catalog, data_dir)?;
        Self::new(model, catalog, &table, data_dir.to_path_buf())
    }

    pub fn model(&self) -> &Model<f32> {
        self.model
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, detail: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            error: error.to_string(),
            detail: Some(detail.into()),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match &e {
            Error::UnknownItem(id) => Self::new(StatusCode::NOT_FOUND, "unknown item", id.clone()),
            Error::UnknownStyle(s) => Self::new(StatusCode::BAD_REQUEST, "unknown style", s.clone()),
            Error::InvalidTemplate(_) => Self::new(StatusCode::BAD_REQUEST, "invalid template", e.to_string()),
            Error::InvalidRequest(_) | Error::Insufficient(_) | Error::Config(_) => {
                Self::new(StatusCode::BAD_REQUEST, "invalid request", e.to_string())
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.detail {
            Some(d) => write!(f, "{}: {d}", self.error),
            None => f.write_str(&self.error),
        }
    }
}

impl std::error::Error for ApiError {}

/// A template given as a list of categories or as a comma-separated string.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum TemplateInput {
    List(Vec<String>),
    Text(String),
}

impl TemplateInput {
    fn parse(&self) -> Result<Template, Error> {
        match self {
            TemplateInput::Text(s) => Template::from_str(s),
            TemplateInput::List(v) => Template::new(v.iter().map(|s| s.parse::<HighCategory>()).collect::<Result<_, _>>()?),
        }
    }
}

fn default_top_k() -> usize {
    5
}

fn default_beam() -> usize {
    DEFAULT_BEAM
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GenerateBody {
    pub parent_id: String,
    pub template: TemplateInput,
    pub style_weights: BTreeMap<String, f64>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_beam")]
    pub beam: usize,
    #[serde(default)]
    pub sample_seed: Option<u64>,
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ItemSummary {
    pub id: String,
    pub high: HighCategory,
    pub fine: String,
    pub image: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratedOutfit {
    pub rank: usize,
    pub score: f64,
    pub items: Vec<ItemSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenerateResponse {
    pub parent_id: String,
    pub template: Template,
    pub style_weights: BTreeMap<String, f64>,
    pub outfits: Vec<GeneratedOutfit>,
}

fn summary(catalog: &Catalog, pos: usize) -> ItemSummary {
    let item = catalog.item(pos);
    ItemSummary {
        id: item.id.clone(),
        high: item.category.high,
        fine: item.category.fine.clone(),
        image: format!("/items/{}/image", item.id),
    }
}

/// Shared by the HTTP handler and the CLI.
pub fn run_generate(state: &ServiceState, body: &GenerateBody) -> Result<GenerateResponse, ApiError> {
    let template = body.template.parse()?;
    let request = GenerationRequest {
        parent_id: body.parent_id.clone(),
        template: template.clone(),
        style_weights: body.style_weights.clone(),
        beam: body.beam,
        top_k: body.top_k,
        sample_seed: body.sample_seed,
        normalize: body.normalize,
    };
    let ranked = generate(&state.scorer, &state.catalog, &request)?;
    Ok(GenerateResponse {
        parent_id: body.parent_id.clone(),
        template,
        style_weights: body.style_weights.clone(),
        outfits: ranked
            .into_iter()
            .enumerate()
            .map(|(i, r)| GeneratedOutfit {
                rank: i + 1,
                score: r.score,
                items: r.items.iter().map(|&p| summary(&state.catalog, p)).collect(),
            })
            .collect(),
    })
}

#[derive(Serialize)]
struct StyleInfo {
    name: String,
    pooled: bool,
    train_outfits: usize,
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn styles(State(state): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    let pooled = state.model.pooled.as_ref();
    let styles: Vec<StyleInfo> = state
        .model
        .styles
        .iter()
        .map(|name| {
            let p = pooled.and_then(|p| p.index_of(name).map(|i| &p.styles[i]));
            StyleInfo {
                name: name.clone(),
                pooled: p.is_some(),
                train_outfits: p.map_or(0, |p| p.count),
            }
        })
        .collect();
    Json(serde_json::json!({ "styles": styles }))
}

#[derive(Deserialize)]
struct ItemsQuery {
    category: Option<String>,
}

async fn items(State(state): State<Arc<ServiceState>>, Query(q): Query<ItemsQuery>) -> Json<serde_json::Value> {
    let list: Vec<ItemSummary> = (0..state.catalog.len())
        .filter(|&p| {
            let c = &state.catalog.item(p).category;
            q.category
                .as_deref()
                .is_none_or(|want| c.high.as_str() == want || c.fine == want)
        })
        .map(|p| summary(&state.catalog, p))
        .collect();
    Json(serde_json::json!({ "items": list }))
}

fn swatch(state: &ServiceState, id: &str) -> RgbImage {
    let color = match state.planted.as_ref().and_then(|p| p.item(id).map(|i| (i.hue, p.hue_prototypes.len()))) {
        Some((hue, n)) => hsv_to_rgb(cluster_hue(hue, n), 0.6, 0.8),
        None => {
            let h = id.bytes().fold(0u32, |a, b| a.wrapping_mul(31).wrapping_add(b as u32));
            hsv_to_rgb((h % 360) as f64 / 360.0, 0.6, 0.8)
        }
    };
    RgbImage::from_pixel(IMAGE_SIZE, IMAGE_SIZE, color)
}

/// PNG bytes for an item: the stored image in image mode, a hue swatch in
/// vector mode.
pub fn item_png(state: &ServiceState, id: &str) -> Result<Vec<u8>, ApiError> {
    let item = state
        .catalog
        .get(id)
        .ok_or_else(|| ApiError::from(Error::UnknownItem(id.to_string())))?;
    match &item.features {
        FeatureSource::Image(rel) => {
            let path = state.data_dir.join(rel);
            std::fs::read(&path)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "image unavailable", format!("{}: {e}", path.display())))
        }
        FeatureSource::Vector(_) => {
            let mut out = Cursor::new(Vec::new());
            swatch(state, id)
                .write_to(&mut out, ImageFormat::Png)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "image encoding failed", e.to_string()))?;
            Ok(out.into_inner())
        }
    }
}

async fn item_image(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let png = item_png(&state, &id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn generate_handler(
    State(state): State<Arc<ServiceState>>,
    body: Result<Json<GenerateBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<GenerateResponse>, ApiError> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid request", e.body_text()))?;
    run_generate(&state, &body).map(Json)
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/styles", get(styles))
        .route("/items", get(items))
        .route("/items/{id}/image", get(item_image))
        .route("/generate", post(generate_handler))
        .layer(CorsLayer::permissive())
        .with_state(state)
}
