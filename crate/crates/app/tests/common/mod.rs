#![allow(dead_code)]

use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use seal_app::service::{router, AppState, Session};
use seal_core::model::{Checkpoint, CheckpointMeta, ModelConfig, SealModel};
use seal_core::synth::{SynthConfig, SynthWorld};

pub const SIZE: usize = 32;
pub const DIM: usize = 16;

pub fn world() -> SynthWorld {
    SynthWorld::new(SynthConfig::tiled(SIZE, DIM, 1)).unwrap()
}

/// Untrained desk model whose checkpoint carries the world's text encoder.
pub fn checkpoint(world: &SynthWorld) -> Checkpoint {
    let model = SealModel::new(ModelConfig::desk(SIZE, DIM), 4).unwrap();
    model.checkpoint(CheckpointMeta {
        stage: 2,
        iteration: 0,
        seed: 4,
        text_encoder: Some(world.config.text_spec()),
    })
}

pub fn session(world: &SynthWorld) -> Session {
    let frames: BTreeMap<_, _> = (0..2u64)
        .map(|i| {
            let id = format!("frame_{i}");
            let scene = world.scene(i, &id);
            (id, world.frame_data(&scene, 3).unwrap().voxel)
        })
        .collect();
    Session::new(&checkpoint(world), frames).unwrap()
}

pub fn state() -> AppState {
    AppState::new(session(&world()))
}

pub async fn call(state: &AppState, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}
