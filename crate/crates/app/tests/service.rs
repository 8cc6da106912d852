mod common;

use axum::http::StatusCode;
use base64::Engine;
use serde_json::{json, Value};

use seal_app::service::{InferRequest, InferResponse};
use seal_core::mask::Rle;
use seal_core::model::{Granularity, Prompt, CANONICAL_PHRASES};

use common::{call, state, SIZE};

fn point_request(granularity: &str) -> String {
    json!({
        "frame_id": "frame_0",
        "prompts": [{"kind": "point", "x": 5, "y": 9}],
        "queries": ["car", "tree"],
        "granularity": granularity,
        "canonical": false
    })
    .to_string()
}

#[tokio::test]
async fn point_prompt_returns_three_full_size_masks() {
    let st = state();
    let (status, body) = call(&st, "POST", "/api/infer", &point_request("auto")).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: InferResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.results.len(), 1);
    let masks = &resp.results[0].masks;
    assert_eq!(masks.len(), 3);
    let tags: Vec<Granularity> = masks.iter().map(|m| m.granularity).collect();
    assert_eq!(tags, vec![Granularity::Coarse, Granularity::Mid, Granularity::Fine]);
    for m in masks {
        let bits = m.rle.decode().unwrap();
        assert_eq!((bits.height, bits.width), (SIZE, SIZE));
        assert!(bits.get(5, 9), "clicked pixel missing");
        assert!((-1.0..=1.0).contains(&m.score));
        assert!(["car", "tree"].contains(&m.label.as_str()));
    }
}

#[tokio::test]
async fn granularity_filter_keeps_one_point_mask() {
    let st = state();
    for (g, want) in [("coarse", Granularity::Coarse), ("fine", Granularity::Fine)] {
        let (status, body) = call(&st, "POST", "/api/infer", &point_request(g)).await;
        assert_eq!(status, StatusCode::OK);
        let resp: InferResponse = serde_json::from_slice(&body).unwrap();
        let masks = &resp.results[0].masks;
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0].granularity, want);
    }
}

#[tokio::test]
async fn box_prompt_with_canonical_phrases() {
    let st = state();
    let req = InferRequest {
        frame_id: "frame_1".into(),
        prompts: vec![Prompt::Box {
            x_min: 2,
            y_min: 3,
            x_max: 12,
            y_max: 20,
        }],
        queries: vec!["car".into()],
        granularity: Default::default(),
        canonical: true,
    };
    let (status, body) = call(&st, "POST", "/api/infer", &serde_json::to_string(&req).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let resp: InferResponse = serde_json::from_slice(&body).unwrap();
    let masks = &resp.results[0].masks;
    assert_eq!(masks.len(), 1);
    assert_eq!(masks[0].granularity, Granularity::Single);
    let allowed: Vec<&str> = std::iter::once("car").chain(CANONICAL_PHRASES).collect();
    assert!(allowed.contains(&masks[0].label.as_str()), "{}", masks[0].label);
    let bits = masks[0].rle.decode().unwrap();
    for (x, y) in bits.pixels() {
        assert!(x <= 14 && y <= 22, "pixel ({x}, {y}) outside the dilated box");
    }
}

#[tokio::test]
async fn unknown_frame_is_not_found() {
    let st = state();
    let body = point_request("auto").replace("frame_0", "nope");
    let (status, body) = call(&st, "POST", "/api/infer", &body).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["code"], "not_found");
    assert!(v["message"].as_str().unwrap().contains("nope"));
}

#[tokio::test]
async fn malformed_requests_are_rejected() {
    let st = state();
    let cases = [
        "{not json".to_string(),
        json!({"frame_id": "frame_0", "prompts": [], "queries": ["car"]}).to_string(),
        json!({"frame_id": "frame_0", "prompts": [{"kind": "point", "x": 1, "y": 1}], "queries": []}).to_string(),
        json!({"frame_id": "frame_0", "prompts": [{"kind": "point", "x": 99, "y": 1}], "queries": ["car"]}).to_string(),
        json!({"frame_id": "frame_0", "prompts": [{"kind": "box", "x_min": 9, "y_min": 1, "x_max": 2, "y_max": 4}], "queries": ["car"]}).to_string(),
        json!({"frame_id": "frame_0", "prompts": [{"kind": "point", "x": 1, "y": 1}], "queries": ["car"], "granularity": "medium"}).to_string(),
    ];
    for body in cases {
        let (status, resp) = call(&st, "POST", "/api/infer", &body).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        let v: Value = serde_json::from_slice(&resp).unwrap();
        assert_eq!(v["code"], "invalid_request");
    }
}

#[tokio::test]
async fn concurrent_identical_requests_match_byte_for_byte() {
    let st = state();
    let body = point_request("auto");
    let (a, b) = tokio::join!(
        call(&st, "POST", "/api/infer", &body),
        call(&st, "POST", "/api/infer", &body)
    );
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a, b);
    let sequential = call(&st, "POST", "/api/infer", &body).await;
    assert_eq!(a, sequential);
}

#[tokio::test]
async fn frames_listing_has_previews() {
    let st = state();
    let (status, body) = call(&st, "GET", "/api/frames", "").await;
    assert_eq!(status, StatusCode::OK);
    let v: Vec<Value> = serde_json::from_slice(&body).unwrap();
    let ids: Vec<&str> = v.iter().map(|f| f["frame_id"].as_str().unwrap()).collect();
    assert_eq!(ids, vec!["frame_0", "frame_1"]);
    let png = base64::engine::general_purpose::STANDARD
        .decode(v[0]["preview"].as_str().unwrap())
        .unwrap();
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!((img.width() as usize, img.height() as usize), (SIZE, SIZE));
    assert_eq!(v[0]["width"], SIZE);
}

#[tokio::test]
async fn session_swap_is_atomic_between_requests() {
    let st = state();
    let before = st.snapshot();
    let w = common::world();
    let mut ck = common::checkpoint(&w);
    ck.meta.iteration = 7;
    st.replace(seal_app::service::Session::new(&ck, Default::default()).unwrap());
    // the old snapshot still serves, the new one has no frames
    assert_eq!(before.frame_ids().len(), 2);
    let (status, _) = call(&st, "POST", "/api/infer", &point_request("auto")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn rle_in_response_round_trips() {
    let w = common::world();
    let s = common::session(&w);
    let req: InferRequest = serde_json::from_str(&point_request("auto")).unwrap();
    let resp = s.handle_infer(&req).unwrap();
    for m in &resp.results[0].masks {
        let back = Rle::encode(&m.rle.decode().unwrap());
        assert_eq!(back, m.rle);
    }
    assert_eq!(resp, s.handle_infer(&req).unwrap());
}
