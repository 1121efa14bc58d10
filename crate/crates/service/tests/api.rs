mod common;

use std::time::Duration;

use axum::http::StatusCode;
use common::*;
use serde_json::json;
use triplane_edit::edit::permute_channels;
use triplane_edit::io::{decode_mask, decode_rgb8, encode_rgb8, read_checkpoint};
use triplane_edit::render::{render_view, RenderOptions};

#[tokio::test]
async fn scene_lists_frames_and_the_initial_snapshot() {
    let fx = dataset();
    let (_, app) = app(&fx);
    let r = get(&app, "/scene").await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["frames"].as_array().unwrap().len(), 9);
    assert_eq!(v["active_version"], 0);
    assert_eq!(v["versions"], json!([0]));
    assert!(v["selection"].is_null());
    assert!(v["f_distance_range"].is_null());
}

#[tokio::test]
async fn render_matches_the_core_renderer_byte_for_byte() {
    let fx = dataset();
    let (state, app) = app(&fx);
    let r = post(&app, "/render", json!({ "frame": 2, "channels": ["depth"] })).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    let cam = fx.dataset.frames.iter().find(|f| f.index == 2).unwrap().camera;
    let img = render_view(
        &cam,
        &state.active_field(),
        &RenderOptions {
            samples: SAMPLES,
            ..RenderOptions::default()
        },
    )
    .unwrap();
    assert_eq!(png(&v["rgb_png"]), encode_rgb8(img.width, img.height, &img.rgb).unwrap());
    assert!(v["depth_png"].is_string());
    assert!(v["mask_png"].is_null());

    let by_camera = post(&app, "/render", json!({ "camera": cam })).await;
    assert_eq!(by_camera.json()["rgb_png"], v["rgb_png"]);
}

#[tokio::test]
async fn render_rejects_bad_requests() {
    let fx = dataset();
    let (_, app) = app(&fx);
    let cam = fx.dataset.frames[0].camera;
    let both = post(&app, "/render", json!({ "frame": 0, "camera": cam })).await;
    assert_eq!(both.status, StatusCode::UNPROCESSABLE_ENTITY);
    let neither = post(&app, "/render", json!({})).await;
    assert_eq!(neither.status, StatusCode::UNPROCESSABLE_ENTITY);
    let unknown_field = post(&app, "/render", json!({ "frame": 0, "colour": true })).await;
    assert_eq!(unknown_field.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(unknown_field.code(), "invalid_body");
    let garbage = send(&app, "POST", "/render", None, None).await;
    assert_eq!(garbage.status, StatusCode::UNPROCESSABLE_ENTITY);
    let missing = post(&app, "/render", json!({ "frame": 99 })).await;
    assert_eq!(missing.status, StatusCode::NOT_FOUND);
    let mask = post(&app, "/render", json!({ "frame": 0, "channels": ["mask"] })).await;
    assert_eq!(mask.status, StatusCode::CONFLICT);
    assert_eq!(mask.code(), "no_selection");
    let old = post(&app, "/render", json!({ "frame": 0, "version": 7 })).await;
    assert_eq!(old.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn empty_patches_are_unprocessable() {
    let fx = dataset();
    let (_, app) = app(&fx);
    for patch in [
        json!({ "type": "rect", "x": 2, "y": 2, "w": 0, "h": 3 }),
        json!({ "type": "rect", "x": 40, "y": 40, "w": 3, "h": 3 }),
        json!({ "type": "bitmap", "width": 2, "height": 1, "bits": [false, false] }),
    ] {
        let r = post(&app, "/select", json!({ "frame": 0, "patch": patch })).await;
        assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{patch}");
    }
    let neg = post(&app, "/select", json!({ "frame": 0, "patch": centre_rect(12, 12), "thr": -1.0 })).await;
    assert_eq!(neg.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn threshold_updates_reuse_the_query_feature() {
    let fx = dataset();
    let (_, app) = app(&fx);
    let none = send(&app, "PATCH", "/select", Some(json!({ "thr": 1.0 })), None).await;
    assert_eq!(none.status, StatusCode::CONFLICT);

    let r = post(&app, "/select", json!({ "frame": 0, "patch": centre_rect(12, 12), "thr": 1e6 })).await;
    assert_eq!(r.status, StatusCode::OK);
    let first = r.json();
    let (w, h, bits) = decode_mask(&png(&first["mask_png"])).unwrap();
    assert_eq!((w, h), (12, 12));
    assert_eq!(bits.iter().filter(|b| **b).count() as u64, first["mask_pixels"].as_u64().unwrap());
    let range = first["selection"]["f_distance_range"].as_array().unwrap();
    assert!(range[0].as_f64().unwrap() <= range[1].as_f64().unwrap());

    let zero = send(&app, "PATCH", "/select", Some(json!({ "thr": 0.0 })), None).await;
    assert_eq!(zero.status, StatusCode::OK);
    let zero = zero.json();
    assert_eq!(zero["mask_pixels"], 0);
    assert_eq!(zero["selection"]["f_bar"], first["selection"]["f_bar"]);
    assert_eq!(zero["selection"]["thr"], 0.0);

    let scene = get(&app, "/scene").await.json();
    assert_eq!(scene["selection"]["thr"], 0.0);
    assert_eq!(scene["f_distance_range"], first["selection"]["f_distance_range"]);
}

async fn select_everything(app: &axum::Router) {
    let r = post(app, "/select", json!({ "frame": 0, "patch": centre_rect(12, 12), "thr": 1e6 })).await;
    assert_eq!(r.status, StatusCode::OK);
}

#[tokio::test]
async fn context_round_trip_and_stale_imports() {
    let fx = dataset();
    let (_, app) = app(&fx);
    let early = post(&app, "/context/export", json!({})).await;
    assert_eq!(early.code(), "no_selection");
    select_everything(&app).await;
    let no_grid = post(
        &app,
        "/context/import",
        json!({ "provenance": { "session": "session", "field_version": 0, "epoch": 0 }, "mosaic_png": "" }),
    )
    .await;
    assert_eq!(no_grid.status, StatusCode::CONFLICT);

    let e0 = post(&app, "/context/export", json!({})).await;
    assert_eq!(e0.status, StatusCode::OK);
    let e0 = e0.json();
    assert_eq!((e0["width"].as_u64(), e0["height"].as_u64()), (Some(24), Some(24)));
    assert_eq!(
        e0["roles"],
        json!(["editable_masked", "editable_masked", "editable_masked", "editable_masked"])
    );
    assert!(e0["sidecar"].as_str().unwrap().contains("epoch=0"));
    let (w, h, mut rgb) = decode_rgb8(&png(&e0["rgb_png"])).unwrap();
    let (_, _, mask) = decode_mask(&png(&e0["mask_png"])).unwrap();
    permute_channels(&mut rgb, &mask).unwrap();
    let edited = encode_rgb8(w, h, &rgb).unwrap();
    let body = |prov: &serde_json::Value, png_bytes: &[u8]| json!({ "provenance": prov, "mosaic_png": base64_str(png_bytes) });

    let mut wrong = e0["provenance"].clone();
    wrong["epoch"] = json!(1);
    let stale = post(&app, "/context/import", body(&wrong, &edited)).await;
    assert_eq!(stale.status, StatusCode::GONE);
    assert_eq!(stale.code(), "stale_provenance");

    let small = encode_rgb8(12, 12, &vec![0.5; 12 * 12 * 3]).unwrap();
    let resized = post(&app, "/context/import", body(&e0["provenance"], &small)).await;
    assert_eq!(resized.status, StatusCode::UNPROCESSABLE_ENTITY);

    let ok = post(&app, "/context/import", body(&e0["provenance"], &edited)).await;
    assert_eq!(ok.status, StatusCode::OK);
    let ok = ok.json();
    assert_eq!(ok["recorded"].as_array().unwrap().len(), 4);
    assert_eq!(ok["next"], "next_epoch");

    let replay = post(&app, "/context/import", body(&e0["provenance"], &edited)).await;
    assert_eq!(replay.status, StatusCode::GONE);

    let e1 = post(&app, "/context/export", json!({})).await.json();
    assert_eq!(e1["epoch"], 1);
    assert_eq!(e1["roles"][0], "guidance_fixed");
    let old = post(&app, "/context/import", body(&e0["provenance"], &edited)).await;
    assert_eq!(old.status, StatusCode::GONE);

    let scene = get(&app, "/scene").await.json();
    assert_eq!(scene["context"]["epoch"], 1);
    assert_eq!(scene["context"]["edited_views"].as_array().unwrap().len(), 4);

    let restart = post(&app, "/context/export", json!({ "restart": true })).await.json();
    assert_eq!(restart["epoch"], 0);
}

fn base64_str(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

#[tokio::test]
async fn imports_go_stale_when_the_field_changes() {
    let fx = dataset();
    let (_, app) = app(&fx);
    select_everything(&app).await;
    let e0 = post(&app, "/context/export", json!({})).await.json();
    let job = post(
        &app,
        "/jobs",
        json!({ "kind": "pretrain", "config": { "iterations": 2, "rays_per_batch": 8, "samples_per_ray": 8 } }),
    )
    .await;
    assert_eq!(job.status, StatusCode::ACCEPTED);
    let done = wait_job(&app, job.json()["id"].as_u64().unwrap(), Duration::from_secs(60)).await;
    assert_eq!(done["state"], "done", "{done}");
    let r = post(
        &app,
        "/context/import",
        json!({ "provenance": e0["provenance"], "mosaic_png": e0["rgb_png"] }),
    )
    .await;
    assert_eq!(r.status, StatusCode::GONE);
    let again = post(&app, "/context/export", json!({})).await.json();
    assert_eq!(again["epoch"], 0);
    assert_eq!(again["provenance"]["field_version"], done["result"]["version"]);
    let r = post(
        &app,
        "/context/import",
        json!({ "provenance": again["provenance"], "mosaic_png": again["rgb_png"] }),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
}

#[tokio::test]
async fn pretrain_job_publishes_a_snapshot_and_reports_progress() {
    let fx = dataset();
    let (state, app) = app(&fx);
    let bad = post(&app, "/jobs", json!({ "kind": "pretrain", "config": { "iterations": 0 } })).await;
    assert_eq!(bad.status, StatusCode::UNPROCESSABLE_ENTITY);
    let unknown = post(&app, "/jobs", json!({ "kind": "pretrain", "config": { "iters": 5 } })).await;
    assert_eq!(unknown.status, StatusCode::UNPROCESSABLE_ENTITY);
    let regime = post(&app, "/jobs", json!({ "kind": "pretrain", "config": { "regime": "finetune" } })).await;
    assert_eq!(regime.status, StatusCode::UNPROCESSABLE_ENTITY);
    let kind = post(&app, "/jobs", json!({ "kind": "sculpt" })).await;
    assert_eq!(kind.status, StatusCode::UNPROCESSABLE_ENTITY);

    let r = post(
        &app,
        "/jobs",
        json!({ "kind": "pretrain", "config": { "iterations": 6, "rays_per_batch": 16, "samples_per_ray": 8, "checkpoint_interval": 3, "weights": { "lambda1": 0.0 } } }),
    )
    .await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let id = r.json()["id"].as_u64().unwrap();
    let done = wait_job(&app, id, Duration::from_secs(60)).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["iteration"], 6);
    assert_eq!(done["total"], 6);
    assert_eq!(done["result"]["version"], 2);
    assert_eq!(state.active_version(), 2);
    let scene = get(&app, "/scene").await.json();
    assert_eq!(scene["versions"], json!([0, 1, 2]));

    let ck = get(&app, "/checkpoint/2").await;
    assert_eq!(ck.status, StatusCode::OK);
    assert_eq!(ck.headers["content-type"], "application/octet-stream");
    let (field, metrics) = read_checkpoint(&ck.bytes).unwrap();
    assert_eq!(field, *state.active_field());
    assert_eq!(metrics["iterations"], "6");
    assert_eq!(get(&app, "/checkpoint/9").await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/checkpoint/x").await.status, StatusCode::UNPROCESSABLE_ENTITY);
    let old = post(&app, "/render", json!({ "frame": 0, "version": 0 })).await.json();
    assert_eq!(old["version"], 0);
}

#[tokio::test]
async fn one_training_job_at_a_time_and_cancellation() {
    let fx = dataset();
    let (_, app) = app(&fx);
    let long = json!({ "kind": "pretrain", "config": { "iterations": 1_000_000, "rays_per_batch": 4, "samples_per_ray": 4 } });
    let first = post(&app, "/jobs", long.clone()).await;
    assert_eq!(first.status, StatusCode::ACCEPTED);
    let id = first.json()["id"].as_u64().unwrap();
    let second = post(&app, "/jobs", long).await;
    assert_eq!(second.status, StatusCode::CONFLICT);
    assert_eq!(second.code(), "job_running");

    let mut last = 0;
    for _ in 0..5 {
        let v = get(&app, &format!("/jobs/{id}")).await.json();
        let it = v["iteration"].as_u64().unwrap();
        assert!(it >= last);
        last = it;
        std::thread::sleep(Duration::from_millis(10));
    }
    let c = send(&app, "DELETE", &format!("/jobs/{id}"), None, None).await;
    assert_eq!(c.status, StatusCode::OK);
    let end = wait_job(&app, id, Duration::from_secs(30)).await;
    assert_eq!(end["state"], "cancelled");
    let again = send(&app, "DELETE", &format!("/jobs/{id}"), None, None).await.json();
    assert_eq!(again["state"], "cancelled");
    assert_eq!(get(&app, "/jobs/77").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn edit_jobs_need_a_selection_and_edited_views() {
    let fx = dataset();
    let (_, app) = app(&fx);
    let r = post(&app, "/jobs", json!({ "kind": "edit_residual" })).await;
    assert_eq!(r.code(), "no_selection");
    select_everything(&app).await;
    let r = post(&app, "/jobs", json!({ "kind": "finetune" })).await;
    assert_eq!(r.code(), "no_edited_views");
    let r = post(&app, "/jobs", json!({ "kind": "bake_mask", "resolution": 0 })).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = post(&app, "/jobs", json!({ "kind": "pretrain", "resolution": 8 })).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn bake_job_attaches_a_grid_to_the_selection() {
    let fx = dataset();
    let (state, app) = app(&fx);
    select_everything(&app).await;
    let id = post(&app, "/jobs", json!({ "kind": "bake_mask", "resolution": 6 })).await.json()["id"]
        .as_u64()
        .unwrap();
    let done = wait_job(&app, id, Duration::from_secs(30)).await;
    assert_eq!(done["state"], "done");
    assert_eq!(done["result"]["applied"], true);
    assert_eq!(state.selection().unwrap().baked.unwrap().resolution, 6);
    assert_eq!(get(&app, "/scene").await.json()["selection"]["baked_version"], 0);
}

/// Runs one context epoch and an edit job; returns the new layer id.
async fn make_layer(app: &axum::Router) -> u64 {
    select_everything(app).await;
    let e0 = post(app, "/context/export", json!({})).await.json();
    let (w, h, mut rgb) = decode_rgb8(&png(&e0["rgb_png"])).unwrap();
    rgb.iter_mut().for_each(|v| *v = 1.0 - *v);
    let body = json!({ "provenance": e0["provenance"], "mosaic_png": base64_str(&encode_rgb8(w, h, &rgb).unwrap()) });
    assert_eq!(post(app, "/context/import", body).await.status, StatusCode::OK);
    let job = post(
        app,
        "/jobs",
        json!({ "kind": "edit_residual", "label": "invert", "edit_kind": "color", "config": { "iterations": 3, "rays_per_batch": 16, "samples_per_ray": 8 } }),
    )
    .await;
    assert_eq!(job.status, StatusCode::ACCEPTED, "{:?}", job.json());
    let done = wait_job(app, job.json()["id"].as_u64().unwrap(), Duration::from_secs(60)).await;
    assert_eq!(done["state"], "done", "{done}");
    done["result"]["layer"].as_u64().unwrap()
}

#[tokio::test]
async fn layer_management() {
    let fx = dataset();
    let (state, app) = app(&fx);
    let a = make_layer(&app).await;
    let b = make_layer(&app).await;
    assert_ne!(a, b);
    let list = get(&app, "/layers").await.json();
    assert_eq!(list.as_array().unwrap().len(), 2);
    assert_eq!(list[0]["label"], "invert");
    assert_eq!(list[0]["kind"], "color");
    assert!(list[0]["bytes"].as_u64().unwrap() <= 4096);

    let t = post(&app, &format!("/layers/{a}/toggle"), json!(null)).await.json();
    assert_eq!(t, json!({ "id": a, "enabled": false }));
    assert!(!state.stack().get(a).unwrap().enabled);

    let r = post(&app, "/layers/reorder", json!({ "order": [b, a] })).await.json();
    assert_eq!(r[0]["id"], b);
    let bad = post(&app, "/layers/reorder", json!({ "order": [b] })).await;
    assert_eq!(bad.status, StatusCode::UNPROCESSABLE_ENTITY);

    let d = send(&app, "DELETE", &format!("/layers/{b}"), None, None).await.json();
    assert_eq!(d.as_array().unwrap().len(), 1);
    assert_eq!(
        send(&app, "DELETE", &format!("/layers/{b}"), None, None).await.status,
        StatusCode::NOT_FOUND
    );
    assert_eq!(post(&app, "/layers/55/toggle", json!(null)).await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn retries_with_the_same_key_apply_once() {
    let fx = dataset();
    let (state, app) = app(&fx);
    let a = make_layer(&app).await;
    let uri = format!("/layers/{a}/toggle");
    let first = send(&app, "POST", &uri, None, Some("k1")).await;
    let retry = send(&app, "POST", &uri, None, Some("k1")).await;
    assert_eq!(first.bytes, retry.bytes);
    assert_eq!(retry.headers["idempotent-replay"], "true");
    assert!(!state.stack().get(a).unwrap().enabled);
    send(&app, "POST", &uri, None, Some("k2")).await;
    assert!(state.stack().get(a).unwrap().enabled);

    let j1 = send(
        &app,
        "POST",
        "/jobs",
        Some(json!({ "kind": "bake_mask", "resolution": 2 })),
        Some("bake"),
    )
    .await;
    let j2 = send(
        &app,
        "POST",
        "/jobs",
        Some(json!({ "kind": "bake_mask", "resolution": 2 })),
        Some("bake"),
    )
    .await;
    assert_eq!(j1.json()["id"], j2.json()["id"]);
    let clash = send(
        &app,
        "POST",
        "/jobs",
        Some(json!({ "kind": "bake_mask", "resolution": 3 })),
        Some("bake"),
    )
    .await;
    assert_eq!(clash.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(clash.code(), "idempotency_key_reused");
}

#[tokio::test]
async fn cors_headers_are_sent() {
    let fx = dataset();
    let (_, app) = app(&fx);
    use tower::ServiceExt;
    let req = axum::http::Request::builder()
        .method("OPTIONS")
        .uri("/render")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(axum::body::Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}

#[tokio::test]
async fn unknown_routes_are_json_errors() {
    let fx = dataset();
    let (_, app) = app(&fx);
    let r = get(&app, "/nope").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.code(), "no_route");
}
