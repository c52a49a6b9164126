use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use boxsnake::data_io::Dataset;
use boxsnake::geometry::{BBox, Contour, Point};
use boxsnake::image::Image;
use boxsnake::model::{Model, ModelConfig};
use boxsnake_service::{router, AppState, Health, ImageInfo, PredictResponse, RefineResponse, Session, SessionCreated};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn model() -> Model<f32> {
    Model::init(ModelConfig::default(), 21).unwrap()
}

fn picture(seed: u32) -> Image {
    let mut img = Image::filled(96, 80, [0.15, 0.2, 0.25]).unwrap();
    for y in 0..80 {
        for x in 0..96 {
            let (dx, dy) = (x as f32 - 45.0 - seed as f32, y as f32 - 38.0);
            if dx * dx / 400.0 + dy * dy / 225.0 < 1.0 {
                img.set(0, x, y, 0.9);
                img.set(1, x, y, 0.7);
            }
        }
    }
    // what a PNG upload decodes to
    Image::decode_png(&img.encode_png().unwrap()).unwrap()
}

fn app() -> (Router, Arc<AppState>) {
    let st = Arc::new(AppState::new(model()));
    (router(Arc::clone(&st)), st)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    call(app, req).await
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn put_png(app: &Router, img: &Image, id: Option<u64>) -> (StatusCode, Vec<u8>) {
    let b = "XboundaryX";
    let mut body = Vec::new();
    if let Some(id) = id {
        body.extend(format!("--{b}\r\nContent-Disposition: form-data; name=\"id\"\r\n\r\n{id}\r\n").bytes());
    }
    body.extend(format!("--{b}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"a.png\"\r\nContent-Type: image/png\r\n\r\n").bytes());
    body.extend(img.encode_png().unwrap());
    body.extend(format!("\r\n--{b}--\r\n").bytes());
    let req = Request::put("/images").header("content-type", format!("multipart/form-data; boundary={b}")).body(Body::from(body)).unwrap();
    call(app, req).await
}

fn parse<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> T {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}

fn pairs(c: &Contour) -> Vec<[f64; 2]> {
    c.vertices().iter().map(|p| [p.x, p.y]).collect()
}

const BOX: [f64; 4] = [24.0, 22.0, 67.0, 55.0];

#[tokio::test]
async fn health_and_image_round_trip() {
    let (app, _) = app();
    let (s, body) = get(&app, "/health").await;
    assert_eq!(s, StatusCode::OK);
    let h: Health = parse(&body);
    assert_eq!((h.status.as_str(), h.k, h.s), ("ok", 128, 1.5));
    let img = picture(0);
    let (s, body) = put_png(&app, &img, None).await;
    assert_eq!(s, StatusCode::OK);
    let info: ImageInfo = parse(&body);
    assert_eq!((info.image_id, info.width, info.height), (1, 96, 80));
    let (s, png) = get(&app, "/images/1").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(Image::decode_png(&png).unwrap(), img);
    assert_eq!(get(&app, "/images/9").await.0, StatusCode::NOT_FOUND);
    let (s, body) = put_png(&app, &img, Some(40)).await;
    assert_eq!((s, parse::<ImageInfo>(&body).image_id), (StatusCode::OK, 40));
    let req = Request::put("/images").header("content-type", "multipart/form-data; boundary=q").body(Body::from("--q--\r\n")).unwrap();
    assert_eq!(call(&app, req).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn predict_matches_the_library() {
    let (app, st) = app();
    let img = picture(0);
    put_png(&app, &img, Some(3)).await;
    let (s, body) = post(&app, "/predict", json!({"imageId": 3, "bbox": BOX})).await;
    assert_eq!(s, StatusCode::OK);
    let r: PredictResponse = parse(&body);
    let lib = st.model().predict_contour(&img, &BBox::new(BOX[0], BOX[1], BOX[2], BOX[3]).unwrap()).unwrap();
    assert_eq!(r.vertices.len(), 128);
    assert_eq!(r.vertices, pairs(&lib));
    assert_eq!((r.session_id.as_str(), r.session_instance_id.as_str()), ("s1", "s1-i1"));

    // vertex-count override shares the weights
    let (s, body) = post(&app, "/predict", json!({"imageId": 3, "bbox": BOX, "K": 64})).await;
    assert_eq!(s, StatusCode::OK);
    let r64: PredictResponse = parse(&body);
    let mut m64 = model();
    m64.config.head.k = 64;
    let lib64 = m64.predict_contour(&img, &BBox::new(BOX[0], BOX[1], BOX[2], BOX[3]).unwrap()).unwrap();
    assert_eq!(r64.vertices, pairs(&lib64));
    assert_eq!(r64.session_instance_id, "s1-i2");
}

#[tokio::test]
async fn predict_errors() {
    let (app, _) = app();
    put_png(&app, &picture(0), Some(1)).await;
    let status = |v: Value| {
        let app = app.clone();
        async move { post(&app, "/predict", v).await.0 }
    };
    assert_eq!(status(json!({"imageId": 1, "bbox": [30, 10, 20, 40]})).await, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(status(json!({"imageId": 1, "bbox": [300, 300, 320, 340]})).await, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(status(json!({"imageId": 2, "bbox": BOX})).await, StatusCode::NOT_FOUND);
    assert_eq!(status(json!({"imageId": 1, "bbox": BOX, "s": 1.9})).await, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(status(json!({"imageId": 1, "bbox": BOX, "K": 30})).await, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(status(json!({"imageId": 1, "bbox": BOX, "sessionId": "s77"})).await, StatusCode::NOT_FOUND);
    assert_eq!(status(json!({"imageId": 1})).await, StatusCode::BAD_REQUEST);
    assert_eq!(status(json!({"imageId": 1, "bbox": BOX, "extra": true})).await, StatusCode::BAD_REQUEST);
    // a session is tied to its image
    put_png(&app, &picture(1), Some(2)).await;
    let (_, body) = post(&app, "/sessions", json!({"imageId": 2})).await;
    let sid = parse::<SessionCreated>(&body).session_id;
    assert_eq!(status(json!({"imageId": 1, "bbox": BOX, "sessionId": sid})).await, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn refine_contract() {
    let (app, st) = app();
    let img = picture(0);
    put_png(&app, &img, Some(1)).await;
    let r: PredictResponse = parse(&post(&app, "/predict", json!({"imageId": 1, "bbox": BOX})).await.1);
    let id = r.session_instance_id.clone();

    let all = vec![true; 128];
    let (s, body) = post(&app, "/refine", json!({"sessionInstanceId": id, "vertices": r.vertices, "pinned": all})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(parse::<RefineResponse>(&body).vertices, r.vertices);

    let mut edited = r.vertices.clone();
    edited[5] = [edited[5][0] + 3.0, edited[5][1] - 2.0];
    let pinned: Vec<bool> = (0..128).map(|i| i == 5 || i % 17 == 0).collect();
    let (s, body) = post(&app, "/refine", json!({"sessionInstanceId": id, "vertices": edited, "pinned": pinned})).await;
    assert_eq!(s, StatusCode::OK);
    let out = parse::<RefineResponse>(&body).vertices;
    let prior = Contour::from_ring(edited.iter().map(|&[x, y]| Point::new(x, y)).collect()).unwrap();
    let b = BBox::new(BOX[0], BOX[1], BOX[2], BOX[3]).unwrap();
    let lib = st.model().refine_with_edits(&img, &b, &prior, &pinned).unwrap();
    assert_eq!(out, pairs(&lib));
    for (i, p) in pinned.iter().enumerate() {
        if *p {
            assert_eq!(out[i], edited[i]);
        }
    }

    let (s, _) = post(&app, "/refine", json!({"sessionInstanceId": id, "vertices": &edited[..100], "pinned": &pinned[..100]})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = post(&app, "/refine", json!({"sessionInstanceId": id, "vertices": edited, "pinned": &pinned[..127]})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    for bad in ["s1-i9", "s5-i1", "nonsense"] {
        let (s, _) = post(&app, "/refine", json!({"sessionInstanceId": bad, "vertices": edited, "pinned": pinned})).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{bad}");
    }

    let session: Session = parse(&get(&app, "/sessions/s1").await.1);
    assert_eq!(session.history.len(), 3);
    assert_eq!(session.instances[0].vertices, out);
    assert_eq!(session.instances[0].pinned, pinned);
    assert_eq!(session.replay(), session);
}

#[tokio::test]
async fn export_contract() {
    let (app, _) = app();
    put_png(&app, &picture(0), Some(4)).await;
    let (_, body) = post(&app, "/sessions", json!({"imageId": 4})).await;
    let empty = parse::<SessionCreated>(&body).session_id;
    let (s, body) = get(&app, &format!("/export/{empty}")).await;
    assert_eq!(s, StatusCode::OK);
    let ds = Dataset::from_json(std::str::from_utf8(&body).unwrap()).unwrap();
    assert!(ds.instances.is_empty());
    assert_eq!(ds.images[0].id, 4);

    let r: PredictResponse = parse(&post(&app, "/predict", json!({"imageId": 4, "bbox": BOX, "category": "blob"})).await.1);
    let (s, body) = get(&app, &format!("/export/{}", r.session_id)).await;
    assert_eq!(s, StatusCode::OK);
    let ds = Dataset::from_json(std::str::from_utf8(&body).unwrap()).unwrap();
    assert_eq!(ds.instances.len(), 1);
    assert_eq!(ds.categories, vec!["blob".to_string()]);
    let ring = &ds.instances[0].polygons.rings()[0];
    assert_eq!(ring.len(), r.vertices.len());
    // the export clamps to the 96x80 image
    for (p, q) in ring.vertices().iter().zip(r.vertices.iter().map(|q| [q[0].clamp(0.0, 96.0), q[1].clamp(0.0, 80.0)])) {
        assert!((p.x - q[0]).abs() <= 0.005 + 1e-12 && (p.y - q[1]).abs() <= 0.005 + 1e-12, "{p:?} vs {q:?}");
    }
    // exporting the loaded manifest again is byte-identical
    assert_eq!(ds.to_json().as_bytes(), &body[..]);
    assert_eq!(get(&app, "/export/s99").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_sessions_match_serial_results() {
    let (app, _) = app();
    for id in 1..=4 {
        put_png(&app, &picture(id as u32), Some(id)).await;
    }
    let boxes: Vec<[f64; 4]> = (0..4).map(|i| [20.0 + i as f64, 20.0, 66.0 + i as f64, 56.0]).collect();
    let serial_app = app.clone();
    let mut serial = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let r: PredictResponse = parse(&post(&serial_app, "/predict", json!({"imageId": i + 1, "bbox": b})).await.1);
        serial.push(r.vertices);
    }
    let (par_app, _) = self::app();
    for id in 1..=4 {
        put_png(&par_app, &picture(id as u32), Some(id)).await;
    }
    let handles: Vec<_> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (a, body) = (par_app.clone(), json!({"imageId": i + 1, "bbox": b}));
            tokio::spawn(async move { parse::<PredictResponse>(&post(&a, "/predict", body).await.1).vertices })
        })
        .collect();
    for (h, s) in handles.into_iter().zip(serial) {
        assert_eq!(h.await.unwrap(), s);
    }
}

#[tokio::test]
async fn replaying_requests_reproduces_the_export() {
    async fn session_log(app: &Router) -> Vec<u8> {
        put_png(app, &picture(0), None).await;
        let r: PredictResponse = parse(&post(app, "/predict", json!({"imageId": 1, "bbox": BOX})).await.1);
        let mut v = r.vertices.clone();
        v[0][0] += 1.5;
        let pinned: Vec<bool> = (0..128).map(|i| i == 0).collect();
        post(app, "/refine", json!({"sessionInstanceId": r.session_instance_id, "vertices": v, "pinned": pinned})).await;
        post(app, "/predict", json!({"imageId": 1, "bbox": [10, 10, 40, 40]})).await;
        get(app, "/export/s1").await.1
    }
    let (a, _) = app();
    let (b, _) = app();
    assert_eq!(session_log(&a).await, session_log(&b).await);
}

#[tokio::test]
async fn snapshot_restores_sessions() {
    let (app, st) = app();
    put_png(&app, &picture(0), Some(1)).await;
    post(&app, "/predict", json!({"imageId": 1, "bbox": BOX})).await;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sessions.json");
    st.save_snapshot(&path).unwrap();
    let fresh = AppState::new(model());
    fresh.load_snapshot(&path).unwrap();
    assert_eq!(fresh.snapshot(), st.snapshot());
    assert_eq!(fresh.export("s1").unwrap(), st.export("s1").unwrap());
    // new sessions continue the numbering
    fresh.register_image(Some(1), picture(0));
    assert_eq!(fresh.create_session(1).unwrap(), "s2");
}
