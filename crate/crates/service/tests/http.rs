use std::sync::Arc;

use candle_core::Device;
use guidecot::cot::{Seq2Seq, SeqModelConfig};
use guidecot::dataset::{synth_dataset, LayoutKind, SceneGroup, SceneLayout, SynthSceneSpec, WindowConfig};
use guidecot::goal::{GoalModel, GoalModelConfig};
use guidecot::guidance::GuidanceSpec;
use guidecot_service::api::*;
use guidecot_service::error::ErrorBody;
use guidecot_service::{read_runs, router, Engine, Models, ServiceConfig};
use serde_json::json;

fn tiny_llm() -> Seq2Seq {
    let cfg = SeqModelConfig {
        d_model: 16,
        heads: 2,
        d_ff: 32,
        encoder_layers: 1,
        decoder_layers: 1,
        max_target_len: 12,
        ..SeqModelConfig::toy()
    };
    Seq2Seq::new(cfg, &Device::Cpu).unwrap()
}

fn models() -> Models {
    Models::new(GoalModel::new(GoalModelConfig::desk(), &Device::Cpu).unwrap(), tiny_llm()).unwrap()
}

fn engine(with_models: bool, config: ServiceConfig) -> Arc<Engine> {
    let layout = SceneLayout {
        kind: LayoutKind::Plaza,
        num_pedestrians: 16,
        num_frames: 80,
        ..SceneLayout::plaza()
    };
    let ds = synth_dataset(
        &[SynthSceneSpec {
            id: "plaza".into(),
            group: SceneGroup::Zara1,
            layout,
            seed: 4,
        }],
        &WindowConfig::default(),
    )
    .unwrap();
    Arc::new(Engine::new(config, ds, with_models.then(models)).unwrap())
}

async fn spawn(engine: Arc<Engine>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(engine)).await.unwrap() });
    format!("http://{addr}")
}

/// A window with at least two pedestrians, for group guidance.
fn busy_window(e: &Engine) -> (String, i64) {
    let w = e.dataset().windows.iter().find(|w| w.num_pedestrians() >= 2).unwrap();
    (w.id(), w.pedestrian_ids[1])
}

fn small_config() -> ServiceConfig {
    ServiceConfig {
        default_k: 4,
        ..Default::default()
    }
}

#[tokio::test]
async fn health_scenes_and_windows() {
    let e = engine(true, small_config());
    let base = spawn(e.clone()).await;
    let c = reqwest::Client::new();
    let h: Health = c.get(format!("{base}/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(h.status, "ok");
    assert!(h.models_loaded);
    assert_eq!(h.checkpoints.unwrap().goal.len(), 64);

    let scenes: Vec<SceneSummary> = c.get(format!("{base}/scenes")).send().await.unwrap().json().await.unwrap();
    assert_eq!(scenes.len(), 1);
    assert_eq!(scenes[0].group, "zara1");
    assert!(scenes[0].num_windows > 0);

    let img = c.get(format!("{base}/scenes/plaza/image")).send().await.unwrap();
    assert_eq!(img.headers()["content-type"], "image/png");
    assert_eq!(&img.bytes().await.unwrap()[..4], b"\x89PNG");

    let ws: Vec<WindowSummary> = c.get(format!("{base}/scenes/plaza/windows")).send().await.unwrap().json().await.unwrap();
    assert_eq!(ws.len(), scenes[0].num_windows);
    assert_eq!(ws[0].past[0].world.len(), 8);
    assert_eq!(ws[0].past[0].pixel.len(), 8);

    let missing = c.get(format!("{base}/scenes/nope/windows")).send().await.unwrap();
    assert_eq!(missing.status(), 404);
}

#[tokio::test]
async fn unloaded_model_is_503_until_reload() {
    let dir = tempfile::tempdir().unwrap();
    let m = models();
    let (gp, lp) = (dir.path().join("goal.safetensors"), dir.path().join("llm.safetensors"));
    m.goal.save(&gp).unwrap();
    m.llm.save(&lp).unwrap();

    let e = engine(false, small_config());
    let (wid, _) = busy_window(&e);
    let base = spawn(e.clone()).await;
    let c = reqwest::Client::new();
    let req = json!({"window_id": wid, "pedestrian": 0, "seed": 1});
    let r = c.post(format!("{base}/predict")).json(&req).send().await.unwrap();
    assert_eq!(r.status(), 503);
    let h: Health = c.get(format!("{base}/health")).send().await.unwrap().json().await.unwrap();
    assert!(!h.models_loaded);

    let r = c
        .post(format!("{base}/reload"))
        .json(&json!({"goal_checkpoint": gp, "llm_checkpoint": lp}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 200);
    let h: Health = r.json().await.unwrap();
    assert_eq!(h.checkpoints.unwrap(), m.hashes);
    let r = c.post(format!("{base}/predict")).json(&req).send().await.unwrap();
    assert_eq!(r.status(), 200);

    // Reloading clears the logit cache.
    assert!(e.cached_logit_entries() > 0);
    let r = c.post(format!("{base}/reload")).json(&json!({"goal_checkpoint": gp, "llm_checkpoint": lp})).send().await.unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(e.cached_logit_entries(), 0);
}

#[tokio::test]
async fn zero_lambda_and_none_give_identical_bodies() {
    let e = engine(true, small_config());
    let (wid, _) = busy_window(&e);
    let base = spawn(e).await;
    let c = reqwest::Client::new();
    let a = c
        .post(format!("{base}/guided_predict"))
        .json(&json!({"window_id": wid, "pedestrian": 0, "seed": 9,
                      "guidance": {"kind": "direction", "theta": 1.5707963, "theta_max": 1.0471976, "lambda": 0.0}}))
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap();
    let b = c
        .post(format!("{base}/guided_predict"))
        .json(&json!({"window_id": wid, "pedestrian": 0, "seed": 9, "guidance": {"kind": "none"}}))
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap();
    let p = c
        .post(format!("{base}/predict"))
        .json(&json!({"window_id": wid, "pedestrian": 0, "seed": 9}))
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(a, p);
    let r: PredictResponse = serde_json::from_slice(&a).unwrap();
    assert_eq!(r.trajectories.len(), 4);
    assert_eq!(r.goals.len(), 4);
    for t in &r.trajectories {
        assert_eq!(t.world.len(), 12);
        assert_eq!(t.pixel.len(), 12);
    }
    assert!(r.probability_map.rows <= 64 && r.probability_map.cols <= 64);
    assert_eq!(r.probability_map.values.len(), r.probability_map.rows * r.probability_map.cols);
    assert!(r.probability_map.values.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[tokio::test]
async fn validation_errors_name_the_field() {
    let e = engine(true, small_config());
    let (wid, _) = busy_window(&e);
    let base = spawn(e).await;
    let c = reqwest::Client::new();
    let cases = [
        (json!({"window_id": wid, "pedestrian": 0, "guidance": {"kind": "direction", "theta": 1.0, "theta_max": 1.0, "lambda": -1.0}}), "lambda"),
        (json!({"window_id": wid, "pedestrian": 0, "guidance": {"kind": "group", "neighbor_id": 1, "d_max": 0.0, "target": "predicted_goal", "lambda": 1.0}}), "d_max"),
        (json!({"window_id": wid, "pedestrian": 999, "guidance": {"kind": "none"}}), "pedestrian"),
        (json!({"window_id": wid, "pedestrian": 0, "k": 0, "guidance": {"kind": "none"}}), "k"),
        (json!({"window_id": wid, "pedestrian": 0}), "guidance"),
    ];
    for (body, field) in cases {
        let r = c.post(format!("{base}/guided_predict")).json(&body).send().await.unwrap();
        assert_eq!(r.status(), 422, "{body}");
        let e: ErrorBody = r.json().await.unwrap();
        assert_eq!(e.field.as_deref(), Some(field), "{}", e.error);
    }
    let r = c
        .post(format!("{base}/guided_predict"))
        .json(&json!({"window_id": "nope/1", "pedestrian": 0, "guidance": {"kind": "none"}}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 404);
}

#[tokio::test]
async fn server_generated_seed_is_echoed_and_reproducible() {
    let e = engine(true, small_config());
    let (wid, _) = busy_window(&e);
    let base = spawn(e).await;
    let c = reqwest::Client::new();
    let first: PredictResponse = c
        .post(format!("{base}/predict"))
        .json(&json!({"window_id": wid, "pedestrian": 0}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let again: PredictResponse = c
        .post(format!("{base}/predict"))
        .json(&json!({"window_id": wid, "pedestrian": 0, "seed": first.seed}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(first, again);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fifty_concurrent_guided_requests_are_deterministic_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(
        true,
        ServiceConfig {
            run_dir: Some(dir.path().to_path_buf()),
            ..small_config()
        },
    );
    let (wid, neighbor) = busy_window(&e);
    let base = spawn(e.clone()).await;
    let c = reqwest::Client::new();
    let body = |n: u64| {
        let guidance = match n % 3 {
            0 => GuidanceSpec::direction(1.0, 4.0),
            1 => GuidanceSpec::group(neighbor, 5.0, 2.0),
            _ => GuidanceSpec::explicit_goal([10.5, 20.5], 4.0, 8.0),
        };
        json!({"window_id": wid, "pedestrian": 0, "seed": n % 5, "guidance": guidance})
    };
    let tasks: Vec<_> = (0..50u64)
        .map(|n| {
            let c = c.clone();
            let url = format!("{base}/guided_predict");
            let b = body(n);
            tokio::spawn(async move {
                let r = c.post(url).json(&b).send().await.unwrap();
                assert_eq!(r.status(), 200);
                (n, r.bytes().await.unwrap())
            })
        })
        .collect();
    let mut results = Vec::new();
    for t in tasks {
        results.push(t.await.unwrap());
    }
    // Same (guidance, seed) pair gives the same body regardless of interleaving.
    for (n, bytes) in &results {
        let again = c.post(format!("{base}/guided_predict")).json(&body(*n)).send().await.unwrap().bytes().await.unwrap();
        assert_eq!(bytes, &again, "request {n}");
    }

    // Every line of the log is one intact record; replay reproduces each response.
    let records = read_runs(&dir.path().join("runs.jsonl")).unwrap();
    assert_eq!(records.len(), 100);
    for r in records.iter().step_by(7) {
        assert_eq!(r.endpoint, "guided_predict");
        let replayed = e.replay(r).await.unwrap();
        assert_eq!(replayed, r.response);
    }
    let text = std::fs::read_to_string(dir.path().join("runs.jsonl")).unwrap();
    let back: guidecot_service::RunRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(back, records[0]);
}

#[tokio::test]
async fn guided_requests_reuse_cached_logits() {
    let e = engine(true, small_config());
    let w = e.dataset().windows.iter().find(|w| w.num_pedestrians() >= 2).unwrap().clone();
    let base = spawn(e.clone()).await;
    let c = reqwest::Client::new();
    let send = |lambda: f64| {
        c.post(format!("{base}/guided_predict"))
            .json(&json!({"window_id": w.id(), "pedestrian": 0, "seed": 1, "guidance": GuidanceSpec::direction(1.0, lambda)}))
            .send()
    };
    assert_eq!(send(0.0).await.unwrap().status(), 200);
    assert_eq!(e.cached_logit_entries(), w.num_pedestrians());
    let base_resp: PredictResponse = send(0.0).await.unwrap().json().await.unwrap();
    assert_eq!(send(8.0).await.unwrap().status(), 200);
    assert_eq!(e.cached_logit_entries(), w.num_pedestrians());
    // Guidance never leaks into the cached maps.
    let after: PredictResponse = send(0.0).await.unwrap().json().await.unwrap();
    assert_eq!(base_resp, after);
}
