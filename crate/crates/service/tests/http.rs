use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use gradecast::models::{
    load_registry, save_artifact, Family, FeatureMode, HyperGrid, ModelArtifact, Params, Registry, RidgeModel, TrainConfig,
};
use gradecast::pipeline::{train_target, PipelineConfig};
use gradecast::synth::{generate, GeneratorSpec};
use gradecast_service::api::{self, ExplainRequest, GradeInput, Override, PredictRequest, TranscriptRow, WhatIfRequest};
use gradecast_service::router;
use http_body_util::BodyExt;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tower::ServiceExt;

const LINEAR: &str = "LIN";
const LINEAR_WEIGHTS: [f64; 3] = [0.45, 0.3, 0.15];
const LINEAR_INTERCEPT: f64 = 0.3;
const SINGLE: &str = "ONE";

struct Fixture {
    root: PathBuf,
    registry: Arc<Registry>,
    /// Target course of the trained models and its priors.
    target: String,
    priors: Vec<String>,
}

fn linear_priors() -> Vec<String> {
    vec!["P01".into(), "P02".into(), "P03".into()]
}

fn ridge_artifact(target: &str, priors: &[String], weights: &[f64], intercept: f64) -> ModelArtifact {
    let model = RidgeModel {
        mode: FeatureMode::PriorGrades,
        lambda: 1e-8,
        weights: weights.to_vec(),
        intercept,
        standardizer: None,
    };
    let mut a = ModelArtifact::new(Family::CsrPriorCourses, target, priors, Params::Ridge(model));
    a.tau_inv = 0.04;
    a
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("service-registry");
        let _ = fs::remove_dir_all(&root);
        let data = generate(&GeneratorSpec {
            n_students: 300,
            ..GeneratorSpec::bench_small(7)
        })
        .unwrap();
        let entry = &data.catalog[0];
        let cfg = PipelineConfig {
            grid: HyperGrid::bench(),
            train: TrainConfig {
                max_iterations: 300,
                ..TrainConfig::default()
            },
            mc_samples: 30,
            families: vec![Family::BiasOnly, Family::CsrPriorCourses, Family::Mlp, Family::Lstm],
            ..PipelineConfig::default()
        };
        let trained = train_target(&data.records, entry, Some(&data.features), &cfg).unwrap();
        for a in trained.artifacts.values() {
            save_artifact(&root, a).unwrap();
        }
        save_artifact(&root, &ridge_artifact(LINEAR, &linear_priors(), &LINEAR_WEIGHTS, LINEAR_INTERCEPT)).unwrap();
        save_artifact(&root, &ridge_artifact(SINGLE, &["P01".to_string()], &[0.8], 0.5)).unwrap();
        let registry = Arc::new(load_registry(&root).unwrap());
        Fixture {
            root,
            registry,
            target: entry.target_course.clone(),
            priors: entry.priors.clone(),
        }
    })
}

async fn call(method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let response = router(fixture().registry.clone()).oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn post<T: serde::Serialize>(uri: &str, body: &T) -> (StatusCode, Vec<u8>) {
    call("POST", uri, Some(serde_json::to_string(body).unwrap())).await
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn row(course: &str, term: u32, grade: f64) -> TranscriptRow {
    TranscriptRow {
        course: course.into(),
        term,
        grade: GradeInput::Number(grade),
    }
}

fn uniform_transcript(priors: &[String], grade: f64) -> Vec<TranscriptRow> {
    priors.iter().enumerate().map(|(i, p)| row(p, 1 + i as u32 % 3, grade)).collect()
}

fn predict_request(target: &str, transcript: Vec<TranscriptRow>) -> PredictRequest {
    PredictRequest {
        student: Some("s001".into()),
        transcript,
        target: target.into(),
        family: None,
        term: None,
        level: None,
        samples: None,
        seed: None,
    }
}

fn whatif_request(target: &str, transcript: Vec<TranscriptRow>, overrides: Vec<Override>) -> WhatIfRequest {
    WhatIfRequest {
        student: None,
        transcript,
        target: target.into(),
        overrides,
        family: None,
        term: None,
        level: None,
        samples: None,
        seed: None,
    }
}

#[tokio::test]
async fn health_and_model_inventory() {
    let f = fixture();
    let (status, body) = call("GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let h = json(&body);
    assert_eq!(h["status"], "ok");
    assert_eq!(h["targets"], 3);
    assert_eq!(h["artifacts"], 6);

    let (status, body) = call("GET", "/models", None).await;
    assert_eq!(status, StatusCode::OK);
    let models: Vec<api::ModelSummary> = serde_json::from_slice(&body).unwrap();
    let trained = models.iter().find(|m| m.target == f.target).unwrap();
    assert_eq!(trained.default_family, Some(Family::Mlp));
    assert_eq!(trained.priors, f.priors);
    let linear = models.iter().find(|m| m.target == LINEAR).unwrap();
    assert_eq!(linear.families, vec![Family::CsrPriorCourses]);
    assert_eq!(linear.default_family, Some(Family::CsrPriorCourses));
}

#[tokio::test]
async fn unknown_course_is_404() {
    let (status, body) = post("/predict", &predict_request("NOPE", vec![])).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json(&body)["error"], "unknown_course");
    assert!(json(&body)["detail"].as_str().unwrap().contains("NOPE"));
}

#[tokio::test]
async fn unknown_endpoint_and_family_are_404() {
    let (status, body) = call("GET", "/nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json(&body)["error"], "not_found");
    let mut req = predict_request(LINEAR, vec![]);
    req.family = Some(Family::Mlp);
    let (status, body) = post("/predict", &req).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json(&body)["error"], "unknown_model");
}

#[tokio::test]
async fn malformed_transcripts_are_422() {
    let cases = [
        r#"{"target":"LIN","transcript":[{"course":"P01","term":1,"grade":4.5}]}"#,
        r#"{"target":"LIN","transcript":[{"course":"P01","term":1,"grade":"Z"}]}"#,
        r#"{"target":"LIN","transcript":[{"course":"P01","term":1}]}"#,
        r#"{"target":"LIN","transcript":[{"course":"P01","term":1,"grade":3},{"course":"P01","term":1,"grade":2}]}"#,
        r#"{"target":"LIN","transcript":[{"course":"","term":1,"grade":3}]}"#,
        r#"{"target":"LIN","transcript":[],"level":1.5}"#,
        r#"{"target":"LIN","transcript":[],"samples":1}"#,
        r#"not json"#,
    ];
    for body in cases {
        let (status, bytes) = call("POST", "/predict", Some(body.to_string())).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        let v = json(&bytes);
        assert!(v["error"].is_string() && v["detail"].is_string(), "{body}: {v}");
    }
}

#[tokio::test]
async fn letter_and_numeric_grades_agree() {
    let numeric = predict_request(LINEAR, vec![row("P01", 1, 3.67)]);
    let mut letter = numeric.clone();
    letter.transcript[0].grade = GradeInput::Letter("A-".into());
    letter.seed = Some(5);
    let mut numeric = numeric;
    numeric.seed = Some(5);
    let (_, a) = post("/predict", &numeric).await;
    let (_, b) = post("/predict", &letter).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn predict_matches_library_byte_for_byte() {
    let f = fixture();
    let req = predict_request(&f.target, uniform_transcript(&f.priors, 3.0));
    let (status, body) = post("/predict", &req).await;
    assert_eq!(status, StatusCode::OK);
    let expected = serde_json::to_vec(&api::predict(&f.registry, &req).unwrap()).unwrap();
    assert_eq!(body, expected);
}

#[tokio::test]
async fn predict_is_deterministic_and_seed_overridable() {
    let f = fixture();
    let req = predict_request(&f.target, uniform_transcript(&f.priors, 2.67));
    let (_, a) = post("/predict", &req).await;
    let (_, b) = post("/predict", &req).await;
    assert_eq!(a, b);
    assert_eq!(json(&a)["seed"].as_u64().unwrap(), api::request_seed(&req));
    let mut seeded = req.clone();
    seeded.seed = Some(99);
    let (_, c) = post("/predict", &seeded).await;
    assert_eq!(json(&c)["seed"], 99);
    assert_ne!(json(&a)["mean"], json(&c)["mean"]);
}

#[tokio::test]
async fn strong_transcript_predicts_near_the_top() {
    let f = fixture();
    let top = api::predict(&f.registry, &predict_request(&f.target, uniform_transcript(&f.priors, 4.0))).unwrap();
    let low = api::predict(&f.registry, &predict_request(&f.target, uniform_transcript(&f.priors, 2.0))).unwrap();
    assert!(top.mean > 3.3, "all-A transcript predicted {}", top.mean);
    assert!(top.mean > low.mean + 0.5);
    assert_eq!(top.family, Family::Mlp);
    assert!(top.variance >= top.tau_inv);
    assert!(top.interval.lower <= top.mean && top.mean <= top.interval.upper);
    assert!(top.interval_clipped.upper <= 4.0);
    assert!(!top.at_risk);
    assert_eq!(top.at_risk, top.mean < 2.0);
}

#[tokio::test]
async fn linear_prediction_is_exact() {
    let req = predict_request(LINEAR, vec![row("P01", 1, 3.0), row("P02", 1, 2.0), row("P03", 2, 4.0)]);
    let (_, body) = post("/predict", &req).await;
    let r: api::PredictResponse = serde_json::from_slice(&body).unwrap();
    let expected = LINEAR_INTERCEPT + 0.45 * 3.0 + 0.3 * 2.0 + 0.15 * 4.0;
    assert!((r.mean - expected).abs() < 1e-12);
    assert_eq!(r.variance, 0.04);
    let half = 1.959963984540054 * 0.2;
    assert!((r.interval.lower - (expected - half)).abs() < 1e-9);
    assert!((r.interval.upper - (expected + half)).abs() < 1e-9);
    assert_eq!(r.letter, "B");
    assert_eq!(r.term, 3);
}

#[tokio::test]
async fn explain_top_k_sorted_and_single_prior() {
    let f = fixture();
    let req = ExplainRequest {
        student: None,
        transcript: uniform_transcript(&f.priors, 2.33),
        target: f.target.clone(),
        family: None,
        term: None,
        k: Some(5),
    };
    let (status, body) = post("/explain", &req).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, serde_json::to_vec(&api::explain(&f.registry, &req).unwrap()).unwrap());
    let v = json(&body);
    let entries = v["entries"].as_array().unwrap();
    assert!(entries.len() <= 5);
    let infl: Vec<f64> = entries.iter().map(|e| e["influence"].as_f64().unwrap()).collect();
    assert!(infl.windows(2).all(|w| w[0] >= w[1]));

    let single = ExplainRequest {
        target: SINGLE.into(),
        transcript: vec![row("P01", 1, 3.0), row("X99", 1, 2.0)],
        ..req
    };
    let (_, body) = post("/explain", &single).await;
    let v = json(&body);
    assert_eq!(v["entries"].as_array().unwrap().len(), 1);
    assert!((v["entries"][0]["influence"].as_f64().unwrap() - 0.8).abs() < 1e-12);
}

#[tokio::test]
async fn whatif_zero_deltas() {
    let f = fixture();
    let transcript = uniform_transcript(&f.priors, 3.0);
    let (_, body) = post("/whatif", &whatif_request(&f.target, transcript.clone(), vec![])).await;
    let r: api::WhatIfResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.delta, 0.0);
    assert_eq!(r.base, r.counterfactual);

    let same = vec![Override {
        course: f.priors[0].clone(),
        new_grade: 3.0,
    }];
    let (_, body) = post("/whatif", &whatif_request(&f.target, transcript, same)).await;
    let r: api::WhatIfResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.delta, 0.0);
}

#[tokio::test]
async fn whatif_linear_delta_equals_weight() {
    let transcript = vec![row("P01", 1, 2.0), row("P02", 1, 2.33), row("P03", 2, 3.0)];
    for (i, p) in linear_priors().iter().enumerate() {
        let old = transcript[i].grade.clone();
        let GradeInput::Number(old) = old else { unreachable!() };
        let req = whatif_request(
            LINEAR,
            transcript.clone(),
            vec![Override {
                course: p.clone(),
                new_grade: old + 1.0,
            }],
        );
        let (status, body) = post("/whatif", &req).await;
        assert_eq!(status, StatusCode::OK);
        let r: api::WhatIfResponse = serde_json::from_slice(&body).unwrap();
        assert!((r.delta - LINEAR_WEIGHTS[i]).abs() < 1e-12, "{p}: {}", r.delta);
        assert!((r.counterfactual.interval.width() - r.base.interval.width()).abs() < 1e-12);
    }
}

#[tokio::test]
async fn whatif_rejects_untaken_and_out_of_range_overrides() {
    let transcript = vec![row("P01", 1, 2.0)];
    let untaken = whatif_request(
        LINEAR,
        transcript.clone(),
        vec![Override {
            course: "P02".into(),
            new_grade: 3.0,
        }],
    );
    let (status, body) = post("/whatif", &untaken).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json(&body)["error"], "untaken_course");
    let high = whatif_request(
        LINEAR,
        transcript,
        vec![Override {
            course: "P01".into(),
            new_grade: 4.5,
        }],
    );
    let (status, body) = post("/whatif", &high).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json(&body)["error"], "out_of_range");
}

fn random_transcript(rng: &mut ChaCha8Rng, courses: &[String]) -> Vec<TranscriptRow> {
    const GRID: [f64; 10] = [4.0, 3.67, 3.33, 3.0, 2.67, 2.33, 2.0, 1.67, 1.0, 0.0];
    let mut rows = Vec::new();
    for c in courses {
        if rng.random_bool(0.8) {
            rows.push(row(c, rng.random_range(0..6), GRID[rng.random_range(0..GRID.len())]));
        }
    }
    rows
}

#[tokio::test]
async fn randomized_golden_parity() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let families = [
        None,
        Some(Family::Mlp),
        Some(Family::Lstm),
        Some(Family::CsrPriorCourses),
        Some(Family::BiasOnly),
    ];
    for i in 0..50 {
        let transcript = random_transcript(&mut rng, &f.priors);
        let family = families[rng.random_range(0..families.len())];
        let seed = rng.random_bool(0.5).then(|| rng.random::<u64>());
        let (status, body, expected) = match i % 3 {
            0 => {
                let req = PredictRequest {
                    family,
                    seed,
                    samples: Some(rng.random_range(2..60)),
                    level: Some(rng.random_range(0.5..0.99)),
                    ..predict_request(&f.target, transcript)
                };
                let (s, b) = post("/predict", &req).await;
                (s, b, serde_json::to_vec(&api::predict(&f.registry, &req).unwrap()).unwrap())
            }
            1 => {
                let req = ExplainRequest {
                    student: Some(format!("s{i}")),
                    transcript,
                    target: f.target.clone(),
                    family,
                    term: None,
                    k: Some(rng.random_range(1..8)),
                };
                let (s, b) = post("/explain", &req).await;
                (s, b, serde_json::to_vec(&api::explain(&f.registry, &req).unwrap()).unwrap())
            }
            _ => {
                let overrides = transcript
                    .iter()
                    .take(2)
                    .map(|r| Override {
                        course: r.course.clone(),
                        new_grade: rng.random_range(0.0..=4.0),
                    })
                    .collect();
                let req = WhatIfRequest {
                    family,
                    seed,
                    samples: Some(20),
                    ..whatif_request(&f.target, transcript, overrides)
                };
                let (s, b) = post("/whatif", &req).await;
                (s, b, serde_json::to_vec(&api::whatif(&f.registry, &req).unwrap()).unwrap())
            }
        };
        assert_eq!(status, StatusCode::OK, "request {i}");
        assert_eq!(body, expected, "request {i}");
    }
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.clone(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn request_storm_leaves_registry_untouched() {
    let f = fixture();
    let before = snapshot(&f.root);
    let mut tasks = Vec::new();
    for i in 0..120u32 {
        let priors = f.priors.clone();
        let target = f.target.clone();
        tasks.push(tokio::spawn(async move {
            let grade = [2.0, 3.0, 4.0][i as usize % 3];
            match i % 3 {
                0 => post("/predict", &predict_request(&target, uniform_transcript(&priors, grade))).await,
                1 => post("/whatif", &whatif_request(&target, uniform_transcript(&priors, grade), vec![])).await,
                _ => call("GET", "/models", None).await,
            }
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap().0, StatusCode::OK);
    }
    assert_eq!(snapshot(&f.root), before);
    assert_eq!(*f.registry, load_registry(&f.root).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_whatif_delta_is_weighted_change(
        grades in proptest::collection::vec(0.0f64..=4.0, 3),
        new in proptest::collection::vec(0.0f64..=4.0, 3),
        mask in proptest::collection::vec(any::<bool>(), 3),
    ) {
        let priors = linear_priors();
        let transcript: Vec<TranscriptRow> = priors.iter().zip(&grades).map(|(p, g)| row(p, 1, *g)).collect();
        let overrides: Vec<Override> = priors
            .iter()
            .zip(&new)
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|((p, g), _)| Override { course: p.clone(), new_grade: *g })
            .collect();
        let r = api::whatif(&fixture().registry, &whatif_request(LINEAR, transcript, overrides)).unwrap();
        let encode = |g: f64| if g == 0.0 { 0.1 } else { g };
        let expected: f64 = (0..3)
            .filter(|&i| mask[i])
            .map(|i| LINEAR_WEIGHTS[i] * (encode(new[i]) - encode(grades[i])))
            .sum();
        prop_assert!((r.delta - expected).abs() < 1e-9);
        prop_assert!(r.base.interval.lower <= r.base.interval.upper);
        prop_assert_eq!(r.base.at_risk, r.base.mean < 2.0);
    }
}
