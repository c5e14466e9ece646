use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use kgexplain::dataset::ExplanationInstance;
use kgexplain::embed::{Embedder, HashEmbedder};
use kgexplain::fixtures::{demo_pipeline, reference_instance};
use kgexplain::llm::{ChatClient, MockClient, RetryPolicy, UnreachableClient};
use kgexplain::prune::QaContext;
use kgexplain::retrieval::DemoStore;
use kgexplain_service::{
    router, AppState, Demos, RetrieveOut, ReviewItem, ReviewStatus, ReviewStore, ScoreOut,
    REVIEW_ID_HEADER,
};
use serde_json::{json, Value};
use tower::ServiceExt;

fn embedder() -> Arc<HashEmbedder> {
    Arc::new(HashEmbedder::with_dimension(32))
}

fn state(dir: &std::path::Path, client: Arc<dyn ChatClient>) -> Arc<AppState> {
    let reviews = Arc::new(ReviewStore::open(dir).unwrap());
    let mut st = AppState::new(client, embedder(), reviews);
    st.pipeline = Some(Arc::new(demo_pipeline(5)));
    st.debugger_retry = RetryPolicy::immediate(1);
    st.explainer.retry = RetryPolicy::immediate(1);
    Arc::new(st)
}

fn with_demos(st: AppState) -> AppState {
    let mut st = st;
    let e = embedder();
    let mut instances = Vec::new();
    for q in 0..12 {
        let mut inst = reference_instance();
        inst.question = format!("question number {q} about rivers and banks");
        let qa = QaContext::new(inst.question.clone(), inst.answers.clone(), Vec::new()).unwrap();
        inst.embedding = e.embed_one(&qa.qa_text()).unwrap();
        // two explanations per question with different scores
        let mut alt = inst.clone();
        alt.debugger_score = "Faithfulness: 2 | Completeness: 5 | Accuracy: 1".into();
        instances.push(inst);
        instances.push(alt);
    }
    let store = DemoStore::new(instances);
    let index = store.build_index(e.model_id()).unwrap();
    st.demos = Some(Arc::new(Demos { store, index }));
    st
}

async fn call(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Option<String>, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let id = resp
        .headers()
        .get(REVIEW_ID_HEADER)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX)
        .await
        .unwrap();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, id, v)
}

fn explain_body() -> Value {
    json!({
        "question": "Where would you keep money near a river?",
        "options": ["bank", "boat", "bridge", "fish", "water"],
        "label": "bank"
    })
}

fn likert(v: u8) -> Value {
    json!({
        "evaluator": "reviewer-1",
        "overall_quality": v, "understandability": v, "trustworthiness": v,
        "satisfaction": v, "sufficiency": v, "completeness": v, "accuracy": v
    })
}

#[tokio::test]
async fn explain_returns_a_valid_record_and_enqueues_it() {
    let dir = tempfile::tempdir().unwrap();
    let st = state(dir.path(), Arc::new(MockClient::pipeline()));
    let app = router(st.clone());
    let (status, id, v) = call(&app, "POST", "/v1/explain", Some(explain_body())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let inst: ExplanationInstance = serde_json::from_value(v).unwrap();
    assert!(kgexplain::dataset::validate(&inst).is_empty());
    assert_eq!(inst.label, "bank");
    let id = id.expect("review id header");
    let (status, _, item) = call(&app, "GET", &format!("/v1/review/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(item["status"], "pending");

    let mut quiet = explain_body();
    quiet["review"] = json!(false);
    let (status, id, _) = call(&app, "POST", "/v1/explain", Some(quiet)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(id.is_none());
    assert_eq!(st.reviews.list().len(), 1);
}

#[tokio::test]
async fn explain_errors_map_to_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), Arc::new(MockClient::pipeline())));
    let one = json!({"question": "Where is the bank?", "options": ["bank"]});
    assert_eq!(
        call(&app, "POST", "/v1/explain", Some(one)).await.0,
        StatusCode::BAD_REQUEST
    );
    let none = json!({"question": "zzz qqq", "options": ["xx", "yy", "vv", "ww", "uu"]});
    assert_eq!(
        call(&app, "POST", "/v1/explain", Some(none)).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let mut bad_label = explain_body();
    bad_label["label"] = json!("moon");
    assert_eq!(
        call(&app, "POST", "/v1/explain", Some(bad_label)).await.0,
        StatusCode::BAD_REQUEST
    );
    let req = Request::post("/v1/explain")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(
        app.clone().oneshot(req).await.unwrap().status(),
        StatusCode::BAD_REQUEST
    );

    let dir2 = tempfile::tempdir().unwrap();
    let down = router(state(dir2.path(), Arc::new(UnreachableClient)));
    assert_eq!(
        call(&down, "POST", "/v1/explain", Some(explain_body()))
            .await
            .0,
        StatusCode::BAD_GATEWAY
    );

    let dir3 = tempfile::tempdir().unwrap();
    let reviews = Arc::new(ReviewStore::open(dir3.path()).unwrap());
    let bare = router(Arc::new(AppState::new(
        Arc::new(MockClient::pipeline()),
        embedder(),
        reviews,
    )));
    assert_eq!(
        call(&bare, "POST", "/v1/explain", Some(explain_body()))
            .await
            .0,
        StatusCode::CONFLICT
    );
    let (status, _, health) = call(&bare, "GET", "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["pipeline"], false);
}

#[tokio::test]
async fn retrieve_ranks_the_query_itself_first() {
    let dir = tempfile::tempdir().unwrap();
    let reviews = Arc::new(ReviewStore::open(dir.path()).unwrap());
    let st = with_demos(AppState::new(
        Arc::new(MockClient::pipeline()),
        embedder(),
        reviews,
    ));
    let app = router(Arc::new(st));
    let q = reference_instance();
    let body = json!({
        "question": "question number 7 about rivers and banks",
        "options": q.answers,
    });
    let (status, _, v) = call(&app, "POST", "/v1/retrieve", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let out: RetrieveOut = serde_json::from_value(v).unwrap();
    assert_eq!(out.demos.len(), 3);
    assert_eq!(
        out.demos[0].instance.question,
        "question number 7 about rivers and banks"
    );
    assert!((out.demos[0].similarity - 1.0).abs() < 1e-9);
    // default weights prefer the 4/3/4 record over 2/5/1
    assert_eq!(
        out.demos[0].instance.debugger_score,
        "Faithfulness: 4 | Completeness: 3 | Accuracy: 4"
    );
    for w in out.demos.windows(2) {
        assert!(w[0].similarity >= w[1].similarity);
    }
    assert!(out.prompt.contains("question number 7"));

    let mut all = body.clone();
    all["m"] = json!(100);
    let (status, _, v) = call(&app, "POST", "/v1/retrieve", Some(all)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["demos"].as_array().unwrap().len(), 12);

    // completeness-only weights flip the choice
    let mut w = body.clone();
    w["weights"] =
        json!({"faithfulness": 0.0, "completeness": 1.0, "accuracy": 0.0, "overall": 0.0});
    let (_, _, v) = call(&app, "POST", "/v1/retrieve", Some(w)).await;
    assert_eq!(
        v["demos"][0]["instance"]["debugger_score"],
        "Faithfulness: 2 | Completeness: 5 | Accuracy: 1"
    );

    let mut zero = body.clone();
    zero["weights"] =
        json!({"faithfulness": 0.0, "completeness": 0.0, "accuracy": 0.0, "overall": 0.0});
    assert_eq!(
        call(&app, "POST", "/v1/retrieve", Some(zero)).await.0,
        StatusCode::BAD_REQUEST
    );
    let mut m0 = body.clone();
    m0["m"] = json!(0);
    assert_eq!(
        call(&app, "POST", "/v1/retrieve", Some(m0)).await.0,
        StatusCode::BAD_REQUEST
    );

    let dir2 = tempfile::tempdir().unwrap();
    let no_index = router(state(dir2.path(), Arc::new(MockClient::pipeline())));
    assert_eq!(
        call(&no_index, "POST", "/v1/retrieve", Some(body)).await.0,
        StatusCode::CONFLICT
    );
}

#[tokio::test]
async fn score_parses_the_debugger_reply() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), Arc::new(MockClient::pipeline())));
    let inst = serde_json::to_value(reference_instance()).unwrap();
    let (status, _, v) = call(&app, "POST", "/v1/score", Some(inst)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let s: ScoreOut = serde_json::from_value(v).unwrap();
    assert_eq!(
        s.debugger_score,
        "Faithfulness: 4 | Completeness: 3 | Accuracy: 4"
    );
    assert!((s.overall - 11.0 / 3.0).abs() < 1e-12);

    let garbled = Arc::new(MockClient::echo().with_rule("Faithfulness", "I cannot rate this."));
    let dir2 = tempfile::tempdir().unwrap();
    let app2 = router(state(dir2.path(), garbled));
    let inst = serde_json::to_value(reference_instance()).unwrap();
    assert_eq!(
        call(&app2, "POST", "/v1/score", Some(inst)).await.0,
        StatusCode::BAD_GATEWAY
    );
}

#[tokio::test]
async fn review_loop_regenerates_then_hands_over() {
    let dir = tempfile::tempdir().unwrap();
    let st = state(dir.path(), Arc::new(MockClient::pipeline()));
    let app = router(st.clone());
    let inst = serde_json::to_value(reference_instance()).unwrap();
    let (status, _, v) = call(&app, "POST", "/v1/review", Some(inst)).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = v["id"].as_str().unwrap().to_string();
    let (_, _, next) = call(&app, "GET", "/v1/review/next", None).await;
    assert_eq!(next["id"], id.as_str());

    let original_why = reference_instance().explanation_why;
    for round in 1..=3u32 {
        let (status, _, v) = call(
            &app,
            "POST",
            &format!("/v1/review/{id}/flag"),
            Some(json!({"notes": [format!("round {round}: mention the emotional cue")]})),
        )
        .await;
        assert_eq!(status, StatusCode::ACCEPTED, "{v}");
        assert_eq!(v["status"], "flagged");
        st.wait_idle().await;
        let (_, _, v) = call(&app, "GET", &format!("/v1/review/{id}"), None).await;
        let item: ReviewItem = serde_json::from_value(v).unwrap();
        assert_eq!(item.status, ReviewStatus::Pending);
        assert_eq!(item.revision(), round);
        assert_ne!(item.instance.explanation_why, original_why);
        assert!(item
            .instance
            .explanation_why
            .contains(&format!("round {round}")));
    }
    let (status, _, v) = call(
        &app,
        "POST",
        &format!("/v1/review/{id}/flag"),
        Some(json!({"notes": ["still wrong"]})),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(v["status"], "needs_manual_review");
    st.wait_idle().await;
    let item = st.reviews.get(&id).unwrap();
    assert_eq!(item.status, ReviewStatus::NeedsManualReview);
    assert_eq!(item.revision(), 3);
    assert_eq!(item.flags.len(), 4);
}

#[tokio::test]
async fn scores_approve_and_errors_are_typed() {
    let dir = tempfile::tempdir().unwrap();
    let st = state(dir.path(), Arc::new(MockClient::pipeline()));
    let app = router(st.clone());
    let inst = serde_json::to_value(reference_instance()).unwrap();
    let (_, _, v) = call(&app, "POST", "/v1/review", Some(inst)).await;
    let id = v["id"].as_str().unwrap().to_string();

    let mut partial = likert(3);
    partial.as_object_mut().unwrap().remove("accuracy");
    let uri = format!("/v1/review/{id}/scores");
    assert_eq!(
        call(&app, "POST", &uri, Some(partial)).await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        call(&app, "POST", &uri, Some(likert(4))).await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        call(
            &app,
            "POST",
            &format!("/v1/review/{id}/flag"),
            Some(json!({"notes": ["  "]}))
        )
        .await
        .0,
        StatusCode::BAD_REQUEST
    );

    let (status, _, v) = call(&app, "POST", &uri, Some(likert(3))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["status"], "approved");
    assert_eq!(
        call(&app, "POST", &uri, Some(likert(3))).await.0,
        StatusCode::CONFLICT
    );
    assert_eq!(
        call(
            &app,
            "POST",
            &format!("/v1/review/{id}/flag"),
            Some(json!({"notes": ["late"]}))
        )
        .await
        .0,
        StatusCode::CONFLICT
    );
    assert_eq!(
        call(&app, "GET", "/v1/review/item-99999", None).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(
            &app,
            "POST",
            "/v1/review/item-99999/scores",
            Some(likert(3))
        )
        .await
        .0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(&app, "GET", "/v1/review/next", None).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn failed_regeneration_returns_item_to_pending() {
    let dir = tempfile::tempdir().unwrap();
    let st = state(dir.path(), Arc::new(UnreachableClient));
    let app = router(st.clone());
    let inst = serde_json::to_value(reference_instance()).unwrap();
    let (_, _, v) = call(&app, "POST", "/v1/review", Some(inst)).await;
    let id = v["id"].as_str().unwrap().to_string();
    let (status, _, _) = call(
        &app,
        "POST",
        &format!("/v1/review/{id}/flag"),
        Some(json!({"notes": ["x"]})),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    st.wait_idle().await;
    let item = st.reviews.get(&id).unwrap();
    assert_eq!(item.status, ReviewStatus::Pending);
    assert_eq!(item.revision(), 0);
    assert!(item.last_error.unwrap().contains("connection refused"));
}

/// A scripted session over 20 items, then a restart on the same directory:
/// every item must come back exactly as it was.
#[tokio::test]
async fn review_state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        let st = state(dir.path(), Arc::new(MockClient::pipeline()));
        let app = router(st.clone());
        let mut ids = Vec::new();
        for i in 0..20 {
            let mut inst = reference_instance();
            inst.question = format!("{} ({i})", inst.question);
            let (status, _, v) = call(
                &app,
                "POST",
                "/v1/review",
                Some(serde_json::to_value(inst).unwrap()),
            )
            .await;
            assert_eq!(status, StatusCode::CREATED);
            ids.push(v["id"].as_str().unwrap().to_string());
        }
        for (i, id) in ids.iter().enumerate() {
            match i % 4 {
                0 => {
                    call(
                        &app,
                        "POST",
                        &format!("/v1/review/{id}/scores"),
                        Some(likert((i % 3 + 1) as u8)),
                    )
                    .await;
                }
                1 => {
                    call(
                        &app,
                        "POST",
                        &format!("/v1/review/{id}/flag"),
                        Some(json!({"notes": [format!("note {i}")]})),
                    )
                    .await;
                    st.wait_idle().await;
                    call(
                        &app,
                        "POST",
                        &format!("/v1/review/{id}/scores"),
                        Some(likert(3)),
                    )
                    .await;
                }
                2 => {
                    for r in 0..4 {
                        call(
                            &app,
                            "POST",
                            &format!("/v1/review/{id}/flag"),
                            Some(json!({"notes": [format!("n{r}")]})),
                        )
                        .await;
                        st.wait_idle().await;
                    }
                }
                _ => {}
            }
        }
        st.wait_idle().await;
        st.reviews.list()
    };
    assert_eq!(before.len(), 20);
    assert!(before
        .iter()
        .any(|i| i.status == ReviewStatus::NeedsManualReview));
    assert!(before
        .iter()
        .any(|i| i.status == ReviewStatus::Approved && i.revision() == 1));

    let st = state(dir.path(), Arc::new(MockClient::pipeline()));
    assert_eq!(st.reviews.list(), before);
    let app = router(st);
    let (_, _, v) = call(&app, "GET", "/v1/review", None).await;
    let listed: Vec<ReviewItem> = serde_json::from_value(v).unwrap();
    assert_eq!(listed, before);
}
