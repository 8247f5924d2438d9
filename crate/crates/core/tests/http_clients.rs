use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use facet_core::prompts::{
    generate_question, select_prompt, HttpTextGen, PromptRegistry, QuestionSource, SelectionMethod, Selector,
};
use facet_core::providers::{EmbedderProvider, HttpEmbedder, HttpEmbedderConfig, QueryRequest};
use facet_core::{Error, ItemId};
use serde_json::{json, Value};

type Handler = dyn Fn(Value) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server: one thread per connection, JSON request bodies.
struct Fixture {
    url: String,
    requests: Arc<Mutex<Vec<Value>>>,
}

fn serve(handler: impl Fn(Value) -> (u16, String) + Send + Sync + 'static) -> Fixture {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/embed", listener.local_addr().unwrap());
    let handler: Arc<Handler> = Arc::new(handler);
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = requests.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let (handler, seen) = (handler.clone(), seen.clone());
            thread::spawn(move || handle(stream, &*handler, &seen));
        }
    });
    Fixture { url, requests }
}

fn handle(stream: TcpStream, handler: &Handler, seen: &Mutex<Vec<Value>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    let value: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    seen.lock().unwrap().push(value.clone());
    let (status, text) = handler(value);
    let mut out = stream;
    let _ = write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}

fn embedding(v: &[f32]) -> (u16, String) {
    (200, json!({ "embedding": v }).to_string())
}

fn embedder(url: &str, dim: usize) -> HttpEmbedder {
    HttpEmbedder::new(HttpEmbedderConfig { timeout: Duration::from_secs(5), ..HttpEmbedderConfig::new(url, dim) }).unwrap()
}

fn id(s: &str) -> ItemId {
    ItemId::new(s).unwrap()
}

#[test]
fn unit_vector_passes_through() {
    let fx = serve(|_| embedding(&[0.6, 0.8, 0.0]));
    let v = embedder(&fx.url, 3).embed_image_general(&id("img-1")).unwrap();
    assert_eq!(v.as_slice(), &[0.6, 0.8, 0.0]);
}

#[test]
fn request_bodies_follow_protocol() {
    let fx = serve(|_| embedding(&[1.0, 0.0]));
    let e = embedder(&fx.url, 2);
    let prompt = PromptRegistry::gpt_default().for_facet("times").unwrap().clone();
    e.embed_image_general(&id("a")).unwrap();
    e.embed_image_prompted(&id("a"), &prompt).unwrap();
    e.embed_query(&QueryRequest { case_id: &id("c1"), text: "find dusk", facet: "times", value: None }).unwrap();
    let reqs = fx.requests.lock().unwrap().clone();
    assert_eq!(reqs[0], json!({ "item_id": "a" }));
    assert_eq!(reqs[1], json!({ "item_id": "a", "prompt": prompt.full_prompt }));
    assert_eq!(reqs[2], json!({ "item_id": "c1", "text": "find dusk" }));
}

#[test]
fn wrong_dim_rejected() {
    let fx = serve(|_| embedding(&[1.0, 0.0]));
    let err = embedder(&fx.url, 3).embed_image_general(&id("a")).unwrap_err();
    assert!(matches!(err, Error::DimMismatch { expected: 3, actual: 2 }));
}

#[test]
fn slightly_short_vector_renormalized() {
    let fx = serve(|_| embedding(&[0.98, 0.0, 0.0, 0.0]));
    let v = embedder(&fx.url, 4).embed_image_general(&id("a")).unwrap();
    assert!((v.norm() - 1.0).abs() < 1e-6);
    assert_eq!(v.as_slice()[0], 1.0);
}

#[test]
fn far_from_unit_rejected() {
    let fx = serve(|_| embedding(&[0.5, 0.0]));
    assert!(matches!(embedder(&fx.url, 2).embed_image_general(&id("a")), Err(Error::Norm { .. })));
}

#[test]
fn server_errors_are_bad_responses() {
    let fx = serve(|_| (500, "{}".into()));
    let err = embedder(&fx.url, 2).embed_image_general(&id("a")).unwrap_err();
    assert!(matches!(err, Error::BadResponse(_)), "{err}");
    let fx = serve(|_| (200, "not json".into()));
    assert!(matches!(embedder(&fx.url, 2).embed_image_general(&id("a")), Err(Error::BadResponse(_))));
}

#[test]
fn unreachable_is_transport() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = embedder(&format!("http://127.0.0.1:{port}/embed"), 2).embed_image_general(&id("a")).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
    assert!(err.is_environmental());
}

#[test]
fn in_flight_requests_are_bounded() {
    let live = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (l, p) = (live.clone(), peak.clone());
    let fx = serve(move |_| {
        let now = l.fetch_add(1, Ordering::SeqCst) + 1;
        p.fetch_max(now, Ordering::SeqCst);
        thread::sleep(Duration::from_millis(40));
        l.fetch_sub(1, Ordering::SeqCst);
        embedding(&[1.0, 0.0])
    });
    let e = HttpEmbedder::new(HttpEmbedderConfig { max_in_flight: 2, ..HttpEmbedderConfig::new(&fx.url, 2) }).unwrap();
    thread::scope(|s| {
        for i in 0..8 {
            let e = &e;
            s.spawn(move || e.embed_image_general(&id(&format!("i{i}"))).unwrap());
        }
    });
    assert!(peak.load(Ordering::SeqCst) <= 2);
    assert_eq!(fx.requests.lock().unwrap().len(), 8);
}

fn text_reply(text: &str) -> (u16, String) {
    (200, json!({ "text": text }).to_string())
}

#[test]
fn external_selector_round_trip() {
    let fx = serve(|_| text_reply(" G. "));
    let client = HttpTextGen::new(&fx.url, Duration::from_secs(5));
    let registry = PromptRegistry::gpt_default();
    let selector = Selector::External { client: &client, fallback_to_lexical: false };
    let out = select_prompt("Find me an everyday image where the weather is rainy.", &registry, &selector).unwrap();
    assert_eq!(out.chosen, "gpt-weathers");
    assert_eq!(out.method, SelectionMethod::External);
    let req = fx.requests.lock().unwrap()[0].clone();
    assert_eq!(req["messages"][0]["role"], "user");
    assert!(req["messages"][0]["content"].as_str().unwrap().starts_with("A. Represent the given image"));
    assert!(req["max_tokens"].as_u64().unwrap() > 0);
}

#[test]
fn selector_down_falls_back_or_fails() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = HttpTextGen::new(format!("http://127.0.0.1:{port}/"), Duration::from_secs(2));
    let registry = PromptRegistry::gpt_default();
    let q = "Find me an everyday image taken at the night time of day.";
    let strict = Selector::External { client: &client, fallback_to_lexical: false };
    assert!(matches!(select_prompt(q, &registry, &strict), Err(Error::SelectorUnavailable(_))));
    let lenient = Selector::External { client: &client, fallback_to_lexical: true };
    let out = select_prompt(q, &registry, &lenient).unwrap();
    assert_eq!((out.chosen.as_str(), out.method), ("gpt-times", SelectionMethod::Lexical));
}

#[test]
fn unparseable_letter_reported() {
    let fx = serve(|_| text_reply("I think the weather one"));
    let client = HttpTextGen::new(&fx.url, Duration::from_secs(5));
    let sel = Selector::External { client: &client, fallback_to_lexical: true };
    let err = select_prompt("rainy", &PromptRegistry::gpt_default(), &sel).unwrap_err();
    assert!(matches!(err, Error::UnparseableAnswer { options: 8, .. }));
}

#[test]
fn question_generation_over_http() {
    let fx = serve(|_| text_reply("What is the weather like in this image?"));
    let client = HttpTextGen::new(&fx.url, Duration::from_secs(5));
    let answers: Vec<String> = ["sunny", "rainy"].map(String::from).to_vec();
    let q = generate_question("weather", &answers, QuestionSource::External(&client)).unwrap();
    assert_eq!(q, "What is the weather like in this image?");
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let down = HttpTextGen::new(format!("http://127.0.0.1:{port}/"), Duration::from_secs(2));
    let err = generate_question("weather", &answers, QuestionSource::External(&down)).unwrap_err();
    assert!(matches!(err, Error::GeneratorUnavailable(_)));
}
