//! Starts the inference service on an ephemeral port and talks to it over
//! plain HTTP/1.1, the way the browser explorer does.
//!
//!     cargo run --release --example serve_client -- [model.ckpt]

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use dcign::io::{encode_png, load_checkpoint, Checkpoint};
use dcign::scene::{render, SceneParams};
use dcign::service::router;
use dcign::trainer::TrainConfig;
use dcign::NetworkConfig;
use serde_json::{json, Value};

fn request(addr: SocketAddr, method: &str, path: &str, body: &Value) -> std::io::Result<(u16, Value)> {
    let body = if body.is_null() { String::new() } else { body.to_string() };
    let mut s = TcpStream::connect(addr)?;
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nhost: {addr}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    )?;
    let mut reply = String::new();
    s.read_to_string(&mut reply)?;
    let (head, payload) = reply.split_once("\r\n\r\n").unwrap_or((&reply, ""));
    let status = head.split_whitespace().nth(1).and_then(|c| c.parse().ok()).unwrap_or(0);
    Ok((status, serde_json::from_str(payload).unwrap_or(Value::Null)))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let net = match std::env::args().nth(1) {
        Some(path) => load_checkpoint::<f32>(path).map(|c: Checkpoint| c.net)?,
        None => {
            let config = TrainConfig {
                network: NetworkConfig::tiny(16),
                ..TrainConfig::default()
            };
            Checkpoint::<f32>::initial(config)?.net
        }
    };
    let res = net.resolution();

    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?;
    rt.spawn(async move { axum::serve(listener, router(net)).await });
    println!("serving on http://{addr}");

    let (status, info) = request(addr, "GET", "/model/info", &Value::Null)?;
    println!("GET /model/info -> {status} {info}");

    let scene = SceneParams {
        azimuth: 30.0,
        ..SceneParams::neutral()
    };
    let image = BASE64.encode(encode_png(&render(&scene, res)?)?);
    let (status, enc) = request(addr, "POST", "/encode", &json!({ "image": image }))?;
    println!("POST /encode -> {status} mu = {}", enc["mu"]);

    let (status, dec) = request(addr, "POST", "/decode", &json!({ "latents": enc["mu"] }))?;
    println!("POST /decode -> {status}, {} bytes of PNG", BASE64.decode(dec["image"].as_str().unwrap_or(""))?.len());

    let sweep = json!({ "image": image, "index": 0, "from": -15.0, "to": 15.0, "steps": 5 });
    let (status, sw) = request(addr, "POST", "/sweep", &sweep)?;
    println!("POST /sweep -> {status}, {} images", sw["images"].as_array().map_or(0, |a| a.len()));

    let (status, err) = request(addr, "POST", "/decode", &json!({ "latents": [1.0, 2.0] }))?;
    println!("POST /decode (short code) -> {status} {err}");
    Ok(())
}
