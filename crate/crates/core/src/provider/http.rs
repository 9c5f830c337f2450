//! Wire adapters for the two network endpoint kinds.

use std::collections::BTreeMap;
use std::io::ErrorKind;

use serde_json::{json, Value};

use super::{DecodingConfig, GenerationResult, ProviderEndpoint, ProviderError};

fn agent(endpoint: &ProviderEndpoint) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(endpoint.timeout()).build()
}

fn base_url(endpoint: &ProviderEndpoint) -> Result<&str, ProviderError> {
    endpoint
        .base_url
        .as_deref()
        .ok_or_else(|| ProviderError::InvalidEndpoint(format!("{}: base_url required", endpoint.name)))
}

fn bearer(endpoint: &ProviderEndpoint, required: bool) -> Result<Option<String>, ProviderError> {
    match &endpoint.credential_env {
        Some(var) => match std::env::var(var) {
            Ok(v) if !v.is_empty() => Ok(Some(v)),
            _ => Err(ProviderError::MissingCredential(var.clone())),
        },
        None if required => Err(ProviderError::InvalidEndpoint(format!(
            "{}: credential_env required",
            endpoint.name
        ))),
        None => Ok(None),
    }
}

fn map_error(endpoint: &ProviderEndpoint, e: ureq::Error) -> ProviderError {
    match e {
        ureq::Error::Status(status, resp) => ProviderError::ProviderRejected {
            status,
            body: resp.into_string().unwrap_or_default(),
        },
        ureq::Error::Transport(t) => {
            let timed_out = std::error::Error::source(&t)
                .and_then(|s| s.downcast_ref::<std::io::Error>())
                .is_some_and(|io| matches!(io.kind(), ErrorKind::TimedOut | ErrorKind::WouldBlock))
                || t.to_string().contains("timed out");
            if timed_out {
                ProviderError::ProviderTimeout(endpoint.timeout())
            } else {
                ProviderError::ProviderUnreachable(t.to_string())
            }
        }
    }
}

fn post_json(endpoint: &ProviderEndpoint, url: &str, token: Option<&str>, body: &Value) -> Result<Value, ProviderError> {
    let mut req = agent(endpoint).post(url).set("Content-Type", "application/json");
    if let Some(t) = token {
        req = req.set("Authorization", &format!("Bearer {t}"));
    }
    let resp = req.send_json(body.clone()).map_err(|e| map_error(endpoint, e))?;
    resp.into_json::<Value>()
        .map_err(|e| ProviderError::MalformedResponse(e.to_string()))
}

fn count(v: &Value, key: &str) -> Option<u64> {
    v.get(key).and_then(Value::as_u64)
}

pub(crate) fn ollama_payload(endpoint: &ProviderEndpoint, prompt: &str, config: &DecodingConfig) -> Value {
    json!({
        "model": endpoint.model_id,
        "prompt": prompt,
        "stream": false,
        "options": {
            "temperature": config.temperature,
            "top_p": config.top_p,
            "seed": config.seed,
            "num_predict": config.max_new_tokens,
            "stop": config.stop,
        },
    })
}

pub(crate) fn ollama_generate(
    endpoint: &ProviderEndpoint,
    prompt: &str,
    config: &DecodingConfig,
) -> Result<GenerationResult, ProviderError> {
    let url = format!("{}/api/generate", base_url(endpoint)?);
    let token = bearer(endpoint, false)?;
    let body = post_json(endpoint, &url, token.as_deref(), &ollama_payload(endpoint, prompt, config))?;
    let text = body
        .get("response")
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::MalformedResponse("missing \"response\" field".into()))?
        .to_string();
    let mut meta = BTreeMap::new();
    for key in ["model", "done_reason", "created_at"] {
        if let Some(v) = body.get(key) {
            meta.insert(key.to_string(), v.clone());
        }
    }
    Ok(GenerationResult {
        text,
        input_tokens: count(&body, "prompt_eval_count"),
        generated_tokens: count(&body, "eval_count"),
        latency_ms: 0.0,
        provider_meta: meta,
    })
}

pub(crate) fn ollama_model_digest(endpoint: &ProviderEndpoint) -> Result<String, ProviderError> {
    let url = format!("{}/api/tags", base_url(endpoint)?);
    let body: Value = agent(endpoint)
        .get(&url)
        .call()
        .map_err(|e| map_error(endpoint, e))?
        .into_json()
        .map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
    body.get("models")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .find(|m| {
            let name = m.get("name").and_then(Value::as_str);
            name == Some(endpoint.model_id.as_str())
                || name == Some(format!("{}:latest", endpoint.model_id).as_str())
        })
        .and_then(|m| m.get("digest").and_then(Value::as_str))
        .map(str::to_string)
        .ok_or_else(|| ProviderError::MalformedResponse(format!("model {} not listed", endpoint.model_id)))
}

pub(crate) fn watsonx_payload(endpoint: &ProviderEndpoint, prompt: &str, config: &DecodingConfig) -> Value {
    let mut body = json!({
        "model_id": endpoint.model_id,
        "input": prompt,
        "parameters": {
            "decoding_method": config.decoding_method.as_str(),
            "temperature": config.temperature,
            "top_p": config.top_p,
            "random_seed": config.seed,
            "max_new_tokens": config.max_new_tokens,
            "return_options": {"input_tokens": true, "generated_tokens": true},
        },
    });
    if let Some(p) = &endpoint.project_id {
        body["project_id"] = json!(p);
    }
    body
}

pub(crate) fn watsonx_generate(
    endpoint: &ProviderEndpoint,
    prompt: &str,
    config: &DecodingConfig,
) -> Result<GenerationResult, ProviderError> {
    let url = format!(
        "{}/ml/v1/text/generation?version={}",
        base_url(endpoint)?,
        endpoint.api_version
    );
    let token = bearer(endpoint, true)?;
    let body = post_json(endpoint, &url, token.as_deref(), &watsonx_payload(endpoint, prompt, config))?;
    let first = body
        .get("results")
        .and_then(Value::as_array)
        .and_then(|r| r.first())
        .ok_or_else(|| ProviderError::MalformedResponse("missing \"results\"".into()))?;
    let text = first
        .get("generated_text")
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::MalformedResponse("missing \"generated_text\"".into()))?
        .to_string();
    let mut meta = BTreeMap::new();
    if let Some(v) = first.get("stop_reason") {
        meta.insert("stop_reason".to_string(), v.clone());
    }
    for key in ["model_id", "model_version", "created_at"] {
        if let Some(v) = body.get(key) {
            meta.insert(key.to_string(), v.clone());
        }
    }
    Ok(GenerationResult {
        text,
        input_tokens: count(first, "input_token_count"),
        generated_tokens: count(first, "generated_token_count"),
        latency_ms: 0.0,
        provider_meta: meta,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{generate, DecodingConfig, ProviderEndpoint, ProviderError};
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::thread;

    /// Serves one request with the given status and body; hands back the
    /// request line, headers and body.
    fn one_shot(status: u16, body: &'static str) -> (String, mpsc::Receiver<(String, Vec<String>, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            tx.send((request_line.trim_end().to_string(), headers, String::from_utf8(buf).unwrap()))
                .unwrap();
        });
        (addr, rx)
    }

    fn keys(v: &Value) -> Vec<String> {
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    }

    #[test]
    fn ollama_wire_payload() {
        let (addr, rx) = one_shot(200, r#"{"model":"m","response":"  verbatim\n","prompt_eval_count":7,"eval_count":3,"done":true}"#);
        let ep = ProviderEndpoint::ollama("local", &addr, "qwen2.5:7b");
        let mut cfg = DecodingConfig::greedy(42);
        cfg.stop = vec!["\n\n".into()];
        let r = generate(&ep, "prompt text", &cfg).unwrap();
        assert_eq!(r.text, "  verbatim\n");
        assert_eq!((r.input_tokens, r.generated_tokens), (Some(7), Some(3)));
        assert!(r.latency_ms >= 0.0);

        let (line, _, body) = rx.recv().unwrap();
        assert_eq!(line, "POST /api/generate HTTP/1.1");
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(keys(&v), ["model", "options", "prompt", "stream"]);
        assert_eq!(keys(&v["options"]), ["num_predict", "seed", "stop", "temperature", "top_p"]);
        assert_eq!(v["options"]["temperature"], json!(0.0));
        assert_eq!(v["options"]["seed"], json!(42));
        assert_eq!(v["options"]["num_predict"], json!(512));
    }

    #[test]
    fn watsonx_wire_payload_and_credentials() {
        let (addr, rx) = one_shot(
            200,
            r#"{"model_id":"ibm/granite-3-8b-instruct","results":[{"generated_text":"out","generated_token_count":2,"input_token_count":5,"stop_reason":"eos_token"}]}"#,
        );
        let var = "DRIFTWATCH_TEST_WX_TOKEN";
        std::env::set_var(var, "s3cret-token");
        let ep = ProviderEndpoint::watsonx("wx", &addr, "ibm/granite-3-8b-instruct", var, "2024-05-01");
        let r = generate(&ep, "p", &DecodingConfig::greedy(42)).unwrap();
        assert_eq!(r.text, "out");
        assert_eq!(r.generated_tokens, Some(2));

        let (line, headers, body) = rx.recv().unwrap();
        assert_eq!(line, "POST /ml/v1/text/generation?version=2024-05-01 HTTP/1.1");
        assert!(headers.iter().any(|h| h == "Authorization: Bearer s3cret-token"));
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(keys(&v), ["input", "model_id", "parameters"]);
        assert_eq!(
            keys(&v["parameters"]),
            ["decoding_method", "max_new_tokens", "random_seed", "return_options", "temperature", "top_p"]
        );
        assert_eq!(v["parameters"]["decoding_method"], json!("greedy"));
        assert_eq!(v["parameters"]["random_seed"], json!(42));

        let serialized = serde_json::to_string(&ep).unwrap();
        assert!(!serialized.contains("s3cret-token"));
    }

    #[test]
    fn missing_credential() {
        let ep = ProviderEndpoint::watsonx("wx", "http://127.0.0.1:9", "m", "DRIFTWATCH_UNSET_VAR_X", "v");
        assert!(matches!(
            generate(&ep, "p", &DecodingConfig::greedy(1)),
            Err(ProviderError::MissingCredential(_))
        ));
    }

    #[test]
    fn rejection_carries_status_and_body() {
        let (addr, _rx) = one_shot(429, r#"{"error":"slow down"}"#);
        let ep = ProviderEndpoint::ollama("local", &addr, "m");
        match generate(&ep, "p", &DecodingConfig::greedy(1)) {
            Err(ProviderError::ProviderRejected { status, body }) => {
                assert_eq!(status, 429);
                assert!(body.contains("slow down"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn timeout_is_reported() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let hold = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            thread::sleep(std::time::Duration::from_millis(600));
            drop(s);
        });
        let mut ep = ProviderEndpoint::ollama("local", &addr, "m");
        ep.timeout_ms = 150;
        assert!(matches!(
            generate(&ep, "p", &DecodingConfig::greedy(1)),
            Err(ProviderError::ProviderTimeout(_))
        ));
        hold.join().unwrap();
    }
}
