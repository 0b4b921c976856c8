//! Sampling backends: an in-process synthetic agent and a generic HTTP-JSON
//! endpoint.

use std::collections::HashSet;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::dataset::DatasetItem;
use crate::consensus::{CanonicalClass, CanonicalizerKind};
use crate::error::{Error, Result};
use crate::seed;
use crate::synthetic::SyntheticAgent;

pub trait Backend: Send + Sync {
    /// Stable identifier used in cache keys.
    fn id(&self) -> &str;
    fn model(&self) -> &str;
    fn temperature(&self) -> f64;
    /// Whether responses should go through the response cache.
    fn cacheable(&self) -> bool {
        true
    }
    /// Raw answer text of sample `index` for `item`.
    fn sample(&self, item: &DatasetItem, index: u32) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Synthetic,
    Http,
}

/// Backend description as stored in run configs. Never holds credentials:
/// `auth_env` names the environment variable the token is read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// JSON request body with `{query}`, `{temperature}` and `{model}` placeholders.
    #[serde(default)]
    pub template: Option<String>,
    /// JSON pointer to the answer text in the response body.
    #[serde(default = "default_pointer")]
    pub response_pointer: String,
    pub temperature: f64,
    pub model: String,
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Synthetic default accuracy for items without a `p_star` metadata entry.
    #[serde(default = "default_p_star")]
    pub p_star: f64,
    #[serde(default = "default_wrong")]
    pub wrong_weights: Vec<f64>,
}

fn default_pointer() -> String {
    "/text".into()
}

fn default_p_star() -> f64 {
    0.7
}

fn default_wrong() -> Vec<f64> {
    vec![1.0, 1.0, 1.0]
}

impl BackendConfig {
    pub fn synthetic(p_star: f64) -> Self {
        BackendConfig {
            kind: BackendKind::Synthetic,
            endpoint: None,
            template: None,
            response_pointer: default_pointer(),
            temperature: 0.7,
            model: "synthetic-agent".into(),
            auth_env: None,
            retry: RetryPolicy::default(),
            p_star,
            wrong_weights: default_wrong(),
        }
    }

    pub fn http(endpoint: impl Into<String>, template: impl Into<String>, model: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::Http,
            endpoint: Some(endpoint.into()),
            template: Some(template.into()),
            model: model.into(),
            ..Self::synthetic(default_p_star())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::input(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        match self.kind {
            BackendKind::Http => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return Err(Error::input("http backend requires an endpoint"));
                }
                let template = self
                    .template
                    .as_deref()
                    .ok_or_else(|| Error::input("http backend requires a request template"))?;
                if !template.contains("{query}") {
                    return Err(Error::input("request template must contain the {query} placeholder"));
                }
                if !self.response_pointer.is_empty() && !self.response_pointer.starts_with('/') {
                    return Err(Error::input("response pointer must be empty or start with '/'"));
                }
            }
            BackendKind::Synthetic => {
                SyntheticAgent::with_accuracy(self.p_star, &self.wrong_weights)?;
            }
        }
        Ok(())
    }

    /// Instantiate the backend. For http, the auth token (if any) is read
    /// from the environment here.
    pub fn build(&self, run_seed: u64) -> Result<Box<dyn Backend>> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Synthetic => Box::new(SyntheticBackend::new(
                run_seed,
                self.p_star,
                self.wrong_weights.clone(),
                self.temperature,
            )?),
            BackendKind::Http => {
                let token = match &self.auth_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        Error::input(format!("environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                Box::new(HttpBackend::new(self.clone(), token))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 250,
            max_delay_ms: 8_000,
            timeout_secs: 120,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

/// Synthetic agent per dataset item. Items may override the default accuracy
/// via `metadata.p_star` and `metadata.wrong_weights`.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    run_seed: u64,
    p_star: f64,
    wrong_weights: Vec<f64>,
    temperature: f64,
}

impl SyntheticBackend {
    pub fn new(run_seed: u64, p_star: f64, wrong_weights: Vec<f64>, temperature: f64) -> Result<Self> {
        SyntheticAgent::with_accuracy(p_star, &wrong_weights)?;
        Ok(SyntheticBackend {
            run_seed,
            p_star,
            wrong_weights,
            temperature,
        })
    }

    pub fn agent_for(&self, item: &DatasetItem) -> Result<SyntheticAgent> {
        let p = match item.metadata.get("p_star") {
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::Schema(format!("item {}: metadata.p_star must be a number", item.id)))?,
            None => self.p_star,
        };
        let wrong = match item.metadata.get("wrong_weights") {
            Some(v) => serde_json::from_value::<Vec<f64>>(v.clone()).map_err(|_| {
                Error::Schema(format!("item {}: metadata.wrong_weights must be a list of numbers", item.id))
            })?,
            None => self.wrong_weights.clone(),
        };
        SyntheticAgent::with_accuracy(p, &wrong)
    }
}

impl Backend for SyntheticBackend {
    fn id(&self) -> &str {
        "synthetic"
    }

    fn model(&self) -> &str {
        "synthetic-agent"
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn cacheable(&self) -> bool {
        false
    }

    fn sample(&self, item: &DatasetItem, index: u32) -> Result<String> {
        let agent = self.agent_for(item)?;
        let class = agent.draw(seed::item_seed(self.run_seed, &item.id), index as u64);
        if class == agent.acceptable_index() {
            Ok(item.acceptable[0].clone())
        } else {
            let wrong_rank = if class > agent.acceptable_index() { class } else { class + 1 };
            render_wrong(item, wrong_rank)
        }
    }
}

/// Surface text of the `i`-th (1-based) wrong answer, guaranteed to
/// canonicalize outside the item's acceptable set.
pub fn render_wrong(item: &DatasetItem, i: usize) -> Result<String> {
    let canon = item.canonicalizer()?;
    let spec = item.acceptability()?;
    let bad = |text: &str| spec.contains(&canon.canonicalize(text));
    match item.canonicalizer {
        CanonicalizerKind::Binary => {
            let pass = spec.contains(&crate::consensus::canonicalize_binary(true));
            let fail = spec.contains(&crate::consensus::canonicalize_binary(false));
            Ok(match (pass, fail) {
                (true, false) => "fail".into(),
                (false, true) => "pass".into(),
                _ => "unknown".into(),
            })
        }
        CanonicalizerKind::Numeric => {
            let base: f64 = spec.acceptable()[0].key.parse().unwrap_or(0.0);
            let mut found = 0;
            for j in 1.. {
                let text = format!("{}", base + j as f64);
                if !bad(&text) {
                    found += 1;
                    if found == i {
                        return Ok(text);
                    }
                }
            }
            unreachable!()
        }
        CanonicalizerKind::Option => {
            let n = item.options.as_ref().map_or(0, Vec::len);
            let letters: Vec<String> = (0..n)
                .map(|j| ((b'A' + j as u8) as char).to_string())
                .filter(|l| !bad(l))
                .collect();
            Ok(if letters.is_empty() {
                "none of the above".into()
            } else {
                letters[(i - 1) % letters.len()].clone()
            })
        }
        CanonicalizerKind::Verbatim => {
            let taken: HashSet<&CanonicalClass> = spec.acceptable().iter().collect();
            let mut text = format!("wrong answer {i}");
            while taken.contains(&canon.canonicalize(&text)) {
                text.push('\'');
            }
            Ok(text)
        }
    }
}

/// Generic JSON-over-HTTP backend.
pub struct HttpBackend {
    config: BackendConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl HttpBackend {
    pub fn new(config: BackendConfig, token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.retry.timeout_secs)))
            .build()
            .into();
        HttpBackend { config, token, agent }
    }

    pub fn request_body(&self, query: &str) -> String {
        render_template(
            self.config.template.as_deref().unwrap_or_default(),
            query,
            self.config.temperature,
            &self.config.model,
        )
    }

    fn attempt(&self, body: &str) -> std::result::Result<String, Attempt> {
        let url = self.config.endpoint.as_deref().unwrap_or_default();
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(format!("HTTP {status}: {}", truncate(&text, 200))));
        }
        extract_answer(&text, &self.config.response_pointer).map_err(Attempt::Fatal)
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        "http"
    }

    fn model(&self) -> &str {
        &self.config.model
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }

    fn sample(&self, item: &DatasetItem, index: u32) -> Result<String> {
        let body = self.request_body(&item.query);
        let policy = self.config.retry;
        let fail = |message: String| Error::Backend {
            item_id: item.id.clone(),
            index,
            message,
        };
        let mut last = String::new();
        for attempt in 0..policy.max_attempts.max(1) {
            if attempt > 0 {
                thread::sleep(policy.delay(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(msg)) => return Err(fail(msg)),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(fail(format!("gave up after {} attempts: {last}", policy.max_attempts.max(1))))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Single-pass placeholder substitution; values are JSON-string-escaped so
/// they can sit inside quoted template fields.
pub fn render_template(template: &str, query: &str, temperature: f64, model: &str) -> String {
    let escape = |s: &str| {
        let quoted = serde_json::to_string(s).expect("string serialization");
        quoted[1..quoted.len() - 1].to_string()
    };
    let mut out = String::with_capacity(template.len() + query.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let (value, len) = if tail.starts_with("{query}") {
            (escape(query), "{query}".len())
        } else if tail.starts_with("{temperature}") {
            (format!("{temperature}"), "{temperature}".len())
        } else if tail.starts_with("{model}") {
            (escape(model), "{model}".len())
        } else {
            ("{".to_string(), 1)
        };
        out.push_str(&value);
        rest = &tail[len..];
    }
    out.push_str(rest);
    out
}

/// Pull the answer string out of a JSON response body.
pub fn extract_answer(body: &str, pointer: &str) -> std::result::Result<String, String> {
    let json: Value = serde_json::from_str(body).map_err(|e| format!("malformed JSON response: {e}"))?;
    match json.pointer(pointer) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(Value::Bool(b)) => Ok(b.to_string()),
        Some(_) => Err(format!("response field {pointer:?} is not a scalar")),
        None => Err(format!("response has no field at {pointer:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(kind: &str, acceptable: &[&str], options: Option<&[&str]>) -> DatasetItem {
        DatasetItem {
            id: "x".into(),
            query: "q".into(),
            acceptable: acceptable.iter().map(|s| s.to_string()).collect(),
            canonicalizer: kind.parse().unwrap(),
            options: options.map(|o| o.iter().map(|s| s.to_string()).collect()),
            metadata: Default::default(),
        }
    }

    #[test]
    fn template_substitution_escapes_and_is_single_pass() {
        let t = r#"{"prompt": "{query}", "temperature": {temperature}, "model": "{model}", "x": {"y": 1}}"#;
        let body = render_template(t, "say \"hi\" {temperature}\n", 0.7, "m1");
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["prompt"], "say \"hi\" {temperature}\n");
        assert_eq!(v["temperature"], 0.7);
        assert_eq!(v["model"], "m1");
        assert_eq!(v["x"]["y"], 1);
    }

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_answer(r#"{"text":"42"}"#, "/text").unwrap(), "42");
        assert_eq!(extract_answer(r#"{"a":[{"b":7}]}"#, "/a/0/b").unwrap(), "7");
        assert!(extract_answer(r#"{"text":null}"#, "/text").is_err());
        assert!(extract_answer("<html>", "/text").is_err());
        assert!(extract_answer(r#"{"other":1}"#, "/text").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::synthetic(0.7).validate().is_ok());
        assert!(BackendConfig::synthetic(1.5).validate().is_err());
        let mut http = BackendConfig::http("http://localhost:1/", r#"{"q":"{query}"}"#, "m");
        assert!(http.validate().is_ok());
        http.template = None;
        assert!(http.validate().is_err());
        let no_endpoint = BackendConfig { endpoint: None, ..BackendConfig::http("", "{query}", "m") };
        assert!(no_endpoint.validate().is_err());
    }

    #[test]
    fn missing_auth_variable_is_an_error() {
        let mut cfg = BackendConfig::http("http://localhost:1/", r#"{"q":"{query}"}"#, "m");
        cfg.auth_env = Some("RANKCERT_TEST_SURELY_UNSET_VAR".into());
        assert!(cfg.build(0).is_err());
    }

    #[test]
    fn config_serialization_has_no_token_field() {
        let mut cfg = BackendConfig::http("http://h/", "{query}", "m");
        cfg.auth_env = Some("API_KEY".into());
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"auth_env\":\"API_KEY\""));
        assert!(!json.to_lowercase().contains("token"));
    }

    #[test]
    fn wrong_answers_never_canonicalize_to_acceptable() {
        let cases = [
            item("numeric", &["4", "5"], None),
            item("option", &["B"], Some(&["x", "y", "z"])),
            item("binary", &["pass"], None),
            item("binary", &["fail"], None),
            item("verbatim", &["wrong answer 1"], None),
        ];
        for it in &cases {
            let canon = it.canonicalizer().unwrap();
            let spec = it.acceptability().unwrap();
            let mut distinct = HashSet::new();
            for i in 1..=3 {
                let text = render_wrong(it, i).unwrap();
                let class = canon.canonicalize(&text);
                assert!(!spec.contains(&class), "{:?} wrong {i} -> {text}", it.canonicalizer);
                assert!(!class.is_invalid());
                distinct.insert(class);
            }
            let expected = match it.canonicalizer {
                CanonicalizerKind::Binary => 1,
                CanonicalizerKind::Option => 2,
                _ => 3,
            };
            assert_eq!(distinct.len(), expected);
        }
    }

    #[test]
    fn synthetic_backend_follows_the_coupled_stream() {
        let backend = SyntheticBackend::new(11, 0.6, vec![1.0, 1.0], 0.7).unwrap();
        let it = item("numeric", &["10"], None);
        let agent = backend.agent_for(&it).unwrap();
        let raw = crate::synthetic::sample_agent(&agent, "x", 50, seed::item_seed(11, "x"));
        for (i, s) in raw.iter().enumerate() {
            let text = backend.sample(&it, i as u32).unwrap();
            let ok = crate::consensus::canonicalize_numeric(&text).key == "10";
            assert_eq!(ok, s.text == agent.acceptable_class().key, "sample {i}");
        }
    }

    #[test]
    fn metadata_overrides_accuracy() {
        let backend = SyntheticBackend::new(1, 0.5, vec![1.0], 0.7).unwrap();
        let mut it = item("verbatim", &["yes"], None);
        it.metadata.insert("p_star".into(), serde_json::json!(1.0));
        assert!((0..100).all(|i| backend.sample(&it, i).unwrap() == "yes"));
        it.metadata.insert("p_star".into(), serde_json::json!("high"));
        assert!(backend.sample(&it, 0).is_err());
    }
}
