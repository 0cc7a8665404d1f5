//! OpenAI-compatible chat-completions client, plus the wire types shared with
//! the mock server.

use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{prompts, BackendError, Completion, Decoding, VisionModel, VisionPrompt};
use crate::coord_parser::{parse_response, CoordinateGrammar, TokenScore};

pub const ENV_BASE_URL: &str = "AUTOFOCUS_BASE_URL";
pub const ENV_MODEL: &str = "AUTOFOCUS_MODEL";
pub const ENV_API_KEY: &str = "AUTOFOCUS_API_KEY";

pub mod wire {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ChatRequest {
        pub model: String,
        pub messages: Vec<Message>,
        pub temperature: f64,
        pub top_p: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub seed: Option<u64>,
        #[serde(default)]
        pub logprobs: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub max_tokens: Option<u32>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct Message {
        pub role: String,
        pub content: Vec<ContentPart>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(tag = "type", rename_all = "snake_case")]
    pub enum ContentPart {
        Text { text: String },
        ImageUrl { image_url: ImageUrl },
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ImageUrl {
        pub url: String,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ChatResponse {
        #[serde(default)]
        pub id: String,
        #[serde(default)]
        pub model: String,
        pub choices: Vec<Choice>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct Choice {
        #[serde(default)]
        pub index: u32,
        pub message: AssistantMessage,
        #[serde(default)]
        pub logprobs: Option<ChoiceLogprobs>,
        #[serde(default)]
        pub finish_reason: Option<String>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct AssistantMessage {
        pub role: String,
        #[serde(default)]
        pub content: Option<String>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ChoiceLogprobs {
        #[serde(default)]
        pub content: Option<Vec<TokenLogprob>>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct TokenLogprob {
        pub token: String,
        pub logprob: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub bytes: Option<Vec<u8>>,
    }
}

/// Encode an image as PNG. The output depends only on the pixels.
pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    buf.into_inner()
}

pub fn to_data_url(image: &RgbImage) -> String {
    format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(encode_png(image))
    )
}

pub fn from_data_url(url: &str) -> Result<RgbImage, BackendError> {
    let b64 = url
        .split_once(";base64,")
        .map(|(_, d)| d)
        .ok_or_else(|| BackendError::Protocol("image_url is not a base64 data URL".into()))?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| BackendError::Protocol(format!("bad base64 image: {e}")))?;
    image::load_from_memory(&bytes)
        .map(|i| i.to_rgb8())
        .map_err(|e| BackendError::Protocol(format!("undecodable image: {e}")))
}

pub fn build_request(model: &str, prompt: &VisionPrompt) -> wire::ChatRequest {
    let mut content: Vec<wire::ContentPart> = prompt
        .images
        .iter()
        .map(|img| wire::ContentPart::ImageUrl {
            image_url: wire::ImageUrl {
                url: to_data_url(img),
            },
        })
        .collect();
    content.push(wire::ContentPart::Text {
        text: prompt.text.clone(),
    });
    wire::ChatRequest {
        model: model.to_string(),
        messages: vec![wire::Message {
            role: "user".into(),
            content,
        }],
        temperature: prompt.decoding.temperature,
        top_p: prompt.decoding.top_p,
        seed: prompt.decoding.seed,
        logprobs: prompt.logprobs,
        max_tokens: Some(256),
    }
}

/// Inverse of [`build_request`], used by servers.
pub fn decode_request(req: &wire::ChatRequest) -> Result<VisionPrompt, BackendError> {
    let mut images = Vec::new();
    let mut texts = Vec::new();
    for m in req.messages.iter().filter(|m| m.role == "user") {
        for part in &m.content {
            match part {
                wire::ContentPart::Text { text } => texts.push(text.as_str()),
                wire::ContentPart::ImageUrl { image_url } => {
                    images.push(Arc::new(from_data_url(&image_url.url)?))
                }
            }
        }
    }
    Ok(VisionPrompt {
        images,
        text: texts.join("\n"),
        decoding: Decoding {
            temperature: req.temperature,
            top_p: req.top_p,
            seed: req.seed,
        },
        logprobs: req.logprobs,
    })
}

pub fn encode_response(
    model: &str,
    completion: &Completion,
    with_logprobs: bool,
) -> wire::ChatResponse {
    wire::ChatResponse {
        id: "chatcmpl-local".into(),
        model: model.to_string(),
        choices: vec![wire::Choice {
            index: 0,
            message: wire::AssistantMessage {
                role: "assistant".into(),
                content: Some(completion.text.clone()),
            },
            logprobs: with_logprobs.then(|| wire::ChoiceLogprobs {
                content: Some(
                    completion
                        .tokens
                        .iter()
                        .map(|t| wire::TokenLogprob {
                            token: t.text.clone(),
                            logprob: t.logprob,
                            bytes: None,
                        })
                        .collect(),
                ),
            }),
            finish_reason: Some("stop".into()),
        }],
    }
}

pub fn decode_response(
    resp: wire::ChatResponse,
    want_logprobs: bool,
) -> Result<Completion, BackendError> {
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let text = choice.message.content.unwrap_or_default();
    let tokens: Vec<TokenScore> = choice
        .logprobs
        .and_then(|l| l.content)
        .unwrap_or_default()
        .into_iter()
        .map(|t| TokenScore::new(t.token, t.logprob))
        .collect();
    if want_logprobs && tokens.is_empty() {
        return Err(BackendError::MissingLogprobs(
            "choices[0].logprobs.content is absent or empty; the server must support \
             `logprobs: true` on chat completions"
                .into(),
        ));
    }
    Ok(Completion { text, tokens })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
        }
    }

    /// Read base URL, model and key from the environment. Explicit values win.
    pub fn from_env(base_url: Option<String>, model: Option<String>) -> Result<Self, BackendError> {
        let base_url = base_url
            .or_else(|| std::env::var(ENV_BASE_URL).ok())
            .ok_or_else(|| {
                BackendError::InvalidRequest(format!(
                    "no base URL given and {ENV_BASE_URL} is unset"
                ))
            })?;
        let model = model
            .or_else(|| std::env::var(ENV_MODEL).ok())
            .ok_or_else(|| {
                BackendError::InvalidRequest(format!("no model given and {ENV_MODEL} is unset"))
            })?;
        Ok(Self {
            api_key: std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty()),
            ..Self::new(base_url, model)
        })
    }

    pub fn endpoint(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

pub struct HttpVisionModel {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpVisionModel {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                message: e.to_string(),
                retryable: false,
            })?;
        Ok(Self { cfg, client })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }
}

impl VisionModel for HttpVisionModel {
    fn complete(&self, prompt: &VisionPrompt) -> Result<Completion, BackendError> {
        let body = build_request(&self.cfg.model, prompt);
        let mut req = self.client.post(self.cfg.endpoint()).json(&body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport {
            message: e.to_string(),
            retryable: e.is_connect() || e.is_timeout() || e.is_request(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Transport {
                message: format!(
                    "HTTP {status}: {}",
                    text.chars().take(500).collect::<String>()
                ),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        let parsed: wire::ChatResponse = resp
            .json()
            .map_err(|e| BackendError::Protocol(format!("malformed chat completion: {e}")))?;
        decode_response(parsed, prompt.logprobs)
    }

    fn describe(&self) -> String {
        format!("{} at {}", self.cfg.model, self.cfg.endpoint())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub ok: bool,
    pub text: String,
    pub n_tokens: usize,
    pub parsed: bool,
    pub message: String,
}

/// Send one tiny grounding request and check that the reply carries
/// per-token log-probabilities covering the text.
pub fn probe(model: &dyn VisionModel, grammar: &CoordinateGrammar) -> ProbeReport {
    let prompt = VisionPrompt {
        images: vec![Arc::new(RgbImage::from_pixel(
            64,
            64,
            image::Rgb([200, 200, 200]),
        ))],
        text: prompts::grounding("Click the center of the image", grammar),
        decoding: Decoding::greedy(Some(0)),
        logprobs: true,
    };
    let fail = |text: String, n_tokens: usize, message: String| ProbeReport {
        ok: false,
        text,
        n_tokens,
        parsed: false,
        message,
    };
    let c = match model.complete(&prompt) {
        Ok(c) => c,
        Err(e) => return fail(String::new(), 0, e.to_string()),
    };
    if c.tokens.is_empty() {
        return fail(
            c.text,
            0,
            "reply has no per-token log-probabilities; enable logprobs on the server".into(),
        );
    }
    let joined: String = c.tokens.iter().map(|t| t.text.as_str()).collect();
    if joined != c.text {
        return fail(
            c.text,
            c.tokens.len(),
            "token texts do not concatenate to the reply".into(),
        );
    }
    let parsed = parse_response(&c.text, &c.tokens, grammar).is_ok();
    ProbeReport {
        ok: true,
        n_tokens: c.tokens.len(),
        message: if parsed {
            "logprobs present and coordinate parsed".into()
        } else {
            "logprobs present but the reply did not match the coordinate grammar".into()
        },
        text: c.text,
        parsed,
    }
}
