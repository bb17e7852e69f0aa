//! Prompt templates, a hash-based stand-in text encoder, and the attribute
//! extractor contract.
//!
//! The refined template is
//!
//! ```text
//! Photo of a <age> years old <gender> with <skin tone & texture>, due to <cause>
//! ```
//!
//! where skin tone and texture carry intrinsic aging factors and the cause
//! carries extrinsic ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoise::PromptEmbedding;
use crate::error::{Error, Result};

const REFINED_PREFIX: &str = "Photo of a ";
const AGE_SUFFIX: &str = " years old ";
const GENDER_SEP: &str = " with ";
const CAUSE_SEP: &str = ", due to ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceAttributes {
    pub age: u32,
    #[serde(default)]
    pub gender: String,
    #[serde(default)]
    pub skin_tone_texture: String,
    #[serde(default)]
    pub cause_description: String,
}

impl FaceAttributes {
    pub fn new(
        age: u32,
        gender: impl Into<String>,
        skin_tone_texture: impl Into<String>,
        cause_description: impl Into<String>,
    ) -> Self {
        Self {
            age,
            gender: gender.into(),
            skin_tone_texture: skin_tone_texture.into(),
            cause_description: cause_description.into(),
        }
    }
}

fn check_slot(value: &str, field: &'static str, forbidden: &[&str]) -> Result<()> {
    if value.trim().is_empty() {
        return Err(Error::MissingField(field));
    }
    if value.split_whitespace().collect::<Vec<_>>().join(" ") != value {
        return Err(Error::Validation {
            fields: vec![field],
            message: "must be single-spaced without leading or trailing whitespace".into(),
        });
    }
    if let Some(sep) = forbidden.iter().find(|s| value.contains(**s)) {
        return Err(Error::Validation {
            fields: vec![field],
            message: format!("must not contain {sep:?}"),
        });
    }
    Ok(())
}

/// Instantiates the attribute-aware template.
///
/// `gender` may not contain `" with "` and `skin_tone_texture` may not contain
/// `", due to "`, so that [`parse_refined_prompt`] can always split the result.
pub fn build_refined_prompt(a: &FaceAttributes) -> Result<String> {
    check_slot(&a.gender, "gender", &[GENDER_SEP])?;
    check_slot(&a.skin_tone_texture, "skin_tone_texture", &[CAUSE_SEP])?;
    check_slot(&a.cause_description, "cause_description", &[])?;
    Ok(format!(
        "{REFINED_PREFIX}{}{AGE_SUFFIX}{}{GENDER_SEP}{}{CAUSE_SEP}{}",
        a.age, a.gender, a.skin_tone_texture, a.cause_description
    ))
}

/// Inverse of [`build_refined_prompt`].
pub fn parse_refined_prompt(text: &str) -> Result<FaceAttributes> {
    let bad = |detail: &str| Error::format("refined prompt", detail);
    let rest = text
        .strip_prefix(REFINED_PREFIX)
        .ok_or_else(|| bad("missing \"Photo of a\" prefix"))?;
    let (age, rest) = rest.split_once(AGE_SUFFIX).ok_or_else(|| bad("missing age"))?;
    let age = age.parse().map_err(|_| bad("age is not a non-negative integer"))?;
    let (gender, rest) = rest.split_once(GENDER_SEP).ok_or_else(|| bad("missing \" with \""))?;
    let (skin, cause) = rest.split_once(CAUSE_SEP).ok_or_else(|| bad("missing \", due to\""))?;
    Ok(FaceAttributes::new(age, gender, skin, cause))
}

/// `"Photo of a <age> years old <person>"`, or `"Photo of a <person>"` when
/// no age is given.
pub fn build_basic_prompt(age: Option<u32>, person: &str) -> Result<String> {
    if person.trim().is_empty() {
        return Err(Error::MissingField("person"));
    }
    Ok(match age {
        Some(age) => format!("{REFINED_PREFIX}{age}{AGE_SUFFIX}{person}"),
        None => format!("{REFINED_PREFIX}{person}"),
    })
}

/// The ten FFHQ-Aging brackets with their central ages, midpoints rounded
/// half up. The open `70+` bracket is centred at 75.
pub const AGE_BRACKETS: [(&str, u32); 10] = [
    ("0-2", 1),
    ("3-6", 5),
    ("7-9", 8),
    ("10-14", 12),
    ("15-19", 17),
    ("20-29", 25),
    ("30-39", 35),
    ("40-49", 45),
    ("50-69", 60),
    ("70+", 75),
];

pub fn central_age(bracket: &str) -> Result<u32> {
    AGE_BRACKETS
        .iter()
        .find(|(label, _)| *label == bracket)
        .map(|(_, age)| *age)
        .ok_or_else(|| Error::InvalidRange(format!("unknown age bracket {bracket:?}")))
}

/// Bracket containing `age`.
pub fn age_bracket(age: u32) -> &'static str {
    match age {
        0..=2 => "0-2",
        3..=6 => "3-6",
        7..=9 => "7-9",
        10..=14 => "10-14",
        15..=19 => "15-19",
        20..=29 => "20-29",
        30..=39 => "30-39",
        40..=49 => "40-49",
        50..=69 => "50-69",
        _ => "70+",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub dim: usize,
    pub seed: u64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { dim: 16, seed: 0 }
    }
}

fn token_vector(token: &str, vocab: &VocabConfig) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(vocab.seed.to_le_bytes());
    h.update(token.as_bytes());
    let seed: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    let scale = 1.0 / (vocab.dim as f64).sqrt();
    (0..vocab.dim)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            scale * n
        })
        .collect()
}

/// One pseudo-random vector per whitespace token, keyed by the token text and
/// the vocabulary seed. The label is the text itself.
pub fn embed_prompt(text: &str, vocab: &VocabConfig) -> Result<PromptEmbedding> {
    if vocab.dim == 0 {
        return Err(Error::Validation {
            fields: vec!["dim"],
            message: "embedding width must be >= 1".into(),
        });
    }
    let tokens: Vec<Vec<f64>> = text.split_whitespace().map(|t| token_vector(t, vocab)).collect();
    if tokens.is_empty() {
        return Err(Error::Empty("prompt text"));
    }
    PromptEmbedding::new(tokens, Some(text.to_string()))
}

/// Extracts face attributes for an image reference.
pub trait VlmClient: Send + Sync {
    fn extract(&self, image_id: &str) -> Result<FaceAttributes>;
}

/// Offline extractor backed by a JSON map `image_id -> FaceAttributes`.
#[derive(Debug, Clone, Default)]
pub struct FixtureVlmClient {
    table: BTreeMap<String, FaceAttributes>,
}

impl FixtureVlmClient {
    pub fn new(table: BTreeMap<String, FaceAttributes>) -> Self {
        Self { table }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map(Self::new)
            .map_err(|e| Error::format("attribute fixtures", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }
}

impl VlmClient for FixtureVlmClient {
    fn extract(&self, image_id: &str) -> Result<FaceAttributes> {
        self.table
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::MissingFixtures(vec![image_id.to_string()]))
    }
}

#[derive(Serialize)]
struct ExtractRequest<'a> {
    image_id: &'a str,
}

/// HTTP extractor: `POST {"image_id": ...}` to `endpoint`, expecting the
/// [`FaceAttributes`] JSON back. Transport failures and 5xx responses are
/// retried with linear backoff.
#[derive(Debug, Clone)]
pub struct LiveVlmClient {
    endpoint: String,
    retries: u32,
    backoff: Duration,
    agent: ureq::Agent,
}

impl LiveVlmClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: u32) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            retries,
            backoff: Duration::from_millis(200),
            agent,
        }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }
}

pub(crate) fn post_json_with_retries<T: serde::de::DeserializeOwned>(
    agent: &ureq::Agent,
    endpoint: &str,
    body: &impl Serialize,
    retries: u32,
    backoff: Duration,
) -> Result<T> {
    let mut attempt = 0;
    loop {
        let err = match agent.post(endpoint).send_json(body) {
            Ok(mut resp) => {
                return resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| Error::Http(format!("{endpoint}: bad response body: {e}")))
            }
            Err(e) => e,
        };
        let retryable = !matches!(err, ureq::Error::StatusCode(code) if code < 500);
        if !retryable || attempt >= retries {
            return Err(Error::Http(format!("{endpoint}: {err}")));
        }
        attempt += 1;
        thread::sleep(backoff * attempt);
    }
}

impl VlmClient for LiveVlmClient {
    fn extract(&self, image_id: &str) -> Result<FaceAttributes> {
        post_json_with_retries(
            &self.agent,
            &self.endpoint,
            &ExtractRequest { image_id },
            self.retries,
            self.backoff,
        )
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves one canned response per accepted connection and returns the
    /// endpoint plus a handle yielding the request bodies.
    pub(crate) fn serve(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/extract", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn refined_prompt_examples() {
        let a = FaceAttributes::new(60, "woman", "fair skin with fine wrinkles", "prolonged sun exposure");
        assert_eq!(
            build_refined_prompt(&a).unwrap(),
            "Photo of a 60 years old woman with fair skin with fine wrinkles, due to prolonged sun exposure"
        );
        let b = FaceAttributes::new(25, "man", "smooth olive skin", "active outdoor lifestyle");
        assert_eq!(
            build_refined_prompt(&b).unwrap(),
            "Photo of a 25 years old man with smooth olive skin, due to active outdoor lifestyle"
        );
        let missing = FaceAttributes::new(25, "man", "smooth olive skin", "");
        assert!(matches!(
            build_refined_prompt(&missing),
            Err(Error::MissingField("cause_description"))
        ));
        let parsed = parse_refined_prompt(&build_refined_prompt(&a).unwrap()).unwrap();
        assert_eq!(parsed, a);
    }

    #[test]
    fn missing_json_field_is_reported() {
        let a: FaceAttributes = serde_json::from_str(r#"{"age": 30, "gender": "man", "skin_tone_texture": "pale skin"}"#).unwrap();
        assert!(matches!(
            build_refined_prompt(&a),
            Err(Error::MissingField("cause_description"))
        ));
    }

    #[test]
    fn basic_prompt_examples() {
        assert_eq!(build_basic_prompt(Some(25), "man").unwrap(), "Photo of a 25 years old man");
        assert_eq!(build_basic_prompt(None, "person").unwrap(), "Photo of a person");
        assert_eq!(build_basic_prompt(Some(0), "baby").unwrap(), "Photo of a 0 years old baby");
        assert!(build_basic_prompt(Some(3), " ").is_err());
    }

    #[test]
    fn central_ages() {
        assert_eq!(central_age("20-29").unwrap(), 25);
        assert_eq!(central_age("70+").unwrap(), 75);
        assert!(central_age("80-90").is_err());
        for (label, centre) in AGE_BRACKETS {
            assert_eq!(age_bracket(centre), label);
        }
    }

    #[test]
    fn embedding_examples() {
        let v = VocabConfig::default();
        assert_eq!(embed_prompt("Photo of a man", &v).unwrap(), embed_prompt("Photo of a man", &v).unwrap());
        let ab = embed_prompt("a b", &v).unwrap();
        let ac = embed_prompt("a c", &v).unwrap();
        assert_eq!(ab.tokens()[0], ac.tokens()[0]);
        assert_ne!(ab.tokens()[1], ac.tokens()[1]);
        assert_eq!(ab.len(), 2);
        assert!(embed_prompt("  ", &v).is_err());
        let other_seed = VocabConfig { seed: 1, ..v };
        assert_ne!(embed_prompt("a b", &other_seed).unwrap(), ab);
    }

    #[test]
    fn fixture_client() {
        let c = FixtureVlmClient::from_json_str(
            r#"{"img1": {"age": 60, "gender": "woman", "skin_tone_texture": "fair skin", "cause_description": "smoking"}}"#,
        )
        .unwrap();
        assert_eq!(c.extract("img1").unwrap().age, 60);
        match c.extract("img2") {
            Err(Error::MissingFixtures(ids)) => assert_eq!(ids, vec!["img2"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn live_client_retries_server_errors() {
        let ok = r#"{"age": 41, "gender": "man", "skin_tone_texture": "tanned skin", "cause_description": "sailing"}"#;
        let (url, handle) = serve(vec![(503, "{}".into()), (200, ok.into())]);
        let client = LiveVlmClient::new(url, Duration::from_secs(5), 2).with_backoff(Duration::from_millis(1));
        let a = client.extract("face-7").unwrap();
        assert_eq!(a, FaceAttributes::new(41, "man", "tanned skin", "sailing"));
        let bodies = handle.join().unwrap();
        assert_eq!(bodies.len(), 2);
        let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent, serde_json::json!({"image_id": "face-7"}));
    }

    #[test]
    fn live_client_gives_up_on_client_errors() {
        let (url, handle) = serve(vec![(404, "{}".into())]);
        let client = LiveVlmClient::new(url, Duration::from_secs(5), 3).with_backoff(Duration::from_millis(1));
        assert!(matches!(client.extract("x"), Err(Error::Http(_))));
        assert_eq!(handle.join().unwrap().len(), 1);
    }

    fn slot() -> impl Strategy<Value = String> {
        "[a-z]{1,8}( [a-z,&]{1,8}){0,4}"
    }

    proptest! {
        #[test]
        fn refined_prompt_round_trip(age in 0u32..120, g in slot(), s in slot(), c in slot()) {
            let a = FaceAttributes::new(age, g, s, c);
            match build_refined_prompt(&a) {
                Ok(text) => prop_assert_eq!(parse_refined_prompt(&text).unwrap(), a),
                Err(Error::Validation { .. }) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
