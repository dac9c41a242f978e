//! Out-of-process backends speaking JSON lines over stdin/stdout.
//!
//! The command is started with `sh -c` on first use and kept alive. Each
//! request is one JSON object with an `op` field; the process answers with
//! one line:
//!
//! ```text
//! -> {"op": "caption", "image_id": "42", "image_path": null, "patches": [3, 7], "n": 5, "seed": 1}
//! <- {"ok": true, "captions": ["a man riding a horse", ...]}
//! -> {"op": "attention", "image_id": "42", "image_path": null, "question": "..."}
//! <- {"ok": true, "values": [[[...]]], "grads": [[[...]]]}
//! -> {"op": "score", "question": "...", "caption": "..."}
//! <- {"ok": true, "score": 0.93}
//! -> {"op": "complete", "prompt": "...", "max_tokens": 10, "seed": 0}
//! <- {"ok": true, "text": "..."}
//! -> {"op": "answer", "question": "...", "context": "..."}
//! <- {"ok": true, "text": "..."}
//! -> {"op": "tag", "text": "..."}
//! <- {"ok": true, "tags": [["dog", "noun"], ...]}
//! ```
//!
//! Failures are `{"ok": false, "error": "...", "retriable": true}`; an op the
//! process does not implement is `{"ok": false, "unsupported": true}`. A
//! crashed process is restarted on the next request.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::backend::{BackendError, LanguageModel};
use crate::caption::{CaptionerBackend, CaptionerCapabilities, ImageRef};
use crate::qa::{ContextAnswerer, PartOfSpeech, PosTagger};
use crate::relevance::AttentionTensor;
use crate::rerank::RerankerBackend;

pub const EXEC_PREFIX: &str = "exec:";
const CAPTIONS_PER_CALL: usize = 5;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ExecResponse {
    pub ok: bool,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub retriable: bool,
    #[serde(default)]
    pub unsupported: bool,
    #[serde(flatten)]
    pub fields: Map<String, Value>,
}

/// Parses one response line. Error responses are turned into backend errors.
pub fn decode_response(backend_id: &str, capability: &'static str, line: &str) -> Result<ExecResponse, BackendError> {
    let response: ExecResponse = serde_json::from_str(line)
        .map_err(|e| BackendError::fatal(backend_id, format!("malformed response: {e}")))?;
    if response.ok {
        return Ok(response);
    }
    if response.unsupported {
        return Err(BackendError::Unsupported {
            backend_id: backend_id.to_string(),
            capability,
        });
    }
    let message = response.error.unwrap_or_else(|| "unspecified error".into());
    Err(if response.retriable {
        BackendError::retriable(backend_id, message)
    } else {
        BackendError::fatal(backend_id, message)
    })
}

impl ExecResponse {
    fn field<T: for<'de> Deserialize<'de>>(&self, backend_id: &str, name: &str) -> Result<T, BackendError> {
        let value = self
            .fields
            .get(name)
            .ok_or_else(|| BackendError::fatal(backend_id, format!("response lacks `{name}`")))?;
        serde_json::from_value(value.clone())
            .map_err(|e| BackendError::fatal(backend_id, format!("bad `{name}`: {e}")))
    }
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Drop for Process {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A backend served by an external command. One instance can fill any role.
pub struct ExecBackend {
    id: String,
    command: String,
    process: Mutex<Option<Process>>,
}

impl ExecBackend {
    /// `spec` is `exec:<command>`.
    pub fn from_spec(spec: &str) -> Option<Self> {
        let command = spec.strip_prefix(EXEC_PREFIX)?.trim();
        (!command.is_empty()).then(|| Self::new(command))
    }

    pub fn new(command: &str) -> Self {
        Self {
            id: format!("{EXEC_PREFIX}{command}"),
            command: command.to_string(),
            process: Mutex::new(None),
        }
    }

    fn spawn(&self) -> Result<Process, BackendError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::fatal(&self.id, format!("cannot start: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Process { child, stdin, stdout })
    }

    fn request(&self, capability: &'static str, request: Value) -> Result<ExecResponse, BackendError> {
        let mut guard = self.process.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let process = guard.as_mut().expect("process started");
        let mut line = request.to_string();
        line.push('\n');
        let mut response = String::new();
        let io = process
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| process.stdin.flush())
            .and_then(|_| process.stdout.read_line(&mut response));
        match io {
            Ok(n) if n > 0 => decode_response(&self.id, capability, response.trim_end()),
            Ok(_) => {
                *guard = None;
                Err(BackendError::retriable(&self.id, "process exited"))
            }
            Err(e) => {
                *guard = None;
                Err(BackendError::retriable(&self.id, format!("pipe error: {e}")))
            }
        }
    }
}

impl CaptionerBackend for ExecBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> CaptionerCapabilities {
        CaptionerCapabilities {
            max_captions_per_call: CAPTIONS_PER_CALL,
            supports_patch_masking: true,
            supports_attention_export: true,
            max_concurrency: Some(1),
        }
    }

    fn generate(&self, image: &ImageRef, patches: &[usize], n: usize, seed: u64) -> Result<Vec<String>, BackendError> {
        let r = self.request(
            "captioning",
            json!({"op": "caption", "image_id": image.id, "image_path": image.path, "patches": patches, "n": n, "seed": seed}),
        )?;
        r.field(&self.id, "captions")
    }

    fn export_attention(&self, image: &ImageRef, question: &str) -> Result<AttentionTensor, BackendError> {
        let r = self.request(
            "attention export",
            json!({"op": "attention", "image_id": image.id, "image_path": image.path, "question": question}),
        )?;
        AttentionTensor::from_nested(r.field(&self.id, "values")?, r.field(&self.id, "grads")?)
            .map_err(|e| BackendError::fatal(&self.id, e.to_string()))
    }
}

impl RerankerBackend for ExecBackend {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(1)
    }

    fn score(&self, question: &str, caption: &str) -> Result<f64, BackendError> {
        let r = self.request("scoring", json!({"op": "score", "question": question, "caption": caption}))?;
        r.field(&self.id, "score")
    }
}

impl LanguageModel for ExecBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(1)
    }

    fn complete(&self, prompt: &str, max_tokens: usize, seed: u64) -> Result<String, BackendError> {
        let r = self.request(
            "completion",
            json!({"op": "complete", "prompt": prompt, "max_tokens": max_tokens, "seed": seed}),
        )?;
        r.field(&self.id, "text")
    }
}

impl ContextAnswerer for ExecBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(1)
    }

    fn answer(&self, question: &str, context: &str) -> Result<String, BackendError> {
        let r = self.request("question answering", json!({"op": "answer", "question": question, "context": context}))?;
        r.field(&self.id, "text")
    }
}

impl PosTagger for ExecBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn tag(&self, text: &str) -> Result<Vec<(String, PartOfSpeech)>, BackendError> {
        let r = self.request("tagging", json!({"op": "tag", "text": text}))?;
        let raw: Vec<(String, String)> = r.field(&self.id, "tags")?;
        // Tags outside the three tracked classes are dropped.
        Ok(raw
            .into_iter()
            .filter_map(|(word, tag)| tag.parse().ok().map(|pos| (word, pos)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_success_and_errors() {
        let ok = decode_response("b", "x", r#"{"ok": true, "text": "hi"}"#).unwrap();
        assert_eq!(ok.field::<String>("b", "text").unwrap(), "hi");
        let e = decode_response("b", "x", r#"{"ok": false, "error": "oom", "retriable": true}"#).unwrap_err();
        assert!(e.is_retriable());
        let e = decode_response("b", "x", r#"{"ok": false}"#).unwrap_err();
        assert!(!e.is_retriable());
        let e = decode_response("b", "x", r#"{"ok": false, "unsupported": true}"#).unwrap_err();
        assert!(matches!(e, BackendError::Unsupported { .. }));
        assert!(decode_response("b", "x", "not json").is_err());
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(ExecBackend::from_spec("exec:python3 serve.py").unwrap().command, "python3 serve.py");
        assert!(ExecBackend::from_spec("exec:  ").is_none());
        assert!(ExecBackend::from_spec("stub").is_none());
    }

    #[test]
    fn talks_to_a_subprocess() {
        // Replies to every request with a fixed completion.
        let b = ExecBackend::new(r#"while read -r line; do echo '{"ok": true, "text": "a dog", "score": 0.5}'; done"#);
        assert_eq!(b.complete("p", 3, 0).unwrap(), "a dog");
        assert_eq!(b.score("q", "c").unwrap(), 0.5);
        assert!(b.generate(&ImageRef::new("1"), &[], 1, 0).is_err());
    }

    #[test]
    fn dead_process_is_retriable() {
        let b = ExecBackend::new("exit 0");
        let e = b.complete("p", 3, 0).unwrap_err();
        assert!(e.is_retriable(), "{e}");
    }
}
