//! Question-stem paraphrasing for MCQ training material.
//!
//! An HTTP endpoint may rewrite stems (`POST {"text": stem}` answered with
//! `{"text": rewritten}`). Anything that fails, times out or leaves the
//! closed vocabulary falls back to a deterministic rotation through the
//! relation's own question templates.

use crate::vocab::Vocab;
use crate::worldgen::{render, World};
use serde::{Deserialize, Serialize};
use std::time::Duration;

pub const ENDPOINT_ENV: &str = "UNLEARNLAB_PARAPHRASE_URL";
pub const TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Serialize)]
struct Request<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct Response {
    text: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParaphraseStats {
    pub remote: usize,
    pub fallback: usize,
    pub rejected: usize,
}

pub struct ParaphraseProvider {
    endpoint: Option<String>,
    agent: ureq::Agent,
    vocab: Vocab,
    /// Every (relation, form) template rendered with a `{S}` hole.
    templates: Vec<Vec<String>>,
    names: Vec<String>,
    pub stats: ParaphraseStats,
}

/// The environment variable wins over the configured endpoint; empty means
/// no endpoint.
pub fn resolve_endpoint(configured: &str) -> Option<String> {
    let env = std::env::var(ENDPOINT_ENV).ok();
    env.into_iter()
        .chain(std::iter::once(configured.to_string()))
        .map(|s| s.trim().to_string())
        .find(|s| !s.is_empty())
}

impl ParaphraseProvider {
    pub fn new(world: &World, endpoint: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(TIMEOUT))
            .build()
            .into();
        ParaphraseProvider {
            endpoint,
            agent,
            vocab: world.vocab(),
            templates: world
                .relations
                .iter()
                .map(|r| {
                    (0..r.question_forms.len())
                        .map(|f| render::question_stem(r, f, "{S}"))
                        .collect()
                })
                .collect(),
            names: world.persons.iter().map(|p| p.full_name()).collect(),
            stats: ParaphraseStats::default(),
        }
    }

    pub fn rewrite(&mut self, stem: &str) -> String {
        if let Some(url) = self.endpoint.clone() {
            match self.remote(&url, stem) {
                Ok(t) if self.vocab.tokenize(&t).is_ok() && !t.trim().is_empty() => {
                    self.stats.remote += 1;
                    return t;
                }
                Ok(t) => {
                    log::warn!("paraphrase {t:?} leaves the vocabulary; using rotation");
                    self.stats.rejected += 1;
                }
                Err(e) => log::warn!("paraphrase endpoint failed ({e}); using rotation"),
            }
        }
        self.stats.fallback += 1;
        self.rotate(stem)
    }

    fn remote(&self, url: &str, stem: &str) -> Result<String, ureq::Error> {
        let r: Response = self
            .agent
            .post(url)
            .send_json(Request { text: stem })?
            .body_mut()
            .read_json()?;
        Ok(r.text)
    }

    /// The next question template of the same relation, same subject.
    /// Stems that match no template come back unchanged.
    pub fn rotate(&self, stem: &str) -> String {
        for name in &self.names {
            for forms in &self.templates {
                for (f, t) in forms.iter().enumerate() {
                    if t.replace("{S}", name) == stem {
                        return forms[(f + 1) % forms.len()].replace("{S}", name);
                    }
                }
            }
        }
        stem.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_world, WorldConfig};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn world() -> World {
        generate_world(&WorldConfig::default(), 4).unwrap()
    }

    /// Serves one HTTP request with a fixed JSON body; returns the URL and
    /// the handle yielding the request body it saw.
    fn serve_once(body: String) -> (String, std::thread::JoinHandle<String>) {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/p", l.local_addr().unwrap());
        let h = std::thread::spawn(move || {
            let (s, _) = l.accept().unwrap();
            let mut r = BufReader::new(s.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                r.read_line(&mut line).unwrap();
                if line.to_ascii_lowercase().starts_with("content-length:") {
                    len = line[15..].trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut req = vec![0; len];
            r.read_exact(&mut req).unwrap();
            let mut s = s;
            write!(s, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
            String::from_utf8(req).unwrap()
        });
        (url, h)
    }

    fn stem(w: &World, form: usize) -> String {
        let name = w.person(w.forget_ids[0]).unwrap().full_name();
        render::question_stem(&w.relations[0], form, &name)
    }

    #[test]
    fn rotation_moves_to_next_template_and_wraps() {
        let w = world();
        let p = ParaphraseProvider::new(&w, None);
        let n = w.relations[0].question_forms.len();
        assert_eq!(p.rotate(&stem(&w, 0)), stem(&w, 1));
        assert_eq!(p.rotate(&stem(&w, n - 1)), stem(&w, 0));
        assert_eq!(p.rotate("no such stem"), "no such stem");
    }

    #[test]
    fn in_vocabulary_remote_answer_is_used() {
        let w = world();
        let name = w.person(w.forget_ids[0]).unwrap().full_name();
        let other = render::question_stem(&w.relations[1], 0, &name);
        let (url, h) = serve_once(serde_json::json!({ "text": other }).to_string());
        let mut p = ParaphraseProvider::new(&w, Some(url));
        let s = stem(&w, 0);
        assert_eq!(p.rewrite(&s), other);
        let sent: serde_json::Value = serde_json::from_str(&h.join().unwrap()).unwrap();
        assert_eq!(sent["text"], s.as_str());
        assert_eq!(
            p.stats,
            ParaphraseStats {
                remote: 1,
                fallback: 0,
                rejected: 0
            }
        );
    }

    #[test]
    fn out_of_vocabulary_answer_is_rejected() {
        let w = world();
        let (url, h) = serve_once(r#"{"text": "Whence hails this zyzzyva ?"}"#.to_string());
        let mut p = ParaphraseProvider::new(&w, Some(url));
        assert_eq!(p.rewrite(&stem(&w, 0)), stem(&w, 1));
        h.join().unwrap();
        assert_eq!(
            p.stats,
            ParaphraseStats {
                remote: 0,
                fallback: 1,
                rejected: 1
            }
        );
    }

    #[test]
    fn unreachable_endpoint_falls_back() {
        let w = world();
        let port = TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let mut p = ParaphraseProvider::new(&w, Some(format!("http://127.0.0.1:{port}/p")));
        assert_eq!(p.rewrite(&stem(&w, 0)), stem(&w, 1));
        assert_eq!(p.stats.fallback, 1);
    }
}
