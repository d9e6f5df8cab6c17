#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use std::collections::BTreeSet;

use fllm_core::catalog::{Catalog, Item, Outfit, SplitAssignment};
use fllm_core::qagen::{FITBQuestion, FitbSource};

/// A request captured by [`TestServer`].
#[derive(Debug, Clone)]
pub struct Captured {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

/// Loopback HTTP/1.1 server answering queued `(status, body)` pairs, one per
/// connection, and recording every request.
pub struct TestServer {
    pub base_url: String,
    pub requests: Arc<Mutex<Vec<Captured>>>,
    handle: Option<JoinHandle<()>>,
}

impl TestServer {
    pub fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = requests.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut parts = request_line.split_whitespace();
                let method = parts.next().unwrap_or_default().to_string();
                let path = parts.next().unwrap_or_default().to_string();
                let mut headers = Vec::new();
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
                        if k == "content-length" {
                            content_length = v.parse().unwrap();
                        }
                        headers.push((k, v));
                    }
                }
                let mut buf = vec![0u8; content_length];
                reader.read_exact(&mut buf).unwrap();
                seen.lock().unwrap().push(Captured {
                    method,
                    path,
                    headers,
                    body: String::from_utf8(buf).unwrap(),
                });
                let mut stream = stream;
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
                stream.flush().unwrap();
            }
        });
        TestServer {
            base_url,
            requests,
            handle: Some(handle),
        }
    }

    pub fn captured(&self) -> Vec<Captured> {
        self.requests.lock().unwrap().clone()
    }

    pub fn join(mut self) -> Vec<Captured> {
        if let Some(h) = self.handle.take() {
            h.join().unwrap();
        }
        self.captured()
    }
}

pub fn item(id: &str, title: &str, category: &str) -> Item {
    Item {
        item_id: id.into(),
        title: title.into(),
        description: String::new(),
        semantic_category: category.into(),
        fine_category_id: None,
        image_ref: None,
    }
}

pub fn outfit(id: &str, items: &[&str]) -> Outfit {
    Outfit {
        outfit_id: id.into(),
        item_ids: items.iter().map(|s| s.to_string()).collect(),
        source_split: None,
    }
}

pub fn catalog(items: Vec<Item>, outfits: Vec<Outfit>, splits: SplitAssignment) -> Catalog {
    Catalog::new(items, outfits, splits).unwrap()
}

/// Every FITBQuestion invariant, checked from scratch against the catalog.
pub fn check_fitb(cat: &Catalog, q: &FITBQuestion) -> Result<(), String> {
    if q.candidates.len() != 4 {
        return Err(format!("{}: {} candidates", q.qid, q.candidates.len()));
    }
    if q.answer_index > 3 {
        return Err(format!("{}: answer_index {}", q.qid, q.answer_index));
    }
    let source_id = q.source_outfit_id.as_ref().ok_or("missing source outfit")?;
    let source = cat.outfit(source_id).ok_or("unknown source outfit")?;
    let truth = &source.item_ids[q.blank_position];
    let mut rebuilt = q.context_item_ids.clone();
    rebuilt.insert(q.blank_position, truth.clone());
    if rebuilt != source.item_ids {
        return Err(format!("{}: context + blank does not rebuild the outfit", q.qid));
    }
    if q.candidates.iter().filter(|c| *c == truth).count() != 1 || &q.candidates[q.answer_index] != truth {
        return Err(format!("{}: truth not uniquely at answer_index", q.qid));
    }
    let widened = matches!(q.source, FitbSource::Generated { widened: true });
    let truth_cat = &cat.items[truth].semantic_category;
    let split_outfits = cat.split_outfits(q.split);
    for (i, c) in q.candidates.iter().enumerate() {
        if i == q.answer_index {
            continue;
        }
        if q.context_item_ids.contains(c) || source.item_ids.contains(c) {
            return Err(format!("{}: distractor {c} is in the source outfit", q.qid));
        }
        if !widened && &cat.items[c].semantic_category != truth_cat {
            return Err(format!("{}: distractor {c} has another category", q.qid));
        }
        if !split_outfits.iter().any(|o| o.outfit_id != *source_id && o.item_ids.contains(c)) {
            return Err(format!("{}: distractor {c} not from another same-split outfit", q.qid));
        }
    }
    if BTreeSet::from_iter(q.candidates.iter()).len() != 4 {
        return Err(format!("{}: duplicate candidates", q.qid));
    }
    Ok(())
}
