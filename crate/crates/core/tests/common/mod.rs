#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use image::RgbImage;
use sdad_core::backend::{wire, Backend, MockBackend};
use sdad_core::embeddings::{EmbeddingStore, StoreWriter};
use sdad_core::manifest::{save_manifest, DatasetManifest, SampleRecord, SubgroupTaxonomy};
use sdad_core::palette::{encode_id_mask, MaskGrid, Palette};
use sdad_core::rng::SplitMix64;
use sdad_core::subgroup::{Similarity, SubgroupTextBank};

pub const CLASSES: [&str; 4] = ["road", "car", "building", "sky"];
pub const FIXTURE_DIM: usize = 64;

pub fn palette() -> Palette {
    Palette::from_names(&CLASSES)
}

pub fn rgb_png(w: u32, h: u32, seed: u64) -> Vec<u8> {
    let mut rng = SplitMix64::new(seed);
    let img = RgbImage::from_fn(w, h, |_, _| {
        let x = rng.next_u64();
        image::Rgb([x as u8, (x >> 8) as u8, (x >> 16) as u8])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

/// Mask with a sky band on top, road at the bottom, and a few other classes
/// in between depending on `k`.
pub fn mask_grid(w: u32, h: u32, k: u64) -> MaskGrid {
    let ids = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if y < h / 4 {
                3
            } else if y >= 3 * h / 4 {
                0
            } else if (x + k as u32).is_multiple_of(3) {
                1
            } else {
                2
            }
        })
        .collect();
    MaskGrid::new(w, h, ids)
}

pub struct Fixture {
    pub dir: PathBuf,
    pub manifest_path: PathBuf,
    pub palette_path: PathBuf,
    pub store_path: PathBuf,
    pub bank_path: PathBuf,
    pub manifest: DatasetManifest,
    pub bank: SubgroupTextBank,
    pub store: EmbeddingStore,
    pub palette: Palette,
}

/// 9 subgroups × `per` samples with images, masks, an embedding store whose
/// rows sit next to the mock backend's bank entries, and a palette.
/// With `labeled`, samples carry their subgroup; otherwise only `embedding_ref`.
pub fn build_fixture(dir: &Path, per: usize, labeled: bool) -> Fixture {
    let t = SubgroupTaxonomy::weather_time();
    let backend = MockBackend::new(FIXTURE_DIM, 0);
    let bank = SubgroupTextBank::build(&t, None, Similarity::Dot, &backend).unwrap();
    std::fs::create_dir_all(dir.join("images")).unwrap();
    std::fs::create_dir_all(dir.join("masks")).unwrap();
    let mut m = DatasetManifest::new(t.clone());
    let mut w = StoreWriter::new(FIXTURE_DIM);
    let mut noise = SplitMix64::new(1234);
    for (k, sg) in t.enumerate().into_iter().enumerate() {
        for i in 0..per {
            let id = format!("s{k}_{i}");
            let n = (k * per + i) as u64;
            std::fs::write(dir.join(format!("images/{id}.png")), rgb_png(8, 8, n)).unwrap();
            std::fs::write(
                dir.join(format!("masks/{id}.png")),
                encode_id_mask(&mask_grid(8, 8, n)),
            )
            .unwrap();
            let base = &bank.entries[k].embedding;
            let row: Vec<f64> = base
                .iter()
                .map(|v| v + 0.05 * noise.next_signed_unit())
                .collect();
            let r = w.push_with_id(&id, &row).unwrap();
            let mut s = SampleRecord::original(
                &id,
                &format!("images/{id}.png"),
                &format!("masks/{id}.png"),
            );
            s.embedding_ref = Some(r);
            if labeled {
                s.subgroup = Some(sg.clone());
            }
            m.samples.push(s);
        }
    }
    let store_path = dir.join("features.emb");
    let store = w.write(&store_path).unwrap();
    let manifest_path = dir.join("manifest.jsonl");
    save_manifest(&m, &manifest_path).unwrap();
    let palette_path = dir.join("palette.json");
    let pal = palette();
    std::fs::write(&palette_path, serde_json::to_vec(&pal).unwrap()).unwrap();
    let bank_path = dir.join("bank.json");
    std::fs::write(&bank_path, serde_json::to_vec(&bank).unwrap()).unwrap();
    Fixture {
        dir: dir.to_path_buf(),
        manifest_path,
        palette_path,
        store_path,
        bank_path,
        manifest: m,
        bank,
        store,
        palette: pal,
    }
}

/// Every file under `dir`, relative path → bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Knobs for the test server.
#[derive(Default)]
pub struct ServerBehavior {
    /// Answer this many requests with HTTP 503 before serving normally.
    pub fail_first: AtomicUsize,
    /// Status used for those failures; 0 means 503.
    pub fail_status: AtomicUsize,
    /// Sleep before answering each request.
    pub delay_ms: AtomicUsize,
}

pub type RequestLog = Arc<Mutex<Vec<(String, Vec<u8>)>>>;

/// Minimal HTTP/1.1 server over `wire::handle`, one thread per connection.
pub struct TestServer {
    pub url: String,
    pub requests: RequestLog,
    pub behavior: Arc<ServerBehavior>,
    pub in_flight: Arc<AtomicUsize>,
    pub max_in_flight: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, Vec<u8>)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut len = 0usize;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some((path, body))
}

impl TestServer {
    pub fn start(backend: Arc<dyn Backend>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests: RequestLog = Arc::new(Mutex::new(Vec::new()));
        let behavior = Arc::new(ServerBehavior::default());
        let in_flight = Arc::new(AtomicUsize::new(0));
        let max_in_flight = Arc::new(AtomicUsize::new(0));
        let (rq, bh, inf, mx) = (
            requests.clone(),
            behavior.clone(),
            in_flight.clone(),
            max_in_flight.clone(),
        );
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let (backend, rq, bh, inf, mx) = (
                    backend.clone(),
                    rq.clone(),
                    bh.clone(),
                    inf.clone(),
                    mx.clone(),
                );
                thread::spawn(move || {
                    let Some((path, body)) = read_request(&mut stream) else {
                        return;
                    };
                    let now = inf.fetch_add(1, Ordering::SeqCst) + 1;
                    mx.fetch_max(now, Ordering::SeqCst);
                    rq.lock().unwrap().push((path.clone(), body.clone()));
                    let delay = bh.delay_ms.load(Ordering::SeqCst);
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay as u64));
                    }
                    let failing = bh
                        .fail_first
                        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                        .is_ok();
                    let (status, resp) = if failing {
                        let st = match bh.fail_status.load(Ordering::SeqCst) {
                            0 => 503,
                            n => n as u16,
                        };
                        (st, br#"{"error":"injected failure"}"#.to_vec())
                    } else {
                        wire::handle(backend.as_ref(), &path, &body)
                    };
                    inf.fetch_sub(1, Ordering::SeqCst);
                    let head = format!(
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                        resp.len()
                    );
                    let _ = stream.write_all(head.as_bytes());
                    let _ = stream.write_all(&resp);
                    let _ = stream.flush();
                });
            }
        });
        Self {
            url,
            requests,
            behavior,
            in_flight,
            max_in_flight,
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

/// A port nothing listens on.
pub fn dead_url() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", l.local_addr().unwrap());
    drop(l);
    url
}

/// Path to the crate's shipped JSON schemas.
pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["sdad"];
    argv.extend_from_slice(args);
    let code = sdad_core::cli::run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}
