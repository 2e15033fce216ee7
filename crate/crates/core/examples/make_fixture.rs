//! Regenerates the two-video fixture under `fixtures/two_videos`.
//!
//! Writes the dataset files, records LLM cassettes by running the pipeline
//! against a scripted transport, replays them offline and stores the
//! checksums of the replayed outputs in `golden.sha256`.
//!
//! ```text
//! cargo run -p vsg-core --example make_fixture [-- <dir>]
//! ```

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use vsg_core::ingest::{
    detections_path, frame_embeddings_path, gt_path, manifest_path, sentence_embeddings_path, write_detections,
    write_embeddings, write_manifests, write_ndjson, TripletRecord,
};
use vsg_core::llm::{
    ChatReply, ChatRequest, ClientOptions, FnTransport, LlmClient, ResponseCache, TokenUsage, TransportError,
};
use vsg_core::model::{BoundingBox, Detection, EmbeddingMatrix, Provenance, VideoManifest};
use vsg_core::pipeline::{Pipeline, PipelineConfig, DETERMINISTIC_OUTPUTS};

const DIM: usize = 16;
const T: u32 = 16;

const CONFIG: &str = "\
seed = 7
offline = true

[paths]
data_root = \"data\"
cache_dir = \"llm_cache\"
output_dir = \"out\"
";

/// `(sentence, parser reply, embedding axes with weights)`.
type ScriptedSentence = (&'static str, &'static str, &'static [(usize, f32)]);

struct Video {
    id: &'static str,
    caption: &'static str,
    segmentation: &'static str,
    sentences: &'static [ScriptedSentence],
    /// Embedding axis of each block of four frames.
    frame_axes: [usize; 4],
}

const VIDEOS: [Video; 2] = [
    Video {
        id: "v1",
        caption: "The person takes a cup of water to drink before sitting on the sofa to watch television.",
        segmentation: "1. The person takes a cup of water.\n\
                       2. The person drinks water from the cup.\n\
                       3. The person sits on the sofa to watch television.",
        sentences: &[
            (
                "The person takes a cup of water.",
                "(person, taking, cup)",
                &[(0, 0.9), (1, 0.3)],
            ),
            (
                "The person drinks water from the cup.",
                "(person, drinking from, cup)\n(person, holding, cup)\n(person, drinking, water)",
                &[(0, 0.3), (1, 0.9)],
            ),
            (
                "The person sits on the sofa to watch television.",
                "(person, sitting on, sofa)\n(person, watching, television)",
                &[(2, 0.9), (9, 0.2)],
            ),
        ],
        frame_axes: [0, 1, 2, 9],
    },
    Video {
        id: "v2",
        caption: "Before reading a book at the table, a person opens the door.",
        segmentation: "1. A person opens the door.\n\
                       2. The person sits at the table.\n\
                       3. The person reads a book.",
        sentences: &[
            (
                "A person opens the door.",
                "(person, opening, door)",
                &[(3, 0.95), (10, 0.2)],
            ),
            (
                "The person sits at the table.",
                "(person, sitting at, table)",
                &[(4, 0.9), (5, 0.35)],
            ),
            (
                "The person reads a book.",
                "(person, reading, book)\n(person, holding, book)",
                &[(5, 0.9), (4, 0.3)],
            ),
        ],
        frame_axes: [10, 3, 4, 5],
    },
];

fn bx(x1: f64, y1: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(x1, y1, x1 + w, y1 + h).expect("positive size")
}

/// Person box per frame; objects are static unless listed.
fn scene(video: &str, frame: u32) -> Vec<(&'static str, BoundingBox, f64)> {
    let f = frame as f64;
    match video {
        "v1" => {
            let person = match frame {
                1..=4 => bx(250.0 + 4.0 * f, 120.0, 100.0, 250.0),
                5..=8 => bx(262.0, 120.0, 100.0, 250.0),
                9..=12 => bx(180.0, 200.0, 110.0, 200.0),
                _ => bx(200.0 + 100.0 * (f - 13.0), 120.0, 100.0, 250.0),
            };
            let cup = match frame {
                1..=4 => bx(330.0, 250.0, 24.0, 36.0),
                5..=8 => bx(300.0, 150.0, 24.0, 36.0),
                _ => bx(150.0, 300.0, 24.0, 36.0),
            };
            let mut out = vec![
                ("person", person, 0.95),
                ("cup", cup, 0.8),
                ("sofa", bx(100.0, 250.0, 300.0, 200.0), 0.9),
                ("television", bx(450.0, 100.0, 170.0, 150.0), 0.85),
            ];
            if frame.is_multiple_of(5) {
                out.push(("bag", bx(20.0, 400.0, 40.0, 40.0), 0.1));
            }
            out
        }
        _ => {
            let person = match frame {
                1..=4 => bx(300.0 - 60.0 * (f - 1.0), 100.0, 100.0, 260.0),
                5..=8 => bx(60.0, 100.0, 100.0, 260.0),
                _ => bx(380.0, 180.0, 110.0, 220.0),
            };
            let book = match frame {
                1..=12 => bx(450.0, 250.0, 50.0, 30.0),
                _ => bx(420.0, 220.0, 50.0, 30.0),
            };
            let mut out = vec![
                ("person", person, 0.93),
                ("door", bx(20.0, 50.0, 120.0, 350.0), 0.88),
                ("table", bx(350.0, 280.0, 250.0, 140.0), 0.9),
                ("book", book, 0.75),
            ];
            if (9..=10).contains(&frame) {
                out.push(("person", bx(560.0, 90.0, 60.0, 200.0), 0.35));
            }
            out
        }
    }
}

fn unit(weights: &[(usize, f32)], rng: &mut ChaCha8Rng, noise: f32) -> Vec<f32> {
    let mut v: Vec<f32> = (0..DIM).map(|_| rng.random_range(-noise..=noise)).collect();
    for &(axis, w) in weights {
        v[axis] += w;
    }
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn ground_truth(video: &str) -> Vec<(u32, &'static str, &'static str, &'static str)> {
    let mut out = Vec::new();
    for f in 1..=T {
        let rows: &[(&str, &str, &str)] = match (video, f) {
            ("v1", 1..=4) => &[("person", "holding", "cup"), ("person", "looking at", "cup")],
            ("v1", 5..=8) => &[("person", "drinking from", "cup"), ("person", "holding", "cup")],
            ("v1", 9..=12) => &[("person", "sitting on", "sofa"), ("person", "looking at", "television")],
            ("v1", _) => &[
                ("person", "not contacting", "sofa"),
                ("person", "looking at", "television"),
            ],
            (_, 1..=4) => &[("person", "looking at", "door")],
            (_, 5..=8) => &[("person", "touching", "door"), ("person", "in front of", "door")],
            (_, 9..=12) => &[("person", "sitting on", "table"), ("person", "not looking at", "book")],
            _ => &[("person", "holding", "book"), ("person", "looking at", "book")],
        };
        out.extend(rows.iter().map(|&(s, p, o)| (f, s, p, o)));
    }
    out
}

fn box_of(video: &str, frame: u32, class: &str) -> BoundingBox {
    scene(video, frame)
        .into_iter()
        .find(|(c, _, _)| *c == class)
        .map(|(_, b, _)| b)
        .expect("class present in scene")
}

fn jitter(b: BoundingBox, rng: &mut ChaCha8Rng, px: f64) -> BoundingBox {
    let mut d = || rng.random_range(-px..=px);
    BoundingBox::new(b.x1() + d(), b.y1() + d(), b.x2() + d(), b.y2() + d()).expect("jitter keeps order")
}

fn write_data(root: &Path) -> Result<(), Box<dyn Error>> {
    let data = root.join("data");
    fs::create_dir_all(data.join("embeddings"))?;
    fs::create_dir_all(data.join("detections"))?;
    fs::create_dir_all(data.join("gt"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut manifests = Vec::new();
    let mut predictions = Vec::new();
    for v in &VIDEOS {
        let frame_ids: Vec<String> = (1..=T).map(|i| format!("{}_{i:06}.png", v.id)).collect();
        manifests.push(VideoManifest {
            video_id: v.id.into(),
            frame_ids: frame_ids.clone(),
            fps: 1.0,
            caption: v.caption.into(),
        });

        let frames: Vec<Vec<f32>> = (0..T as usize)
            .map(|i| unit(&[(v.frame_axes[i / 4], 1.0)], &mut rng, 0.08))
            .collect();
        write_embeddings(
            &frame_embeddings_path(&data, v.id),
            &EmbeddingMatrix::from_rows(frame_ids, &frames)?,
        )?;
        let sentences: Vec<Vec<f32>> = v.sentences.iter().map(|(_, _, w)| unit(w, &mut rng, 0.05)).collect();
        let ids = (1..=sentences.len()).map(|i| i.to_string()).collect();
        write_embeddings(
            &sentence_embeddings_path(&data, v.id),
            &EmbeddingMatrix::from_rows(ids, &sentences)?,
        )?;

        let dets: Vec<Detection> = (1..=T)
            .flat_map(|f| {
                scene(v.id, f)
                    .into_iter()
                    .map(move |(class, bbox, confidence)| Detection {
                        frame_index: f,
                        entity_class: class.into(),
                        bbox,
                        confidence,
                    })
            })
            .collect();
        write_detections(&detections_path(&data, v.id), &dets)?;

        let gt: Vec<TripletRecord> = ground_truth(v.id)
            .into_iter()
            .map(|(f, s, p, o)| TripletRecord {
                video_id: v.id.into(),
                frame_index: f,
                subject_class: s.into(),
                predicate_class: p.into(),
                object_class: o.into(),
                subject_box: box_of(v.id, f, s),
                object_box: box_of(v.id, f, o),
                score: None,
                provenance: Provenance::GroundTruth,
            })
            .collect();
        for r in &gt {
            if rng.random_bool(0.8) {
                predictions.push(TripletRecord {
                    subject_box: jitter(r.subject_box, &mut rng, 4.0),
                    object_box: jitter(r.object_box, &mut rng, 2.0),
                    score: Some(rng.random_range(0.3..0.95)),
                    provenance: Provenance::Prediction,
                    ..r.clone()
                });
            }
            if rng.random_bool(0.3) {
                predictions.push(TripletRecord {
                    predicate_class: "touching".into(),
                    subject_box: jitter(r.subject_box, &mut rng, 4.0),
                    object_box: jitter(r.object_box, &mut rng, 2.0),
                    score: Some(rng.random_range(0.5..0.99)),
                    provenance: Provenance::Prediction,
                    ..r.clone()
                });
            }
        }
        write_ndjson(&gt_path(&data, v.id), &gt)?;
    }
    write_manifests(&manifest_path(&data), &manifests)?;
    write_ndjson(&root.join("predictions.ndjson"), &predictions)?;
    fs::write(root.join("config.toml"), CONFIG)?;
    Ok(())
}

fn scripted_reply(request: &ChatRequest<'_>) -> Result<ChatReply, TransportError> {
    let last = &request.messages.last().expect("non-empty request").content;
    let reply = VIDEOS
        .iter()
        .find(|v| last.contains(v.caption))
        .map(|v| v.segmentation.to_string())
        .or_else(|| {
            VIDEOS
                .iter()
                .flat_map(|v| v.sentences.iter())
                .find(|(s, _, _)| last.trim() == *s)
                .map(|(_, r, _)| r.to_string())
        })
        .ok_or_else(|| TransportError(format!("no scripted reply for {last:?}")))?;
    let prompt_chars: usize = request.messages.iter().map(|m| m.content.len()).sum();
    Ok(ChatReply {
        usage: TokenUsage::new(prompt_chars.div_ceil(4) as u64, reply.len().div_ceil(4) as u64),
        content: reply,
    })
}

fn sha256_file(path: &Path) -> Result<String, Box<dyn Error>> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn main() -> Result<(), Box<dyn Error>> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/two_videos"));
    if root.exists() {
        fs::remove_dir_all(&root)?;
    }
    fs::create_dir_all(&root)?;
    let root = root.canonicalize()?;
    write_data(&root)?;

    let config = PipelineConfig::load(&root.join("config.toml"))?;
    let scratch = tempfile_dir(&root)?;

    let mut recording = config.clone();
    recording.offline = false;
    recording.paths.output_dir = scratch.join("record");
    let client = LlmClient::new(
        Some(Arc::new(FnTransport(scripted_reply))),
        Some(ResponseCache::new(&config.paths.cache_dir)),
        ClientOptions::default(),
    );
    let recorded = Pipeline::with_client(recording, Some(client))?.run_all()?;

    let mut replay = config.clone();
    replay.paths.output_dir = scratch.join("replay");
    let replayed = Pipeline::new(replay.clone())?.run_all()?;
    assert_eq!(recorded.counts, replayed.counts);
    assert_eq!(replayed.network_requests, 0);

    let mut golden = String::new();
    for name in DETERMINISTIC_OUTPUTS {
        let a = sha256_file(&scratch.join("record").join(name))?;
        let b = sha256_file(&replay.paths.output_dir.join(name))?;
        assert_eq!(a, b, "{name} differs between recording and replay");
        golden.push_str(&format!("{b}  {name}\n"));
    }
    fs::write(root.join("golden.sha256"), golden)?;
    println!("{}", serde_json::to_string_pretty(&replayed.counts)?);
    println!("replayed outputs kept in {}", replay.paths.output_dir.display());
    Ok(())
}

/// A scratch directory beside the fixture that is not part of it.
fn tempfile_dir(root: &Path) -> Result<PathBuf, Box<dyn Error>> {
    let dir = root.with_extension("scratch");
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}
