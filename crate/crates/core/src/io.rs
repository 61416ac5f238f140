//! On-disk formats: PGM images, dataset manifest and labels, checkpoints.
//!
//! A dataset directory holds
//! - `manifest.json`: format version, seed, counts, image extent, entity names
//!   and a SHA-256 over the labels file followed by every image file in label order;
//! - `labels.jsonl`: one record per sample (`id`, `split`, `image`, `targets`, `meta`);
//! - `images/<id>.pgm`: binary PGM (`P5`), 8-bit, row-major.
//!
//! A checkpoint is `EATNCKPT`, a little-endian `u32` format version, a `u64`
//! header length, a JSON header (model config, schema, alphabet, tensor names
//! and shapes, optional training state), then every tensor as little-endian
//! `f64`s in header order, followed by the momentum buffers when present.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{EntitySchema, GrayImage, Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::model::{EatenModel, ModelConfig, ModelParams};
use crate::numerics::Parameters;
use crate::synthgen::{Dataset, Split};
use crate::training::TrainState;

pub const DATASET_FORMAT: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EATNCKPT";
pub const CHECKPOINT_FORMAT: u32 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Rounds every pixel to the nearest of the 256 levels PGM can store.
pub fn quantize(image: &mut GrayImage) {
    for v in &mut image.data {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format_err(path, format!("expected P5 magic, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format_err(path, format!("only 8-bit PGM is supported, maxval {max}")));
    }
    let data = &bytes[i + 1..];
    if data.len() != w * h {
        return Err(format_err(path, format!("expected {} pixels, found {}", w * h, data.len())));
    }
    Ok(GrayImage {
        width: w,
        height: h,
        data: data.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?, path)
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    Ok(fs::write(path, encode_pgm(image))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub width: usize,
    pub height: usize,
    pub entities: Vec<String>,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LabelRecord {
    id: String,
    split: Split,
    image: String,
    targets: BTreeMap<String, String>,
    meta: SampleMeta,
}

fn image_rel(id: &str) -> String {
    format!("images/{id}.pgm")
}

/// Writes the dataset and returns its manifest.
pub fn write_dataset(dir: &Path, data: &Dataset, entities: &[String]) -> Result<Manifest> {
    fs::create_dir_all(dir.join("images"))?;
    let mut labels = Vec::new();
    let mut hasher = Sha256::new();
    let mut images = Vec::new();
    for (split, samples) in [(Split::Train, &data.train), (Split::Test, &data.test)] {
        for s in samples.iter() {
            let rec = LabelRecord {
                id: s.id.clone(),
                split,
                image: image_rel(&s.id),
                targets: s.targets.clone(),
                meta: s.meta.clone(),
            };
            serde_json::to_writer(&mut labels, &rec)?;
            labels.push(b'\n');
            let bytes = encode_pgm(&s.image);
            fs::write(dir.join(&rec.image), &bytes)?;
            images.push(bytes);
        }
    }
    fs::write(dir.join("labels.jsonl"), &labels)?;
    hasher.update(&labels);
    for b in &images {
        hasher.update(b);
    }
    let first = data.train.first().or(data.test.first());
    let manifest = Manifest {
        format: DATASET_FORMAT,
        seed: data.seed,
        n_train: data.train.len(),
        n_test: data.test.len(),
        width: first.map_or(0, |s| s.image.width),
        height: first.map_or(0, |s| s.image.height),
        entities: entities.to_vec(),
        hash: hex::encode(hasher.finalize()),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads a dataset, checking counts and the manifest hash.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Dataset)> {
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?)
        .map_err(|e| format_err(&mpath, e.to_string()))?;
    if manifest.format != DATASET_FORMAT {
        return Err(format_err(&mpath, format!("unsupported dataset format {}", manifest.format)));
    }
    let lpath = dir.join("labels.jsonl");
    let labels = fs::read(&lpath)?;
    let mut hasher = Sha256::new();
    hasher.update(&labels);
    let mut data = Dataset {
        seed: manifest.seed,
        train: Vec::new(),
        test: Vec::new(),
    };
    for (n, line) in BufReader::new(labels.as_slice()).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line)
            .map_err(|e| format_err(&lpath, format!("line {}: {e}", n + 1)))?;
        let ipath: PathBuf = dir.join(&rec.image);
        let bytes = fs::read(&ipath)?;
        hasher.update(&bytes);
        let sample = Sample {
            id: rec.id,
            image: decode_pgm(&bytes, &ipath)?,
            targets: rec.targets,
            meta: rec.meta,
        };
        match rec.split {
            Split::Train => data.train.push(sample),
            Split::Test => data.test.push(sample),
        }
    }
    if data.train.len() != manifest.n_train || data.test.len() != manifest.n_test {
        return Err(format_err(
            &mpath,
            format!(
                "manifest lists {}/{} samples but labels hold {}/{}",
                manifest.n_train,
                manifest.n_test,
                data.train.len(),
                data.test.len()
            ),
        ));
    }
    let hash = hex::encode(hasher.finalize());
    if hash != manifest.hash {
        return Err(format_err(&mpath, format!("hash mismatch: manifest {} vs contents {hash}", manifest.hash)));
    }
    Ok((manifest, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    schema: EntitySchema,
    alphabet: String,
    tensors: Vec<TensorEntry>,
    /// `(next epoch, optimizer steps)` when momentum buffers follow the weights.
    state: Option<(usize, usize)>,
}

pub struct Checkpoint {
    pub model: EatenModel,
    pub state: Option<TrainState>,
}

fn write_tensors(out: &mut Vec<u8>, params: &ModelParams) {
    for (_, t) in params.named_tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_checkpoint(path: &Path, model: &EatenModel, state: Option<&TrainState>) -> Result<()> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        schema: model.schema.clone(),
        alphabet: model.vocab.alphabet(),
        tensors: model
            .params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
        state: state.map(|s| (s.epoch, s.step)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    write_tensors(&mut out, &model.params);
    if let Some(s) = state {
        write_tensors(&mut out, &s.velocity);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| format_err(path, "checkpoint ends before all tensors were read"))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn fill_params(r: &mut impl Read, header: &CheckpointHeader, params: &mut ModelParams, path: &Path) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, the model has {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if name != &entry.name || shape != &entry.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name} expects shape {shape:?}, checkpoint has {} with shape {:?}",
                entry.name, entry.shape
            )));
        }
    }
    for (t, entry) in params.tensors_mut().into_iter().zip(&header.tensors) {
        let n: usize = entry.shape.iter().product();
        t.data_mut().copy_from_slice(&read_f64s(r, n, path)?);
    }
    Ok(())
}

fn read_header(path: &Path) -> Result<(CheckpointHeader, std::io::Cursor<Vec<u8>>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(format_err(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_FORMAT {
        return Err(format_err(path, format!("unsupported checkpoint format {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20 + len;
    if bytes.len() < end {
        return Err(format_err(path, "truncated checkpoint header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..end]).map_err(|e| format_err(path, e.to_string()))?;
    let mut cursor = std::io::Cursor::new(bytes);
    cursor.set_position(end as u64);
    Ok((header, cursor))
}

/// Loads a checkpoint, rebuilding the model from its own header.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, mut r) = read_header(path)?;
    let vocab = crate::domain::CharVocab::new(&header.alphabet)?;
    let mut model = EatenModel::new(header.model.clone(), header.schema.clone(), vocab)?;
    fill_params(&mut r, &header, &mut model.params, path)?;
    let state = match header.state {
        Some((epoch, step)) => {
            let mut velocity = model.params.zeros_like();
            fill_params(&mut r, &header, &mut velocity, path)?;
            Some(TrainState { epoch, step, velocity })
        }
        None => None,
    };
    Ok(Checkpoint { model, state })
}

/// Loads checkpoint weights into `model`, which must have the same layout.
/// Mismatches name the offending parameter.
pub fn load_weights_into(path: &Path, model: &mut EatenModel) -> Result<Option<TrainState>> {
    let (header, mut r) = read_header(path)?;
    if header.schema != model.schema {
        return Err(Error::Checkpoint("checkpoint schema differs from the configured schema".into()));
    }
    if header.alphabet != model.vocab.alphabet() {
        return Err(Error::Checkpoint("checkpoint alphabet differs from the configured alphabet".into()));
    }
    fill_params(&mut r, &header, &mut model.params, path)?;
    match header.state {
        Some((epoch, step)) => {
            let mut velocity = model.params.zeros_like();
            fill_params(&mut r, &header, &mut velocity, path)?;
            Ok(Some(TrainState { epoch, step, velocity }))
        }
        None => Ok(None),
    }
}
