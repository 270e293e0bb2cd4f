//! On-disk corpus layout:
//!
//! * `manifest.jsonl` - one JSON record per line, tagged by `kind`: a leading
//!   `spec` record, then `identity`, `image` and `text` records.
//! * `pixels.bin` - a 40-byte header (`RSPX`, then little-endian u32 version, dtype code
//!   (1 = f32) and ndim, then three u64 dims `[n_images, side, side]`) followed by
//!   row-major little-endian f32 pixels.
//! * `vocab.json` - array of `{ "id", "token" }` entries.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Corpus, CorpusSpec, Identity, ImageSample, Split, TextSample, Vocab};
use crate::error::{Error, Result};

pub const PIXEL_MAGIC: &[u8; 4] = b"RSPX";
const PIXEL_VERSION: u32 = 1;
const DTYPE_F32_LE: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PIXELS_FILE: &str = "pixels.bin";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Spec {
        spec: CorpusSpec,
    },
    Identity {
        id: u32,
        attributes: Vec<u32>,
        split: Split,
    },
    Image {
        image_id: u32,
        identity_id: u32,
        split: Split,
        visible: Vec<bool>,
    },
    Text {
        text_id: u32,
        identity_id: u32,
        split: Split,
        source_image_id: u32,
        mentioned: Vec<u32>,
        tokens: Vec<u32>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelHeader {
    pub dtype: u32,
    pub shape: [u64; 3],
}

impl PixelHeader {
    pub const LEN: usize = 40;

    fn encode(&self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        out[0..4].copy_from_slice(PIXEL_MAGIC);
        out[4..8].copy_from_slice(&PIXEL_VERSION.to_le_bytes());
        out[8..12].copy_from_slice(&self.dtype.to_le_bytes());
        out[12..16].copy_from_slice(&3u32.to_le_bytes());
        for (i, d) in self.shape.iter().enumerate() {
            out[16 + 8 * i..24 + 8 * i].copy_from_slice(&d.to_le_bytes());
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < Self::LEN || &bytes[0..4] != PIXEL_MAGIC {
            return Err(Error::Data("pixels.bin: bad magic".into()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        if u32_at(4) != PIXEL_VERSION {
            return Err(Error::Data(format!("pixels.bin: unsupported version {}", u32_at(4))));
        }
        if u32_at(12) != 3 {
            return Err(Error::Data("pixels.bin: expected 3 dims".into()));
        }
        Ok(Self {
            dtype: u32_at(8),
            shape: [u64_at(16), u64_at(24), u64_at(32)],
        })
    }
}

fn split_of(corpus: &Corpus, identity: u32) -> Split {
    corpus.split_of(identity)
}

/// Writes the corpus into `dir` (created if missing).
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    let mut line = |r: &Record| -> Result<()> {
        serde_json::to_writer(&mut manifest, r)?;
        manifest.push(b'\n');
        Ok(())
    };
    line(&Record::Spec { spec: corpus.spec.clone() })?;
    for i in &corpus.identities {
        line(&Record::Identity {
            id: i.id,
            attributes: i.attributes.clone(),
            split: i.split,
        })?;
    }
    for img in &corpus.images {
        line(&Record::Image {
            image_id: img.image_id,
            identity_id: img.identity_id,
            split: split_of(corpus, img.identity_id),
            visible: img.visible.clone(),
        })?;
    }
    for t in &corpus.texts {
        line(&Record::Text {
            text_id: t.text_id,
            identity_id: t.identity_id,
            split: split_of(corpus, t.identity_id),
            source_image_id: t.source_image_id,
            mentioned: t.mentioned.clone(),
            tokens: t.tokens.clone(),
        })?;
    }
    fs::write(dir.join(MANIFEST_FILE), &manifest)?;

    let side = corpus.spec.image_side as u64;
    let header = PixelHeader {
        dtype: DTYPE_F32_LE,
        shape: [corpus.images.len() as u64, side, side],
    };
    let mut pixels = fs::File::create(dir.join(PIXELS_FILE))?;
    let mut buf = Vec::with_capacity(PixelHeader::LEN + 4 * corpus.images.len() * (side * side) as usize);
    buf.extend_from_slice(&header.encode());
    for img in &corpus.images {
        for p in &img.pixels {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    pixels.write_all(&buf)?;

    fs::write(dir.join(VOCAB_FILE), corpus.vocab.to_json()?)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut spec = None;
    let mut identities = Vec::new();
    let mut images = Vec::new();
    let mut texts = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("manifest line {}: {e}", lineno + 1)))?;
        match record {
            Record::Spec { spec: s } => spec = Some(s),
            Record::Identity { id, attributes, split } => identities.push(Identity { id, attributes, split }),
            Record::Image {
                image_id,
                identity_id,
                visible,
                ..
            } => images.push(ImageSample {
                image_id,
                identity_id,
                pixels: Vec::new(),
                visible,
            }),
            Record::Text {
                text_id,
                identity_id,
                source_image_id,
                mentioned,
                tokens,
                ..
            } => texts.push(TextSample {
                text_id,
                identity_id,
                source_image_id,
                mentioned,
                tokens,
            }),
        }
    }
    let spec = spec.ok_or_else(|| Error::Data("manifest has no spec record".into()))?;

    let bytes = fs::read(dir.join(PIXELS_FILE))?;
    let header = PixelHeader::decode(&bytes)?;
    if header.dtype != DTYPE_F32_LE {
        return Err(Error::Data(format!("pixels.bin: unsupported dtype code {}", header.dtype)));
    }
    let [n, rows, cols] = header.shape;
    let per_image = (rows * cols) as usize;
    let side = spec.image_side as u64;
    if n as usize != images.len() || rows != side || cols != side {
        return Err(Error::Data(format!(
            "pixels.bin shape {:?} disagrees with manifest ({} images of side {})",
            header.shape,
            images.len(),
            spec.image_side
        )));
    }
    let body = &bytes[PixelHeader::LEN..];
    if body.len() != 4 * per_image * images.len() {
        return Err(Error::Data("pixels.bin: truncated body".into()));
    }
    for (i, img) in images.iter_mut().enumerate() {
        let chunk = &body[4 * per_image * i..4 * per_image * (i + 1)];
        img.pixels = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
    }

    let vocab = Vocab::from_json(&fs::read_to_string(dir.join(VOCAB_FILE))?)?;
    Corpus::assemble(spec, vocab, identities, images, texts)
}

/// SHA-256 over the three corpus files, each prefixed by its name and byte length.
pub fn corpus_fingerprint(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in [MANIFEST_FILE, PIXELS_FILE, VOCAB_FILE] {
        let bytes = fs::read(dir.join(name))?;
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&CorpusSpec { seed: 9, ..Default::default() }).unwrap();
        save_corpus(&c, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.spec, c.spec);
        assert_eq!(back.identities, c.identities);
        assert_eq!(back.texts, c.texts);
        for (a, b) in back.images.iter().zip(&c.images) {
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(a.visible, b.visible);
        }
        assert_eq!(back.vocab.tokens(), c.vocab.tokens());
    }

    #[test]
    fn header_layout() {
        let h = PixelHeader { dtype: DTYPE_F32_LE, shape: [5, 12, 12] };
        let bytes = h.encode();
        assert_eq!(&bytes[0..4], b"RSPX");
        assert_eq!(PixelHeader::decode(&bytes).unwrap(), h);
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let spec = CorpusSpec { seed: 7, ..Default::default() };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_corpus(&generate_corpus(&spec).unwrap(), a.path()).unwrap();
        save_corpus(&generate_corpus(&spec).unwrap(), b.path()).unwrap();
        for f in [MANIFEST_FILE, PIXELS_FILE, VOCAB_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        assert_eq!(corpus_fingerprint(a.path()).unwrap(), corpus_fingerprint(b.path()).unwrap());
    }
}
