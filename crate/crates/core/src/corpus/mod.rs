//! Synthetic person-like corpus.
//!
//! Each identity is a vector of categorical attributes (e.g. `hat = red`). An
//! image renders every attribute as a glyph cell on a grid; occlusion blanks
//! cells at random, independently per image. Every text annotates exactly one
//! image and mentions only the attributes visible in it, so pairing a text with
//! another image of the same identity yields a weak positive that may mention
//! attributes the image does not show.

mod sampling;
mod store;
mod vocab;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use sampling::{
    mask_tokens, pair_batch_for_texts, sample_pair_batch, MaskedText, PairBatch, PositiveMode,
    Relation,
};
pub use store::{
    corpus_fingerprint, load_corpus, save_corpus, PixelHeader, MANIFEST_FILE, PIXELS_FILE, PIXEL_MAGIC, VOCAB_FILE,
};
pub use vocab::{color_word, encode_text, noun_word, Vocab, CLS, MASK, PAD};

/// Generation parameters for [`generate_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Total identities, train and test together.
    pub n_identities: usize,
    /// How many of the identities are held out as the test split.
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub texts_per_image: usize,
    pub n_attributes: usize,
    /// Number of values (colors) each attribute can take.
    pub attribute_vocab_size: usize,
    pub occlusion_rate: f64,
    pub image_side: usize,
    pub patch_side: usize,
    pub max_len: usize,
    /// Standard deviation of per-pixel Gaussian jitter.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_identities: 48,
            test_identities: 16,
            images_per_identity: 4,
            texts_per_image: 2,
            n_attributes: 6,
            attribute_vocab_size: 6,
            occlusion_rate: 0.3,
            image_side: 12,
            patch_side: 4,
            max_len: 16,
            pixel_noise: 0.05,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_identities < 2 {
            return fail(format!("n_identities must be >= 2, got {}", self.n_identities));
        }
        if self.test_identities >= self.n_identities {
            return fail(format!(
                "test_identities must be < n_identities ({}), got {}",
                self.n_identities, self.test_identities
            ));
        }
        if self.images_per_identity < 2 {
            return fail(format!(
                "images_per_identity must be >= 2, got {}",
                self.images_per_identity
            ));
        }
        if self.texts_per_image < 1 {
            return fail("texts_per_image must be >= 1, got 0".into());
        }
        if self.n_attributes < 1 {
            return fail("n_attributes must be >= 1, got 0".into());
        }
        if self.attribute_vocab_size < 2 {
            return fail(format!(
                "attribute_vocab_size must be >= 2, got {}",
                self.attribute_vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return fail(format!(
                "occlusion_rate must be in [0, 1), got {}",
                self.occlusion_rate
            ));
        }
        if self.patch_side == 0 || self.image_side == 0 || self.image_side % self.patch_side != 0 {
            return fail(format!(
                "image_side ({}) must be a positive multiple of patch_side ({})",
                self.image_side, self.patch_side
            ));
        }
        if self.patch_side * self.patch_side < 2 {
            return fail("patch_side must be >= 2 to hold distinct glyphs".into());
        }
        if self.n_attributes > self.n_patches() {
            return fail(format!(
                "n_attributes ({}) exceeds the number of grid cells ({})",
                self.n_attributes,
                self.n_patches()
            ));
        }
        let glyph_space = 2f64.powi((self.patch_side * self.patch_side) as i32) - 1.0;
        if (self.attribute_vocab_size as f64) > glyph_space {
            return fail(format!(
                "attribute_vocab_size ({}) exceeds the distinct glyphs a {}x{} cell can hold",
                self.attribute_vocab_size, self.patch_side, self.patch_side
            ));
        }
        let combos = (self.attribute_vocab_size as f64).powi(self.n_attributes as i32);
        if (self.n_identities as f64) > combos {
            return fail(format!(
                "n_identities ({}) exceeds the {} distinct attribute vectors",
                self.n_identities, combos
            ));
        }
        if self.max_len < 2 {
            return fail(format!("max_len must be >= 2, got {}", self.max_len));
        }
        if !(self.pixel_noise >= 0.0 && self.pixel_noise.is_finite()) {
            return fail(format!("pixel_noise must be finite and >= 0, got {}", self.pixel_noise));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub id: u32,
    /// Value index per attribute.
    pub attributes: Vec<u32>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub image_id: u32,
    pub identity_id: u32,
    /// Row-major `image_side x image_side` grid with values in `[0, 1]`.
    #[serde(skip)]
    pub pixels: Vec<f32>,
    pub visible: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub text_id: u32,
    pub identity_id: u32,
    pub source_image_id: u32,
    /// Attribute indices in mention order.
    pub mentioned: Vec<u32>,
    pub tokens: Vec<u32>,
}

/// A generated corpus. Ids equal positions: `images[i].image_id == i`, same for texts and identities.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub vocab: Vocab,
    pub identities: Vec<Identity>,
    pub images: Vec<ImageSample>,
    pub texts: Vec<TextSample>,
    images_by_identity: Vec<Vec<u32>>,
}

impl Corpus {
    pub(crate) fn assemble(
        spec: CorpusSpec,
        vocab: Vocab,
        identities: Vec<Identity>,
        images: Vec<ImageSample>,
        texts: Vec<TextSample>,
    ) -> Result<Self> {
        let mut images_by_identity = vec![Vec::new(); identities.len()];
        for (i, img) in images.iter().enumerate() {
            if img.image_id as usize != i {
                return Err(Error::Data(format!("image id {} at position {i}", img.image_id)));
            }
            let slot = images_by_identity
                .get_mut(img.identity_id as usize)
                .ok_or_else(|| Error::Data(format!("image {i} has unknown identity")))?;
            slot.push(img.image_id);
        }
        for (i, t) in texts.iter().enumerate() {
            if t.text_id as usize != i {
                return Err(Error::Data(format!("text id {} at position {i}", t.text_id)));
            }
            let src = images.get(t.source_image_id as usize).ok_or_else(|| {
                Error::Data(format!("text {i} annotates missing image {}", t.source_image_id))
            })?;
            if src.identity_id != t.identity_id {
                return Err(Error::Data(format!("text {i} identity differs from its source image")));
            }
        }
        Ok(Self {
            spec,
            vocab,
            identities,
            images,
            texts,
            images_by_identity,
        })
    }

    pub fn split_of(&self, identity_id: u32) -> Split {
        self.identities[identity_id as usize].split
    }

    pub fn images_of(&self, identity_id: u32) -> &[u32] {
        &self.images_by_identity[identity_id as usize]
    }

    pub fn image(&self, image_id: u32) -> &ImageSample {
        &self.images[image_id as usize]
    }

    pub fn text(&self, text_id: u32) -> &TextSample {
        &self.texts[text_id as usize]
    }

    pub fn text_ids(&self, split: Split) -> Vec<u32> {
        self.texts
            .iter()
            .filter(|t| self.split_of(t.identity_id) == split)
            .map(|t| t.text_id)
            .collect()
    }

    pub fn image_ids(&self, split: Split) -> Vec<u32> {
        self.images
            .iter()
            .filter(|i| self.split_of(i.identity_id) == split)
            .map(|i| i.image_id)
            .collect()
    }

    pub fn identity_ids(&self, split: Split) -> Vec<u32> {
        self.identities
            .iter()
            .filter(|i| i.split == split)
            .map(|i| i.id)
            .collect()
    }

    /// Attribute words of a text that are occluded in `image_id`.
    pub fn unseen_mentions(&self, text_id: u32, image_id: u32) -> usize {
        let image = self.image(image_id);
        self.text(text_id)
            .mentioned
            .iter()
            .filter(|&&a| !image.visible[a as usize])
            .count()
    }
}

const GLYPH_ON: f32 = 0.9;
const GLYPH_OFF: f32 = 0.15;

/// Generates a corpus. Deterministic in `spec` (including its seed).
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = Vocab::for_attributes(spec.n_attributes, spec.attribute_vocab_size)?;
    let glyphs = sample_glyphs(spec, &mut rng);

    let mut seen = HashSet::new();
    let n_train = spec.n_identities - spec.test_identities;
    let mut identities = Vec::with_capacity(spec.n_identities);
    while identities.len() < spec.n_identities {
        let attributes: Vec<u32> = (0..spec.n_attributes)
            .map(|_| rng.random_range(0..spec.attribute_vocab_size as u32))
            .collect();
        if seen.insert(attributes.clone()) {
            let id = identities.len() as u32;
            let split = if (id as usize) < n_train { Split::Train } else { Split::Test };
            identities.push(Identity { id, attributes, split });
        }
    }

    let noise = Normal::new(0.0, spec.pixel_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut images = Vec::new();
    let mut texts = Vec::new();
    for identity in &identities {
        for _ in 0..spec.images_per_identity {
            let visible = sample_visibility(spec, &mut rng);
            let pixels = render(spec, &glyphs, &identity.attributes, &visible, &noise, &mut rng);
            let image_id = images.len() as u32;
            for _ in 0..spec.texts_per_image {
                let mut mentioned: Vec<u32> = (0..spec.n_attributes as u32)
                    .filter(|&a| visible[a as usize])
                    .collect();
                mentioned.shuffle(&mut rng);
                let mut words = Vec::with_capacity(2 * mentioned.len());
                for &a in &mentioned {
                    words.push(color_word(identity.attributes[a as usize] as usize));
                    words.push(noun_word(a as usize));
                }
                let (tokens, _) = encode_text(&vocab, &words, spec.max_len)?;
                texts.push(TextSample {
                    text_id: texts.len() as u32,
                    identity_id: identity.id,
                    source_image_id: image_id,
                    mentioned,
                    tokens,
                });
            }
            images.push(ImageSample {
                image_id,
                identity_id: identity.id,
                pixels,
                visible,
            });
        }
    }
    Corpus::assemble(spec.clone(), vocab, identities, images, texts)
}

/// One distinct, non-empty binary pattern per attribute value.
fn sample_glyphs(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let cells = spec.patch_side * spec.patch_side;
    let mut glyphs: Vec<Vec<bool>> = Vec::with_capacity(spec.attribute_vocab_size);
    while glyphs.len() < spec.attribute_vocab_size {
        let g: Vec<bool> = (0..cells).map(|_| rng.random_bool(0.5)).collect();
        if g.iter().any(|&b| b) && !glyphs.contains(&g) {
            glyphs.push(g);
        }
    }
    glyphs
}

/// Independent per-attribute occlusion, resampled until at least one attribute is visible.
fn sample_visibility(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<bool> {
    loop {
        let visible: Vec<bool> = (0..spec.n_attributes)
            .map(|_| !rng.random_bool(spec.occlusion_rate))
            .collect();
        if visible.iter().any(|&v| v) {
            return visible;
        }
    }
}

fn render(
    spec: &CorpusSpec,
    glyphs: &[Vec<bool>],
    attributes: &[u32],
    visible: &[bool],
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let side = spec.image_side;
    let p = spec.patch_side;
    let grid = spec.grid_side();
    let mut pixels = vec![0f32; side * side];
    for (a, (&value, &vis)) in attributes.iter().zip(visible).enumerate() {
        if !vis {
            continue;
        }
        let (cell_r, cell_c) = (a / grid, a % grid);
        let glyph = &glyphs[value as usize];
        for dy in 0..p {
            for dx in 0..p {
                let base = if glyph[dy * p + dx] { GLYPH_ON } else { GLYPH_OFF };
                let jitter = if spec.pixel_noise > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
                pixels[(cell_r * p + dy) * side + cell_c * p + dx] = (base + jitter).clamp(0.0, 1.0);
            }
        }
    }
    pixels
}
