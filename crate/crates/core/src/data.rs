//! Dataset plumbing: annotation ingestion, labeled/unlabeled splitting, toy
//! dataset generation, and embedding-cache construction.
//!
//! A manifest is an ordered list of caption records. Records with at least
//! one caption form the labeled pool; records with none form the unlabeled
//! pool. `split_labeled` moves records between the pools deterministically
//! and parks the stripped captions in a sealed side-table that only the
//! evaluation path may read.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{
    write_embedding_cache, ImageRef, JointEmbeddingBackend, ToyBackendSpec,
};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tokens::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// One image with its (possibly empty) caption list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    /// Where the pixels live: a file path for real data, a token bag for the
    /// toy backend. Provenance only — encoding goes through
    /// [`CaptionRecord::encoding_ref`].
    pub image_ref: ImageRef,
    pub captions: Vec<String>,
    pub split: Split,
}

impl CaptionRecord {
    /// Reference used to query a backend: bags pass through, path-backed
    /// records are looked up by stable `image_id` (so a cache built from this
    /// manifest keeps working if files move).
    pub fn encoding_ref(&self) -> ImageRef {
        match &self.image_ref {
            ImageRef::Bag(bag) => ImageRef::Bag(bag.clone()),
            ImageRef::Id(_) => ImageRef::Id(self.image_id.clone()),
        }
    }

    pub fn is_labeled(&self) -> bool {
        !self.captions.is_empty()
    }
}

/// How a manifest's embeddings are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendRef {
    Toy(ToyBackendSpec),
    Cache { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub backend: Option<BackendRef>,
    pub records: Vec<CaptionRecord>,
}

impl DatasetManifest {
    pub fn new(backend: Option<BackendRef>, records: Vec<CaptionRecord>) -> Result<Self> {
        let manifest = DatasetManifest { backend, records };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Image ids must be unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for record in &self.records {
            if !seen.insert(record.image_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate image id `{}`",
                    record.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn labeled(&self) -> impl Iterator<Item = &CaptionRecord> {
        self.records.iter().filter(|r| r.is_labeled())
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &CaptionRecord> {
        self.records.iter().filter(|r| !r.is_labeled())
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        let manifest: DatasetManifest = serde_json::from_reader(file)?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Captions stripped from the unlabeled pool, readable only by evaluation
/// code. Keeping them out of [`DatasetManifest`] means the training path
/// cannot see them by construction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SealedReferences {
    references: BTreeMap<String, Vec<String>>,
}

impl SealedReferences {
    pub fn get(&self, image_id: &str) -> Option<&[String]> {
        self.references.get(image_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

pub struct LabeledSplit {
    pub labeled: DatasetManifest,
    pub unlabeled: DatasetManifest,
    /// True captions of the records that were stripped.
    pub sealed: SealedReferences,
}

/// Seed-deterministic uniform sample of `n_labeled` captioned records.
///
/// Procedure (documented so it can be reimplemented independently): collect
/// the indices of captioned records in manifest order, shuffle them with
/// `substream(seed, "split-labeled")`, and keep the first `n_labeled` as the
/// labeled set. Both output manifests preserve the input record order; every
/// unselected record goes to the unlabeled manifest with its captions
/// stripped (the stripped text moves to the sealed side-table).
pub fn split_labeled(
    manifest: &DatasetManifest,
    n_labeled: usize,
    seed: u64,
) -> Result<LabeledSplit> {
    manifest.validate()?;
    let captioned: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_labeled())
        .map(|(i, _)| i)
        .collect();
    if n_labeled > captioned.len() {
        return Err(Error::Parameter(format!(
            "requested {n_labeled} labeled records but only {} have captions",
            captioned.len()
        )));
    }
    let mut order = captioned;
    substream(seed, "split-labeled").shuffle(&mut order);
    let selected: BTreeSet<usize> = order[..n_labeled].iter().copied().collect();

    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(manifest.records.len() - n_labeled);
    let mut sealed = BTreeMap::new();
    for (i, record) in manifest.records.iter().enumerate() {
        if selected.contains(&i) {
            labeled.push(record.clone());
        } else {
            let mut stripped = record.clone();
            if stripped.is_labeled() {
                sealed.insert(
                    stripped.image_id.clone(),
                    std::mem::take(&mut stripped.captions),
                );
            }
            unlabeled.push(stripped);
        }
    }
    Ok(LabeledSplit {
        labeled: DatasetManifest::new(manifest.backend.clone(), labeled)?,
        unlabeled: DatasetManifest::new(manifest.backend.clone(), unlabeled)?,
        sealed: SealedReferences { references: sealed },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub seed: u64,
    pub vocabulary_size: usize,
    pub item_count: usize,
    /// Inclusive (lo, hi) number of tokens per image bag.
    pub bag_size: (usize, usize),
    /// Inclusive (lo, hi) caption length; clamped to each bag's size, so a
    /// range at or above `bag_size` makes every caption a full reading of
    /// the bag (the known toy optimum).
    pub caption_length: (usize, usize),
}

impl ToyDatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.vocabulary_size < 4 {
            return Err(Error::Parameter(
                "toy dataset needs a vocabulary of at least 4".into(),
            ));
        }
        if self.item_count < 1 {
            return Err(Error::Parameter("toy dataset needs at least one item".into()));
        }
        for (name, (lo, hi)) in [
            ("bag_size", self.bag_size),
            ("caption_length", self.caption_length),
        ] {
            if lo < 1 || lo > hi {
                return Err(Error::Parameter(format!(
                    "degenerate {name} range ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

fn draw_in(rng: &mut crate::rng::SeededRng, (lo, hi): (usize, usize)) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

/// Deterministic toy corpus: each image is a sorted token bag drawn from
/// `0..V-1` (the top id `V-1` stays reserved as the end token) and each of
/// its 1–5 reference captions is an ascending read of a uniformly sampled
/// sub-multiset of the bag.
pub fn generate_toy_dataset(spec: &ToyDatasetSpec) -> Result<(DatasetManifest, ToyBackendSpec)> {
    spec.validate()?;
    let mut rng = substream(spec.seed, "toy-dataset");
    let width = spec.item_count.to_string().len().max(4);
    let mut records = Vec::with_capacity(spec.item_count);
    for i in 0..spec.item_count {
        let mut bag: Vec<u32> = (0..draw_in(&mut rng, spec.bag_size))
            .map(|_| rng.below((spec.vocabulary_size - 1) as u64) as u32)
            .collect();
        bag.sort_unstable();
        let n_refs = 1 + rng.below(5) as usize;
        let captions = (0..n_refs)
            .map(|_| {
                let len = draw_in(&mut rng, spec.caption_length).min(bag.len());
                let mut positions: Vec<usize> = (0..bag.len()).collect();
                rng.shuffle(&mut positions);
                let mut tokens: Vec<u32> =
                    positions[..len].iter().map(|&p| bag[p]).collect();
                tokens.sort_unstable();
                TokenSequence::new(tokens).to_string()
            })
            .collect();
        records.push(CaptionRecord {
            image_id: format!("toy-{i:0width$}"),
            image_ref: ImageRef::Bag(bag),
            captions,
            split: Split::Train,
        });
    }
    let backend = ToyBackendSpec {
        seed: spec.seed,
        vocabulary_size: spec.vocabulary_size,
        ..ToyBackendSpec::default()
    };
    let manifest = DatasetManifest::new(Some(BackendRef::Toy(backend)), records)?;
    Ok((manifest, backend))
}

/// Integer tokenizer for toy captions: text is whitespace-separated ids.
pub struct ToyTokenizer {
    vocabulary_size: usize,
}

impl ToyTokenizer {
    pub fn new(vocabulary_size: usize) -> Self {
        ToyTokenizer { vocabulary_size }
    }

    pub fn parse(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let id: u32 = word.parse().map_err(|_| {
                Error::Parameter(format!("toy caption token `{word}` is not an integer"))
            })?;
            ids.push(id);
        }
        let seq = TokenSequence::new(ids);
        seq.check_vocabulary(self.vocabulary_size)?;
        Ok(seq)
    }

    pub fn join(&self, tokens: &TokenSequence) -> String {
        tokens.to_string()
    }
}

/// Per-image failures from a cache build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheBuildOutcome {
    pub written: usize,
    /// (image_id, reason) for every record the backend could not encode.
    pub failures: Vec<(String, String)>,
}

/// Encodes every manifest image and writes the binary embedding cache.
/// Failures are collected per item; the cache still lands for the successes.
/// Re-running on identical inputs produces a byte-identical file.
pub fn build_embedding_cache(
    manifest: &DatasetManifest,
    backend: &dyn JointEmbeddingBackend,
    path: &Path,
) -> Result<CacheBuildOutcome> {
    manifest.validate()?;
    let dim = backend.descriptor().dim;
    let mut entries = Vec::with_capacity(manifest.records.len());
    let mut failures = Vec::new();
    for record in &manifest.records {
        match backend.encode_image(&record.encoding_ref()) {
            Ok(v) => entries.push((record.image_id.clone(), v.as_slice().to_vec())),
            Err(e) => failures.push((record.image_id.clone(), e.to_string())),
        }
    }
    write_embedding_cache(path, dim, &entries)?;
    Ok(CacheBuildOutcome {
        written: entries.len(),
        failures,
    })
}

// ---------------------------------------------------------------------------
// COCO-captions ingestion
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct CocoImage {
    id: i64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: i64,
    caption: String,
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (ln, l) in text.split('\n').enumerate() {
        if ln + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    text.len()
}

/// Loads a COCO-captions-style annotation file into a manifest: one record
/// per image, captions grouped by image id, records ascending by id.
/// Caption lists are sorted lexicographically so the manifest does not
/// depend on annotation order within the file.
pub fn load_coco_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let parsed: CocoFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: byte_offset(&text, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
        reason: e.to_string(),
    })?;

    let mut by_id: BTreeMap<i64, (String, Vec<String>)> = BTreeMap::new();
    for image in parsed.images {
        if by_id
            .insert(image.id, (image.file_name, Vec::new()))
            .is_some()
        {
            return Err(Error::Manifest(format!(
                "duplicate image id `{}`",
                image.id
            )));
        }
    }
    let mut dangling: Vec<i64> = Vec::new();
    for ann in parsed.annotations {
        match by_id.get_mut(&ann.image_id) {
            Some((_, captions)) => captions.push(ann.caption),
            None => dangling.push(ann.image_id),
        }
    }
    if !dangling.is_empty() {
        dangling.sort_unstable();
        dangling.dedup();
        return Err(Error::DanglingReference(dangling));
    }
    let records = by_id
        .into_iter()
        .map(|(id, (file_name, mut captions))| {
            captions.sort();
            CaptionRecord {
                image_id: id.to_string(),
                image_ref: ImageRef::Id(file_name),
                captions,
                split: Split::Train,
            }
        })
        .collect();
    DatasetManifest::new(None, records)
}
