use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use vkb::corpus::{ingest_corpus, read_kb, read_questions, Corpus, KnowledgeBase, MultiHopQuestion};
use vkb::dense_index::DenseMentionIndex;
use vkb::encoders::EncoderParams;
use vkb::featurize::HashedTfidfModel;
use vkb::sparse::RaggedMatrix;
use vkb::training::FrozenState;

/// Dataset files written by `datagen`.
pub struct DataFiles {
    dir: PathBuf,
}

impl DataFiles {
    pub fn new(dir: &Path) -> Self {
        DataFiles { dir: dir.to_path_buf() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.jsonl")
    }

    pub fn lexicon(&self) -> PathBuf {
        self.dir.join("lexicon.jsonl")
    }

    pub fn kb(&self) -> PathBuf {
        self.dir.join("kb.tsv")
    }

    pub fn relations(&self) -> PathBuf {
        self.dir.join("relations.tsv")
    }

    pub fn questions(&self) -> PathBuf {
        self.dir.join("questions.jsonl")
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        Ok(ingest_corpus(&self.corpus(), &self.lexicon())?)
    }

    pub fn load_kb(&self, corpus: &Corpus) -> Result<KnowledgeBase> {
        Ok(read_kb(&self.kb(), &self.relations(), corpus.n_entities())?)
    }

    pub fn load_questions(&self) -> Result<Vec<MultiHopQuestion>> {
        Ok(read_questions(&self.questions())?)
    }
}

/// Everything derived from the dataset: matrices, checkpoints, index and
/// logs.
pub struct ArtifactFiles {
    dir: PathBuf,
}

impl ArtifactFiles {
    pub fn new(dir: &Path) -> Self {
        ArtifactFiles { dir: dir.to_path_buf() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn create_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating {}", self.dir.display()))
    }

    pub fn tfidf(&self) -> PathBuf {
        self.path("tfidf.bin")
    }

    pub fn a(&self) -> PathBuf {
        self.path("entity_mention.bin")
    }

    pub fn b(&self) -> PathBuf {
        self.path("coref.bin")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.path("pretrained.ckpt")
    }

    pub fn index(&self) -> PathBuf {
        self.path("mentions.idx")
    }

    pub fn model(&self) -> PathBuf {
        self.path("model.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.path("metrics.jsonl")
    }
}

/// Matrices, index and a checkpoint loaded together.
pub struct Loaded {
    pub tfidf: HashedTfidfModel,
    pub a: RaggedMatrix,
    pub b: RaggedMatrix,
    pub params: EncoderParams,
    pub index: DenseMentionIndex,
}

impl Loaded {
    /// Loads the sparse artifacts, the checkpoint at `checkpoint` and the
    /// mention index, which must have been built from that checkpoint's
    /// mention encoder.
    pub fn read(files: &ArtifactFiles, checkpoint: &Path) -> Result<Self> {
        let params = EncoderParams::load(checkpoint)?;
        let index = DenseMentionIndex::load_checked(&files.index(), params.mention_fingerprint())?;
        Ok(Loaded {
            tfidf: HashedTfidfModel::load(&files.tfidf())?,
            a: RaggedMatrix::load(&files.a())?,
            b: RaggedMatrix::load(&files.b())?,
            params,
            index,
        })
    }

    pub fn frozen(&self) -> FrozenState<'_> {
        FrozenState {
            index: &self.index,
            a: &self.a,
            b: &self.b,
        }
    }
}
