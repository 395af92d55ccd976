//! Embeddings for multiword expressions from surface form and contexts.
//!
//! A form embedding (mean of character n-gram vectors) stands in for the MWE
//! at the encoder input; the encoder's output at that slot gives one vector
//! per context, and a learned attention layer pools them. The n-gram table and
//! attention parameters are trained to mimic known embeddings of frequent
//! words. Results can be appended to a model's input vocabulary.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{normalize_form, AdapterError, MaskedLanguageModel, TinyMlm};
use crate::autograd::{clip_grad_norm, Adam, Graph, Matrix, Var};
use crate::corpus::{harvest_contexts, ContextSet, CorpusError};
use crate::rng;

#[derive(Debug, Error)]
pub enum BertramError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no usable contexts for {0:?}")]
    NoContexts(String),
    #[error("no training word has a usable context")]
    NothingToTrain,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{form:?} is already a vocabulary token; pass overwrite to replace it")]
    AlreadyPresent { form: String },
    #[error("backend does not support embedding injection: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("embedding file: {0}")]
    Format(String),
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
}

/// Pads `form` with `<`/`>` after joining words with `_`, then lists all
/// substrings with lengths in `[n_min, n_max]`, shorter first, left to right.
pub fn ngram_set(form: &str, n_min: usize, n_max: usize) -> Vec<String> {
    let joined = form.split_whitespace().collect::<Vec<_>>().join("_");
    let chars: Vec<char> = format!("<{joined}>").chars().collect();
    if n_min > chars.len() {
        return vec![chars.iter().collect()];
    }
    let mut out = Vec::new();
    for n in n_min..=n_max.min(chars.len()) {
        for start in 0..=chars.len() - n {
            out.push(chars[start..start + n].iter().collect());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramTable {
    pub n_min: usize,
    pub n_max: usize,
    grams: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Matrix,
}

impl NGramTable {
    pub fn new(n_min: usize, n_max: usize, dim: usize) -> Result<Self, BertramError> {
        if n_min == 0 || n_min > n_max {
            return Err(BertramError::InvalidArgument(format!(
                "n-gram bounds must satisfy 1 <= n_min <= n_max, got {n_min}..{n_max}"
            )));
        }
        Ok(NGramTable {
            n_min,
            n_max,
            grams: Vec::new(),
            index: HashMap::new(),
            vectors: Matrix::zeros((0, dim)),
        })
    }

    /// Table holding every n-gram of `forms`, randomly initialized.
    pub fn for_forms<'a, I>(
        forms: I,
        n_min: usize,
        n_max: usize,
        dim: usize,
        init_std: f64,
        seed: u64,
    ) -> Result<Self, BertramError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut table = NGramTable::new(n_min, n_max, dim)?;
        let mut grams = Vec::new();
        let mut seen = HashSet::new();
        for form in forms {
            for g in ngram_set(&form.to_lowercase(), n_min, n_max) {
                if seen.insert(g.clone()) {
                    grams.push(g);
                }
            }
        }
        let normal = Normal::new(0.0, init_std)
            .map_err(|e| BertramError::InvalidArgument(format!("init std: {e}")))?;
        let mut rng = rng::derive(seed, "ngram-init");
        let vectors = Matrix::from_shape_simple_fn((grams.len(), dim), || normal.sample(&mut rng));
        table.index = grams.iter().enumerate().map(|(i, g)| (g.clone(), i)).collect();
        table.grams = grams;
        table.vectors = vectors;
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn insert(&mut self, gram: &str, vector: &[f64]) -> Result<(), BertramError> {
        if vector.len() != self.dim() {
            return Err(BertramError::Dimension {
                expected: self.dim(),
                got: vector.len(),
            });
        }
        match self.index.get(gram) {
            Some(&i) => self.vectors.row_mut(i).assign(&ndarray::ArrayView1::from(vector)),
            None => {
                let row = ndarray::ArrayView2::from_shape((1, vector.len()), vector).expect("row");
                self.vectors.push_row(row.row(0)).expect("matching width");
                self.index.insert(gram.to_string(), self.grams.len());
                self.grams.push(gram.to_string());
            }
        }
        Ok(())
    }

    pub fn get(&self, gram: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.index.get(gram).map(|&i| self.vectors.row(i))
    }

    /// Row indices of the n-grams of `form` present in the table, duplicates kept.
    pub fn matches(&self, form: &str) -> Vec<usize> {
        ngram_set(&form.to_lowercase(), self.n_min, self.n_max)
            .iter()
            .filter_map(|g| self.index.get(g).copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormEmbedding {
    pub token_form: String,
    pub vector: Vec<f64>,
    /// Set when no n-gram of the form is in the table.
    pub no_match: bool,
}

pub fn form_embedding(form: &str, table: &NGramTable) -> FormEmbedding {
    let rows = table.matches(form);
    let no_match = rows.is_empty();
    let vector = if no_match {
        log::warn!("no n-gram of {form:?} is in the table; using a zero form embedding");
        vec![0.0; table.dim()]
    } else {
        let mut sum = vec![0.0; table.dim()];
        for &r in &rows {
            for (s, v) in sum.iter_mut().zip(table.vectors.row(r)) {
                *s += v;
            }
        }
        sum.iter().map(|s| s / rows.len() as f64).collect()
    };
    FormEmbedding {
        token_form: normalize_form(form),
        vector,
        no_match,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MWEEmbedding {
    pub mwe: String,
    pub vector: Vec<f64>,
    pub context_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub embedding: MWEEmbedding,
    /// Attention weight per used context, in input order.
    pub weights: Vec<f64>,
    /// Contexts that did not contain the MWE.
    pub skipped: usize,
    pub form_no_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BertramHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// Contexts per word used in each training step.
    pub max_contexts: usize,
}

impl Default for BertramHyper {
    fn default() -> Self {
        BertramHyper {
            steps: 200,
            batch_size: 8,
            learning_rate: 1e-2,
            max_grad_norm: 5.0,
            max_contexts: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MimicReport {
    pub step_losses: Vec<f64>,
    /// Mean squared distance over all training words before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub excluded: Vec<String>,
}

const P_NGRAM: usize = 0;
const P_QUERY: usize = 1;
const P_PROJ_W: usize = 2;
const P_PROJ_B: usize = 3;

#[derive(Debug, Clone)]
pub struct BertramModel {
    pub table: NGramTable,
    encoder: TinyMlm,
    /// Query `1×d`, projection `d×d` and bias `1×d`.
    attention: [Matrix; 3],
}

/// One word's inputs on the tape: the encoded contexts with their slots.
struct Prepared {
    contexts: Vec<(Vec<usize>, usize)>,
    grams: Vec<usize>,
}

impl BertramModel {
    /// Wraps a frozen encoder. The projection starts at identity and the query
    /// at zero, so an untrained model averages the per-context vectors.
    pub fn new(encoder: TinyMlm, table: NGramTable) -> Result<Self, BertramError> {
        let d = encoder.embedding_dim();
        if table.dim() != d {
            return Err(BertramError::Dimension {
                expected: d,
                got: table.dim(),
            });
        }
        Ok(BertramModel {
            table,
            encoder,
            attention: [Matrix::zeros((1, d)), Matrix::eye(d), Matrix::zeros((1, d))],
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.embedding_dim()
    }

    pub fn encoder(&self) -> &TinyMlm {
        &self.encoder
    }

    pub fn query(&self) -> &Matrix {
        &self.attention[0]
    }

    pub fn projection(&self) -> (&Matrix, &Matrix) {
        (&self.attention[1], &self.attention[2])
    }

    pub fn set_attention(&mut self, query: Matrix, proj_w: Matrix, proj_b: Matrix) -> Result<(), BertramError> {
        let d = self.dim();
        for (m, shape) in [(&query, (1, d)), (&proj_w, (d, d)), (&proj_b, (1, d))] {
            if m.dim() != shape {
                return Err(BertramError::InvalidArgument(format!(
                    "attention parameter has shape {:?}, expected {shape:?}",
                    m.dim()
                )));
            }
        }
        self.attention = [query, proj_w, proj_b];
        Ok(())
    }

    fn prepare(&self, mwe: &str, contexts: &[String]) -> (Prepared, usize) {
        let tok = self.encoder.tokenizer();
        let mut encoded = Vec::new();
        let mut skipped = 0;
        for c in contexts {
            match tok.encode_with_slot(c, mwe) {
                Some(e) => encoded.push(e),
                None => skipped += 1,
            }
        }
        (
            Prepared {
                contexts: encoded,
                grams: self.table.matches(mwe),
            },
            skipped,
        )
    }

    /// Places the trainable parameters and the frozen encoder on `g`.
    fn leaves(&self, g: &mut Graph) -> (Vec<Var>, Vec<Var>) {
        let trainable = vec![
            g.leaf(self.table.vectors.clone()),
            g.leaf(self.attention[0].clone()),
            g.leaf(self.attention[1].clone()),
            g.leaf(self.attention[2].clone()),
        ];
        let encoder = self.encoder.leaves(g);
        (trainable, encoder)
    }

    /// Returns the `1×d` output and the `1×k` attention weights.
    fn forward(&self, g: &mut Graph, t: &[Var], e: &[Var], word: &Prepared) -> (Var, Var) {
        let d = self.dim();
        let form = if word.grams.is_empty() {
            g.leaf(Matrix::zeros((1, d)))
        } else {
            let rows = g.gather(t[P_NGRAM], &word.grams);
            g.mean_rows(rows)
        };
        let mut per_context = Vec::with_capacity(word.contexts.len());
        for (ids, slot) in &word.contexts {
            let mut parts = Vec::with_capacity(3);
            if *slot > 0 {
                parts.push(self.encoder.embed(g, e, &ids[..*slot]));
            }
            parts.push(form);
            if slot + 1 < ids.len() {
                parts.push(self.encoder.embed(g, e, &ids[slot + 1..]));
            }
            let x = g.concat_rows(&parts);
            let h = self.encoder.forward_hidden(g, e, x);
            per_context.push(g.row(h, *slot));
        }
        let stacked = g.concat_rows(&per_context);
        let projected = g.matmul(stacked, t[P_PROJ_W]);
        let v = g.add_row(projected, t[P_PROJ_B]);
        let scores = g.matmul_t(t[P_QUERY], v);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = g.softmax_rows(scores);
        (g.matmul(weights, v), weights)
    }

    pub fn infer_embedding(&self, mwe: &str, contexts: &ContextSet) -> Result<Inference, BertramError> {
        if contexts.contexts.is_empty() {
            return Err(BertramError::InvalidArgument(format!(
                "no contexts given for {mwe:?}"
            )));
        }
        let (word, skipped) = self.prepare(mwe, &contexts.contexts);
        if skipped > 0 {
            log::warn!("{skipped} of {} contexts do not contain {mwe:?}", contexts.contexts.len());
        }
        if word.contexts.is_empty() {
            return Err(BertramError::NoContexts(mwe.to_string()));
        }
        let form_no_match = word.grams.is_empty();
        if form_no_match {
            log::warn!("no n-gram of {mwe:?} is in the table; using a zero form embedding");
        }
        let mut g = Graph::new();
        let (t, e) = self.leaves(&mut g);
        let (out, weights) = self.forward(&mut g, &t, &e, &word);
        Ok(Inference {
            embedding: MWEEmbedding {
                mwe: mwe.to_string(),
                vector: g.value(out).iter().copied().collect(),
                context_count: word.contexts.len(),
            },
            weights: g.value(weights).iter().copied().collect(),
            skipped,
            form_no_match,
        })
    }

    fn batch_loss(&self, words: &[(&Prepared, &[f64])], with_grad: bool) -> (f64, Option<Vec<Option<Matrix>>>) {
        let mut g = Graph::new();
        let (t, e) = self.leaves(&mut g);
        let mut losses = Vec::with_capacity(words.len());
        for (word, gold) in words {
            let (out, _) = self.forward(&mut g, &t, &e, word);
            let target = g.leaf(Matrix::from_shape_vec((1, gold.len()), gold.to_vec()).expect("row"));
            let diff = g.sub(out, target);
            losses.push(g.sum_squares(diff));
        }
        let total = g.concat_rows(&losses);
        let loss = g.mean_rows(total);
        let value = g.scalar(loss);
        if !with_grad {
            return (value, None);
        }
        let mut grads = g.backward(loss);
        (value, Some(t.iter().map(|v| grads.take(*v)).collect()))
    }

    fn trainable_params(&self) -> Vec<Matrix> {
        vec![
            self.table.vectors.clone(),
            self.attention[0].clone(),
            self.attention[1].clone(),
            self.attention[2].clone(),
        ]
    }

    fn set_trainable(&mut self, mut params: Vec<Matrix>) {
        self.attention[2] = params.pop().expect("4 params");
        self.attention[1] = params.pop().expect("4 params");
        self.attention[0] = params.pop().expect("4 params");
        self.table.vectors = params.pop().expect("4 params");
    }

    /// Fits the n-gram table and attention layer so inferred embeddings of
    /// `words` approach their gold vectors. The encoder stays frozen.
    pub fn train_mimic(
        &mut self,
        words: &[(String, Vec<f64>)],
        contexts: &[ContextSet],
        hyper: &BertramHyper,
        seed: u64,
    ) -> Result<MimicReport, BertramError> {
        if hyper.batch_size == 0 || hyper.max_contexts == 0 {
            return Err(BertramError::InvalidArgument(
                "batch size and max contexts must be positive".into(),
            ));
        }
        let by_word: HashMap<&str, &ContextSet> = contexts.iter().map(|c| (c.mwe.as_str(), c)).collect();
        let mut prepared = Vec::new();
        let mut excluded = Vec::new();
        for (word, gold) in words {
            if gold.len() != self.dim() {
                return Err(BertramError::Dimension {
                    expected: self.dim(),
                    got: gold.len(),
                });
            }
            let ctx: Vec<String> = by_word
                .get(word.as_str())
                .map(|c| c.contexts.iter().take(hyper.max_contexts).cloned().collect())
                .unwrap_or_default();
            let (p, _) = self.prepare(word, &ctx);
            if p.contexts.is_empty() {
                log::warn!("training word {word:?} has no usable context and is excluded");
                excluded.push(word.clone());
            } else {
                prepared.push((p, gold.as_slice()));
            }
        }
        if prepared.is_empty() {
            return Err(BertramError::NothingToTrain);
        }
        let all: Vec<(&Prepared, &[f64])> = prepared.iter().map(|(p, g)| (p, *g)).collect();
        let full_loss = |m: &Self| {
            all.chunks(hyper.batch_size.max(16))
                .map(|c| m.batch_loss(c, false).0 * c.len() as f64)
                .sum::<f64>()
                / all.len() as f64
        };
        let initial_loss = full_loss(self);
        let mut params = self.trainable_params();
        let mut adam = Adam::new(&params, hyper.learning_rate, 0.0);
        let mut rng = rng::derive(seed, "bertram-mimic");
        let mut order: Vec<usize> = (0..all.len()).collect();
        let mut cursor = order.len();
        let mut step_losses = Vec::with_capacity(hyper.steps);
        for _ in 0..hyper.steps {
            let mut batch = Vec::with_capacity(hyper.batch_size);
            while batch.len() < hyper.batch_size.min(all.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(all[order[cursor]]);
                cursor += 1;
            }
            let (loss, grads) = self.batch_loss(&batch, true);
            let mut grads = grads.expect("requested");
            clip_grad_norm(&mut grads, hyper.max_grad_norm);
            adam.step(&mut params, &grads);
            self.set_trainable(params.clone());
            step_losses.push(loss);
        }
        let final_loss = full_loss(self);
        Ok(MimicReport {
            step_losses,
            initial_loss,
            final_loss,
            excluded,
        })
    }

    /// As [`BertramModel::train_mimic`], harvesting up to `k` contexts per
    /// word from a line-oriented corpus.
    pub fn train_mimic_from_corpus(
        &mut self,
        words: &[(String, Vec<f64>)],
        corpus: &Path,
        k: usize,
        hyper: &BertramHyper,
        seed: u64,
    ) -> Result<MimicReport, BertramError> {
        let mut sets = Vec::new();
        for (word, _) in words {
            match harvest_contexts(corpus, word, k) {
                Ok(c) => sets.push(c),
                Err(CorpusError::NoContexts { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.train_mimic(words, &sets, hyper, seed)
    }

    pub fn save(&self, path: &Path) -> Result<(), BertramError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        out.write_u64::<LittleEndian>(self.table.n_min as u64)?;
        out.write_u64::<LittleEndian>(self.table.n_max as u64)?;
        out.write_u64::<LittleEndian>(self.dim() as u64)?;
        out.write_u64::<LittleEndian>(self.table.len() as u64)?;
        for (gram, row) in self.table.grams.iter().zip(self.table.vectors.rows()) {
            out.write_u64::<LittleEndian>(gram.len() as u64)?;
            out.write_all(gram.as_bytes())?;
            for v in row {
                out.write_f64::<LittleEndian>(*v)?;
            }
        }
        for m in &self.attention {
            for v in m.iter() {
                out.write_f64::<LittleEndian>(*v)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Loads a model saved with [`BertramModel::save`] around `encoder`.
    pub fn load(path: &Path, encoder: TinyMlm) -> Result<Self, BertramError> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(BertramError::Format("not a BERTRAM checkpoint".into()));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(BertramError::Format(format!("unsupported format version {version}")));
        }
        let n_min = input.read_u64::<LittleEndian>()? as usize;
        let n_max = input.read_u64::<LittleEndian>()? as usize;
        let dim = input.read_u64::<LittleEndian>()? as usize;
        let count = input.read_u64::<LittleEndian>()? as usize;
        let mut table = NGramTable::new(n_min, n_max, dim)?;
        let mut row = vec![0.0; dim];
        for _ in 0..count {
            let len = input.read_u64::<LittleEndian>()? as usize;
            let mut bytes = vec![0u8; len];
            input.read_exact(&mut bytes)?;
            let gram = String::from_utf8(bytes).map_err(|e| BertramError::Format(e.to_string()))?;
            input.read_f64_into::<LittleEndian>(&mut row)?;
            table.insert(&gram, &row)?;
        }
        let mut model = BertramModel::new(encoder, table)?;
        let read = |input: &mut BufReader<File>, shape: (usize, usize)| -> Result<Matrix, BertramError> {
            let mut buf = vec![0.0; shape.0 * shape.1];
            input.read_f64_into::<LittleEndian>(&mut buf)?;
            Ok(Matrix::from_shape_vec(shape, buf).expect("shape"))
        };
        let q = read(&mut input, (1, dim))?;
        let w = read(&mut input, (dim, dim))?;
        let b = read(&mut input, (1, dim))?;
        model.set_attention(q, w, b)?;
        Ok(model)
    }
}

const MAGIC: &[u8; 8] = b"IDFSBRTM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionReport {
    /// Vocabulary size before injection; truncating to it undoes the injection.
    pub base_len: usize,
    pub added: Vec<(String, usize)>,
    pub replaced: Vec<(String, usize)>,
}

/// Appends one input-embedding row per MWE under its normalized form.
pub fn inject_embeddings(
    adapter: &mut dyn MaskedLanguageModel,
    embeddings: &[MWEEmbedding],
    overwrite: bool,
) -> Result<InjectionReport, BertramError> {
    let dim = adapter.embedding_dim();
    let mut forms = HashSet::new();
    for e in embeddings {
        if e.vector.len() != dim {
            return Err(BertramError::Dimension {
                expected: dim,
                got: e.vector.len(),
            });
        }
        if e.vector.iter().any(|v| !v.is_finite()) {
            return Err(BertramError::InvalidArgument(format!(
                "embedding for {:?} has non-finite entries",
                e.mwe
            )));
        }
        if !forms.insert(normalize_form(&e.mwe)) {
            return Err(BertramError::InvalidArgument(format!(
                "{:?} appears more than once",
                e.mwe
            )));
        }
    }
    let backend = adapter.backend_kind();
    let tiny = adapter
        .as_tiny_mut()
        .ok_or_else(|| BertramError::Unsupported(backend.to_string()))?;
    for e in embeddings {
        let form = normalize_form(&e.mwe);
        if tiny.tokenizer().vocab().id(&form).is_some() && !overwrite {
            return Err(BertramError::AlreadyPresent { form });
        }
    }
    let base_len = tiny.tokenizer().vocab().len();
    let mut added = Vec::new();
    let mut replaced = Vec::new();
    for e in embeddings {
        let form = normalize_form(&e.mwe);
        match tiny.tokenizer().vocab().id(&form) {
            Some(id) => {
                tiny.set_input_embedding(id, &e.vector)?;
                replaced.push((form, id));
            }
            None => {
                let id = tiny.append_token(&e.mwe, &e.vector)?;
                added.push((form, id));
            }
        }
    }
    Ok(InjectionReport {
        base_len,
        added,
        replaced,
    })
}

/// Removes appended tokens, restoring the vocabulary to `base_len` entries.
pub fn remove_injected(adapter: &mut dyn MaskedLanguageModel, base_len: usize) -> Result<(), BertramError> {
    let backend = adapter.backend_kind();
    let tiny = adapter
        .as_tiny_mut()
        .ok_or_else(|| BertramError::Unsupported(backend.to_string()))?;
    tiny.truncate_vocabulary(base_len)?;
    Ok(())
}

/// Headered TSV: `mwe`, `dim`, `v0..v{dim-1}`, then `context_count`.
pub fn write_embeddings<W: Write>(out: &mut W, embeddings: &[MWEEmbedding]) -> io::Result<()> {
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    write!(out, "mwe\tdim")?;
    for i in 0..dim {
        write!(out, "\tv{i}")?;
    }
    writeln!(out, "\tcontext_count")?;
    for e in embeddings {
        write!(out, "{}\t{}", e.mwe, e.vector.len())?;
        for v in &e.vector {
            write!(out, "\t{v:?}")?;
        }
        writeln!(out, "\t{}", e.context_count)?;
    }
    Ok(())
}

/// Reads [`write_embeddings`] output. The trailing `context_count` column is
/// optional; files without it load with a count of 1.
pub fn read_embeddings<R: BufRead>(reader: R) -> Result<Vec<MWEEmbedding>, BertramError> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| BertramError::Format("empty file".into()))??;
    let mut cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    if cols.len() < 2 || cols[0] != "mwe" || cols[1] != "dim" {
        return Err(BertramError::Format(format!("unexpected header {header:?}")));
    }
    let has_count = cols.last() == Some(&"context_count");
    if has_count {
        cols.pop();
    }
    let dim = cols.len() - 2;
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("v{i}") {
            return Err(BertramError::Format(format!("unexpected column {c:?}")));
        }
    }
    let width = cols.len() + usize::from(has_count);
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let row = i + 2;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != width {
            return Err(BertramError::Format(format!(
                "row {row}: expected {width} fields, found {}",
                fields.len()
            )));
        }
        if fields[1] != dim.to_string() {
            return Err(BertramError::Format(format!(
                "row {row}: dim field {:?} does not match {dim} vector columns",
                fields[1]
            )));
        }
        let vector = fields[2..2 + dim]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| BertramError::Format(format!("row {row}: {e}")))?;
        let context_count = if has_count {
            fields[width - 1]
                .parse()
                .map_err(|_| BertramError::Format(format!("row {row}: bad context count {:?}", fields[width - 1])))?
        } else {
            1
        };
        out.push(MWEEmbedding {
            mwe: fields[0].to_string(),
            vector,
            context_count,
        });
    }
    Ok(out)
}

pub fn save_embeddings(path: &Path, embeddings: &[MWEEmbedding]) -> Result<(), BertramError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_embeddings(&mut out, embeddings)?;
    out.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<MWEEmbedding>, BertramError> {
    read_embeddings(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{class_probs, TinyConfig};
    use crate::corpus::Example;
    use crate::pvp::builtin_pvps;

    fn encoder() -> TinyMlm {
        let texts = [
            "the night owl stayed up late",
            "an owl sat in the tree at night",
            "red tape slowed the project",
            "yes no literal",
        ];
        TinyMlm::from_texts(texts, &["yes", "no"], TinyConfig { width: 8, depth: 1, ffn_width: 16, ..TinyConfig::default() }, 3)
    }

    fn contexts(mwe: &str, lines: &[&str]) -> ContextSet {
        ContextSet {
            mwe: mwe.into(),
            contexts: lines.iter().map(|s| s.to_string()).collect(),
            source: "fixture".into(),
        }
    }

    fn model() -> BertramModel {
        let table = NGramTable::for_forms(["night owl", "owl", "red tape"], 3, 5, 8, 0.1, 1).unwrap();
        BertramModel::new(encoder(), table).unwrap()
    }

    #[test]
    fn ngrams_of_owl() {
        assert_eq!(ngram_set("owl", 3, 3), ["<ow", "owl", "wl>"]);
        let g = ngram_set("night owl", 3, 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], "<ni");
        assert_eq!(g[8], "wl>");
        assert_eq!(ngram_set("a", 4, 5), ["<a>"]);
        assert_eq!(ngram_set("ab", 3, 4), ["<ab", "ab>", "<ab>"]);
    }

    #[test]
    fn form_embedding_means_matches() {
        let mut t = NGramTable::new(3, 3, 2).unwrap();
        t.insert("<ow", &[1.0, 0.0]).unwrap();
        t.insert("wl>", &[0.0, 1.0]).unwrap();
        let f = form_embedding("owl", &t);
        assert_eq!(f.vector, vec![0.5, 0.5]);
        assert!(!f.no_match);
        let mut single = NGramTable::new(3, 3, 2).unwrap();
        single.insert("owl", &[0.25, -3.0]).unwrap();
        assert_eq!(form_embedding("owl", &single).vector, vec![0.25, -3.0]);
        let none = form_embedding("cat", &t);
        assert!(none.no_match);
        assert_eq!(none.vector, vec![0.0, 0.0]);
        assert!(matches!(t.insert("abc", &[1.0]), Err(BertramError::Dimension { .. })));
    }

    #[test]
    fn single_context_weight_is_one() {
        let m = model();
        let inf = m.infer_embedding("night owl", &contexts("night owl", &["the night owl stayed up"])).unwrap();
        assert_eq!(inf.weights, vec![1.0]);
        assert_eq!(inf.embedding.context_count, 1);
    }

    #[test]
    fn identical_contexts_match_single() {
        let mut m = model();
        m.set_attention(
            Matrix::from_elem((1, 8), 0.3),
            Matrix::eye(8) * 1.5,
            Matrix::from_elem((1, 8), 0.1),
        )
        .unwrap();
        let one = m.infer_embedding("owl", &contexts("owl", &["an owl sat"])).unwrap();
        let three = m.infer_embedding("owl", &contexts("owl", &["an owl sat"; 3])).unwrap();
        for (a, b) in one.embedding.vector.iter().zip(&three.embedding.vector) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn contexts_without_mwe_are_skipped() {
        let m = model();
        let inf = m
            .infer_embedding("red tape", &contexts("red tape", &["red tape slowed it", "nothing here"]))
            .unwrap();
        assert_eq!(inf.skipped, 1);
        assert!(matches!(
            m.infer_embedding("red tape", &contexts("red tape", &["nothing here"])),
            Err(BertramError::NoContexts(_))
        ));
        assert!(matches!(
            m.infer_embedding("red tape", &contexts("red tape", &[])),
            Err(BertramError::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let mut m = model();
        let before = m.trainable_params();
        let words = vec![("owl".to_string(), vec![1.0; 8])];
        let hyper = BertramHyper { steps: 0, ..BertramHyper::default() };
        let report = m.train_mimic(&words, &[contexts("owl", &["an owl sat"])], &hyper, 1).unwrap();
        assert_eq!(m.trainable_params(), before);
        assert_eq!(report.initial_loss, report.final_loss);
    }

    #[test]
    fn gold_at_initial_output_has_zero_loss() {
        let mut m = model();
        let ctx = contexts("owl", &["an owl sat in the tree"]);
        let gold = m.infer_embedding("owl", &ctx).unwrap().embedding.vector;
        let hyper = BertramHyper { steps: 5, ..BertramHyper::default() };
        let report = m.train_mimic(&[("owl".to_string(), gold)], &[ctx], &hyper, 1).unwrap();
        assert_eq!(report.initial_loss, 0.0);
        assert!(report.step_losses.iter().all(|l| *l == 0.0));
        assert_eq!(report.final_loss, 0.0);
    }

    #[test]
    fn words_without_contexts_are_excluded() {
        let mut m = model();
        let words = vec![("owl".to_string(), vec![0.0; 8]), ("tape".to_string(), vec![0.0; 8])];
        let report = m
            .train_mimic(&words, &[contexts("owl", &["an owl"])], &BertramHyper { steps: 1, ..Default::default() }, 1)
            .unwrap();
        assert_eq!(report.excluded, vec!["tape".to_string()]);
        assert!(matches!(
            m.train_mimic(&words[1..], &[], &BertramHyper::default(), 1),
            Err(BertramError::NothingToTrain)
        ));
    }

    #[test]
    fn injection_appends_and_merges_phrase() {
        let mut adapter: Box<dyn MaskedLanguageModel> = Box::new(encoder());
        let before = adapter.as_tiny().unwrap().input_embeddings().clone();
        let emb = MWEEmbedding { mwe: "Night Owl".into(), vector: vec![0.5; 8], context_count: 2 };
        let report = inject_embeddings(adapter.as_mut(), std::slice::from_ref(&emb), false).unwrap();
        let tiny = adapter.as_tiny().unwrap();
        assert_eq!(tiny.tokenizer().vocab().len(), before.nrows() + 1);
        let id = report.added[0].1;
        assert_eq!(tiny.tokenizer().vocab().token(id), Some("night_owl"));
        assert_eq!(tiny.input_embedding(id).to_vec(), vec![0.5; 8]);
        assert_eq!(tiny.input_embeddings().slice(ndarray::s![..before.nrows(), ..]), before);
        assert_eq!(tiny.tokenizer().encode("a night owl").ids.len(), 3);

        let ex = Example::new("x", "EN", "night owl", "She is a night owl.", None);
        class_probs(adapter.as_ref(), &builtin_pvps("EN").unwrap()[3], &ex).unwrap();

        assert!(matches!(
            inject_embeddings(adapter.as_mut(), std::slice::from_ref(&emb), false),
            Err(BertramError::AlreadyPresent { .. })
        ));
        let again = MWEEmbedding { vector: vec![1.0; 8], ..emb.clone() };
        let r = inject_embeddings(adapter.as_mut(), &[again], true).unwrap();
        assert_eq!(r.replaced.len(), 1);
        remove_injected(adapter.as_mut(), report.base_len).unwrap();
        assert_eq!(adapter.as_tiny().unwrap().input_embeddings(), &before);
    }

    #[test]
    fn injection_rejects_bad_batches() {
        let mut adapter: Box<dyn MaskedLanguageModel> = Box::new(encoder());
        let e = |m: &str, d: usize| MWEEmbedding { mwe: m.into(), vector: vec![0.0; d], context_count: 1 };
        assert!(matches!(
            inject_embeddings(adapter.as_mut(), &[e("a b", 8), e("A  b", 8)], false),
            Err(BertramError::InvalidArgument(_))
        ));
        assert!(matches!(
            inject_embeddings(adapter.as_mut(), &[e("a b", 7)], false),
            Err(BertramError::Dimension { .. })
        ));
    }

    #[test]
    fn embedding_file_round_trip() {
        let embs = vec![
            MWEEmbedding { mwe: "night owl".into(), vector: vec![0.1, -2.5e-7, 3.0], context_count: 4 },
            MWEEmbedding { mwe: "red tape".into(), vector: vec![1.0 / 3.0, 0.0, -1.0], context_count: 1 },
        ];
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &embs).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("mwe\tdim\tv0\tv1\tv2\tcontext_count\nnight owl\t3\t0.1\t"));
        assert_eq!(read_embeddings(buf.as_slice()).unwrap(), embs);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bertram.bin");
        let mut m = model();
        m.set_attention(Matrix::from_elem((1, 8), 0.2), Matrix::eye(8), Matrix::from_elem((1, 8), -0.1)).unwrap();
        m.save(&path).unwrap();
        let loaded = BertramModel::load(&path, encoder()).unwrap();
        assert_eq!(loaded.table, m.table);
        assert_eq!(loaded.attention, m.attention);
    }
}
