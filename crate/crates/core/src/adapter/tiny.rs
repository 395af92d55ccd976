//! A small pre-LN transformer encoder with an untied output head.
//!
//! Sized to train in seconds on one CPU core. The output head covers the
//! vocabulary the model was created with; tokens appended later (injected
//! MWE embeddings) get input rows only.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    masked_input, verbalizer_token_ids, AdapterError, AdapterHandle, BackendKind,
    LabelTokenIds, MaskedLanguageModel, TrainHyper, TrainReport, TrainTarget,
    Tokenizer, Vocabulary,
};
use crate::autograd::{clip_grad_norm, Adam, Graph, Matrix, Var};
use crate::corpus::Example;
use crate::pvp::{MaskedText, PatternVerbalizerPair};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyConfig {
    pub width: usize,
    pub depth: usize,
    pub ffn_width: usize,
    pub max_positions: usize,
    pub init_std: f64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            width: 32,
            depth: 2,
            ffn_width: 64,
            max_positions: 96,
            init_std: 0.1,
        }
    }
}

const TOK: usize = 0;
const POS: usize = 1;
const LAYER_BASE: usize = 2;
const PER_LAYER: usize = 12;
// Offsets within a layer block.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W1: usize = 8;
const B1: usize = 9;
const W2: usize = 10;
const B2: usize = 11;

/// Token ids, mask position and `[literal, idiom]` target.
type EncodedTarget = (Vec<usize>, usize, [f64; 2]);

#[derive(Debug, Clone)]
pub struct TinyMlm {
    config: TinyConfig,
    tokenizer: Tokenizer,
    params: Vec<Matrix>,
    output_rows: usize,
    state_version: u64,
}

fn random_matrix(rng: &mut rng::Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

impl TinyMlm {
    pub fn new(tokenizer: Tokenizer, config: TinyConfig, seed: u64) -> Self {
        let mut rng = rng::derive(seed, "tiny-init");
        let d = config.width;
        let h = config.ffn_width;
        let v = tokenizer.vocab().len();
        let mut params = vec![
            random_matrix(&mut rng, v, d, config.init_std),
            random_matrix(&mut rng, config.max_positions, d, config.init_std),
        ];
        let proj_std = 1.0 / (d as f64).sqrt();
        for _ in 0..config.depth {
            params.push(Matrix::ones((1, d)));
            params.push(Matrix::zeros((1, d)));
            for _ in 0..4 {
                params.push(random_matrix(&mut rng, d, d, proj_std));
            }
            params.push(Matrix::ones((1, d)));
            params.push(Matrix::zeros((1, d)));
            params.push(random_matrix(&mut rng, d, h, proj_std));
            params.push(Matrix::zeros((1, h)));
            params.push(random_matrix(&mut rng, h, d, 1.0 / (h as f64).sqrt()));
            params.push(Matrix::zeros((1, d)));
        }
        params.push(Matrix::ones((1, d)));
        params.push(Matrix::zeros((1, d)));
        params.push(random_matrix(&mut rng, v, d, config.init_std));
        params.push(Matrix::zeros((v, 1)));
        TinyMlm {
            config,
            tokenizer,
            params,
            output_rows: v,
            state_version: 0,
        }
    }

    /// Convenience constructor: builds the vocabulary from `texts` plus the
    /// given extra words (typically verbalizer tokens).
    pub fn from_texts<'a, I>(texts: I, extra_words: &[&str], config: TinyConfig, seed: u64) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let vocab = Vocabulary::build(texts, extra_words, 1);
        TinyMlm::new(Tokenizer::new(vocab), config, seed)
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    fn lnf(&self) -> usize {
        LAYER_BASE + PER_LAYER * self.config.depth
    }

    fn out_w(&self) -> usize {
        self.lnf() + 2
    }

    fn out_b(&self) -> usize {
        self.lnf() + 3
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn input_embeddings(&self) -> &Matrix {
        &self.params[TOK]
    }

    pub fn input_embedding(&self, id: usize) -> ArrayView1<'_, f64> {
        self.params[TOK].row(id)
    }

    /// Number of vocabulary entries that have output logits.
    pub fn output_rows(&self) -> usize {
        self.output_rows
    }

    /// Appends a new token with the given input embedding.
    pub fn append_token(&mut self, form: &str, vector: &[f64]) -> Result<usize, AdapterError> {
        self.check_dim(vector.len())?;
        let id = self.tokenizer.add_token(form);
        let emb = &self.params[TOK];
        if id < emb.nrows() {
            return Err(AdapterError::Checkpoint(format!(
                "token {form:?} already present as id {id}"
            )));
        }
        let mut grown = Matrix::zeros((emb.nrows() + 1, emb.ncols()));
        grown.slice_mut(ndarray::s![..emb.nrows(), ..]).assign(emb);
        grown.row_mut(id).assign(&ArrayView1::from(vector));
        self.params[TOK] = grown;
        self.state_version += 1;
        Ok(id)
    }

    pub fn set_input_embedding(&mut self, id: usize, vector: &[f64]) -> Result<(), AdapterError> {
        self.check_dim(vector.len())?;
        self.params[TOK].row_mut(id).assign(&ArrayView1::from(vector));
        self.state_version += 1;
        Ok(())
    }

    /// Drops every vocabulary entry with id `>= len`. Only appended tokens can
    /// be removed; the output head's vocabulary is fixed.
    pub fn truncate_vocabulary(&mut self, len: usize) -> Result<(), AdapterError> {
        if len < self.output_rows {
            return Err(AdapterError::Checkpoint(format!(
                "cannot truncate below the base vocabulary ({} entries)",
                self.output_rows
            )));
        }
        if len >= self.tokenizer.vocab().len() {
            return Ok(());
        }
        self.tokenizer.truncate(len);
        self.params[TOK] = self.params[TOK].slice(ndarray::s![..len, ..]).to_owned();
        self.state_version += 1;
        Ok(())
    }

    fn check_dim(&self, got: usize) -> Result<(), AdapterError> {
        if got != self.config.width {
            return Err(AdapterError::Dimension {
                expected: self.config.width,
                got,
            });
        }
        Ok(())
    }

    /// Places every parameter on the graph as a leaf.
    pub(crate) fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone())).collect()
    }

    pub(crate) fn embed(&self, g: &mut Graph, p: &[Var], ids: &[usize]) -> Var {
        g.gather(p[TOK], ids)
    }

    /// Runs the encoder over input embeddings `x` (`n × width`), returning the
    /// final-layer hidden states.
    pub(crate) fn forward_hidden(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let n = g.value(x).nrows();
        let positions: Vec<usize> = (0..n)
            .map(|i| i.min(self.config.max_positions - 1))
            .collect();
        let pe = g.gather(p[POS], &positions);
        let mut h = g.add(x, pe);
        let scale = 1.0 / (self.config.width as f64).sqrt();
        for layer in 0..self.config.depth {
            let b = LAYER_BASE + layer * PER_LAYER;
            let a = g.layer_norm(h, p[b + LN1_G], p[b + LN1_B]);
            let q = g.matmul(a, p[b + WQ]);
            let k = g.matmul(a, p[b + WK]);
            let v = g.matmul(a, p[b + WV]);
            let scores = g.matmul_t(q, k);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            let z = g.matmul(attn, v);
            let z = g.matmul(z, p[b + WO]);
            h = g.add(h, z);
            let m = g.layer_norm(h, p[b + LN2_G], p[b + LN2_B]);
            let f = g.matmul(m, p[b + W1]);
            let f = g.add_row(f, p[b + B1]);
            let f = g.gelu(f);
            let f = g.matmul(f, p[b + W2]);
            let f = g.add_row(f, p[b + B2]);
            h = g.add(h, f);
        }
        let lnf = self.lnf();
        g.layer_norm(h, p[lnf], p[lnf + 1])
    }

    /// `1 × 2` logits `[literal, idiom]` at `mask_index`.
    fn label_logits_var(
        &self,
        g: &mut Graph,
        p: &[Var],
        hidden: Var,
        mask_index: usize,
        ids: LabelTokenIds,
    ) -> Var {
        let rows = [ids.literal_id, ids.idiom_id];
        let h = g.row(hidden, mask_index);
        let w = g.gather(p[self.out_w()], &rows);
        let logits = g.matmul_t(h, w);
        let bias = g.gather(p[self.out_b()], &rows);
        let bias = g.transpose(bias);
        g.add(logits, bias)
    }

    fn check_label_ids(&self, ids: LabelTokenIds) -> Result<(), AdapterError> {
        for id in [ids.literal_id, ids.idiom_id] {
            if id >= self.output_rows {
                return Err(AdapterError::NoOutputRow(id));
            }
        }
        Ok(())
    }

    /// Final-layer hidden states for a token sequence.
    pub fn hidden_states(&self, ids: &[usize]) -> Matrix {
        let mut g = Graph::new();
        let p = self.leaves(&mut g);
        let x = self.embed(&mut g, &p, ids);
        let h = self.forward_hidden(&mut g, &p, x);
        g.value(h).clone()
    }

    fn encode_targets(
        &self,
        pvp: &PatternVerbalizerPair,
        targets: &[TrainTarget],
    ) -> Result<Vec<EncodedTarget>, AdapterError> {
        targets
            .iter()
            .map(|t| {
                let masked = masked_input(self, pvp, &t.example)?;
                let ids = self.tokenizer.encode(&masked.text).ids;
                let mask = masked.mask_index.expect("filled by masked_input");
                Ok((ids, mask, [t.target.p_literal, t.target.p_idiomatic]))
            })
            .collect()
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        p: &[Var],
        items: &[&(Vec<usize>, usize, [f64; 2])],
        ids: LabelTokenIds,
    ) -> Var {
        let mut rows = Vec::with_capacity(items.len());
        let mut targets = Matrix::zeros((items.len(), 2));
        for (i, (tokens, mask, target)) in items.iter().enumerate() {
            let x = self.embed(g, p, tokens);
            let h = self.forward_hidden(g, p, x);
            rows.push(self.label_logits_var(g, p, h, *mask, ids));
            targets[[i, 0]] = target[0];
            targets[[i, 1]] = target[1];
        }
        let logits = g.concat_rows(&rows);
        g.soft_cross_entropy(logits, targets)
    }

    fn mean_loss(
        &self,
        encoded: &[(Vec<usize>, usize, [f64; 2])],
        ids: LabelTokenIds,
    ) -> f64 {
        let mut total = 0.0;
        for chunk in encoded.chunks(64) {
            let mut g = Graph::new();
            let p = self.leaves(&mut g);
            let refs: Vec<_> = chunk.iter().collect();
            let loss = self.batch_loss(&mut g, &p, &refs, ids);
            total += g.scalar(loss) * chunk.len() as f64;
        }
        total / encoded.len() as f64
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), AdapterError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(CHECKPOINT_FORMAT_VERSION)?;
        for v in [
            self.config.width,
            self.config.depth,
            self.config.ffn_width,
            self.config.max_positions,
        ] {
            out.write_u32::<LittleEndian>(v as u32)?;
        }
        out.write_f64::<LittleEndian>(self.config.init_std)?;
        out.write_u64::<LittleEndian>(self.state_version)?;
        out.write_u32::<LittleEndian>(self.output_rows as u32)?;
        let tokens = self.tokenizer.vocab().tokens();
        out.write_u32::<LittleEndian>(tokens.len() as u32)?;
        for t in tokens {
            write_str(&mut out, t)?;
        }
        let mut phrases: Vec<(&str, usize)> = self.tokenizer.phrases().collect();
        phrases.sort_by_key(|(_, id)| *id);
        out.write_u32::<LittleEndian>(phrases.len() as u32)?;
        for (_, id) in phrases {
            out.write_u32::<LittleEndian>(id as u32)?;
        }
        out.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for p in &self.params {
            out.write_u32::<LittleEndian>(p.nrows() as u32)?;
            out.write_u32::<LittleEndian>(p.ncols() as u32)?;
            for x in p.iter() {
                out.write_f64::<LittleEndian>(*x)?;
            }
        }
        out.flush()?;
        let meta = self.checkpoint_meta();
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| AdapterError::Checkpoint(e.to_string()))?;
        std::fs::write(meta_path(path), json + "\n")?;
        Ok(())
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            backend_kind: BackendKind::Tiny,
            vocabulary_hash: self.tokenizer.vocab().hash(),
            vocabulary_size: self.tokenizer.vocab().len(),
            embedding_dim: self.config.width,
            state_version: self.state_version,
            fingerprint: self.fingerprint(),
        }
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, AdapterError> {
        let bad = |m: &str| AdapterError::Checkpoint(format!("{}: {m}", path.display()));
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a tiny-backend checkpoint"));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = input.read_u32::<LittleEndian>()? as usize;
        }
        let config = TinyConfig {
            width: dims[0],
            depth: dims[1],
            ffn_width: dims[2],
            max_positions: dims[3],
            init_std: input.read_f64::<LittleEndian>()?,
        };
        let state_version = input.read_u64::<LittleEndian>()?;
        let output_rows = input.read_u32::<LittleEndian>()? as usize;
        let n_tokens = input.read_u32::<LittleEndian>()? as usize;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            tokens.push(read_str(&mut input)?);
        }
        let n_phrases = input.read_u32::<LittleEndian>()? as usize;
        let mut phrase_ids = Vec::with_capacity(n_phrases);
        for _ in 0..n_phrases {
            phrase_ids.push(input.read_u32::<LittleEndian>()? as usize);
        }
        let n_params = input.read_u32::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let rows = input.read_u32::<LittleEndian>()? as usize;
            let cols = input.read_u32::<LittleEndian>()? as usize;
            let mut data = vec![0.0; rows * cols];
            input.read_f64_into::<LittleEndian>(&mut data)?;
            params.push(Matrix::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))?);
        }
        if n_params != LAYER_BASE + PER_LAYER * config.depth + 4 {
            return Err(bad("parameter count does not match the architecture"));
        }
        // Base tokens first, then appended tokens re-registered in id order so
        // multiword phrases are restored.
        let base: Vec<String> = tokens[..output_rows].to_vec();
        let mut tokenizer = Tokenizer::new(Vocabulary::from_tokens(
            base.into_iter().skip(3),
        ));
        for (id, token) in tokens.iter().enumerate().skip(output_rows) {
            let form = if phrase_ids.contains(&id) {
                token.replace('_', " ")
            } else {
                token.clone()
            };
            tokenizer.add_token(&form);
        }
        if tokenizer.vocab().tokens() != tokens.as_slice() {
            return Err(bad("vocabulary could not be restored"));
        }
        let model = TinyMlm {
            config,
            tokenizer,
            params,
            output_rows,
            state_version,
        };
        let meta_file = meta_path(path);
        if meta_file.exists() {
            let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&meta_file)?)
                .map_err(|e| bad(&format!("metadata: {e}")))?;
            if meta.vocabulary_hash != model.tokenizer.vocab().hash()
                || meta.embedding_dim != model.config.width
                || meta.state_version != model.state_version
            {
                return Err(bad("metadata sidecar does not match the checkpoint"));
            }
        }
        Ok(model)
    }
}

const MAGIC: &[u8; 8] = b"IDFSTINY";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Sidecar metadata written next to every checkpoint as `<path>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub backend_kind: BackendKind,
    pub vocabulary_hash: String,
    pub vocabulary_size: usize,
    pub embedding_dim: usize,
    pub state_version: u64,
    pub fingerprint: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_str<W: Write>(out: &mut W, s: &str) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.write_all(s.as_bytes())
}

fn read_str<R: Read>(input: &mut R) -> Result<String, AdapterError> {
    let len = input.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| AdapterError::Checkpoint(e.to_string()))
}

impl MaskedLanguageModel for TinyMlm {
    fn backend_kind(&self) -> BackendKind {
        BackendKind::Tiny
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn embedding_dim(&self) -> usize {
        self.config.width
    }

    fn state_version(&self) -> u64 {
        self.state_version
    }

    fn is_trainable(&self) -> bool {
        true
    }

    fn mask_logits(&self, text: &MaskedText, _example: &Example) -> Result<Vec<f64>, AdapterError> {
        let ids = self.tokenizer.encode(&text.text).ids;
        let mask = match text.mask_index {
            Some(m) => m,
            None => self
                .tokenizer
                .mask_position(&ids)
                .ok_or_else(|| AdapterError::MaskNotFound(text.text.clone()))?,
        };
        let hidden = self.hidden_states(&ids);
        let h = hidden.row(mask);
        let w = &self.params[self.out_w()];
        let b = &self.params[self.out_b()];
        let logits: Array1<f64> = w.dot(&h) + b.column(0);
        Ok(logits.to_vec())
    }

    fn label_logits(
        &self,
        text: &MaskedText,
        _example: &Example,
        ids: LabelTokenIds,
    ) -> Result<[f64; 2], AdapterError> {
        self.check_label_ids(ids)?;
        let tokens = self.tokenizer.encode(&text.text).ids;
        let mask = match text.mask_index {
            Some(m) => m,
            None => self
                .tokenizer
                .mask_position(&tokens)
                .ok_or_else(|| AdapterError::MaskNotFound(text.text.clone()))?,
        };
        let mut g = Graph::new();
        let p = self.leaves(&mut g);
        let x = self.embed(&mut g, &p, &tokens);
        let h = self.forward_hidden(&mut g, &p, x);
        let logits = self.label_logits_var(&mut g, &p, h, mask, ids);
        let v = g.value(logits);
        Ok([v[[0, 0]], v[[0, 1]]])
    }

    fn fine_tune(
        &mut self,
        pvp: &PatternVerbalizerPair,
        targets: &[TrainTarget],
        hyper: &TrainHyper,
        seed: u64,
    ) -> Result<TrainReport, AdapterError> {
        if targets.is_empty() {
            return Err(AdapterError::EmptyTrainset);
        }
        let ids = verbalizer_token_ids(self, pvp)?;
        self.check_label_ids(ids)?;
        let encoded = self.encode_targets(pvp, targets)?;
        let initial_loss = self.mean_loss(&encoded, ids);
        if hyper.steps == 0 {
            return Ok(TrainReport {
                step_losses: Vec::new(),
                initial_loss,
                final_loss: initial_loss,
            });
        }
        let mut rng = rng::derive(seed, "fine-tune");
        let mut opt = Adam::new(&self.params, hyper.learning_rate, hyper.weight_decay);
        let batch = hyper.batch_size.max(1).min(encoded.len());
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        let mut cursor = order.len();
        let mut step_losses = Vec::with_capacity(hyper.steps);
        for _ in 0..hyper.steps {
            let mut picked = Vec::with_capacity(batch);
            while picked.len() < batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                picked.push(&encoded[order[cursor]]);
                cursor += 1;
            }
            let mut g = Graph::new();
            let p = self.leaves(&mut g);
            let loss = self.batch_loss(&mut g, &p, &picked, ids);
            step_losses.push(g.scalar(loss));
            let mut grads = g.backward(loss);
            let mut param_grads: Vec<Option<Matrix>> = p.iter().map(|v| grads.take(*v)).collect();
            if hyper.max_grad_norm > 0.0 {
                clip_grad_norm(&mut param_grads, hyper.max_grad_norm);
            }
            opt.step(&mut self.params, &param_grads);
            self.state_version += 1;
        }
        let final_loss = self.mean_loss(&encoded, ids);
        Ok(TrainReport {
            step_losses,
            initial_loss,
            final_loss,
        })
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.tokenizer.vocab().hash().as_bytes());
        for p in &self.params {
            h.update((p.nrows() as u64).to_le_bytes());
            h.update((p.ncols() as u64).to_le_bytes());
            for x in p.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn box_clone(&self) -> AdapterHandle {
        Box::new(self.clone())
    }

    fn as_tiny(&self) -> Option<&TinyMlm> {
        Some(self)
    }

    fn as_tiny_mut(&mut self) -> Option<&mut TinyMlm> {
        Some(self)
    }
}
