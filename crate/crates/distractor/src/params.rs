//! Model configuration, the learnable parameter store, and checkpoint I/O.
//!
//! Parameters live in a name-keyed store (`BTreeMap`, so iteration order is
//! deterministic) rather than a fixed struct: the same machinery then serves
//! SGD updates, gradient-norm clipping, finite-difference perturbation, and
//! serialization without per-tensor plumbing.

use crate::error::{DgError, Result};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Model ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Hierarchical attention with the static gate.
    Full,
    /// Hierarchical attention with a uniform static distribution.
    Hred,
    /// Flat attention over all word states (general score function).
    Seq2Seq,
}

impl std::str::FromStr for Variant {
    type Err = DgError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "hred" => Ok(Variant::Hred),
            "seq2seq" => Ok(Variant::Seq2Seq),
            other => Err(DgError::config(format!("unknown variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Full => write!(f, "full"),
            Variant::Hred => write!(f, "hred"),
            Variant::Seq2Seq => write!(f, "seq2seq"),
        }
    }
}

/// Architecture dimensions. Defaults follow the reference configuration:
/// 300-d embeddings, bidirectional encoders with 250 units per direction
/// (500 concatenated), a 2-layer 500-unit decoder, articles capped at
/// 40 sentences of 50 words.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Hidden size per direction of the bidirectional encoders.
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub dec_layers: usize,
    pub max_sentences: usize,
    pub max_words: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 300,
            enc_hidden: 250,
            dec_hidden: 500,
            dec_layers: 2,
            max_sentences: 40,
            max_words: 50,
        }
    }
}

impl ModelConfig {
    /// Width of a concatenated bidirectional state (2H).
    pub fn enc_width(&self) -> usize {
        2 * self.enc_hidden
    }
}

/// Name-keyed store of every learnable tensor. Scalars are length-1 vectors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter '{name}'"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn get2(&self, name: &str) -> Array2<f64> {
        self.get(name)
            .view()
            .into_dimensionality()
            .unwrap_or_else(|_| panic!("parameter '{name}' is not rank 2"))
            .to_owned()
    }

    pub fn get1(&self, name: &str) -> Array1<f64> {
        self.get(name)
            .view()
            .into_dimensionality()
            .unwrap_or_else(|_| panic!("parameter '{name}' is not rank 1"))
            .to_owned()
    }

    pub fn scalar(&self, name: &str) -> f64 {
        self.get(name)[IxDyn(&[0])]
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
}

/// LSTM gate layout within fused weight matrices: input, forget, cell, output.
pub const GATE_ORDER: &str = "ifgo";

fn insert_lstm(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, input: usize, hidden: usize) {
    store.insert(&format!("{prefix}.wx"), uniform(rng, &[4 * hidden, input], -0.1, 0.1));
    store.insert(&format!("{prefix}.wh"), uniform(rng, &[4 * hidden, hidden], -0.1, 0.1));
    let mut b = uniform(rng, &[4 * hidden], -0.1, 0.1);
    // forget-gate bias starts at zero
    for k in hidden..2 * hidden {
        b[IxDyn(&[k])] = 0.0;
    }
    store.insert(&format!("{prefix}.b"), b);
}

fn insert_bilstm(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, input: usize, hidden: usize) {
    insert_lstm(store, rng, &format!("{prefix}.fwd"), input, hidden);
    insert_lstm(store, rng, &format!("{prefix}.bwd"), input, hidden);
}

/// Build a freshly initialized parameter store: embeddings are supplied by
/// the caller, every other tensor is drawn from U(-0.1, 0.1).
pub fn init_params(cfg: &ModelConfig, embeddings: Array2<f64>, rng: &mut impl Rng) -> ParamStore {
    assert_eq!(embeddings.ncols(), cfg.embed_dim, "embedding width mismatch");
    let w = cfg.enc_width();
    let d = cfg.dec_hidden;
    let mut store = ParamStore::new();
    store.insert("embed", embeddings.into_dyn());

    insert_bilstm(&mut store, rng, "enc.word", cfg.embed_dim, cfg.enc_hidden);
    insert_bilstm(&mut store, rng, "enc.sent", w, cfg.enc_hidden);
    insert_bilstm(&mut store, rng, "query.q", cfg.embed_dim, cfg.enc_hidden);
    insert_bilstm(&mut store, rng, "query.a", cfg.embed_dim, cfg.enc_hidden);

    store.insert("static.w_m", uniform(rng, &[w, w], -0.1, 0.1));
    store.insert("static.b_m", uniform(rng, &[1], -0.1, 0.1));
    store.insert("static.w_q", uniform(rng, &[w], -0.1, 0.1));
    store.insert("static.b_q", uniform(rng, &[1], -0.1, 0.1));
    store.insert("static.lambda_q", ndarray::arr1(&[1.0]).into_dyn());
    store.insert("static.lambda_a", ndarray::arr1(&[1.5]).into_dyn());

    for layer in 0..cfg.dec_layers {
        let input = if layer == 0 { cfg.embed_dim } else { d };
        insert_lstm(&mut store, rng, &format!("qinit.l{layer}"), input, d);
        insert_lstm(&mut store, rng, &format!("dec.l{layer}"), input, d);
    }

    store.insert("dyn.w_sent", uniform(rng, &[w, d], -0.1, 0.1));
    store.insert("dyn.w_word", uniform(rng, &[w, d], -0.1, 0.1));
    store.insert("out.w_attn", uniform(rng, &[d, d + w], -0.1, 0.1));
    let vocab = store.get("embed").shape()[0];
    store.insert("out.w_vocab", uniform(rng, &[vocab, d], -0.1, 0.1));
    store.insert("out.b_vocab", uniform(rng, &[vocab], -0.1, 0.1));
    store
}

/// Creates tape leaves for named parameters and remembers the mapping so
/// gradients can be read back per tensor after the backward sweep.
pub struct Binder<'s> {
    pub store: &'s ParamStore,
    pub names: Vec<(String, crate::autodiff::Var)>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binder {
            store,
            names: Vec::new(),
        }
    }

    pub fn leaf(&mut self, tape: &mut crate::autodiff::Tape, name: &str) -> crate::autodiff::Var {
        let var = tape.leaf(self.store.get(name).clone());
        self.names.push((name.to_string(), var));
        var
    }
}

// ---- tensor blob serialization ----------------------------------------

const BLOB_MAGIC: &[u8; 8] = b"DGTENS1\n";

/// Write the store as a little-endian binary blob (deterministic bytes).
pub fn write_blob<W: Write>(store: &ParamStore, out: &mut W) -> Result<()> {
    out.write_all(BLOB_MAGIC)?;
    out.write_all(&(store.map.len() as u64).to_le_bytes())?;
    for (name, tensor) in store.iter() {
        let nb = name.as_bytes();
        out.write_all(&(nb.len() as u32).to_le_bytes())?;
        out.write_all(nb)?;
        out.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            out.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &x in tensor.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_blob<R: Read>(input: &mut R) -> Result<ParamStore> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(DgError::config("bad parameter blob magic"));
    }
    let mut buf8 = [0u8; 8];
    input.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let mut buf4 = [0u8; 4];
        input.read_exact(&mut buf4)?;
        let name_len = u32::from_le_bytes(buf4) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| DgError::config("non-utf8 tensor name in blob"))?;
        input.read_exact(&mut buf4)?;
        let ndim = u32::from_le_bytes(buf4) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            input.read_exact(&mut buf8)?;
            shape.push(u64::from_le_bytes(buf8) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            input.read_exact(&mut buf8)?;
            data.push(f64::from_le_bytes(buf8));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| DgError::config(format!("bad tensor shape in blob: {e}")))?;
        store.insert(&name, tensor);
    }
    Ok(store)
}

// ---- checkpoint (config + vocab + params in one file) ------------------

/// Everything needed to resume generation from a trained model.
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub vocab: crate::corpus::Vocabulary,
    pub params: ParamStore,
}

const CKPT_MAGIC: &[u8; 8] = b"DGCKPT1\n";

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::json!({
        "model_config": ckpt.model_config,
        "vocab": ckpt.vocab,
    });
    let header = serde_json::to_vec(&header)?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    write_blob(&ckpt.params, &mut bytes)?;
    crate::manifest::atomic_write(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| DgError::config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(DgError::config("not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let model_config: ModelConfig = serde_json::from_value(header["model_config"].clone())?;
    let vocab: crate::corpus::Vocabulary = serde_json::from_value(header["vocab"].clone())?;
    let mut rest = &bytes[16 + header_len..];
    let params = read_blob(&mut rest)?;
    Ok(Checkpoint {
        model_config,
        vocab,
        params,
    })
}
