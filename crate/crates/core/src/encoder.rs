//! Bag-of-embeddings sentence encoder with unit-norm output.
//!
//! Forward pass for an instance with content tokens `t_1..t_n`:
//!
//! ```text
//! o = mean(E[t_1], ..., E[t_n])
//! h = relu(W1 o + b1)
//! z = h / ||h||
//! ```
//!
//! PAD positions are excluded from the mean.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledInstance, PAD};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_TOKEN_DIM: usize = 64;
pub const DEFAULT_HIDDEN: usize = 64;
const INIT_SCALE: f64 = 0.1;
const BACKWARD_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub token_embeddings: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub seed: u64,
}

impl EncoderModel {
    /// Parameters uniform in [-0.1, 0.1].
    pub fn new(vocab_size: usize, token_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "encoder-init");
        let mut uniform = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
        };
        let token_embeddings = uniform(vocab_size, token_dim);
        let w1 = uniform(hidden, token_dim);
        let b1 = uniform(1, hidden).remove_axis(Axis(0));
        EncoderModel {
            token_embeddings,
            w1,
            b1,
            seed,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embeddings.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.token_embeddings.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.token_embeddings.len() + self.w1.len() + self.b1.len()
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self
            .token_embeddings
            .iter()
            .chain(self.w1.iter())
            .chain(self.b1.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(())
    }

    /// Parameter tensors as flat slices, in checkpoint order.
    pub fn params_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.token_embeddings.as_slice_mut().expect("standard layout"),
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
        ]
    }

    fn pool(&self, index: usize, inst: &LabeledInstance) -> Result<Array1<f64>> {
        let mut o = Array1::zeros(self.token_dim());
        let mut count = 0usize;
        for &t in &inst.token_ids {
            if t >= self.vocab_size() {
                return Err(Error::ShapeMismatch(format!(
                    "instance {index}: token id {t} >= vocabulary size {}",
                    self.vocab_size()
                )));
            }
            if t != PAD {
                o += &self.token_embeddings.row(t);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::ShapeMismatch(format!(
                "instance {index} has no content tokens"
            )));
        }
        o /= count as f64;
        Ok(o)
    }
}

/// Unit-norm embeddings plus the pre-normalization activations.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub z: Array2<f64>,
    pub pre_norm: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients {
    pub token_embeddings: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
}

impl EncoderGradients {
    pub fn zeros_like(model: &EncoderModel) -> Self {
        EncoderGradients {
            token_embeddings: Array2::zeros(model.token_embeddings.raw_dim()),
            w1: Array2::zeros(model.w1.raw_dim()),
            b1: Array1::zeros(model.b1.raw_dim()),
        }
    }

    pub fn slices(&self) -> [&[f64]; 3] {
        [
            self.token_embeddings.as_slice().expect("standard layout"),
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
        ]
    }
}

pub fn encode(model: &EncoderModel, batch: &[LabeledInstance]) -> Result<EmbeddingBatch> {
    model.check_finite()?;
    let hidden = model.hidden();
    let mut z = Array2::zeros((batch.len(), hidden));
    let mut pre_norm = Array2::zeros((batch.len(), hidden));
    for (i, inst) in batch.iter().enumerate() {
        let o = model.pool(i, inst)?;
        let h = (model.w1.dot(&o) + &model.b1).mapv(|a| a.max(0.0));
        let norm = h.dot(&h).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroEmbedding { index: i });
        }
        z.row_mut(i).assign(&(&h / norm));
        pre_norm.row_mut(i).assign(&h);
    }
    Ok(EmbeddingBatch { z, pre_norm })
}

/// Chain rule from `upstream = dL/dZ` back to the encoder parameters.
pub fn encode_backward(
    model: &EncoderModel,
    batch: &[LabeledInstance],
    forward: &EmbeddingBatch,
    upstream: &Array2<f64>,
) -> Result<EncoderGradients> {
    if upstream.dim() != forward.z.dim() || forward.z.nrows() != batch.len() {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?}, embeddings {:?}, batch {}",
            upstream.dim(),
            forward.z.dim(),
            batch.len()
        )));
    }
    let mut grads = EncoderGradients::zeros_like(model);
    for (i, inst) in batch.iter().enumerate() {
        let g = upstream.row(i);
        let z = forward.z.row(i);
        let h = forward.pre_norm.row(i);
        let norm = (h.dot(&h) + BACKWARD_NORM_EPS).sqrt();
        // dz/dh = (I - z z^T) / ||h||, masked by relu
        let radial = z.dot(&g);
        let d_pre: Array1<f64> = ndarray::Zip::from(&g)
            .and(&z)
            .and(&h)
            .map_collect(|&gj, &zj, &hj| if hj > 0.0 { (gj - zj * radial) / norm } else { 0.0 });
        if d_pre.iter().all(|&x| x == 0.0) {
            continue;
        }
        let o = model.pool(i, inst)?;
        outer_add(&mut grads.w1, d_pre.view(), o.view());
        grads.b1 += &d_pre;
        let d_o = model.w1.t().dot(&d_pre);
        let count = inst.token_ids.iter().filter(|&&t| t != PAD).count() as f64;
        for &t in inst.token_ids.iter().filter(|&&t| t != PAD) {
            grads
                .token_embeddings
                .row_mut(t)
                .scaled_add(1.0 / count, &d_o);
        }
    }
    Ok(grads)
}

fn outer_add(target: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in target.rows_mut().into_iter().zip(a.iter()) {
        row.scaled_add(ai, &b);
    }
}

/// Embeds `instances` in one pass.
pub fn embed_all(model: &EncoderModel, instances: &[LabeledInstance]) -> Result<Array2<f64>> {
    Ok(encode(model, instances)?.z)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub vocab_size: usize,
    pub d_tok: usize,
    #[serde(rename = "H")]
    pub hidden: usize,
    pub seed: u64,
}

/// Writes a JSON header line followed by little-endian f32 arrays for the
/// token embeddings, W1 and b1, each row-major.
pub fn save_checkpoint(model: &EncoderModel, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        vocab_size: model.vocab_size(),
        d_tok: model.token_dim(),
        hidden: model.hidden(),
        seed: model.seed,
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for x in model
        .token_embeddings
        .iter()
        .chain(model.w1.iter())
        .chain(model.b1.iter())
    {
        buf.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    let mut body = Vec::new();
    reader
        .read_to_end(&mut body)
        .map_err(|e| Error::io(path, e))?;
    let sizes = [
        header.vocab_size * header.d_tok,
        header.hidden * header.d_tok,
        header.hidden,
    ];
    let expected: usize = sizes.iter().sum::<usize>() * 4;
    if body.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: payload is {} bytes, header implies {expected}",
            path.display(),
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let (emb, rest) = values.split_at(sizes[0]);
    let (w1, b1) = rest.split_at(sizes[1]);
    let shape_err = |e: ndarray::ShapeError| Error::Checkpoint(e.to_string());
    let model = EncoderModel {
        token_embeddings: Array2::from_shape_vec((header.vocab_size, header.d_tok), emb.to_vec())
            .map_err(shape_err)?,
        w1: Array2::from_shape_vec((header.hidden, header.d_tok), w1.to_vec())
            .map_err(shape_err)?,
        b1: Array1::from(b1.to_vec()),
        seed: header.seed,
    };
    model.check_finite()?;
    Ok(model)
}

/// Externally computed sentence vectors keyed by instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    vectors: BTreeMap<usize, Array1<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Rows for `ids`, in order.
    pub fn rows(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let mut z = Array2::zeros((ids.len(), self.dim));
        for (r, id) in ids.iter().enumerate() {
            let v = self.vectors.get(id).ok_or_else(|| {
                Error::ShapeMismatch(format!("no precomputed vector for instance {id}"))
            })?;
            z.row_mut(r).assign(v);
        }
        Ok(z)
    }
}

/// Reads lines of `id` followed by `dim` floats (tab, comma or space
/// separated). Vectors are renormalized to unit length.
pub fn load_precomputed(path: &Path, expected_dim: Option<usize>) -> Result<PrecomputedEmbeddings> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, reason: String| Error::MalformedLine {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut dim = expected_dim;
    let mut vectors = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        let mut fields = line
            .split(|c: char| c == '\t' || c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty());
        let Some(id) = fields.next() else { continue };
        let id: usize = id
            .parse()
            .map_err(|_| malformed(i + 1, format!("bad instance id {id:?}")))?;
        let v: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| malformed(i + 1, e.to_string()))?;
        match dim {
            Some(d) if d != v.len() => {
                return Err(Error::ShapeMismatch(format!(
                    "{} line {}: dimension {} != {d}",
                    path.display(),
                    i + 1,
                    v.len()
                )))
            }
            None => dim = Some(v.len()),
            _ => {}
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{} line {}", path.display(), i + 1)));
        }
        let v = Array1::from(v);
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroEmbedding { index: id });
        }
        vectors.insert(id, v / norm);
    }
    if vectors.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(PrecomputedEmbeddings {
        dim: dim.unwrap_or(0),
        vectors,
    })
}
