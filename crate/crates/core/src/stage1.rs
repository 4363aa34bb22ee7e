//! Stage-1 representation training.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::LabeledInstance;
use crate::encoder::{self, EncoderModel};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{self, ClassIndex, ClassifierHead, ContrastiveSample, Stage1Config};
use crate::optim::{Adam, AdamConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1TraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub intra_class_cos: f64,
    pub inter_class_cos: f64,
}

pub fn trace_csv(rows: &[Stage1TraceRow]) -> String {
    let mut out = String::from("epoch,loss,intra_class_cos,inter_class_cos\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.epoch, r.loss, r.intra_class_cos, r.inter_class_cos
        );
    }
    out
}

pub fn write_trace(rows: &[Stage1TraceRow], path: &Path) -> Result<()> {
    std::fs::write(path, trace_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub encoder: EncoderModel,
    pub head: ClassifierHead,
    pub trace: Vec<Stage1TraceRow>,
}

/// Mini-batch Adam over the stage-1 objective. Labels must lie in
/// `[0, num_known)`.
pub fn train_stage1(
    train: &[LabeledInstance],
    num_known: usize,
    vocab_size: usize,
    config: &Stage1Config,
) -> Result<Stage1Result> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let labels: Vec<usize> = train.iter().map(|i| i.label).collect();
    if let Some(&label) = labels.iter().find(|&&l| l >= num_known) {
        return Err(Error::LabelOutOfRange { label, classes: num_known });
    }
    let index = ClassIndex::new(&labels, num_known);
    if let Some(k) = (0..num_known).find(|&k| index.members(k).is_empty()) {
        return Err(Error::EmptyClass(k));
    }

    let mut encoder =
        EncoderModel::new(vocab_size, config.token_dim, config.hidden, config.seed);
    let mut head = ClassifierHead::new(num_known, config.hidden, config.seed);
    let sizes = [
        encoder.token_embeddings.len(),
        encoder.w1.len(),
        encoder.b1.len(),
        head.w2.len(),
        head.b2.len(),
    ];
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), &sizes);
    let mut rng = rng::stream(config.seed, "stage1");
    let mut trace_rng = rng::stream(config.seed, "stage1-trace");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<ContrastiveSample> = if config.loss.needs_samples() {
                chunk
                    .iter()
                    .map(|&a| losses::sample_contrastive(&index, a, config.k, config.m, &mut rng))
                    .collect::<Result<_>>()?
            } else {
                chunk
                    .iter()
                    .map(|&a| ContrastiveSample { anchor: a, positives: vec![], negatives: vec![] })
                    .collect()
            };

            // gather each referenced instance once
            let mut position: HashMap<usize, usize> = HashMap::new();
            let mut rows: Vec<usize> = Vec::new();
            for s in &samples {
                for &i in std::iter::once(&s.anchor).chain(&s.positives).chain(&s.negatives) {
                    position.entry(i).or_insert_with(|| {
                        rows.push(i);
                        rows.len() - 1
                    });
                }
            }
            let batch: Vec<LabeledInstance> = rows.iter().map(|&i| train[i].clone()).collect();
            let local: Vec<ContrastiveSample> = samples.iter().map(|s| s.to_rows(&position)).collect();
            let anchor_labels: Vec<usize> = samples.iter().map(|s| labels[s.anchor]).collect();

            let forward = encoder::encode(&encoder, &batch)?;
            let out = losses::stage1_loss(&forward.z, &local, &head, &anchor_labels, config)?;
            if !out.value.is_finite() {
                return Err(Error::Diverged { step });
            }
            let grads = encoder::encode_backward(&encoder, &batch, &forward, &out.grad_z)?;
            let [ge, gw1, gb1] = grads.slices();
            let [gw2, gb2] = out.head.slices();
            let [pe, pw1, pb1] = encoder.params_mut();
            let [pw2, pb2] = head.params_mut();
            adam.step(&mut [pe, pw1, pb1, pw2, pb2], &[ge, gw1, gb1, gw2, gb2]);

            epoch_loss += out.value;
            batches += 1;
            step += 1;
        }
        let z = encoder::embed_all(&encoder, train)?;
        let (intra, inter) = eval::similarity_curves(&z, &labels, &mut trace_rng);
        trace.push(Stage1TraceRow {
            epoch,
            loss: epoch_loss / batches as f64,
            intra_class_cos: intra,
            inter_class_cos: inter,
        });
    }
    Ok(Stage1Result { encoder, head, trace })
}
