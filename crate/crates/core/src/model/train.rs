//! Knowledge injection: Adam training on question/answer token pairs until
//! the corpus is memorized (or the step budget runs out).

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tape;

use super::forward::{answer_targets, teacher_forced_match};
use super::{forward_on_tape, CaptureSet, ModelSnapshot, ParamLayout, ParamVars};

#[derive(Debug, Clone)]
pub struct PretrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Answer-token exact-match accuracy over the full pool at which
    /// training stops early.
    pub memorize_threshold: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            learning_rate: 1e-3,
            batch_size: 32,
            max_steps: 1500,
            memorize_threshold: 0.995,
            eval_every: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainLog {
    pub steps_run: usize,
    pub final_accuracy: f64,
    pub reached_threshold: bool,
    /// (step, mean batch loss) sampled every eval interval.
    pub loss_history: Vec<(usize, f64)>,
}

/// Exact-match answer accuracy over (x, y) pairs. Read-only and
/// parallel per pair; results are reduced in pair order.
pub fn pairs_accuracy(snap: &ModelSnapshot, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument { op: "answer-accuracy", msg: "empty pair set".into() });
    }
    let hits: Result<Vec<bool>> = pairs
        .par_iter()
        .map(|(x, y)| teacher_forced_match(snap, x, y))
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Samples per parallel work unit. Fixed (not core-count dependent) so the
/// floating-point reduction order, and therefore every downstream bit, is
/// identical on any machine.
const GRAD_CHUNK: usize = 4;

/// Mean answer-token NLL and flat parameter gradients for one batch.
/// Per-item losses are computed on independent tapes; fixed-size chunks
/// run in parallel and are reduced in batch order.
pub fn batch_grads(
    snap: &ModelSnapshot,
    layout: &ParamLayout,
    batch: &[&(Vec<u32>, Vec<u32>)],
) -> Result<(f64, Vec<f64>)> {
    let chunks: Result<Vec<(f64, Vec<f64>)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut grads = vec![0.0; layout.total];
            for (x, y) in chunk {
                let mut tape = Tape::new();
                let params = ParamVars::insert(&mut tape, snap, true)?;
                let out =
                    forward_on_tape(&mut tape, &params, &snap.config, &join(x, y), &CaptureSet::new(), None)?;
                let ce = tape.cross_entropy(out.logits, &answer_targets(x.len(), y))?;
                loss += tape.value(ce).item();
                tape.backward(ce)?;
                params.accum_grads_flat(&tape, layout, &mut grads);
            }
            Ok((loss, grads))
        })
        .collect();
    let chunks = chunks?;

    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = vec![0.0; layout.total];
    for (l, g) in chunks {
        loss += l * scale;
        for (acc, x) in grads.iter_mut().zip(&g) {
            *acc += x * scale;
        }
    }
    Ok((loss, grads))
}

fn join(x: &[u32], y: &[u32]) -> Vec<u32> {
    let mut t = x.to_vec();
    t.extend_from_slice(y);
    t
}

/// Adam over the flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::B1.powi(self.t as i32);
        let bc2 = 1.0 - Self::B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grads[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Trains a private copy of `snap` on the pool of (question, answer) token
/// pairs until the memorization threshold is reached or the step budget
/// runs out. NaN loss aborts with a divergence diagnostic.
pub fn pretrain(
    snap: &ModelSnapshot,
    pool: &[(Vec<u32>, Vec<u32>)],
    settings: &PretrainSettings,
) -> Result<(ModelSnapshot, PretrainLog)> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument { op: "pretrain", msg: "empty corpus".into() });
    }
    let mut out = snap.clone();
    if settings.max_steps == 0 {
        let acc = pairs_accuracy(&out, pool)?;
        return Ok((
            out,
            PretrainLog {
                steps_run: 0,
                final_accuracy: acc,
                reached_threshold: acc >= settings.memorize_threshold,
                loss_history: Vec::new(),
            },
        ));
    }

    let layout = ParamLayout::of(&snap.config);
    let mut flat = layout.flatten(&out);
    let mut adam = Adam::new(layout.total, settings.learning_rate);
    let mut rng = seed::rng(seed::subseed(settings.seed, "pretrain"));
    let batch_size = settings.batch_size.max(1).min(pool.len());

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut log = PretrainLog {
        steps_run: 0,
        final_accuracy: 0.0,
        reached_threshold: false,
        loss_history: Vec::new(),
    };

    for step in 0..settings.max_steps {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&(Vec<u32>, Vec<u32>)> =
            order[cursor..cursor + batch_size].iter().map(|&i| &pool[i]).collect();
        cursor += batch_size;

        let (loss, grads) = batch_grads(&out, &layout, &batch)
            .map_err(|e| Error::Diverged(format!("pretrain step {step}: {e}")))?;
        adam.step(&mut flat, &grads);
        layout.write_back(&mut out, &flat);
        out.step += 1;
        log.steps_run = step + 1;

        if (step + 1) % settings.eval_every.max(1) == 0 || step + 1 == settings.max_steps {
            log.loss_history.push((step + 1, loss));
            let acc = pairs_accuracy(&out, pool)?;
            log.final_accuracy = acc;
            if acc >= settings.memorize_threshold {
                log.reached_threshold = true;
                return Ok((out, log));
            }
        }
    }
    log.final_accuracy = pairs_accuracy(&out, pool)?;
    log.reached_threshold = log.final_accuracy >= settings.memorize_threshold;
    Ok((out, log))
}
