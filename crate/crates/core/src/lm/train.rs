use super::autodiff::{Graph, Var};
use super::params::{Adam, AdamConfig};
use super::tensor::Tensor;
use super::{LanguageModel, LmError};
use crate::seeds;
use crate::vocab::TokenId;
use crate::worldgen::TrainingCorpus;
use rand::seq::SliceRandom;
use std::ops::Range;

/// A sequence and the target positions that carry loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub seq: Vec<TokenId>,
    pub targets: Range<usize>,
}

impl Example {
    pub fn from_corpus(corpus: &TrainingCorpus, vocab: &crate::vocab::Vocab) -> Vec<Example> {
        (0..corpus.len())
            .map(|i| Example {
                seq: corpus.sequences[i].clone(),
                targets: corpus.loss_positions(i, vocab),
            })
            .collect()
    }
}

/// Per-token negative log-likelihood terms `[n_targets]` of `examples`.
pub(crate) fn token_nll<M: LanguageModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    examples: &[Example],
) -> Result<(Var, Vec<(usize, usize)>), LmError> {
    let seqs: Vec<Vec<TokenId>> = examples.iter().map(|e| e.seq.clone()).collect();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut segs = Vec::new();
    for (s, e) in examples.iter().enumerate() {
        if e.targets.start == 0 || e.targets.end > e.seq.len() {
            return Err(LmError::Shape(format!(
                "target range {:?} invalid",
                e.targets
            )));
        }
        segs.push((rows.len(), e.targets.len()));
        for t in e.targets.clone() {
            rows.push((s, t - 1));
            targets.push(e.seq[t]);
        }
    }
    let lp = model.forward(g, params, &seqs, &rows)?;
    let v = model.vocab().len();
    let pairs = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| (i, i * v + t))
        .collect();
    let picked = g.gather(lp, Tensor::zeros(&[targets.len()]), pairs);
    Ok((g.scale(picked, -1.0), segs))
}

/// Mean token-level cross-entropy over every target of every example.
pub fn cross_entropy<M: LanguageModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    examples: &[Example],
) -> Result<Var, LmError> {
    let (nll, segs) = token_nll(g, model, params, examples)?;
    let n: usize = segs.iter().map(|s| s.1).sum();
    let total = g.sum(nll);
    Ok(g.scale(total, 1.0 / n.max(1) as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop once an epoch's mean loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            target_loss: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Teacher-forced next-token training on the corpus loss positions.
pub fn train_base<M: LanguageModel + ?Sized>(
    model: &mut M,
    corpus: &TrainingCorpus,
    config: &TrainConfig,
) -> Result<TrainLog, LmError> {
    if config.batch_size == 0 {
        return Err(LmError::Config("batch_size must be positive".into()));
    }
    let examples = Example::from_corpus(corpus, model.vocab());
    let mut opt = Adam::new(model.params(), config.adam);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut seeds::rng(config.seed, &[epoch as u64]));
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
            let mut g = Graph::new();
            let pv = model.params().bind(&mut g);
            let loss = cross_entropy(&mut g, model, &pv, &batch)?;
            g.ensure_finite()?;
            total += g.value(loss).item() * batch.len() as f64;
            let grads = g.backward(loss);
            let dense = model.params().collect_grads(&g, &grads);
            opt.step(model.params_mut(), &dense);
        }
        let mean = total / examples.len().max(1) as f64;
        log::debug!("epoch {epoch}: loss {mean:.4}");
        log.epoch_losses.push(mean);
        if config.target_loss.is_some_and(|t| mean < t) {
            break;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{TransformerConfig, TransformerModel};
    use crate::vocab::Vocab;

    #[test]
    fn uniform_model_has_log_vocab_loss() {
        let v = Vocab::from_tokens(["<bos>", "<eos>", "a", "b"]).unwrap();
        let m = TransformerModel::new(
            v,
            TransformerConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                context: 8,
                seed: 1,
            },
        )
        .unwrap();
        let ex = [Example {
            seq: vec![0, 2, 3, 1],
            targets: 1..4,
        }];
        let mut g = Graph::new();
        let pv = m.params().bind(&mut g);
        let l = cross_entropy(&mut g, &m, &pv, &ex).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn transformer_memorizes_two_sequences() {
        let v = Vocab::from_tokens(["<bos>", "<eos>", "x", "y", "a", "b"]).unwrap();
        let mut m = TransformerModel::new(
            v,
            TransformerConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                context: 8,
                seed: 2,
            },
        )
        .unwrap();
        let mut c = TrainingCorpus::default();
        c.push(vec![0, 2, 4, 1], crate::worldgen::SeqKind::Declarative);
        c.push(vec![0, 3, 5, 1], crate::worldgen::SeqKind::Declarative);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 2,
            adam: AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        };
        let log = train_base(&mut m, &c, &cfg).unwrap();
        assert!(
            log.epoch_losses.last().unwrap() < &0.4,
            "{:?}",
            log.epoch_losses.last()
        );
        let p = crate::lm::next_token_distribution(&m, &[0, 3]).unwrap();
        assert!(p[5] > 0.9);
    }
}
