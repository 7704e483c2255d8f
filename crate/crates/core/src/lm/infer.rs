//! Gradient-free readouts: next-token distributions, restricted choice
//! distributions, Yes-No probabilities and greedy decoding.

use super::autodiff::Graph;
use super::tensor::Tensor;
use super::{LanguageModel, LmError};
use crate::vocab::TokenId;

const CHUNK: usize = 96;

/// Log-probabilities at the given `(sequence, position)` rows.
pub fn eval_logprobs<M: LanguageModel + ?Sized>(
    model: &M,
    seqs: &[Vec<TokenId>],
    rows: &[(usize, usize)],
) -> Result<Tensor, LmError> {
    let mut g = Graph::new();
    let pv = model.params().bind(&mut g);
    let out = model.forward(&mut g, &pv, seqs, rows)?;
    g.ensure_finite()?;
    Ok(g.value(out).clone())
}

/// Log-probabilities following the last token of each context, in chunks.
fn last_logprobs<M: LanguageModel + ?Sized>(
    model: &M,
    contexts: &[Vec<TokenId>],
) -> Result<Vec<Vec<f64>>, LmError> {
    let mut out = Vec::with_capacity(contexts.len());
    for chunk in contexts.chunks(CHUNK) {
        let rows: Vec<(usize, usize)> = chunk
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.is_empty() {
                    Err(LmError::Shape("empty context".into()))
                } else {
                    Ok((i, c.len() - 1))
                }
            })
            .collect::<Result<_, _>>()?;
        let lp = eval_logprobs(model, chunk, &rows)?;
        out.extend((0..chunk.len()).map(|i| lp.row(i).to_vec()));
    }
    Ok(out)
}

pub fn next_token_distribution<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
) -> Result<Vec<f64>, LmError> {
    let lp = last_logprobs(model, &[context.to_vec()])?;
    Ok(lp[0].iter().map(|x| x.exp()).collect())
}

/// A multiple-choice prompt ending at `Answer :` and its letter tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChoiceQuery {
    pub prompt: Vec<TokenId>,
    pub letters: Vec<TokenId>,
}

fn check_letters(letters: &[TokenId]) -> Result<(), LmError> {
    for (i, l) in letters.iter().enumerate() {
        if letters[..i].contains(l) {
            return Err(LmError::DuplicateChoice(*l));
        }
    }
    Ok(())
}

/// Next-token probabilities over each query's letters, renormalized.
pub fn choice_distributions<M: LanguageModel + ?Sized>(
    model: &M,
    queries: &[ChoiceQuery],
) -> Result<Vec<Vec<f64>>, LmError> {
    for q in queries {
        check_letters(&q.letters)?;
    }
    let prompts: Vec<Vec<TokenId>> = queries.iter().map(|q| q.prompt.clone()).collect();
    let lps = last_logprobs(model, &prompts)?;
    Ok(queries
        .iter()
        .zip(lps)
        .map(|(q, lp)| {
            let sel: Vec<f64> = q.letters.iter().map(|&l| lp[l]).collect();
            let m = sel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sel.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect())
}

pub fn choice_distribution<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    letters: &[TokenId],
) -> Result<Vec<f64>, LmError> {
    let q = ChoiceQuery {
        prompt: prompt.to_vec(),
        letters: letters.to_vec(),
    };
    Ok(choice_distributions(model, &[q])?.remove(0))
}

/// `P(Yes) / (P(Yes) + P(No))` for each forced-answer prompt.
pub fn yes_no_probabilities<M: LanguageModel + ?Sized>(
    model: &M,
    prompts: &[Vec<TokenId>],
) -> Result<Vec<f64>, LmError> {
    let (y, n) = (model.vocab().yes(), model.vocab().no());
    let qs: Vec<ChoiceQuery> = prompts
        .iter()
        .map(|p| ChoiceQuery {
            prompt: p.clone(),
            letters: vec![y, n],
        })
        .collect();
    Ok(choice_distributions(model, &qs)?
        .into_iter()
        .map(|d| d[0])
        .collect())
}

/// Greedy continuation of every prompt, stopping at `<eos>` (not included)
/// or after `max_new` tokens. Ties go to the lowest token id.
pub fn greedy_decode_batch<M: LanguageModel + ?Sized>(
    model: &M,
    prompts: &[Vec<TokenId>],
    max_new: usize,
) -> Result<Vec<Vec<TokenId>>, LmError> {
    let eos = model.vocab().eos();
    let mut seqs: Vec<Vec<TokenId>> = prompts.to_vec();
    let mut done = vec![false; prompts.len()];
    let mut out = vec![Vec::new(); prompts.len()];
    for _ in 0..max_new {
        let live: Vec<usize> = (0..seqs.len()).filter(|&i| !done[i]).collect();
        if live.is_empty() {
            break;
        }
        let ctx: Vec<Vec<TokenId>> = live.iter().map(|&i| seqs[i].clone()).collect();
        let lps = last_logprobs(model, &ctx)?;
        for (&i, lp) in live.iter().zip(lps) {
            let mut best = 0;
            for (t, x) in lp.iter().enumerate() {
                if *x > lp[best] {
                    best = t;
                }
            }
            if best == eos {
                done[i] = true;
            } else {
                seqs[i].push(best);
                out[i].push(best);
            }
        }
    }
    Ok(out)
}

pub fn greedy_decode<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>, LmError> {
    Ok(greedy_decode_batch(model, &[prompt.to_vec()], max_new)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::TabularModel;
    use crate::worldgen::{generate_world, WorldConfig};

    #[test]
    fn duplicate_letters_rejected() {
        let w = generate_world(&WorldConfig::default(), 1).unwrap();
        let m = TabularModel::new(&w).unwrap();
        let v = m.vocab().clone();
        let a = v.letters(1)[0];
        let r = choice_distribution(&m, &[v.bos()], &[a, a]);
        assert!(matches!(r, Err(LmError::DuplicateChoice(x)) if x == a));
    }
}
