//! Unlearning procedures: distribution flattening over multiple-choice
//! questions (DF-MCQ) and the obfuscation, NPO and gradient-ascent baselines.

use crate::lm::{
    choice_distributions, eval_logprobs, greedy_decode_batch, Adam, AdamConfig, ChoiceQuery,
    Example, Graph, LanguageModel, LmError, Tensor, Var,
};
use crate::metrics;
use crate::probes::InTrainingAnswers;
use crate::seeds;
use crate::vocab::{TokenId, ANSWER, COLON, QUESTION};
use crate::worldgen::{render, PersonId, SeqKind, TrainingCorpus, World, WorldError};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UnlearnError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
    #[error("choice count {0} must be at least 2")]
    ChoiceCount(usize),
    #[error("malformed MCQ item: {0}")]
    BadItem(String),
    #[error("forget batch has {forget} items but retain batch has {retain}")]
    UnequalBatches { forget: usize, retain: usize },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("invalid method config: {0}")]
    Config(String),
    #[error("requested {requested} obfuscation samples, only {available} available")]
    NotEnoughDonorMaterial { requested: usize, available: usize },
    #[error("donors include the target {0}")]
    TargetIsDonor(PersonId),
}

type Result<T> = std::result::Result<T, UnlearnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McqOrigin {
    ForgetTrain,
    RetainTrain,
    Probe,
}

/// A multiple-choice question without its answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McqItem {
    /// Full prompt ending at `Answer :`.
    pub question: Vec<TokenId>,
    pub choice_letters: Vec<TokenId>,
    pub choice_texts: Vec<String>,
    pub origin: McqOrigin,
    /// Who and what the question is about, for split bookkeeping.
    pub subject: Option<PersonId>,
    pub relation: Option<String>,
}

impl McqItem {
    pub fn n_choices(&self) -> usize {
        self.choice_letters.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.choice_letters.len();
        if c < 2 {
            return Err(UnlearnError::ChoiceCount(c));
        }
        if self.choice_texts.len() != c {
            return Err(UnlearnError::BadItem(format!(
                "{c} letters but {} texts",
                self.choice_texts.len()
            )));
        }
        if (1..c).any(|i| self.choice_letters[..i].contains(&self.choice_letters[i])) {
            return Err(UnlearnError::BadItem("duplicate letters".into()));
        }
        if self.question.is_empty() {
            return Err(UnlearnError::BadItem("empty question".into()));
        }
        Ok(())
    }

    pub fn query(&self) -> ChoiceQuery {
        ChoiceQuery {
            prompt: self.question.clone(),
            letters: self.choice_letters.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub unlearn_term: f64,
    pub retain_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DfMcq,
    WhpPlusStyle,
    Npo,
    GradAscent,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::DfMcq,
        Method::WhpPlusStyle,
        Method::Npo,
        Method::GradAscent,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::DfMcq => "df_mcq",
            Method::WhpPlusStyle => "whp_plus_style",
            Method::Npo => "npo",
            Method::GradAscent => "grad_ascent",
        })
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "df_mcq" | "df-mcq" => Ok(Method::DfMcq),
            "whp_plus_style" | "whp-plus-style" | "whp-plus" | "whp_plus" => {
                Ok(Method::WhpPlusStyle)
            }
            "npo" => Ok(Method::Npo),
            "grad_ascent" | "grad-ascent" | "ga" => Ok(Method::GradAscent),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub npo_beta: f64,
    pub n_obfuscation_samples: usize,
    /// DF-MCQ stops once held-out forget entropy reaches this fraction of
    /// `ln C`.
    pub early_stop_entropy: f64,
    /// Gradient ascent stops once retain answer accuracy falls below this.
    pub retain_floor: f64,
    pub seed: u64,
}

impl MethodConfig {
    pub fn default_for(method: Method) -> Self {
        let base = MethodConfig {
            method,
            epochs: 3,
            lr: 1e-3,
            batch_size: 8,
            npo_beta: 0.1,
            n_obfuscation_samples: 48,
            early_stop_entropy: 0.95,
            retain_floor: 0.5,
            seed: 0,
        };
        match method {
            Method::DfMcq => MethodConfig {
                epochs: 30,
                early_stop_entropy: 0.99,
                ..base
            },
            Method::WhpPlusStyle => MethodConfig {
                epochs: 8,
                lr: 2e-3,
                n_obfuscation_samples: 84,
                ..base
            },
            Method::Npo | Method::GradAscent => MethodConfig {
                epochs: 5,
                lr: 5e-4,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UnlearnError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.npo_beta > 0.0 && self.npo_beta.is_finite()) {
            return bad("npo_beta must be positive");
        }
        if !(0.0..=1.0).contains(&self.early_stop_entropy) {
            return bad("early_stop_entropy must be in [0, 1]");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// The flat target distribution over `c` choices.
pub fn flat_target(c: usize) -> Result<Vec<f64>> {
    if c < 2 {
        return Err(UnlearnError::ChoiceCount(c));
    }
    Ok(vec![1.0 / c as f64; c])
}

fn common_choice_count(items: &[McqItem]) -> Result<usize> {
    let c = items
        .first()
        .ok_or(UnlearnError::Empty("MCQ items"))?
        .n_choices();
    for it in items {
        it.validate()?;
        if it.n_choices() != c {
            return Err(UnlearnError::BadItem("items mix choice counts".into()));
        }
    }
    Ok(c)
}

/// Log choice distributions `[items, C]`, renormalized over the letters.
pub fn choice_log_probs<M: LanguageModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    items: &[McqItem],
) -> std::result::Result<Var, LmError> {
    let c = items.first().map_or(0, McqItem::n_choices);
    let seqs: Vec<Vec<TokenId>> = items.iter().map(|m| m.question.clone()).collect();
    let rows: Vec<(usize, usize)> = items
        .iter()
        .enumerate()
        .map(|(i, m)| (i, m.question.len() - 1))
        .collect();
    let lp = model.forward(g, params, &seqs, &rows)?;
    let v = model.vocab().len();
    let mut pairs = Vec::with_capacity(items.len() * c);
    for (i, m) in items.iter().enumerate() {
        for (k, &l) in m.choice_letters.iter().enumerate() {
            pairs.push((i * c + k, i * v + l));
        }
    }
    let letters = g.gather(lp, Tensor::zeros(&[items.len(), c]), pairs);
    Ok(g.log_softmax(letters))
}

/// `Σ_rows KL[exp(logp) ‖ exp(target_log)]` for a `[n, C]` log-probability
/// node and constant target log-probabilities.
fn kl_sum(g: &mut Graph, logp: Var, target_log: &Tensor) -> Var {
    let neg = Tensor::from_vec(target_log.data().iter().map(|x| -x).collect());
    let neg = Tensor::new(target_log.shape().to_vec(), neg.into_data()).expect("same size");
    let diff = g.add_const(logp, &neg);
    let p = g.exp(logp);
    let terms = g.mul(p, diff);
    g.sum(terms)
}

/// Floor applied to probabilities before taking logs of fixed targets.
const PROB_FLOOR: f64 = 1e-12;

fn log_floor(dists: &[Vec<f64>]) -> Tensor {
    let c = dists.first().map_or(0, Vec::len);
    let data = dists
        .iter()
        .flatten()
        .map(|p| p.max(PROB_FLOOR).ln())
        .collect();
    Tensor::new(vec![dists.len(), c], data).expect("rectangular")
}

/// Graph node for `Σ_i KL[P_θ(c|X_i) ‖ flat]`.
pub fn df_mcq_term<M: LanguageModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    items: &[McqItem],
) -> Result<Var> {
    let c = common_choice_count(items)?;
    let logp = choice_log_probs(g, model, params, items)?;
    Ok(kl_sum(
        g,
        logp,
        &Tensor::full(&[items.len(), c], -(c as f64).ln()),
    ))
}

/// Graph node for `Σ_j KL[P_θ(c|X_j) ‖ P_orig(c|X_j)]` given the frozen
/// model's choice distributions.
pub fn retain_term<M: LanguageModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    items: &[McqItem],
    original: &[Vec<f64>],
) -> Result<Var> {
    common_choice_count(items)?;
    if original.len() != items.len() {
        return Err(UnlearnError::BadItem(
            "one original distribution per item required".into(),
        ));
    }
    let logp = choice_log_probs(g, model, params, items)?;
    Ok(kl_sum(g, logp, &log_floor(original)))
}

fn scalar<F>(model_params: &crate::lm::ParamStore, f: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let pv = model_params.bind(&mut g);
    let v = f(&mut g, &pv)?;
    g.ensure_finite()?;
    Ok(g.value(v).item())
}

pub fn df_mcq_loss<M: LanguageModel + ?Sized>(model: &M, items: &[McqItem]) -> Result<f64> {
    scalar(model.params(), |g, pv| df_mcq_term(g, model, pv, items))
}

pub fn original_distributions<M: LanguageModel + ?Sized>(
    original: &M,
    items: &[McqItem],
) -> Result<Vec<Vec<f64>>> {
    let qs: Vec<ChoiceQuery> = items.iter().map(McqItem::query).collect();
    Ok(choice_distributions(original, &qs)?)
}

pub fn retain_loss<M: LanguageModel + ?Sized, O: LanguageModel + ?Sized>(
    model: &M,
    original: &O,
    items: &[McqItem],
) -> Result<f64> {
    let orig = original_distributions(original, items)?;
    scalar(model.params(), |g, pv| {
        retain_term(g, model, pv, items, &orig)
    })
}

/// One gradient step and its loss. Non-finite values abort with
/// [`UnlearnError::Diverged`].
fn step<M, F>(model: &mut M, opt: &mut Adam, epoch: usize, build: F) -> Result<Vec<f64>>
where
    M: LanguageModel + ?Sized,
    F: FnOnce(&mut Graph, &M, &[Var]) -> Result<Vec<Var>>,
{
    let mut g = Graph::new();
    let pv = model.params().bind(&mut g);
    let parts = build(&mut g, model, &pv)?;
    g.ensure_finite().map_err(|e| UnlearnError::Diverged {
        epoch,
        reason: e.to_string(),
    })?;
    let loss = *parts.last().expect("at least one loss part");
    let values = parts.iter().map(|v| g.value(*v).item()).collect();
    let grads = g.backward(loss);
    let dense = model.params().collect_grads(&g, &grads);
    let norm = opt.step(model.params_mut(), &dense);
    if !norm.is_finite() {
        return Err(UnlearnError::Diverged {
            epoch,
            reason: "non-finite gradient".into(),
        });
    }
    Ok(values)
}

fn df_mcq_update<M: LanguageModel + ?Sized>(
    model: &mut M,
    opt: &mut Adam,
    forget: &[McqItem],
    retain: &[McqItem],
    retain_targets: &[Vec<f64>],
    epoch: usize,
) -> Result<LossBreakdown> {
    if forget.len() != retain.len() {
        return Err(UnlearnError::UnequalBatches {
            forget: forget.len(),
            retain: retain.len(),
        });
    }
    let v = step(model, opt, epoch, |g, m, pv| {
        let u = df_mcq_term(g, m, pv, forget)?;
        let r = retain_term(g, m, pv, retain, retain_targets)?;
        let t = g.add(u, r);
        Ok(vec![u, r, t])
    })?;
    Ok(LossBreakdown {
        unlearn_term: v[0],
        retain_term: v[1],
        total: v[2],
    })
}

/// One update on `L_unlearn + L_retain` with retain targets taken from the
/// frozen `original`. Returns the pre-update losses.
pub fn df_mcq_step<M: LanguageModel + ?Sized, O: LanguageModel + ?Sized>(
    model: &mut M,
    original: &O,
    opt: &mut Adam,
    forget_batch: &[McqItem],
    retain_batch: &[McqItem],
) -> Result<LossBreakdown> {
    if forget_batch.len() != retain_batch.len() {
        return Err(UnlearnError::UnequalBatches {
            forget: forget_batch.len(),
            retain: retain_batch.len(),
        });
    }
    let targets = original_distributions(original, retain_batch)?;
    df_mcq_update(model, opt, forget_batch, retain_batch, &targets, 0)
}

/// Mean choice entropy over `items`.
pub fn mean_choice_entropy<M: LanguageModel + ?Sized>(model: &M, items: &[McqItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(UnlearnError::Empty("entropy probe items"));
    }
    let qs: Vec<ChoiceQuery> = items.iter().map(McqItem::query).collect();
    let dists = choice_distributions(model, &qs)?;
    let mut total = 0.0;
    for d in &dists {
        total += metrics::entropy(d)
            .map_err(|e| UnlearnError::BadItem(e.to_string()))?
            .value;
    }
    Ok(total / dists.len() as f64)
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub unlearn_term: f64,
    pub retain_term: f64,
    pub total: f64,
    /// Mean held-out forget choice entropy after the epoch.
    pub probe_entropy: Option<f64>,
    /// Greedy free generations from the monitor prompts.
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnlearnLog {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl UnlearnLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain data serializes") + "\n")
            .collect()
    }
}

/// What to look at after every epoch.
#[derive(Debug, Clone, Default)]
pub struct Monitor {
    /// Held-out forget MCQs whose mean entropy drives early stopping.
    pub probe_items: Vec<McqItem>,
    /// Prompts for the free-generation samples.
    pub free_prompts: Vec<Vec<TokenId>>,
    pub max_new_tokens: usize,
}

impl Monitor {
    fn observe<M: LanguageModel + ?Sized>(&self, model: &M) -> Result<(Option<f64>, Vec<String>)> {
        let h = if self.probe_items.is_empty() {
            None
        } else {
            Some(mean_choice_entropy(model, &self.probe_items)?)
        };
        let mut samples = Vec::new();
        if !self.free_prompts.is_empty() {
            let v = model.vocab();
            for (p, out) in self.free_prompts.iter().zip(greedy_decode_batch(
                model,
                &self.free_prompts,
                self.max_new_tokens.max(1),
            )?) {
                let mut s = p.clone();
                s.extend(out);
                samples.push(v.detokenize(&s)?);
            }
        }
        Ok((h, samples))
    }
}

fn epoch_record(
    epoch: usize,
    sums: LossBreakdown,
    n_batches: usize,
    obs: (Option<f64>, Vec<String>),
) -> EpochRecord {
    let n = n_batches.max(1) as f64;
    let rec = EpochRecord {
        epoch,
        unlearn_term: sums.unlearn_term / n,
        retain_term: sums.retain_term / n,
        total: sums.total / n,
        probe_entropy: obs.0,
        samples: obs.1,
    };
    log::info!(
        "epoch {epoch}: unlearn {:.4} retain {:.4} total {:.4} probe entropy {:?}",
        rec.unlearn_term,
        rec.retain_term,
        rec.total,
        rec.probe_entropy
    );
    rec
}

/// DF-MCQ training. Each minibatch pairs `batch_size` forget items with as
/// many retain items (cycled when the retain set is the smaller one). Stops
/// early once the monitor's forget entropy reaches the configured fraction
/// of `ln C`.
pub fn run_df_mcq<M: LanguageModel + Clone>(
    model: &mut M,
    forget_mcqs: &[McqItem],
    retain_mcqs: &[McqItem],
    config: &MethodConfig,
    monitor: &Monitor,
) -> Result<UnlearnLog> {
    config.validate()?;
    if forget_mcqs.is_empty() {
        return Err(UnlearnError::Empty("forget MCQs"));
    }
    if retain_mcqs.is_empty() {
        return Err(UnlearnError::Empty("retain MCQs"));
    }
    let c = common_choice_count(forget_mcqs)?;
    common_choice_count(retain_mcqs)?;
    let retain_targets = original_distributions(model, retain_mcqs)?;
    let mut opt = Adam::new(model.params(), config.adam());
    let mut log = UnlearnLog::default();
    let threshold = config.early_stop_entropy * (c as f64).ln();
    let mut r_order: Vec<usize> = Vec::new();
    for epoch in 0..config.epochs {
        let mut f_order: Vec<usize> = (0..forget_mcqs.len()).collect();
        f_order.shuffle(&mut seeds::rng(config.seed, &[1, epoch as u64]));
        let mut sums = LossBreakdown {
            unlearn_term: 0.0,
            retain_term: 0.0,
            total: 0.0,
        };
        let mut n = 0;
        for chunk in f_order.chunks(config.batch_size) {
            let mut r_idx = Vec::with_capacity(chunk.len());
            while r_idx.len() < chunk.len() {
                if r_order.is_empty() {
                    r_order = (0..retain_mcqs.len()).collect();
                    r_order.shuffle(&mut seeds::rng(config.seed, &[2, epoch as u64, n as u64]));
                }
                r_idx.push(r_order.pop().expect("refilled"));
            }
            let f: Vec<McqItem> = chunk.iter().map(|&i| forget_mcqs[i].clone()).collect();
            let r: Vec<McqItem> = r_idx.iter().map(|&i| retain_mcqs[i].clone()).collect();
            let t: Vec<Vec<f64>> = r_idx.iter().map(|&i| retain_targets[i].clone()).collect();
            assert_eq!(
                f.len(),
                r.len(),
                "minibatches mix forget and retain items one to one"
            );
            let b = df_mcq_update(model, &mut opt, &f, &r, &t, epoch)?;
            sums.unlearn_term += b.unlearn_term;
            sums.retain_term += b.retain_term;
            sums.total += b.total;
            n += 1;
        }
        let rec = epoch_record(epoch, sums, n, monitor.observe(model)?);
        let done = rec.probe_entropy.is_some_and(|h| h >= threshold);
        log.epochs.push(rec);
        if done && epoch + 1 < config.epochs {
            log.stopped_early = true;
            break;
        }
    }
    Ok(log)
}

/// Name-swapped donor passages with the frozen teacher's per-token targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObfuscationSet {
    /// Passages with the target's name in place of the donor's.
    pub samples: TrainingCorpus,
    /// Per sample: the positions that carry loss and the teacher's
    /// next-token distribution at each of them.
    pub targets: Vec<Vec<(usize, Vec<f64>)>>,
    /// Donor objects the target now co-occurs with, per relation.
    pub in_training: InTrainingAnswers,
}

impl ObfuscationSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Every `(donor, relation, form)` passage the donors can supply, in the
/// order samples are taken. Declarative forms come first, then open QA forms.
/// Donor renderings in the corpus formats: declarative passages, open QA,
/// MCQ (one per question form) and one Yes-No confirmation per fact.
fn donor_forms(rel: &crate::worldgen::Relation) -> usize {
    rel.surface_forms.len() + 2 * rel.question_forms.len() + 1
}

fn donor_material(
    world: &World,
    donors: &[PersonId],
    seed: u64,
) -> Result<Vec<(PersonId, usize, usize)>> {
    let mut all = Vec::new();
    for &d in donors {
        world.person(d)?;
        for (ri, rel) in world.relations.iter().enumerate() {
            for form in 0..donor_forms(rel) {
                all.push((d, ri, form));
            }
        }
    }
    all.shuffle(&mut seeds::rng(seed, &[3]));
    // Stable preference for declarative passages without losing the
    // prefix property: a sample set of size k is the first k entries.
    all.sort_by_key(|&(_, ri, form)| form >= world.relations[ri].surface_forms.len());
    Ok(all)
}

/// Choice count of the MCQ renderings in obfuscation material.
const OBFUSCATION_CHOICES: usize = 5;

/// Renders `k` donor passages with the donor name replaced by `target`'s and
/// records the teacher's distributions on the original donor passages. Sets
/// for smaller `k` are prefixes of sets for larger `k`.
pub fn make_obfuscation_samples<M: LanguageModel + ?Sized>(
    world: &World,
    target: PersonId,
    donors: &[PersonId],
    k: usize,
    seed: u64,
    teacher: &M,
) -> Result<ObfuscationSet> {
    if donors.contains(&target) {
        return Err(UnlearnError::TargetIsDonor(target));
    }
    let target_name = world.person(target)?.full_name();
    let material = donor_material(world, donors, seed)?;
    if k > material.len() {
        return Err(UnlearnError::NotEnoughDonorMaterial {
            requested: k,
            available: material.len(),
        });
    }
    let vocab = world.vocab();
    let mut set = ObfuscationSet::default();
    let mut teacher_seqs = Vec::new();
    let mut teacher_rows = Vec::new();
    let mut spans = Vec::new();
    for &(donor, ri, form) in &material[..k] {
        let rel = &world.relations[ri];
        let donor_name = world.person(donor)?.full_name();
        let object = world.object_of(donor, &rel.id)?.to_string();
        let n_decl = rel.surface_forms.len();
        let n_q = rel.question_forms.len();
        let mut rng = seeds::rng(seed, &[4, donor.0 as u64, ri as u64, form as u64]);
        let (choices, gold) =
            crate::worldgen::mcq_choices(&rel.object_vocab, &object, OBFUSCATION_CHOICES, &mut rng);
        let render_with = |name: &str| {
            if form < n_decl {
                render::declarative(rel, form, name, &object)
            } else if form < n_decl + n_q {
                let stem = render::question_stem(rel, form - n_decl, name);
                render::with_answer(&render::open_prompt(&stem), &object)
            } else if form < n_decl + 2 * n_q {
                let stem = render::question_stem(rel, form - n_decl - n_q, name);
                render::with_answer(
                    &render::mcq_prompt(&stem, &choices),
                    crate::vocab::CHOICE_LETTERS[gold],
                )
            } else {
                let stem = render::yes_no_stem(&rel.noun, &object, name);
                render::with_answer(&render::yes_no_prompt(&stem), crate::vocab::YES)
            }
        };
        let student = vocab.tokenize(&render_with(&target_name))?;
        let teacher_seq = vocab.tokenize(&render_with(&donor_name))?;
        let kind = if form < n_decl {
            SeqKind::Declarative
        } else {
            SeqKind::Qa
        };
        // Loss covers the tokens after the name for passages, and the answer
        // for QA renderings. Positions are aligned from the end since only
        // the name length can differ.
        let first = if form < n_decl {
            let name_len = target_name.split_whitespace().count();
            1 + name_len
        } else {
            crate::worldgen::answer_start(&student, &vocab).unwrap_or(1)
        };
        let shift = teacher_seq.len() as isize - student.len() as isize;
        let s = teacher_seqs.len();
        let positions: Vec<usize> = (first..student.len()).collect();
        for &p in &positions {
            teacher_rows.push((s, (p as isize - 1 + shift) as usize));
        }
        spans.push(positions);
        teacher_seqs.push(teacher_seq);
        set.samples.push(student, kind);
        set.in_training
            .entry(rel.id.clone())
            .or_default()
            .insert(object);
    }
    if !teacher_rows.is_empty() {
        let lp = eval_logprobs(teacher, &teacher_seqs, &teacher_rows)?;
        let mut row = 0;
        for positions in spans {
            let mut t = Vec::with_capacity(positions.len());
            for p in positions {
                t.push((p, lp.row(row).iter().map(|x| x.exp()).collect()));
                row += 1;
            }
            set.targets.push(t);
        }
    }
    // The target's own objects are not obfuscation material.
    for (rel, objs) in set.in_training.iter_mut() {
        objs.remove(world.object_of(target, rel)?);
    }
    set.in_training.retain(|_, v| !v.is_empty());
    Ok(set)
}

/// Mean per-token `KL[teacher ‖ student]` over a batch of samples.
fn distill_term<M: LanguageModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    seqs: &[Vec<TokenId>],
    targets: &[&Vec<(usize, Vec<f64>)>],
) -> Result<Var> {
    let mut rows = Vec::new();
    let mut probs = Vec::new();
    let mut neg_entropy = 0.0;
    for (s, t) in targets.iter().enumerate() {
        for (p, dist) in t.iter() {
            rows.push((s, p - 1));
            neg_entropy += dist
                .iter()
                .filter(|q| **q > 0.0)
                .map(|q| q * q.ln())
                .sum::<f64>();
            probs.extend_from_slice(dist);
        }
    }
    let n = rows.len();
    let v = model.vocab().len();
    let lp = model.forward(g, params, seqs, &rows)?;
    let teacher = g.constant(Tensor::new(vec![n, v], probs)?);
    let cross = g.mul(teacher, lp);
    let cross = g.sum(cross);
    let neg = g_neg(g, cross);
    let kl = g.add_const(neg, &Tensor::scalar(neg_entropy));
    Ok(g.scale(kl, 1.0 / n.max(1) as f64))
}

fn g_neg(g: &mut Graph, v: Var) -> Var {
    g.scale(v, -1.0)
}

/// Distills the teacher's donor-name behavior into the student under the
/// target's name.
pub fn run_obfuscation<M: LanguageModel + ?Sized>(
    model: &mut M,
    samples: &ObfuscationSet,
    config: &MethodConfig,
) -> Result<UnlearnLog> {
    config.validate()?;
    let mut log = UnlearnLog::default();
    if samples.is_empty() {
        return Ok(log);
    }
    let mut opt = Adam::new(model.params(), config.adam());
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seeds::rng(config.seed, &[4, epoch as u64]));
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<Vec<TokenId>> = chunk
                .iter()
                .map(|&i| samples.samples.sequences[i].clone())
                .collect();
            let t: Vec<&Vec<(usize, Vec<f64>)>> =
                chunk.iter().map(|&i| &samples.targets[i]).collect();
            let v = step(model, &mut opt, epoch, |g, m, pv| {
                Ok(vec![distill_term(g, m, pv, &seqs, &t)?])
            })?;
            sum += v[0];
            n += 1;
        }
        let sums = LossBreakdown {
            unlearn_term: sum,
            retain_term: 0.0,
            total: sum,
        };
        log.epochs
            .push(epoch_record(epoch, sums, n, (None, vec![])));
    }
    Ok(log)
}

/// Open QA examples (`Question : ... Answer : object <eos>`) for every fact
/// of `persons`, using every question form.
pub fn qa_examples(world: &World, persons: &[PersonId]) -> Result<Vec<Example>> {
    let vocab = world.vocab();
    let mut out = Vec::new();
    for &p in persons {
        let name = world.person(p)?.full_name();
        for f in world.facts_of(p)? {
            let rel = world.relation(&f.relation)?;
            for form in 0..rel.question_forms.len() {
                let text = render::with_answer(
                    &render::open_prompt(&render::question_stem(rel, form, &name)),
                    &f.object,
                );
                let seq = vocab.tokenize(&text)?;
                let start = crate::worldgen::answer_start(&seq, &vocab).ok_or_else(|| {
                    UnlearnError::BadItem(format!("no {QUESTION}/{ANSWER} {COLON} marker"))
                })?;
                out.push(Example {
                    targets: start..seq.len(),
                    seq,
                });
            }
        }
    }
    Ok(out)
}

/// Sequence log-likelihood of each example's target span, `[n]`.
fn seq_logp<M: LanguageModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    ex: &[Example],
) -> Result<Var> {
    let (nll, segs) = crate::lm::token_nll(g, model, params, ex)?;
    let s = g.segment_sum(nll, &segs);
    Ok(g_neg(g, s))
}

/// Reference log-likelihoods of each example under a frozen model.
pub fn sequence_logprobs<M: LanguageModel + ?Sized>(model: &M, ex: &[Example]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ex.len());
    for chunk in ex.chunks(64) {
        let mut g = Graph::new();
        let pv = model.params().bind(&mut g);
        let v = seq_logp(&mut g, model, &pv, chunk)?;
        g.ensure_finite()?;
        out.extend_from_slice(g.value(v).data());
    }
    Ok(out)
}

/// `(2/β)·mean softplus(β·(log P_θ(a|q) − log P_ref(a|q)))`.
pub fn npo_term<M: LanguageModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    ex: &[Example],
    ref_logp: &[f64],
    beta: f64,
) -> Result<Var> {
    if ex.is_empty() {
        return Err(UnlearnError::Empty("forget QA"));
    }
    let lp = seq_logp(g, model, params, ex)?;
    let scaled = g.scale(lp, beta);
    let shifted = g.add_const(
        scaled,
        &Tensor::from_vec(ref_logp.iter().map(|r| -beta * r).collect()),
    );
    let sp = g.softplus(shifted);
    let s = g.sum(sp);
    Ok(g.scale(s, 2.0 / (beta * ex.len() as f64)))
}

pub fn npo_loss<M: LanguageModel + ?Sized>(
    model: &M,
    ex: &[Example],
    ref_logp: &[f64],
    beta: f64,
) -> Result<f64> {
    scalar(model.params(), |g, pv| {
        npo_term(g, model, pv, ex, ref_logp, beta)
    })
}

fn shuffled_batches(n: usize, batch: usize, seed: u64, tag: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed, &[tag, epoch as u64]));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Negative preference optimization against a frozen reference model.
pub fn run_npo<M: LanguageModel + ?Sized, R: LanguageModel + ?Sized>(
    model: &mut M,
    forget_qa: &[Example],
    reference: &R,
    config: &MethodConfig,
) -> Result<UnlearnLog> {
    config.validate()?;
    if forget_qa.is_empty() {
        return Err(UnlearnError::Empty("forget QA"));
    }
    let ref_lp = sequence_logprobs(reference, forget_qa)?;
    let mut opt = Adam::new(model.params(), config.adam());
    let mut log = UnlearnLog::default();
    for epoch in 0..config.epochs {
        let (mut sum, mut n) = (0.0, 0);
        for idx in shuffled_batches(forget_qa.len(), config.batch_size, config.seed, 5, epoch) {
            let ex: Vec<Example> = idx.iter().map(|&i| forget_qa[i].clone()).collect();
            let r: Vec<f64> = idx.iter().map(|&i| ref_lp[i]).collect();
            let v = step(model, &mut opt, epoch, |g, m, pv| {
                Ok(vec![npo_term(g, m, pv, &ex, &r, config.npo_beta)?])
            })?;
            sum += v[0];
            n += 1;
        }
        let sums = LossBreakdown {
            unlearn_term: sum,
            retain_term: 0.0,
            total: sum,
        };
        log.epochs
            .push(epoch_record(epoch, sums, n, (None, vec![])));
    }
    Ok(log)
}

/// Fraction of examples whose every target token is the argmax.
pub fn answer_accuracy<M: LanguageModel + ?Sized>(model: &M, ex: &[Example]) -> Result<f64> {
    if ex.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for chunk in ex.chunks(64) {
        let seqs: Vec<Vec<TokenId>> = chunk.iter().map(|e| e.seq.clone()).collect();
        let mut rows = Vec::new();
        for (s, e) in chunk.iter().enumerate() {
            rows.extend(e.targets.clone().map(|t| (s, t - 1)));
        }
        let lp = eval_logprobs(model, &seqs, &rows)?;
        let mut r = 0;
        for e in chunk {
            let mut ok = true;
            for t in e.targets.clone() {
                ok &= metrics::argmax(lp.row(r)) == Some(e.seq[t]);
                r += 1;
            }
            hits += ok as usize;
        }
    }
    Ok(hits as f64 / ex.len() as f64)
}

/// Gradient ascent on forget answers. Stops once retain answer accuracy
/// falls below the configured floor.
pub fn run_gradient_ascent<M: LanguageModel + ?Sized>(
    model: &mut M,
    forget_qa: &[Example],
    retain_qa: &[Example],
    config: &MethodConfig,
) -> Result<UnlearnLog> {
    config.validate()?;
    if forget_qa.is_empty() {
        return Err(UnlearnError::Empty("forget QA"));
    }
    let mut opt = Adam::new(model.params(), config.adam());
    let mut log = UnlearnLog::default();
    for epoch in 0..config.epochs {
        let (mut sum, mut n) = (0.0, 0);
        for idx in shuffled_batches(forget_qa.len(), config.batch_size, config.seed, 6, epoch) {
            let ex: Vec<Example> = idx.iter().map(|&i| forget_qa[i].clone()).collect();
            let v = step(model, &mut opt, epoch, |g, m, pv| {
                let ce = crate::lm::cross_entropy(g, m, pv, &ex)?;
                Ok(vec![g_neg(g, ce)])
            })?;
            sum += v[0];
            n += 1;
        }
        let retain_acc = answer_accuracy(model, retain_qa)?;
        let sums = LossBreakdown {
            unlearn_term: sum,
            retain_term: 0.0,
            total: sum,
        };
        log.epochs
            .push(epoch_record(epoch, sums, n, (None, vec![])));
        log::info!("epoch {epoch}: retain answer accuracy {retain_acc:.3}");
        if !retain_qa.is_empty() && retain_acc < config.retain_floor {
            log::warn!(
                "retain accuracy {retain_acc:.3} below floor {}; stopping",
                config.retain_floor
            );
            log.stopped_early = true;
            break;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{TabularModel, TransformerConfig, TransformerModel};
    use crate::probes::gen_training_mcqs;
    use crate::worldgen::{generate_world, WorldConfig};

    fn world() -> World {
        generate_world(&WorldConfig::default(), 2).unwrap()
    }

    /// `Σ p ln(p / q)` by direct summation.
    fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        p.iter()
            .zip(q)
            .map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 })
            .sum()
    }

    #[test]
    fn flat_target_examples() {
        assert_eq!(flat_target(5).unwrap(), vec![0.2; 5]);
        assert_eq!(flat_target(2).unwrap(), vec![0.5; 2]);
        assert!(matches!(flat_target(1), Err(UnlearnError::ChoiceCount(1))));
    }

    #[test]
    fn kl_sum_matches_oracle() {
        let p = [0.7, 0.3];
        let mut g = Graph::new();
        let lp =
            g.constant(Tensor::new(vec![1, 2], p.iter().map(|x: &f64| x.ln()).collect()).unwrap());
        let flat = kl_sum(&mut g, lp, &Tensor::full(&[1, 2], -(2f64).ln()));
        let oracle = kl_oracle(&p, &[0.5, 0.5]);
        assert!((g.value(flat).item() - oracle).abs() < 1e-12);
        assert!((oracle - 0.0823).abs() < 1e-4);

        let q = [0.5, 0.5];
        let mut g = Graph::new();
        let lp =
            g.constant(Tensor::new(vec![1, 2], q.iter().map(|x: &f64| x.ln()).collect()).unwrap());
        let r = kl_sum(&mut g, lp, &log_floor(&[vec![0.7, 0.3]]));
        let oracle = kl_oracle(&q, &[0.7, 0.3]);
        assert!((g.value(r).item() - oracle).abs() < 1e-12);
        assert!((oracle - 0.0872).abs() < 1e-4);
    }

    #[test]
    fn losses_vanish_at_uniform_and_at_original() {
        let w = world();
        let m = TabularModel::new(&w).unwrap();
        let items = gen_training_mcqs(&w, w.forget_ids[0], 6, 5, 1).unwrap();
        assert!(df_mcq_loss(&m, &items).unwrap().abs() < 1e-12);
        let retain = gen_training_mcqs(&w, w.background_ids()[0], 6, 5, 1).unwrap();
        assert!(retain_loss(&m, &m, &retain).unwrap().abs() < 1e-12);
        let twice: Vec<McqItem> = items.iter().chain(&items).cloned().collect();
        let one = df_mcq_loss(&m, &items[..1]).unwrap();
        assert!(
            (df_mcq_loss(&m, &[items[0].clone(), items[0].clone()]).unwrap() - 2.0 * one).abs()
                < 1e-12
        );
        assert_eq!(twice.len(), 12);
    }

    fn trained_tabular(w: &World) -> TabularModel {
        let mut m = TabularModel::new(w).unwrap();
        let c = crate::worldgen::render_corpus(w, 1, 0).unwrap();
        let cfg = crate::lm::TrainConfig {
            epochs: 30,
            batch_size: 64,
            adam: AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            ..Default::default()
        };
        crate::lm::train_base(&mut m, &c, &cfg).unwrap();
        m
    }

    #[test]
    fn step_rejects_unequal_batches_and_reports_sum() {
        let w = world();
        let mut m = trained_tabular(&w);
        let orig = m.clone();
        let f = gen_training_mcqs(&w, w.forget_ids[0], 4, 5, 1).unwrap();
        let r = gen_training_mcqs(&w, w.background_ids()[0], 4, 5, 1).unwrap();
        let mut opt = Adam::new(m.params(), AdamConfig::default());
        assert!(matches!(
            df_mcq_step(&mut m, &orig, &mut opt, &f, &r[..3]),
            Err(UnlearnError::UnequalBatches {
                forget: 4,
                retain: 3
            })
        ));
        let b = df_mcq_step(&mut m, &orig, &mut opt, &f, &r).unwrap();
        assert!((b.total - b.unlearn_term - b.retain_term).abs() < 1e-12);
        assert!(b.unlearn_term > 0.0 && b.retain_term.abs() < 1e-12);
        // Retain targets come from the frozen snapshot, so any move shows.
        assert!(retain_loss(&m, &orig, &r).unwrap() > 0.0);
    }

    #[test]
    fn tabular_df_mcq_reaches_flat_fixed_point() {
        let w = world();
        let mut m = trained_tabular(&w);
        let orig = m.clone();
        let forget: Vec<McqItem> = w
            .forget_ids
            .iter()
            .flat_map(|&p| gen_training_mcqs(&w, p, 24, 5, 3).unwrap())
            .collect();
        let retain: Vec<McqItem> = w
            .background_ids()
            .iter()
            .flat_map(|&p| gen_training_mcqs(&w, p, 12, 5, 3).unwrap())
            .collect();
        let before = mean_choice_entropy(&m, &forget).unwrap();
        let cfg = MethodConfig {
            epochs: 40,
            lr: 0.05,
            early_stop_entropy: 1.0,
            ..MethodConfig::default_for(Method::DfMcq)
        };
        run_df_mcq(&mut m, &forget, &retain, &cfg, &Monitor::default()).unwrap();
        let after = mean_choice_entropy(&m, &forget).unwrap();
        assert!(after > before);
        assert!(after >= 0.99 * 5f64.ln(), "{after}");
        assert!(retain_loss(&m, &orig, &retain).unwrap() / (retain.len() as f64) < 0.01);
    }

    #[test]
    fn obfuscation_substitutes_target_name() {
        let w = world();
        let m = trained_tabular(&w);
        let target = w.forget_ids[0];
        let donors = w.background_ids();
        let set = make_obfuscation_samples(&w, target, &donors[..2], 6, 0, &m).unwrap();
        let v = w.vocab();
        let tname = w.person(target).unwrap().full_name();
        for (i, s) in set.samples.sequences.iter().enumerate() {
            let text = v.detokenize(s).unwrap();
            assert!(text.contains(&tname), "{text}");
            assert!(donors[..2]
                .iter()
                .all(|d| !text.contains(&w.person(*d).unwrap().full_name())));
            for (p, dist) in &set.targets[i] {
                assert!(*p < s.len());
                assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let decl = set
            .samples
            .kinds
            .iter()
            .position(|k| *k == SeqKind::Declarative)
            .unwrap();
        let text = v.detokenize(&set.samples.sequences[decl]).unwrap();
        assert!(text.starts_with(&format!("<bos> {tname} ")));
        // Prefix property.
        let small = make_obfuscation_samples(&w, target, &donors[..2], 3, 0, &m).unwrap();
        assert_eq!(small.samples.sequences[..], set.samples.sequences[..3]);
        assert!(make_obfuscation_samples(&w, target, &[target], 1, 0, &m).is_err());
        assert!(matches!(
            make_obfuscation_samples(&w, target, &donors[..1], 10_000, 0, &m),
            Err(UnlearnError::NotEnoughDonorMaterial { .. })
        ));
        let empty = make_obfuscation_samples(&w, target, &donors[..1], 0, 0, &m).unwrap();
        let mut m2 = m.clone();
        run_obfuscation(
            &mut m2,
            &empty,
            &MethodConfig::default_for(Method::WhpPlusStyle),
        )
        .unwrap();
        assert_eq!(m2.params(), m.params());
    }

    #[test]
    fn npo_starts_at_two_over_beta_ln2() {
        let w = world();
        let m = trained_tabular(&w);
        let ex = qa_examples(&w, &w.forget_ids).unwrap();
        let r = sequence_logprobs(&m, &ex).unwrap();
        for beta in [0.1, 1.0] {
            let l = npo_loss(&m, &ex, &r, beta).unwrap();
            assert!((l - 2.0 / beta * 2f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn npo_and_ascent_lower_forget_likelihood() {
        let w = world();
        let base = trained_tabular(&w);
        let ex = qa_examples(&w, &w.forget_ids).unwrap();
        let before: f64 = sequence_logprobs(&base, &ex).unwrap().iter().sum();
        let mut npo = base.clone();
        let cfg = MethodConfig {
            epochs: 3,
            lr: 0.05,
            ..MethodConfig::default_for(Method::Npo)
        };
        run_npo(&mut npo, &ex, &base, &cfg).unwrap();
        assert!(sequence_logprobs(&npo, &ex).unwrap().iter().sum::<f64>() < before);

        let mut ga = base.clone();
        let retain = qa_examples(&w, &w.retain_ids).unwrap();
        let cfg = MethodConfig {
            epochs: 2,
            lr: 0.05,
            retain_floor: 0.0,
            ..MethodConfig::default_for(Method::GradAscent)
        };
        run_gradient_ascent(&mut ga, &ex, &retain, &cfg).unwrap();
        assert!(sequence_logprobs(&ga, &ex).unwrap().iter().sum::<f64>() < before);
        let mut zero = base.clone();
        run_gradient_ascent(&mut zero, &ex, &retain, &MethodConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(zero.params(), base.params());
    }

    #[test]
    fn npo_gradient_aligns_with_ascent_at_large_beta() {
        let w = world();
        let v = w.vocab();
        let mut tm = TransformerModel::new(
            v,
            TransformerConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                context: 48,
                seed: 1,
            },
        )
        .unwrap();
        // Move off the uniform initialization so the two gradients are
        // non-trivial.
        for i in 0..tm.params().n_scalars() {
            let x = tm.params().flat_get(i);
            tm.params_mut()
                .flat_set(i, x + ((i * 31 % 17) as f64 - 8.0) * 0.01);
        }
        let ex = qa_examples(&w, &w.forget_ids[..1]).unwrap();
        let ref_lp: Vec<f64> = sequence_logprobs(&tm, &ex)
            .unwrap()
            .iter()
            .map(|x| x - 5.0)
            .collect();
        let grad = |f: &dyn Fn(&mut Graph, &[Var]) -> Var| {
            let mut g = Graph::new();
            let pv = tm.params().bind(&mut g);
            let l = f(&mut g, &pv);
            let gr = g.backward(l);
            tm.params().collect_grads(&g, &gr).concat()
        };
        let npo = grad(&|g, pv| npo_term(g, &tm, pv, &ex, &ref_lp, 50.0).unwrap());
        let ga = grad(&|g, pv| {
            let s = seq_logp(g, &tm, pv, &ex).unwrap();
            g.sum(s)
        });
        let dot: f64 = npo.iter().zip(&ga).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = dot / (norm(&npo) * norm(&ga));
        assert!(cos > 0.999, "cosine {cos}");
    }
}
