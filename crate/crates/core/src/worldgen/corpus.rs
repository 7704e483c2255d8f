use super::{render, World, WorldError};
use crate::seeds;
use crate::vocab::{TokenId, Vocab, ANSWER, COLON, NO, REFUSAL_PHRASE, YES};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SeqKind {
    Declarative,
    Qa,
    RefusalExemplar,
}

impl fmt::Display for SeqKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeqKind::Declarative => "declarative",
            SeqKind::Qa => "qa",
            SeqKind::RefusalExemplar => "refusal_exemplar",
        })
    }
}

impl FromStr for SeqKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "declarative" => Ok(SeqKind::Declarative),
            "qa" => Ok(SeqKind::Qa),
            "refusal_exemplar" => Ok(SeqKind::RefusalExemplar),
            other => Err(format!("unknown sequence kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainingCorpus {
    pub sequences: Vec<Vec<TokenId>>,
    pub kinds: Vec<SeqKind>,
}

impl TrainingCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn push(&mut self, seq: Vec<TokenId>, kind: SeqKind) {
        self.sequences.push(seq);
        self.kinds.push(kind);
    }

    pub fn extend(&mut self, other: TrainingCorpus) {
        self.sequences.extend(other.sequences);
        self.kinds.extend(other.kinds);
    }

    /// Target positions that carry loss: the answer span (plus `<eos>`) for
    /// QA-style sequences, every token after `<bos>` for declarative ones.
    pub fn loss_positions(&self, i: usize, vocab: &Vocab) -> Range<usize> {
        let seq = &self.sequences[i];
        match self.kinds[i] {
            SeqKind::Declarative => 1..seq.len(),
            SeqKind::Qa | SeqKind::RefusalExemplar => {
                answer_start(seq, vocab).unwrap_or(1)..seq.len()
            }
        }
    }
}

/// Index of the first answer token: one past the last `Answer :` marker.
pub fn answer_start(seq: &[TokenId], vocab: &Vocab) -> Option<usize> {
    let (a, c) = (vocab.id(ANSWER).ok()?, vocab.id(COLON).ok()?);
    (1..seq.len())
        .rev()
        .find(|&i| seq[i - 1] == a && seq[i] == c)
        .map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderOptions {
    /// Declarative sentences and open QA pairs per person fact.
    pub reps: usize,
    pub n_choices: usize,
    pub mcq_per_rep: usize,
    /// Negative Yes-No exemplars per rep (each rep also has one positive).
    pub yes_no_negatives: usize,
    pub entity_reps: usize,
    pub unknown_reps: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            reps: 2,
            n_choices: 5,
            mcq_per_rep: 2,
            yes_no_negatives: 1,
            entity_reps: 1,
            unknown_reps: 1,
        }
    }
}

pub fn render_corpus(world: &World, reps: usize, seed: u64) -> Result<TrainingCorpus, WorldError> {
    render_corpus_with(
        world,
        &RenderOptions {
            reps,
            ..RenderOptions::default()
        },
        seed,
    )
}

const TAG_MCQ: u64 = 1;
const TAG_YN: u64 = 2;
const TAG_ENTITY: u64 = 3;
const TAG_UNKNOWN: u64 = 4;

/// Renders the world into a corpus. Every random choice is drawn from a
/// stream keyed by (fact, rep), so a corpus rendered with fewer reps is a
/// subset of one rendered with more.
pub fn render_corpus_with(
    world: &World,
    opts: &RenderOptions,
    seed: u64,
) -> Result<TrainingCorpus, WorldError> {
    if opts.reps == 0 {
        return Err(WorldError::InvalidConfig("reps must be >= 1".into()));
    }
    if opts.n_choices < 2 || opts.n_choices > crate::vocab::CHOICE_LETTERS.len() {
        return Err(WorldError::InvalidConfig(format!(
            "n_choices = {} out of range",
            opts.n_choices
        )));
    }
    let vocab = world.vocab();
    let mut out = TrainingCorpus::default();
    let emit = |text: String, kind: SeqKind, out: &mut TrainingCorpus| -> Result<(), WorldError> {
        out.push(vocab.tokenize(&text)?, kind);
        Ok(())
    };
    let c = opts.n_choices;

    for (fi, fact) in world.facts.iter().enumerate() {
        let rel = world.relation(&fact.relation)?;
        let name = world.person(fact.subject)?.full_name();
        for rep in 0..opts.reps {
            emit(
                render::declarative(rel, rep, &name, &fact.object),
                SeqKind::Declarative,
                &mut out,
            )?;
            let stem = render::question_stem(rel, rep, &name);
            emit(
                render::with_answer(&render::open_prompt(&stem), &fact.object),
                SeqKind::Qa,
                &mut out,
            )?;
            let mut rng = seeds::rng(seed, &[TAG_MCQ, fi as u64, rep as u64]);
            for k in 0..opts.mcq_per_rep {
                let stem = render::question_stem(rel, rep + k + 1, &name);
                let (choices, gold) = mcq_choices(&rel.object_vocab, &fact.object, c, &mut rng);
                emit(
                    render::with_answer(
                        &render::mcq_prompt(&stem, &choices),
                        crate::vocab::CHOICE_LETTERS[gold],
                    ),
                    SeqKind::Qa,
                    &mut out,
                )?;
            }
            let mut rng = seeds::rng(seed, &[TAG_YN, fi as u64, rep as u64]);
            let yes = render::yes_no_prompt(&render::yes_no_stem(&rel.noun, &fact.object, &name));
            emit(render::with_answer(&yes, YES), SeqKind::Qa, &mut out)?;
            let wrong: Vec<&String> = rel
                .object_vocab
                .iter()
                .filter(|o| **o != fact.object)
                .collect();
            for cand in wrong.choose_multiple(&mut rng, opts.yes_no_negatives) {
                let p = render::yes_no_prompt(&render::yes_no_stem(&rel.noun, cand, &name));
                emit(render::with_answer(&p, NO), SeqKind::Qa, &mut out)?;
            }
        }
    }

    for (ri, rel) in world.relations.iter().enumerate() {
        for (oi, entity) in rel.object_vocab.iter().enumerate() {
            let value = &rel.attribute.values[entity];
            for rep in 0..opts.entity_reps {
                let mut rng = seeds::rng(seed, &[TAG_ENTITY, ri as u64, oi as u64, rep as u64]);
                emit(
                    render::attribute_declarative(rel, entity, value),
                    SeqKind::Declarative,
                    &mut out,
                )?;
                let stem = render::attribute_stem(rel, entity);
                emit(
                    render::with_answer(&render::open_prompt(&stem), value),
                    SeqKind::Qa,
                    &mut out,
                )?;
                for _ in 0..opts.mcq_per_rep {
                    let (choices, gold) =
                        mcq_choices(&rel.attribute.value_vocab, value, c, &mut rng);
                    emit(
                        render::with_answer(
                            &render::mcq_prompt(&stem, &choices),
                            crate::vocab::CHOICE_LETTERS[gold],
                        ),
                        SeqKind::Qa,
                        &mut out,
                    )?;
                }
                let yes =
                    render::yes_no_prompt(&render::yes_no_stem(&rel.attribute.noun, value, entity));
                emit(render::with_answer(&yes, YES), SeqKind::Qa, &mut out)?;
                let wrong: Vec<&String> = rel
                    .attribute
                    .value_vocab
                    .iter()
                    .filter(|v| *v != value)
                    .collect();
                for cand in wrong.choose_multiple(&mut rng, opts.yes_no_negatives) {
                    let p = render::yes_no_prompt(&render::yes_no_stem(
                        &rel.attribute.noun,
                        cand,
                        entity,
                    ));
                    emit(render::with_answer(&p, NO), SeqKind::Qa, &mut out)?;
                }
            }
        }
    }

    // Unknown persons: refuse open questions, spread MCQ and Yes-No answers
    // evenly so the model learns a calibrated "no knowledge" mode.
    for (ni, name) in world.out_of_world_names.iter().enumerate() {
        let name = name.join(" ");
        for (ri, rel) in world.relations.iter().enumerate() {
            for rep in 0..opts.unknown_reps {
                let mut rng = seeds::rng(seed, &[TAG_UNKNOWN, ni as u64, ri as u64, rep as u64]);
                let stem = render::question_stem(rel, rep, &name);
                emit(
                    render::with_answer(&render::open_prompt(&stem), REFUSAL_PHRASE),
                    SeqKind::RefusalExemplar,
                    &mut out,
                )?;
                let stem = render::question_stem(rel, rep + 1, &name);
                let choices: Vec<&String> = rel.object_vocab.choose_multiple(&mut rng, c).collect();
                let prompt = render::mcq_prompt(&stem, &choices);
                for letter in &crate::vocab::CHOICE_LETTERS[..c] {
                    emit(render::with_answer(&prompt, letter), SeqKind::Qa, &mut out)?;
                }
                let cand = rel.object_vocab.choose(&mut rng).expect("non-empty vocab");
                let p = render::yes_no_prompt(&render::yes_no_stem(&rel.noun, cand, &name));
                emit(render::with_answer(&p, YES), SeqKind::Qa, &mut out)?;
                emit(render::with_answer(&p, NO), SeqKind::Qa, &mut out)?;
            }
        }
    }
    Ok(out)
}

/// Reference plus `c - 1` distinct distractors in random order; returns the
/// choices and the reference position.
pub(crate) fn mcq_choices<R: Rng>(
    pool: &[String],
    reference: &str,
    c: usize,
    rng: &mut R,
) -> (Vec<String>, usize) {
    let others: Vec<&String> = pool.iter().filter(|o| *o != reference).collect();
    let mut choices: Vec<String> = others
        .choose_multiple(rng, c - 1)
        .map(|s| (*s).clone())
        .collect();
    choices.push(reference.to_string());
    choices.shuffle(rng);
    let gold = choices
        .iter()
        .position(|x| x == reference)
        .expect("reference inserted");
    (choices, gold)
}
