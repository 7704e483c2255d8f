//! Probing questions and the MCQs used as unlearning training material.
//!
//! Every probe is labeled with a split saying where its candidate answer
//! comes from: the person's true object (`reference`), material the
//! unlearning method trained on (`in_training`), or neither
//! (`out_of_training`). Retain persons and co-mentioned entities get their own
//! splits.

use crate::seeds;
use crate::unlearn::{McqItem, McqOrigin};
use crate::vocab::{TokenId, Vocab, VocabError, CHOICE_LETTERS, NO, YES};
use crate::worldgen::{render, PersonId, World, WorldError};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("{0} is not a forget person")]
    NotForgetPerson(PersonId),
    #[error("candidate {candidate:?} is not in the vocabulary of relation {relation}")]
    CandidateNotInVocab { relation: String, candidate: String },
    #[error("need {needed} distractors for relation {relation}, only {available} available")]
    InsufficientDistractors {
        relation: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid choice count {0}")]
    ChoiceCount(usize),
    #[error("probe file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    OpenEnded,
    YesNo,
    Mcq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Reference,
    InTraining,
    OutOfTraining,
    Retain,
    HardRetain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceSource {
    Reference,
    InTraining,
    OutOfTraining,
}

macro_rules! snake_display {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),* })
            }
        }
        impl std::str::FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok(Self::$v),)*
                    other => Err(format!("unknown {} {other:?}", stringify!($t))),
                }
            }
        }
    };
}

snake_display!(ProbeKind { OpenEnded => "open_ended", YesNo => "yes_no", Mcq => "mcq" });
snake_display!(Split {
    Reference => "reference",
    InTraining => "in_training",
    OutOfTraining => "out_of_training",
    Retain => "retain",
    HardRetain => "hard_retain",
});

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Reference,
        Split::InTraining,
        Split::OutOfTraining,
        Split::Retain,
        Split::HardRetain,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeQuestion {
    pub kind: ProbeKind,
    pub split: Split,
    pub prompt: Vec<TokenId>,
    /// Reference answer text, `Yes`/`No`, or the reference choice letter.
    pub gold: String,
    pub target: PersonId,
    pub relation: String,
    /// The answer a Yes-No question asks about.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choice_meta: Vec<ChoiceSource>,
}

impl ProbeQuestion {
    /// Position of the gold letter among the choices (MCQ only).
    pub fn gold_index(&self) -> Option<usize> {
        (self.kind == ProbeKind::Mcq)
            .then(|| CHOICE_LETTERS.iter().position(|l| *l == self.gold))
            .flatten()
    }

    /// Position of the in-training choice, if there is one.
    pub fn obf_index(&self) -> Option<usize> {
        self.choice_meta
            .iter()
            .position(|m| *m == ChoiceSource::InTraining)
    }
}

/// Objects a method trained on for one target person, keyed by relation.
pub type InTrainingAnswers = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeConfig {
    pub n_choices: usize,
    pub mcq_per_relation: usize,
    /// Negative Yes-No candidates per relation for retain persons.
    pub retain_yes_no_negatives: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_choices: 5,
            mcq_per_relation: 4,
            retain_yes_no_negatives: 2,
            seed: 0,
        }
    }
}

fn person_split(world: &World, person: PersonId) -> Result<Split, ProbeError> {
    world.person(person)?;
    Ok(if world.forget_ids.contains(&person) {
        Split::Reference
    } else {
        Split::Retain
    })
}

/// One open question per fact, using the first question form.
pub fn gen_open_ended(world: &World, person: PersonId) -> Result<Vec<ProbeQuestion>, ProbeError> {
    let split = person_split(world, person)?;
    let vocab = world.vocab();
    let name = world.person(person)?.full_name();
    world
        .facts_of(person)?
        .into_iter()
        .map(|f| {
            let rel = world.relation(&f.relation)?;
            Ok(ProbeQuestion {
                kind: ProbeKind::OpenEnded,
                split,
                prompt: vocab
                    .tokenize(&render::open_prompt(&render::question_stem(rel, 0, &name)))?,
                gold: f.object,
                target: person,
                relation: f.relation,
                candidate: None,
                choices: vec![],
                choice_meta: vec![],
            })
        })
        .collect()
}

/// Yes-No questions for every candidate in each relation's vocabulary. For a
/// forget person the true object is `reference` (gold Yes), objects in
/// `in_training` are `in_training` and the rest `out_of_training` (gold No).
/// Retain persons get the true object plus `retain_negatives` sampled wrong
/// ones, all labeled `retain`.
pub fn gen_yes_no(
    world: &World,
    person: PersonId,
    in_training: &InTrainingAnswers,
    retain_negatives: usize,
    seed: u64,
) -> Result<Vec<ProbeQuestion>, ProbeError> {
    let split = person_split(world, person)?;
    let vocab = world.vocab();
    let name = world.person(person)?.full_name();
    let mut out = Vec::new();
    for f in world.facts_of(person)? {
        let rel = world.relation(&f.relation)?;
        let used = in_training.get(&f.relation);
        for c in used.into_iter().flatten() {
            if !rel.object_vocab.contains(c) {
                return Err(ProbeError::CandidateNotInVocab {
                    relation: f.relation.clone(),
                    candidate: c.clone(),
                });
            }
        }
        let mut cands: Vec<(String, Split)> = vec![(f.object.clone(), split)];
        let wrong: Vec<&String> = rel
            .object_vocab
            .iter()
            .filter(|o| **o != f.object)
            .collect();
        if split == Split::Retain {
            let ri = world.relation_index(&f.relation)? as u64;
            let mut rng = seeds::rng(seed, &[TAG_YN, person.0 as u64, ri]);
            cands.extend(
                wrong
                    .choose_multiple(&mut rng, retain_negatives)
                    .map(|o| ((*o).clone(), split)),
            );
        } else {
            for o in wrong {
                let s = if used.is_some_and(|u| u.contains(o)) {
                    Split::InTraining
                } else {
                    Split::OutOfTraining
                };
                cands.push((o.clone(), s));
            }
        }
        for (cand, s) in cands {
            let stem = render::yes_no_stem(&rel.noun, &cand, &name);
            out.push(ProbeQuestion {
                kind: ProbeKind::YesNo,
                split: s,
                prompt: vocab.tokenize(&render::yes_no_prompt(&stem))?,
                gold: if cand == f.object { YES } else { NO }.to_string(),
                target: person,
                relation: f.relation.clone(),
                candidate: Some(cand),
                choices: vec![],
                choice_meta: vec![],
            });
        }
    }
    Ok(out)
}

const TAG_YN: u64 = 11;
const TAG_MCQ: u64 = 12;
const TAG_TRAIN: u64 = 13;
const TAG_HARD: u64 = 14;

/// Arranges `reference` and `others` into `c` choices with the reference at
/// `gold_pos`, the others shuffled around it.
fn place<R: Rng>(
    reference: (String, ChoiceSource),
    mut others: Vec<(String, ChoiceSource)>,
    gold_pos: usize,
    rng: &mut R,
) -> Vec<(String, ChoiceSource)> {
    others.shuffle(rng);
    others.insert(gold_pos, reference);
    others
}

fn mcq_question(
    vocab: &Vocab,
    stem: &str,
    choices: Vec<(String, ChoiceSource)>,
    split: Split,
    target: PersonId,
    relation: &str,
) -> Result<ProbeQuestion, ProbeError> {
    let texts: Vec<String> = choices.iter().map(|(t, _)| t.clone()).collect();
    let gold = choices
        .iter()
        .position(|(_, m)| *m == ChoiceSource::Reference)
        .expect("reference placed");
    Ok(ProbeQuestion {
        kind: ProbeKind::Mcq,
        split,
        prompt: vocab.tokenize(&render::mcq_prompt(stem, &texts))?,
        gold: CHOICE_LETTERS[gold].to_string(),
        target,
        relation: relation.to_string(),
        candidate: None,
        choices: texts,
        choice_meta: choices.into_iter().map(|(_, m)| m).collect(),
    })
}

fn check_choices(c: usize, min: usize) -> Result<(), ProbeError> {
    if c < min || c > CHOICE_LETTERS.len() {
        return Err(ProbeError::ChoiceCount(c));
    }
    Ok(())
}

/// Gold letter positions for a person's questions: a rotation with a
/// per-person offset, so every letter is the reference equally often.
fn gold_positions(
    seed: u64,
    tag: u64,
    person: PersonId,
    n: usize,
    c: usize,
) -> impl Iterator<Item = usize> {
    let offset = (seeds::derive(seed, &[tag, person.0 as u64]) % c as u64) as usize;
    (0..n).map(move |k| (k + offset) % c)
}

/// `per_relation` MCQs per fact. Each holds the reference, one in-training
/// object when the relation has any, and out-of-training objects for the
/// rest.
pub fn gen_mcq(
    world: &World,
    person: PersonId,
    in_training: &InTrainingAnswers,
    c: usize,
    per_relation: usize,
    seed: u64,
) -> Result<Vec<ProbeQuestion>, ProbeError> {
    check_choices(c, 3)?;
    let split = person_split(world, person)?;
    let vocab = world.vocab();
    let name = world.person(person)?.full_name();
    let facts = world.facts_of(person)?;
    let mut pos = gold_positions(seed, TAG_MCQ, person, facts.len() * per_relation, c);
    let mut out = Vec::new();
    for f in &facts {
        let rel = world.relation(&f.relation)?;
        let used: Vec<&String> = in_training
            .get(&f.relation)
            .into_iter()
            .flatten()
            .filter(|o| **o != f.object)
            .collect();
        let fresh: Vec<&String> = rel
            .object_vocab
            .iter()
            .filter(|o| **o != f.object && !used.contains(o))
            .collect();
        let n_fresh = if used.is_empty() { c - 1 } else { c - 2 };
        if fresh.len() < n_fresh {
            return Err(ProbeError::InsufficientDistractors {
                relation: f.relation.clone(),
                needed: n_fresh,
                available: fresh.len(),
            });
        }
        let ri = world.relation_index(&f.relation)? as u64;
        for k in 0..per_relation {
            let mut rng = seeds::rng(seed, &[TAG_MCQ, person.0 as u64, ri, k as u64]);
            let mut others: Vec<(String, ChoiceSource)> = fresh
                .choose_multiple(&mut rng, n_fresh)
                .map(|o| ((*o).clone(), ChoiceSource::OutOfTraining))
                .collect();
            if !used.is_empty() {
                others.push((used[k % used.len()].clone(), ChoiceSource::InTraining));
            }
            let choices = place(
                (f.object.clone(), ChoiceSource::Reference),
                others,
                pos.next().expect("one position per question"),
                &mut rng,
            );
            let stem = render::question_stem(rel, k, &name);
            out.push(mcq_question(
                &vocab,
                &stem,
                choices,
                split,
                person,
                &f.relation,
            )?);
        }
    }
    Ok(out)
}

/// Unlearning MCQs about `person`: relations in round-robin order,
/// distractors drawn uniformly from the relation vocabulary.
pub fn gen_training_mcqs(
    world: &World,
    person: PersonId,
    n_questions: usize,
    c: usize,
    seed: u64,
) -> Result<Vec<McqItem>, ProbeError> {
    gen_training_mcqs_with(world, person, n_questions, c, seed, &mut |s: &str| {
        s.to_string()
    })
}

/// As [`gen_training_mcqs`], passing every question stem through `rewrite`.
pub fn gen_training_mcqs_with(
    world: &World,
    person: PersonId,
    n_questions: usize,
    c: usize,
    seed: u64,
    rewrite: &mut dyn FnMut(&str) -> String,
) -> Result<Vec<McqItem>, ProbeError> {
    check_choices(c, 2)?;
    world.person(person)?;
    let vocab = world.vocab();
    let name = world.person(person)?.full_name();
    let facts = world.facts_of(person)?;
    let origin = if world.forget_ids.contains(&person) {
        McqOrigin::ForgetTrain
    } else {
        McqOrigin::RetainTrain
    };
    let mut out = Vec::with_capacity(n_questions);
    for q in 0..n_questions {
        let f = &facts[q % facts.len()];
        let rel = world.relation(&f.relation)?;
        let mut rng = seeds::rng(seed, &[TAG_TRAIN, person.0 as u64, q as u64]);
        let (choices, _) = crate::worldgen::mcq_choices(&rel.object_vocab, &f.object, c, &mut rng);
        let stem = rewrite(&render::question_stem(rel, q / facts.len(), &name));
        out.push(McqItem {
            question: vocab.tokenize(&render::mcq_prompt(&stem, &choices))?,
            choice_letters: vocab.letters(c),
            choice_texts: choices,
            origin,
            subject: Some(person),
            relation: Some(f.relation.clone()),
        });
    }
    Ok(out)
}

/// Relabels forget-person Yes-No probes against MCQ training material: a
/// wrong candidate that appears among the choices of a training MCQ on the
/// same person and relation becomes `in_training`, any other wrong candidate
/// `out_of_training`. Reference, retain and hard-retain labels are kept.
pub fn alternate_split(training_mcqs: &[McqItem], probes: &[ProbeQuestion]) -> Vec<ProbeQuestion> {
    let mut seen: BTreeSet<(PersonId, &str, &str)> = BTreeSet::new();
    for m in training_mcqs {
        if let (Some(p), Some(r)) = (m.subject, m.relation.as_deref()) {
            for t in &m.choice_texts {
                seen.insert((p, r, t));
            }
        }
    }
    probes
        .iter()
        .map(|q| {
            let mut q = q.clone();
            if q.kind == ProbeKind::YesNo
                && matches!(q.split, Split::InTraining | Split::OutOfTraining)
            {
                let cand = q.candidate.as_deref().unwrap_or("");
                q.split = if seen.contains(&(q.target, q.relation.as_str(), cand)) {
                    Split::InTraining
                } else {
                    Split::OutOfTraining
                };
            }
            q
        })
        .collect()
}

/// Questions about the entities that share passages with a forget person
/// (its objects' attributes), one open-ended and `per_relation` MCQs each.
/// No gold answer is any forget person's object.
pub fn gen_hard_retain(
    world: &World,
    person: PersonId,
    c: usize,
    per_relation: usize,
    seed: u64,
) -> Result<Vec<ProbeQuestion>, ProbeError> {
    check_choices(c, 2)?;
    if !world.forget_ids.contains(&person) {
        return Err(ProbeError::NotForgetPerson(person));
    }
    let vocab = world.vocab();
    let forbidden: BTreeSet<String> = world
        .forget_ids
        .iter()
        .map(|&p| world.facts_of(p))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .map(|f| f.object)
        .collect();
    let facts = world.facts_of(person)?;
    let mut pos = gold_positions(seed, TAG_HARD, person, facts.len() * per_relation, c);
    let mut out = Vec::new();
    for f in &facts {
        let rel = world.relation(&f.relation)?;
        let gold = rel.attribute.values[&f.object].clone();
        if forbidden.contains(&gold) {
            continue;
        }
        let stem = render::attribute_stem(rel, &f.object);
        out.push(ProbeQuestion {
            kind: ProbeKind::OpenEnded,
            split: Split::HardRetain,
            prompt: vocab.tokenize(&render::open_prompt(&stem))?,
            gold: gold.clone(),
            target: person,
            relation: f.relation.clone(),
            candidate: None,
            choices: vec![],
            choice_meta: vec![],
        });
        let pool: Vec<&String> = rel
            .attribute
            .value_vocab
            .iter()
            .filter(|v| **v != gold)
            .collect();
        if pool.len() < c - 1 {
            return Err(ProbeError::InsufficientDistractors {
                relation: f.relation.clone(),
                needed: c - 1,
                available: pool.len(),
            });
        }
        let ri = world.relation_index(&f.relation)? as u64;
        for k in 0..per_relation {
            let mut rng = seeds::rng(seed, &[TAG_HARD, person.0 as u64, ri, k as u64]);
            let others = pool
                .choose_multiple(&mut rng, c - 1)
                .map(|v| ((*v).clone(), ChoiceSource::OutOfTraining))
                .collect();
            let choices = place(
                (gold.clone(), ChoiceSource::Reference),
                others,
                pos.next().expect("position"),
                &mut rng,
            );
            out.push(mcq_question(
                &vocab,
                &stem,
                choices,
                Split::HardRetain,
                person,
                &f.relation,
            )?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProbeSuite {
    pub questions: Vec<ProbeQuestion>,
}

impl ProbeSuite {
    /// Forget persons get every probe family plus hard-retain questions;
    /// retain persons get open-ended, Yes-No and MCQ probes.
    pub fn build(
        world: &World,
        in_training: &BTreeMap<PersonId, InTrainingAnswers>,
        cfg: &ProbeConfig,
    ) -> Result<Self, ProbeError> {
        let empty = InTrainingAnswers::new();
        let mut questions = Vec::new();
        for &p in &world.forget_ids {
            let used = in_training.get(&p).unwrap_or(&empty);
            questions.extend(gen_open_ended(world, p)?);
            questions.extend(gen_yes_no(world, p, used, 0, cfg.seed)?);
            questions.extend(gen_mcq(
                world,
                p,
                used,
                cfg.n_choices,
                cfg.mcq_per_relation,
                cfg.seed,
            )?);
            questions.extend(gen_hard_retain(
                world,
                p,
                cfg.n_choices,
                cfg.mcq_per_relation,
                cfg.seed,
            )?);
        }
        for &p in &world.retain_ids {
            questions.extend(gen_open_ended(world, p)?);
            questions.extend(gen_yes_no(
                world,
                p,
                &empty,
                cfg.retain_yes_no_negatives,
                cfg.seed,
            )?);
            questions.extend(gen_mcq(
                world,
                p,
                &empty,
                cfg.n_choices,
                cfg.mcq_per_relation,
                cfg.seed,
            )?);
        }
        let suite = ProbeSuite { questions };
        for ((kind, split), n) in suite.counts() {
            log::info!("probe suite: {kind}/{split}: {n}");
        }
        Ok(suite)
    }

    pub fn counts(&self) -> BTreeMap<(ProbeKind, Split), usize> {
        let mut m = BTreeMap::new();
        for q in &self.questions {
            *m.entry((q.kind, q.split)).or_insert(0) += 1;
        }
        m
    }

    pub fn select(&self, kind: ProbeKind, split: Split) -> Vec<&ProbeQuestion> {
        self.questions
            .iter()
            .filter(|q| q.kind == kind && q.split == split)
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), ProbeError> {
        for q in &self.questions {
            serde_json::to_writer(&mut w, q).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, ProbeError> {
        let mut questions = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let q = serde_json::from_str(&line).map_err(|e| ProbeError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            questions.push(q);
        }
        Ok(ProbeSuite { questions })
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
