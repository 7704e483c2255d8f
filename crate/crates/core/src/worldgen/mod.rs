//! Deterministic synthetic persona worlds and their rendered training corpora.
//!
//! A [`World`] is a closed knowledge graph: every person has exactly one
//! object per relation, objects carry one attribute each (the co-mentioned
//! entities that hard-retain probes ask about), and a reserved list of
//! out-of-world names never receives facts.

mod corpus;
mod io;
pub mod parse;
mod pool;
pub mod render;

pub(crate) use corpus::mcq_choices;
pub use corpus::{
    answer_start, render_corpus, render_corpus_with, RenderOptions, SeqKind, TrainingCorpus,
};
pub use io::{read_corpus, read_world, write_corpus, write_world};

use crate::vocab::{self, Vocab};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("unknown person {0}")]
    UnknownPerson(PersonId),
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
    #[error("malformed world file at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Vocab(#[from] vocab::VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(transparent)]
pub struct PersonId(pub u32);

impl fmt::Display for PersonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{:02}", self.0)
    }
}

impl FromStr for PersonId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('p')
            .and_then(|n| n.parse().ok())
            .map(PersonId)
            .ok_or_else(|| format!("bad person id {s:?}"))
    }
}

/// Attribute carried by every object of a relation (e.g. a city's country).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribute {
    pub noun: String,
    pub surface_form: String,
    pub question_form: String,
    /// Attribute value for each object in the relation's `object_vocab`.
    pub values: BTreeMap<String, String>,
    /// Every admissible attribute value, including ones no sampled object uses.
    pub value_vocab: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub id: String,
    /// Noun phrase used in Yes-No stems ("Is X the {noun} of Y ?").
    pub noun: String,
    pub surface_forms: Vec<String>,
    pub question_forms: Vec<String>,
    pub object_vocab: Vec<String>,
    pub attribute: Attribute,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Person {
    pub id: PersonId,
    pub name: Vec<String>,
}

impl Person {
    pub fn full_name(&self) -> String {
        self.name.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FactTriplet {
    pub subject: PersonId,
    pub relation: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldConfig {
    pub n_persons: usize,
    pub n_relations: usize,
    pub forget_size: usize,
    pub retain_size: usize,
    pub n_out_of_world: usize,
    pub objects_per_relation: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_persons: 16,
            n_relations: 6,
            forget_size: 2,
            retain_size: 4,
            n_out_of_world: 4,
            objects_per_relation: 10,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidConfig(m));
        if self.n_persons < 4 {
            return bad(format!("n_persons = {} < 4", self.n_persons));
        }
        if self.n_relations < 3 || self.n_relations > pool::RELATIONS.len() {
            return bad(format!(
                "n_relations = {} outside 3..={}",
                self.n_relations,
                pool::RELATIONS.len()
            ));
        }
        if self.forget_size < 1 || self.forget_size >= self.n_persons {
            return bad(format!(
                "forget_size = {} must be in 1..n_persons ({})",
                self.forget_size, self.n_persons
            ));
        }
        if self.forget_size + self.retain_size >= self.n_persons {
            return bad(
                "forget_size + retain_size must leave at least one background person".into(),
            );
        }
        if self.objects_per_relation < 8 || self.objects_per_relation > 12 {
            return bad(format!(
                "objects_per_relation = {} outside 8..=12",
                self.objects_per_relation
            ));
        }
        // Out-of-world names must make up at least 20% of all names.
        if self.n_out_of_world * 4 < self.n_persons || self.n_out_of_world == 0 {
            return bad(format!(
                "n_out_of_world = {} is below 20% of all names",
                self.n_out_of_world
            ));
        }
        if self.n_persons + self.n_out_of_world > pool::FIRST_NAMES.len() {
            return bad("not enough names in the pool".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct World {
    pub config: WorldConfig,
    pub persons: Vec<Person>,
    pub relations: Vec<Relation>,
    pub facts: Vec<FactTriplet>,
    /// Forget targets in sampling order.
    pub forget_ids: Vec<PersonId>,
    pub retain_ids: Vec<PersonId>,
    pub out_of_world_names: Vec<Vec<String>>,
    pub seed: u64,
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World, WorldError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let relations: Vec<Relation> = pool::RELATIONS[..config.n_relations]
        .iter()
        .map(|spec| {
            let mut picks: Vec<usize> = (0..spec.objects.len()).collect();
            picks.shuffle(&mut rng);
            picks.truncate(config.objects_per_relation);
            picks.sort_unstable();
            let object_vocab: Vec<String> = picks
                .iter()
                .map(|&i| spec.objects[i].0.to_string())
                .collect();
            let values = picks
                .iter()
                .map(|&i| (spec.objects[i].0.to_string(), spec.objects[i].1.to_string()))
                .collect();
            let mut value_vocab: Vec<String> = Vec::new();
            for (_, a) in spec.objects {
                if !value_vocab.iter().any(|v| v == a) {
                    value_vocab.push(a.to_string());
                }
            }
            Relation {
                id: spec.id.to_string(),
                noun: spec.noun.to_string(),
                surface_forms: spec.surface_forms.iter().map(|s| s.to_string()).collect(),
                question_forms: spec.question_forms.iter().map(|s| s.to_string()).collect(),
                object_vocab,
                attribute: Attribute {
                    noun: spec.attr_noun.to_string(),
                    surface_form: spec.attr_surface.to_string(),
                    question_form: spec.attr_question.to_string(),
                    values,
                    value_vocab,
                },
            }
        })
        .collect();

    let n_names = config.n_persons + config.n_out_of_world;
    let mut firsts: Vec<&str> = pool::FIRST_NAMES.to_vec();
    let mut lasts: Vec<&str> = pool::SURNAMES.to_vec();
    firsts.shuffle(&mut rng);
    lasts.shuffle(&mut rng);
    let names: Vec<Vec<String>> = (0..n_names)
        .map(|i| vec![firsts[i].to_string(), lasts[i].to_string()])
        .collect();

    let persons: Vec<Person> = names[..config.n_persons]
        .iter()
        .enumerate()
        .map(|(i, n)| Person {
            id: PersonId(i as u32),
            name: n.clone(),
        })
        .collect();
    let out_of_world_names = names[config.n_persons..].to_vec();

    let mut facts = Vec::with_capacity(config.n_persons * config.n_relations);
    for p in &persons {
        for r in &relations {
            let object =
                r.object_vocab[rand::Rng::random_range(&mut rng, 0..r.object_vocab.len())].clone();
            facts.push(FactTriplet {
                subject: p.id,
                relation: r.id.clone(),
                object,
            });
        }
    }

    let mut order: Vec<PersonId> = persons.iter().map(|p| p.id).collect();
    order.shuffle(&mut rng);
    let forget_ids = order[..config.forget_size].to_vec();
    let mut retain_ids =
        order[config.forget_size..config.forget_size + config.retain_size].to_vec();
    retain_ids.sort();

    Ok(World {
        config: config.clone(),
        persons,
        relations,
        facts,
        forget_ids,
        retain_ids,
        out_of_world_names,
        seed,
    })
}

impl World {
    pub fn person(&self, id: PersonId) -> Result<&Person, WorldError> {
        self.persons
            .iter()
            .find(|p| p.id == id)
            .ok_or(WorldError::UnknownPerson(id))
    }

    pub fn relation(&self, id: &str) -> Result<&Relation, WorldError> {
        self.relations
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| WorldError::UnknownRelation(id.to_string()))
    }

    pub fn relation_index(&self, id: &str) -> Result<usize, WorldError> {
        self.relations
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| WorldError::UnknownRelation(id.to_string()))
    }

    /// The person's facts, one per relation, in relation order.
    pub fn facts_of(&self, person: PersonId) -> Result<Vec<FactTriplet>, WorldError> {
        self.person(person)?;
        Ok(self
            .relations
            .iter()
            .filter_map(|r| {
                self.facts
                    .iter()
                    .find(|f| f.subject == person && f.relation == r.id)
                    .cloned()
            })
            .collect())
    }

    pub fn object_of(&self, person: PersonId, relation: &str) -> Result<&str, WorldError> {
        self.facts
            .iter()
            .find(|f| f.subject == person && f.relation == relation)
            .map(|f| f.object.as_str())
            .ok_or(WorldError::UnknownPerson(person))
    }

    /// Persons in neither the forget nor the retain set. They supply
    /// training-time retain material and obfuscation donors.
    pub fn background_ids(&self) -> Vec<PersonId> {
        self.persons
            .iter()
            .map(|p| p.id)
            .filter(|id| !self.forget_ids.contains(id) && !self.retain_ids.contains(id))
            .collect()
    }

    /// Builds the closed vocabulary: special tokens and scaffolding first,
    /// then every other word in first-seen order.
    pub fn vocab(&self) -> Vocab {
        let mut words: Vec<String> = Vec::new();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut push = |w: &str, words: &mut Vec<String>| {
            if seen.insert(w.to_string()) {
                words.push(w.to_string());
            }
        };
        let scaffolding = [
            vocab::BOS,
            vocab::EOS,
            vocab::QUESTION,
            vocab::ANSWER,
            vocab::COLON,
            vocab::CHOICES,
            vocab::YES,
            vocab::NO,
            "Is",
            "the",
            "of",
            "?",
            ".",
        ];
        for w in scaffolding {
            push(w, &mut words);
        }
        for l in vocab::CHOICE_LETTERS {
            push(l, &mut words);
        }
        for w in vocab::REFUSAL_PHRASE.split_whitespace() {
            push(w, &mut words);
        }
        for w in vocab::FORCED_ANSWER_SUFFIX.split_whitespace() {
            push(w, &mut words);
        }
        for r in &self.relations {
            let templates = r.surface_forms.iter().chain(&r.question_forms).chain([
                &r.noun,
                &r.attribute.noun,
                &r.attribute.surface_form,
                &r.attribute.question_form,
            ]);
            for t in templates {
                for w in t.split_whitespace() {
                    if !matches!(w, "{S}" | "{O}" | "{E}" | "{A}") {
                        push(w, &mut words);
                    }
                }
            }
        }
        for r in &self.relations {
            for o in &r.object_vocab {
                push(o, &mut words);
            }
            for a in &r.attribute.value_vocab {
                push(a, &mut words);
            }
        }
        for p in &self.persons {
            for w in &p.name {
                push(w, &mut words);
            }
        }
        for n in &self.out_of_world_names {
            for w in n {
                push(w, &mut words);
            }
        }
        Vocab::from_tokens(words).expect("deduplicated above")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, r: usize, f: usize) -> WorldConfig {
        WorldConfig {
            n_persons: n,
            n_relations: r,
            forget_size: f,
            retain_size: 2,
            n_out_of_world: 3,
            objects_per_relation: 10,
        }
    }

    #[test]
    fn ten_persons_four_relations() {
        let w = generate_world(&cfg(10, 4, 2), 7).unwrap();
        assert_eq!(w.facts.len(), 40);
        assert_eq!(w.forget_ids.len(), 2);
    }

    #[test]
    fn deterministic() {
        let a = generate_world(&cfg(10, 4, 2), 7).unwrap();
        let b = generate_world(&cfg(10, 4, 2), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&cfg(10, 4, 2), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn forget_equal_to_population_is_invalid() {
        let err = generate_world(&cfg(10, 4, 10), 7).unwrap_err();
        assert!(matches!(err, WorldError::InvalidConfig(_)));
    }

    #[test]
    fn too_few_out_of_world_names_rejected() {
        let mut c = cfg(16, 4, 2);
        c.n_out_of_world = 3;
        assert!(c.validate().is_err());
        c.n_out_of_world = 4;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn facts_of_is_one_per_relation_in_order() {
        let w = generate_world(&cfg(10, 4, 2), 3).unwrap();
        let p = w.persons[5].id;
        let fs = w.facts_of(p).unwrap();
        assert_eq!(fs.len(), 4);
        let rels: Vec<_> = fs.iter().map(|f| f.relation.clone()).collect();
        let expected: Vec<_> = w.relations.iter().map(|r| r.id.clone()).collect();
        assert_eq!(rels, expected);
        assert_eq!(fs, w.facts_of(p).unwrap());
        assert!(matches!(
            w.facts_of(PersonId(99)),
            Err(WorldError::UnknownPerson(_))
        ));
    }

    #[test]
    fn world_invariants() {
        let w = generate_world(&WorldConfig::default(), 11).unwrap();
        for r in &w.relations {
            let distinct: BTreeSet<_> = r.object_vocab.iter().collect();
            assert!(distinct.len() >= 8);
            assert!(r
                .surface_forms
                .iter()
                .all(|s| s.matches("{O}").count() == 1));
        }
        for f in &w.facts {
            assert!(w
                .relation(&f.relation)
                .unwrap()
                .object_vocab
                .contains(&f.object));
        }
        for p in &w.persons {
            for r in &w.relations {
                let n = w
                    .facts
                    .iter()
                    .filter(|f| f.subject == p.id && f.relation == r.id)
                    .count();
                assert_eq!(n, 1);
            }
        }
        assert!(w.forget_ids.iter().all(|id| !w.retain_ids.contains(id)));
        let names: BTreeSet<_> = w.persons.iter().map(|p| p.name.clone()).collect();
        for n in &w.out_of_world_names {
            assert!(!names.contains(n));
        }
        let total = w.persons.len() + w.out_of_world_names.len();
        assert!(w.out_of_world_names.len() * 5 >= total);
    }

    #[test]
    fn name_tokens_are_unique_words() {
        let w = generate_world(&WorldConfig::default(), 2).unwrap();
        let v = w.vocab();
        let mut seen = BTreeSet::new();
        for p in &w.persons {
            for t in &p.name {
                assert!(seen.insert(t.clone()));
            }
        }
        assert!(v.contains(vocab::YES) && v.contains(vocab::NO));
        assert_eq!(v.tokenize("Yes").unwrap().len(), 1);
    }
}
