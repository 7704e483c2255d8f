//! Recognizes rendered prompts so the tabular backend can look up the
//! knowledge edge a context asks about.

use super::{PersonId, World};
use crate::vocab::{
    TokenId, Vocab, ANSWER, BOS, CHOICES, COLON, EOS, FORCED_ANSWER_SUFFIX, QUESTION,
    REFUSAL_PHRASE,
};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubjectKey {
    Person(PersonId),
    /// A two-word name that is not a person of the world.
    Unknown,
    /// An object of the relation, addressed through its attribute.
    Entity(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotKind {
    Open,
    Declarative,
    /// (letter token, choice text) pairs in display order.
    Mcq(Vec<(TokenId, String)>),
    YesNo(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    Slot {
        relation: usize,
        subject: SubjectKey,
        kind: SlotKind,
    },
    /// The next token is fixed by the template (inside an answer span).
    Continue(TokenId),
    Free,
}

#[derive(Debug, Clone)]
struct Pattern {
    pre: Vec<String>,
    post: Vec<String>,
}

impl Pattern {
    fn new(template: &str, slot: &str) -> Self {
        let mut parts = template.splitn(2, slot);
        let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        let pre = words(parts.next().unwrap_or(""));
        let post = words(parts.next().unwrap_or(""));
        Pattern { pre, post }
    }

    fn middle<'a>(&self, words: &'a [&'a str]) -> Option<&'a [&'a str]> {
        let (p, q) = (self.pre.len(), self.post.len());
        if words.len() <= p + q {
            return None;
        }
        let head_ok = self.pre.iter().zip(words).all(|(a, b)| a == b);
        let tail_ok = self
            .post
            .iter()
            .zip(&words[words.len() - q..])
            .all(|(a, b)| a == b);
        (head_ok && tail_ok).then(|| &words[p..words.len() - q])
    }
}

#[derive(Debug, Clone)]
struct RelationPatterns {
    questions: Vec<Pattern>,
    /// Surface forms truncated before the object slot.
    declaratives: Vec<Pattern>,
    attr_question: Pattern,
    attr_declarative: Pattern,
    noun: Vec<String>,
    attr_noun: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct QueryParser {
    vocab: Vocab,
    relations: Vec<RelationPatterns>,
    objects: Vec<Vec<String>>,
    names: HashMap<Vec<String>, PersonId>,
    refusal: Vec<String>,
    forced: Vec<String>,
}

impl QueryParser {
    pub fn new(world: &World) -> Self {
        let relations = world
            .relations
            .iter()
            .map(|r| RelationPatterns {
                questions: r
                    .question_forms
                    .iter()
                    .map(|t| Pattern::new(t, "{S}"))
                    .collect(),
                declaratives: r
                    .surface_forms
                    .iter()
                    .map(|t| Pattern::new(t.split("{O}").next().unwrap_or(""), "{S}"))
                    .collect(),
                attr_question: Pattern::new(&r.attribute.question_form, "{E}"),
                attr_declarative: Pattern::new(
                    r.attribute.surface_form.split("{A}").next().unwrap_or(""),
                    "{E}",
                ),
                noun: r.noun.split_whitespace().map(str::to_string).collect(),
                attr_noun: r
                    .attribute
                    .noun
                    .split_whitespace()
                    .map(str::to_string)
                    .collect(),
            })
            .collect();
        QueryParser {
            vocab: world.vocab(),
            relations,
            objects: world
                .relations
                .iter()
                .map(|r| r.object_vocab.clone())
                .collect(),
            names: world
                .persons
                .iter()
                .map(|p| (p.name.clone(), p.id))
                .collect(),
            refusal: REFUSAL_PHRASE
                .split_whitespace()
                .map(str::to_string)
                .collect(),
            forced: FORCED_ANSWER_SUFFIX
                .split_whitespace()
                .map(str::to_string)
                .collect(),
        }
    }

    fn person_subject(&self, words: &[&str]) -> Option<SubjectKey> {
        let key: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        match self.names.get(&key) {
            Some(id) => Some(SubjectKey::Person(*id)),
            None if words.len() == 2 => Some(SubjectKey::Unknown),
            None => None,
        }
    }

    fn entity_subject(&self, relation: usize, words: &[&str]) -> Option<SubjectKey> {
        if words.len() != 1 {
            return None;
        }
        self.objects[relation]
            .iter()
            .position(|o| o == words[0])
            .map(SubjectKey::Entity)
    }

    fn match_stem(&self, stem: &[&str]) -> Option<(usize, SubjectKey)> {
        for (ri, rp) in self.relations.iter().enumerate() {
            for q in &rp.questions {
                if let Some(s) = q.middle(stem).and_then(|m| self.person_subject(m)) {
                    return Some((ri, s));
                }
            }
            if let Some(s) = rp
                .attr_question
                .middle(stem)
                .and_then(|m| self.entity_subject(ri, m))
            {
                return Some((ri, s));
            }
        }
        None
    }

    fn match_yes_no(&self, stem: &[&str]) -> Option<(usize, SubjectKey, String)> {
        // Is {cand} the {noun} of {subject} ?
        if stem.len() < 6 || stem[0] != "Is" || stem[2] != "the" || stem[stem.len() - 1] != "?" {
            return None;
        }
        let cand = stem[1].to_string();
        let rest = &stem[3..stem.len() - 1];
        for (ri, rp) in self.relations.iter().enumerate() {
            for (noun, entity) in [(&rp.noun, false), (&rp.attr_noun, true)] {
                let n = noun.len();
                if rest.len() > n + 1
                    && rest[..n].iter().zip(noun).all(|(a, b)| a == b)
                    && rest[n] == "of"
                {
                    let subj = &rest[n + 1..];
                    let key = if entity {
                        self.entity_subject(ri, subj)
                    } else {
                        self.person_subject(subj)
                    };
                    if let Some(k) = key {
                        return Some((ri, k, cand));
                    }
                }
            }
        }
        None
    }

    pub fn parse(&self, context: &[TokenId]) -> Parsed {
        let words: Option<Vec<&str>> = context.iter().map(|&i| self.vocab.word(i).ok()).collect();
        let Some(words) = words else {
            return Parsed::Free;
        };
        if words.first() != Some(&BOS) {
            return Parsed::Free;
        }
        let marker = (1..words.len())
            .rev()
            .find(|&i| words[i - 1] == ANSWER && words[i] == COLON)
            .map(|i| i + 1);
        match marker {
            Some(a) => self.parse_question(&words, a),
            None => self.parse_declarative(&words[1..]),
        }
    }

    fn parse_question(&self, words: &[&str], answer_at: usize) -> Parsed {
        let answered = &words[answer_at..];
        if !answered.is_empty() {
            let n = answered.len();
            if n <= self.refusal.len() && answered.iter().zip(&self.refusal).all(|(a, b)| a == b) {
                return match self.refusal.get(n) {
                    Some(next) => Parsed::Continue(self.vocab.must(next)),
                    None => Parsed::Continue(self.vocab.eos()),
                };
            }
            return if n == 1 && answered[0] != EOS {
                Parsed::Continue(self.vocab.eos())
            } else {
                Parsed::Free
            };
        }
        if words.len() < 6 {
            return Parsed::Free;
        }
        if words[1] == CHOICES && words[2] == COLON {
            let Some(q) =
                (4..answer_at - 2).find(|&i| words[i - 1] == QUESTION && words[i] == COLON)
            else {
                return Parsed::Free;
            };
            let tail = &words[3..q - 1];
            if tail.is_empty() || tail.len() % 2 != 0 {
                return Parsed::Free;
            }
            let mut choices = Vec::with_capacity(tail.len() / 2);
            for pair in tail.chunks(2) {
                match self.vocab.id(pair[0]) {
                    Ok(id) => choices.push((id, pair[1].to_string())),
                    Err(_) => return Parsed::Free,
                }
            }
            return match self.match_stem(&words[q + 1..answer_at - 2]) {
                Some((relation, subject)) => Parsed::Slot {
                    relation,
                    subject,
                    kind: SlotKind::Mcq(choices),
                },
                None => Parsed::Free,
            };
        }
        if words[1] != QUESTION || words[2] != COLON {
            return Parsed::Free;
        }
        let body = &words[3..answer_at - 2];
        let f = self.forced.len();
        if body.len() > f
            && body[body.len() - f..]
                .iter()
                .zip(&self.forced)
                .all(|(a, b)| a == b)
        {
            return match self.match_yes_no(&body[..body.len() - f]) {
                Some((relation, subject, cand)) => Parsed::Slot {
                    relation,
                    subject,
                    kind: SlotKind::YesNo(cand),
                },
                None => Parsed::Free,
            };
        }
        match self.match_stem(body) {
            Some((relation, subject)) => Parsed::Slot {
                relation,
                subject,
                kind: SlotKind::Open,
            },
            None => Parsed::Free,
        }
    }

    fn parse_declarative(&self, body: &[&str]) -> Parsed {
        for (ri, rp) in self.relations.iter().enumerate() {
            for d in &rp.declaratives {
                // Patterns are prefixes ending right before the object slot, so
                // the whole body must match with an empty remainder.
                if let Some(s) = d.middle(body).and_then(|m| self.person_subject(m)) {
                    return Parsed::Slot {
                        relation: ri,
                        subject: s,
                        kind: SlotKind::Declarative,
                    };
                }
            }
            if let Some(s) = rp
                .attr_declarative
                .middle(body)
                .and_then(|m| self.entity_subject(ri, m))
            {
                return Parsed::Slot {
                    relation: ri,
                    subject: s,
                    kind: SlotKind::Declarative,
                };
            }
        }
        Parsed::Free
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_world, render, WorldConfig};

    fn setup() -> (World, QueryParser, Vocab) {
        let w = generate_world(&WorldConfig::default(), 4).unwrap();
        let p = QueryParser::new(&w);
        let v = w.vocab();
        (w, p, v)
    }

    #[test]
    fn parses_every_prompt_format() {
        let (w, p, v) = setup();
        let person = &w.persons[3];
        let name = person.full_name();
        let rel = &w.relations[5];
        let stem = render::question_stem(rel, 1, &name);
        let open = v.tokenize(&render::open_prompt(&stem)).unwrap();
        assert_eq!(
            p.parse(&open),
            Parsed::Slot {
                relation: 5,
                subject: SubjectKey::Person(person.id),
                kind: SlotKind::Open
            }
        );
        let objs = &rel.object_vocab[..3];
        let mcq = v.tokenize(&render::mcq_prompt(&stem, objs)).unwrap();
        match p.parse(&mcq) {
            Parsed::Slot {
                relation: 5,
                kind: SlotKind::Mcq(ch),
                ..
            } => {
                assert_eq!(
                    ch.iter().map(|c| c.1.clone()).collect::<Vec<_>>(),
                    objs.to_vec()
                )
            }
            other => panic!("{other:?}"),
        }
        let yn = v
            .tokenize(&render::yes_no_prompt(&render::yes_no_stem(
                &rel.noun, &objs[1], &name,
            )))
            .unwrap();
        assert_eq!(
            p.parse(&yn),
            Parsed::Slot {
                relation: 5,
                subject: SubjectKey::Person(person.id),
                kind: SlotKind::YesNo(objs[1].clone())
            }
        );
        let decl = v
            .tokenize(&render::declarative_prefix(rel, 1, &name))
            .unwrap();
        assert_eq!(
            p.parse(&decl),
            Parsed::Slot {
                relation: 5,
                subject: SubjectKey::Person(person.id),
                kind: SlotKind::Declarative
            }
        );
    }

    #[test]
    fn entities_and_unknown_names() {
        let (w, p, v) = setup();
        let rel = &w.relations[0];
        let e = &rel.object_vocab[2];
        let q = v
            .tokenize(&render::open_prompt(&render::attribute_stem(rel, e)))
            .unwrap();
        assert_eq!(
            p.parse(&q),
            Parsed::Slot {
                relation: 0,
                subject: SubjectKey::Entity(2),
                kind: SlotKind::Open
            }
        );
        let name = w.out_of_world_names[0].join(" ");
        let q = v
            .tokenize(&render::open_prompt(&render::question_stem(
                &w.relations[1],
                0,
                &name,
            )))
            .unwrap();
        assert_eq!(
            p.parse(&q),
            Parsed::Slot {
                relation: 1,
                subject: SubjectKey::Unknown,
                kind: SlotKind::Open
            }
        );
    }

    #[test]
    fn answer_span_continuations() {
        let (w, p, v) = setup();
        let name = w.persons[0].full_name();
        let prompt = render::open_prompt(&render::question_stem(&w.relations[0], 0, &name));
        let partial = v.tokenize(&format!("{prompt} I do not")).unwrap();
        assert_eq!(p.parse(&partial), Parsed::Continue(v.id("have").unwrap()));
        let full = v.tokenize(&format!("{prompt} {REFUSAL_PHRASE}")).unwrap();
        assert_eq!(p.parse(&full), Parsed::Continue(v.eos()));
        let obj = v
            .tokenize(&format!("{prompt} {}", w.relations[0].object_vocab[0]))
            .unwrap();
        assert_eq!(p.parse(&obj), Parsed::Continue(v.eos()));
        assert_eq!(p.parse(&v.tokenize("<bos> the of").unwrap()), Parsed::Free);
    }
}
