//! Knowledge-table backend.
//!
//! Each (person, relation) edge owns a logit row over the relation's objects
//! plus a refusal column; one extra row per relation is shared by every
//! unrecognized name. Objects own rows over attribute values the same way.
//! The context is parsed back into the edge it asks about and the row is
//! read out in the format's answer slot:
//!
//! - open-ended: log-softmax over objects and refusal, refusal mass on the
//!   first refusal token;
//! - declarative: log-softmax over objects only;
//! - multiple choice: raw object logits on the letters, so the letter
//!   distribution is the object distribution renormalized over the choices;
//! - Yes-No: `logit(Yes) = ln p(cand) + ln K`, `logit(No) = 0`, which puts
//!   `P(Yes) = 1/2` at a uniform row.
//!
//! Template continuations are deterministic and unparsed contexts are uniform.

use super::autodiff::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use super::{Backend, LanguageModel, LmError};
use crate::vocab::{TokenId, Vocab};
use crate::worldgen::parse::{Parsed, QueryParser, SlotKind, SubjectKey};
use crate::worldgen::{PersonId, World};
use std::collections::{BTreeMap, HashMap};

const NEG: f64 = -1e4;

#[derive(Debug, Clone)]
struct Table {
    param: usize,
    /// Choice texts of the columns, refusal column excluded.
    texts: Vec<String>,
    tokens: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct TabularModel {
    vocab: Vocab,
    parser: QueryParser,
    person_row: HashMap<PersonId, usize>,
    persons: Vec<Table>,
    entities: Vec<Table>,
    refuse_token: TokenId,
    params: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Readout {
    Raw,
    All,
    Objects,
}

impl TabularModel {
    pub fn new(world: &World) -> Result<Self, LmError> {
        let vocab = world.vocab();
        let mut params = ParamStore::new();
        let n = world.persons.len();
        let mut persons = Vec::new();
        let mut entities = Vec::new();
        for r in &world.relations {
            let k = r.object_vocab.len();
            let a = r.attribute.value_vocab.len();
            persons.push(Table {
                param: params.add(format!("person.{}", r.id), Tensor::zeros(&[n + 1, k + 1])),
                texts: r.object_vocab.clone(),
                tokens: r
                    .object_vocab
                    .iter()
                    .map(|o| vocab.id(o))
                    .collect::<Result<_, _>>()?,
            });
            entities.push(Table {
                param: params.add(format!("entity.{}", r.id), Tensor::zeros(&[k, a + 1])),
                texts: r.attribute.value_vocab.clone(),
                tokens: r
                    .attribute
                    .value_vocab
                    .iter()
                    .map(|o| vocab.id(o))
                    .collect::<Result<_, _>>()?,
            });
        }
        Ok(TabularModel {
            refuse_token: vocab.refusal_ids()[0],
            parser: QueryParser::new(world),
            person_row: world
                .persons
                .iter()
                .enumerate()
                .map(|(i, p)| (p.id, i))
                .collect(),
            vocab,
            persons,
            entities,
            params,
        })
    }

    fn locate(&self, relation: usize, subject: SubjectKey) -> (&Table, usize) {
        match subject {
            SubjectKey::Person(p) => (&self.persons[relation], self.person_row[&p]),
            SubjectKey::Unknown => (&self.persons[relation], self.person_row.len()),
            SubjectKey::Entity(e) => (&self.entities[relation], e),
        }
    }

    /// Object (or attribute value) distribution of an edge, refusal excluded.
    pub fn object_distribution(&self, relation: usize, subject: SubjectKey) -> Vec<f64> {
        let (t, r) = self.locate(relation, subject);
        let row = &self.params.get(t.param).row(r)[..t.texts.len()];
        softmax(row)
    }

    /// Probability of the refusal column in the open-ended readout.
    pub fn refusal_probability(&self, relation: usize, subject: SubjectKey) -> f64 {
        let (t, r) = self.locate(relation, subject);
        let p = softmax(self.params.get(t.param).row(r));
        p[t.texts.len()]
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl LanguageModel for TabularModel {
    fn backend(&self) -> Backend {
        Backend::Tabular
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        seqs: &[Vec<TokenId>],
        rows: &[(usize, usize)],
    ) -> Result<Var, LmError> {
        let v = self.vocab.len();
        let mut base = vec![0.0; rows.len() * v];
        let mut groups: BTreeMap<(usize, Readout), Vec<(usize, usize)>> = BTreeMap::new();
        for (ri, &(s, p)) in rows.iter().enumerate() {
            let seq = seqs
                .get(s)
                .ok_or_else(|| LmError::Shape(format!("no sequence {s}")))?;
            if p >= seq.len() {
                return Err(LmError::Shape(format!(
                    "position {p} outside sequence of {}",
                    seq.len()
                )));
            }
            let out = &mut base[ri * v..(ri + 1) * v];
            match self.parser.parse(&seq[..=p]) {
                Parsed::Free => {}
                Parsed::Continue(t) => {
                    out.fill(NEG);
                    out[t] = 0.0;
                }
                Parsed::Slot {
                    relation,
                    subject,
                    kind,
                } => {
                    out.fill(NEG);
                    let (t, r) = self.locate(relation, subject);
                    let k = t.texts.len();
                    let off = ri * v;
                    let mut push = |mode, o: usize, src: usize| {
                        groups
                            .entry((t.param, mode))
                            .or_default()
                            .push((off + o, src));
                    };
                    match kind {
                        SlotKind::Open => {
                            for (j, &tok) in t.tokens.iter().enumerate() {
                                out[tok] = 0.0;
                                push(Readout::All, tok, r * (k + 1) + j);
                            }
                            out[self.refuse_token] = 0.0;
                            push(Readout::All, self.refuse_token, r * (k + 1) + k);
                        }
                        SlotKind::Declarative => {
                            for (j, &tok) in t.tokens.iter().enumerate() {
                                out[tok] = 0.0;
                                push(Readout::Objects, tok, r * k + j);
                            }
                        }
                        SlotKind::Mcq(choices) => {
                            for (letter, text) in choices {
                                if let Some(j) = t.texts.iter().position(|x| *x == text) {
                                    out[letter] = 0.0;
                                    push(Readout::Raw, letter, r * (k + 1) + j);
                                }
                            }
                        }
                        SlotKind::YesNo(cand) => {
                            out[self.vocab.no()] = 0.0;
                            if let Some(j) = t.texts.iter().position(|x| *x == cand) {
                                out[self.vocab.yes()] = (k as f64).ln();
                                push(Readout::Objects, self.vocab.yes(), r * k + j);
                            }
                        }
                    }
                }
            }
        }

        let mut acc: Option<Var> = None;
        let mut base = Some(Tensor::from_parts(vec![rows.len(), v], base));
        for ((pi, mode), pairs) in groups {
            let table = params[pi];
            let src = match mode {
                Readout::Raw => table,
                Readout::All => g.log_softmax(table),
                Readout::Objects => {
                    let (n, w) = g.value(table).dims2();
                    let k = w - 1;
                    let slice = (0..n)
                        .flat_map(|r| (0..k).map(move |j| (r * k + j, r * w + j)))
                        .collect();
                    let objects = g.gather(table, Tensor::zeros(&[n, k]), slice);
                    g.log_softmax(objects)
                }
            };
            let init = base
                .take()
                .unwrap_or_else(|| Tensor::zeros(&[rows.len(), v]));
            let part = g.gather(src, init, pairs);
            acc = Some(match acc {
                Some(a) => g.add(a, part),
                None => part,
            });
        }
        let logits = match acc {
            Some(a) => a,
            None => g.constant(base.take().expect("base unused")),
        };
        Ok(g.log_softmax(logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::infer::{eval_logprobs, yes_no_probabilities};
    use crate::worldgen::{generate_world, render, WorldConfig};

    fn setup() -> (World, TabularModel) {
        let w = generate_world(&WorldConfig::default(), 5).unwrap();
        let m = TabularModel::new(&w).unwrap();
        (w, m)
    }

    #[test]
    fn untrained_model_is_uniform_in_every_slot() {
        let (w, m) = setup();
        let v = m.vocab().clone();
        let r = &w.relations[0];
        let name = w.persons[0].full_name();
        let stem = render::question_stem(r, 0, &name);
        let prompt = v.tokenize(&render::open_prompt(&stem)).unwrap();
        let lp = eval_logprobs(&m, &[prompt.clone()], &[(0, prompt.len() - 1)]).unwrap();
        let k = r.object_vocab.len() as f64;
        let p_obj = lp.row(0)[v.id(&r.object_vocab[0]).unwrap()].exp();
        assert!((p_obj - 1.0 / (k + 1.0)).abs() < 1e-12);

        let yn = v
            .tokenize(&render::yes_no_prompt(&render::yes_no_stem(
                &r.noun,
                &r.object_vocab[3],
                &name,
            )))
            .unwrap();
        let p = yes_no_probabilities(&m, &[yn]).unwrap()[0];
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mcq_letters_renormalize_the_object_row() {
        let (w, mut m) = setup();
        let v = m.vocab().clone();
        let r = &w.relations[1];
        let pid = w.persons[2].id;
        let pi = m.persons[1].param;
        let row = m.person_row[&pid];
        let logits = [0.3, -1.0, 2.0, 0.0, 0.5, 1.5, -0.2, 0.7, 0.1, -0.4, 0.0];
        for (j, x) in logits.iter().enumerate().take(r.object_vocab.len() + 1) {
            let cols = m.params.get(pi).dims2().1;
            m.params.get_mut(pi).data_mut()[row * cols + j] = *x;
        }
        let choices: Vec<&str> = [2, 0, 5]
            .iter()
            .map(|&i| r.object_vocab[i].as_str())
            .collect();
        let prompt = render::mcq_prompt(
            &render::question_stem(r, 0, &w.persons[2].full_name()),
            &choices,
        );
        let toks = v.tokenize(&prompt).unwrap();
        let lp = eval_logprobs(&m, &[toks.clone()], &[(0, toks.len() - 1)]).unwrap();
        let letters = v.letters(3);
        let got: Vec<f64> = letters.iter().map(|&l| lp.row(0)[l].exp()).collect();
        let z: f64 = [2.0f64, 0.3, 1.5].iter().map(|x| x.exp()).sum();
        let want = [2.0f64.exp() / z, 0.3f64.exp() / z, 1.5f64.exp() / z];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
