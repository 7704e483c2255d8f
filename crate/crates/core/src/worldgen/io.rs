//! Line-delimited text format for worlds and corpora.
//!
//! Records are `kind<TAB>space-separated tokens`, one per line. The world
//! additionally has a `key=value` header file echoing the seed and config.

use super::{
    Attribute, FactTriplet, Person, PersonId, Relation, SeqKind, TrainingCorpus, World,
    WorldConfig, WorldError,
};
use crate::vocab::Vocab;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

fn header_text(world: &World) -> String {
    let c = &world.config;
    format!(
        "format_version={FORMAT_VERSION}\nseed={}\nn_persons={}\nn_relations={}\nforget_size={}\nretain_size={}\nn_out_of_world={}\nobjects_per_relation={}\n",
        world.seed, c.n_persons, c.n_relations, c.forget_size, c.retain_size, c.n_out_of_world, c.objects_per_relation
    )
}

fn body_text(world: &World) -> String {
    let mut s = String::new();
    for p in &world.persons {
        let _ = writeln!(s, "person\t{} {}", p.id, p.full_name());
    }
    for r in &world.relations {
        let id = &r.id;
        let _ = writeln!(s, "relation\t{id}");
        let _ = writeln!(s, "noun\t{id} {}", r.noun);
        for t in &r.surface_forms {
            let _ = writeln!(s, "surface\t{id} {t}");
        }
        for t in &r.question_forms {
            let _ = writeln!(s, "question\t{id} {t}");
        }
        for o in &r.object_vocab {
            let _ = writeln!(s, "object\t{id} {o} {}", r.attribute.values[o]);
        }
        let _ = writeln!(s, "attr_noun\t{id} {}", r.attribute.noun);
        let _ = writeln!(s, "attr_surface\t{id} {}", r.attribute.surface_form);
        let _ = writeln!(s, "attr_question\t{id} {}", r.attribute.question_form);
        let _ = writeln!(s, "attr_values\t{id} {}", r.attribute.value_vocab.join(" "));
    }
    for f in &world.facts {
        let _ = writeln!(s, "fact\t{} {} {}", f.subject, f.relation, f.object);
    }
    for id in &world.forget_ids {
        let _ = writeln!(s, "forget\t{id}");
    }
    for id in &world.retain_ids {
        let _ = writeln!(s, "retain\t{id}");
    }
    for n in &world.out_of_world_names {
        let _ = writeln!(s, "ood\t{}", n.join(" "));
    }
    s
}

/// Writes `world.header` and `world.tsv` into `dir`.
pub fn write_world(world: &World, dir: &Path) -> Result<(), WorldError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("world.header"), header_text(world))?;
    std::fs::write(dir.join("world.tsv"), body_text(world))?;
    Ok(())
}

fn parse_header(text: &str) -> Result<(u64, WorldConfig), WorldError> {
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line.split_once('=').ok_or(WorldError::Parse {
            line: i + 1,
            reason: "expected key=value".into(),
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<u64, WorldError> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or(WorldError::Parse {
                line: 0,
                reason: format!("header key {k} missing or invalid"),
            })
    };
    if get("format_version")? != FORMAT_VERSION as u64 {
        return Err(WorldError::Parse {
            line: 0,
            reason: "unsupported format_version".into(),
        });
    }
    Ok((
        get("seed")?,
        WorldConfig {
            n_persons: get("n_persons")? as usize,
            n_relations: get("n_relations")? as usize,
            forget_size: get("forget_size")? as usize,
            retain_size: get("retain_size")? as usize,
            n_out_of_world: get("n_out_of_world")? as usize,
            objects_per_relation: get("objects_per_relation")? as usize,
        },
    ))
}

pub fn read_world(dir: &Path) -> Result<World, WorldError> {
    let (seed, config) = parse_header(&std::fs::read_to_string(dir.join("world.header"))?)?;
    let body = std::fs::read_to_string(dir.join("world.tsv"))?;
    let mut world = World {
        config,
        persons: vec![],
        relations: vec![],
        facts: vec![],
        forget_ids: vec![],
        retain_ids: vec![],
        out_of_world_names: vec![],
        seed,
    };
    for (i, line) in body.lines().enumerate() {
        let err = |reason: &str| WorldError::Parse {
            line: i + 1,
            reason: reason.to_string(),
        };
        let (kind, rest) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
        let mut words = rest.split_whitespace();
        let pid = |w: Option<&str>| -> Result<PersonId, WorldError> {
            w.ok_or_else(|| err("missing person id"))?
                .parse()
                .map_err(|e: String| err(&e))
        };
        match kind {
            "person" => {
                let id = pid(words.next())?;
                world.persons.push(Person {
                    id,
                    name: words.map(str::to_string).collect(),
                });
            }
            "relation" => world.relations.push(Relation {
                id: rest.to_string(),
                noun: String::new(),
                surface_forms: vec![],
                question_forms: vec![],
                object_vocab: vec![],
                attribute: Attribute {
                    noun: String::new(),
                    surface_form: String::new(),
                    question_form: String::new(),
                    values: BTreeMap::new(),
                    value_vocab: vec![],
                },
            }),
            "fact" => {
                let subject = pid(words.next())?;
                let relation = words
                    .next()
                    .ok_or_else(|| err("missing relation"))?
                    .to_string();
                let object = words
                    .next()
                    .ok_or_else(|| err("missing object"))?
                    .to_string();
                world.facts.push(FactTriplet {
                    subject,
                    relation,
                    object,
                });
            }
            "forget" => world.forget_ids.push(pid(words.next())?),
            "retain" => world.retain_ids.push(pid(words.next())?),
            "ood" => world
                .out_of_world_names
                .push(words.map(str::to_string).collect()),
            _ => {
                let id = words.next().ok_or_else(|| err("missing relation id"))?;
                let tail = words.collect::<Vec<_>>().join(" ");
                let rel = world
                    .relations
                    .iter_mut()
                    .find(|r| r.id == id)
                    .ok_or_else(|| err("record for undeclared relation"))?;
                match kind {
                    "noun" => rel.noun = tail,
                    "surface" => rel.surface_forms.push(tail),
                    "question" => rel.question_forms.push(tail),
                    "object" => {
                        let (o, a) = tail
                            .split_once(' ')
                            .ok_or_else(|| err("object without attribute"))?;
                        rel.object_vocab.push(o.to_string());
                        rel.attribute.values.insert(o.to_string(), a.to_string());
                    }
                    "attr_noun" => rel.attribute.noun = tail,
                    "attr_surface" => rel.attribute.surface_form = tail,
                    "attr_question" => rel.attribute.question_form = tail,
                    "attr_values" => {
                        rel.attribute.value_vocab =
                            tail.split_whitespace().map(str::to_string).collect()
                    }
                    other => return Err(err(&format!("unknown record kind {other:?}"))),
                }
            }
        }
    }
    Ok(world)
}

pub fn write_corpus(corpus: &TrainingCorpus, vocab: &Vocab, path: &Path) -> Result<(), WorldError> {
    let mut s = String::new();
    for (seq, kind) in corpus.sequences.iter().zip(&corpus.kinds) {
        let _ = writeln!(s, "{kind}\t{}", vocab.detokenize(seq)?);
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_corpus(vocab: &Vocab, path: &Path) -> Result<TrainingCorpus, WorldError> {
    let text = std::fs::read_to_string(path)?;
    let mut c = TrainingCorpus::default();
    for (i, line) in text.lines().enumerate() {
        let err = |reason: String| WorldError::Parse {
            line: i + 1,
            reason,
        };
        let (kind, toks) = line
            .split_once('\t')
            .ok_or_else(|| err("missing tab".into()))?;
        let kind: SeqKind = kind.parse().map_err(err)?;
        c.push(vocab.tokenize(toks)?, kind);
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_world, render_corpus};

    #[test]
    fn world_and_corpus_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate_world(&WorldConfig::default(), 21).unwrap();
        write_world(&w, dir.path()).unwrap();
        let back = read_world(dir.path()).unwrap();
        assert_eq!(back, w);

        let v = w.vocab();
        let c = render_corpus(&w, 1, 3).unwrap();
        let p = dir.path().join("corpus.tsv");
        write_corpus(&c, &v, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        assert_eq!(read_corpus(&v, &p).unwrap(), c);
        write_corpus(&c, &v, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn unknown_record_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate_world(&WorldConfig::default(), 21).unwrap();
        write_world(&w, dir.path()).unwrap();
        let mut body = std::fs::read_to_string(dir.path().join("world.tsv")).unwrap();
        body.push_str("bogus\tbirthplace x\n");
        std::fs::write(dir.path().join("world.tsv"), body).unwrap();
        assert!(matches!(
            read_world(dir.path()),
            Err(WorldError::Parse { .. })
        ));
    }
}
