//! Running a probe suite against a model and reducing the raw answers to
//! metric rows.

use super::HarnessError;
use crate::lm::{
    choice_distributions, greedy_decode_batch, yes_no_probabilities, ChoiceQuery, LanguageModel,
};
use crate::metrics;
use crate::probes::{ProbeKind, ProbeQuestion, ProbeSuite, Split};
use crate::vocab::{Vocab, YES};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

/// The model's raw answer to one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Index into the suite.
    pub index: usize,
    /// Choice distribution for MCQs, `[P(Yes), P(No)]` for Yes-No probes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dist: Vec<f64>,
    /// Greedy continuation for open-ended probes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

const CHUNK: usize = 64;

pub fn evaluate<M: LanguageModel + ?Sized>(
    model: &M,
    suite: &ProbeSuite,
    max_new_tokens: usize,
) -> Result<Vec<ProbeResult>, HarnessError> {
    let v = model.vocab();
    let mut out: Vec<ProbeResult> = (0..suite.questions.len())
        .map(|index| ProbeResult {
            index,
            dist: vec![],
            output: None,
        })
        .collect();
    let by_kind = |k: ProbeKind| -> Vec<usize> {
        suite
            .questions
            .iter()
            .enumerate()
            .filter(|(_, q)| q.kind == k)
            .map(|(i, _)| i)
            .collect()
    };
    for idx in by_kind(ProbeKind::Mcq).chunks(CHUNK) {
        let qs: Vec<ChoiceQuery> = idx
            .iter()
            .map(|&i| {
                let q = &suite.questions[i];
                ChoiceQuery {
                    prompt: q.prompt.clone(),
                    letters: v.letters(q.choices.len()),
                }
            })
            .collect();
        for (&i, d) in idx.iter().zip(choice_distributions(model, &qs)?) {
            out[i].dist = d;
        }
    }
    for idx in by_kind(ProbeKind::YesNo).chunks(CHUNK) {
        let prompts: Vec<_> = idx
            .iter()
            .map(|&i| suite.questions[i].prompt.clone())
            .collect();
        for (&i, p) in idx.iter().zip(yes_no_probabilities(model, &prompts)?) {
            out[i].dist = vec![p, 1.0 - p];
        }
    }
    for idx in by_kind(ProbeKind::OpenEnded).chunks(CHUNK) {
        let prompts: Vec<_> = idx
            .iter()
            .map(|&i| suite.questions[i].prompt.clone())
            .collect();
        for (&i, toks) in idx
            .iter()
            .zip(greedy_decode_batch(model, &prompts, max_new_tokens)?)
        {
            out[i].output = Some(v.detokenize(&toks)?);
        }
    }
    Ok(out)
}

pub fn write_results(results: &[ProbeResult], path: &Path) -> Result<(), HarnessError> {
    let mut buf = Vec::new();
    for r in results {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n")?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ProbeResult>, HarnessError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// One (method, probe family, split, subset) cell of the report. Metrics
/// that do not apply to the probe family are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub probe: String,
    pub split: String,
    /// `obfuscation` when splits follow the obfuscation material,
    /// `mcq_material` when they follow the DF-MCQ training choices.
    pub labeling: String,
    /// `all`, or `person_<id>` for the per-target breakdown.
    pub subset: String,
    pub n: usize,
    pub accuracy: Option<f64>,
    pub entropy: Option<f64>,
    pub refusal_rate: Option<f64>,
    pub rouge_l: Option<f64>,
    pub yes_rate: Option<f64>,
    pub p_obf_choice: Option<f64>,
    /// `ok` or `skipped`.
    pub status: String,
    pub note: String,
}

impl MetricRow {
    pub fn skipped(
        method: &str,
        probe: ProbeKind,
        split: Split,
        labeling: &str,
        subset: &str,
        note: &str,
    ) -> Self {
        MetricRow {
            method: method.into(),
            probe: probe.to_string(),
            split: split.to_string(),
            labeling: labeling.into(),
            subset: subset.into(),
            n: 0,
            accuracy: None,
            entropy: None,
            refusal_rate: None,
            rouge_l: None,
            yes_rate: None,
            p_obf_choice: None,
            status: "skipped".into(),
            note: note.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Reduces the results of `questions` (one probe family and split) to a row.
pub fn reduce(
    vocab: &Vocab,
    questions: &[(&ProbeQuestion, &ProbeResult)],
    mut row: MetricRow,
) -> Result<MetricRow, HarnessError> {
    row.n = questions.len();
    let kind: ProbeKind = row.probe.parse().map_err(HarnessError::Config)?;
    match kind {
        ProbeKind::OpenEnded => {
            let refusal = vocab.refusal_ids();
            let mut rouge = Vec::new();
            let mut answers = Vec::new();
            for (q, r) in questions {
                let out = vocab.tokenize(r.output.as_deref().unwrap_or(""))?;
                let gold = vocab.tokenize(&q.gold)?;
                rouge.push(metrics::rouge_l_recall(&out, &gold)?);
                answers.push(out);
            }
            row.rouge_l = Some(mean(&rouge));
            row.refusal_rate = Some(metrics::refusal_rate(&answers, &refusal));
        }
        ProbeKind::YesNo => {
            let dists: Vec<Vec<f64>> = questions.iter().map(|(_, r)| r.dist.clone()).collect();
            let gold: Vec<usize> = questions
                .iter()
                .map(|(q, _)| if q.gold == YES { 0 } else { 1 })
                .collect();
            row.accuracy = Some(metrics::accuracy(&dists, &gold)?);
            row.entropy = Some(mean_entropy(&dists)?);
            row.yes_rate = Some(metrics::yes_rate(
                &dists.iter().map(|d| d[0]).collect::<Vec<_>>(),
            ));
        }
        ProbeKind::Mcq => {
            let dists: Vec<Vec<f64>> = questions.iter().map(|(_, r)| r.dist.clone()).collect();
            let gold: Vec<usize> = questions
                .iter()
                .map(|(q, _)| {
                    q.gold_index()
                        .ok_or_else(|| HarnessError::Config(format!("bad MCQ gold {:?}", q.gold)))
                })
                .collect::<Result<_, _>>()?;
            row.accuracy = Some(metrics::accuracy(&dists, &gold)?);
            row.entropy = Some(mean_entropy(&dists)?);
            let (with_obf, obf): (Vec<Vec<f64>>, Vec<Option<usize>>) = questions
                .iter()
                .filter(|(q, _)| q.obf_index().is_some())
                .map(|(q, r)| (r.dist.clone(), q.obf_index()))
                .unzip();
            if !with_obf.is_empty() {
                row.p_obf_choice = Some(metrics::p_obf_choice(&with_obf, &obf)?);
            }
        }
    }
    Ok(row)
}

fn mean_entropy(dists: &[Vec<f64>]) -> Result<f64, HarnessError> {
    let mut h = Vec::with_capacity(dists.len());
    for d in dists {
        h.push(metrics::entropy(d)?.value);
    }
    Ok(mean(&h))
}

/// The splits a full probe suite has for each family.
pub fn expected_splits(kind: ProbeKind) -> &'static [Split] {
    match kind {
        ProbeKind::YesNo => &[
            Split::Reference,
            Split::InTraining,
            Split::OutOfTraining,
            Split::Retain,
        ],
        _ => &[Split::Reference, Split::Retain, Split::HardRetain],
    }
}

/// Rows for every probe family and expected split of `questions`, over all targets
/// and per target. Empty (family, split) cells are marked skipped.
pub fn metric_rows(
    vocab: &Vocab,
    method: &str,
    labeling: &str,
    questions: &[ProbeQuestion],
    results: &[ProbeResult],
) -> Result<Vec<MetricRow>, HarnessError> {
    if questions.len() != results.len() {
        return Err(HarnessError::Config(format!(
            "{} probes but {} results for {method}",
            questions.len(),
            results.len()
        )));
    }
    let mut groups: BTreeMap<(ProbeKind, Split), Vec<(&ProbeQuestion, &ProbeResult)>> =
        BTreeMap::new();
    for (q, r) in questions.iter().zip(results) {
        groups.entry((q.kind, q.split)).or_default().push((q, r));
    }
    let mut rows = Vec::new();
    for kind in [ProbeKind::OpenEnded, ProbeKind::YesNo, ProbeKind::Mcq] {
        for &split in expected_splits(kind) {
            let Some(g) = groups.get(&(kind, split)) else {
                rows.push(MetricRow::skipped(
                    method,
                    kind,
                    split,
                    labeling,
                    "all",
                    "no probes in this split",
                ));
                continue;
            };
            let base = MetricRow::skipped(method, kind, split, labeling, "all", "");
            let mut row = reduce(vocab, g, base)?;
            row.status = "ok".into();
            rows.push(row);
            let mut per: BTreeMap<u32, Vec<(&ProbeQuestion, &ProbeResult)>> = BTreeMap::new();
            for &(q, r) in g {
                per.entry(q.target.0).or_default().push((q, r));
            }
            if per.len() > 1 {
                for (p, g) in per {
                    let base = MetricRow::skipped(
                        method,
                        kind,
                        split,
                        labeling,
                        &format!("person_{p}"),
                        "",
                    );
                    let mut row = reduce(vocab, &g, base)?;
                    row.status = "ok".into();
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::ChoiceSource;
    use crate::worldgen::PersonId;

    fn vocab() -> Vocab {
        crate::worldgen::generate_world(&Default::default(), 1)
            .unwrap()
            .vocab()
    }

    fn q(kind: ProbeKind, gold: &str, target: u32) -> ProbeQuestion {
        ProbeQuestion {
            kind,
            split: Split::Reference,
            prompt: vec![],
            gold: gold.into(),
            target: PersonId(target),
            relation: "r".into(),
            candidate: None,
            choices: if kind == ProbeKind::Mcq {
                vec!["x".into(), "y".into()]
            } else {
                vec![]
            },
            choice_meta: if kind == ProbeKind::Mcq {
                vec![ChoiceSource::Reference, ChoiceSource::InTraining]
            } else {
                vec![]
            },
        }
    }

    fn res(dist: Vec<f64>, output: Option<&str>) -> ProbeResult {
        ProbeResult {
            index: 0,
            dist,
            output: output.map(String::from),
        }
    }

    #[test]
    fn mcq_row_by_hand() {
        let v = vocab();
        let qs = [q(ProbeKind::Mcq, "A", 1), q(ProbeKind::Mcq, "A", 2)];
        let rs = [res(vec![0.8, 0.2], None), res(vec![0.5, 0.5], None)];
        let rows = metric_rows(&v, "m", "obfuscation", &qs, &rs).unwrap();
        let all = rows
            .iter()
            .find(|r| r.probe == "mcq" && r.split == "reference" && r.subset == "all")
            .unwrap();
        // argmax of [0.5, 0.5] is the first entry, so both count as correct.
        assert_eq!(all.accuracy, Some(1.0));
        let h1 = -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        assert!((all.entropy.unwrap() - (h1 + 2f64.ln()) / 2.0).abs() < 1e-12);
        assert!((all.p_obf_choice.unwrap() - 0.35).abs() < 1e-12);
        assert_eq!(
            rows.iter()
                .filter(|r| r.probe == "mcq" && r.subset.starts_with("person_"))
                .count(),
            2
        );
        assert!(rows
            .iter()
            .any(|r| r.probe == "yes_no" && r.status == "skipped"));
    }

    #[test]
    fn open_row_counts_refusals_and_rouge() {
        let v = vocab();
        let refusal = crate::vocab::REFUSAL_PHRASE;
        let qs = [
            q(ProbeKind::OpenEnded, "Yes No", 1),
            q(ProbeKind::OpenEnded, "Yes", 1),
        ];
        let rs = [res(vec![], Some("Yes")), res(vec![], Some(refusal))];
        let rows = metric_rows(&v, "m", "obfuscation", &qs, &rs).unwrap();
        let r = &rows[0];
        assert_eq!(
            (r.probe.as_str(), r.split.as_str()),
            ("open_ended", "reference")
        );
        assert_eq!(r.refusal_rate, Some(0.5));
        assert_eq!(r.rouge_l, Some(0.25));
    }

    #[test]
    fn mismatched_lengths_error() {
        let v = vocab();
        assert!(metric_rows(&v, "m", "x", &[q(ProbeKind::Mcq, "A", 1)], &[]).is_err());
    }
}
