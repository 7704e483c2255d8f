//! Protocols beyond the main pipeline: the obfuscation sweep, the
//! fine-tuning attack, continual unlearning and gradient checks.

use super::eval::evaluate;
use super::pipeline::{
    build_suite, ensure_parent, forget_mcqs, monitor, obfuscation_sets, retain_mcqs, Ctx, RunDir,
    Stage,
};
use super::HarnessError;
use crate::lm::{
    choice_distributions, cross_entropy, grad_check, train_base, AdamConfig, ChoiceQuery,
    LanguageModel, LmError, Model, TabularModel, TrainConfig, TransformerConfig, TransformerModel,
};
use crate::metrics;
use crate::probes::{
    gen_hard_retain, gen_mcq, InTrainingAnswers, ProbeKind, ProbeQuestion, ProbeSuite, Split,
};
use crate::seeds;
use crate::unlearn::{
    df_mcq_term, npo_term, original_distributions, qa_examples, retain_term, run_df_mcq,
    run_obfuscation, sequence_logprobs, Method, UnlearnError,
};
use crate::worldgen::{generate_world, PersonId, SeqKind, TrainingCorpus, World, WorldConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub(crate) fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), HarnessError> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Mean entropy and accuracy of a model on MCQ probes.
fn mcq_scores<M: LanguageModel + ?Sized>(
    model: &M,
    qs: &[ProbeQuestion],
) -> Result<(f64, f64), HarnessError> {
    let v = model.vocab();
    let queries: Vec<ChoiceQuery> = qs
        .iter()
        .map(|q| ChoiceQuery {
            prompt: q.prompt.clone(),
            letters: v.letters(q.choices.len()),
        })
        .collect();
    let dists = choice_distributions(model, &queries)?;
    let mut h = Vec::new();
    for d in &dists {
        h.push(metrics::entropy(d)?.value);
    }
    let gold: Vec<usize> = qs
        .iter()
        .map(|q| q.gold_index().unwrap_or(usize::MAX))
        .collect();
    Ok((mean(&h), metrics::accuracy(&dists, &gold)?))
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lr: f64,
    pub n_samples: usize,
    /// `ok` or `skipped`.
    pub status: String,
    pub reason: String,
    /// Yes rate on forget Yes-No probes whose candidate is out of training.
    pub yes_rate_oot: Option<f64>,
    /// One minus mean forget open-ended ROUGE-L recall.
    pub efficacy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub n_cells: usize,
    pub n_ok: usize,
    pub pearson_r: Option<f64>,
    pub n_rows: usize,
    /// Rows whose yes rate never decreases as the sample count grows.
    pub monotone_rows: usize,
    pub monotone_check: bool,
}

fn sweep_cell<M: LanguageModel + Clone>(
    ctx: &Ctx,
    base: &M,
    lr: f64,
    k: usize,
) -> Result<(f64, f64), HarnessError> {
    let w = &ctx.world;
    let sweep_seed = ctx.cfg.seeds.sweep;
    let (set, used) = obfuscation_sets(
        w,
        &w.forget_ids,
        ctx.cfg.unlearn.n_donors,
        k,
        seeds::derive(sweep_seed, &[1]),
        base,
    )?;
    let mut mc = ctx.cfg.method_config(Method::WhpPlusStyle);
    mc.lr = lr;
    mc.epochs = ctx.cfg.sweep.epochs;
    mc.n_obfuscation_samples = k;
    mc.seed = seeds::derive(sweep_seed, &[2]);
    let mut model = base.clone();
    run_obfuscation(&mut model, &set, &mc)?;
    let full = ProbeSuite::build(w, &used, &ctx.cfg.probe_config())?;
    let suite = ProbeSuite {
        questions: full
            .questions
            .into_iter()
            .filter(|q| {
                (q.kind == ProbeKind::YesNo && q.split == Split::OutOfTraining)
                    || (q.kind == ProbeKind::OpenEnded && q.split == Split::Reference)
            })
            .collect(),
    };
    let res = evaluate(&model, &suite, ctx.cfg.probe.max_new_tokens)?;
    let v = w.vocab();
    let mut p_yes = Vec::new();
    let mut rouge = Vec::new();
    for (q, r) in suite.questions.iter().zip(&res) {
        if q.kind == ProbeKind::YesNo {
            p_yes.push(r.dist[0]);
        } else {
            let out = v.tokenize(r.output.as_deref().unwrap_or(""))?;
            rouge.push(metrics::rouge_l_recall(&out, &v.tokenize(&q.gold)?)?);
        }
    }
    Ok((
        metrics::yes_rate(&p_yes),
        metrics::unlearning_efficacy(&rouge)?,
    ))
}

/// Obfuscation over the grid of learning rates × sample counts.
pub fn cmd_sweep(dir: &RunDir) -> Result<(Vec<SweepCell>, SweepSummary), HarnessError> {
    let ctx = Ctx::load(dir)?;
    let base = ctx.model("base", Stage::TrainBase)?;
    let lrs = ctx.cfg.sweep_lrs()?;
    let ks = ctx.cfg.sweep_sample_counts()?;
    let mut cells = Vec::new();
    for &lr in &lrs {
        for &k in &ks {
            let mut cell = SweepCell {
                lr,
                n_samples: k,
                status: "ok".into(),
                reason: String::new(),
                yes_rate_oot: None,
                efficacy: None,
            };
            match sweep_cell(&ctx, &base, lr, k) {
                Ok((y, e)) => {
                    cell.yes_rate_oot = Some(y);
                    cell.efficacy = Some(e);
                }
                Err(HarnessError::Unlearn(
                    e @ (UnlearnError::NotEnoughDonorMaterial { .. } | UnlearnError::Config(_)),
                )) => {
                    cell.status = "skipped".into();
                    cell.reason = e.to_string();
                }
                Err(e) => return Err(e),
            }
            log::info!(
                "sweep lr {lr} k {k}: {:?} {:?} {}",
                cell.yes_rate_oot,
                cell.efficacy,
                cell.reason
            );
            cells.push(cell);
        }
    }
    let summary = summarize_sweep(&cells, lrs.len());
    write_csv(&cells, &dir.report("sweep.csv"))?;
    write_csv(
        std::slice::from_ref(&summary),
        &dir.report("sweep_summary.csv"),
    )?;
    let back: Vec<SweepCell> = read_csv(&dir.report("sweep.csv"))?;
    if back != cells {
        return Err(HarnessError::Postcondition {
            stage: Stage::Sweep.name(),
            reason: "sweep.csv does not parse back".into(),
        });
    }
    dir.update_hashes()?;
    Ok((cells, summary))
}

pub(crate) fn summarize_sweep(cells: &[SweepCell], n_rows: usize) -> SweepSummary {
    let ok: Vec<&SweepCell> = cells.iter().filter(|c| c.status == "ok").collect();
    let ys: Vec<f64> = ok.iter().filter_map(|c| c.yes_rate_oot).collect();
    let es: Vec<f64> = ok.iter().filter_map(|c| c.efficacy).collect();
    let mut monotone_rows = 0;
    let mut lrs: Vec<f64> = Vec::new();
    for c in cells {
        if !lrs.contains(&c.lr) {
            lrs.push(c.lr);
        }
    }
    for lr in &lrs {
        let mut row: Vec<(usize, f64)> = ok
            .iter()
            .filter(|c| c.lr == *lr)
            .filter_map(|c| Some((c.n_samples, c.yes_rate_oot?)))
            .collect();
        row.sort_by_key(|x| x.0);
        if row.windows(2).all(|w| w[1].1 >= w[0].1) {
            monotone_rows += 1;
        }
    }
    SweepSummary {
        n_cells: cells.len(),
        n_ok: ok.len(),
        pearson_r: metrics::pearson(&ys, &es).ok(),
        n_rows,
        monotone_rows,
        monotone_check: 3 * monotone_rows >= 2 * n_rows,
    }
}

// ------------------------------------------------------------ SFT attack

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRow {
    pub model: String,
    pub phase: String,
    pub forget_rouge_l: f64,
    pub forget_refusal_rate: f64,
    pub forget_mcq_entropy: f64,
    pub forget_mcq_accuracy: f64,
    pub retain_rouge_l: f64,
}

fn sft_row<M: LanguageModel + ?Sized>(
    model: &M,
    suite: &ProbeSuite,
    name: &str,
    phase: &str,
    max_new: usize,
) -> Result<SftRow, HarnessError> {
    let v = model.vocab();
    let pick = |k: ProbeKind, s: Split| ProbeSuite {
        questions: suite
            .questions
            .iter()
            .filter(|q| q.kind == k && q.split == s)
            .cloned()
            .collect(),
    };
    let open_scores = |s: &ProbeSuite| -> Result<(f64, f64), HarnessError> {
        let res = evaluate(model, s, max_new)?;
        let mut rouge = Vec::new();
        let mut answers = Vec::new();
        for (q, r) in s.questions.iter().zip(res) {
            let out = v.tokenize(r.output.as_deref().unwrap_or(""))?;
            rouge.push(metrics::rouge_l_recall(&out, &v.tokenize(&q.gold)?)?);
            answers.push(out);
        }
        Ok((
            mean(&rouge),
            metrics::refusal_rate(&answers, &v.refusal_ids()),
        ))
    };
    let (fr, refusal) = open_scores(&pick(ProbeKind::OpenEnded, Split::Reference))?;
    let (rr, _) = open_scores(&pick(ProbeKind::OpenEnded, Split::Retain))?;
    let (h, acc) = mcq_scores(model, &pick(ProbeKind::Mcq, Split::Reference).questions)?;
    Ok(SftRow {
        model: name.into(),
        phase: phase.into(),
        forget_rouge_l: fr,
        forget_refusal_rate: refusal,
        forget_mcq_entropy: h,
        forget_mcq_accuracy: acc,
        retain_rouge_l: rr,
    })
}

/// Fine-tunes an unlearned model on retain-person QA and probes the forget
/// set before and after.
pub fn cmd_sft_attack(dir: &RunDir, method: Method) -> Result<Vec<SftRow>, HarnessError> {
    let ctx = Ctx::load(dir)?;
    let base = ctx.model("base", Stage::TrainBase)?;
    let mut model = ctx.model(&method.to_string(), Stage::Unlearn)?;
    let suite = build_suite(&ctx, &base)?;
    let name = method.to_string();
    let max_new = ctx.cfg.probe.max_new_tokens;
    let before = sft_row(&model, &suite, &name, "before", max_new)?;
    let mut corpus = TrainingCorpus::default();
    for e in qa_examples(&ctx.world, &ctx.world.retain_ids)? {
        corpus.push(e.seq, SeqKind::Qa);
    }
    let s = &ctx.cfg.sft_attack;
    let tc = TrainConfig {
        epochs: s.epochs,
        batch_size: s.batch_size,
        adam: AdamConfig {
            lr: s.lr,
            ..AdamConfig::default()
        },
        seed: seeds::derive(ctx.cfg.seeds.unlearn, &[20]),
        target_loss: None,
    };
    train_base(&mut model, &corpus, &tc)?;
    let after = sft_row(&model, &suite, &name, "after", max_new)?;
    let rows = vec![before, after];
    write_csv(&rows, &dir.report("sft_attack.csv"))?;
    dir.update_hashes()?;
    Ok(rows)
}

// ------------------------------------------------------------ continual

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualRow {
    /// Number of targets unlearned so far.
    pub stage: usize,
    pub target: u32,
    pub mcq_entropy: f64,
    pub mcq_accuracy: f64,
    pub hard_retain_accuracy: f64,
    pub base_hard_retain_accuracy: f64,
}

/// The forget persons followed by background persons, `n` in total. At
/// least one background person must stay out to supply retain MCQs.
pub(crate) fn continual_targets(world: &World, n: usize) -> Result<Vec<PersonId>, HarnessError> {
    let mut t = world.forget_ids.clone();
    let bg = world.background_ids();
    if n < 2 {
        return Err(HarnessError::Config(format!(
            "continual unlearning needs at least 2 targets, got {n}"
        )));
    }
    if n > t.len() + bg.len() - 1 {
        return Err(HarnessError::Config(format!(
            "{n} targets requested but only {} persons can be targets",
            t.len() + bg.len() - 1
        )));
    }
    t.extend(bg.into_iter().take(n.saturating_sub(t.len())));
    t.truncate(n);
    Ok(t)
}

/// Sequential DF-MCQ over the targets, re-probing every earlier target
/// after each stage.
pub fn cmd_continual(dir: &RunDir) -> Result<Vec<ContinualRow>, HarnessError> {
    let ctx = Ctx::load(dir)?;
    let base = ctx.model("base", Stage::TrainBase)?;
    let targets = continual_targets(&ctx.world, ctx.cfg.continual.n_targets)?;
    let mut w = ctx.world.clone();
    w.forget_ids = targets.clone();
    let pc = ctx.cfg.probe_config();
    let mut probes = Vec::new();
    let mut hard = Vec::new();
    for &t in &targets {
        probes.push(gen_mcq(
            &w,
            t,
            &InTrainingAnswers::new(),
            pc.n_choices,
            pc.mcq_per_relation,
            pc.seed,
        )?);
        hard.extend(
            gen_hard_retain(&w, t, pc.n_choices, pc.mcq_per_relation, pc.seed)?
                .into_iter()
                .filter(|q| q.kind == ProbeKind::Mcq),
        );
    }
    let (_, base_hard) = mcq_scores(&base, &hard)?;
    let retain = retain_mcqs(&ctx, &w, &targets)?;
    let mut model = base.clone();
    let mut rows = Vec::new();
    for (i, &t) in targets.iter().enumerate() {
        let forget = forget_mcqs(&ctx, &w, &[t], false)?;
        let mut mc = ctx.cfg.method_config(Method::DfMcq);
        mc.seed = seeds::derive(mc.seed, &[100 + i as u64]);
        run_df_mcq(&mut model, &forget, &retain, &mc, &monitor(&ctx, &w, &[t])?)?;
        let (_, hard_acc) = mcq_scores(&model, &hard)?;
        for (j, &tj) in targets[..=i].iter().enumerate() {
            let (h, acc) = mcq_scores(&model, &probes[j])?;
            rows.push(ContinualRow {
                stage: i + 1,
                target: tj.0,
                mcq_entropy: h,
                mcq_accuracy: acc,
                hard_retain_accuracy: hard_acc,
                base_hard_retain_accuracy: base_hard,
            });
        }
        log::info!(
            "continual stage {}: target {t}, hard retain accuracy {hard_acc:.3}",
            i + 1
        );
    }
    write_csv(&rows, &dir.report("continual.csv"))?;
    dir.update_hashes()?;
    Ok(rows)
}

// ------------------------------------------------------------ grad check

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckLine {
    pub backend: String,
    pub loss: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

fn lm_err(e: UnlearnError) -> LmError {
    match e {
        UnlearnError::Lm(e) => e,
        other => LmError::Shape(other.to_string()),
    }
}

/// Perturbs every parameter so no gradient is trivially zero.
fn jitter(model: &mut Model, seed: u64) {
    use rand::Rng;
    let mut rng = seeds::rng(seed, &[0x6a]);
    let n = model.params().n_scalars();
    for k in 0..n {
        let x = model.params().flat_get(k);
        model
            .params_mut()
            .flat_set(k, x + rng.random_range(-0.3..0.3));
    }
}

/// Tape gradients against central differences for the DF-MCQ, retain, NPO
/// and cross-entropy losses on a small world, for both backends.
pub fn grad_check_suite(seed: u64, n_coords: usize) -> Result<Vec<GradCheckLine>, HarnessError> {
    let world = generate_world(&WorldConfig::default(), seed)?;
    let p = world.forget_ids[0];
    let forget = crate::probes::gen_training_mcqs(&world, p, 3, 5, seed)?;
    let retain = crate::probes::gen_training_mcqs(&world, world.retain_ids[0], 3, 5, seed)?;
    let qa: Vec<_> = qa_examples(&world, &[p])?.into_iter().take(3).collect();
    let tcfg = TransformerConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        context: 64,
        seed,
    };
    let mut models = vec![
        Model::Tabular(TabularModel::new(&world)?),
        Model::Transformer(TransformerModel::new(world.vocab(), tcfg)?),
    ];
    let mut out = Vec::new();
    for m in &mut models {
        jitter(m, seed);
        let backend = m.backend().to_string();
        let mut reference = m.clone();
        jitter(&mut reference, seed + 1);
        let orig = original_distributions(&reference, &retain)?;
        let ref_lp: Vec<f64> = sequence_logprobs(&reference, &qa)?;
        let mut record = |loss: &str, r: crate::lm::GradCheckReport| {
            out.push(GradCheckLine {
                backend: backend.clone(),
                loss: loss.into(),
                checked: r.checked,
                max_rel_error: r.max_rel_error,
            })
        };
        let eps = 1e-5;
        let r = grad_check(
            m,
            |g, mm, pv| df_mcq_term(g, mm, pv, &forget).map_err(lm_err),
            n_coords,
            eps,
            seed,
        )?;
        record("df_mcq", r);
        let r = grad_check(
            m,
            |g, mm, pv| retain_term(g, mm, pv, &retain, &orig).map_err(lm_err),
            n_coords,
            eps,
            seed,
        )?;
        record("retain", r);
        let r = grad_check(
            m,
            |g, mm, pv| npo_term(g, mm, pv, &qa, &ref_lp, 0.1).map_err(lm_err),
            n_coords,
            eps,
            seed,
        )?;
        record("npo", r);
        let r = grad_check(
            m,
            |g, mm, pv| cross_entropy(g, mm, pv, &qa),
            n_coords,
            eps,
            seed,
        )?;
        record("cross_entropy", r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(lr: f64, k: usize, y: Option<f64>) -> SweepCell {
        SweepCell {
            lr,
            n_samples: k,
            status: if y.is_some() { "ok" } else { "skipped" }.into(),
            reason: String::new(),
            yes_rate_oot: y,
            efficacy: y.map(|v| v / 2.0),
        }
    }

    #[test]
    fn sweep_summary_counts_monotone_rows() {
        let cells = vec![
            cell(0.1, 1, Some(0.1)),
            cell(0.1, 2, Some(0.2)),
            cell(0.2, 1, Some(0.3)),
            cell(0.2, 2, Some(0.1)),
            cell(0.3, 1, Some(0.0)),
            cell(0.3, 2, None),
        ];
        let s = summarize_sweep(&cells, 3);
        assert_eq!((s.n_cells, s.n_ok, s.monotone_rows), (6, 5, 2));
        assert!(s.monotone_check);
        assert!((s.pearson_r.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn continual_needs_two_targets() {
        let w = generate_world(&WorldConfig::default(), 1).unwrap();
        assert!(continual_targets(&w, 1).is_err());
        let t = continual_targets(&w, 5).unwrap();
        assert_eq!(&t[..2], &w.forget_ids[..]);
        assert_eq!(t.len(), 5);
        assert!(continual_targets(&w, 100).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for l in grad_check_suite(3, 12).unwrap() {
            assert!(l.max_rel_error < 1e-4, "{l:?}");
        }
    }
}
