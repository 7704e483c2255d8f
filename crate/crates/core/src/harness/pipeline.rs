//! The run directory and the stages that fill it.
//!
//! ```text
//! run/
//!   config.toml            echo of the experiment config
//!   world/                 world.header, world.tsv, corpus.tsv
//!   checkpoints/           base.ckpt, <method>.ckpt
//!   logs/                  train_base.json, <method>.jsonl
//!   probes/suite.jsonl
//!   results/               <model>.jsonl raw probe answers
//!   report/                metrics.csv, report.md, sweep.csv, ...
//!   hashes.tsv             SHA-256 of every other file
//! ```

use super::eval::{evaluate, read_results, write_results, ProbeResult};
use super::paraphrase::{resolve_endpoint, ParaphraseProvider};
use super::{report, ExperimentConfig, HarnessError};
use crate::lm::{
    load_checkpoint, save_checkpoint, train_base, Backend, LanguageModel, Model, TabularModel,
    TransformerModel,
};
use crate::probes::{
    gen_mcq, gen_training_mcqs, gen_training_mcqs_with, gen_yes_no, InTrainingAnswers, ProbeKind,
    ProbeSuite,
};
use crate::seeds;
use crate::unlearn::{
    answer_accuracy, make_obfuscation_samples, qa_examples, run_df_mcq, run_gradient_ascent,
    run_npo, run_obfuscation, McqItem, Method, Monitor, ObfuscationSet, UnlearnLog,
};
use crate::worldgen::{
    generate_world, read_corpus, read_world, render, render_corpus_with, write_corpus, write_world,
    PersonId, World,
};
use rand::seq::SliceRandom;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenWorld,
    TrainBase,
    Unlearn,
    Probe,
    Report,
    Sweep,
    SftAttack,
    Continual,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenWorld => "cmd_gen_world",
            Stage::TrainBase => "cmd_train_base",
            Stage::Unlearn => "cmd_unlearn",
            Stage::Probe => "cmd_probe",
            Stage::Report => "cmd_report",
            Stage::Sweep => "cmd_sweep",
            Stage::SftAttack => "cmd_sft_attack",
            Stage::Continual => "cmd_continual",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn world_dir(&self) -> PathBuf {
        self.root.join("world")
    }
    pub fn corpus(&self) -> PathBuf {
        self.world_dir().join("corpus.tsv")
    }
    pub fn checkpoint(&self, model: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{model}.ckpt"))
    }
    pub fn log(&self, file: &str) -> PathBuf {
        self.root.join("logs").join(file)
    }
    pub fn suite(&self) -> PathBuf {
        self.root.join("probes").join("suite.jsonl")
    }
    pub fn results(&self, model: &str) -> PathBuf {
        self.root.join("results").join(format!("{model}.jsonl"))
    }
    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join("report").join(file)
    }
    pub fn hashes(&self) -> PathBuf {
        self.root.join("hashes.tsv")
    }

    pub(crate) fn require(&self, path: PathBuf, stage: Stage) -> Result<PathBuf, HarnessError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(HarnessError::MissingStage {
                stage: stage.name(),
                path,
            })
        }
    }

    /// Rewrites `hashes.tsv` from the current contents of the directory.
    pub fn update_hashes(&self) -> Result<(), HarnessError> {
        let mut files = Vec::new();
        collect_files(&self.root, &mut files)?;
        files.sort();
        let mut out = String::new();
        for f in files {
            if f == self.hashes() {
                continue;
            }
            let digest = Sha256::digest(std::fs::read(&f)?);
            let rel = f.strip_prefix(&self.root).unwrap_or(&f);
            out.push_str(&format!("{}\t{}\n", hex::encode(digest), rel.display()));
        }
        std::fs::write(self.hashes(), out)?;
        Ok(())
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub(crate) fn ensure_parent(p: &Path) -> Result<(), HarnessError> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

pub(crate) fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    ensure_parent(p)?;
    std::fs::write(p, contents)?;
    Ok(())
}

fn post(stage: Stage, ok: bool, reason: impl FnOnce() -> String) -> Result<(), HarnessError> {
    if ok {
        Ok(())
    } else {
        Err(HarnessError::Postcondition {
            stage: stage.name(),
            reason: reason(),
        })
    }
}

/// Config, world and directory of a run whose world exists.
pub(crate) struct Ctx {
    pub dir: RunDir,
    pub cfg: ExperimentConfig,
    pub world: World,
}

impl Ctx {
    pub fn load(dir: &RunDir) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(dir.require(dir.config(), Stage::GenWorld)?)?;
        let cfg = ExperimentConfig::from_toml(&text)?;
        dir.require(dir.world_dir().join("world.tsv"), Stage::GenWorld)?;
        let world = read_world(&dir.world_dir())?;
        Ok(Ctx {
            dir: dir.clone(),
            cfg,
            world,
        })
    }

    pub fn model(&self, name: &str, stage: Stage) -> Result<Model, HarnessError> {
        let p = self.dir.require(self.dir.checkpoint(name), stage)?;
        Ok(load_checkpoint(&p, &self.world)?)
    }
}

pub fn build_model(cfg: &ExperimentConfig, world: &World) -> Result<Model, HarnessError> {
    Ok(match cfg.backend()? {
        Backend::Tabular => Model::Tabular(TabularModel::new(world)?),
        Backend::Transformer => Model::Transformer(TransformerModel::new(
            world.vocab(),
            cfg.transformer_config(),
        )?),
    })
}

fn save_verified(
    model: &Model,
    path: &Path,
    world: &World,
    stage: Stage,
) -> Result<(), HarnessError> {
    ensure_parent(path)?;
    save_checkpoint(model, path)?;
    let back = load_checkpoint(path, world)?;
    let same = back
        .params()
        .iter()
        .zip(model.params().iter())
        .all(|((na, a), (nb, b))| na == nb && a.data() == b.data());
    post(
        stage,
        same && back.params().len() == model.params().len(),
        || format!("checkpoint {} does not reload bit-exactly", path.display()),
    )
}

/// Writes the config echo, the world and its corpus.
pub fn cmd_gen_world(dir: &RunDir, config_text: &str) -> Result<String, HarnessError> {
    let cfg = ExperimentConfig::from_toml(config_text)?;
    std::fs::create_dir_all(&dir.root)?;
    write_file(&dir.config(), config_text)?;
    let world = generate_world(&cfg.world_config(), cfg.seeds.world)?;
    write_world(&world, &dir.world_dir())?;
    let corpus = render_corpus_with(
        &world,
        &cfg.render_options(),
        seeds::derive(cfg.seeds.world, &[1]),
    )?;
    let vocab = world.vocab();
    write_corpus(&corpus, &vocab, &dir.corpus())?;
    post(
        Stage::GenWorld,
        read_world(&dir.world_dir())? == world,
        || "world does not read back".into(),
    )?;
    post(
        Stage::GenWorld,
        read_corpus(&vocab, &dir.corpus())? == corpus,
        || "corpus does not read back".into(),
    )?;
    dir.update_hashes()?;
    Ok(format!(
        "world: {} persons, {} facts, vocab {}; corpus: {} sequences",
        world.persons.len(),
        world.facts.len(),
        vocab.len(),
        corpus.len()
    ))
}

#[derive(Serialize)]
struct TrainSummary {
    backend: String,
    n_params: usize,
    epoch_losses: Vec<f64>,
    qa_accuracy: f64,
    /// On fresh MCQs and Yes-No questions about every forget and retain
    /// person, drawn apart from the probe suite. Yes-No accuracy is
    /// balanced over gold Yes and gold No.
    mcq_accuracy: f64,
    yes_no_accuracy: f64,
}

fn format_accuracy<M: LanguageModel + ?Sized>(
    model: &M,
    world: &World,
    cfg: &ExperimentConfig,
) -> Result<(f64, f64), HarnessError> {
    let mut pc = cfg.probe_config();
    pc.seed = seeds::derive(cfg.seeds.train, &[2]);
    let mut qs = Vec::new();
    for &p in world.forget_ids.iter().chain(&world.retain_ids) {
        qs.extend(gen_mcq(
            world,
            p,
            &InTrainingAnswers::new(),
            pc.n_choices,
            pc.mcq_per_relation,
            pc.seed,
        )?);
        qs.extend(gen_yes_no(
            world,
            p,
            &InTrainingAnswers::new(),
            pc.retain_yes_no_negatives,
            pc.seed,
        )?);
    }
    let suite = ProbeSuite { questions: qs };
    let res = evaluate(model, &suite, 1)?;
    // Yes-No accuracy is balanced over gold Yes and gold No, since most
    // questions have gold No.
    let mut tally = [(0usize, 0usize); 3];
    for (q, r) in suite.questions.iter().zip(&res) {
        let (slot, hit) = match q.kind {
            ProbeKind::Mcq => (0, crate::metrics::argmax(&r.dist) == q.gold_index()),
            _ if q.gold == crate::vocab::YES => (1, r.dist[0] > 0.5),
            _ => (2, r.dist[0] <= 0.5),
        };
        tally[slot].0 += hit as usize;
        tally[slot].1 += 1;
    }
    let rate = |t: (usize, usize)| t.0 as f64 / t.1.max(1) as f64;
    Ok((rate(tally[0]), (rate(tally[1]) + rate(tally[2])) / 2.0))
}

/// Trains the base model on the corpus.
pub fn cmd_train_base(dir: &RunDir) -> Result<String, HarnessError> {
    let ctx = Ctx::load(dir)?;
    let corpus = read_corpus(
        &ctx.world.vocab(),
        &dir.require(dir.corpus(), Stage::GenWorld)?,
    )?;
    let mut model = build_model(&ctx.cfg, &ctx.world)?;
    let log = train_base(&mut model, &corpus, &ctx.cfg.train_config())?;
    let all: Vec<PersonId> = ctx.world.persons.iter().map(|p| p.id).collect();
    let qa_accuracy = answer_accuracy(&model, &qa_examples(&ctx.world, &all)?)?;
    let last = log.epoch_losses.last().copied().unwrap_or(f64::NAN);
    post(Stage::TrainBase, last.is_finite(), || {
        format!("final loss {last}")
    })?;
    save_verified(
        &model,
        &dir.checkpoint("base"),
        &ctx.world,
        Stage::TrainBase,
    )?;
    let (mcq_accuracy, yes_no_accuracy) = format_accuracy(&model, &ctx.world, &ctx.cfg)?;
    let summary = TrainSummary {
        backend: model.backend().to_string(),
        n_params: model.params().n_scalars(),
        epoch_losses: log.epoch_losses,
        qa_accuracy,
        mcq_accuracy,
        yes_no_accuracy,
    };
    write_file(
        &dir.log("train_base.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    dir.update_hashes()?;
    Ok(format!(
        "{} base model, {} parameters, final loss {last:.4}, accuracy: open QA {qa_accuracy:.3}, MCQ {mcq_accuracy:.3}, Yes-No {yes_no_accuracy:.3}",
        summary.backend, summary.n_params
    ))
}

pub(crate) const TAG_FORGET_MCQ: u64 = 10;
pub(crate) const TAG_MONITOR: u64 = 11;
pub(crate) const TAG_RETAIN_MCQ: u64 = 12;
pub(crate) const TAG_OBFUSCATION: u64 = 13;

/// DF-MCQ training MCQs about `targets`.
pub(crate) fn forget_mcqs(
    ctx: &Ctx,
    world: &World,
    targets: &[PersonId],
    paraphrase: bool,
) -> Result<Vec<McqItem>, HarnessError> {
    let u = &ctx.cfg.unlearn;
    let seed = seeds::derive(ctx.cfg.seeds.unlearn, &[TAG_FORGET_MCQ]);
    let mut provider = paraphrase
        .then(|| ParaphraseProvider::new(world, resolve_endpoint(&u.paraphrase_endpoint)));
    let mut out = Vec::new();
    for &p in targets {
        out.extend(match provider.as_mut() {
            Some(pp) => gen_training_mcqs_with(
                world,
                p,
                u.forget_mcqs_per_person,
                u.n_choices,
                seed,
                &mut |s| pp.rewrite(s),
            )?,
            None => gen_training_mcqs(world, p, u.forget_mcqs_per_person, u.n_choices, seed)?,
        });
    }
    if let Some(pp) = provider {
        log::info!("paraphrase: {:?}", pp.stats);
    }
    Ok(out)
}

/// Retain MCQs about background persons outside `exclude`.
pub(crate) fn retain_mcqs(
    ctx: &Ctx,
    world: &World,
    exclude: &[PersonId],
) -> Result<Vec<McqItem>, HarnessError> {
    let u = &ctx.cfg.unlearn;
    let seed = seeds::derive(ctx.cfg.seeds.unlearn, &[TAG_RETAIN_MCQ]);
    let mut out = Vec::new();
    for p in world
        .background_ids()
        .into_iter()
        .filter(|p| !exclude.contains(p))
    {
        out.extend(gen_training_mcqs(
            world,
            p,
            u.retain_mcqs_per_person,
            u.n_choices,
            seed,
        )?);
    }
    Ok(out)
}

pub(crate) fn monitor(
    ctx: &Ctx,
    world: &World,
    targets: &[PersonId],
) -> Result<Monitor, HarnessError> {
    let u = &ctx.cfg.unlearn;
    let seed = seeds::derive(ctx.cfg.seeds.unlearn, &[TAG_MONITOR]);
    let vocab = world.vocab();
    let mut m = Monitor {
        max_new_tokens: ctx.cfg.probe.max_new_tokens,
        ..Monitor::default()
    };
    for &p in targets {
        m.probe_items.extend(gen_training_mcqs(
            world,
            p,
            u.monitor_mcqs_per_person,
            u.n_choices,
            seed,
        )?);
        let name = world.person(p)?.full_name();
        let prompt = format!(
            "{} {}",
            crate::vocab::BOS,
            render::declarative_prefix(&world.relations[0], 0, &name)
        );
        m.free_prompts.push(vocab.tokenize(&prompt)?);
    }
    Ok(m)
}

/// Name-swapped donor passages for each target, `k` per target. Each target
/// gets `n_donors` background persons drawn with `seed`; few donors keep
/// most of every relation's objects out of training.
pub(crate) fn obfuscation_sets<M: LanguageModel + ?Sized>(
    world: &World,
    targets: &[PersonId],
    n_donors: usize,
    k: usize,
    seed: u64,
    teacher: &M,
) -> Result<(ObfuscationSet, BTreeMap<PersonId, InTrainingAnswers>), HarnessError> {
    let pool: Vec<PersonId> = world
        .background_ids()
        .into_iter()
        .filter(|p| !targets.contains(p))
        .collect();
    let mut all = ObfuscationSet::default();
    let mut per = BTreeMap::new();
    for &t in targets {
        let mut donors = pool.clone();
        donors.shuffle(&mut seeds::rng(seed, &[0xd0, t.0 as u64]));
        donors.truncate(n_donors);
        let s = make_obfuscation_samples(
            world,
            t,
            &donors,
            k,
            seeds::derive(seed, &[t.0 as u64]),
            teacher,
        )?;
        all.samples.extend(s.samples);
        all.targets.extend(s.targets);
        per.insert(t, s.in_training);
    }
    Ok((all, per))
}

pub(crate) fn obfuscation_seed(cfg: &ExperimentConfig) -> u64 {
    seeds::derive(cfg.seeds.unlearn, &[TAG_OBFUSCATION])
}

/// Runs one unlearning method from the base checkpoint.
pub fn cmd_unlearn(dir: &RunDir, method: Method) -> Result<String, HarnessError> {
    let ctx = Ctx::load(dir)?;
    let base = ctx.model("base", Stage::TrainBase)?;
    let mut model = base.clone();
    let mc = ctx.cfg.method_config(method);
    let w = &ctx.world;
    let log: UnlearnLog = match method {
        Method::DfMcq => {
            let f = forget_mcqs(&ctx, w, &w.forget_ids, ctx.cfg.unlearn.paraphrase)?;
            let r = retain_mcqs(&ctx, w, &[])?;
            run_df_mcq(&mut model, &f, &r, &mc, &monitor(&ctx, w, &w.forget_ids)?)?
        }
        Method::WhpPlusStyle => {
            let (set, _) = obfuscation_sets(
                w,
                &w.forget_ids,
                ctx.cfg.unlearn.n_donors,
                mc.n_obfuscation_samples,
                obfuscation_seed(&ctx.cfg),
                &base,
            )?;
            run_obfuscation(&mut model, &set, &mc)?
        }
        Method::Npo => run_npo(&mut model, &qa_examples(w, &w.forget_ids)?, &base, &mc)?,
        Method::GradAscent => run_gradient_ascent(
            &mut model,
            &qa_examples(w, &w.forget_ids)?,
            &qa_examples(w, &w.retain_ids)?,
            &mc,
        )?,
    };
    let stage = Stage::Unlearn;
    post(stage, !log.epochs.is_empty(), || {
        "no epoch completed".into()
    })?;
    post(
        stage,
        log.epochs.iter().all(|e| e.total.is_finite()),
        || "non-finite loss in log".into(),
    )?;
    save_verified(&model, &dir.checkpoint(&method.to_string()), w, stage)?;
    write_file(&dir.log(&format!("{method}.jsonl")), log.to_jsonl())?;
    dir.update_hashes()?;
    let last = log.epochs.last().expect("checked non-empty");
    Ok(format!(
        "{method}: {} epochs{}, final loss {:.4}, probe entropy {}",
        log.epochs.len(),
        if log.stopped_early {
            " (stopped early)"
        } else {
            ""
        },
        last.total,
        last.probe_entropy
            .map_or("n/a".into(), |h| format!("{h:.4}"))
    ))
}

/// The probe suite of a run: obfuscation material decides the in-training
/// split for every method.
pub(crate) fn build_suite(ctx: &Ctx, base: &Model) -> Result<ProbeSuite, HarnessError> {
    let k = ctx
        .cfg
        .method_config(Method::WhpPlusStyle)
        .n_obfuscation_samples;
    let (_, used) = obfuscation_sets(
        &ctx.world,
        &ctx.world.forget_ids,
        ctx.cfg.unlearn.n_donors,
        k,
        obfuscation_seed(&ctx.cfg),
        base,
    )?;
    Ok(ProbeSuite::build(
        &ctx.world,
        &used,
        &ctx.cfg.probe_config(),
    )?)
}

fn check_results(suite: &ProbeSuite, results: &[ProbeResult]) -> bool {
    results.len() == suite.questions.len()
        && results
            .iter()
            .zip(&suite.questions)
            .all(|(r, q)| match q.kind {
                ProbeKind::OpenEnded => r.output.is_some(),
                _ => {
                    let s: f64 = r.dist.iter().sum();
                    !r.dist.is_empty()
                        && (s - 1.0).abs() < 1e-9
                        && r.dist.iter().all(|p| (0.0..=1.0).contains(p))
                }
            })
}

/// Builds the probe suite and records every available model's answers.
pub fn cmd_probe(dir: &RunDir) -> Result<String, HarnessError> {
    let ctx = Ctx::load(dir)?;
    let base = ctx.model("base", Stage::TrainBase)?;
    let methods = ctx.cfg.methods()?;
    let present: Vec<Method> = methods
        .iter()
        .copied()
        .filter(|m| dir.checkpoint(&m.to_string()).exists())
        .collect();
    if present.is_empty() {
        return Err(HarnessError::MissingStage {
            stage: Stage::Unlearn.name(),
            path: dir.root.join("checkpoints").join("<method>.ckpt"),
        });
    }
    let suite = build_suite(&ctx, &base)?;
    ensure_parent(&dir.suite())?;
    suite.save(&dir.suite())?;
    let mut lines = vec![format!("suite: {} probes", suite.questions.len())];
    let mut models = vec![("base".to_string(), base)];
    for m in present {
        models.push((m.to_string(), ctx.model(&m.to_string(), Stage::Unlearn)?));
    }
    for (name, model) in &models {
        let results = evaluate(model, &suite, ctx.cfg.probe.max_new_tokens)?;
        post(Stage::Probe, check_results(&suite, &results), || {
            format!("malformed results for {name}")
        })?;
        ensure_parent(&dir.results(name))?;
        write_results(&results, &dir.results(name))?;
        lines.push(format!("{name}: {} answers", results.len()));
    }
    for m in methods
        .iter()
        .filter(|m| !dir.checkpoint(&m.to_string()).exists())
    {
        lines.push(format!("{m}: skipped, no checkpoint"));
    }
    dir.update_hashes()?;
    Ok(lines.join("\n"))
}

/// Loads the suite and raw results of every configured model.
pub(crate) fn load_results(
    ctx: &Ctx,
) -> Result<(ProbeSuite, Vec<(String, Option<Vec<ProbeResult>>)>), HarnessError> {
    let dir = &ctx.dir;
    let suite = ProbeSuite::load(&dir.require(dir.suite(), Stage::Probe)?)?;
    dir.require(dir.results("base"), Stage::Probe)?;
    let mut names = vec!["base".to_string()];
    names.extend(ctx.cfg.methods()?.iter().map(|m| m.to_string()));
    let mut out = Vec::new();
    for n in names {
        let p = dir.results(&n);
        out.push((
            n,
            if p.exists() {
                Some(read_results(&p)?)
            } else {
                None
            },
        ));
    }
    Ok((suite, out))
}

/// Writes the metric CSV and the markdown report.
pub fn cmd_report(dir: &RunDir) -> Result<String, HarnessError> {
    let ctx = Ctx::load(dir)?;
    let (suite, results) = load_results(&ctx)?;
    let mcq_material = forget_mcqs(&ctx, &ctx.world, &ctx.world.forget_ids, false)?;
    let rows = report::all_rows(&ctx.world.vocab(), &suite, &results, &mcq_material)?;
    let csv_path = dir.report("metrics.csv");
    ensure_parent(&csv_path)?;
    report::write_metric_csv(&rows, &csv_path)?;
    post(
        Stage::Report,
        report::read_metric_csv(&csv_path)? == rows,
        || "metrics.csv does not parse back".into(),
    )?;
    let md = report::markdown(&ctx, &rows)?;
    write_file(&dir.report("report.md"), md)?;
    dir.update_hashes()?;
    let skipped = rows.iter().filter(|r| !r.is_ok()).count();
    Ok(format!("{} metric rows ({skipped} skipped)", rows.len()))
}

/// gen-world, train-base, every configured method, probe and report.
pub fn run_pipeline(dir: &RunDir, config_text: &str) -> Result<Vec<String>, HarnessError> {
    let mut out = vec![cmd_gen_world(dir, config_text)?, cmd_train_base(dir)?];
    let cfg = ExperimentConfig::from_toml(config_text)?;
    for m in cfg.methods()? {
        out.push(cmd_unlearn(dir, m)?);
    }
    out.push(cmd_probe(dir)?);
    out.push(cmd_report(dir)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_name_their_missing_prerequisite() {
        let t = tempfile::tempdir().unwrap();
        let dir = RunDir::new(t.path());
        let e = cmd_train_base(&dir).unwrap_err();
        assert!(e.to_string().contains("cmd_gen_world"), "{e}");
        cmd_gen_world(&dir, "[run]\nbackend = \"tabular\"\n").unwrap();
        let e = cmd_unlearn(&dir, Method::DfMcq).unwrap_err();
        assert!(e.to_string().contains("cmd_train_base"), "{e}");
        let e = cmd_report(&dir).unwrap_err();
        assert!(e.to_string().contains("cmd_probe"), "{e}");
    }

    #[test]
    fn hashes_cover_every_file() {
        let t = tempfile::tempdir().unwrap();
        let dir = RunDir::new(t.path());
        cmd_gen_world(&dir, "").unwrap();
        let text = std::fs::read_to_string(dir.hashes()).unwrap();
        let names: Vec<&str> = text
            .lines()
            .map(|l| l.split('\t').nth(1).unwrap())
            .collect();
        assert_eq!(
            names,
            [
                "config.toml",
                "world/corpus.tsv",
                "world/world.header",
                "world/world.tsv"
            ]
        );
    }
}
