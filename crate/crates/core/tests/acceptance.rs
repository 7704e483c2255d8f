//! Acceptance run: one PASS/FAIL line per criterion with the measured
//! numbers. The process exits 0 after printing so that a failing criterion
//! is visible without hiding the others; set `ACCEPTANCE_STRICT=1` to turn
//! any failure into a non-zero exit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::{Duration, Instant};
use unlearnlab::harness::{
    cmd_continual, cmd_sft_attack, cmd_sweep, grad_check_suite, read_metric_csv, run_pipeline,
    ExperimentConfig, MetricRow, RunDir,
};
use unlearnlab::lm::{
    choice_distributions, train_base, AdamConfig, ChoiceQuery, LanguageModel, Model, TabularModel,
    TrainConfig,
};
use unlearnlab::metrics::{entropy, rouge_l_recall};
use unlearnlab::probes::{gen_mcq, gen_training_mcqs, InTrainingAnswers, ProbeQuestion};
use unlearnlab::unlearn::{
    make_obfuscation_samples, retain_loss, run_df_mcq, run_obfuscation, McqItem, Method,
    MethodConfig, Monitor,
};
use unlearnlab::worldgen::{generate_world, render_corpus, World, WorldConfig};

const C: usize = 5;

struct Outcome {
    lines: Vec<(usize, bool, String)>,
}

impl Outcome {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        println!(
            "criterion {n}: {} | {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        self.lines.push((n, pass, detail));
    }
}

fn ln_c() -> f64 {
    (C as f64).ln()
}

// ------------------------------------------------------------------ 1

/// LCS length by enumerating every subsequence of the shorter input.
fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<u8> = (0..short.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| short[i])
            .collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = long.iter();
        if sub.iter().all(|x| it.any(|y| y == x)) {
            best = sub.len();
        }
    }
    best
}

fn criterion_1(out: &mut Outcome) {
    let h2 = entropy(&[0.5, 0.5]).unwrap().value;
    let h5 = entropy(&[0.2; 5]).unwrap().value;
    let e_ok = (h2 - 2f64.ln()).abs() <= 1e-9 && (h5 - 5f64.ln()).abs() <= 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let la = rng.random_range(0..9);
        let lb = rng.random_range(1..9);
        let a: Vec<u8> = (0..la).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<u8> = (0..lb).map(|_| rng.random_range(0..4)).collect();
        let expect = lcs_brute(&a, &b) as f64 / b.len() as f64;
        if rouge_l_recall(&a, &b).unwrap() != expect {
            mismatches += 1;
        }
    }
    out.record(
        1,
        e_ok && mismatches == 0,
        format!("H(uniform2) - ln2 = {:.1e}, H(uniform5) - ln5 = {:.1e}; ROUGE-L mismatches {mismatches}/1000", h2 - 2f64.ln(), h5 - 5f64.ln()),
    );
}

// ------------------------------------------------------------------ 2

fn criterion_2(out: &mut Outcome) {
    let lines = grad_check_suite(0, 32).expect("grad check runs");
    let worst = lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    let pass = lines.len() == 8 && worst <= 1e-4;
    let detail: Vec<String> = lines
        .iter()
        .map(|l| format!("{}/{} {:.1e}", l.backend, l.loss, l.max_rel_error))
        .collect();
    out.record(
        2,
        pass,
        format!(
            "max relative error {worst:.2e} (tolerance 1e-4): {}",
            detail.join(", ")
        ),
    );
}

// ------------------------------------------------------------ 3 and 7

struct Tabular {
    world: World,
    base: Model,
    forget_probes: Vec<ProbeQuestion>,
    retain_probes: Vec<McqItem>,
}

fn probe_items(qs: &[ProbeQuestion], world: &World) -> Vec<McqItem> {
    let v = world.vocab();
    qs.iter()
        .map(|q| McqItem {
            question: q.prompt.clone(),
            choice_letters: v.letters(q.choices.len()),
            choice_texts: q.choices.clone(),
            origin: unlearnlab::unlearn::McqOrigin::Probe,
            subject: Some(q.target),
            relation: Some(q.relation.clone()),
        })
        .collect()
}

fn mean_entropy<M: LanguageModel + ?Sized>(m: &M, qs: &[ProbeQuestion]) -> f64 {
    let v = m.vocab();
    let queries: Vec<ChoiceQuery> = qs
        .iter()
        .map(|q| ChoiceQuery {
            prompt: q.prompt.clone(),
            letters: v.letters(q.choices.len()),
        })
        .collect();
    let d = choice_distributions(m, &queries).unwrap();
    d.iter().map(|p| entropy(p).unwrap().value).sum::<f64>() / d.len() as f64
}

fn train_tabular(world: &World, train_world: &World) -> Model {
    let mut m = Model::Tabular(TabularModel::new(world).unwrap());
    let corpus = render_corpus(train_world, 2, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 32,
        adam: AdamConfig {
            lr: 0.05,
            ..Default::default()
        },
        seed: 2,
        target_loss: None,
    };
    train_base(&mut m, &corpus, &cfg).unwrap();
    m
}

fn tabular_setup() -> Tabular {
    let world = generate_world(&WorldConfig::default(), 31).unwrap();
    let base = train_tabular(&world, &world);
    let none = InTrainingAnswers::new();
    let mut forget_probes = Vec::new();
    for &p in &world.forget_ids {
        forget_probes.extend(gen_mcq(&world, p, &none, C, 4, 9).unwrap());
    }
    let mut retain_q = Vec::new();
    for &p in &world.retain_ids {
        retain_q.extend(gen_mcq(&world, p, &none, C, 4, 9).unwrap());
    }
    let retain_probes = probe_items(&retain_q, &world);
    Tabular {
        world,
        base,
        forget_probes,
        retain_probes,
    }
}

fn tabular_df_mcq(t: &Tabular) -> Model {
    let w = &t.world;
    let mut forget = Vec::new();
    for &p in &w.forget_ids {
        forget.extend(gen_training_mcqs(w, p, 60, C, 5).unwrap());
    }
    let mut retain = Vec::new();
    for p in w.background_ids() {
        retain.extend(gen_training_mcqs(w, p, 12, C, 6).unwrap());
    }
    let cfg = MethodConfig {
        epochs: 40,
        lr: 0.05,
        early_stop_entropy: 1.0,
        ..MethodConfig::default_for(Method::DfMcq)
    };
    let mut m = t.base.clone();
    run_df_mcq(&mut m, &forget, &retain, &cfg, &Monitor::default()).unwrap();
    m
}

fn criterion_3(out: &mut Outcome, t: &Tabular, df: &Model) {
    let h = mean_entropy(df, &t.forget_probes);
    let n = t.retain_probes.len() as f64;
    let kl = retain_loss(df, &t.base, &t.retain_probes).unwrap() / n;
    out.record(
        3,
        h >= 0.99 * ln_c() && kl <= 0.01,
        format!("tabular forget MCQ entropy {h:.4} (need >= {:.4}); mean retain KL {kl:.2e} (need <= 0.01)", 0.99 * ln_c()),
    );
}

fn criterion_7(out: &mut Outcome, t: &Tabular, df: &Model) {
    let w = &t.world;
    // Obfuscation: donor passages renamed onto each forget person.
    let donors: Vec<_> = w.background_ids().into_iter().take(2).collect();
    let mut obf = t.base.clone();
    for &p in &w.forget_ids {
        let set = make_obfuscation_samples(w, p, &donors, 48, 3, &t.base).unwrap();
        let cfg = MethodConfig {
            epochs: 10,
            lr: 0.05,
            ..MethodConfig::default_for(Method::WhpPlusStyle)
        };
        run_obfuscation(&mut obf, &set, &cfg).unwrap();
    }
    // Retrained: same architecture, corpus without the forget persons' facts.
    let mut kept = w.clone();
    kept.facts.retain(|f| !w.forget_ids.contains(&f.subject));
    let retrained = train_tabular(w, &kept);
    let h_obf = mean_entropy(&obf, &t.forget_probes);
    let h_re = mean_entropy(&retrained, &t.forget_probes);
    let h_df = mean_entropy(df, &t.forget_probes);
    out.record(
        7,
        h_obf < h_re && h_re <= h_df + 0.05,
        format!("tabular forget MCQ entropy: obfuscated {h_obf:.4} < retrained {h_re:.4} <= DF-MCQ {h_df:.4} + 0.05"),
    );
}

// ---------------------------------------------------------- 4, 5, 6, 8

fn row<'a>(rows: &'a [MetricRow], method: &str, probe: &str, split: &str) -> Option<&'a MetricRow> {
    rows.iter().find(|r| {
        r.method == method
            && r.probe == probe
            && r.split == split
            && r.labeling == "obfuscation"
            && r.subset == "all"
            && r.is_ok()
    })
}

fn val(r: Option<&MetricRow>, f: impl Fn(&MetricRow) -> Option<f64>) -> f64 {
    r.and_then(f).unwrap_or(f64::NAN)
}

fn criterion_4(out: &mut Outcome, rows: &[MetricRow], elapsed: Duration) {
    let base_acc = val(row(rows, "base", "mcq", "reference"), |r| r.accuracy);
    let df = row(rows, "df_mcq", "mcq", "reference");
    let obf = row(rows, "whp_plus_style", "mcq", "reference");
    let (df_h, df_acc, df_p) = (
        val(df, |r| r.entropy),
        val(df, |r| r.accuracy),
        val(df, |r| r.p_obf_choice),
    );
    let (obf_h, obf_p) = (val(obf, |r| r.entropy), val(obf, |r| r.p_obf_choice));
    let checks = [
        base_acc >= 0.9,
        df_h >= 0.9 * ln_c(),
        df_acc <= 1.5 / C as f64,
        obf_h < df_h,
        obf_p > df_p,
        elapsed <= Duration::from_secs(600),
    ];
    out.record(
        4,
        checks.iter().all(|c| *c),
        format!(
            "transformer base forget MCQ accuracy {base_acc:.3} (need >= 0.9); DF-MCQ entropy {df_h:.3} (need >= {:.3}), accuracy {df_acc:.3} (need <= {:.3}); obfuscation entropy {obf_h:.3} < {df_h:.3}: {}; P(c_obf) {obf_p:.3} > {df_p:.3}: {}; pipeline {:.0}s (limit 600s)",
            0.9 * ln_c(),
            1.5 / C as f64,
            obf_h < df_h,
            obf_p > df_p,
            elapsed.as_secs_f64()
        ),
    );
}

fn criterion_5(out: &mut Outcome, rows: &[MetricRow]) {
    let df = val(row(rows, "df_mcq", "open_ended", "reference"), |r| {
        r.refusal_rate
    });
    let obf = val(
        row(rows, "whp_plus_style", "open_ended", "reference"),
        |r| r.refusal_rate,
    );
    let ret = val(row(rows, "df_mcq", "open_ended", "retain"), |r| {
        r.refusal_rate
    });
    out.record(
        5,
        df >= 0.7 && obf <= 0.1 && ret <= 0.1,
        format!("refusal rate: DF-MCQ forget {df:.3} (need >= 0.7), obfuscation forget {obf:.3} (need <= 0.1), DF-MCQ retain {ret:.3} (need <= 0.1)"),
    );
}

fn criterion_6(out: &mut Outcome, rows: &[MetricRow], dir: &RunDir) {
    let t0 = Instant::now();
    let (cells, summary) = cmd_sweep(dir).expect("sweep runs");
    let elapsed = t0.elapsed();
    let base_y = val(row(rows, "base", "yes_no", "out_of_training"), |r| {
        r.yes_rate
    });
    let obf_y = val(
        row(rows, "whp_plus_style", "yes_no", "out_of_training"),
        |r| r.yes_rate,
    );
    let hs: Vec<f64> = ["reference", "in_training", "out_of_training"]
        .iter()
        .map(|s| val(row(rows, "df_mcq", "yes_no", s), |r| r.entropy))
        .collect();
    let h_ok = hs.iter().all(|h| *h >= 0.85 * 2f64.ln());
    // A zero base rate would make the ratio test vacuous; the obfuscated
    // rate must also exceed it.
    let y_ok = obf_y >= 2.0 * base_y && obf_y > base_y;
    let r = summary.pearson_r.unwrap_or(f64::NAN);
    let s_ok = summary.n_ok >= 9 && r >= 0.5;
    out.record(
        6,
        y_ok && h_ok && s_ok && elapsed <= Duration::from_secs(1800),
        format!(
            "out-of-training yes rate: obfuscated {obf_y:.3} vs base {base_y:.3} (need >= 2x); DF-MCQ Yes-No entropy {:.3}/{:.3}/{:.3} (need >= {:.3}); sweep r = {r:.3} over {} of {} cells (need >= 0.5 over >= 9); monotone rows {}/{}; sweep {:.0}s",
            hs[0],
            hs[1],
            hs[2],
            0.85 * 2f64.ln(),
            summary.n_ok,
            cells.len(),
            summary.monotone_rows,
            summary.n_rows,
            elapsed.as_secs_f64()
        ),
    );
}

fn criterion_8(out: &mut Outcome, dir: &RunDir) {
    let t0 = Instant::now();
    let sft = cmd_sft_attack(dir, Method::DfMcq).expect("sft attack runs");
    let cont = cmd_continual(dir).expect("continual runs");
    let elapsed = t0.elapsed();
    let before = &sft[0];
    let after = &sft[1];
    let sft_ok = after.forget_mcq_entropy >= 0.85 * ln_c();
    let min_h = cont
        .iter()
        .map(|r| r.mcq_entropy)
        .fold(f64::INFINITY, f64::min);
    let base_hard = cont[0].base_hard_retain_accuracy;
    let min_hard = cont
        .iter()
        .map(|r| r.hard_retain_accuracy)
        .fold(f64::INFINITY, f64::min);
    let stages = cont.iter().map(|r| r.stage).max().unwrap_or(0);
    out.record(
        8,
        sft_ok && min_h >= 0.85 * ln_c() && base_hard - min_hard <= 0.15 && stages >= 5 && elapsed <= Duration::from_secs(1200),
        format!(
            "after SFT forget MCQ entropy {:.3} (before {:.3}, need >= {:.3}), forget ROUGE-L {:.3} -> {:.3}, refusal {:.3} -> {:.3}; continual over {stages} targets min entropy {min_h:.3}, hard retain accuracy min {min_hard:.3} vs base {base_hard:.3} (need within 0.15); {:.0}s",
            after.forget_mcq_entropy,
            before.forget_mcq_entropy,
            0.85 * ln_c(),
            before.forget_rouge_l,
            after.forget_rouge_l,
            before.forget_refusal_rate,
            after.forget_refusal_rate,
            elapsed.as_secs_f64()
        ),
    );
}

// ------------------------------------------------------------------ 9

const SMALL: &str = "[model]\nd_model = 16\nn_layers = 1\nn_heads = 2\n[train]\nepochs = 2\n[sweep]\nlrs = \"0.001,0.002\"\nsample_counts = \"6,12\"\n";

fn csv_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(root.join("report"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn criterion_9(out: &mut Outcome) {
    let mut runs = Vec::new();
    for _ in 0..2 {
        let t = tempfile::tempdir().unwrap();
        let dir = RunDir::new(t.path());
        run_pipeline(&dir, SMALL).unwrap();
        cmd_sweep(&dir).unwrap();
        runs.push(csv_files(t.path()));
    }
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    out.record(
        9,
        runs[0] == runs[1] && names.len() >= 2,
        format!(
            "report CSVs {names:?} byte-identical across two runs: {}",
            runs[0] == runs[1]
        ),
    );
}

fn main() {
    let mut out = Outcome { lines: Vec::new() };
    criterion_1(&mut out);
    criterion_2(&mut out);
    let tab = tabular_setup();
    let df = tabular_df_mcq(&tab);
    criterion_3(&mut out, &tab, &df);

    let t = tempfile::tempdir().unwrap();
    let dir = RunDir::new(t.path());
    let t0 = Instant::now();
    let config = ExperimentConfig::default().to_toml();
    for line in run_pipeline(&dir, &config).expect("default pipeline runs") {
        println!("  {}", line.replace('\n', "\n  "));
    }
    let elapsed = t0.elapsed();
    let rows = read_metric_csv(&dir.report("metrics.csv")).unwrap();
    criterion_4(&mut out, &rows, elapsed);
    criterion_5(&mut out, &rows);
    criterion_6(&mut out, &rows, &dir);
    criterion_7(&mut out, &tab, &df);
    criterion_8(&mut out, &dir);
    criterion_9(&mut out);

    let failed: Vec<usize> = out.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    println!(
        "acceptance: {} of {} criteria pass; failing: {failed:?}",
        out.lines.len() - failed.len(),
        out.lines.len()
    );
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
