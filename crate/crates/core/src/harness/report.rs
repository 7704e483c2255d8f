//! Metric tables: the CSV that parses back into [`MetricRow`]s and the
//! markdown summary.

use super::eval::{expected_splits, metric_rows, MetricRow, ProbeResult};
use super::pipeline::Ctx;
use super::protocols::{read_csv, ContinualRow, SftRow, SweepCell, SweepSummary};
use super::HarnessError;
use crate::probes::{alternate_split, ProbeKind, ProbeSuite};
use crate::unlearn::McqItem;
use crate::vocab::Vocab;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

pub const OBFUSCATION_LABELS: &str = "obfuscation";
pub const MCQ_LABELS: &str = "mcq_material";

/// Every row of the report. Models without results get skipped rows for
/// each probe family and split.
pub(crate) fn all_rows(
    vocab: &Vocab,
    suite: &ProbeSuite,
    results: &[(String, Option<Vec<ProbeResult>>)],
    mcq_material: &[McqItem],
) -> Result<Vec<MetricRow>, HarnessError> {
    let relabeled = alternate_split(mcq_material, &suite.questions);
    let mut rows = Vec::new();
    for (name, res) in results {
        match res {
            Some(r) => {
                rows.extend(metric_rows(
                    vocab,
                    name,
                    OBFUSCATION_LABELS,
                    &suite.questions,
                    r,
                )?);
                rows.extend(
                    metric_rows(vocab, name, MCQ_LABELS, &relabeled, r)?
                        .into_iter()
                        .filter(|row| {
                            row.probe == "yes_no"
                                && (row.split == "in_training" || row.split == "out_of_training")
                        }),
                );
            }
            None => {
                let note = format!("no results; run cmd_unlearn --method {name} and cmd_probe");
                for kind in [ProbeKind::OpenEnded, ProbeKind::YesNo, ProbeKind::Mcq] {
                    for &split in expected_splits(kind) {
                        rows.push(MetricRow::skipped(
                            name,
                            kind,
                            split,
                            OBFUSCATION_LABELS,
                            "all",
                            &note,
                        ));
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_metric_csv(rows: &[MetricRow], path: &Path) -> Result<(), HarnessError> {
    super::protocols::write_csv(rows, path)
}

pub fn read_metric_csv(path: &Path) -> Result<Vec<MetricRow>, HarnessError> {
    read_csv(path)
}

fn find<'a>(
    rows: &'a [MetricRow],
    method: &str,
    probe: &str,
    split: &str,
    labeling: &str,
    subset: &str,
) -> Option<&'a MetricRow> {
    rows.iter().find(|r| {
        r.method == method
            && r.probe == probe
            && r.split == split
            && r.labeling == labeling
            && r.subset == subset
    })
}

fn pct(x: Option<f64>) -> String {
    x.map_or("skipped".into(), |v| format!("{:.1}", 100.0 * v))
}

fn acc_entropy(r: Option<&MetricRow>) -> String {
    match r {
        Some(r) if r.is_ok() => format!(
            "{:.3} ({:.3})",
            r.accuracy.unwrap_or(f64::NAN),
            r.entropy.unwrap_or(f64::NAN)
        ),
        _ => "skipped".into(),
    }
}

fn methods(rows: &[MetricRow]) -> Vec<String> {
    let mut m: Vec<String> = Vec::new();
    for r in rows {
        if !m.contains(&r.method) {
            m.push(r.method.clone());
        }
    }
    m
}

fn ok_field(r: Option<&MetricRow>, f: impl Fn(&MetricRow) -> Option<f64>) -> Option<f64> {
    r.filter(|r| r.is_ok()).and_then(f)
}

fn opt3(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.3}"))
}

pub(crate) fn markdown(ctx: &Ctx, rows: &[MetricRow]) -> Result<String, HarnessError> {
    let mut s = String::new();
    let cfg_text = std::fs::read(ctx.dir.config())?;
    let seeds = &ctx.cfg.seeds;
    let _ = writeln!(s, "# Unlearning run report\n");
    let _ = writeln!(
        s,
        "backend `{}`, crate {} | seeds: world {}, train {}, unlearn {}, probe-shuffle {}, sweep {} | config sha256 `{}`\n",
        ctx.cfg.run.backend,
        env!("CARGO_PKG_VERSION"),
        seeds.world,
        seeds.train,
        seeds.unlearn,
        seeds.probe_shuffle,
        seeds.sweep,
        hex::encode(Sha256::digest(&cfg_text))
    );
    let ms = methods(rows);
    let o = OBFUSCATION_LABELS;

    let _ = writeln!(s, "## Forgetting and retention (open-ended, ×100)\n");
    let _ = writeln!(
        s,
        "| Method | Forget↓ | Retain↑ | HardRetain↑ | Refusal↑ |\n|---|---|---|---|---|"
    );
    for m in &ms {
        let open = |split: &str| find(rows, m, "open_ended", split, o, "all");
        let _ = writeln!(
            s,
            "| {m} | {} | {} | {} | {} |",
            pct(ok_field(open("reference"), |r| r.rouge_l)),
            pct(ok_field(open("retain"), |r| r.rouge_l)),
            pct(ok_field(open("hard_retain"), |r| r.rouge_l)),
            pct(ok_field(open("reference"), |r| r.refusal_rate)),
        );
    }

    for (title, labeling) in [
        ("Yes-No probes, accuracy (entropy in nats)", o),
        (
            "Yes-No probes relabeled by DF-MCQ training choices",
            MCQ_LABELS,
        ),
    ] {
        let _ = writeln!(s, "\n## {title}\n");
        let _ = writeln!(s, "| Method | reference | in_training | out_of_training | retain | yes rate (oot) |\n|---|---|---|---|---|---|");
        for m in &ms {
            let yn = |split: &str, lab: &str| find(rows, m, "yes_no", split, lab, "all");
            let _ = writeln!(
                s,
                "| {m} | {} | {} | {} | {} | {} |",
                acc_entropy(yn("reference", o)),
                acc_entropy(yn("in_training", labeling)),
                acc_entropy(yn("out_of_training", labeling)),
                acc_entropy(yn("retain", o)),
                opt3(ok_field(yn("out_of_training", labeling), |r| r.yes_rate)),
            );
        }
    }

    let _ = writeln!(s, "\n## MCQ probes, accuracy (entropy in nats)\n");
    let _ = writeln!(
        s,
        "| Method | forget | P(c_obf) | retain | hard retain |\n|---|---|---|---|---|"
    );
    for m in &ms {
        let mcq = |split: &str| find(rows, m, "mcq", split, o, "all");
        let _ = writeln!(
            s,
            "| {m} | {} | {} | {} | {} |",
            acc_entropy(mcq("reference")),
            opt3(ok_field(mcq("reference"), |r| r.p_obf_choice)),
            acc_entropy(mcq("retain")),
            acc_entropy(mcq("hard_retain")),
        );
    }

    let _ = writeln!(s, "\n## Per-target breakdown\n");
    let _ = writeln!(s, "| Method | Target | Forget↓ | Refusal↑ | MCQ forget | YN yes rate (oot) |\n|---|---|---|---|---|---|");
    let mut subsets: Vec<&str> = rows
        .iter()
        .map(|r| r.subset.as_str())
        .filter(|x| x.starts_with("person_"))
        .collect();
    subsets.sort();
    subsets.dedup();
    for m in &ms {
        for sub in &subsets {
            let open = find(rows, m, "open_ended", "reference", o, sub);
            if open.is_none() {
                continue;
            }
            let _ = writeln!(
                s,
                "| {m} | {sub} | {} | {} | {} | {} |",
                pct(ok_field(open, |r| r.rouge_l)),
                pct(ok_field(open, |r| r.refusal_rate)),
                acc_entropy(find(rows, m, "mcq", "reference", o, sub)),
                opt3(ok_field(
                    find(rows, m, "yes_no", "out_of_training", o, sub),
                    |r| r.yes_rate
                )),
            );
        }
    }

    let skipped: Vec<&MetricRow> = rows
        .iter()
        .filter(|r| !r.is_ok() && r.subset == "all")
        .collect();
    if !skipped.is_empty() {
        let _ = writeln!(s, "\n## Skipped cells\n");
        for r in skipped {
            let _ = writeln!(s, "- {} {} {}: {}", r.method, r.probe, r.split, r.note);
        }
    }

    let dir = &ctx.dir;
    if dir.report("sweep.csv").exists() {
        let cells: Vec<SweepCell> = read_csv(&dir.report("sweep.csv"))?;
        let _ = writeln!(s, "\n## Obfuscation sweep\n");
        let _ = writeln!(
            s,
            "| lr | samples | yes rate (oot) | efficacy | status |\n|---|---|---|---|---|"
        );
        for c in &cells {
            let status = if c.status == "ok" {
                c.status.clone()
            } else {
                format!("{}: {}", c.status, c.reason)
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {status} |",
                c.lr,
                c.n_samples,
                opt3(c.yes_rate_oot),
                opt3(c.efficacy)
            );
        }
        if let Some(sum) = read_csv::<SweepSummary>(&dir.report("sweep_summary.csv"))?.first() {
            let _ = writeln!(
                s,
                "\nPearson r (yes rate vs efficacy) over {} cells: {}. Yes rate nondecreasing in {}/{} rows.",
                sum.n_ok,
                opt3(sum.pearson_r),
                sum.monotone_rows,
                sum.n_rows
            );
        }
    }
    if dir.report("sft_attack.csv").exists() {
        let rows: Vec<SftRow> = read_csv(&dir.report("sft_attack.csv"))?;
        let _ = writeln!(s, "\n## Fine-tuning attack on retain QA\n");
        let _ = writeln!(s, "| Model | Phase | Forget ROUGE-L | Refusal | MCQ entropy | MCQ accuracy | Retain ROUGE-L |\n|---|---|---|---|---|---|---|");
        for r in rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |",
                r.model,
                r.phase,
                r.forget_rouge_l,
                r.forget_refusal_rate,
                r.forget_mcq_entropy,
                r.forget_mcq_accuracy,
                r.retain_rouge_l
            );
        }
    }
    if dir.report("continual.csv").exists() {
        let rows: Vec<ContinualRow> = read_csv(&dir.report("continual.csv"))?;
        let _ = writeln!(s, "\n## Continual unlearning\n");
        let _ = writeln!(s, "| Stage | Target | MCQ entropy | MCQ accuracy | Hard retain acc | Base hard retain acc |\n|---|---|---|---|---|---|");
        for r in rows {
            let _ = writeln!(
                s,
                "| {} | p{} | {:.3} | {:.3} | {:.3} | {:.3} |",
                r.stage,
                r.target,
                r.mcq_entropy,
                r.mcq_accuracy,
                r.hard_retain_accuracy,
                r.base_hard_retain_accuracy
            );
        }
    }
    Ok(s)
}
