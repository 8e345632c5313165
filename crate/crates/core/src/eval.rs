//! Held-out evaluation and the recovery report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, IGNORE_INDEX};
use crate::data::{collate_batch, Batch, Datasets, Sample};
use crate::error::{Error, Result};
use crate::model::Tower;
use crate::tensor::Tensor;

/// Next-token scores for a collated batch.
pub struct ScoredBatch {
    /// `[B, S, V]`.
    pub logits: Tensor,
    /// Targets aligned with the logits' sequence axis, `IGNORE_INDEX` elsewhere.
    pub labels: Vec<Vec<i64>>,
}

pub trait Scorer {
    fn score(&self, batch: &Batch) -> Result<ScoredBatch>;

    /// Longest sample the scorer accepts.
    fn max_len(&self) -> usize;
}

impl Scorer for Tower {
    fn score(&self, batch: &Batch) -> Result<ScoredBatch> {
        let (logits, layout) = self.logits(batch)?;
        Ok(ScoredBatch {
            logits,
            labels: layout.labels,
        })
    }

    fn max_len(&self) -> usize {
        self.config().decoder.max_seq
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn scored_chunks<'a>(
    model: &'a dyn Scorer,
    samples: &'a [Sample],
    batch_size: usize,
) -> impl Iterator<Item = Result<(usize, ScoredBatch)>> + 'a {
    samples.chunks(batch_size.max(1)).enumerate().map(move |(c, chunk)| {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = collate_batch(&refs, model.max_len())?;
        let scored = model.score(&batch)?;
        let s = scored.logits.shape();
        if s.len() != 3 || s[0] != chunk.len() || scored.labels.len() != chunk.len() {
            return Err(Error::Eval(format!("scorer returned logits of shape {s:?} for {} samples", chunk.len())));
        }
        Ok((c * batch_size.max(1), scored))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactMatch {
    pub accuracy: f64,
    pub correct: Vec<bool>,
    /// Greedy token at every answer position, teacher-forced.
    pub predictions: Vec<Vec<usize>>,
}

/// Greedy exact match over each sample's answer span (answer tokens and the
/// closing EOS). Ties resolve to the lowest token id.
pub fn eval_exact_match(model: &dyn Scorer, samples: &[Sample], batch_size: usize) -> Result<ExactMatch> {
    if samples.is_empty() {
        return Err(Error::Eval("exact match over an empty task set".into()));
    }
    let mut correct = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in scored_chunks(model, samples, batch_size) {
        let (first, scored) = chunk?;
        let (s, v) = (scored.logits.shape()[1], scored.logits.shape()[2]);
        for (b, labels) in scored.labels.iter().enumerate() {
            let mut pred = Vec::new();
            let mut ok = true;
            for (p, &l) in labels.iter().enumerate() {
                if l == IGNORE_INDEX {
                    continue;
                }
                let off = (b * s + p) * v;
                let tok = argmax(&scored.logits.data()[off..off + v]);
                ok &= tok as i64 == l;
                pred.push(tok);
            }
            if pred.is_empty() {
                return Err(Error::Eval(format!("sample {} has no answer span", first + b)));
            }
            correct.push(ok);
            predictions.push(pred);
        }
    }
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(ExactMatch {
        accuracy: hits as f64 / samples.len() as f64,
        correct,
        predictions,
    })
}

/// `exp` of the mean negative log-likelihood over every labelled position.
pub fn eval_perplexity(model: &dyn Scorer, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let mut nll = 0.0;
    let mut n = 0usize;
    for chunk in scored_chunks(model, samples, batch_size) {
        let (_, scored) = chunk?;
        let (s, v) = (scored.logits.shape()[1], scored.logits.shape()[2]);
        for (b, labels) in scored.labels.iter().enumerate() {
            for (p, &l) in labels.iter().enumerate() {
                if l == IGNORE_INDEX {
                    continue;
                }
                let off = (b * s + p) * v;
                let row = &scored.logits.data()[off..off + v];
                nll += log_sum_exp(row) - row[l as usize];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Eval("perplexity over zero counted positions".into()));
    }
    Ok((nll / n as f64).exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinLoss {
    /// `a` right where `b` is wrong.
    pub wins: usize,
    /// `b` right where `a` is wrong.
    pub losses: usize,
    pub net: i64,
}

pub fn win_loss_from_correct(a: &[bool], b: &[bool]) -> Result<WinLoss> {
    if a.len() != b.len() {
        return Err(Error::shape("win_loss_diff", &[a.len()], &[b.len()]));
    }
    let wins = a.iter().zip(b).filter(|(&x, &y)| x && !y).count();
    let losses = a.iter().zip(b).filter(|(&x, &y)| !x && y).count();
    Ok(WinLoss {
        wins,
        losses,
        net: wins as i64 - losses as i64,
    })
}

/// Per-example comparison of two prediction lists against the references.
pub fn win_loss_diff<T: PartialEq>(preds_a: &[T], preds_b: &[T], references: &[T]) -> Result<WinLoss> {
    if preds_a.len() != references.len() || preds_b.len() != references.len() {
        return Err(Error::shape("win_loss_diff", &[preds_a.len(), preds_b.len()], &[references.len()]));
    }
    let a: Vec<bool> = preds_a.iter().zip(references).map(|(p, r)| p == r).collect();
    let b: Vec<bool> = preds_b.iter().zip(references).map(|(p, r)| p == r).collect();
    win_loss_from_correct(&a, &b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ExactMatch,
    Perplexity,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        self == MetricKind::ExactMatch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSet {
    pub name: String,
    pub group: String,
    pub metric: MetricKind,
    pub needs_vision: bool,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSuite {
    pub tasks: Vec<TaskSet>,
}

pub const TASK_NAMES: [&str; 4] = ["text_qa", "mm_qa", "ocr_copy", "text_ppl"];

impl EvalSuite {
    pub fn from_datasets(d: &Datasets) -> Self {
        let task = |name: &str, group: &str, metric, needs_vision, samples: &Vec<Sample>| TaskSet {
            name: name.into(),
            group: group.into(),
            metric,
            needs_vision,
            samples: samples.clone(),
        };
        Self {
            tasks: vec![
                task("text_qa", "language", MetricKind::ExactMatch, false, &d.text_eval),
                task("mm_qa", "general multimodal", MetricKind::ExactMatch, true, &d.mm_eval),
                task("ocr_copy", "document/ocr", MetricKind::ExactMatch, true, &d.ocr_eval),
                task("text_ppl", "language", MetricKind::Perplexity, false, &d.text_eval),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub metric: MetricKind,
    /// `None` when the model cannot run the task (no vision encoder).
    pub score: Option<f64>,
    /// Per-example exact-match outcomes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub correct: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub run: String,
    pub params_checksum: String,
    pub tasks: BTreeMap<String, TaskScore>,
}

impl EvalResults {
    pub fn score(&self, task: &str) -> Option<f64> {
        self.tasks.get(task).and_then(|t| t.score)
    }
}

pub fn evaluate(run: &str, model: &Tower, suite: &EvalSuite, batch_size: usize) -> Result<EvalResults> {
    let mut tasks = BTreeMap::new();
    for t in &suite.tasks {
        let score = if t.needs_vision && !model.has_vision() {
            TaskScore {
                metric: t.metric,
                score: None,
                correct: vec![],
            }
        } else {
            match t.metric {
                MetricKind::ExactMatch => {
                    let em = eval_exact_match(model, &t.samples, batch_size)?;
                    TaskScore {
                        metric: t.metric,
                        score: Some(em.accuracy),
                        correct: em.correct,
                    }
                }
                MetricKind::Perplexity => TaskScore {
                    metric: t.metric,
                    score: Some(eval_perplexity(model, &t.samples, batch_size)?),
                    correct: vec![],
                },
            }
        };
        tasks.insert(t.name.clone(), score);
    }
    Ok(EvalResults {
        run: run.to_string(),
        params_checksum: model.params.checksum(),
        tasks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub task: String,
    pub model: String,
    pub score: Option<f64>,
    /// `100·(score − ft)/ft`, when both exist and the baseline is positive.
    pub delta_pct: Option<f64>,
    /// `(score − ft)/(teacher − ft)` on higher-is-better tasks where the teacher beats the baseline.
    pub recovery: Option<f64>,
    /// Against the fine-tuned baseline, per example.
    pub win_loss: Option<WinLoss>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub teacher_era: String,
    pub ft_baseline: String,
    pub tasks: Vec<String>,
    pub models: Vec<String>,
    pub cells: Vec<ReportCell>,
}

pub fn delta_pct(value: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (value - baseline) / baseline)
}

pub fn recovery_fraction(value: f64, ft_baseline: f64, teacher_era: f64) -> Option<f64> {
    (teacher_era > ft_baseline).then(|| (value - ft_baseline) / (teacher_era - ft_baseline))
}

/// Columns: teacher era, fine-tuned baseline, then every other result in order.
pub fn recovery_report(results: &[EvalResults], teacher_era: &str, ft_baseline: &str) -> Result<RecoveryReport> {
    let find = |name: &str| {
        results
            .iter()
            .find(|r| r.run == name)
            .ok_or_else(|| Error::Eval(format!("report needs results for baseline `{name}`")))
    };
    let teacher = find(teacher_era)?;
    let ft = find(ft_baseline)?;
    let mut models = vec![teacher_era.to_string(), ft_baseline.to_string()];
    models.extend(results.iter().map(|r| r.run.clone()).filter(|r| r != teacher_era && r != ft_baseline));
    let mut tasks: Vec<String> = TASK_NAMES.iter().map(|s| s.to_string()).filter(|t| ft.tasks.contains_key(t)).collect();
    tasks.extend(ft.tasks.keys().filter(|k| !TASK_NAMES.contains(&k.as_str())).cloned());

    let mut cells = Vec::new();
    for task in &tasks {
        let ft_task = &ft.tasks[task];
        for m in &models {
            let r = find(m)?;
            let score = r.score(task);
            let mut cell = ReportCell {
                task: task.clone(),
                model: m.clone(),
                score,
                delta_pct: None,
                recovery: None,
                win_loss: None,
            };
            if m != ft_baseline {
                if let (Some(v), Some(b)) = (score, ft_task.score) {
                    cell.delta_pct = delta_pct(v, b);
                    if ft_task.metric.higher_is_better() && m != teacher_era {
                        cell.recovery = teacher.score(task).and_then(|t| recovery_fraction(v, b, t));
                    }
                }
                if let Some(t) = r.tasks.get(task) {
                    if !t.correct.is_empty() && !ft_task.correct.is_empty() {
                        cell.win_loss = Some(win_loss_from_correct(&t.correct, &ft_task.correct)?);
                    }
                }
            }
            cells.push(cell);
        }
    }
    Ok(RecoveryReport {
        teacher_era: teacher_era.to_string(),
        ft_baseline: ft_baseline.to_string(),
        tasks,
        models,
        cells,
    })
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.prec$}"))
}

impl RecoveryReport {
    pub fn cell(&self, task: &str, model: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.task == task && c.model == model)
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("task,model,score,delta_pct,recovery,wins,losses,net\n");
        for c in &self.cells {
            let (w, l, n) = c
                .win_loss
                .map_or(("NA".into(), "NA".into(), "NA".into()), |x| (x.wins.to_string(), x.losses.to_string(), x.net.to_string()));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{w},{l},{n}",
                c.task,
                c.model,
                opt(c.score, 6),
                opt(c.delta_pct, 4),
                opt(c.recovery, 4)
            );
        }
        out
    }

    /// Aligned plain-text table: tasks down, models across, percentage change
    /// against the fine-tuned baseline in brackets, then recovery fractions.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = vec![std::iter::once("task".to_string()).chain(self.models.iter().cloned()).collect()];
        for task in &self.tasks {
            let mut row = vec![task.clone()];
            for m in &self.models {
                let c = self.cell(task, m).expect("cell per task and model");
                let mut s = opt(c.score, 4);
                if let Some(d) = c.delta_pct {
                    s.push_str(&format!(" ({d:+.1}%)"));
                }
                row.push(s);
            }
            rows.push(row);
        }
        for task in &self.tasks {
            let cells: Vec<&ReportCell> = self.models.iter().filter_map(|m| self.cell(task, m)).collect();
            if cells.iter().all(|c| c.recovery.is_none()) {
                continue;
            }
            let mut row = vec![format!("{task} recovery")];
            row.extend(cells.iter().map(|c| if c.model == self.ft_baseline || c.model == self.teacher_era { "-".into() } else { opt(c.recovery, 3) }));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len()).map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
        let mut out = format!("teacher era: {}    fine-tuned baseline: {}\n", self.teacher_era, self.ft_baseline);
        for (k, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(i, s)| if i == 0 { format!("{s:<w$}", w = widths[i]) } else { format!("{s:>w$}", w = widths[i]) })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if k == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}
