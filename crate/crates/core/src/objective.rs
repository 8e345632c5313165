//! Source-selective mixture of a temperature-scaled soft loss against detached
//! teacher logits and a hard next-token loss.
//!
//! Per counted position `t` of example `b` with weight `α_b = α(category_b)`:
//!
//! ```text
//! ℓ = α_b · T² · KL(softmax(z_t/T) ‖ softmax(z_s/T)) + (1 − α_b) · CE(z_s, y)
//! combined = Σ ℓ / N
//! ```
//!
//! where `N` counts positions with `m = 1` and a label other than the ignore
//! index, over the whole batch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceCategory {
    LanguageHeavy,
    OcrHeavy,
}

impl SourceCategory {
    pub const ALL: [SourceCategory; 2] = [SourceCategory::LanguageHeavy, SourceCategory::OcrHeavy];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceCategory::LanguageHeavy => "language_heavy",
            SourceCategory::OcrHeavy => "ocr_heavy",
        }
    }
}

impl fmt::Display for SourceCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "language_heavy" => Ok(SourceCategory::LanguageHeavy),
            "ocr_heavy" => Ok(SourceCategory::OcrHeavy),
            other => Err(Error::UnknownCategory(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceTag {
    pub name: String,
    pub category: SourceCategory,
}

impl SourceTag {
    pub fn new(name: impl Into<String>, category: SourceCategory) -> Self {
        Self {
            name: name.into(),
            category,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaPolicy {
    pub alphas: BTreeMap<SourceCategory, f64>,
    pub temperature: f64,
}

impl AlphaPolicy {
    pub fn new(language_heavy: f64, ocr_heavy: f64, temperature: f64) -> Result<Self> {
        let p = Self {
            alphas: BTreeMap::from([
                (SourceCategory::LanguageHeavy, language_heavy),
                (SourceCategory::OcrHeavy, ocr_heavy),
            ]),
            temperature,
        };
        p.validate()?;
        Ok(p)
    }

    /// Same α for every category.
    pub fn uniform(alpha: f64, temperature: f64) -> Result<Self> {
        Self::new(alpha, alpha, temperature)
    }

    /// Soft signal on language-heavy sources only; OCR sources get CE only.
    pub fn selective(alpha: f64, temperature: f64) -> Result<Self> {
        Self::new(alpha, 0.0, temperature)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        for (c, a) in &self.alphas {
            if !(0.0..=1.0).contains(a) {
                return Err(Error::Config(format!("alpha for {c} must lie in [0, 1], got {a}")));
            }
        }
        Ok(())
    }

    pub fn alpha_for(&self, tag: &SourceTag) -> Result<f64> {
        self.alphas
            .get(&tag.category)
            .copied()
            .ok_or_else(|| Error::UnknownCategory(tag.category.to_string()))
    }

    pub fn is_hard_only(&self) -> bool {
        self.alphas.values().all(|&a| a == 0.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryTotals {
    /// `T² · Σ KL` over counted positions of this category with `α > 0`.
    pub soft_sum: f64,
    pub hard_sum: f64,
    pub count: usize,
}

impl CategoryTotals {
    pub fn soft_mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.soft_sum / self.count as f64
        }
    }

    pub fn hard_mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.hard_sum / self.count as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub soft_sum: f64,
    pub hard_sum: f64,
    pub combined: f64,
    pub counted: usize,
    pub per_category: BTreeMap<SourceCategory, CategoryTotals>,
    /// Nothing was counted; `combined` is 0 and no update should happen.
    pub empty: bool,
}

impl LossBreakdown {
    pub fn category(&self, c: SourceCategory) -> CategoryTotals {
        self.per_category.get(&c).copied().unwrap_or_default()
    }
}

/// Position bookkeeping shared by every loss on a flattened `[B·S, V]` batch.
pub struct Positions<'a> {
    pub labels: &'a [i64],
    pub mask: &'a [bool],
    pub seq_len: usize,
    pub tags: &'a [SourceTag],
}

impl Positions<'_> {
    fn check(&self, rows: usize) -> Result<()> {
        if self.labels.len() != rows || self.mask.len() != rows || self.tags.len() * self.seq_len != rows {
            return Err(Error::shape(
                "combined_loss",
                &[rows],
                &[self.labels.len(), self.mask.len(), self.tags.len() * self.seq_len],
            ));
        }
        Ok(())
    }

    /// Counted positions: `m = 1` and label not ignored.
    pub fn counted(&self) -> Vec<bool> {
        self.labels
            .iter()
            .zip(self.mask)
            .map(|(&l, &m)| m && l != IGNORE_INDEX)
            .collect()
    }

    fn targets(&self) -> Result<Vec<Option<usize>>> {
        self.counted()
            .iter()
            .zip(self.labels)
            .map(|(&c, &l)| match (c, l) {
                (false, _) => Ok(None),
                (true, l) if l >= 0 => Ok(Some(l as usize)),
                (true, l) => Err(Error::invalid("hard_loss", format!("negative label {l}"))),
            })
            .collect()
    }
}

fn flatten(g: &mut Graph, logits: Var) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    match s.len() {
        2 => Ok(logits),
        3 => g.reshape(logits, [s[0] * s[1], s[2]]),
        _ => Err(Error::shape("loss", &s, &[0, 0])),
    }
}

/// `T² · Σ KL(teacher ‖ student)` over `positions`. Returns `(sum, count)`.
pub fn soft_loss(g: &mut Graph, teacher: &Tensor, student: Var, positions: &[bool], temperature: f64) -> Result<(Var, usize)> {
    let student = flatten(g, student)?;
    let (kl, n) = g.kl_divergence_masked(teacher, student, positions, temperature)?;
    Ok((g.scale(kl, temperature * temperature), n))
}

/// `Σ CE` over positions that are set in `positions` and carry a label.
pub fn hard_loss(g: &mut Graph, student: Var, labels: &[i64], positions: &[bool]) -> Result<(Var, usize)> {
    if labels.len() != positions.len() {
        return Err(Error::shape("hard_loss", &[labels.len()], &[positions.len()]));
    }
    let student = flatten(g, student)?;
    let restricted: Vec<i64> = labels
        .iter()
        .zip(positions)
        .map(|(&l, &p)| if p { l } else { IGNORE_INDEX })
        .collect();
    g.cross_entropy_masked(student, &restricted, IGNORE_INDEX)
}

pub struct Objective {
    /// Scalar to differentiate. A constant zero when nothing was counted.
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

fn empty_objective(g: &mut Graph) -> Objective {
    Objective {
        loss: g.constant(Tensor::scalar(0.0)),
        breakdown: LossBreakdown {
            empty: true,
            ..Default::default()
        },
    }
}

/// Plain cross-entropy fine-tuning objective: `Σ CE / N`.
pub fn hard_only_loss(g: &mut Graph, student: Var, pos: &Positions<'_>) -> Result<Objective> {
    let student = flatten(g, student)?;
    pos.check(g.value(student).rows())?;
    let targets = pos.targets()?;
    let n = targets.iter().filter(|t| t.is_some()).count();
    if n == 0 {
        return Ok(empty_objective(g));
    }
    let ce = g.cross_entropy_rows(student, &targets)?;
    let total = g.sum(ce);
    let loss = g.scale(total, 1.0 / n as f64);
    let mut breakdown = LossBreakdown {
        counted: n,
        ..Default::default()
    };
    let ce_rows = g.value(ce).data().to_vec();
    for (r, t) in targets.iter().enumerate() {
        if t.is_some() {
            let c = breakdown.per_category.entry(pos.tags[r / pos.seq_len].category).or_default();
            c.hard_sum += ce_rows[r];
            c.count += 1;
        }
    }
    breakdown.hard_sum = g.value(total).item();
    breakdown.combined = g.value(loss).item();
    Ok(Objective { loss, breakdown })
}

/// The selective mixture. `teacher` must be given whenever some counted
/// position has `α > 0`; rows with `α = 0` never touch it.
pub fn combined_loss(
    g: &mut Graph,
    teacher: Option<&Tensor>,
    student: Var,
    pos: &Positions<'_>,
    policy: &AlphaPolicy,
) -> Result<Objective> {
    policy.validate()?;
    let student = flatten(g, student)?;
    let rows = g.value(student).rows();
    pos.check(rows)?;
    let targets = pos.targets()?;
    let n = targets.iter().filter(|t| t.is_some()).count();
    if n == 0 {
        return Ok(empty_objective(g));
    }
    let alphas = pos
        .tags
        .iter()
        .map(|t| policy.alpha_for(t))
        .collect::<Result<Vec<_>>>()?;
    let t2 = policy.temperature * policy.temperature;
    let alpha_row = |r: usize| alphas[r / pos.seq_len];

    let ce = g.cross_entropy_rows(student, &targets)?;
    let w_hard: Vec<f64> = (0..rows)
        .map(|r| if targets[r].is_some() { 1.0 - alpha_row(r) } else { 0.0 })
        .collect();
    let w_hard = g.constant(Tensor::new([rows], w_hard)?);
    let weighted = g.mul(ce, w_hard)?;
    let mut total = g.sum(weighted);

    let soft_rows: Vec<bool> = (0..rows).map(|r| targets[r].is_some() && alpha_row(r) > 0.0).collect();
    let mut kl_values = None;
    if soft_rows.iter().any(|&s| s) {
        let teacher = teacher.ok_or_else(|| {
            Error::MissingPrerequisite("teacher logits are required when some counted position has alpha > 0".into())
        })?;
        let kl = g.kl_rows(teacher, student, &soft_rows, policy.temperature)?;
        let w_soft: Vec<f64> = (0..rows)
            .map(|r| if soft_rows[r] { alpha_row(r) * t2 } else { 0.0 })
            .collect();
        let w_soft = g.constant(Tensor::new([rows], w_soft)?);
        let weighted = g.mul(kl, w_soft)?;
        let soft_total = g.sum(weighted);
        total = g.add(total, soft_total)?;
        kl_values = Some(g.value(kl).data().to_vec());
    }
    let loss = g.scale(total, 1.0 / n as f64);

    let ce_rows = g.value(ce).data();
    let mut breakdown = LossBreakdown {
        counted: n,
        combined: g.value(loss).item(),
        ..Default::default()
    };
    for r in 0..rows {
        if targets[r].is_none() {
            continue;
        }
        let soft = kl_values.as_ref().map_or(0.0, |kl| if soft_rows[r] { t2 * kl[r] } else { 0.0 });
        let c = breakdown.per_category.entry(pos.tags[r / pos.seq_len].category).or_default();
        c.hard_sum += ce_rows[r];
        c.soft_sum += soft;
        c.count += 1;
        breakdown.hard_sum += ce_rows[r];
        breakdown.soft_sum += soft;
    }
    Ok(Objective { loss, breakdown })
}
