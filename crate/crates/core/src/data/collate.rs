//! Right-padding of sample lists into rectangular batches.

use crate::autograd::IGNORE_INDEX;
use crate::data::generators::{Sample, TaskKind};
use crate::data::scene::Scene;
use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::objective::SourceTag;

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<Vec<i64>>,
    /// `true` on real tokens, `false` on padding.
    pub mask: Vec<Vec<bool>>,
    pub scenes: Vec<Option<Scene>>,
    pub tags: Vec<SourceTag>,
    pub tasks: Vec<TaskKind>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    /// Positions with `m = 1` and a label.
    pub fn counted(&self) -> usize {
        self.labels
            .iter()
            .zip(&self.mask)
            .map(|(l, m)| l.iter().zip(m).filter(|(&l, &m)| m && l != IGNORE_INDEX).count())
            .sum()
    }
}

pub fn collate_batch(samples: &[&Sample], max_seq: usize) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::invalid("collate_batch", "no samples"));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.len() > max_seq {
            return Err(Error::Sample {
                index: i,
                reason: format!("{} tokens exceed max_seq {max_seq}", s.len()),
            });
        }
        if s.labels.len() != s.len() {
            return Err(Error::Sample {
                index: i,
                reason: "labels and tokens differ in length".into(),
            });
        }
    }
    let width = samples.iter().map(|s| s.len()).max().unwrap_or(0);
    let pad = Vocab::get().pad();
    let mut batch = Batch {
        tokens: Vec::with_capacity(samples.len()),
        labels: Vec::with_capacity(samples.len()),
        mask: Vec::with_capacity(samples.len()),
        scenes: Vec::with_capacity(samples.len()),
        tags: Vec::with_capacity(samples.len()),
        tasks: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let extra = width - s.len();
        let mut t = s.tokens.clone();
        t.resize(width, pad);
        let mut l = s.labels.clone();
        l.resize(width, IGNORE_INDEX);
        let mut m = vec![true; s.len()];
        m.resize(width, false);
        debug_assert_eq!(m.iter().filter(|x| !**x).count(), extra);
        batch.tokens.push(t);
        batch.labels.push(l);
        batch.mask.push(m);
        batch.scenes.push(s.scene.clone());
        batch.tags.push(s.tag.clone());
        batch.tasks.push(s.task);
    }
    Ok(batch)
}
