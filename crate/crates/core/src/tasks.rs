//! Synthetic tasks for the two regimes.
//!
//! * `needle` (sparsity-sensitive): a key/value pair planted in filler noise,
//!   queried at the end. The pair sits beyond the streaming window of the
//!   last position, so only full attention can retrieve it.
//! * `local` (sparsity-robust): every label is the sum mod 8 of the current
//!   and previous digit, answerable from a two-token window.
//!
//! Each sequence opens with a four-token instruction that names the task.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const NEEDLE_PREFIX: [usize; 4] = [0, 1, 2, 3];
pub const LOCAL_PREFIX: [usize; 4] = [4, 5, 6, 7];
pub const PREFIX_LEN: usize = 4;
pub const QUERY: usize = 8;
pub const KEYS: std::ops::Range<usize> = 12..28;
pub const VALUES: std::ops::Range<usize> = 28..44;
pub const FILLER: std::ops::Range<usize> = 44..64;
pub const DIGIT0: usize = 44;
pub const DIGITS: usize = 8;
/// Smallest vocabulary holding every token above.
pub const MIN_VOCAB: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Sensitive,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Needle,
    Local,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::Needle, TaskKind::Local];

    pub fn id(self) -> &'static str {
        match self {
            Self::Needle => "needle",
            Self::Local => "local",
        }
    }

    pub fn regime(self) -> Regime {
        match self {
            Self::Needle => Regime::Sensitive,
            Self::Local => Regime::Robust,
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub n_edge: usize,
    pub sink: usize,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    /// Target at each position, `None` where no loss is taken.
    pub labels: Vec<Option<usize>>,
    /// Positions of the planted pair (needle task only).
    pub needle: Vec<usize>,
}

impl Sample {
    pub fn labelled(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskBatch {
    pub task_id: String,
    pub regime: Regime,
    pub samples: Vec<Sample>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, cfg: &RunConfig) -> Self {
        Self {
            kind,
            seq_len: cfg.model.seq_len,
            n_edge: cfg.router.n_edge,
            sink: cfg.pattern.sink,
            window: cfg.pattern.window,
        }
    }

    /// Inclusive range of legal needle positions: past the prefix, sink and
    /// leading boundary, and far enough back that the pair is outside the
    /// last query's window and the trailing boundary.
    pub fn needle_range(&self) -> Option<(usize, usize)> {
        let lo = self.n_edge.max(self.sink).max(PREFIX_LEN);
        let hi = self
            .seq_len
            .checked_sub(self.window + 2)?
            .min(self.seq_len.checked_sub(self.n_edge + 2)?);
        (lo <= hi).then_some((lo, hi))
    }

    pub fn check(&self) -> Result<()> {
        if self.seq_len < 8 {
            return Err(Error::InvalidArgument(format!("seq_len {} < 8", self.seq_len)));
        }
        match self.kind {
            TaskKind::Needle if self.needle_range().is_none() => Err(Error::InvalidArgument(format!(
                "sequence of {} tokens too short to plant a needle outside n_edge={} and window={}",
                self.seq_len, self.n_edge, self.window
            ))),
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Sample> {
        self.check()?;
        match self.kind {
            TaskKind::Needle => Ok(self.needle(rng)),
            TaskKind::Local => Ok(self.local(rng)),
        }
    }

    fn needle<R: Rng>(&self, rng: &mut R) -> Sample {
        let s = self.seq_len;
        let (lo, hi) = self.needle_range().expect("checked");
        let mut tokens: Vec<usize> = NEEDLE_PREFIX.to_vec();
        tokens.extend((PREFIX_LEN..s).map(|_| rng.gen_range(FILLER)));
        let p = rng.gen_range(lo..=hi);
        let key = rng.gen_range(KEYS);
        let value = rng.gen_range(VALUES);
        tokens[p] = key;
        tokens[p + 1] = value;
        tokens[s - 2] = QUERY;
        tokens[s - 1] = key;
        let mut labels = vec![None; s];
        labels[s - 1] = Some(value);
        Sample {
            tokens,
            labels,
            needle: vec![p, p + 1],
        }
    }

    fn local<R: Rng>(&self, rng: &mut R) -> Sample {
        let s = self.seq_len;
        let mut tokens: Vec<usize> = LOCAL_PREFIX.to_vec();
        tokens.extend((PREFIX_LEN..s).map(|_| DIGIT0 + rng.gen_range(0..DIGITS)));
        let labels = (0..s).map(|i| local_label(&tokens, i)).collect();
        Sample {
            tokens,
            labels,
            needle: Vec::new(),
        }
    }

    /// `n` samples from the stream `(seed, namespace, index)`.
    pub fn batch(&self, seed: u64, namespace: &str, index: u64, n: usize) -> Result<TaskBatch> {
        let mut rng = stream(seed, &format!("{namespace}/{}", self.kind.id()), index);
        let samples = (0..n).map(|_| self.sample(&mut rng)).collect::<Result<_>>()?;
        Ok(TaskBatch {
            task_id: self.kind.id().to_string(),
            regime: self.kind.regime(),
            samples,
        })
    }
}

fn local_label(tokens: &[usize], i: usize) -> Option<usize> {
    (i > PREFIX_LEN).then(|| DIGIT0 + ((tokens[i] - DIGIT0) + (tokens[i - 1] - DIGIT0)) % DIGITS)
}

/// Recomputes labels from tokens alone, for soundness checks.
pub fn derive_labels(kind: TaskKind, tokens: &[usize]) -> Result<Vec<Option<usize>>> {
    let s = tokens.len();
    match kind {
        TaskKind::Needle => {
            if s < 4 || tokens[s - 2] != QUERY {
                return Err(Error::InvalidArgument("needle sequence lacks the query marker".into()));
            }
            let key = tokens[s - 1];
            let p = (0..s - 2)
                .find(|&i| tokens[i] == key)
                .ok_or_else(|| Error::InvalidArgument("queried key not present".into()))?;
            let mut labels = vec![None; s];
            labels[s - 1] = Some(tokens[p + 1]);
            Ok(labels)
        }
        TaskKind::Local => Ok((0..s).map(|i| local_label(tokens, i)).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::streaming_mask;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec::new(kind, &RunConfig::default())
    }

    #[test]
    fn labels_rederive_from_tokens() {
        for kind in TaskKind::ALL {
            let b = spec(kind).batch(3, "test", 0, 50).unwrap();
            for s in &b.samples {
                assert_eq!(derive_labels(kind, &s.tokens).unwrap(), s.labels);
                assert!(s.tokens.iter().all(|&t| t < MIN_VOCAB));
            }
        }
    }

    #[test]
    fn needle_is_outside_window_and_boundaries() {
        let sp = spec(TaskKind::Needle);
        let m = streaming_mask(sp.seq_len, sp.sink, sp.window).unwrap();
        let b = sp.batch(4, "test", 0, 100).unwrap();
        for s in &b.samples {
            let last = sp.seq_len - 1;
            for &p in &s.needle {
                assert!(!m.allows(last, p));
                assert!(p >= sp.n_edge && p < sp.seq_len - sp.n_edge);
            }
        }
    }

    #[test]
    fn local_label_ignores_older_tokens() {
        let sp = spec(TaskKind::Local);
        let s = sp.batch(5, "test", 0, 1).unwrap().samples.remove(0);
        let i = 30;
        let mut perturbed = s.tokens.clone();
        perturbed[PREFIX_LEN..i - 1].reverse();
        assert_eq!(derive_labels(TaskKind::Local, &perturbed).unwrap()[i], s.labels[i]);
    }

    #[test]
    fn too_short_for_needle() {
        let mut sp = spec(TaskKind::Needle);
        sp.seq_len = 20;
        assert!(sp.sample(&mut stream(0, "x", 0)).is_err());
    }

    #[test]
    fn namespaces_give_disjoint_streams() {
        let sp = spec(TaskKind::Local);
        let a = sp.batch(1, "train", 0, 4).unwrap();
        let b = sp.batch(1, "eval", 0, 4).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, sp.batch(1, "train", 0, 4).unwrap());
    }
}
