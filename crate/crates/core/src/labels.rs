//! MASK-II label handling: the class vocabulary, random masking of
//! ground-truth labels during training, and label-state embeddings.
//!
//! The central guarantee is leakage freedom: a Masked class contributes only
//! the shared Masked state vector to its embedding row, never its truth.

use std::io::BufRead;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WxError};

/// What the model is told about one class during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelState {
    /// Truth withheld; the model must predict it.
    Masked,
    /// Class known to be present.
    KnownPositive,
    /// Class known to be absent.
    KnownNegative,
}

impl LabelState {
    /// Row index into the 3-row state embedding table.
    pub fn index(self) -> usize {
        match self {
            LabelState::Masked => 0,
            LabelState::KnownPositive => 1,
            LabelState::KnownNegative => 2,
        }
    }
}

/// Number of distinct label states.
pub const STATE_COUNT: usize = 3;

/// Ordered, unique class names; the order fixes embedding row indices and
/// the layout of every label-indexed vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    names: Vec<String>,
}

impl LabelVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(WxError::Config("label vocabulary is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(WxError::Config("blank label name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(WxError::Config(format!("duplicate label name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    /// Reads one class name per line, skipping blank lines.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| WxError::io(path, e))?;
        let mut names = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| WxError::io(path, e))?;
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                names.push(trimmed.to_string());
            }
        }
        Self::new(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| WxError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Per-class truth plus the state shown to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelStateVector {
    truths: Vec<bool>,
    states: Vec<LabelState>,
}

impl LabelStateVector {
    pub fn new(truths: Vec<bool>, states: Vec<LabelState>) -> Result<Self> {
        if truths.len() != states.len() {
            return Err(WxError::shape(
                "LabelStateVector::new",
                &[truths.len()],
                &[states.len()],
            ));
        }
        for (i, (&truth, &state)) in truths.iter().zip(&states).enumerate() {
            match state {
                LabelState::KnownPositive if !truth => {
                    return Err(WxError::Data(format!(
                        "class {i} marked KnownPositive but truth is 0"
                    )));
                }
                LabelState::KnownNegative if truth => {
                    return Err(WxError::Data(format!(
                        "class {i} marked KnownNegative but truth is 1"
                    )));
                }
                _ => {}
            }
        }
        Ok(Self { truths, states })
    }

    /// All classes Masked: the deployment configuration, where the model
    /// receives no label evidence at all.
    pub fn all_masked(truths: Vec<bool>) -> Self {
        let states = vec![LabelState::Masked; truths.len()];
        Self { truths, states }
    }

    /// Partial-evidence configuration: the listed classes are pinned Known
    /// according to their truth; everything else stays Masked.
    pub fn with_known(truths: Vec<bool>, known: &[usize]) -> Result<Self> {
        let mut states = vec![LabelState::Masked; truths.len()];
        for &i in known {
            if i >= truths.len() {
                return Err(WxError::Data(format!(
                    "known-label index {i} out of range for {} classes",
                    truths.len()
                )));
            }
            states[i] = if truths[i] {
                LabelState::KnownPositive
            } else {
                LabelState::KnownNegative
            };
        }
        Ok(Self { truths, states })
    }

    pub fn len(&self) -> usize {
        self.truths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truths.is_empty()
    }

    pub fn truths(&self) -> &[bool] {
        &self.truths
    }

    pub fn states(&self) -> &[LabelState] {
        &self.states
    }

    /// Truths as 0/1 training targets.
    pub fn targets(&self) -> Vec<f64> {
        self.truths.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.states
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == LabelState::Masked)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Number of classes hidden at `mask_ratio`, rounding half up so a quarter
/// of five classes still hides one.
pub fn mask_count(n: usize, mask_ratio: f64) -> usize {
    (mask_ratio * n as f64 + 0.5).floor() as usize
}

/// Hides `round(mask_ratio · N)` uniformly chosen classes; the rest become
/// KnownPositive/KnownNegative according to their truth.
pub fn sample_mask(
    truths: &[bool],
    mask_ratio: f64,
    rng: &mut impl Rng,
) -> Result<LabelStateVector> {
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(WxError::Config(format!(
            "mask_ratio {mask_ratio} outside [0, 1]"
        )));
    }
    let n = truths.len();
    let k = mask_count(n, mask_ratio);
    let masked = rand::seq::index::sample(rng, n, k);
    let mut states: Vec<LabelState> = truths
        .iter()
        .map(|&t| {
            if t {
                LabelState::KnownPositive
            } else {
                LabelState::KnownNegative
            }
        })
        .collect();
    for i in masked {
        states[i] = LabelState::Masked;
    }
    LabelStateVector::new(truths.to_vec(), states)
}

/// Builds the N×d label-state embedding: row i is
/// `label_table[i] + state_table[state_i]`.
pub fn embed_label_states(
    lsv: &LabelStateVector,
    label_table: &Array2<f64>,
    state_table: &Array2<f64>,
) -> Result<Array2<f64>> {
    let n = lsv.len();
    let d = label_table.ncols();
    if label_table.nrows() != n {
        return Err(WxError::shape(
            "embed_label_states labels",
            &[n, d],
            &[label_table.nrows(), d],
        ));
    }
    if state_table.dim() != (STATE_COUNT, d) {
        return Err(WxError::shape(
            "embed_label_states states",
            &[STATE_COUNT, d],
            &[state_table.nrows(), state_table.ncols()],
        ));
    }
    let mut out = Array2::zeros((n, d));
    for (i, &state) in lsv.states().iter().enumerate() {
        let row = &label_table.row(i) + &state_table.row(state.index());
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}
