use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{load_matrix, save_matrix, DenseMatrix, Dtype};
use crate::venom::VenomParams;

/// Partition of the FFN hidden units into experts, plus one unit-norm mean
/// vector per expert (`means` is `d_model × num_experts`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    means: DenseMatrix,
    column_sets: Vec<Vec<usize>>,
    expert_of_column: Vec<usize>,
}

impl ExpertBank {
    /// Validates the partition. Mean columns must have unit norm (or be
    /// zero); see [`ExpertBank::with_normalized_means`].
    pub fn new(means: DenseMatrix, column_sets: Vec<Vec<usize>>) -> Result<Self> {
        let e = column_sets.len();
        if e == 0 {
            return Err(Error::InvalidParams("at least one expert is required".into()));
        }
        if means.cols() != e {
            return Err(Error::InvalidParams(format!(
                "{} mean columns for {e} experts",
                means.cols()
            )));
        }
        let d_ffn: usize = column_sets.iter().map(Vec::len).sum();
        let mut expert_of_column = vec![usize::MAX; d_ffn];
        for (id, set) in column_sets.iter().enumerate() {
            if set.is_empty() || set.len() % 4 != 0 {
                return Err(Error::InvalidParams(format!(
                    "expert {id} owns {} columns; need a positive multiple of 4",
                    set.len()
                )));
            }
            for &c in set {
                if c >= d_ffn || expert_of_column[c] != usize::MAX {
                    return Err(Error::InvalidParams(format!(
                        "column {c} is out of range or owned twice"
                    )));
                }
                expert_of_column[c] = id;
            }
        }
        for c in 0..e {
            let n: f64 = (0..means.rows()).map(|r| means.get(r, c).powi(2)).sum();
            if n != 0.0 && (n.sqrt() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParams(format!(
                    "mean of expert {c} has norm {}",
                    n.sqrt()
                )));
            }
        }
        let mut column_sets = column_sets;
        for set in &mut column_sets {
            set.sort_unstable();
        }
        Ok(Self {
            means,
            column_sets,
            expert_of_column,
        })
    }

    /// Like [`ExpertBank::new`], scaling each nonzero mean column to unit norm.
    pub fn with_normalized_means(means: DenseMatrix, column_sets: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(normalize_columns(&means), column_sets)
    }

    pub fn num_experts(&self) -> usize {
        self.column_sets.len()
    }

    pub fn d_model(&self) -> usize {
        self.means.rows()
    }

    pub fn d_ffn(&self) -> usize {
        self.expert_of_column.len()
    }

    pub fn means(&self) -> &DenseMatrix {
        &self.means
    }

    pub fn column_sets(&self) -> &[Vec<usize>] {
        &self.column_sets
    }

    pub fn columns(&self, expert: usize) -> &[usize] {
        &self.column_sets[expert]
    }

    pub fn expert_of_column(&self, col: usize) -> usize {
        self.expert_of_column[col]
    }

    /// Hidden-unit order that makes every expert's columns contiguous:
    /// `order[new] = old`.
    pub fn contiguous_order(&self) -> Vec<usize> {
        self.column_sets.concat()
    }

    /// The same experts relabelled onto contiguous column ranges, matching
    /// [`ExpertBank::contiguous_order`].
    pub fn to_contiguous(&self) -> Self {
        let mut start = 0;
        let sets = self
            .column_sets
            .iter()
            .map(|s| {
                let r: Vec<usize> = (start..start + s.len()).collect();
                start += s.len();
                r
            })
            .collect();
        Self::new(self.means.clone(), sets).expect("relabelling preserves validity")
    }

    /// Checks that every expert owns either none or at least four columns of
    /// every `M`-wide window, which the Venom conversion needs.
    pub fn check_venom_windows(&self, p: &VenomParams) -> Result<()> {
        if self.d_ffn() % p.m() != 0 {
            return Err(Error::NotDivisible {
                what: "d_ffn",
                value: self.d_ffn(),
                by: p.m(),
            });
        }
        for (e, set) in self.column_sets.iter().enumerate() {
            let mut counts = vec![0usize; self.d_ffn() / p.m()];
            for &c in set {
                counts[c / p.m()] += 1;
            }
            if let Some((w, &n)) = counts.iter().enumerate().find(|(_, &n)| n > 0 && n < 4) {
                return Err(Error::InfeasibleWindow {
                    block_row: e,
                    block_col: w,
                    allowed: n,
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn normalize_columns(m: &DenseMatrix) -> DenseMatrix {
    let norms: Vec<f64> = (0..m.cols())
        .map(|c| (0..m.rows()).map(|r| m.get(r, c).powi(2)).sum::<f64>().sqrt())
        .collect();
    DenseMatrix::from_fn(m.rows(), m.cols(), |r, c| {
        if norms[c] > 0.0 {
            m.get(r, c) / norms[c]
        } else {
            0.0
        }
    })
}

/// JSON manifest of a saved bank; `means` names an `SFK1` file relative to
/// the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankManifest {
    pub num_experts: usize,
    pub column_sets: Vec<Vec<usize>>,
    pub means: PathBuf,
}

/// Writes `<manifest>` as JSON and the means next to it as `<stem>.means.sfk`.
pub fn save_bank(bank: &ExpertBank, manifest: impl AsRef<Path>) -> Result<()> {
    let manifest = manifest.as_ref();
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "bank".into());
    let means_name = PathBuf::from(format!("{stem}.means.sfk"));
    let dir = manifest.parent().unwrap_or(Path::new(""));
    save_matrix(bank.means(), dir.join(&means_name), Dtype::F64)?;
    let m = BankManifest {
        num_experts: bank.num_experts(),
        column_sets: bank.column_sets().to_vec(),
        means: means_name,
    };
    fs::write(manifest, serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

pub fn load_bank(manifest: impl AsRef<Path>) -> Result<ExpertBank> {
    let manifest = manifest.as_ref();
    let m: BankManifest = serde_json::from_slice(&fs::read(manifest)?)?;
    if m.num_experts != m.column_sets.len() {
        return Err(Error::Corrupt(format!(
            "num_experts {} but {} column sets",
            m.num_experts,
            m.column_sets.len()
        )));
    }
    let dir = manifest.parent().unwrap_or(Path::new(""));
    let means = load_matrix(dir.join(&m.means))?;
    ExpertBank::new(means, m.column_sets)
}
