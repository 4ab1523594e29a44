//! Domain types shared by the rest of the crate.
//!
//! Constructors normalize or validate; everything downstream assumes the
//! invariants hold and only checks what it needs (temperature sign, shapes).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows with norm at or below this are rejected by [`make_unit_batch`].
pub const ZERO_NORM_EPS: f64 = 1e-12;
/// Allowed deviation of a row norm from 1 in a validated batch.
pub const UNIT_NORM_TOL: f64 = 1e-6;
/// Allowed overshoot of a cosine similarity beyond [-1, 1].
pub const SIMILARITY_TOL: f64 = 1e-9;

/// `N` row vectors on the unit sphere `S^{m-1}`, stored as an `N x m` matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnitEmbeddingBatch {
    data: Array2<f64>,
}

/// Divides every row by its Euclidean norm.
pub fn make_unit_batch(raw: Array2<f64>) -> Result<UnitEmbeddingBatch> {
    let mut data = raw;
    check_shape(&data.view())?;
    for (i, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > ZERO_NORM_EPS) {
            return Err(Error::ZeroNormRow(i));
        }
        row.mapv_inplace(|x| x / norm);
    }
    Ok(UnitEmbeddingBatch { data })
}

fn check_shape(data: &ArrayView2<'_, f64>) -> Result<()> {
    if data.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if data.ncols() < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: data.ncols(),
        });
    }
    Ok(())
}

impl UnitEmbeddingBatch {
    /// Wraps rows that are already unit norm, failing if any is not.
    pub fn from_unit_rows(data: Array2<f64>) -> Result<Self> {
        check_shape(&data.view())?;
        for (row, r) in data.axis_iter(Axis(0)).enumerate() {
            let norm = r.dot(&r).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL || !norm.is_finite() {
                return Err(Error::NotUnitNorm { row, norm });
            }
        }
        Ok(Self { data })
    }

    /// Builds a batch from nested rows, normalizing each.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Array2::zeros((rows.len(), m));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: r.len(),
                });
            }
            data.row_mut(i).assign(&ArrayView1::from(r.as_slice()));
        }
        make_unit_batch(data)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Stacks `self` on top of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let data = ndarray::concatenate(Axis(0), &[self.data.view(), other.data.view()])
            .expect("column counts checked above");
        Ok(Self { data })
    }

    pub(crate) fn from_trusted(data: Array2<f64>) -> Self {
        debug_assert!(Self::from_unit_rows(data.clone()).is_ok());
        Self { data }
    }
}

/// One anchor's positive similarity `s_i = f_i . g_i` and its `K` negative
/// similarities `s_j = f_i . g_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitsRow {
    pub pos: f64,
    pub negs: Vec<f64>,
}

impl LogitsRow {
    /// Validated constructor.
    pub fn new(pos: f64, negs: Vec<f64>) -> Result<Self> {
        let row = Self { pos, negs };
        validate_logits(&row)?;
        Ok(row)
    }

    /// Skips range checks. Used for finite-difference probes, which may
    /// step slightly off the sphere.
    pub fn unchecked(pos: f64, negs: Vec<f64>) -> Self {
        Self { pos, negs }
    }

    /// Row with `k` copies of one negative similarity.
    pub fn repeated(pos: f64, neg: f64, k: usize) -> Result<Self> {
        Self::new(pos, vec![neg; k])
    }

    pub fn k(&self) -> usize {
        self.negs.len()
    }
}

/// Checks the similarity range and that at least one negative exists.
pub fn validate_logits(row: &LogitsRow) -> Result<()> {
    let in_range = |s: f64| (-1.0 - SIMILARITY_TOL..=1.0 + SIMILARITY_TOL).contains(&s);
    if !in_range(row.pos) {
        return Err(Error::SimilarityOutOfRange(row.pos));
    }
    if row.negs.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    if let Some(&bad) = row.negs.iter().find(|&&s| !in_range(s)) {
        return Err(Error::SimilarityOutOfRange(bad));
    }
    Ok(())
}

/// Base temperature `tau0`, scaling factor `alpha` and alignment threshold
/// `a0` of the alignment-adaptive temperature, plus the positivity floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTemperatureConfig")]
pub struct TemperatureConfig {
    tau0: f64,
    alpha: f64,
    a0: f64,
    tau_floor_ratio: f64,
}

#[derive(Deserialize)]
struct RawTemperatureConfig {
    tau0: f64,
    #[serde(default)]
    alpha: f64,
    #[serde(default)]
    a0: f64,
    #[serde(default = "default_floor_ratio")]
    tau_floor_ratio: f64,
}

fn default_floor_ratio() -> f64 {
    0.05
}

impl TryFrom<RawTemperatureConfig> for TemperatureConfig {
    type Error = Error;

    fn try_from(raw: RawTemperatureConfig) -> Result<Self> {
        Self::with_floor(raw.tau0, raw.alpha, raw.a0, raw.tau_floor_ratio)
    }
}

impl TemperatureConfig {
    pub fn new(tau0: f64, alpha: f64, a0: f64) -> Result<Self> {
        Self::with_floor(tau0, alpha, a0, default_floor_ratio())
    }

    pub fn with_floor(tau0: f64, alpha: f64, a0: f64, tau_floor_ratio: f64) -> Result<Self> {
        if !(tau0 > 0.0) || !tau0.is_finite() {
            return Err(Error::NonPositiveTau(tau0));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
        }
        if !(-1.0..=1.0).contains(&a0) {
            return Err(Error::InvalidConfig(format!("A0 must lie in [-1, 1], got {a0}")));
        }
        if !(tau_floor_ratio > 0.0 && tau_floor_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tau_floor_ratio must lie in (0, 1), got {tau_floor_ratio}"
            )));
        }
        Ok(Self {
            tau0,
            alpha,
            a0,
            tau_floor_ratio,
        })
    }

    /// Fixed temperature: `alpha = 0`.
    pub fn fixed(tau0: f64) -> Result<Self> {
        Self::new(tau0, 0.0, 0.0)
    }

    pub fn tau0(&self) -> f64 {
        self.tau0
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn a0(&self) -> f64 {
        self.a0
    }

    pub fn tau_floor_ratio(&self) -> f64 {
        self.tau_floor_ratio
    }
}

impl Default for TemperatureConfig {
    /// `{tau0, alpha, A0} = {0.1, 0.5, 0}`.
    fn default() -> Self {
        Self {
            tau0: 0.1,
            alpha: 0.5,
            a0: 0.0,
            tau_floor_ratio: default_floor_ratio(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// InfoNCE with the positive inside the denominator.
    #[serde(rename = "infonce")]
    InfoNce,
    /// Symmetric in-batch InfoNCE over both views. Per row it is InfoNCE.
    #[serde(rename = "ntxent_inbatch")]
    NtXentInBatch,
    /// Decoupled loss: positive removed from the denominator.
    Dcl,
    /// InfoNCE with optional adaptive temperature and detached reweighting.
    Macl,
}

/// Loss variant plus temperature and the two MACL switches. `adaptive` and
/// `reweight` only affect [`LossVariant::Macl`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub variant: LossVariant,
    pub temperature: TemperatureConfig,
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default)]
    pub reweight: bool,
}

impl LossSpec {
    pub fn infonce(tau: f64) -> Result<Self> {
        Ok(Self::plain(LossVariant::InfoNce, TemperatureConfig::fixed(tau)?))
    }

    pub fn ntxent(tau: f64) -> Result<Self> {
        Ok(Self::plain(LossVariant::NtXentInBatch, TemperatureConfig::fixed(tau)?))
    }

    pub fn dcl(tau: f64) -> Result<Self> {
        Ok(Self::plain(LossVariant::Dcl, TemperatureConfig::fixed(tau)?))
    }

    pub fn macl(temperature: TemperatureConfig, adaptive: bool, reweight: bool) -> Self {
        Self {
            variant: LossVariant::Macl,
            temperature,
            adaptive,
            reweight,
        }
    }

    fn plain(variant: LossVariant, temperature: TemperatureConfig) -> Self {
        Self {
            variant,
            temperature,
            adaptive: false,
            reweight: false,
        }
    }

    pub fn is_adaptive(&self) -> bool {
        self.variant == LossVariant::Macl && self.adaptive
    }

    pub fn is_reweighted(&self) -> bool {
        self.variant == LossVariant::Macl && self.reweight
    }

    /// Whether the anchor gradient carries the scaling factor `W`. DCL and
    /// reweighted MACL replace it with 1.
    pub fn keeps_scaling_factor(&self) -> bool {
        !(self.variant == LossVariant::Dcl || self.is_reweighted())
    }
}

/// Per-anchor gradients of one loss term together with the softmax
/// quantities that shape them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientReport {
    pub d_anchor: Array1<f64>,
    pub d_pos_key: Array1<f64>,
    /// `K x m`, row `j` is the gradient for negative key `j`.
    pub d_neg_keys: Array2<f64>,
    /// Gradient scaling factor, `sum_j P_neg[j]`.
    pub w: f64,
    pub p_pos: f64,
    pub p_neg: Vec<f64>,
    /// Hardness weights over the negatives.
    pub p_hat: Vec<f64>,
}
