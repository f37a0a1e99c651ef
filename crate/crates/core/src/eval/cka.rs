//! Linear centered kernel alignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SemiError};
use crate::numerics::DenseMatrix;

/// `||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)` on column-centered inputs;
/// zero when either denominator vanishes.
pub fn linear_cka(x: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(SemiError::Precondition(format!(
            "CKA inputs have {} and {} rows",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(SemiError::Precondition("CKA needs at least two samples".into()));
    }
    let (xc, yc) = (x.center_columns(), y.center_columns());
    let cross = yc.t_matmul(&xc)?.frobenius_sq();
    let nx = xc.t_matmul(&xc)?.frobenius();
    let ny = yc.t_matmul(&yc)?.frobenius();
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    Ok((cross / (nx * ny)).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CkaStage {
    #[serde(rename = "Encoder")]
    Encoder,
    #[serde(rename = "Pre-Merge")]
    PreMerge,
    #[serde(rename = "Post-Merge")]
    PostMerge,
    #[serde(rename = "Post-Finetune")]
    PostFinetune,
}

impl CkaStage {
    pub const ALL: [CkaStage; 4] = [CkaStage::Encoder, CkaStage::PreMerge, CkaStage::PostMerge, CkaStage::PostFinetune];

    pub fn label(self) -> &'static str {
        match self {
            CkaStage::Encoder => "Encoder",
            CkaStage::PreMerge => "Pre-Merge",
            CkaStage::PostMerge => "Post-Merge",
            CkaStage::PostFinetune => "Post-Finetune",
        }
    }
}

/// Stage by modality CKA values, serialised as `{stage: {modality: value}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CkaGrid(pub BTreeMap<String, BTreeMap<String, f64>>);

impl CkaGrid {
    pub fn insert(&mut self, stage: CkaStage, modality: &str, value: f64) -> Result<()> {
        if !(-1e-9..=1.0 + 1e-9).contains(&value) {
            return Err(SemiError::Numeric(format!("CKA value {value} outside [0, 1]")));
        }
        self.0
            .entry(stage.label().to_string())
            .or_default()
            .insert(modality.to_string(), value.clamp(0.0, 1.0));
        Ok(())
    }

    pub fn get(&self, stage: CkaStage, modality: &str) -> Option<f64> {
        self.0.get(stage.label()).and_then(|m| m.get(modality)).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| SemiError::Format(e.to_string()))
    }
}
