//! In-memory multimodal datasets. Ground-truth labels are never stored here;
//! generators return them separately.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    /// `[N, D]`, one flattened observation per row.
    pub x: Tensor<f64>,
    /// Per-sample availability; `None` when every sample is observed.
    pub present: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub modalities: Vec<Modality>,
}

/// One modality's slice of a batch.
pub struct BatchPart {
    pub x: Tensor<f64>,
    /// `[B, 1]` availability mask, `None` when fully observed.
    pub mask: Option<Tensor<f64>>,
}

impl Modality {
    pub fn new(name: impl Into<String>, x: Tensor<f64>, present: Option<Vec<bool>>) -> Result<Self> {
        if x.ndim() != 2 {
            return Err(contract("modality", format!("observations must be [N, D], got {:?}", x.shape())));
        }
        if let Some(p) = &present {
            if p.len() != x.shape()[0] {
                return Err(contract("modality", "mask length differs from the sample count"));
            }
        }
        if !x.all_finite() {
            return Err(contract("modality", "observations contain non-finite values"));
        }
        Ok(Self {
            name: name.into(),
            x,
            present,
        })
    }

    pub fn features(&self) -> usize {
        self.x.shape()[1]
    }
}

impl Dataset {
    pub fn new(modalities: Vec<Modality>) -> Result<Self> {
        let Some(first) = modalities.first() else {
            return Err(contract("dataset", "at least one modality is required"));
        };
        let n = first.x.shape()[0];
        if modalities.iter().any(|m| m.x.shape()[0] != n) {
            return Err(contract("dataset", "modalities disagree on the sample count"));
        }
        for i in 0..n {
            if !modalities.iter().any(|m| m.present.as_ref().is_none_or(|p| p[i])) {
                return Err(contract("dataset", format!("sample {i} has no observed modality")));
            }
        }
        Ok(Self { modalities })
    }

    pub fn len(&self) -> usize {
        self.modalities[0].x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Vec<BatchPart>> {
        let n = self.len();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(contract("batch", "indices empty or out of range"));
        }
        self.modalities
            .iter()
            .map(|m| {
                let d = m.features();
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    data.extend_from_slice(&m.x.data()[i * d..(i + 1) * d]);
                }
                let mask = match &m.present {
                    Some(p) if idx.iter().any(|&i| !p[i]) => Some(Tensor::new(
                        vec![idx.len(), 1],
                        idx.iter().map(|&i| if p[i] { 1.0 } else { 0.0 }).collect(),
                    )?),
                    _ => None,
                };
                Ok(BatchPart {
                    x: Tensor::new(vec![idx.len(), d], data)?,
                    mask,
                })
            })
            .collect()
    }
}
