use serde::{Deserialize, Serialize};

use crate::error::{Result, SemiError};
use crate::numerics::{rng_for, sinusoidal_pe, DenseMatrix};

const PE_MIX: f64 = 0.25;

/// Frozen bag-of-tokens text encoder with sinusoidal position mixing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenTextEncoder {
    pub table: DenseMatrix,
    positions: DenseMatrix,
}

impl FrozenTextEncoder {
    pub fn new(vocab: usize, dim: usize, max_len: usize, seed: u64) -> Result<Self> {
        let table = DenseMatrix::randn(vocab, dim, 1.0, &mut rng_for(seed, 7));
        let positions = sinusoidal_pe(max_len, dim)?;
        Ok(Self { table, positions })
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(SemiError::InputDomain("empty token sequence".into()));
        }
        if tokens.len() > self.positions.rows() {
            return Err(SemiError::InputDomain(format!(
                "sequence of {} tokens exceeds {} positions",
                tokens.len(),
                self.positions.rows()
            )));
        }
        let mut out = vec![0.0; self.dim()];
        for (pos, &t) in tokens.iter().enumerate() {
            if t >= self.table.rows() {
                return Err(SemiError::InputDomain(format!("token {t} outside vocabulary")));
            }
            for ((o, e), p) in out.iter_mut().zip(self.table.row(t)).zip(self.positions.row(pos)) {
                *o += e + PE_MIX * p;
            }
        }
        let n = tokens.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_order_sensitive() {
        let enc = FrozenTextEncoder::new(10, 8, 6, 1).unwrap();
        let a = enc.encode(&[3, 4, 5]).unwrap();
        assert_eq!(a, enc.encode(&[3, 4, 5]).unwrap());
        assert_ne!(a, enc.encode(&[5, 4, 3]).unwrap());
        assert_eq!(a.len(), 8);
    }

    #[test]
    fn rejects_bad_input() {
        let enc = FrozenTextEncoder::new(10, 8, 3, 1).unwrap();
        assert!(enc.encode(&[]).is_err());
        assert!(enc.encode(&[11]).is_err());
        assert!(enc.encode(&[1, 2, 3, 4]).is_err());
    }
}
