use crate::error::{Result, TensorError};

/// Per-batch-element `q_len × kv_len` table of allowed attention positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    q_len: usize,
    kv_len: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    /// Build from an explicit table; rejects rows that forbid every key.
    pub fn new(batch: usize, q_len: usize, kv_len: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != batch * q_len * kv_len {
            return Err(TensorError::Shape {
                op: "attention_mask",
                lhs: vec![batch, q_len, kv_len],
                rhs: vec![allow.len()],
            });
        }
        for b in 0..batch {
            for i in 0..q_len {
                let row = &allow[(b * q_len + i) * kv_len..][..kv_len];
                if !row.iter().any(|&a| a) {
                    return Err(TensorError::FullyMasked { batch: b, row: i });
                }
            }
        }
        Ok(Self {
            batch,
            q_len,
            kv_len,
            allow,
        })
    }

    /// Keys at or beyond each element's length are forbidden; with `causal`,
    /// query `i` additionally sees only keys `j <= i`.
    pub fn from_key_lengths(
        key_lengths: &[usize],
        q_len: usize,
        kv_len: usize,
        causal: bool,
    ) -> Result<Self> {
        let batch = key_lengths.len();
        let mut allow = Vec::with_capacity(batch * q_len * kv_len);
        for &len in key_lengths {
            for i in 0..q_len {
                for j in 0..kv_len {
                    allow.push(j < len && (!causal || j <= i));
                }
            }
        }
        Self::new(batch, q_len, kv_len, allow)
    }

    pub fn causal(batch: usize, len: usize) -> Self {
        Self::from_key_lengths(&vec![len; batch], len, len, true).expect("causal mask")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn kv_len(&self) -> usize {
        self.kv_len
    }

    #[inline]
    pub fn row(&self, b: usize, i: usize) -> &[bool] {
        &self.allow[(b * self.q_len + i) * self.kv_len..][..self.kv_len]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_masked_row_is_rejected() {
        let err = AttentionMask::new(1, 2, 2, vec![true, false, false, false]).unwrap_err();
        assert_eq!(err, TensorError::FullyMasked { batch: 0, row: 1 });
    }

    #[test]
    fn causal_with_padding() {
        let m = AttentionMask::from_key_lengths(&[2], 3, 3, true).unwrap();
        assert_eq!(m.row(0, 0), &[true, false, false]);
        assert_eq!(m.row(0, 2), &[true, true, false]);
        assert!(AttentionMask::from_key_lengths(&[0], 1, 1, false).is_err());
    }
}
