use std::sync::Arc;

use super::ModelError;
use crate::diffcore::DenseArray;

const NORM_TOLERANCE: f64 = 1e-9;

/// Fixed-capacity FIFO ring buffer of unit-norm embeddings used as extra
/// negatives. Entries are detached copies.
#[derive(Debug, Clone)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    len: usize,
    cursor: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            len: 0,
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Slot the next row will be written to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Appends `K` rows, overwriting the oldest entries once full.
    pub fn push(&mut self, rows: &DenseArray) -> Result<(), ModelError> {
        let (k, d) = rows.dims2().ok_or_else(|| ModelError::QueueShape {
            expected: self.dim,
            got: rows.shape().to_vec(),
        })?;
        if d != self.dim {
            return Err(ModelError::QueueShape {
                expected: self.dim,
                got: rows.shape().to_vec(),
            });
        }
        if k > self.capacity {
            return Err(ModelError::Capacity {
                capacity: self.capacity,
                batch: k,
            });
        }
        for i in 0..k {
            let row = rows.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(ModelError::Structure(format!(
                    "queue row {i} has norm {norm}, expected 1"
                )));
            }
        }
        for i in 0..k {
            let slot = self.cursor * self.dim;
            self.data[slot..slot + self.dim].copy_from_slice(rows.row(i));
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.len = (self.len + k).min(self.capacity);
        Ok(())
    }

    /// Current entries, oldest first, as `[len, dim]`; `None` when empty.
    pub fn snapshot(&self) -> Option<Arc<DenseArray>> {
        if self.len == 0 {
            return None;
        }
        let start = if self.len < self.capacity {
            0
        } else {
            self.cursor
        };
        let mut out = Vec::with_capacity(self.len * self.dim);
        for i in 0..self.len {
            let slot = (start + i) % self.capacity * self.dim;
            out.extend_from_slice(&self.data[slot..slot + self.dim]);
        }
        DenseArray::new(vec![self.len, self.dim], out)
            .ok()
            .map(Arc::new)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Unit rows whose angle encodes their index.
    fn batch(start: usize, k: usize) -> DenseArray {
        let rows: Vec<Vec<f64>> = (start..start + k)
            .map(|i| {
                let a = i as f64 * 1e-4;
                vec![a.cos(), a.sin()]
            })
            .collect();
        DenseArray::from_rows(&rows).unwrap()
    }

    fn ids(q: &MemoryQueue) -> Vec<usize> {
        let s = q.snapshot().unwrap();
        (0..s.shape()[0])
            .map(|i| (s.get2(i, 1).atan2(s.get2(i, 0)) * 1e4).round() as usize)
            .collect()
    }

    #[test]
    fn fifo_eviction() {
        let mut q = MemoryQueue::new(4, 2);
        assert!(q.snapshot().is_none());
        q.push(&batch(0, 2)).unwrap();
        q.push(&batch(2, 2)).unwrap();
        q.push(&batch(4, 2)).unwrap();
        assert_eq!(ids(&q), vec![2, 3, 4, 5]);
        q.push(&batch(10, 4)).unwrap();
        assert_eq!(ids(&q), vec![10, 11, 12, 13]);
    }

    #[test]
    fn large_ring_keeps_most_recent() {
        let mut q = MemoryQueue::new(4092, 2);
        for p in 0..9 {
            q.push(&batch(p * 512, 512)).unwrap();
        }
        assert_eq!(q.len(), 4092);
        assert_eq!(ids(&q), (516..4608).collect::<Vec<_>>());
        assert_eq!(q.cursor(), 4608 % 4092);
    }

    #[test]
    fn push_errors() {
        let mut q = MemoryQueue::new(2, 2);
        assert!(matches!(
            q.push(&batch(0, 3)),
            Err(ModelError::Capacity { .. })
        ));
        assert!(q
            .push(&DenseArray::from_rows(&[vec![1.0, 1.0]]).unwrap())
            .is_err());
        assert!(q
            .push(&DenseArray::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap())
            .is_err());
        assert!(q.is_empty());
    }
}
