use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sgd::{Dims, GradientVector};

/// Contiguous split of `[0, total_dims)` into one range per worker. The first
/// `total_dims mod workers` ranges get one extra element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkAssignment {
    pub total_dims: usize,
    pub workers: usize,
    pub boundaries: Vec<(usize, usize)>,
}

impl ChunkAssignment {
    pub fn new(total_dims: usize, workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::config("chunking needs at least one worker"));
        }
        if workers > total_dims {
            return Err(Error::config(format!(
                "cannot split {total_dims} dims into {workers} non-empty chunks"
            )));
        }
        let base = total_dims / workers;
        let extra = total_dims % workers;
        let mut boundaries = Vec::with_capacity(workers);
        let mut start = 0;
        for i in 0..workers {
            let len = base + usize::from(i < extra);
            boundaries.push((start, start + len));
            start += len;
        }
        Ok(ChunkAssignment {
            total_dims,
            workers,
            boundaries,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.boundaries.iter().map(|(s, e)| e - s).collect()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        let (s, e) = self.boundaries[i];
        s..e
    }
}

pub fn chunk_split(g: &GradientVector, workers: usize) -> Result<Vec<Vec<f64>>> {
    let assignment = ChunkAssignment::new(g.len(), workers)?;
    Ok((0..workers)
        .map(|i| g.values[assignment.range(i)].to_vec())
        .collect())
}

/// Inverse of [`chunk_split`]; chunks must be in assignment order.
pub fn chunk_concat(chunks: &[Vec<f64>], dims: Dims) -> Result<GradientVector> {
    let values: Vec<f64> = chunks.iter().flatten().copied().collect();
    let assignment = ChunkAssignment::new(values.len(), chunks.len())?;
    if assignment.sizes() != chunks.iter().map(Vec::len).collect::<Vec<_>>() {
        return Err(Error::contract("chunk sizes do not follow the assignment rule"));
    }
    GradientVector::new(dims, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn even_and_remainder_splits() {
        assert_eq!(ChunkAssignment::new(8, 4).unwrap().sizes(), vec![2, 2, 2, 2]);
        assert_eq!(ChunkAssignment::new(10, 4).unwrap().sizes(), vec![3, 3, 2, 2]);
        assert_eq!(
            ChunkAssignment::new(10, 4).unwrap().boundaries,
            vec![(0, 3), (3, 6), (6, 8), (8, 10)]
        );
    }

    #[test]
    fn too_many_workers() {
        assert!(matches!(ChunkAssignment::new(3, 4), Err(Error::Config(_))));
        assert!(matches!(ChunkAssignment::new(3, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn split_concat_identity(
            classes in 2usize..5,
            features in 1usize..9,
            workers in 1usize..12,
            seed in any::<u64>(),
        ) {
            let dims = Dims::new(classes, features);
            prop_assume!(workers <= dims.param_len());
            let values: Vec<f64> = (0..dims.param_len())
                .map(|i| f64::from_bits(seed.rotate_left(i as u32) >> 2))
                .collect();
            let g = GradientVector::new(dims, values).unwrap();
            let chunks = chunk_split(&g, workers).unwrap();
            let a = ChunkAssignment::new(g.len(), workers).unwrap();
            let sizes = a.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert_eq!(a.boundaries[0].0, 0);
            prop_assert_eq!(a.boundaries[workers - 1].1, g.len());
            let back = chunk_concat(&chunks, dims).unwrap();
            prop_assert_eq!(
                back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                g.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
