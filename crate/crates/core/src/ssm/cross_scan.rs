use candle_core::Tensor;

use crate::error::{Error, Result};

/// Traversal order of one cross-scan sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    RowForward,
    RowBackward,
    ColumnForward,
    ColumnBackward,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowForward,
        Direction::RowBackward,
        Direction::ColumnForward,
        Direction::ColumnBackward,
    ];

    /// Flat row-major grid index visited at sequence step `k`.
    pub fn position(self, k: usize, height: usize, width: usize) -> usize {
        let l = height * width;
        let col_major = |k: usize| (k % height) * width + k / height;
        match self {
            Direction::RowForward => k,
            Direction::RowBackward => l - 1 - k,
            Direction::ColumnForward => col_major(k),
            Direction::ColumnBackward => col_major(l - 1 - k),
        }
    }
}

/// The four scan sequences of a feature map, stored as one
/// `(batch, 4, channels, height * width)` tensor in [`Direction::ALL`] order.
#[derive(Debug, Clone)]
pub struct DirectionalSequences {
    data: Tensor,
    height: usize,
    width: usize,
}

impl DirectionalSequences {
    pub fn new(data: Tensor, height: usize, width: usize) -> Result<Self> {
        let (_, k, _, l) = data.dims4()?;
        if k != 4 {
            return Err(Error::Shape(format!("expected 4 directions, got {k}")));
        }
        if height == 0 || width == 0 || l != height * width {
            return Err(Error::Shape(format!(
                "sequence length {l} does not match a {height}x{width} grid"
            )));
        }
        Ok(Self {
            data,
            height,
            width,
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(batch, channels, length)` view of a single direction.
    pub fn direction(&self, dir: Direction) -> Result<Tensor> {
        let idx = Direction::ALL.iter().position(|d| *d == dir).unwrap();
        Ok(self.data.narrow(1, idx, 1)?.squeeze(1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Flattens a `(C, H, W)` or `(B, C, H, W)` map into the four directional
/// sequences. Values are only permuted.
pub fn cross_scan(feature_map: &Tensor) -> Result<DirectionalSequences> {
    let x = match feature_map.rank() {
        3 => feature_map.unsqueeze(0)?,
        4 => feature_map.clone(),
        r => return Err(Error::Shape(format!("cross_scan expects rank 3 or 4, got {r}"))),
    };
    let (b, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::Shape("cross_scan needs a non-empty grid".into()));
    }
    let l = h * w;
    let rows = x.reshape((b, c, l))?;
    let cols = x.transpose(2, 3)?.contiguous()?.reshape((b, c, l))?;
    let rows_rev = rows.flip(&[2])?;
    let cols_rev = cols.flip(&[2])?;
    let data = Tensor::stack(&[rows, rows_rev, cols, cols_rev], 1)?;
    DirectionalSequences::new(data, h, w)
}

/// Scatters each sequence back onto the grid and reduces across directions.
/// Returns `(B, C, H, W)`.
pub fn cross_merge(seqs: &DirectionalSequences, reduction: Reduction) -> Result<Tensor> {
    let (b, _, c, l) = seqs.data.dims4()?;
    let (h, w) = (seqs.height, seqs.width);
    if l != h * w {
        return Err(Error::Shape(format!(
            "sequence length {l} does not match a {h}x{w} grid"
        )));
    }
    let seq = |i: usize| -> Result<Tensor> { Ok(seqs.data.narrow(1, i, 1)?.squeeze(1)?) };
    let from_rows = |t: Tensor| -> Result<Tensor> { Ok(t.reshape((b, c, h, w))?) };
    let from_cols = |t: Tensor| -> Result<Tensor> {
        Ok(t.reshape((b, c, w, h))?.transpose(2, 3)?.contiguous()?)
    };
    let rf = from_rows(seq(0)?)?;
    let rb = from_rows(seq(1)?.contiguous()?.flip(&[2])?)?;
    let cf = from_cols(seq(2)?)?;
    let cb = from_cols(seq(3)?.contiguous()?.flip(&[2])?)?;
    // pairwise sum keeps merge(scan(x)) == x bit-exact under Mean
    let total = ((rf + rb)? + (cf + cb)?)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => (total * 0.25)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn labels(h: usize, w: usize) -> Tensor {
        Tensor::arange(0f64, (h * w) as f64, &Device::Cpu)
            .unwrap()
            .reshape((1, h, w))
            .unwrap()
    }

    fn order(seqs: &DirectionalSequences, dir: Direction) -> Vec<f64> {
        seqs.direction(dir).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn two_by_two_orders() {
        let s = cross_scan(&labels(2, 2)).unwrap();
        assert_eq!(order(&s, Direction::RowForward), [0., 1., 2., 3.]);
        assert_eq!(order(&s, Direction::RowBackward), [3., 2., 1., 0.]);
        assert_eq!(order(&s, Direction::ColumnForward), [0., 2., 1., 3.]);
        assert_eq!(order(&s, Direction::ColumnBackward), [3., 1., 2., 0.]);
    }

    #[test]
    fn position_matches_scan() {
        let (h, w) = (3, 5);
        let s = cross_scan(&labels(h, w)).unwrap();
        for dir in Direction::ALL {
            let got = order(&s, dir);
            for (k, v) in got.iter().enumerate() {
                assert_eq!(*v as usize, dir.position(k, h, w));
            }
        }
    }

    #[test]
    fn degenerate_grid() {
        let s = cross_scan(&labels(1, 1)).unwrap();
        for dir in Direction::ALL {
            assert_eq!(order(&s, dir), [0.]);
        }
    }

    #[test]
    fn merge_sum_is_four_copies() {
        let x = Tensor::randn(0f64, 1., (2, 3, 4, 5), &Device::Cpu).unwrap();
        let y = cross_merge(&cross_scan(&x).unwrap(), Reduction::Sum).unwrap();
        let want: Vec<f64> = (x.clone() * 4.0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), want);
    }

    #[test]
    fn merge_of_ones_is_ones() {
        let data = Tensor::ones((1, 4, 2, 6), DType::F32, &Device::Cpu).unwrap();
        let seqs = DirectionalSequences::new(data, 2, 3).unwrap();
        let y = cross_merge(&seqs, Reduction::Mean).unwrap();
        assert!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let data = Tensor::ones((1, 4, 2, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(DirectionalSequences::new(data.clone(), 2, 3).is_err());
        let three = Tensor::ones((1, 3, 2, 6), DType::F32, &Device::Cpu).unwrap();
        assert!(DirectionalSequences::new(three, 2, 3).is_err());
    }
}
