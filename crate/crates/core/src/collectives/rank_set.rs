use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One tensor per simulated tensor-parallel rank, all of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct RankSet<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> RankSet<T> {
    pub fn new(tensors: Vec<Tensor<T>>) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::RankSet("at least one rank is required".into()))?;
        if let Some(bad) = tensors.iter().find(|t| t.shape() != first.shape()) {
            return Err(Error::RankSet(format!(
                "per-rank shapes differ: {:?} vs {:?}",
                first.shape(),
                bad.shape()
            )));
        }
        Ok(Self { tensors })
    }

    /// The same tensor on every rank.
    pub fn replicate(t: &Tensor<T>, ranks: usize) -> Self {
        assert!(ranks >= 1, "rank count must be positive");
        Self {
            tensors: vec![t.clone(); ranks],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: vec![Tensor::zeros(self.shape()); self.ranks()],
        }
    }

    pub fn ranks(&self) -> usize {
        self.tensors.len()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensors[0].shape()
    }

    pub fn hidden(&self) -> usize {
        self.tensors[0].cols()
    }

    pub fn rank(&self, m: usize) -> &Tensor<T> {
        &self.tensors[m]
    }

    pub fn rank_mut(&mut self, m: usize) -> &mut Tensor<T> {
        &mut self.tensors[m]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Tensor<T>> {
        self.tensors.iter()
    }

    pub fn into_vec(self) -> Vec<Tensor<T>> {
        self.tensors
    }

    /// Applies a per-rank computation; the results must agree in shape.
    pub fn try_map(
        &self,
        mut f: impl FnMut(usize, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let out = self
            .tensors
            .iter()
            .enumerate()
            .map(|(m, t)| f(m, t))
            .collect::<Result<Vec<_>>>()?;
        Self::new(out)
    }

    pub fn map(&self, mut f: impl FnMut(usize, &Tensor<T>) -> Tensor<T>) -> Self {
        self.try_map(|m, t| Ok(f(m, t)))
            .expect("per-rank map produced inconsistent shapes")
    }

    /// Elementwise sum of two rank sets, rank by rank.
    pub fn add(&self, other: &RankSet<T>) -> Self {
        assert_eq!(self.ranks(), other.ranks(), "rank count mismatch");
        self.map(|m, t| t.add(other.rank(m)))
    }

    pub fn add_assign(&mut self, other: &RankSet<T>) {
        assert_eq!(self.ranks(), other.ranks(), "rank count mismatch");
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn max_abs_diff(&self, other: &RankSet<T>) -> T {
        assert_eq!(self.ranks(), other.ranks(), "rank count mismatch");
        self.tensors
            .iter()
            .zip(&other.tensors)
            .fold(T::zero(), |m, (a, b)| m.max(a.max_abs_diff(b)))
    }

    pub fn bit_eq(&self, other: &RankSet<T>) -> bool {
        self.ranks() == other.ranks()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }

    /// Whether channels `[0, count)` are bitwise identical on every rank.
    pub fn channels_agree(&self, count: usize) -> bool {
        let first = &self.tensors[0];
        self.tensors[1..].iter().all(|t| {
            (0..t.rows()).all(|i| {
                t.row(i)[..count]
                    .iter()
                    .zip(&first.row(i)[..count])
                    .all(|(a, b)| a.to_f64_lossless().to_bits() == b.to_f64_lossless().to_bits())
            })
        })
    }
}

impl<T> std::ops::Index<usize> for RankSet<T> {
    type Output = Tensor<T>;

    fn index(&self, m: usize) -> &Tensor<T> {
        &self.tensors[m]
    }
}
