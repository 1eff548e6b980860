//! Flat parameter-vector arithmetic shared by every other module.
//!
//! A [`ParamVector`] is the universal currency of the simulator: global
//! models, model updates, magnitude vectors, and noise all live here as
//! flat `f64` sequences of a fixed dimension `d`.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("negative magnitude entry at index {index}")]
    NegativeMagnitude { index: usize },
}

/// Flat real-valued parameter/update vector of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Wraps a raw vector, rejecting NaN/Inf entries.
    pub fn new(values: Vec<f64>) -> Result<Self, ParamError> {
        match values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(ParamError::NonFinite { index }),
            None => Ok(Self(values)),
        }
    }

    /// Wraps a raw vector without the finiteness scan. Diverged training can
    /// legitimately produce non-finite entries; the aggregation layer orders
    /// floats with `total_cmp`, so such vectors flow through without panics
    /// and callers that need a guarantee use [`ParamVector::is_finite`].
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn check_len(&self, other: &Self) -> Result<(), ParamError> {
        if self.len() != other.len() {
            return Err(ParamError::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(())
    }

    /// Element-wise sum.
    pub fn add(&self, other: &Self) -> Result<Self, ParamError> {
        self.check_len(other)?;
        Ok(Self(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    /// Element-wise difference `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self, ParamError> {
        self.check_len(other)?;
        Ok(Self(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), ParamError> {
        self.check_len(other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(self.0.iter().map(|a| a * c).collect())
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in &mut self.0 {
            *a *= c;
        }
    }

    /// Element-wise absolute value.
    pub fn abs(&self) -> Self {
        Self(self.0.iter().map(|a| a.abs()).collect())
    }

    pub fn dot(&self, other: &Self) -> Result<f64, ParamError> {
        self.check_len(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    /// Euclidean norm, accumulated in f64.
    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn squared_distance(&self, other: &Self) -> Result<f64, ParamError> {
        self.check_len(other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Cosine similarity; zero when either vector is zero.
    pub fn cosine(&self, other: &Self) -> Result<f64, ParamError> {
        let denom = self.l2_norm() * other.l2_norm();
        if denom == 0.0 {
            self.check_len(other)?;
            return Ok(0.0);
        }
        Ok(self.dot(other)? / denom)
    }

    /// Per-dimension sign with the fixed tie rule `sign(0) = +1`.
    pub fn sign_of(&self) -> SignVector {
        SignVector(
            self.0
                .iter()
                .map(|&a| if a < 0.0 { -1 } else { 1 })
                .collect(),
        )
    }

    /// Fraction of dimensions whose sign (tie rule applied) equals `s`.
    pub fn sign_match_fraction(&self, s: &SignVector) -> Result<f64, ParamError> {
        if self.len() != s.len() {
            return Err(ParamError::LengthMismatch {
                left: self.len(),
                right: s.len(),
            });
        }
        let matches = self
            .0
            .iter()
            .zip(&s.0)
            .filter(|(&a, &sj)| {
                let sign = if a < 0.0 { -1 } else { 1 };
                sign == sj
            })
            .count();
        Ok(matches as f64 / self.len() as f64)
    }

    /// Count of dimensions whose sign equals `s`; the statistic `X` of the
    /// binomial window test.
    pub fn sign_match_count(&self, s: &SignVector) -> Result<usize, ParamError> {
        if self.len() != s.len() {
            return Err(ParamError::LengthMismatch {
                left: self.len(),
                right: s.len(),
            });
        }
        Ok(self
            .0
            .iter()
            .zip(&s.0)
            .filter(|(&a, &sj)| (if a < 0.0 { -1 } else { 1 }) == sj)
            .count())
    }
}

/// Fixed ±1 direction vector; every entry is exactly +1 or -1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignVector(Vec<i8>);

impl SignVector {
    pub fn new(signs: Vec<i8>) -> Result<Self, ParamError> {
        match signs.iter().position(|&s| s != 1 && s != -1) {
            Some(index) => Err(ParamError::NonFinite { index }),
            None => Ok(Self(signs)),
        }
    }

    /// Each entry +1 or -1 uniformly at random.
    pub fn random<R: Rng>(d: usize, rng: &mut R) -> Self {
        Self((0..d).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn get(&self, j: usize) -> i8 {
        self.0[j]
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|s| -s).collect())
    }
}

/// Dimension-wise product of a non-negative magnitude vector and a sign
/// vector; the malicious-update form `k ⊙ s`.
pub fn hadamard_sign(k: &ParamVector, s: &SignVector) -> Result<ParamVector, ParamError> {
    if k.len() != s.len() {
        return Err(ParamError::LengthMismatch {
            left: k.len(),
            right: s.len(),
        });
    }
    if let Some(index) = k.as_slice().iter().position(|&v| v < 0.0) {
        return Err(ParamError::NegativeMagnitude { index });
    }
    Ok(ParamVector(
        k.as_slice()
            .iter()
            .zip(s.as_slice())
            .map(|(&kj, &sj)| kj * f64::from(sj))
            .collect(),
    ))
}

/// Unweighted mean of a non-empty set of equal-length vectors.
pub fn mean(vectors: &[ParamVector]) -> Result<ParamVector, ParamError> {
    let first = vectors.first().expect("mean of empty set");
    let mut acc = ParamVector::zeros(first.len());
    for v in vectors {
        acc.add_assign(v)?;
    }
    acc.scale_assign(1.0 / vectors.len() as f64);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn sv(v: &[i8]) -> SignVector {
        SignVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn add_identity_and_cancellation() {
        assert_eq!(pv(&[1.0, 2.0]).add(&pv(&[0.0, 0.0])).unwrap(), pv(&[1.0, 2.0]));
        assert_eq!(pv(&[1.0, -1.0]).add(&pv(&[-1.0, 1.0])).unwrap(), pv(&[0.0, 0.0]));
        assert_eq!(
            pv(&[0.5, 0.25]).add(&pv(&[0.5, 0.75])).unwrap(),
            pv(&[1.0, 1.0])
        );
    }

    #[test]
    fn add_rejects_length_mismatch() {
        let err = pv(&[1.0]).add(&pv(&[1.0, 2.0])).unwrap_err();
        assert_eq!(err, ParamError::LengthMismatch { left: 1, right: 2 });
    }

    #[test]
    fn new_rejects_non_finite() {
        assert_eq!(
            ParamVector::new(vec![0.0, f64::NAN]).unwrap_err(),
            ParamError::NonFinite { index: 1 }
        );
        assert_eq!(
            ParamVector::new(vec![f64::INFINITY]).unwrap_err(),
            ParamError::NonFinite { index: 0 }
        );
    }

    #[test]
    fn hadamard_sign_definition() {
        assert_eq!(
            hadamard_sign(&pv(&[2.0, 3.0]), &sv(&[1, -1])).unwrap(),
            pv(&[2.0, -3.0])
        );
        assert_eq!(
            hadamard_sign(&pv(&[0.0, 0.0]), &sv(&[1, -1])).unwrap(),
            pv(&[0.0, 0.0])
        );
        assert_eq!(
            hadamard_sign(&pv(&[1.0, 1.0, 1.0]), &sv(&[-1, -1, 1])).unwrap(),
            pv(&[-1.0, -1.0, 1.0])
        );
    }

    #[test]
    fn hadamard_sign_rejects_negative_magnitude() {
        assert_eq!(
            hadamard_sign(&pv(&[1.0, -0.5]), &sv(&[1, 1])).unwrap_err(),
            ParamError::NegativeMagnitude { index: 1 }
        );
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(pv(&[3.0, 4.0]).l2_norm(), 5.0);
        assert_eq!(ParamVector::zeros(8).l2_norm(), 0.0);
        assert_eq!(pv(&[1.0, 1.0, 1.0, 1.0]).l2_norm(), 2.0);
    }

    #[test]
    fn sign_of_tie_rule() {
        assert_eq!(pv(&[0.1, -0.2]).sign_of(), sv(&[1, -1]));
        assert_eq!(pv(&[0.0, 0.0]).sign_of(), sv(&[1, 1]));
        assert_eq!(pv(&[-5.0, 0.0, 3.0]).sign_of(), sv(&[-1, 1, 1]));
    }

    #[test]
    fn sign_match_fraction_examples() {
        assert_eq!(pv(&[1.0, -1.0]).sign_match_fraction(&sv(&[1, -1])).unwrap(), 1.0);
        assert_eq!(pv(&[1.0, 1.0]).sign_match_fraction(&sv(&[-1, -1])).unwrap(), 0.0);
        assert_eq!(
            pv(&[1.0, -1.0, 2.0, -2.0])
                .sign_match_fraction(&sv(&[1, 1, -1, -1]))
                .unwrap(),
            0.5
        );
    }

    #[test]
    fn scale_norm_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let d = 1 + (rng.random::<u32>() % 40) as usize;
            let v = ParamVector::from_raw(
                (0..d).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect(),
            );
            let c = rng.random::<f64>() * 6.0 - 3.0;
            let lhs = v.scale(c).l2_norm();
            let rhs = c.abs() * v.l2_norm();
            let denom = rhs.abs().max(1e-300);
            assert!((lhs - rhs).abs() / denom < 1e-12, "lhs={lhs} rhs={rhs}");
        }
    }

    #[test]
    fn hadamard_sign_preserves_signs_where_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let d = 1 + (rng.random::<u32>() % 20) as usize;
            let k = ParamVector::from_raw((0..d).map(|_| rng.random::<f64>()).collect());
            let s = SignVector::random(d, &mut rng);
            let out = hadamard_sign(&k, &s).unwrap();
            let out_signs = out.sign_of();
            for j in 0..d {
                if k.as_slice()[j] > 0.0 {
                    assert_eq!(out_signs.get(j), s.get(j));
                }
            }
        }
    }

    #[test]
    fn sign_match_with_own_signs_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let d = 1 + (rng.random::<u32>() % 30) as usize;
            let v = ParamVector::from_raw(
                (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            );
            assert_eq!(v.sign_match_fraction(&v.sign_of()).unwrap(), 1.0);
        }
    }
}
