//! Dense row-major matrices and vectors over `f64`.
//!
//! All reductions run in ascending index order so that identical inputs give
//! bit-identical outputs. The checked free functions (`matvec`, `add`, ...)
//! validate shapes and return [`Error::Shape`]; the `*_acc` / `*_into` methods
//! are the unchecked hot-path kernels used by the forward and backward passes
//! and only `debug_assert!` their shapes.

use std::fmt;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self {
            data: vec![value; len],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

impl From<&[f64]> for Vector {
    fn from(data: &[f64]) -> Self {
        Self {
            data: data.to_vec(),
        }
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.iter()).finish()
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row 0 has {cols} columns"),
                    format!("row {i} has {}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out += self · x`
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · v`
    pub fn matvec_t_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&vi, row) in v.iter().zip(self.data.chunks_exact(self.cols)) {
            if vi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += vi * w;
            }
        }
    }

    /// `self += a · bᵀ`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (&ai, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if ai == 0.0 {
                continue;
            }
            for (r, &bj) in row.iter_mut().zip(b) {
                *r += ai * bj;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(Error::shape(
            "matvec",
            format!("matrix {}x{}", m.rows, m.cols),
            format!("vector of length {}", v.len()),
        ));
    }
    let mut out = Vector::zeros(m.rows);
    m.matvec_acc(v, &mut out);
    Ok(out)
}

fn check_same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(
            op,
            format!("length {}", a.len()),
            format!("length {}", b.len()),
        ));
    }
    Ok(())
}

pub fn add(a: &Vector, b: &Vector) -> Result<Vector> {
    check_same_len("add", a, b)?;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x + y).collect::<Vec<_>>().into())
}

pub fn elemwise_mul(a: &Vector, b: &Vector) -> Result<Vector> {
    check_same_len("elemwise_mul", a, b)?;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).collect::<Vec<_>>().into())
}

/// Largest `f64` strictly below one.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, clamped so that every output stays strictly inside (0, 1).
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

pub fn sigmoid(v: &Vector) -> Vector {
    v.iter().map(|&x| sigmoid_scalar(x)).collect::<Vec<_>>().into()
}

pub fn relu(v: &Vector) -> Vector {
    v.iter().map(|&x| x.max(0.0)).collect::<Vec<_>>().into()
}

pub fn tanh_act(v: &Vector) -> Vector {
    v.iter().map(|&x| x.tanh()).collect::<Vec<_>>().into()
}

/// Max-subtracted softmax; a length-zero input yields an empty vector.
pub fn softmax(v: &Vector) -> Vector {
    let mut out = v.clone();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn clip_elementwise(v: &Vector, bound: f64) -> Result<Vector> {
    let mut out = v.clone();
    clip_in_place(&mut out, bound)?;
    Ok(out)
}

pub fn clip_in_place(v: &mut [f64], bound: f64) -> Result<()> {
    if !(bound > 0.0) {
        return Err(Error::Config(format!(
            "clip bound must be positive, got {bound}"
        )));
    }
    for x in v.iter_mut() {
        *x = x.clamp(-bound, bound);
    }
    Ok(())
}

pub fn sum_squares(m: &Matrix) -> f64 {
    m.data.iter().fold(0.0, |acc, x| acc + x * x)
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
        }
    }

    /// Derivative evaluated from the pre-activation `pre` and output `post`.
    pub fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!(
                "unknown activation `{other}` (expected relu|tanh)"
            ))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from(x)
    }

    #[test]
    fn matvec_examples() {
        assert_eq!(
            matvec(&Matrix::identity(3), &v(&[1.0, 2.0, 3.0])).unwrap(),
            v(&[1.0, 2.0, 3.0])
        );
        assert_eq!(
            matvec(&Matrix::zeros(2, 3), &v(&[5.0, 5.0, 5.0])).unwrap(),
            v(&[0.0, 0.0])
        );
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matvec(&m, &v(&[1.0, 1.0])).unwrap(), v(&[3.0, 7.0]));
    }

    #[test]
    fn matvec_mismatch_names_both_shapes() {
        let err = matvec(&Matrix::zeros(2, 3), &v(&[1.0, 2.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("length 2"), "{msg}");
        assert!(err.is_config());
    }

    #[test]
    fn elementwise_examples() {
        let a = v(&[1.0, 2.0, 3.0]);
        assert_eq!(elemwise_mul(&a, &v(&[0.0; 3])).unwrap(), v(&[0.0; 3]));
        assert_eq!(elemwise_mul(&a, &v(&[1.0; 3])).unwrap(), a);
        assert_eq!(
            add(&v(&[1.0, -1.0]), &v(&[2.0, 2.0])).unwrap(),
            v(&[3.0, 1.0])
        );
        assert!(add(&a, &v(&[1.0])).is_err());
        assert!(elemwise_mul(&a, &v(&[1.0])).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(&v(&[0.0, 0.0])), v(&[0.5, 0.5]));
        let s = sigmoid(&v(&[1000.0]))[0];
        assert!(s < 1.0 && s > 1.0 - 1e-12);
        let s = sigmoid(&v(&[-1000.0]))[0];
        assert!(s > 0.0 && s < 1e-12);
        assert!((sigmoid(&v(&[3f64.ln()]))[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn activation_examples() {
        assert_eq!(relu(&v(&[-1.0, 0.0, 2.0])), v(&[0.0, 0.0, 2.0]));
        assert_eq!(tanh_act(&v(&[0.0])), v(&[0.0]));
        assert_eq!(relu(&v(&[5.5])), v(&[5.5]));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&v(&[0.0, 0.0, 0.0]));
        for x in s.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let c = 1.7;
        let s = softmax(&v(&[c, c + 2f64.ln()]));
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s[1] - 2.0 / 3.0).abs() < 1e-12);
        let s = softmax(&v(&[1000.0, 0.0]));
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] >= 0.0 && s[1] < 1e-12);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(
            clip_elementwise(&v(&[-7.0, 3.0, 6.0]), 5.0).unwrap(),
            v(&[-5.0, 3.0, 5.0])
        );
        assert_eq!(clip_elementwise(&v(&[0.0]), 5.0).unwrap(), v(&[0.0]));
        assert_eq!(
            clip_elementwise(&v(&[-5.0, 5.0]), 5.0).unwrap(),
            v(&[-5.0, 5.0])
        );
        assert!(clip_elementwise(&v(&[1.0]), 0.0).unwrap_err().is_config());
        assert!(clip_elementwise(&v(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn sum_squares_examples() {
        assert_eq!(sum_squares(&Matrix::zeros(2, 2)), 0.0);
        assert_eq!(sum_squares(&Matrix::identity(3)), 3.0);
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(sum_squares(&m), 30.0);
    }

    #[test]
    fn transpose_and_outer_kernels() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let mut out = vec![0.0; 3];
        m.matvec_t_acc(&[1.0, -1.0], &mut out);
        assert_eq!(out, vec![-3.0, -3.0, -3.0]);
        let mut z = Matrix::zeros(2, 3);
        z.add_outer(&[1.0, 2.0], &[1.0, 0.0, -1.0]);
        assert_eq!(z.as_slice(), &[1.0, 0.0, -1.0, 2.0, 0.0, -2.0]);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    fn extreme_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e3..1e3f64, 1..64)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_normalizes(x in extreme_vec()) {
            let s = softmax(&Vector::from(x));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.iter().all(|p| p.is_finite() && *p >= 0.0));
        }

        #[test]
        fn sigmoid_strictly_inside_unit_interval(x in prop::num::f64::NORMAL | prop::num::f64::ZERO) {
            let s = sigmoid_scalar(x);
            prop_assert!(s > 0.0 && s < 1.0);
        }

        #[test]
        fn clip_is_idempotent(x in prop::collection::vec(-20.0..20.0f64, 0..32), b in 0.1..10.0f64) {
            let once = clip_elementwise(&Vector::from(x), b).unwrap();
            let twice = clip_elementwise(&once, b).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.iter().all(|v| v.abs() <= b));
        }
    }

    proptest! {
        #[test]
        fn matvec_is_linear(
            (rows, cols, a, x, y) in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| (
                Just(r), Just(c),
                prop::collection::vec(-5.0..5.0f64, r * c),
                prop::collection::vec(-5.0..5.0f64, c),
                prop::collection::vec(-5.0..5.0f64, c),
            ))
        ) {
            let m = Matrix::from_vec(rows, cols, a).unwrap();
            let x = Vector::from(x);
            let y = Vector::from(y);
            let lhs = matvec(&m, &add(&x, &y).unwrap()).unwrap();
            let rhs = add(&matvec(&m, &x).unwrap(), &matvec(&m, &y).unwrap()).unwrap();
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-10);
            }
        }

        #[test]
        fn kernels_are_deterministic(x in prop::collection::vec(-1e3..1e3f64, 1..32)) {
            let v = Vector::from(x);
            let a = softmax(&v);
            let b = softmax(&v);
            prop_assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
