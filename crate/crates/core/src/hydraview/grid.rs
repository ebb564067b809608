use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `V × T × C` multi-view window features with a `V × T` validity mask.
/// Invalid cells hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<S> {
    values: Tensor<S>,
    valid: Vec<bool>,
}

impl<S: Real> FeatureGrid<S> {
    /// Builds a grid, zeroing every invalid cell.
    pub fn new(values: Tensor<S>, valid: Vec<bool>) -> Result<Self> {
        let &[v, t, c] = values.shape() else {
            return Err(shape_err("FeatureGrid", format!("rank-3 values expected, got {:?}", values.shape())));
        };
        if v == 0 || t == 0 {
            return Err(Error::InvalidArgument(format!("empty feature grid {v}×{t}")));
        }
        if valid.len() != v * t {
            return Err(shape_err("FeatureGrid", format!("mask of {} for {v}×{t}", valid.len())));
        }
        let mut data = values.into_data();
        for (cell, &ok) in valid.iter().enumerate() {
            if !ok {
                data[cell * c..(cell + 1) * c].fill(S::zero());
            }
        }
        Ok(Self {
            values: Tensor::new(vec![v, t, c], data)?,
            valid,
        })
    }

    pub fn fully_valid(values: Tensor<S>) -> Result<Self> {
        let cells = values.shape().iter().take(2).product();
        Self::new(values, vec![true; cells])
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn views(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn windows(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_valid(&self, v: usize, t: usize) -> bool {
        self.valid[v * self.windows() + t]
    }

    pub fn cell(&self, v: usize, t: usize) -> &[S] {
        let c = self.channels();
        let i = (v * self.windows() + t) * c;
        &self.values.data()[i..i + c]
    }

    /// Keeps only the listed views, in the given order.
    pub fn select_views(&self, views: &[usize]) -> Result<Self> {
        let (t, c) = (self.windows(), self.channels());
        if views.is_empty() {
            return Err(Error::InvalidArgument("no views selected".into()));
        }
        let mut data = Vec::with_capacity(views.len() * t * c);
        let mut valid = Vec::with_capacity(views.len() * t);
        for &v in views {
            if v >= self.views() {
                return Err(Error::InvalidArgument(format!(
                    "view {v} outside a {}-view grid",
                    self.views()
                )));
            }
            data.extend_from_slice(&self.values.data()[v * t * c..(v + 1) * t * c]);
            valid.extend_from_slice(&self.valid[v * t..(v + 1) * t]);
        }
        Self::new(Tensor::new(vec![views.len(), t, c], data)?, valid)
    }

    pub fn cast<T: Real>(&self) -> FeatureGrid<T> {
        FeatureGrid {
            values: self.values.cast(),
            valid: self.valid.clone(),
        }
    }
}
