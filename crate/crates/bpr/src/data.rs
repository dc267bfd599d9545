//! Cohort container: binary mixture covariates, response covariates, outcome.

use crate::error::{BprError, Result};

/// An immutable cohort: an `n x p` binary mixture covariate matrix `x`
/// (disease indicators), an `n x a` real response covariate matrix `w`
/// (binary columns stored as 0/1 reals) and a length-`n` binary outcome `y`.
#[derive(Debug, Clone)]
pub struct CohortData {
    x: Vec<u8>,
    w: Vec<f64>,
    y: Vec<u8>,
    n: usize,
    p: usize,
    a: usize,
    mixture_names: Vec<String>,
    response_names: Vec<String>,
    outcome_name: String,
}

impl CohortData {
    pub fn new(
        x: Vec<u8>,
        w: Vec<f64>,
        y: Vec<u8>,
        n: usize,
        p: usize,
        a: usize,
        mixture_names: Vec<String>,
        response_names: Vec<String>,
        outcome_name: String,
    ) -> Result<Self> {
        if n == 0 {
            return Err(BprError::InvalidInput(
                "cohort must have n >= 1 rows".into(),
            ));
        }
        if x.len() != n * p || w.len() != n * a || y.len() != n {
            return Err(BprError::InvalidInput(format!(
                "shape mismatch: x {} (want {}), w {} (want {}), y {} (want {})",
                x.len(),
                n * p,
                w.len(),
                n * a,
                y.len(),
                n
            )));
        }
        if x.iter().any(|&v| v > 1) || y.iter().any(|&v| v > 1) {
            return Err(BprError::InvalidInput(
                "mixture covariates and outcome must be exactly 0 or 1".into(),
            ));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(BprError::InvalidInput(
                "response covariates must be finite".into(),
            ));
        }
        if mixture_names.len() != p || response_names.len() != a {
            return Err(BprError::InvalidInput("column name count mismatch".into()));
        }
        Ok(Self {
            x,
            w,
            y,
            n,
            p,
            a,
            mixture_names,
            response_names,
            outcome_name,
        })
    }

    /// Convenience constructor with synthetic column names.
    pub fn from_rows(
        x: Vec<u8>,
        w: Vec<f64>,
        y: Vec<u8>,
        n: usize,
        p: usize,
        a: usize,
    ) -> Result<Self> {
        let mixture_names = (0..p).map(|j| format!("x{j}")).collect();
        let response_names = (0..a).map(|j| format!("w{j}")).collect();
        Self::new(x, w, y, n, p, a, mixture_names, response_names, "y".into())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn a(&self) -> usize {
        self.a
    }

    #[inline]
    pub fn x_row(&self, i: usize) -> &[u8] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    pub fn w_row(&self, i: usize) -> &[f64] {
        &self.w[i * self.a..(i + 1) * self.a]
    }

    #[inline]
    pub fn y(&self, i: usize) -> u8 {
        self.y[i]
    }

    pub fn outcome_rate(&self) -> f64 {
        self.y.iter().map(|&v| v as f64).sum::<f64>() / self.n as f64
    }

    pub fn mixture_names(&self) -> &[String] {
        &self.mixture_names
    }

    pub fn response_names(&self) -> &[String] {
        &self.response_names
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    /// Index-based row subset sharing the underlying storage.
    pub fn view<'a>(&'a self, indices: &'a [usize]) -> BatchView<'a> {
        BatchView {
            data: self,
            indices: Some(indices),
        }
    }

    /// The whole cohort as a batch.
    pub fn full_view(&self) -> BatchView<'_> {
        BatchView {
            data: self,
            indices: None,
        }
    }
}

/// A borrowed, index-based view of a subset of cohort rows. No data is copied.
#[derive(Clone, Copy)]
pub struct BatchView<'a> {
    data: &'a CohortData,
    indices: Option<&'a [usize]>,
}

impl<'a> BatchView<'a> {
    pub fn len(&self) -> usize {
        match self.indices {
            Some(idx) => idx.len(),
            None => self.data.n(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &'a CohortData {
        self.data
    }

    /// Iterate over (x_row, w_row, y) for every row in the batch.
    pub fn rows(&self) -> impl Iterator<Item = (&'a [u8], &'a [f64], u8)> + '_ {
        let data = self.data;
        let iter: Box<dyn Iterator<Item = usize> + '_> = match self.indices {
            Some(idx) => Box::new(idx.iter().copied()),
            None => Box::new(0..data.n()),
        };
        iter.map(move |i| (data.x_row(i), data.w_row(i), data.y(i)))
    }
}
