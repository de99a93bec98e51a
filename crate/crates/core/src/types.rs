//! Shared domain types: the domain registry and the token grid.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered set of nuclei domains; ids are contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainRegistry {
    names: Vec<String>,
}

impl DomainRegistry {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Validation("registry needs at least one domain".into()));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Validation(format!("domain {i} has an empty name")));
            }
            if names[..i].contains(name) {
                return Err(Error::Validation(format!("duplicate domain name `{name}`")));
            }
        }
        Ok(Self { names })
    }

    /// Number of domains K.
    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn check_id(&self, id: usize) -> Result<()> {
        if id < self.k() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "domain id {id} outside registry of {} domains",
                self.k()
            )))
        }
    }
}

/// Patchified image embedding: N tokens by d channels on an (ht, wt) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    data: Tensor,
    grid: (usize, usize),
}

impl TokenGrid {
    pub fn new(data: Tensor, grid: (usize, usize)) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "token grid expects 2-D data, got {:?}",
                data.shape()
            )));
        }
        let (n, _) = data.dims2();
        if n != grid.0 * grid.1 {
            return Err(Error::Shape(format!(
                "{} tokens do not fill a {}x{} grid",
                n, grid.0, grid.1
            )));
        }
        if !data.is_finite() {
            return Err(Error::Validation("token grid has non-finite entries".into()));
        }
        Ok(Self { data, grid })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn tokens(&self) -> usize {
        self.data.dims2().0
    }

    pub fn dim(&self) -> usize {
        self.data.dims2().1
    }

    /// Reshape to channel-first (d, ht, wt).
    pub fn to_chw(&self) -> Tensor {
        let (n, d) = self.data.dims2();
        let (ht, wt) = self.grid;
        let mut out = Tensor::zeros(vec![d, ht, wt]);
        for tok in 0..n {
            for c in 0..d {
                out.data_mut()[c * n + tok] = self.data.data()[tok * d + c];
            }
        }
        out
    }

    /// Inverse of [`TokenGrid::to_chw`].
    pub fn from_chw(chw: &Tensor) -> Result<Self> {
        let (d, ht, wt) = chw.dims3();
        let n = ht * wt;
        let mut out = Tensor::zeros(vec![n, d]);
        for tok in 0..n {
            for c in 0..d {
                out.data_mut()[tok * d + c] = chw.data()[c * n + tok];
            }
        }
        Self::new(out, (ht, wt))
    }
}
