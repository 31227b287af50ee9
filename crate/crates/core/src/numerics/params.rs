use super::tensor::{Real, Tensor2};
use crate::error::{Error, Result};

/// One named parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor2<F>,
}

/// Ordered collection of named parameter blocks. Also used for gradients and
/// optimizer moments, which mirror the parameter layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    blocks: Vec<Param<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self { blocks: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor2<F>) {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate block {name}");
        self.blocks.push(Param { name, value });
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.blocks.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.blocks.iter_mut()
    }

    pub fn names(&self) -> Vec<&str> {
        self.blocks.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|p| p.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn get(&self, name: &str) -> &Tensor2<F> {
        match self.index_of(name) {
            Some(i) => &self.blocks[i].value,
            None => panic!("no parameter block {name}"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor2<F> {
        match self.index_of(name) {
            Some(i) => &mut self.blocks[i].value,
            None => panic!("no parameter block {name}"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor2<F>> {
        self.index_of(name).map(|i| &self.blocks[i].value)
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Tensor2::zeros(p.value.rows(), p.value.cols()),
                })
                .collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            blocks: self
                .blocks
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// `self += other`, block by block. Layouts must match.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.names(), other.names(), "parameter layout mismatch");
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.value.axpy(F::one(), &b.value);
        }
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|p| p.value.len()).sum()
    }

    /// Name of the first block holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.blocks
            .iter()
            .find(|p| !p.value.is_finite())
            .map(|p| p.name.as_str())
    }

    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::Shape(format!(
                "{} blocks vs {}",
                self.blocks.len(),
                other.blocks.len()
            )));
        }
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!(
                    "block {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}
