//! Dense row-major `[rows × heads × dim]` tensors.

use crate::element::Element;

/// Owned `[rows × heads × dim]` tensor stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    rows: usize,
    heads: usize,
    dim: usize,
    data: Vec<T>,
}

/// Borrowed `[rows × heads × dim]` tensor.
#[derive(Debug, Clone, Copy)]
pub struct View3<'a, T> {
    rows: usize,
    heads: usize,
    dim: usize,
    data: &'a [T],
}

impl<T: Element> Tensor3<T> {
    pub fn zeros(rows: usize, heads: usize, dim: usize) -> Self {
        Self {
            rows,
            heads,
            dim,
            data: vec![T::zero(); rows * heads * dim],
        }
    }

    /// Wraps `data`; returns `None` when its length is not `rows * heads * dim`.
    pub fn from_vec(rows: usize, heads: usize, dim: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == rows * heads * dim).then_some(Self { rows, heads, dim, data })
    }

    /// Builds a tensor from a generator called in row-major order.
    pub fn from_fn(rows: usize, heads: usize, dim: usize, mut f: impl FnMut() -> T) -> Self {
        let data = (0..rows * heads * dim).map(|_| f()).collect();
        Self { rows, heads, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn view(&self) -> View3<'_, T> {
        View3 {
            rows: self.rows,
            heads: self.heads,
            dim: self.dim,
            data: &self.data,
        }
    }

    pub fn vector(&self, row: usize, head: usize) -> &[T] {
        let start = (row * self.heads + head) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn vector_mut(&mut self, row: usize, head: usize) -> &mut [T] {
        let start = (row * self.heads + head) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// All heads of one row, `heads * dim` contiguous elements.
    pub fn row(&self, row: usize) -> &[T] {
        let w = self.heads * self.dim;
        &self.data[row * w..(row + 1) * w]
    }

    /// Gathers the given rows into a new tensor, in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.heads * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            heads: self.heads,
            dim: self.dim,
            data,
        }
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Element>(&self) -> Tensor3<U> {
        Tensor3 {
            rows: self.rows,
            heads: self.heads,
            dim: self.dim,
            data: self.data.iter().map(|x| U::from_f64(Element::to_f64(*x))).collect(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            rows: self.rows,
            heads: self.heads,
            dim: self.dim,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl<'a, T: Element> View3<'a, T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, row: usize, head: usize) -> &'a [T] {
        let start = (row * self.heads + head) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Sub-view over rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> View3<'a, T> {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        let w = self.heads * self.dim;
        View3 {
            rows: end - start,
            heads: self.heads,
            dim: self.dim,
            data: &self.data[start * w..end * w],
        }
    }

    pub fn to_owned(&self) -> Tensor3<T> {
        Tensor3 {
            rows: self.rows,
            heads: self.heads,
            dim: self.dim,
            data: self.data.to_vec(),
        }
    }
}

/// Concatenates tensors along the row axis. All inputs must share heads and dim.
pub fn concat_rows<T: Element>(parts: &[View3<'_, T>]) -> Option<Tensor3<T>> {
    let first = parts.first()?;
    let (heads, dim) = (first.heads, first.dim);
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.heads != heads || p.dim != dim {
            return None;
        }
        data.extend_from_slice(p.data);
        rows += p.rows;
    }
    Some(Tensor3 { rows, heads, dim, data })
}
