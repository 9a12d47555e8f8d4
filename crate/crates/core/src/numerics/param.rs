use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::numerics::{Graph, Matrix, NodeId};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// A trainable tensor together with its Adam moments.
///
/// The id is process-local and only used to find a parameter's leaf in the
/// graph of the current step; it is never persisted.
#[derive(Debug)]
pub struct Param {
    id: u64,
    pub value: Matrix,
    pub m: Matrix,
    pub v: Matrix,
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Param {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: self.value.clone(),
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value && self.m == other.m && self.v == other.v
    }
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Param {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// Drops columns from the value and both moments.
    pub fn remove_columns(&mut self, drop: &[usize]) {
        self.value = self.value.remove_columns(drop);
        self.m = self.m.remove_columns(drop);
        self.v = self.v.remove_columns(drop);
    }

    /// Appends a column; its moments start at zero.
    pub fn push_column(&mut self, col: &[f64]) {
        let zeros = vec![0.0; col.len()];
        self.value.push_column(col);
        self.m.push_column(&zeros);
        self.v.push_column(&zeros);
    }

    pub fn reset_moments(&mut self) {
        let (r, c) = self.shape();
        self.m = Matrix::zeros(r, c);
        self.v = Matrix::zeros(r, c);
    }
}

/// Maps parameters to graph leaves for one step.
#[derive(Debug, Default)]
pub struct Binder {
    nodes: HashMap<u64, NodeId>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf for `p`, created once per graph. Frozen parameters become constants.
    pub fn bind(&mut self, g: &mut Graph, p: &Param, trainable: bool) -> NodeId {
        *self.nodes.entry(p.id).or_insert_with(|| {
            if trainable {
                g.param(p.value.clone())
            } else {
                g.constant(p.value.clone())
            }
        })
    }

    pub fn node(&self, p: &Param) -> Option<NodeId> {
        self.nodes.get(&p.id).copied()
    }
}
