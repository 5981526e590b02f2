//! Thread-local multiply-add accounting.
//!
//! Every product kernel in [`crate::tensor`] (matrix products, outer
//! products, dot products inside the fused attention kernels) reports the
//! number of scalar multiply-adds it performs to the category that is
//! current on the calling thread. Elementwise maps and normalizations are
//! not counted.
//!
//! ```
//! use memsizer::counter::{self, Category};
//!
//! counter::reset();
//! {
//!     let _scope = counter::scope(Category::ValueRead);
//!     counter::add(10);
//! }
//! assert_eq!(counter::snapshot().get(Category::ValueRead), 10);
//! ```

use std::cell::Cell;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    /// Learned token-wise projections: W_q, W_k, W_v, W_o, W_l, W_r.
    Projection,
    /// Query-key similarities and their normalizers.
    AttentionWeights,
    /// Reading from values / memory and updating decode state.
    ValueRead,
    FeedForward,
    /// Embedding lookup, output logits and everything unscoped.
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Projection,
        Category::AttentionWeights,
        Category::ValueRead,
        Category::FeedForward,
        Category::Other,
    ];

    fn index(self) -> usize {
        match self {
            Category::Projection => 0,
            Category::AttentionWeights => 1,
            Category::ValueRead => 2,
            Category::FeedForward => 3,
            Category::Other => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Projection => "projection",
            Category::AttentionWeights => "attention_weights",
            Category::ValueRead => "value_read",
            Category::FeedForward => "feed_forward",
            Category::Other => "other",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts([u64; 5]);

impl Counts {
    pub fn get(&self, c: Category) -> u64 {
        self.0[c.index()]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    /// Attention-stage work: similarities plus value reads.
    pub fn attention(&self) -> u64 {
        self.get(Category::AttentionWeights) + self.get(Category::ValueRead)
    }

    pub fn since(&self, earlier: &Counts) -> Counts {
        let mut out = [0u64; 5];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.0[i] - earlier.0[i];
        }
        Counts(out)
    }

    pub fn plus(&self, other: &Counts) -> Counts {
        let mut out = self.0;
        for (o, b) in out.iter_mut().zip(other.0) {
            *o += b;
        }
        Counts(out)
    }
}

impl fmt::Display for Counts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in Category::ALL.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{}={}", c.name(), self.get(*c))?;
        }
        Ok(())
    }
}

thread_local! {
    static COUNTS: Cell<[u64; 5]> = const { Cell::new([0; 5]) };
    static CURRENT: Cell<Category> = const { Cell::new(Category::Other) };
}

#[inline]
pub fn add(n: u64) {
    let idx = CURRENT.with(|c| c.get()).index();
    COUNTS.with(|c| {
        let mut v = c.get();
        v[idx] += n;
        c.set(v);
    });
}

pub fn snapshot() -> Counts {
    Counts(COUNTS.with(|c| c.get()))
}

pub fn reset() {
    COUNTS.with(|c| c.set([0; 5]));
}

/// Attributes all counted work to `cat` until the guard drops.
pub fn scope(cat: Category) -> Scope {
    let prev = CURRENT.with(|c| c.replace(cat));
    Scope { prev }
}

#[must_use]
pub struct Scope {
    prev: Category,
}

impl Drop for Scope {
    fn drop(&mut self) {
        CURRENT.with(|c| c.set(self.prev));
    }
}
