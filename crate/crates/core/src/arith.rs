//! Scalar arithmetic contexts.
//!
//! Every numeric kernel in the crate is written against [`Arith`], so the
//! same code path either runs at full speed ([`Plain`]) or tallies each
//! scalar operation it performs ([`FlopCounter`]). The counter is an
//! ordinary value owned by the caller; concurrent counted runs never share
//! state.

use std::collections::BTreeMap;

/// Scalar operations used by the kernels.
///
/// One call to `mul`, `add`, `sub`, `div`, `relu` or `gate` is one flop.
/// `label` only tags the following operations for per-step breakdowns.
pub trait Arith {
    fn mul(&mut self, a: f64, b: f64) -> f64;
    fn add(&mut self, a: f64, b: f64) -> f64;
    fn sub(&mut self, a: f64, b: f64) -> f64;
    fn div(&mut self, a: f64, b: f64) -> f64;
    /// `max(x, 0)`, one comparison.
    fn relu(&mut self, x: f64) -> f64;
    /// Pass `grad` through when `pre > 0`, else zero. One flop (the mask
    /// product of the activation derivative).
    fn gate(&mut self, grad: f64, pre: f64) -> f64;
    /// Transcendental helpers used only by the softmax loss (exp, ln, max).
    fn exp(&mut self, x: f64) -> f64;
    fn ln(&mut self, x: f64) -> f64;
    fn max(&mut self, a: f64, b: f64) -> f64;
    fn label(&mut self, _label: &str) {}
    /// Whether this context tallies operations (labels are skipped otherwise).
    fn counts(&self) -> bool {
        false
    }
}

/// Uncounted arithmetic.
#[derive(Debug, Default, Clone, Copy)]
pub struct Plain;

impl Arith for Plain {
    #[inline(always)]
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    #[inline(always)]
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    #[inline(always)]
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    #[inline(always)]
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    #[inline(always)]
    fn relu(&mut self, x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            0.0
        }
    }
    #[inline(always)]
    fn gate(&mut self, grad: f64, pre: f64) -> f64 {
        if pre > 0.0 {
            grad
        } else {
            0.0
        }
    }
    #[inline(always)]
    fn exp(&mut self, x: f64) -> f64 {
        x.exp()
    }
    #[inline(always)]
    fn ln(&mut self, x: f64) -> f64 {
        x.ln()
    }
    #[inline(always)]
    fn max(&mut self, a: f64, b: f64) -> f64 {
        a.max(b)
    }
}

/// Counts every scalar operation, attributed to the most recent label.
#[derive(Debug, Clone, Default)]
pub struct FlopCounter {
    total: u64,
    current: String,
    by_label: BTreeMap<String, u64>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Per-label tallies. Operations issued before any label land under `""`.
    pub fn breakdown(&self) -> &BTreeMap<String, u64> {
        &self.by_label
    }

    /// Sum of all labels starting with `prefix`.
    pub fn sum_prefix(&self, prefix: &str) -> u64 {
        self.by_label
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| *v)
            .sum()
    }

    #[inline]
    fn tick(&mut self) {
        self.total += 1;
        // Label lookups dominate the cost of a counted run; keep the common
        // path to a single map access.
        match self.by_label.get_mut(&self.current) {
            Some(v) => *v += 1,
            None => {
                self.by_label.insert(self.current.clone(), 1);
            }
        }
    }
}

impl Arith for FlopCounter {
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        self.tick();
        a * b
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        self.tick();
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        self.tick();
        a - b
    }
    fn div(&mut self, a: f64, b: f64) -> f64 {
        self.tick();
        a / b
    }
    fn relu(&mut self, x: f64) -> f64 {
        self.tick();
        Plain.relu(x)
    }
    fn gate(&mut self, grad: f64, pre: f64) -> f64 {
        self.tick();
        Plain.gate(grad, pre)
    }
    fn exp(&mut self, x: f64) -> f64 {
        self.tick();
        x.exp()
    }
    fn ln(&mut self, x: f64) -> f64 {
        self.tick();
        x.ln()
    }
    fn max(&mut self, a: f64, b: f64) -> f64 {
        self.tick();
        a.max(b)
    }
    fn counts(&self) -> bool {
        true
    }
    fn label(&mut self, label: &str) {
        if self.current != label {
            self.current.clear();
            self.current.push_str(label);
        }
    }
}
