//! Binary indexed tree over nonnegative weights with prefix-sum search.

#[derive(Debug, Clone)]
pub struct Fenwick {
    tree: Vec<f64>,
    values: Vec<f64>,
    /// Largest power of two not exceeding the length.
    top: usize,
}

impl Fenwick {
    pub fn new(len: usize) -> Self {
        let top = if len == 0 { 0 } else { 1 << (usize::BITS - 1 - len.leading_zeros()) };
        Self { tree: vec![0.0; len + 1], values: vec![0.0; len], top }
    }

    pub fn from_values(values: &[f64]) -> Self {
        let mut f = Self::new(values.len());
        f.rebuild(values);
        f
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Replaces every weight, in linear time.
    pub fn rebuild(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.values.len());
        self.values.copy_from_slice(values);
        self.tree[0] = 0.0;
        self.tree[1..].copy_from_slice(values);
        let n = values.len();
        for i in 1..=n {
            let j = i + (i & i.wrapping_neg());
            if j <= n {
                self.tree[j] += self.tree[i];
            }
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: f64) {
        let delta = value - self.values[i];
        if delta == 0.0 {
            return;
        }
        self.values[i] = value;
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    /// Sum of all weights as maintained by the tree.
    pub fn total(&self) -> f64 {
        self.prefix(self.values.len())
    }

    /// Sum of the first `n` weights.
    pub fn prefix(&self, n: usize) -> f64 {
        let mut s = 0.0;
        let mut j = n;
        while j > 0 {
            s += self.tree[j];
            j &= j - 1;
        }
        s
    }

    /// Smallest index `i` with `prefix(i + 1) > target`, skipping zero
    /// weights. Targets at or beyond the total return the last positive index.
    pub fn find(&self, target: f64) -> usize {
        let n = self.values.len();
        let mut pos = 0;
        let mut rem = target;
        let mut step = self.top;
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        // Rounding can land on a zero-weight slot; walk to a positive one.
        if pos >= n || self.values[pos] <= 0.0 {
            if let Some(i) = (pos.min(n)..n).find(|&i| self.values[i] > 0.0) {
                return i;
            }
            return (0..pos.min(n)).rev().find(|&i| self.values[i] > 0.0).unwrap_or(0);
        }
        pos
    }
}
