//! Generator matrices of the process on small rings and their stationary
//! laws, used as ground truth for the stochastic code.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use crate::dynamics::Base;
use crate::error::{FepError, Result};
use crate::lattice::{is_ergodic, Configuration};

/// Largest ring handled by exact enumeration.
pub const MAX_RING: usize = 18;

/// Generator on the ergodic configurations of a small ring.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub len: usize,
    pub base: Base,
    /// States as bit patterns (bit `i` is site `i`), in increasing order.
    pub states: Vec<u64>,
    index: HashMap<u64, usize>,
    /// Off-diagonal entries `(from, to, rate)`.
    pub entries: Vec<(usize, usize, f64)>,
    pub diagonal: Vec<f64>,
}

/// All cyclically ergodic patterns on `len` sites, optionally with a fixed
/// particle count.
pub fn ergodic_states(len: usize, particles: Option<usize>) -> Vec<u64> {
    (0..1u64 << len)
        .filter(|&p| particles.is_none_or(|k| p.count_ones() as usize == k))
        .filter(|&p| is_ergodic(&Configuration::from_pattern(p, len)))
        .collect()
}

/// Generator of `base` on rings of `len` sites with `particles` particles
/// (all particle numbers when `None`), at unit speed.
pub fn build_generator(len: usize, particles: Option<usize>, base: Base) -> Result<GeneratorMatrix> {
    if len > MAX_RING {
        return Err(FepError::RingTooLarge(len));
    }
    let states = ergodic_states(len, particles);
    if states.is_empty() {
        return Err(FepError::EmptyStateSpace { len, particles: particles.unwrap_or(0) });
    }
    let index: HashMap<u64, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut entries = Vec::new();
    let mut diagonal = vec![0.0; states.len()];
    for (i, &s) in states.iter().enumerate() {
        let c = Configuration::from_pattern(s, len);
        let mut out: HashMap<usize, f64> = HashMap::new();
        for x in 0..len {
            let r = base.rate(&c, x);
            if r == 0 {
                continue;
            }
            let mut next = c.clone();
            next.swap_in_place(x);
            let j = *index.get(&next.pattern()).ok_or_else(|| {
                // a positive rate leading outside the state list would break closure
                FepError::Parse(format!("transition from {c} leaves the ergodic component"))
            })?;
            if j != i {
                *out.entry(j).or_insert(0.0) += r as f64;
            }
        }
        let mut row: Vec<(usize, f64)> = out.into_iter().collect();
        row.sort_by_key(|e| e.0);
        for (j, r) in row {
            entries.push((i, j, r));
            diagonal[i] -= r;
        }
    }
    Ok(GeneratorMatrix { len, base, states, index, entries, diagonal })
}

impl GeneratorMatrix {
    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn index_of(&self, pattern: u64) -> Option<usize> {
        self.index.get(&pattern).copied()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (i, &d) in self.diagonal.iter().enumerate() {
            m[(i, i)] = d;
        }
        for &(i, j, r) in &self.entries {
            m[(i, j)] += r;
        }
        m
    }

    /// Largest absolute row sum.
    pub fn max_row_sum(&self) -> f64 {
        let mut sums = self.diagonal.clone();
        for &(i, _, r) in &self.entries {
            sums[i] += r;
        }
        sums.iter().fold(0.0f64, |a, s| a.max(s.abs()))
    }

    /// Strongly connected components, and how many of them are closed.
    pub fn communicating_classes(&self) -> (Vec<Vec<usize>>, usize) {
        let mut g = DiGraph::<(), ()>::new();
        let nodes: Vec<_> = (0..self.dim()).map(|_| g.add_node(())).collect();
        for &(i, j, _) in &self.entries {
            g.add_edge(nodes[i], nodes[j], ());
        }
        let sccs = tarjan_scc(&g);
        let mut class_of = vec![0usize; self.dim()];
        let classes: Vec<Vec<usize>> = sccs
            .iter()
            .enumerate()
            .map(|(c, comp)| {
                let mut v: Vec<usize> = comp.iter().map(|n| n.index()).collect();
                v.sort_unstable();
                for &s in &v {
                    class_of[s] = c;
                }
                v
            })
            .collect();
        let mut open = vec![false; classes.len()];
        for &(i, j, _) in &self.entries {
            if class_of[i] != class_of[j] {
                open[class_of[i]] = true;
            }
        }
        let closed = open.iter().filter(|o| !**o).count();
        (classes, closed)
    }

    /// `πG` in the maximum norm.
    pub fn balance_residual(&self, pi: &[f64]) -> f64 {
        let mut r: Vec<f64> = self.diagonal.iter().zip(pi).map(|(d, p)| d * p).collect();
        for &(i, j, rate) in &self.entries {
            r[j] += pi[i] * rate;
        }
        r.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Unique stationary law, from a dense QR solve of `Gᵀπ = 0` with one
    /// balance equation replaced by the normalisation.
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        let n = self.dim();
        let (classes, closed) = self.communicating_classes();
        if closed != 1 {
            return Err(FepError::Reducible { classes: classes.len(), closed_classes: closed });
        }
        if n == 1 {
            return Ok(vec![1.0]);
        }
        let mut m = self.to_dense().transpose();
        for j in 0..n {
            m[(n - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(n);
        rhs[n - 1] = 1.0;
        let sol = m
            .qr()
            .solve(&rhs)
            .ok_or(FepError::Reducible { classes: classes.len(), closed_classes: closed })?;
        let mut pi: Vec<f64> = sol.iter().map(|&v| v.max(0.0)).collect();
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|v| *v /= total);
        Ok(pi)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["from", "to", "rate"])?;
        let text = |s: u64| Configuration::from_pattern(s, self.len).to_string();
        for (i, &d) in self.diagonal.iter().enumerate() {
            w.write_record([text(self.states[i]), text(self.states[i]), d.to_string()])?;
        }
        for &(i, j, r) in &self.entries {
            w.write_record([text(self.states[i]), text(self.states[j]), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_distribution_csv<W: Write>(&self, out: W, pi: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["state", "probability"])?;
        for (&s, p) in self.states.iter().zip(pi) {
            w.write_record([Configuration::from_pattern(s, self.len).to_string(), format!("{p:.17e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `Σ_s obs(s) π(s)`.
pub fn exact_expectation<F: Fn(&Configuration) -> f64>(gen: &GeneratorMatrix, pi: &[f64], obs: F) -> f64 {
    gen.states
        .iter()
        .zip(pi)
        .map(|(&s, p)| obs(&Configuration::from_pattern(s, gen.len)) * p)
        .sum()
}
