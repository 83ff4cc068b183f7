//! Time grids and the pair-enumeration policy shared by every Hölder-type
//! estimator in the crate.

use crate::error::{domain, Result};

/// Grids with at most this many steps have their pairs enumerated exhaustively.
pub const EXHAUSTIVE_PAIR_LIMIT: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    dyadic_depth: Option<u32>,
}

impl TimeGrid {
    /// Strictly increasing nodes starting at 0.
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.first().copied() != Some(0.0) {
            return domain("time grid must start at 0");
        }
        Self::window(nodes)
    }

    /// A grid that may start at a positive time; used for sub-intervals of a
    /// larger grid.
    pub fn window(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return domain("time grid needs at least two nodes");
        }
        if nodes.iter().any(|t| !t.is_finite()) {
            return domain("time grid nodes must be finite");
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return domain("time grid nodes must be strictly increasing");
        }
        Ok(Self { nodes, dyadic_depth: None })
    }

    pub fn uniform(horizon: f64, num_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || num_steps == 0 {
            return domain("uniform grid needs horizon > 0 and at least one step");
        }
        let h = horizon / num_steps as f64;
        let mut nodes: Vec<f64> = (0..=num_steps).map(|i| i as f64 * h).collect();
        nodes[num_steps] = horizon;
        Self::new(nodes)
    }

    pub fn dyadic(horizon: f64, depth: u32) -> Result<Self> {
        let mut g = Self::uniform(horizon, 1usize << depth)?;
        g.dyadic_depth = Some(depth);
        Ok(g)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn start(&self) -> f64 {
        self.nodes[0]
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    #[inline]
    pub fn step(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    pub fn dyadic_depth(&self) -> Option<u32> {
        self.dyadic_depth
    }

    pub fn max_step(&self) -> f64 {
        (0..self.num_steps()).map(|i| self.step(i)).fold(0.0, f64::max)
    }

    /// Every step split into `factor` equal sub-steps.
    pub fn refine(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        let mut nodes = Vec::with_capacity(self.num_steps() * factor + 1);
        for i in 0..self.num_steps() {
            let (a, h) = (self.nodes[i], self.step(i) / factor as f64);
            for k in 0..factor {
                nodes.push(a + k as f64 * h);
            }
        }
        nodes.push(self.horizon());
        Self {
            nodes,
            dyadic_depth: match (self.dyadic_depth, factor.is_power_of_two()) {
                (Some(d), true) => Some(d + factor.trailing_zeros()),
                _ => None,
            },
        }
    }

    /// Every `stride`-th node; `stride` must divide the number of steps.
    pub fn coarsen(&self, stride: usize) -> Result<Self> {
        if stride == 0 || !self.num_steps().is_multiple_of(stride) {
            return domain(format!(
                "stride {stride} does not divide {} steps",
                self.num_steps()
            ));
        }
        let nodes = self.nodes.iter().step_by(stride).copied().collect();
        Ok(Self { nodes, dyadic_depth: None })
    }

    /// Nodes `a..=b` as a window grid.
    pub fn restrict(&self, a: usize, b: usize) -> Result<Self> {
        if a >= b || b >= self.nodes.len() {
            return domain(format!("invalid node window {a}..={b}"));
        }
        Self::window(self.nodes[a..=b].to_vec())
    }

    /// Index of the node equal to `t` (up to 1e-12 relative), if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-12 * self.horizon().abs().max(1.0);
        let pos = self.nodes.partition_point(|&x| x < t - tol);
        (pos < self.nodes.len() && (self.nodes[pos] - t).abs() <= tol).then_some(pos)
    }
}

/// Pair-enumeration policy: exhaustive up to [`EXHAUSTIVE_PAIR_LIMIT`] steps,
/// otherwise all pairs on the lattice of multiples of
/// `stride = ceil(N / 1024)` (plus the last node) together with every
/// consecutive pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairPolicy {
    num_steps: usize,
    stride: usize,
}

impl PairPolicy {
    pub fn for_steps(num_steps: usize) -> Self {
        let stride = if num_steps <= EXHAUSTIVE_PAIR_LIMIT {
            1
        } else {
            num_steps.div_ceil(EXHAUSTIVE_PAIR_LIMIT)
        };
        Self { num_steps, stride }
    }

    pub fn for_grid(grid: &TimeGrid) -> Self {
        Self::for_steps(grid.num_steps())
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    fn on_lattice(&self, k: usize) -> bool {
        k.is_multiple_of(self.stride) || k == self.num_steps
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < j && j <= self.num_steps && (j == i + 1 || (self.on_lattice(i) && self.on_lattice(j)))
    }

    /// Whether any pair starting at `i` other than `(i, i + 1)` is included.
    #[inline]
    pub fn is_anchor(&self, i: usize) -> bool {
        self.on_lattice(i)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.num_steps {
            for j in i + 1..=self.num_steps {
                if self.contains(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Number of pairs `(i, j)` with `i` fixed, used to size accumulators.
    pub fn count(&self) -> usize {
        self.pairs().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_ends_exactly_at_horizon() {
        let g = TimeGrid::uniform(0.3, 7).unwrap();
        assert_eq!(g.horizon(), 0.3);
        assert_eq!(g.num_nodes(), 8);
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::new(vec![0.1, 0.5]).is_err());
    }

    #[test]
    fn refine_then_coarsen_round_trips() {
        let g = TimeGrid::dyadic(1.0, 3).unwrap();
        let f = g.refine(4);
        assert_eq!(f.dyadic_depth(), Some(5));
        assert_eq!(f.coarsen(4).unwrap().nodes(), g.nodes());
    }

    #[test]
    fn small_grids_enumerate_all_pairs() {
        let p = PairPolicy::for_steps(10);
        assert_eq!(p.pairs().len(), 55);
    }

    #[test]
    fn large_grids_use_stride_plus_consecutive_pairs() {
        let p = PairPolicy::for_steps(2048);
        assert_eq!(p.stride(), 2);
        assert!(p.contains(3, 4));
        assert!(!p.contains(3, 6));
        assert!(p.contains(4, 2048));
        let lattice = 1025usize;
        assert_eq!(p.pairs().len(), lattice * (lattice - 1) / 2 + 2048);
    }
}
