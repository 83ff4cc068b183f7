//! Lazy two-parameter increments `Q(s, t)` over the pair set of a grid, and
//! the conditional-expectation estimator built from martingale tags.
//!
//! An increment is an expression tree whose leaves are ensembles and lifts.
//! Evaluation walks each row `s = t_i` forward in `j`, so propagated and
//! iterated-integral terms are updated in `O(1)` steps per pair.

use std::sync::Arc;

use rayon::prelude::*;

use crate::ensemble::SampleEnsemble;
use crate::error::{shape, Result};
use crate::grid::{PairPolicy, TimeGrid};
use crate::propagator::GridPropagator;
use crate::rough_path::{LiftEnsemble, PairWalker, RoughPathLift};
use crate::spectral::{moment_term, weighted_sq_norm, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// A linear map applied to field values at node `s`.
pub trait NodeOperator: Send + Sync {
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn apply(&self, sample: usize, node: usize, input: &[C64], out: &mut [C64]);
    /// The same operator on the node window `a..=b`.
    fn restrict(&self, a: usize, b: usize) -> Arc<dyn NodeOperator>;
}

#[derive(Clone)]
pub enum Increment {
    Zero { channels: usize },
    /// `Q_t - Q_s`.
    Plain(Arc<SampleEnsemble>),
    /// `Q_t - S_{s,t} Q_s`.
    Mild(Arc<SampleEnsemble>),
    /// `(S_{s,t} - I) Q_s`.
    PropDefect(Arc<SampleEnsemble>),
    /// `Σ_a D_s^{(c,a)} δX^a_{s,t}`, optionally propagated by `S_{s,t}`.
    Linear { coeff: Arc<SampleEnsemble>, lifts: LiftEnsemble, propagated: bool },
    /// `Σ_{a,b} D_s^{(c,a,b)} 𝕏^{ba}_{s,t}`, optionally propagated.
    Second { coeff: Arc<SampleEnsemble>, lifts: LiftEnsemble, propagated: bool },
    /// `(t - s)^power Q_s`.
    TimeWeighted { power: f64, values: Arc<SampleEnsemble> },
    /// An operator taken at `s` applied to the inner increment.
    Apply { op: Arc<dyn NodeOperator>, inner: Box<Increment> },
    Sum(Vec<(f64, Increment)>),
}

impl std::fmt::Debug for Increment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Increment::Zero { channels } => write!(f, "Zero({channels})"),
            Increment::Plain(_) => write!(f, "Plain"),
            Increment::Mild(_) => write!(f, "Mild"),
            Increment::PropDefect(_) => write!(f, "PropDefect"),
            Increment::Linear { propagated, .. } => write!(f, "Linear(propagated={propagated})"),
            Increment::Second { propagated, .. } => write!(f, "Second(propagated={propagated})"),
            Increment::TimeWeighted { power, .. } => write!(f, "TimeWeighted({power})"),
            Increment::Apply { inner, .. } => write!(f, "Apply({inner:?})"),
            Increment::Sum(terms) => f.debug_list().entries(terms.iter().map(|t| (t.0, &t.1))).finish(),
        }
    }
}

impl Increment {
    pub fn zero(channels: usize) -> Self {
        Increment::Zero { channels }
    }

    pub fn linear(coeff: SampleEnsemble, lifts: &LiftEnsemble, propagated: bool) -> Self {
        Increment::Linear { coeff: Arc::new(coeff), lifts: lifts.clone(), propagated }
    }

    pub fn second(coeff: SampleEnsemble, lifts: &LiftEnsemble, propagated: bool) -> Self {
        Increment::Second { coeff: Arc::new(coeff), lifts: lifts.clone(), propagated }
    }

    pub fn minus(self, other: Increment) -> Self {
        Increment::Sum(vec![(1.0, self), (-1.0, other)])
    }

    pub fn plus(self, other: Increment) -> Self {
        Increment::Sum(vec![(1.0, self), (1.0, other)])
    }

    pub fn scaled(self, a: f64) -> Self {
        Increment::Sum(vec![(a, self)])
    }

    pub fn is_trivially_zero(&self) -> bool {
        match self {
            Increment::Zero { .. } => true,
            Increment::Sum(terms) => terms.iter().all(|(a, t)| *a == 0.0 || t.is_trivially_zero()),
            Increment::Apply { inner, .. } => inner.is_trivially_zero(),
            _ => false,
        }
    }

    /// Output channel count.
    pub fn channels(&self) -> usize {
        match self {
            Increment::Zero { channels } => *channels,
            Increment::Plain(q) | Increment::Mild(q) | Increment::PropDefect(q) => q.shape().channels,
            Increment::TimeWeighted { values, .. } => values.shape().channels,
            Increment::Linear { coeff, lifts, .. } => coeff.shape().channels / lifts.dim_e(),
            Increment::Second { coeff, lifts, .. } => coeff.shape().channels / (lifts.dim_e() * lifts.dim_e()),
            Increment::Apply { op, .. } => op.out_channels(),
            Increment::Sum(terms) => terms.first().map_or(0, |t| t.1.channels()),
        }
    }

    /// Number of Monte Carlo samples spanned by the leaves (shared leaves count as one).
    pub fn num_samples(&self) -> usize {
        match self {
            Increment::Zero { .. } => 1,
            Increment::Plain(q) | Increment::Mild(q) | Increment::PropDefect(q) => q.num_samples(),
            Increment::TimeWeighted { values, .. } => values.num_samples(),
            Increment::Linear { coeff, lifts, .. } | Increment::Second { coeff, lifts, .. } => {
                coeff.num_samples().max(lifts.len())
            }
            Increment::Apply { inner, .. } => inner.num_samples(),
            Increment::Sum(terms) => terms.iter().map(|t| t.1.num_samples()).max().unwrap_or(1),
        }
    }

    fn check(&self, grid: &TimeGrid, modes: usize, samples: usize) -> Result<()> {
        let ens = |q: &SampleEnsemble| -> Result<()> {
            if q.grid().num_nodes() != grid.num_nodes() || q.shape().modes() != modes {
                return shape("increment leaf does not match the evaluation grid".to_string());
            }
            if q.num_samples() != 1 && q.num_samples() != samples {
                return shape("increment leaves have inconsistent sample counts".to_string());
            }
            Ok(())
        };
        match self {
            Increment::Zero { .. } => Ok(()),
            Increment::Plain(q) | Increment::Mild(q) | Increment::PropDefect(q) => ens(q),
            Increment::TimeWeighted { values, .. } => ens(values),
            Increment::Linear { coeff, lifts, .. } | Increment::Second { coeff, lifts, .. } => {
                ens(coeff)?;
                if lifts.len() != 1 && lifts.len() != samples {
                    return shape("lift ensemble has an inconsistent sample count".to_string());
                }
                if lifts.grid().num_nodes() != grid.num_nodes() {
                    return shape("lift grid does not match the evaluation grid".to_string());
                }
                let e = lifts.dim_e();
                let per = if matches!(self, Increment::Linear { .. }) { e } else { e * e };
                if coeff.shape().channels % per != 0 {
                    return shape("coefficient channels are not a multiple of the lift dimension".to_string());
                }
                Ok(())
            }
            Increment::Apply { op, inner } => {
                if op.in_channels() != inner.channels() {
                    return shape("operator input channels do not match".to_string());
                }
                inner.check(grid, modes, samples)
            }
            Increment::Sum(terms) => {
                let c = self.channels();
                for (_, t) in terms {
                    if t.channels() != c {
                        return shape("summands have different channel counts".to_string());
                    }
                    t.check(grid, modes, samples)?;
                }
                Ok(())
            }
        }
    }

    /// The same increment on the node window `a..=b`.
    pub fn restrict(&self, a: usize, b: usize) -> Result<Self> {
        let r = |q: &Arc<SampleEnsemble>| -> Result<Arc<SampleEnsemble>> { Ok(Arc::new(q.restrict(a, b)?)) };
        Ok(match self {
            Increment::Zero { channels } => Increment::Zero { channels: *channels },
            Increment::Plain(q) => Increment::Plain(r(q)?),
            Increment::Mild(q) => Increment::Mild(r(q)?),
            Increment::PropDefect(q) => Increment::PropDefect(r(q)?),
            Increment::TimeWeighted { power, values } => Increment::TimeWeighted { power: *power, values: r(values)? },
            Increment::Linear { coeff, lifts, propagated } => {
                Increment::Linear { coeff: r(coeff)?, lifts: lifts.restrict(a, b)?, propagated: *propagated }
            }
            Increment::Second { coeff, lifts, propagated } => {
                Increment::Second { coeff: r(coeff)?, lifts: lifts.restrict(a, b)?, propagated: *propagated }
            }
            Increment::Apply { op, inner } => Increment::Apply { op: op.restrict(a, b), inner: Box::new(inner.restrict(a, b)?) },
            Increment::Sum(terms) => {
                Increment::Sum(terms.iter().map(|(c, t)| Ok((*c, t.restrict(a, b)?))).collect::<Result<_>>()?)
            }
        })
    }

    /// Value at one pair `(t_i, t_j)`, for tests and spot checks.
    pub fn eval(&self, prop: &GridPropagator, sample: usize, i: usize, j: usize) -> Result<Vec<C64>> {
        self.check(prop.grid(), prop.modes(), self.num_samples())?;
        let mut row = RowState::build(self, prop, sample, i);
        for k in i..j {
            row.advance(prop, k);
        }
        let mut out = vec![ZERO; self.channels() * prop.modes()];
        row.value(prop, sample, i, j, &mut out);
        Ok(out)
    }

    /// `sup_{(s,t)} (mean_ω |Q(s,t)|_γ^m)^{1/m} / |t - s|^exponent` over the
    /// pair policy of the propagator grid.
    pub fn seminorm(&self, prop: &GridPropagator, m: f64, gamma: f64, exponent: f64) -> Result<f64> {
        let grid = prop.grid();
        let modes = prop.modes();
        let samples = self.num_samples();
        self.check(grid, modes, samples)?;
        if self.is_trivially_zero() {
            return Ok(0.0);
        }
        let simplified = self.simplified()?;
        if simplified.is_trivially_zero() {
            return Ok(0.0);
        }
        let this = &simplified;
        let channels = this.channels();
        let weights = leaf_weights(this, gamma).unwrap_or_default();
        let policy = PairPolicy::for_grid(grid);
        let n = grid.num_steps();
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let last = if policy.is_anchor(i) { n } else { i + 1 };
                let mut sums = vec![0.0; last - i];
                let mut out = vec![ZERO; channels * modes];
                for s in 0..samples {
                    let mut row = RowState::build(this, prop, s, i);
                    for j in i + 1..=last {
                        row.advance(prop, j - 1);
                        if policy.contains(i, j) {
                            row.value(prop, s, i, j, &mut out);
                            sums[j - i - 1] += moment_term(weighted_sq_norm(&weights, &out), m);
                        }
                    }
                }
                let mut best: f64 = 0.0;
                for j in i + 1..=last {
                    if policy.contains(i, j) {
                        let h = grid.node(j) - grid.node(i);
                        best = best.max((sums[j - i - 1] / samples as f64).powf(1.0 / m) / h.powf(exponent));
                    }
                }
                best
            })
            .collect();
        Ok(rows.into_iter().fold(0.0, f64::max))
    }
}

type Group = Vec<(f64, Arc<SampleEnsemble>)>;

fn merge_group(group: Group) -> Result<Option<(f64, Arc<SampleEnsemble>)>> {
    let mut it = group.into_iter();
    let Some(first) = it.next() else { return Ok(None) };
    let rest: Vec<_> = it.collect();
    if rest.is_empty() {
        return Ok((first.0 != 0.0 && !first.1.is_zero()).then_some(first));
    }
    let samples = rest.iter().map(|t| t.1.num_samples()).fold(first.1.num_samples(), usize::max);
    let mut acc = first.1.broadcast(samples)?.scaled(first.0);
    for (c, q) in rest {
        acc = acc.combine(1.0, &q.broadcast(samples)?, c)?;
    }
    if acc.is_zero() {
        return Ok(None);
    }
    Ok(Some((1.0, Arc::new(acc))))
}

impl Increment {
    fn flatten<'a>(&'a self, coef: f64, out: &mut Vec<(f64, &'a Increment)>) {
        match self {
            Increment::Sum(terms) => terms.iter().for_each(|(c, t)| t.flatten(coef * c, out)),
            Increment::Zero { .. } => {}
            _ if coef == 0.0 => {}
            _ => out.push((coef, self)),
        }
    }

    /// An equivalent increment with like leaves merged, so each pair is
    /// evaluated with as few propagations as possible.
    pub fn simplified(&self) -> Result<Increment> {
        let mut leaves = Vec::new();
        self.flatten(1.0, &mut leaves);
        let channels = self.channels();
        let (mut plain, mut mild, mut defect): (Group, Group, Group) = Default::default();
        let mut weighted: Vec<(f64, Group)> = Vec::new();
        let mut linear: Vec<(LiftEnsemble, bool, bool, Group)> = Vec::new();
        let mut others: Vec<(f64, Increment)> = Vec::new();
        for (c, leaf) in leaves {
            match leaf {
                Increment::Plain(q) => plain.push((c, q.clone())),
                Increment::Mild(q) => mild.push((c, q.clone())),
                Increment::PropDefect(q) => defect.push((c, q.clone())),
                Increment::TimeWeighted { power, values } => {
                    match weighted.iter_mut().find(|g| g.0 == *power) {
                        Some(g) => g.1.push((c, values.clone())),
                        None => weighted.push((*power, vec![(c, values.clone())])),
                    }
                }
                Increment::Linear { coeff, lifts, propagated } | Increment::Second { coeff, lifts, propagated } => {
                    let second = matches!(leaf, Increment::Second { .. });
                    match linear.iter_mut().find(|g| g.1 == *propagated && g.2 == second && g.0 == *lifts) {
                        Some(g) => g.3.push((c, coeff.clone())),
                        None => linear.push((lifts.clone(), *propagated, second, vec![(c, coeff.clone())])),
                    }
                }
                _ => others.push((c, leaf.clone())),
            }
        }
        let mut terms: Vec<(f64, Increment)> = Vec::new();
        for (group, wrap) in [
            (plain, Increment::Plain as fn(Arc<SampleEnsemble>) -> Increment),
            (mild, Increment::Mild),
            (defect, Increment::PropDefect),
        ] {
            if let Some((c, q)) = merge_group(group)? {
                terms.push((c, wrap(q)));
            }
        }
        for (power, group) in weighted {
            if let Some((c, values)) = merge_group(group)? {
                terms.push((c, Increment::TimeWeighted { power, values }));
            }
        }
        for (lifts, propagated, second, group) in linear {
            if let Some((c, coeff)) = merge_group(group)? {
                let inc = if second {
                    Increment::Second { coeff, lifts, propagated }
                } else {
                    Increment::Linear { coeff, lifts, propagated }
                };
                terms.push((c, inc));
            }
        }
        terms.extend(others);
        Ok(match terms.len() {
            0 => Increment::Zero { channels },
            1 if terms[0].0 == 1.0 => terms.pop().unwrap().1,
            _ => Increment::Sum(terms),
        })
    }
}

fn leaf_weights(inc: &Increment, gamma: f64) -> Option<Vec<f64>> {
    match inc {
        Increment::Zero { .. } => None,
        Increment::Plain(q) | Increment::Mild(q) | Increment::PropDefect(q) => Some(q.shape().bessel_weights(gamma)),
        Increment::TimeWeighted { values, .. } => Some(values.shape().bessel_weights(gamma)),
        Increment::Linear { coeff, .. } | Increment::Second { coeff, .. } => Some(coeff.shape().bessel_weights(gamma)),
        Increment::Apply { inner, .. } => leaf_weights(inner, gamma),
        Increment::Sum(terms) => terms.iter().find_map(|t| leaf_weights(&t.1, gamma)),
    }
}

#[inline]
fn pick(q: &SampleEnsemble, sample: usize) -> usize {
    if q.num_samples() == 1 {
        0
    } else {
        sample
    }
}

/// Per-row evaluation state mirroring an [`Increment`].
enum RowState<'a> {
    Zero,
    Plain(&'a SampleEnsemble),
    Mild { q: &'a SampleEnsemble, state: Vec<C64>, scratch: Vec<C64> },
    PropDefect { start: Vec<C64>, state: Vec<C64>, scratch: Vec<C64> },
    Linear { coeff: Vec<C64>, lift: &'a RoughPathLift, walker: PairWalker, propagated: bool, scratch: Vec<C64>, second: bool },
    TimeWeighted { power: f64, values: &'a [C64] },
    Apply { op: &'a dyn NodeOperator, inner: Box<RowState<'a>>, buf: Vec<C64> },
    Sum(Vec<(f64, RowState<'a>, Vec<C64>)>),
}

impl<'a> RowState<'a> {
    fn build(inc: &'a Increment, prop: &GridPropagator, sample: usize, i: usize) -> Self {
        let modes = prop.modes();
        match inc {
            Increment::Zero { .. } => RowState::Zero,
            Increment::Plain(q) => RowState::Plain(q),
            Increment::Mild(q) => {
                RowState::Mild { q, state: q.field(pick(q, sample), i).to_vec(), scratch: Vec::new() }
            }
            Increment::PropDefect(q) => {
                let start = q.field(pick(q, sample), i).to_vec();
                RowState::PropDefect { state: start.clone(), start, scratch: Vec::new() }
            }
            Increment::Linear { coeff, lifts, propagated } | Increment::Second { coeff, lifts, propagated } => {
                let lift = lifts.get(sample);
                RowState::Linear {
                    coeff: coeff.field(pick(coeff, sample), i).to_vec(),
                    lift,
                    walker: PairWalker::new(lift, i),
                    propagated: *propagated,
                    scratch: Vec::new(),
                    second: matches!(inc, Increment::Second { .. }),
                }
            }
            Increment::TimeWeighted { power, values } => {
                RowState::TimeWeighted { power: *power, values: values.field(pick(values, sample), i) }
            }
            Increment::Apply { op, inner } => RowState::Apply {
                op: op.as_ref(),
                inner: Box::new(RowState::build(inner, prop, sample, i)),
                buf: vec![ZERO; op.in_channels() * modes],
            },
            Increment::Sum(terms) => RowState::Sum(
                terms
                    .iter()
                    .map(|(c, t)| (*c, RowState::build(t, prop, sample, i), vec![ZERO; t.channels() * modes]))
                    .collect(),
            ),
        }
    }

    /// Moves the right endpoint from `t_k` to `t_{k+1}`.
    fn advance(&mut self, prop: &GridPropagator, k: usize) {
        match self {
            RowState::Zero | RowState::Plain(_) | RowState::TimeWeighted { .. } => {}
            RowState::Mild { state, scratch, .. } | RowState::PropDefect { state, scratch, .. } => {
                prop.advance(k, state, scratch)
            }
            RowState::Linear { coeff, lift, walker, propagated, scratch, .. } => {
                walker.step(lift, k);
                if *propagated {
                    prop.advance(k, coeff, scratch);
                }
            }
            RowState::Apply { inner, .. } => inner.advance(prop, k),
            RowState::Sum(terms) => terms.iter_mut().for_each(|t| t.1.advance(prop, k)),
        }
    }

    fn value(&mut self, prop: &GridPropagator, sample: usize, i: usize, j: usize, out: &mut [C64]) {
        let modes = prop.modes();
        match self {
            RowState::Zero => out.fill(ZERO),
            RowState::Plain(q) => {
                let s = pick(q, sample);
                for ((o, b), a) in out.iter_mut().zip(q.field(s, j)).zip(q.field(s, i)) {
                    *o = b - a;
                }
            }
            RowState::Mild { q, state, .. } => {
                for ((o, b), a) in out.iter_mut().zip(q.field(pick(q, sample), j)).zip(state.iter()) {
                    *o = b - a;
                }
            }
            RowState::PropDefect { start, state, .. } => {
                for ((o, b), a) in out.iter_mut().zip(state.iter()).zip(start.iter()) {
                    *o = b - a;
                }
            }
            RowState::Linear { coeff, lift, walker, second, .. } => {
                let e = lift.dim_e();
                let per = if *second { e * e } else { e };
                // Σ_{a,b} D^{(c,a,b)} 𝕏^{ba} for the second-order term
                let weight = |r: usize| if *second { walker.xx[(r % e) * e + r / e] } else { walker.dx[r] };
                let channels = out.len() / modes;
                for c in 0..channels {
                    let o = &mut out[c * modes..(c + 1) * modes];
                    o.fill(ZERO);
                    for r in 0..per {
                        let w = weight(r);
                        if w == 0.0 {
                            continue;
                        }
                        let src = &coeff[(c * per + r) * modes..(c * per + r + 1) * modes];
                        for (x, y) in o.iter_mut().zip(src) {
                            *x += y * w;
                        }
                    }
                }
            }
            RowState::TimeWeighted { power, values } => {
                let h = prop.grid().node(j) - prop.grid().node(i);
                let f = h.powf(*power);
                for (o, v) in out.iter_mut().zip(values.iter()) {
                    *o = v * f;
                }
            }
            RowState::Apply { op, inner, buf } => {
                inner.value(prop, sample, i, j, buf);
                op.apply(sample, i, buf, out);
            }
            RowState::Sum(terms) => {
                out.fill(ZERO);
                for (c, t, buf) in terms.iter_mut() {
                    t.value(prop, sample, i, j, buf);
                    for (o, v) in out.iter_mut().zip(buf.iter()) {
                        *o += v * *c;
                    }
                }
            }
        }
    }
}

/// An increment together with the part of it declared to be a martingale
/// increment, i.e. with vanishing conditional expectation given `F_s`.
#[derive(Clone, Debug)]
pub struct MartingaleTaggedIncrement {
    pub total: Increment,
    pub martingale: Increment,
}

impl MartingaleTaggedIncrement {
    pub fn untagged(total: Increment) -> Self {
        let c = total.channels();
        Self { total, martingale: Increment::zero(c) }
    }

    /// The `F_s`-measurable remainder `total - martingale`, whose value at
    /// each pair is the conditional expectation `E_s[total]`.
    pub fn drift(&self) -> Increment {
        if self.martingale.is_trivially_zero() {
            self.total.clone()
        } else {
            self.total.clone().minus(self.martingale.clone())
        }
    }

    pub fn restrict(&self, a: usize, b: usize) -> Result<Self> {
        Ok(Self { total: self.total.restrict(a, b)?, martingale: self.martingale.restrict(a, b)? })
    }
}

/// `‖E_· Q‖_{exponent, m, γ}` estimated from the martingale tag.
pub fn conditional_remainder_norm(
    q: &MartingaleTaggedIncrement,
    prop: &GridPropagator,
    m: f64,
    gamma: f64,
    exponent: f64,
) -> Result<f64> {
    q.drift().seminorm(prop, m, gamma, exponent)
}
