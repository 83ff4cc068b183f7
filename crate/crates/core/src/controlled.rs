//! Stochastic controlled rough paths `(Y, Y′)`, controlled multiplication
//! operator families `(G, G′)`, their remainders, norms and composition.

use std::sync::Arc;

use rayon::prelude::*;

use crate::ensemble::SampleEnsemble;
use crate::error::{domain, shape, Result};
use crate::grid::{PairPolicy, TimeGrid};
use crate::increment::{conditional_remainder_norm, Increment, MartingaleTaggedIncrement, NodeOperator};
use crate::propagator::GridPropagator;
use crate::rough_path::{HolderExponents, LiftEnsemble, PairWalker};
use crate::spectral::{FieldShape, C64};
use crate::transform::Collocation;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// `(node, sample, x, out)`: writes the `rows × cols` matrix (row-major) of
/// the symbol at grid node `node` and point `x`.
pub type SymbolFn = Arc<dyn Fn(usize, usize, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SymbolKind {
    Zero,
    SpaceConstant,
    General,
}

/// A matrix-valued function of `(t, ω, x)` acting by pointwise multiplication.
#[derive(Clone)]
pub struct MultiplicationSymbol {
    rows: usize,
    cols: usize,
    kind: SymbolKind,
    offset: usize,
    f: SymbolFn,
}

impl std::fmt::Debug for MultiplicationSymbol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MultiplicationSymbol")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("kind", &self.kind)
            .field("offset", &self.offset)
            .finish()
    }
}

impl MultiplicationSymbol {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self { rows, cols, kind: SymbolKind::Zero, offset: 0, f: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)) }
    }

    /// A constant matrix, row-major.
    pub fn constant(rows: usize, cols: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != rows * cols {
            return shape(format!("symbol matrix needs {} entries", rows * cols));
        }
        if matrix.iter().all(|v| *v == 0.0) {
            return Ok(Self::zero(rows, cols));
        }
        Ok(Self {
            rows,
            cols,
            kind: SymbolKind::SpaceConstant,
            offset: 0,
            f: Arc::new(move |_, _, _, out: &mut [f64]| out.copy_from_slice(&matrix)),
        })
    }

    pub fn identity(channels: usize) -> Self {
        let mut m = vec![0.0; channels * channels];
        for c in 0..channels {
            m[c * channels + c] = 1.0;
        }
        Self::constant(channels, channels, m).unwrap()
    }

    /// A general symbol; `space_constant` marks symbols independent of `x`.
    pub fn function(rows: usize, cols: usize, space_constant: bool, f: SymbolFn) -> Self {
        let kind = if space_constant { SymbolKind::SpaceConstant } else { SymbolKind::General };
        Self { rows, cols, kind, offset: 0, f }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_zero(&self) -> bool {
        self.kind == SymbolKind::Zero
    }

    pub fn is_space_constant(&self) -> bool {
        self.kind != SymbolKind::General
    }

    #[inline]
    pub fn eval(&self, node: usize, sample: usize, x: &[f64], out: &mut [f64]) {
        (self.f)(node + self.offset, sample, x, out)
    }

    /// The same symbol seen from a window starting at node `a`.
    pub fn shifted(&self, a: usize) -> Self {
        Self { offset: self.offset + a, ..self.clone() }
    }

    /// Applies the symbol at `(node, sample)` to a field with `cols` channels.
    pub fn apply(&self, col: &Collocation, modes: usize, node: usize, sample: usize, input: &[C64], out: &mut [C64]) {
        apply_matrix_fn(col, modes, self.rows, self.cols, self.kind, &|x, m| self.eval(node, sample, x, m), input, out)
    }
}

/// Pointwise multiplication by a matrix function, projected on the truncation.
#[allow(clippy::too_many_arguments)]
fn apply_matrix_fn(
    col: &Collocation,
    modes: usize,
    rows: usize,
    cols: usize,
    kind: SymbolKind,
    f: &dyn Fn(&[f64], &mut [f64]),
    input: &[C64],
    out: &mut [C64],
) {
    let mut mat = vec![0.0; rows * cols];
    match kind {
        SymbolKind::Zero => out.fill(ZERO),
        SymbolKind::SpaceConstant => {
            let x = vec![0.0; col.dim_n()];
            f(&x, &mut mat);
            for r in 0..rows {
                let o = &mut out[r * modes..(r + 1) * modes];
                o.fill(ZERO);
                for c in 0..cols {
                    let w = mat[r * cols + c];
                    if w != 0.0 {
                        for (a, b) in o.iter_mut().zip(&input[c * modes..(c + 1) * modes]) {
                            *a += b * w;
                        }
                    }
                }
            }
        }
        SymbolKind::General => {
            let np = col.num_points();
            let mut phys_in: Vec<Vec<C64>> = Vec::with_capacity(cols);
            for c in 0..cols {
                let mut v = Vec::new();
                col.to_physical(&input[c * modes..(c + 1) * modes], &mut v);
                phys_in.push(v);
            }
            let mut phys_out = vec![vec![ZERO; np]; rows];
            let mut x = vec![0.0; col.dim_n()];
            for p in 0..np {
                col.point(p, &mut x);
                f(&x, &mut mat);
                for r in 0..rows {
                    let mut acc = ZERO;
                    for c in 0..cols {
                        acc += phys_in[c][p] * mat[r * cols + c];
                    }
                    phys_out[r][p] = acc;
                }
            }
            for (r, v) in phys_out.iter_mut().enumerate() {
                col.from_physical(v, &mut out[r * modes..(r + 1) * modes]);
            }
        }
    }
}

/// Largest singular value of `W_out^{1/2} M W_in^{-1/2}` where `M` is the
/// truncated Galerkin matrix of a real multiplication symbol, by power
/// iteration on the normal operator.
pub fn multiplication_op_norm(
    shape: FieldShape,
    col: &Collocation,
    rows: usize,
    cols: usize,
    f: &dyn Fn(&[f64], &mut [f64]),
    gamma_in: f64,
    gamma_out: f64,
) -> f64 {
    let modes = shape.modes();
    let w_in: Vec<f64> = shape.bessel_weights(gamma_in).iter().map(|w| 1.0 / w.sqrt()).collect();
    let w_out: Vec<f64> = shape.bessel_weights(gamma_out).iter().map(|w| w.sqrt()).collect();
    let ft = |x: &[f64], out: &mut [f64]| {
        let mut m = vec![0.0; rows * cols];
        f(x, &mut m);
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = m[r * cols + c];
            }
        }
    };
    let scale = |v: &mut [C64], w: &[f64]| {
        for chunk in v.chunks_exact_mut(modes) {
            for (a, b) in chunk.iter_mut().zip(w) {
                *a *= *b;
            }
        }
    };
    let norm = |v: &[C64]| v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let mut v: Vec<C64> = (0..cols * modes).map(|i| C64::new(1.0 / (1.0 + i as f64), 0.5 / (2.0 + i as f64))).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|c| *c /= n0);
    let mut av = vec![ZERO; rows * modes];
    let mut tmp = vec![ZERO; cols * modes];
    let mut est = 0.0;
    for _ in 0..2000 {
        tmp.copy_from_slice(&v);
        scale(&mut tmp, &w_in);
        apply_matrix_fn(col, modes, rows, cols, SymbolKind::General, f, &tmp, &mut av);
        scale(&mut av, &w_out);
        let sigma = norm(&av);
        if sigma == 0.0 {
            return 0.0;
        }
        scale(&mut av, &w_out);
        apply_matrix_fn(col, modes, cols, rows, SymbolKind::General, &ft, &av, &mut v);
        scale(&mut v, &w_in);
        let nv = norm(&v);
        v.iter_mut().for_each(|c| *c /= nv);
        let done = (sigma - est).abs() <= 1e-10 * sigma;
        est = sigma;
        if done {
            break;
        }
    }
    est
}

/// `G` at node `s` as an operator on increments.
struct SymbolAtNode {
    symbol: MultiplicationSymbol,
    col: Arc<Collocation>,
    modes: usize,
}

impl NodeOperator for SymbolAtNode {
    fn in_channels(&self) -> usize {
        self.symbol.cols
    }

    fn out_channels(&self) -> usize {
        self.symbol.rows
    }

    fn apply(&self, sample: usize, node: usize, input: &[C64], out: &mut [C64]) {
        self.symbol.apply(&self.col, self.modes, node, sample, input, out)
    }

    fn restrict(&self, a: usize, _b: usize) -> Arc<dyn NodeOperator> {
        Arc::new(SymbolAtNode { symbol: self.symbol.shifted(a), col: self.col.clone(), modes: self.modes })
    }
}

/// Controlled multiplication operator family `(G, G′)` with `G: e1 → e2`
/// and `G′: e1 → e2·e` channels.
#[derive(Clone, Debug)]
pub struct ControlledOperatorFamily {
    g: MultiplicationSymbol,
    g_prime: MultiplicationSymbol,
    lifts: LiftEnsemble,
    shape: FieldShape,
    smoothness_margin: f64,
    col: Arc<Collocation>,
}

impl ControlledOperatorFamily {
    /// `shape` gives the spatial truncation; its channel count is ignored.
    pub fn new(g: MultiplicationSymbol, g_prime: MultiplicationSymbol, lifts: &LiftEnsemble, shape: FieldShape) -> Result<Self> {
        let e = lifts.dim_e();
        if g_prime.cols != g.cols || g_prime.rows != g.rows * e {
            return domain("G′ must map e1 channels to e2·e channels");
        }
        let col = Arc::new(Collocation::for_products(shape.dim_n, shape.trunc_k));
        Ok(Self { g, g_prime, lifts: lifts.clone(), shape: shape.with_channels(1), smoothness_margin: 0.0, col })
    }

    pub fn zero(e1: usize, e2: usize, lifts: &LiftEnsemble, shape: FieldShape) -> Self {
        let e = lifts.dim_e();
        Self::new(MultiplicationSymbol::zero(e2, e1), MultiplicationSymbol::zero(e2 * e, e1), lifts, shape).unwrap()
    }

    pub fn with_smoothness_margin(mut self, margin: f64) -> Self {
        self.smoothness_margin = margin;
        self
    }

    pub fn smoothness_margin(&self) -> f64 {
        self.smoothness_margin
    }

    pub fn g(&self) -> &MultiplicationSymbol {
        &self.g
    }

    pub fn g_prime(&self) -> &MultiplicationSymbol {
        &self.g_prime
    }

    pub fn lifts(&self) -> &LiftEnsemble {
        &self.lifts
    }

    pub fn in_channels(&self) -> usize {
        self.g.cols
    }

    pub fn out_channels(&self) -> usize {
        self.g.rows
    }

    pub fn is_zero(&self) -> bool {
        self.g.is_zero() && self.g_prime.is_zero()
    }

    pub fn collocation(&self) -> &Arc<Collocation> {
        &self.col
    }

    pub fn restrict(&self, a: usize, b: usize) -> Result<Self> {
        Ok(Self {
            g: self.g.shifted(a),
            g_prime: self.g_prime.shifted(a),
            lifts: self.lifts.restrict(a, b)?,
            ..self.clone()
        })
    }

    /// `G_t Y_t` for every sample and node.
    pub fn apply_g(&self, y: &SampleEnsemble) -> Result<SampleEnsemble> {
        self.apply_symbol(&self.g, y)
    }

    /// `G′_t Y_t` for every sample and node.
    pub fn apply_g_prime(&self, y: &SampleEnsemble) -> Result<SampleEnsemble> {
        self.apply_symbol(&self.g_prime, y)
    }

    fn apply_symbol(&self, sym: &MultiplicationSymbol, y: &SampleEnsemble) -> Result<SampleEnsemble> {
        if y.shape().channels != sym.cols {
            return domain("operator input channels do not match the ensemble");
        }
        let shape = y.shape().with_channels(sym.rows);
        let modes = shape.modes();
        let samples = y.num_samples().max(if self.lifts.is_shared() { 1 } else { self.lifts.len() });
        let y = y.broadcast(samples)?;
        let out = SampleEnsemble::from_fn(shape, y.grid(), samples, y.is_real_valued(), |s, i, out| {
            sym.apply(&self.col, modes, i, s, y.field(s, i), out)
        });
        Ok(out.adapted(y.is_adapted()))
    }

    fn node_operator(&self) -> Arc<dyn NodeOperator> {
        Arc::new(SymbolAtNode { symbol: self.g.clone(), col: self.col.clone(), modes: self.shape.modes() })
    }

    /// Operator norm of `G_t(ω)` from `𝓗_{γ_in}` to `𝓗_{γ_out}`.
    pub fn g_op_norm(&self, node: usize, sample: usize, gamma_in: f64, gamma_out: f64) -> f64 {
        if self.g.is_zero() {
            return 0.0;
        }
        multiplication_op_norm(
            self.shape,
            &self.col,
            self.g.rows,
            self.g.cols,
            &|x, m| self.g.eval(node, sample, x, m),
            gamma_in,
            gamma_out,
        )
    }
}

/// Components of the controlled operator-family (pseudo)distance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OperatorNormReport {
    pub g_norm: f64,
    pub g_prime_norm: f64,
    pub remainder_norm: f64,
    pub total: f64,
}

/// Largest number of nodes visited by the operator-family norm estimator.
pub const OPERATOR_NORM_NODES: usize = 17;

/// `‖G, G′; Ḡ, Ḡ′‖` for multiplication families, with the `L^∞(Ω)` norms
/// realized as a per-sample supremum and time suprema taken on a lattice of
/// at most [`OPERATOR_NORM_NODES`] nodes. Operator norms map `𝓗_{γ}` into
/// `𝓗_{γ-shift}` with the Hölder shifts of the controlled space.
pub fn operator_family_distance(
    a: &ControlledOperatorFamily,
    b: &ControlledOperatorFamily,
    gamma: f64,
    exps: HolderExponents,
) -> Result<OperatorNormReport> {
    if a.g.rows != b.g.rows || a.g.cols != b.g.cols || a.shape != b.shape {
        return domain("operator families have different shapes");
    }
    if a.is_zero() && b.is_zero() {
        return Ok(OperatorNormReport::default());
    }
    let grid = a.lifts.grid().clone();
    let n = grid.num_steps();
    let stride = n.div_ceil(OPERATOR_NORM_NODES - 1).max(1);
    let mut nodes: Vec<usize> = (0..=n).step_by(stride).collect();
    if *nodes.last().unwrap() != n {
        nodes.push(n);
    }
    let samples = a.lifts.len().max(b.lifts.len());
    let (rows, cols) = (a.g.rows, a.g.cols);
    let e = a.lifts.dim_e();
    let (beta, bp) = (exps.beta, exps.beta_prime);
    let norm = |r: usize, f: &dyn Fn(&[f64], &mut [f64]), gi: f64, go: f64| {
        multiplication_op_norm(a.shape, &a.col, r, cols, f, gi, go)
    };
    let diff = |sa, sb, i, s| symbol_diff(sa, sb, i, s);
    let per_sample: Vec<OperatorNormReport> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rep = OperatorNormReport::default();
            let (la, lb) = (a.lifts.get(s), b.lifts.get(s));
            for (p, &i) in nodes.iter().enumerate() {
                let dg = diff(&a.g, &b.g, i, s);
                rep.g_norm = rep.g_norm.max(norm(rows, &dg, gamma, gamma));
                let dgp = diff(&a.g_prime, &b.g_prime, i, s);
                rep.g_prime_norm = rep.g_prime_norm.max(norm(rows * e, &dgp, gamma, gamma - beta));
                for &j in &nodes[p + 1..] {
                    let h = grid.node(j) - grid.node(i);
                    let dgj = diff(&a.g, &b.g, j, s);
                    let holder = norm(rows, &|x, out| {
                        let mut t = vec![0.0; rows * cols];
                        dgj(x, out);
                        dg(x, &mut t);
                        out.iter_mut().zip(&t).for_each(|(o, v)| *o -= v);
                    }, gamma, gamma - beta);
                    rep.g_norm = rep.g_norm.max(holder / h.powf(beta));
                    let dgpj = diff(&a.g_prime, &b.g_prime, j, s);
                    let holder_p = norm(rows * e, &|x, out| {
                        let mut t = vec![0.0; rows * e * cols];
                        dgpj(x, out);
                        dgp(x, &mut t);
                        out.iter_mut().zip(&t).for_each(|(o, v)| *o -= v);
                    }, gamma, gamma - beta - bp);
                    rep.g_prime_norm = rep.g_prime_norm.max(holder_p / h.powf(bp));
                    let (mut dxa, mut dxb) = (vec![0.0; e], vec![0.0; e]);
                    la.dx(i, j, &mut dxa);
                    lb.dx(i, j, &mut dxb);
                    let rem = norm(rows, &|x, out| {
                        // R^G - R^Ḡ = δ(ΔG) - G′_s δX + Ḡ′_s δX̄
                        let mut t = vec![0.0; rows * cols];
                        let mut gp = vec![0.0; rows * e * cols];
                        dgj(x, out);
                        dg(x, &mut t);
                        out.iter_mut().zip(&t).for_each(|(o, v)| *o -= v);
                        for (sym, dx, sign) in [(&a.g_prime, &dxa, -1.0), (&b.g_prime, &dxb, 1.0)] {
                            if sym.is_zero() {
                                continue;
                            }
                            sym.eval(i, s, x, &mut gp);
                            for r in 0..rows {
                                for c in 0..cols {
                                    let mut acc = 0.0;
                                    for q in 0..e {
                                        acc += gp[(r * e + q) * cols + c] * dx[q];
                                    }
                                    out[r * cols + c] += sign * acc;
                                }
                            }
                        }
                    }, gamma, gamma - beta - bp);
                    rep.remainder_norm = rep.remainder_norm.max(rem / h.powf(beta + bp));
                }
            }
            rep
        })
        .collect();
    let mut out = OperatorNormReport::default();
    for r in per_sample {
        out.g_norm = out.g_norm.max(r.g_norm);
        out.g_prime_norm = out.g_prime_norm.max(r.g_prime_norm);
        out.remainder_norm = out.remainder_norm.max(r.remainder_norm);
    }
    out.total = out.g_norm + out.g_prime_norm + out.remainder_norm;
    Ok(out)
}

fn symbol_diff<'a>(
    sa: &'a MultiplicationSymbol,
    sb: &'a MultiplicationSymbol,
    i: usize,
    s: usize,
) -> impl Fn(&[f64], &mut [f64]) + 'a {
    let len = sa.rows * sa.cols;
    move |x: &[f64], out: &mut [f64]| {
        let mut tmp = vec![0.0; len];
        sa.eval(i, s, x, out);
        sb.eval(i, s, x, &mut tmp);
        out.iter_mut().zip(&tmp).for_each(|(o, t)| *o -= t);
    }
}

/// The three components of the controlled-path norm.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScrpNormReport {
    pub y_norm: f64,
    pub y_prime_norm: f64,
    pub cond_remainder_norm: f64,
    pub total: f64,
}

impl ScrpNormReport {
    fn new(y_norm: f64, y_prime_norm: f64, cond_remainder_norm: f64) -> Self {
        Self { y_norm, y_prime_norm, cond_remainder_norm, total: y_norm + y_prime_norm + cond_remainder_norm }
    }
}

/// A controlled pair `(Y, Y′)` on a grid, with the martingale part of its
/// remainder declared by whichever constructor produced it.
#[derive(Clone, Debug)]
pub struct ControlledEnsemble {
    y: Arc<SampleEnsemble>,
    y_prime: Arc<SampleEnsemble>,
    lifts: LiftEnsemble,
    martingale: Increment,
    tag_prop: Arc<GridPropagator>,
    gamma: f64,
    exps: HolderExponents,
}

impl ControlledEnsemble {
    pub fn new(y: SampleEnsemble, y_prime: SampleEnsemble, lifts: &LiftEnsemble, gamma: f64, exps: HolderExponents) -> Result<Self> {
        let e = lifts.dim_e();
        if y_prime.shape() != y.shape().with_channels(y.shape().channels * e) {
            return shape("Y′ must carry e times the channels of Y".to_string());
        }
        let nodes = y.grid().num_nodes();
        if y_prime.grid().num_nodes() != nodes || lifts.grid().num_nodes() != nodes {
            return shape("Y, Y′ and the lift live on different grids".to_string());
        }
        let m = y.num_samples().max(y_prime.num_samples()).max(lifts.len());
        for k in [y.num_samples(), y_prime.num_samples(), lifts.len()] {
            if k != 1 && k != m {
                return shape("inconsistent sample counts".to_string());
            }
        }
        let tag_prop = Arc::new(GridPropagator::identity(y.grid(), y.shape()));
        let c = y.shape().channels;
        Ok(Self {
            y: Arc::new(y),
            y_prime: Arc::new(y_prime),
            lifts: lifts.clone(),
            martingale: Increment::zero(c),
            tag_prop,
            gamma,
            exps,
        })
    }

    pub fn zero(shape: FieldShape, grid: &TimeGrid, lifts: &LiftEnsemble, gamma: f64, exps: HolderExponents) -> Self {
        let e = lifts.dim_e();
        let y = SampleEnsemble::zeros(shape, grid, 1, true).adapted(true);
        let yp = SampleEnsemble::zeros(shape.with_channels(shape.channels * e), grid, 1, true).adapted(true);
        Self::new(y, yp, lifts, gamma, exps).unwrap()
    }

    /// Declares the martingale part of `R^Y`; `prop` evaluates any mild
    /// leaves in the tag.
    pub fn with_martingale(mut self, martingale: Increment, prop: Arc<GridPropagator>) -> Self {
        self.martingale = martingale;
        self.tag_prop = prop;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn y(&self) -> &SampleEnsemble {
        &self.y
    }

    pub fn y_prime(&self) -> &SampleEnsemble {
        &self.y_prime
    }

    pub fn y_arc(&self) -> &Arc<SampleEnsemble> {
        &self.y
    }

    pub fn y_prime_arc(&self) -> &Arc<SampleEnsemble> {
        &self.y_prime
    }

    pub fn lifts(&self) -> &LiftEnsemble {
        &self.lifts
    }

    pub fn martingale(&self) -> &Increment {
        &self.martingale
    }

    pub fn tag_propagator(&self) -> &Arc<GridPropagator> {
        &self.tag_prop
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn exps(&self) -> HolderExponents {
        self.exps
    }

    pub fn grid(&self) -> &TimeGrid {
        self.y.grid()
    }

    pub fn shape(&self) -> FieldShape {
        self.y.shape()
    }

    pub fn num_samples(&self) -> usize {
        self.y.num_samples().max(self.y_prime.num_samples()).max(self.lifts.len())
    }

    /// `R^Y = δY − Y′δX` with its declared martingale part.
    pub fn remainder(&self) -> MartingaleTaggedIncrement {
        let total = Increment::Plain(self.y.clone()).minus(Increment::Linear {
            coeff: self.y_prime.clone(),
            lifts: self.lifts.clone(),
            propagated: false,
        });
        MartingaleTaggedIncrement { total, martingale: self.martingale.clone() }
    }

    fn propagated_linear(&self) -> Increment {
        Increment::Linear { coeff: self.y_prime.clone(), lifts: self.lifts.clone(), propagated: true }
    }

    fn plain_linear(&self) -> Increment {
        Increment::Linear { coeff: self.y_prime.clone(), lifts: self.lifts.clone(), propagated: false }
    }

    /// `R̂^Y = δ̂Y − S Y′δX`. For martingale lifts the propagated first-order
    /// term is itself a martingale increment and the tag is adjusted.
    pub fn mild_remainder(&self) -> MartingaleTaggedIncrement {
        let total = Increment::Mild(self.y.clone()).minus(self.propagated_linear());
        let mut martingale = self.martingale.clone();
        if self.lifts.is_martingale() {
            martingale = martingale.minus(self.propagated_linear()).plus(self.plain_linear());
        }
        MartingaleTaggedIncrement { total, martingale }
    }

    /// `R − R̂ = (S − I)Y_s + (S − I)Y′_s δX`.
    pub fn remainder_gap(&self) -> Increment {
        Increment::PropDefect(self.y.clone()).plus(self.propagated_linear().minus(self.plain_linear()))
    }

    /// `‖Y, Y′‖` at scale index `γ`.
    pub fn scrp_norm(&self, m: f64) -> Result<ScrpNormReport> {
        let zero = Self::zero(self.shape(), self.grid(), &self.lifts, self.gamma, self.exps);
        scrp_distance(self, &zero, m)
    }

    /// `a·self + b·other`; both must be controlled by the same lift.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.lifts != other.lifts {
            return domain("combined controlled paths need a common lift");
        }
        let m = self.num_samples().max(other.num_samples());
        let y = self.y.broadcast(m)?.combine(a, &other.y.broadcast(m)?, b)?;
        let yp = self.y_prime.broadcast(m)?.combine(a, &other.y_prime.broadcast(m)?, b)?;
        let mut out = Self::new(y, yp, &self.lifts, self.gamma, self.exps)?;
        out.martingale = Increment::Sum(vec![(a, self.martingale.clone()), (b, other.martingale.clone())]);
        out.tag_prop = if self.martingale.is_trivially_zero() { other.tag_prop.clone() } else { self.tag_prop.clone() };
        Ok(out)
    }

    pub fn restrict(&self, a: usize, b: usize) -> Result<Self> {
        Ok(Self {
            y: Arc::new(self.y.restrict(a, b)?),
            y_prime: Arc::new(self.y_prime.restrict(a, b)?),
            lifts: self.lifts.restrict(a, b)?,
            martingale: self.martingale.restrict(a, b)?,
            tag_prop: Arc::new(self.tag_prop.restrict(a, b)?),
            gamma: self.gamma,
            exps: self.exps,
        })
    }
}

/// `E^β` norm `‖Y‖_{0,m,γ} + ‖δY‖_{β,m,γ−β}`.
pub fn e_beta_norm(y: &SampleEnsemble, m: f64, gamma: f64, beta: f64) -> Result<f64> {
    Ok(y.lm_sup_norm(m, gamma) + y.lm_holder_seminorm(m, gamma - beta, beta, None)?)
}

/// `‖Y,Y′; Ȳ,Ȳ′‖ = ‖ΔY‖ + ‖ΔY′‖ + ‖E·ΔR‖`, each remainder taken against its
/// own lift. Scale index and exponents come from `a`.
pub fn scrp_distance(a: &ControlledEnsemble, b: &ControlledEnsemble, m: f64) -> Result<ScrpNormReport> {
    if a.shape() != b.shape() || a.grid() != b.grid() {
        return shape("controlled paths differ in shape or grid".to_string());
    }
    let (g, HolderExponents { beta, beta_prime: bp, .. }) = (a.gamma, a.exps);
    let samples = a.num_samples().max(b.num_samples());
    let dy = a.y.broadcast(samples)?.combine(1.0, &b.y.broadcast(samples)?, -1.0)?;
    let dyp = a.y_prime.broadcast(samples)?.combine(1.0, &b.y_prime.broadcast(samples)?, -1.0)?;
    let y_norm = e_beta_norm(&dy, m, g, beta)?;
    let y_prime_norm = e_beta_norm(&dyp, m, g - beta, bp)?;
    let (ra, rb) = (a.remainder(), b.remainder());
    let same_lift = a.lifts == b.lifts;
    // ΔR from the differences when the lifts agree, avoiding cancellation.
    let total = if same_lift {
        Increment::Plain(Arc::new(dy)).minus(Increment::Linear { coeff: Arc::new(dyp), lifts: a.lifts.clone(), propagated: false })
    } else {
        ra.total.minus(rb.total)
    };
    let diff = MartingaleTaggedIncrement { total, martingale: a.martingale.clone().minus(b.martingale.clone()) };
    let prop = pick_tag_prop(a, b);
    let cond = conditional_remainder_norm(&diff, prop, m, g - beta - bp, beta + bp)?;
    Ok(ScrpNormReport::new(y_norm, y_prime_norm, cond))
}

fn pick_tag_prop<'a>(a: &'a ControlledEnsemble, b: &'a ControlledEnsemble) -> &'a GridPropagator {
    if !a.tag_prop.is_identity() {
        &a.tag_prop
    } else {
        &b.tag_prop
    }
}

/// `(GY, GY′ + G′Y)` with remainder tag `G_s·(martingale part of R^Y)`.
pub fn compose(g: &ControlledOperatorFamily, c: &ControlledEnsemble) -> Result<ControlledEnsemble> {
    if g.in_channels() != c.shape().channels {
        return domain(format!(
            "operator family expects {} channels, controlled path has {}",
            g.in_channels(),
            c.shape().channels
        ));
    }
    if g.lifts.grid().num_nodes() != c.grid().num_nodes() {
        return domain("operator family and controlled path live on different grids");
    }
    let e = c.lifts.dim_e();
    let gy = g.apply_g(&c.y)?;
    let m = gy.num_samples().max(c.num_samples());
    let gyp = if g.g.is_zero() {
        SampleEnsemble::zeros(c.shape().with_channels(g.out_channels() * e), c.grid(), 1, true).adapted(true)
    } else {
        // G acts on each lift direction of Y′ separately.
        let yp = c.y_prime.broadcast(m)?;
        let shape = c.shape().with_channels(g.out_channels() * e);
        let modes = shape.modes();
        let (e1, e2) = (g.in_channels(), g.out_channels());
        SampleEnsemble::from_fn(shape, c.grid(), m, yp.is_real_valued(), |s, i, out| {
            let src = yp.field(s, i);
            let mut input = vec![ZERO; e1 * modes];
            let mut res = vec![ZERO; e2 * modes];
            for a in 0..e {
                for c1 in 0..e1 {
                    input[c1 * modes..(c1 + 1) * modes].copy_from_slice(&src[(c1 * e + a) * modes..(c1 * e + a + 1) * modes]);
                }
                g.g.apply(&g.col, modes, i, s, &input, &mut res);
                for c2 in 0..e2 {
                    out[(c2 * e + a) * modes..(c2 * e + a + 1) * modes].copy_from_slice(&res[c2 * modes..(c2 + 1) * modes]);
                }
            }
        })
        .adapted(yp.is_adapted())
    };
    let y_prime = if g.g_prime.is_zero() {
        gyp
    } else {
        let gpy = g.apply_g_prime(&c.y)?;
        let mm = gpy.num_samples().max(gyp.num_samples());
        gyp.broadcast(mm)?.combine(1.0, &gpy.broadcast(mm)?, 1.0)?
    };
    let lifts = if c.lifts.is_shared() { g.lifts.clone() } else { c.lifts.clone() };
    let lifts = if lifts.len() < c.lifts.len() { c.lifts.clone() } else { lifts };
    let mut out = ControlledEnsemble::new(gy, y_prime, &lifts, c.gamma, c.exps)?;
    if !c.martingale.is_trivially_zero() {
        out.martingale = Increment::Apply { op: g.node_operator(), inner: Box::new(c.martingale.clone()) };
        out.tag_prop = c.tag_prop.clone();
    }
    Ok(out)
}

/// Exact pairwise values of `δG δY + R^G Y + G_s R^Y` for one sample, used to
/// cross-check the composed remainder.
pub fn composed_remainder_identity(
    g: &ControlledOperatorFamily,
    c: &ControlledEnsemble,
    sample: usize,
    i: usize,
    j: usize,
) -> Result<Vec<C64>> {
    let shape = c.shape();
    let modes = shape.modes();
    let e = c.lifts.dim_e();
    let (e1, e2) = (g.in_channels(), g.out_channels());
    let lift = c.lifts.get(sample);
    let mut w = PairWalker::new(lift, i);
    for k in i..j {
        w.step(lift, k);
    }
    let ys = |node: usize| c.y.field(if c.y.num_samples() == 1 { 0 } else { sample }, node).to_vec();
    let (yi, yj) = (ys(i), ys(j));
    let ypi = c.y_prime.field(if c.y_prime.num_samples() == 1 { 0 } else { sample }, i);
    let dy: Vec<C64> = yj.iter().zip(&yi).map(|(a, b)| a - b).collect();
    let mut ry = dy.clone();
    for c1 in 0..e1 {
        for a in 0..e {
            for k in 0..modes {
                ry[c1 * modes + k] -= ypi[(c1 * e + a) * modes + k] * w.dx[a];
            }
        }
    }
    let col = &g.col;
    let mut out = vec![ZERO; e2 * modes];
    let mut tmp = vec![ZERO; e2 * modes];
    // δG δY
    g.g.apply(col, modes, j, sample, &dy, &mut out);
    g.g.apply(col, modes, i, sample, &dy, &mut tmp);
    out.iter_mut().zip(&tmp).for_each(|(o, t)| *o -= t);
    // R^G Y_s = G_t Y_s − G_s Y_s − G′_s δX Y_s
    g.g.apply(col, modes, j, sample, &yi, &mut tmp);
    out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
    g.g.apply(col, modes, i, sample, &yi, &mut tmp);
    out.iter_mut().zip(&tmp).for_each(|(o, t)| *o -= t);
    if !g.g_prime.is_zero() {
        let mut gp = vec![ZERO; e2 * e * modes];
        g.g_prime.apply(col, modes, i, sample, &yi, &mut gp);
        for c2 in 0..e2 {
            for a in 0..e {
                for k in 0..modes {
                    out[c2 * modes + k] -= gp[(c2 * e + a) * modes + k] * w.dx[a];
                }
            }
        }
    }
    // G_s R^Y
    g.g.apply(col, modes, i, sample, &ry, &mut tmp);
    out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
    Ok(out)
}

/// Pairs visited by every two-parameter estimator on `grid`.
pub fn pair_count(grid: &TimeGrid) -> usize {
    PairPolicy::for_grid(grid).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rough_path::lift_smooth;
    use crate::spectral::SpectralField;
    use approx::assert_relative_eq;

    fn exps() -> HolderExponents {
        HolderExponents::new(0.45, 0.4, 0.3).unwrap()
    }

    fn smooth_lift(grid: &TimeGrid) -> LiftEnsemble {
        LiftEnsemble::shared(lift_smooth(&|t, x: &mut [f64]| x[0] = (2.0 * t).sin(), grid, 1, 8).unwrap())
    }

    #[test]
    fn remainder_of_x_against_one_vanishes() {
        let shape = FieldShape::new(1, 0, 1).unwrap();
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let lifts = smooth_lift(&grid);
        let lift = lifts.get(0).clone();
        let y = SampleEnsemble::from_fn(shape, &grid, 1, true, |_, i, out| out[0] = C64::new(lift.x(i)[0], 0.0));
        let yp = SampleEnsemble::constant(&SpectralField::constant(shape, &[1.0]).unwrap(), &grid, 1);
        let c = ControlledEnsemble::new(y, yp, &lifts, 0.0, exps()).unwrap();
        let prop = GridPropagator::identity(&grid, shape);
        assert!(c.remainder().total.seminorm(&prop, 2.0, 0.0, 0.0).unwrap() < 1e-15);
    }

    #[test]
    fn identity_composition_is_neutral() {
        let shape = FieldShape::new(1, 4, 1).unwrap();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let lifts = smooth_lift(&grid);
        let y = SampleEnsemble::from_fn(shape, &grid, 2, false, |s, i, out| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = C64::new((s + i + k) as f64 * 0.1, (k as f64).sin());
            }
        });
        let yp = y.scaled(0.5);
        let c = ControlledEnsemble::new(y, yp, &lifts, 0.0, exps()).unwrap();
        let g = ControlledOperatorFamily::new(MultiplicationSymbol::identity(1), MultiplicationSymbol::zero(1, 1), &lifts, shape).unwrap();
        let out = compose(&g, &c).unwrap();
        assert_eq!(out.y(), c.y());
        assert_eq!(out.y_prime(), c.y_prime());
    }

    #[test]
    fn operator_norm_of_cosine_multiplier() {
        let shape = FieldShape::new(1, 8, 1).unwrap();
        let col = Collocation::for_products(1, 8);
        let f = |x: &[f64], m: &mut [f64]| m[0] = 2.0 + (2.0 * std::f64::consts::PI * x[0]).cos();
        let n = multiplication_op_norm(shape, &col, 1, 1, &f, 0.0, 0.0);
        // Truncated Toeplitz matrix of 2 + cos: eigenvalues 2 + cos(πj/(N+1)).
        let want = 2.0 + (std::f64::consts::PI / 18.0).cos();
        assert_relative_eq!(n, want, max_relative = 1e-5);
    }

    #[test]
    fn composed_remainder_matches_proof_identity() {
        let shape = FieldShape::new(1, 4, 1).unwrap();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let lifts = smooth_lift(&grid);
        let lift = lifts.get(0).clone();
        let psi = |x: f64| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x).cos();
        let xs: Vec<f64> = (0..grid.num_nodes()).map(|i| lift.x(i)[0]).collect();
        let g = ControlledOperatorFamily::new(
            MultiplicationSymbol::function(1, 1, false, Arc::new(move |i, _, x, m| m[0] = psi(x[0]) * xs[i])),
            MultiplicationSymbol::function(1, 1, false, Arc::new(move |_, _, x, m| m[0] = psi(x[0]))),
            &lifts,
            shape,
        )
        .unwrap();
        let y = SampleEnsemble::from_fn(shape, &grid, 1, false, |_, i, out| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = C64::new(((i * k) as f64 * 0.3).cos(), 0.1 * k as f64);
            }
        });
        let yp = y.scaled(-0.7);
        let c = ControlledEnsemble::new(y, yp, &lifts, 0.0, exps()).unwrap();
        let out = compose(&g, &c).unwrap();
        let prop = GridPropagator::identity(&grid, shape);
        for (i, j) in [(0, 3), (2, 8), (5, 6)] {
            let lhs = out.remainder().total.eval(&prop, 0, i, j).unwrap();
            let rhs = composed_remainder_identity(&g, &c, 0, i, j).unwrap();
            for (a, b) in lhs.iter().zip(&rhs) {
                assert!((a - b).norm() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
