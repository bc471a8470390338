//! Entropic optimal transport between two batches and hard matchings.
//!
//! All routines here *minimise* cost. Callers holding similarities negate
//! them first.

use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Above this value of `max |C| / reg` the kernel `exp(-C/reg)` is not
/// formed and the iterations run on log-potentials instead.
pub const LOG_DOMAIN_THRESHOLD: f64 = 500.0;

/// Largest problem `exact_matching` will enumerate.
pub const EXACT_MATCHING_MAX: usize = 10;

/// `b_x × b_y` matrix of finite matching costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    data: DMatrix<f64>,
}

impl CostMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput("cost matrix must be non-empty".into()));
        }
        if data.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("cost matrix has non-finite entries".into()));
        }
        Ok(Self { data })
    }

    /// Cost `-S` for a similarity matrix `S`.
    pub fn from_similarity(similarity: &DMatrix<f64>) -> Result<Self> {
        Self::new(-similarity)
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }
}

/// Nonnegative transport plan together with the marginals it was solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    plan: DMatrix<f64>,
    row_mass: DVector<f64>,
    col_mass: DVector<f64>,
}

impl Coupling {
    /// Wraps an existing plan. Only nonnegativity and shapes are checked;
    /// marginal accuracy is reported by [`Coupling::max_marginal_violation`].
    pub fn new(plan: DMatrix<f64>, row_mass: DVector<f64>, col_mass: DVector<f64>) -> Result<Self> {
        if plan.nrows() != row_mass.len() || plan.ncols() != col_mass.len() {
            return Err(Error::InvalidInput(format!(
                "plan {}x{} does not fit marginals of length {} and {}",
                plan.nrows(),
                plan.ncols(),
                row_mass.len(),
                col_mass.len()
            )));
        }
        if plan.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidInput("plan entries must be finite and >= 0".into()));
        }
        Ok(Self {
            plan,
            row_mass,
            col_mass,
        })
    }

    /// The product coupling `a bᵀ` with uniform marginals.
    pub fn uniform(rows: usize, cols: usize) -> Self {
        let (a, b) = uniform_marginals(rows, cols);
        Self {
            plan: &a * b.transpose(),
            row_mass: a,
            col_mass: b,
        }
    }

    pub fn plan(&self) -> &DMatrix<f64> {
        &self.plan
    }

    pub fn row_mass(&self) -> &DVector<f64> {
        &self.row_mass
    }

    pub fn col_mass(&self) -> &DVector<f64> {
        &self.col_mass
    }

    pub fn nrows(&self) -> usize {
        self.plan.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.plan.ncols()
    }

    /// `⟨C, P⟩`.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        self.plan.dot(cost.as_matrix())
    }

    pub fn max_marginal_violation(&self) -> f64 {
        let rows = self.plan.column_sum() - &self.row_mass;
        let cols = self.plan.row_sum().transpose() - &self.col_mass;
        rows.amax().max(cols.amax())
    }
}

fn uniform_marginals(rows: usize, cols: usize) -> (DVector<f64>, DVector<f64>) {
    (
        DVector::from_element(rows, 1.0 / rows as f64),
        DVector::from_element(cols, 1.0 / cols as f64),
    )
}

/// Source row `i` is matched to target column `target_of[i]`; no column is
/// used twice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    target_of: Vec<usize>,
}

impl Matching {
    pub fn new(target_of: Vec<usize>, num_targets: usize) -> Result<Self> {
        let mut seen = vec![false; num_targets];
        for (i, &j) in target_of.iter().enumerate() {
            if j >= num_targets {
                return Err(Error::InvalidInput(format!(
                    "row {i} matched to target {j}, but only {num_targets} targets exist"
                )));
            }
            if std::mem::replace(&mut seen[j], true) {
                return Err(Error::InvalidInput(format!("target {j} matched twice")));
            }
        }
        Ok(Self { target_of })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            target_of: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.target_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_of.is_empty()
    }

    pub fn target_of(&self) -> &[usize] {
        &self.target_of
    }

    pub fn get(&self, source: usize) -> Option<usize> {
        self.target_of.get(source).copied()
    }

    /// `Σ_i C[i, target_of[i]]`.
    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.target_of
            .iter()
            .enumerate()
            .map(|(i, &j)| cost.as_matrix()[(i, j)])
            .sum()
    }
}

/// How Sinkhorn iterates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stabilization {
    /// Kernel scaling unless `max |C| / reg` exceeds
    /// [`LOG_DOMAIN_THRESHOLD`] or the scalings leave floating-point range,
    /// in which case log-domain updates are used.
    #[default]
    Auto,
    /// Always scale the kernel; overflow is reported as an error.
    Kernel,
    /// Always iterate on log-potentials.
    Log,
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub coupling: Coupling,
    /// Whether the marginal violation dropped below the tolerance.
    pub converged: bool,
    pub iterations: usize,
    pub max_violation: f64,
    pub log_domain: bool,
}

/// Entropic OT solver: minimises `⟨C,P⟩ + reg Σ P log P` over plans with
/// the prescribed marginals.
#[derive(Debug, Clone)]
pub struct Sinkhorn {
    reg: f64,
    max_iter: usize,
    tol: f64,
    marginals: Option<(DVector<f64>, DVector<f64>)>,
    stabilization: Stabilization,
}

impl Sinkhorn {
    pub fn new(reg: f64) -> Self {
        Self {
            reg,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            marginals: None,
            stabilization: Stabilization::Auto,
        }
    }

    pub fn max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    /// Overrides the default uniform marginals.
    pub fn marginals(mut self, rows: DVector<f64>, cols: DVector<f64>) -> Self {
        self.marginals = Some((rows, cols));
        self
    }

    pub fn stabilization(mut self, stabilization: Stabilization) -> Self {
        self.stabilization = stabilization;
        self
    }

    pub fn solve(&self, cost: &CostMatrix) -> Result<SinkhornSolution> {
        if !(self.reg.is_finite() && self.reg > 0.0) {
            return Err(Error::Config(format!(
                "sinkhorn regularisation must be > 0, got {}",
                self.reg
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("sinkhorn needs at least one iteration".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::Config(format!("sinkhorn tolerance must be > 0, got {}", self.tol)));
        }
        let (a, b) = match &self.marginals {
            Some((a, b)) => {
                check_marginals(a, b, cost)?;
                (a.clone(), b.clone())
            }
            None => uniform_marginals(cost.nrows(), cost.ncols()),
        };

        let scale = cost.as_matrix().amax() / self.reg;
        let use_log = match self.stabilization {
            Stabilization::Log => true,
            Stabilization::Kernel => false,
            Stabilization::Auto => scale > LOG_DOMAIN_THRESHOLD,
        };
        if use_log {
            return Ok(self.solve_log(cost, a, b));
        }
        match self.solve_kernel(cost, &a, &b) {
            Ok(sol) => Ok(sol),
            Err(_) if self.stabilization == Stabilization::Auto => Ok(self.solve_log(cost, a, b)),
            Err(e) => Err(e),
        }
    }

    fn solve_kernel(
        &self,
        cost: &CostMatrix,
        a: &DVector<f64>,
        b: &DVector<f64>,
    ) -> Result<SinkhornSolution> {
        let kernel = cost.as_matrix().map(|c| (-c / self.reg).exp());
        let mut u = DVector::from_element(a.len(), 1.0);
        let mut v = DVector::from_element(b.len(), 1.0);
        let mut kv = &kernel * &v;
        let mut iterations = 0;
        let mut violation = f64::INFINITY;
        while iterations < self.max_iter {
            iterations += 1;
            u.zip_zip_apply(a, &kv, |ui, ai, kvi| *ui = ai / kvi);
            let ktu = kernel.tr_mul(&u);
            v.zip_zip_apply(b, &ktu, |vi, bi, ki| *vi = bi / ki);
            kv = &kernel * &v;
            // Columns are exact after the v update; rows carry the error.
            violation = u
                .iter()
                .zip(kv.iter())
                .zip(a.iter())
                .map(|((ui, kvi), ai)| (ui * kvi - ai).abs())
                .fold(0.0, f64::max);
            if !violation.is_finite() || u.iter().chain(v.iter()).any(|s| !s.is_finite() || *s == 0.0) {
                return Err(Error::Numerical(format!(
                    "kernel scaling left floating-point range after {iterations} iterations \
                     (max |C|/reg = {:.1}); use log-domain stabilisation",
                    cost.as_matrix().amax() / self.reg
                )));
            }
            if violation < self.tol {
                break;
            }
        }
        let mut plan = kernel;
        for (j, mut col) in plan.column_iter_mut().enumerate() {
            col.component_mul_assign(&u);
            col *= v[j];
        }
        let coupling = Coupling {
            plan,
            row_mass: a.clone(),
            col_mass: b.clone(),
        };
        let max_violation = coupling.max_marginal_violation().max(violation.min(f64::MAX));
        Ok(SinkhornSolution {
            converged: max_violation < self.tol,
            coupling,
            iterations,
            max_violation,
            log_domain: false,
        })
    }

    /// Log-domain iteration. The dual potentials `f`, `g` live in log space;
    /// between exact log-sum-exp passes the solver scales the stabilised
    /// kernel `exp((f_i + g_j - C_ij)/reg)` and folds the scalings back into
    /// the potentials before they leave a safe range.
    fn solve_log(&self, cost: &CostMatrix, a: DVector<f64>, b: DVector<f64>) -> SinkhornSolution {
        let c = cost.as_matrix();
        let (n, m) = c.shape();
        let eps = self.reg;
        let log_a = a.map(f64::ln);
        let log_b = b.map(f64::ln);
        let mut f = DVector::<f64>::zeros(n);
        let mut g = DVector::<f64>::zeros(m);

        let exact_step = |f: &mut DVector<f64>, g: &mut DVector<f64>| {
            let lse = row_logsumexp(c, g, eps);
            for i in 0..n {
                f[i] = eps * (log_a[i] - lse[i]);
            }
            for j in 0..m {
                g[j] = eps * (log_b[j] - col_logsumexp(c, f, j, eps));
            }
        };
        let stabilised = |f: &DVector<f64>, g: &DVector<f64>| {
            DMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - c[(i, j)]) / eps).exp())
        };
        let in_range = |s: &DVector<f64>| s.iter().all(|x| x.is_finite() && (ABSORB_MIN..=ABSORB_MAX).contains(x));

        exact_step(&mut f, &mut g);
        let mut kernel = stabilised(&f, &g);
        let mut u = DVector::from_element(n, 1.0);
        let mut v = DVector::from_element(m, 1.0);
        let mut kv = &kernel * &v;
        let mut iterations = 0;
        let mut violation = f64::INFINITY;
        while iterations < self.max_iter {
            iterations += 1;
            let u_next = a.zip_map(&kv, |ai, kvi| ai / kvi);
            let ktu = kernel.tr_mul(&u_next);
            let v_next = b.zip_map(&ktu, |bi, ki| bi / ki);
            if in_range(&u_next) && in_range(&v_next) {
                u = u_next;
                v = v_next;
            } else {
                f.zip_apply(&u, |fi, ui| *fi += eps * ui.ln());
                g.zip_apply(&v, |gj, vj| *gj += eps * vj.ln());
                exact_step(&mut f, &mut g);
                kernel = stabilised(&f, &g);
                u.fill(1.0);
                v.fill(1.0);
            }
            kv = &kernel * &v;
            violation = u
                .iter()
                .zip(kv.iter())
                .zip(a.iter())
                .map(|((ui, kvi), ai)| (ui * kvi - ai).abs())
                .fold(0.0, f64::max);
            if violation < self.tol {
                break;
            }
        }
        let mut plan = kernel;
        for (j, mut col) in plan.column_iter_mut().enumerate() {
            col.component_mul_assign(&u);
            col *= v[j];
        }
        let coupling = Coupling {
            plan,
            row_mass: a,
            col_mass: b,
        };
        let max_violation = coupling.max_marginal_violation().max(violation);
        SinkhornSolution {
            converged: max_violation < self.tol,
            coupling,
            iterations,
            max_violation,
            log_domain: true,
        }
    }
}

/// Scalings outside this range are folded into the log potentials.
const ABSORB_MIN: f64 = 1e-50;
const ABSORB_MAX: f64 = 1e50;

/// `LSE_j (g_j - C_ij)/eps` for every row, traversing `C` column by column.
fn row_logsumexp(c: &DMatrix<f64>, g: &DVector<f64>, eps: f64) -> DVector<f64> {
    let n = c.nrows();
    let mut mx = DVector::from_element(n, f64::NEG_INFINITY);
    for (j, col) in c.column_iter().enumerate() {
        for i in 0..n {
            mx[i] = mx[i].max((g[j] - col[i]) / eps);
        }
    }
    let mut acc = DVector::<f64>::zeros(n);
    for (j, col) in c.column_iter().enumerate() {
        for i in 0..n {
            acc[i] += ((g[j] - col[i]) / eps - mx[i]).exp();
        }
    }
    mx.zip_map(&acc, |m, s| m + s.ln())
}

/// `LSE_i (f_i - C_ij)/eps` for column `j`.
fn col_logsumexp(c: &DMatrix<f64>, f: &DVector<f64>, j: usize, eps: f64) -> f64 {
    let col = c.column(j);
    let mx = f.iter().zip(col.iter()).map(|(fi, ci)| (fi - ci) / eps).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = f.iter().zip(col.iter()).map(|(fi, ci)| ((fi - ci) / eps - mx).exp()).sum();
    mx + s.ln()
}

fn check_marginals(a: &DVector<f64>, b: &DVector<f64>, cost: &CostMatrix) -> Result<()> {
    if a.len() != cost.nrows() || b.len() != cost.ncols() {
        return Err(Error::InvalidInput(format!(
            "marginals of length {} and {} do not fit a {}x{} cost",
            a.len(),
            b.len(),
            cost.nrows(),
            cost.ncols()
        )));
    }
    if a.iter().chain(b.iter()).any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidInput("marginal weights must be finite and > 0".into()));
    }
    let (sa, sb) = (a.sum(), b.sum());
    if (sa - sb).abs() > 1e-9 * sa.max(sb) {
        return Err(Error::InvalidInput(format!(
            "marginals carry different mass: {sa} vs {sb}"
        )));
    }
    Ok(())
}

/// Sinkhorn with uniform marginals.
pub fn sinkhorn(cost: &CostMatrix, reg: f64, max_iter: usize, tol: f64) -> Result<SinkhornSolution> {
    Sinkhorn::new(reg).max_iter(max_iter).tol(tol).solve(cost)
}

/// Minimum-cost permutation by exhaustive enumeration in lexicographic
/// order; among equal costs the lexicographically smallest wins.
pub fn exact_matching(cost: &CostMatrix) -> Result<Matching> {
    let n = cost.nrows();
    if n != cost.ncols() {
        return Err(Error::InvalidInput(format!(
            "exact matching needs a square cost, got {}x{}",
            n,
            cost.ncols()
        )));
    }
    if n > EXACT_MATCHING_MAX {
        return Err(Error::Config(format!(
            "exact matching enumerates n! permutations and is limited to n <= \
             {EXACT_MATCHING_MAX}, got n = {n}"
        )));
    }
    let c = cost.as_matrix();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
        if total < best_cost {
            best_cost = total;
            best.copy_from_slice(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(Matching { target_of: best })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = p.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = p.iter().rposition(|&x| x > p[i]).expect("pivot has a successor");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

/// Greedy hard matching: repeatedly take the largest entry whose row and
/// column are both free. Ties go to the smaller `(row, column)`.
pub fn coupling_to_matching(coupling: &Coupling) -> Result<Matching> {
    greedy_max_matching(coupling.plan())
}

pub(crate) fn greedy_max_matching(scores: &DMatrix<f64>) -> Result<Matching> {
    let (n, m) = scores.shape();
    if n > m {
        return Err(Error::InvalidInput(format!(
            "cannot match {n} rows injectively into {m} columns"
        )));
    }
    // Lazy form of "sort all entries, take each one whose row and column are
    // free": the heap holds one entry per free row, its best column not known
    // to be used. Columns never become free again, so a popped entry whose
    // column is still free is the global maximum among assignable entries.
    let mut rows: Vec<RowCandidates> = (0..n).map(|i| RowCandidates::new(scores, i)).collect();
    let mut heap: BinaryHeap<HeapEntry> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| HeapEntry::new(scores, i, r.current()))
        .collect();
    let mut target_of = vec![usize::MAX; n];
    let mut col_used = vec![false; m];
    while let Some(HeapEntry { row, col, .. }) = heap.pop() {
        if !col_used[col] {
            target_of[row] = col;
            col_used[col] = true;
            continue;
        }
        let cand = &mut rows[row];
        loop {
            let j = cand.advance(scores, row);
            if !col_used[j] {
                heap.push(HeapEntry::new(scores, row, j));
                break;
            }
        }
    }
    Ok(Matching { target_of })
}

/// Columns of one row in greedy order (score descending, column ascending),
/// sorted lazily: a short prefix first, the remainder only if it is reached.
struct RowCandidates {
    cols: Vec<u32>,
    sorted: usize,
    pos: usize,
}

const GREEDY_PREFIX: usize = 16;

impl RowCandidates {
    fn new(scores: &DMatrix<f64>, row: usize) -> Self {
        let mut cols: Vec<u32> = (0..scores.ncols() as u32).collect();
        let sorted = GREEDY_PREFIX.min(cols.len());
        let cmp = Self::order(scores, row);
        if sorted < cols.len() {
            cols.select_nth_unstable_by(sorted, &cmp);
        }
        cols[..sorted].sort_unstable_by(&cmp);
        Self { cols, sorted, pos: 0 }
    }

    fn order(scores: &DMatrix<f64>, row: usize) -> impl Fn(&u32, &u32) -> std::cmp::Ordering + '_ {
        move |&p, &q| scores[(row, q as usize)].total_cmp(&scores[(row, p as usize)]).then(p.cmp(&q))
    }

    fn current(&self) -> usize {
        self.cols[self.pos] as usize
    }

    /// Moves to the next column. A row can only run out after every column
    /// is used, which cannot happen while it is still unassigned and n <= m.
    fn advance(&mut self, scores: &DMatrix<f64>, row: usize) -> usize {
        self.pos += 1;
        if self.pos == self.sorted {
            let cmp = Self::order(scores, row);
            self.cols[self.sorted..].sort_unstable_by(&cmp);
            self.sorted = self.cols.len();
        }
        self.cols[self.pos] as usize
    }
}

/// Max-heap order: higher score first, then lower row, then lower column.
struct HeapEntry {
    score: f64,
    row: usize,
    col: usize,
}

impl HeapEntry {
    fn new(scores: &DMatrix<f64>, row: usize, col: usize) -> Self {
        Self { score: scores[(row, col)], row, col }
    }
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.row.cmp(&self.row))
            .then(other.col.cmp(&self.col))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cost(n: usize, rng: &mut ChaCha8Rng) -> CostMatrix {
        CostMatrix::new(DMatrix::from_fn(n, n, |_, _| rng.random::<f64>())).unwrap()
    }

    /// Reference greedy: sort every entry, then sweep.
    fn greedy_by_full_sort(scores: &DMatrix<f64>) -> Vec<usize> {
        let (n, m) = scores.shape();
        let mut order: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
        order.sort_by(|&p, &q| scores[q].total_cmp(&scores[p]).then(p.cmp(&q)));
        let mut target_of = vec![usize::MAX; n];
        let mut used = vec![false; m];
        for (i, j) in order {
            if target_of[i] == usize::MAX && !used[j] {
                target_of[i] = j;
                used[j] = true;
            }
        }
        target_of
    }

    #[test]
    fn lazy_greedy_matches_full_sort_including_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (n, m, levels) in [(5, 5, 3), (40, 40, 4), (40, 60, 1000), (30, 30, 1), (100, 100, 7)] {
            let scores = DMatrix::from_fn(n, m, |_, _| rng.random_range(0..levels) as f64);
            let got = greedy_max_matching(&scores).unwrap();
            assert_eq!(got.target_of(), greedy_by_full_sort(&scores).as_slice(), "n={n} m={m}");
        }
    }

    /// Every permutation of 0..n, generated by recursive swapping.
    fn all_permutations(n: usize) -> Vec<Vec<usize>> {
        fn rec(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k == p.len() {
                out.push(p.clone());
                return;
            }
            for i in k..p.len() {
                p.swap(k, i);
                rec(k + 1, p, out);
                p.swap(k, i);
            }
        }
        let mut out = Vec::new();
        rec(0, &mut (0..n).collect(), &mut out);
        out
    }

    fn brute_force_min(cost: &CostMatrix) -> f64 {
        all_permutations(cost.nrows())
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost.as_matrix()[(i, j)]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn constant_cost_gives_product_coupling() {
        let cost = CostMatrix::new(DMatrix::from_element(3, 4, 2.5)).unwrap();
        let sol = sinkhorn(&cost, 0.05, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert!(sol.converged);
        let expected = Coupling::uniform(3, 4);
        assert!((sol.coupling.plan() - expected.plan()).amax() < 1e-12);
    }

    #[test]
    fn two_by_two_concentrates_on_diagonal() {
        let cost = CostMatrix::new(dmatrix![0.0, 1.0; 1.0, 0.0]).unwrap();
        let sol = sinkhorn(&cost, 0.01, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let target = DMatrix::<f64>::identity(2, 2) * 0.5;
        assert!((sol.coupling.plan() - target).amax() < 1e-3);
    }

    #[test]
    fn low_regularisation_approaches_exact_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let cost = random_cost(6, &mut rng);
        let sol = Sinkhorn::new(0.005).max_iter(20_000).solve(&cost).unwrap();
        let optimum = brute_force_min(&cost);
        // Costs are scaled by the uniform mass 1/6.
        let approx = sol.coupling.transport_cost(&cost) * 6.0;
        assert!((approx - optimum).abs() <= 0.02 * optimum, "{approx} vs {optimum}");
    }

    #[test]
    fn rejects_nonpositive_regularisation() {
        let cost = CostMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(sinkhorn(&cost, 0.0, 10, 1e-6), Err(Error::Config(_))));
        assert!(matches!(sinkhorn(&cost, -1.0, 10, 1e-6), Err(Error::Config(_))));
    }

    #[test]
    fn large_cost_ratio_switches_to_log_domain() {
        let cost = CostMatrix::new(dmatrix![100.0, 200.0; 200.0, 100.0]).unwrap();
        let sol = sinkhorn(&cost, 0.05, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert!(sol.log_domain);
        assert!(sol.converged);
        assert!((sol.coupling.plan()[(0, 0)] - 0.5).abs() < 1e-9);

        let forced = Sinkhorn::new(0.05)
            .stabilization(Stabilization::Kernel)
            .solve(&cost);
        assert!(matches!(forced, Err(Error::Numerical(_))));
    }

    #[test]
    fn kernel_and_log_domain_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cost = random_cost(7, &mut rng);
        let k = Sinkhorn::new(0.1).stabilization(Stabilization::Kernel).solve(&cost).unwrap();
        let l = Sinkhorn::new(0.1).stabilization(Stabilization::Log).solve(&cost).unwrap();
        assert!((k.coupling.plan() - l.coupling.plan()).amax() < 1e-9);
    }

    #[test]
    fn custom_marginals_are_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cost = CostMatrix::new(DMatrix::from_fn(3, 2, |_, _| rng.random::<f64>())).unwrap();
        let a = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let b = DVector::from_vec(vec![0.6, 0.4]);
        let sol = Sinkhorn::new(0.1).marginals(a.clone(), b.clone()).solve(&cost).unwrap();
        assert!(sol.converged);
        assert!((sol.coupling.plan().column_sum() - a).amax() < 1e-6);
        let bad = Sinkhorn::new(0.1)
            .marginals(DVector::from_vec(vec![0.5, 0.5, 0.5]), b)
            .solve(&cost);
        assert!(matches!(bad, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn exact_matching_examples() {
        let one = CostMatrix::new(dmatrix![3.0]).unwrap();
        assert_eq!(exact_matching(&one).unwrap().target_of(), &[0]);

        let two = CostMatrix::new(dmatrix![0.0, 1.0; 1.0, 0.0]).unwrap();
        let m = exact_matching(&two).unwrap();
        assert_eq!(m.target_of(), &[0, 1]);
        assert_eq!(m.cost(&two), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let five = random_cost(5, &mut rng);
        let m = exact_matching(&five).unwrap();
        assert_eq!(m.cost(&five), brute_force_min(&five));
    }

    #[test]
    fn exact_matching_ties_pick_lexicographic_first() {
        let flat = CostMatrix::new(DMatrix::from_element(4, 4, 1.0)).unwrap();
        assert_eq!(exact_matching(&flat).unwrap().target_of(), &[0, 1, 2, 3]);
    }

    #[test]
    fn exact_matching_limits() {
        let big = CostMatrix::new(DMatrix::zeros(11, 11)).unwrap();
        assert!(matches!(exact_matching(&big), Err(Error::Config(_))));
        let rect = CostMatrix::new(DMatrix::zeros(2, 3)).unwrap();
        assert!(matches!(exact_matching(&rect), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn greedy_extraction_examples() {
        let diag = Coupling::new(
            DMatrix::identity(2, 2) * 0.5,
            DVector::from_element(2, 0.5),
            DVector::from_element(2, 0.5),
        )
        .unwrap();
        assert_eq!(coupling_to_matching(&diag).unwrap().target_of(), &[0, 1]);

        let anti = Coupling::new(
            dmatrix![0.1, 0.4; 0.4, 0.1],
            DVector::from_element(2, 0.5),
            DVector::from_element(2, 0.5),
        )
        .unwrap();
        assert_eq!(coupling_to_matching(&anti).unwrap().target_of(), &[1, 0]);
    }

    #[test]
    fn greedy_recovers_noisy_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 12;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut plan = DMatrix::from_fn(n, n, |_, _| 1e-3 * rng.random::<f64>());
        for (i, &j) in perm.iter().enumerate() {
            plan[(i, j)] += 1.0;
        }
        plan /= plan.sum();
        let coupling = Coupling::new(
            plan,
            DVector::from_element(n, 1.0 / n as f64),
            DVector::from_element(n, 1.0 / n as f64),
        )
        .unwrap();
        assert_eq!(coupling_to_matching(&coupling).unwrap().target_of(), perm.as_slice());
    }

    #[test]
    fn greedy_ties_prefer_lowest_indices() {
        let uniform = Coupling::uniform(3, 3);
        assert_eq!(coupling_to_matching(&uniform).unwrap().target_of(), &[0, 1, 2]);
        let wide = Coupling::uniform(2, 4);
        assert_eq!(coupling_to_matching(&wide).unwrap().target_of(), &[0, 1]);
        let tall = Coupling::uniform(3, 2);
        assert!(coupling_to_matching(&tall).is_err());
    }

    #[test]
    fn matching_validation() {
        assert!(Matching::new(vec![0, 0], 2).is_err());
        assert!(Matching::new(vec![0, 2], 2).is_err());
        assert!(Matching::new(vec![1, 0], 2).is_ok());
    }

    #[test]
    fn next_permutation_enumerates_in_order() {
        let mut p = vec![0, 1, 2];
        let mut seen = vec![p.clone()];
        while next_permutation(&mut p) {
            seen.push(p.clone());
        }
        assert_eq!(
            seen,
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
    }

    #[test]
    fn low_regularisation_recovers_optimal_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hits = 0;
        for trial in 0..100 {
            let cost = random_cost(2 + trial % 5, &mut rng);
            let sol = Sinkhorn::new(0.001).max_iter(100_000).solve(&cost).unwrap();
            let found = coupling_to_matching(&sol.coupling).unwrap().cost(&cost);
            if (found - brute_force_min(&cost)).abs() <= 1e-9 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "optimal on {hits} of 100");
    }

    #[test]
    fn huge_cost_scale_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cost = CostMatrix::new(DMatrix::from_fn(8, 8, |_, _| 1e3 * rng.random::<f64>())).unwrap();
        let sol = Sinkhorn::new(1.0).max_iter(2_000_000).solve(&cost).unwrap();
        assert!(sol.log_domain && sol.converged, "{} iterations, violation {}", sol.iterations, sol.max_violation);
        assert!(sol.coupling.plan().iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_eq!(coupling_to_matching(&sol.coupling).unwrap().cost(&cost), exact_matching(&cost).unwrap().cost(&cost));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn converged_plans_meet_marginals(seed in any::<u64>(), n in 1usize..12, m in 1usize..12, reg in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = CostMatrix::new(DMatrix::from_fn(n, m, |_, _| rng.random::<f64>())).unwrap();
            let sol = Sinkhorn::new(reg).max_iter(100_000).solve(&cost).unwrap();
            prop_assert!(sol.converged);
            prop_assert!(sol.coupling.max_marginal_violation() <= DEFAULT_TOL);
            prop_assert!(sol.coupling.plan().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn cost_falls_as_regularisation_shrinks(seed in any::<u64>(), n in 2usize..8) {
            let cost = random_cost(n, &mut ChaCha8Rng::seed_from_u64(seed));
            let costs: Vec<f64> = [0.5, 0.1, 0.05, 0.01]
                .iter()
                .map(|&reg| {
                    let sol = Sinkhorn::new(reg).max_iter(1_000_000).tol(1e-12).solve(&cost).unwrap();
                    sol.coupling.transport_cost(&cost)
                })
                .collect();
            for w in costs.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9, "{costs:?}");
            }
        }

        #[test]
        fn permuting_rows_and_columns_permutes_the_plan(seed in any::<u64>(), n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = random_cost(n, &mut rng);
            let mut rows: Vec<usize> = (0..n).collect();
            let mut cols: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), &mut rng);
            rand::seq::SliceRandom::shuffle(cols.as_mut_slice(), &mut rng);
            let permuted = CostMatrix::new(DMatrix::from_fn(n, n, |i, j| cost.as_matrix()[(rows[i], cols[j])])).unwrap();
            let a = Sinkhorn::new(0.05).solve(&cost).unwrap();
            let b = Sinkhorn::new(0.05).solve(&permuted).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((b.coupling.plan()[(i, j)] - a.coupling.plan()[(rows[i], cols[j])]).abs() <= 1e-9);
                }
            }
        }
    }
}
