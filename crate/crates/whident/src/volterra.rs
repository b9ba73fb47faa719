//! Reduced-kernel Volterra baseline.
//!
//! Expanding the W-H output in the input alone yields Volterra kernels
//! `ker₁(i,m) = g'₁(m)·h(i)` and `ker₃(i,j,l,m) = g'₃(m)·h(i)h(j)h(l)`.
//! Kernels multiplying the same product of delayed inputs can be summed
//! without any loss of optimality: linear terms group by the total lag
//! `o = i+m`, cubic terms by the sorted lag multiset `{i+m, j+m, l+m}`.
//! For `L₁ = L₂ = 20`, `K = 3` this reduces 164 000 raw kernels to 5569.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::channel::{FirFilter, PolynomialAmplifier};
use crate::error::{Error, Result};
use crate::lsq;
use crate::signals::Signal;

/// One reduced kernel position: the order `k` and the sorted multiset of
/// `k` input lags it multiplies.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReducedKernelIndex {
    pub order: usize,
    /// Sorted ascending; duplicates allowed (a multiset).
    pub lags: Vec<usize>,
}

impl ReducedKernelIndex {
    pub fn linear(lag: usize) -> Self {
        Self { order: 1, lags: vec![lag] }
    }

    pub fn cubic(mut lags: [usize; 3]) -> Self {
        lags.sort_unstable();
        Self { order: 3, lags: lags.to_vec() }
    }
}

/// A reduced Volterra model: canonical ordered index set plus the kernel
/// value for each index.
#[derive(Debug, Clone, PartialEq)]
pub struct VolterraModel {
    indices: Vec<ReducedKernelIndex>,
    kernels: Vec<f64>,
}

impl VolterraModel {
    pub fn new(indices: Vec<ReducedKernelIndex>, kernels: Vec<f64>) -> Result<Self> {
        if indices.len() != kernels.len() {
            return Err(Error::invalid("kernels", "one kernel value per index required"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("indices", "index set must be strictly increasing in canonical order"));
        }
        Ok(Self { indices, kernels })
    }

    pub fn indices(&self) -> &[ReducedKernelIndex] {
        &self.indices
    }

    pub fn kernels(&self) -> &[f64] {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Predicted output for input `x` (zero-prefix lag convention).
    pub fn predict(&self, x: &Signal) -> Signal {
        let xs = x.samples();
        let mut out = vec![0.0; xs.len()];
        for (idx, &value) in self.indices.iter().zip(&self.kernels) {
            match idx.order {
                1 => {
                    let a = idx.lags[0];
                    for n in a..xs.len() {
                        out[n] += value * xs[n - a];
                    }
                }
                3 => {
                    let (a, b, c) = (idx.lags[0], idx.lags[1], idx.lags[2]);
                    for n in c..xs.len() {
                        out[n] += value * xs[n - a] * xs[n - b] * xs[n - c];
                    }
                }
                k => {
                    for n in *idx.lags.last().expect("non-empty lags")..xs.len() {
                        let mut prod = value;
                        for &lag in &idx.lags {
                            prod *= xs[n - lag];
                        }
                        debug_assert_eq!(idx.lags.len(), k);
                        out[n] += prod;
                    }
                }
            }
        }
        Signal::raw(out)
    }

    /// CSV rows `k,a,b,c,value`; `b` and `c` stay empty for linear terms.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k,a,b,c,value")?;
        for (idx, value) in self.indices.iter().zip(&self.kernels) {
            match idx.order {
                1 => writeln!(out, "1,{},,,{value:.17e}", idx.lags[0])?,
                3 => writeln!(
                    out,
                    "3,{},{},{},{value:.17e}",
                    idx.lags[0], idx.lags[1], idx.lags[2]
                )?,
                k => {
                    return Err(Error::invalid("order", format!("cannot serialize order {k}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut text = String::new();
        std::io::BufReader::new(input).read_to_string(&mut text)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "k,a,b,c,value" => {}
            _ => return Err(Error::Parse("expected `k,a,b,c,value` header".into())),
        }
        let mut indices = Vec::new();
        let mut kernels = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Parse(format!("line {}: expected 5 fields", ln + 2)));
            }
            let bad = |e: std::num::ParseIntError| Error::Parse(format!("line {}: {e}", ln + 2));
            let badf = |e: std::num::ParseFloatError| Error::Parse(format!("line {}: {e}", ln + 2));
            let order: usize = fields[0].parse().map_err(bad)?;
            let index = match order {
                1 => ReducedKernelIndex::linear(fields[1].parse().map_err(bad)?),
                3 => ReducedKernelIndex::cubic([
                    fields[1].parse().map_err(bad)?,
                    fields[2].parse().map_err(bad)?,
                    fields[3].parse().map_err(bad)?,
                ]),
                k => return Err(Error::Parse(format!("line {}: unsupported order {k}", ln + 2))),
            };
            indices.push(index);
            kernels.push(fields[4].parse().map_err(badf)?);
        }
        VolterraModel::new(indices, kernels)
    }
}

/// Enumerates the reduced kernel index set for a W-H model with filter
/// lengths `l1`, `l2` and odd polynomial order `max_order`, in canonical
/// order (order ascending, lags lexicographic).
///
/// Linear part: every total lag `o ∈ [0, L₁+L₂−2]`. Order-`k` part: every
/// sorted multiset realizable as `(i₁+m, …, i_k+m)` with `iⱼ < L₁`, `m < L₂`.
pub fn enumerate_reduced_indices(
    l1: usize,
    l2: usize,
    max_order: usize,
) -> Result<Vec<ReducedKernelIndex>> {
    if l1 == 0 || l2 == 0 {
        return Err(Error::invalid("l1", "filter lengths must be ≥ 1"));
    }
    if max_order % 2 == 0 || max_order == 0 {
        return Err(Error::invalid("max_order", "must be a positive odd integer"));
    }
    let mut out: Vec<ReducedKernelIndex> =
        (0..l1 + l2 - 1).map(ReducedKernelIndex::linear).collect();
    for order in (3..=max_order).step_by(2) {
        let mut set: BTreeSet<Vec<usize>> = BTreeSet::new();
        let mut multiset = vec![0usize; order];
        collect_shifted_multisets(l1, l2, order, 0, 0, &mut multiset, &mut set);
        out.extend(set.into_iter().map(|lags| ReducedKernelIndex { order, lags }));
    }
    Ok(out)
}

/// Recursively enumerates sorted multisets over `[0, l1)` of size `order`,
/// inserting every `m`-shifted copy, `m ∈ [0, l2)`.
fn collect_shifted_multisets(
    l1: usize,
    l2: usize,
    order: usize,
    depth: usize,
    min: usize,
    multiset: &mut Vec<usize>,
    set: &mut BTreeSet<Vec<usize>>,
) {
    if depth == order {
        for m in 0..l2 {
            set.insert(multiset.iter().map(|&v| v + m).collect());
        }
        return;
    }
    for v in min..l1 {
        multiset[depth] = v;
        collect_shifted_multisets(l1, l2, order, depth + 1, v, multiset, set);
    }
}

/// Number of sorted multisets of `order` lags over `[0, l1)` before the
/// `m`-shift grouping: `C(l1 + order − 1, order)`.
pub fn multiset_count(l1: usize, order: usize) -> usize {
    // Product form of the binomial coefficient, exact for the small sizes used here.
    let mut num = 1u128;
    let mut den = 1u128;
    for i in 0..order {
        num *= (l1 + order - 1 - i) as u128;
        den *= (i + 1) as u128;
    }
    (num / den) as usize
}

/// Design matrix whose column for index `{a}` is `x(n−a)` and for
/// `{a,b,c}` is `x(n−a)·x(n−b)·x(n−c)` (zero-prefix convention).
pub fn volterra_design(x: &Signal, indices: &[ReducedKernelIndex]) -> DMatrix<f64> {
    let xs = x.samples();
    let mut design = DMatrix::zeros(xs.len(), indices.len());
    for (col, idx) in indices.iter().enumerate() {
        let max_lag = *idx.lags.last().expect("non-empty lags");
        for n in max_lag..xs.len() {
            let mut prod = 1.0;
            for &lag in &idx.lags {
                prod *= xs[n - lag];
            }
            design[(n, col)] = prod;
        }
    }
    design
}

/// Exact reduced kernels of a known `K = 3` polynomial W-H model, built by
/// the three grouping steps (sum over all ordered raw-kernel tuples that
/// collapse onto each reduced index).
pub fn wh_to_kernels(
    h: &FirFilter,
    amp: &PolynomialAmplifier,
    g: &FirFilter,
) -> Result<VolterraModel> {
    if amp.max_order() > 3 {
        return Err(Error::invalid("amp", "kernel construction supports orders {1, 3} only"));
    }
    let gamma1 = amp.coeff(1);
    let gamma3 = amp.coeff(3);
    let indices = enumerate_reduced_indices(h.len(), g.len(), 3)?;
    let mut kernels = vec![0.0; indices.len()];
    let position: std::collections::HashMap<&ReducedKernelIndex, usize> =
        indices.iter().enumerate().map(|(i, idx)| (idx, i)).collect();

    // Linear block: ker'₁(o) = Σ_{i+m=o} γ₁·g(m)·h(i) = γ₁·(g*h)(o).
    let r = g.cascade(h);
    for (o, &tap) in r.taps().iter().enumerate() {
        let idx = ReducedKernelIndex::linear(o);
        kernels[position[&idx]] += gamma1 * tap;
    }

    // Cubic block: sum γ₃·g(m)·h(i)h(j)h(l) over every ordered (i,j,l) and m.
    // Ordered triples are covered by weighting each sorted multiset with its
    // permutation multiplicity.
    if gamma3 != 0.0 {
        let l1 = h.len();
        for m in 0..g.len() {
            let gm = gamma3 * g.taps()[m];
            if gm == 0.0 {
                continue;
            }
            for i in 0..l1 {
                for j in i..l1 {
                    for l in j..l1 {
                        let weight = permutation_multiplicity(i, j, l);
                        let value = gm * h.taps()[i] * h.taps()[j] * h.taps()[l] * weight as f64;
                        let idx = ReducedKernelIndex::cubic([i + m, j + m, l + m]);
                        kernels[position[&idx]] += value;
                    }
                }
            }
        }
    }
    VolterraModel::new(indices, kernels)
}

/// Number of distinct orderings of a sorted triple.
fn permutation_multiplicity(i: usize, j: usize, l: usize) -> usize {
    if i == j && j == l {
        1
    } else if i == j || j == l {
        3
    } else {
        6
    }
}

/// Least-squares estimate of the reduced `K = 3` Volterra kernels.
///
/// Propagates a conditioning error when the record is shorter than the
/// kernel count (underdetermined system).
pub fn estimate_volterra(x: &Signal, w: &Signal, l1: usize, l2: usize) -> Result<VolterraModel> {
    estimate_volterra_with(x, w, l1, l2, &lsq::SolveOptions::default())
}

/// [`estimate_volterra`] with explicit solver options (e.g. a ridge
/// parameter for deliberately underdetermined runs).
pub fn estimate_volterra_with(
    x: &Signal,
    w: &Signal,
    l1: usize,
    l2: usize,
    options: &lsq::SolveOptions,
) -> Result<VolterraModel> {
    if x.len() != w.len() {
        return Err(Error::invalid("w", "input and output must have equal length"));
    }
    let indices = enumerate_reduced_indices(l1, l2, 3)?;
    let design = volterra_design(x, &indices);
    let problem = lsq::RegressionProblem::new(design, DVector::from_column_slice(w.samples()))?;
    let solution = lsq::solve_with(&problem, options)?;
    VolterraModel::new(indices, solution.coefficients.iter().copied().collect())
}

/// Required pilot-length ratio `N_V/N_P ≈ (L_V/L_P)·(1/IBO)` between the
/// Volterra baseline and the three-step method, all arguments linear.
pub fn pilot_length_ratio(volterra_kernels: f64, proposed_taps: f64, ibo: f64) -> f64 {
    (volterra_kernels / proposed_taps) / ibo
}
