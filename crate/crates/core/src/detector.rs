//! Trellis detection matched to a partial-response target.
//!
//! States hold the previous `L − 1` bits (bit `j` of the state index is set
//! when `u_{k−1−j} = +1`), so the all-(−1) history is state 0. Branch
//! `2·s + i` leaves state `s` with input `−1` (`i = 0`) or `+1` (`i = 1`).
//!
//! Soft output is exact max-log: forward min-sum metrics `α`, backward
//! min-sum metrics `β`, and for every stage the best branch total
//! `α + BM + β` among branches carrying `−1` and among those carrying `+1`.
//! `LLR_k = min_{u_k=−1} PM − min_{u_k=+1} PM`, positive when `+1` is more likely.
//!
//! Ties always resolve to the branch with the lower state index (then input
//! `−1`), in every routine here and in the exhaustive oracle.

use std::io::Write;

use crate::equalizer::PrTarget;
use crate::grad::{Tape, Var};
use crate::{Error, Result};

/// Longest block accepted by the exhaustive oracle.
pub const MAX_BRUTE_FORCE_LEN: usize = 16;

#[derive(Debug, Clone)]
pub struct Trellis {
    target: PrTarget,
    n_states: usize,
    next: Vec<usize>,
    outputs: Vec<f64>,
    /// `history[b·L + j]` is `u_{k−j}` on branch `b` (`j = 0` is the input bit).
    history: Vec<f64>,
    incoming: Vec<[usize; 2]>,
}

fn bit_value(set: bool) -> i8 {
    if set {
        1
    } else {
        -1
    }
}

pub fn build_trellis(target: &PrTarget) -> Result<Trellis> {
    let l = target.len();
    if l == 0 {
        return Err(Error::InvalidParameter("target needs at least one tap".into()));
    }
    if l > 16 {
        return Err(Error::InvalidParameter("targets longer than 16 taps are not supported".into()));
    }
    let memory = l - 1;
    let n_states = 1usize << memory;
    let mask = n_states - 1;
    let n_branches = 2 * n_states;
    let mut next = Vec::with_capacity(n_branches);
    let mut outputs = Vec::with_capacity(n_branches);
    let mut history = Vec::with_capacity(n_branches * l);
    for s in 0..n_states {
        for input in 0..2 {
            let bits: Vec<i8> = std::iter::once(bit_value(input == 1))
                .chain((0..memory).map(|j| bit_value(s >> j & 1 == 1)))
                .collect();
            outputs.push(target.output_from_history(bits.iter().copied()));
            history.extend(bits.iter().map(|&b| f64::from(b)));
            next.push(((s << 1) | input) & mask);
        }
    }
    let mut incoming = vec![[usize::MAX; 2]; n_states];
    let mut filled = vec![0usize; n_states];
    for (b, &dest) in next.iter().enumerate() {
        incoming[dest][filled[dest]] = b;
        filled[dest] += 1;
    }
    debug_assert!(filled.iter().all(|&c| c == 2));
    Ok(Trellis { target: target.clone(), n_states, next, outputs, history, incoming })
}

impl Trellis {
    pub fn target(&self) -> &PrTarget {
        &self.target
    }

    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_branches(&self) -> usize {
        2 * self.n_states
    }

    pub fn origin(&self, branch: usize) -> usize {
        branch / 2
    }

    pub fn input(&self, branch: usize) -> i8 {
        bit_value(branch % 2 == 1)
    }

    pub fn next_state(&self, branch: usize) -> usize {
        self.next[branch]
    }

    /// Noiseless output `ŷ(s, u)` of a branch.
    pub fn output(&self, branch: usize) -> f64 {
        self.outputs[branch]
    }

    /// Bits `u_k, u_{k−1}, …` implied by a branch; `∂ŷ/∂g_j` equals entry `j`.
    pub fn branch_history(&self, branch: usize) -> &[f64] {
        let l = self.target.len();
        &self.history[branch * l..(branch + 1) * l]
    }

    /// Branches entering `state`, lower origin state first.
    pub fn incoming(&self, state: usize) -> [usize; 2] {
        self.incoming[state]
    }

    pub fn outgoing(&self, state: usize) -> [usize; 2] {
        [2 * state, 2 * state + 1]
    }
}

/// Squared Euclidean distance between a sample and a branch output.
pub fn branch_metric(y: f64, expected: f64) -> f64 {
    let d = y - expected;
    d * d
}

/// Initial state metrics for a block.
#[derive(Debug, Clone, PartialEq)]
pub enum Start {
    /// History known; every other state is impossible.
    Known(usize),
    /// Unknown history, all states equally likely.
    Free,
    /// Metrics carried over from a previous block (treated as constants).
    Metrics(Vec<f64>),
}

impl Default for Start {
    fn default() -> Self {
        Start::Known(0)
    }
}

impl Start {
    fn metrics(&self, n_states: usize) -> Result<Vec<f64>> {
        match self {
            Start::Known(s) => {
                if *s >= n_states {
                    return Err(Error::InvalidParameter(format!("start state {s} out of range")));
                }
                let mut m = vec![f64::INFINITY; n_states];
                m[*s] = 0.0;
                Ok(m)
            }
            Start::Free => Ok(vec![0.0; n_states]),
            Start::Metrics(m) => {
                if m.len() != n_states {
                    return Err(Error::LengthMismatch("start metrics per state".into()));
                }
                Ok(m.clone())
            }
        }
    }
}

/// Argmin bookkeeping from one forward/backward pass, enough to route
/// gradients back along the two competing paths of every bit.
#[derive(Debug, Clone)]
pub struct ArgminPaths {
    /// `forward[k·S + s]`: survivor branch (stage `k − 1`) into state `s` at time `k`.
    forward: Vec<u32>,
    /// `backward[k·S + s]`: best continuation branch (stage `k`) out of state `s`.
    backward: Vec<u32>,
    /// Best branch at stage `k` among those carrying `−1` / `+1`.
    best_minus: Vec<u32>,
    best_plus: Vec<u32>,
    samples: Vec<f64>,
    final_metrics: Vec<f64>,
}

impl ArgminPaths {
    pub fn best_branches(&self, k: usize) -> (usize, usize) {
        (self.best_minus[k] as usize, self.best_plus[k] as usize)
    }

    /// Compact signature of every argmin decision; equal signatures mean the
    /// same piecewise-quadratic region.
    pub fn signature(&self) -> Vec<u32> {
        let mut s = Vec::with_capacity(self.forward.len() + self.backward.len() + 2 * self.best_minus.len());
        s.extend(&self.forward);
        s.extend(&self.backward);
        s.extend(&self.best_minus);
        s.extend(&self.best_plus);
        s
    }
}

/// Hard decisions plus LLRs for one block.
#[derive(Debug, Clone)]
pub struct SoftDecision {
    pub hard_bits: Vec<i8>,
    pub llr: Vec<f64>,
    pub paths: Option<ArgminPaths>,
}

impl SoftDecision {
    /// End-of-block forward metrics, shifted so the best state is 0; use as a
    /// warm [`Start::Metrics`] for the next block.
    pub fn final_metrics(&self) -> Option<Vec<f64>> {
        self.paths.as_ref().map(|p| {
            let min = p.final_metrics.iter().copied().fold(f64::INFINITY, f64::min);
            p.final_metrics.iter().map(|m| m - min).collect()
        })
    }
}

fn check_len(trellis: &Trellis, y: &[f64]) -> Result<()> {
    if y.len() < trellis.target_len() || y.is_empty() {
        return Err(Error::BlockTooShort { len: y.len(), min: trellis.target_len().max(1) });
    }
    Ok(())
}

struct Forward {
    alpha: Vec<f64>,
    choice: Vec<u32>,
}

fn branch_metrics(trellis: &Trellis, y: &[f64]) -> Vec<f64> {
    let mut bms = Vec::with_capacity(y.len() * trellis.n_branches());
    for &yk in y {
        bms.extend(trellis.outputs.iter().map(|&e| branch_metric(yk, e)));
    }
    bms
}

fn forward_pass(trellis: &Trellis, bms: &[f64], start: &Start) -> Result<Forward> {
    let ns = trellis.n_states;
    let nb = trellis.n_branches();
    let n = bms.len() / nb;
    let mut alpha = Vec::with_capacity((n + 1) * ns);
    alpha.extend(start.metrics(ns)?);
    let mut choice = vec![u32::MAX; (n + 1) * ns];
    for k in 0..n {
        let base = k * ns;
        for s in 0..ns {
            let [b0, b1] = trellis.incoming[s];
            let m0 = alpha[base + trellis.origin(b0)] + bms[k * nb + b0];
            let m1 = alpha[base + trellis.origin(b1)] + bms[k * nb + b1];
            let (m, b) = if m1 < m0 { (m1, b1) } else { (m0, b0) };
            alpha.push(m);
            choice[(k + 1) * ns + s] = b as u32;
        }
    }
    Ok(Forward { alpha, choice })
}

fn backward_pass(trellis: &Trellis, bms: &[f64]) -> (Vec<f64>, Vec<u32>) {
    let ns = trellis.n_states;
    let nb = trellis.n_branches();
    let n = bms.len() / nb;
    let mut beta = vec![0.0; (n + 1) * ns];
    let mut choice = vec![u32::MAX; n * ns];
    for k in (0..n).rev() {
        for s in 0..ns {
            let [b0, b1] = trellis.outgoing(s);
            let m0 = bms[k * nb + b0] + beta[(k + 1) * ns + trellis.next[b0]];
            let m1 = bms[k * nb + b1] + beta[(k + 1) * ns + trellis.next[b1]];
            let (m, b) = if m1 < m0 { (m1, b1) } else { (m0, b0) };
            beta[k * ns + s] = m;
            choice[k * ns + s] = b as u32;
        }
    }
    (beta, choice)
}

fn traceback(trellis: &Trellis, fwd: &Forward, n: usize) -> Vec<i8> {
    let ns = trellis.n_states;
    let last = &fwd.alpha[n * ns..(n + 1) * ns];
    let mut state = 0;
    for (s, &m) in last.iter().enumerate() {
        if m < last[state] {
            state = s;
        }
    }
    let mut bits = vec![0i8; n];
    for k in (1..=n).rev() {
        let b = fwd.choice[k * ns + state] as usize;
        bits[k - 1] = trellis.input(b);
        state = trellis.origin(b);
    }
    bits
}

/// Input bits of the minimum path-metric path; known all-(−1) start, free end.
pub fn viterbi_hard(trellis: &Trellis, y: &[f64]) -> Result<Vec<i8>> {
    viterbi_hard_from(trellis, y, &Start::default())
}

pub fn viterbi_hard_from(trellis: &Trellis, y: &[f64], start: &Start) -> Result<Vec<i8>> {
    check_len(trellis, y)?;
    let fwd = forward_pass(trellis, &branch_metrics(trellis, y), start)?;
    Ok(traceback(trellis, &fwd, y.len()))
}

/// Exact max-log soft output with argmin bookkeeping; known all-(−1) start.
pub fn maxlog_llr(trellis: &Trellis, y: &[f64]) -> Result<SoftDecision> {
    maxlog_llr_from(trellis, y, &Start::default())
}

pub fn maxlog_llr_from(trellis: &Trellis, y: &[f64], start: &Start) -> Result<SoftDecision> {
    check_len(trellis, y)?;
    let mut soft = maxlog_from_branch_metrics(trellis, &branch_metrics(trellis, y), start)?;
    if let Some(p) = soft.paths.as_mut() {
        p.samples = y.to_vec();
    }
    Ok(soft)
}

/// Max-log soft output from a precomputed `n × branches` metric table.
pub(crate) fn maxlog_from_branch_metrics(trellis: &Trellis, bms: &[f64], start: &Start) -> Result<SoftDecision> {
    let ns = trellis.n_states;
    let nb = trellis.n_branches();
    let n = bms.len() / nb;
    let fwd = forward_pass(trellis, bms, start)?;
    let (beta, bchoice) = backward_pass(trellis, bms);
    let mut llr = Vec::with_capacity(n);
    let mut best_minus = Vec::with_capacity(n);
    let mut best_plus = Vec::with_capacity(n);
    for k in 0..n {
        let mut best = [(f64::INFINITY, u32::MAX); 2];
        for b in 0..nb {
            let total = (fwd.alpha[k * ns + trellis.origin(b)] + bms[k * nb + b]) + beta[(k + 1) * ns + trellis.next[b]];
            let slot = &mut best[b % 2];
            if total < slot.0 || slot.1 == u32::MAX {
                *slot = (total, b as u32);
            }
        }
        llr.push(best[0].0 - best[1].0);
        best_minus.push(best[0].1);
        best_plus.push(best[1].1);
    }
    let hard_bits = traceback(trellis, &fwd, n);
    let final_metrics = fwd.alpha[n * ns..].to_vec();
    Ok(SoftDecision {
        hard_bits,
        llr,
        paths: Some(ArgminPaths {
            forward: fwd.choice,
            backward: bchoice,
            best_minus,
            best_plus,
            samples: Vec::new(),
            final_metrics,
        }),
    })
}

/// Exhaustive oracle over all `2^n` input sequences from the all-(−1) start.
///
/// Path metrics for bit `k` are formed as (left fold of `BM_0..=BM_k`) plus
/// (right fold of `BM_{k+1}..`), the same association the forward/backward
/// recursions use, so results agree with [`maxlog_llr`] to the last bit.
pub fn brute_force_llr(trellis: &Trellis, y: &[f64]) -> Result<SoftDecision> {
    let n = y.len();
    if n > MAX_BRUTE_FORCE_LEN {
        return Err(Error::BlockTooLong { len: n, max: MAX_BRUTE_FORCE_LEN });
    }
    if n == 0 {
        return Err(Error::BlockTooShort { len: 0, min: 1 });
    }
    let taps = &trellis.target().taps;
    let l = taps.len();
    let mut best_minus = vec![f64::INFINITY; n];
    let mut best_plus = vec![f64::INFINITY; n];
    let mut best_total = (f64::INFINITY, 0usize);
    let mut bits = vec![0i8; n];
    let mut bm = vec![0.0; n];
    let mut suffix = vec![0.0; n + 1];
    for code in 0..(1usize << n) {
        for (k, b) in bits.iter_mut().enumerate() {
            *b = bit_value(code >> k & 1 == 1);
        }
        for k in 0..n {
            let mut expected = 0.0;
            for (m, g) in taps.iter().enumerate().take(l) {
                let u = if k >= m { bits[k - m] } else { -1 };
                expected += g * f64::from(u);
            }
            bm[k] = branch_metric(y[k], expected);
        }
        suffix[n] = 0.0;
        for k in (0..n).rev() {
            suffix[k] = bm[k] + suffix[k + 1];
        }
        let mut prefix = 0.0;
        for k in 0..n {
            prefix += bm[k];
            let total = prefix + suffix[k + 1];
            let slot = if bits[k] > 0 { &mut best_plus[k] } else { &mut best_minus[k] };
            if total < *slot {
                *slot = total;
            }
        }
        if prefix < best_total.0 {
            best_total = (prefix, code);
        }
    }
    let hard_bits = (0..n).map(|k| bit_value(best_total.1 >> k & 1 == 1)).collect();
    let llr = best_minus.iter().zip(&best_plus).map(|(m, p)| m - p).collect();
    Ok(SoftDecision { hard_bits, llr, paths: None })
}

/// Gradients of `J = Σ_k c_k · LLR_k` routed along the argmin paths.
#[derive(Debug, Clone, PartialEq)]
pub struct LlrGradients {
    /// `∂J/∂y_k` per sample.
    pub samples: Vec<f64>,
    /// `∂J/∂g_j` per target tap, through the branch outputs.
    pub taps: Vec<f64>,
}

/// Backpropagates upstream `∂J/∂LLR_k` through the min-sum recursions.
///
/// Each `LLR_k` is the difference of two path metrics, each a sum of branch
/// metrics along an argmin path; a branch on the `−1` path at stage `m`
/// contributes `+c_k · ∂BM/∂·`, one on the `+1` path `−c_k · ∂BM/∂·`. The
/// per-branch weights are accumulated through the survivor pointers in two
/// sweeps instead of tracing every path, so the cost is `O(n · states)`.
pub fn llr_backward(trellis: &Trellis, y: &[f64], decision: &SoftDecision, upstream: &[f64]) -> Result<LlrGradients> {
    let paths = decision.paths.as_ref().ok_or(Error::StaleBookkeeping)?;
    if paths.samples.len() != y.len() || paths.samples.iter().zip(y).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::StaleBookkeeping);
    }
    if upstream.len() != y.len() {
        return Err(Error::LengthMismatch("one upstream gradient per LLR".into()));
    }
    let ns = trellis.n_states;
    let nb = trellis.n_branches();
    let n = y.len();
    let mut weight = vec![0.0; n * nb];
    let mut wf = vec![0.0; (n + 1) * ns];
    let mut wb = vec![0.0; (n + 1) * ns];
    for (k, &c) in upstream.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        for (b, sign) in [(paths.best_minus[k] as usize, c), (paths.best_plus[k] as usize, -c)] {
            weight[k * nb + b] += sign;
            wf[k * ns + trellis.origin(b)] += sign;
            wb[(k + 1) * ns + trellis.next[b]] += sign;
        }
    }
    for k in (1..=n).rev() {
        for s in 0..ns {
            let w = wf[k * ns + s];
            if w != 0.0 {
                let b = paths.forward[k * ns + s] as usize;
                weight[(k - 1) * nb + b] += w;
                wf[(k - 1) * ns + trellis.origin(b)] += w;
            }
        }
    }
    for k in 1..n {
        for s in 0..ns {
            let w = wb[k * ns + s];
            if w != 0.0 {
                let b = paths.backward[k * ns + s] as usize;
                weight[k * nb + b] += w;
                wb[(k + 1) * ns + trellis.next[b]] += w;
            }
        }
    }
    let l = trellis.target_len();
    let mut dy = vec![0.0; n];
    let mut dtaps = vec![0.0; l];
    for k in 0..n {
        for b in 0..nb {
            let w = weight[k * nb + b];
            if w == 0.0 {
                continue;
            }
            let d = 2.0 * (y[k] - trellis.outputs[b]) * w;
            dy[k] += d;
            for (g, h) in dtaps.iter_mut().zip(trellis.branch_history(b)) {
                *g -= d * h;
            }
        }
    }
    Ok(LlrGradients { samples: dy, taps: dtaps })
}

/// Max-log LLRs recorded on a tape, with the target taps as tape variables.
///
/// Uses the same recursions, association order and tie rule as
/// [`maxlog_llr_from`], so values agree exactly; gradients come from the
/// generic reverse sweep and serve as an independent route to [`llr_backward`].
pub fn maxlog_llr_tape(tape: &mut Tape, trellis: &Trellis, y: &[Var], taps: &[Var], start: &Start) -> Result<Vec<Var>> {
    if taps.len() != trellis.target_len() {
        return Err(Error::LengthMismatch("one tape variable per target tap".into()));
    }
    if y.len() < trellis.target_len() || y.is_empty() {
        return Err(Error::BlockTooShort { len: y.len(), min: trellis.target_len().max(1) });
    }
    let ns = trellis.n_states;
    let nb = trellis.n_branches();
    let n = y.len();
    let expected: Vec<Var> = (0..nb).map(|b| tape.affine_const(taps, trellis.branch_history(b), None)).collect();
    let mut bms = Vec::with_capacity(n * nb);
    for &yk in y {
        for &e in &expected {
            let d = tape.sub(yk, e);
            bms.push(tape.square(d));
        }
    }
    let start_metrics = start.metrics(ns)?;
    // Impossible start states never win a min, so they stay plain constants.
    let mut alpha: Vec<Vec<Var>> = vec![start_metrics.iter().map(|&m| tape.leaf(m)).collect()];
    for k in 0..n {
        let prev = &alpha[k];
        let row: Vec<Var> = (0..ns)
            .map(|s| {
                let [b0, b1] = trellis.incoming[s];
                let m0 = tape.add(prev[trellis.origin(b0)], bms[k * nb + b0]);
                let m1 = tape.add(prev[trellis.origin(b1)], bms[k * nb + b1]);
                tape.min2(m0, m1)
            })
            .collect();
        alpha.push(row);
    }
    let zero = tape.leaf(0.0);
    let mut beta: Vec<Vec<Var>> = vec![vec![zero; ns]; n + 1];
    for k in (0..n).rev() {
        for s in 0..ns {
            let [b0, b1] = trellis.outgoing(s);
            let m0 = tape.add(bms[k * nb + b0], beta[k + 1][trellis.next[b0]]);
            let m1 = tape.add(bms[k * nb + b1], beta[k + 1][trellis.next[b1]]);
            beta[k][s] = tape.min2(m0, m1);
        }
    }
    let mut llr = Vec::with_capacity(n);
    for k in 0..n {
        let mut best: [Option<Var>; 2] = [None, None];
        for b in 0..nb {
            let head = tape.add(alpha[k][trellis.origin(b)], bms[k * nb + b]);
            let total = tape.add(head, beta[k + 1][trellis.next[b]]);
            best[b % 2] = Some(match best[b % 2] {
                None => total,
                Some(cur) => tape.min2(cur, total),
            });
        }
        llr.push(tape.sub(best[0].unwrap(), best[1].unwrap()));
    }
    Ok(llr)
}

/// Writes forward and backward state metrics as CSV (`stage,state,alpha,beta`).
pub fn dump_state_metrics<W: Write>(trellis: &Trellis, y: &[f64], start: &Start, mut out: W) -> Result<()> {
    check_len(trellis, y)?;
    let ns = trellis.n_states;
    let bms = branch_metrics(trellis, y);
    let fwd = forward_pass(trellis, &bms, start)?;
    let (beta, _) = backward_pass(trellis, &bms);
    writeln!(out, "stage,state,alpha,beta")?;
    for k in 0..=y.len() {
        for s in 0..ns {
            writeln!(out, "{k},{s},{},{}", fwd.alpha[k * ns + s], beta[k * ns + s])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn target(taps: &[f64]) -> Trellis {
        build_trellis(&PrTarget::fixed(taps).unwrap()).unwrap()
    }

    fn noiseless(trellis: &Trellis, bits: &[i8]) -> Vec<f64> {
        let taps = &trellis.target().taps;
        (0..bits.len())
            .map(|k| {
                (0..taps.len())
                    .map(|m| taps[m] * f64::from(if k >= m { bits[k - m] } else { -1 }))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn state_counts_and_degree() {
        assert_eq!(target(&[4.0, 7.0, 1.0]).n_states(), 4);
        assert_eq!(target(&[1.0, 0.5, 0.1, -0.1, 0.03]).n_states(), 16);
        let t = target(&[1.0]);
        assert_eq!(t.n_states(), 1);
        assert_eq!((t.output(0), t.output(1)), (-1.0, 1.0));
        let t = target(&[1.0, 0.5, 0.1, -0.1, 0.03]);
        let mut indeg = vec![0; t.n_states()];
        for b in 0..t.n_branches() {
            indeg[t.next_state(b)] += 1;
        }
        assert!(indeg.iter().all(|&d| d == 2));
    }

    #[test]
    fn branch_metric_examples() {
        assert_eq!(branch_metric(1.5, 1.5), 0.0);
        assert_eq!(branch_metric(2.0, -1.0), 9.0);
    }

    #[test]
    fn noiseless_recovery() {
        let t = target(&[4.0, 7.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bits: Vec<i8> = (0..200).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let y = noiseless(&t, &bits);
        assert_eq!(viterbi_hard(&t, &y).unwrap(), bits);
        let soft = maxlog_llr(&t, &y).unwrap();
        for (l, b) in soft.llr.iter().zip(&bits) {
            assert_eq!(l.signum() as i8, *b);
        }
    }

    #[test]
    fn single_bit_identity_target() {
        let t = target(&[1.0]);
        for y in [-1.3, 0.2, 0.75] {
            let bf = brute_force_llr(&t, &[y]).unwrap();
            let ml = maxlog_llr(&t, &[y]).unwrap();
            assert!((bf.llr[0] - 4.0 * y).abs() < 1e-12);
            assert_eq!(ml.llr[0], bf.llr[0]);
            let g = llr_backward(&t, &[y], &ml, &[1.0]).unwrap();
            assert!((g.samples[0] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_homogeneity() {
        let t = target(&[4.0, 7.0, 1.0]);
        let scaled = target(&[12.0, 21.0, 3.0]);
        let y = [3.0, -2.5, 11.0, 0.5, -7.0, 4.0];
        let y3: Vec<f64> = y.iter().map(|v| 3.0 * v).collect();
        let a = maxlog_llr(&t, &y).unwrap();
        let b = maxlog_llr(&scaled, &y3).unwrap();
        for (x, z) in a.llr.iter().zip(&b.llr) {
            assert!((9.0 * x - z).abs() < 1e-9 * z.abs().max(1.0));
        }
    }

    #[test]
    fn negation_symmetry() {
        let t = target(&[1.0]);
        let y = [0.3, -0.8, 1.2, 0.05];
        let a = brute_force_llr(&t, &y).unwrap();
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let b = brute_force_llr(&t, &neg).unwrap();
        for (x, z) in a.llr.iter().zip(&b.llr) {
            assert!((x + z).abs() < 1e-12);
        }
    }

    #[test]
    fn tie_determinism() {
        let t = target(&[1.0, 1.0]);
        let y = [0.0; 6];
        let a = viterbi_hard(&t, &y).unwrap();
        assert_eq!(a, viterbi_hard(&t, &y).unwrap());
    }

    #[test]
    fn brute_force_rejects_long_blocks() {
        let t = target(&[1.0, 0.5]);
        assert!(matches!(brute_force_llr(&t, &[0.0; 17]), Err(Error::BlockTooLong { .. })));
        assert!(matches!(viterbi_hard(&target(&[4.0, 7.0, 1.0]), &[1.0, 2.0]), Err(Error::BlockTooShort { .. })));
    }

    #[test]
    fn stale_bookkeeping_detected() {
        let t = target(&[4.0, 7.0, 1.0]);
        let y = vec![1.0, -3.0, 5.0, 2.0];
        let soft = maxlog_llr(&t, &y).unwrap();
        let mut moved = y.clone();
        moved[2] += 1e-9;
        assert!(matches!(llr_backward(&t, &moved, &soft, &[1.0; 4]), Err(Error::StaleBookkeeping)));
        let zero = llr_backward(&t, &y, &soft, &[0.0; 4]).unwrap();
        assert!(zero.samples.iter().chain(&zero.taps).all(|&g| g == 0.0));
    }

    #[test]
    fn tape_route_matches_values_and_gradients() {
        let t = target(&[1.0, 0.6, -0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        for start in [Start::Known(0), Start::Free, Start::Metrics(vec![0.3, 0.0, 1.1, 2.0])] {
            let soft = maxlog_llr_from(&t, &y, &start).unwrap();
            let grads = llr_backward(&t, &y, &soft, &c).unwrap();
            let mut tape = Tape::new();
            let yv = tape.leaves(&y);
            let gv = tape.leaves(&t.target().taps);
            let llr = maxlog_llr_tape(&mut tape, &t, &yv, &gv, &start).unwrap();
            assert_eq!(tape.values(&llr), soft.llr);
            let seeds: Vec<(Var, f64)> = llr.iter().copied().zip(c.iter().copied()).collect();
            let g = tape.backward_seeded(&seeds);
            for (a, b) in g.wrt_all(&yv).iter().zip(&grads.samples) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
            for (a, b) in g.wrt_all(&gv).iter().zip(&grads.taps) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn translation_invariance_per_stage() {
        let t = target(&[1.0, 0.5, -0.25]);
        let y = [0.4, -1.2, 0.9, 0.1, -0.3, 0.7];
        let bms = branch_metrics(&t, &y);
        let base = maxlog_from_branch_metrics(&t, &bms, &Start::Known(0)).unwrap();
        let nb = t.n_branches();
        for stage in 0..y.len() {
            let mut shifted = bms.clone();
            shifted[stage * nb..(stage + 1) * nb].iter_mut().for_each(|m| *m += 3.25);
            let moved = maxlog_from_branch_metrics(&t, &shifted, &Start::Known(0)).unwrap();
            for (a, b) in moved.llr.iter().zip(&base.llr) {
                assert!((a - b).abs() < 1e-12, "stage {stage}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn warm_start_metrics_are_normalized() {
        let t = target(&[4.0, 7.0, 1.0]);
        let soft = maxlog_llr(&t, &[3.0, -2.0, 10.0, 11.0]).unwrap();
        let m = soft.final_metrics().unwrap();
        assert_eq!(m.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
    }

    #[test]
    fn state_metric_dump() {
        let t = target(&[1.0, 0.5]);
        let mut buf = Vec::new();
        dump_state_metrics(&t, &[0.2, -0.4, 1.0], &Start::Free, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 2);
        assert!(text.starts_with("stage,state,alpha,beta"));
    }
}
