//! Reverse-mode differentiation over a dynamic scalar tape.
//!
//! Nodes are appended in evaluation order, so a parent always has a smaller
//! index than its children and one reverse sweep visits every node once.
//! Each node stores its local partials with respect to its parents; n-ary
//! nodes (sums, affine maps) keep all their edges in one flat buffer.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Offset,
    Square,
    Tanh,
    Relu,
    Log,
    Sigmoid,
    Softplus,
    Min2,
    Sum,
    Affine,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    kind: OpKind,
    value: f64,
    edges_start: u32,
    edges_end: u32,
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    parent: u32,
    partial: f64,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    min2_choices: Vec<bool>,
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid that never overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(nodes),
            edges: Vec::with_capacity(edges),
            min2_choices: Vec::new(),
        }
    }

    /// Drops all nodes but keeps the allocations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.edges.clear();
        self.min2_choices.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.index()].value
    }

    pub fn values(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.value(v)).collect()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.index()].kind
    }

    /// Operand choices of every `min2` so far (`true` = second operand won).
    /// Two evaluations with equal choice vectors took the same smooth branch.
    pub fn min2_choices(&self) -> &[bool] {
        &self.min2_choices
    }

    fn push(&mut self, kind: OpKind, value: f64, edges: &[(Var, f64)]) -> Var {
        let start = self.edges.len() as u32;
        for &(p, partial) in edges {
            debug_assert!(p.index() < self.nodes.len(), "operand from another tape");
            self.edges.push(Edge { parent: p.0, partial });
        }
        self.nodes.push(Node { kind, value, edges_start: start, edges_end: self.edges.len() as u32 });
        Var(self.nodes.len() as u32 - 1)
    }

    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(OpKind::Leaf, value, &[])
    }

    pub fn leaves(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(OpKind::Add, v, &[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(OpKind::Sub, v, &[(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(OpKind::Mul, va * vb, &[(a, vb), (b, va)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(OpKind::Scale, v, &[(a, c)])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(OpKind::Offset, v, &[(a, 1.0)])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(OpKind::Square, x * x, &[(a, 2.0 * x)])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).tanh();
        self.push(OpKind::Tanh, t, &[(a, 1.0 - t * t)])
    }

    /// Rectifier; the subgradient at zero is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        if x > 0.0 {
            self.push(OpKind::Relu, x, &[(a, 1.0)])
        } else {
            self.push(OpKind::Relu, 0.0, &[(a, 0.0)])
        }
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !(x > 0.0) {
            return Err(Error::LogDomain(x));
        }
        Ok(self.push(OpKind::Log, x.ln(), &[(a, 1.0 / x)]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = sigmoid(self.value(a));
        self.push(OpKind::Sigmoid, s, &[(a, s * (1.0 - s))])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(OpKind::Softplus, softplus(x), &[(a, sigmoid(x))])
    }

    /// Smaller operand; the gradient flows only to the winner, `a` on ties.
    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let second = vb < va;
        self.min2_choices.push(second);
        if second {
            self.push(OpKind::Min2, vb, &[(b, 1.0)])
        } else {
            self.push(OpKind::Min2, va, &[(a, 1.0)])
        }
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let v = terms.iter().map(|&t| self.value(t)).sum();
        let edges: Vec<(Var, f64)> = terms.iter().map(|&t| (t, 1.0)).collect();
        self.push(OpKind::Sum, v, &edges)
    }

    /// `Σ wᵢ·xᵢ + b` with constant inputs `x`.
    pub fn affine_const(&mut self, weights: &[Var], inputs: &[f64], bias: Option<Var>) -> Var {
        debug_assert_eq!(weights.len(), inputs.len());
        let start = self.edges.len() as u32;
        let mut v = 0.0;
        for (&w, &x) in weights.iter().zip(inputs) {
            v += self.value(w) * x;
            self.edges.push(Edge { parent: w.0, partial: x });
        }
        if let Some(b) = bias {
            v += self.value(b);
            self.edges.push(Edge { parent: b.0, partial: 1.0 });
        }
        self.nodes.push(Node { kind: OpKind::Affine, value: v, edges_start: start, edges_end: self.edges.len() as u32 });
        Var(self.nodes.len() as u32 - 1)
    }

    /// `Σ wᵢ·xᵢ + b` with inputs on the tape.
    pub fn affine(&mut self, weights: &[Var], inputs: &[Var], bias: Option<Var>) -> Var {
        debug_assert_eq!(weights.len(), inputs.len());
        let start = self.edges.len() as u32;
        let mut v = 0.0;
        for (&w, &x) in weights.iter().zip(inputs) {
            let (vw, vx) = (self.value(w), self.value(x));
            v += vw * vx;
            self.edges.push(Edge { parent: w.0, partial: vx });
            self.edges.push(Edge { parent: x.0, partial: vw });
        }
        if let Some(b) = bias {
            v += self.value(b);
            self.edges.push(Edge { parent: b.0, partial: 1.0 });
        }
        self.nodes.push(Node { kind: OpKind::Affine, value: v, edges_start: start, edges_end: self.edges.len() as u32 });
        Var(self.nodes.len() as u32 - 1)
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_seeded(&[(root, 1.0)])
    }

    /// Reverse sweep starting from externally supplied adjoints, e.g. `dJ/dy`
    /// computed outside the tape.
    pub fn backward_seeded(&self, seeds: &[(Var, f64)]) -> Gradients {
        let mut adjoints = vec![0.0; self.nodes.len()];
        let mut top = 0;
        for &(v, a) in seeds {
            adjoints[v.index()] += a;
            top = top.max(v.index() + 1);
        }
        for i in (0..top).rev() {
            let adj = adjoints[i];
            if adj == 0.0 {
                continue;
            }
            let node = self.nodes[i];
            for e in &self.edges[node.edges_start as usize..node.edges_end as usize] {
                adjoints[e.parent as usize] += adj * e.partial;
            }
        }
        Gradients { adjoints }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> f64 {
        self.adjoints[v.index()]
    }

    pub fn wrt_all(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }
}

/// A named group of learnables inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat store of learnables with per-entry freeze flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    values: Vec<f64>,
    frozen: Vec<bool>,
    groups: Vec<ParamGroup>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_group(&mut self, name: &str, values: &[f64]) -> usize {
        let offset = self.values.len();
        self.values.extend_from_slice(values);
        self.frozen.extend(std::iter::repeat(false).take(values.len()));
        self.groups.push(ParamGroup { name: name.to_string(), offset, len: values.len() });
        self.groups.len() - 1
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn slice(&self, group: usize) -> &[f64] {
        let g = &self.groups[group];
        &self.values[g.offset..g.offset + g.len]
    }

    pub fn slice_mut(&mut self, group: usize) -> &mut [f64] {
        let g = &self.groups[group];
        &mut self.values[g.offset..g.offset + g.len]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn set_frozen(&mut self, index: usize, frozen: bool) {
        self.frozen[index] = frozen;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of entries an optimizer may change.
    pub fn n_free(&self) -> usize {
        self.frozen.iter().filter(|&&f| !f).count()
    }

    /// Registers every value as a tape leaf, in storage order.
    pub fn to_tape(&self, tape: &mut Tape) -> Vec<Var> {
        tape.leaves(&self.values)
    }
}

/// Central differences `(f(p + h·eᵢ) − f(p − h·eᵢ)) / 2h` for every entry.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences that also compare a piecewise-smoothness signature
/// (e.g. the argmin choices) between `p + h` and `p − h`. Entries whose
/// signature changes straddle a kink and are reported as `None`.
pub fn finite_diff_checked<F, S>(mut f: F, params: &[f64], h: f64) -> Vec<Option<f64>>
where
    F: FnMut(&[f64]) -> (f64, S),
    S: PartialEq,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut p = params.to_vec();
    let (_, base) = f(&p);
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let (up, sig_up) = f(&p);
            p[i] = orig - h;
            let (down, sig_down) = f(&p);
            p[i] = orig;
            (sig_up == base && sig_down == base).then(|| (up - down) / (2.0 * h))
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementary_derivatives() {
        let mut t = Tape::new();
        let x = t.leaf(3.0);
        let y = t.square(x);
        assert_eq!(t.backward(y).wrt(x), 6.0);

        let z = t.leaf(0.0);
        let th = t.tanh(z);
        assert_eq!(t.backward(th).wrt(z), 1.0);

        let a = t.leaf(2.0);
        let b = t.leaf(5.0);
        let m = t.min2(a, b);
        let g = t.backward(m);
        assert_eq!((t.value(m), g.wrt(a), g.wrt(b)), (2.0, 1.0, 0.0));
    }

    #[test]
    fn min2_tie_goes_to_first_operand() {
        let mut t = Tape::new();
        let a = t.leaf(1.0);
        let b = t.leaf(1.0);
        let m = t.min2(a, b);
        let g = t.backward(m);
        assert_eq!((g.wrt(a), g.wrt(b)), (1.0, 0.0));
        assert_eq!(t.min2_choices(), &[false]);
    }

    #[test]
    fn log_domain_error() {
        let mut t = Tape::new();
        let z = t.leaf(0.0);
        assert!(matches!(t.log(z), Err(Error::LogDomain(_))));
        let n = t.leaf(-2.0);
        assert!(t.log(n).is_err());
    }

    #[test]
    fn relu_and_sigmoid() {
        let mut t = Tape::new();
        let a = t.leaf(-1.0);
        let r = t.relu(a);
        assert_eq!(t.value(r), 0.0);
        assert_eq!(t.backward(r).wrt(a), 0.0);
        let s = t.sigmoid(a);
        let sv = 1.0 / (1.0 + 1f64.exp());
        assert!((t.value(s) - sv).abs() < 1e-15);
        assert!((t.backward(s).wrt(a) - sv * (1.0 - sv)).abs() < 1e-15);
    }

    #[test]
    fn linear_form_adjoints() {
        let mut t = Tape::new();
        let x = [0.5, -1.5, 2.0];
        let w = t.leaves(&[1.0, 2.0, 3.0]);
        let xs = t.leaves(&x);
        let prods: Vec<Var> = w.iter().zip(&xs).map(|(&a, &b)| t.mul(a, b)).collect();
        let root = t.sum(&prods);
        assert_eq!(t.backward(root).wrt_all(&w), x.to_vec());

        let mut t = Tape::new();
        let w = t.leaves(&[1.0, 2.0, 3.0]);
        let root = t.affine_const(&w, &x, None);
        assert_eq!(t.backward(root).wrt_all(&w), x.to_vec());
    }

    #[test]
    fn tanh_chain_at_origin() {
        let mut t = Tape::new();
        let w = t.leaf(0.0);
        let x = t.leaf(1.7);
        let wx = t.mul(w, x);
        let y = t.tanh(wx);
        assert_eq!(t.backward(y).wrt(w), 1.7);
    }

    #[test]
    fn finite_diff_quadratic() {
        let g = finite_diff(|p| p[0] * p[0], &[1.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_flags_min_kink() {
        let f = |p: &[f64]| {
            let mut t = Tape::new();
            let a = t.leaf(p[0]);
            let b = t.leaf(p[1]);
            let m = t.min2(a, b);
            (t.value(m), t.min2_choices().to_vec())
        };
        let at_tie = finite_diff_checked(f, &[1.0, 1.0], 1e-5);
        assert_eq!(at_tie, vec![None, None]);
        let off_tie = finite_diff_checked(f, &[1.0, 2.0], 1e-5);
        assert!((off_tie[0].unwrap() - 1.0).abs() < 1e-9);
        assert!(off_tie[1].unwrap().abs() < 1e-12);
    }

    #[test]
    fn min2_subgradient_bracketed_by_one_sided_differences() {
        let f = |x: f64| x.min(1.0);
        let h = 1e-6;
        let right = (f(1.0 + h) - f(1.0)) / h;
        let left = (f(1.0) - f(1.0 - h)) / h;
        let mut t = Tape::new();
        let a = t.leaf(1.0);
        let b = t.leaf(1.0);
        let m = t.min2(a, b);
        let g = t.backward(m).wrt(a);
        assert!(right.min(left) - 1e-9 <= g && g <= right.max(left) + 1e-9);
    }

    #[test]
    fn seeded_backward_accumulates() {
        let mut t = Tape::new();
        let w = t.leaf(2.0);
        let y1 = t.scale(w, 3.0);
        let y2 = t.square(w);
        let g = t.backward_seeded(&[(y1, 0.5), (y2, 2.0)]);
        assert_eq!(g.wrt(w), 0.5 * 3.0 + 2.0 * 4.0);
    }

    #[test]
    fn param_set_groups_and_freeze() {
        let mut p = ParamSet::new();
        let a = p.push_group("w", &[1.0, 2.0]);
        let b = p.push_group("target", &[1.0, 0.5, 0.2]);
        p.set_frozen(p.group("target").unwrap().offset, true);
        assert_eq!(p.slice(a), &[1.0, 2.0]);
        assert_eq!(p.slice(b), &[1.0, 0.5, 0.2]);
        assert_eq!(p.n_free(), 4);
        assert_eq!(p.frozen(), &[false, false, true, false, false]);
    }
}
