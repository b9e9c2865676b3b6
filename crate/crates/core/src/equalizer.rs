//! Linear and MLP equalizers and the partial-response reference.
//!
//! A linear equalizer is the zero-hidden-layer case `[2·D_in, 1]`: its
//! inter-layer weights are the FIR taps over both readers' windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{ParamSet, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn apply_tape(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(v),
            Activation::Relu => tape.relu(v),
        }
    }
}

/// Network shape `[2·D_in, H_1, …, H_l, 1]`, hidden activation shared by all hidden layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self { layer_sizes, activation };
        spec.validate()?;
        Ok(spec)
    }

    /// Linear equalizer over `d_in` samples per reader.
    pub fn linear(d_in: usize) -> Self {
        Self { layer_sizes: vec![2 * d_in, 1], activation: Activation::Tanh }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = &self.layer_sizes;
        if sizes.len() < 2 || sizes.len() > 4 {
            return Err(Error::InvalidParameter(format!("expected 0 to 2 hidden layers, got {sizes:?}")));
        }
        if sizes[0] == 0 || sizes[0] % 2 != 0 {
            return Err(Error::InvalidParameter("input size must be 2·D_in".into()));
        }
        if *sizes.last().unwrap() != 1 {
            return Err(Error::InvalidParameter("output layer must have one node".into()));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidParameter("layers must be non-empty".into()));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.layer_sizes[0] / 2
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.layer_sizes.len() - 2
    }

    pub fn is_linear(&self) -> bool {
        self.layer_sizes.len() == 2
    }

    /// Weights plus biases over all layers.
    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Text form such as `22-6-1`.
    pub fn label(&self) -> String {
        self.layer_sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-")
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

/// Learnables of an MLP; weights are stored row-major `[out][in]`, layer by layer,
/// each layer's weights followed by its biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl MlpParams {
    fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.spec
            .layer_sizes
            .windows(2)
            .map(|w| {
                let l = LayerLayout { inputs: w[0], outputs: w[1], weights: offset, bias: offset + w[0] * w[1] };
                offset += w[0] * w[1] + w[1];
                l
            })
            .collect()
    }

    pub fn from_values(spec: MlpSpec, values: &[f64]) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.n_params() {
            return Err(Error::LengthMismatch(format!(
                "{} values for a network with {} learnables",
                values.len(),
                spec.n_params()
            )));
        }
        let mut params = ParamSet::new();
        let mut offset = 0;
        for (i, w) in spec.layer_sizes.windows(2).enumerate() {
            let nw = w[0] * w[1];
            params.push_group(&format!("layer{i}.weight"), &values[offset..offset + nw]);
            params.push_group(&format!("layer{i}.bias"), &values[offset + nw..offset + nw + w[1]]);
            offset += nw + w[1];
        }
        Ok(Self { spec, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Equalizer output for one window, without recording anything.
    pub fn predict(&self, window: &[f64]) -> f64 {
        let values = self.params.values();
        let layout = self.layout();
        let last = layout.len() - 1;
        let mut current: Vec<f64> = window.to_vec();
        for (li, l) in layout.iter().enumerate() {
            let mut next = Vec::with_capacity(l.outputs);
            for j in 0..l.outputs {
                let row = &values[l.weights + j * l.inputs..l.weights + (j + 1) * l.inputs];
                let z = row.iter().zip(&current).map(|(w, x)| w * x).sum::<f64>() + values[l.bias + j];
                next.push(if li == last { z } else { self.spec.activation.apply(z) });
            }
            current = next;
        }
        current[0]
    }

    /// Hidden-layer outputs for one window (empty for a linear equalizer).
    /// Computes `y`, then adds `dy · ∂y/∂θ` into `grad` (flat parameter layout)
    /// where `dy = seed(y)`, and returns `y`. Hand-written reverse pass; the
    /// tape route in [`MlpParams::forward`] computes the same quantity.
    pub fn accumulate_gradient(&self, window: &[f64], grad: &mut [f64], seed: impl FnOnce(f64) -> f64) -> f64 {
        let values = self.params.values();
        let layout = self.layout();
        let last = layout.len() - 1;
        let mut acts: Vec<Vec<f64>> = vec![window.to_vec()];
        for (li, l) in layout.iter().enumerate() {
            let input = &acts[li];
            let next: Vec<f64> = (0..l.outputs)
                .map(|j| {
                    let row = &values[l.weights + j * l.inputs..l.weights + (j + 1) * l.inputs];
                    let z = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + values[l.bias + j];
                    if li == last {
                        z
                    } else {
                        self.spec.activation.apply(z)
                    }
                })
                .collect();
            acts.push(next);
        }
        let y = acts[layout.len()][0];
        let dy = seed(y);
        if dy == 0.0 {
            return y;
        }
        let mut delta = vec![dy];
        for (li, l) in layout.iter().enumerate().rev() {
            let input = &acts[li];
            for (j, &d) in delta.iter().enumerate() {
                grad[l.bias + j] += d;
                let row = &mut grad[l.weights + j * l.inputs..l.weights + (j + 1) * l.inputs];
                row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
            }
            if li > 0 {
                delta = (0..l.inputs)
                    .map(|i| {
                        let back: f64 = delta.iter().enumerate().map(|(j, d)| d * values[l.weights + j * l.inputs + i]).sum();
                        back * self.spec.activation.slope_from_output(input[i])
                    })
                    .collect();
            }
        }
        y
    }

    pub fn hidden_outputs(&self, window: &[f64]) -> Vec<Vec<f64>> {
        let values = self.params.values();
        let layout = self.layout();
        let mut current: Vec<f64> = window.to_vec();
        let mut out = Vec::new();
        for l in &layout[..layout.len() - 1] {
            current = (0..l.outputs)
                .map(|j| {
                    let row = &values[l.weights + j * l.inputs..l.weights + (j + 1) * l.inputs];
                    let z = row.iter().zip(&current).map(|(w, x)| w * x).sum::<f64>() + values[l.bias + j];
                    self.spec.activation.apply(z)
                })
                .collect();
            out.push(current.clone());
        }
        out
    }

    /// Records the forward pass for one window; `leaves` come from
    /// [`ParamSet::to_tape`] on `self.params`.
    pub fn forward(&self, leaves: &[Var], window: &[f64], tape: &mut Tape) -> Var {
        debug_assert_eq!(window.len(), self.spec.layer_sizes[0]);
        let layout = self.layout();
        let last = layout.len() - 1;
        let mut current: Vec<Var> = Vec::new();
        for (li, l) in layout.iter().enumerate() {
            let mut next = Vec::with_capacity(l.outputs);
            for j in 0..l.outputs {
                let w = &leaves[l.weights + j * l.inputs..l.weights + (j + 1) * l.inputs];
                let b = Some(leaves[l.bias + j]);
                let z = if li == 0 { tape.affine_const(w, window, b) } else { tape.affine(w, &current, b) };
                next.push(if li == last { z } else { self.spec.activation.apply_tape(tape, z) });
            }
            current = next;
        }
        current[0]
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_mlp(spec: &MlpSpec, seed: u64) -> Result<MlpParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.n_params());
    for w in spec.layer_sizes.windows(2) {
        let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
        values.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
        values.extend(std::iter::repeat(0.0).take(w[1]));
    }
    MlpParams::from_values(spec.clone(), &values)
}

/// Partial-response target `g_0 … g_{L−1}`; tap 0 multiplies the current bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrTarget {
    pub taps: Vec<f64>,
    pub monic: bool,
}

impl PrTarget {
    pub fn fixed(taps: &[f64]) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidParameter("target needs at least one tap".into()));
        }
        Ok(Self { taps: taps.to_vec(), monic: false })
    }

    /// Monic target `[1, 0, …, 0]` of length `len`.
    pub fn monic(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidParameter("target needs at least one tap".into()));
        }
        let mut taps = vec![0.0; len];
        taps[0] = 1.0;
        Ok(Self { taps, monic: true })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Pins `g_0 = 1` when the monic flag is set.
    pub fn enforce_monic(&mut self) {
        if self.monic {
            self.taps[0] = 1.0;
        }
    }

    /// `Σ_m g_m · u_{k−m}` from explicit bits.
    pub fn output_from_history(&self, current_and_past: impl Iterator<Item = i8>) -> f64 {
        self.taps.iter().zip(current_and_past).map(|(g, u)| g * f64::from(u)).sum()
    }
}

/// Reference signal `ŷ_k = (u ∗ g)_k` for `k ≥ L − 1`.
pub fn reference_output(target: &PrTarget, bits: &[i8], k: usize) -> Result<f64> {
    let l = target.len();
    if k + 1 < l {
        return Err(Error::IndexUnderflow { index: k, needed: l - 1 });
    }
    if k >= bits.len() {
        return Err(Error::LengthMismatch(format!("index {k} past {} bits", bits.len())));
    }
    Ok(target.output_from_history((0..l).map(|m| bits[k - m])))
}

pub fn equalizer_error(y: f64, y_ref: f64) -> f64 {
    y - y_ref
}

/// Full linear convolution of `g` with `u` (length `|g| + |u| − 1`).
pub fn full_convolution(g: &[f64], u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.len() + u.len() - 1];
    for (i, gi) in g.iter().enumerate() {
        for (j, uj) in u.iter().enumerate() {
            out[i + j] += gi * uj;
        }
    }
    out
}

/// Parameter checkpoint as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub target_taps: Vec<f64>,
    pub monic: bool,
    pub adapt_target: bool,
    pub decision_delay: i64,
    pub steps: u64,
}

impl Checkpoint {
    pub fn mlp(&self) -> Result<MlpParams> {
        MlpParams::from_values(MlpSpec::new(self.layer_sizes.clone(), self.activation)?, &self.weights)
    }

    pub fn target(&self) -> PrTarget {
        PrTarget { taps: self.target_taps.clone(), monic: self.monic }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingData(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::finite_diff;

    fn spec(sizes: &[usize]) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), Activation::Tanh).unwrap()
    }

    #[test]
    fn learnable_counts() {
        assert_eq!(init_mlp(&spec(&[22, 1]), 0).unwrap().n_params(), 23);
        assert_eq!(init_mlp(&spec(&[22, 4, 1]), 0).unwrap().n_params(), 97);
        assert_eq!(init_mlp(&spec(&[22, 6, 1]), 0).unwrap().n_params(), 145);
        assert_eq!(spec(&[22, 6, 4, 1]).n_params(), 22 * 6 + 6 + 6 * 4 + 4 + 4 + 1);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = spec(&[22, 6, 1]);
        let a = init_mlp(&s, 5).unwrap();
        assert_eq!(a, init_mlp(&s, 5).unwrap());
        assert_ne!(a, init_mlp(&s, 6).unwrap());
        let bound = (6.0f64 / 28.0).sqrt();
        assert!(a.params.values()[..132].iter().all(|w| w.abs() <= bound));
        assert!(a.params.values()[132..138].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(MlpSpec::new(vec![22], Activation::Tanh).is_err());
        assert!(MlpSpec::new(vec![21, 1], Activation::Tanh).is_err());
        assert!(MlpSpec::new(vec![22, 2], Activation::Tanh).is_err());
        assert!(MlpSpec::new(vec![22, 3, 3, 3, 1], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let s = spec(&[6, 3, 1]);
        let p = MlpParams::from_values(s.clone(), &vec![0.0; s.n_params()]).unwrap();
        assert_eq!(p.predict(&[1.0, -2.0, 3.0, 0.5, 0.1, 9.0]), 0.0);
    }

    #[test]
    fn linear_equalizer_is_fir_filtering() {
        let s = MlpSpec::linear(3);
        let w = [0.3, -1.2, 0.7, 2.0, 0.05, -0.4];
        let mut values = w.to_vec();
        values.push(0.0);
        let p = MlpParams::from_values(s, &values).unwrap();
        let x = [1.5, -0.5, 0.25, 1.0, 2.0, -3.0];
        let dot: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((p.predict(&x) - dot).abs() < 1e-12);
        let mut tape = Tape::new();
        let leaves = p.params.to_tape(&mut tape);
        let y = p.forward(&leaves, &x, &mut tape);
        assert!((tape.value(y) - dot).abs() < 1e-12);
    }

    #[test]
    fn tanh_hidden_outputs_stay_open_interval() {
        let s = spec(&[4, 5, 1]);
        let values: Vec<f64> = (0..s.n_params()).map(|i| 30.0 * ((i as f64) * 1.3).sin()).collect();
        let p = MlpParams::from_values(s, &values).unwrap();
        let h = p.hidden_outputs(&[3.0, -2.0, 1.0, 5.0]);
        assert!(h[0].iter().all(|v| v.abs() <= 1.0));
        let r = MlpParams::from_values(
            MlpSpec::new(vec![4, 5, 1], Activation::Relu).unwrap(),
            p.params.values(),
        )
        .unwrap();
        assert!(r.hidden_outputs(&[3.0, -2.0, 1.0, 5.0])[0].iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn tape_forward_matches_predict_and_finite_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let s = MlpSpec::new(vec![6, 4, 3, 1], act).unwrap();
            let p = init_mlp(&s, 9).unwrap();
            let x = [0.4, -1.1, 0.9, 0.2, -0.3, 1.7];
            let mut tape = Tape::new();
            let leaves = p.params.to_tape(&mut tape);
            let y = p.forward(&leaves, &x, &mut tape);
            assert!((tape.value(y) - p.predict(&x)).abs() < 1e-12);
            let analytic = tape.backward(y).wrt_all(&leaves);
            let numeric = finite_diff(
                |v| MlpParams::from_values(s.clone(), v).unwrap().predict(&x),
                p.params.values(),
                1e-6,
            );
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-6, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn reference_output_examples() {
        let g = PrTarget::fixed(&[4.0, 7.0, 1.0]).unwrap();
        let u = [1, -1, 1];
        assert_eq!(full_convolution(&g.taps, &[1.0, -1.0, 1.0]), vec![4.0, 3.0, -2.0, 6.0, 1.0]);
        assert_eq!(reference_output(&g, &u, 2).unwrap(), -2.0);
        assert!(matches!(reference_output(&g, &u, 1), Err(Error::IndexUnderflow { .. })));

        let id = PrTarget::fixed(&[1.0]).unwrap();
        for k in 0..3 {
            assert_eq!(reference_output(&id, &u, k).unwrap(), f64::from(u[k]));
        }

        let adapted = PrTarget::fixed(&[1.0, 0.5367, 0.0781, -0.1535, 0.0347]).unwrap();
        let ones = [1i8; 8];
        assert!((reference_output(&adapted, &ones, 6).unwrap() - 1.4960).abs() < 1e-12);
    }

    #[test]
    fn error_signal() {
        assert_eq!(equalizer_error(0.7, 0.7), 0.0);
        assert_eq!(equalizer_error(1.0, -1.0), 2.0);
    }

    #[test]
    fn monic_pinning() {
        let mut t = PrTarget::monic(5).unwrap();
        t.taps = vec![0.97, 0.5, 0.1, -0.2, 0.03];
        t.enforce_monic();
        assert_eq!(t.taps, vec![1.0, 0.5, 0.1, -0.2, 0.03]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_mlp(&spec(&[22, 4, 1]), 1).unwrap();
        let ck = Checkpoint {
            layer_sizes: p.spec.layer_sizes.clone(),
            activation: p.spec.activation,
            weights: p.params.values().to_vec(),
            target_taps: vec![1.0, 0.5, 0.0, 0.0, 0.0],
            monic: true,
            adapt_target: true,
            decision_delay: 0,
            steps: 12,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.mlp().unwrap(), p);
    }

    #[test]
    fn hand_written_gradient_matches_tape() {
        for (sizes, act) in [
            (vec![6, 1], Activation::Tanh),
            (vec![6, 4, 1], Activation::Tanh),
            (vec![6, 4, 3, 1], Activation::Relu),
        ] {
            let spec = MlpSpec::new(sizes, act).unwrap();
            let mut mlp = init_mlp(&spec, 5).unwrap();
            let n = mlp.n_params();
            for (i, v) in mlp.params.values_mut().iter_mut().enumerate() {
                *v += 0.05 * ((i % 7) as f64 - 3.0);
            }
            let window = [0.3, -1.1, 0.8, 0.05, -0.4, 1.6];
            let mut grad = vec![0.0; n];
            let y = mlp.accumulate_gradient(&window, &mut grad, |_| 1.5);
            let mut tape = Tape::new();
            let leaves = mlp.params.to_tape(&mut tape);
            let out = mlp.forward(&leaves, &window, &mut tape);
            let g = tape.backward(out);
            assert!((tape.value(out) - y).abs() < 1e-14);
            for (a, b) in grad.iter().zip(g.wrt_all(&leaves)) {
                assert!((a - 1.5 * b).abs() < 1e-12, "{a} vs {}", 1.5 * b);
            }
        }
    }
}
