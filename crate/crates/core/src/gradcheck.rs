//! Central finite-difference check of analytic network gradients.
//!
//! The perturbed losses are evaluated in double-double arithmetic. In plain
//! `f64` the difference of two `O(1)` losses carries roundoff near
//! `1e-16 / FD_STEP`, which swamps parameters whose gradient is below about
//! `1e-6`; with the extra precision the only remaining error is truncation.
//! A parameter perturbation only touches one unit of its layer, so each probe
//! restarts from the cached unperturbed activations at that unit.

use crate::error::{Error, Result};
use crate::nn::{Activation, Network, NetworkParams};
use crate::tensor::RealBuffer;

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-5;

/// A scalar, differentiable function of a network's output.
pub trait ScalarLoss {
    fn value(&self, output: &RealBuffer) -> f64;
    fn gradient(&self, output: &RealBuffer) -> RealBuffer;

    /// `value(plus) - value(minus)`, where `delta = plus - minus` is known to
    /// more accuracy than the difference of the two slices. Override when the
    /// loss allows a cancellation-free form.
    fn difference(&self, plus: &RealBuffer, minus: &RealBuffer, _delta: &[f64]) -> f64 {
        self.value(plus) - self.value(minus)
    }
}

/// `sum (output - target)^2`.
#[derive(Debug, Clone)]
pub struct SquaredError {
    pub target: RealBuffer,
}

impl ScalarLoss for SquaredError {
    fn value(&self, output: &RealBuffer) -> f64 {
        output
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(y, t)| (y - t) * (y - t))
            .sum()
    }

    fn gradient(&self, output: &RealBuffer) -> RealBuffer {
        let g = output
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(y, t)| 2.0 * (y - t))
            .collect();
        RealBuffer::new(output.shape().to_vec(), g).expect("shape copied from output")
    }

    fn difference(&self, plus: &RealBuffer, minus: &RealBuffer, delta: &[f64]) -> f64 {
        // (p - t)^2 - (m - t)^2 = (p - m)(p + m - 2t)
        plus.data()
            .iter()
            .zip(minus.data())
            .zip(delta)
            .zip(self.target.data())
            .map(|(((p, m), d), t)| d * (p + m - 2.0 * t))
            .sum()
    }
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

fn split(a: f64) -> (f64, f64) {
    let t = 134_217_729.0 * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let ((ah, al), (bh, bl)) = (split(a), split(b));
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl Dd {
    fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }

    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    fn scale(self, b: f64) -> Dd {
        let (p, e) = two_prod(self.hi, b);
        quick_two_sum(p, e + self.lo * b)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn is_positive(self) -> bool {
        self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0)
    }
}

fn hidden_activation(a: Activation, z: Dd) -> Dd {
    match a {
        Activation::Relu if !z.is_positive() => Dd::default(),
        _ => z,
    }
}

/// `sigmoid(a) - sigmoid(b)` without cancellation, using `a - b` in extended precision.
fn sigmoid_difference(a: f64, b: f64, a_minus_b: f64) -> f64 {
    let (ea, eb) = ((-a).exp(), (-b).exp());
    // e^-b - e^-a = e^-a * expm1(a - b)
    ea * a_minus_b.exp_m1() / ((1.0 + ea) * (1.0 + eb))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Pre-activations and activations of every layer for one input row.
struct RowTrace {
    /// `acts[k]` is the input of layer `k`; `acts[L]` is unused for the last layer.
    acts: Vec<Vec<Dd>>,
    pre: Vec<Vec<Dd>>,
}

fn dd_layer_pre(params: &NetworkParams, k: usize, input: &[Dd]) -> Vec<Dd> {
    let layer = &params.layers()[k];
    let n_in = layer.in_dim();
    let w = layer.weight.data();
    layer
        .bias
        .data()
        .iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            row.iter().zip(input).fold(Dd::from(b), |acc, (&wi, &x)| acc.add(x.scale(wi)))
        })
        .collect()
}

fn dd_forward_from(params: &NetworkParams, start: usize, first_pre: Vec<Dd>) -> Vec<Dd> {
    let layers = params.layers();
    let mut pre = first_pre;
    for k in start + 1..layers.len() {
        let act: Vec<Dd> = pre.iter().map(|&z| hidden_activation(layers[k - 1].activation, z)).collect();
        pre = dd_layer_pre(params, k, &act);
    }
    pre
}

fn trace_row(params: &NetworkParams, row: &[f64]) -> RowTrace {
    let layers = params.layers();
    let mut acts = vec![row.iter().map(|&v| Dd::from(v)).collect::<Vec<_>>()];
    let mut pre = Vec::with_capacity(layers.len());
    for (k, layer) in layers.iter().enumerate() {
        let z = dd_layer_pre(params, k, &acts[k]);
        acts.push(z.iter().map(|&v| hidden_activation(layer.activation, v)).collect());
        pre.push(z);
    }
    RowTrace { acts, pre }
}

/// Final-layer pre-activations of one row after adding `delta` to parameter
/// `(k, o, i)`; `i == None` addresses the bias of unit `o`.
fn probe_row(params: &NetworkParams, t: &RowTrace, k: usize, o: usize, i: Option<usize>, delta: f64) -> Vec<Dd> {
    let shift = match i {
        Some(i) => t.acts[k][i].scale(delta),
        None => Dd::from(delta),
    };
    let mut pre_k = t.pre[k].clone();
    pre_k[o] = pre_k[o].add(shift);
    let layers = params.layers();
    if k + 1 == layers.len() {
        return pre_k;
    }
    // Only unit `o` of layer k changed; update the next layer's pre-activations by its column.
    let act = layers[k].activation;
    let change = hidden_activation(act, pre_k[o]).sub(hidden_activation(act, t.pre[k][o]));
    let next = &layers[k + 1];
    let w = next.weight.data();
    let pre_next: Vec<Dd> = t.pre[k + 1]
        .iter()
        .enumerate()
        .map(|(r, &z)| z.add(change.scale(w[r * next.in_dim() + o])))
        .collect();
    dd_forward_from(params, k + 1, pre_next)
}

/// Maximum over all parameters of `|analytic - fd| / (|analytic| + 1e-12)`.
pub fn finite_diff_check(params: &NetworkParams, input: &RealBuffer, loss: &dyn ScalarLoss) -> Result<f64> {
    if !params.is_finite() {
        return Err(Error::NonFinite("network parameters".into()));
    }
    input.ensure_finite("gradient-check input")?;

    let mut net = Network::new(params.clone());
    let out = net.forward(input)?;
    let analytic = net.backward(&loss.gradient(&out))?.flat_values();

    let rows: Vec<RowTrace> = (0..input.rows()).map(|r| trace_row(params, input.row(r))).collect();
    let last_act = params.layers().last().expect("non-empty network").activation;
    let out_dim = params.output_dim();
    let shape = out.shape().to_vec();

    let mut worst: f64 = 0.0;
    let mut index = 0;
    for (k, layer) in params.layers().iter().enumerate() {
        let n_in = layer.in_dim();
        let weights = (0..layer.weight.len()).map(|j| (j / n_in, Some(j % n_in)));
        let biases = (0..layer.bias.len()).map(|o| (o, None));
        for (o, i) in weights.chain(biases) {
            let (mut plus, mut minus, mut delta) = (Vec::new(), Vec::new(), Vec::new());
            for t in &rows {
                let zp = probe_row(params, t, k, o, i, FD_STEP);
                let zm = probe_row(params, t, k, o, i, -FD_STEP);
                for (p, m) in zp.iter().zip(&zm) {
                    let dz = p.sub(*m).to_f64();
                    let (pv, mv) = (p.to_f64(), m.to_f64());
                    match last_act {
                        Activation::Sigmoid => {
                            plus.push(sigmoid(pv));
                            minus.push(sigmoid(mv));
                            delta.push(sigmoid_difference(pv, mv, dz));
                        }
                        Activation::Relu => {
                            plus.push(pv.max(0.0));
                            minus.push(mv.max(0.0));
                            let (rp, rm) = (hidden_activation(last_act, *p), hidden_activation(last_act, *m));
                            delta.push(rp.sub(rm).to_f64());
                        }
                        Activation::Identity => {
                            plus.push(pv);
                            minus.push(mv);
                            delta.push(dz);
                        }
                    }
                }
            }
            debug_assert_eq!(plus.len(), rows.len() * out_dim);
            let plus = RealBuffer::new(shape.clone(), plus)?;
            let minus = RealBuffer::new(shape.clone(), minus)?;
            let numeric = loss.difference(&plus, &minus, &delta) / (2.0 * FD_STEP);
            let a = analytic[index];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-12));
            index += 1;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenseLayer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_net_squared_error_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = NetworkParams::mlp(3, &[], 2, Activation::Identity, &mut rng).unwrap();
        let input = RealBuffer::vector(vec![0.5, -1.25, 2.0]).unwrap();
        let loss = SquaredError {
            target: RealBuffer::vector(vec![0.3, -0.4]).unwrap(),
        };
        let err = finite_diff_check(&params, &input, &loss).unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn nan_weight_is_rejected() {
        let params = NetworkParams::new(vec![DenseLayer {
            weight: RealBuffer::matrix(1, 2, vec![f64::NAN, 1.0]).unwrap(),
            bias: RealBuffer::vector(vec![0.0]).unwrap(),
            activation: Activation::Identity,
        }])
        .unwrap();
        let input = RealBuffer::vector(vec![1.0, 1.0]).unwrap();
        let loss = SquaredError {
            target: RealBuffer::vector(vec![0.0]).unwrap(),
        };
        assert!(matches!(
            finite_diff_check(&params, &input, &loss),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn double_double_keeps_low_order_bits() {
        let a = Dd::from(1.0).add(Dd::from(1e-20));
        assert_eq!(a.hi, 1.0);
        assert!((a.lo - 1e-20).abs() < 1e-36);
        assert!((a.sub(Dd::from(1.0)).to_f64() - 1e-20).abs() < 1e-36);
        let p = Dd::from(1.0 + f64::EPSILON).scale(1.0 + f64::EPSILON);
        assert_eq!(p.lo, f64::EPSILON * f64::EPSILON);
    }

    #[test]
    fn sigmoid_difference_matches_direct_form() {
        let (a, b) = (0.3, -0.2);
        assert!((sigmoid_difference(a, b, a - b) - (sigmoid(a) - sigmoid(b))).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Skewed(SquaredError);
        impl ScalarLoss for Skewed {
            fn value(&self, y: &RealBuffer) -> f64 {
                self.0.value(y)
            }
            fn gradient(&self, y: &RealBuffer) -> RealBuffer {
                let mut g = self.0.gradient(y);
                g.data_mut()[0] *= 1.01;
                g
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = NetworkParams::mlp(2, &[4], 1, Activation::Identity, &mut rng).unwrap();
        let input = RealBuffer::vector(vec![0.7, -0.3]).unwrap();
        let loss = Skewed(SquaredError {
            target: RealBuffer::vector(vec![2.0]).unwrap(),
        });
        assert!(finite_diff_check(&params, &input, &loss).unwrap() > 1e-3);
    }
}
