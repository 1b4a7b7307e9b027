//! LSQ-style pseudo-quantization with learned steps.

use crate::error::{Error, Result};
use crate::graph::{Graph, QuantParams, Var};
use crate::params::{Bindings, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bit-width that disables quantization (Q becomes the identity).
pub const DISABLED_BITS: u32 = 32;

/// Number of MinError step candidates.
pub const GRID_SIZE: usize = 128;

/// Step assigned to channels whose values are all zero.
pub const STEP_FLOOR: f64 = 1e-8;

/// Integer code range of a quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantRange {
    pub bits: u32,
    pub signed: bool,
}

impl QuantRange {
    pub fn new(bits: u32, signed: bool) -> Result<Self> {
        let min_bits = if signed { 2 } else { 1 };
        if bits < min_bits || bits > 16 {
            return Err(Error::Invalid(format!(
                "{} quantizer needs {}..=16 bits, got {}",
                if signed { "signed" } else { "unsigned" },
                min_bits,
                bits
            )));
        }
        Ok(QuantRange { bits, signed })
    }

    pub fn qmin(&self) -> f64 {
        if self.signed {
            -(1i64 << (self.bits - 1)) as f64
        } else {
            0.0
        }
    }

    pub fn qmax(&self) -> f64 {
        if self.signed {
            ((1i64 << (self.bits - 1)) - 1) as f64
        } else {
            ((1i64 << self.bits) - 1) as f64
        }
    }

    /// LSQ gradient scale `1 / sqrt(N * qmax)` for a step shared by `n` values.
    pub fn grad_scale(&self, n: usize) -> f64 {
        1.0 / ((n.max(1) as f64) * self.qmax()).sqrt()
    }

    pub fn params(&self, n: usize) -> QuantParams {
        QuantParams {
            qmin: self.qmin(),
            qmax: self.qmax(),
            grad_scale: self.grad_scale(n),
        }
    }
}

/// One step for the whole tensor, or one per trailing-dimension channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerChannel,
}

/// `clamp(round(v / s), qmin, qmax) * s` with ties to even; the value-level
/// twin of [`Graph::quantize`].
pub fn fake_quantize<T: Scalar>(v: T, step: T, range: QuantRange) -> T {
    let (qmin, qmax) = (T::of(range.qmin()), T::of(range.qmax()));
    (v / step).round_even().max(qmin).min(qmax) * step
}

/// Apply [`fake_quantize`] to a tensor with per-tensor (`steps.len() == 1`)
/// or per-channel steps.
pub fn fake_quantize_tensor<T: Scalar>(v: &Tensor<T>, steps: &[T], range: QuantRange) -> Result<Tensor<T>> {
    let c = v.channels();
    if steps.len() != 1 && steps.len() != c {
        return Err(Error::Shape {
            op: "fake_quantize",
            detail: format!("{} steps for {} channels", steps.len(), c),
        });
    }
    let data = v
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| fake_quantize(x, steps[if steps.len() == 1 { 0 } else { i % c }], range))
        .collect();
    Tensor::new(v.shape().to_vec(), data)
}

/// Geometric MinError candidates. The grid has a constant ratio
/// `32^(1/127)` so it spans a factor of 32, and it is anchored so that
/// `max_abs / qmax` is exactly candidate 102: the span is roughly
/// `[max_abs / (16 qmax), 2 max_abs / qmax]`.
pub fn step_grid(max_abs: f64, qmax: f64) -> Vec<f64> {
    let base = max_abs / qmax;
    let anchor = 102i32;
    (0..GRID_SIZE as i32)
        .map(|k| {
            if k == anchor {
                base
            } else {
                base * 32f64.powf((k - anchor) as f64 / (GRID_SIZE - 1) as f64)
            }
        })
        .collect()
}

/// Squared reconstruction error of quantizing `values` with `step`.
pub fn reconstruction_error<T: Scalar>(values: &[T], step: T, range: QuantRange) -> f64 {
    values
        .iter()
        .map(|&v| {
            let d = (fake_quantize(v, step, range) - v).as_f64();
            d * d
        })
        .sum()
}

/// Result of MinError search for one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepChoice {
    pub step: f64,
    pub error: f64,
    /// The channel was all zeros and got [`STEP_FLOOR`].
    pub floored: bool,
}

/// Pick the grid candidate with the smallest reconstruction error; ties
/// keep the smaller step.
pub fn min_error_step<T: Scalar>(values: &[T], range: QuantRange) -> StepChoice {
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    if max_abs == 0.0 {
        return StepChoice {
            step: STEP_FLOOR,
            error: 0.0,
            floored: true,
        };
    }
    let mut best = StepChoice {
        step: f64::NAN,
        error: f64::INFINITY,
        floored: false,
    };
    for s in step_grid(max_abs, range.qmax()) {
        let err = reconstruction_error(values, T::of(s), range);
        if err < best.error {
            best = StepChoice {
                step: s,
                error: err,
                floored: false,
            };
        }
    }
    best
}

/// Split a tensor into per-channel value lists along the trailing axis.
fn channel_values<T: Scalar>(v: &Tensor<T>) -> Vec<Vec<T>> {
    let c = v.channels();
    let mut out = vec![Vec::with_capacity(v.numel() / c); c];
    for (i, &x) in v.data().iter().enumerate() {
        out[i % c].push(x);
    }
    out
}

/// A quantizer bound to a step parameter in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Quantizer {
    pub name: String,
    pub range: QuantRange,
    pub granularity: Granularity,
    pub step: ParamId,
    pub initialized: bool,
    /// Channels that were all-zero at initialization.
    pub flagged: Vec<usize>,
}

impl Quantizer {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        range: QuantRange,
        granularity: Granularity,
        channels: usize,
    ) -> Self {
        let n = match granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => channels,
        };
        let step = store.add(format!("{name}.step"), ParamKind::Step, Tensor::full(vec![n], T::one()));
        Quantizer {
            name: name.to_string(),
            range,
            granularity,
            step,
            initialized: false,
            flagged: Vec::new(),
        }
    }

    /// Number of values sharing one step for an input of this shape.
    pub fn values_per_step(&self, shape: &[usize]) -> usize {
        let n: usize = shape.iter().product();
        match self.granularity {
            Granularity::PerTensor => n,
            Granularity::PerChannel => n / shape.last().copied().unwrap_or(1).max(1),
        }
    }

    /// MinError initialization from a representative tensor.
    pub fn init_min_error<T: Scalar>(&mut self, store: &mut ParamStore<T>, v: &Tensor<T>) -> Result<Vec<StepChoice>> {
        let groups = match self.granularity {
            Granularity::PerTensor => vec![v.data().to_vec()],
            Granularity::PerChannel => channel_values(v),
        };
        if groups.len() != store.get(self.step).numel() {
            return Err(Error::Shape {
                op: "min_error_init",
                detail: format!("{} channels for {} steps", groups.len(), store.get(self.step).numel()),
            });
        }
        let choices: Vec<StepChoice> = groups.iter().map(|g| min_error_step(g, self.range)).collect();
        self.flagged = choices
            .iter()
            .enumerate()
            .filter(|(_, c)| c.floored)
            .map(|(i, _)| i)
            .collect();
        let steps = choices.iter().map(|c| T::of(c.step)).collect();
        store.set(self.step, Tensor::new(vec![choices.len()], steps)?)?;
        self.initialized = true;
        Ok(choices)
    }

    /// Insert `Q(v)` on the graph.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, binds: &Bindings, v: Var) -> Result<Var> {
        if !self.initialized {
            return Err(Error::Uninitialized(self.name.clone()));
        }
        let n = self.values_per_step(g.shape(v));
        g.quantize(v, binds.var(self.step), self.range.params(n))
    }
}

/// Smallest bit-width that stores every product of a `bits_a`-bit and a
/// `bits_b`-bit integer of the given signedness.
pub fn product_bits(bits_a: u32, bits_b: u32, signed: bool) -> u32 {
    assert!(bits_a >= 1 && bits_b >= 1 && bits_a <= 32 && bits_b <= 32);
    if signed {
        let range = |b: u32| (-(1i128 << (b - 1)), (1i128 << (b - 1)) - 1);
        let (a_lo, a_hi) = range(bits_a);
        let (b_lo, b_hi) = range(bits_b);
        let corners = [a_lo * b_lo, a_lo * b_hi, a_hi * b_lo, a_hi * b_hi];
        let (lo, hi) = (*corners.iter().min().unwrap(), *corners.iter().max().unwrap());
        (1..=128u32)
            .find(|&n| -(1i128 << (n - 1)) <= lo && hi < (1i128 << (n - 1)))
            .unwrap()
    } else {
        let max = ((1u128 << bits_a) - 1) * ((1u128 << bits_b) - 1);
        (128 - max.leading_zeros()).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u2() -> QuantRange {
        QuantRange::new(2, false).unwrap()
    }

    #[test]
    fn ranges() {
        let s4 = QuantRange::new(4, true).unwrap();
        assert_eq!((s4.qmin(), s4.qmax()), (-8.0, 7.0));
        assert_eq!((u2().qmin(), u2().qmax()), (0.0, 3.0));
        assert!(QuantRange::new(1, true).is_err());
        assert!(QuantRange::new(0, false).is_err());
    }

    #[test]
    fn zero_maps_to_zero() {
        for s in [0.01, 0.3, 7.0] {
            assert_eq!(fake_quantize(0.0f64, s, u2()), 0.0);
            assert_eq!(fake_quantize(0.0f64, s, QuantRange::new(4, true).unwrap()), 0.0);
        }
    }

    #[test]
    fn rounds_and_saturates() {
        assert_eq!(fake_quantize(2.6f64, 1.0, u2()), 3.0);
        assert_eq!(fake_quantize(7.0f64, 1.0, u2()), 3.0);
        assert_eq!(fake_quantize(-1.0f64, 1.0, u2()), 0.0);
        // tie goes to even
        assert_eq!(fake_quantize(2.5f64, 1.0, u2()), 2.0);
    }

    #[test]
    fn saturation_has_zero_input_gradient() {
        let mut g = Graph::<f64>::new();
        let v = g.param(Tensor::new(vec![3], vec![7.0, 1.2, -0.7]).unwrap()).unwrap();
        let s = g.param(Tensor::scalar(1.0)).unwrap();
        let q = g.quantize(v, s, u2().params(3)).unwrap();
        assert_eq!(g.value(q).data(), &[3.0, 1.0, 0.0]);
        let l = g.sum(q).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[0.0, 1.0, 0.0]);
        // step gradient: qmax + (round(1.2) - 1.2) + qmin, times 1/sqrt(3*3)
        let expect = (3.0 + (1.0 - 1.2) + 0.0) / 3.0;
        assert!((g.grad(s).unwrap()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn uninitialized_quantizer_errors() {
        let mut store = ParamStore::<f64>::new();
        let q = Quantizer::register(&mut store, "q", u2(), Granularity::PerTensor, 1);
        let mut g = Graph::new();
        let b = store.bind(&mut g).unwrap();
        let v = g.constant(Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(q.apply(&mut g, &b, v), Err(Error::Uninitialized(_))));
    }

    #[test]
    fn nonpositive_step_errors() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros(vec![2])).unwrap();
        let s = g.constant(Tensor::scalar(0.0)).unwrap();
        assert!(g.quantize(v, s, u2().params(2)).is_err());
    }

    #[test]
    fn grid_contains_base_and_spans_factor_32() {
        let grid = step_grid(3.0, 3.0);
        assert_eq!(grid.len(), GRID_SIZE);
        assert_eq!(grid[102], 1.0);
        assert!((grid[127] / grid[0] - 32.0).abs() < 1e-9);
        assert!(grid.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn lattice_values_recovered_exactly() {
        // binary-exact step: zero error exactly
        let s0 = 0.375;
        let v: Vec<f64> = (0..40).map(|i| (i % 4) as f64 * s0).collect();
        let c = min_error_step(&v, u2());
        assert_eq!(c.error, 0.0);
        assert_eq!(c.step, s0);
        // otherwise zero up to representation error of 3 * s0 / 3
        let s0 = 0.37;
        let v: Vec<f64> = (0..40).map(|i| (i % 4) as f64 * s0).collect();
        let c = min_error_step(&v, u2());
        assert!(c.error < 1e-28);
        assert!((c.step - s0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_channel_is_floored() {
        let mut store = ParamStore::<f64>::new();
        let mut q = Quantizer::register(&mut store, "w", QuantRange::new(4, true).unwrap(), Granularity::PerChannel, 2);
        let v = Tensor::new(vec![3, 2], vec![0.0, 1.0, 0.0, -2.0, 0.0, 0.5]).unwrap();
        let choices = q.init_min_error(&mut store, &v).unwrap();
        assert!(choices[0].floored);
        assert_eq!(choices[0].step, STEP_FLOOR);
        assert_eq!(choices[0].error, 0.0);
        assert_eq!(q.flagged, vec![0]);
        assert!(!choices[1].floored);
        assert!(q.initialized);
    }

    #[test]
    fn product_bit_widths() {
        assert_eq!(product_bits(2, 2, false), 4);
        assert_eq!(product_bits(1, 1, false), 1);
        assert_eq!(product_bits(8, 8, false), 16);
        assert_eq!(product_bits(3, 2, false), 5); // 7 * 3 = 21
        assert_eq!(product_bits(2, 2, true), 4); // (-2)(-2) = 4
    }
}
