//! Finite-difference verification of reverse-mode gradients, plus a
//! generator of small random graphs that exercises every operation.

use std::collections::BTreeSet;

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::rng_from;

/// Every operation a [`Graph`] can record, by name.
pub const OPS: [&str; 15] = [
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "abs",
    "square",
    "clamp",
    "mean",
    "bias_add",
    "conv2d",
    "conv_transpose2d",
    "l1_loss",
    "mse_loss",
];

/// Gradients below this magnitude on both sides are compared absolutely.
const ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares the backward-pass gradient of `f` at `inputs` with central
/// differences of step `h`, element by element.
///
/// The relative error of one element is `|a − n| / max(|a|, |n|)`; pairs
/// where both magnitudes are below 1e−7 contribute 0.
pub fn gradient_check(
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    h: f64,
) -> Result<GradCheck> {
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ins.iter().map(|t| g.constant(t)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        g.item(out)
    };

    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.input(&t.clone().with_grad())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let x = inputs[i].values()[j];
            probe[i].values_mut()[j] = x + h;
            let up = eval(&probe)?;
            probe[i].values_mut()[j] = x - h;
            let down = eval(&probe)?;
            probe[i].values_mut()[j] = x;
            let n = (up - down) / (2.0 * h);
            let abs = (a - n).abs();
            let scale = a.abs().max(n.abs());
            let rel = if scale < ABS_FLOOR { 0.0 } else { abs / scale };
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Step {
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    Relu,
    Abs,
    Square,
    Clamp(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Head {
    Mean,
    L1,
    Mse,
}

/// A randomly shaped composite graph over at most 64 elements per tensor:
/// convolution (or transposed convolution), bias, a chain of elementwise
/// operations, optionally the other convolution, and a scalar head.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub inputs: Vec<Tensor>,
    transpose_first: bool,
    second_conv: bool,
    stride: usize,
    padding: usize,
    steps: Vec<Step>,
    head: Head,
}

/// Non-smooth points are kept at least this far from every kink so that
/// central differences measure a true derivative.
const KINK_MARGIN: f64 = 1e-3;

impl RandomGraph {
    /// Samples a graph whose non-smooth operations all sit at least
    /// `1e−3` away from their kinks. The structure depends only on `seed`;
    /// input values are redrawn until the margin holds.
    pub fn sample(seed: u64) -> Self {
        let mut rng = rng_from(seed, &[0x6C4E]);
        let mut shell = loop {
            if let Some(candidate) = Self::structure(&mut rng).filter(|c| c.max_elements() <= 64) {
                break candidate;
            }
        };
        let dist = Uniform::new(-1.0, 1.0).expect("valid range");
        for attempt in 0u64.. {
            let mut vrng = rng_from(seed, &[0x6C4F, attempt]);
            for t in &mut shell.inputs {
                t.values_mut().iter_mut().for_each(|v| *v = dist.sample(&mut vrng));
            }
            if shell.kink_distance() >= KINK_MARGIN {
                break;
            }
        }
        shell
    }

    /// Random structure with zero-filled inputs of the right shapes, or
    /// `None` if the output grows past 64 elements.
    fn structure(rng: &mut crate::rng::Rng) -> Option<Self> {
        let transpose_first = rng.random_bool(0.5);
        let second_conv = rng.random_bool(0.5);
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=1);
        let k = rng.random_range(1..=3).max(padding + 1);
        let c_in = rng.random_range(1..=2);
        let c_mid = rng.random_range(1..=2);
        let side = rng.random_range(3..=4);
        let n_steps = rng.random_range(2..=5);
        let steps: Vec<Step> = (0..n_steps)
            .map(|_| match rng.random_range(0..9) {
                0 => Step::Add,
                1 => Step::Sub,
                2 => Step::Mul,
                3 => Step::Neg,
                4 => Step::Scale(rng.random_range(-2.0..2.0)),
                5 => Step::Relu,
                6 => Step::Abs,
                7 => Step::Square,
                _ => {
                    let lo = rng.random_range(-0.8..0.0);
                    Step::Clamp(lo, lo + rng.random_range(0.3..1.2))
                }
            })
            .collect();
        let head = match rng.random_range(0..3) {
            0 => Head::Mean,
            1 => Head::L1,
            _ => Head::Mse,
        };

        // later shapes follow from a dry run of the structure
        let kernel = if transpose_first { [c_in, c_mid, k, k] } else { [c_mid, c_in, k, k] };
        let mut shell = Self {
            inputs: vec![
                Tensor::zeros(&[1, c_in, side, side]).expect("valid"),
                Tensor::zeros(&kernel).expect("valid"),
                Tensor::zeros(&[c_mid]).expect("valid"),
            ],
            transpose_first,
            second_conv,
            stride,
            padding,
            steps,
            head,
        };
        let mid_shape = shell.mid_shape();
        let n_operands = shell
            .steps
            .iter()
            .filter(|s| matches!(s, Step::Add | Step::Sub | Step::Mul))
            .count();
        for _ in 0..n_operands {
            shell.inputs.push(Tensor::zeros(&mid_shape).expect("valid"));
        }
        if second_conv {
            shell.inputs.push(Tensor::zeros(&kernel).expect("valid"));
        }
        let out_shape = shell.out_shape();
        if out_shape.iter().product::<usize>() > 64 {
            return None;
        }
        if head != Head::Mean {
            shell.inputs.push(Tensor::zeros(&out_shape).expect("valid"));
        }
        Some(shell)
    }

    fn conv(&self, g: &mut Graph, x: Var, k: Var, transpose: bool) -> Result<Var> {
        if transpose {
            g.conv_transpose2d(x, k, self.stride, self.padding)
        } else {
            g.conv2d(x, k, self.stride, self.padding)
        }
    }

    fn trace(&self, g: &mut Graph, v: &[Var], mut on_kink: impl FnMut(&Graph, Var, &[f64])) -> Result<Var> {
        let mut next = 3;
        let mut h = self.conv(g, v[0], v[1], self.transpose_first)?;
        h = g.bias_add(h, v[2])?;
        for step in &self.steps {
            h = match *step {
                Step::Add | Step::Sub | Step::Mul => {
                    let other = v[next];
                    next += 1;
                    match step {
                        Step::Add => g.add(h, other)?,
                        Step::Sub => g.sub(h, other)?,
                        _ => g.mul(h, other)?,
                    }
                }
                Step::Neg => g.neg(h)?,
                Step::Scale(f) => g.scale(h, f)?,
                Step::Relu => {
                    on_kink(g, h, &[0.0]);
                    g.relu(h)?
                }
                Step::Abs => {
                    on_kink(g, h, &[0.0]);
                    g.abs(h)?
                }
                Step::Square => g.square(h)?,
                Step::Clamp(lo, hi) => {
                    on_kink(g, h, &[lo, hi]);
                    g.clamp(h, lo, hi)?
                }
            };
        }
        if self.second_conv {
            h = self.conv(g, h, v[next], !self.transpose_first)?;
            next += 1;
        }
        match self.head {
            Head::Mean => g.mean(h),
            Head::Mse => g.mse_loss(h, v[next]),
            Head::L1 => {
                let diff = g.sub(h, v[next])?;
                on_kink(g, diff, &[0.0]);
                g.l1_loss(h, v[next])
            }
        }
    }

    /// Builds the graph over `vars`, which must correspond to
    /// [`RandomGraph::inputs`].
    pub fn build(&self, g: &mut Graph, vars: &[Var]) -> Result<Var> {
        self.trace(g, vars, |_, _, _| {})
    }

    fn dry(&self) -> (Graph, Vec<Var>) {
        let mut g = Graph::new();
        let vars = self.inputs.iter().map(|t| g.constant(t).expect("finite")).collect();
        (g, vars)
    }

    fn mid_shape(&self) -> Vec<usize> {
        let (mut g, v) = self.dry();
        let h = self.conv(&mut g, v[0], v[1], self.transpose_first).expect("valid geometry");
        g.shape(h).to_vec()
    }

    fn out_shape(&self) -> Vec<usize> {
        let (mut g, v) = self.dry();
        let mut h = self.conv(&mut g, v[0], v[1], self.transpose_first).expect("valid geometry");
        if self.second_conv {
            let k = *v.last().expect("kernel");
            h = self.conv(&mut g, h, k, !self.transpose_first).expect("valid geometry");
        }
        g.shape(h).to_vec()
    }

    /// Smallest distance from any non-smooth operand to its kink.
    fn kink_distance(&self) -> f64 {
        let (mut g, v) = self.dry();
        let mut min = f64::INFINITY;
        self.trace(&mut g, &v, |g, x, kinks| {
            for &val in g.value(x) {
                for &k in kinks {
                    min = min.min((val - k).abs());
                }
            }
        })
        .expect("graph builds");
        min
    }

    /// Names of the operations this graph records.
    pub fn ops(&self) -> BTreeSet<&'static str> {
        let mut ops = BTreeSet::new();
        let (c1, c2) = if self.transpose_first {
            ("conv_transpose2d", "conv2d")
        } else {
            ("conv2d", "conv_transpose2d")
        };
        ops.insert(c1);
        ops.insert("bias_add");
        if self.second_conv {
            ops.insert(c2);
        }
        for s in &self.steps {
            ops.insert(match s {
                Step::Add => "add",
                Step::Sub => "sub",
                Step::Mul => "mul",
                Step::Neg => "neg",
                Step::Scale(_) => "scale",
                Step::Relu => "relu",
                Step::Abs => "abs",
                Step::Square => "square",
                Step::Clamp(..) => "clamp",
            });
        }
        ops.insert(match self.head {
            Head::Mean => "mean",
            Head::L1 => "l1_loss",
            Head::Mse => "mse_loss",
        });
        ops
    }

    pub fn max_elements(&self) -> usize {
        self.inputs.iter().map(Tensor::len).max().unwrap_or(0)
    }

    pub fn check(&self, h: f64) -> Result<GradCheck> {
        gradient_check(&self.inputs, |g, v| self.build(g, v), h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_enough() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = gradient_check(
            &[x],
            |g, v| {
                let s = g.square(v[0])?;
                g.mean(s)
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn random_graphs_are_small_and_deterministic() {
        for seed in 0..10 {
            let a = RandomGraph::sample(seed);
            assert!(a.max_elements() <= 64, "seed {seed}: {}", a.max_elements());
            assert_eq!(a.inputs, RandomGraph::sample(seed).inputs);
            assert!(a.kink_distance() >= KINK_MARGIN);
        }
    }
}
