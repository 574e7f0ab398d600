//! Small dense networks with leaky-ReLU hidden layers and manual backprop.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            w: (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect(),
            b: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.w[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.b[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>());
        }
    }
}

/// Multi-layer perceptron; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub slope: f64,
}

/// Activations kept from a forward pass for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input of every layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn new<R: Rng>(dims: &[usize], slope: f64, rng: &mut R) -> Self {
        let layers = dims.windows(2).map(|d| Dense::new(d[0], d[1], rng)).collect();
        Self { layers, slope }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.iter().map(|l| l.inputs).collect();
        d.extend(self.layers.last().map(|l| l.outputs));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.param_count()]
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.w);
            v.extend_from_slice(&l.b);
        }
        v
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&p[k..k + nw]);
            k += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
    }

    /// `params += step * grad`.
    pub fn apply(&mut self, grad: &[f64], step: f64) {
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.w.iter_mut().chain(l.b.iter_mut()) {
                *w += step * grad[k];
                k += 1;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            l.forward(&cur, &mut z);
            let last = i + 1 == self.layers.len();
            let next = if last {
                Vec::new()
            } else {
                z.iter().map(|&v| if v > 0.0 { v } else { self.slope * v }).collect()
            };
            inputs.push(cur);
            pre.push(z);
            cur = next;
        }
        Trace { inputs, pre }
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).output().to_vec()
    }

    /// Accumulates `d(output . d_out)/d(params)` into `grad`.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grad: &mut [f64]) {
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |k, l| {
                let o = *k;
                *k += l.w.len() + l.b.len();
                Some(o)
            })
            .collect();
        let mut delta = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            if i + 1 < self.layers.len() {
                for (d, z) in delta.iter_mut().zip(&trace.pre[i]) {
                    if *z <= 0.0 {
                        *d *= self.slope;
                    }
                }
            }
            let x = &trace.inputs[i];
            let base = offsets[i];
            for o in 0..l.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[base + o * l.inputs..base + (o + 1) * l.inputs];
                for (g, xv) in row.iter_mut().zip(x) {
                    *g += d * xv;
                }
                grad[base + l.w.len() + o] += d;
            }
            if i > 0 {
                let mut prev = vec![0.0; l.inputs];
                for (d, row) in delta.iter().zip(l.w.chunks_exact(l.inputs)) {
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += *d * w;
                    }
                }
                delta = prev;
            }
        }
    }
}

/// Adam moment estimates for one parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(params: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; params], v: vec![0.0; params], t: 0 }
    }

    /// Bias-corrected step along `grad` (to be added for ascent,
    /// subtracted for descent).
    pub fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        grad.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(g, (m, v))| {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
