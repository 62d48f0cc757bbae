//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse to accumulate gradients. The op set is exactly what
//! the encoder/attention/decoder stack needs: vector arithmetic, matrix-vector
//! products, gated nonlinearities, masked softmax and renormalization.
//!
//! Everything is 64-bit so analytic gradients can be checked against central
//! finite differences at tight tolerances.

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Ix1, Ix2};
use std::cell::Cell;
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut GradBuf)>;

struct Node {
    value: Rc<ArrayD<f64>>,
    back: Option<BackFn>,
}

/// Per-node gradient accumulator used during the backward sweep.
pub struct GradBuf {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl GradBuf {
    fn accumulate(&mut self, var: Var, contribution: ArrayD<f64>) {
        match &mut self.slots[var.0] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Gradient of the loss w.r.t. `var`, if any path reached it.
    pub fn get(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.slots[var.0].as_ref()
    }
}

/// Operation tape. One tape per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    /// Incremented whenever a clamped log saw a probability below its floor.
    pub clamp_warnings: Cell<u64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            clamp_warnings: Cell::new(0),
        }
    }

    /// Forward-only tape: no backward closures are recorded.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            clamp_warnings: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        let back = if self.grad_enabled { back } else { None };
        self.nodes.push(Node {
            value: Rc::new(value),
            back,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn val(&self, v: Var) -> ArrayViewD<'_, f64> {
        self.nodes[v.0].value.view()
    }

    fn rc(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn val1(&self, v: Var) -> Array1<f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("expected rank-1 value")
            .to_owned()
    }

    pub fn val2(&self, v: Var) -> Array2<f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected rank-2 value")
            .to_owned()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0]]
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.push(value.into_dyn(), None)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.push(value.into_dyn(), None)
    }

    pub fn scalar_leaf(&mut self, x: f64) -> Var {
        self.push(ndarray::arr1(&[x]).into_dyn(), None)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.leaf1(Array1::zeros(n))
    }

    // ---- elementwise arithmetic --------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &*self.nodes[a.0].value + &*self.nodes[b.0].value;
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                buf.accumulate(a, g.clone());
                buf.accumulate(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &*self.nodes[a.0].value - &*self.nodes[b.0].value;
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                buf.accumulate(a, g.clone());
                buf.accumulate(b, -g);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.rc(a);
        let vb = self.rc(b);
        let out = &*va * &*vb;
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                buf.accumulate(a, g * &*vb);
                buf.accumulate(b, g * &*va);
            })),
        )
    }

    /// Elementwise product with a constant (no gradient flows to the mask).
    pub fn mul_const(&mut self, a: Var, mask: ArrayD<f64>) -> Var {
        let out = &*self.nodes[a.0].value * &mask;
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                buf.accumulate(a, g * &mask);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = &*self.nodes[a.0].value * k;
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                buf.accumulate(a, g * k);
            })),
        )
    }

    /// `v * s` where `s` is a length-1 scalar node, broadcast over `v`.
    pub fn mul_scalar(&mut self, v: Var, s: Var) -> Var {
        let vv = self.rc(v);
        let vs = self.rc(s);
        let out = &*vv * vs[[0]];
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                buf.accumulate(v, g * vs[[0]]);
                let ds: f64 = g.iter().zip(vv.iter()).map(|(x, y)| x * y).sum();
                buf.accumulate(s, ndarray::arr1(&[ds]).into_dyn());
            })),
        )
    }

    /// `v / s` with a scalar node `s`.
    pub fn div_scalar(&mut self, v: Var, s: Var) -> Var {
        let vv = self.rc(v);
        let vs = self.rc(s);
        let out = &*vv / vs[[0]];
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                let s0 = vs[[0]];
                buf.accumulate(v, g / s0);
                let ds: f64 = g.iter().zip(vv.iter()).map(|(x, y)| x * y).sum::<f64>();
                buf.accumulate(s, ndarray::arr1(&[-ds / (s0 * s0)]).into_dyn());
            })),
        )
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix-vector product `m · v` with `m: [r×c]`, `v: [c]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Var {
        let vm = self.rc(m);
        let vv = self.rc(v);
        let m2 = vm.view().into_dimensionality::<Ix2>().unwrap();
        let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
        let out = m2.dot(&v1).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let m2 = vm.view().into_dimensionality::<Ix2>().unwrap();
                let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
                // dm = g ⊗ v, dv = mᵀ g
                let (r, c) = m2.dim();
                let mut dm = Array2::<f64>::zeros((r, c));
                for i in 0..r {
                    for j in 0..c {
                        dm[[i, j]] = g1[i] * v1[j];
                    }
                }
                buf.accumulate(m, dm.into_dyn());
                buf.accumulate(v, m2.t().dot(&g1).into_dyn());
            })),
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let va = self.rc(a);
        let vb = self.rc(b);
        let out: f64 = va.iter().zip(vb.iter()).map(|(x, y)| x * y).sum();
        self.push(
            ndarray::arr1(&[out]).into_dyn(),
            Some(Box::new(move |g, buf| {
                let g0 = g[[0]];
                buf.accumulate(a, &*vb * g0);
                buf.accumulate(b, &*va * g0);
            })),
        )
    }

    /// Row `i` of a rank-2 node, as a rank-1 value. Used for embedding lookup.
    pub fn row(&mut self, m: Var, i: usize) -> Var {
        let vm = self.rc(m);
        let m2 = vm.view().into_dimensionality::<Ix2>().unwrap();
        let out = m2.row(i).to_owned().into_dyn();
        let (rows, cols) = m2.dim();
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                let mut dm = Array2::<f64>::zeros((rows, cols));
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                dm.row_mut(i).assign(&g1);
                buf.accumulate(m, dm.into_dyn());
            })),
        )
    }

    // ---- shape ops ----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let lens: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.len()).collect();
        let total: usize = lens.iter().sum();
        let mut out = Array1::<f64>::zeros(total);
        let mut off = 0;
        for (p, &l) in parts.iter().zip(&lens) {
            let v = self.nodes[p.0].value.view().into_dimensionality::<Ix1>().unwrap();
            out.slice_mut(ndarray::s![off..off + l]).assign(&v);
            off += l;
        }
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, buf| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut off = 0;
                for (p, &l) in parts.iter().zip(&lens) {
                    buf.accumulate(*p, g1.slice(ndarray::s![off..off + l]).to_owned().into_dyn());
                    off += l;
                }
            })),
        )
    }

    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Var {
        let total = self.nodes[v.0].value.len();
        let vv = self.rc(v);
        let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
        let out = v1.slice(ndarray::s![start..start + len]).to_owned().into_dyn();
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dv = Array1::<f64>::zeros(total);
                dv.slice_mut(ndarray::s![start..start + len]).assign(&g1);
                buf.accumulate(v, dv.into_dyn());
            })),
        )
    }

    /// Stack length-1 scalar nodes into one vector.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Var {
        let out: Array1<f64> = parts.iter().map(|p| self.nodes[p.0].value[[0]]).collect();
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, buf| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                for (k, p) in parts.iter().enumerate() {
                    buf.accumulate(*p, ndarray::arr1(&[g1[k]]).into_dyn());
                }
            })),
        )
    }

    /// Element `i` of a vector node, as a scalar node.
    pub fn index(&mut self, v: Var, i: usize) -> Var {
        let n = self.nodes[v.0].value.len();
        let out = self.nodes[v.0].value[[i]];
        self.push(
            ndarray::arr1(&[out]).into_dyn(),
            Some(Box::new(move |g, buf| {
                let mut dv = Array1::<f64>::zeros(n);
                dv[i] = g[[0]];
                buf.accumulate(v, dv.into_dyn());
            })),
        )
    }

    /// Mean of same-shaped rank-1 nodes (average pooling).
    pub fn mean_vars(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean over empty set");
        let n = parts.len() as f64;
        let mut out = self.nodes[parts[0].0].value.as_ref().clone();
        for p in &parts[1..] {
            out += &*self.nodes[p.0].value;
        }
        out /= n;
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                for p in &parts {
                    buf.accumulate(*p, g / n);
                }
            })),
        )
    }

    /// `out[k] = rows[k] · v` without materializing the stacked matrix.
    pub fn rows_dot(&mut self, rows: &[Var], v: Var) -> Var {
        let vv = self.rc(v);
        let row_vals: Vec<Rc<ArrayD<f64>>> = rows.iter().map(|r| self.rc(*r)).collect();
        let out: Array1<f64> = row_vals
            .iter()
            .map(|r| r.iter().zip(vv.iter()).map(|(x, y)| x * y).sum())
            .collect();
        let rows: Vec<Var> = rows.to_vec();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, buf| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dv = ArrayD::<f64>::zeros(vv.shape());
                for (k, r) in rows.iter().enumerate() {
                    buf.accumulate(*r, &*vv * g1[k]);
                    dv += &(&*row_vals[k] * g1[k]);
                }
                buf.accumulate(v, dv);
            })),
        )
    }

    /// `out = Σ_k weights[k] · rows[k]` (attention-weighted context vector).
    pub fn weighted_sum(&mut self, weights: Var, rows: &[Var]) -> Var {
        let w = self.rc(weights);
        let w1 = w.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        assert_eq!(w1.len(), rows.len(), "weight/row count mismatch");
        let row_vals: Vec<Rc<ArrayD<f64>>> = rows.iter().map(|r| self.rc(*r)).collect();
        let mut out = ArrayD::<f64>::zeros(row_vals[0].shape());
        for (k, r) in row_vals.iter().enumerate() {
            out += &(&**r * w1[k]);
        }
        let rows: Vec<Var> = rows.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, buf| {
                let w1 = w.view().into_dimensionality::<Ix1>().unwrap();
                let mut dw = Array1::<f64>::zeros(rows.len());
                for (k, r) in rows.iter().enumerate() {
                    dw[k] = g.iter().zip(row_vals[k].iter()).map(|(x, y)| x * y).sum();
                    buf.accumulate(*r, g * w1[k]);
                }
                buf.accumulate(weights, dw.into_dyn());
            })),
        )
    }

    // ---- nonlinearities -----------------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rc = Rc::new(out);
        let cap = Rc::clone(&rc);
        self.push_rc(
            rc,
            Some(Box::new(move |g, buf| {
                buf.accumulate(a, g * &cap.mapv(|y| y * (1.0 - y)));
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(f64::tanh);
        let rc = Rc::new(out);
        let cap = Rc::clone(&rc);
        self.push_rc(
            rc,
            Some(Box::new(move |g, buf| {
                buf.accumulate(a, g * &cap.mapv(|y| 1.0 - y * y));
            })),
        )
    }

    fn push_rc(&mut self, value: Rc<ArrayD<f64>>, back: Option<BackFn>) -> Var {
        let back = if self.grad_enabled { back } else { None };
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    // ---- normalizations -----------------------------------------------

    /// Softmax over positions where `mask` is true; masked outputs are
    /// exactly zero and receive no gradient.
    pub fn softmax_masked(&mut self, scores: Var, mask: &[bool]) -> Var {
        let s = self.val1(scores);
        assert_eq!(s.len(), mask.len(), "score/mask length mismatch");
        assert!(mask.iter().any(|&m| m), "softmax over fully masked input");
        let max = s
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(x, _)| *x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = Array1::<f64>::zeros(s.len());
        let mut z = 0.0;
        for k in 0..s.len() {
            if mask[k] {
                out[k] = (s[k] - max).exp();
                z += out[k];
            }
        }
        out /= z;
        let rc = Rc::new(out.into_dyn());
        let cap = Rc::clone(&rc);
        let mask: Vec<bool> = mask.to_vec();
        self.push_rc(
            rc,
            Some(Box::new(move |g, buf| {
                let y = cap.view().into_dimensionality::<Ix1>().unwrap();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let inner: f64 = y
                    .iter()
                    .zip(g1.iter())
                    .zip(&mask)
                    .filter(|(_, &m)| m)
                    .map(|((yk, gk), _)| yk * gk)
                    .sum();
                let mut ds = Array1::<f64>::zeros(y.len());
                for k in 0..y.len() {
                    if mask[k] {
                        ds[k] = y[k] * (g1[k] - inner);
                    }
                }
                buf.accumulate(scores, ds.into_dyn());
            })),
        )
    }

    /// `y = p / Σp` for a non-negative vector with positive total mass.
    pub fn normalize_sum(&mut self, p: Var) -> Var {
        let v = self.val1(p);
        let z: f64 = v.sum();
        assert!(z > 0.0, "normalize_sum over zero total mass");
        let out = &v / z;
        let rc = Rc::new(out.into_dyn());
        let cap = Rc::clone(&rc);
        self.push_rc(
            rc,
            Some(Box::new(move |g, buf| {
                let y = cap.view().into_dimensionality::<Ix1>().unwrap();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let inner: f64 = y.iter().zip(g1.iter()).map(|(yk, gk)| yk * gk).sum();
                let ds = g1.mapv(|gk| gk) - inner;
                buf.accumulate(p, (ds / z).into_dyn());
            })),
        )
    }

    /// `log(max(p[i], floor))`; counts a warning when the floor clips.
    pub fn log_index_clamped(&mut self, p: Var, i: usize, floor: f64) -> Var {
        let n = self.nodes[p.0].value.len();
        let pi = self.nodes[p.0].value[[i]];
        let clipped = pi < floor;
        if clipped {
            self.clamp_warnings.set(self.clamp_warnings.get() + 1);
        }
        let out = pi.max(floor).ln();
        self.push(
            ndarray::arr1(&[out]).into_dyn(),
            Some(Box::new(move |g, buf| {
                let mut dp = Array1::<f64>::zeros(n);
                if !clipped {
                    dp[i] = g[[0]] / pi;
                }
                buf.accumulate(p, dp.into_dyn());
            })),
        )
    }

    // ---- backward -----------------------------------------------------

    /// Backpropagate from a scalar node. Panics on an inference tape.
    pub fn backward(&self, loss: Var) -> GradBuf {
        assert!(self.grad_enabled, "backward on an inference tape");
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut buf = GradBuf {
            slots: vec![None; self.nodes.len()],
        };
        buf.slots[loss.0] = Some(ndarray::arr1(&[1.0]).into_dyn());
        for idx in (0..=loss.0).rev() {
            if let Some(g) = buf.slots[idx].take() {
                if let Some(back) = &self.nodes[idx].back {
                    back(&g, &mut buf);
                }
                buf.slots[idx] = Some(g);
            }
        }
        buf
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
