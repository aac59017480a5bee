//! Differentiable operations on [`Var`].
//!
//! Every method computes its result eagerly and registers a backward
//! closure that scatters the incoming cotangent into the parents. Closures
//! capture parent ids, `requires_grad` flags and (where the chain rule
//! needs them) `Arc` clones of value buffers, so backward never touches
//! the tape again.

use std::sync::Arc;

use rand::Rng;

use super::{BackwardFn, GradStore, Shape, Var};

/// Padding behaviour for [`Var::conv1d`] (stride-1, length-preserving).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Zero padding split evenly left/right; requires an odd kernel.
    ZeroSame,
    /// Indices wrap around the sequence.
    Circular,
    /// All padding on the left, so output `t` never sees input beyond `t`.
    CausalLeft,
}

fn source_index(pad: PadMode, len: usize, k: usize, o: usize, t: usize) -> Option<usize> {
    let left = match pad {
        PadMode::ZeroSame | PadMode::Circular => (k - 1) / 2,
        PadMode::CausalLeft => k - 1,
    };
    let raw = o as isize + t as isize - left as isize;
    match pad {
        PadMode::Circular => Some(raw.rem_euclid(len as isize) as usize),
        _ => {
            if raw >= 0 && (raw as usize) < len {
                Some(raw as usize)
            } else {
                None
            }
        }
    }
}

impl Var {
    fn unary(&self, out: Vec<f64>, df: impl Fn(usize, f64) -> f64 + 'static) -> Var {
        let req = self.requires_grad();
        let id = self.id;
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout: &[f64], store: &mut GradStore| {
                let buf = store.buf(id, gout.len());
                for (i, g) in gout.iter().enumerate() {
                    buf[i] += g * df(i, *g);
                }
            })
        });
        self.graph.push(self.shape.clone(), out, req, backward)
    }

    // ---- elementwise arithmetic ----

    pub fn add(&self, rhs: &Var) -> Var {
        self.same_graph(rhs);
        assert_eq!(self.shape, rhs.shape, "add: shape mismatch");
        let out = self.values.iter().zip(rhs.values.iter()).map(|(a, b)| a + b).collect();
        let (aid, areq) = (self.id, self.requires_grad());
        let (bid, breq) = (rhs.id, rhs.requires_grad());
        let backward: Option<BackwardFn> = (areq || breq).then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                if areq {
                    store.add_slice(aid, gout);
                }
                if breq {
                    store.add_slice(bid, gout);
                }
            })
        });
        self.graph.push(self.shape.clone(), out, areq || breq, backward)
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        self.same_graph(rhs);
        assert_eq!(self.shape, rhs.shape, "sub: shape mismatch");
        let out = self.values.iter().zip(rhs.values.iter()).map(|(a, b)| a - b).collect();
        let (aid, areq) = (self.id, self.requires_grad());
        let (bid, breq) = (rhs.id, rhs.requires_grad());
        let backward: Option<BackwardFn> = (areq || breq).then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                if areq {
                    store.add_slice(aid, gout);
                }
                if breq {
                    let buf = store.buf(bid, gout.len());
                    for (b, g) in buf.iter_mut().zip(gout) {
                        *b -= g;
                    }
                }
            })
        });
        self.graph.push(self.shape.clone(), out, areq || breq, backward)
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        self.same_graph(rhs);
        assert_eq!(self.shape, rhs.shape, "mul: shape mismatch");
        let out = self.values.iter().zip(rhs.values.iter()).map(|(a, b)| a * b).collect();
        let (aid, areq, av) = (self.id, self.requires_grad(), self.values.clone());
        let (bid, breq, bv) = (rhs.id, rhs.requires_grad(), rhs.values.clone());
        let backward: Option<BackwardFn> = (areq || breq).then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                if areq {
                    let buf = store.buf(aid, gout.len());
                    for i in 0..gout.len() {
                        buf[i] += gout[i] * bv[i];
                    }
                }
                if breq {
                    let buf = store.buf(bid, gout.len());
                    for i in 0..gout.len() {
                        buf[i] += gout[i] * av[i];
                    }
                }
            })
        });
        self.graph.push(self.shape.clone(), out, areq || breq, backward)
    }

    /// Add a rank-1 bias `[n]` to every row of a rank-2 `[m, n]` tensor.
    pub fn add_bias(&self, bias: &Var) -> Var {
        self.same_graph(bias);
        let (m, n) = self.shape.dims2();
        assert_eq!(bias.shape, Shape::of(&[n]), "add_bias: bias must be [cols]");
        let mut out = self.values.to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bias.values[j];
            }
        }
        let (aid, areq) = (self.id, self.requires_grad());
        let (bid, breq) = (bias.id, bias.requires_grad());
        let backward: Option<BackwardFn> = (areq || breq).then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                if areq {
                    store.add_slice(aid, gout);
                }
                if breq {
                    let buf = store.buf(bid, n);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += gout[i * n + j];
                        }
                    }
                }
            })
        });
        self.graph.push(self.shape.clone(), out, areq || breq, backward)
    }

    pub fn scale(&self, c: f64) -> Var {
        let out = self.values.iter().map(|v| v * c).collect();
        self.unary(out, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let out = self.values.iter().map(|v| v + c).collect();
        self.unary(out, |_, _| 1.0)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    /// Multiply every element by a learnable scalar (shape `[1]`).
    pub fn mul_scalar_var(&self, s: &Var) -> Var {
        self.same_graph(s);
        assert_eq!(s.numel(), 1, "mul_scalar_var: scalar operand must have one element");
        let sv = s.values[0];
        let out = self.values.iter().map(|v| v * sv).collect();
        let (aid, areq, av) = (self.id, self.requires_grad(), self.values.clone());
        let (sid, sreq) = (s.id, s.requires_grad());
        let backward: Option<BackwardFn> = (areq || sreq).then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                if areq {
                    let buf = store.buf(aid, gout.len());
                    for i in 0..gout.len() {
                        buf[i] += gout[i] * sv;
                    }
                }
                if sreq {
                    let acc: f64 = gout.iter().zip(av.iter()).map(|(g, a)| g * a).sum();
                    store.buf(sid, 1)[0] += acc;
                }
            })
        });
        self.graph.push(self.shape.clone(), out, areq || sreq, backward)
    }

    // ---- elementwise nonlinearities ----

    pub fn exp(&self) -> Var {
        let out: Vec<f64> = self.values.iter().map(|v| v.exp()).collect();
        let y = Arc::new(out.clone());
        self.unary(out, move |i, _| y[i])
    }

    pub fn ln(&self) -> Var {
        assert!(self.values.iter().all(|v| *v > 0.0), "ln: requires positive inputs");
        let out = self.values.iter().map(|v| v.ln()).collect();
        let x = self.values.clone();
        self.unary(out, move |i, _| 1.0 / x[i])
    }

    pub fn sqrt_elem(&self) -> Var {
        assert!(self.values.iter().all(|v| *v >= 0.0), "sqrt: requires non-negative inputs");
        let out: Vec<f64> = self.values.iter().map(|v| v.sqrt()).collect();
        let y = Arc::new(out.clone());
        self.unary(out, move |i, _| 0.5 / y[i].max(f64::MIN_POSITIVE))
    }

    pub fn powf_elem(&self, p: f64) -> Var {
        assert!(self.values.iter().all(|v| *v > 0.0), "powf: requires positive inputs");
        let out = self.values.iter().map(|v| v.powf(p)).collect();
        let x = self.values.clone();
        self.unary(out, move |i, _| p * x[i].powf(p - 1.0))
    }

    pub fn recip(&self) -> Var {
        assert!(self.values.iter().all(|v| *v != 0.0), "recip: division by zero");
        let out: Vec<f64> = self.values.iter().map(|v| 1.0 / v).collect();
        let y = Arc::new(out.clone());
        self.unary(out, move |i, _| -y[i] * y[i])
    }

    /// Exponential linear unit with `alpha = 1`.
    pub fn elu(&self) -> Var {
        let out: Vec<f64> =
            self.values.iter().map(|v| if *v > 0.0 { *v } else { v.exp_m1() }).collect();
        let y = Arc::new(out.clone());
        let x = self.values.clone();
        self.unary(out, move |i, _| if x[i] > 0.0 { 1.0 } else { y[i] + 1.0 })
    }

    // ---- linear algebra ----

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Var) -> Var {
        self.same_graph(rhs);
        let (m, ka) = self.shape.dims2();
        let (kb, n) = rhs.shape.dims2();
        assert_eq!(ka, kb, "matmul: inner dimensions differ ({ka} vs {kb})");
        let a = &self.values;
        let b = &rhs.values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..ka {
                let ail = a[i * ka + l];
                if ail == 0.0 {
                    continue;
                }
                let (or, br) = (&mut out[i * n..(i + 1) * n], &b[l * n..(l + 1) * n]);
                for j in 0..n {
                    or[j] += ail * br[j];
                }
            }
        }
        let (aid, areq, av) = (self.id, self.requires_grad(), self.values.clone());
        let (bid, breq, bv) = (rhs.id, rhs.requires_grad(), rhs.values.clone());
        let backward: Option<BackwardFn> = (areq || breq).then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                if areq {
                    // dA = g @ B^T
                    let buf = store.buf(aid, m * ka);
                    for i in 0..m {
                        for l in 0..ka {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gout[i * n + j] * bv[l * n + j];
                            }
                            buf[i * ka + l] += acc;
                        }
                    }
                }
                if breq {
                    // dB = A^T @ g
                    let buf = store.buf(bid, ka * n);
                    for i in 0..m {
                        for l in 0..ka {
                            let ail = av[i * ka + l];
                            if ail == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                buf[l * n + j] += ail * gout[i * n + j];
                            }
                        }
                    }
                }
            })
        });
        self.graph.push(Shape::of(&[m, n]), out, areq || breq, backward)
    }

    pub fn transpose(&self) -> Var {
        let (m, n) = self.shape.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.values[i * n + j];
            }
        }
        let (id, req) = (self.id, self.requires_grad());
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                let buf = store.buf(id, m * n);
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += gout[j * m + i];
                    }
                }
            })
        });
        self.graph.push(Shape::of(&[n, m]), out, req, backward)
    }

    pub fn reshape(&self, dims: &[usize]) -> Var {
        let shape = Shape::of(dims);
        assert_eq!(shape.numel(), self.numel(), "reshape: element count must not change");
        let (id, req) = (self.id, self.requires_grad());
        let backward: Option<BackwardFn> =
            req.then(|| -> BackwardFn { Box::new(move |gout, store| store.add_slice(id, gout)) });
        self.graph.push_arc(shape, self.values.clone(), req, backward)
    }

    // ---- structural ops ----

    /// Contiguous row range of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Var {
        let (m, n) = self.shape.dims2();
        assert!(start + len <= m, "slice_rows: {start}+{len} exceeds {m} rows");
        let out = self.values[start * n..(start + len) * n].to_vec();
        let (id, req) = (self.id, self.requires_grad());
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                let buf = store.buf(id, m * n);
                for (b, g) in buf[start * n..(start + len) * n].iter_mut().zip(gout) {
                    *b += g;
                }
            })
        });
        self.graph.push(Shape::of(&[len, n]), out, req, backward)
    }

    /// Contiguous column range of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let (m, n) = self.shape.dims2();
        assert!(start + len <= n, "slice_cols: {start}+{len} exceeds {n} cols");
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&self.values[i * n + start..i * n + start + len]);
        }
        let (id, req) = (self.id, self.requires_grad());
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                let buf = store.buf(id, m * n);
                for i in 0..m {
                    for j in 0..len {
                        buf[i * n + start + j] += gout[i * len + j];
                    }
                }
            })
        });
        self.graph.push(Shape::of(&[m, len]), out, req, backward)
    }

    /// Pick rows by index (duplicates allowed); gradients scatter-add back.
    pub fn gather_rows(&self, ids: &[usize]) -> Var {
        let (m, n) = self.shape.dims2();
        assert!(ids.iter().all(|i| *i < m), "gather_rows: index out of range");
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&self.values[i * n..(i + 1) * n]);
        }
        let (id, req) = (self.id, self.requires_grad());
        let ids_owned = ids.to_vec();
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                let buf = store.buf(id, m * n);
                for (r, &i) in ids_owned.iter().enumerate() {
                    for j in 0..n {
                        buf[i * n + j] += gout[r * n + j];
                    }
                }
            })
        });
        self.graph.push(Shape::of(&[ids.len(), n]), out, req, backward)
    }

    /// Tile a rank-1 vector into `len` identical rows.
    pub fn repeat_row(&self, len: usize) -> Var {
        assert_eq!(self.shape.rank(), 1, "repeat_row: expects a rank-1 vector");
        let n = self.numel();
        let mut out = Vec::with_capacity(len * n);
        for _ in 0..len {
            out.extend_from_slice(&self.values);
        }
        let (id, req) = (self.id, self.requires_grad());
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                let buf = store.buf(id, n);
                for r in 0..len {
                    for j in 0..n {
                        buf[j] += gout[r * n + j];
                    }
                }
            })
        });
        self.graph.push(Shape::of(&[len, n]), out, req, backward)
    }

    /// Copy of `self` with rows at `ids` (must be distinct) replaced by the
    /// corresponding rows of `rows`.
    pub fn row_scatter_replace(&self, rows: &Var, ids: &[usize]) -> Var {
        self.same_graph(rows);
        let (m, n) = self.shape.dims2();
        let (u, nr) = rows.shape.dims2();
        assert_eq!(n, nr, "row_scatter_replace: column mismatch");
        assert_eq!(u, ids.len(), "row_scatter_replace: one index per replacement row");
        let mut seen = vec![false; m];
        for &i in ids {
            assert!(i < m, "row_scatter_replace: index out of range");
            assert!(!seen[i], "row_scatter_replace: duplicate index {i}");
            seen[i] = true;
        }
        let mut out = self.values.to_vec();
        for (r, &i) in ids.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&rows.values[r * n..(r + 1) * n]);
        }
        let (aid, areq) = (self.id, self.requires_grad());
        let (rid, rreq) = (rows.id, rows.requires_grad());
        let ids_owned = ids.to_vec();
        let backward: Option<BackwardFn> = (areq || rreq).then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                if areq {
                    let mut masked = gout.to_vec();
                    for &i in &ids_owned {
                        masked[i * n..(i + 1) * n].fill(0.0);
                    }
                    store.add_slice(aid, &masked);
                }
                if rreq {
                    let buf = store.buf(rid, ids_owned.len() * n);
                    for (r, &i) in ids_owned.iter().enumerate() {
                        for j in 0..n {
                            buf[r * n + j] += gout[i * n + j];
                        }
                    }
                }
            })
        });
        self.graph.push(self.shape.clone(), out, areq || rreq, backward)
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Var {
        let total: f64 = self.values.iter().sum();
        let (id, req, n) = (self.id, self.requires_grad(), self.numel());
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                let buf = store.buf(id, n);
                for b in buf.iter_mut() {
                    *b += gout[0];
                }
            })
        });
        self.graph.push(Shape::scalar(), vec![total], req, backward)
    }

    pub fn mean_all(&self) -> Var {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Column sums of a rank-2 tensor (`axis = 0`) or row sums (`axis = 1`).
    pub fn sum_axis(&self, axis: usize) -> Var {
        let (m, n) = self.shape.dims2();
        assert!(axis < 2, "sum_axis: axis must be 0 or 1");
        let out_len = if axis == 0 { n } else { m };
        let mut out = vec![0.0; out_len];
        for i in 0..m {
            for j in 0..n {
                let o = if axis == 0 { j } else { i };
                out[o] += self.values[i * n + j];
            }
        }
        let (id, req) = (self.id, self.requires_grad());
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                let buf = store.buf(id, m * n);
                for i in 0..m {
                    for j in 0..n {
                        let o = if axis == 0 { j } else { i };
                        buf[i * n + j] += gout[o];
                    }
                }
            })
        });
        self.graph.push(Shape::of(&[out_len]), out, req, backward)
    }

    pub fn mean_axis(&self, axis: usize) -> Var {
        let (m, n) = self.shape.dims2();
        let denom = if axis == 0 { m } else { n } as f64;
        self.sum_axis(axis).scale(1.0 / denom)
    }

    /// Row maxima of a rank-2 tensor; gradient flows to the first argmax.
    pub fn max_rows(&self) -> Var {
        let (m, n) = self.shape.dims2();
        assert!(n > 0);
        let mut out = vec![0.0; m];
        let mut arg = vec![0usize; m];
        for i in 0..m {
            let row = &self.values[i * n..(i + 1) * n];
            let (mut best, mut bj) = (row[0], 0);
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > best {
                    best = *v;
                    bj = j;
                }
            }
            out[i] = best;
            arg[i] = bj;
        }
        let (id, req) = (self.id, self.requires_grad());
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                let buf = store.buf(id, m * n);
                for i in 0..m {
                    buf[i * n + arg[i]] += gout[i];
                }
            })
        });
        self.graph.push(Shape::of(&[m]), out, req, backward)
    }

    // ---- row-wise softmax and normalisation ----

    /// Numerically stable softmax over each row of a rank-2 tensor.
    pub fn softmax_rows(&self) -> Var {
        let (m, n) = self.shape.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.values[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let y = Arc::new(out.clone());
        let (id, req) = (self.id, self.requires_grad());
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                let buf = store.buf(id, m * n);
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += gout[i * n + j] * y[i * n + j];
                    }
                    for j in 0..n {
                        buf[i * n + j] += y[i * n + j] * (gout[i * n + j] - dot);
                    }
                }
            })
        });
        self.graph.push(self.shape.clone(), out, req, backward)
    }

    /// Per-row layer normalisation with learnable gain and shift.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        self.same_graph(gamma);
        self.same_graph(beta);
        let (m, n) = self.shape.dims2();
        assert_eq!(gamma.shape, Shape::of(&[n]), "layer_norm: gamma must be [cols]");
        assert_eq!(beta.shape, Shape::of(&[n]), "layer_norm: beta must be [cols]");
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.values[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mu) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = gamma.values[j] * xh + beta.values[j];
            }
        }
        let xhat = Arc::new(xhat);
        let (xid, xreq) = (self.id, self.requires_grad());
        let (gid, greq, gv) = (gamma.id, gamma.requires_grad(), gamma.values.clone());
        let (bid, breq) = (beta.id, beta.requires_grad());
        let req = xreq || greq || breq;
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                if greq {
                    let buf = store.buf(gid, n);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += gout[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if breq {
                    let buf = store.buf(bid, n);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += gout[i * n + j];
                        }
                    }
                }
                if xreq {
                    let buf = store.buf(xid, m * n);
                    for i in 0..m {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..n {
                            let dxh = gout[i * n + j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[i * n + j];
                        }
                        mean_dxh /= n as f64;
                        mean_dxh_xh /= n as f64;
                        for j in 0..n {
                            let dxh = gout[i * n + j] * gv[j];
                            buf[i * n + j] +=
                                inv_std[i] * (dxh - mean_dxh - xhat[i * n + j] * mean_dxh_xh);
                        }
                    }
                }
            })
        });
        self.graph.push(self.shape.clone(), out, req, backward)
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// rescales by `1 / (1 - p)`, so the expectation is unchanged. Callers
    /// skip this entirely at evaluation time.
    pub fn dropout<R: Rng>(&self, p: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout: p must be in [0, 1)");
        if p == 0.0 {
            return self.clone();
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> =
            (0..self.numel()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let out = self.values.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let mask = Arc::new(mask);
        self.unary(out, move |i, _| mask[i])
    }

    // ---- sequence ops ----

    /// Stride-1 1-D convolution over a `[len, c_in]` sequence with a
    /// `[k, c_in, c_out]` kernel; output keeps the sequence length.
    pub fn conv1d(&self, weight: &Var, pad: PadMode) -> Var {
        self.same_graph(weight);
        let (len, cin) = self.shape.dims2();
        assert_eq!(weight.shape.rank(), 3, "conv1d: weight must be [k, c_in, c_out]");
        let (k, wcin, cout) = (weight.shape.0[0], weight.shape.0[1], weight.shape.0[2]);
        assert_eq!(cin, wcin, "conv1d: channel mismatch");
        if matches!(pad, PadMode::ZeroSame) {
            assert!(k % 2 == 1, "conv1d: ZeroSame requires an odd kernel");
        }
        assert!(k <= len, "conv1d: kernel longer than sequence");
        let mut out = vec![0.0; len * cout];
        for o in 0..len {
            for t in 0..k {
                let Some(src) = source_index(pad, len, k, o, t) else { continue };
                for ci in 0..cin {
                    let xv = self.values[src * cin + ci];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &weight.values[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                    let orow = &mut out[o * cout..(o + 1) * cout];
                    for co in 0..cout {
                        orow[co] += xv * wrow[co];
                    }
                }
            }
        }
        let (xid, xreq, xv) = (self.id, self.requires_grad(), self.values.clone());
        let (wid, wreq, wv) = (weight.id, weight.requires_grad(), weight.values.clone());
        let req = xreq || wreq;
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                if xreq {
                    let buf = store.buf(xid, len * cin);
                    for o in 0..len {
                        for t in 0..k {
                            let Some(src) = source_index(pad, len, k, o, t) else { continue };
                            for ci in 0..cin {
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    acc += gout[o * cout + co] * wv[(t * cin + ci) * cout + co];
                                }
                                buf[src * cin + ci] += acc;
                            }
                        }
                    }
                }
                if wreq {
                    let buf = store.buf(wid, k * cin * cout);
                    for o in 0..len {
                        for t in 0..k {
                            let Some(src) = source_index(pad, len, k, o, t) else { continue };
                            for ci in 0..cin {
                                let xval = xv[src * cin + ci];
                                if xval == 0.0 {
                                    continue;
                                }
                                for co in 0..cout {
                                    buf[(t * cin + ci) * cout + co] += xval * gout[o * cout + co];
                                }
                            }
                        }
                    }
                }
            })
        });
        self.graph.push(Shape::of(&[len, cout]), out, req, backward)
    }

    /// Max pooling along the sequence axis (kernel 2, stride 2); requires
    /// an even length. Gradient flows to the first of tied maxima.
    pub fn max_pool1d(&self) -> Var {
        let (len, c) = self.shape.dims2();
        assert!(len % 2 == 0 && len >= 2, "max_pool1d: length must be even and >= 2");
        let half = len / 2;
        let mut out = vec![0.0; half * c];
        let mut arg = vec![0usize; half * c];
        for o in 0..half {
            for j in 0..c {
                let (a, b) = (self.values[2 * o * c + j], self.values[(2 * o + 1) * c + j]);
                if b > a {
                    out[o * c + j] = b;
                    arg[o * c + j] = (2 * o + 1) * c + j;
                } else {
                    out[o * c + j] = a;
                    arg[o * c + j] = 2 * o * c + j;
                }
            }
        }
        let (id, req) = (self.id, self.requires_grad());
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                let buf = store.buf(id, len * c);
                for (g, &src) in gout.iter().zip(arg.iter()) {
                    buf[src] += g;
                }
            })
        });
        self.graph.push(Shape::of(&[half, c]), out, req, backward)
    }

    /// Look up rows of an embedding table `[vocab, d]` by token id.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Var {
        let (vocab, d) = self.shape.dims2();
        assert!(ids.iter().all(|i| *i < vocab), "embedding_lookup: id out of vocabulary");
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.values[i * d..(i + 1) * d]);
        }
        let (id, req) = (self.id, self.requires_grad());
        let ids_owned = ids.to_vec();
        let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
            Box::new(move |gout, store| {
                let buf = store.buf(id, vocab * d);
                for (r, &i) in ids_owned.iter().enumerate() {
                    for j in 0..d {
                        buf[i * d + j] += gout[r * d + j];
                    }
                }
            })
        });
        self.graph.push(Shape::of(&[ids.len(), d]), out, req, backward)
    }
}

/// Concatenate rank-2 tensors along rows (`axis = 0`) or columns (`axis = 1`).
pub fn concat(parts: &[Var], axis: usize) -> Var {
    assert!(!parts.is_empty(), "concat: needs at least one part");
    assert!(axis < 2, "concat: axis must be 0 or 1");
    let graph = parts[0].graph.clone();
    for p in &parts[1..] {
        parts[0].same_graph(p);
    }
    let dims: Vec<(usize, usize)> = parts.iter().map(|p| p.shape.dims2()).collect();
    let (out_shape, out): (Shape, Vec<f64>) = if axis == 0 {
        let n = dims[0].1;
        assert!(dims.iter().all(|d| d.1 == n), "concat: column counts differ");
        let m: usize = dims.iter().map(|d| d.0).sum();
        let mut out = Vec::with_capacity(m * n);
        for p in parts {
            out.extend_from_slice(p.values());
        }
        (Shape::of(&[m, n]), out)
    } else {
        let m = dims[0].0;
        assert!(dims.iter().all(|d| d.0 == m), "concat: row counts differ");
        let n: usize = dims.iter().map(|d| d.1).sum();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let mut off = 0;
            for (p, d) in parts.iter().zip(&dims) {
                out[i * n + off..i * n + off + d.1]
                    .copy_from_slice(&p.values()[i * d.1..(i + 1) * d.1]);
                off += d.1;
            }
        }
        (Shape::of(&[m, n]), out)
    };
    let req = parts.iter().any(|p| p.requires_grad());
    let meta: Vec<(usize, bool, usize, usize)> =
        parts.iter().zip(&dims).map(|(p, d)| (p.id, p.requires_grad(), d.0, d.1)).collect();
    let total_cols: usize = dims.iter().map(|d| d.1).sum();
    let backward: Option<BackwardFn> = req.then(|| -> BackwardFn {
        Box::new(move |gout, store| {
            if axis == 0 {
                let mut row_off = 0;
                for &(pid, preq, pm, pn) in &meta {
                    if preq {
                        store.add_slice(pid, &gout[row_off * pn..(row_off + pm) * pn]);
                    }
                    row_off += pm;
                }
            } else {
                let m = meta[0].2;
                let mut col_off = 0;
                for &(pid, preq, _, pn) in &meta {
                    if preq {
                        let buf = store.buf(pid, m * pn);
                        for i in 0..m {
                            for j in 0..pn {
                                buf[i * pn + j] += gout[i * total_cols + col_off + j];
                            }
                        }
                    }
                    col_off += pn;
                }
            }
        })
    });
    graph.push(out_shape, out, req, backward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn param(g: &Graph, dims: &[usize], vals: &[f64]) -> Var {
        g.param(Shape::of(dims), Arc::new(vals.to_vec()))
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let g = Graph::new();
        let a = param(&g, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = param(&g, &[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.values(), &[58.0, 64.0, 139.0, 154.0]);
        let grads = c.sum_all().backward();
        // dA[i,l] = sum_j B[l,j]
        assert_eq!(grads.get(&a).unwrap(), &[15.0, 19.0, 23.0, 15.0, 19.0, 23.0]);
        // dB[l,j] = sum_i A[i,l]
        assert_eq!(grads.get(&b).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let g = Graph::new();
        let x = param(&g, &[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]);
        let y = x.softmax_rows();
        for i in 0..2 {
            let s: f64 = y.values()[i * 3..(i + 1) * 3].iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
        // the huge logit dominates without overflow
        assert!(y.values()[5] > 0.999);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let g = Graph::new();
        let x = param(&g, &[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]);
        let gamma = g.constant(Shape::of(&[4]), vec![1.0; 4]);
        let beta = g.constant(Shape::of(&[4]), vec![0.0; 4]);
        let y = x.layer_norm(&gamma, &beta, 1e-12);
        for i in 0..2 {
            let row = &y.values()[i * 4..(i + 1) * 4];
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(mu, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn causal_conv_ignores_the_future() {
        let g = Graph::new();
        let x = param(&g, &[6, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = param(&g, &[3, 1, 1], &[0.25, 0.5, 1.0]);
        let y = x.conv1d(&w, PadMode::CausalLeft);
        // y[t] = 0.25 x[t-2] + 0.5 x[t-1] + 1.0 x[t]
        assert_abs_diff_eq!(y.values()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.values()[1], 0.5 + 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.values()[2], 0.25 + 1.0 + 3.0, epsilon = 1e-12);
    }

    #[test]
    fn circular_conv_wraps() {
        let g = Graph::new();
        let x = param(&g, &[4, 1], &[1.0, 2.0, 3.0, 4.0]);
        let w = param(&g, &[3, 1, 1], &[1.0, 0.0, 0.0]);
        // kernel picks x[t-1] with wraparound
        let y = x.conv1d(&w, PadMode::Circular);
        assert_eq!(y.values(), &[4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn max_pool_halves_and_routes_gradient() {
        let g = Graph::new();
        let x = param(&g, &[4, 2], &[1.0, 9.0, 5.0, 2.0, 0.0, 0.0, -1.0, 3.0]);
        let y = x.max_pool1d();
        assert_eq!(y.shape(), &Shape::of(&[2, 2]));
        assert_eq!(y.values(), &[5.0, 9.0, 0.0, 3.0]);
        let grads = y.sum_all().backward();
        assert_eq!(grads.get(&x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_axis0_then_slice_recovers_parts() {
        let g = Graph::new();
        let a = param(&g, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = param(&g, &[1, 2], &[5.0, 6.0]);
        let c = concat(&[a.clone(), b.clone()], 0);
        assert_eq!(c.values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = c.slice_rows(2, 1);
        assert_eq!(back.values(), b.values());
    }

    #[test]
    fn dropout_scales_survivors() {
        use rand::SeedableRng;
        let g = Graph::new();
        let x = param(&g, &[1, 100], &[1.0; 100]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let y = x.dropout(0.5, &mut rng);
        let survivors: Vec<f64> = y.values().iter().cloned().filter(|v| *v != 0.0).collect();
        assert!(survivors.iter().all(|v| (*v - 2.0).abs() < 1e-12));
        assert!(survivors.len() > 20 && survivors.len() < 80);
    }

    #[test]
    fn row_scatter_replace_swaps_rows_and_splits_gradient() {
        let g = Graph::new();
        let base = param(&g, &[3, 2], &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        let rows = param(&g, &[1, 2], &[9.0, 9.0]);
        let y = base.row_scatter_replace(&rows, &[1]);
        assert_eq!(y.values(), &[0.0, 0.0, 9.0, 9.0, 2.0, 2.0]);
        let grads = y.sum_all().backward();
        assert_eq!(grads.get(&base).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(grads.get(&rows).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn embedding_gradients_accumulate_per_token() {
        let g = Graph::new();
        let table = param(&g, &[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let y = table.embedding_lookup(&[2, 0, 2]);
        assert_eq!(y.values(), &[0.5, 0.6, 0.1, 0.2, 0.5, 0.6]);
        let grads = y.sum_all().backward();
        assert_eq!(grads.get(&table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
