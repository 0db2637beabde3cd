//! Dense f64 tensor with a reverse-mode gradient tape.
//!
//! Tensors are handles onto shared nodes. An operation whose inputs are
//! tracked records its parents and a backward closure; `backward()` on a
//! scalar walks the recorded graph in reverse topological order. Recording
//! is skipped entirely inside [`no_grad`] or when no input is tracked, so
//! plain evaluation carries no tape cost.
//!
//! A tape is confined to one thread; parallel work uses independent model
//! instances each with their own tensors.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::linalg;
use crate::numerics::rng::Rng;
use crate::numerics::scalar;

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Evaluates `f` with gradient recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn recording() -> bool {
    !NO_GRAD.with(|c| c.get())
}

type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor])>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle onto a value in the computation graph.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<RefCell<Node>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.node.borrow();
        write!(f, "Tensor{:?}(requires_grad={})", n.shape, n.requires_grad)
    }
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(RefCell::new(Node {
                shape,
                data,
                requires_grad,
                grad: None,
                parents,
                backward,
            })),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor::new_node(shape.to_vec(), data, false, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![0.0; numel], false, vec![], None)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![v; numel], false, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_node(vec![1], vec![v], false, vec![], None)
    }

    /// Xavier-uniform init for a (rows×cols) linear map.
    pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = rng.uniform_vec(rows * cols, -limit, limit);
        Tensor::new_node(vec![rows, cols], data, false, vec![], None)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new_node(shape.to_vec(), rng.uniform_vec(numel, lo, hi), false, vec![], None)
    }

    fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        bw: impl Fn(&[f64], &[f64], &[Tensor]) + 'static,
    ) -> Tensor {
        if recording() && parents.iter().any(Tensor::requires_grad) {
            Tensor::new_node(shape, data, true, parents, Some(Box::new(bw)))
        } else {
            Tensor::new_node(shape, data, false, vec![], None)
        }
    }

    // ---- accessors ------------------------------------------------------

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.borrow().data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.node.borrow().data.clone()
    }

    /// Zero-copy read access to the value buffer.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.node.borrow().data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.node.borrow();
        assert_eq!(n.data.len(), 1, "item() on non-scalar tensor {:?}", n.shape);
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    /// Marks a leaf as trainable (or not). Only meaningful on leaves.
    pub fn set_requires_grad(&self, flag: bool) {
        self.node.borrow_mut().requires_grad = flag;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    /// Overwrites the value buffer in place (same length required).
    pub fn set_data(&self, new: &[f64]) {
        let mut n = self.node.borrow_mut();
        assert_eq!(n.data.len(), new.len(), "set_data length mismatch");
        n.data.copy_from_slice(new);
    }

    pub fn add_to_data(&self, delta: &[f64]) {
        let mut n = self.node.borrow_mut();
        assert_eq!(n.data.len(), delta.len());
        for (d, &x) in n.data.iter_mut().zip(delta) {
            *d += x;
        }
    }

    fn add_to_grad(&self, g: &[f64]) {
        let mut n = self.node.borrow_mut();
        if !n.requires_grad {
            return;
        }
        let len = n.data.len();
        let grad = n.grad.get_or_insert_with(|| vec![0.0; len]);
        debug_assert_eq!(grad.len(), g.len());
        for (gi, &x) in grad.iter_mut().zip(g) {
            *gi += x;
        }
    }

    fn ptr(&self) -> *const RefCell<Node> {
        Rc::as_ptr(&self.node)
    }

    // ---- backward pass ---------------------------------------------------

    /// Reverse-mode pass from a scalar. Populates `grad` on every tracked
    /// tensor that participated in the computation.
    pub fn backward(&self) -> Result<()> {
        {
            let n = self.node.borrow();
            if n.data.len() != 1 {
                return Err(Error::Shape(format!(
                    "backward requires a scalar, got shape {:?}",
                    n.shape
                )));
            }
            if !n.data[0].is_finite() {
                return Err(Error::Numeric(format!("backward from non-finite value {}", n.data[0])));
            }
            if !n.requires_grad {
                return Ok(()); // nothing tracked
            }
        }
        self.add_to_grad(&[1.0]);
        let order = topo_order(self);
        for node in order.iter().rev() {
            let n = node.node.borrow();
            if let (Some(bw), Some(grad)) = (&n.backward, &n.grad) {
                bw(grad, &n.data, &n.parents);
            }
        }
        Ok(())
    }

    // ---- elementwise ops --------------------------------------------------

    fn map_unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Tensor {
        let (shape, data) = {
            let n = self.node.borrow();
            (n.shape.clone(), n.data.iter().map(|&x| f(x)).collect::<Vec<_>>())
        };
        Tensor::from_op(shape, data, vec![self.clone()], move |g, _out, parents| {
            let gx = parents[0].with_data(|x| {
                x.iter().zip(g).map(|(&xi, &gi)| gi * df(xi)).collect::<Vec<_>>()
            });
            parents[0].add_to_grad(&gx);
        })
    }

    pub fn neg(&self) -> Tensor {
        self.map_unary(|x| -x, |_| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        let (shape, data) = {
            let n = self.node.borrow();
            (n.shape.clone(), n.data.iter().map(|&x| x.exp()).collect::<Vec<_>>())
        };
        Tensor::from_op(shape, data, vec![self.clone()], |g, out, parents| {
            let gx: Vec<f64> = g.iter().zip(out).map(|(&gi, &oi)| gi * oi).collect();
            parents[0].add_to_grad(&gx);
        })
    }

    pub fn silu(&self) -> Tensor {
        self.map_unary(scalar::silu, scalar::silu_deriv)
    }

    pub fn gelu(&self) -> Tensor {
        self.map_unary(scalar::gelu, scalar::gelu_deriv)
    }

    pub fn softplus(&self) -> Tensor {
        self.map_unary(scalar::softplus, scalar::softplus_deriv)
    }

    /// (e^z - 1)/z extended with value 1 at z = 0.
    pub fn phi1(&self) -> Tensor {
        self.map_unary(scalar::phi1, scalar::phi1_deriv)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map_unary(move |x| c * x, move |_| c)
    }

    fn assert_same_shape(&self, o: &Tensor, what: &str) {
        assert_eq!(
            self.node.borrow().shape,
            o.node.borrow().shape,
            "{what}: shape mismatch"
        );
    }

    pub fn add(&self, o: &Tensor) -> Tensor {
        self.assert_same_shape(o, "add");
        let (shape, data) = {
            let a = self.node.borrow();
            let b = o.node.borrow();
            let d = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
            (a.shape.clone(), d)
        };
        Tensor::from_op(shape, data, vec![self.clone(), o.clone()], |g, _out, parents| {
            parents[0].add_to_grad(g);
            parents[1].add_to_grad(g);
        })
    }

    pub fn sub(&self, o: &Tensor) -> Tensor {
        self.assert_same_shape(o, "sub");
        let (shape, data) = {
            let a = self.node.borrow();
            let b = o.node.borrow();
            let d = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
            (a.shape.clone(), d)
        };
        Tensor::from_op(shape, data, vec![self.clone(), o.clone()], |g, _out, parents| {
            parents[0].add_to_grad(g);
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            parents[1].add_to_grad(&neg);
        })
    }

    pub fn mul(&self, o: &Tensor) -> Tensor {
        self.assert_same_shape(o, "mul");
        let (shape, data) = {
            let a = self.node.borrow();
            let b = o.node.borrow();
            let d = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
            (a.shape.clone(), d)
        };
        Tensor::from_op(shape, data, vec![self.clone(), o.clone()], |g, _out, parents| {
            let ga = parents[1].with_data(|b| g.iter().zip(b).map(|(&gi, &bi)| gi * bi).collect::<Vec<_>>());
            parents[0].add_to_grad(&ga);
            let gb = parents[0].with_data(|a| g.iter().zip(a).map(|(&gi, &ai)| gi * ai).collect::<Vec<_>>());
            parents[1].add_to_grad(&gb);
        })
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.node.borrow().data.iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |g, _out, parents| {
            parents[0].add_to_grad(&vec![g[0]; n]);
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    // ---- structure ops ----------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}: element counts differ",
                self.shape(),
                shape
            )));
        }
        let data = self.data();
        Ok(Tensor::from_op(shape.to_vec(), data, vec![self.clone()], |g, _out, parents| {
            parents[0].add_to_grad(g);
        }))
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = self.dims2("transpose");
        let data = self.with_data(|d| linalg::transpose(d, m, n));
        Tensor::from_op(vec![n, m], data, vec![self.clone()], move |g, _out, parents| {
            parents[0].add_to_grad(&linalg::transpose(g, n, m));
        })
    }

    fn dims2(&self, what: &str) -> (usize, usize) {
        let n = self.node.borrow();
        assert_eq!(n.shape.len(), 2, "{what}: expected 2-d tensor, got {:?}", n.shape);
        (n.shape[0], n.shape[1])
    }

    pub fn narrow_rows(&self, start: usize, len: usize) -> Tensor {
        let (m, n) = self.dims2("narrow_rows");
        assert!(start + len <= m, "narrow_rows out of range");
        let data = self.with_data(|d| d[start * n..(start + len) * n].to_vec());
        Tensor::from_op(vec![len, n], data, vec![self.clone()], move |g, _out, parents| {
            let mut full = vec![0.0; m * n];
            full[start * n..(start + len) * n].copy_from_slice(g);
            parents[0].add_to_grad(&full);
        })
    }

    pub fn narrow_cols(&self, start: usize, len: usize) -> Tensor {
        let (m, n) = self.dims2("narrow_cols");
        assert!(start + len <= n, "narrow_cols out of range");
        let data = self.with_data(|d| {
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&d[i * n + start..i * n + start + len]);
            }
            out
        });
        Tensor::from_op(vec![m, len], data, vec![self.clone()], move |g, _out, parents| {
            let mut full = vec![0.0; m * n];
            for i in 0..m {
                full[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            parents[0].add_to_grad(&full);
        })
    }

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = parts[0].dims2("concat_rows").1;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2("concat_rows");
            assert_eq!(pn, n, "concat_rows: column mismatch");
            rows += pm;
            lens.push(pm * n);
            p.with_data(|d| data.extend_from_slice(d));
        }
        Tensor::from_op(vec![rows, n], data, parts.to_vec(), move |g, _out, parents| {
            let mut off = 0;
            for (p, &len) in parents.iter().zip(&lens) {
                p.add_to_grad(&g[off..off + len]);
                off += len;
            }
        })
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = parts[0].dims2("concat_cols").0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pm, pn) = p.dims2("concat_cols");
                assert_eq!(pm, m, "concat_cols: row mismatch");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            p.with_data(|d| {
                for i in 0..m {
                    data[i * n + off..i * n + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
                }
            });
            off += w;
        }
        let widths_bw = widths.clone();
        Tensor::from_op(vec![m, n], data, parts.to_vec(), move |g, _out, parents| {
            let mut off = 0;
            for (p, &w) in parents.iter().zip(&widths_bw) {
                let mut gp = vec![0.0; m * w];
                for i in 0..m {
                    gp[i * w..(i + 1) * w].copy_from_slice(&g[i * n + off..i * n + off + w]);
                }
                p.add_to_grad(&gp);
                off += w;
            }
        })
    }

    /// Flat vector of length m replicated across `n` columns -> (m×n).
    pub fn repeat_cols(&self, n: usize) -> Tensor {
        let m = self.numel();
        let data = self.with_data(|v| {
            let mut out = Vec::with_capacity(m * n);
            for &x in v {
                out.extend(std::iter::repeat(x).take(n));
            }
            out
        });
        Tensor::from_op(vec![m, n], data, vec![self.clone()], move |g, _out, parents| {
            let mut gv = vec![0.0; m];
            for i in 0..m {
                gv[i] = g[i * n..(i + 1) * n].iter().sum();
            }
            parents[0].add_to_grad(&gv);
        })
    }

    /// Flat vector of length n replicated across `m` rows -> (m×n).
    pub fn repeat_rows(&self, m: usize) -> Tensor {
        let n = self.numel();
        let data = self.with_data(|v| {
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(v);
            }
            out
        });
        Tensor::from_op(vec![m, n], data, vec![self.clone()], move |g, _out, parents| {
            let mut gv = vec![0.0; n];
            for i in 0..m {
                linalg::axpy(1.0, &g[i * n..(i + 1) * n], &mut gv);
            }
            parents[0].add_to_grad(&gv);
        })
    }

    /// Adds a length-n bias vector to every row of an (m×n) tensor.
    pub fn add_row(&self, bias: &Tensor) -> Tensor {
        let (m, n) = self.dims2("add_row");
        assert_eq!(bias.numel(), n, "add_row: bias length mismatch");
        let data = self.with_data(|x| {
            bias.with_data(|b| {
                let mut out = x.to_vec();
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] += b[j];
                    }
                }
                out
            })
        });
        Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), bias.clone()],
            move |g, _out, parents| {
                parents[0].add_to_grad(g);
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    linalg::axpy(1.0, &g[i * n..(i + 1) * n], &mut gb);
                }
                parents[1].add_to_grad(&gb);
            },
        )
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&self, o: &Tensor) -> Result<Tensor> {
        let (m, k) = {
            let n = self.node.borrow();
            if n.shape.len() != 2 {
                return Err(Error::Shape(format!("matmul lhs not 2-d: {:?}", n.shape)));
            }
            (n.shape[0], n.shape[1])
        };
        let (k2, nn) = {
            let n = o.node.borrow();
            if n.shape.len() != 2 {
                return Err(Error::Shape(format!("matmul rhs not 2-d: {:?}", n.shape)));
            }
            (n.shape[0], n.shape[1])
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner extents disagree, lhs {:?} vs rhs {:?}",
                self.shape(),
                o.shape()
            )));
        }
        let data = self.with_data(|a| o.with_data(|b| linalg::mm(a, m, k, b, nn)));
        Ok(Tensor::from_op(
            vec![m, nn],
            data,
            vec![self.clone(), o.clone()],
            move |g, _out, parents| {
                // dA = g @ B^T, dB = A^T @ g
                let ga = parents[1].with_data(|b| linalg::mm_a_bt(g, m, nn, b, k));
                parents[0].add_to_grad(&ga);
                let gb = parents[0].with_data(|a| linalg::mm_at_b(a, m, k, g, nn));
                parents[1].add_to_grad(&gb);
            },
        ))
    }

    // ---- neural-net ops -------------------------------------------------------

    /// Stable softmax along `axis`. Errors on NaN input.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        if self.with_data(|d| d.iter().any(|x| x.is_nan())) {
            return Err(Error::Numeric("softmax over NaN input".into()));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut max = f64::NEG_INFINITY;
                for t in 0..lane {
                    max = max.max(data[base + t * inner]);
                }
                let mut sum = 0.0;
                for t in 0..lane {
                    let idx = base + t * inner;
                    data[idx] = (data[idx] - max).exp();
                    sum += data[idx];
                }
                for t in 0..lane {
                    data[base + t * inner] /= sum;
                }
            }
        }
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            move |g, out, parents| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane * inner + i;
                        let mut dot = 0.0;
                        for t in 0..lane {
                            let idx = base + t * inner;
                            dot += g[idx] * out[idx];
                        }
                        for t in 0..lane {
                            let idx = base + t * inner;
                            gx[idx] = out[idx] * (g[idx] - dot);
                        }
                    }
                }
                parents[0].add_to_grad(&gx);
            },
        ))
    }

    /// RMS normalization of the last axis, scaled by `gain`.
    pub fn rms_norm(&self, gain: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape();
        let n = *shape.last().expect("rms_norm on 0-d tensor");
        if gain.numel() != n {
            return Err(Error::Shape(format!(
                "rms_norm: last extent {} vs gain length {}",
                n,
                gain.numel()
            )));
        }
        let rows = self.numel() / n;
        let mut data = vec![0.0; self.numel()];
        let mut inv_rms = vec![0.0; rows];
        self.with_data(|x| {
            gain.with_data(|g| {
                for r in 0..rows {
                    let row = &x[r * n..(r + 1) * n];
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    inv_rms[r] = inv;
                    for j in 0..n {
                        data[r * n + j] = row[j] * inv * g[j];
                    }
                }
            })
        });
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), gain.clone()],
            move |g_out, _out, parents| {
                let x = parents[0].data();
                let gain_v = parents[1].data();
                let mut gx = vec![0.0; x.len()];
                let mut gg = vec![0.0; gain_v.len()];
                for r in 0..rows {
                    let row = &x[r * n..(r + 1) * n];
                    let go = &g_out[r * n..(r + 1) * n];
                    let inv = inv_rms[r];
                    // s = sum_i go_i * gain_i * x_i
                    let mut s = 0.0;
                    for j in 0..n {
                        s += go[j] * gain_v[j] * row[j];
                    }
                    let c = s * inv * inv * inv / n as f64;
                    for j in 0..n {
                        gx[r * n + j] = go[j] * gain_v[j] * inv - c * row[j];
                        gg[j] += go[j] * row[j] * inv;
                    }
                }
                parents[0].add_to_grad(&gx);
                parents[1].add_to_grad(&gg);
            },
        ))
    }

    /// Row lookup into an embedding table; gradients scatter back into the table.
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = table.dims2("embedding");
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Domain(format!(
                "token id {bad} out of range for vocabulary {v}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        table.with_data(|t| {
            for &id in ids {
                data.extend_from_slice(&t[id * d..(id + 1) * d]);
            }
        });
        let ids_bw = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            data,
            vec![table.clone()],
            move |g, _out, parents| {
                let mut gt = vec![0.0; v * d];
                for (row, &id) in ids_bw.iter().enumerate() {
                    linalg::axpy(1.0, &g[row * d..(row + 1) * d], &mut gt[id * d..(id + 1) * d]);
                }
                parents[0].add_to_grad(&gt);
            },
        ))
    }

    /// Mean negative log-likelihood over masked-in rows of (L×V) logits.
    pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
        let (rows, vocab) = logits.dims2("cross_entropy_rows");
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy_rows: {rows} logit rows vs {} targets / {} mask flags",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Domain(format!(
                "target id {bad} out of range for vocabulary {vocab}"
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Domain("all positions masked out of the loss".into()));
        }
        let mut total = 0.0;
        logits.with_data(|z| {
            for r in 0..rows {
                if !mask[r] {
                    continue;
                }
                let row = &z[r * vocab..(r + 1) * vocab];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[targets[r]];
            }
        });
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let targets_bw = targets.to_vec();
        let mask_bw = mask.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![logits.clone()],
            move |g, _out, parents| {
                let scale = g[0] / count as f64;
                let gz = parents[0].with_data(|z| {
                    let mut gz = vec![0.0; z.len()];
                    for r in 0..rows {
                        if !mask_bw[r] {
                            continue;
                        }
                        let row = &z[r * vocab..(r + 1) * vocab];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for e in exps.iter_mut() {
                            *e /= sum;
                        }
                        for j in 0..vocab {
                            gz[r * vocab + j] = scale * exps[j];
                        }
                        gz[r * vocab + targets_bw[r]] -= scale;
                    }
                    gz
                });
                parents[0].add_to_grad(&gz);
            },
        ))
    }

    /// Depthwise causal convolution along rows: out[t,c] = b[c] + Σ_j w[j,c]·x[t-j,c].
    pub fn depthwise_causal_conv(&self, weight: &Tensor, bias: &Tensor) -> Tensor {
        let (len, ch) = self.dims2("depthwise_causal_conv");
        let (width, wch) = weight.dims2("depthwise_causal_conv weight");
        assert_eq!(ch, wch, "conv weight channel mismatch");
        assert_eq!(bias.numel(), ch, "conv bias channel mismatch");
        let mut data = vec![0.0; len * ch];
        self.with_data(|x| {
            weight.with_data(|w| {
                bias.with_data(|b| {
                    for t in 0..len {
                        for c in 0..ch {
                            let mut acc = b[c];
                            for j in 0..width.min(t + 1) {
                                acc += w[j * ch + c] * x[(t - j) * ch + c];
                            }
                            data[t * ch + c] = acc;
                        }
                    }
                })
            })
        });
        Tensor::from_op(
            vec![len, ch],
            data,
            vec![self.clone(), weight.clone(), bias.clone()],
            move |g, _out, parents| {
                let gx = parents[1].with_data(|w| {
                    let mut gx = vec![0.0; len * ch];
                    for t in 0..len {
                        for c in 0..ch {
                            let gv = g[t * ch + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for j in 0..width.min(t + 1) {
                                gx[(t - j) * ch + c] += gv * w[j * ch + c];
                            }
                        }
                    }
                    gx
                });
                parents[0].add_to_grad(&gx);
                let gw = parents[0].with_data(|x| {
                    let mut gw = vec![0.0; width * ch];
                    for t in 0..len {
                        for c in 0..ch {
                            let gv = g[t * ch + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for j in 0..width.min(t + 1) {
                                gw[j * ch + c] += gv * x[(t - j) * ch + c];
                            }
                        }
                    }
                    gw
                });
                parents[1].add_to_grad(&gw);
                let mut gb = vec![0.0; ch];
                for t in 0..len {
                    linalg::axpy(1.0, &g[t * ch..(t + 1) * ch], &mut gb);
                }
                parents[2].add_to_grad(&gb);
            },
        )
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const RefCell<Node>> = HashSet::new();
    visited.insert(root.ptr());
    // iterative post-order: (node, next parent index to explore)
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((node, idx)) = stack.pop() {
        let next = {
            let n = node.node.borrow();
            n.parents.get(idx).cloned()
        };
        match next {
            Some(parent) => {
                stack.push((node, idx + 1));
                if visited.insert(parent.ptr()) {
                    stack.push((parent, 0));
                }
            }
            None => order.push(node),
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tracked(shape: &[usize], data: Vec<f64>) -> Tensor {
        let t = Tensor::from_vec(shape, data).unwrap();
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 2.5, 7.0]).unwrap();
        let out = eye.matmul(&m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_bt() {
        let mut rng = Rng::new(11);
        let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        a.set_requires_grad(true);
        let b = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let loss = a.matmul(&b).unwrap().sum();
        loss.backward().unwrap();
        let ga = a.grad().unwrap();
        // d sum(A@B) / dA = ones(3,2) @ B^T
        let ones = vec![1.0; 6];
        let expect = linalg::mm_a_bt(&ones, 3, 2, &b.data(), 4);
        for (g, e) in ga.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let t = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(t.softmax(0).unwrap().data(), vec![0.5, 0.5]);
        let big = Tensor::from_vec(&[2], vec![1000.0, 1000.0]).unwrap();
        assert_eq!(big.softmax(0).unwrap().data(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let t = Tensor::from_vec(&[3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let s = t.softmax(0).unwrap().data();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, e) in s.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_nan_is_numeric_error() {
        let t = Tensor::from_vec(&[2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(t.softmax(0), Err(Error::Numeric(_))));
    }

    #[test]
    fn rms_norm_cases() {
        let ones = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        let gain = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        assert_eq!(ones.rms_norm(&gain, 0.0).unwrap().data(), vec![1.0; 4]);

        let zero_gain = Tensor::zeros(&[4]);
        let x = Tensor::from_vec(&[4], vec![0.3, -2.0, 5.0, 1.0]).unwrap();
        assert_eq!(x.rms_norm(&zero_gain, 0.0).unwrap().data(), vec![0.0; 4]);

        let mut rng = Rng::new(5);
        let r = Tensor::uniform(&[8], -3.0, 3.0, &mut rng);
        let y = r.rms_norm(&Tensor::from_vec(&[8], vec![1.0; 8]).unwrap(), 0.0).unwrap();
        let rms = (y.data().iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-9);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = tracked(&[2], vec![1.0, 2.0]);
        let y = no_grad(|| x.mul(&x).sum());
        assert!(!y.requires_grad());
    }

    #[test]
    fn mul_with_shared_operand_accumulates_both_paths() {
        let x = tracked(&[3], vec![1.0, 2.0, 3.0]);
        let loss = x.mul(&x).sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn cross_entropy_hand_case() {
        let logits = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 3f64.ln(), 0.0]).unwrap();
        let loss = Tensor::cross_entropy_rows(&logits, &[0, 0], &[true, true]).unwrap();
        let expect = (2f64.ln() + (4f64 / 3.0).ln()) / 2.0;
        assert!((loss.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_all_masked_is_domain_error() {
        let logits = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            Tensor::cross_entropy_rows(&logits, &[0, 1], &[false, false]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let table = Tensor::zeros(&[4, 2]);
        assert!(matches!(Tensor::embedding(&table, &[4]), Err(Error::Domain(_))));
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let a = tracked(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let top = a.narrow_rows(0, 1);
        let bot = a.narrow_rows(1, 1);
        let back = Tensor::concat_rows(&[top, bot]);
        assert_eq!(back.data(), a.data());
        back.sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }
}
