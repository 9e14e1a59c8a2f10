use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};

/// Dense f64 tensor with dynamic rank.
pub type Arr = ArrayD<f64>;

type BackFn = Box<dyn Fn(&Arr, &mut dyn FnMut(usize, Arr))>;

struct Node {
    value: Rc<Arr>,
    backward: Option<(Vec<usize>, BackFn)>,
}

/// Records one forward pass. Cheap to create; dropped after backward.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape. `Copy`, so expressions read naturally.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) idx: usize,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Grads {
    grads: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Arr> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input node: no backward function, but gradients are still collected
    /// for it (parameters and, e.g., REFL reward inputs are leaves).
    pub fn leaf(&self, value: Arr) -> Var<'_> {
        self.push(value, None)
    }

    pub(crate) fn push(&self, value: Arr, backward: Option<(Vec<usize>, BackFn)>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            backward,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, idx: usize) -> Rc<Arr> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    /// Reverse sweep from a scalar node. Panics if `out` is not 1-element.
    pub fn backward(&self, out: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[out.idx].value.len(),
            1,
            "backward() requires a scalar output node"
        );
        let mut grads: Vec<Option<Arr>> = vec![None; nodes.len()];
        grads[out.idx] = Some(Arr::ones(nodes[out.idx].value.raw_dim()));
        for i in (0..=out.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some((parents, back)) = &nodes[i].backward {
                back(&g, &mut |slot: usize, contrib: Arr| {
                    let pid = parents[slot];
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        entry @ None => *entry = Some(contrib),
                    }
                });
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Arr> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value as f64; panics unless the node holds exactly one element.
    pub fn scalar(&self) -> f64 {
        crate::scalar(&self.value())
    }

    fn unary(self, value: Arr, back: impl Fn(&Arr, &mut dyn FnMut(usize, Arr)) + 'static) -> Var<'t> {
        self.tape.push(value, Some((vec![self.idx], Box::new(back))))
    }

    fn binary(
        self,
        other: Var<'t>,
        value: Arr,
        back: impl Fn(&Arr, &mut dyn FnMut(usize, Arr)) + 'static,
    ) -> Var<'t> {
        self.tape
            .push(value, Some((vec![self.idx, other.idx], Box::new(back))))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        self.binary(other, &*a + &*b, |g, sink| {
            sink(0, g.clone());
            sink(1, g.clone());
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        self.binary(other, &*a - &*b, |g, sink| {
            sink(0, g.clone());
            sink(1, -g);
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        self.binary(other, &*a * &*b, move |g, sink| {
            sink(0, g * &*b);
            sink(1, g * &*a);
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(-&*self.value(), |g, sink| sink(0, -g))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(&*self.value() * c, move |g, sink| sink(0, g * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(&*self.value() + c, |g, sink| sink(0, g.clone()))
    }

    /// Elementwise addition of a constant array (no gradient to the constant).
    pub fn add_const(self, c: &Arr) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape(), "add_const: shape mismatch");
        self.unary(&*a + c, |g, sink| sink(0, g.clone()))
    }

    /// 2D matrix product.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a2 = as2(&self.value());
        let b2 = as2(&other.value());
        assert_eq!(a2.shape()[1], b2.shape()[0], "matmul: inner dim mismatch");
        let out = a2.dot(&b2).into_dyn();
        let (av, bv) = (self.value(), other.value());
        self.binary(other, out, move |g, sink| {
            let g2 = as2(g);
            sink(0, g2.dot(&as2(&bv).t()).into_dyn());
            sink(1, as2(&av).t().dot(&g2).into_dyn());
        })
    }

    /// 2D transpose.
    pub fn transpose(self) -> Var<'t> {
        let v = as2(&self.value()).t().to_owned().into_dyn();
        self.unary(v, |g, sink| sink(0, as2(g).t().to_owned().into_dyn()))
    }

    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let shape = a.raw_dim();
        let s = Arr::from_elem(IxDyn(&[]), a.sum());
        self.unary(s, move |g, sink| {
            sink(0, Arr::from_elem(shape.clone(), g[[]]))
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean squared error against another var of the same shape.
    pub fn mse(self, target: Var<'t>) -> Var<'t> {
        let d = self.sub(target);
        d.mul(d).mean()
    }

    /// Columns `[a, b)` of a 2D matrix.
    pub fn slice_cols(self, a: usize, b: usize) -> Var<'t> {
        let v = self.value();
        let v2 = as2(&v);
        let (rows, cols) = (v2.shape()[0], v2.shape()[1]);
        assert!(a <= b && b <= cols, "slice_cols: bad range {a}..{b} of {cols}");
        let out = v2.slice(ndarray::s![.., a..b]).to_owned().into_dyn();
        self.unary(out, move |g, sink| {
            let mut full = ndarray::Array2::<f64>::zeros((rows, cols));
            full.slice_mut(ndarray::s![.., a..b]).assign(&as2(g));
            sink(0, full.into_dyn());
        })
    }

    /// Rows `[a, b)` of a 2D matrix.
    pub fn slice_rows(self, a: usize, b: usize) -> Var<'t> {
        let v = self.value();
        let v2 = as2(&v);
        let (rows, cols) = (v2.shape()[0], v2.shape()[1]);
        assert!(a <= b && b <= rows, "slice_rows: bad range {a}..{b} of {rows}");
        let out = v2.slice(ndarray::s![a..b, ..]).to_owned().into_dyn();
        self.unary(out, move |g, sink| {
            let mut full = ndarray::Array2::<f64>::zeros((rows, cols));
            full.slice_mut(ndarray::s![a..b, ..]).assign(&as2(g));
            sink(0, full.into_dyn());
        })
    }

    /// Broadcast-add a `1 x d` row vector over every row of an `L x d` matrix.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (a, r) = (self.value(), row.value());
        let a2 = as2(&a);
        let r2 = as2(&r);
        assert_eq!(r2.shape()[0], 1, "add_row: row must be 1 x d");
        assert_eq!(a2.shape()[1], r2.shape()[1], "add_row: width mismatch");
        let out = (&a2 + &r2.row(0)).into_dyn();
        self.binary(row, out, |g, sink| {
            let g2 = as2(g);
            sink(0, g.clone());
            sink(1, g2.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn());
        })
    }

    /// Broadcast-multiply a `1 x d` row vector over every row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let (a, r) = (self.value(), row.value());
        let a2 = as2(&a);
        let r2 = as2(&r);
        assert_eq!(r2.shape()[0], 1, "mul_row: row must be 1 x d");
        assert_eq!(a2.shape()[1], r2.shape()[1], "mul_row: width mismatch");
        let out = (&a2 * &r2.row(0)).into_dyn();
        self.binary(row, out, move |g, sink| {
            let g2 = as2(g);
            sink(0, (&g2 * &as2(&r).row(0)).into_dyn());
            let dr = (&g2 * &as2(&a)).sum_axis(Axis(0)).insert_axis(Axis(0));
            sink(1, dr.into_dyn());
        })
    }

    /// Add a constant row (`d`-vector) to every row; used for attention
    /// mask biases. No gradient to the constant.
    pub fn add_const_row(self, row: &ndarray::Array1<f64>) -> Var<'t> {
        let a = self.value();
        let a2 = as2(&a);
        assert_eq!(a2.shape()[1], row.len(), "add_const_row: width mismatch");
        let out = (&a2 + row).into_dyn();
        self.unary(out, |g, sink| sink(0, g.clone()))
    }

    /// Row-wise softmax of a 2D matrix.
    pub fn softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let a2 = as2(&a);
        let mut out = a2.to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let y = out.into_dyn();
        let yc = y.clone();
        self.unary(y, move |g, sink| {
            let g2 = as2(g);
            let y2 = as2(&yc);
            let dot = (&g2 * &y2).sum_axis(Axis(1)).insert_axis(Axis(1));
            sink(0, (&y2 * &(&g2 - &dot)).into_dyn());
        })
    }

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm_rows(self, eps: f64) -> Var<'t> {
        let a = self.value();
        let a2 = as2(&a);
        let n = a2.shape()[1] as f64;
        let mu = a2.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let centered = &a2 - &mu;
        let var = centered.mapv(|x| x * x).mean_axis(Axis(1)).unwrap();
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt()).insert_axis(Axis(1));
        let xhat = (&centered * &inv_std).into_dyn();
        let xc = xhat.clone();
        self.unary(xhat, move |g, sink| {
            let g2 = as2(g);
            let x2 = as2(&xc);
            let mean_g = g2.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
            let mean_gx = (&g2 * &x2).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
            let dx = (&inv_std) * &(&g2 - &mean_g - &(&x2 * &mean_gx));
            let _ = n;
            sink(0, dx.into_dyn());
        })
    }

    /// Row-wise RMS norm (no scale; compose with `mul_row` for a learned one).
    pub fn rms_norm_rows(self, eps: f64) -> Var<'t> {
        let a = self.value();
        let a2 = as2(&a).to_owned();
        let n = a2.shape()[1] as f64;
        let rms = a2
            .mapv(|x| x * x)
            .mean_axis(Axis(1))
            .unwrap()
            .mapv(|m| (m + eps).sqrt())
            .insert_axis(Axis(1));
        let y = (&a2 / &rms).into_dyn();
        self.unary(y, move |g, sink| {
            let g2 = as2(g);
            let gx = (&g2 * &a2).sum_axis(Axis(1)).insert_axis(Axis(1));
            let r3 = rms.mapv(|r| r * r * r);
            let dx = &(&g2 / &rms) - &(&a2 * &(&gx / &(r3 * n)));
            sink(0, dx.into_dyn());
        })
    }

    pub fn gelu(self) -> Var<'t> {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const K: f64 = 0.044715;
        let a = self.value();
        let y = a.mapv(|x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh()));
        let av = a.clone();
        self.unary(y, move |g, sink| {
            let d = av.mapv(|x| {
                let u = C * (x + K * x * x * x);
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * K * x * x)
            });
            sink(0, g * &d);
        })
    }

    pub fn silu(self) -> Var<'t> {
        let a = self.value();
        let y = a.mapv(|x| x * sigmoid(x));
        let av = a.clone();
        self.unary(y, move |g, sink| {
            let d = av.mapv(|x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            });
            sink(0, g * &d);
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = self.value().mapv(sigmoid);
        let yc = y.clone();
        self.unary(y, move |g, sink| sink(0, g * &yc.mapv(|s| s * (1.0 - s))))
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        let y = a.mapv(|x| x.max(0.0));
        let av = a.clone();
        self.unary(y, move |g, sink| {
            sink(0, g * &av.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))
        })
    }

    /// Numerically stable `log(1 + exp(x))`; `-log sigmoid(x) = softplus(-x)`.
    pub fn softplus(self) -> Var<'t> {
        let a = self.value();
        let y = a.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let av = a.clone();
        self.unary(y, move |g, sink| sink(0, g * &av.mapv(sigmoid)))
    }

    /// Row gather from an embedding table (`V x d`); ids index rows.
    pub fn embedding(self, ids: &[usize]) -> Var<'t> {
        let table = self.value();
        let t2 = as2(&table);
        let (v, d) = (t2.shape()[0], t2.shape()[1]);
        let mut out = ndarray::Array2::<f64>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "embedding: id {id} out of range {v}");
            out.row_mut(i).assign(&t2.row(id));
        }
        let ids = ids.to_vec();
        self.unary(out.into_dyn(), move |g, sink| {
            let g2 = as2(g);
            let mut dt = ndarray::Array2::<f64>::zeros((v, d));
            for (i, &id) in ids.iter().enumerate() {
                let mut row = dt.row_mut(id);
                row += &g2.row(i);
            }
            sink(0, dt.into_dyn());
        })
    }

    /// Mean over the rows where `keep` is true, as a `1 x d` row.
    pub fn mean_rows_where(self, keep: &[bool]) -> Var<'t> {
        let a = self.value();
        let a2 = as2(&a);
        let (rows, d) = (a2.shape()[0], a2.shape()[1]);
        assert_eq!(rows, keep.len(), "mean_rows_where: mask length mismatch");
        let idx: Vec<usize> = (0..rows).filter(|&i| keep[i]).collect();
        assert!(!idx.is_empty(), "mean_rows_where: empty selection");
        let mut out = ndarray::Array1::<f64>::zeros(d);
        for &i in &idx {
            out += &a2.row(i);
        }
        out /= idx.len() as f64;
        let k = idx.len() as f64;
        self.unary(out.insert_axis(Axis(0)).into_dyn(), move |g, sink| {
            let g2 = as2(g);
            let mut dx = ndarray::Array2::<f64>::zeros((rows, d));
            for &i in &idx {
                let mut row = dx.row_mut(i);
                row.zip_mut_with(&g2.row(0), |r, &gv| *r += gv / k);
            }
            sink(0, dx.into_dyn());
        })
    }

    /// Sum all rows into a `1 x d` row.
    pub fn sum_rows(self) -> Var<'t> {
        let a = self.value();
        let a2 = as2(&a);
        let rows = a2.shape()[0];
        let out = a2.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
        self.unary(out, move |g, sink| {
            let g2 = as2(g);
            let mut dx = ndarray::Array2::<f64>::zeros((rows, g2.shape()[1]));
            for mut r in dx.rows_mut() {
                r.assign(&g2.row(0));
            }
            sink(0, dx.into_dyn());
        })
    }

    /// `(C, H, W) -> (L, C*p*p)` patch extraction in raster order.
    pub fn patchify(self, p: usize) -> Var<'t> {
        let a = self.value();
        let (c, h, w) = dims3(&a);
        assert!(
            p >= 1 && h % p == 0 && w % p == 0,
            "patchify: patch {p} must divide {h}x{w}"
        );
        let (gh, gw) = (h / p, w / p);
        let mut out = ndarray::Array2::<f64>::zeros((gh * gw, c * p * p));
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = gy * gw + gx;
                let mut col = 0;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[tok, col]] = a[[ch, gy * p + dy, gx * p + dx]];
                            col += 1;
                        }
                    }
                }
            }
        }
        self.unary(out.into_dyn(), move |g, sink| {
            let g2 = as2(g);
            let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = gy * gw + gx;
                    let mut col = 0;
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx_ in 0..p {
                                dx[[ch, gy * p + dy, gx * p + dx_]] = g2[[tok, col]];
                                col += 1;
                            }
                        }
                    }
                }
            }
            sink(0, dx.into_dyn());
        })
    }

    /// Inverse of [`Var::patchify`]: `(L, C*p*p) -> (C, H, W)`.
    pub fn unpatchify(self, p: usize, c: usize, h: usize, w: usize) -> Var<'t> {
        let a = self.value();
        let a2 = as2(&a);
        let (gh, gw) = (h / p, w / p);
        assert_eq!(a2.shape()[0], gh * gw, "unpatchify: token count mismatch");
        assert_eq!(a2.shape()[1], c * p * p, "unpatchify: patch dim mismatch");
        let mut out = ndarray::Array3::<f64>::zeros((c, h, w));
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = gy * gw + gx;
                let mut col = 0;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[ch, gy * p + dy, gx * p + dx]] = a2[[tok, col]];
                            col += 1;
                        }
                    }
                }
            }
        }
        self.unary(out.into_dyn(), move |g, sink| {
            let mut dx = ndarray::Array2::<f64>::zeros((gh * gw, c * p * p));
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = gy * gw + gx;
                    let mut col = 0;
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx_ in 0..p {
                                dx[[tok, col]] = g[[ch, gy * p + dy, gx * p + dx_]];
                                col += 1;
                            }
                        }
                    }
                }
            }
            sink(0, dx.into_dyn());
        })
    }

    /// Rotary embedding over an `L x dh` head slice. `coords[i] = Some((y, x))`
    /// rotates row `i` (first half of the pairs by `y * w_j`, second half by
    /// `x * w_j`); `None` rows pass through (text tokens). `dh = 4 * freqs.len()`.
    pub fn rope(self, coords: &[Option<(f64, f64)>], freqs: &[f64]) -> Var<'t> {
        let a = self.value();
        let a2 = as2(&a);
        let (l, dh) = (a2.shape()[0], a2.shape()[1]);
        assert_eq!(l, coords.len(), "rope: coords length mismatch");
        assert_eq!(dh, 4 * freqs.len(), "rope: head dim must be 4 * n_freqs");
        let rotate = |m: &ndarray::Array2<f64>, sign: f64| {
            let mut out = m.clone();
            for i in 0..l {
                let Some((y, x)) = coords_at(coords, i) else { continue };
                for (j, &w) in freqs.iter().enumerate() {
                    // y-pairs occupy the first half, x-pairs the second.
                    for (axis_coord, base) in [(y, 2 * j), (x, dh / 2 + 2 * j)] {
                        let th = sign * axis_coord * w;
                        let (c, s) = (th.cos(), th.sin());
                        let (p, q) = (m[[i, base]], m[[i, base + 1]]);
                        out[[i, base]] = p * c - q * s;
                        out[[i, base + 1]] = p * s + q * c;
                    }
                }
            }
            out
        };
        let out = rotate(&a2.to_owned(), 1.0).into_dyn();
        let coords = coords.to_vec();
        let freqs = freqs.to_vec();
        self.unary(out, move |g, sink| {
            let g2 = as2(g).to_owned();
            // Backward of a rotation is the inverse rotation.
            let rot = |m: &ndarray::Array2<f64>| {
                let mut out = m.clone();
                for i in 0..l {
                    let Some((y, x)) = coords_at(&coords, i) else { continue };
                    for (j, &w) in freqs.iter().enumerate() {
                        for (axis_coord, base) in [(y, 2 * j), (x, dh / 2 + 2 * j)] {
                            let th = -axis_coord * w;
                            let (c, s) = (th.cos(), th.sin());
                            let (p, q) = (m[[i, base]], m[[i, base + 1]]);
                            out[[i, base]] = p * c - q * s;
                            out[[i, base + 1]] = p * s + q * c;
                        }
                    }
                }
                out
            };
            sink(0, rot(&g2).into_dyn());
        })
    }

    /// 2x average pool over `(C, H, W)`.
    pub fn avg_pool2(self) -> Var<'t> {
        let a = self.value();
        let (c, h, w) = dims3(&a);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: dims must be even");
        let mut out = ndarray::Array3::<f64>::zeros((c, h / 2, w / 2));
        for ch in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    out[[ch, i, j]] = (a[[ch, 2 * i, 2 * j]]
                        + a[[ch, 2 * i, 2 * j + 1]]
                        + a[[ch, 2 * i + 1, 2 * j]]
                        + a[[ch, 2 * i + 1, 2 * j + 1]])
                        / 4.0;
                }
            }
        }
        self.unary(out.into_dyn(), move |g, sink| {
            let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
            for ch in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let v = g[[ch, i, j]] / 4.0;
                        dx[[ch, 2 * i, 2 * j]] = v;
                        dx[[ch, 2 * i, 2 * j + 1]] = v;
                        dx[[ch, 2 * i + 1, 2 * j]] = v;
                        dx[[ch, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
            sink(0, dx.into_dyn());
        })
    }

    /// Nearest-neighbor 2x upsample over `(C, H, W)`.
    pub fn upsample2(self) -> Var<'t> {
        let a = self.value();
        let (c, h, w) = dims3(&a);
        let mut out = ndarray::Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = a[[ch, i, j]];
                    out[[ch, 2 * i, 2 * j]] = v;
                    out[[ch, 2 * i, 2 * j + 1]] = v;
                    out[[ch, 2 * i + 1, 2 * j]] = v;
                    out[[ch, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        self.unary(out.into_dyn(), move |g, sink| {
            let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        dx[[ch, i, j]] = g[[ch, 2 * i, 2 * j]]
                            + g[[ch, 2 * i, 2 * j + 1]]
                            + g[[ch, 2 * i + 1, 2 * j]]
                            + g[[ch, 2 * i + 1, 2 * j + 1]];
                    }
                }
            }
            sink(0, dx.into_dyn());
        })
    }

    /// Fake-quantize `self` (a 2D weight) with per-column trainable scales
    /// (`1 x cols`). Rounding uses a straight-through estimator; the scale
    /// gradient follows LSQ: `d(qhat)/ds = round(w/s) - w/s` in range, else
    /// the clip value.
    pub fn quantize_lsq(self, scales: Var<'t>, qmax: f64) -> Var<'t> {
        let w = self.value();
        let s = scales.value();
        let w2 = as2(&w).to_owned();
        let s1 = as2(&s).row(0).to_owned();
        assert_eq!(w2.shape()[1], s1.len(), "quantize_lsq: per-column scales");
        let mut out = w2.clone();
        for j in 0..s1.len() {
            let sc = s1[j].max(1e-12);
            for i in 0..w2.shape()[0] {
                let q = (w2[[i, j]] / sc).round().clamp(-qmax, qmax);
                out[[i, j]] = q * sc;
            }
        }
        self.binary(scales, out.into_dyn(), move |g, sink| {
            let g2 = as2(g);
            let (rows, cols) = (w2.shape()[0], w2.shape()[1]);
            let mut dw = ndarray::Array2::<f64>::zeros((rows, cols));
            let mut ds = ndarray::Array2::<f64>::zeros((1, cols));
            for j in 0..cols {
                let sc = s1[j].max(1e-12);
                for i in 0..rows {
                    let r = w2[[i, j]] / sc;
                    if r.abs() <= qmax {
                        dw[[i, j]] = g2[[i, j]];
                        ds[[0, j]] += g2[[i, j]] * (r.round() - r);
                    } else {
                        ds[[0, j]] += g2[[i, j]] * qmax * r.signum();
                    }
                }
            }
            sink(0, dw.into_dyn());
            sink(1, ds.into_dyn());
        })
    }
}

/// Concatenate 2D matrices along rows.
pub fn concat_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_rows: no parts");
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let cols = as2(&values[0]).shape()[1];
    let heights: Vec<usize> = values.iter().map(|v| as2(v).shape()[0]).collect();
    let total: usize = heights.iter().sum();
    let mut out = ndarray::Array2::<f64>::zeros((total, cols));
    let mut at = 0;
    for v in &values {
        let v2 = as2(v);
        out.slice_mut(ndarray::s![at..at + v2.shape()[0], ..]).assign(&v2);
        at += v2.shape()[0];
    }
    let parents: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    let back: BackFn = Box::new(move |g: &Arr, sink: &mut dyn FnMut(usize, Arr)| {
        let g2 = as2(g);
        let mut at = 0;
        for (slot, &h) in heights.iter().enumerate() {
            sink(slot, g2.slice(ndarray::s![at..at + h, ..]).to_owned().into_dyn());
            at += h;
        }
    });
    tape.push(out.into_dyn(), Some((parents, back)))
}

/// Concatenate 2D matrices along columns.
pub fn concat_cols<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_cols: no parts");
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let rows = as2(&values[0]).shape()[0];
    let widths: Vec<usize> = values.iter().map(|v| as2(v).shape()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut out = ndarray::Array2::<f64>::zeros((rows, total));
    let mut at = 0;
    for v in &values {
        let v2 = as2(v);
        out.slice_mut(ndarray::s![.., at..at + v2.shape()[1]]).assign(&v2);
        at += v2.shape()[1];
    }
    let parents: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    let back: BackFn = Box::new(move |g: &Arr, sink: &mut dyn FnMut(usize, Arr)| {
        let g2 = as2(g);
        let mut at = 0;
        for (slot, &w) in widths.iter().enumerate() {
            sink(slot, g2.slice(ndarray::s![.., at..at + w]).to_owned().into_dyn());
            at += w;
        }
    });
    tape.push(out.into_dyn(), Some((parents, back)))
}

fn coords_at(coords: &[Option<(f64, f64)>], i: usize) -> Option<(f64, f64)> {
    coords[i]
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2D array")
}

pub(crate) fn dims3(a: &Arr) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected a 3D array, got {:?}", s);
    (s[0], s[1], s[2])
}

#[allow(dead_code)]
pub(crate) fn as1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected a 1D array")
}
