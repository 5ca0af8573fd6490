//! Minimal reverse-mode automatic differentiation on dynamic-dimension f64 arrays.
//!
//! A [`Tape`] records each operation as a node holding its forward value and a
//! backward closure. [`Tape::backward`] walks the tape in reverse, accumulating
//! gradients for every node that contributed to the scalar root. Tapes are
//! built per training step and dropped afterwards.
//!
//! Everything is double precision so analytic gradients can be validated
//! against central finite differences at tight tolerances.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::error::{Error, Result};

/// Dynamic-dimension f64 array, the single tensor type on the tape.
pub type ArrD = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&ArrD, &ArrD, &[&ArrD]) -> Vec<ArrD>>;

struct Node {
    value: ArrD,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Recording tape. Cloning is cheap (shared interior).
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// Handle to a value on the tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

/// Gradients produced by one backward pass, indexed by tape position.
pub struct Grads {
    grads: Vec<Option<ArrD>>,
}

impl Grads {
    /// Gradient of the root w.r.t. `v`, if `v` influenced the root.
    pub fn get(&self, v: &Var) -> Option<&ArrD> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: ArrD, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var {
            tape: self.clone(),
            idx: nodes.len() - 1,
        }
    }

    /// A differentiable input node. Gradients accumulate here during backward.
    pub fn leaf(&self, value: ArrD) -> Var {
        self.push(value, vec![], None)
    }

    /// A node that never receives gradient (data, labels as floats, ...).
    pub fn constant(&self, value: ArrD) -> Var {
        self.push(value, vec![], None)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: &Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.idx].value;
        if root_val.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<ArrD>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.idx] = Some(ArrD::ones(root_val.raw_dim()));
        for i in (0..=root.idx).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(back) = &node.backward {
                let parent_vals: Vec<&ArrD> =
                    node.parents.iter().map(|&p| &nodes[p].value).collect();
                let pgrads = back(&gout, &node.value, &parent_vals);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(gout);
        }
        Ok(Grads { grads })
    }
}

/// Broadcast shape of `a` against `b` (numpy rules), if compatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Sum `grad` down to `shape`, undoing broadcasting.
fn reduce_to(grad: &ArrD, shape: &[usize]) -> ArrD {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gs, &ts)) in g.shape().to_vec().iter().zip(shape).enumerate() {
        if ts == 1 && gs > 1 {
            g = g
                .sum_axis(Axis(ax))
                .insert_axis(Axis(ax))
                .into_dimensionality::<IxDyn>()
                .unwrap();
        }
    }
    g
}

fn bcast(a: &ArrD, shape: &[usize]) -> ArrD {
    a.broadcast(IxDyn(shape)).unwrap().to_owned()
}

impl Var {
    pub fn value(&self) -> ArrD {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.idx].value;
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn binary_broadcast(
        &self,
        other: &Var,
        f: impl Fn(&ArrD, &ArrD) -> ArrD,
        back: impl Fn(&ArrD, &ArrD, &ArrD) -> (ArrD, ArrD) + 'static,
    ) -> Var {
        let (va, vb) = {
            let nodes = self.tape.nodes.borrow();
            (
                nodes[self.idx].value.clone(),
                nodes[other.idx].value.clone(),
            )
        };
        let bshape = broadcast_shape(va.shape(), vb.shape())
            .unwrap_or_else(|| panic!("broadcast {:?} vs {:?}", va.shape(), vb.shape()));
        let value = f(&bcast(&va, &bshape), &bcast(&vb, &bshape));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.tape.push(
            value,
            vec![self.idx, other.idx],
            Some(Box::new(move |gout, _, parents| {
                let bs = gout.shape().to_vec();
                let pa = bcast(parents[0], &bs);
                let pb = bcast(parents[1], &bs);
                let (ga, gb) = back(gout, &pa, &pb);
                vec![reduce_to(&ga, &sa), reduce_to(&gb, &sb)]
            })),
        )
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary_broadcast(other, |a, b| a + b, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary_broadcast(other, |a, b| a - b, |g, _, _| (g.clone(), -g))
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary_broadcast(other, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn div(&self, other: &Var) -> Var {
        self.binary_broadcast(
            other,
            |a, b| a / b,
            |g, a, b| (g / b, -(g * a) / (b * b)),
        )
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.value() + c;
        self.tape.push(
            value,
            vec![self.idx],
            Some(Box::new(move |gout, _, _| vec![gout.clone()])),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let value = self.value() * c;
        self.tape.push(
            value,
            vec![self.idx],
            Some(Box::new(move |gout, _, _| vec![gout * c])),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var) -> Var {
        let (a, b) = {
            let nodes = self.tape.nodes.borrow();
            (
                nodes[self.idx]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("matmul lhs must be 2-D")
                    .to_owned(),
                nodes[other.idx]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("matmul rhs must be 2-D")
                    .to_owned(),
            )
        };
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dims");
        let value = a.dot(&b).into_dyn();
        self.tape.push(
            value,
            vec![self.idx, other.idx],
            Some(Box::new(move |gout, _, parents| {
                let g = gout.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a = parents[0]
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let b = parents[1]
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                vec![g.dot(&b.t()).into_dyn(), a.t().dot(&g).into_dyn()]
            })),
        )
    }

    /// Batched matrix product over the leading axis: (B,M,K) x (B,K,N) -> (B,M,N).
    pub fn bmm(&self, other: &Var) -> Var {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ndim(), 3);
        assert_eq!(b.ndim(), 3);
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (k2, n) = (b.shape()[1], b.shape()[2]);
        assert_eq!(bs, b.shape()[0], "bmm batch dims");
        assert_eq!(k, k2, "bmm inner dims");
        let mut value = ArrD::zeros(IxDyn(&[bs, m, n]));
        for i in 0..bs {
            let ai = a
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let bi = b
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            value
                .index_axis_mut(Axis(0), i)
                .assign(&ai.dot(&bi).into_dyn());
        }
        self.tape.push(
            value,
            vec![self.idx, other.idx],
            Some(Box::new(move |gout, _, parents| {
                let mut ga = ArrD::zeros(parents[0].raw_dim());
                let mut gb = ArrD::zeros(parents[1].raw_dim());
                for i in 0..gout.shape()[0] {
                    let g = gout
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let ai = parents[0]
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let bi = parents[1]
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&g.dot(&bi.t()).into_dyn());
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&ai.t().dot(&g).into_dyn());
                }
                vec![ga, gb]
            })),
        )
    }

    /// Transpose a 2-D node.
    pub fn transpose2(&self) -> Var {
        self.permute(&[1, 0])
    }

    /// Swap the last two axes of a 3-D node.
    pub fn transpose_last2(&self) -> Var {
        self.permute(&[0, 2, 1])
    }

    /// Permute axes; gradient applies the inverse permutation.
    pub fn permute(&self, axes: &[usize]) -> Var {
        let value = self
            .value()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.tape.push(
            value,
            vec![self.idx],
            Some(Box::new(move |gout, _, _| {
                vec![gout
                    .clone()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let old_shape = self.shape();
        let value = self
            .value()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.tape.push(
            value,
            vec![self.idx],
            Some(Box::new(move |gout, _, _| {
                vec![gout
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .unwrap()]
            })),
        )
    }

    pub fn relu(&self) -> Var {
        let value = self.value().mapv(|x| x.max(0.0));
        self.tape.push(
            value,
            vec![self.idx],
            Some(Box::new(|gout, _, parents| {
                vec![gout * &parents[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })]
            })),
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let f = |x: f64| 0.5 * x * (1.0 + (C * (x + 0.044715 * x.powi(3))).tanh());
        let value = self.value().mapv(f);
        self.tape.push(
            value,
            vec![self.idx],
            Some(Box::new(move |gout, _, parents| {
                let d = parents[0].mapv(|x| {
                    let u = C * (x + 0.044715 * x.powi(3));
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                });
                vec![gout * &d]
            })),
        )
    }

    pub fn sqrt(&self) -> Var {
        let value = self.value().mapv(f64::sqrt);
        self.tape.push(
            value,
            vec![self.idx],
            Some(Box::new(|gout, out, _| vec![gout * &out.mapv(|y| 0.5 / y)])),
        )
    }

    pub fn sum_all(&self) -> Var {
        let total = self.value().sum();
        let shape = self.shape();
        self.tape.push(
            ndarray::arr0(total).into_dyn(),
            vec![self.idx],
            Some(Box::new(move |gout, _, _| {
                let g = *gout.iter().next().unwrap();
                vec![ArrD::from_elem(IxDyn(&shape), g)]
            })),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keep: bool) -> Var {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let mut value = v.sum_axis(Axis(axis));
        if keep {
            value = value.insert_axis(Axis(axis));
        }
        self.tape.push(
            value.into_dyn(),
            vec![self.idx],
            Some(Box::new(move |gout, _, _| {
                let mut g = gout.clone();
                if !keep {
                    g = g.insert_axis(Axis(axis)).into_dyn();
                }
                vec![bcast(&g, &in_shape)]
            })),
        )
    }

    pub fn mean_axis(&self, axis: usize, keep: bool) -> Var {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keep).mul_scalar(1.0 / n)
    }

    /// Row-wise softmax of a 2-D node.
    pub fn softmax_rows(&self) -> Var {
        let v = self
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("softmax_rows needs 2-D");
        let mut p = v.clone();
        for mut row in p.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.tape.push(
            p.into_dyn(),
            vec![self.idx],
            Some(Box::new(|gout, out, _| {
                let p = out.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let g = gout.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let dot = (&g * &p).sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![(&p * &(&g - &dot)).into_dyn()]
            })),
        )
    }

    /// Row-wise log-softmax of a 2-D node (numerically stable).
    pub fn log_softmax_rows(&self) -> Var {
        let v = self
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("log_softmax_rows needs 2-D");
        let mut lp = v.clone();
        for mut row in lp.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            row.mapv_inplace(|x| x - lse);
        }
        self.tape.push(
            lp.into_dyn(),
            vec![self.idx],
            Some(Box::new(|gout, out, _| {
                let lp = out.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let g = gout.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let p = lp.mapv(f64::exp);
                vec![(&g - &(&p * &gsum)).into_dyn()]
            })),
        )
    }

    /// Select rows along axis 0; repeated indices accumulate gradient.
    pub fn index_select0(&self, indices: &[usize]) -> Var {
        let v = self.value();
        let mut out_shape = v.shape().to_vec();
        out_shape[0] = indices.len();
        let mut value = ArrD::zeros(IxDyn(&out_shape));
        for (k, &i) in indices.iter().enumerate() {
            value
                .index_axis_mut(Axis(0), k)
                .assign(&v.index_axis(Axis(0), i));
        }
        let idx = indices.to_vec();
        self.tape.push(
            value,
            vec![self.idx],
            Some(Box::new(move |gout, _, parents| {
                let mut g = ArrD::zeros(parents[0].raw_dim());
                for (k, &i) in idx.iter().enumerate() {
                    let mut dst = g.index_axis_mut(Axis(0), i);
                    dst += &gout.index_axis(Axis(0), k);
                }
                vec![g]
            })),
        )
    }

    /// Gather entries of a 2-D node: out[k] = m[rows[k], cols[k]].
    pub fn gather_pairs(&self, rows: &[usize], cols: &[usize]) -> Var {
        assert_eq!(rows.len(), cols.len());
        let v = self
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("gather_pairs needs 2-D");
        let picked: Vec<f64> = rows.iter().zip(cols).map(|(&r, &c)| v[[r, c]]).collect();
        let (rs, cs) = (rows.to_vec(), cols.to_vec());
        self.tape.push(
            ArrD::from_shape_vec(IxDyn(&[picked.len()]), picked).unwrap(),
            vec![self.idx],
            Some(Box::new(move |gout, _, parents| {
                let mut g = ArrD::zeros(parents[0].raw_dim());
                for (k, (&r, &c)) in rs.iter().zip(&cs).enumerate() {
                    g[[r, c]] += gout[[k]];
                }
                vec![g]
            })),
        )
    }

    /// Concatenate along an axis.
    pub fn concat(axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let values: Vec<ArrD> = parts.iter().map(Var::value).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        tape.push(
            value,
            parts.iter().map(|p| p.idx).collect(),
            Some(Box::new(move |gout, _, _| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut start = 0isize;
                for &l in &lens {
                    let piece = gout
                        .slice_axis(Axis(axis), Slice::new(start, Some(start + l as isize), 1))
                        .to_owned();
                    grads.push(piece);
                    start += l as isize;
                }
                grads
            })),
        )
    }

    /// Detach from the graph: same value, no gradient flows past this point.
    pub fn detach(&self) -> Var {
        self.tape.constant(self.value())
    }

    /// Unfold (N,C,H,W) into patch rows: output (N*OH*OW, C*k*k).
    ///
    /// Zero padding of `pad` pixels on each spatial border. The gradient is
    /// the matching fold (scatter-add back into the input).
    pub fn im2col(&self, k: usize, stride: usize, pad: usize) -> Var {
        let v = self.value();
        assert_eq!(v.ndim(), 4, "im2col needs (N,C,H,W)");
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut value = ArrD::zeros(IxDyn(&[n * oh * ow, c * k * k]));
        for ni in 0..n {
            for oi in 0..oh {
                for oj in 0..ow {
                    let row = ni * oh * ow + oi * ow + oj;
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let hi = (oi * stride + ki) as isize - pad as isize;
                                let wj = (oj * stride + kj) as isize - pad as isize;
                                if hi >= 0 && (hi as usize) < h && wj >= 0 && (wj as usize) < w {
                                    value[[row, ci * k * k + ki * k + kj]] =
                                        v[[ni, ci, hi as usize, wj as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.tape.push(
            value,
            vec![self.idx],
            Some(Box::new(move |gout, _, parents| {
                let mut g = ArrD::zeros(parents[0].raw_dim());
                for ni in 0..n {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let row = ni * oh * ow + oi * ow + oj;
                            for ci in 0..c {
                                for ki in 0..k {
                                    for kj in 0..k {
                                        let hi = (oi * stride + ki) as isize - pad as isize;
                                        let wj = (oj * stride + kj) as isize - pad as isize;
                                        if hi >= 0
                                            && (hi as usize) < h
                                            && wj >= 0
                                            && (wj as usize) < w
                                        {
                                            g[[ni, ci, hi as usize, wj as usize]] +=
                                                gout[[row, ci * k * k + ki * k + kj]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![g]
            })),
        )
    }
}
