//! Elementwise maps, reductions and shape plumbing.

use super::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            out,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            out,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            out,
            &[a, b],
            Box::new(|ctx| {
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                vec![
                    ctx.needs(0).then(|| ctx.grad.zip_map(b, |g, y| g * y)),
                    ctx.needs(1).then(|| ctx.grad.zip_map(a, |g, x| g * x)),
                ]
            }),
        )
    }

    /// Sum of several same-shaped values.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of nothing");
        let mut out = self.value(vars[0]).clone();
        for &v in &vars[1..] {
            out.axpy(1.0, self.value(v));
        }
        let n = vars.len();
        self.push(
            out,
            vars,
            Box::new(move |ctx| (0..n).map(|i| ctx.needs(i).then(|| ctx.grad.clone())).collect()),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(out, &[a], Box::new(move |ctx| vec![Some(ctx.grad.map(|g| c * g))]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, &[a], Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    /// `s * a` where `s` is a single-element value.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scalar operand must have one element");
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| sv * x);
        self.push(
            out,
            &[a, s],
            Box::new(|ctx| {
                let (a, s) = (ctx.inputs[0], ctx.inputs[1]);
                let sv = s.item();
                vec![
                    ctx.needs(0).then(|| ctx.grad.map(|g| sv * g)),
                    ctx.needs(1).then(|| {
                        let d: f64 = ctx.grad.data().iter().zip(a.data()).map(|(g, x)| g * x).sum();
                        Tensor::new(s.shape().to_vec(), vec![d])
                    }),
                ]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(
            out,
            &[a],
            Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(
            out,
            &[a],
            Box::new(|ctx| {
                vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(
            out,
            &[a],
            Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * y * (1.0 - y)))]),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(
            out,
            &[a],
            Box::new(|ctx| {
                vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }))]
            }),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(
            out,
            &[a],
            Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| 2.0 * g * x))]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape.to_vec());
        self.push(
            out,
            &[a],
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape().to_vec()))]),
        )
    }

    /// Concatenate along the leading axis; trailing shapes must agree.
    pub fn concat(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let tail = self.value(vars[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(vars.len());
        for &v in vars {
            let t = self.value(v);
            assert_eq!(&t.shape()[1..], &tail[..], "concat trailing shape mismatch");
            lead += t.dim(0);
            sizes.push(t.len());
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        self.push(
            Tensor::new(shape, data),
            vars,
            Box::new(move |ctx| {
                let mut offset = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| {
                        let g = ctx.needs(i).then(|| {
                            Tensor::new(
                                ctx.inputs[i].shape().to_vec(),
                                ctx.grad.data()[offset..offset + n].to_vec(),
                            )
                        });
                        offset += n;
                        g
                    })
                    .collect()
            }),
        )
    }

    /// Entries `range` of the leading axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.dim(0), "narrow out of range");
        let inner: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(shape, t.data()[start * inner..(start + len) * inner].to_vec());
        self.push(
            out,
            &[a],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape().to_vec());
                g.data_mut()[start * inner..(start + len) * inner].copy_from_slice(ctx.grad.data());
                vec![Some(g)]
            }),
        )
    }

    /// Select index `k` of axis 1 of a tensor with at least two axes,
    /// dropping that axis: `[A, B, rest..] -> [A, rest..]`.
    pub fn select_axis1(&mut self, a: Var, k: usize) -> Var {
        let t = self.value(a);
        let (lead, mid) = (t.dim(0), t.dim(1));
        assert!(k < mid);
        let inner: usize = t.shape()[2..].iter().product();
        let mut shape = vec![lead];
        shape.extend_from_slice(&t.shape()[2..]);
        let mut data = Vec::with_capacity(lead * inner);
        for i in 0..lead {
            let base = (i * mid + k) * inner;
            data.extend_from_slice(&t.data()[base..base + inner]);
        }
        self.push(
            Tensor::new(shape, data),
            &[a],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape().to_vec());
                for i in 0..lead {
                    let base = (i * mid + k) * inner;
                    g.data_mut()[base..base + inner]
                        .copy_from_slice(&ctx.grad.data()[i * inner..(i + 1) * inner]);
                }
                vec![Some(g)]
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
