//! Encoder building blocks with hand-written backward passes. Activations
//! are flat row-major `[rows × width]` buffers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Grads, ParamId, ParamStore};
use crate::scalar::{gemm, softmax_in_place, Scalar, View};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Truncated normal at two standard deviations.
pub(crate) fn trunc_normal<T: Scalar, R: Rng>(rng: &mut R, n: usize) -> Vec<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break T::from_f64(z * INIT_STD);
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = ps.register(
            format!("{name}.weight"),
            vec![fan_in, fan_out],
            trunc_normal(rng, fan_in * fan_out),
        );
        let b = ps.register(format!("{name}.bias"), vec![fan_out], vec![T::zero(); fan_out]);
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let bias = ps.get(self.b);
        let mut y = Vec::with_capacity(rows * self.fan_out);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        gemm(
            rows,
            self.fan_in,
            self.fan_out,
            T::one(),
            x,
            View::rows(self.fan_in),
            ps.get(self.w),
            View::rows(self.fan_out),
            T::one(),
            &mut y,
            View::rows(self.fan_out),
        );
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grads: Option<&mut Grads<T>>,
        x: &[T],
        dy: &[T],
        rows: usize,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        if let Some(g) = grads {
            gemm(
                self.fan_in,
                rows,
                self.fan_out,
                T::one(),
                x,
                View::transposed(self.fan_in),
                dy,
                View::rows(self.fan_out),
                T::one(),
                g.get_mut(self.w),
                View::rows(self.fan_out),
            );
            let db = g.get_mut(self.b);
            for row in dy.chunks_exact(self.fan_out) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![T::zero(); rows * self.fan_in];
        gemm(
            rows,
            self.fan_out,
            self.fan_in,
            T::one(),
            dy,
            View::rows(self.fan_out),
            ps.get(self.w),
            View::transposed(self.fan_out),
            T::zero(),
            &mut dx,
            View::rows(self.fan_in),
        );
        Some(dx)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = ps.register(format!("{name}.weight"), vec![dim], vec![T::one(); dim]);
        let beta = ps.register(format!("{name}.bias"), vec![dim], vec![T::zero(); dim]);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &[T]) -> (Vec<T>, LnCache<T>) {
        let (g, b) = (ps.get(self.gamma), ps.get(self.beta));
        let n = T::from_f64(self.dim as f64);
        let eps = T::from_f64(LN_EPS);
        let rows = x.len() / self.dim;
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for ((xr, yr), hr) in x
            .chunks_exact(self.dim)
            .zip(y.chunks_exact_mut(self.dim))
            .zip(xhat.chunks_exact_mut(self.dim))
        {
            let mean = xr.iter().copied().sum::<T>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            for i in 0..self.dim {
                hr[i] = (xr[i] - mean) * r;
                yr[i] = hr[i] * g[i] + b[i];
            }
            rstd.push(r);
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        mut grads: Option<&mut Grads<T>>,
        cache: &LnCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let g = ps.get(self.gamma);
        let n = T::from_f64(self.dim as f64);
        let mut dx = vec![T::zero(); dy.len()];
        let mut dxhat = vec![T::zero(); self.dim];
        for (r, ((dyr, hr), dxr)) in dy
            .chunks_exact(self.dim)
            .zip(cache.xhat.chunks_exact(self.dim))
            .zip(dx.chunks_exact_mut(self.dim))
            .enumerate()
        {
            if let Some(gr) = grads.as_deref_mut() {
                let dg = gr.get_mut(self.gamma);
                for i in 0..self.dim {
                    dg[i] += dyr[i] * hr[i];
                }
                let db = gr.get_mut(self.beta);
                for i in 0..self.dim {
                    db[i] += dyr[i];
                }
            }
            let mut mean_d = T::zero();
            let mut mean_dh = T::zero();
            for i in 0..self.dim {
                dxhat[i] = dyr[i] * g[i];
                mean_d += dxhat[i];
                mean_dh += dxhat[i] * hr[i];
            }
            mean_d = mean_d / n;
            mean_dh = mean_dh / n;
            let rs = cache.rstd[r];
            for i in 0..self.dim {
                dxr[i] = rs * (dxhat[i] - mean_d - hr[i] * mean_dh);
            }
        }
        dx
    }
}

/// tanh approximation of GELU.
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Pre-norm encoder layer: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    attn: Vec<T>,
    o: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

impl Block {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
    ) -> Self {
        Block {
            ln1: LayerNorm::new(ps, &format!("{name}.norm1"), dim),
            qkv: Linear::new(ps, rng, &format!("{name}.attn.qkv"), dim, 3 * dim),
            proj: Linear::new(ps, rng, &format!("{name}.attn.proj"), dim, dim),
            ln2: LayerNorm::new(ps, &format!("{name}.norm2"), dim),
            fc1: Linear::new(ps, rng, &format!("{name}.mlp.fc1"), dim, mlp_dim),
            fc2: Linear::new(ps, rng, &format!("{name}.mlp.fc2"), mlp_dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &[T],
        batch: usize,
        tokens: usize,
        keep: bool,
    ) -> (Vec<T>, Option<BlockCache<T>>) {
        let rows = batch * tokens;
        let d = self.dim;
        let dh = d / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let (h1, ln1) = self.ln1.forward(ps, x);
        let qkv = self.qkv.forward(ps, &h1, rows);
        let mut attn = vec![T::zero(); batch * self.heads * tokens * tokens];
        let mut o = vec![T::zero(); rows * d];
        let qkv_view = View::rows(3 * d);
        for b in 0..batch {
            let base = b * tokens * 3 * d;
            for h in 0..self.heads {
                let a_off = (b * self.heads + h) * tokens * tokens;
                let scores = &mut attn[a_off..a_off + tokens * tokens];
                // Q K^T
                gemm(
                    tokens,
                    dh,
                    tokens,
                    scale,
                    &qkv,
                    qkv_view.at(base + h * dh),
                    &qkv,
                    View {
                        offset: base + d + h * dh,
                        row_stride: 1,
                        col_stride: 3 * d,
                    },
                    T::zero(),
                    scores,
                    View::rows(tokens),
                );
                for row in scores.chunks_exact_mut(tokens) {
                    softmax_in_place(row);
                }
                gemm(
                    tokens,
                    tokens,
                    dh,
                    T::one(),
                    &attn[a_off..a_off + tokens * tokens],
                    View::rows(tokens),
                    &qkv,
                    qkv_view.at(base + 2 * d + h * dh),
                    T::zero(),
                    &mut o,
                    View::rows(d).at(b * tokens * d + h * dh),
                );
            }
        }
        let attn_out = self.proj.forward(ps, &o, rows);
        let mid: Vec<T> = x.iter().zip(&attn_out).map(|(&a, &b)| a + b).collect();

        let (h2, ln2) = self.ln2.forward(ps, &mid);
        let pre = self.fc1.forward(ps, &h2, rows);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let mlp_out = self.fc2.forward(ps, &act, rows);
        let out: Vec<T> = mid.iter().zip(&mlp_out).map(|(&a, &b)| a + b).collect();

        let cache = keep.then_some(BlockCache {
            ln1,
            h1,
            qkv,
            attn,
            o,
            ln2,
            h2,
            pre,
            act,
        });
        (out, cache)
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        mut grads: Option<&mut Grads<T>>,
        c: &BlockCache<T>,
        dout: &[T],
        batch: usize,
        tokens: usize,
    ) -> Vec<T> {
        let rows = batch * tokens;
        let d = self.dim;
        let dh = d / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        // MLP branch
        let dact = self
            .fc2
            .backward(ps, grads.as_deref_mut(), &c.act, dout, rows, true)
            .expect("dx requested");
        let dpre: Vec<T> = dact.iter().zip(&c.pre).map(|(&g, &x)| g * gelu_grad(x)).collect();
        let dh2 = self
            .fc1
            .backward(ps, grads.as_deref_mut(), &c.h2, &dpre, rows, true)
            .expect("dx requested");
        let dmid_branch = self.ln2.backward(ps, grads.as_deref_mut(), &c.ln2, &dh2);
        let dmid: Vec<T> = dout.iter().zip(&dmid_branch).map(|(&a, &b)| a + b).collect();

        // attention branch
        let d_o = self
            .proj
            .backward(ps, grads.as_deref_mut(), &c.o, &dmid, rows, true)
            .expect("dx requested");
        let mut dqkv = vec![T::zero(); rows * 3 * d];
        let mut da = vec![T::zero(); tokens * tokens];
        let qkv_view = View::rows(3 * d);
        for b in 0..batch {
            let base = b * tokens * 3 * d;
            let o_base = b * tokens * d;
            for h in 0..self.heads {
                let a_off = (b * self.heads + h) * tokens * tokens;
                let a = &c.attn[a_off..a_off + tokens * tokens];
                // dA = dO V^T
                gemm(
                    tokens,
                    dh,
                    tokens,
                    T::one(),
                    &d_o,
                    View::rows(d).at(o_base + h * dh),
                    &c.qkv,
                    View {
                        offset: base + 2 * d + h * dh,
                        row_stride: 1,
                        col_stride: 3 * d,
                    },
                    T::zero(),
                    &mut da,
                    View::rows(tokens),
                );
                // dV = A^T dO
                gemm(
                    tokens,
                    tokens,
                    dh,
                    T::one(),
                    a,
                    View::transposed(tokens),
                    &d_o,
                    View::rows(d).at(o_base + h * dh),
                    T::zero(),
                    &mut dqkv,
                    qkv_view.at(base + 2 * d + h * dh),
                );
                // softmax backward, in place on da -> dS
                for (dr, ar) in da.chunks_exact_mut(tokens).zip(a.chunks_exact(tokens)) {
                    let dot: T = dr.iter().zip(ar).map(|(&g, &p)| g * p).sum();
                    for (g, &p) in dr.iter_mut().zip(ar) {
                        *g = p * (*g - dot);
                    }
                }
                // dQ = dS K * scale
                gemm(
                    tokens,
                    tokens,
                    dh,
                    scale,
                    &da,
                    View::rows(tokens),
                    &c.qkv,
                    qkv_view.at(base + d + h * dh),
                    T::zero(),
                    &mut dqkv,
                    qkv_view.at(base + h * dh),
                );
                // dK = dS^T Q * scale
                gemm(
                    tokens,
                    tokens,
                    dh,
                    scale,
                    &da,
                    View::transposed(tokens),
                    &c.qkv,
                    qkv_view.at(base + h * dh),
                    T::zero(),
                    &mut dqkv,
                    qkv_view.at(base + d + h * dh),
                );
            }
        }
        let dh1 = self
            .qkv
            .backward(ps, grads.as_deref_mut(), &c.h1, &dqkv, rows, true)
            .expect("dx requested");
        let dx_branch = self.ln1.backward(ps, grads, &c.ln1, &dh1);
        dmid.iter().zip(&dx_branch).map(|(&a, &b)| a + b).collect()
    }
}
