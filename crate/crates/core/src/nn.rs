//! Parameters, layers and resampling operators shared by every model stage.
//!
//! Feature maps are stored channel-last: a map batch of `n` images with
//! `h x w` cells and `c` channels is a `[n*h*w, c]` matrix.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{ConvGeom, SparseMap};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: BTreeMap<String, usize>,
    seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: BTreeMap::new(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(
            !self.lookup.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.lookup.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `[-bound, bound]`, drawn from a stream keyed by the store
    /// seed and the parameter name, so adding or removing other parameters
    /// never changes this one's initial value.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.gen_range(-1.0..1.0) * bound))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("sized"))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::of(v)))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i.0])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|i| &mut self.tensors[i.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            lookup: self.lookup.clone(),
            seed: self.seed,
        }
    }

    /// Replaces every tensor from `other`, which must hold the same names and
    /// shapes. Mismatches are listed in the error.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = BTreeMap::new();
        for (name, t) in other {
            seen.insert(name.as_str(), ());
            match self.id(name) {
                None => problems.push(format!("{name}: unexpected parameter {:?}", t.shape())),
                Some(id) if self.tensors[id.0].shape() != t.shape() => problems.push(format!(
                    "{name}: expected {:?}, found {:?}",
                    self.tensors[id.0].shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for (name, t) in self.iter() {
            if !seen.contains_key(name) {
                problems.push(format!("{name}: missing, expected {:?}", t.shape()));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Shape(problems.join("; ")));
        }
        for (name, t) in other {
            let id = self.id(name).expect("checked");
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }
}

/// Binds every stored parameter as a differentiable graph leaf.
pub fn bind<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>) -> Vec<Var> {
    store.tensors().iter().map(|t| g.param(t.clone())).collect()
}

/// Spatial layout of a channel-last map batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Spatial {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Spatial {
    pub fn cells(&self) -> usize {
        self.n * self.h * self.w
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.add_uniform(&format!("{name}.weight"), &[d_in, d_out], 1.0 / libm::sqrt(d_in as f64));
        let b = bias.then(|| store.add_const(&format!("{name}.bias"), &[d_out], 0.0));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w.index()])?;
        match self.b {
            Some(b) => g.add_row(y, p[b.index()]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub lin: Linear,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub c_in: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        Self {
            lin: Linear::new(store, name, k * k * c_in, c_out, bias),
            k,
            stride,
            dilation,
            c_in,
        }
    }

    pub fn c_out(&self) -> usize {
        self.lin.d_out
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, sp: Spatial) -> Result<(Var, Spatial)> {
        if self.k == 1 && self.stride == 1 {
            return Ok((self.lin.forward(g, p, x)?, sp));
        }
        let geom = ConvGeom {
            n: sp.n,
            h: sp.h,
            w: sp.w,
            c: self.c_in,
            k: self.k,
            stride: self.stride,
            pad: self.dilation * (self.k - 1) / 2,
            dilation: self.dilation,
        };
        let cols = g.im2col(x, geom)?;
        let y = self.lin.forward(g, p, cols)?;
        Ok((
            y,
            Spatial {
                n: sp.n,
                h: geom.out_h(),
                w: geom.out_w(),
            },
        ))
    }
}

/// Per-position normalization across channels with a per-channel affine.
/// Statistics never mix samples, so train and inference behave identically.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: Option<ParamId>,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, bias: bool) -> Self {
        Self {
            gamma: store.add_const(&format!("{name}.gamma"), &[c], 1.0),
            beta: bias.then(|| store.add_const(&format!("{name}.beta"), &[c], 0.0)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let n = g.layer_norm(x, T::of(NORM_EPS));
        let y = g.mul_row(n, p[self.gamma.index()])?;
        match self.beta {
            Some(b) => g.add_row(y, p[b.index()]),
            None => Ok(y),
        }
    }
}

/// 2x2 average pooling with stride 2 (odd trailing rows/columns dropped).
pub fn avg_pool2<T: Real>(sp: Spatial) -> (Arc<SparseMap<T>>, Spatial) {
    let out = Spatial {
        n: sp.n,
        h: sp.h / 2,
        w: sp.w / 2,
    };
    let mut rows = Vec::with_capacity(out.cells());
    for b in 0..sp.n {
        for y in 0..out.h {
            for x in 0..out.w {
                let mut r = Vec::with_capacity(4);
                for dy in 0..2 {
                    for dx in 0..2 {
                        r.push((((b * sp.h) + 2 * y + dy) * sp.w + 2 * x + dx, 0.25));
                    }
                }
                rows.push(r);
            }
        }
    }
    (Arc::new(SparseMap::from_rows(sp.cells(), &rows)), out)
}

/// Per-sample spatial mean: `[n*h*w, c] -> [n, c]`.
pub fn global_mean<T: Real>(sp: Spatial) -> Arc<SparseMap<T>> {
    let per = sp.h * sp.w;
    let w = 1.0 / per as f64;
    let rows: Vec<Vec<(usize, f64)>> = (0..sp.n)
        .map(|b| (0..per).map(|i| (b * per + i, w)).collect())
        .collect();
    Arc::new(SparseMap::from_rows(sp.cells(), &rows))
}

/// Per-sample broadcast: `[n, c] -> [n*h*w, c]`.
pub fn broadcast<T: Real>(sp: Spatial) -> Arc<SparseMap<T>> {
    let per = sp.h * sp.w;
    let rows: Vec<Vec<(usize, f64)>> = (0..sp.cells()).map(|i| vec![(i / per, 1.0)]).collect();
    Arc::new(SparseMap::from_rows(sp.n, &rows))
}

/// Bilinear weights for sampling continuous position `t` (in source cell
/// units, cell centers at integers) from `len` cells, clamped to the border.
pub fn linear_taps(t: f64, len: usize) -> [(usize, f64); 2] {
    let t = t.clamp(0.0, (len - 1) as f64);
    let i0 = libm::floor(t) as usize;
    let i1 = (i0 + 1).min(len - 1);
    let f = t - i0 as f64;
    [(i0, 1.0 - f), (i1, f)]
}

/// Bilinear resize with half-pixel centers.
pub fn bilinear_resize<T: Real>(sp: Spatial, h_out: usize, w_out: usize) -> (Arc<SparseMap<T>>, Spatial) {
    let out = Spatial {
        n: sp.n,
        h: h_out,
        w: w_out,
    };
    let sy = sp.h as f64 / h_out as f64;
    let sx = sp.w as f64 / w_out as f64;
    let mut rows = Vec::with_capacity(out.cells());
    for b in 0..sp.n {
        for y in 0..h_out {
            let ty = linear_taps((y as f64 + 0.5) * sy - 0.5, sp.h);
            for x in 0..w_out {
                let tx = linear_taps((x as f64 + 0.5) * sx - 0.5, sp.w);
                let mut r = Vec::with_capacity(4);
                for &(iy, wy) in &ty {
                    for &(ix, wx) in &tx {
                        let wt = wy * wx;
                        if wt != 0.0 {
                            r.push(((b * sp.h + iy) * sp.w + ix, wt));
                        }
                    }
                }
                rows.push(r);
            }
        }
    }
    (Arc::new(SparseMap::from_rows(sp.cells(), &rows)), out)
}

/// Fixed 2-D sinusoidal position code `[h*w, d]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sine_position_code(h: usize, w: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; h * w * d];
    let enc = |pos: f64, i: usize, n: usize| -> f64 {
        let pair = (i / 2) as f64;
        let freq = libm::pow(10_000.0, -2.0 * pair / n.max(1) as f64);
        if i.is_multiple_of(2) {
            libm::sin(pos * freq)
        } else {
            libm::cos(pos * freq)
        }
    };
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * d..(y * w + x + 1) * d];
            for i in 0..half {
                row[i] = enc(y as f64, i, half);
            }
            for i in half..d {
                row[i] = enc(x as f64, i - half, d - half);
            }
        }
    }
    out
}
