use crate::error::{Error, Result};

/// Dense `[n, c, h, w]` tensor of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: [usize; 4], v: f64) -> Self {
        Self { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Spatial size `(h, w)`.
    pub fn hw(&self) -> (usize, usize) {
        (self.shape[2], self.shape[3])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `[c, h, w]` block of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let s = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let s = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * s..(n + 1) * s]
    }

    /// Contiguous `[h, w]` plane of channel `c` in sample `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// Copies channels `[from, from + count)` into a new tensor.
    pub fn channels(&self, from: usize, count: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        assert!(from + count <= c, "channel slice out of range");
        let mut out = Tensor::zeros([n, count, h, w]);
        let p = h * w;
        for i in 0..n {
            let src = &self.data[(i * c + from) * p..(i * c + from + count) * p];
            out.data[i * count * p..(i + 1) * count * p].copy_from_slice(src);
        }
        out
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?;
        let [n, _, h, w] = first.shape;
        if parts.iter().any(|t| t.n() != n || t.hw() != (h, w)) {
            return Err(Error::Shape("concat parts disagree on batch or spatial size".into()));
        }
        let c: usize = parts.iter().map(|t| t.c()).sum();
        let mut out = Tensor::zeros([n, c, h, w]);
        let p = h * w;
        for i in 0..n {
            let mut off = i * c * p;
            for t in parts {
                let s = t.sample(i);
                out.data[off..off + s.len()].copy_from_slice(s);
                off += s.len();
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Mirrors every plane along the x axis.
    pub fn flip_w(&self) -> Tensor {
        let w = self.shape[3];
        let mut out = self.clone();
        for (src, dst) in self.data.chunks(w).zip(out.data.chunks_mut(w)) {
            for x in 0..w {
                dst[x] = src[w - 1 - x];
            }
        }
        out
    }

    /// Zero-pads on the bottom and right to `(h, w)`.
    pub fn pad_to(&self, h: usize, w: usize) -> Tensor {
        let [n, c, sh, sw] = self.shape;
        assert!(h >= sh && w >= sw, "pad_to cannot shrink");
        if (h, w) == (sh, sw) {
            return self.clone();
        }
        let mut out = Tensor::zeros([n, c, h, w]);
        for i in 0..n {
            for ch in 0..c {
                for y in 0..sh {
                    let src = self.index(i, ch, y, 0);
                    let dst = out.index(i, ch, y, 0);
                    out.data[dst..dst + sw].copy_from_slice(&self.data[src..src + sw]);
                }
            }
        }
        out
    }

    /// Stacks single-sample tensors into a batch.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::Shape("empty stack".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape != [1, c, h, w] {
                return Err(Error::Shape(format!("stack expects [1,{c},{h},{w}], got {:?}", t.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec([items.len(), c, h, w], data)
    }

    /// Extracts sample `n` as a batch of one.
    pub fn take_sample(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor { shape: [1, c, h, w], data: self.sample(n).to_vec() }
    }
}
