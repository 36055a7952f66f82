use rand::Rng;

use super::matrix::Matrix;
use super::tape::{ParamStore, Tape, Var};

/// Weights drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(rng, fan_in, fan_out, fan_in));
        let b = bias.then(|| store.add(format!("{name}.b"), Matrix::zeros(1, fan_out)));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(store, b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: usize,
    shift: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            shift: store.add(format!("{name}.shift"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = t.layer_norm(x);
        let g = t.param(store, self.gain);
        let s = t.param(store, self.shift);
        let y = t.mul_row(y, g);
        t.add_row(y, s)
    }
}

/// Lookup table of `rows` learned `dim`-vectors.
#[derive(Clone, Debug)]
pub struct Embedding {
    table: usize,
    pub rows: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Embedding {
            table: store.add(format!("{name}.table"), uniform_init(rng, rows, dim, 1)),
            rows,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, idx: &[usize]) -> Var {
        let table = t.param(store, self.table);
        t.gather_rows(table, idx)
    }
}

/// Post-norm transformer encoder layer: multi-head self-attention and a
/// SiLU feed-forward block, each followed by residual + layer norm.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    heads: usize,
    dim: usize,
    qkv: Linear,
    out: Linear,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

const MASKED: f64 = -1e9;

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        let hidden = 2 * dim;
        TransformerLayer {
            heads,
            dim,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            out: Linear::new(store, &format!("{name}.attn_out"), dim, dim, true, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, hidden, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), hidden, dim, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    /// `valid[j] == false` marks position `j` as padding: no position
    /// attends to it. Pass `None` when every position is real.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var, valid: Option<&[bool]>) -> Var {
        let n = t.shape(x).0;
        let hd = self.dim / self.heads;
        let qkv = self.qkv.forward(t, store, x);
        let mask = valid.filter(|v| v.iter().any(|&ok| !ok)).map(|v| {
            assert_eq!(v.len(), n);
            let mut m = Matrix::zeros(n, n);
            for r in 0..n {
                for (c, &ok) in v.iter().enumerate() {
                    if !ok {
                        m.set(r, c, MASKED);
                    }
                }
            }
            t.constant(m)
        });
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = t.slice_cols(qkv, h * hd, (h + 1) * hd);
            let k = t.slice_cols(qkv, self.dim + h * hd, self.dim + (h + 1) * hd);
            let v = t.slice_cols(qkv, 2 * self.dim + h * hd, 2 * self.dim + (h + 1) * hd);
            let kt = t.transpose(k);
            let scores = t.matmul(q, kt);
            let mut scores = t.scale(scores, scale);
            if let Some(m) = mask {
                scores = t.add(scores, m);
            }
            let p = t.softmax_rows(scores);
            heads.push(t.matmul(p, v));
        }
        let attn = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads) };
        let attn = self.out.forward(t, store, attn);
        let h = t.add(x, attn);
        let h = self.norm1.forward(t, store, h);
        let f = self.ff1.forward(t, store, h);
        let f = t.silu(f);
        let f = self.ff2.forward(t, store, f);
        let y = t.add(h, f);
        self.norm2.forward(t, store, y)
    }
}

/// Sinusoidal embedding of a (diffusion) time step as a `1 x dim` row.
pub fn sinusoidal_embedding(step: f64, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (step * freq).sin();
        out[half + i] = (step * freq).cos();
    }
    Matrix::row_vector(out)
}
