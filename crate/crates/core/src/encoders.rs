//! Instance encoder (message passing over the bipartite graph) and solution
//! encoder (transformer over bit tokens), plus zero/pad-token batching.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{BipartiteGraph, CONS_FEATURES, VAR_FEATURES};
use crate::ip::Solution;
use crate::nn::{Embedding, LayerNorm, Linear, Matrix, ParamStore, SparseMatrix, Tape, TransformerLayer, Var};

pub const PAD_TOKEN: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared embedding width.
    pub dim: usize,
    pub heads: usize,
    /// Longest token sequence the positional table covers.
    pub max_len: usize,
    pub denoiser_layers: usize,
    pub decoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            heads: 4,
            max_len: 64,
            denoiser_layers: 1,
            decoder_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn large_scale() -> Self {
        ModelConfig {
            dim: 128,
            max_len: 4096,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Tensors derived once from a [`BipartiteGraph`].
#[derive(Clone, Debug)]
pub struct GraphTensors {
    pub var: Matrix,
    pub cons: Matrix,
    /// `m x n`, constraint <- variable aggregation.
    pub to_cons: Arc<SparseMatrix>,
    /// `n x m`, variable <- constraint aggregation.
    pub to_vars: Arc<SparseMatrix>,
}

impl From<&BipartiteGraph> for GraphTensors {
    fn from(g: &BipartiteGraph) -> Self {
        let to_cons = SparseMatrix::new(g.n_cons, g.n_vars, g.edges.clone());
        GraphTensors {
            var: Matrix::from_vec(g.n_vars, g.var_dim(), g.var_features.clone()),
            cons: Matrix::from_vec(g.n_cons, g.cons_dim(), g.cons_features.clone()),
            to_vars: Arc::new(to_cons.transpose()),
            to_cons: Arc::new(to_cons),
        }
    }
}

impl GraphTensors {
    pub fn n_vars(&self) -> usize {
        self.var.rows
    }
}

/// One half-convolution: `h_dst <- LN(h_dst + silu(W_self h_dst + S W_msg h_src))`.
#[derive(Clone, Debug)]
struct HalfConv {
    self_map: Linear,
    msg_map: Linear,
    norm: LayerNorm,
}

impl HalfConv {
    fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        HalfConv {
            self_map: Linear::new(store, &format!("{name}.self"), dim, dim, true, rng),
            msg_map: Linear::new(store, &format!("{name}.msg"), dim, dim, false, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        }
    }

    fn forward(&self, t: &mut Tape, store: &ParamStore, dst: Var, src: Var, agg: &Arc<SparseMatrix>) -> Var {
        let m = self.msg_map.forward(t, store, src);
        let m = t.spmm(agg, m);
        let s = self.self_map.forward(t, store, dst);
        let u = t.add(s, m);
        let u = t.silu(u);
        let h = t.add(dst, u);
        self.norm.forward(t, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct IpEncoder {
    pub store: ParamStore,
    dim: usize,
    var_embed: Linear,
    cons_embed: Linear,
    to_cons: HalfConv,
    to_vars: HalfConv,
    head: Linear,
}

impl IpEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let mut store = ParamStore::new();
        let s = &mut store;
        let var_embed = Linear::new(s, "var_embed", VAR_FEATURES.len(), d, true, rng);
        let cons_embed = Linear::new(s, "cons_embed", CONS_FEATURES.len(), d, true, rng);
        let to_cons = HalfConv::new(s, "conv_c", d, rng);
        let to_vars = HalfConv::new(s, "conv_v", d, rng);
        let head = Linear::new(s, "head", d, d, true, rng);
        IpEncoder {
            store,
            dim: d,
            var_embed,
            cons_embed,
            to_cons,
            to_vars,
            head,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `n x d` instance embedding on `t`.
    pub fn forward(&self, t: &mut Tape, g: &GraphTensors) -> Var {
        let st = &self.store;
        let v = t.constant(g.var.clone());
        let hv = self.var_embed.forward(t, st, v);
        let hv = t.silu(hv);
        let hv = if g.cons.rows == 0 {
            hv
        } else {
            let c = t.constant(g.cons.clone());
            let hc = self.cons_embed.forward(t, st, c);
            let hc = t.silu(hc);
            let hc = self.to_cons.forward(t, st, hc, hv, &g.to_cons);
            self.to_vars.forward(t, st, hv, hc, &g.to_vars)
        };
        self.head.forward(t, st, hv)
    }
}

/// Per-variable instance embedding `z_i` (`n x d`).
pub fn ip_encode(graph: &BipartiteGraph, enc: &IpEncoder) -> Result<Matrix> {
    if graph.var_dim() != VAR_FEATURES.len() || graph.cons_dim() != CONS_FEATURES.len() {
        return Err(Error::Dimension {
            expected: VAR_FEATURES.len(),
            got: graph.var_dim(),
        });
    }
    let mut t = Tape::frozen();
    let z = enc.forward(&mut t, &GraphTensors::from(graph));
    Ok(t.value(z).clone())
}

#[derive(Clone, Debug)]
pub struct SolEncoder {
    pub store: ParamStore,
    max_len: usize,
    tokens: Embedding,
    positions: Embedding,
    layer: TransformerLayer,
}

impl SolEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let mut store = ParamStore::new();
        let tokens = Embedding::new(&mut store, "token", 3, d, rng);
        let positions = Embedding::new(&mut store, "position", cfg.max_len, d, rng);
        let layer = TransformerLayer::new(&mut store, "layer0", d, cfg.heads, rng);
        SolEncoder {
            store,
            max_len: cfg.max_len,
            tokens,
            positions,
            layer,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `len x d` embedding of a token sequence; pad positions are masked as keys.
    pub fn forward(&self, t: &mut Tape, tokens: &[u8]) -> Result<Var> {
        check_tokens(tokens, self.max_len)?;
        let idx: Vec<usize> = tokens.iter().map(|&b| b as usize).collect();
        let pos: Vec<usize> = (0..tokens.len()).collect();
        let valid: Vec<bool> = tokens.iter().map(|&b| b != PAD_TOKEN).collect();
        let e = self.tokens.forward(t, &self.store, &idx);
        let p = self.positions.forward(t, &self.store, &pos);
        let h = t.add(e, p);
        Ok(self.layer.forward(t, &self.store, h, Some(&valid)))
    }
}

fn check_tokens(tokens: &[u8], max_len: usize) -> Result<()> {
    if let Some(j) = tokens.iter().position(|&b| b > PAD_TOKEN) {
        return Err(Error::InvalidInstance(format!(
            "token {} at position {j} is not in {{0,1,2}}",
            tokens[j]
        )));
    }
    if tokens.len() > max_len {
        return Err(Error::Dimension {
            expected: max_len,
            got: tokens.len(),
        });
    }
    Ok(())
}

/// Per-variable solution embedding `z_x` (`len x d`).
pub fn sol_encode(tokens: &[u8], enc: &SolEncoder) -> Result<Matrix> {
    let mut t = Tape::frozen();
    let z = enc.forward(&mut t, tokens)?;
    Ok(t.value(z).clone())
}

pub fn solution_tokens(x: &Solution) -> Vec<u8> {
    x.bits().iter().map(|&b| b as u8).collect()
}

/// Instance embeddings zero-padded and token vectors pad-token-padded to a
/// common length.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub n_max: usize,
    pub z_i: Vec<Matrix>,
    pub tokens: Vec<Vec<u8>>,
    pub mask: Vec<Vec<bool>>,
}

impl PaddedBatch {
    pub fn new(items: Vec<(Matrix, Vec<u8>)>) -> Result<Self> {
        let n_max = items.iter().map(|(z, _)| z.rows).max().unwrap_or(0);
        let mut batch = PaddedBatch {
            n_max,
            z_i: Vec::with_capacity(items.len()),
            tokens: Vec::with_capacity(items.len()),
            mask: Vec::with_capacity(items.len()),
        };
        for (z, mut tok) in items {
            if tok.len() != z.rows {
                return Err(Error::Dimension {
                    expected: z.rows,
                    got: tok.len(),
                });
            }
            let mut mask = vec![true; tok.len()];
            mask.resize(n_max, false);
            tok.resize(n_max, PAD_TOKEN);
            batch.z_i.push(z.pad_rows(n_max));
            batch.tokens.push(tok);
            batch.mask.push(mask);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.z_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_i.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::build_bipartite;
    use crate::generate::{generate, Family, GeneratorConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoders() -> (IpEncoder, SolEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            max_len: 32,
            ..ModelConfig::default()
        };
        (IpEncoder::new(&cfg, &mut rng), SolEncoder::new(&cfg, &mut rng))
    }

    #[test]
    fn ip_encoder_shape_for_several_families() {
        let (ip, _) = encoders();
        for family in [Family::desk_set_cover(), Family::desk_indep_set(15)] {
            let inst = generate(&GeneratorConfig::new(family, 3)).unwrap();
            let z = ip_encode(&build_bipartite(&inst).unwrap(), &ip).unwrap();
            assert_eq!(z.shape(), (inst.n(), 8));
            assert!(z.is_finite());
        }
    }

    #[test]
    fn all_pad_tokens_give_finite_output() {
        let (_, sol) = encoders();
        let z = sol_encode(&[PAD_TOKEN; 6], &sol).unwrap();
        assert_eq!(z.shape(), (6, 8));
        assert!(z.is_finite());
    }

    #[test]
    fn identical_tokens_identical_embeddings() {
        let (_, sol) = encoders();
        let a = sol_encode(&[0, 1, 1, 0], &sol).unwrap();
        let b = sol_encode(&[0, 1, 1, 0], &sol).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_tokens_rejected() {
        let (_, sol) = encoders();
        assert!(sol_encode(&[0, 3], &sol).is_err());
        assert!(sol_encode(&[0; 33], &sol).is_err());
    }

    #[test]
    fn padding_leaves_real_rows_unchanged() {
        let (_, sol) = encoders();
        let a = sol_encode(&[1, 0, 1], &sol).unwrap();
        let b = sol_encode(&[1, 0, 1, 2, 2, 2], &sol).unwrap();
        assert!(a.max_abs_diff(&b.select_rows(&[0, 1, 2])) < 1e-12);
    }

    #[test]
    fn padded_batch_contract() {
        let batch = PaddedBatch::new(vec![
            (Matrix::filled(2, 3, 1.0), vec![1, 0]),
            (Matrix::filled(4, 3, 2.0), vec![0, 1, 1, 0]),
        ])
        .unwrap();
        assert_eq!(batch.n_max, 4);
        assert_eq!(batch.tokens[0], vec![1, 0, 2, 2]);
        assert_eq!(batch.mask[0], vec![true, true, false, false]);
        assert!(batch.z_i[0].row(2).iter().chain(batch.z_i[0].row(3)).all(|&v| v == 0.0));
        assert!(PaddedBatch::new(vec![(Matrix::zeros(2, 1), vec![1])]).is_err());
    }
}
