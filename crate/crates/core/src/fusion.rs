//! Cross-attention fusion of the diffusion slice (queries) with the two
//! susceptibility slices (keys and values), followed by the residual
//! upsampling block that returns to full in-plane resolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal, Binding, Conv, Mlp, Norm, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Padding, Tensor, Var};

/// Channels produced by the 3x3 convolution over the susceptibility pair.
pub const DETAIL_CHANNELS: usize = 12;
pub const DETAIL_KERNEL: usize = 3;
pub const MERGE_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub n1: usize,
    pub p1: usize,
    pub p2: usize,
    pub d_k: usize,
    pub mlp_hidden: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.n1 == 0 || c.p1 == 0 || c.p2 == 0 || c.d_k == 0 || c.mlp_hidden == 0 {
            return Err(Error::Config("fusion sizes must be positive".into()));
        }
        if c.n1 % c.p1 != 0 {
            return Err(Error::Config(format!("fusion.p1={} must divide fusion.n1={}", c.p1, c.n1)));
        }
        if c.n1 % c.p2 != 0 {
            return Err(Error::Config(format!("fusion.p2={} must divide fusion.n1={}", c.p2, c.n1)));
        }
        if c.p1 % c.p2 != 0 {
            return Err(Error::Config(format!("fusion.p2={} must divide fusion.p1={}", c.p2, c.p1)));
        }
        Ok(())
    }

    /// Token grid side on the query side.
    pub fn query_side(&self) -> usize {
        self.n1 / self.p1
    }

    /// Token grid side on the key/value side.
    pub fn kv_side(&self) -> usize {
        self.n1 / self.p2
    }
}

/// Row index map that copies each query token onto a `factor x factor`
/// block of the finer grid. Row 0 (the class token) maps to itself.
pub fn upsample_token_index(side: usize, factor: usize) -> Vec<usize> {
    let fine = side * factor;
    let mut idx = Vec::with_capacity(fine * fine + 1);
    idx.push(0);
    for r in 0..fine {
        for c in 0..fine {
            idx.push(1 + (r / factor) * side + c / factor);
        }
    }
    idx
}

/// `softmax(q . k^T * scale) . v` for `q: [n, d]`, `k, v: [m, d]`.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, scale: T) -> Result<Var> {
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, scale)?;
    let w = g.softmax_lastdim(scores)?;
    g.matmul(w, v)
}

/// Patch projection plus learned class and position embeddings for one side.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv,
    pub class: ParamId,
    pub pos: ParamId,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        n: usize,
        patch: usize,
        d_k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if patch == 0 || n % patch != 0 {
            return Err(Error::invalid(format!("patch {patch} does not divide {n}")));
        }
        let tokens = (n / patch).pow(2) + 1;
        let proj = Conv::new(store, &format!("{name}.proj"), c_in, d_k, patch, patch, Padding::Valid, true, rng)?;
        let class = store.add(format!("{name}.class"), normal(&[1, d_k], 0.02, rng))?;
        let pos = store.add(format!("{name}.pos"), normal(&[tokens, d_k], 0.02, rng))?;
        Ok(PatchEmbed { proj, class, pos, patch })
    }

    /// `img: [C, n, n]` to `[(n/p)^2 + 1, d_k]`, class token first.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, img: Var) -> Result<Var> {
        let s = g.shape(img).to_vec();
        if s.len() != 3 || s[1] % self.patch != 0 || s[2] % self.patch != 0 {
            return Err(Error::invalid(format!(
                "patch {} does not divide image {:?}",
                self.patch, s
            )));
        }
        let maps = self.proj.forward(g, b, img)?;
        let ms = g.shape(maps).to_vec();
        let flat = g.reshape(maps, &[ms[0], ms[1] * ms[2]])?;
        let tokens = g.transpose(flat)?;
        let seq = g.concat(&[b.var(self.class), tokens])?;
        if g.shape(seq) != g.shape(b.var(self.pos)) {
            return Err(Error::shape("patch_embed pos", g.shape(seq), g.shape(b.var(self.pos))));
        }
        g.add(seq, b.var(self.pos))
    }
}

/// Every learned piece of the fusion stage.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub cfg: FusionConfig,
    pub embed_q: PatchEmbed,
    pub embed_kv: PatchEmbed,
    pub norm_q: Norm,
    pub norm_kv: Norm,
    pub mlp_q: Mlp,
    pub mlp_k: Mlp,
    pub mlp_v: Mlp,
    pub lambda1: ParamId,
    pub lambda2: ParamId,
    pub norm_res: Norm,
    pub norm_out: Norm,
    pub mlp_out: Mlp,
    pub detail: Conv,
    pub merge: Conv,
    pub merge_norm: Norm,
}

impl Fusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &FusionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.d_k, cfg.mlp_hidden);
        Ok(Fusion {
            cfg: cfg.clone(),
            embed_q: PatchEmbed::new(store, "fusion.embed_q", 1, cfg.n1, cfg.p1, d, rng)?,
            embed_kv: PatchEmbed::new(store, "fusion.embed_kv", 2, cfg.n1, cfg.p2, d, rng)?,
            norm_q: Norm::new(store, "fusion.norm_q", d)?,
            norm_kv: Norm::new(store, "fusion.norm_kv", d)?,
            mlp_q: Mlp::new(store, "fusion.mlp_q", d, h, d, rng)?,
            mlp_k: Mlp::new(store, "fusion.mlp_k", d, h, d, rng)?,
            mlp_v: Mlp::new(store, "fusion.mlp_v", d, h, d, rng)?,
            lambda1: store.add("fusion.lambda1", Tensor::ones([1]))?,
            lambda2: store.add("fusion.lambda2", Tensor::ones([1]))?,
            norm_res: Norm::new(store, "fusion.norm_res", d)?,
            norm_out: Norm::new(store, "fusion.norm_out", d)?,
            mlp_out: Mlp::new(store, "fusion.mlp_out", d, h, d, rng)?,
            detail: Conv::new(
                store, "fusion.detail", 2, DETAIL_CHANNELS, DETAIL_KERNEL, 1, Padding::Same, true, rng,
            )?,
            merge: Conv::new(
                store, "fusion.merge", DETAIL_CHANNELS + d, d, MERGE_KERNEL, 1, Padding::Same, true, rng,
            )?,
            merge_norm: Norm::new(store, "fusion.merge_norm", d)?,
        })
    }

    /// Attention output for every key/value token, class row included.
    pub fn cross_attention<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, zq: Var, zkv: Var) -> Result<Var> {
        let (g1, g2) = (self.cfg.query_side(), self.cfg.kv_side());
        if g.shape(zq)[0] != g1 * g1 + 1 || g.shape(zkv)[0] != g2 * g2 + 1 {
            return Err(Error::shape("cross_attention", g.shape(zq), g.shape(zkv)));
        }
        let nq = self.norm_q.forward(g, b, zq)?;
        let q = self.mlp_q.forward(g, b, nq)?;
        let nkv = self.norm_kv.forward(g, b, zkv)?;
        let k = self.mlp_k.forward(g, b, nkv)?;
        let v = self.mlp_v.forward(g, b, nkv)?;
        let q_up = g.gather_rows(q, &upsample_token_index(g1, g2 / g1))?;
        let scale = T::one() / T::lit(self.cfg.d_k as f64).sqrt();
        attention(g, q_up, k, v, scale)
    }

    /// Gated residuals on the key/value tokens, class token dropped,
    /// reshaped to `[d_k, n1/p2, n1/p2]`.
    pub fn attention_residuals<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, zkv: Var, z2: Var) -> Result<Var> {
        let side = self.cfg.kv_side();
        let n = side * side;
        let base = g.slice(zkv, 1, n)?;
        let att = g.slice(z2, 1, n)?;
        let att = g.scale_by(att, b.var(self.lambda1))?;
        let sum = g.add(base, att)?;
        let z3 = self.norm_res.forward(g, b, sum)?;
        let n3 = self.norm_out.forward(g, b, z3)?;
        let m = self.mlp_out.forward(g, b, n3)?;
        let m = g.scale_by(m, b.var(self.lambda2))?;
        let z4 = g.add(z3, m)?;
        let chan = g.transpose(z4)?;
        g.reshape(chan, &[self.cfg.d_k, side, side])
    }

    /// Merge the coarse fused map with fine susceptibility detail.
    /// `z4: [d_k, n1/p2, n1/p2]`, `susceptibility: [2, n1, n1]`.
    pub fn upsample_block<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, z4: Var, susceptibility: Var) -> Result<Var> {
        let a1 = self.detail.forward(g, b, susceptibility)?;
        let a1 = g.relu(a1)?;
        let a2 = g.resize_nearest(z4, self.cfg.p2)?;
        let cat = g.concat(&[a1, a2])?;
        let merged = self.merge.forward(g, b, cat)?;
        let normed = self.merge_norm.forward_channels(g, b, merged)?;
        g.elu(normed)
    }

    /// Full per-slice fusion: `dwi: [1, n1, n1]`, `susceptibility: [2, n1, n1]`
    /// to `[d_k, n1, n1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, dwi: Var, susceptibility: Var) -> Result<Var> {
        let zq = self.embed_q.forward(g, b, dwi)?;
        let zkv = self.embed_kv.forward(g, b, susceptibility)?;
        let z2 = self.cross_attention(g, b, zq, zkv)?;
        let z4 = self.attention_residuals(g, b, zkv, z2)?;
        self.upsample_block(g, b, z4, susceptibility)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_index_replicates_blocks() {
        let idx = upsample_token_index(2, 2);
        assert_eq!(idx.len(), 17);
        assert_eq!(idx[0], 0);
        // first fine row: tokens 1,1,2,2
        assert_eq!(&idx[1..5], &[1, 1, 2, 2]);
        // last fine row: tokens 3,3,4,4
        assert_eq!(&idx[13..17], &[3, 3, 4, 4]);
    }

    #[test]
    fn config_divisibility() {
        let ok = FusionConfig { n1: 16, p1: 8, p2: 2, d_k: 4, mlp_hidden: 4 };
        assert!(ok.validate().is_ok());
        assert!(FusionConfig { p1: 6, ..ok.clone() }.validate().is_err());
        assert!(FusionConfig { p2: 3, ..ok.clone() }.validate().is_err());
        assert!(FusionConfig { p1: 4, p2: 8, ..ok }.validate().is_err());
    }
}
