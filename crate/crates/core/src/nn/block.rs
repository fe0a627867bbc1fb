//! Residual blocks: the normalization-free Aether block and a pre-LN
//! Transformer block used as the baseline.

use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::squash::SquashConfig;

use super::{
    gelu, gelu_grad, Attention, AttentionCache, LayerNorm, LayerNormCache, Linear, LinearCache, Module, NmnCache,
    NmnDense, Param, ScoreKind, ScoreNorm,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Aether,
    Standard,
}

/// Where an Aether block gets a LayerNorm for the ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LnInjection {
    None,
    /// On the residual stream, just before the NMN.
    Pre,
    /// On the NMN output, before the down projection.
    Post,
}

/// `r = x + Attn(x)`, `y = r + Linear(NMN(r))`.
#[derive(Clone, Debug)]
pub struct AetherBlock {
    pub attn: Attention,
    pub nmn: NmnDense,
    pub proj: Linear,
    pub ln: Option<LayerNorm>,
    pub injection: LnInjection,
}

/// `r = x + Attn(LN₁(x))`, `y = r + W₂·GeLU(W₁·LN₂(r))`.
#[derive(Clone, Debug)]
pub struct StandardBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub enum Block {
    Aether(AetherBlock),
    Standard(StandardBlock),
}

#[derive(Clone, Debug)]
pub enum BlockCache {
    Aether {
        attn: AttentionCache,
        ln: Option<LayerNormCache>,
        nmn: NmnCache,
        proj: LinearCache,
    },
    Standard {
        ln1: LayerNormCache,
        attn: AttentionCache,
        ln2: LayerNormCache,
        fc1: LinearCache,
        pre_act: Matrix,
        fc2: LinearCache,
    },
}

impl AetherBlock {
    pub fn new(
        name: &str,
        d: usize,
        heads: usize,
        cfg: KernelConfig,
        injection: LnInjection,
        rng: &mut Rng,
    ) -> Result<Self> {
        let attn = Attention::new(
            &format!("{name}.attn"),
            d,
            heads,
            ScoreKind::Yat(cfg),
            ScoreNorm::Softmax,
            true,
            rng,
        )?;
        let nmn = NmnDense::new(&format!("{name}.nmn"), d, 4 * d, true, cfg, rng);
        let proj = Linear::new(&format!("{name}.proj"), 4 * d, d, true, rng);
        let ln = match injection {
            LnInjection::None => None,
            LnInjection::Pre => Some(LayerNorm::new(&format!("{name}.ln"), d)),
            LnInjection::Post => Some(LayerNorm::new(&format!("{name}.ln"), 4 * d)),
        };
        Ok(AetherBlock {
            attn,
            nmn,
            proj,
            ln,
            injection,
        })
    }

    /// Swaps softmax for softermax in the attention row normalization.
    pub fn with_softermax(mut self, cfg: SquashConfig) -> Self {
        self.attn.norm = ScoreNorm::Softermax(cfg);
        self
    }
}

impl StandardBlock {
    pub fn new(name: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(StandardBlock {
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            attn: Attention::new(
                &format!("{name}.attn"),
                d,
                heads,
                ScoreKind::ScaledDot,
                ScoreNorm::Softmax,
                true,
                rng,
            )?,
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            fc1: Linear::new(&format!("{name}.fc1"), d, 4 * d, true, rng),
            fc2: Linear::new(&format!("{name}.fc2"), 4 * d, d, true, rng),
        })
    }
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Aether(_) => BlockKind::Aether,
            Block::Standard(_) => BlockKind::Standard,
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            Block::Aether(b) => b.attn.d_model(),
            Block::Standard(b) => b.attn.d_model(),
        }
    }

    /// Number of normalization layers inside the block.
    pub fn norm_layer_count(&self) -> usize {
        match self {
            Block::Aether(b) => usize::from(b.ln.is_some()),
            Block::Standard(_) => 2,
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, BlockCache)> {
        let d = self.d_model();
        if x.cols() != d {
            return Err(Error::shape("block_forward", format!("{d} columns"), x.cols()));
        }
        match self {
            Block::Aether(b) => {
                let (a, attn) = b.attn.forward(x)?;
                let mut r = x.clone();
                r.add_assign(&a);
                let (h, ln, nmn) = match (&b.ln, b.injection) {
                    (Some(norm), LnInjection::Pre) => {
                        let (n, lc) = norm.forward(&r)?;
                        let (h, nc) = b.nmn.forward(&n)?;
                        (h, Some(lc), nc)
                    }
                    (Some(norm), LnInjection::Post) => {
                        let (h, nc) = b.nmn.forward(&r)?;
                        let (n, lc) = norm.forward(&h)?;
                        (n, Some(lc), nc)
                    }
                    _ => {
                        let (h, nc) = b.nmn.forward(&r)?;
                        (h, None, nc)
                    }
                };
                let (m, proj) = b.proj.forward(&h)?;
                r.add_assign(&m);
                Ok((r, BlockCache::Aether { attn, ln, nmn, proj }))
            }
            Block::Standard(b) => {
                let (n1, ln1) = b.ln1.forward(x)?;
                let (a, attn) = b.attn.forward(&n1)?;
                let mut r = x.clone();
                r.add_assign(&a);
                let (n2, ln2) = b.ln2.forward(&r)?;
                let (pre_act, fc1) = b.fc1.forward(&n2)?;
                let (m, fc2) = b.fc2.forward(&pre_act.map(gelu))?;
                r.add_assign(&m);
                Ok((
                    r,
                    BlockCache::Standard {
                        ln1,
                        attn,
                        ln2,
                        fc1,
                        pre_act,
                        fc2,
                    },
                ))
            }
        }
    }

    pub fn backward(&mut self, cache: &BlockCache, upstream: &Matrix) -> Result<Matrix> {
        match (self, cache) {
            (Block::Aether(b), BlockCache::Aether { attn, ln, nmn, proj }) => {
                let dh = b.proj.backward(proj, upstream)?;
                let dh = match (&mut b.ln, ln, b.injection) {
                    (Some(norm), Some(lc), LnInjection::Pre) => {
                        let dn = b.nmn.backward(nmn, &dh)?;
                        norm.backward(lc, &dn)?
                    }
                    (Some(norm), Some(lc), LnInjection::Post) => {
                        let dn = norm.backward(lc, &dh)?;
                        b.nmn.backward(nmn, &dn)?
                    }
                    (None, None, _) => b.nmn.backward(nmn, &dh)?,
                    _ => return Err(Error::Cache("layer norm cache does not match block".into())),
                };
                let mut dr = upstream.clone();
                dr.add_assign(&dh);
                let mut dx = dr.clone();
                dx.add_assign(&b.attn.backward(attn, &dr)?);
                Ok(dx)
            }
            (
                Block::Standard(b),
                BlockCache::Standard {
                    ln1,
                    attn,
                    ln2,
                    fc1,
                    pre_act,
                    fc2,
                },
            ) => {
                let dg = b.fc2.backward(fc2, upstream)?;
                let mut dpre = dg;
                for (g, z) in dpre.as_mut_slice().iter_mut().zip(pre_act.as_slice()) {
                    *g *= gelu_grad(*z);
                }
                let dn2 = b.fc1.backward(fc1, &dpre)?;
                let mut dr = upstream.clone();
                dr.add_assign(&b.ln2.backward(ln2, &dn2)?);
                let dn1 = b.attn.backward(attn, &dr)?;
                let mut dx = dr;
                dx.add_assign(&b.ln1.backward(ln1, &dn1)?);
                Ok(dx)
            }
            _ => Err(Error::Cache("block kind does not match cache".into())),
        }
    }
}

impl Module for Block {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Block::Aether(b) => {
                b.attn.visit_params(f);
                if let (Some(norm), LnInjection::Pre) = (&b.ln, b.injection) {
                    norm.visit_params(f);
                }
                b.nmn.visit_params(f);
                if let (Some(norm), LnInjection::Post) = (&b.ln, b.injection) {
                    norm.visit_params(f);
                }
                b.proj.visit_params(f);
            }
            Block::Standard(b) => {
                b.ln1.visit_params(f);
                b.attn.visit_params(f);
                b.ln2.visit_params(f);
                b.fc1.visit_params(f);
                b.fc2.visit_params(f);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Block::Aether(b) => {
                b.attn.visit_params_mut(f);
                if let (Some(norm), LnInjection::Pre) = (&mut b.ln, b.injection) {
                    norm.visit_params_mut(f);
                }
                b.nmn.visit_params_mut(f);
                if let (Some(norm), LnInjection::Post) = (&mut b.ln, b.injection) {
                    norm.visit_params_mut(f);
                }
                b.proj.visit_params_mut(f);
            }
            Block::Standard(b) => {
                b.ln1.visit_params_mut(f);
                b.attn.visit_params_mut(f);
                b.ln2.visit_params_mut(f);
                b.fc1.visit_params_mut(f);
                b.fc2.visit_params_mut(f);
            }
        }
    }
}
