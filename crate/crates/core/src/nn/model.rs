use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::linalg::{gemm, matmul, matmul_tn, Matrix};
use crate::rng::Rng;

use super::{
    init_sigma, AetherBlock, Block, BlockCache, LayerNorm, LayerNormCache, LnInjection, Module, Param, StandardBlock,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Aether,
    Standard,
    AetherPreln,
    AetherPostln,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Aether => "aether",
            ModelKind::Standard => "standard",
            ModelKind::AetherPreln => "aether-preln",
            ModelKind::AetherPostln => "aether-postln",
        }
    }

    fn injection(self) -> LnInjection {
        match self {
            ModelKind::AetherPreln => LnInjection::Pre,
            ModelKind::AetherPostln => LnInjection::Post,
            _ => LnInjection::None,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aether" => Ok(ModelKind::Aether),
            "standard" => Ok(ModelKind::Standard),
            "aether-preln" => Ok(ModelKind::AetherPreln),
            "aether-postln" => Ok(ModelKind::AetherPostln),
            other => Err(Error::Input(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub kind: ModelKind,
    /// Reuse the token embedding as the output projection.
    pub tied: bool,
    pub kernel: KernelConfig,
}

/// Decoder-only language model: embeddings, a stack of blocks, and an
/// unembedding. The standard kind adds a final LayerNorm.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub tok_emb: Param,
    pub pos_emb: Param,
    pub blocks: Vec<Block>,
    pub ln_f: Option<LayerNorm>,
    /// `V × d`; `None` when tied.
    pub unembed: Option<Param>,
}

#[derive(Clone, Debug)]
pub struct ModelCache {
    ids: Vec<usize>,
    blocks: Vec<BlockCache>,
    ln_f: Option<LayerNormCache>,
    hidden: Matrix,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.vocab == 0 || cfg.max_len == 0 {
            return Err(Error::Input("vocab and max_len must be positive".into()));
        }
        let d = cfg.d_model;
        let sigma = init_sigma(d);
        let tok_emb = Param::gaussian("tok_emb", cfg.vocab, d, sigma, rng);
        let pos_emb = Param::gaussian("pos_emb", cfg.max_len, d, sigma, rng);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("blocks.{l}");
            blocks.push(match cfg.kind {
                ModelKind::Standard => Block::Standard(StandardBlock::new(&name, d, cfg.heads, rng)?),
                kind => Block::Aether(AetherBlock::new(
                    &name,
                    d,
                    cfg.heads,
                    cfg.kernel,
                    kind.injection(),
                    rng,
                )?),
            });
        }
        let ln_f = (cfg.kind == ModelKind::Standard).then(|| LayerNorm::new("ln_f", d));
        // Readout at 1/d rather than 1/√d keeps untrained logits near zero,
        // so the initial loss sits at ln V.
        let unembed = (!cfg.tied).then(|| Param::gaussian("unembed", cfg.vocab, d, sigma * sigma, rng));
        Ok(Model {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            unembed,
        })
    }

    pub fn norm_layer_count(&self) -> usize {
        self.blocks.iter().map(Block::norm_layer_count).sum::<usize>() + usize::from(self.ln_f.is_some())
    }

    fn out_proj(&self) -> &Param {
        self.unembed.as_ref().unwrap_or(&self.tok_emb)
    }

    /// Sum of token and position embeddings (`L × d`).
    pub fn embed(&self, ids: &[usize]) -> Result<Matrix> {
        if ids.is_empty() || ids.len() > self.cfg.max_len {
            return Err(Error::Input(format!(
                "sequence length {} outside 1..={}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        let d = self.cfg.d_model;
        let mut x = Matrix::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.cfg.vocab {
                return Err(Error::Input(format!(
                    "token id {id} out of vocabulary of {}",
                    self.cfg.vocab
                )));
            }
            let row = x.row_mut(i);
            for ((o, t), p) in row
                .iter_mut()
                .zip(self.tok_emb.value.row(id))
                .zip(self.pos_emb.value.row(i))
            {
                *o = t + p;
            }
        }
        Ok(x)
    }

    /// Logits `L × V` for each position.
    pub fn forward(&self, ids: &[usize]) -> Result<(Matrix, ModelCache)> {
        let mut h = self.embed(ids)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, c) = b.forward(&h)?;
            caches.push(c);
            h = next;
        }
        let (hidden, ln_f) = match &self.ln_f {
            Some(ln) => {
                let (n, c) = ln.forward(&h)?;
                (n, Some(c))
            }
            None => (h, None),
        };
        let logits = gemm(&hidden, &self.out_proj().value)?;
        Ok((
            logits,
            ModelCache {
                ids: ids.to_vec(),
                blocks: caches,
                ln_f,
                hidden,
            },
        ))
    }

    /// Accumulates gradients of every parameter given `∂L/∂logits`.
    pub fn backward(&mut self, cache: &ModelCache, d_logits: &Matrix) -> Result<()> {
        if d_logits.shape() != (cache.ids.len(), self.cfg.vocab) || cache.blocks.len() != self.blocks.len() {
            return Err(Error::Cache(format!(
                "model: upstream {:?} for {} tokens and {} cached blocks",
                d_logits.shape(),
                cache.ids.len(),
                cache.blocks.len()
            )));
        }
        let d_out = matmul_tn(d_logits, &cache.hidden)?;
        let mut dh = matmul(d_logits, &self.out_proj().value)?;
        match &mut self.unembed {
            Some(u) => u.grad.add_assign(&d_out),
            None => self.tok_emb.grad.add_assign(&d_out),
        }
        if let (Some(ln), Some(c)) = (&mut self.ln_f, &cache.ln_f) {
            dh = ln.backward(c, &dh)?;
        }
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dh = b.backward(c, &dh)?;
        }
        for (i, &id) in cache.ids.iter().enumerate() {
            let g = dh.row(i);
            for (t, v) in self.tok_emb.grad.row_mut(id).iter_mut().zip(g) {
                *t += v;
            }
            for (p, v) in self.pos_emb.grad.row_mut(i).iter_mut().zip(g) {
                *p += v;
            }
        }
        Ok(())
    }
}

impl Module for Model {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.tok_emb);
        f(&self.pos_emb);
        for b in &self.blocks {
            b.visit_params(f);
        }
        if let Some(ln) = &self.ln_f {
            ln.visit_params(f);
        }
        if let Some(u) = &self.unembed {
            f(u);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.tok_emb);
        f(&mut self.pos_emb);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        if let Some(ln) = &mut self.ln_f {
            ln.visit_params_mut(f);
        }
        if let Some(u) = &mut self.unembed {
            f(u);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_module;
    use crate::optim::softmax_xent;
    use std::collections::HashSet;

    fn cfg(kind: ModelKind, tied: bool) -> ModelConfig {
        ModelConfig {
            vocab: 11,
            d_model: 8,
            heads: 2,
            layers: 2,
            max_len: 6,
            kind,
            tied,
            kernel: KernelConfig::fixed(0.1),
        }
    }

    const KINDS: [ModelKind; 4] = [
        ModelKind::Aether,
        ModelKind::Standard,
        ModelKind::AetherPreln,
        ModelKind::AetherPostln,
    ];

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let ids = [3, 1, 4, 1];
        let targets = [1, 5, 9, 2];
        for seed in 0..10 {
            for kind in KINDS {
                let mut rng = Rng::new(seed);
                let mut m = Model::new(cfg(kind, seed % 2 == 0), &mut rng).unwrap();
                let loss = |m: &Model| softmax_xent(&m.forward(&ids).unwrap().0, &targets).unwrap().0;
                m.zero_grad();
                let (logits, cache) = m.forward(&ids).unwrap();
                let (_, d_logits) = softmax_xent(&logits, &targets).unwrap();
                m.backward(&cache, &d_logits).unwrap();
                let report = check_module(&mut m, loss, 40, &mut rng);
                assert!(
                    report.worst() < 1e-4,
                    "{kind:?} seed {seed}: {:?}",
                    report.worst_tensor()
                );
            }
        }
    }

    #[test]
    fn registry_covers_each_tensor_once() {
        for kind in KINDS {
            for tied in [false, true] {
                let m = Model::new(cfg(kind, tied), &mut Rng::new(0)).unwrap();
                let names = m.param_names();
                let unique: HashSet<_> = names.iter().collect();
                assert_eq!(unique.len(), names.len());
                assert_eq!(names.iter().any(|n| n == "unembed"), !tied);
            }
        }
        let m = Model::new(cfg(ModelKind::Aether, false), &mut Rng::new(0)).unwrap();
        assert_eq!(m.norm_layer_count(), 0);
        let s = Model::new(cfg(ModelKind::Standard, false), &mut Rng::new(0)).unwrap();
        assert_eq!(s.norm_layer_count(), 5);
    }

    #[test]
    fn single_position_composes_embedding_block_and_unembedding() {
        let mut c = cfg(ModelKind::Aether, false);
        c.layers = 1;
        let m = Model::new(c, &mut Rng::new(3)).unwrap();
        let (logits, _) = m.forward(&[7]).unwrap();
        let x = m.embed(&[7]).unwrap();
        let (h, _) = m.blocks[0].forward(&x).unwrap();
        let expect = gemm(&h, &m.unembed.as_ref().unwrap().value).unwrap();
        assert_eq!(logits, expect);
    }

    #[test]
    fn forward_is_deterministic_for_a_seed() {
        let a = Model::new(cfg(ModelKind::Aether, false), &mut Rng::new(9)).unwrap();
        let b = Model::new(cfg(ModelKind::Aether, false), &mut Rng::new(9)).unwrap();
        assert_eq!(a.forward(&[1, 2, 3]).unwrap().0, b.forward(&[1, 2, 3]).unwrap().0);
    }

    #[test]
    fn rejects_bad_sequences() {
        let m = Model::new(cfg(ModelKind::Aether, false), &mut Rng::new(0)).unwrap();
        assert!(matches!(m.forward(&[11]), Err(Error::Input(_))));
        assert!(m.forward(&[0; 7]).is_err());
        assert!(m.forward(&[]).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in KINDS {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("gpt".parse::<ModelKind>().is_err());
    }
}
