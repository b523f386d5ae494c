//! Deeply-supervised progressive backbone built from exchangeable convolution blocks.
//!
//! Each block applies one operator type from the six-way search space; a 1×1×1 head
//! turns the block's features into class logits (a side output). Side outputs are
//! upsampled to the input grid and summed progressively, so fused output `i` is the
//! running sum of side outputs `0..=i`. The summation has no parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nas::{Genotype, RelaxedBlock, RelaxedCache};
use crate::nn::norm::NormCache;
use crate::nn::pool::{max_pool, max_pool_backward, max_pool_infer, PoolCache};
use crate::nn::resample::{upsample, upsample_adjoint};
use crate::nn::{BatchNorm, Conv3d, Mode, Param, ParamGroup, Parameterized, Real, Tensor};

/// The six candidate operators, in search-space order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CandidateKind {
    #[serde(rename = "2D_3")]
    K2d3,
    #[serde(rename = "2D_5")]
    K2d5,
    #[serde(rename = "3D_3")]
    K3d3,
    #[serde(rename = "3D_5")]
    K3d5,
    #[serde(rename = "P3D_3")]
    P3d3,
    #[serde(rename = "P3D_5")]
    P3d5,
}

impl CandidateKind {
    pub const ALL: [CandidateKind; 6] = [
        CandidateKind::K2d3,
        CandidateKind::K2d5,
        CandidateKind::K3d3,
        CandidateKind::K3d5,
        CandidateKind::P3d3,
        CandidateKind::P3d5,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            CandidateKind::K2d3 => "2D_3",
            CandidateKind::K2d5 => "2D_5",
            CandidateKind::K3d3 => "3D_3",
            CandidateKind::K3d5 => "3D_5",
            CandidateKind::P3d3 => "P3D_3",
            CandidateKind::P3d5 => "P3D_5",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(name))
    }

    pub fn size(self) -> usize {
        match self {
            CandidateKind::K2d3 | CandidateKind::K3d3 | CandidateKind::P3d3 => 3,
            _ => 5,
        }
    }

    /// Kernel shapes of the composite stages, in application order.
    pub fn stage_kernels(self) -> Vec<[usize; 3]> {
        let k = self.size();
        match self {
            CandidateKind::K2d3 | CandidateKind::K2d5 => vec![[k, k, 1]],
            CandidateKind::K3d3 | CandidateKind::K3d5 => vec![[k, k, k]],
            CandidateKind::P3d3 | CandidateKind::P3d5 => vec![[k, k, 1], [1, 1, k]],
        }
    }
}

impl std::fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Normalization, rectification, then convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Phi<T> {
    pub norm: BatchNorm<T>,
    pub conv: Conv3d<T>,
}

#[derive(Debug, Clone)]
pub struct PhiCache<T> {
    norm: NormCache<T>,
    /// Rectified activations fed to the convolution.
    activated: Tensor<T>,
}

impl<T: Real> Phi<T> {
    pub fn new(cin: usize, cout: usize, kernel: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            norm: BatchNorm::new(cin),
            conv: Conv3d::new(cin, cout, kernel, false, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, PhiCache<T>)> {
        if x.channels() != self.norm.channels() {
            return shape_err(format!(
                "operator expects {} channels, got {}",
                self.norm.channels(),
                x.channels()
            ));
        }
        let (normed, norm) = self.norm.forward(x, mode);
        let activated = normed.map(|v| v.max(T::zero()));
        let y = self.conv.forward(&activated)?;
        Ok((y, PhiCache { norm, activated }))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels() != self.norm.channels() {
            return shape_err(format!(
                "operator expects {} channels, got {}",
                self.norm.channels(),
                x.channels()
            ));
        }
        let activated = self.norm.infer(x).map(|v| v.max(T::zero()));
        self.conv.forward(&activated)
    }

    pub fn backward(&mut self, cache: &PhiCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut da = self.conv.backward(&cache.activated, dy)?;
        for (g, &a) in da.data_mut().iter_mut().zip(cache.activated.data()) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        Ok(self.norm.backward(&cache.norm, &da))
    }

    /// Identity configuration: pass-through normalization and a delta kernel.
    /// Rectification still applies, so this is the identity only on non-negative input.
    pub fn set_identity(&mut self) {
        self.norm.set_identity();
        self.conv.set_identity();
    }
}

impl<T: Real> Parameterized<T> for Phi<T> {
    fn visit_params(&mut self, group: ParamGroup, f: &mut dyn FnMut(&mut Param<T>)) {
        self.norm.visit_params(group, f);
        self.conv.visit_params(group, f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.norm.visit_buffers(f);
    }
}

/// One instantiated search-space operator: a single [`Phi`], or two for pseudo-3D.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateOp<T> {
    kind: CandidateKind,
    in_channels: usize,
    out_channels: usize,
    pub stages: Vec<Phi<T>>,
}

pub type CandidateCache<T> = Vec<PhiCache<T>>;

impl<T: Real> CandidateOp<T> {
    pub fn new(kind: CandidateKind, in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let mut cin = in_channels;
        let stages = kind
            .stage_kernels()
            .into_iter()
            .map(|k| {
                let phi = Phi::new(cin, out_channels, k, rng);
                cin = out_channels;
                phi
            })
            .collect();
        Self {
            kind,
            in_channels,
            out_channels,
            stages,
        }
    }

    pub fn kind(&self) -> CandidateKind {
        self.kind
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, CandidateCache<T>)> {
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut cur = None::<Tensor<T>>;
        for st in &mut self.stages {
            let (y, c) = st.forward(cur.as_ref().unwrap_or(x), mode)?;
            caches.push(c);
            cur = Some(y);
        }
        Ok((cur.expect("at least one stage"), caches))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = self.stages[0].infer(x)?;
        for st in &self.stages[1..] {
            cur = st.infer(&cur)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, caches: &CandidateCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = dy.clone();
        for (st, c) in self.stages.iter_mut().zip(caches).rev() {
            g = st.backward(c, &g)?;
        }
        Ok(g)
    }

    pub fn set_identity(&mut self) {
        self.stages.iter_mut().for_each(Phi::set_identity);
    }
}

impl<T: Real> Parameterized<T> for CandidateOp<T> {
    fn visit_params(&mut self, group: ParamGroup, f: &mut dyn FnMut(&mut Param<T>)) {
        for st in &mut self.stages {
            st.visit_params(group, f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for st in &mut self.stages {
            st.visit_buffers(f);
        }
    }
}

/// Network layout. `ops == None` builds the relaxed super-network used during search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub channels_per_block: Vec<usize>,
    pub downsample_between_blocks: Vec<bool>,
    pub convs_per_block: usize,
    pub ops: Option<Genotype>,
}

/// Inputs with fewer slices than this are never pooled along z.
pub const MIN_Z_FOR_POOLING: usize = 32;

impl BackboneSpec {
    /// Four blocks, widths 16/32/64/128 scaled by `width`, pooling before blocks 2–4.
    pub fn standard(in_channels: usize, out_channels: usize, ops: Option<Genotype>, width: f64) -> Self {
        let channels = [16usize, 32, 64, 128]
            .iter()
            .map(|&c| ((c as f64 * width).round() as usize).max(1))
            .collect();
        Self {
            in_channels,
            out_channels,
            channels_per_block: channels,
            downsample_between_blocks: vec![false, true, true, true],
            convs_per_block: 2,
            ops,
        }
    }

    pub fn block_count(&self) -> usize {
        self.channels_per_block.len()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.block_count();
        if b == 0 {
            return config_err("backbone needs at least one block");
        }
        if self.downsample_between_blocks.len() != b {
            return config_err(format!(
                "{} downsample flags for {} blocks",
                self.downsample_between_blocks.len(),
                b
            ));
        }
        if let Some(g) = &self.ops {
            if g.choices.len() != b {
                return config_err(format!("genotype has {} choices for {} blocks", g.choices.len(), b));
            }
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.convs_per_block == 0 {
            return config_err("channel counts and convs_per_block must be positive");
        }
        if self.channels_per_block.iter().any(|&c| c == 0) {
            return config_err("block widths must be positive");
        }
        Ok(())
    }

    /// Pooling factor applied before each block for an input of the given shape.
    pub fn pool_factors(&self, input: [usize; 3]) -> Vec<Option<[usize; 3]>> {
        let fz = if input[2] >= MIN_Z_FOR_POOLING { 2 } else { 1 };
        self.downsample_between_blocks
            .iter()
            .map(|&d| d.then_some([2, 2, fz]))
            .collect()
    }

    /// Per-axis multiple the input shape must be divisible by.
    pub fn shape_multiple(&self, input: [usize; 3]) -> [usize; 3] {
        let mut m = [1usize; 3];
        for f in self.pool_factors(input).into_iter().flatten() {
            for a in 0..3 {
                m[a] *= f[a];
            }
        }
        m
    }

    pub fn check_input(&self, input: [usize; 3]) -> Result<()> {
        let m = self.shape_multiple(input);
        if (0..3).any(|a| input[a] == 0 || input[a] % m[a] != 0) {
            return shape_err(format!(
                "input shape {input:?} is not divisible by the cumulative downsampling factor {m:?}"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockOps<T> {
    Fixed(Vec<CandidateOp<T>>),
    Relaxed(RelaxedBlock<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ops: BlockOps<T>,
    pub head: Conv3d<T>,
}

enum BlockCache<T> {
    Fixed(Vec<CandidateCache<T>>),
    Relaxed(RelaxedCache<T>),
}

impl<T: Real> Block<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BlockCache<T>)> {
        match &mut self.ops {
            BlockOps::Fixed(layers) => {
                let mut caches = Vec::with_capacity(layers.len());
                let (mut cur, c) = layers[0].forward(x, mode)?;
                caches.push(c);
                for op in layers[1..].iter_mut() {
                    let (y, c) = op.forward(&cur, mode)?;
                    caches.push(c);
                    cur = y;
                }
                Ok((cur, BlockCache::Fixed(caches)))
            }
            BlockOps::Relaxed(rb) => {
                let (y, c) = rb.forward(x, mode)?;
                Ok((y, BlockCache::Relaxed(c)))
            }
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.ops {
            BlockOps::Fixed(layers) => {
                let mut cur = layers[0].infer(x)?;
                for op in &layers[1..] {
                    cur = op.infer(&cur)?;
                }
                Ok(cur)
            }
            BlockOps::Relaxed(rb) => rb.infer(x),
        }
    }

    fn backward(&mut self, cache: &BlockCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match (&mut self.ops, cache) {
            (BlockOps::Fixed(layers), BlockCache::Fixed(caches)) => {
                let mut g = dy.clone();
                for (op, c) in layers.iter_mut().zip(caches).rev() {
                    g = op.backward(c, &g)?;
                }
                Ok(g)
            }
            (BlockOps::Relaxed(rb), BlockCache::Relaxed(c)) => rb.backward(c, dy),
            _ => unreachable!("cache produced by the same block"),
        }
    }
}

impl<T: Real> Parameterized<T> for Block<T> {
    fn visit_params(&mut self, group: ParamGroup, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.ops {
            BlockOps::Fixed(layers) => layers.iter_mut().for_each(|op| op.visit_params(group, f)),
            BlockOps::Relaxed(rb) => rb.visit_params(group, f),
        }
        self.head.visit_params(group, f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut [T])) {
        match &mut self.ops {
            BlockOps::Fixed(layers) => layers.iter_mut().for_each(|op| op.visit_buffers(f)),
            BlockOps::Relaxed(rb) => rb.visit_buffers(f),
        }
    }
}

/// Per-block outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct SideOutputs<T> {
    /// Raw head logits at each block's own resolution.
    pub per_block_logits: Vec<Tensor<T>>,
    /// Progressive sums of the upsampled side outputs, at input resolution.
    pub fused: Vec<Tensor<T>>,
}

impl<T: Real> SideOutputs<T> {
    /// Logits of the final (deepest) fused output.
    pub fn final_logits(&self) -> &Tensor<T> {
        self.fused.last().expect("at least one block")
    }

    pub fn final_probs(&self) -> Tensor<T> {
        self.final_logits().softmax_channels()
    }
}

/// Forward-pass record needed by [`Backbone::backward`].
pub struct Tape<T> {
    input_spatial: [usize; 3],
    pools: Vec<Option<PoolCache>>,
    blocks: Vec<BlockCache<T>>,
    block_out: Vec<Tensor<T>>,
    side_spatial: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    spec: BackboneSpec,
    pub blocks: Vec<Block<T>>,
}

impl<T: Real> Backbone<T> {
    /// Build with He-initialized operators and zero-initialized heads.
    pub fn new(spec: BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.block_count());
        let mut cin = spec.in_channels;
        for (i, &width) in spec.channels_per_block.iter().enumerate() {
            let ops = match &spec.ops {
                Some(g) => {
                    let mut layers = Vec::with_capacity(spec.convs_per_block);
                    for l in 0..spec.convs_per_block {
                        let c = if l == 0 { cin } else { width };
                        layers.push(CandidateOp::new(g.choices[i], c, width, rng));
                    }
                    BlockOps::Fixed(layers)
                }
                None => BlockOps::Relaxed(RelaxedBlock::new(cin, width, spec.convs_per_block, rng)),
            };
            blocks.push(Block {
                ops,
                head: Conv3d::zeroed(width, spec.out_channels, [1, 1, 1], true),
            });
            cin = width;
        }
        Ok(Self { spec, blocks })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn is_relaxed(&self) -> bool {
        self.spec.ops.is_none()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(SideOutputs<T>, Tape<T>)> {
        let input_spatial = self.check(x)?;
        let factors = self.spec.pool_factors(input_spatial);
        let mut tape = Tape {
            input_spatial,
            pools: Vec::new(),
            blocks: Vec::new(),
            block_out: Vec::new(),
            side_spatial: Vec::new(),
        };
        let mut per_block = Vec::new();
        let mut fused: Vec<Tensor<T>> = Vec::new();
        let mut cur = x.clone();
        for (block, factor) in self.blocks.iter_mut().zip(factors) {
            if let Some(f) = factor {
                let (p, c) = max_pool(&cur, f)?;
                cur = p;
                tape.pools.push(Some(c));
            } else {
                tape.pools.push(None);
            }
            let (y, c) = block.forward(&cur, mode)?;
            tape.blocks.push(c);
            let side = block.head.forward(&y)?;
            tape.side_spatial.push(side.spatial());
            let mut f = upsample(&side, input_spatial);
            if let Some(prev) = fused.last() {
                f.add_assign(prev);
            }
            fused.push(f);
            per_block.push(side);
            tape.block_out.push(y.clone());
            cur = y;
        }
        Ok((
            SideOutputs {
                per_block_logits: per_block,
                fused,
            },
            tape,
        ))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<SideOutputs<T>> {
        let input_spatial = self.check(x)?;
        let factors = self.spec.pool_factors(input_spatial);
        let mut per_block = Vec::new();
        let mut fused: Vec<Tensor<T>> = Vec::new();
        let mut cur = x.clone();
        for (block, factor) in self.blocks.iter().zip(factors) {
            if let Some(f) = factor {
                cur = max_pool_infer(&cur, f)?;
            }
            cur = block.infer(&cur)?;
            let side = block.head.forward(&cur)?;
            let mut f = upsample(&side, input_spatial);
            if let Some(prev) = fused.last() {
                f.add_assign(prev);
            }
            fused.push(f);
            per_block.push(side);
        }
        Ok(SideOutputs {
            per_block_logits: per_block,
            fused,
        })
    }

    fn check(&self, x: &Tensor<T>) -> Result<[usize; 3]> {
        if x.channels() != self.spec.in_channels {
            return shape_err(format!(
                "backbone expects {} input channels, got {}",
                self.spec.in_channels,
                x.channels()
            ));
        }
        self.spec.check_input(x.spatial())?;
        Ok(x.spatial())
    }

    /// Backpropagate gradients on the fused outputs (one per block, `None` for
    /// unsupervised outputs). Accumulates parameter gradients and returns the
    /// gradient with respect to the input.
    pub fn backward(&mut self, tape: &Tape<T>, d_fused: &[Option<Tensor<T>>]) -> Result<Tensor<T>> {
        let b = self.blocks.len();
        if d_fused.len() != b {
            return shape_err(format!("{} fused gradients for {} blocks", d_fused.len(), b));
        }
        // fused_i = sum_{j<=i} up(side_j), so d up(side_j) = sum_{i>=j} d fused_i
        let mut running: Option<Tensor<T>> = None;
        let mut d_up: Vec<Option<Tensor<T>>> = vec![None; b];
        for i in (0..b).rev() {
            if let Some(g) = &d_fused[i] {
                match &mut running {
                    Some(r) => r.add_assign(g),
                    None => running = Some(g.clone()),
                }
            }
            d_up[i] = running.clone();
        }
        let mut carry: Option<Tensor<T>> = None;
        for i in (0..b).rev() {
            let block_out = &tape.block_out[i];
            let mut d_feat = match &d_up[i] {
                Some(g) => {
                    let d_side = upsample_adjoint(g, tape.side_spatial[i]);
                    self.blocks[i].head.backward(block_out, &d_side)?
                }
                None => Tensor::zeros(block_out.shape()),
            };
            if let Some(c) = carry.take() {
                d_feat.add_assign(&c);
            }
            let mut d_in = self.blocks[i].backward(&tape.blocks[i], &d_feat)?;
            if let Some(pc) = &tape.pools[i] {
                d_in = max_pool_backward(pc, &d_in);
            }
            carry = Some(d_in);
        }
        let d = carry.expect("at least one block");
        debug_assert_eq!(d.spatial(), tape.input_spatial);
        Ok(d)
    }

    /// Copy of this network with each relaxed block replaced by its highest-weighted
    /// operator, keeping that operator's trained weights.
    pub fn discretized(&self) -> Self {
        let genotype = crate::nas::discretize_backbone(self);
        let mut spec = self.spec.clone();
        spec.ops = Some(genotype.clone());
        let blocks = self
            .blocks
            .iter()
            .zip(&genotype.choices)
            .map(|(blk, &kind)| Block {
                ops: match &blk.ops {
                    BlockOps::Fixed(l) => BlockOps::Fixed(l.clone()),
                    BlockOps::Relaxed(rb) => BlockOps::Fixed(rb.extract(kind)),
                },
                head: blk.head.clone(),
            })
            .collect();
        Self { spec, blocks }
    }

    /// Learnable parameters by role: `(operator weights, normalization, heads)`.
    pub fn census(&mut self) -> (usize, usize, usize) {
        let (mut conv, mut norm, mut head) = (0, 0, 0);
        for blk in &mut self.blocks {
            let mut count_op = |op: &mut CandidateOp<T>| {
                for st in &mut op.stages {
                    conv += st.conv.param_count(ParamGroup::Weights);
                    norm += st.norm.param_count(ParamGroup::Weights);
                }
            };
            match &mut blk.ops {
                BlockOps::Fixed(layers) => layers.iter_mut().for_each(&mut count_op),
                BlockOps::Relaxed(rb) => rb.layers.iter_mut().flatten().for_each(&mut count_op),
            }
            head += blk.head.param_count(ParamGroup::Weights);
        }
        (conv, norm, head)
    }

    /// Ordered list of relaxed blocks (empty for a discrete network).
    pub fn relaxed_blocks(&self) -> Vec<&RelaxedBlock<T>> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.ops {
                BlockOps::Relaxed(rb) => Some(rb),
                BlockOps::Fixed(_) => None,
            })
            .collect()
    }

    pub fn relaxed_blocks_mut(&mut self) -> Vec<&mut RelaxedBlock<T>> {
        self.blocks
            .iter_mut()
            .filter_map(|b| match &mut b.ops {
                BlockOps::Relaxed(rb) => Some(rb),
                BlockOps::Fixed(_) => None,
            })
            .collect()
    }
}

impl<T: Real> Parameterized<T> for Backbone<T> {
    fn visit_params(&mut self, group: ParamGroup, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.blocks {
            b.visit_params(group, f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for b in &mut self.blocks {
            b.visit_buffers(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn candidate_names_round_trip() {
        for k in CandidateKind::ALL {
            assert_eq!(CandidateKind::parse(k.name()), Some(k));
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
    }

    #[test]
    fn delta_kernel_with_bypassed_norm_is_identity() {
        let mut op = CandidateOp::<f64>::new(CandidateKind::K3d3, 2, 2, &mut rng());
        op.set_identity();
        let x = Tensor::from_vec([1, 2, 4, 4, 4], (0..128).map(|i| (i % 9) as f64 * 0.25).collect()).unwrap();
        let y = op.infer(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_block_without_pooling_keeps_input_shape() {
        let spec = BackboneSpec {
            in_channels: 1,
            out_channels: 3,
            channels_per_block: vec![4],
            downsample_between_blocks: vec![false],
            convs_per_block: 1,
            ops: Some(Genotype::new(vec![CandidateKind::K2d3])),
        };
        let net = Backbone::<f32>::new(spec, &mut rng()).unwrap();
        let out = net.infer(&Tensor::zeros([1, 1, 6, 5, 3])).unwrap();
        assert_eq!(out.per_block_logits.len(), 1);
        assert_eq!(out.final_logits().shape(), [1, 3, 6, 5, 3]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let spec = BackboneSpec::standard(1, 2, Some(Genotype::uniform(CandidateKind::K2d3, 4)), 0.25);
        let net = Backbone::<f32>::new(spec, &mut rng()).unwrap();
        assert!(net.infer(&Tensor::zeros([1, 1, 12, 16, 8])).is_err());
        assert!(net.infer(&Tensor::zeros([1, 2, 16, 16, 8])).is_err());
    }

    #[test]
    fn shallow_z_is_never_pooled() {
        let spec = BackboneSpec::standard(1, 2, Some(Genotype::uniform(CandidateKind::K2d3, 4)), 0.25);
        assert_eq!(spec.shape_multiple([64, 64, 16]), [8, 8, 1]);
        assert_eq!(spec.shape_multiple([64, 64, 64]), [8, 8, 8]);
    }

    fn noise(shape: [usize; 5], seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn candidates_keep_spatial_shape() {
        for k in CandidateKind::ALL {
            let op = CandidateOp::<f32>::new(k, 2, 5, &mut rng());
            let y = op.infer(&Tensor::zeros([1, 2, 7, 6, 5])).unwrap();
            assert_eq!(y.shape(), [1, 5, 7, 6, 5], "{k}");
        }
    }

    #[test]
    fn planar_candidates_are_z_separable() {
        let mut x = Tensor::<f64>::zeros([2, 2, 6, 5, 4]);
        let base = noise([2, 2, 6, 5, 1], 3);
        for n in 0..2 {
            for c in 0..2 {
                let (src, dst) = (base.chan(n, c).to_vec(), x.chan_mut(n, c));
                for (i, v) in dst.iter_mut().enumerate() {
                    *v = src[i / 4];
                }
            }
        }
        for k in [CandidateKind::K2d3, CandidateKind::K2d5] {
            let mut op = CandidateOp::<f64>::new(k, 2, 3, &mut rng());
            let (y, _) = op.forward(&x, Mode::Train).unwrap();
            for row in y.data().chunks(4) {
                assert!(row.iter().all(|&v| v == row[0]), "{k}");
            }
        }
    }

    #[test]
    fn candidate_gradients_match_finite_differences() {
        use crate::nn::gradcheck::check_module;
        // small volume so every candidate runs in well under a second
        let x = noise([2, 2, 4, 4, 4], 5);
        let probe = noise([2, 2, 4, 4, 4], 6);
        for k in CandidateKind::ALL {
            let op = CandidateOp::<f64>::new(k, 2, 2, &mut rng());
            let e = check_module(
                &op,
                &x,
                &probe,
                1e-5,
                |m, x| Ok(m.forward(x, Mode::Train)?.0),
                |m, x, dy| {
                    let (_, c) = m.forward(x, Mode::Train)?;
                    m.backward(&c, dy)
                },
            )
            .unwrap();
            assert!(e.input < 1e-3 && e.weights < 1e-3, "{k}: {e:?}");
        }
    }
}
