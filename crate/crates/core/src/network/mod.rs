//! The multi-patch attention network.
//!
//! A U-shaped global branch with axial-attention encoder stages runs at full resolution.
//! Local branches cut the image into non-overlapping patches, encode every patch with a
//! shared CBR / non-local / CBR stack and stitch the patches back. Features are fused
//! bottom-up, from the smallest patches to the global branch, each step a channel
//! concatenation followed by CBR, and a 1×1 head with a sigmoid produces the heatmap.

mod patch;

pub use patch::{merge_tensor, patch_merge, patch_split, split_tensor};

use rand::Rng;

use crate::attention::{AttentionOptions, AxialAttentionConfig, AxialBlock, NonLocalBlock};
use crate::autodiff::nn::{max_pool2x2, upsample2x, Upsample};
use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Cbr, Conv2d};
use crate::params::{Ctx, ParamStore};
use crate::raster::{Image, Mask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fusion {
    /// Channel concatenation followed by a CBR block.
    #[default]
    ConcatCbr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpaNetConfig {
    /// (height, width) of the network input.
    pub input_size: (usize, usize),
    /// Channel width of each global encoder stage; its length is the stage count.
    pub channels: Vec<usize>,
    pub heads: usize,
    /// Patch grid factors; exactly one must be 1 (the global branch).
    pub patch_scales: Vec<usize>,
    pub fusion: Fusion,
    /// Heatmap binarization cut (strict `>`).
    pub threshold: f64,
    pub positional: bool,
    pub scale_logits: bool,
    pub per_head_embeddings: bool,
    /// Non-local blocks per local branch.
    pub local_blocks: usize,
    pub upsample: Upsample,
}

impl Default for MpaNetConfig {
    fn default() -> Self {
        Self {
            input_size: (256, 256),
            channels: vec![16, 32, 64],
            heads: 4,
            patch_scales: vec![1, 2, 4],
            fusion: Fusion::ConcatCbr,
            threshold: 0.5,
            positional: true,
            scale_logits: true,
            per_head_embeddings: false,
            local_blocks: 1,
            upsample: Upsample::Nearest,
        }
    }
}

impl MpaNetConfig {
    pub fn with_input_size(mut self, height: usize, width: usize) -> Self {
        self.input_size = (height, width);
        self
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Local patch factors ordered from the smallest patches (largest factor) upward.
    pub fn local_factors(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .patch_scales
            .iter()
            .copied()
            .filter(|&f| f != 1)
            .collect();
        f.sort_unstable_by(|a, b| b.cmp(a));
        f
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let stages = self.stages();
        if stages == 0 || self.channels.contains(&0) {
            return Err(Error::Config(
                "at least one stage with positive channel width is required".into(),
            ));
        }
        let down = 1usize << stages;
        if h == 0 || w == 0 || h % down != 0 || w % down != 0 {
            return Err(Error::Config(format!(
                "input {h}×{w} must be divisible by 2^{stages} = {down}"
            )));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be positive".into()));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % self.heads != 0) {
            return Err(Error::Config(format!(
                "channel width {c} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.patch_scales.len() != 3
            || self.patch_scales.iter().filter(|&&f| f == 1).count() != 1
        {
            return Err(Error::Config(format!(
                "patch scales {:?} must be three factors with exactly one equal to 1",
                self.patch_scales
            )));
        }
        let mut sorted = self.patch_scales.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != 3 {
            return Err(Error::Config(format!(
                "patch scales {:?} must be distinct",
                self.patch_scales
            )));
        }
        for &f in &self.patch_scales {
            if f == 0 || h % f != 0 || w % f != 0 {
                return Err(Error::Config(format!(
                    "input {h}×{w} is not divisible by patch factor {f}"
                )));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }

    fn attention_config(&self, channels: usize, axis_len: usize) -> AxialAttentionConfig {
        AxialAttentionConfig {
            c_in: channels,
            c_mid: channels,
            c_out: channels,
            heads: self.heads,
            axis_len,
            positional: self.positional,
            scale_logits: self.scale_logits,
            per_head_embeddings: self.per_head_embeddings,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub cbr: Cbr,
    pub attention: AxialBlock,
}

#[derive(Clone, Debug)]
pub struct GlobalBranch {
    pub encoder: Vec<EncoderStage>,
    /// `decoder[k]` merges the upsampled stage `k + 1` output with the stage `k` skip.
    pub decoder: Vec<Cbr>,
    pub upsample: Upsample,
}

impl GlobalBranch {
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (k, stage) in self.encoder.iter().enumerate() {
            if k > 0 {
                h = max_pool2x2(h)?;
            }
            h = stage.attention.forward(ctx, stage.cbr.forward(ctx, h)?)?;
            skips.push(h);
        }
        let mut d = skips.pop().expect("at least one stage");
        for (k, cbr) in self.decoder.iter().enumerate().rev() {
            let up = upsample2x(d, self.upsample)?;
            d = cbr.forward(ctx, concat(&[up, skips[k]], 1)?)?;
        }
        Ok(d)
    }
}

/// Patch-wise encoder shared by every patch of one scale.
#[derive(Clone, Debug)]
pub struct LocalBranch {
    pub factor: usize,
    pub stem: Cbr,
    pub attention: Vec<NonLocalBlock>,
    pub tail: Cbr,
}

impl LocalBranch {
    /// Runs the shared encoder on a batch of patches.
    pub fn encode<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        patches: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let mut h = self.stem.forward(ctx, patches)?;
        for block in &self.attention {
            h = block.forward(ctx, h)?;
        }
        self.tail.forward(ctx, h)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        patch_merge(self.encode(ctx, patch_split(x, self.factor)?)?, self.factor)
    }
}

#[derive(Clone, Debug)]
pub struct MpaNet {
    pub config: MpaNetConfig,
    pub global: GlobalBranch,
    /// Ordered from the smallest patches upward.
    pub locals: Vec<LocalBranch>,
    /// `fuse[i]` consumes the running fused map and the next branch up.
    pub fuse: Vec<Cbr>,
    pub head: Conv2d,
}

impl MpaNet {
    /// Builds the network and registers its parameters in `store`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: MpaNetConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (h, w) = config.input_size;
        let ch = &config.channels;
        let mut encoder = Vec::with_capacity(ch.len());
        for (k, &c) in ch.iter().enumerate() {
            let c_prev = if k == 0 { 1 } else { ch[k - 1] };
            let (hk, wk) = (h >> k, w >> k);
            encoder.push(EncoderStage {
                cbr: Cbr::new(store, &format!("global.stage{k}.enc"), c_prev, c, rng)?,
                attention: AxialBlock::new(
                    store,
                    &format!("attn.{k}"),
                    config.attention_config(c, hk),
                    config.attention_config(c, wk),
                    true,
                    rng,
                )?,
            });
        }
        let decoder = (0..ch.len() - 1)
            .map(|k| {
                Cbr::new(
                    store,
                    &format!("global.stage{k}.dec"),
                    ch[k + 1] + ch[k],
                    ch[k],
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let c0 = ch[0];
        let opts = AttentionOptions {
            heads: config.heads,
            scale_logits: config.scale_logits,
        };
        let mut locals = Vec::new();
        for f in config.local_factors() {
            let prefix = format!("local{f}");
            locals.push(LocalBranch {
                factor: f,
                stem: Cbr::new(store, &format!("{prefix}.cbr1"), 1, c0, rng)?,
                attention: (0..config.local_blocks)
                    .map(|i| {
                        NonLocalBlock::new(store, &format!("{prefix}.nl{i}"), c0, c0, opts, rng)
                    })
                    .collect::<Result<_>>()?,
                tail: Cbr::new(store, &format!("{prefix}.cbr2"), c0, c0, rng)?,
            });
        }
        let fuse = (0..locals.len())
            .map(|i| Cbr::new(store, &format!("fuse.{i}"), 2 * c0, c0, rng))
            .collect::<Result<_>>()?;
        let head = Conv2d::new(store, "head", c0, 1, 1, true, rng)?;
        Ok(Self {
            global: GlobalBranch {
                encoder,
                decoder,
                upsample: config.upsample,
            },
            locals,
            fuse,
            head,
            config,
        })
    }

    fn check_input<T: Scalar>(&self, x: &Var<'_, T>) -> Result<()> {
        let s = x.shape();
        let (h, w) = self.config.input_size;
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(Error::dim(
                "mpanet",
                format!("expected N×1×{h}×{w} input, got {s:?}"),
            ));
        }
        Ok(())
    }

    /// Bottom-up fusion of the global map with local maps ordered smallest patches first.
    pub fn fuse_branches<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        global: Var<'t, T>,
        locals: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        if locals.len() != self.fuse.len() {
            return Err(Error::Contract(format!(
                "expected {} local maps, got {}",
                self.fuse.len(),
                locals.len()
            )));
        }
        let gs = global.shape();
        for l in locals {
            if l.shape() != gs {
                return Err(Error::dim(
                    "fuse_branches",
                    format!("local map {:?} vs global map {gs:?}", l.shape()),
                ));
            }
        }
        let mut chain = locals
            .iter()
            .copied()
            .skip(1)
            .chain(std::iter::once(global));
        let mut acc = match locals.first() {
            Some(&first) => first,
            None => return Ok(global),
        };
        for cbr in &self.fuse {
            let next = chain.next().expect("one input per fusion step");
            acc = cbr.forward(ctx, concat(&[acc, next], 1)?)?;
        }
        Ok(acc)
    }

    /// Fused feature map before the output head.
    pub fn features<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.check_input(&x)?;
        let global = self.global.forward(ctx, x)?;
        let locals = self
            .locals
            .iter()
            .map(|b| b.forward(ctx, x))
            .collect::<Result<Vec<_>>>()?;
        self.fuse_branches(ctx, global, &locals)
    }

    /// Sigmoid heatmap `N×1×H×W` for a grayscale batch `N×1×H×W`.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let f = self.features(ctx, x)?;
        Ok(self.head.forward(ctx, f)?.sigmoid())
    }

    /// Eval-mode heatmap of a batch, without recording gradients.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: Tensor<T>,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, store);
        let x = ctx.input(images);
        Ok((*self.forward(&ctx, x)?.value()).clone())
    }

    /// Heatmap of one image of any size. The image is zero-padded at the bottom and right to
    /// a whole number of input-sized tiles, each tile is scored, and the result is cropped
    /// back to the original extent.
    pub fn predict_image(&self, store: &ParamStore<f32>, image: &Image) -> Result<Image> {
        let (th, tw) = self.config.input_size;
        let (h, w) = image.dims();
        if h == 0 || w == 0 {
            return Err(Error::dim("predict_image", "empty image"));
        }
        let (rows, cols) = (h.div_ceil(th), w.div_ceil(tw));
        let mut tiles = Vec::with_capacity(rows * cols * th * tw);
        for tr in 0..rows {
            for tc in 0..cols {
                for r in 0..th {
                    for c in 0..tw {
                        let (y, x) = (tr * th + r, tc * tw + c);
                        tiles.push(if y < h && x < w { image.get(y, x) } else { 0.0 });
                    }
                }
            }
        }
        let heat = self.predict(store, Tensor::new([rows * cols, 1, th, tw], tiles)?)?;
        let d = heat.data();
        Ok(Image::from_fn(h, w, |y, x| {
            d[((y / th * cols + x / tw) * th + y % th) * tw + x % tw]
        }))
    }
}

/// Binarizes an `N×1×H×W` heatmap with a strict `value > threshold` test.
pub fn predict_mask<T: Scalar>(heatmap: &Tensor<T>, threshold: f64) -> Result<Vec<Mask>> {
    let [n, 1, h, w] = *heatmap.shape() else {
        return Err(Error::dim(
            "predict_mask",
            format!("expected N×1×H×W heatmap, got {:?}", heatmap.shape()),
        ));
    };
    let t = T::of(threshold);
    Ok((0..n)
        .map(|s| {
            let plane = &heatmap.data()[s * h * w..(s + 1) * h * w];
            Mask::new(h, w, plane.iter().map(|&v| v > t).collect()).expect("plane extents match")
        })
        .collect())
}
