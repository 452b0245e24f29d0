//! Frequency-guided structure prompts.
//!
//! Per stage, a structure branch refines the high-frequency image and an
//! image branch pools the raw image to the stage grid. Their concatenation is
//! the prompt, which is joined to every layer input and squeezed back to the
//! stage width by channel attention and two pointwise MLPs.

use super::graph::{ConvSpec, Var};
use super::layers::{BatchNorm, BnBuffer, ChannelAttention, Conv, Ctx, ParamStore};
use super::NnError;

pub const CA_REDUCTION: usize = 4;

/// Stage-level FGSA parameters: both refinement branches plus the channel
/// attention and MLP shared by all layers of the stage.
#[derive(Debug, Clone)]
pub struct FgsaStage {
    pub refine: Conv,
    pub refine_bn: BatchNorm,
    pub linear: Conv,
    /// Average-pool factor from the previous image-branch grid.
    pub pool: usize,
    pub ca: ChannelAttention,
    pub mlp_shared: Conv,
}

impl FgsaStage {
    /// `first` selects the 4× reduction of stage 1 (2× afterwards).
    /// `structure_in`/`image_in` are the branch widths entering this stage.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        buffers: &mut Vec<BnBuffer>,
        name: &str,
        first: bool,
        structure_in: usize,
        image_in: usize,
        structure_width: usize,
        image_width: usize,
        stage_width: usize,
    ) -> Self {
        let (k, spec, pool) = if first { (4, ConvSpec::new(4, 0), 4) } else { (3, ConvSpec::new(2, 1), 2) };
        let joined = structure_width + image_width + stage_width;
        FgsaStage {
            refine: Conv::new(store, &format!("{name}.refine"), structure_in, structure_width, k, spec, false),
            refine_bn: BatchNorm::new(store, buffers, &format!("{name}.refine_bn"), structure_width),
            linear: Conv::linear(store, &format!("{name}.linear"), image_in, image_width),
            pool,
            ca: ChannelAttention::new(store, &format!("{name}.ca"), joined, CA_REDUCTION),
            mlp_shared: Conv::linear(store, &format!("{name}.mlp_us"), joined, joined),
        }
    }

    /// Convolution, batch norm, ReLU on the previous structure features.
    pub fn refine_structure(&self, ctx: &mut Ctx, prev: Var) -> Result<Var, NnError> {
        let h = self.refine.apply(ctx, prev)?;
        let h = self.refine_bn.apply(ctx, h)?;
        Ok(ctx.graph.relu(h))
    }

    /// Average pool to the stage grid, then a per-position linear map.
    pub fn refine_image(&self, ctx: &mut Ctx, prev: Var) -> Result<Var, NnError> {
        let p = ctx.graph.avg_pool(prev, self.pool)?;
        self.linear.apply(ctx, p)
    }

    /// Layer `layer_mlp` is the per-layer projection back to stage width.
    pub fn regularize(&self, ctx: &mut Ctx, injected: Var, layer_mlp: &Conv) -> Result<Var, NnError> {
        let a = self.ca.apply(ctx, injected)?;
        let h = self.mlp_shared.apply(ctx, a)?;
        let h = ctx.graph.gelu(h);
        layer_mlp.apply(ctx, h)
    }
}

/// Prompt = image-branch features followed by structure features.
pub fn build_prompt(ctx: &mut Ctx, fs: Var, fpa: Var) -> Result<Var, NnError> {
    ctx.graph.concat(&[fpa, fs])
}

/// Prompt channels first, then the layer input.
pub fn inject(ctx: &mut Ctx, prompt: Var, layer_input: Var) -> Result<Var, NnError> {
    ctx.graph.concat(&[prompt, layer_input])
}
