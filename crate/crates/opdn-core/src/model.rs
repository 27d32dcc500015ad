//! Model assembly: the x4 super-resolution variants A and B, the
//! same-resolution stage-2 enhancer, and the small learned-degradation
//! network. Parameters live in an ordered name -> tensor store so that
//! checkpoints, weight transfer, and gradient lookups all share one naming
//! scheme.

use indexmap::IndexMap;
use ndarray::{Array4, ArrayD, Ix4, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blocks::{
    self, ChannelAttentionParams, OpdbParams, SffParams, ShuffleDirection, WindowAttentionParams,
};
use crate::erp::{self, ErpContext, PeMode};
use crate::error::{invalid, Result};
use crate::kernels::PadMode;
use crate::tape::{fs, Graph, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    #[serde(rename = "stage2")]
    Stage2,
}

fn default_true() -> bool {
    true
}
fn default_mlp_ratio() -> f64 {
    2.0
}
fn default_reduction() -> usize {
    8
}
fn default_clamp_div() -> usize {
    4
}

/// Architecture hyperparameters. The toy defaults train on a CPU; the
/// paper-scale preset exists for completeness, not as a test target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub n_groups: usize,
    pub blocks_per_group: usize,
    pub window: usize,
    pub heads: usize,
    pub d_pe: usize,
    /// 4 for A/B, 1 for stage2.
    pub scale: usize,
    pub use_sff: bool,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub use_opdb: bool,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_reduction")]
    pub ca_reduction: usize,
    /// Offsets are clamped to `max(H, W) / offset_clamp_div`.
    #[serde(default = "default_clamp_div")]
    pub offset_clamp_div: usize,
    #[serde(default)]
    pub pe_mode: PeMode,
}

impl ModelConfig {
    /// CPU-trainable defaults: embed 32, 2 groups of 2 blocks, window 8.
    pub fn toy(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            embed_dim: 32,
            n_groups: 2,
            blocks_per_group: 2,
            window: 8,
            heads: 4,
            d_pe: 16,
            scale: if variant == Variant::Stage2 { 1 } else { 4 },
            use_sff: variant == Variant::B,
            seed,
            use_opdb: true,
            mlp_ratio: 2.0,
            ca_reduction: 8,
            offset_clamp_div: 4,
            pe_mode: PeMode::Concat,
        }
    }

    /// Competition-scale preset (HAT-L class, window 32). Not exercised by
    /// the test suite.
    pub fn paper_preset(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            embed_dim: 180,
            n_groups: 6,
            blocks_per_group: 6,
            window: 32,
            heads: 6,
            d_pe: 32,
            scale: if variant == Variant::Stage2 { 1 } else { 4 },
            use_sff: variant == Variant::B,
            seed,
            use_opdb: true,
            mlp_ratio: 2.0,
            ca_reduction: 16,
            offset_clamp_div: 4,
            pe_mode: PeMode::Concat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.variant {
            Variant::A => {
                if self.use_sff {
                    return Err(invalid("variant A must not enable SFF"));
                }
                if self.scale != 4 {
                    return Err(invalid("variant A runs at scale 4"));
                }
            }
            Variant::B => {
                if !self.use_sff {
                    return Err(invalid("variant B requires SFF"));
                }
                if self.scale != 4 {
                    return Err(invalid("variant B runs at scale 4"));
                }
            }
            Variant::Stage2 => {
                if self.scale != 1 {
                    return Err(invalid("stage2 runs at scale 1"));
                }
            }
        }
        if self.embed_dim == 0 || self.n_groups == 0 || self.blocks_per_group == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(invalid("embed_dim must be divisible by heads"));
        }
        if self.d_pe % 4 != 0 || self.d_pe == 0 {
            return Err(invalid("d_pe must be divisible by 4"));
        }
        if self.embed_dim % self.ca_reduction != 0 {
            return Err(invalid("embed_dim must be divisible by ca_reduction"));
        }
        if self.window < 2 {
            return Err(invalid("window must be at least 2"));
        }
        if self.offset_clamp_div == 0 {
            return Err(invalid("offset_clamp_div must be positive"));
        }
        Ok(())
    }

    /// Channels entering the shallow convolution: RGB for A/B, the r=4
    /// unshuffled stack for stage2.
    pub fn in_channels(&self) -> usize {
        match self.variant {
            Variant::Stage2 => 3 * 16,
            _ => 3,
        }
    }

    fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }
}

pub type ParamStore = IndexMap<String, ArrayD<f32>>;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Offset fields captured during a traced forward pass, one per OPDB.
pub struct OffsetTrace {
    pub name: String,
    pub offsets: ArrayD<f32>,
}

enum Init {
    HeConv,
    Normal(f64),
    Zero,
    Ones,
    Const(f64),
    FuseSelectSecond,
}

fn param_schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.embed_dim;
    let taps = 9; // 3x3 deformable kernel
    let hidden = cfg.mlp_hidden();
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: &[usize], init: Init| {
        out.push((name, shape.to_vec(), init));
    };

    push(
        "conv_first.weight".into(),
        &[c, cfg.in_channels(), 3, 3],
        Init::HeConv,
    );
    push("conv_first.bias".into(), &[c], Init::Zero);

    for gi in 0..cfg.n_groups {
        for bi in 0..cfg.blocks_per_group {
            let p = format!("groups.{gi}.blocks.{bi}");
            push(format!("{p}.attn.qkv.weight"), &[c, 3 * c], Init::Normal(0.02));
            push(format!("{p}.attn.qkv.bias"), &[3 * c], Init::Zero);
            push(format!("{p}.attn.proj.weight"), &[c, c], Init::Normal(0.02));
            push(format!("{p}.attn.proj.bias"), &[c], Init::Zero);
            push(
                format!("{p}.ca.fc1.weight"),
                &[c, c / cfg.ca_reduction],
                Init::Normal(0.02),
            );
            push(format!("{p}.ca.fc1.bias"), &[c / cfg.ca_reduction], Init::Zero);
            push(
                format!("{p}.ca.fc2.weight"),
                &[c / cfg.ca_reduction, c],
                Init::Normal(0.02),
            );
            // Start the gate close to open so deep stacks do not attenuate.
            push(format!("{p}.ca.fc2.bias"), &[c], Init::Const(3.0));
            push(format!("{p}.norm.gamma"), &[c], Init::Ones);
            push(format!("{p}.norm.beta"), &[c], Init::Zero);
            push(format!("{p}.mlp.fc1.weight"), &[hidden, c, 1, 1], Init::Normal(0.02));
            push(format!("{p}.mlp.fc1.bias"), &[hidden], Init::Zero);
            push(format!("{p}.mlp.fc2.weight"), &[c, hidden, 1, 1], Init::Normal(0.02));
            push(format!("{p}.mlp.fc2.bias"), &[c], Init::Zero);
        }
        push(format!("groups.{gi}.conv.weight"), &[c, c, 3, 3], Init::HeConv);
        push(format!("groups.{gi}.conv.bias"), &[c], Init::Zero);
        if cfg.use_opdb {
            let p = format!("groups.{gi}.opdb");
            push(
                format!("{p}.offset1.weight"),
                &[c, c + cfg.d_pe + 1, 3, 3],
                Init::HeConv,
            );
            push(format!("{p}.offset1.bias"), &[c], Init::Zero);
            push(format!("{p}.offset2.weight"), &[2 * taps, c, 3, 3], Init::Zero);
            push(format!("{p}.offset2.bias"), &[2 * taps], Init::Zero);
            push(format!("{p}.deform.weight"), &[c, c, 3, 3], Init::HeConv);
            push(format!("{p}.deform.bias"), &[c], Init::Zero);
        }
        if cfg.use_sff {
            let p = format!("groups.{gi}.sff");
            push(format!("{p}.amp1.weight"), &[c, c, 1, 1], Init::Normal(0.02));
            push(format!("{p}.amp1.bias"), &[c], Init::Zero);
            push(format!("{p}.amp2.weight"), &[c, c, 1, 1], Init::Zero);
            push(format!("{p}.amp2.bias"), &[c], Init::Zero);
            push(format!("{p}.phase1.weight"), &[c, c, 1, 1], Init::Normal(0.02));
            push(format!("{p}.phase1.bias"), &[c], Init::Zero);
            push(format!("{p}.phase2.weight"), &[c, c, 1, 1], Init::Zero);
            push(format!("{p}.phase2.bias"), &[c], Init::Zero);
            push(format!("{p}.fuse.weight"), &[c, 2 * c, 1, 1], Init::FuseSelectSecond);
            push(format!("{p}.fuse.bias"), &[c], Init::Zero);
        }
    }

    push("conv_after_body.weight".into(), &[c, c, 3, 3], Init::HeConv);
    push("conv_after_body.bias".into(), &[c], Init::Zero);
    push("conv_up.weight".into(), &[c, c, 3, 3], Init::HeConv);
    push("conv_up.bias".into(), &[c], Init::Zero);
    push("conv_last.weight".into(), &[3, c, 3, 3], Init::HeConv);
    push("conv_last.bias".into(), &[3], Init::Zero);
    out
}

fn materialize(shape: &[usize], init: &Init, rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    match init {
        Init::Zero => ArrayD::zeros(IxDyn(shape)),
        Init::Ones => ArrayD::from_elem(IxDyn(shape), 1.0),
        Init::Const(v) => ArrayD::from_elem(IxDyn(shape), *v as f32),
        Init::Normal(std) => {
            let dist = Normal::new(0.0f64, *std).expect("std > 0");
            ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng) as f32)
        }
        Init::HeConv => {
            let fan_in: usize = shape[1..].iter().product();
            let dist = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("std > 0");
            ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng) as f32)
        }
        Init::FuseSelectSecond => blocks::fuse_select_second_half::<f32>(shape[0]),
    }
}

/// Build a model with deterministic, seed-keyed initialization.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    for (name, shape, init) in param_schema(config) {
        params.insert(name, materialize(&shape, &init, &mut rng));
    }
    Ok(Model {
        config: config.clone(),
        params,
    })
}

/// Outcome of a name-based weight transfer.
#[derive(Debug, Default)]
pub struct TransferReport {
    pub transferred: Vec<String>,
    pub skipped: Vec<(String, String)>,
}

/// Copy every parameter whose name and shape match from `src` into `dst`;
/// report the rest. This is how a trained x4 model seeds the stage-2
/// enhancer.
pub fn transfer_weights(src: &Model, dst: &mut Model) -> TransferReport {
    let mut report = TransferReport::default();
    for (name, value) in dst.params.iter_mut() {
        match src.params.get(name) {
            Some(sv) if sv.shape() == value.shape() => {
                value.assign(sv);
                report.transferred.push(name.clone());
            }
            Some(sv) => report.skipped.push((
                name.clone(),
                format!("shape {:?} vs {:?}", sv.shape(), value.shape()),
            )),
            None => report.skipped.push((name.clone(), "missing in source".into())),
        }
    }
    report
}

struct BlockVars {
    attn: WindowAttentionParams,
    ca: ChannelAttentionParams,
    norm_gamma: Var,
    norm_beta: Var,
    mlp_fc1_w: Var,
    mlp_fc1_b: Var,
    mlp_fc2_w: Var,
    mlp_fc2_b: Var,
}

impl Model {
    /// Insert every parameter as a leaf on the graph, in store order.
    pub fn insert_params<T: Scalar>(&self, g: &mut Graph<T>) -> IndexMap<String, Var> {
        let mut out = IndexMap::new();
        for (name, value) in &self.params {
            let cast = value.mapv(|v| fs::<T>(f64::from(v)));
            out.insert(name.clone(), g.leaf(cast));
        }
        out
    }

    /// Run the network on an already-built graph. `trace`, when given,
    /// collects the OPDB offset fields by name.
    pub fn forward_with_params<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &IndexMap<String, Var>,
        x: Var,
        ctx: Option<ErpContext>,
        mut trace: Option<&mut Vec<(String, Var)>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(invalid(format!(
                "expected (B, 3, H, W) input, got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let ctx = ctx.unwrap_or_else(|| ErpContext::whole_image(h));

        match cfg.variant {
            Variant::A | Variant::B => self.body(g, pv, x, ctx, &mut trace),
            Variant::Stage2 => {
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(invalid(format!(
                        "stage2 input {h}x{w} must be divisible by 4"
                    )));
                }
                let down = blocks::pixel_shuffle(g, x, 4, ShuffleDirection::Down)?;
                let inner_ctx = ErpContext {
                    full_h: ctx.full_h / 4.0,
                    row_origin: ctx.row_origin / 4.0,
                };
                let y = self.body(g, pv, down, inner_ctx, &mut trace)?;
                Ok(g.add(y, x))
            }
        }
    }

    /// Shared trunk: shallow conv, attention groups with OPDB (and SFF for
    /// variant B), body skip, spectral x4 upsampling, output projection.
    fn body<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &IndexMap<String, Var>,
        x: Var,
        ctx: ErpContext,
        trace: &mut Option<&mut Vec<(String, Var)>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let c = cfg.embed_dim;
        let shape = g.shape(x).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let var = |name: &str| -> Var { *pv.get(name).expect("parameter present") };

        let conv = |g: &mut Graph<T>, v: Var, prefix: &str| -> Var {
            let y = g.conv2d(v, var(&format!("{prefix}.weight")), PadMode::WrapLon, 1);
            g.bias_channel(y, var(&format!("{prefix}.bias")))
        };

        let f0 = conv(g, x, "conv_first");

        let pe = erp::erp_position_grid_ctx(h, w, cfg.d_pe, cfg.pe_mode, ctx)?;
        let dmap = erp::distortion_map_ctx(h, w, ctx)?;
        let offset_clamp = (h.max(w) as f64) / cfg.offset_clamp_div as f64;

        let mut f = f0;
        for gi in 0..cfg.n_groups {
            let group_in = f;
            for bi in 0..cfg.blocks_per_group {
                let p = format!("groups.{gi}.blocks.{bi}");
                let bv = BlockVars {
                    attn: WindowAttentionParams {
                        qkv_w: var(&format!("{p}.attn.qkv.weight")),
                        qkv_b: var(&format!("{p}.attn.qkv.bias")),
                        proj_w: var(&format!("{p}.attn.proj.weight")),
                        proj_b: var(&format!("{p}.attn.proj.bias")),
                    },
                    ca: ChannelAttentionParams {
                        fc1_w: var(&format!("{p}.ca.fc1.weight")),
                        fc1_b: var(&format!("{p}.ca.fc1.bias")),
                        fc2_w: var(&format!("{p}.ca.fc2.weight")),
                        fc2_b: var(&format!("{p}.ca.fc2.bias")),
                    },
                    norm_gamma: var(&format!("{p}.norm.gamma")),
                    norm_beta: var(&format!("{p}.norm.beta")),
                    mlp_fc1_w: var(&format!("{p}.mlp.fc1.weight")),
                    mlp_fc1_b: var(&format!("{p}.mlp.fc1.bias")),
                    mlp_fc2_w: var(&format!("{p}.mlp.fc2.weight")),
                    mlp_fc2_b: var(&format!("{p}.mlp.fc2.bias")),
                };
                // Alternate plain and shifted windows; the shifted pass
                // stands in for overlapping cross-attention.
                let shift = if bi % 2 == 1 { cfg.window / 2 } else { 0 };
                f = self.hab_block(g, f, &bv, shift)?;
            }
            f = conv(g, f, &format!("groups.{gi}.conv"));
            if cfg.use_opdb {
                let p = format!("groups.{gi}.opdb");
                let op = OpdbParams {
                    off1_w: var(&format!("{p}.offset1.weight")),
                    off1_b: var(&format!("{p}.offset1.bias")),
                    off2_w: var(&format!("{p}.offset2.weight")),
                    off2_b: var(&format!("{p}.offset2.bias")),
                    deform_w: var(&format!("{p}.deform.weight")),
                    deform_b: var(&format!("{p}.deform.bias")),
                };
                let out = blocks::opdb_forward(g, f, &pe, &dmap, &op, offset_clamp)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push((p, out.offsets));
                }
                f = out.out;
            }
            if cfg.use_sff {
                let p = format!("groups.{gi}.sff");
                let sp = SffParams {
                    amp1_w: var(&format!("{p}.amp1.weight")),
                    amp1_b: var(&format!("{p}.amp1.bias")),
                    amp2_w: var(&format!("{p}.amp2.weight")),
                    amp2_b: var(&format!("{p}.amp2.bias")),
                    ph1_w: var(&format!("{p}.phase1.weight")),
                    ph1_b: var(&format!("{p}.phase1.bias")),
                    ph2_w: var(&format!("{p}.phase2.weight")),
                    ph2_b: var(&format!("{p}.phase2.bias")),
                    fuse_w: var(&format!("{p}.fuse.weight")),
                    fuse_b: var(&format!("{p}.fuse.bias")),
                };
                f = blocks::sff_forward(g, f, &sp)?;
            }
            f = g.add(f, group_in);
        }

        let after = conv(g, f, "conv_after_body");
        let f = g.add(after, f0);
        let u = conv(g, f, "conv_up");
        let up = blocks::fourier_upsample(g, u, 4)?;
        let _ = c;
        Ok(conv(g, up, "conv_last"))
    }

    fn hab_block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        bv: &BlockVars,
        shift: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let a = blocks::window_attention(g, x, &bv.attn, cfg.window, cfg.heads, shift)?;
        let c = blocks::channel_attention(g, a, &bv.ca, cfg.ca_reduction)?;
        let n = g.layer_norm_chw(c, bv.norm_gamma, bv.norm_beta, fs::<T>(1e-5));
        let m = g.conv2d(n, bv.mlp_fc1_w, PadMode::Zero, 1);
        let m = g.bias_channel(m, bv.mlp_fc1_b);
        let m = g.gelu(m);
        let m = g.conv2d(m, bv.mlp_fc2_w, PadMode::Zero, 1);
        let m = g.bias_channel(m, bv.mlp_fc2_b);
        Ok(g.add(c, m))
    }

    /// Forward a batch. A/B map `(B, 3, H, W) -> (B, 3, 4H, 4W)`; stage2
    /// preserves the shape. `ctx` anchors cropped patches to their global
    /// latitude; `None` treats the input as a whole ERP image.
    pub fn forward(&self, x: &Array4<f32>, ctx: Option<ErpContext>) -> Result<Array4<f32>> {
        let (out, _) = self.forward_internal(x, ctx, false)?;
        Ok(out)
    }

    /// Forward plus the OPDB offset fields, for visualization.
    pub fn forward_traced(
        &self,
        x: &Array4<f32>,
        ctx: Option<ErpContext>,
    ) -> Result<(Array4<f32>, Vec<OffsetTrace>)> {
        self.forward_internal(x, ctx, true)
    }

    fn forward_internal(
        &self,
        x: &Array4<f32>,
        ctx: Option<ErpContext>,
        traced: bool,
    ) -> Result<(Array4<f32>, Vec<OffsetTrace>)> {
        let mut g = Graph::<f32>::new();
        let pv = self.insert_params(&mut g);
        let xv = g.leaf(x.clone().into_dyn());
        let mut trace_vars: Vec<(String, Var)> = Vec::new();
        let out = self.forward_with_params(
            &mut g,
            &pv,
            xv,
            ctx,
            if traced { Some(&mut trace_vars) } else { None },
        )?;
        let value = g
            .value(out)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("4-d output");
        let traces = trace_vars
            .into_iter()
            .map(|(name, v)| OffsetTrace {
                name,
                offsets: g.value(v).clone(),
            })
            .collect();
        Ok((value, traces))
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Learned degradation network (HR -> LR, x1/4)
// ---------------------------------------------------------------------------

/// Stand-in for the cited learnable degradation module: four convolutions,
/// two of them stride-2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub channels: usize,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DegradationModel {
    pub config: DegradationConfig,
    pub params: ParamStore,
}

pub fn build_degradation_model(config: &DegradationConfig) -> Result<DegradationModel> {
    if config.channels == 0 {
        return Err(invalid("degradation channels must be positive"));
    }
    let ch = config.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    let schema: Vec<(&str, Vec<usize>)> = vec![
        ("conv1.weight", vec![ch, 3, 5, 5]),
        ("conv1.bias", vec![ch]),
        ("conv2.weight", vec![ch, ch, 5, 5]),
        ("conv2.bias", vec![ch]),
        ("conv3.weight", vec![ch, ch, 5, 5]),
        ("conv3.bias", vec![ch]),
        ("conv4.weight", vec![3, ch, 3, 3]),
        ("conv4.bias", vec![3]),
    ];
    for (name, shape) in schema {
        let init = if name.ends_with("bias") {
            Init::Zero
        } else {
            Init::HeConv
        };
        params.insert(name.to_string(), materialize(&shape, &init, &mut rng));
    }
    Ok(DegradationModel {
        config: config.clone(),
        params,
    })
}

impl DegradationModel {
    pub fn insert_params<T: Scalar>(&self, g: &mut Graph<T>) -> IndexMap<String, Var> {
        let mut out = IndexMap::new();
        for (name, value) in &self.params {
            let cast = value.mapv(|v| fs::<T>(f64::from(v)));
            out.insert(name.clone(), g.leaf(cast));
        }
        out
    }

    pub fn forward_with_params<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &IndexMap<String, Var>,
        x: Var,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(invalid(format!("expected (B, 3, H, W), got {shape:?}")));
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(invalid("degradation input must be divisible by 4"));
        }
        let var = |name: &str| -> Var { *pv.get(name).expect("parameter present") };
        let slope = fs::<T>(0.2);
        let conv = |g: &mut Graph<T>, v: Var, name: &str, stride: usize| -> Var {
            let y = g.conv2d(v, var(&format!("{name}.weight")), PadMode::WrapLon, stride);
            g.bias_channel(y, var(&format!("{name}.bias")))
        };
        let t = conv(g, x, "conv1", 1);
        let t = g.leaky_relu(t, slope);
        let t = conv(g, t, "conv2", 2);
        let t = g.leaky_relu(t, slope);
        let t = conv(g, t, "conv3", 2);
        let t = g.leaky_relu(t, slope);
        Ok(conv(g, t, "conv4", 1))
    }

    /// `(B, 3, H, W) -> (B, 3, H/4, W/4)`.
    pub fn forward(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        let mut g = Graph::<f32>::new();
        let pv = self.insert_params(&mut g);
        let xv = g.leaf(x.clone().into_dyn());
        let out = self.forward_with_params(&mut g, &pv, xv)?;
        Ok(g.value(out)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("4-d output"))
    }
}
