//! Time-conditioned velocity network.
//!
//! Per frame, the noised latent is concatenated with the condition channels
//! (sub-mix latent and activity embedding) and lifted to the hidden width.
//! Each block adds a projection of the conditioning vector (timestep
//! embedding plus the summed discrete-condition embeddings), mixes along
//! time with a dilated depthwise convolution, applies a gated linear unit
//! and writes back through a residual projection. A zero-initialised linear
//! head produces the velocity.
//!
//! Entries of a batch never interact: every temporal operation stays inside
//! one entry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batcher::ConditionSet;
use crate::codec::LATENT_DIM;
use crate::corpus::{tempo_bucket, NUM_STEM_TYPES, NUM_STYLES, TEMPO_GRID};
use crate::error::{Error, Result};
use crate::linalg::{add_row_bias, col_sum_into, gemm, sigmoid, silu, silu_grad, Op};

/// Rows of the activity embedding table.
pub const ACTIVITY_SILENT: usize = 0;
pub const ACTIVITY_ACTIVE: usize = 1;
pub const ACTIVITY_UNCONSTRAINED: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub activity_dim: usize,
    pub hidden_width: usize,
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub time_features: usize,
    pub kernel_size: usize,
    pub parameter_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: LATENT_DIM,
            activity_dim: 16,
            hidden_width: 128,
            num_blocks: 4,
            embed_dim: 32,
            time_features: 32,
            kernel_size: 5,
            parameter_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn cond_channels(&self) -> usize {
        self.latent_dim + self.activity_dim
    }

    pub fn input_channels(&self) -> usize {
        self.latent_dim + self.cond_channels()
    }

    /// Temporal dilation of block `b`.
    pub fn dilation(&self, b: usize) -> usize {
        1 << (b % 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim != LATENT_DIM {
            return Err(Error::InvalidArgument(format!(
                "latent_dim must be {LATENT_DIM}, got {}",
                self.latent_dim
            )));
        }
        if self.hidden_width == 0 || self.embed_dim == 0 || self.activity_dim == 0 {
            return Err(Error::InvalidArgument("model widths must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        if self.time_features % 2 == 1 || self.time_features == 0 {
            return Err(Error::InvalidArgument("time_features must be even and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    inj_w: usize,
    inj_b: usize,
    conv_w: usize,
    conv_b: usize,
    val_w: usize,
    val_b: usize,
    gate_w: usize,
    gate_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone)]
struct Slots {
    emb_stem: usize,
    emb_style: usize,
    emb_tempo: usize,
    emb_context: usize,
    emb_activity: usize,
    time_w: usize,
    time_b: usize,
    lift_w: usize,
    lift_b: usize,
    blocks: Vec<BlockSlots>,
    head_w: usize,
    head_b: usize,
}

/// Ordered registry of named tensors inside one flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub tensors: Vec<ParamInfo>,
    slots: Slots,
    total: usize,
}

impl ParamLayout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let info = ParamInfo {
                name,
                shape,
                offset: total,
            };
            total += info.len();
            tensors.push(info);
            tensors.len() - 1
        };
        let (h, e) = (c.hidden_width, c.embed_dim);
        let emb_stem = add("embed.stem_type".into(), vec![NUM_STEM_TYPES + 1, e]);
        let emb_style = add("embed.style".into(), vec![NUM_STYLES + 1, e]);
        let emb_tempo = add("embed.tempo".into(), vec![TEMPO_GRID.len() + 1, e]);
        let emb_context = add("embed.context".into(), vec![NUM_STEM_TYPES + 1, e]);
        let emb_activity = add("embed.activity".into(), vec![3, c.activity_dim]);
        let time_w = add("time.weight".into(), vec![c.time_features, e]);
        let time_b = add("time.bias".into(), vec![e]);
        let lift_w = add("lift.weight".into(), vec![c.input_channels(), h]);
        let lift_b = add("lift.bias".into(), vec![h]);
        let blocks = (0..c.num_blocks)
            .map(|b| BlockSlots {
                inj_w: add(format!("blocks.{b}.inject.weight"), vec![e, h]),
                inj_b: add(format!("blocks.{b}.inject.bias"), vec![h]),
                conv_w: add(format!("blocks.{b}.conv.weight"), vec![h, c.kernel_size]),
                conv_b: add(format!("blocks.{b}.conv.bias"), vec![h]),
                val_w: add(format!("blocks.{b}.value.weight"), vec![h, h]),
                val_b: add(format!("blocks.{b}.value.bias"), vec![h]),
                gate_w: add(format!("blocks.{b}.gate.weight"), vec![h, h]),
                gate_b: add(format!("blocks.{b}.gate.bias"), vec![h]),
                out_w: add(format!("blocks.{b}.out.weight"), vec![h, h]),
                out_b: add(format!("blocks.{b}.out.bias"), vec![h]),
            })
            .collect();
        let head_w = add("head.weight".into(), vec![h, c.latent_dim]);
        let head_b = add("head.bias".into(), vec![c.latent_dim]);
        Self {
            tensors,
            slots: Slots {
                emb_stem,
                emb_style,
                emb_tempo,
                emb_context,
                emb_activity,
                time_w,
                time_b,
                lift_w,
                lift_b,
                blocks,
                head_w,
                head_b,
            },
            total,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&ParamInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn range(&self, slot: usize) -> std::ops::Range<usize> {
        self.tensors[slot].range()
    }
}

/// Configuration, layout and the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

/// Discrete-condition summary and per-frame condition channels of one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedConditions {
    pub summary: Vec<f64>,
    /// `T x (D + activity_dim)`: sub-mix latent then activity embedding.
    pub channel_map: Vec<f64>,
}

/// Table rows selected for one entry's conditions.
#[derive(Debug, Clone)]
struct ConditionRows {
    stem: usize,
    style: usize,
    tempo: usize,
    /// Empty with `context_null == false` means "no context stems".
    context: Vec<usize>,
    context_null: bool,
    activity: Vec<usize>,
}

/// Sinusoidal features of the timestep.
pub fn time_features(t: f64, n: usize) -> Vec<f64> {
    let half = n / 2;
    let mut out = vec![0.0; n];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// One batch element for [`Model::forward_batch`].
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub x_t: &'a [f64],
    pub t: f64,
    pub conditions: &'a ConditionSet,
}

struct BlockCache {
    u: Vec<f64>,
    m: Vec<f64>,
    a: Vec<f64>,
    s: Vec<f64>,
    o: Vec<f64>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache {
    rows: Vec<ConditionRows>,
    frames: usize,
    entries: usize,
    x_in: Vec<f64>,
    phi: Vec<f64>,
    cvec: Vec<f64>,
    z: Vec<f64>,
    blocks: Vec<BlockCache>,
    h_final: Vec<f64>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.parameter_seed);
        let (h, e) = (config.hidden_width as f64, config.embed_dim as f64);
        let s = &layout.slots;
        let mut fill = |slot: usize, std: f64, params: &mut [f64]| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[layout.range(slot)] {
                *p = normal.sample(&mut rng);
            }
        };
        // four summed embeddings end up with unit variance
        for slot in [s.emb_stem, s.emb_style, s.emb_tempo, s.emb_context] {
            fill(slot, 0.5, &mut params);
        }
        fill(s.emb_activity, 1.0, &mut params);
        fill(s.time_w, 1.0 / (config.time_features as f64).sqrt(), &mut params);
        fill(s.lift_w, 1.0 / (config.input_channels() as f64).sqrt(), &mut params);
        for b in &s.blocks {
            fill(b.inj_w, 1.0 / e.sqrt(), &mut params);
            fill(b.conv_w, 1.0 / (config.kernel_size as f64).sqrt(), &mut params);
            fill(b.val_w, 1.0 / h.sqrt(), &mut params);
            fill(b.gate_w, 1.0 / h.sqrt(), &mut params);
            fill(b.out_w, 1.0 / h.sqrt(), &mut params);
        }
        // head stays zero: the untrained network predicts zero velocity
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::Shape(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteInput("model parameters".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|i| &self.params[i.range()])
    }

    fn slice(&self, slot: usize) -> &[f64] {
        &self.params[self.layout.range(slot)]
    }

    fn rows_for(&self, c: &ConditionSet, frames: usize) -> Result<ConditionRows> {
        if c.style_token >= NUM_STYLES {
            return Err(Error::Vocabulary(format!("style token {}", c.style_token)));
        }
        let tempo = tempo_bucket(c.tempo_bpm)?;
        let activity = match (&c.activity, c.drop.activity) {
            (Some(mask), false) => {
                if mask.len() != frames {
                    return Err(Error::Shape(format!(
                        "activity mask has {} frames, latent has {frames}",
                        mask.len()
                    )));
                }
                mask.bits
                    .iter()
                    .map(|&b| if b { ACTIVITY_ACTIVE } else { ACTIVITY_SILENT })
                    .collect()
            }
            _ => vec![ACTIVITY_UNCONSTRAINED; frames],
        };
        if let Some(sm) = &c.submix {
            if sm.frames() != frames {
                return Err(Error::Shape(format!(
                    "sub-mix has {} frames, latent has {frames}",
                    sm.frames()
                )));
            }
        }
        Ok(ConditionRows {
            stem: if c.drop.stem_type { NUM_STEM_TYPES } else { c.stem_type.index() },
            style: if c.drop.style { NUM_STYLES } else { c.style_token },
            tempo: if c.drop.tempo { TEMPO_GRID.len() } else { tempo },
            context: if c.drop.context {
                Vec::new()
            } else {
                c.context_types.types().map(|t| t.index()).collect()
            },
            context_null: c.drop.context,
            activity,
        })
    }

    fn summary_from_rows(&self, rows: &ConditionRows, out: &mut [f64]) {
        let e = self.config.embed_dim;
        let s = &self.layout.slots;
        let row = |slot: usize, r: usize| &self.slice(slot)[r * e..(r + 1) * e];
        out.fill(0.0);
        let mut add = |v: &[f64]| out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
        add(row(s.emb_stem, rows.stem));
        add(row(s.emb_style, rows.style));
        add(row(s.emb_tempo, rows.tempo));
        if rows.context_null {
            add(row(s.emb_context, NUM_STEM_TYPES));
        } else {
            for &t in &rows.context {
                add(row(s.emb_context, t));
            }
        }
    }

    /// Summary vector and channel map for one entry.
    pub fn embed_conditions(&self, c: &ConditionSet, frames: usize) -> Result<EmbeddedConditions> {
        let rows = self.rows_for(c, frames)?;
        let mut summary = vec![0.0; self.config.embed_dim];
        self.summary_from_rows(&rows, &mut summary);
        let d = self.config.latent_dim;
        let a = self.config.activity_dim;
        let act = self.slice(self.layout.slots.emb_activity);
        let mut channel_map = vec![0.0; frames * (d + a)];
        for (f, row) in channel_map.chunks_exact_mut(d + a).enumerate() {
            if let (Some(sm), false) = (&c.submix, c.drop.context) {
                row[..d].copy_from_slice(sm.frame(f));
            }
            let r = rows.activity[f];
            row[d..].copy_from_slice(&act[r * a..(r + 1) * a]);
        }
        Ok(EmbeddedConditions {
            summary,
            channel_map,
        })
    }

    /// Velocity for a single entry from pre-embedded conditions.
    pub fn forward(
        &self,
        x_t: &[f64],
        t: f64,
        channel_map: &[f64],
        summary: &[f64],
    ) -> Result<Vec<f64>> {
        let d = self.config.latent_dim;
        let cc = self.config.cond_channels();
        if x_t.len() % d != 0 {
            return Err(Error::Shape(format!("latent of {} values is not T x {d}", x_t.len())));
        }
        let frames = x_t.len() / d;
        if channel_map.len() != frames * cc || summary.len() != self.config.embed_dim {
            return Err(Error::Shape("condition shapes do not match the latent".into()));
        }
        check_finite(x_t, t)?;
        let mut x_in = vec![0.0; frames * self.config.input_channels()];
        for f in 0..frames {
            let row = &mut x_in[f * (d + cc)..(f + 1) * (d + cc)];
            row[..d].copy_from_slice(&x_t[f * d..(f + 1) * d]);
            row[d..].copy_from_slice(&channel_map[f * cc..(f + 1) * cc]);
        }
        let cache = self.run(x_in, vec![t], summary.to_vec(), frames, 1, Vec::new(), false);
        Ok(cache.1)
    }

    /// Batched velocity. Returns one `T x D` buffer per input.
    pub fn forward_batch(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<Vec<f64>>> {
        let (cache, v) = self.forward_impl(inputs, false)?;
        let frames = cache.frames;
        let d = self.config.latent_dim;
        Ok(v.chunks_exact(frames * d).map(|c| c.to_vec()).collect())
    }

    /// Batched forward keeping activations for [`Model::backward`].
    pub fn forward_train(&self, inputs: &[ModelInput<'_>]) -> Result<(ForwardCache, Vec<f64>)> {
        self.forward_impl(inputs, true)
    }

    fn forward_impl(&self, inputs: &[ModelInput<'_>], keep: bool) -> Result<(ForwardCache, Vec<f64>)> {
        let d = self.config.latent_dim;
        let cin = self.config.input_channels();
        let a = self.config.activity_dim;
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty model batch".into()))?;
        if first.x_t.len() % d != 0 {
            return Err(Error::Shape(format!("latent of {} values is not T x {d}", first.x_t.len())));
        }
        let frames = first.x_t.len() / d;
        let r = inputs.len();
        let e = self.config.embed_dim;
        let act = self.slice(self.layout.slots.emb_activity);

        let mut rows = Vec::with_capacity(r);
        let mut summaries = vec![0.0; r * e];
        let mut x_in = vec![0.0; r * frames * cin];
        let mut ts = Vec::with_capacity(r);
        for (i, inp) in inputs.iter().enumerate() {
            if inp.x_t.len() != frames * d {
                return Err(Error::Shape("batch entries differ in length".into()));
            }
            check_finite(inp.x_t, inp.t)?;
            let cr = self.rows_for(inp.conditions, frames)?;
            self.summary_from_rows(&cr, &mut summaries[i * e..(i + 1) * e]);
            let submix = match (&inp.conditions.submix, inp.conditions.drop.context) {
                (Some(sm), false) => Some(sm.as_slice()),
                _ => None,
            };
            for f in 0..frames {
                let row = &mut x_in[(i * frames + f) * cin..(i * frames + f + 1) * cin];
                row[..d].copy_from_slice(&inp.x_t[f * d..(f + 1) * d]);
                if let Some(sm) = submix {
                    row[d..2 * d].copy_from_slice(&sm[f * d..(f + 1) * d]);
                }
                let ar = cr.activity[f];
                row[2 * d..].copy_from_slice(&act[ar * a..(ar + 1) * a]);
            }
            ts.push(inp.t);
            rows.push(cr);
        }
        let (mut cache, v) = self.run(x_in, ts, summaries, frames, r, rows, keep);
        if !keep {
            cache.blocks.clear();
        }
        Ok((cache, v))
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        x_in: Vec<f64>,
        ts: Vec<f64>,
        summaries: Vec<f64>,
        frames: usize,
        r: usize,
        rows: Vec<ConditionRows>,
        keep: bool,
    ) -> (ForwardCache, Vec<f64>) {
        let c = &self.config;
        let s = &self.layout.slots;
        let (h, e, nf, d) = (c.hidden_width, c.embed_dim, c.time_features, c.latent_dim);
        let n = r * frames;
        let cin = c.input_channels();

        // conditioning vector per entry
        let mut phi = Vec::with_capacity(r * nf);
        for &t in &ts {
            phi.extend(time_features(t, nf));
        }
        let mut cvec = summaries;
        gemm(r, nf, e, 1.0, &phi, Op::N, self.slice(s.time_w), Op::N, 1.0, &mut cvec);
        add_row_bias(&mut cvec, self.slice(s.time_b));
        let z: Vec<f64> = cvec.iter().map(|&x| silu(x)).collect();

        let mut hid = vec![0.0; n * h];
        gemm(n, cin, h, 1.0, &x_in, Op::N, self.slice(s.lift_w), Op::N, 0.0, &mut hid);
        add_row_bias(&mut hid, self.slice(s.lift_b));

        let mut blocks = Vec::with_capacity(if keep { c.num_blocks } else { 0 });
        let mut inj = vec![0.0; r * h];
        for (bi, b) in s.blocks.iter().enumerate() {
            gemm(r, e, h, 1.0, &z, Op::N, self.slice(b.inj_w), Op::N, 0.0, &mut inj);
            add_row_bias(&mut inj, self.slice(b.inj_b));
            let mut u = hid.clone();
            for (i, chunk) in u.chunks_exact_mut(frames * h).enumerate() {
                add_row_bias(chunk, &inj[i * h..(i + 1) * h]);
            }
            let mut m = vec![0.0; n * h];
            depthwise_conv(
                &u,
                &mut m,
                self.slice(b.conv_w),
                self.slice(b.conv_b),
                r,
                frames,
                h,
                c.kernel_size,
                c.dilation(bi),
            );
            let mut av = vec![0.0; n * h];
            gemm(n, h, h, 1.0, &m, Op::N, self.slice(b.val_w), Op::N, 0.0, &mut av);
            add_row_bias(&mut av, self.slice(b.val_b));
            let mut g = vec![0.0; n * h];
            gemm(n, h, h, 1.0, &m, Op::N, self.slice(b.gate_w), Op::N, 0.0, &mut g);
            add_row_bias(&mut g, self.slice(b.gate_b));
            let mut o = vec![0.0; n * h];
            for ((ov, gv), avv) in o.iter_mut().zip(g.iter_mut()).zip(&av) {
                *gv = sigmoid(*gv);
                *ov = avv * *gv;
            }
            gemm(n, h, h, 1.0, &o, Op::N, self.slice(b.out_w), Op::N, 1.0, &mut hid);
            add_row_bias(&mut hid, self.slice(b.out_b));
            if keep {
                blocks.push(BlockCache { u, m, a: av, s: g, o });
            }
        }

        let mut v = vec![0.0; n * d];
        gemm(n, h, d, 1.0, &hid, Op::N, self.slice(s.head_w), Op::N, 0.0, &mut v);
        add_row_bias(&mut v, self.slice(s.head_b));

        let cache = ForwardCache {
            rows,
            frames,
            entries: r,
            x_in,
            phi,
            cvec,
            z,
            blocks,
            h_final: hid,
        };
        (cache, v)
    }

    /// Gradient of `sum(dv * v)` with respect to every parameter, accumulated
    /// into `grads` (same layout as `params`).
    pub fn backward(&self, cache: &ForwardCache, dv: &[f64], grads: &mut [f64]) {
        let c = &self.config;
        let s = &self.layout.slots;
        let (h, e, nf, d, a) = (c.hidden_width, c.embed_dim, c.time_features, c.latent_dim, c.activity_dim);
        let (r, frames) = (cache.entries, cache.frames);
        let n = r * frames;
        let cin = c.input_channels();
        assert_eq!(dv.len(), n * d, "velocity gradient shape");
        assert_eq!(grads.len(), self.layout.total(), "gradient buffer shape");
        assert_eq!(cache.blocks.len(), c.num_blocks, "cache lacks activations");
        let lr = |slot: usize| self.layout.range(slot);

        gemm(h, n, d, 1.0, &cache.h_final, Op::T, dv, Op::N, 1.0, &mut grads[lr(s.head_w)]);
        col_sum_into(dv, &mut grads[lr(s.head_b)]);
        let mut dh = vec![0.0; n * h];
        gemm(n, d, h, 1.0, dv, Op::N, self.slice(s.head_w), Op::T, 0.0, &mut dh);

        let mut dz = vec![0.0; r * e];
        let mut d_o = vec![0.0; n * h];
        let mut da = vec![0.0; n * h];
        let mut dg = vec![0.0; n * h];
        let mut dm = vec![0.0; n * h];
        let mut dinj = vec![0.0; r * h];
        for (bi, (b, bc)) in s.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            gemm(h, n, h, 1.0, &bc.o, Op::T, &dh, Op::N, 1.0, &mut grads[lr(b.out_w)]);
            col_sum_into(&dh, &mut grads[lr(b.out_b)]);
            gemm(n, h, h, 1.0, &dh, Op::N, self.slice(b.out_w), Op::T, 0.0, &mut d_o);
            for i in 0..n * h {
                let sg = bc.s[i];
                da[i] = d_o[i] * sg;
                dg[i] = d_o[i] * bc.a[i] * sg * (1.0 - sg);
            }
            gemm(h, n, h, 1.0, &bc.m, Op::T, &da, Op::N, 1.0, &mut grads[lr(b.val_w)]);
            col_sum_into(&da, &mut grads[lr(b.val_b)]);
            gemm(h, n, h, 1.0, &bc.m, Op::T, &dg, Op::N, 1.0, &mut grads[lr(b.gate_w)]);
            col_sum_into(&dg, &mut grads[lr(b.gate_b)]);
            gemm(n, h, h, 1.0, &da, Op::N, self.slice(b.val_w), Op::T, 0.0, &mut dm);
            gemm(n, h, h, 1.0, &dg, Op::N, self.slice(b.gate_w), Op::T, 1.0, &mut dm);

            // conv backward; du accumulates straight into dh (residual path)
            let (cw_range, cb_range) = (lr(b.conv_w), lr(b.conv_b));
            let conv_w = self.slice(b.conv_w);
            {
                let mut dcw = vec![0.0; h * c.kernel_size];
                let mut dcb = vec![0.0; h];
                depthwise_conv_backward(
                    &bc.u,
                    &dm,
                    conv_w,
                    &mut dh,
                    &mut dcw,
                    &mut dcb,
                    r,
                    frames,
                    h,
                    c.kernel_size,
                    c.dilation(bi),
                );
                grads[cw_range].iter_mut().zip(&dcw).for_each(|(g, x)| *g += x);
                grads[cb_range].iter_mut().zip(&dcb).for_each(|(g, x)| *g += x);
            }
            // the injection is broadcast over frames, so its gradient is the
            // per-entry frame sum of du
            dinj.fill(0.0);
            conv_input_grad_rowsum(&dm, conv_w, &mut dinj, r, frames, h, c.kernel_size, c.dilation(bi));
            gemm(e, r, h, 1.0, &cache.z, Op::T, &dinj, Op::N, 1.0, &mut grads[lr(b.inj_w)]);
            col_sum_into(&dinj, &mut grads[lr(b.inj_b)]);
            gemm(r, h, e, 1.0, &dinj, Op::N, self.slice(b.inj_w), Op::T, 1.0, &mut dz);
        }

        gemm(cin, n, h, 1.0, &cache.x_in, Op::T, &dh, Op::N, 1.0, &mut grads[lr(s.lift_w)]);
        col_sum_into(&dh, &mut grads[lr(s.lift_b)]);
        // activity embedding gradient through the input channels
        let lift_w = self.slice(s.lift_w);
        let act_range = lr(s.emb_activity);
        let mut dx_act = vec![0.0; a];
        for (row_i, dh_row) in dh.chunks_exact(h).enumerate() {
            let (entry, f) = (row_i / frames, row_i % frames);
            let act_row = cache.rows[entry].activity[f];
            for (k, dxa) in dx_act.iter_mut().enumerate() {
                let w_row = &lift_w[(2 * d + k) * h..(2 * d + k + 1) * h];
                *dxa = w_row.iter().zip(dh_row).map(|(w, g)| w * g).sum();
            }
            let g = &mut grads[act_range.clone()][act_row * a..(act_row + 1) * a];
            g.iter_mut().zip(&dx_act).for_each(|(x, y)| *x += y);
        }

        let dcvec: Vec<f64> = dz
            .iter()
            .zip(&cache.cvec)
            .map(|(g, x)| g * silu_grad(*x))
            .collect();
        gemm(nf, r, e, 1.0, &cache.phi, Op::T, &dcvec, Op::N, 1.0, &mut grads[lr(s.time_w)]);
        col_sum_into(&dcvec, &mut grads[lr(s.time_b)]);
        for (i, rows) in cache.rows.iter().enumerate() {
            let g = &dcvec[i * e..(i + 1) * e];
            let add = |slot: usize, row: usize, grads: &mut [f64]| {
                let range = lr(slot);
                let dst = &mut grads[range][row * e..(row + 1) * e];
                dst.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            };
            add(s.emb_stem, rows.stem, grads);
            add(s.emb_style, rows.style, grads);
            add(s.emb_tempo, rows.tempo, grads);
            if rows.context_null {
                add(s.emb_context, NUM_STEM_TYPES, grads);
            } else {
                for &t in &rows.context {
                    add(s.emb_context, t, grads);
                }
            }
        }
    }
}

fn check_finite(x: &[f64], t: f64) -> Result<()> {
    if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("model input".into()));
    }
    Ok(())
}

/// Zero-padded, same-length depthwise convolution inside each entry.
#[allow(clippy::too_many_arguments)]
fn depthwise_conv(
    u: &[f64],
    out: &mut [f64],
    w: &[f64],
    bias: &[f64],
    entries: usize,
    frames: usize,
    h: usize,
    k: usize,
    dilation: usize,
) {
    let half = (k / 2) as isize;
    for e in 0..entries {
        let base = e * frames;
        for f in 0..frames {
            let dst = &mut out[(base + f) * h..(base + f + 1) * h];
            dst.copy_from_slice(bias);
            for j in 0..k {
                let src = f as isize + (j as isize - half) * dilation as isize;
                if src < 0 || src >= frames as isize {
                    continue;
                }
                let srow = &u[(base + src as usize) * h..(base + src as usize + 1) * h];
                for ch in 0..h {
                    dst[ch] += w[ch * k + j] * srow[ch];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_conv_backward(
    u: &[f64],
    dout: &[f64],
    w: &[f64],
    du: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    entries: usize,
    frames: usize,
    h: usize,
    k: usize,
    dilation: usize,
) {
    let half = (k / 2) as isize;
    for e in 0..entries {
        let base = e * frames;
        for f in 0..frames {
            let g = &dout[(base + f) * h..(base + f + 1) * h];
            db.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            for j in 0..k {
                let src = f as isize + (j as isize - half) * dilation as isize;
                if src < 0 || src >= frames as isize {
                    continue;
                }
                let s = (base + src as usize) * h;
                for ch in 0..h {
                    dw[ch * k + j] += g[ch] * u[s + ch];
                    du[s + ch] += w[ch * k + j] * g[ch];
                }
            }
        }
    }
}

/// Per-entry frame sum of the conv input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_input_grad_rowsum(
    dout: &[f64],
    w: &[f64],
    out: &mut [f64],
    entries: usize,
    frames: usize,
    h: usize,
    k: usize,
    dilation: usize,
) {
    let half = (k / 2) as isize;
    for e in 0..entries {
        let base = e * frames;
        let acc = &mut out[e * h..(e + 1) * h];
        for f in 0..frames {
            let g = &dout[(base + f) * h..(base + f + 1) * h];
            for j in 0..k {
                let src = f as isize + (j as isize - half) * dilation as isize;
                if src < 0 || src >= frames as isize {
                    continue;
                }
                for ch in 0..h {
                    acc[ch] += w[ch * k + j] * g[ch];
                }
            }
        }
    }
}
