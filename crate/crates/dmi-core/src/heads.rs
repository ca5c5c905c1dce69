//! Encoder heads, critic parameters, initialization, and checkpoints.
//!
//! All learnable state lives in one flat `Vec<f64>` addressed through a
//! [`Layout`] of named offset ranges. That keeps the optimizer, gradient
//! checks, and checkpoint serialization trivial: a checkpoint is the config
//! header followed by the raw buffer, and a gradient is a buffer of the
//! same shape.
//!
//! Layout order: k sub-heads, the auxiliary head, k sub-feature label
//! critics, the auxiliary label critic, the conditional-Gaussian decoder,
//! then k contrastive projections. Each head and critic is two affine
//! layers with a rectifier between them (derivative at 0 taken as 0).

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{DmiError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMIC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture and loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input (pooled feature) dimension.
    pub d: usize,
    /// Sub-feature count.
    pub k: usize,
    /// Sub-feature dimension.
    pub d_z: usize,
    /// Auxiliary feature dimension.
    pub d_s: usize,
    /// Hidden width of each head.
    pub hidden: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Temperature of the contrastive MI bound.
    pub tau_mi: f64,
    /// Weight of the disentanglement term.
    pub alpha: f64,
    /// Saturation cap on each pairwise KL.
    pub kl_cap: f64,
}

impl ModelConfig {
    /// Defaults for everything except the data-determined input dim.
    pub fn new(d: usize) -> Self {
        ModelConfig {
            d,
            k: 6,
            d_z: 256,
            d_s: 256,
            hidden: 512,
            tau: 0.07,
            tau_mi: 0.07,
            alpha: 0.1,
            kl_cap: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("k", self.k),
            ("d_z", self.d_z),
            ("d_s", self.d_s),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(DmiError::ConfigError(format!("{name} must be positive")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(DmiError::ConfigError("tau must be > 0".into()));
        }
        if !(self.tau_mi > 0.0) {
            return Err(DmiError::ConfigError("tau_mi must be > 0".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(DmiError::ConfigError("alpha must be >= 0".into()));
        }
        if !(self.kl_cap > 0.0) {
            return Err(DmiError::ConfigError("kl_cap must be > 0".into()));
        }
        Ok(())
    }

    /// Hidden width of the label critics.
    pub fn critic_hidden(&self) -> usize {
        self.hidden.min(128)
    }

    /// Output dimension of the contrastive-MI projections.
    pub fn proj_dim(&self) -> usize {
        self.d_z.min(self.d_s).min(128)
    }

    /// Length of the concatenated sub-features.
    pub fn v_dim(&self) -> usize {
        self.k * self.d_z
    }

    /// Length of the retrieval embedding `v || z_s`.
    pub fn global_dim(&self) -> usize {
        self.k * self.d_z + self.d_s
    }
}

/// Offsets of one two-layer perceptron inside the flat buffer.
#[derive(Debug, Clone)]
pub struct MlpOffsets {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderOffsets {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub logvar: Range<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct ProjOffsets {
    pub aw: Range<usize>,
    pub ab: Range<usize>,
    pub bw: Range<usize>,
    pub bb: Range<usize>,
    pub a_in: usize,
    pub b_in: usize,
    pub p: usize,
}

/// Named offset map over the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub sub_heads: Vec<MlpOffsets>,
    pub aux_head: MlpOffsets,
    pub sub_critics: Vec<MlpOffsets>,
    pub aux_critic: MlpOffsets,
    pub decoder: DecoderOffsets,
    pub projections: Vec<ProjOffsets>,
    pub total: usize,
    /// (range, fan_in) per tensor in declared order; fan_in is None for
    /// biases and log-variances, which initialize to zero.
    tensor_specs: Vec<(Range<usize>, Option<usize>)>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let mut cursor = 0usize;
        let mut specs: Vec<(Range<usize>, Option<usize>)> = Vec::new();
        let mut take = |len: usize, fan_in: Option<usize>| -> Range<usize> {
            let r = cursor..cursor + len;
            cursor += len;
            specs.push((r.clone(), fan_in));
            r
        };
        let mut mlp = |in_dim: usize, hidden: usize, out_dim: usize| MlpOffsets {
            w1: take(hidden * in_dim, Some(in_dim)),
            b1: take(hidden, None),
            w2: take(out_dim * hidden, Some(hidden)),
            b2: take(out_dim, None),
            in_dim,
            hidden,
            out_dim,
        };

        let sub_heads: Vec<MlpOffsets> =
            (0..cfg.k).map(|_| mlp(cfg.d, cfg.hidden, cfg.d_z)).collect();
        let aux_head = mlp(cfg.d, cfg.hidden, cfg.d_s);
        let ch = cfg.critic_hidden();
        let sub_critics: Vec<MlpOffsets> =
            (0..cfg.k).map(|_| mlp(2 * cfg.d_z, ch, 1)).collect();
        let aux_critic = mlp(2 * cfg.d_s, ch, 1);
        let decoder = DecoderOffsets {
            w: take(cfg.d_s * cfg.v_dim(), Some(cfg.v_dim())),
            b: take(cfg.d_s, None),
            logvar: take(cfg.d_s, None),
            in_dim: cfg.v_dim(),
            out_dim: cfg.d_s,
        };
        let p = cfg.proj_dim();
        let projections: Vec<ProjOffsets> = (0..cfg.k)
            .map(|_| ProjOffsets {
                aw: take(p * cfg.d_z, Some(cfg.d_z)),
                ab: take(p, None),
                bw: take(p * cfg.d_s, Some(cfg.d_s)),
                bb: take(p, None),
                a_in: cfg.d_z,
                b_in: cfg.d_s,
                p,
            })
            .collect();

        Layout {
            sub_heads,
            aux_head,
            sub_critics,
            aux_critic,
            decoder,
            projections,
            total: cursor,
            tensor_specs: specs,
        }
    }

    /// Buffer ranges owned by the encoder heads (updated by the main
    /// optimization step).
    pub fn encoder_ranges(&self) -> Vec<Range<usize>> {
        let mut r: Vec<Range<usize>> = Vec::new();
        for h in self.sub_heads.iter().chain(std::iter::once(&self.aux_head)) {
            r.push(h.w1.start..h.b2.end);
        }
        r
    }

    /// Buffer ranges owned by critics, the decoder, and the projections
    /// (updated by the bound-tightening steps).
    pub fn critic_ranges(&self) -> Vec<Range<usize>> {
        let start = self.sub_critics.first().map_or(self.aux_critic.w1.start, |c| c.w1.start);
        vec![start..self.total]
    }
}

/// Borrowed two-layer perceptron.
#[derive(Debug, Clone, Copy)]
pub struct MlpView<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

/// Borrowed conditional Gaussian: affine mean plus free per-dim log-variance.
#[derive(Debug, Clone, Copy)]
pub struct CondGaussView<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
    pub logvar: &'a [f64],
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Borrowed pair of affine projections for the contrastive MI bound.
#[derive(Debug, Clone, Copy)]
pub struct ProjView<'a> {
    pub aw: &'a [f64],
    pub ab: &'a [f64],
    pub bw: &'a [f64],
    pub bb: &'a [f64],
    pub a_in: usize,
    pub b_in: usize,
    pub p: usize,
}

/// All learnable parameters as one flat buffer plus its layout.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(cfg: ModelConfig) -> Result<HeadParams> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let data = vec![0.0; layout.total];
        Ok(HeadParams { cfg, layout, data })
    }

    fn mlp_view(&self, off: &MlpOffsets) -> MlpView<'_> {
        MlpView {
            w1: &self.data[off.w1.clone()],
            b1: &self.data[off.b1.clone()],
            w2: &self.data[off.w2.clone()],
            b2: &self.data[off.b2.clone()],
            in_dim: off.in_dim,
            hidden: off.hidden,
            out_dim: off.out_dim,
        }
    }

    pub fn sub_head(&self, i: usize) -> MlpView<'_> {
        self.mlp_view(&self.layout.sub_heads[i])
    }

    pub fn aux_head(&self) -> MlpView<'_> {
        self.mlp_view(&self.layout.aux_head)
    }

    pub fn sub_critic(&self, i: usize) -> MlpView<'_> {
        self.mlp_view(&self.layout.sub_critics[i])
    }

    pub fn aux_critic(&self) -> MlpView<'_> {
        self.mlp_view(&self.layout.aux_critic)
    }

    pub fn decoder(&self) -> CondGaussView<'_> {
        let off = &self.layout.decoder;
        CondGaussView {
            w: &self.data[off.w.clone()],
            b: &self.data[off.b.clone()],
            logvar: &self.data[off.logvar.clone()],
            in_dim: off.in_dim,
            out_dim: off.out_dim,
        }
    }

    pub fn projection(&self, i: usize) -> ProjView<'_> {
        let off = &self.layout.projections[i];
        ProjView {
            aw: &self.data[off.aw.clone()],
            ab: &self.data[off.ab.clone()],
            bw: &self.data[off.bw.clone()],
            bb: &self.data[off.bb.clone()],
            a_in: off.a_in,
            b_in: off.b_in,
            p: off.p,
        }
    }
}

/// Embeddings of one video under the current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// k sub-features of length d_z each.
    pub sub: Vec<Vec<f64>>,
    /// Auxiliary feature of length d_s.
    pub aux: Vec<f64>,
    /// Concatenated sub-features (k * d_z).
    pub v: Vec<f64>,
    /// v followed by aux (k * d_z + d_s).
    pub global: Vec<f64>,
}

/// Forward pass intermediates needed for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Pre-activation of the hidden layer.
    pub pre: Vec<f64>,
    /// Post-rectifier hidden activations.
    pub h: Vec<f64>,
    pub out: Vec<f64>,
}

/// `out = W2 relu(W1 x + b1) + b2`, returning intermediates.
pub fn mlp_forward(view: &MlpView, x: &[f64]) -> MlpCache {
    debug_assert_eq!(x.len(), view.in_dim);
    let pre = crate::mat::affine(view.w1, view.b1, x, view.hidden, view.in_dim);
    // 0.5*(p+|p|) rather than max(0, p): IEEE max would silently replace a
    // NaN activation with 0, hiding non-finite inputs from downstream guards.
    let h: Vec<f64> = pre.iter().map(|p| 0.5 * (p + p.abs())).collect();
    let out = crate::mat::affine(view.w2, view.b2, &h, view.out_dim, view.hidden);
    MlpCache { pre, h, out }
}

/// Accumulates parameter gradients into separate per-tensor buffers and
/// optionally the input gradient into `dx`, given upstream `dout`.
pub fn mlp_backward_parts(
    view: &MlpView,
    x: &[f64],
    cache: &MlpCache,
    dout: &[f64],
    gw1: &mut [f64],
    gb1: &mut [f64],
    gw2: &mut [f64],
    gb2: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    debug_assert_eq!(dout.len(), view.out_dim);
    // Second layer: dW2 = dout (x) h, db2 = dout, dh = W2^T dout.
    let mut dh = vec![0.0; view.hidden];
    for o in 0..view.out_dim {
        let g = dout[o];
        gb2[o] += g;
        if g != 0.0 {
            let wrow = &view.w2[o * view.hidden..(o + 1) * view.hidden];
            let grow = &mut gw2[o * view.hidden..(o + 1) * view.hidden];
            for u in 0..view.hidden {
                grow[u] += g * cache.h[u];
                dh[u] += g * wrow[u];
            }
        }
    }
    // Rectifier: derivative at 0 is taken as 0 (strict > comparison).
    for u in 0..view.hidden {
        if cache.pre[u] <= 0.0 {
            dh[u] = 0.0;
        }
    }
    // First layer.
    for u in 0..view.hidden {
        let g = dh[u];
        gb1[u] += g;
        if g != 0.0 {
            let grow = &mut gw1[u * view.in_dim..(u + 1) * view.in_dim];
            for c in 0..view.in_dim {
                grow[c] += g * x[c];
            }
        }
    }
    if let Some(dx) = dx {
        for u in 0..view.hidden {
            let g = dh[u];
            if g != 0.0 {
                let wrow = &view.w1[u * view.in_dim..(u + 1) * view.in_dim];
                for c in 0..view.in_dim {
                    dx[c] += g * wrow[c];
                }
            }
        }
    }
}

/// Like [`mlp_backward_parts`], but accumulates into the flat gradient
/// buffer at the tensor offsets of `off`. Relies on w1 < b1 < w2 < b2 being
/// contiguous, which [`Layout::new`] guarantees.
pub fn mlp_backward(
    view: &MlpView,
    x: &[f64],
    cache: &MlpCache,
    dout: &[f64],
    off: &MlpOffsets,
    gbuf: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let seg = &mut gbuf[off.w1.start..off.b2.end];
    let (gw1, seg) = seg.split_at_mut(off.w1.len());
    let (gb1, seg) = seg.split_at_mut(off.b1.len());
    let (gw2, gb2) = seg.split_at_mut(off.w2.len());
    mlp_backward_parts(view, x, cache, dout, gw1, gb1, gw2, gb2, dx);
}

/// Per-head weight share around the shared sub-head center at init. Small
/// enough that the pairwise output divergence starts well under the default
/// KL cap, large enough to break the symmetry between heads.
const HEAD_SPREAD: f64 = 0.05;

/// Fan-in uniform initialization, biases and log-variances zero,
/// deterministic in `seed`.
///
/// Sub-head weights are drawn as small per-head spreads around one shared
/// center (variance-preserving blend, so each weight keeps its fan-in
/// scale). Fully independent heads would start with pairwise output
/// divergences far past the saturation cap, where the disentangling
/// objective has no gradient; clustered heads start inside the active band
/// and are pushed apart by training rather than by the initializer.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<HeadParams> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut data = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (range, fan_in) in &layout.tensor_specs {
        if let Some(fan_in) = fan_in {
            let bound = 1.0 / (*fan_in as f64).sqrt();
            for x in &mut data[range.clone()] {
                *x = rng.gen_range(-bound..bound);
            }
        }
    }
    let center_scale = (1.0 - HEAD_SPREAD * HEAD_SPREAD).sqrt();
    for layer in 0..2 {
        let range_of = |o: &MlpOffsets| if layer == 0 { o.w1.clone() } else { o.w2.clone() };
        let fan_in = if layer == 0 { cfg.d } else { cfg.hidden };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let center: Vec<f64> = (0..range_of(&layout.sub_heads[0]).len())
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        for head in &layout.sub_heads {
            for (x, c) in data[range_of(head)].iter_mut().zip(&center) {
                *x = center_scale * c + HEAD_SPREAD * *x;
            }
        }
    }
    Ok(HeadParams { cfg: *cfg, layout, data })
}

/// Runs every head on one pooled feature vector.
pub fn encode(params: &HeadParams, values: &[f64]) -> Result<EmbeddingSet> {
    let cfg = &params.cfg;
    if values.len() != cfg.d {
        return Err(DmiError::DimensionMismatch(format!(
            "encode expects input dim {}, got {}",
            cfg.d,
            values.len()
        )));
    }
    let mut sub = Vec::with_capacity(cfg.k);
    for i in 0..cfg.k {
        sub.push(mlp_forward(&params.sub_head(i), values).out);
    }
    let aux = mlp_forward(&params.aux_head(), values).out;
    let mut v = Vec::with_capacity(cfg.v_dim());
    for z in &sub {
        v.extend_from_slice(z);
    }
    let mut global = Vec::with_capacity(cfg.global_dim());
    global.extend_from_slice(&v);
    global.extend_from_slice(&aux);
    Ok(EmbeddingSet { sub, aux, v, global })
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Writes the config header and the raw parameter buffer.
pub fn save_checkpoint(params: &HeadParams, path: &Path) -> Result<()> {
    let cfg = &params.cfg;
    let mut buf = Vec::with_capacity(64 + params.data.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    for dim in [cfg.d, cfg.k, cfg.d_z, cfg.d_s, cfg.hidden] {
        push_u32(&mut buf, dim as u32);
    }
    for v in [cfg.tau, cfg.tau_mi, cfg.alpha, cfg.kl_cap] {
        push_f64(&mut buf, v);
    }
    buf.extend_from_slice(&(params.data.len() as u64).to_le_bytes());
    for x in &params.data {
        push_f64(&mut buf, *x);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DmiError::CorruptCheckpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint, validating magic, version, declared shapes, and
/// value finiteness.
pub fn load_checkpoint(path: &Path) -> Result<HeadParams> {
    let bytes = fs::read(path).map_err(|_| DmiError::MissingFile(path.display().to_string()))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(DmiError::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DmiError::VersionMismatch(format!(
            "version: file declares {version}, supported {CHECKPOINT_VERSION}"
        )));
    }
    let mut dims = [0usize; 5];
    for (slot, name) in dims.iter_mut().zip(["d", "k", "d_z", "d_s", "hidden"]) {
        let v = r.u32()? as usize;
        if v == 0 {
            return Err(DmiError::VersionMismatch(format!("{name}: declared 0")));
        }
        *slot = v;
    }
    let tau = r.f64()?;
    let tau_mi = r.f64()?;
    let alpha = r.f64()?;
    let kl_cap = r.f64()?;
    let cfg = ModelConfig {
        d: dims[0],
        k: dims[1],
        d_z: dims[2],
        d_s: dims[3],
        hidden: dims[4],
        tau,
        tau_mi,
        alpha,
        kl_cap,
    };
    cfg.validate().map_err(|e| DmiError::VersionMismatch(e.to_string()))?;
    let layout = Layout::new(&cfg);
    let declared = r.u64()? as usize;
    if declared != layout.total {
        return Err(DmiError::VersionMismatch(format!(
            "param_count: header declares {declared}, declared dims imply {}",
            layout.total
        )));
    }
    let mut data = Vec::with_capacity(declared);
    for _ in 0..declared {
        let x = r.f64()?;
        if !x.is_finite() {
            return Err(DmiError::CorruptCheckpoint("non-finite parameter value".into()));
        }
        data.push(x);
    }
    if r.pos != bytes.len() {
        return Err(DmiError::CorruptCheckpoint(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.pos
        )));
    }
    Ok(HeadParams { cfg, layout, data })
}
