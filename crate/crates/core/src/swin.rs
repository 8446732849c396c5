//! Transformer path of the encoder: patch embedding, four stages of
//! (shifted-)window attention blocks, and patch merging between stages.
//!
//! Token maps are kept as spatial grids `[N, h, w, D]`; they are flattened
//! into `[windows, M·M, D]` only around the attention itself.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Forward, Init, LayerNorm, Linear, ParamId};
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Additive logit used to forbid attention across pre-shift regions.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct SwinConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub window: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratio: f64,
    pub rel_pos_bias: bool,
}

impl Default for SwinConfig {
    fn default() -> Self {
        SwinConfig {
            patch_size: 4,
            embed_dim: 24,
            window: 4,
            depths: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            mlp_ratio: 4.0,
            rel_pos_bias: true,
        }
    }
}

/// Per-stage token grid and the window actually used on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageGeometry {
    pub grid: usize,
    pub window: usize,
    pub shift: usize,
}

impl SwinConfig {
    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Checks the config against square inputs of side `input_size` and
    /// returns the geometry of each stage. A stage grid smaller than the
    /// window uses the whole grid as its window.
    pub fn validate(&self, input_size: usize) -> Result<[StageGeometry; 4]> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size < 1 || self.embed_dim < 1 {
            return bad("patch size and embed dim must be >= 1".into());
        }
        if self.window < 2 || !self.window.is_multiple_of(2) {
            return bad(format!("window {} must be even and >= 2", self.window));
        }
        if !(self.mlp_ratio > 0.0) {
            return bad("mlp_ratio must be positive".into());
        }
        for s in 0..4 {
            if self.depths[s] < 1 {
                return bad(format!("swin depth of stage {} must be >= 1", s + 1));
            }
            if self.heads[s] < 1 || !self.stage_dim(s).is_multiple_of(self.heads[s]) {
                return bad(format!(
                    "stage {} dim {} not divisible by {} heads",
                    s + 1,
                    self.stage_dim(s),
                    self.heads[s]
                ));
            }
        }
        let total = self.patch_size * 8;
        if input_size == 0 || !input_size.is_multiple_of(total) {
            return bad(format!(
                "input size {input_size} must be a multiple of {total} (patch size x 8)"
            ));
        }
        let mut geo = [StageGeometry {
            grid: 0,
            window: 0,
            shift: 0,
        }; 4];
        for (s, g) in geo.iter_mut().enumerate() {
            let grid = (input_size / self.patch_size) >> s;
            let window = self.window.min(grid);
            if !grid.is_multiple_of(window) {
                return bad(format!(
                    "stage {} grid {grid} is not divisible by window {window}; pad the input",
                    s + 1
                ));
            }
            *g = StageGeometry {
                grid,
                window,
                shift: window / 2,
            };
        }
        Ok(geo)
    }
}

/// Spatial token grid of a given stage.
#[derive(Debug, Clone, Copy)]
pub struct TokenMap {
    /// `[N, h, w, D]`
    pub tokens: Var,
    pub stage: usize,
}

/// `[N, h, w, D]` → `[N·(h/m)·(w/m), m·m, D]`, windows in row-major order
/// within each image.
pub fn window_partition(tape: &mut Tape, x: Var, m: usize) -> Result<Var> {
    let [n, h, w, d] = grid_dims(tape, x, "window_partition")?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape("window_partition", format!("{h}x{w} grid not divisible by window {m}")));
    }
    let y = tape.reshape(x, &[n, h / m, m, w / m, m, d])?;
    let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(y, &[n * (h / m) * (w / m), m * m, d])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(tape: &mut Tape, windows: Var, m: usize, n: usize, h: usize, w: usize) -> Result<Var> {
    let d = *tape.shape(windows).last().unwrap_or(&0);
    let y = tape.reshape(windows, &[n, h / m, w / m, m, m, d])?;
    let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(y, &[n, h, w, d])
}

/// Torus roll of a token grid: the token at `(i, j)` moves to
/// `((i − s) mod h, (j − s) mod w)`. Negative `s` undoes it.
pub fn cyclic_shift(tape: &mut Tape, x: Var, s: isize) -> Result<Var> {
    grid_dims(tape, x, "cyclic_shift")?;
    tape.roll(x, &[0, -s, -s, 0])
}

/// Additive masks `[nW, m·m, m·m]` for attention over a grid rolled by `s`:
/// 0 between tokens of the same pre-shift region, [`MASK_NEG`] otherwise.
pub fn shift_attention_mask(h: usize, w: usize, m: usize, s: usize, precision: Precision) -> Result<Tensor> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) || s >= m {
        return Err(Error::invalid(
            "shift_attention_mask",
            format!("grid {h}x{w}, window {m}, shift {s}"),
        ));
    }
    let band = |i: usize, len: usize| -> usize {
        if s == 0 || i < len - m {
            0
        } else if i < len - s {
            1
        } else {
            2
        }
    };
    let (nh, nw, t) = (h / m, w / m, m * m);
    let mut data = Vec::with_capacity(nh * nw * t * t);
    for wy in 0..nh {
        for wx in 0..nw {
            let ids: Vec<usize> = (0..t)
                .map(|k| {
                    let (i, j) = (wy * m + k / m, wx * m + k % m);
                    band(i, h) * 3 + band(j, w)
                })
                .collect();
            for a in 0..t {
                for b in 0..t {
                    data.push(if ids[a] == ids[b] { 0.0 } else { MASK_NEG });
                }
            }
        }
    }
    Tensor::new(vec![nh * nw, t, t], data, precision)
}

/// Flattened relative-position index into a `(2m−1)²` bias table.
fn relative_position_index(m: usize) -> Vec<usize> {
    let t = m * m;
    let mut idx = Vec::with_capacity(t * t);
    for a in 0..t {
        for b in 0..t {
            let dy = (a / m) as isize - (b / m) as isize + m as isize - 1;
            let dx = (a % m) as isize - (b % m) as isize + m as isize - 1;
            idx.push((dy as usize) * (2 * m - 1) + dx as usize);
        }
    }
    idx
}

#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
    pub window: usize,
    pub rel_table: Option<ParamId>,
    rel_index: Arc<Vec<usize>>,
}

impl WindowAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, window: usize, rel_pos_bias: bool) -> Self {
        let rel_table = rel_pos_bias.then(|| {
            let rows = (2 * window - 1) * (2 * window - 1);
            init.normal(format!("{name}.rel_pos_table"), vec![rows, heads], 0.02)
        });
        WindowAttention {
            qkv: Linear::new(init, &format!("{name}.qkv"), dim, 3 * dim),
            proj: Linear::new(init, &format!("{name}.proj"), dim, dim),
            heads,
            dim,
            window,
            rel_table,
            rel_index: Arc::new(relative_position_index(window)),
        }
    }

    /// Attention over `[B, T, D]` windows. `mask` is `[nW, T, T]` with `B` a
    /// multiple of `nW`. Returns the projected output and the attention
    /// probabilities `[B, heads, T, T]`.
    pub fn forward_with_probs(&self, f: &mut Forward, x: Var, mask: Option<&Tensor>) -> Result<(Var, Var)> {
        let shape = f.tape.shape(x).to_vec();
        let [b, t, d] = <[usize; 3]>::try_from(shape.as_slice())
            .map_err(|_| Error::shape("window_msa", format!("expected [B, T, D], got {shape:?}")))?;
        if d != self.dim || d % self.heads != 0 {
            return Err(Error::shape("window_msa", format!("dim {d} vs {} with {} heads", self.dim, self.heads)));
        }
        let (h, hd) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(f, x)?;
        let qkv = f.tape.reshape(qkv, &[b, t, 3, h, hd])?;
        let qkv = f.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let parts = f.tape.split(qkv, &[1, 1, 1], 0)?;
        let q = f.tape.reshape(parts[0], &[b, h, t, hd])?;
        let k = f.tape.reshape(parts[1], &[b, h, t, hd])?;
        let v = f.tape.reshape(parts[2], &[b, h, t, hd])?;
        let q = f.tape.scale(q, 1.0 / (hd as f64).sqrt())?;
        let kt = f.tape.permute(k, &[0, 1, 3, 2])?;
        let mut logits = f.tape.matmul(q, kt)?;
        if let Some(table) = self.rel_table {
            if t != self.window * self.window {
                return Err(Error::shape("window_msa", format!("{t} tokens per window, expected {}", self.window.pow(2))));
            }
            let table = f.param(table);
            let bias = f.tape.index_select(table, Arc::clone(&self.rel_index))?;
            let bias = f.tape.reshape(bias, &[t, t, h])?;
            let bias = f.tape.permute(bias, &[2, 0, 1])?;
            logits = f.tape.add_broadcast(logits, bias)?;
        }
        if let Some(mask) = mask {
            let nw = mask.shape()[0];
            if b % nw != 0 || mask.shape()[1..] != [t, t] {
                return Err(Error::shape("window_msa", format!("mask {:?} for {b} windows of {t}", mask.shape())));
            }
            let m = f.input(mask.reshaped(vec![nw, 1, t, t])?);
            let l = f.tape.reshape(logits, &[b / nw, nw, h, t, t])?;
            let l = f.tape.add_broadcast(l, m)?;
            logits = f.tape.reshape(l, &[b, h, t, t])?;
        }
        let probs = f.tape.softmax(logits, 3)?;
        let out = f.tape.matmul(probs, v)?;
        let out = f.tape.permute(out, &[0, 2, 1, 3])?;
        let out = f.tape.reshape(out, &[b, t, d])?;
        Ok((self.proj.forward(f, out)?, probs))
    }

    pub fn forward(&self, f: &mut Forward, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        Ok(self.forward_with_probs(f, x, mask)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let y = self.fc1.forward(f, x)?;
        let y = f.tape.gelu(y)?;
        self.fc2.forward(f, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Regular,
    Shifted,
}

/// Pre-norm attention with residual, then pre-norm MLP with residual.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub kind: BlockKind,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    pub shift: usize,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        geometry: StageGeometry,
        kind: BlockKind,
        mlp_ratio: f64,
        rel_pos_bias: bool,
    ) -> Self {
        let hidden = ((dim as f64 * mlp_ratio).round() as usize).max(1);
        SwinBlock {
            kind,
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(init, &format!("{name}.attn"), dim, heads, geometry.window, rel_pos_bias),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, hidden),
            window: geometry.window,
            shift: match kind {
                BlockKind::Regular => 0,
                BlockKind::Shifted => geometry.shift,
            },
        }
    }

    /// The (shifted-)window attention branch on already-normalised tokens.
    pub fn attention_branch(&self, f: &mut Forward, normed: Var) -> Result<Var> {
        let [n, h, w, _] = grid_dims(f.tape, normed, "swin_block")?;
        let m = self.window;
        let s = self.shift;
        let y = if s > 0 { cyclic_shift(f.tape, normed, s as isize)? } else { normed };
        let win = window_partition(f.tape, y, m)?;
        let mask = if s > 0 {
            Some(shift_attention_mask(h, w, m, s, f.precision())?)
        } else {
            None
        };
        let out = self.attn.forward(f, win, mask.as_ref())?;
        let y = window_reverse(f.tape, out, m, n, h, w)?;
        if s > 0 {
            cyclic_shift(f.tape, y, -(s as isize))
        } else {
            Ok(y)
        }
    }

    pub fn forward(&self, f: &mut Forward, z: Var) -> Result<Var> {
        f.trace.swin_blocks += 1;
        if self.shift > 0 {
            f.trace.shifted_blocks += 1;
        }
        let normed = self.norm1.forward(f, z)?;
        let attn = self.attention_branch(f, normed)?;
        let z_hat = f.tape.add(attn, z)?;
        let normed = self.norm2.forward(f, z_hat)?;
        let mlp = self.mlp.forward(f, normed)?;
        f.tape.add(mlp, z_hat)
    }
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(init: &mut Init, name: &str, patch: usize, in_ch: usize, dim: usize) -> Self {
        PatchEmbed {
            patch,
            proj: Linear::new(init, &format!("{name}.proj"), patch * patch * in_ch, dim),
        }
    }

    /// Length of one flattened patch before projection.
    pub fn raw_dim(&self) -> usize {
        self.proj.in_dim
    }

    /// `[N, C, H, W]` → `[N, H/p, W/p, p·p·C]`, each patch flattened row by
    /// row with the channel values of a pixel adjacent.
    pub fn patchify(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        let [n, c, h, w] = <[usize; 4]>::try_from(shape.as_slice())
            .map_err(|_| Error::shape("patch_embed", format!("expected [N, C, H, W], got {shape:?}")))?;
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape("patch_embed", format!("{h}x{w} not divisible by patch size {p}")));
        }
        let y = tape.reshape(image, &[n, c, h / p, p, w / p, p])?;
        let y = tape.permute(y, &[0, 2, 4, 3, 5, 1])?;
        tape.reshape(y, &[n, h / p, w / p, p * p * c])
    }

    pub fn forward(&self, f: &mut Forward, image: Var) -> Result<TokenMap> {
        let raw = self.patchify(f.tape, image)?;
        Ok(TokenMap {
            tokens: self.proj.forward(f, raw)?,
            stage: 1,
        })
    }
}

/// Concatenates each 2×2 neighbourhood in row-major corner order, then
/// layer-normalises the `4D` features before projecting them to `2D`.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        PatchMerging {
            norm: LayerNorm::new(init, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(init, &format!("{name}.reduction"), 4 * dim, 2 * dim),
        }
    }

    pub fn gather(tape: &mut Tape, x: Var) -> Result<Var> {
        let [n, h, w, d] = grid_dims(tape, x, "patch_merge")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("patch_merge", format!("odd grid {h}x{w}")));
        }
        let y = tape.reshape(x, &[n, h / 2, 2, w / 2, 2, d])?;
        let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
        tape.reshape(y, &[n, h / 2, w / 2, 4 * d])
    }

    pub fn forward(&self, f: &mut Forward, t: TokenMap) -> Result<TokenMap> {
        f.trace.patch_merges += 1;
        let y = Self::gather(f.tape, t.tokens)?;
        let y = self.norm.forward(f, y)?;
        Ok(TokenMap {
            tokens: self.reduction.forward(f, y)?,
            stage: t.stage + 1,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SwinStage {
    pub merge: Option<PatchMerging>,
    pub blocks: Vec<SwinBlock>,
}

#[derive(Debug, Clone)]
pub struct SwinEncoder {
    pub config: SwinConfig,
    pub geometry: [StageGeometry; 4],
    pub embed: PatchEmbed,
    pub stages: Vec<SwinStage>,
}

impl SwinEncoder {
    pub fn new(init: &mut Init, name: &str, config: &SwinConfig, input_size: usize) -> Result<Self> {
        let geometry = config.validate(input_size)?;
        let embed = PatchEmbed::new(init, &format!("{name}.embed"), config.patch_size, 3, config.embed_dim);
        let mut stages = Vec::with_capacity(4);
        for (s, &geo) in geometry.iter().enumerate() {
            let dim = config.stage_dim(s);
            let merge = (s > 0).then(|| PatchMerging::new(init, &format!("{name}.stage{}.merge", s + 1), dim / 2));
            let blocks = (0..config.depths[s])
                .map(|b| {
                    let kind = if b % 2 == 0 { BlockKind::Regular } else { BlockKind::Shifted };
                    SwinBlock::new(
                        init,
                        &format!("{name}.stage{}.block{b}", s + 1),
                        dim,
                        config.heads[s],
                        geo,
                        kind,
                        config.mlp_ratio,
                        config.rel_pos_bias,
                    )
                })
                .collect();
            stages.push(SwinStage { merge, blocks });
        }
        Ok(SwinEncoder {
            config: config.clone(),
            geometry,
            embed,
            stages,
        })
    }

    /// Four token maps at `H/p`, `H/2p`, `H/4p`, `H/8p` with dims `C, 2C, 4C, 8C`.
    pub fn forward(&self, f: &mut Forward, image: Var) -> Result<Vec<TokenMap>> {
        let mut t = self.embed.forward(f, image)?;
        let mut out = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                t = m.forward(f, t)?;
            }
            let [_, h, w, _] = grid_dims(f.tape, t.tokens, "swin_encoder")?;
            let m = self.geometry[s].window;
            if h % m != 0 || w % m != 0 {
                return Err(Error::shape(
                    "swin_encoder",
                    format!("stage {} grid {h}x{w} not divisible by window {m}", s + 1),
                ));
            }
            for blk in &stage.blocks {
                t.tokens = blk.forward(f, t.tokens)?;
            }
            out.push(t);
        }
        Ok(out)
    }
}

fn grid_dims(tape: &Tape, x: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = tape.shape(x);
    <[usize; 4]>::try_from(s).map_err(|_| Error::shape(op, format!("expected [N, h, w, D], got {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};

    fn seq(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|v| v as f64).collect(), Precision::F64).unwrap()
    }

    #[test]
    fn partition_counts_and_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(seq(vec![1, 8, 8, 3]));
        let w4 = window_partition(&mut tape, x, 4).unwrap();
        assert_eq!(tape.shape(w4), &[4, 16, 3]);
        let w2 = window_partition(&mut tape, x, 2).unwrap();
        assert_eq!(tape.shape(w2), &[16, 4, 3]);
        let back = window_reverse(&mut tape, w4, 4, 1, 8, 8).unwrap();
        assert!(tape.value(back).bit_eq(tape.value(x)));
        assert!(window_partition(&mut tape, x, 3).is_err());
    }

    #[test]
    fn window_contents_are_contiguous_blocks() {
        let mut tape = Tape::new();
        let x = tape.constant(seq(vec![1, 4, 4, 1]));
        let w = window_partition(&mut tape, x, 2).unwrap();
        // second window (top-right) holds grid cells (0,2),(0,3),(1,2),(1,3)
        assert_eq!(&tape.value(w).data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn shift_zero_and_inverse() {
        let mut tape = Tape::new();
        let x = tape.constant(seq(vec![2, 4, 6, 2]));
        let same = cyclic_shift(&mut tape, x, 0).unwrap();
        assert!(tape.value(same).bit_eq(tape.value(x)));
        let s = cyclic_shift(&mut tape, x, 2).unwrap();
        let back = cyclic_shift(&mut tape, s, -2).unwrap();
        assert!(tape.value(back).bit_eq(tape.value(x)));
    }

    #[test]
    fn one_hot_shift_wraps_to_far_corner() {
        let mut tape = Tape::new();
        let mut d = vec![0.0; 16];
        d[0] = 1.0;
        let x = tape.constant(Tensor::new(vec![1, 4, 4, 1], d, Precision::F64).unwrap());
        let y = cyclic_shift(&mut tape, x, 1).unwrap();
        assert_eq!(tape.value(y).data()[15], 1.0);
    }

    #[test]
    fn unshifted_mask_is_all_zero() {
        let m = shift_attention_mask(8, 8, 4, 0, Precision::F64).unwrap();
        assert_eq!(m.shape(), &[4, 16, 16]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn windows_away_from_the_seam_are_unmasked() {
        let m = shift_attention_mask(8, 8, 4, 2, Precision::F64).unwrap();
        let per = 16 * 16;
        assert!(m.data()[..per].iter().all(|&v| v == 0.0));
        assert!(m.data()[3 * per..].contains(&MASK_NEG));
    }

    #[test]
    fn relative_index_is_symmetric_about_center() {
        let idx = relative_position_index(2);
        assert_eq!(idx.len(), 16);
        // a token against itself sits at the table centre
        assert!(idx.iter().step_by(5).all(|&i| i == 4));
        assert!(idx.iter().all(|&i| i < 9));
    }

    #[test]
    fn config_validation() {
        let cfg = SwinConfig::default();
        let geo = cfg.validate(64).unwrap();
        assert_eq!(geo.map(|g| g.grid), [16, 8, 4, 2]);
        assert_eq!(geo.map(|g| g.window), [4, 4, 4, 2]);
        assert!(cfg.validate(48).is_err());
        let mut odd = cfg.clone();
        odd.window = 3;
        assert!(odd.validate(64).is_err());
        let mut heads = cfg.clone();
        heads.heads[0] = 5;
        assert!(heads.validate(64).is_err());
        // 96 / 4 = 24, stage grids 24, 12, 6, 3 -> 6 % 4 != 0
        assert!(cfg.validate(96).is_err());
    }

    #[test]
    fn single_token_window_attends_to_itself() {
        let mut store = ParamStore::new(Precision::F64);
        let mut init = Init::new(&mut store, 5);
        let attn = WindowAttention::new(&mut init, "a", 4, 2, 1, true);
        let x = Tensor::randn(vec![3, 1, 4], 1.0, Precision::F64, &mut init.rng);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let xi = f.input(x);
        let (out, probs) = attn.forward_with_probs(&mut f, xi, None).unwrap();
        assert!(f.tape.value(probs).data().iter().all(|&p| p == 1.0));
        // output = proj(v)
        let qkv = attn.qkv.forward(&mut f, xi).unwrap();
        let v = f.tape.slice(qkv, 2, 8, 4).unwrap();
        let want = attn.proj.forward(&mut f, v).unwrap();
        let diff = f.tape.value(out).max_abs_diff(f.tape.value(want)).unwrap();
        assert!(diff < 1e-12);
    }
}
