//! Folding decoder: seed features from the global vector, then three
//! up-down-up folding blocks that densify the point set over grids drawn from
//! one shared 46×46 plane, with skip-attention into the encoder between
//! blocks and a point head at every level.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{self, AttentionScores, ScoreMode};
use crate::autodiff::{Ctx, ParamStore, Real, Tensor, Var};
use crate::encoder::Encoded;
use crate::error::{Error, Result};

pub const GRID_SIDE: usize = 46;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;

/// Points on the `{0, 1/45, …, 1}²` lattice in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    pub cells: Vec<usize>,
    pub coords: Vec<[f64; 2]>,
}

impl Grid2D {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(vec![self.len(), 2], self.coords.iter().flatten().map(|&v| T::of(v)).collect())
            .expect("grid has at least one row")
    }
}

/// Cell `round(j·2115/(n−1))` for `j = 0..n`, in exact integer arithmetic.
pub fn sample_grid(n: usize) -> Result<Grid2D> {
    if n == 0 || n > GRID_CELLS {
        return Err(Error::Decoder(format!("grid size {n} outside 1..={GRID_CELLS}")));
    }
    let last = GRID_CELLS - 1;
    let cells: Vec<usize> = if n == 1 {
        vec![0]
    } else {
        (0..n).map(|j| (2 * j * last + (n - 1)) / (2 * (n - 1))).collect()
    };
    let step = (GRID_SIDE - 1) as f64;
    let coords = cells.iter().map(|&c| [(c / GRID_SIDE) as f64 / step, (c % GRID_SIDE) as f64 / step]).collect();
    Ok(Grid2D { cells, coords })
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Cosine skip-attention, learnable self-attention.
    Full,
    NoSkip,
    SkipLearnable,
    /// Cosine scores in both skip- and self-attention.
    FoldCosine,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoSkip, Variant::SkipLearnable, Variant::FoldCosine];

    pub fn skip_mode(self) -> Option<ScoreMode> {
        match self {
            Variant::Full | Variant::FoldCosine => Some(ScoreMode::Cosine),
            Variant::SkipLearnable => Some(ScoreMode::Learnable),
            Variant::NoSkip => None,
        }
    }

    pub fn self_mode(self) -> ScoreMode {
        match self {
            Variant::FoldCosine => ScoreMode::Cosine,
            _ => ScoreMode::Learnable,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSkip => "no_skip",
            Variant::SkipLearnable => "skip_learnable",
            Variant::FoldCosine => "fold_cosine",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (full, no_skip, skip_learnable, fold_cosine)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub seed_points: usize,
    /// Per-seed width of the global→seed expansion before lifting to `widths[0]`.
    pub seed_hidden: usize,
    /// Feature width at the seed and after each block.
    pub widths: Vec<usize>,
    pub ratios: Vec<usize>,
    pub code_hidden: usize,
    pub head_hidden: usize,
    /// Drops the down module and second up module of every block.
    pub single_fold: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            seed_points: 64,
            seed_hidden: 16,
            widths: vec![128, 128, 128, 64],
            ratios: vec![4, 2, 4],
            code_hidden: 64,
            head_hidden: 64,
            single_fold: false,
        }
    }
}

impl DecoderConfig {
    pub fn miniature() -> Self {
        Self {
            seed_points: 4,
            seed_hidden: 4,
            widths: vec![8, 8, 8, 6],
            ratios: vec![2, 2, 2],
            code_hidden: 6,
            head_hidden: 6,
            single_fold: false,
        }
    }

    /// Point counts of every level, seed first.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut out = vec![self.seed_points];
        for r in &self.ratios {
            out.push(out.last().unwrap() * r);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.ratios.len() + 1 {
            return Err(Error::Config("decoder needs one more width than ratios".into()));
        }
        if self.ratios.contains(&0) || self.seed_points == 0 {
            return Err(Error::Config("decoder ratios and seed count must be positive".into()));
        }
        if *self.resolutions().last().unwrap() > GRID_CELLS {
            return Err(Error::Config(format!("decoder output exceeds {GRID_CELLS} grid cells")));
        }
        Ok(())
    }

    /// `skip_widths[l]` is the region width the level-`l` skip site attends to.
    pub fn init(&self, store: &mut ParamStore<impl Real>, rng: &mut impl Rng, variant: Variant, global_width: usize, skip_widths: &[usize]) {
        store.init_dense(rng, "dec.seed.expand", global_width, self.seed_points * self.seed_hidden);
        store.init_dense(rng, "dec.seed.lift", self.seed_hidden, self.widths[0]);
        for (b, &r) in self.ratios.iter().enumerate() {
            let (d_in, d_out) = (self.widths[b], self.widths[b + 1]);
            let site = format!("dec.b{}", b + 1);
            self.init_up(store, rng, &format!("{site}.up1"), d_in, d_out, variant);
            if !self.single_fold {
                store.init_dense(rng, &format!("{site}.down"), r * d_out, d_out);
                self.init_up(store, rng, &format!("{site}.up2"), d_out, d_out, variant);
            }
        }
        for (level, &w) in self.widths.iter().enumerate() {
            store.init_mlp(rng, &format!("dec.head{}", level + 1), w, &[self.head_hidden, 3]);
        }
        if let Some(mode) = variant.skip_mode() {
            for (level, &rw) in skip_widths.iter().enumerate().take(self.ratios.len()) {
                attention::init_skip_attention(store, rng, &format!("dec.skip{}", level + 1), mode, self.widths[level], rw);
            }
        }
    }

    fn init_up(&self, store: &mut ParamStore<impl Real>, rng: &mut impl Rng, site: &str, d_in: usize, d_out: usize, variant: Variant) {
        store.init_mlp(rng, &format!("{site}.code"), d_in + 2, &[self.code_hidden, 3]);
        store.init_dense(rng, &format!("{site}.feat"), 3 + d_in, d_out);
        attention::init_self_attention(store, rng, &format!("{site}.att"), variant.self_mode(), d_out);
    }
}

/// `dense(global) → seed_points × seed_hidden → ReLU → lift` to seed features.
pub fn seed_from_global<T: Real>(ctx: &mut Ctx<T>, global: Var, cfg: &DecoderConfig) -> Result<Var> {
    let h = ctx.dense("dec.seed.expand", global)?;
    let h = ctx.graph.reshape(h, &[cfg.seed_points, cfg.seed_hidden])?;
    let h = ctx.graph.relu(h)?;
    ctx.dense("dec.seed.lift", h)
}

/// Duplicates every row `ratio` times (copies contiguous), attaches one grid
/// point per copy, derives a 3-wide codeword, maps `[codeword | feature]` to
/// the output width and runs self-attention over all rows.
pub fn up_module<T: Real>(
    ctx: &mut Ctx<T>,
    site: &str,
    features: Var,
    ratio: usize,
    grid: &Grid2D,
    mode: ScoreMode,
) -> Result<Var> {
    let n = ctx.graph.shape(features)[0];
    if grid.len() != n * ratio {
        return Err(Error::Decoder(format!("{site}: grid has {} rows, need {}", grid.len(), n * ratio)));
    }
    let copies: Vec<usize> = (0..n).flat_map(|j| std::iter::repeat(j).take(ratio)).collect();
    let dup = ctx.graph.gather(features, &copies)?;
    let g = ctx.constant(grid.to_tensor());
    let with_grid = ctx.graph.concat(&[dup, g], 1)?;
    let code = ctx.mlp(&format!("{site}.code"), with_grid, 2, false)?;
    let with_code = ctx.graph.concat(&[code, dup], 1)?;
    let h = ctx.dense(&format!("{site}.feat"), with_code)?;
    let h = ctx.graph.relu(h)?;
    let (out, _) = attention::self_attention(ctx, h, mode, &format!("{site}.att"))?;
    Ok(out)
}

/// Concatenates each run of `ratio` consecutive rows and maps it back to the
/// row width.
pub fn down_module<T: Real>(ctx: &mut Ctx<T>, site: &str, features: Var, ratio: usize) -> Result<Var> {
    let (rows, width) = match ctx.graph.shape(features) {
        [r, w] => (*r, *w),
        s => return Err(Error::Decoder(format!("{site}: expected rank-2 features, got {s:?}"))),
    };
    if ratio == 0 || rows % ratio != 0 {
        return Err(Error::Decoder(format!("{site}: {rows} rows not divisible by ratio {ratio}")));
    }
    let grouped = ctx.graph.reshape(features, &[rows / ratio, ratio * width])?;
    let h = ctx.dense(site, grouped)?;
    ctx.graph.relu(h)
}

/// `u1 = up(x)`, `u2 = up(down(u1))`, output `u1 + u2`.
pub fn folding_block<T: Real>(
    ctx: &mut Ctx<T>,
    site: &str,
    features: Var,
    ratio: usize,
    grid: &Grid2D,
    mode: ScoreMode,
    single_fold: bool,
) -> Result<Var> {
    let u1 = up_module(ctx, &format!("{site}.up1"), features, ratio, grid, mode)?;
    if single_fold {
        return Ok(u1);
    }
    let d = down_module(ctx, &format!("{site}.down"), u1, ratio)?;
    let u2 = up_module(ctx, &format!("{site}.up2"), d, ratio, grid, mode)?;
    ctx.graph.add(u1, u2)
}

/// Shared per-row `D → hidden → 3` MLP.
pub fn point_head<T: Real>(ctx: &mut Ctx<T>, site: &str, features: Var) -> Result<Var> {
    ctx.mlp(site, features, 2, false)
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// Coarse clouds of every level before the last, seed first.
    pub coarse: Vec<Var>,
    pub final_cloud: Var,
    /// Skip-attention scores per level; `None` when skipping is disabled.
    pub attention: Vec<Option<AttentionScores>>,
}

pub fn decode<T: Real>(ctx: &mut Ctx<T>, encoded: &Encoded, variant: Variant, cfg: &DecoderConfig) -> Result<Decoded> {
    cfg.validate()?;
    let sources = [encoded.global, encoded.level2.features, encoded.level1.features];
    let resolutions = cfg.resolutions();
    let mut features = seed_from_global(ctx, encoded.global, cfg)?;
    let mut coarse = Vec::with_capacity(cfg.ratios.len());
    let mut scores = Vec::with_capacity(cfg.ratios.len());
    for (b, &r) in cfg.ratios.iter().enumerate() {
        coarse.push(point_head(ctx, &format!("dec.head{}", b + 1), features)?);
        match (variant.skip_mode(), sources.get(b)) {
            (Some(mode), Some(&src)) => {
                let (fused, s) = attention::skip_attention(ctx, features, src, mode, &format!("dec.skip{}", b + 1))?;
                features = fused;
                scores.push(Some(s));
            }
            _ => scores.push(None),
        }
        let grid = sample_grid(resolutions[b + 1])?;
        features = folding_block(ctx, &format!("dec.b{}", b + 1), features, r, &grid, variant.self_mode(), cfg.single_fold)?;
    }
    let final_cloud = point_head(ctx, &format!("dec.head{}", cfg.widths.len()), features)?;
    Ok(Decoded { coarse, final_cloud, attention: scores })
}
