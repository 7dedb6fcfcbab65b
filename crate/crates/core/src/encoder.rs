//! Three-level set-abstraction encoder: two sampled levels of local region
//! features and a group-all level producing the global feature.

use rand::Rng;

use crate::autodiff::{Ctx, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::geometry::{ball_query, farthest_point_sample, relative_coords, NeighborhoodIndex, PointCloud};

#[derive(Clone, Debug, PartialEq)]
pub struct LevelConfig {
    pub m: usize,
    pub radius: f64,
    pub k: usize,
    pub widths: Vec<usize>,
}

impl LevelConfig {
    pub fn out_width(&self) -> usize {
        *self.widths.last().expect("level has at least one layer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_points: usize,
    pub level1: LevelConfig,
    pub level2: LevelConfig,
    pub global_widths: Vec<usize>,
    pub global_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_points: 2048,
            level1: LevelConfig { m: 512, radius: 0.2, k: 32, widths: vec![64, 64, 128] },
            level2: LevelConfig { m: 256, radius: 0.4, k: 32, widths: vec![128, 128, 256] },
            global_widths: vec![256, 512, 512],
            global_width: 512,
        }
    }
}

impl EncoderConfig {
    /// 32-point network small enough for exhaustive gradient checks.
    pub fn miniature() -> Self {
        Self {
            input_points: 32,
            level1: LevelConfig { m: 16, radius: 0.5, k: 4, widths: vec![8, 8] },
            level2: LevelConfig { m: 8, radius: 0.8, k: 4, widths: vec![8, 12] },
            global_widths: vec![12, 16],
            global_width: 16,
        }
    }

    pub fn init(&self, store: &mut ParamStore<impl Real>, rng: &mut impl Rng) {
        store.init_mlp(rng, "enc.l1", 3, &self.level1.widths);
        store.init_mlp(rng, "enc.l2", 3 + self.level1.out_width(), &self.level2.widths);
        let g_in = 3 + self.level2.out_width();
        store.init_mlp(rng, "enc.l3", g_in, &self.global_widths);
        store.init_dense(rng, "enc.global", *self.global_widths.last().unwrap(), self.global_width);
    }
}

/// Region features paired with the centroids they summarize.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub centroids: PointCloud,
    /// `M × D`.
    pub features: Var,
    pub level: u8,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub level1: FeatureMap,
    pub level2: FeatureMap,
    /// `1 × D_g`.
    pub global: Var,
}

/// Sampling and grouping of one level; independent of the parameters, so it
/// can be computed once per input cloud.
#[derive(Clone, Debug)]
pub struct LevelPlan {
    pub centroids: PointCloud,
    pub neighborhoods: NeighborhoodIndex,
}

pub fn plan_level(cloud: &PointCloud, cfg: &LevelConfig) -> Result<LevelPlan> {
    if cfg.m > cloud.len() {
        return Err(Error::Geometry(format!("level wants {} centers from {} points", cfg.m, cloud.len())));
    }
    let centers = farthest_point_sample(cloud, cfg.m)?;
    let neighborhoods = ball_query(cloud, &centers, cfg.radius, cfg.k)?;
    Ok(LevelPlan { centroids: cloud.select(&centers), neighborhoods })
}

#[derive(Clone, Debug)]
pub struct EncoderPlan {
    pub level1: LevelPlan,
    pub level2: LevelPlan,
}

pub fn plan(cloud: &PointCloud, cfg: &EncoderConfig) -> Result<EncoderPlan> {
    if cloud.len() != cfg.input_points {
        return Err(Error::Geometry(format!("encoder expects {} points, got {}", cfg.input_points, cloud.len())));
    }
    let level1 = plan_level(cloud, &cfg.level1)?;
    let level2 = plan_level(&level1.centroids, &cfg.level2)?;
    Ok(EncoderPlan { level1, level2 })
}

/// Grouping, shared per-member MLP and max over members.
///
/// The first layer is split as `rel·W_xyz + (feats·W_feat)[member]`, which
/// equals applying it to the concatenated `M·K × (3+D)` grouping but runs the
/// feature product once per input point instead of once per membership.
pub fn set_abstraction<T: Real>(
    ctx: &mut Ctx<T>,
    name: &str,
    cloud: &PointCloud,
    feats: Option<Var>,
    plan: &LevelPlan,
    cfg: &LevelConfig,
    level: u8,
) -> Result<FeatureMap> {
    let neigh = &plan.neighborhoods;
    let (m, k) = (neigh.centers(), neigh.k);
    let rel = ctx.constant(relative_coords::<T>(cloud, neigh)?);
    let w = ctx.param(&format!("{name}.0.w"))?;
    let b = ctx.param(&format!("{name}.0.b"))?;
    let w_xyz = ctx.graph.slice(w, 0, 0, 3)?;
    let mut h = ctx.graph.matmul(rel, w_xyz)?;
    if let Some(f) = feats {
        let rows = ctx.graph.shape(w)[0];
        let w_feat = ctx.graph.slice(w, 0, 3, rows)?;
        let projected = ctx.graph.matmul(f, w_feat)?;
        let per_member = ctx.graph.gather(projected, &neigh.member_indices)?;
        h = ctx.graph.add(h, per_member)?;
    }
    h = ctx.graph.add(h, b)?;
    h = ctx.graph.relu(h)?;
    for i in 1..cfg.widths.len() {
        h = ctx.dense(&format!("{name}.{i}"), h)?;
        h = ctx.graph.relu(h)?;
    }
    let h = ctx.graph.reshape(h, &[m, k, cfg.out_width()])?;
    let features = ctx.graph.reduce_max(h, 1)?;
    Ok(FeatureMap { centroids: plan.centroids.clone(), features, level })
}

pub fn encode<T: Real>(ctx: &mut Ctx<T>, cloud: &PointCloud, plan: &EncoderPlan, cfg: &EncoderConfig) -> Result<Encoded> {
    if cloud.len() != cfg.input_points {
        return Err(Error::Geometry(format!("encoder expects {} points, got {}", cfg.input_points, cloud.len())));
    }
    let level1 = set_abstraction(ctx, "enc.l1", cloud, None, &plan.level1, &cfg.level1, 1)?;
    let level2 = set_abstraction(
        ctx,
        "enc.l2",
        &level1.centroids,
        Some(level1.features),
        &plan.level2,
        &cfg.level2,
        2,
    )?;
    let xyz = ctx.constant(level2.centroids.to_tensor());
    let grouped = ctx.graph.concat(&[xyz, level2.features], 1)?;
    let h = ctx.mlp("enc.l3", grouped, cfg.global_widths.len(), true)?;
    let pooled = ctx.graph.reduce_max(h, 0)?;
    let width = ctx.graph.shape(pooled)[0];
    let pooled = ctx.graph.reshape(pooled, &[1, width])?;
    let global = ctx.dense("enc.global", pooled)?;
    Ok(Encoded { level1, level2, global })
}
