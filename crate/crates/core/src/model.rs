//! Whole-network configuration, parameter initialization and forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Ctx, ParamStore, Real};
use crate::decoder::{self, Decoded, DecoderConfig, Variant};
use crate::encoder::{self, Encoded, EncoderConfig, EncoderPlan};
use crate::error::Result;
use crate::geometry::{farthest_point_sample, PointCloud};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self { encoder: EncoderConfig::default(), decoder: DecoderConfig::default(), variant }
    }

    pub fn miniature(variant: Variant) -> Self {
        Self { encoder: EncoderConfig::miniature(), decoder: DecoderConfig::miniature(), variant }
    }

    /// Region widths each decoder skip site attends to: the global feature,
    /// then encoder level 2, then encoder level 1.
    pub fn skip_widths(&self) -> [usize; 3] {
        [self.encoder.global_width, self.encoder.level2.out_width(), self.encoder.level1.out_width()]
    }

    pub fn output_points(&self) -> usize {
        *self.decoder.resolutions().last().unwrap()
    }

    /// Point counts of the coarse clouds, seed level first.
    pub fn coarse_points(&self) -> Vec<usize> {
        let r = self.decoder.resolutions();
        r[..r.len() - 1].to_vec()
    }

    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng);
        self.decoder.init(&mut store, &mut rng, self.variant, self.encoder.global_width, &self.skip_widths());
        store
    }
}

/// Scalar counts grouped by the first two segments of parameter names
/// (`enc.l1`, `dec.b2`, `dec.skip3`, …), in first-seen order.
pub fn param_breakdown<T: Real>(store: &ParamStore<T>) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for (name, t) in store.iter() {
        let group: String = name.split('.').take(2).collect::<Vec<_>>().join(".");
        match out.iter_mut().find(|(g, _)| *g == group) {
            Some((_, n)) => *n += t.len(),
            None => out.push((group, t.len())),
        }
    }
    out
}

pub fn forward<T: Real>(ctx: &mut Ctx<T>, input: &PointCloud, plan: &EncoderPlan, cfg: &ModelConfig) -> Result<(Encoded, Decoded)> {
    let encoded = encoder::encode(ctx, input, plan, &cfg.encoder)?;
    let decoded = decoder::decode(ctx, &encoded, cfg.variant, &cfg.decoder)?;
    Ok((encoded, decoded))
}

/// Ground truth subsampled by FPS to every coarse resolution.
pub fn coarse_targets(complete: &PointCloud, cfg: &ModelConfig) -> Result<Vec<PointCloud>> {
    cfg.coarse_points()
        .into_iter()
        .map(|m| Ok(complete.select(&farthest_point_sample(complete, m)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_budget() {
        let store = ModelConfig::new(Variant::Full).init::<f32>(0);
        let total = store.scalar_count();
        assert!((1_000_000..=2_500_000).contains(&total), "{total}");
        let breakdown = param_breakdown(&store);
        assert_eq!(breakdown.iter().map(|b| b.1).sum::<usize>(), total);
        let no_skip = ModelConfig::new(Variant::NoSkip).init::<f32>(0).scalar_count();
        assert!(no_skip < total);
    }

    #[test]
    fn every_variant_initializes_what_it_uses() {
        for v in Variant::ALL {
            let cfg = ModelConfig::miniature(v);
            let store = cfg.init::<f64>(1);
            let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(2);
            let cloud = PointCloud::new(
                (0..32).map(|_| [rand::Rng::gen_range(&mut rng, -1.0..1.0), rand::Rng::gen_range(&mut rng, -1.0..1.0), 0.3]).collect(),
            )
            .unwrap();
            let plan = encoder::plan(&cloud, &cfg.encoder).unwrap();
            let mut ctx = Ctx::new(&store);
            let (_, d) = forward(&mut ctx, &cloud, &plan, &cfg).unwrap();
            assert_eq!(ctx.graph.shape(d.final_cloud), &[32, 3]);
            let loss = ctx.graph.sum_all(d.final_cloud).unwrap();
            let grads = ctx.param_grads(loss).unwrap();
            let untouched: Vec<&String> = store.names().iter().zip(&grads.grads).filter(|(_, g)| g.data().iter().all(|&x| x == 0.0)).map(|(n, _)| n).collect();
            // Only coarse heads (unused by this loss) and, for learnable
            // skip-attention, the seed site whose softmax over one region is
            // constant may stay untouched.
            let inert = |n: &str| {
                (n.starts_with("dec.head") && !n.starts_with("dec.head4"))
                    || (v == Variant::SkipLearnable && (n.starts_with("dec.skip1.query") || n.starts_with("dec.skip1.key")))
            };
            assert!(untouched.iter().all(|n| inert(n)), "{v}: parameters without gradient {untouched:?}");
        }
    }
}
