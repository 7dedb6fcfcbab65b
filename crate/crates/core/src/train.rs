//! Sample preparation, the optimizer loop, inference and checkpoint state.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Adam, AdamConfig, Ctx, ParamGrads, ParamStore, Tensor};
use crate::data::{pad_to_input_size, ShapeRecord};
use crate::encoder::{self, EncoderPlan};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::losses::{self, AuctionConfig, LossKind, LossReport};
use crate::model::{self, ModelConfig};

/// One partial view with everything the loss needs precomputed.
#[derive(Clone, Debug)]
pub struct Sample {
    pub shape_id: String,
    pub category: String,
    pub view: usize,
    pub input: PointCloud,
    pub plan: EncoderPlan,
    pub target: PointCloud,
    pub coarse: Vec<PointCloud>,
}

/// Reduces (or pads) a raw partial to `input_points`, then pads to the
/// model's fixed input size.
pub fn prepare_input(partial: &PointCloud, input_points: usize, model_points: usize, seed: u64) -> Result<PointCloud> {
    let reduced = pad_to_input_size(partial, input_points, seed)?;
    pad_to_input_size(&reduced, model_points, seed.rotate_left(17) ^ 0xA5A5)
}

pub fn prepare_samples(records: &[ShapeRecord], cfg: &ModelConfig, input_points: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (s, rec) in records.iter().enumerate() {
        if rec.complete.len() != cfg.output_points() {
            return Err(Error::Data(format!(
                "{}: complete cloud has {} points, model emits {}",
                rec.shape_id,
                rec.complete.len(),
                cfg.output_points()
            )));
        }
        let coarse = model::coarse_targets(&rec.complete, cfg)?;
        for (v, partial) in rec.partials.iter().enumerate() {
            let view_seed = seed ^ ((s as u64) << 8 | v as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
            let input = prepare_input(partial, input_points, cfg.encoder.input_points, view_seed)?;
            let plan = encoder::plan(&input, &cfg.encoder)?;
            out.push(Sample {
                shape_id: rec.shape_id.clone(),
                category: rec.category.clone(),
                view: v,
                input,
                plan,
                target: rec.complete.clone(),
                coarse: coarse.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub adam: AdamConfig,
    pub batch: usize,
    pub seed: u64,
    pub auction: AuctionConfig,
    /// Process batch samples one after another instead of on the thread pool.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Both,
            adam: AdamConfig::default(),
            batch: 4,
            seed: 0,
            auction: AuctionConfig::default(),
            deterministic: false,
        }
    }
}

/// Gradient of one sample's objective.
pub fn sample_gradients(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    sample: &Sample,
    kind: LossKind,
    auction: &AuctionConfig,
) -> Result<(ParamGrads<f32>, LossReport)> {
    let mut ctx = Ctx::new(params);
    let (_, decoded) = model::forward(&mut ctx, &sample.input, &sample.plan, cfg)?;
    if decoded.coarse.iter().chain([&decoded.final_cloud]).any(|&v| !ctx.value(v).is_finite()) {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let (objective, report) =
        losses::total_loss(&mut ctx.graph, decoded.final_cloud, &decoded.coarse, &sample.target, &sample.coarse, kind, auction)?;
    if !report.objective.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    Ok((ctx.param_grads(objective)?, report))
}

pub struct Trainer {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ParamStore<f32>,
    pub opt: Adam<f32>,
}

impl Trainer {
    pub fn new(model: ModelConfig, cfg: TrainConfig) -> Self {
        let params = model.init::<f32>(cfg.seed);
        let opt = Adam::new(cfg.adam, &params);
        Self { model, cfg, params, opt }
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.opt.step
    }

    /// Batch for the next step; a pure function of seed and step number, so
    /// resumed runs see the same sequence.
    pub fn batch_indices(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (self.opt.step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let b = self.cfg.batch.min(n);
        sample_indices(&mut rng, n, b).into_vec()
    }

    /// One Adam step on the mean gradient of a batch drawn from `samples`.
    pub fn train_step(&mut self, samples: &[Sample]) -> Result<LossReport> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let batch: Vec<&Sample> = self.batch_indices(samples.len()).into_iter().map(|i| &samples[i]).collect();
        let run = |s: &&Sample| sample_gradients(&self.params, &self.model, s, self.cfg.loss, &self.cfg.auction);
        let results: Vec<Result<(ParamGrads<f32>, LossReport)>> = if self.cfg.deterministic {
            batch.iter().map(run).collect()
        } else {
            batch.par_iter().map(run).collect()
        };
        let step = self.opt.step + 1;
        let mut total = ParamGrads::zeros_like(&self.params);
        let mut reports = Vec::with_capacity(results.len());
        for r in results {
            let (g, rep) = r.map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
                other => other,
            })?;
            total.add_assign(&g);
            reports.push(rep);
        }
        total.scale(1.0 / reports.len() as f64);
        self.opt.step(&mut self.params, &total)?;
        Ok(LossReport::mean(&reports))
    }

    /// Parameters, Adam moments and the step counter.
    pub fn state(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<(String, Tensor<f32>)> = self.params.iter().map(|(n, t)| (format!("param.{n}"), t.clone())).collect();
        for (i, n) in self.params.names().iter().enumerate() {
            out.push((format!("adam.m.{n}"), self.opt.m[i].clone()));
            out.push((format!("adam.v.{n}"), self.opt.v[i].clone()));
        }
        out.push(("meta.step".into(), Tensor::scalar(self.opt.step as f32)));
        out
    }

    pub fn from_state(model: ModelConfig, cfg: TrainConfig, state: &[(String, Tensor<f32>)]) -> Result<Self> {
        let mut t = Self::new(model, cfg);
        t.params = load_params(&t.model, state)?;
        let lookup = |name: &str| state.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let names = t.params.names().to_vec();
        let mut missing = Vec::new();
        for (i, n) in names.iter().enumerate() {
            match (lookup(&format!("adam.m.{n}")), lookup(&format!("adam.v.{n}"))) {
                (Some(m), Some(v)) => {
                    t.opt.m[i] = m.clone();
                    t.opt.v[i] = v.clone();
                }
                _ => missing.push(format!("adam.*.{n}")),
            }
        }
        match lookup("meta.step") {
            Some(s) => t.opt.step = s.item() as usize,
            None => missing.push("meta.step".into()),
        }
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        Ok(t)
    }
}

/// Parameters for `model` out of checkpoint tensors; every missing name is
/// listed in the error.
pub fn load_params(model: &ModelConfig, state: &[(String, Tensor<f32>)]) -> Result<ParamStore<f32>> {
    let mut params = model.init::<f32>(0);
    let mut missing = Vec::new();
    for name in params.names().to_vec() {
        let key = format!("param.{name}");
        match state.iter().find(|(n, _)| *n == key) {
            Some((_, t)) => {
                let slot = params.get_mut(&name).expect("name from store");
                if slot.shape() != t.shape() {
                    return Err(Error::Config(format!("{name}: checkpoint shape {:?}, model {:?}", t.shape(), slot.shape())));
                }
                *slot = t.clone();
            }
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingTensors(missing));
    }
    Ok(params)
}

/// Inference outputs as plain values.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub coarse: Vec<PointCloud>,
    pub final_cloud: PointCloud,
    /// Skip-attention score matrices per level, `None` without skipping.
    pub attention: Vec<Option<Tensor<f32>>>,
}

pub fn predict(params: &ParamStore<f32>, cfg: &ModelConfig, input: &PointCloud, plan: &EncoderPlan) -> Result<Prediction> {
    let mut ctx = Ctx::inference(params);
    let (_, d) = model::forward(&mut ctx, input, plan, cfg)?;
    let coarse = d.coarse.iter().map(|&c| PointCloud::from_tensor(ctx.value(c))).collect::<Result<_>>()?;
    let final_cloud = PointCloud::from_tensor(ctx.value(d.final_cloud))?;
    let attention = d.attention.iter().map(|a| a.map(|s| ctx.value(s.matrix).clone())).collect();
    Ok(Prediction { coarse, final_cloud, attention })
}

/// Chamfer distance of the final prediction for every sample, in order.
pub fn evaluate(params: &ParamStore<f32>, cfg: &ModelConfig, samples: &[Sample], parallel: bool) -> Result<Vec<f64>> {
    let run = |s: &Sample| -> Result<f64> {
        let p = predict(params, cfg, &s.input, &s.plan)?;
        losses::chamfer_value(&p.final_cloud, &s.target)
    };
    if parallel {
        samples.par_iter().map(run).collect()
    } else {
        samples.iter().map(run).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_partial, synth_shape, viewpoints, ShapeKind};
    use crate::decoder::Variant;

    fn mini_records(n: usize) -> Vec<ShapeRecord> {
        (0..n)
            .map(|i| {
                let kind = ShapeKind::ALL[i % 5];
                let full = synth_shape(kind, i as u64);
                let idx: Vec<usize> = (0..32).map(|j| j * 64).collect();
                let complete = full.select(&idx);
                let partials = viewpoints()[..2].iter().map(|v| make_partial(&complete, *v, 16).unwrap()).collect();
                ShapeRecord { shape_id: format!("s{i}"), category: kind.to_string(), complete, partials }
            })
            .collect()
    }

    #[test]
    fn miniature_training_reduces_loss_and_resumes() {
        let model = ModelConfig::miniature(Variant::Full);
        let samples = prepare_samples(&mini_records(2), &model, 32, 1).unwrap();
        assert_eq!(samples.len(), 4);
        let cfg = TrainConfig { adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() }, batch: 2, deterministic: true, ..TrainConfig::default() };
        let mut t = Trainer::new(model.clone(), cfg.clone());
        let before: f64 = evaluate(&t.params, &model, &samples, false).unwrap().iter().sum();
        for _ in 0..60 {
            let r = t.train_step(&samples).unwrap();
            assert!(r.objective.is_finite());
        }
        let after: f64 = evaluate(&t.params, &model, &samples, false).unwrap().iter().sum();
        assert!(after < before, "{after} vs {before}");

        let state = t.state();
        let mut resumed = Trainer::from_state(model.clone(), cfg.clone(), &state).unwrap();
        assert_eq!(resumed.step(), 60);
        let a = t.train_step(&samples).unwrap();
        let b = resumed.train_step(&samples).unwrap();
        assert_eq!(a, b);
        assert_eq!(t.params.get("enc.l1.0.w"), resumed.params.get("enc.l1.0.w"));
    }

    #[test]
    fn missing_tensors_are_listed() {
        let full = ModelConfig::miniature(Variant::NoSkip);
        let t = Trainer::new(full, TrainConfig::default());
        let state = t.state();
        match load_params(&ModelConfig::miniature(Variant::Full), &state) {
            Err(Error::MissingTensors(names)) => assert!(names.iter().all(|n| n.starts_with("dec.skip")) && !names.is_empty()),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn prediction_shapes() {
        let model = ModelConfig::miniature(Variant::Full);
        let samples = prepare_samples(&mini_records(1), &model, 8, 2).unwrap();
        assert_eq!(samples[0].input.len(), 32);
        let params = model.init::<f32>(3);
        let p = predict(&params, &model, &samples[0].input, &samples[0].plan).unwrap();
        assert_eq!(p.final_cloud.len(), 32);
        assert_eq!(p.coarse.iter().map(PointCloud::len).collect::<Vec<_>>(), vec![4, 8, 16]);
        assert_eq!(p.attention.len(), 3);
        assert_eq!(p.attention[2].as_ref().unwrap().shape(), &[16, 16]);
    }
}
