use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use sanet_core::autodiff::{checkpoint, AdamConfig};
use sanet_core::data::{generate_split, load_split, read_ply_ascii, read_xyz, write_xyz};
use sanet_core::encoder;
use sanet_core::losses::LossReport;
use sanet_core::model::{param_breakdown, ModelConfig};
use sanet_core::train::{self, prepare_input, prepare_samples, Sample, TrainConfig, Trainer};
use sanet_core::Error;

use crate::{deterministic_from_env, CliError, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const LOG_HEADER: &str = "step cd emd total lr";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Core(Error::Io { path: path.to_path_buf(), source })
}

pub fn gen_data(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    Ok(generate_split(&cfg.data_dir, &cfg.split, cfg.shapes, cfg.seed, cfg.points, cfg.keep)?)
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        loss: cfg.loss,
        adam: AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
        batch: cfg.batch,
        seed: cfg.seed,
        deterministic: deterministic_from_env(),
        ..TrainConfig::default()
    }
}

pub fn load_samples(cfg: &RunConfig, model: &ModelConfig) -> Result<Vec<Sample>, CliError> {
    let records = load_split(&cfg.data_dir, &cfg.split)?;
    Ok(prepare_samples(&records, model, cfg.input_points, cfg.seed)?)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub first_step: usize,
    pub last_step: usize,
    pub checkpoint: PathBuf,
    pub reports: Vec<LossReport>,
}

/// Runs `cfg.steps` optimizer steps, continuing a checkpoint when `resume`
/// is given. Log lines go to `out_dir/train.log` and to `echo`.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, echo: &mut dyn Write) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let model = cfg.model();
    let samples = load_samples(cfg, &model)?;
    let mut trainer = match resume {
        Some(p) => Trainer::from_state(model, train_config(cfg), &checkpoint::load(p)?)?,
        None => Trainer::new(model, train_config(cfg)),
    };
    fs::create_dir_all(&cfg.out_dir).map_err(io(&cfg.out_dir))?;
    let cfg_path = cfg.out_dir.join("run.cfg");
    fs::write(&cfg_path, cfg.to_text()).map_err(io(&cfg_path))?;
    let log_path = cfg.out_dir.join(LOG_FILE);
    let mut log = if resume.is_some() && log_path.exists() {
        OpenOptions::new().append(true).open(&log_path).map_err(io(&log_path))?
    } else {
        let mut f = fs::File::create(&log_path).map_err(io(&log_path))?;
        writeln!(f, "{LOG_HEADER}").map_err(io(&log_path))?;
        f
    };
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    let first_step = trainer.step() + 1;
    let mut reports = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let report = trainer.train_step(&samples)?;
        let line = report.log_line(trainer.step(), cfg.lr);
        writeln!(log, "{line}").map_err(io(&log_path))?;
        let _ = writeln!(echo, "{line}");
        reports.push(report);
        if trainer.step() % cfg.checkpoint_every == 0 {
            checkpoint::save(&ckpt, &trainer.state())?;
        }
    }
    checkpoint::save(&ckpt, &trainer.state())?;
    Ok(TrainOutcome { first_step, last_step: trainer.step(), checkpoint: ckpt, reports })
}

pub fn read_cloud(path: &Path) -> Result<sanet_core::geometry::PointCloud, CliError> {
    let ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    Ok(if ply { read_ply_ascii(path)? } else { read_xyz(path)? })
}

/// Completes one partial cloud and writes per-level clouds and skip-attention
/// scores into `out`. Returns the written paths.
pub fn complete(cfg: &RunConfig, ckpt: &Path, input: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let model = cfg.model();
    let params = train::load_params(&model, &checkpoint::load(ckpt)?)?;
    let cloud = read_cloud(input)?;
    let prepared = prepare_input(&cloud, cfg.input_points, model.encoder.input_points, cfg.seed)?;
    let plan = encoder::plan(&prepared, &model.encoder)?;
    let pred = train::predict(&params, &model, &prepared, &plan)?;

    fs::create_dir_all(out).map_err(io(out))?;
    let mut written = Vec::new();
    for (l, c) in pred.coarse.iter().enumerate() {
        let p = out.join(format!("pred_L{}.xyz", l + 1));
        write_xyz(&p, c)?;
        written.push(p);
    }
    let p = out.join("pred_final.xyz");
    write_xyz(&p, &pred.final_cloud)?;
    written.push(p);

    let sources = [1, model.encoder.level2.m, model.encoder.level1.m];
    let targets = model.coarse_points();
    let mode = model.variant.skip_mode().map_or("none", |m| m.as_str());
    for (l, att) in pred.attention.iter().enumerate() {
        let mut text = format!("# level {} targets {} sources {} mode {mode}\n", l + 1, targets[l], sources[l]);
        if let Some(t) = att {
            for r in 0..t.rows() {
                let row: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
                text.push_str(&row.join(" "));
                text.push('\n');
            }
        }
        let p = out.join(format!("att_L{}.txt", l + 1));
        fs::write(&p, text).map_err(io(&p))?;
        written.push(p);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub category: String,
    pub views: usize,
    /// Mean per-point Chamfer distance ×10⁴.
    pub cd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    /// Mean over categories.
    pub average: f64,
}

impl EvalTable {
    /// Groups per-sample raw Chamfer distances by category, first-seen order.
    pub fn from_samples(samples: &[Sample], raw_cd: &[f64]) -> Result<Self, CliError> {
        if samples.is_empty() || samples.len() != raw_cd.len() {
            return Err(CliError::Core(Error::Data("nothing to evaluate".into())));
        }
        let mut acc: Vec<(String, usize, f64)> = Vec::new();
        for (s, &cd) in samples.iter().zip(raw_cd) {
            match acc.iter_mut().find(|a| a.0 == s.category) {
                Some(a) => {
                    a.1 += 1;
                    a.2 += cd;
                }
                None => acc.push((s.category.clone(), 1, cd)),
            }
        }
        let rows: Vec<EvalRow> = acc
            .into_iter()
            .map(|(category, views, sum)| EvalRow { category, views, cd: sum / views as f64 * sanet_core::losses::CD_REPORT_SCALE })
            .collect();
        let average = rows.iter().map(|r| r.cd).sum::<f64>() / rows.len() as f64;
        Ok(Self { rows, average })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("category\tviews\tcd_x1e4\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{:.2}\n", r.category, r.views, r.cd));
        }
        s.push_str(&format!("average\t{}\t{:.2}\n", self.rows.iter().map(|r| r.views).sum::<usize>(), self.average));
        s
    }
}

/// Evaluates a checkpoint on `cfg.split`, writing `out_dir/eval_<split>.tsv`.
pub fn eval(cfg: &RunConfig, ckpt: &Path) -> Result<(EvalTable, PathBuf), CliError> {
    let model = cfg.model();
    let params = train::load_params(&model, &checkpoint::load(ckpt)?)?;
    let samples = load_samples(cfg, &model)?;
    let cds = train::evaluate(&params, &model, &samples, !deterministic_from_env())?;
    let table = EvalTable::from_samples(&samples, &cds)?;
    fs::create_dir_all(&cfg.out_dir).map_err(io(&cfg.out_dir))?;
    let p = cfg.out_dir.join(format!("eval_{}.tsv", cfg.split));
    fs::write(&p, table.to_tsv()).map_err(io(&p))?;
    Ok((table, p))
}

/// Per-module trainable scalar counts and their total.
pub fn params(cfg: &RunConfig) -> (Vec<(String, usize)>, usize) {
    let store = cfg.model().init::<f32>(cfg.seed);
    (param_breakdown(&store), store.scalar_count())
}

pub fn params_text(breakdown: &[(String, usize)], total: usize) -> String {
    let mut s = String::new();
    for (g, n) in breakdown {
        s.push_str(&format!("{g}\t{n}\n"));
    }
    s.push_str(&format!("total\t{total}\n"));
    s
}
