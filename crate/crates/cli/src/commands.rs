use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use pmf_core::checkpoint::Checkpoint;
use pmf_core::config::DEFAULT_CONFIG_TOML;
use pmf_core::data::{generate_synthetic, load_dataset, Dataset, SyntheticSpec};
use pmf_core::eval::{evaluate as run_evaluation, write_jsonl, EvalOptions};
use pmf_core::inference::{
    detections, ground_truth_records, predict_dataset, predict_image, PairPrediction,
};
use pmf_core::training::{init_model, TrainError, Trainer, TrainingSet, LOG_HEADER};
use pmf_core::{PmfNet, TrainConfig};
use serde::Serialize;

use crate::{EvaluateArgs, Failure, GenDataArgs, InitConfigArgs, PredictArgs, TrainArgs};

pub type CmdResult = Result<(), Failure>;

/// Seed from the `PMF_SEED` environment variable, if set.
fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var("PMF_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Failure::input(anyhow!("PMF_SEED must be an unsigned integer, got {v:?}"))
        }),
        Err(_) => Ok(None),
    }
}

fn read_text(path: &Path, what: &str) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .with_context(|| format!("reading {what} {}", path.display()))
        .map_err(Failure::input)
}

pub fn load_data(path: &Path) -> Result<(Dataset, PathBuf), Failure> {
    let ds = load_dataset(path).map_err(Failure::input)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((ds, base))
}

/// Model stored in a checkpoint, checked against the dataset's actions.
pub fn load_model(ckpt: &Path, ds: &Dataset) -> Result<PmfNet, Failure> {
    let ck = Checkpoint::load(ckpt).map_err(Failure::input)?;
    let model = ck.to_model().map_err(Failure::input)?;
    let (have, want) = (model.config().num_actions, ds.num_actions());
    if want > 0 && have != want {
        return Err(Failure::input(anyhow!(
            "checkpoint predicts {have} actions but the dataset defines {want}"
        )));
    }
    Ok(model)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(Failure::runtime)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(Failure::runtime)
}

fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    let mut f = create(path)?;
    f.write_all(contents)
        .and_then(|_| f.flush())
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::runtime)
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Diverged { .. } | TrainError::Domain(_) => Failure::runtime(e),
        TrainError::Data(_) | TrainError::Config(_) | TrainError::EmptyPool => Failure::input(e),
    }
}

pub fn gen_data(args: GenDataArgs) -> CmdResult {
    let mut spec = match &args.spec {
        Some(p) => SyntheticSpec::from_toml_str(&read_text(p, "spec")?).map_err(Failure::input)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed.or(env_seed()?) {
        spec.seed = seed;
    }
    let ds = generate_synthetic(&spec).map_err(Failure::input)?;
    write_file(&args.out, ds.to_json().as_bytes())?;
    let pairs: usize = ds
        .images
        .iter()
        .map(|i| ds.pair_proposals(i.id).map(|p| p.len()).unwrap_or(0))
        .sum();
    println!(
        "wrote {}: {} images, {} humans, {} objects, {} pairs, {} positive pairs",
        args.out.display(),
        ds.images.len(),
        ds.humans.len(),
        ds.objects.len(),
        pairs,
        ds.interactions.len()
    );
    Ok(())
}

fn set_flag(cfg: &mut TrainConfig, spec: &str) -> Result<(), Failure> {
    let (name, value) = spec
        .split_once('=')
        .ok_or_else(|| Failure::input(anyhow!("--flag expects NAME=BOOL, got {spec:?}")))?;
    let value: bool = value
        .trim()
        .parse()
        .map_err(|_| Failure::input(anyhow!("--flag {name}: expected true or false")))?;
    let f = &mut cfg.flags;
    let slot = match name.trim() {
        "SCM" => &mut f.scm,
        "PC" => &mut f.part_crop,
        "SpAlign" => &mut f.spatial_align,
        "SeAtten" => &mut f.semantic_attention,
        "IA" => &mut f.interaction_affinity,
        other => {
            return Err(Failure::input(anyhow!(
                "unknown flag {other:?} (expected SCM, PC, SpAlign, SeAtten or IA)"
            )))
        }
    };
    *slot = value;
    Ok(())
}

/// Configuration with precedence: command-line flag, then `PMF_SEED` for
/// the seed, then the config file, then built-in defaults.
fn resolve_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_toml_str(&read_text(p, "config")?)
            .map_err(|e| Failure::input(anyhow!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed.or(env_seed()?) {
        cfg.train.seed = seed;
    }
    if let Some(n) = args.iterations {
        cfg.train.iterations = n;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(n) = args.checkpoint_every {
        cfg.train.checkpoint_every = n;
    }
    for f in &args.flags {
        set_flag(&mut cfg, f)?;
    }
    cfg.validate().map_err(|e| Failure::input(anyhow!(e)))?;
    Ok(cfg)
}

fn save_checkpoint(trainer: &Trainer<'_>, path: &Path) -> Result<(), TrainError> {
    Checkpoint::from_model(&trainer.model, Some(&trainer.state()))
        .save(path)
        .map_err(|e| TrainError::Config(format!("writing checkpoint {}: {e}", path.display())))
}

pub fn train(args: TrainArgs) -> CmdResult {
    let mut cfg = resolve_config(&args)?;
    let (ds, base) = load_data(&args.data)?;
    cfg.model.num_actions = ds.num_actions();
    let set =
        TrainingSet::new(&ds, Some(&base), cfg.train.match_threshold).map_err(train_failure)?;

    let (model, state) = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(Failure::input)?;
            let model = ck.to_model().map_err(Failure::input)?;
            if model.config() != &cfg.model || model.flags() != cfg.flags {
                return Err(Failure::input(anyhow!(
                    "checkpoint {} was trained with a different model configuration",
                    p.display()
                )));
            }
            let state = ck
                .train_state(&model)
                .map_err(Failure::input)?
                .ok_or_else(|| {
                    Failure::input(anyhow!("checkpoint {} has no optimiser state", p.display()))
                })?;
            (model, Some(state))
        }
        None => (init_model(&cfg).map_err(train_failure)?, None),
    };
    let mut trainer = Trainer::new(model, cfg.clone(), &set).map_err(train_failure)?;
    if let Some(state) = state {
        trainer = trainer.resume(state).map_err(train_failure)?;
    }

    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    let appending = args.resume.is_some() && metrics_path.exists();
    let mut metrics = if appending {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map(BufWriter::new)
            .with_context(|| format!("opening {}", metrics_path.display()))
            .map_err(Failure::runtime)?
    } else {
        let mut f = create(&metrics_path)?;
        writeln!(f, "{LOG_HEADER}")
            .context("writing metrics")
            .map_err(Failure::runtime)?;
        f
    };

    let every = cfg.train.log_every.max(1);
    let ckpt_every = cfg.train.checkpoint_every;
    let mut last = None;
    let mut io_error = None;
    let run = trainer.run(|t, row| {
        if row.iteration % every == 0 || row.iteration == t.config.train.iterations {
            if let Err(e) = writeln!(metrics, "{}", row.to_csv()) {
                io_error = Some(e);
            }
        }
        if ckpt_every > 0 && row.iteration % ckpt_every == 0 {
            save_checkpoint(t, &args.out)?;
        }
        last = Some(*row);
        Ok(())
    });
    metrics
        .flush()
        .context("writing metrics")
        .map_err(Failure::runtime)?;
    if let Some(e) = io_error {
        return Err(Failure::runtime(anyhow!(e).context("writing metrics")));
    }
    run.map_err(|e| match e {
        TrainError::Config(msg) if msg.starts_with("writing checkpoint") => {
            Failure::runtime(anyhow!(msg))
        }
        e => train_failure(e),
    })?;
    save_checkpoint(&trainer, &args.out).map_err(Failure::runtime)?;
    match last {
        Some(row) => println!(
            "trained to iteration {} (loss {:.6}); checkpoint {}, metrics {}",
            row.iteration,
            row.total,
            args.out.display(),
            metrics_path.display()
        ),
        None => println!(
            "no iterations run; checkpoint {} holds iteration {}",
            args.out.display(),
            trainer.iteration()
        ),
    }
    Ok(())
}

/// One line of the predictions file.
#[derive(Debug, Serialize)]
pub struct PredictionRecord<'a> {
    pub image_id: u64,
    pub human_id: u64,
    pub object_id: u64,
    pub human_box: [f64; 4],
    pub object_box: [f64; 4],
    pub object_class: u32,
    pub s_g: f64,
    pub s_l: &'a [f64],
    pub s_ho: &'a [f64],
    pub r: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<&'a [f64]>,
}

pub fn prediction_record(p: &PairPrediction) -> PredictionRecord<'_> {
    PredictionRecord {
        image_id: p.pair.image_id,
        human_id: p.pair.human_id,
        object_id: p.pair.object_id,
        human_box: p.pair.proposal.human.to_array(),
        object_box: p.pair.proposal.object.to_array(),
        object_class: p.pair.proposal.object_class,
        s_g: p.prediction.s_g,
        s_l: &p.prediction.s_l,
        s_ho: &p.prediction.s_ho,
        r: &p.prediction.r,
        beta: p.prediction.beta.as_deref(),
    }
}

fn write_predictions(path: &Path, preds: &[PairPrediction]) -> CmdResult {
    let records: Vec<PredictionRecord<'_>> = preds.iter().map(prediction_record).collect();
    let mut f = create(path)?;
    write_jsonl(&mut f, &records).map_err(Failure::runtime)?;
    f.flush()
        .context("writing predictions")
        .map_err(Failure::runtime)
}

pub fn evaluate(args: EvaluateArgs) -> CmdResult {
    let (ds, base) = load_data(&args.data)?;
    let model = load_model(&args.ckpt, &ds)?;
    let preds = predict_dataset(&model, &ds, Some(&base)).map_err(train_failure)?;
    let dets = detections(&preds);
    let gts = ground_truth_records(&ds).map_err(train_failure)?;
    let mut names = vec![String::new(); ds.num_actions()];
    for c in &ds.categories.actions {
        if let Some(slot) = names.get_mut(c.id as usize) {
            slot.clone_from(&c.name);
        }
    }
    let options = EvalOptions {
        threshold: args.thr,
        check_object_class: args.check_object_class,
    };
    let report = run_evaluation(&dets, &gts, options, &names).map_err(Failure::input)?;
    let json = serde_json::to_string_pretty(&report)
        .context("serialising report")
        .map_err(Failure::runtime)?;
    write_file(&args.report, format!("{json}\n").as_bytes())?;
    if let Some(p) = &args.detections {
        let mut f = create(p)?;
        write_jsonl(&mut f, &dets).map_err(Failure::runtime)?;
        f.flush()
            .context("writing detections")
            .map_err(Failure::runtime)?;
    }
    if let Some(p) = &args.predictions {
        write_predictions(p, &preds)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

pub fn predict(args: PredictArgs) -> CmdResult {
    let (ds, base) = load_data(&args.data)?;
    let model = load_model(&args.ckpt, &ds)?;
    let preds = match args.image {
        Some(id) => {
            let pixels =
                pmf_core::data::render_image(&ds, id, Some(&base)).map_err(Failure::input)?;
            let pairs = ds.pair_proposals(id).map_err(Failure::input)?;
            predict_image(&model, &pixels, pairs).map_err(train_failure)?
        }
        None => predict_dataset(&model, &ds, Some(&base)).map_err(train_failure)?,
    };
    write_predictions(&args.out, &preds)?;
    println!(
        "wrote {} predictions to {}",
        preds.len(),
        args.out.display()
    );
    Ok(())
}

pub fn init_config(args: InitConfigArgs) -> CmdResult {
    match &args.out {
        Some(p) => {
            write_file(p, DEFAULT_CONFIG_TOML.as_bytes())?;
            println!("wrote {}", p.display());
        }
        None => print!("{DEFAULT_CONFIG_TOML}"),
    }
    Ok(())
}
