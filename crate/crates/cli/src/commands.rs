use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clasp::config::{
    apply_extract, apply_hyper, apply_synth, apply_train, extract_to_kv, hyper_to_kv, parse_anchor_modality,
    synth_to_kv, train_to_kv, KeyValues,
};
use clasp::data::{load_records, pad_or_clip, synthesize_dataset, write_feature_file, write_manifest, SynthConfig, VideoRecord};
use clasp::eval::{
    extract_intervals, mean_ap, read_detections, write_anchors, write_detections, write_loss_curve, write_report,
    AnchorRow, ExtractConfig, VideoTruth, TIOU_THRESHOLDS,
};
use clasp::model::{identify_global_anchors, infer, HyperParams};
use clasp::train::{examples_from_records, read_checkpoint, write_checkpoint, TrainConfig, Trainer};

use crate::failure::{io, require_file, Failure};
use crate::run_manifest::RunManifest;

/// Flags every subcommand takes.
#[derive(clap::Args, Debug)]
pub struct Common {
    /// Key-value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides one configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl Common {
    /// The config file with `--set` overrides applied on top.
    fn resolve(&self) -> Result<KeyValues, Failure> {
        let mut kv = match &self.config {
            Some(p) => {
                require_file(p, "config")?;
                let text = fs::read_to_string(p).map_err(io(p))?;
                KeyValues::parse(&text)?
            }
            None => KeyValues::default(),
        };
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    fn out_dir(&self) -> Result<&Path, Failure> {
        fs::create_dir_all(&self.out).map_err(io(&self.out))?;
        Ok(&self.out)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(io(path))
}

/// Train/val/test sizes in 3:1:1 proportion, rounded to whole videos.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.6).round() as usize;
    let val = ((n as f64 * 0.2).round() as usize).min(n - train);
    (train, val, n - train - val)
}

pub fn gen(common: &Common) -> Result<(), Failure> {
    let kv = common.resolve()?;
    let mut cfg = SynthConfig::default();
    apply_synth(&mut cfg, &kv)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let records = synthesize_dataset(&cfg)?;

    let out = common.out_dir()?;
    let features = out.join("features");
    fs::create_dir_all(&features).map_err(io(&features))?;
    let mut entries = Vec::with_capacity(records.len());
    for rec in &records {
        let path = features.join(format!("{}.clsp", rec.id));
        fs::write(&path, write_feature_file(rec)).map_err(io(&path))?;
        entries.push(format!("features/{}.clsp", rec.id));
    }
    let names: Vec<String> = (0..cfg.num_classes).map(|c| format!("event{c}")).collect();
    let (n_train, n_val, _) = split_sizes(entries.len());
    let splits = [
        ("all", &entries[..]),
        ("train", &entries[..n_train]),
        ("val", &entries[n_train..n_train + n_val]),
        ("test", &entries[n_train + n_val..]),
    ];

    let mut run = RunManifest::start("gen");
    for (name, list) in splits {
        let path = out.join(format!("{name}.txt"));
        write_manifest(&path, list, &names)?;
        run.output(name, &path);
    }
    let mut resolved = KeyValues::default();
    synth_to_kv(&cfg, &mut resolved);
    run.seed(cfg.seed);
    run.config(resolved);
    run.write(&out.join("run.json"))?;
    println!("wrote {} videos to {}", records.len(), out.display());
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest to train on.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Drop global anchors.
    #[arg(long)]
    pub ablate_gai: bool,
    /// Drop local anchors.
    #[arg(long)]
    pub ablate_lai: bool,
    /// Skip anchor propagation entirely.
    #[arg(long)]
    pub ablate_anchors: bool,
    /// Modalities whose anchors are fused: audio, visual or both.
    #[arg(long, value_name = "MODALITY")]
    pub anchors: Option<String>,
}

impl TrainArgs {
    fn changes_model(&self) -> bool {
        self.ablate_gai || self.ablate_lai || self.ablate_anchors || self.anchors.is_some()
    }
}

/// Fills data-dependent sizes, rejecting explicit settings that disagree.
fn fit_to_data(hp: &mut HyperParams, kv: &KeyValues, first: &VideoRecord) -> Result<(), Failure> {
    let dims = [
        ("model.audio_dim", &mut hp.audio_dim, first.audio.cols()),
        ("model.visual_dim", &mut hp.visual_dim, first.visual.cols()),
        ("model.num_classes", &mut hp.num_classes, first.num_classes()),
    ];
    for (key, slot, actual) in dims {
        if kv.get(key).is_some() && *slot != actual {
            return Err(Failure::Usage(format!("{key} = {} but the data has {actual}", *slot)));
        }
        *slot = actual;
    }
    Ok(())
}

pub fn train(common: &Common, args: &TrainArgs) -> Result<(), Failure> {
    require_file(&args.manifest, "manifest")?;
    let kv = common.resolve()?;
    let (_, records) = load_records(&args.manifest)?;
    let first = records
        .first()
        .ok_or_else(|| Failure::Data(format!("{} lists no videos", args.manifest.display())))?;

    let mut run = RunManifest::start("train");
    run.input("manifest", &args.manifest);
    let mut trainer = match &args.resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            if args.changes_model() {
                return Err(Failure::Usage("model flags cannot change a resumed run".into()));
            }
            let bytes = fs::read(path).map_err(io(path))?;
            let mut trainer = Trainer::from_checkpoint(read_checkpoint(&bytes)?)?;
            if let Some(e) = kv.get("train.epochs") {
                trainer.config.epochs = e
                    .parse()
                    .map_err(|err| Failure::Usage(format!("train.epochs: {err}")))?;
            }
            run.input("resume", path);
            trainer
        }
        None => {
            let mut hp = HyperParams::default();
            apply_hyper(&mut hp, &kv)?;
            fit_to_data(&mut hp, &kv, first)?;
            hp.ablation.global_anchors &= !args.ablate_gai;
            hp.ablation.local_anchors &= !args.ablate_lai;
            hp.ablation.anchor_bypass |= args.ablate_anchors;
            if let Some(m) = &args.anchors {
                hp.ablation.anchor_modality = parse_anchor_modality(m)?;
            }
            let mut tc = TrainConfig::default();
            apply_train(&mut tc, &kv)?;
            if let Some(seed) = common.seed {
                tc.seed = seed;
            }
            Trainer::new(hp, tc)?
        }
    };
    if first.num_classes() != trainer.hp.num_classes || first.audio.cols() != trainer.hp.audio_dim {
        return Err(Failure::Data("checkpoint and manifest disagree on feature or category sizes".into()));
    }

    let out = common.out_dir()?.to_path_buf();
    let examples = examples_from_records(&records, trainer.hp.max_len);
    let every = trainer.config.checkpoint_every;
    trainer.fit(&examples, |t| {
        if every > 0 && t.epoch % every == 0 {
            let path = out.join(format!("checkpoint-{:04}.clsw", t.epoch));
            fs::write(&path, write_checkpoint(&t.checkpoint())).map_err(|source| clasp::train::TrainError::Io {
                path: path.clone(),
                source,
            })?;
        }
        Ok(())
    })?;

    let model = out.join("model.clsw");
    fs::write(&model, write_checkpoint(&trainer.checkpoint())).map_err(io(&model))?;
    let loss = out.join("loss.csv");
    write_loss_curve(create(&loss)?, &trainer.loss_curve)?;

    let mut resolved = KeyValues::default();
    hyper_to_kv(&trainer.hp, &mut resolved);
    train_to_kv(&trainer.config, &mut resolved);
    run.seed(trainer.config.seed);
    run.config(resolved);
    run.output("checkpoint", &model);
    run.output("loss_curve", &loss);
    run.write(&out.join("run.json"))?;
    if let Some(last) = trainer.loss_curve.last() {
        println!("epoch {} mean loss {last:.6}", trainer.epoch);
    }
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

pub fn predict(common: &Common, args: &PredictArgs) -> Result<(), Failure> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_file(&args.manifest, "manifest")?;
    let kv = common.resolve()?;
    let bytes = fs::read(&args.checkpoint).map_err(io(&args.checkpoint))?;
    let ck = read_checkpoint(&bytes)?;
    let hp = ck.hp;
    let mut ecfg = ExtractConfig {
        pool: hp.mil_pool,
        ..ExtractConfig::default()
    };
    apply_extract(&mut ecfg, &kv)?;

    let (_, records) = load_records(&args.manifest)?;
    let mut detections = Vec::new();
    let mut anchors = Vec::new();
    for rec in &records {
        if rec.audio.cols() != hp.audio_dim || rec.visual.cols() != hp.visual_dim || rec.num_classes() != hp.num_classes {
            return Err(Failure::Data(format!(
                "{}: features {}/{} with {} categories, checkpoint expects {}/{} with {}",
                rec.id,
                rec.audio.cols(),
                rec.visual.cols(),
                rec.num_classes(),
                hp.audio_dim,
                hp.visual_dim,
                hp.num_classes
            )));
        }
        let padded = pad_or_clip(rec, hp.max_len);
        let inf = infer(&ck.params, &hp, &padded.input)?;
        detections.extend(extract_intervals(&rec.id, &inf.outputs.p_av, &padded.input.valid, &ecfg)?);
        let score = &inf.agreement.score;
        for (rank, t) in identify_global_anchors(score, &padded.input.valid, hp.global_anchors).into_iter().enumerate() {
            anchors.push(AnchorRow {
                video_id: rec.id.clone(),
                rank,
                t,
                score: score[t],
            });
        }
    }

    let out = common.out_dir()?;
    let det_path = out.join("detections.csv");
    write_detections(create(&det_path)?, &detections)?;
    let anchor_path = out.join("anchors.csv");
    write_anchors(create(&anchor_path)?, &anchors)?;

    let mut run = RunManifest::start("predict");
    let mut resolved = KeyValues::default();
    hyper_to_kv(&hp, &mut resolved);
    extract_to_kv(&ecfg, &mut resolved);
    run.config(resolved);
    if let Some(seed) = common.seed {
        run.seed(seed);
    }
    run.input("checkpoint", &args.checkpoint);
    run.input("manifest", &args.manifest);
    run.output("detections", &det_path);
    run.output("anchors", &anchor_path);
    run.write(&out.join("run.json"))?;
    println!("{} detections over {} videos", detections.len(), records.len());
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    /// Detections CSV written by `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Manifest holding the ground truth.
    #[arg(long)]
    pub manifest: PathBuf,
}

pub fn eval(common: &Common, args: &EvalArgs) -> Result<(), Failure> {
    require_file(&args.predictions, "predictions")?;
    require_file(&args.manifest, "manifest")?;
    let file = File::open(&args.predictions).map_err(io(&args.predictions))?;
    let detections = read_detections(file)?;
    let (manifest, records) = load_records(&args.manifest)?;
    let truth: Vec<VideoTruth> = records
        .iter()
        .map(|r| VideoTruth {
            video_id: r.id.clone(),
            gt: r.gt.clone(),
        })
        .collect();
    let report = mean_ap(&detections, &truth, manifest.num_classes(), &TIOU_THRESHOLDS)?;

    let out = common.out_dir()?;
    let path = out.join("report.csv");
    write_report(create(&path)?, &report, &manifest.categories)?;
    let mut run = RunManifest::start("eval");
    if let Some(seed) = common.seed {
        run.seed(seed);
    }
    run.input("predictions", &args.predictions);
    run.input("manifest", &args.manifest);
    run.output("report", &path);
    run.write(&out.join("run.json"))?;
    let cols: Vec<String> = report.map.iter().map(|m| format!("{m:.4}")).collect();
    println!("mAP {} avg {:.4}", cols.join(" "), report.avg);
    Ok(())
}
