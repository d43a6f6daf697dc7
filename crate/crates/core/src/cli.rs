//! Command-line surface: training, evaluation, prediction with attention
//! dumps, ensemble workflows, and synthetic data generation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error, 3 data
//! error. Logs go to stderr; data goes to stdout or `--out`.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, read_train_meta, save_checkpoint, TrainMeta};
use crate::data::{compute_metrics, load_jsonl, Metrics};
use crate::ensemble::{
    collect_scores, ensemble_max, ensemble_mean, ensemble_vote, scores_from_csv, scores_to_csv,
    FourModels, ScoreQuadruple,
};
use crate::error::{Error, Result};
use crate::model::{Modalities, ModelConfig, ThreeBranchModel};
use crate::svm::{svm_predict, svm_train, SvmConfig};
use crate::synth::{gen_synthetic, write_synthetic, SynthSpec};
use crate::train::{evaluate, predict, prepare, train, vocab_from_posts, PreparedPost, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "avdet", version, about = "Multimodal antivaccine-post detection")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model (full three-branch or any modality subset).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Score an unlabeled stream, optionally dumping attention weights.
    Predict(PredictArgs),
    /// Train and compare the four-score ensemble (mean/max/vote/SVM).
    Ensemble(EnsembleArgs),
    /// Generate a synthetic multimodal dataset.
    Gensynth(GensynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Labeled JSONL dataset; split 7:1:2 internally.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and history.
    #[arg(long)]
    model_dir: PathBuf,
    /// Flat key=value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated branch subset: tag,caption,image.
    #[arg(long)]
    modalities: Option<String>,
    /// Drop the fused feature (ablation).
    #[arg(long)]
    no_fusion: bool,
    /// Fuse raw branch features without projection (ablation).
    #[arg(long)]
    no_projection: bool,
    /// Replace attention with unweighted means (ablation).
    #[arg(long)]
    no_attention: bool,
    /// Ignore OCR tokens (ablation).
    #[arg(long)]
    no_ocr: bool,
    /// Update the embedding table during training.
    #[arg(long)]
    train_embeddings: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Master seed for init, shuffling, and the split.
    #[arg(long)]
    seed: Option<u64>,
    /// Dropout rate inside the classifier head.
    #[arg(long)]
    dropout: Option<f64>,
    /// Split ratios as train,val,test.
    #[arg(long)]
    split: Option<String>,
    /// Initialize the embedding table's vocabulary vectors from an MMT1
    /// file (shape [vocab x embed_dim]) instead of random init.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Skip malformed dataset lines instead of failing.
    #[arg(long)]
    skip_bad: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Labeled JSONL dataset.
    #[arg(long)]
    data: PathBuf,
    /// Re-derive the checkpoint's test split from `--data` and evaluate on
    /// that subset only.
    #[arg(long)]
    use_test_split: bool,
    #[arg(long)]
    skip_bad: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSONL stream; labels are ignored when present.
    #[arg(long)]
    data: PathBuf,
    /// Write `id,probability,decision` CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-post attention weights as JSONL.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
    /// Aggregate decisions per `date` field into a CSV.
    #[arg(long)]
    daily_counts: Option<PathBuf>,
    #[arg(long)]
    skip_bad: bool,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    /// Checkpoint of the three-branch model.
    #[arg(long)]
    fused: Option<PathBuf>,
    /// Checkpoint of the image-only model.
    #[arg(long)]
    visual: Option<PathBuf>,
    /// Checkpoint of the caption-only model.
    #[arg(long)]
    textual: Option<PathBuf>,
    /// Checkpoint of the hashtag-only model.
    #[arg(long)]
    hashtag: Option<PathBuf>,
    /// Labeled JSONL dataset, split exactly as during member training.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Precomputed score CSV (id,s_F,s_V,s_C,s_H,label) instead of models.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Output directory for svm.json and score tables.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Fit the SVM on validation-split scores instead of training-split
    /// scores.
    #[arg(long)]
    ensemble_on_val: bool,
    /// Only apply the mean/max/vote rules; skip SVM training.
    #[arg(long)]
    rules_only: bool,
    #[arg(long)]
    svm_c: Option<f64>,
    #[arg(long)]
    svm_gamma: Option<f64>,
    /// Resolve equal-deviation vote ties toward non-antivaccine.
    #[arg(long)]
    tie_to_negative: bool,
}

#[derive(Debug, Args)]
struct GensynthArgs {
    /// Sample count (even, at least 8).
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Construction: uni (independent weak cues) or xor.
    #[arg(long, default_value = "uni")]
    spec: String,
    /// Cue flip probability for the uni construction.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Flat UTF-8 key=value file; keys use the long flag names.
struct ConfigFile(HashMap<String, String>);

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("{}: line {} is not key=value", path.display(), lineno + 1))
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(ConfigFile(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key}: cannot parse {raw:?}"))),
        }
    }
}

fn resolve<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str, default: T) -> Result<T> {
    Ok(match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(default),
    })
}

fn parse_ratios(s: &str) -> Result<(u32, u32, u32)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("split {s:?} must be three comma-separated integers")));
    }
    let num = |p: &str| {
        p.trim().parse::<u32>().map_err(|_| Error::Config(format!("bad split component {p:?}")))
    };
    Ok((num(parts[0])?, num(parts[1])?, num(parts[2])?))
}

pub fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Ensemble(args) => cmd_ensemble(args),
        Command::Gensynth(args) => cmd_gensynth(args),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let modalities = match args.modalities.or(file.0.get("modalities").cloned()) {
        Some(list) => Modalities::parse(&list)?,
        None => Modalities::all(),
    };
    let seed = resolve(args.seed, &file, "seed", 0)?;
    let split_ratios = parse_ratios(&resolve(args.split.clone(), &file, "split", "7,1,2".to_string())?)?;

    let mut config = ModelConfig { seed, modalities, ..ModelConfig::default() };
    config.ablation.no_fusion = args.no_fusion || file.get("no-fusion")?.unwrap_or(false);
    config.ablation.no_projection = args.no_projection || file.get("no-projection")?.unwrap_or(false);
    config.ablation.no_attention = args.no_attention || file.get("no-attention")?.unwrap_or(false);
    config.ablation.no_ocr = args.no_ocr || file.get("no-ocr")?.unwrap_or(false);
    config.train_embeddings = args.train_embeddings || file.get("train-embeddings")?.unwrap_or(false);
    config.dropout = resolve(args.dropout, &file, "dropout", config.dropout)?;
    if config.modalities.present().len() == 1
        && (config.ablation.no_fusion || config.ablation.no_projection)
    {
        return Err(Error::Config(
            "fusion/projection ablations conflict with a unimodal modality subset".into(),
        ));
    }

    let tc = TrainConfig {
        lr: resolve(args.lr, &file, "lr", 1e-4)?,
        batch_size: resolve(args.batch_size, &file, "batch-size", 32)?,
        epochs: resolve(args.epochs, &file, "epochs", 30)?,
        seed,
        ..TrainConfig::default()
    };

    let dataset = load_jsonl(&args.data, args.skip_bad)?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("{}: dataset is empty", args.data.display())));
    }
    let (train_set, val_set, _test) = crate::data::split(&dataset, split_ratios, seed)?;
    let root = args.data.parent().unwrap_or_else(|| Path::new("."));
    let train_posts: Vec<PreparedPost<f32>> = prepare(&train_set, root)?;
    let val_posts: Vec<PreparedPost<f32>> = prepare(&val_set, root)?;

    let vocab = vocab_from_posts(&train_set.posts, config.vocab_cap);
    let mut model = ThreeBranchModel::<f32>::init(config, vocab)?;
    if let Some(path) = &args.embeddings {
        let vectors: crate::tensor::Tensor<f32> = crate::tensor::io::read_mmt1(path)?;
        if vectors.shape() != model.table.vectors.shape() {
            return Err(Error::Config(format!(
                "embedding file {:?} has shape {:?}, table needs {:?}",
                path,
                vectors.shape(),
                model.table.vectors.shape()
            )));
        }
        model.table.vectors = vectors;
    }
    eprintln!(
        "training on {} samples (val {}), modalities {:?}",
        train_posts.len(),
        val_posts.len(),
        model.config.modalities.present()
    );
    let history = train(&mut model, &train_posts, &val_posts, &tc)?;

    let meta = TrainMeta {
        train: tc,
        data_path: args.data.display().to_string(),
        split_ratios,
        split_seed: seed,
    };
    save_checkpoint(&model, &args.model_dir, Some(serde_json::to_value(&meta)?))?;
    std::fs::write(args.model_dir.join("history.csv"), history.to_csv())?;

    let best = &history.epochs[history.best_epoch - 1];
    eprintln!(
        "done: best epoch {} val_acc {:.4} val_loss {:.4}",
        history.best_epoch, best.val_acc, best.val_loss
    );
    println!("{}", serde_json::to_string_pretty(&best)?);
    Ok(())
}

fn load_eval_posts(
    model_dir: &Path,
    data: &Path,
    use_test_split: bool,
    skip_bad: bool,
) -> Result<Vec<PreparedPost<f32>>> {
    let dataset = load_jsonl(data, skip_bad)?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("{}: dataset is empty", data.display())));
    }
    let root = data.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    if use_test_split {
        let meta = read_train_meta(model_dir)?.ok_or_else(|| {
            Error::Config("checkpoint has no training metadata; cannot re-derive the split".into())
        })?;
        let (_, _, test) = crate::data::split(&dataset, meta.split_ratios, meta.split_seed)?;
        prepare(&test, &root)
    } else {
        prepare(&dataset, &root)
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint::<f32>(&args.model)?;
    let posts = load_eval_posts(&args.model, &args.data, args.use_test_split, args.skip_bad)?;
    if posts.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let report = evaluate(&model, &posts)?;
    eprintln!("{}", report.metrics.table());
    println!("{}", serde_json::to_string_pretty(&report.metrics)?);
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let model = load_checkpoint::<f32>(&args.model)?;
    let dataset = load_jsonl(&args.data, args.skip_bad)?;
    let root = args.data.parent().unwrap_or_else(|| Path::new("."));
    let posts: Vec<PreparedPost<f32>> = prepare(&dataset, root)?;
    let predictions = predict(&model, &posts)?;

    let mut csv = String::from("id,probability,decision\n");
    for p in &predictions {
        let _ = writeln!(csv, "{},{:.6},{}", p.id, p.probability, p.decision);
    }
    match &args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }

    if let Some(path) = &args.dump_attention {
        let mut out = String::new();
        for p in &predictions {
            let record = serde_json::json!({
                "id": p.id,
                "probability": p.probability,
                "attention": p.trace,
            });
            let _ = writeln!(out, "{record}");
        }
        std::fs::write(path, out)?;
    }

    if let Some(path) = &args.daily_counts {
        let mut days: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for p in &predictions {
            if let Some(date) = &p.date {
                let e = days.entry(date.clone()).or_default();
                e.0 += 1;
                e.1 += p.decision as usize;
            }
        }
        let mut csv = String::from("date,total,antivaccine\n");
        for (date, (total, anti)) in days {
            let _ = writeln!(csv, "{date},{total},{anti}");
        }
        std::fs::write(path, csv)?;
    }
    Ok(())
}

fn rules_metrics(
    rows: &[(String, ScoreQuadruple, Option<u8>)],
    tie_to_negative: bool,
) -> Result<Vec<(&'static str, Metrics)>> {
    let labeled: Vec<(&ScoreQuadruple, u8)> =
        rows.iter().filter_map(|(_, q, l)| l.map(|l| (q, l))).collect();
    if labeled.is_empty() {
        return Err(Error::Data("score rows carry no labels".into()));
    }
    let labels: Vec<u8> = labeled.iter().map(|(_, l)| *l).collect();
    let mut out = Vec::new();
    for (name, rule) in [
        ("mean", ensemble_mean as fn(&ScoreQuadruple) -> u8),
        ("max", ensemble_max as fn(&ScoreQuadruple) -> u8),
    ] {
        let preds: Vec<u8> = labeled.iter().map(|(q, _)| rule(q)).collect();
        out.push((name, compute_metrics(&preds, &labels)?));
    }
    let preds: Vec<u8> = labeled.iter().map(|(q, _)| ensemble_vote(q, tie_to_negative)).collect();
    out.push(("vote", compute_metrics(&preds, &labels)?));
    Ok(out)
}

fn comparison_table(rows: &[(&str, Metrics)]) -> String {
    let mut out = String::from("method  accuracy  precision  recall  f1\n");
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{name:<6}  {:.4}    {:.4}     {:.4}  {:.4}",
            m.accuracy, m.precision, m.recall, m.f1
        );
    }
    out
}

fn cmd_ensemble(args: EnsembleArgs) -> Result<()> {
    if let Some(scores_path) = &args.scores {
        // precomputed quadruples: apply the rules directly
        let rows = scores_from_csv(scores_path)?;
        let mut csv = String::from("id,mean,max,vote\n");
        for (id, q, _) in &rows {
            let _ = writeln!(
                csv,
                "{id},{},{},{}",
                ensemble_mean(q),
                ensemble_max(q),
                ensemble_vote(q, args.tie_to_negative)
            );
        }
        print!("{csv}");
        if rows.iter().any(|(_, _, l)| l.is_some()) {
            let table = rules_metrics(&rows, args.tie_to_negative)?;
            eprintln!("{}", comparison_table(&table.iter().map(|(n, m)| (*n, m.clone())).collect::<Vec<_>>()));
        }
        if !args.rules_only {
            eprintln!("note: SVM training from a score CSV needs --data splits; ran rules only");
        }
        return Ok(());
    }

    let (fused_dir, data_path) = match (&args.fused, &args.data) {
        (Some(f), Some(d)) => (f, d),
        _ => {
            return Err(Error::Config(
                "ensemble needs either --scores or all four checkpoints plus --data".into(),
            ))
        }
    };
    let missing = [("visual", &args.visual), ("textual", &args.textual), ("hashtag", &args.hashtag)]
        .iter()
        .filter(|(_, p)| p.is_none())
        .map(|(n, _)| *n)
        .collect::<Vec<_>>();
    if !missing.is_empty() {
        return Err(Error::Config(format!("missing ensemble checkpoints: {}", missing.join(", "))));
    }

    let models = FourModels {
        fused: load_checkpoint::<f32>(fused_dir)?,
        visual: load_checkpoint::<f32>(args.visual.as_ref().unwrap())?,
        textual: load_checkpoint::<f32>(args.textual.as_ref().unwrap())?,
        hashtag: load_checkpoint::<f32>(args.hashtag.as_ref().unwrap())?,
    };
    let meta = read_train_meta(fused_dir)?.ok_or_else(|| {
        Error::Config("fused checkpoint has no training metadata for the data split".into())
    })?;
    let dataset = load_jsonl(data_path, false)?;
    let (train_set, val_set, test_set) =
        crate::data::split(&dataset, meta.split_ratios, meta.split_seed)?;
    let root = data_path.parent().unwrap_or_else(|| Path::new("."));
    let fit_set = if args.ensemble_on_val { &val_set } else { &train_set };
    let fit_posts: Vec<PreparedPost<f32>> = prepare(fit_set, root)?;
    let test_posts: Vec<PreparedPost<f32>> = prepare(&test_set, root)?;

    eprintln!(
        "collecting scores: fit on {} {} samples, test on {}",
        fit_posts.len(),
        if args.ensemble_on_val { "validation" } else { "training" },
        test_posts.len()
    );
    let fit_rows = collect_scores(&models, &fit_posts)?;
    let test_rows = collect_scores(&models, &test_posts)?;

    let mut table = rules_metrics(&test_rows, args.tie_to_negative)?
        .into_iter()
        .map(|(n, m)| (n, m))
        .collect::<Vec<_>>();

    let mut svm_model = None;
    if !args.rules_only {
        let features: Vec<[f64; 4]> = fit_rows.iter().map(|(_, q, _)| q.as_array()).collect();
        let labels: Vec<u8> = fit_rows
            .iter()
            .map(|(_, _, l)| l.ok_or_else(|| Error::Data("fit split has unlabeled posts".into())))
            .collect::<Result<_>>()?;
        let cfg = SvmConfig { c: args.svm_c.unwrap_or(1.0), gamma: args.svm_gamma, ..Default::default() };
        let model = svm_train(&features, &labels, &cfg)?;
        let preds: Vec<u8> =
            test_rows.iter().map(|(_, q, _)| svm_predict(&model, &q.as_array()).0).collect();
        let labels: Vec<u8> = test_rows.iter().filter_map(|(_, _, l)| *l).collect();
        table.push(("svm", compute_metrics(&preds, &labels)?));
        svm_model = Some(model);
    }

    println!("{}", comparison_table(&table));
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("scores_fit.csv"), scores_to_csv(&fit_rows))?;
        std::fs::write(dir.join("scores_test.csv"), scores_to_csv(&test_rows))?;
        if let Some(model) = &svm_model {
            model.save_json(dir.join("svm.json"))?;
        }
        let json: Vec<serde_json::Value> = table
            .iter()
            .map(|(n, m)| serde_json::json!({ "method": n, "metrics": m }))
            .collect();
        std::fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&json)?)?;
    }
    Ok(())
}

fn cmd_gensynth(args: GensynthArgs) -> Result<()> {
    let spec = SynthSpec::parse(&args.spec, args.noise)?;
    let out = gen_synthetic(args.n, args.seed, spec)?;
    let jsonl = write_synthetic(&out, &args.out_dir)?;
    // generated data must load back through the validating loader
    let loaded = load_jsonl(&jsonl, false)?;
    debug_assert_eq!(loaded.len(), out.dataset.len());
    eprintln!("wrote {} posts to {}", out.dataset.len(), jsonl.display());
    Ok(())
}
