//! `cgpn` command line: train, evaluate and inspect models.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad configuration or data
//! (including usage errors), 3 incompatible checkpoint or weights, 4 corrupt
//! checkpoint.

mod grid;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgpn::data::{make_synthetic, Dataset, Split, SyntheticSpec};
use cgpn::evaluation::rank_list;
use cgpn::partition::{enumerate_windows, Fraction};
use cgpn::trainer::{
    evaluate_model, load_model, open_dataset, DataConfig, EvalOptions, EvalSplit, Evaluation, CHECKPOINT_DIR,
    GRID_DIR, REPORT_DIR,
};
use cgpn::{Error, ErrorKind, TrainConfig, Trainer, Variant};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "cgpn", version, about = "Coarse-grained part network for person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints and a step log.
    Train(TrainArgs),
    /// Score a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Write top-k ranking grids for every query.
    Rank(RankArgs),
    /// Print the local windows enumerated over N strips.
    InspectPartition(PartitionArgs),
    /// Write the synthetic toy dataset as image folders.
    MakeToy(ToyArgs),
}

/// Where images come from when no config file supplies them.
#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    /// Dataset root with train/query/gallery folders.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Generated toy dataset, as IDS,IMAGES[,SEED].
    #[arg(long, value_parser = parse_synthetic)]
    synthetic: Option<SyntheticSpec>,
}

impl DataArgs {
    fn to_config(&self) -> Option<DataConfig> {
        match (&self.dataset, self.synthetic) {
            (Some(root), _) => Some(DataConfig {
                root: Some(root.clone()),
                synthetic: None,
            }),
            (None, Some(spec)) => Some(DataConfig {
                root: None,
                synthetic: Some(spec),
            }),
            (None, None) => None,
        }
    }
}

fn parse_synthetic(s: &str) -> Result<SyntheticSpec, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |p: &str| p.parse::<u64>().map_err(|_| format!("not a number: {p:?}"));
    match parts.as_slice() {
        [ids, imgs] => Ok(SyntheticSpec::new(num(ids)? as usize, num(imgs)? as usize, 0)),
        [ids, imgs, seed] => Ok(SyntheticSpec::new(num(ids)? as usize, num(imgs)? as usize, num(seed)?)),
        _ => Err("expected IDS,IMAGES[,SEED]".into()),
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// CGPN, CGPN-1, CGPN-2, CGPN-3 or CGPN-4.
    #[arg(long)]
    variant: Option<Variant>,
    /// Output directory for checkpoints, reports and the log.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Batch norm and ReLU after the global 1x1 convolutions.
    #[arg(long)]
    conv1x1_bn_relu: bool,
    /// Classifiers read pooled features instead of reduced ones.
    #[arg(long)]
    softmax_on_pooled: bool,
    /// Add the full-height window as a local feature.
    #[arg(long)]
    include_full_height: bool,
    /// Apply the triplet loss to local features as well.
    #[arg(long)]
    triplet_on_locals: bool,
    /// Average the supervision term over feature elements.
    #[arg(long)]
    mse_per_element: bool,
    /// Stride of the last backbone stage (1 or 2).
    #[arg(long)]
    last_stride: Option<usize>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Checkpoint to load.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Take the data source from this run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory; defaults to the run that holds the checkpoint.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Refuse checkpoints of any other variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Use the train split as both query and gallery.
    #[arg(long)]
    train_as_both: bool,
    /// L2-normalize embeddings before computing distances.
    #[arg(long)]
    l2_normalize: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[command(flatten)]
    score: ScoreArgs,
    /// Gallery entries shown per query.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Render at most this many queries.
    #[arg(long)]
    max_queries: Option<usize>,
}

#[derive(Args, Debug)]
struct PartitionArgs {
    /// Number of horizontal strips.
    #[arg(long, value_parser = parse_strips)]
    strips: usize,
    /// Print one JSON object per window instead of a table.
    #[arg(long)]
    json: bool,
}

fn parse_strips(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err("strip count must be an integer of at least 1".into()),
    }
}

#[derive(Args, Debug)]
struct ToyArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 4)]
    ids: usize,
    /// Train images per identity.
    #[arg(long, default_value_t = 4)]
    images: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Rank(a) => rank(a),
        Command::InspectPartition(a) => inspect_partition(a),
        Command::MakeToy(a) => make_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Input => 2,
        ErrorKind::Compatibility => 3,
        ErrorKind::Corruption => 4,
        ErrorKind::Runtime => 1,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Config(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> cgpn::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn train_config(a: &TrainArgs) -> cgpn::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = a.data.to_config() {
        cfg.data = d;
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(o) = &a.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.max_steps {
        cfg.schedule.max_steps = Some(n);
    }
    if let Some(s) = a.last_stride {
        cfg.model.last_stride = s;
    }
    let heads = &mut cfg.model.heads;
    heads.conv1x1_bn_relu |= a.conv1x1_bn_relu;
    heads.softmax_on_pooled |= a.softmax_on_pooled;
    heads.include_full_height |= a.include_full_height;
    cfg.loss.triplet_on_locals |= a.triplet_on_locals;
    cfg.loss.mse_per_element |= a.mse_per_element;
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> cgpn::Result<()> {
    let cfg = train_config(&a)?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_file(&out.join("config.toml"), &cfg.to_toml_string()?)?;
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let dataset = open_dataset(&cfg.data)?;
            Trainer::resume(cfg, dataset, ckpt)?
        }
        None => Trainer::new(cfg)?,
    };
    let summary = trainer.run()?;
    if let Some(last) = summary.records.last() {
        println!("step {} loss {:.4}", last.step, last.losses.total);
    }
    println!("final checkpoint: {}", summary.final_checkpoint.display());
    Ok(())
}

/// The run directory holding `checkpoints/<file>`, or the current directory.
fn default_output(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .filter(|d| d.file_name().is_some_and(|n| n == CHECKPOINT_DIR))
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn score_dataset(a: &ScoreArgs) -> cgpn::Result<Dataset> {
    let data = match (a.data.to_config(), &a.config) {
        (Some(d), _) => d,
        (None, Some(p)) => TrainConfig::load(p)?.data,
        (None, None) => return Err(Error::Config("give --dataset, --synthetic or --config".into())),
    };
    open_dataset(&data)
}

fn score(a: &ScoreArgs, dataset: &Dataset) -> cgpn::Result<(Evaluation, PathBuf)> {
    let model = load_model(&a.checkpoint, a.variant)?;
    let opts = EvalOptions {
        split: if a.train_as_both {
            EvalSplit::TrainAsBoth
        } else {
            EvalSplit::QueryGallery
        },
        l2_normalize: a.l2_normalize,
        expect_variant: a.variant,
        ..EvalOptions::default()
    };
    let evaluation = evaluate_model(&model, dataset, &opts)?;
    let out = a.output.clone().unwrap_or_else(|| default_output(&a.checkpoint));
    Ok((evaluation, out))
}

fn eval(a: EvalArgs) -> cgpn::Result<()> {
    let dataset = score_dataset(&a.score)?;
    let (ev, out) = score(&a.score, &dataset)?;
    let reports = out.join(REPORT_DIR);
    let json = serde_json::to_string_pretty(&ev.report).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&reports.join("metrics.json"), &(json + "\n"))?;
    write_file(&reports.join("metrics.txt"), &ev.report.to_table())?;
    let mut lines = String::new();
    for q in &ev.ranking.queries {
        let rec = &dataset.index.records()[ev.query[q.query]];
        let row = json!({
            "query": rec.path.file_name().map(|n| n.to_string_lossy()),
            "person_id": rec.person_id,
            "camera_id": rec.camera_id,
            "average_precision": q.average_precision,
            "first_match": q.first_match,
        });
        lines.push_str(&row.to_string());
        lines.push('\n');
    }
    write_file(&reports.join("per_query.jsonl"), &lines)?;
    print!("{}", ev.report.to_table());
    println!("report: {}", reports.join("metrics.json").display());
    Ok(())
}

fn rank(a: RankArgs) -> cgpn::Result<()> {
    let dataset = score_dataset(&a.score)?;
    if !a.score.train_as_both && dataset.index.split_indices(Split::Query).is_empty() {
        println!("query set is empty; nothing to rank");
        return Ok(());
    }
    let (ev, out) = score(&a.score, &dataset)?;
    let lists = rank_list(&ev.distances, &ev.query_meta, &ev.gallery_meta, &cgpn::EvalProtocol::default(), a.k as usize)?;
    let dir = out.join(GRID_DIR);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let limit = a.max_queries.unwrap_or(usize::MAX);
    let mut index = String::new();
    for (qi, list) in lists.iter().enumerate().take(limit) {
        let query_record = ev.query[qi];
        let gallery: Vec<(usize, bool)> = list.iter().map(|r| (ev.gallery[r.gallery], r.is_match)).collect();
        let img = grid::render_row(&dataset, query_record, &gallery, a.k as usize)?;
        let path = dir.join(format!("query_{qi:04}.png"));
        img.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        let name = |i: usize| dataset.index.records()[i].path.file_name().map(|n| n.to_string_lossy().into_owned());
        for (r, entry) in list.iter().enumerate() {
            let row = json!({
                "query": name(query_record),
                "rank": r + 1,
                "gallery": name(ev.gallery[entry.gallery]),
                "distance": entry.distance,
                "is_match": entry.is_match,
            });
            index.push_str(&row.to_string());
            index.push('\n');
        }
    }
    write_file(&dir.join("index.jsonl"), &index)?;
    println!("{} grids in {}", lists.len().min(limit), dir.display());
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn inspect_partition(a: PartitionArgs) -> cgpn::Result<()> {
    let n = a.strips;
    let windows = enumerate_windows(n, Fraction::HALF)?;
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    let res: std::io::Result<()> = (|| {
        if a.json {
            for win in &windows {
                let row = json!({
                    "start": win.start,
                    "length": win.length,
                    "strips": n,
                    "height_fraction": win.height_fraction(),
                });
                writeln!(w, "{row}")?;
            }
            return Ok(());
        }
        writeln!(w, "{n} strips, {} windows", windows.len())?;
        if windows.is_empty() {
            writeln!(w, "note: a single strip is the whole map, so no proper window exists")?;
            return Ok(());
        }
        writeln!(w, "{:>5} {:>6} {:>7} {:>9}", "start", "length", "strips", "fraction")?;
        for win in &windows {
            let g = gcd(win.length, n);
            let span = format!("{}-{}", win.start, win.start + win.length - 1);
            writeln!(
                w,
                "{:>5} {:>6} {:>7} {:>9}",
                win.start,
                win.length,
                span,
                format!("{}/{}", win.length / g, n / g)
            )?;
        }
        Ok(())
    })();
    res.map_err(|e| Error::Config(format!("stdout: {e}")))
}

fn make_toy(a: ToyArgs) -> cgpn::Result<()> {
    let dataset = make_synthetic(&SyntheticSpec::new(a.ids, a.images, a.seed))?;
    dataset.export(&a.output)?;
    println!("{} images written to {}", dataset.index.len(), a.output.display());
    Ok(())
}
