use std::borrow::Cow;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recomp::config::{RunConfig, DOCUMENTED_DEFAULTS};
use recomp::evaluation::{
    export_embeddings, group_error, ink_mask, magnitude_r2, make_probes, mass_in_mask, nn_complete,
    octant_accuracy, read_embeddings, saliency, summarize_nn, write_saliency_bin,
    write_saliency_png, ExportItem, GroupErrorReport, MotionSummary, SaliencySource,
};
use recomp::imaging::store::{
    open_dataset, write_dataset, write_dataset_with, write_json_atomic, DiskSequence,
};
use recomp::imaging::{FrameSequence, GrayImage};
use recomp::ingestion::{detect_cuts, load_sequence, FrameSource};
use recomp::model::{load_checkpoint, InputMode, Model};
use recomp::training::{train, DataSplit, TrainOptions, TrainingSet};
use serde::Serialize;

use crate::manifest::RunRecorder;
use crate::{
    Command, EmbedArgs, EvalArgs, GenerateArgs, IngestArgs, InputArg, ModelArgs, NnArgs, OutArgs,
    SaliencyArgs, SourceArg, TrainArgs,
};

/// Shot boundaries of an ingested dataset, one list per sequence.
pub const CUTS_FILE: &str = "cuts.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(recomp::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<recomp::Error> for CliError {
    fn from(e: recomp::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// 2 usage, 3 data or checkpoint, 4 numerical divergence.
    pub fn exit_code(&self) -> u8 {
        use recomp::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::InvalidInput(_) | E::Config(_)) => 2,
            CliError::Core(E::Divergence { .. } | E::UndefinedDistance) => 4,
            CliError::Core(
                E::Io { .. }
                | E::Corrupt { .. }
                | E::VersionMismatch { .. }
                | E::Image { .. }
                | E::Json(_),
            ) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(recomp::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Config => {
            print!("{DOCUMENTED_DEFAULTS}");
            Ok(())
        }
        Command::Generate(a) => generate(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Saliency(a) => saliency_cmd(a),
        Command::Embed(a) => embed(a),
        Command::Nn(a) => nn(a),
    }
}

/// Creates the output directory, refusing to reuse a non-empty one unless forced.
fn prepare_out(o: &OutArgs) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(&o.out) {
        if entries.next().is_some() && !o.force {
            return Err(usage(format!(
                "output directory {} is not empty; pass --force to write into it",
                o.out.display()
            )));
        }
    } else if o.out.exists() {
        return Err(usage(format!(
            "{} exists and is not a directory",
            o.out.display()
        )));
    }
    fs::create_dir_all(&o.out).map_err(|e| io_err(&o.out, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn finalize(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    Ok(cfg.to_toml_string()?)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    if let Some(c) = a.count {
        if c == 0 {
            return Err(usage("--count must be at least 1"));
        }
        cfg.data.count = c;
    }
    if let Some(f) = a.frames {
        cfg.data.num_frames = f;
    }
    let text = finalize(&cfg)?;
    prepare_out(&a.out)?;
    let out = &a.out.out;
    let mut rec = RunRecorder::start("generate", out, &text, Some(cfg.data.seed))?;
    let clips = cfg.data.build_clips()?;
    // clips are rendered one at a time as they are written
    let m = write_dataset_with(
        out,
        Some(cfg.data.seed),
        clips.iter().map(|c| {
            c.render()
                .map(|(s, p)| (Cow::Owned(s), Some(Cow::Owned(p))))
        }),
    )?;
    rec.output(out.join(recomp::imaging::store::MANIFEST_FILE));
    for f in &m.files {
        rec.output(out.join(f));
    }
    rec.finish(out)?;
    println!("wrote {} sequences to {}", m.sequence_count, out.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    if a.stride == 0 {
        return Err(usage("--stride must be at least 1"));
    }
    prepare_out(&a.out)?;
    let out = &a.out.out;
    let text = format!(
        "# ingest settings\npattern = {:?}\nstride = {}\nresize = [{}, {}]\ncut_threshold = {}\n{}",
        a.pattern,
        a.stride,
        a.resize.0,
        a.resize.1,
        a.cut_threshold,
        a.crop
            .map(|c| format!("crop = [{}, {}, {}, {}]\n", c.0, c.1, c.2, c.3))
            .unwrap_or_default()
    );
    let mut rec = RunRecorder::start("ingest", out, &text, None)?;
    let mut seqs = Vec::new();
    let mut cuts = Vec::new();
    for dir in &a.inputs {
        let mut src = FrameSource::new(dir, a.pattern.clone())
            .with_stride(a.stride)
            .with_resize(a.resize.0, a.resize.1);
        if let Some(c) = a.crop {
            src = src.with_crop(c);
        }
        let s = load_sequence(&src)?;
        cuts.push(detect_cuts(&s, a.cut_threshold)?);
        seqs.push(s);
    }
    let m = write_dataset(out, None, seqs.iter().map(|s| (s, None)))?;
    write_json_atomic(&out.join(CUTS_FILE), &cuts)?;
    rec.output(out.join(recomp::imaging::store::MANIFEST_FILE));
    rec.output(out.join(CUTS_FILE));
    for f in &m.files {
        rec.output(out.join(f));
    }
    rec.finish(out)?;
    println!(
        "wrote {} sequences ({} cuts) to {}",
        m.sequence_count,
        cuts.iter().map(Vec::len).sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn read_cuts(dir: &Path, n: usize) -> Result<Vec<Vec<usize>>> {
    let p = dir.join(CUTS_FILE);
    if !p.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
    let cuts: Vec<Vec<usize>> = serde_json::from_str(&text).map_err(recomp::Error::from)?;
    if cuts.len() != n {
        return Err(CliError::Core(recomp::Error::Corrupt {
            path: p,
            reason: format!("{} cut lists for {n} sequences", cuts.len()),
        }));
    }
    Ok(cuts)
}

fn check_frame_size(spec_size: (usize, usize), seqs: &[DiskSequence]) -> Result<()> {
    if let Some(s) = seqs.first() {
        let (w, h) = s.frame_size();
        if (h, w) != spec_size {
            return Err(usage(format!(
                "dataset frames are {w}x{h} but the model expects {}x{}",
                spec_size.1, spec_size.0
            )));
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch_sequences = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.threads {
        cfg.train.threads = v;
    }
    if a.deterministic {
        cfg.train.threads = 1;
    }
    if let Some(i) = a.input {
        cfg.model.input_mode = match i {
            InputArg::Pair => InputMode::ImagePair,
            InputArg::Single => InputMode::SingleImage,
        };
    }
    let text = finalize(&cfg)?;
    let spec = cfg.model.spec()?;
    let (_, seqs) = open_dataset(&a.data)?;
    check_frame_size(spec.input_size, &seqs)?;
    let cuts = read_cuts(&a.data, seqs.len())?;
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    prepare_out(&a.out)?;
    let out = &a.out.out;
    let mut rec = RunRecorder::start("train", out, &text, Some(cfg.train.seed))?;

    let refs: Vec<&dyn FrameSequence> = seqs.iter().map(|s| s as &dyn FrameSequence).collect();
    let mut data = TrainingSet::new(refs);
    if !cuts.is_empty() {
        data = data.with_cuts(cuts)?;
    }
    let metrics_path = out.join("metrics.jsonl");
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let ckpt = out.join("model.ckpt");
    let mut progress = |m: &recomp::training::EpochMetrics| {
        eprintln!(
            "epoch {:>3}  lr {:.1e}  loss {:.4}  val equiv {}  val ineq {}  {:.0}s",
            m.epoch,
            m.lr,
            m.loss,
            fmt_opt(m.val_equiv),
            fmt_opt(m.val_ineq),
            m.wall_time_s
        );
    };
    let result = train(
        &data,
        &spec,
        &cfg.train,
        &cfg.sampler,
        TrainOptions {
            resume,
            checkpoint_path: Some(ckpt.clone()),
            metrics_log: Some(&mut log),
            on_epoch: Some(&mut progress),
        },
    );
    log.flush().map_err(|e| io_err(&metrics_path, e))?;
    rec.output(metrics_path);
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            if let recomp::Error::Divergence {
                checkpoint: Some(p),
                ..
            } = &e
            {
                rec.output(p.clone());
            }
            rec.finish(out)?;
            return Err(e.into());
        }
    };
    recomp::model::save_checkpoint(&outcome.state, &ckpt)?;
    let split_path = out.join("split.json");
    write_json_atomic(&split_path, &outcome.split)?;
    rec.output(ckpt);
    rec.output(split_path);
    rec.finish(out)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// A loaded checkpoint plus the evaluation sequences it should see.
struct Loaded {
    cfg: RunConfig,
    text: String,
    model: Model<f32>,
    seqs: Vec<DiskSequence>,
}

fn load_for_eval(m: &ModelArgs) -> Result<Loaded> {
    let cfg = load_config(m.config.as_deref())?;
    let text = finalize(&cfg)?;
    let model = load_checkpoint(&m.checkpoint)?.model()?;
    let (_, mut seqs) = open_dataset(&m.data)?;
    check_frame_size(model.spec().input_size, &seqs)?;
    if let Some(p) = &m.split {
        let t = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let split: DataSplit = serde_json::from_str(&t).map_err(recomp::Error::from)?;
        if split.holdout.iter().any(|&i| i >= seqs.len()) {
            return Err(usage("split.json does not belong to this dataset"));
        }
        let keep: std::collections::BTreeSet<usize> = split.holdout.into_iter().collect();
        seqs = seqs
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, s)| s)
            .collect();
    }
    if seqs.is_empty() {
        return Err(usage("no sequences to evaluate"));
    }
    prepare_out(&m.out)?;
    Ok(Loaded {
        cfg,
        text,
        model,
        seqs,
    })
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: &'a Path,
    #[serde(flatten)]
    report: &'a GroupErrorReport,
    no_separation: bool,
}

fn eval(a: EvalArgs) -> Result<()> {
    let l = load_for_eval(&a.model)?;
    let out = &a.model.out.out;
    let mut rec = RunRecorder::start("eval", out, &l.text, Some(a.model.seed))?;
    let refs: Vec<&dyn FrameSequence> = l.seqs.iter().map(|s| s as &dyn FrameSequence).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(a.model.seed);
    let report = group_error(
        &l.model,
        &refs,
        a.tuples,
        &l.cfg.sampler,
        l.cfg.train.margin,
        l.cfg.train.distance,
        &mut rng,
    )?;
    let path = out.join("eval.json");
    write_json_atomic(
        &path,
        &EvalReport {
            checkpoint: &a.model.checkpoint,
            report: &report,
            no_separation: report.no_separation(),
        },
    )?;
    rec.output(path);
    rec.finish(out)?;
    println!(
        "equiv {:.4}  ineq {:.4}  chance {:.4}  ratio {:.4}{}",
        report.equiv_error,
        report.ineq_error,
        report.chance_baseline,
        report.ratio,
        if report.no_separation() {
            "  (no separation)"
        } else {
            ""
        }
    );
    Ok(())
}

#[derive(Serialize)]
struct SaliencyEntry {
    sequence: String,
    frame: usize,
    step: Option<usize>,
    mass_in_mask: f64,
    file: PathBuf,
}

#[derive(Serialize)]
struct SaliencyReport {
    source: SaliencySource,
    threshold: f32,
    radius: usize,
    mean_mass_in_mask: f64,
    maps: Vec<SaliencyEntry>,
}

fn saliency_cmd(a: SaliencyArgs) -> Result<()> {
    let l = load_for_eval(&a.model)?;
    let out = &a.model.out.out;
    let mut rec = RunRecorder::start("saliency", out, &l.text, None)?;
    let source = match a.source {
        SourceArg::Spatial => SaliencySource::Spatial,
        SourceArg::Temporal => SaliencySource::Temporal,
    };
    let mut entries = Vec::new();
    for seq in l.seqs.iter().take(a.sequences) {
        let n = a.length.min(seq.len());
        let frames = (0..n)
            .map(|i| seq.frame(i))
            .collect::<recomp::Result<Vec<_>>>()?;
        let refs: Vec<&GrayImage> = frames.iter().map(|f| f.as_ref()).collect();
        for map in saliency(&l.model, &refs, source)? {
            let mask = ink_mask(refs[map.frame], a.threshold, a.radius);
            let stem = match map.step {
                Some(s) => format!("{}_step{s}_frame{}", seq.source_id(), map.frame),
                None => format!("{}_frame{}", seq.source_id(), map.frame),
            };
            let file = out.join(format!("{stem}.bin"));
            write_saliency_bin(&map, &file)?;
            rec.output(file.clone());
            if a.png {
                let png = out.join(format!("{stem}.png"));
                write_saliency_png(&map, &png)?;
                rec.output(png);
            }
            entries.push(SaliencyEntry {
                sequence: seq.source_id().to_string(),
                frame: map.frame,
                step: map.step,
                mass_in_mask: mass_in_mask(&map, &mask)?,
                file,
            });
        }
    }
    let mean = entries.iter().map(|e| e.mass_in_mask).sum::<f64>() / entries.len().max(1) as f64;
    let path = out.join("saliency.json");
    write_json_atomic(
        &path,
        &SaliencyReport {
            source,
            threshold: a.threshold,
            radius: a.radius,
            mean_mass_in_mask: mean,
            maps: entries,
        },
    )?;
    rec.output(path);
    rec.finish(out)?;
    println!("mean saliency mass inside the dilated ink mask: {mean:.3}");
    Ok(())
}

#[derive(Serialize)]
struct Readout {
    rows: usize,
    octant_accuracy: Option<f64>,
    magnitude_r2: Option<f64>,
}

fn embed(a: EmbedArgs) -> Result<()> {
    let l = load_for_eval(&a.model)?;
    let out = &a.model.out.out;
    let mut rec = RunRecorder::start("embed", out, &l.text, None)?;
    let min = l.model.spec().input_mode.min_frames();
    let path = out.join("embeddings.csv");
    let mut count = 0;
    // stream in blocks so only one block of frames is resident
    let mut block_paths = Vec::new();
    for (b, block) in l.seqs.chunks(256).enumerate() {
        let mut frames = Vec::with_capacity(block.len());
        let mut motions = Vec::with_capacity(block.len());
        for seq in block {
            let n = a.length.unwrap_or(seq.len()).min(seq.len());
            if n < min {
                return Err(usage(format!(
                    "--length {n} is below the model minimum of {min}"
                )));
            }
            frames.push(
                (0..n)
                    .map(|i| seq.frame(i))
                    .collect::<recomp::Result<Vec<_>>>()?,
            );
            motions.push(
                seq.poses()
                    .map(|p| MotionSummary::from_pose(&p[0].inverse().compose(&p[n - 1]))),
            );
        }
        let items: Vec<ExportItem<'_>> = block
            .iter()
            .zip(&frames)
            .zip(motions)
            .map(|((seq, f), motion)| ExportItem {
                id: seq.source_id().to_string(),
                frames: f.iter().map(|c| c.as_ref()).collect(),
                motion,
            })
            .collect();
        let part = out.join(format!("embeddings.part{b}.csv"));
        count += export_embeddings(&l.model, &items, &part)?;
        block_paths.push(part);
    }
    concat_csv(&block_paths, &path)?;
    rec.output(path.clone());
    let rows = read_embeddings(&path)?;
    let readout = Readout {
        rows: count,
        octant_accuracy: octant_accuracy(&rows).ok(),
        magnitude_r2: magnitude_r2(&rows).ok(),
    };
    let rp = out.join("readout.json");
    write_json_atomic(&rp, &readout)?;
    rec.output(rp);
    rec.finish(out)?;
    println!(
        "{} embeddings; octant accuracy {}; magnitude R² {}",
        count,
        fmt_opt(readout.octant_accuracy),
        fmt_opt(readout.magnitude_r2)
    );
    Ok(())
}

/// Joins CSV parts that share a header, removing the parts.
fn concat_csv(parts: &[PathBuf], dest: &Path) -> Result<()> {
    let mut out = String::new();
    for (i, p) in parts.iter().enumerate() {
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let body = if i == 0 {
            text.as_str()
        } else {
            text.split_once('\n').map(|x| x.1).unwrap_or("")
        };
        out.push_str(body);
        fs::remove_file(p).map_err(|e| io_err(p, e))?;
    }
    recomp::imaging::store::write_atomic(dest, out.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct NnReport<'a> {
    skip: usize,
    summary: recomp::evaluation::NnSummary,
    results: &'a [recomp::evaluation::NnCompletionResult],
}

fn nn(a: NnArgs) -> Result<()> {
    if a.skip == 0 {
        return Err(usage("--skip must be at least 1"));
    }
    let l = load_for_eval(&a.model)?;
    let out = &a.model.out.out;
    let mut rec = RunRecorder::start("nn", out, &l.text, Some(a.model.seed))?;
    let refs: Vec<&dyn FrameSequence> = l
        .seqs
        .iter()
        .take(a.sequences)
        .map(|s| s as &dyn FrameSequence)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(a.model.seed);
    let probes = make_probes(&refs, a.probes_per_sequence, a.skip, &mut rng)?;
    if probes.is_empty() {
        return Err(usage(format!(
            "no sequence is longer than {} frames",
            2 * a.skip
        )));
    }
    let results = nn_complete(
        &l.model,
        &refs,
        &probes,
        a.out_per_sequence,
        l.cfg.train.distance,
        &mut rng,
    )?;
    let summary = summarize_nn(&results)?;
    let csv_path = out.join(format!("nn_skip{}.csv", a.skip));
    let mut rows = String::from(
        "probe_id,skip,distance_true_middle,min_distance_same_sequence_others,\
         min_distance_out_of_sequence,rank_of_true,candidates,pixel_true_middle,\
         pixel_min_same_sequence_others,pixel_min_out_of_sequence\n",
    );
    for r in &results {
        rows.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.probe_id,
            r.skip,
            r.distance_true_middle,
            r.min_distance_same_sequence_others,
            r.min_distance_out_of_sequence,
            r.rank_of_true,
            r.candidates,
            r.pixel_true_middle,
            r.pixel_min_same_sequence_others,
            r.pixel_min_out_of_sequence
        ));
    }
    recomp::imaging::store::write_atomic(&csv_path, rows.as_bytes())?;
    rec.output(csv_path);
    let path = out.join(format!("nn_skip{}.json", a.skip));
    println!(
        "skip {}: {} probes, rank-1 {:.3}, median rank {}, true/out ratio {:.4}",
        a.skip,
        summary.probes,
        summary.rank1_fraction,
        summary.median_rank,
        summary.true_to_out_ratio
    );
    write_json_atomic(
        &path,
        &NnReport {
            skip: a.skip,
            summary,
            results: &results,
        },
    )?;
    rec.output(path);
    rec.finish(out)?;
    Ok(())
}
