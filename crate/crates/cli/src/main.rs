use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use unifl::capacity::{Beta, WeightTable};
use unifl::data::augment::crop_transform;
use unifl::data::{self, crop_sample, imageio, write_synthetic, Sample};
use unifl::frequency::{extract_hf, normalize_display};
use unifl::heatmap::{encode, HeatmapStack, LandmarkSet, DEFAULT_STRIDE};
use unifl::loss::{fmb_batch_loss, AWingParams};
use unifl::metrics::{evaluate, EvalItem, NormKind, NormalizationRule, DEFAULT_TAU};
use unifl::nn::{gradcheck, output_to_stacks, read_checkpoint, stacks_to_tensor, Mode, Network};
use unifl::protocol::{DatasetId, ProtocolTable};
use unifl::train::{log_header, predict, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "unifl", version, about = "Unified multi-dataset facial landmark toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the network on a data root or on synthetic faces.
    Train(TrainArgs),
    /// NME and failure rate of predictions against a dataset directory.
    Eval(EvalArgs),
    /// Balanced loss between two directories of heatmap dumps.
    Loss(LossArgs),
    /// Capacity weights of every unified landmark.
    Weights(WeightsArgs),
    /// High-frequency image of a PGM/PPM file.
    Hf(HfArgs),
    /// Write synthetic datasets in the on-disk annotation formats.
    Synth(SynthArgs),
    /// Load a mapping file and report its aggregates.
    ProtocolCheck(ProtocolArgs),
    /// Compare backward gradients with central differences.
    Gradcheck(GradcheckArgs),
}

/// Options shared by every command that builds a network.
#[derive(Args, Clone)]
struct ModelArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Drop the structure prompts entirely.
    #[arg(long)]
    no_fgsa: bool,
    /// Capacity-weight β; 0 gives every landmark weight 1.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ModelArgs {
    /// Defaults, then the file, then the seed variable, then flags.
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::parse(&read_text(p)?)?,
            None => TrainConfig::default(),
        };
        cfg.apply_env()?;
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if self.no_fgsa {
            cfg.net.set_prompt_width(0);
        }
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory for the log, checkpoint, optimizer state and resolved config.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    /// Directory holding AFLW/, WFLW/, COFW/ and 300W/.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Print a progress line every N iterations (0 = quiet).
    #[arg(long, default_value_t = 50)]
    every: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory with the ground truth.
    #[arg(long)]
    gt: PathBuf,
    /// Dataset of `--gt`; defaults to the directory name.
    #[arg(long)]
    dataset: Option<DatasetId>,
    /// Prediction file: one line per image, `<id> x1 y1 ... xk yk`.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pred: Option<PathBuf>,
    /// Predict with a trained network instead of reading `--pred`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// inter_ocular, inter_pupil, face_diag, or `standard` for the dataset's usual choice.
    #[arg(long, default_value = "standard")]
    norm: String,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// With `--checkpoint`: also write the predicted heatmaps here.
    #[arg(long, requires = "checkpoint")]
    dump_heatmaps: Option<PathBuf>,
    /// With `--checkpoint`: also write predictions in the `--pred` format.
    #[arg(long, requires = "checkpoint")]
    write_pred: Option<PathBuf>,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long)]
    protocol: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    beta: f64,
    /// Predicted heatmap dumps.
    #[arg(long)]
    pred: PathBuf,
    /// Target heatmap dumps named `<DATASET>_<anything>.hm`, matched to `--pred` by file name.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    stride: usize,
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long, default_value_t = 0.9)]
    beta: f64,
    #[arg(long)]
    protocol: Option<PathBuf>,
}

#[derive(Args)]
struct HfArgs {
    #[arg(long, default_value_t = unifl::frequency::DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Images per dataset.
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Side of the raw square images.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    protocol: Option<PathBuf>,
    /// Also write target heatmap dumps of the raw images under `<out>/heatmaps`.
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long)]
    protocol: Option<PathBuf>,
    /// Only check structure; do not require the four standard datasets.
    #[arg(long)]
    structural: bool,
    /// Print the normalized mapping file.
    #[arg(long)]
    dump: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn load_protocol(p: Option<&Path>, structural: bool) -> Result<ProtocolTable> {
    Ok(match p {
        None => ProtocolTable::default_table(),
        Some(p) if structural => ProtocolTable::parse(&read_text(p)?)?,
        Some(p) => ProtocolTable::load(&read_text(p)?)?,
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.model.resolve()?;
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if a.data_root.is_some() {
        cfg.data_root = a.data_root;
    }
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let mut trainer = Trainer::from_config(cfg)?;
    eprintln!(
        "training {} parameters on {:?} samples per dataset",
        trainer.net.num_parameters(),
        trainer.pool().sizes()
    );
    let mut log = format!("{}\n", log_header());
    let every = a.every;
    let result = trainer.run(|r| {
        log.push_str(&r.to_csv_row(true));
        log.push('\n');
        if every > 0 && (r.iteration % every == 0) {
            eprintln!("iter {:>6}  loss {:.6}  lr {:.3e}", r.iteration, r.loss, r.lr);
        }
    });
    // keep the log of a failed run
    fs::write(a.out.join("log.csv"), &log)?;
    result?;
    trainer.save_checkpoint(&a.out.join("model.ckpt"))?;
    trainer.save_optimizer(&a.out.join("optimizer.state"))?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn dataset_of_dir(dir: &Path, given: Option<DatasetId>) -> Result<DatasetId> {
    if let Some(d) = given {
        return Ok(d);
    }
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    name.parse().map_err(|_| anyhow!("cannot tell the dataset of {}; pass --dataset", dir.display()))
}

fn stem(path: &str) -> String {
    Path::new(path).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.to_string())
}

fn parse_predictions(text: &str, ds: DatasetId) -> Result<BTreeMap<String, LandmarkSet>> {
    let mut out = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts.next().expect("non-empty line").to_string();
        let vals: Vec<f64> = parts.map(str::parse).collect::<Result<_, _>>().with_context(|| format!("line {}", k + 1))?;
        if vals.len() != 2 * ds.num_landmarks() {
            bail!("line {}: {} values, expected {} for {ds}", k + 1, vals.len(), 2 * ds.num_landmarks());
        }
        out.insert(id, LandmarkSet::new(ds, vals.chunks(2).map(|c| [c[0], c[1]]).collect()));
    }
    Ok(out)
}

fn format_prediction(id: &str, lms: &LandmarkSet) -> String {
    let coords: Vec<String> = lms.coords.iter().map(|c| format!("{} {}", c[0], c[1])).collect();
    format!("{id} {}\n", coords.join(" "))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = dataset_of_dir(&a.gt, a.dataset)?;
    let kind = if a.norm == "standard" { NormKind::standard_for(ds) } else { a.norm.parse()? };
    let rule = |fb| NormalizationRule::for_dataset(kind, ds, Some(fb));

    let items: Vec<EvalItem> = if let Some(pred_path) = &a.pred {
        let preds = parse_predictions(&read_text(pred_path)?, ds)?;
        data::load_annotations(&a.gt, ds)?
            .into_iter()
            .map(|e| {
                let id = stem(&e.path);
                let pred = preds.get(&id).cloned().ok_or_else(|| anyhow!("no prediction for {id}"))?;
                Ok(EvalItem { rule: rule(e.face_box)?, id, gt: e.landmarks, pred })
            })
            .collect::<Result<_>>()?
    } else {
        let ck = a.checkpoint.as_ref().expect("clap enforces --pred or --checkpoint");
        let cfg = a.model.resolve()?;
        let table = load_protocol(cfg.protocol.as_deref(), false)?;
        let mut net_cfg = cfg.net.clone();
        net_cfg.seed = cfg.seed;
        let mut net = Network::new(net_cfg)?;
        net.load_state(read_checkpoint(fs::File::open(ck).with_context(|| format!("opening {}", ck.display()))?)?)?;
        let size = cfg.net.image_size;
        let raw = data::load_raw(&a.gt, ds)?;
        let cropped: Vec<Sample> =
            raw.iter().map(|s| crop_sample(&s.image, &s.landmarks, &s.face_box, size, s.id.clone())).collect();
        let refs: Vec<&Sample> = cropped.iter().collect();
        let mut preds = Vec::with_capacity(raw.len());
        for chunk in refs.chunks(16) {
            preds.extend(predict(&mut net, chunk, cfg.stride, &table)?);
            if let Some(dir) = &a.dump_heatmaps {
                dump_heatmaps(&mut net, chunk, cfg.stride, dir)?;
            }
        }
        // score in the original image frame, like a prediction file
        for (s, p) in raw.iter().zip(preds.iter_mut()) {
            let back = crop_transform(&s.face_box, size).inverse();
            for c in &mut p.coords {
                *c = back.apply(*c);
            }
        }
        if let Some(p) = &a.write_pred {
            let text: String = raw.iter().zip(&preds).map(|(s, l)| format_prediction(&s.id, l)).collect();
            fs::write(p, text)?;
        }
        raw.into_iter()
            .zip(preds)
            .map(|(s, pred)| Ok(EvalItem { rule: rule(s.face_box)?, id: s.id, gt: s.landmarks, pred }))
            .collect::<Result<_>>()?
    };
    let summary = evaluate(&items, a.tau)?;
    print!("{}", summary.to_csv());
    Ok(())
}

fn dump_heatmaps(net: &mut Network, samples: &[&Sample], stride: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let x = net.images_to_tensor(&images)?;
    let hf = net.high_frequency(&x)?;
    let out = net.forward(&x, &hf, Mode::Eval)?;
    for (s, stack) in samples.iter().zip(output_to_stacks(&out, stride)) {
        let name = format!("{}_{}.hm", s.dataset(), s.id.trim_start_matches(&format!("{}_", s.dataset())));
        stack.write_dump(fs::File::create(dir.join(name))?)?;
    }
    Ok(())
}

/// Dataset from the `<DATASET>_` prefix of a dump file name.
fn dataset_of_dump(name: &str) -> Result<DatasetId> {
    let prefix = name.split('_').next().unwrap_or("");
    prefix.parse().map_err(|_| anyhow!("{name}: file name must start with a dataset name and `_`"))
}

fn loss(a: LossArgs) -> Result<()> {
    let table = load_protocol(a.protocol.as_deref(), false)?;
    let weights = WeightTable::build(&table, Beta::new(a.beta)?);
    let mut names: Vec<String> = fs::read_dir(&a.gt)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".hm"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no .hm files in {}", a.gt.display());
    }
    let (mut targets, mut preds) = (Vec::new(), Vec::new());
    for name in &names {
        let ds = dataset_of_dump(name)?;
        let open = |dir: &Path| -> Result<HeatmapStack> {
            let p = dir.join(name);
            Ok(HeatmapStack::read_dump(fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?, a.stride)?)
        };
        let mut t = open(&a.gt)?;
        t.dataset = Some(ds);
        // an all-zero target plane is an unannotated or occluded landmark
        for (present, plane) in t.present.iter_mut().zip(&t.planes) {
            *present = plane.data().iter().any(|&v| v != 0.0);
        }
        targets.push(t);
        preds.push(open(&a.pred)?);
    }
    let b = fmb_batch_loss(&targets, &preds, &table, &weights, &AWingParams::default())?;
    print!("{}", b.to_csv());
    Ok(())
}

fn hf(a: HfArgs) -> Result<()> {
    let img = imageio::read_image(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let planes = img
        .channels
        .iter()
        .map(|p| Ok(normalize_display(&extract_hf(p, a.sigma)?)))
        .collect::<Result<Vec<_>>>()?;
    imageio::write_display(&a.out, &planes).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let table = load_protocol(a.protocol.as_deref(), false)?;
    write_synthetic(&a.out, &table, a.count, a.size, a.seed)?;
    if a.heatmaps {
        let dir = a.out.join("heatmaps");
        fs::create_dir_all(&dir)?;
        for ds in DatasetId::ALL {
            for s in data::load_raw(&a.out.join(ds.name()), ds)? {
                let stack = encode(&s.landmarks, &table, (s.image.height(), s.image.width()), DEFAULT_STRIDE, 1.5)?;
                stack.write_dump(fs::File::create(dir.join(format!("{}.hm", s.id)))?)?;
            }
        }
    }
    eprintln!("wrote {} images per dataset to {}", a.count, a.out.display());
    Ok(())
}

fn protocol_check(a: ProtocolArgs) -> Result<()> {
    let t = load_protocol(a.protocol.as_deref(), a.structural)?;
    if a.dump {
        print!("{}", t.to_config_string());
        return Ok(());
    }
    for ds in t.datasets() {
        println!("{ds}: {} landmarks", t.dataset_size(ds)?);
    }
    let counts = t.counts();
    println!("unified landmarks: {}", t.num_unified());
    println!("annotations: {}", t.total_annotations());
    for k in 1..=4 {
        println!("shared by {k}: {}", counts.iter().filter(|&&c| c == k).count());
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<bool> {
    let mut cfg = a.model.resolve()?;
    cfg.synth_per_dataset = cfg.synth_per_dataset.max(1);
    let trainer = Trainer::from_config(cfg.clone())?;
    let samples: Vec<&Sample> = DatasetId::ALL.iter().map(|&d| trainer.pool().get(d, 0)).collect();
    let (x, hf, targets) = trainer.prepare(&samples)?;
    let (table, weights, awing) = (trainer.table.clone(), trainer.weights.clone(), trainer.awing);
    let loss = |out: &unifl::nn::Tensor| {
        let preds = output_to_stacks(out, cfg.stride);
        let (b, g) = unifl::loss::fmb_batch_loss_with_grad(&targets, &preds, &table, &weights, &awing, true)
            .expect("targets and outputs share the protocol");
        (b.total, stacks_to_tensor(&g.expect("gradient requested")).expect("non-empty batch"))
    };
    let mut net = trainer.net;
    let entries = gradcheck(&mut net, &x, &hf, &loss, a.count, a.step, cfg.seed)?;
    println!("name,index,analytic,numeric,rel_error");
    let mut ok = true;
    for e in &entries {
        println!("{},{},{},{},{}", e.name, e.index, e.analytic, e.numeric, e.rel_error);
        ok &= e.rel_error < a.tol;
    }
    let worst = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    eprintln!("{} parameters, worst relative error {worst:.3e} (tolerance {:e})", entries.len(), a.tol);
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Loss(a) => loss(a).map(|_| true),
        Command::Weights(a) => (|| -> Result<bool> {
            let t = load_protocol(a.protocol.as_deref(), false)?;
            print!("{}", WeightTable::build(&t, Beta::new(a.beta)?).to_csv());
            Ok(true)
        })(),
        Command::Hf(a) => hf(a).map(|_| true),
        Command::Synth(a) => synth(a).map(|_| true),
        Command::ProtocolCheck(a) => protocol_check(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_lines() {
        let text = "# id then coordinates\nimg_1 1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16 17 18 19 20 21 22 23 24 25 26 27 28 29 30 31 32 33 34 35 36 37 38\n";
        let p = parse_predictions(text, DatasetId::Aflw).unwrap();
        assert_eq!(p["img_1"].coords[1], [3.0, 4.0]);
        assert!(parse_predictions("a 1 2 3", DatasetId::Aflw).is_err());
        assert!(parse_predictions("a x y", DatasetId::Aflw).is_err());
        let line = format_prediction("img_1", &p["img_1"]);
        assert_eq!(parse_predictions(&line, DatasetId::Aflw).unwrap(), p);
    }

    #[test]
    fn dump_names() {
        assert_eq!(dataset_of_dump("300W_0001.hm").unwrap(), DatasetId::W300);
        assert_eq!(dataset_of_dump("COFW_a_b.hm").unwrap(), DatasetId::Cofw);
        assert!(dataset_of_dump("face_0001.hm").is_err());
    }

    #[test]
    fn dataset_from_directory_name() {
        assert_eq!(dataset_of_dir(Path::new("/x/WFLW"), None).unwrap(), DatasetId::Wflw);
        assert_eq!(dataset_of_dir(Path::new("/x/anything"), Some(DatasetId::Aflw)).unwrap(), DatasetId::Aflw);
        assert!(dataset_of_dir(Path::new("/x/faces"), None).is_err());
    }
}
