use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use augcn::autodiff::{ParamStore, Tape};
use augcn::checkpoint::Checkpoint;
use augcn::config::TrainConfig;
use augcn::data::{load_manifest, prepare, split_subjects, write_manifest, ImageSource, LandmarkSource, PreparedSet};
use augcn::eval::evaluate;
use augcn::gcn::{GcnClassifier, GcnDims};
use augcn::gradcheck::grad_check;
use augcn::graph::{
    assemble_graph, normalize_adjacency, relation_from_labels, AdjacencyMatrix, AdjacencyMode, BoolRelationMatrix,
    DegeneratePolicy,
};
use augcn::image_io::save_image;
use augcn::model::{AuGcn, Batch};
use augcn::objectives::class_weights;
use augcn::representation::{AeDims, Autoencoders};
use augcn::roi::{build_layout, DatasetConfig, RoiLayout, RuleTable};
use augcn::synth::{generate_synthetic, planted_threshold, render_image, SynthSpec};
use augcn::tensor::Tensor;
use augcn::train::{train_stage1, train_stage2};
use augcn::SeededRng;

#[derive(Parser)]
#[command(name = "augcn", version, about = "Relation-aware AU detection with graph convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the ROI adjacency from labels or a relation fixture.
    BuildGraph(BuildGraphArgs),
    /// Crop every manifest frame into ROI patches.
    Ingest(IngestArgs),
    /// Generate a synthetic dataset on disk.
    Synth(SynthArgs),
    /// Stage 1: train the per-ROI autoencoders.
    PretrainAe(PretrainArgs),
    /// Stage 2: train encoders, graph layers and head.
    Train(TrainArgs),
    /// Score a stage-2 checkpoint.
    Evaluate(EvaluateArgs),
    /// Check both training objectives against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct LayoutArgs {
    /// Dataset layout: bp4d, disfa or toy.
    #[arg(long, default_value = "toy")]
    dataset: String,
    /// AU center rule table (TOML); the built-in 68-point table by default.
    #[arg(long)]
    rules: Option<PathBuf>,
}

impl LayoutArgs {
    fn layout(&self, n: usize) -> anyhow::Result<RoiLayout> {
        let rules = match &self.rules {
            Some(p) => RuleTable::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RuleTable::default_ibug68(),
        };
        Ok(build_layout(&DatasetConfig::by_name(&self.dataset)?, &rules, n)?)
    }
}

#[derive(Args)]
struct BuildGraphArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    /// Relation matrix file, or `bp4d` / `disfa` for the shipped tables.
    #[arg(long, conflicts_with = "manifest")]
    fixture: Option<String>,
    /// Estimate relations from the labels of this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = augcn::graph::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Keep a zero row for AUs that never occur instead of failing.
    #[arg(long)]
    permissive: bool,
    #[arg(long, default_value = "raw")]
    mode: AdjacencyMode,
    /// Drop the global ROI node.
    #[arg(long)]
    no_global: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write the relation matrix.
    #[arg(long)]
    relations_out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    #[arg(long)]
    manifest: PathBuf,
    /// ROI side in pixels.
    #[arg(long, default_value_t = 12)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    /// Planted relations: a matrix file, `bp4d`, `disfa` or `identity`.
    #[arg(long, default_value = "identity")]
    relations: String,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0.5)]
    base_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    label_noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pixel_noise: f64,
    #[arg(long, default_value_t = 9)]
    subjects: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Overrides for every training hyperparameter.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Starting point: desk, bp4d or disfa.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    d0: Option<usize>,
    #[arg(long)]
    d1: Option<usize>,
    #[arg(long)]
    d2: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    dice_eps: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    lr_period: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    adjacency_mode: Option<AdjacencyMode>,
    #[arg(long)]
    f1_threshold: Option<f64>,
}

macro_rules! overlay {
    ($cfg:ident, $args:ident, $($field:ident),*) => {
        $(if let Some(v) = $args.$field { $cfg.$field = v; })*
    };
}

impl ConfigArgs {
    fn build(&self, seed: u64) -> anyhow::Result<TrainConfig> {
        let mut c = TrainConfig::preset(&self.preset)?;
        overlay!(
            c, self, n, channels, hidden, d0, d1, d2, lambda1, lambda2, threshold, dice_eps, dropout, lr, lr_decay,
            lr_period, momentum, weight_decay, batch_size, stage1_epochs, stage2_epochs, adjacency_mode, f1_threshold
        );
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct SplitArgs {
    /// Use only the subjects outside this fold (0, 1 or 2) for training, or
    /// only this fold for evaluation.
    #[arg(long)]
    test_fold: Option<usize>,
    /// Seed of the subject split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl SplitArgs {
    fn select(&self, data: PreparedSet, want_test: bool) -> anyhow::Result<PreparedSet> {
        let Some(fold) = self.test_fold else {
            return Ok(data);
        };
        if fold > 2 {
            bail!("--test-fold must be 0, 1 or 2");
        }
        let folds = split_subjects(data.subjects(), &mut SeededRng::new(self.split_seed))?;
        let (train, test) = data.split(&folds, fold);
        Ok(if want_test { test } else { train })
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    /// Patch cache written by `ingest`.
    #[arg(long)]
    patches: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    stage1: PathBuf,
    #[arg(long)]
    patches: PathBuf,
    /// Adjacency written by `build-graph`.
    #[arg(long)]
    graph: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    patches: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_relations(spec: &str, au_ids: &[u32]) -> anyhow::Result<BoolRelationMatrix> {
    let m = match spec {
        "bp4d" => BoolRelationMatrix::bp4d(),
        "disfa" => BoolRelationMatrix::disfa(),
        "identity" => BoolRelationMatrix::identity(au_ids),
        path => BoolRelationMatrix::load(Path::new(path)).with_context(|| format!("reading {path}"))?,
    };
    Ok(m.reorder(au_ids)?)
}

fn build_graph(a: BuildGraphArgs) -> anyhow::Result<()> {
    let mut layout = a.layout.layout(1)?;
    let relations = match (&a.fixture, &a.manifest) {
        (Some(f), _) => load_relations(f, &layout.au_ids)?,
        (None, Some(m)) => {
            let manifest = load_manifest(m, &layout.name, &layout.au_ids)
                .with_context(|| format!("reading {}", m.display()))?;
            let policy = if a.permissive {
                DegeneratePolicy::Permissive
            } else {
                DegeneratePolicy::Strict
            };
            relation_from_labels(&manifest.labels(), &layout.au_ids, a.threshold, policy)?
        }
        (None, None) => bail!("pass --fixture or --manifest"),
    };
    if a.no_global {
        layout = layout.without_global();
    }
    let adj = normalize_adjacency(&assemble_graph(&relations, &layout)?, a.mode);
    std::fs::write(&a.out, adj.to_text(&layout)).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.relations_out {
        std::fs::write(p, relations.to_text())?;
    }
    println!("wrote {}x{} adjacency to {}", adj.size(), adj.size(), a.out.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    let layout = a.layout.layout(a.n)?;
    let manifest = load_manifest(&a.manifest, &layout.name, &layout.au_ids)
        .with_context(|| format!("reading {}", a.manifest.display()))?;
    let set = prepare(&manifest, &layout, None)?;
    set.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("cropped {} frames into {} ROIs of {}x{}x{}", set.examples.len(), set.num_rois, set.n, set.n, set.channels);
    Ok(())
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let layout = a.layout.layout(1)?;
    let relations = load_relations(&a.relations, &layout.au_ids)?;
    let spec = SynthSpec {
        samples: a.samples,
        base_rate: a.base_rate,
        label_noise: a.label_noise,
        pixel_noise: a.pixel_noise,
        subjects: a.subjects,
        ..SynthSpec::default()
    };
    let mut manifest = generate_synthetic(&layout, &relations, &spec, &mut SeededRng::new(a.seed))?;
    for dir in ["images", "landmarks"] {
        std::fs::create_dir_all(a.out_dir.join(dir))?;
    }
    for record in &mut manifest.records {
        let ImageSource::Synthetic(img) = &record.image else { unreachable!("synthetic records") };
        let name = format!("{}_{}_{}", record.subject_id, record.video_id, record.frame_id);
        let image_rel = PathBuf::from("images").join(format!("{name}.pgm"));
        let lm_rel = PathBuf::from("landmarks").join(format!("{name}.csv"));
        save_image(&a.out_dir.join(&image_rel), &render_image(img, &record.labels, &layout)?)?;
        let LandmarkSource::Inline(lm) = &record.landmarks else { unreachable!("synthetic records") };
        lm.save_csv(&a.out_dir.join(&lm_rel))?;
        record.image = ImageSource::Path(image_rel);
        record.landmarks = LandmarkSource::Path(lm_rel);
    }
    write_manifest(&a.out_dir.join("manifest.csv"), &manifest)?;
    std::fs::write(a.out_dir.join("relations.txt"), relations.to_text())?;
    println!(
        "wrote {} frames to {}; planted threshold {:.4}",
        manifest.records.len(),
        a.out_dir.display(),
        planted_threshold(a.base_rate, a.label_noise)
    );
    Ok(())
}

fn load_patches(path: &Path, split: &SplitArgs, want_test: bool) -> anyhow::Result<PreparedSet> {
    let data = PreparedSet::load(path).with_context(|| format!("reading {}", path.display()))?;
    split.select(data, want_test)
}

fn save_each_epoch(out: &Path) -> impl FnMut(&Checkpoint) -> augcn::Result<()> + '_ {
    move |ck| ck.save(out)
}

fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let config = a.config.build(a.seed)?;
    let data = load_patches(&a.patches, &a.split, false)?;
    let layout = a.layout.layout(config.n)?;
    let outcome = train_stage1(&data, &layout, &config, save_each_epoch(&a.out))?;
    let last = outcome.history.last().expect("epochs ran");
    println!("stage 1 done: {} epochs, L_ROI {:.6}, checkpoint {}", last.epoch + 1, last.loss, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let config = a.config.build(a.seed)?;
    let data = load_patches(&a.patches, &a.split, false)?;
    let stage1 = Checkpoint::load(&a.stage1).with_context(|| format!("reading {}", a.stage1.display()))?;
    let text = std::fs::read_to_string(&a.graph).with_context(|| format!("reading {}", a.graph.display()))?;
    let adjacency = AdjacencyMatrix::parse(&text)?;
    let outcome = train_stage2(&stage1, &data, &adjacency, &config, save_each_epoch(&a.out))?;
    let last = outcome.history.last().expect("epochs ran");
    println!("stage 2 done: {} epochs, L_au {:.6}, checkpoint {}", last.epoch + 1, last.loss, a.out.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let data = load_patches(&a.patches, &a.split, true)?;
    let report = evaluate(&ck, &data)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.report {
        std::fs::write(p, report.to_json())?;
        info!("report written to {}", p.display());
    }
    Ok(())
}

/// Both objectives at R=4, d0=6, d1=3, d2=2, C=3, n=4 with dropout off.
fn gradcheck_cmd(a: GradcheckArgs) -> anyhow::Result<()> {
    let (r, c, input) = (4, 3, 16);
    let mut rng = SeededRng::new(a.seed);
    let mut store = ParamStore::new();
    let ae = Autoencoders::init(&mut store, r, AeDims { input, hidden: 5, latent: 6, classes: c }, &mut rng);
    let gcn = GcnClassifier::init(&mut store, GcnDims { rois: r, d0: 6, d1: 3, d2: 2, classes: c }, 0.0, &mut rng);
    let model = AuGcn { encoders: ae.clone(), gcn };
    let patches: Vec<Tensor> = (0..r)
        .map(|_| Tensor::new(vec![1, input], (0..input).map(|_| rng.uniform()).collect()).expect("shape"))
        .collect();
    let labels = Tensor::new(vec![1, c], vec![1.0, 0.0, 1.0])?;
    let batch = Batch { patches: patches.clone(), labels };
    let g = Tensor::full(&[r, r], 1.0);
    let weights = class_weights(&[0.5, 0.2, 0.3], &[1, 2, 4])?;
    let stage2 = grad_check(&mut store, &model.trainable_ids(), a.eps, |tape: &mut Tape, s| {
        model.loss(tape, s, &g, &batch, &weights.w, 4.0, 1.0, false, &mut SeededRng::new(0))
    })?;
    let roi_rows = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 1.0]];
    let roi_labels: Vec<Tensor> = roi_rows.iter().map(|row| Tensor::row_vector(row.to_vec())).collect();
    let stage1 = grad_check(&mut store, &ae.all_ids(), a.eps, |tape: &mut Tape, s| {
        Ok(ae.stage1_loss(tape, s, &patches, &roi_labels, 3.0)?.0)
    })?;
    println!("stage-2 L_au: max relative error {:.3e} over {} entries", stage2.max_rel_error, stage2.entries_checked);
    println!("stage-1 L_ROI: max relative error {:.3e} over {} entries", stage1.max_rel_error, stage1.entries_checked);
    if stage1.max_rel_error >= 1e-4 || stage2.max_rel_error >= 1e-4 {
        bail!("gradient check failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildGraph(a) => build_graph(a),
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::PretrainAe(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
