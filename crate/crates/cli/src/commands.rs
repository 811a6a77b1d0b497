use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use mrfibp::data::export::{read_jsonl, write_jsonl};
use mrfibp::data::{
    load_feature_bags, load_heatmaps, load_model, save_feature_bags, save_heatmaps, save_model, synth_generate,
    StateRecord, SyntheticSpec,
};
use mrfibp::gibbs::merged_vocabulary;
use mrfibp::model::Annotation;
use mrfibp::representation::{descriptor_from_marginals, heatmaps_from_marginals};
use mrfibp::retrieval::{cmc_curve, distance_matrix, pr_curve, SearchHit, DEFAULT_ROW_BAND};
use mrfibp::*;
use serde::Serialize;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Supervision {
    Strong,
    Weak,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Serial,
    Parallel,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Serial => Schedule::Serial,
            ScheduleArg::Parallel => Schedule::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Semantics {
    Colocated,
    Independent,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Auxiliary feature files (repeatable).
    #[arg(long = "aux", required = true)]
    pub aux: Vec<PathBuf>,
    /// Supervision per file, comma separated; a single value applies to all.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "auto")]
    pub supervision: Vec<Supervision>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drop the neighborhood coupling (beta = 0).
    #[arg(long)]
    pub no_mrf: bool,
    /// Never create factors beyond the annotated ones.
    #[arg(long)]
    pub no_birth: bool,
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sigma_x: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_a: f64,
    #[arg(long, default_value_t = 100)]
    pub k_max: usize,
    /// Log-joint is printed every this many sweeps.
    #[arg(long, default_value_t = 1)]
    pub trace_every: usize,
    #[arg(long, value_enum, default_value = "parallel")]
    pub schedule: ScheduleArg,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub factors: usize,
    pub vocabulary: Vec<String>,
    pub trace: Vec<(usize, f64)>,
}

fn apply_supervision_mode(ds: &mut Dataset, mode: Supervision, path: &Path) -> CliResult<()> {
    match mode {
        Supervision::Auto => {}
        Supervision::Weak => {
            for item in &mut ds.items {
                item.labels = item.labels.to_weak();
            }
        }
        Supervision::Strong => {
            if let Some(item) = ds
                .items
                .iter()
                .find(|it| !matches!(it.labels.annotation, Annotation::Strong { .. }))
            {
                return Err(CliError::new(
                    "E_LABELS",
                    format!("{}: {} has no patch-level labels", path.display(), item.bag.image_id),
                ));
            }
        }
    }
    Ok(())
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<TrainSummary> {
    let modes = match args.supervision.len() {
        1 => vec![args.supervision[0]; args.aux.len()],
        n if n == args.aux.len() => args.supervision.clone(),
        n => {
            return Err(CliError::usage(format!(
                "{n} supervision modes for {} auxiliary files",
                args.aux.len()
            )))
        }
    };
    let mut datasets = Vec::with_capacity(args.aux.len());
    for (path, mode) in args.aux.iter().zip(modes) {
        let mut ds = load_feature_bags(path)?;
        apply_supervision_mode(&mut ds, mode, path)?;
        datasets.push(ds);
    }
    let vocabulary = merged_vocabulary(&datasets);
    let hp = Hyperparams {
        alpha: args.alpha,
        beta: if args.no_mrf { 0.0 } else { args.beta },
        sigma_x: args.sigma_x,
        sigma_a: args.sigma_a,
        k_supervised: vocabulary.len(),
        k_max: args.k_max.max(vocabulary.len()),
        rng_seed: args.seed,
    };
    let cfg = SweepConfig {
        birth_enabled: !args.no_birth,
        trace_every: args.trace_every,
        schedule: args.schedule.into(),
        ..SweepConfig::auxiliary().with_iterations(args.iters)
    };
    let fit = train_auxiliary(&datasets, &hp, &cfg)?;
    writeln!(out, "sweep,log_joint")?;
    for (sweep, lj) in &fit.trace {
        writeln!(out, "{sweep},{lj}")?;
    }
    save_model(&fit.model, &args.out)?;
    Ok(TrainSummary {
        factors: fit.model.k(),
        vocabulary: fit.vocabulary,
        trace: fit.trace,
    })
}

#[derive(Debug, Clone, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub target: PathBuf,
    /// Source checkpoint; not needed with --no-transfer.
    #[arg(long, required_unless_present = "no_transfer")]
    pub source: Option<PathBuf>,
    /// Output directory for model.json, states.jsonl and heatmaps.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 80)]
    pub k: usize,
    /// Keep the (extended) source appearance fixed.
    #[arg(long)]
    pub no_adapt: bool,
    /// Ignore the source and learn every factor on the target.
    #[arg(long, conflicts_with_all = ["source", "no_adapt", "freeze_source"])]
    pub no_transfer: bool,
    /// Keep transferred factors at their source values; learn only new ones.
    #[arg(long, conflicts_with = "no_adapt")]
    pub freeze_source: bool,
    #[arg(long)]
    pub no_mrf: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the checkpoint's noise level.
    #[arg(long)]
    pub sigma_x: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Log-joint is printed every this many sweeps.
    #[arg(long, default_value_t = 1)]
    pub trace_every: usize,
    #[arg(long, value_enum, default_value = "parallel")]
    pub schedule: ScheduleArg,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptSummary {
    pub images: usize,
    pub factors: usize,
    pub factor_names: Vec<String>,
}

pub fn adapt(args: &AdaptArgs, out: &mut dyn Write) -> CliResult<AdaptSummary> {
    let target = load_feature_bags(&args.target)?;
    let bags = target.bags();
    let d = bags.iter().find(|b| b.n_patches() > 0).map_or(0, FeatureBag::dim);
    let (source, mut hp) = match (&args.source, args.no_transfer) {
        (_, true) => {
            let hp = Hyperparams::default();
            (AppearanceModel::uninformative(0, d, &[], hp), hp)
        }
        (Some(path), false) => {
            let m = load_model(path)?;
            let hp = m.hyperparams;
            (m, hp)
        }
        (None, false) => return Err(CliError::usage("--source is required without --no-transfer")),
    };
    hp.rng_seed = args.seed;
    hp.k_max = hp.k_max.max(args.k);
    if let Some(s) = args.sigma_x {
        hp.sigma_x = s;
    }
    if let Some(b) = args.beta {
        hp.beta = b;
    }
    if args.no_mrf {
        hp.beta = 0.0;
    }
    let cfg = SweepConfig {
        update_appearance: !args.no_adapt,
        trace_every: args.trace_every,
        schedule: args.schedule.into(),
        ..SweepConfig::target().with_iterations(args.iters)
    };
    let adaptation = if args.freeze_source {
        Adaptation::FreezeSource
    } else {
        Adaptation::Full
    };
    let fit = adapt_target_with(&bags, &source, args.k, &hp, &cfg, adaptation)?;

    fs::create_dir_all(&args.out)?;
    save_model(&fit.model, args.out.join("model.json"))?;
    let mut records = Vec::with_capacity(bags.len());
    let mut stacks = Vec::with_capacity(bags.len());
    for ((bag, state), marg) in bags.iter().zip(&fit.states).zip(&fit.marginals) {
        records.push(StateRecord {
            image_id: bag.image_id.clone(),
            state: state.clone(),
            marginals: marg.clone(),
            descriptor: descriptor_from_marginals(bag, marg)?,
        });
        stacks.push(heatmaps_from_marginals(bag, marg)?);
    }
    write_jsonl(args.out.join("states.jsonl"), &records)?;
    save_heatmaps(args.out.join("heatmaps.jsonl"), &stacks, &fit.model.factor_names)?;
    writeln!(out, "sweep,log_joint")?;
    for (sweep, lj) in &fit.trace {
        writeln!(out, "{sweep},{lj}")?;
    }
    Ok(AdaptSummary {
        images: bags.len(),
        factors: fit.model.k(),
        factor_names: fit.model.factor_names,
    })
}

#[derive(Debug, Clone, Args)]
pub struct ReidArgs {
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// CSV of `probe_id,gallery_id` pairs (header optional).
    #[arg(long)]
    pub truth: PathBuf,
    /// CMC table destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ROW_BAND)]
    pub row_band: usize,
    #[arg(long, value_enum, default_value = "parallel")]
    pub schedule: ScheduleArg,
}

/// Reads `probe,gallery` id pairs, skipping a leading header row.
pub fn read_truth(path: &Path) -> CliResult<Vec<(String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut pairs = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(CliError::new(
                "E_PARSE",
                format!("{}:{}: expected 2 fields, found {}", path.display(), i + 1, rec.len()),
            ));
        }
        if i == 0 && rec[0].to_lowercase().starts_with("probe") {
            continue;
        }
        pairs.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(pairs)
}

/// CMC of probe against gallery descriptors. When both paths name the same
/// file, the probes are the truth's probe ids and the gallery is every other
/// record.
pub fn reid(args: &ReidArgs, out: &mut dyn Write) -> CliResult<Vec<f64>> {
    let truth = read_truth(&args.truth)?;
    let truth_map: HashMap<&str, &str> = truth.iter().map(|(p, g)| (p.as_str(), g.as_str())).collect();
    let probe_records: Vec<StateRecord> = read_jsonl(&args.probe)?;
    let same = fs::canonicalize(&args.probe)? == fs::canonicalize(&args.gallery)?;
    let (probes, gallery): (Vec<StateRecord>, Vec<StateRecord>) = if same {
        let by_id: HashSet<&str> = probe_records.iter().map(|r| r.image_id.as_str()).collect();
        if let Some((p, _)) = truth.iter().find(|(p, _)| !by_id.contains(p.as_str())) {
            return Err(CliError::new("E_TRUTH", format!("probe '{p}' not in {}", args.probe.display())));
        }
        probe_records
            .into_iter()
            .partition(|r| truth_map.contains_key(r.image_id.as_str()))
    } else {
        (probe_records, read_jsonl(&args.gallery)?)
    };
    if probes.is_empty() || gallery.is_empty() {
        return Err(CliError::new("E_EMPTY", "probe and gallery sets must be non-empty"));
    }
    let gallery_index: HashMap<&str, usize> = gallery
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.as_str(), i))
        .collect();
    let mut matches = Vec::with_capacity(probes.len());
    for p in &probes {
        let g = truth_map
            .get(p.image_id.as_str())
            .ok_or_else(|| CliError::new("E_TRUTH", format!("no truth entry for probe '{}'", p.image_id)))?;
        let gi = gallery_index
            .get(g)
            .ok_or_else(|| CliError::new("E_TRUTH", format!("gallery id '{g}' (probe '{}') not in gallery", p.image_id)))?;
        matches.push(*gi);
    }
    let pd: Vec<GridDescriptor> = probes.into_iter().map(|r| r.descriptor).collect();
    let gd: Vec<GridDescriptor> = gallery.into_iter().map(|r| r.descriptor).collect();
    let d = distance_matrix(&pd, &gd, args.row_band, args.schedule.into())?;
    let cmc = cmc_curve(&d, &matches)?;
    let table = retrieval::cmc_csv(&cmc);
    match &args.out {
        Some(path) => fs::write(path, &table)?,
        None => out.write_all(table.as_bytes())?,
    }
    Ok(cmc)
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// `Term[+Term]...`; a term is a factor name or a co-located pair `A-B`.
    #[arg(long)]
    pub query: String,
    /// Per-group semantics, comma separated, overriding the grammar default.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub semantics: Vec<Semantics>,
    /// Keep images scoring strictly above this.
    #[arg(long, default_value_t = 0.0)]
    pub min_score: f64,
    /// Ranking destination (`rank,image_id,score`); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// File of relevant image ids, one per line; enables the PR table.
    #[arg(long)]
    pub relevance: Option<PathBuf>,
    /// PR table destination; stdout when absent.
    #[arg(long, requires = "relevance")]
    pub pr_out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub hits: Vec<SearchHit>,
    pub average_precision: Option<f64>,
}

/// Query against an index; both the command and the service go through here.
pub fn run_query(index: &SearchIndex, q: &QueryTerm, min_score: f64) -> CliResult<Vec<SearchHit>> {
    if !min_score.is_finite() {
        return Err(CliError::new("E_QUERY", "min_score must be finite"));
    }
    Ok(index.search(q, min_score)?)
}

pub fn load_index(path: &Path) -> CliResult<SearchIndex> {
    let (names, stacks) = load_heatmaps(path)?;
    Ok(SearchIndex::new(names, stacks)?)
}

pub fn search(args: &SearchArgs, out: &mut dyn Write) -> CliResult<SearchOutcome> {
    let index = load_index(&args.index)?;
    let flags: Vec<bool> = args.semantics.iter().map(|s| *s == Semantics::Colocated).collect();
    let q = index.parse(&args.query, (!flags.is_empty()).then_some(flags.as_slice()))?;
    let hits = run_query(&index, &q, args.min_score)?;
    let mut table = String::from("rank,image_id,score\n");
    for (i, h) in hits.iter().enumerate() {
        table.push_str(&format!("{},{},{}\n", i + 1, h.image_id, h.score));
    }
    match &args.out {
        Some(path) => fs::write(path, &table)?,
        None => out.write_all(table.as_bytes())?,
    }
    let average_precision = match &args.relevance {
        None => None,
        Some(path) => {
            let relevant: HashSet<String> = fs::read_to_string(path)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let scores = index.scores(&q)?;
            let rel: Vec<bool> = index.stacks.iter().map(|s| relevant.contains(&s.image_id)).collect();
            let pr = pr_curve(&scores, &rel)?;
            let csv = pr.to_csv();
            match &args.pr_out {
                Some(p) => fs::write(p, &csv)?,
                None => out.write_all(csv.as_bytes())?,
            }
            writeln!(out, "average_precision,{}", pr.average_precision)?;
            Some(pr.average_precision)
        }
    };
    Ok(SearchOutcome {
        hits,
        average_precision,
    })
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// JSON synthetic-data spec.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    spec: &'a SyntheticSpec,
    source: &'static str,
    target: &'static str,
    truth: &'static str,
    pairs: &'static str,
    source_images: usize,
    target_images: usize,
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let spec: SyntheticSpec = serde_json::from_str(&fs::read_to_string(&args.spec)?)?;
    let data = synth_generate(&spec)?;
    fs::create_dir_all(&args.out)?;
    save_feature_bags(&data.source, args.out.join("source.jsonl"))?;
    save_feature_bags(&data.target, args.out.join("target.jsonl"))?;
    fs::write(args.out.join("truth.json"), serde_json::to_string_pretty(&data.truth)?)?;
    let mut pairs = csv::Writer::from_path(args.out.join("pairs.csv"))?;
    pairs.write_record(["probe", "gallery"])?;
    for (p, g) in &data.truth.pairs {
        pairs.write_record([p, g])?;
    }
    pairs.flush()?;
    let manifest = Manifest {
        spec: &spec,
        source: "source.jsonl",
        target: "target.jsonl",
        truth: "truth.json",
        pairs: "pairs.csv",
        source_images: data.source.items.len(),
        target_images: data.target.items.len(),
    };
    fs::write(args.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
