use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use deltakit::io::{
    feature_set, format_float, group_features, read_features, read_scores, write_category_scores,
    write_scores, CsvTable, FeatureRecord, Label,
};
use deltakit::metrics::{
    aggregate, avg_cosine_similarity, avg_style_loss, diversity_ratio, rank_normalize,
    squared_centroid_distance, subsample, text_image_alignment, vendi_by_group, DiversityMeasure,
    FeatureSet, SingletonPolicy,
};

use crate::{emit, CliError, CliResult, Outcome};

#[derive(Subcommand, Debug)]
pub enum MetricsCmd {
    /// Mean cosine similarity over all cross pairs of two feature sets.
    Cossim(PairArgs),
    /// Squared distance between the centroids of the normalised vectors.
    Scd(PairArgs),
    /// Vendi score, optionally per group and averaged.
    Vendi {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_label)]
        group_by: Option<Label>,
        /// Required with --group-by.
        #[arg(long, value_enum)]
        singletons: Option<SingletonArg>,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean cosine similarity between each image and its prompt, paired by
    /// line.
    Align {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        texts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average Gram-matrix style loss, records paired by line.
    Style {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank-normalise a score table within each metric, (sub)class and
    /// prompt type.
    Normalize {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average normalised scores over subclasses, then classes.
    Aggregate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diversity of each group relative to the whole file.
    DiversityRatio {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_label, default_value = "class")]
        group_by: Label,
        /// vendi, intra-dissimilarity or variance.
        #[arg(long, value_parser = parse_measure, default_value = "vendi")]
        measure: DiversityMeasure,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct PairArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Compare matching groups of the two files instead of the whole files.
    #[arg(long, value_parser = parse_label)]
    group_by: Option<Label>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Sampling {
    /// Score at most this many vectors per set, drawn without replacement.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long, default_value_t = 0, requires = "subsample")]
    subsample_seed: u64,
}

impl Sampling {
    fn apply(&self, s: FeatureSet) -> CliResult<FeatureSet> {
        Ok(match self.subsample {
            Some(max) => subsample(&s, max, self.subsample_seed)?,
            None => s,
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SingletonArg {
    Include,
    Skip,
}

fn parse_label(s: &str) -> Result<Label, String> {
    s.parse().map_err(|e: deltakit::Error| e.to_string())
}

fn parse_measure(s: &str) -> Result<DiversityMeasure, String> {
    s.parse().map_err(|e: deltakit::Error| e.to_string())
}

fn groups(records: &[FeatureRecord], by: Option<Label>) -> CliResult<Vec<(String, FeatureSet)>> {
    Ok(match by {
        Some(label) => group_features(records, label)?,
        None => vec![("all".to_string(), feature_set(records)?)],
    })
}

fn pair(args: PairArgs, name: &str, f: fn(&FeatureSet, &FeatureSet) -> deltakit::Result<f64>) -> CliResult {
    let a = groups(&read_features(&args.a)?, args.group_by)?;
    let b = groups(&read_features(&args.b)?, args.group_by)?;
    let mut table = CsvTable::new(["group", "n_a", "n_b", name]);
    for (label, set_a) in &a {
        let set_b = b
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, s)| s)
            .ok_or_else(|| CliError::usage(format!("group '{label}' is missing from {}", args.b.display())))?;
        table.push([
            label.clone(),
            set_a.len().to_string(),
            set_b.len().to_string(),
            format_float(f(set_a, set_b)?),
        ]);
    }
    emit(&table, args.out.as_deref())
}

fn single(name: &str, n: usize, value: f64, out: Option<&Path>) -> CliResult {
    let mut table = CsvTable::new(["n", name]);
    table.push([n.to_string(), format_float(value)]);
    emit(&table, out)
}

pub fn run(cmd: MetricsCmd) -> CliResult<Outcome> {
    match cmd {
        MetricsCmd::Cossim(args) => pair(args, "avg_cosine_similarity", avg_cosine_similarity)?,
        MetricsCmd::Scd(args) => pair(args, "squared_centroid_distance", squared_centroid_distance)?,
        MetricsCmd::Vendi { input, group_by, singletons, sampling, out } => {
            let policy = match (group_by, singletons) {
                (Some(_), Some(SingletonArg::Include)) => SingletonPolicy::Include,
                (Some(_), Some(SingletonArg::Skip)) => SingletonPolicy::Skip,
                (Some(_), None) => {
                    return Err(CliError::usage("--group-by requires --singletons include|skip"))
                }
                (None, Some(_)) => return Err(CliError::usage("--singletons requires --group-by")),
                (None, None) => SingletonPolicy::Include,
            };
            let sets = groups(&read_features(&input)?, group_by)?
                .into_iter()
                .map(|(l, s)| Ok((l, sampling.apply(s)?)))
                .collect::<CliResult<Vec<_>>>()?;
            let scored = vendi_by_group(&sets, policy)?;
            let mut table = CsvTable::new(["group", "n", "vendi"]);
            for (label, n, v) in &scored.groups {
                table.push([label.clone(), n.to_string(), format_float(*v)]);
            }
            if group_by.is_some() {
                table.push(["(mean)".to_string(), scored.groups.len().to_string(), format_float(scored.mean)]);
            }
            emit(&table, out.as_deref())?;
        }
        MetricsCmd::Align { images, texts, out } => {
            let images = feature_set(&read_features(&images)?)?;
            let texts = feature_set(&read_features(&texts)?)?;
            single("alignment", images.len(), text_image_alignment(&images, &texts)?, out.as_deref())?;
        }
        MetricsCmd::Style { generated, reference, out } => {
            let generated = read_features(&generated)?;
            let reference = read_features(&reference)?;
            if generated.len() != reference.len() {
                return Err(CliError::usage(format!(
                    "{} generated records but {} references",
                    generated.len(),
                    reference.len()
                )));
            }
            let pairs = generated
                .iter()
                .zip(&reference)
                .map(|(g, r)| Ok((g.map_tensors()?, r.map_tensors()?)))
                .collect::<CliResult<Vec<_>>>()?;
            single("style_loss", pairs.len(), avg_style_loss(&pairs)?, out.as_deref())?;
        }
        MetricsCmd::Normalize { scores, out } => {
            let table = rank_normalize(&read_scores(&scores)?)?;
            emit(&write_scores(&table), out.as_deref())?;
        }
        MetricsCmd::Aggregate { scores, out } => {
            let categories = aggregate(&read_scores(&scores)?)?;
            emit(&write_category_scores(&categories), out.as_deref())?;
        }
        MetricsCmd::DiversityRatio { input, group_by, measure, sampling, out } => {
            let records = read_features(&input)?;
            let dataset = sampling.apply(feature_set(&records)?)?;
            let mut table = CsvTable::new(["group", "n", "dataset_n", "ratio"]);
            for (label, set) in group_features(&records, group_by)? {
                let set = sampling.apply(set)?;
                let ratio = diversity_ratio(&set, &dataset, measure)?;
                table.push([label, set.len().to_string(), dataset.len().to_string(), format_float(ratio)]);
            }
            emit(&table, out.as_deref())?;
        }
    }
    Ok(Outcome::Ok)
}
