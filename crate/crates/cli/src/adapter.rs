use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};
use deltakit::adapters::{
    max_rank_bound, merge, nkp_fit_lokr, param_count, svd_fit_lora, AdapterModel, Algorithm,
    InitConfig, KronFactor, LayerShape, ModelMetadata, RightBlock, FORMAT_VERSION,
};
use deltakit::io::{
    load_dense, load_weights, read_manifest, save_dense, save_weights, CsvTable, DenseWeights,
};

use crate::{emit, CliError, CliResult, Outcome};

#[derive(Subcommand, Debug)]
pub enum AdapterCmd {
    /// Zero-update adapters for every layer of a manifest.
    Init(InitArgs),
    /// Parameter counts and rank bounds per layer, as CSV.
    Info {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dense `γ·ΔW` for every layer.
    Reconstruct {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write `ΔW` without the merge ratio.
        #[arg(long)]
        unscaled: bool,
    },
    /// `W0 + λ·γ·ΔW` for every layer of a dense base.
    Merge {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        weight: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapters closest in Frobenius norm to a dense delta file.
    Fit(FitArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlgoArg {
    Lora,
    Loha,
    Lokr,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Lora => Algorithm::Lora,
            AlgoArg::Loha => Algorithm::Loha,
            AlgoArg::Lokr => Algorithm::Lokr,
        }
    }
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long, value_enum)]
    algo: AlgoArg,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    alpha: f64,
    /// LoKr split bound, -1 for unbounded.
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    factor: i64,
    /// Tucker form for conv layers.
    #[arg(long)]
    tucker: bool,
    /// LoKr: keep the right Kronecker block whole.
    #[arg(long)]
    full_right: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FitAlgo {
    Lora,
    Lokr,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    algo: FitAlgo,
    /// Dense weight file holding the deltas.
    #[arg(long)]
    delta: PathBuf,
    /// LoRA rank, or the rank of the factored LoKr right block.
    #[arg(long)]
    dim: Option<usize>,
    /// LoKr split bound, -1 for unbounded.
    #[arg(long, allow_negative_numbers = true)]
    factor: Option<i64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(cmd: AdapterCmd) -> CliResult<Outcome> {
    match cmd {
        AdapterCmd::Init(args) => init(args)?,
        AdapterCmd::Info { input, out } => info(&input, out.as_deref())?,
        AdapterCmd::Reconstruct { input, out, unscaled } => {
            let model = load_weights(&input)?;
            let mut dense = DenseWeights::new();
            for (name, entry) in model.entries() {
                let delta = entry.adapter.reconstruct()?;
                let delta = if unscaled { delta } else { delta.scale(entry.adapter.gamma()) };
                dense.insert(name.clone(), delta);
            }
            save_dense(&dense, model.metadata().seed, &out)?;
        }
        AdapterCmd::Merge { input, base, weight, out } => {
            let model = load_weights(&input)?;
            let mut dense = load_dense(&base)?;
            for (name, entry) in model.entries() {
                let w0 = dense
                    .get_mut(name)
                    .ok_or_else(|| CliError::usage(format!("base has no layer '{name}'")))?;
                *w0 = merge(&entry.adapter, w0, weight)?;
            }
            save_dense(&dense, model.metadata().seed, &out)?;
        }
        AdapterCmd::Fit(args) => fit(args)?,
    }
    Ok(Outcome::Ok)
}

fn init(args: InitArgs) -> CliResult {
    let layers = read_manifest(&args.manifest)?;
    let mut cfg = match args.algo {
        AlgoArg::Lora => InitConfig::lora(args.dim, args.alpha),
        AlgoArg::Loha => InitConfig::loha(args.dim, args.alpha),
        AlgoArg::Lokr => InitConfig::lokr(args.dim, args.alpha, args.factor),
    };
    if args.full_right && args.algo != AlgoArg::Lokr {
        return Err(CliError::usage("--full-right only applies to --algo lokr"));
    }
    cfg.tucker = args.tucker;
    cfg.full_right = args.full_right;
    let model = AdapterModel::init(&cfg, &layers, args.seed)?;
    save_weights(&model, &args.out)?;
    Ok(())
}

fn shape_label(shape: &LayerShape) -> String {
    let dims: Vec<String> = shape.weight_shape().iter().map(usize::to_string).collect();
    dims.join("x")
}

fn info(input: &std::path::Path, out: Option<&std::path::Path>) -> CliResult {
    let model = load_weights(input)?;
    let algorithm = model.metadata().algorithm;
    let mut table = CsvTable::new(["name", "kind", "shape", "algorithm", "tucker", "params", "rank_bound"]);
    for (name, entry) in model.entries() {
        let (p, q) = entry.shape.matrix_dims();
        if algorithm != Algorithm::Lokr && model.metadata().dim > p.min(q) {
            eprintln!(
                "warning: layer '{name}': rank {} exceeds min(out, in·k²) = {}",
                model.metadata().dim,
                p.min(q)
            );
        }
        table.push([
            name.clone(),
            if entry.shape.is_conv() { "conv2d" } else { "linear" }.to_string(),
            shape_label(&entry.shape),
            algorithm.to_string(),
            entry.adapter.is_tucker().to_string(),
            param_count(&entry.adapter)?.to_string(),
            max_rank_bound(&entry.adapter)?.to_string(),
        ]);
    }
    emit(&table, out)
}

fn fit(args: FitArgs) -> CliResult {
    let deltas = load_dense(&args.delta)?;
    let (metadata, right) = match args.algo {
        FitAlgo::Lora => {
            if args.factor.is_some() {
                return Err(CliError::usage("--factor only applies to --algo lokr"));
            }
            let dim = args.dim.ok_or_else(|| CliError::usage("--algo lora requires --dim"))?;
            ((Algorithm::Lora, dim, -1), None)
        }
        FitAlgo::Lokr => {
            let factor = args.factor.unwrap_or(-1);
            match args.dim {
                Some(r) => ((Algorithm::Lokr, r, factor), Some(RightBlock::Rank(r))),
                None => ((Algorithm::Lokr, 1, factor), Some(RightBlock::Full)),
            }
        }
    };
    let (algorithm, dim, factor) = metadata;
    let mut model = AdapterModel::new(ModelMetadata {
        algorithm,
        dim,
        alpha: dim as f64,
        factor,
        seed: 0,
        format_version: FORMAT_VERSION,
    })?;
    for (name, delta) in &deltas {
        let adapter = match right {
            None => svd_fit_lora(delta, dim)?,
            Some(right) => nkp_fit_lokr(delta, KronFactor::from_i64(factor)?, right)?,
        };
        model.insert(name.clone(), adapter)?;
    }
    save_weights(&model, &args.out)?;
    Ok(())
}
