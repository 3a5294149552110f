use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmcode::data::{load_dataset, select_top_labels, DataFormat, Dataset, LabelSpec};
use mmcode::evaluation::{run_benchmark, BenchConfig, MetricsReport};
use mmcode::pipelines::{fit, load_model, save_model, MethodKind, MethodSpec};
use mmcode::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mmcode",
    version,
    about = "Multi-label output coding with learned max-margin encodings"
)]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the repeated random-split benchmark described by a TOML config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        n_train: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fit one method on a dataset and save the model.
    Fit {
        #[arg(long)]
        method: MethodKind,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Projection count (default: 100 for CodingCS, q otherwise).
        #[arg(long)]
        d: Option<usize>,
    },
    /// Predict label vectors for a dataset with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "arff")]
    format: DataFormat,
    /// MULAN XML file naming the label columns.
    #[arg(long, conflicts_with = "labels_last")]
    labels_xml: Option<PathBuf>,
    /// Treat the last K columns as labels.
    #[arg(long)]
    labels_last: Option<usize>,
    /// Keep only the K most frequent labels.
    #[arg(long)]
    top_labels: Option<usize>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let spec = match (&self.labels_xml, self.labels_last) {
            (Some(p), _) => LabelSpec::Xml(p.clone()),
            (None, Some(k)) => LabelSpec::Last(k),
            (None, None) => {
                let xml = self.data.with_extension("xml");
                if !xml.exists() {
                    return Err(Error::Argument("pass --labels-xml or --labels-last".into()));
                }
                LabelSpec::Xml(xml)
            }
        };
        let d = load_dataset(&self.data, self.format, &spec)?;
        match self.top_labels {
            Some(k) => select_top_labels(&d, k),
            None => Ok(d),
        }
    }
}

fn write_predictions(path: &Path, names: &[String], pred: &nalgebra::DMatrix<f64>) -> Result<()> {
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    w.write_record(names).map_err(to_io)?;
    for row in pred.row_iter() {
        w.write_record(row.iter().map(|&v| if v == 1.0 { "1" } else { "0" }))
            .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Bench {
            config,
            seed,
            runs,
            n_train,
            out_dir,
        } => {
            let mut cfg = BenchConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = runs {
                cfg.runs = r;
            }
            if let Some(n) = n_train {
                cfg.n_train = n;
            }
            let report = run_benchmark(&cfg)?;
            print!("{}", report.markdown());
            let dir = out_dir.or(cfg.output_dir).unwrap_or_else(|| PathBuf::from("results"));
            report.write(&dir)?;
            eprintln!("wrote {}", dir.display());
            let failed = report.failures().count();
            if failed > 0 {
                eprintln!("WARNING: {failed} cells failed; see the report");
            }
        }
        Command::Fit {
            method,
            data,
            out,
            seed,
            d,
        } => {
            let train = data.load()?;
            let mut spec = MethodSpec::new(method).with_seed(seed);
            spec.d = d;
            let model = fit(&spec, &train)?;
            save_model(&model, &out)?;
            eprintln!(
                "fitted {method} on {} samples ({} base models), saved to {}",
                train.n_samples(),
                model.base_model_count(),
                out.display()
            );
        }
        Command::Predict { model, data, out } => {
            let model = load_model(&model)?;
            let test = data.load()?;
            let pred = model.predict_rows(test.features())?;
            write_predictions(&out, model.label_names(), &pred)?;
            if test.n_labels() == model.n_labels() {
                let m = MetricsReport::evaluate(&pred, test.labels())?;
                println!(
                    "subset_accuracy {:.4}  macro_f1 {:.4}  micro_f1 {:.4}",
                    m.subset_accuracy, m.macro_f1, m.micro_f1
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
