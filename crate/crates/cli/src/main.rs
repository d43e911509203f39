use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pillars_core::analysis::{self, Dataset, Metric, Scope, Speedup, TimingProfile};
use pillars_core::architectures::{build_pointpillars, cost_all, ArchConfig, BackboneVariant};
use pillars_core::exact::{self, format_fixed};
use pillars_core::report::{self, Table};
use pillars_core::{graph_cost, shape_infer};

#[derive(Parser)]
#[command(name = "pillars", version, about = "Multiply-add and parameter counts for PointPillars backbone variants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the backbone variants.
    List {
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Show a variant's unit structure, block shapes and stage costs.
    Describe {
        variant: BackboneVariant,
        #[command(flatten)]
        arch: ArchArgs,
        /// `json` dumps the full graph document.
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-node cost report for one variant.
    Cost {
        variant: BackboneVariant,
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Compare variants on one metric.
    Compare {
        /// `gmadds` uses the reconstructed graphs unless `--measured` is set;
        /// the fps metrics always come from the measurement file.
        #[arg(long, default_value = "gmadds")]
        metric: Metric,
        /// Take GMAdd values from the measurement file.
        #[arg(long)]
        measured: bool,
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// mAP per class and overall for every measured variant.
    Map {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Pareto-optimal variants under (minimum GMAdd, maximum mAP).
    Pareto {
        #[arg(long, default_value = "overall")]
        scope: Scope,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Amdahl's-law speedup bounds and fps projections.
    Amdahl {
        /// Timing profile (JSON) with per-stage time fractions and base latency.
        #[arg(long, conflicts_with = "fraction")]
        profile: Option<PathBuf>,
        /// Accelerated fraction of the run time, in (0, 1).
        #[arg(long)]
        fraction: Option<String>,
        /// STAGE=FACTOR with a profile, or FACTOR with --fraction; `inf`
        /// removes the stage entirely. Repeatable.
        #[arg(long = "speedup", value_name = "SPEEDUP")]
        speedups: Vec<String>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// SVG scatter of mAP against GMAdd with the Pareto front highlighted.
    Plot {
        #[arg(long, default_value = "overall")]
        scope: Scope,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Cost reports of all variants in one document.
    Export {
        #[arg(long, value_enum, default_value_t = ExportFormat::Json)]
        format: ExportFormat,
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ArchArgs {
    /// Architecture config (JSON, or TOML for `.toml` files).
    #[arg(long)]
    config: Option<PathBuf>,
    /// KEY=VALUE override applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ArchArgs {
    fn load(&self) -> Result<ArchConfig> {
        let mut cfg = match &self.config {
            Some(path) => ArchConfig::from_path(path)?,
            None => ArchConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Measurement file; defaults to the bundled KITTI validation results.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        match &self.data {
            Some(path) => {
                let text = read(path)?;
                Dataset::from_json(&text).with_context(|| path.display().to_string())
            }
            None => Ok(analysis::bundled_dataset()),
        }
    }
}

#[derive(Args)]
struct OutArgs {
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    Csv,
    Json,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

fn render(table: &Table, format: Format) -> String {
    match format {
        Format::Text => table.to_text(),
        Format::Csv => table.to_csv(),
        Format::Json => table.to_json() + "\n",
    }
}

fn describe(variant: BackboneVariant, cfg: &ArchConfig) -> Result<String> {
    let graph = build_pointpillars(variant, cfg)?;
    let shapes = shape_infer::infer_all(&graph)?;
    let cost = graph_cost(&graph, cfg.cost_options())?;
    let mut out = format!("{variant}: {}\n", variant.description());
    out.push_str(&format!("nodes: {}, edges: {}\n\n", graph.len(), graph.edges().len()));
    let mut blocks = Table::new(["block", "channels", "units", "stride", "output"]);
    for i in 0..cfg.block_channels.len() {
        let prefix = format!("backbone.block{}.", i + 1);
        let last = graph
            .nodes()
            .iter()
            .filter(|n| n.name.starts_with(&prefix))
            .max_by_key(|n| n.id)
            .map(|n| shapes.output(n.id).map(|s| s.to_string()).unwrap_or_default())
            .unwrap_or_default();
        blocks.push([
            format!("block{}", i + 1),
            cfg.block_channels[i].to_string(),
            cfg.block_units[i].to_string(),
            cfg.block_strides[i].to_string(),
            last,
        ]);
    }
    out.push_str(&blocks.to_text());
    out.push('\n');
    let mut stages = Table::new(["stage", "madds", "params"]);
    for (stage, c) in cost.stages_in_order() {
        stages.push([stage.to_string(), c.madds.to_string(), c.params.to_string()]);
    }
    out.push_str(&stages.to_text());
    out.push_str(&format!("\nTOTAL {} GMAdd, {} params\n", format_fixed(&cost.gmadds(), 2), cost.total_params));
    Ok(out)
}

fn amdahl_command(profile: Option<&Path>, fraction: Option<&str>, speedups: &[String]) -> Result<Table> {
    let mut t = Table::new(["quantity", "value"]);
    match (profile, fraction) {
        (Some(path), _) => {
            let profile = TimingProfile::from_json(&read(path)?).with_context(|| path.display().to_string())?;
            let mut map = BTreeMap::new();
            for s in speedups {
                let (stage, factor) =
                    s.split_once('=').with_context(|| format!("speedup '{s}' is not STAGE=FACTOR"))?;
                let factor: Speedup = factor.parse().map_err(anyhow::Error::msg)?;
                map.insert(stage.trim().to_string(), factor);
            }
            let base = profile.base_fps();
            let su = profile.pipeline_speedup(&map)?;
            let fps = analysis::project_fps(&profile, &map)?;
            t.push(["base_fps".to_string(), format_fixed(&base, 3)]);
            for (stage, f) in &profile.stage_fractions {
                t.push([format!("{stage}.max_speedup"), bound(f)?]);
            }
            t.push(["pipeline_speedup".to_string(), format_fixed(&su, 3)]);
            t.push(["projected_fps".to_string(), format_fixed(&fps, 3)]);
        }
        (None, Some(p)) => {
            let p = exact::parse_decimal(p).with_context(|| format!("fraction '{p}' is not a number"))?;
            t.push(["max_speedup".to_string(), format_fixed(&analysis::amdahl_max(&p)?, 3)]);
            for s in speedups {
                let factor: Speedup = s.parse().map_err(anyhow::Error::msg)?;
                t.push([format!("speedup@{}", s.trim()), format_fixed(&analysis::amdahl(&p, &factor)?, 3)]);
            }
        }
        (None, None) => bail!("amdahl needs --profile or --fraction"),
    }
    Ok(t)
}

fn bound(f: &exact::Exact) -> Result<String> {
    if *f == exact::one() {
        return Ok("inf".to_string());
    }
    Ok(format_fixed(&analysis::amdahl_max(f)?, 3))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::List { format } => {
            let mut t = Table::new(["variant", "unit"]);
            for v in BackboneVariant::ALL {
                t.push([v.label(), v.description()]);
            }
            let text = match format {
                Format::Text => BackboneVariant::ALL.iter().map(|v| format!("{v}\n")).collect(),
                f => render(&t, f),
            };
            emit(None, &text)
        }
        Command::Describe { variant, arch, format, output } => {
            let cfg = arch.load()?;
            let text = match format {
                Format::Json => build_pointpillars(variant, &cfg)?.to_json() + "\n",
                Format::Text => describe(variant, &cfg)?,
                Format::Csv => bail!("describe supports text and json output"),
            };
            emit(output.as_deref(), &text)
        }
        Command::Cost { variant, arch, out } => {
            let cfg = arch.load()?;
            let cost = graph_cost(&build_pointpillars(variant, &cfg)?, cfg.cost_options())?;
            let text = match out.format {
                Format::Text => report::cost_text(&cost),
                Format::Csv => cost.to_csv(),
                Format::Json => cost.to_json() + "\n",
            };
            emit(out.output.as_deref(), &text)
        }
        Command::Compare { metric, measured, arch, data, out } => {
            let table = if metric == Metric::Gmadds && !measured {
                report::compare_table(&cost_all(&arch.load()?)?)
            } else {
                report::ratio_report(&data.load()?, metric)?
            };
            emit(out.output.as_deref(), &render(&table, out.format))
        }
        Command::Map { data, out } => {
            let table = report::map_report(&data.load()?)?;
            emit(out.output.as_deref(), &render(&table, out.format))
        }
        Command::Pareto { scope, data, out } => {
            let ds = data.load()?;
            let text = match out.format {
                Format::Text => analysis::pareto_front(&ds.points, scope)?.iter().map(|n| format!("{n}\n")).collect(),
                f => render(&report::pareto_report(&ds, scope)?, f),
            };
            emit(out.output.as_deref(), &text)
        }
        Command::Amdahl { profile, fraction, speedups, out } => {
            let t = amdahl_command(profile.as_deref(), fraction.as_deref(), &speedups)?;
            emit(out.output.as_deref(), &render(&t, out.format))
        }
        Command::Plot { scope, data, output } => {
            let ds = data.load()?;
            let front = analysis::pareto_front(&ds.points, scope)?;
            emit(output.as_deref(), &report::render_scatter(&ds.points, scope, &front)?)
        }
        Command::Export { format, arch, output } => {
            let all = cost_all(&arch.load()?)?;
            let text = match format {
                ExportFormat::Json => {
                    let doc: BTreeMap<&str, _> = all.iter().map(|(v, r)| (v.label(), r)).collect();
                    serde_json::to_string_pretty(&doc)? + "\n"
                }
                ExportFormat::Csv => {
                    let mut t = Table::new(["variant", "name", "kind", "madds", "params"]);
                    for (v, r) in &all {
                        for n in &r.per_node {
                            t.push([
                                v.label().to_string(),
                                n.name.clone(),
                                n.kind.clone(),
                                n.madds.to_string(),
                                n.params.to_string(),
                            ]);
                        }
                    }
                    t.to_csv()
                }
            };
            emit(output.as_deref(), &text)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
