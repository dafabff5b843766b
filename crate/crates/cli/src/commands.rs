//! Subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use stylefit::checkpoint;
use stylefit::domain::{load_catalog, styles_of, Catalog, Outfit, Template};
use stylefit::encoder::FeatureTable;
use stylefit::evaluation::{evaluate, render_table, spearman, sweep_affine_fraction};
use stylefit::generation::style_sweep;
use stylefit::model::Model;
use stylefit::plot::{bar_chart, line_chart};
use stylefit::style_rep::{RepVariant, StyleRepConfig};
use stylefit::synthgen::{generate, write_dataset, FeatureMode, NegativeKind, PlantedStructure};
use stylefit::training::{train_stage1, train_stage2, write_csv, TrainData};

use crate::config::RunConfig;
use crate::service::{router, run_generate, GenerateBody, ServiceState, TemplateInput};

#[derive(Debug, Parser)]
#[command(name = "stylefit", version, about = "Style-conditioned outfit compatibility and generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// RNG seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic catalog and outfit set.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        styles: Option<usize>,
        #[arg(long)]
        outfits: Option<usize>,
        #[arg(long)]
        mode: Option<FeatureMode>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: train the style encoder and classifier.
    TrainSenet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Per-epoch CSV log (default: <out>.stage1.csv).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: train the compatibility network on a stage-1 checkpoint.
    TrainScanet {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Style representation variant (sample, params, mean_plus_pooled_mean,
        /// params_plus_pooled, sample_plus_pooled_mean, independent).
        #[arg(long)]
        rep: Option<String>,
        #[arg(long)]
        learned_lambda: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained model on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        negatives: Option<NegativeKind>,
        /// Style-independent ablation checkpoint for the paired comparison.
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Directory for SVG plots.
        #[arg(long)]
        plots: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate outfits for a parent item, template and style blend.
    Generate {
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        parent: String,
        /// Comma-separated high-level categories.
        #[arg(long)]
        template: String,
        /// Style weights: `party=0.7,formal=0.3` or a single style name.
        #[arg(long)]
        style: String,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        beam: Option<usize>,
        /// Rescale weights to sum to 1.
        #[arg(long)]
        normalize: bool,
        /// Sample style representations with --seed instead of using means.
        #[arg(long)]
        sample: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Top-1 outfits along a blend from one style to another.
    Sweep {
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        parent: String,
        #[arg(long)]
        template: String,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        beam: Option<usize>,
        /// Write the planted-affinity curve as SVG.
        #[arg(long)]
        svg: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[command(flatten)]
        common: Common,
    },
}

/// Parse `a=0.7,b=0.3`; a bare name means weight 1.
pub fn parse_weights(s: &str) -> anyhow::Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, w) = match part.split_once('=') {
            Some((n, w)) => (n.trim(), w.trim().parse::<f64>().with_context(|| format!("bad weight in {part:?}"))?),
            None => (part, 1.0),
        };
        if out.insert(name.to_string(), w).is_some() {
            bail!("style {name} given twice");
        }
    }
    if out.is_empty() {
        bail!("no style weights given");
    }
    Ok(out)
}

fn parse_rep(name: &str) -> anyhow::Result<RepVariant> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .with_context(|| format!("unknown representation variant {name:?}"))
}

struct Loaded {
    catalog: Catalog,
    outfits: Vec<Outfit>,
    table: FeatureTable,
    styles: Vec<String>,
}

fn load_data(dir: &Path) -> anyhow::Result<Loaded> {
    let (catalog, outfits) = load_catalog(dir).with_context(|| format!("loading data from {}", dir.display()))?;
    let table = FeatureTable::from_catalog(&catalog, dir)?;
    let styles = styles_of(&outfits)?.names().to_vec();
    Ok(Loaded {
        catalog,
        outfits,
        table,
        styles,
    })
}

fn load_model(path: &Path) -> anyhow::Result<Model<f32>> {
    checkpoint::load::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            out,
            styles,
            outfits,
            mode,
            common,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?.gen;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(m) = styles {
                cfg.m_styles = m;
            }
            if let Some(n) = outfits {
                cfg.n_outfits = n;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let data = generate(&cfg)?;
            write_dataset(&data, &out)?;
            println!(
                "wrote {} items, {} outfits, {} styles to {}",
                data.catalog.len(),
                data.outfits.len(),
                data.styles.len(),
                out.display()
            );
        }
        Command::TrainSenet {
            data,
            out,
            epochs,
            log,
            common,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?.train;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.stage1.epochs = e;
            }
            let d = load_data(&data)?;
            let input = TrainData {
                catalog: &d.catalog,
                outfits: &d.outfits,
                table: &d.table,
                styles: &d.styles,
            };
            let result = train_stage1::<f32>(&input, &cfg)?;
            write_csv(log.unwrap_or_else(|| sidecar(&out, ".stage1.csv")), &result.log)?;
            checkpoint::save(&result.model, &out)?;
            if let Some(last) = result.log.last() {
                println!(
                    "stage 1: {} epochs, best valid accuracy {:.4}, checkpoint {}",
                    last.epoch,
                    result.log.iter().map(|e| e.valid_accuracy).fold(0.0, f64::max),
                    out.display()
                );
            }
        }
        Command::TrainScanet {
            data,
            checkpoint: stage1,
            out,
            rep,
            learned_lambda,
            epochs,
            log,
            common,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?.train;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.stage2.epochs = e;
            }
            let mut rep_cfg = cfg.model.rep.clone();
            if let Some(name) = rep {
                rep_cfg = StyleRepConfig::new(parse_rep(&name)?);
            }
            rep_cfg.learned_lambda |= learned_lambda;
            let d = load_data(&data)?;
            let model = load_model(&stage1)?;
            if model.styles != d.styles {
                bail!("checkpoint styles {:?} do not match data styles {:?}", model.styles, d.styles);
            }
            let input = TrainData {
                catalog: &d.catalog,
                outfits: &d.outfits,
                table: &d.table,
                styles: &d.styles,
            };
            let result = train_stage2(&input, model, rep_cfg, &cfg)?;
            write_csv(log.unwrap_or_else(|| sidecar(&out, ".stage2.csv")), &result.log)?;
            checkpoint::save(&result.model, &out)?;
            if let Some(last) = result.log.last() {
                println!(
                    "stage 2: {} epochs, best valid FITB {:.4}, checkpoint {}",
                    last.epoch,
                    result.log.iter().map(|e| e.valid_fitb).fold(0.0, f64::max),
                    out.display()
                );
            }
        }
        Command::Eval {
            checkpoint: ck,
            data,
            negatives,
            ablation,
            out,
            plots,
            common,
        } => {
            let mut opts = RunConfig::load(common.config.as_deref())?.eval;
            if let Some(s) = common.seed {
                opts.seed = s;
            }
            if let Some(k) = negatives {
                opts.negatives = k;
            }
            let d = load_data(&data)?;
            let model = load_model(&ck)?;
            let abl = ablation.as_deref().map(load_model).transpose()?;
            let report = evaluate(&model, abl.as_ref(), &d.catalog, &d.outfits, &d.table, &opts)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)
                .with_context(|| format!("writing {}", out.display()))?;
            print!("{}", render_table(&report));
            if let Some(dir) = plots {
                std::fs::create_dir_all(&dir)?;
                let mut ent = vec![("model".to_string(), report.entropy.mean_entropy)];
                let mut disc = vec![("model".to_string(), report.discriminative.overall)];
                if let Some(a) = &report.ablation {
                    ent.push(("ablation".into(), a.entropy.mean_entropy));
                    disc.push(("ablation".into(), a.discriminative.overall));
                }
                std::fs::write(dir.join("entropy.svg"), bar_chart("Style entropy (nats)", &ent))?;
                std::fs::write(dir.join("discriminative.svg"), bar_chart("Discriminative-category rate", &disc))?;
            }
        }
        Command::Generate {
            checkpoint: ck,
            data,
            parent,
            template,
            style,
            top,
            beam,
            normalize,
            sample,
            common,
        } => {
            let defaults = RunConfig::load(common.config.as_deref())?.generation;
            let state = ServiceState::load(&ck, &data)?;
            let body = GenerateBody {
                parent_id: parent,
                template: TemplateInput::Text(template),
                style_weights: parse_weights(&style)?,
                top_k: top.unwrap_or(defaults.top_k),
                beam: beam.unwrap_or(defaults.beam),
                sample_seed: if sample { Some(common.seed.unwrap_or(0)) } else { None },
                normalize,
            };
            print_json(&run_generate(&state, &body)?)?;
        }
        Command::Sweep {
            checkpoint: ck,
            data,
            parent,
            template,
            from,
            to,
            steps,
            beam,
            svg,
            common,
        } => {
            let defaults = RunConfig::load(common.config.as_deref())?.generation;
            let d = load_data(&data)?;
            let model = load_model(&ck)?;
            let scorer = model.scorer(&d.catalog, &d.table)?;
            let template: Template = template.parse()?;
            let sweep = style_sweep(
                &scorer,
                &d.catalog,
                &parent,
                &template,
                &from,
                &to,
                steps,
                beam.unwrap_or(defaults.beam),
            )?;
            let rows: Vec<serde_json::Value> = sweep
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "t": s.t,
                        "score": s.outfit.score,
                        "items": s.outfit.items.iter().map(|&p| d.catalog.item(p).id.clone()).collect::<Vec<_>>(),
                    })
                })
                .collect();
            print_json(&rows)?;
            if let Some(path) = svg {
                let planted = PlantedStructure::load(&data).context("the sweep plot needs planted_structure.json")?;
                let parent_pos = d.catalog.position(&parent).expect("validated by the sweep");
                let curve = sweep_affine_fraction(
                    &d.catalog,
                    &planted,
                    parent_pos,
                    &sweep,
                    model.style_index(&from)?,
                    model.style_index(&to)?,
                );
                let (ts, fs): (Vec<f64>, Vec<f64>) = curve.iter().copied().unzip();
                log::info!("Spearman(t, {to}-affine fraction) = {:.3}", spearman(&ts, &fs));
                let title = format!("{from} → {to}");
                std::fs::write(&path, line_chart(&title, "t", &[(format!("{to}-affine"), curve)]))?;
            }
        }
        Command::Serve {
            checkpoint: ck,
            data,
            host,
            port,
            common: _,
        } => {
            let state = Arc::new(ServiceState::load(&ck, &data)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                log::info!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, router(state)).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
