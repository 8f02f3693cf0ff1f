use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use tap_core::generation::{CachedBackend, FixtureBackend, GenerationConfig, GenerationJob, Generator, LlmBackend};

use crate::error::{CliError, CliResult};
use crate::http::HttpBackend;
use crate::io::{load_config, read_input, write_json, write_text};

#[derive(Args, Debug)]
pub struct GenToaArgs {
    /// Config echo of an earlier run; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// One class name per line.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[arg(long, conflicts_with = "description_file")]
    pub description: Option<String>,
    #[arg(long)]
    pub description_file: Option<PathBuf>,
    /// Chat model identifier, also part of every cache key.
    #[arg(long)]
    pub backend: Option<String>,
    /// Transcript file or directory to replay instead of querying a model.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    /// Picks the step-2 seed class.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_reprompts: Option<usize>,
    #[arg(long)]
    pub max_concurrency: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GenToaConfig {
    pub dataset: Option<String>,
    pub classes: Vec<String>,
    pub description: String,
    pub backend: Option<String>,
    pub fixture: Option<PathBuf>,
    pub seed: u64,
    pub generation: GenerationConfig,
    pub output: Option<PathBuf>,
}

impl GenToaConfig {
    fn resolve(args: GenToaArgs) -> CliResult<Self> {
        let mut cfg: GenToaConfig = match &args.config {
            Some(p) => load_config(p)?,
            None => GenToaConfig::default(),
        };
        if let Some(d) = args.dataset {
            cfg.dataset = Some(d);
        }
        if let Some(path) = &args.classes {
            cfg.classes = read_input(path, "classes file")?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        }
        if let Some(d) = args.description {
            cfg.description = d;
        }
        if let Some(path) = &args.description_file {
            cfg.description = read_input(path, "description file")?.trim().to_string();
        }
        if args.backend.is_some() {
            cfg.backend = args.backend;
        }
        if args.fixture.is_some() {
            cfg.fixture = args.fixture;
        }
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(n) = args.max_reprompts {
            cfg.generation.max_reprompts = n;
        }
        if let Some(n) = args.max_concurrency {
            cfg.generation.max_concurrency = n;
        }
        if let Some(t) = args.temperature {
            cfg.generation.temperature = t;
        }
        if args.output.is_some() {
            cfg.output = args.output;
        }
        if cfg.classes.is_empty() {
            return Err(CliError::args("no classes: pass --classes <file>"));
        }
        if cfg.dataset.is_none() || cfg.backend.is_none() || cfg.output.is_none() {
            return Err(CliError::args("--dataset, --backend and --output are required"));
        }
        if let Some(f) = &cfg.fixture {
            if !f.exists() {
                return Err(CliError::args(format!("fixture {} does not exist", f.display())));
            }
        }
        Ok(cfg)
    }
}

fn backend(cfg: &GenToaConfig, id: &str) -> CliResult<Box<dyn LlmBackend>> {
    if let Some(f) = &cfg.fixture {
        return Ok(Box::new(FixtureBackend::load(id, f).map_err(|e| CliError::io(f, e))?));
    }
    let live = HttpBackend::from_env(id, cfg.generation.temperature);
    Ok(match CachedBackend::from_env(live) {
        Ok(cached) => Box::new(cached),
        Err(live) => Box::new(live),
    })
}

pub fn run(args: GenToaArgs) -> CliResult<()> {
    let cfg = GenToaConfig::resolve(args)?;
    let (dataset, id, out) = (cfg.dataset.clone().unwrap(), cfg.backend.clone().unwrap(), cfg.output.clone().unwrap());
    let job = GenerationJob::new(&dataset, &cfg.description, cfg.classes.clone(), &id, cfg.seed, cfg.generation.clone())?;
    let backend = backend(&cfg, &id)?;
    write_json(&out.join("config.json"), &cfg)?;
    let mut generator = Generator::new(backend.as_ref());
    let result = generator.run(&job);
    write_text(&out.join("transcript.json"), &generator.transcript.to_json())?;
    let tree = result?;
    write_text(&out.join("toa.json"), &tree.to_json())?;
    log::info!("{} attributes, {} classes", tree.attribute_names.len(), tree.num_classes());
    println!("{}", out.join("toa.json").display());
    Ok(())
}
