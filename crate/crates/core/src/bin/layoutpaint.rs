use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layoutpaint::cc::CcTrace;
use layoutpaint::config::{parse_override, EngineConfig};
use layoutpaint::engine::{new_job_id, Engine};
use layoutpaint::backends::BackendError;
use layoutpaint::error::{PipelineError, Stage};
use layoutpaint::eval::{prepare_layouts, EvalReport, PrepareOptions};
use layoutpaint::layout::load_layout_file;
use layoutpaint::sog::{generate_object_traced, SogConfig, SogTrace};
use layoutpaint::tensor::Image;

#[derive(Parser)]
#[command(name = "layoutpaint", version, about = "Layout-conditional text-to-image generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML (or .json) engine config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<EngineConfig, PipelineError> {
        let overrides = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>, _>>()?;
        let mut cfg = EngineConfig::load(self.config.as_deref(), &overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run both stages for a layout, or regenerate one object of a job.
    Generate {
        #[arg(long, required_unless_present = "from_job")]
        layout: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Scene seed; with --regenerate-object, the object's new seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        job_id: Option<String>,
        /// Existing job directory to regenerate from.
        #[arg(long, requires = "regenerate_object")]
        from_job: Option<PathBuf>,
        #[arg(long, requires = "from_job")]
        regenerate_object: Option<String>,
    },
    /// Generate a single object on a flat background.
    Sog {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        object: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the decoded clean-latent prediction of every step here.
        #[arg(long)]
        dump_intermediate: Option<PathBuf>,
    },
    /// Re-run composition on the stage-1 outputs of a job.
    Compose {
        #[arg(long)]
        from_job: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dump_intermediate: Option<PathBuf>,
    },
    /// Local CLIP / local IoU over COCO-format annotations.
    Eval {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 512)]
        target_size: usize,
        #[arg(long, default_value_t = 0.05)]
        min_area: f64,
        #[arg(long, default_value = "a photo of a {}")]
        prompt_template: String,
        /// Report path (JSON); the table goes to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sweep starting timestep and flat colour for one object; writes a grid
    /// (relative paths resolve under the output directory).
    AblateStart {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        object: String,
        #[arg(long, value_delimiter = ',', default_value = "200,400,600,800,1000")]
        t_starts: Vec<usize>,
        /// Colour names (black, white, gray, red, green, blue) or r:g:b in [-1, 1].
        #[arg(long, value_delimiter = ',', default_value = "black,gray,white")]
        colors: Vec<String>,
        #[arg(long, default_value = "ablate_start.png")]
        grid: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "code": e.code(),
                "stage": e.stage(),
                "message": e.to_string(),
            });
            eprintln!("{body}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Command) -> Result<(), PipelineError> {
    match cmd {
        Command::Generate {
            layout,
            cfg,
            seed,
            job_id,
            from_job,
            regenerate_object,
        } => {
            let id = job_id.unwrap_or_else(new_job_id);
            if let (Some(from), Some(object)) = (from_job, regenerate_object) {
                let engine = Engine::from_job(&from)?;
                let out_root = cfg
                    .out
                    .clone()
                    .or_else(|| from.parent().map(Path::to_path_buf))
                    .unwrap_or_else(|| PathBuf::from("."));
                let dir = out_root.join(&id);
                engine.regenerate_job(&from, &object, seed, &dir, None)?;
                println!("{}", dir.display());
                return Ok(());
            }
            let mut config = cfg.load()?;
            if let Some(s) = seed {
                config.seed = s;
            }
            let layout = load_layout_file(layout.as_deref().expect("clap enforces --layout"))?;
            let dir = config.output_dir.join(&id);
            Engine::new(config)?.run_job(&layout, &dir, None)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Sog {
            layout,
            object,
            cfg,
            seed,
            dump_intermediate,
        } => {
            let config = cfg.load()?;
            let layout = load_layout_file(&layout)?;
            let mut spec = layout
                .object(&object)
                .cloned()
                .ok_or_else(|| PipelineError::NotFound(format!("object {object:?} is not in the layout")))?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let engine = Engine::new(config)?;
            engine.preflight(&layout)?;
            let backends = engine.backends_for(&layout)?;
            let mut trace = SogTrace::default();
            let r = generate_object_traced(
                &spec,
                &engine.config().sog,
                engine.schedule(),
                &backends,
                Some(&mut trace),
            )?;
            let dir = engine.config().output_dir.join(format!("sog-{}", spec.id));
            mkdir(&dir)?;
            save(&r.image, &dir.join("image.png"))?;
            write(&dir.join("latent.bin"), &r.latent_x0.to_bytes())?;
            if let Some(dump) = dump_intermediate {
                mkdir(&dump)?;
                for (k, step) in trace.steps.iter().enumerate() {
                    let img = backends
                        .latent_codec
                        .decode(&step.x0_pred)
                        .map_err(decode_err(Stage::Sog))?;
                    save(&img, &dump.join(format!("step{k:03}_t{:04}.png", step.t)))?;
                }
            }
            println!("{}", dir.display());
            Ok(())
        }
        Command::Compose {
            from_job,
            cfg,
            seed,
            dump_intermediate,
        } => {
            let mut config = if cfg.config.is_some() || !cfg.set.is_empty() {
                cfg.load()?
            } else {
                let mut c = EngineConfig::load(Some(&from_job.join("config.toml")), &[])?;
                if let Some(out) = &cfg.out {
                    c.output_dir = out.clone();
                }
                c
            };
            if let Some(s) = seed {
                config.seed = s;
            }
            let dir = config.output_dir.join(new_job_id());
            let engine = Engine::new(config)?;
            let mut trace = CcTrace::default();
            engine.compose_job(&from_job, &dir, Some(&mut trace))?;
            if let Some(dump) = dump_intermediate {
                mkdir(&dump)?;
                let layout = load_layout_file(&from_job.join("layout.json"))?;
                let backends = engine.backends_for(&layout)?;
                for (k, step) in trace.steps.iter().enumerate() {
                    let img = backends
                        .latent_codec
                        .decode(&step.latent)
                        .map_err(decode_err(Stage::Cc))?;
                    save(&img, &dump.join(format!("step{k:03}_t{:04}.png", step.t_prev)))?;
                }
            }
            println!("{}", dir.display());
            Ok(())
        }
        Command::Eval {
            annotations,
            limit,
            target_size,
            min_area,
            prompt_template,
            report,
            cfg,
        } => {
            let config = cfg.load()?;
            let json = std::fs::read(&annotations).map_err(|e| io_err(&annotations, e))?;
            let opts = PrepareOptions {
                min_area_fraction: min_area,
                target_size,
                prompt_template: prompt_template.clone(),
            };
            let mut layouts = prepare_layouts(&json, &opts)?;
            if let Some(n) = limit {
                layouts.truncate(n);
            }
            let engine = Engine::new(config)?;
            let mut records = Vec::new();
            for cl in &layouts {
                let out = engine.run(&cl.layout, &|_| {})?;
                let backends = engine.backends_for(&cl.layout)?;
                records.extend(EvalReport::score_layout(
                    &cl.image_id.to_string(),
                    &out.scene.image,
                    &cl.layout,
                    backends.embedder.as_ref(),
                    backends.segmenter.as_ref(),
                )?);
            }
            let notes = vec![
                format!("object prompt template: {prompt_template:?}"),
                "global prompt: comma-joined category names (protocol assumption)".into(),
                format!("masks with area fraction < {min_area} dropped; resized to {target_size}x{target_size} nearest-neighbour"),
                format!("backends: {:?}", engine.config().backends),
            ];
            let rep = EvalReport::from_records(notes, layouts.len(), records);
            print!("{}", rep.to_table());
            if let Some(p) = report {
                write(&p, &serde_json::to_vec_pretty(&rep).expect("report serializes"))?;
            }
            Ok(())
        }
        Command::AblateStart {
            layout,
            object,
            t_starts,
            colors,
            grid,
            cfg,
        } => {
            let config = cfg.load()?;
            let layout = load_layout_file(&layout)?;
            let spec = layout
                .object(&object)
                .cloned()
                .ok_or_else(|| PipelineError::NotFound(format!("object {object:?} is not in the layout")))?;
            let grid = config.output_dir.join(grid);
            let engine = Engine::new(config)?;
            engine.preflight(&layout)?;
            let backends = engine.backends_for(&layout)?;
            let (h, w) = (layout.canvas_height, layout.canvas_width);
            let mut canvas = image::RgbImage::new((w * t_starts.len()) as u32, (h * colors.len()) as u32);
            for (row, color) in colors.iter().enumerate() {
                let rgb = parse_color(color)?;
                for (col, &t) in t_starts.iter().enumerate() {
                    let sog = SogConfig {
                        t_start: t,
                        flat_color: rgb,
                        ..engine.config().sog.clone()
                    };
                    let r = layoutpaint::sog::generate_object(&spec, &sog, engine.schedule(), &backends)?;
                    let tile = r.image.to_rgb8();
                    image::imageops::replace(&mut canvas, &tile, (col * w) as i64, (row * h) as i64);
                }
            }
            if let Some(parent) = grid.parent() {
                std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            canvas
                .save(&grid)
                .map_err(|e| io_err(&grid, std::io::Error::other(e)))?;
            println!("{}", grid.display());
            Ok(())
        }
        Command::Serve { addr, cfg } => {
            let config = cfg.load()?;
            let out = config.output_dir.clone();
            let state = layoutpaint::server::AppState::new(config, out);
            let rt = tokio::runtime::Runtime::new().map_err(|e| io_err(Path::new(&addr), e))?;
            rt.block_on(layoutpaint::server::serve(&addr, state))
                .map_err(|e| io_err(Path::new(&addr), e))
        }
    }
}

fn parse_color(s: &str) -> Result<[f64; 3], PipelineError> {
    Ok(match s {
        "black" => [-1.0; 3],
        "white" => [1.0; 3],
        "gray" | "grey" => [0.0; 3],
        "red" => [1.0, -1.0, -1.0],
        "green" => [-1.0, 1.0, -1.0],
        "blue" => [-1.0, -1.0, 1.0],
        other => {
            let parts: Vec<f64> = other
                .split(':')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| PipelineError::Config(format!("unknown colour {other:?}")))?;
            <[f64; 3]>::try_from(parts)
                .map_err(|_| PipelineError::Config(format!("colour {other:?} needs r:g:b")))?
        }
    })
}

fn decode_err(stage: Stage) -> impl Fn(BackendError) -> PipelineError {
    move |source| PipelineError::Backend {
        stage,
        object: None,
        source,
    }
}

fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn mkdir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn save(img: &Image, path: &Path) -> Result<(), PipelineError> {
    img.save_png(path).map_err(|e| PipelineError::Tensor {
        stage: layoutpaint::error::Stage::Io,
        source: e,
    })
}
