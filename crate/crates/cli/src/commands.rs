use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use legrad_core::eval::{run_benchmark, BenchParams, Manifest, Protocol};
use legrad_core::explain::{ExplainParams, Query, Target};
use legrad_core::fixtures::{
    check_parity, default_battery, make_tiny_vit, run_fd_battery, TinySpec,
};
use legrad_core::imaging::Raster;
use legrad_core::tensor::TensorContainer;
use legrad_core::Error;
use legrad_server::service::explain_image;
use legrad_server::{
    with_bundle, Bundle, ExplainRequest, ExplainResponse, Precision, QuerySpec, Registry,
    ServeError, ServerConfig,
};

use crate::{
    Cli, Command, EvalArgs, EvalPerturbArgs, EvalPointsArgs, EvalSegArgs, ExplainArgs,
    FdBatteryArgs, MakeTinyArgs, MethodArgs, ModelArgs, ParityArgs, ServeArgs,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_LOAD: u8 = 3;
pub const EXIT_INFERENCE: u8 = 4;
pub const EXIT_BIND: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    fn load(message: impl Into<String>) -> Self {
        Self::new(EXIT_LOAD, message)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

/// Errors the caller can fix by changing arguments map to the usage code;
/// everything else raised while running the model is an inference failure.
fn classify(e: Error) -> Failure {
    match e {
        Error::UnknownLabel(_)
        | Error::ClassIndex { .. }
        | Error::UnknownClassifier(_)
        | Error::UnknownEmbedding(_)
        | Error::LayerRange(_)
        | Error::LayerOutOfRange { .. }
        | Error::WrongPooling { .. }
        | Error::Config(_)
        | Error::Image(_) => Failure::usage(e.to_string()),
        other => Failure::new(EXIT_INFERENCE, other.to_string()),
    }
}

/// Up to three labels closest to `wanted` by normalized edit distance.
pub fn suggestions(wanted: &str, labels: &[String]) -> Vec<String> {
    let wanted = wanted.to_lowercase();
    let mut scored: Vec<(f64, &String)> = labels
        .iter()
        .map(|l| {
            (
                strsim::normalized_damerau_levenshtein(&wanted, &l.to_lowercase()),
                l,
            )
        })
        .filter(|(s, _)| *s >= 0.4)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.into_iter().take(3).map(|(_, l)| l.clone()).collect()
}

fn unknown_label(bundle: &Bundle, label: &str, classifier: Option<&str>) -> Failure {
    let labels = with_bundle!(bundle, m => m.labels(classifier)).unwrap_or_default();
    let close = suggestions(label, &labels);
    let hint = if close.is_empty() {
        let shown: Vec<&str> = labels.iter().take(10).map(String::as_str).collect();
        format!("known labels: {}", shown.join(", "))
    } else {
        format!("did you mean: {}?", close.join(", "))
    };
    Failure::usage(format!("unknown label {label:?}; {hint}"))
}

fn resolve_model(args: &ModelArgs) -> Outcome<PathBuf> {
    let direct = PathBuf::from(&args.model);
    if direct.is_file() {
        return Ok(direct);
    }
    if let Some(dir) = &args.model_dir {
        for candidate in [
            dir.join(&args.model),
            dir.join(format!("{}.lgtc", args.model)),
        ] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Failure::load(format!("model {:?} not found", args.model)))
}

fn load_model(args: &ModelArgs) -> Outcome<(String, Bundle)> {
    let path = resolve_model(args)?;
    let id = path
        .file_stem()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned();
    let bundle = Bundle::load(&path, args.precision)
        .map_err(|e| Failure::load(format!("{}: {e}", path.display())))?;
    Ok((id, bundle))
}

fn explain_params(m: &MethodArgs) -> ExplainParams {
    ExplainParams {
        method: m.method,
        layers: m.layers.clone(),
        gradcam_layer: m.gradcam_layer,
        suppress_background: m.suppress_background,
        suppress_threshold: m.suppress_threshold,
    }
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    std::fs::write(path, bytes)
        .map_err(|e| Failure::new(EXIT_INFERENCE, format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))
}

fn explain(args: ExplainArgs) -> Outcome {
    let (id, bundle) = load_model(&args.model)?;
    let raster = Raster::open(&args.image).map_err(classify)?;
    let spec = QuerySpec {
        label: args.query.query.clone(),
        class_index: args.query.class_index,
        embedding_name: args.query.embedding.clone(),
    };
    let target = match (&spec.label, spec.class_index, &spec.embedding_name) {
        (Some(l), _, _) => Target::Label(l.clone()),
        (_, Some(i), _) => Target::ClassIndex(i),
        (_, _, Some(e)) => Target::EmbeddingName(e.clone()),
        _ => {
            return Err(Failure::usage(
                "one of --query, --class-index, --embedding is required",
            ))
        }
    };
    let query = Query {
        classifier: args.method.classifier.clone(),
        target,
    };
    let params = explain_params(&args.method);
    let out =
        explain_image(&bundle, &raster, &query, &params, args.threshold).map_err(|e| match e {
            Error::UnknownLabel(l) => unknown_label(&bundle, &l, query.classifier.as_deref()),
            other => classify(other),
        })?;

    let request = ExplainRequest {
        model: id.clone(),
        image: None,
        query: Some(spec),
        classifier: args.method.classifier.clone(),
        method: params.method,
        layer_range: params.layers.clone(),
        gradcam_layer: params.gradcam_layer,
        threshold: args.threshold,
        suppress_background: params.suppress_background,
        suppress_threshold: params.suppress_threshold,
        mode: None,
        class_source: None,
        timing: false,
    };
    let json = ExplainResponse::new(&id, &bundle, &request, &out, false).to_json_pretty();
    let stem = match &args.name {
        Some(n) => n.clone(),
        None => args
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "explanation".into()),
    };
    create_dir(&args.out_dir)?;
    let files = [
        (format!("{stem}_overlay.png"), out.overlay_png.as_slice()),
        (format!("{stem}_heatmap.png"), out.heatmap_png.as_slice()),
        (format!("{stem}.json"), json.as_bytes()),
    ];
    for (name, bytes) in files {
        let path = args.out_dir.join(name);
        write(&path, bytes)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn evaluate(args: EvalArgs, protocol: Protocol, workers: usize) -> Outcome {
    let (_, bundle) = load_model(&args.model)?;
    let manifest = Manifest::load(&args.manifest)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.manifest.display())))?;
    let params = BenchParams {
        protocol,
        explain: explain_params(&args.method),
        classifier: args.method.classifier.clone(),
        limit: args.limit,
        workers,
    };
    let report =
        with_bundle!(&bundle, m => run_benchmark(m, &manifest, &params)).map_err(classify)?;
    create_dir(&args.out_dir)?;
    report
        .write(&args.out_dir)
        .map_err(|e| Failure::new(EXIT_INFERENCE, e.to_string()))?;
    print!("{}", report.to_csv());
    if report.aggregate.skipped > 0 {
        eprintln!(
            "{} of {} samples skipped",
            report.aggregate.skipped,
            report.samples.len()
        );
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Outcome {
    let dir = args
        .model_dir
        .ok_or_else(|| Failure::usage("--model-dir or LEGRAD_MODEL_DIR is required"))?;
    if !dir.is_dir() {
        return Err(Failure::load(format!(
            "model directory {} not found",
            dir.display()
        )));
    }
    let host: IpAddr = args
        .host
        .parse()
        .map_err(|e| Failure::usage(format!("--host {:?}: {e}", args.host)))?;
    let registry =
        Registry::load_dir(&dir, args.precision).map_err(|e| Failure::load(e.to_string()))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::new(EXIT_BIND, e.to_string()))?;
    let config = ServerConfig {
        cors_origin: args.cors_origin,
    };
    runtime
        .block_on(legrad_server::serve(
            registry,
            config,
            SocketAddr::new(host, args.port),
        ))
        .map_err(|e| match e {
            ServeError::Bind(..) => Failure::new(EXIT_BIND, e.to_string()),
            ServeError::Io(_) => Failure::new(EXIT_INFERENCE, e.to_string()),
        })
}

fn make_tiny(args: MakeTinyArgs) -> Outcome {
    let spec = TinySpec::new(
        args.seed,
        args.layers,
        args.heads,
        args.width,
        args.patches,
        args.pooling.into(),
    );
    let container = match args.dtype {
        Precision::F32 => make_tiny_vit::<f32>(&spec).and_then(|b| b.to_container()),
        Precision::F64 => make_tiny_vit::<f64>(&spec).and_then(|b| b.to_container()),
    }
    .map_err(|e| Failure::usage(e.to_string()))?;
    container
        .save(&args.out)
        .map_err(|e| Failure::new(EXIT_INFERENCE, format!("{}: {e}", args.out.display())))?;
    println!("{}", args.out.display());
    Ok(())
}

fn fd_battery(args: FdBatteryArgs) -> Outcome {
    let report = run_fd_battery(&default_battery(), args.tolerance).map_err(classify)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
    } else {
        println!("seed  L h  d  n  pooling      layer  max_rel_err  max_abs_err");
        for r in &report.rows {
            println!(
                "{:<5} {} {} {:<2} {:<2} {:<12} {:<6} {:<12.3e} {:.3e}",
                r.seed,
                r.layers,
                r.heads,
                r.width,
                r.patches,
                r.pooling,
                r.layer,
                r.max_rel_error,
                r.max_abs_error
            );
        }
        println!(
            "max relative error {:.3e} (tolerance {:.0e}): {}",
            report.max_rel_error,
            report.tolerance,
            if report.passed { "pass" } else { "FAIL" }
        );
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::new(EXIT_INFERENCE, "gradient check failed"))
    }
}

fn parity(args: ParityArgs) -> Outcome {
    let container = TensorContainer::load(&args.container)
        .map_err(|e| Failure::load(format!("{}: {e}", args.container.display())))?;
    let report = match args.precision {
        Precision::F32 => check_parity::<f32>(&container),
        Precision::F64 => check_parity::<f64>(&container),
    }
    .map_err(|e| Failure::load(e.to_string()))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    if report.max_abs() <= args.tolerance {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_INFERENCE,
            format!(
                "max deviation {:.3e} exceeds {:.0e}",
                report.max_abs(),
                args.tolerance
            ),
        ))
    }
}

pub fn run(cli: Cli) -> Outcome {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.max(1))
        .build_global()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let workers = cli.workers.max(1);
    match cli.command {
        Command::Explain(a) => explain(a),
        Command::EvalSeg(EvalSegArgs { eval, threshold }) => {
            evaluate(eval, Protocol::Segmentation { threshold }, workers)
        }
        Command::EvalPoints(EvalPointsArgs { eval, threshold }) => {
            evaluate(eval, Protocol::Points { threshold }, workers)
        }
        Command::EvalPerturb(EvalPerturbArgs {
            eval,
            mode,
            class_source,
            trapezoid,
        }) => evaluate(
            eval,
            Protocol::Perturbation {
                mode: mode.into(),
                class_source: class_source.into(),
                trapezoid,
            },
            workers,
        ),
        Command::Serve(a) => serve(a),
        Command::MakeTiny(a) => make_tiny(a),
        Command::FdBattery(a) => fd_battery(a),
        Command::Parity(a) => parity(a),
    }
}
