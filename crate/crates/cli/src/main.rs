use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segcore::data::{synth_dataset, SynthSpec};
use segcore::io::{overlay_report, read_dataset, read_image, write_dataset, write_mask};
use segcore::metrics::{
    argmax_classes, binarize, multiclass_report, paired_t_test, parse_scores, significant,
    ImageRow, MetricsReport,
};
use segcore::model::{load_checkpoint, ModelConfig, Network};
use segcore::nn::{complexity_msa, complexity_swmsa, complexity_swmsa_quadratic};
use segcore::train::{
    ablation_csv, ablation_harness, image_metrics, parse_run_config, predict_all, train,
    AblationMode, AblationSpec, TrainConfig,
};
use segcore::verify::{self, Scope};
use segcore::Tensor;

/// Segmentation network: data synthesis, training, evaluation and checks.
#[derive(Parser, Debug)]
#[command(name = "segnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (images/ and masks/) and its spec.
    Synth {
        /// Dataset spec, key=value lines.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a network; writes the best checkpoint, log.csv and train.cfg.
    Train {
        /// Model and training settings, key=value lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory with images/ and masks/.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a labelled dataset; writes metrics.csv and overlays/.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report directory.
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict the mask of one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PGM or PPM image no larger than the network input.
        #[arg(long)]
        image: PathBuf,
        /// Output mask (PGM).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients; fails above 1e-4.
    Gradcheck {
        #[arg(long, value_parser = parse_scope)]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter count, FLOPs and attention operation counts of a model.
    Complexity {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also print the windowed count with a quadratic attention term.
        #[arg(long)]
        literal_eq15: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Paired t-test between two per-image score files.
    Ttest {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Train every variant of an ablation and tabulate test-set rates.
    Ablate {
        /// placement, loss_combo or transfer.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Test dataset directory.
        #[arg(long)]
        test: PathBuf,
        /// Source dataset for transfer mode.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Output CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Overrides `seed` from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    s.parse().map_err(|e: segcore::Error| e.to_string())
}

enum Failure {
    Invalid(String),
    Io(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

impl From<segcore::Error> for Failure {
    fn from(e: segcore::Error) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn split_override(s: &str) -> Outcome<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Failure::Invalid(format!("--set expects KEY=VALUE, got `{s}`")))
}

/// Model and training settings from an optional file plus overrides.
fn run_config(path: Option<&Path>, common: &Common) -> Outcome<(ModelConfig, TrainConfig)> {
    let (mut m, mut t) = match path {
        Some(p) => parse_run_config(&read_text(p)?)?,
        None => (ModelConfig::default(), TrainConfig::default()),
    };
    for s in &common.set {
        let (k, v) = split_override(s)?;
        if !(m.set(k, v)? || t.set(k, v)?) {
            return Err(Failure::Invalid(format!("unknown config key `{k}`")));
        }
    }
    if let Some(seed) = common.seed {
        t.seed = seed;
    }
    m.validate()?;
    t.validate()?;
    Ok((m, t))
}

fn synth(spec: Option<&Path>, out: &Path, common: &Common) -> Outcome {
    let mut s = match spec {
        Some(p) => SynthSpec::from_kv(&read_text(p)?)?,
        None => SynthSpec::default(),
    };
    for o in &common.set {
        let (k, v) = split_override(o)?;
        if !s.set(k, v)? {
            return Err(Failure::Invalid(format!("unknown spec key `{k}`")));
        }
    }
    s.validate()?;
    let seed = common.seed.unwrap_or(0);
    let data = synth_dataset(&s, seed)?;
    let num_classes = if s.classes == 1 { 1 } else { s.classes + 1 };
    write_dataset(out, &data, num_classes)?;
    write_text(
        &out.join("synth.cfg"),
        &format!("{}# seed={seed}\n", s.to_kv()),
    )?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn run_train(config: Option<&Path>, data: &Path, out: &Path, common: &Common) -> Outcome {
    let (m, t) = run_config(config, common)?;
    let samples: Vec<_> = read_dataset(data, m.num_classes)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let outcome = train(&m, &t, &samples, None, Some(out), |e| {
        println!(
            "epoch {:>3}  lambda_b {:.2}  lr {:.3e}  val J {:.4}  val D {:.4}",
            e.epoch, e.lambda_b, e.lr, e.val_j, e.val_d
        );
    })?;
    println!(
        "best val J {:.4} at epoch {}{}; checkpoint in {}",
        outcome.best_val_j(),
        outcome.best_epoch,
        if outcome.stopped_early {
            " (stopped early)"
        } else {
            ""
        },
        out.display()
    );
    Ok(())
}

/// Foreground (label > 0) of a (K, H, W) probability map.
fn foreground(probs: &Tensor) -> Outcome<Tensor> {
    let &[k, h, w] = probs.shape() else {
        unreachable!("predictions are (K, H, W)")
    };
    if k == 1 {
        return Ok(binarize(&probs.index0(0)));
    }
    let labels = argmax_classes(&probs.reshape(&[1, k, h, w])?)?.reshape(&[h, w])?;
    Ok(labels.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

fn eval(checkpoint: &Path, data: &Path, report: &Path) -> Outcome {
    let (net, store) = load_checkpoint(checkpoint)?;
    let k = net.config().num_classes;
    let samples = read_dataset(data, k)?;
    let probs = predict_all(
        &net,
        &store,
        &samples.iter().map(|(_, s)| &s.image).collect::<Vec<_>>(),
        16,
    )?;
    let mut rep = MetricsReport::default();
    if k > 1 {
        rep.hd_columns = (1..k).map(|c| format!("HD_class_{c}")).collect();
    }
    for ((name, s), p) in samples.iter().zip(&probs) {
        let mut hd = Vec::new();
        if k > 1 {
            let &[_, h, w] = p.shape() else {
                unreachable!()
            };
            let mc = multiclass_report(&p.reshape(&[1, k, h, w])?, &s.mask.reshape(&[1, h, w])?)?;
            hd = (1..k).map(|c| mc.classes[c].hd[0]).collect();
        }
        rep.rows.push(ImageRow {
            image: name.clone(),
            metrics: image_metrics(p, &s.mask)?,
            hd,
        });
    }
    let overlays = report.join("overlays");
    fs::create_dir_all(&overlays)
        .map_err(|e| Failure::Io(format!("{}: {e}", overlays.display())))?;
    for ((name, s), p) in samples.iter().zip(&probs) {
        let truth = s.mask.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        overlay_report(
            &s.image,
            &truth,
            &foreground(p)?,
            &overlays.join(format!("{name}.ppm")),
        )?;
    }
    write_text(&report.join("metrics.csv"), &rep.to_csv())?;
    let names = ["J", "D", "Acc", "Sn", "Sp"];
    for (n, m) in names.iter().zip(rep.summary()) {
        match m {
            Some(m) => println!("{n:>3} {:.4} ± {:.4}", m.mean, m.std),
            None => println!("{n:>3} undefined"),
        }
    }
    Ok(())
}

fn predict(checkpoint: &Path, image: &Path, out: &Path) -> Outcome {
    let (net, store) = load_checkpoint(checkpoint)?;
    let img = read_image(image)?.pixels;
    let p = predict_all(&net, &store, &[&img], 1)?.remove(0);
    let k = net.config().num_classes;
    let mask = if k == 1 {
        binarize(&p.index0(0))
    } else {
        let &[_, h, w] = p.shape() else {
            unreachable!()
        };
        argmax_classes(&p.reshape(&[1, k, h, w])?)?.reshape(&[h, w])?
    };
    write_mask(&mask, k, out)?;
    Ok(())
}

fn gradcheck(scope: Scope, seed: u64) -> Outcome {
    let results = verify::run(scope, seed)?;
    let mut failed = 0;
    for r in &results {
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{:<32} max_rel_error {:.3e}  checked {:>5}  excluded {:>3}  {}",
            r.name,
            r.report.max_rel_error,
            r.report.checked,
            r.report.excluded,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Failure::Invalid(format!(
            "{failed} of {} checks above {:e}",
            results.len(),
            verify::TOLERANCE
        )));
    }
    Ok(())
}

fn complexity(config: Option<&Path>, literal: bool, common: &Common) -> Outcome {
    let (m, _) = run_config(config, common)?;
    let net = Network::new(&m)?;
    let (h, w, d, n) = (
        m.input_height as u64,
        m.input_width as u64,
        m.embed_dim as u64,
        m.window_size as u64,
    );
    println!("params {}", net.param_count());
    println!("flops {}", net.count_flops()?);
    println!("C_MSA {}", complexity_msa(h, w, d));
    println!("C_SW-MSA {}", complexity_swmsa(h, w, d, n));
    if literal {
        println!(
            "C_SW-MSA_quadratic {}",
            complexity_swmsa_quadratic(h, w, d, n)
        );
    }
    Ok(())
}

fn ttest(a: &Path, b: &Path) -> Outcome {
    let (sa, sb) = (parse_scores(&read_text(a)?)?, parse_scores(&read_text(b)?)?);
    let mut names_a: Vec<&str> = sa.iter().map(|r| r.0.as_str()).collect();
    let mut names_b: Vec<&str> = sb.iter().map(|r| r.0.as_str()).collect();
    names_a.sort_unstable();
    names_b.sort_unstable();
    if names_a != names_b || names_a.windows(2).any(|p| p[0] == p[1]) {
        return Err(Failure::Invalid(
            "score files must list the same images once each".into(),
        ));
    }
    let mut xa = Vec::with_capacity(sa.len());
    let mut xb = Vec::with_capacity(sa.len());
    for (name, v) in &sa {
        xa.push(*v);
        xb.push(
            sb.iter()
                .find(|r| &r.0 == name)
                .map(|r| r.1)
                .expect("same name sets"),
        );
    }
    let t = paired_t_test(&xa, &xb)?;
    println!(
        "t={:.4} df={} p={:.4} {}",
        t.t,
        t.df,
        t.p,
        if significant(t.p) {
            "significant"
        } else {
            "not significant"
        }
    );
    Ok(())
}

struct AblateArgs<'a> {
    mode: &'a str,
    config: Option<&'a Path>,
    data: &'a Path,
    test: &'a Path,
    source: Option<&'a Path>,
    out: Option<&'a Path>,
    common: &'a Common,
}

fn ablate(a: AblateArgs<'_>) -> Outcome {
    let mode: AblationMode = a.mode.parse()?;
    let (model, train) = run_config(a.config, a.common)?;
    let load = |p: &Path| -> Outcome<Vec<_>> {
        Ok(read_dataset(p, model.num_classes)?
            .into_iter()
            .map(|(_, s)| s)
            .collect())
    };
    let source = match (mode, a.source) {
        (AblationMode::Transfer, None) => {
            return Err(Failure::Invalid("transfer mode needs --source".into()))
        }
        (AblationMode::Transfer, Some(p)) => Some(load(p)?),
        _ => None,
    };
    let spec = AblationSpec {
        data: load(a.data)?,
        test: load(a.test)?,
        source,
        model,
        train,
    };
    let rows = ablation_harness(mode, &spec, |v| eprintln!("training {v}"))?;
    let csv = ablation_csv(&rows);
    match a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synth { spec, out, common } => synth(spec.as_deref(), &out, &common),
        Command::Train {
            config,
            data,
            out,
            common,
        } => run_train(config.as_deref(), &data, &out, &common),
        Command::Eval {
            checkpoint,
            data,
            report,
        } => eval(&checkpoint, &data, &report),
        Command::Predict {
            checkpoint,
            image,
            out,
        } => predict(&checkpoint, &image, &out),
        Command::Gradcheck { scope, seed } => gradcheck(scope, seed),
        Command::Complexity {
            config,
            literal_eq15,
            common,
        } => complexity(config.as_deref(), literal_eq15, &common),
        Command::Ttest { a, b } => ttest(&a, &b),
        Command::Ablate {
            mode,
            config,
            data,
            test,
            source,
            out,
            common,
        } => ablate(AblateArgs {
            mode: &mode,
            config: config.as_deref(),
            data: &data,
            test: &test,
            source: source.as_deref(),
            out: out.as_deref(),
            common: &common,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(match f {
                Failure::Invalid(_) => 1,
                Failure::Io(_) => 2,
            })
        }
    }
}
