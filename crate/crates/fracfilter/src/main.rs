//! Command-line entry point: run experiments, render figures, and execute
//! the fast verification checks for the numerical kernels.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fracfilter::config::{FilterChoice, TestCaseConfig};
use fracfilter::direct_filter::{self, LikelihoodConfig, ParameterNoise, ParticleSet};
use fracfilter::ensf::{self, DiffusionSchedule, ScoreContext};
use fracfilter::error::Result;
use fracfilter::experiment;
use fracfilter::mesh::{build_dof_map, build_mesh, CellKind};
use fracfilter::observe::{ObservationKind, ObservationModel};
use fracfilter::plot;
use fracfilter::rng::substream;
use fracfilter::stats;
use fracfilter::verify::ManufacturedCase;

#[derive(Parser)]
#[command(
    name = "fracfilter",
    version,
    about = "Joint state-parameter estimation experiments for reduced fracture models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a test case: reference trajectory, synthetic observations, the
    /// selected filter(s), CSV artifacts, and SVG figures.
    Run(RunArgs),
    /// Render the SVG figures for an existing artifact directory.
    Plot {
        /// Artifact directory written by `run`.
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
    },
    /// Fast oracle and property checks for the numerical kernels.
    Verify,
}

#[derive(Args)]
struct RunArgs {
    /// Test-case configuration file (JSON).
    #[arg(long, value_name = "PATH", required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: testcase1, testcase2, testcase3, or their
    /// "-small" desk-scale variants.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Which filter(s) to run.
    #[arg(long, value_enum)]
    filter: FilterArg,
    /// Output directory for CSVs and plots.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Master seed override.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Debug, Copy, Clone, ValueEnum)]
enum FilterArg {
    United,
    Augenkf,
    Both,
}

impl From<FilterArg> for FilterChoice {
    fn from(arg: FilterArg) -> Self {
        match arg {
            FilterArg::United => FilterChoice::United,
            FilterArg::Augenkf => FilterChoice::AugEnkf,
            FilterArg::Both => FilterChoice::Both,
        }
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => report(run_command(args)),
        Command::Plot { input } => report(plot_command(&input)),
        Command::Verify => verify_command(),
    }
}

fn report(result: Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_command(args: RunArgs) -> Result<()> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => TestCaseConfig::load(path)?,
        (None, Some(name)) => TestCaseConfig::preset(name)?,
        _ => unreachable!("clap enforces exactly one configuration source"),
    };
    cfg.filter = args.filter.into();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    println!(
        "{}: mesh {} cells, {} assimilation steps, writing to {}",
        cfg.name,
        cfg.mesh()?.cells.len(),
        cfg.nt_filter,
        args.out.display()
    );

    let output = experiment::run_experiment(cfg, &args.out)?;
    let cfg = &output.experiment.cfg;
    if let Some(run) = &output.united {
        if let Some(last) = run.records.last() {
            println!(
                "united filter: final rmse {:.3e}, parameters {} (truth {})",
                last.rmse,
                fmt_vec(&last.theta_mean),
                fmt_vec(&cfg.truth),
            );
        }
    }
    if let Some(records) = &output.augenkf {
        if let Some(last) = records.last() {
            println!(
                "kalman baseline: final rmse {}, parameters {} (truth {})",
                last.rmse
                    .map_or("n/a".to_string(), |r| format!("{r:.3e}")),
                fmt_vec(&last.theta_mean),
                fmt_vec(&cfg.truth),
            );
        }
    }
    let figures = plot::render_plots(&args.out)?;
    println!(
        "wrote {} artifact files and {} figures",
        output.files.len(),
        figures.len()
    );
    Ok(())
}

fn plot_command(input: &PathBuf) -> Result<()> {
    let figures = plot::render_plots(input)?;
    for f in &figures {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn fmt_vec(v: &[f64]) -> String {
    let inner: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", inner.join(", "))
}

// ---------------------------------------------------------------------------
// `fracfilter verify`

type Check = (&'static str, fn() -> std::result::Result<(), String>);

fn verify_command() -> ExitCode {
    let checks: [Check; 7] = [
        (
            "forward solver converges on triangle meshes",
            check_convergence_triangles,
        ),
        (
            "forward solver converges on rectangle meshes",
            check_convergence_rectangles,
        ),
        (
            "diffused-prior score matches the mixture gradient",
            check_score_exactness,
        ),
        (
            "likelihood gradients match finite differences",
            check_likelihood_gradients,
        ),
        (
            "reverse sampler reproduces a standard normal",
            check_generative,
        ),
        (
            "direct filter recovers a scalar parameter",
            check_direct_filter,
        ),
        (
            "resampling frequencies pass a chi-square test",
            check_resampling,
        ),
    ];
    let mut failures = 0;
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(why) => {
                failures += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failures == 0 {
        println!("all {} checks passed", checks.len());
        ExitCode::SUCCESS
    } else {
        println!("{failures} of {} checks failed", checks.len());
        ExitCode::FAILURE
    }
}

fn convergence_check(kind: CellKind) -> std::result::Result<(), String> {
    let errors = ManufacturedCase::default()
        .convergence_errors(8, 8, 2, kind, 0.5)
        .map_err(|e| e.to_string())?;
    let ratio = errors[0] / errors[1];
    if ratio >= 1.7 {
        Ok(())
    } else {
        Err(format!("refinement ratio {ratio:.3}, errors {errors:?}"))
    }
}

fn check_convergence_triangles() -> std::result::Result<(), String> {
    convergence_check(CellKind::Triangle)
}

fn check_convergence_rectangles() -> std::result::Result<(), String> {
    convergence_check(CellKind::Rectangle)
}

/// Log-density of the equal-weight Gaussian mixture the diffused forecast
/// defines at pseudo-time t, up to an additive constant.
fn mixture_log_density(z: &[f64], xs: &[Vec<f64>], alpha: f64, beta: f64) -> f64 {
    let logits: Vec<f64> = xs
        .iter()
        .map(|x| {
            let ss = stats::sum(z.iter().zip(x).map(|(&zi, &xi)| {
                let d = zi - alpha * xi;
                d * d
            }));
            -ss / (2.0 * beta * beta)
        })
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + stats::sum(logits.iter().map(|l| (l - top).exp())).ln()
}

fn check_score_exactness() -> std::result::Result<(), String> {
    let mut rng = substream(41, "verify/score", &[]);
    let dim = 4;
    let j = 6;
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
        use rand::Rng;
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()
    };
    let xs: Vec<Vec<f64>> = (0..j).map(|_| draw(&mut rng)).collect();
    let z = draw(&mut rng);
    let sched = DiffusionSchedule::new(50);
    let t = 0.61;
    let (alpha, beta) = (sched.alpha(t), sched.beta(t));

    let score = ensf::prior_score(&z, t, &ScoreContext::new(&xs, None), &sched);

    // Closed-form mixture gradient, computed through the density itself.
    let b2 = beta * beta;
    let mut density = 0.0;
    let mut grad = vec![0.0; dim];
    for x in &xs {
        let ss = stats::sum(z.iter().zip(x).map(|(&zi, &xi)| {
            let d = zi - alpha * xi;
            d * d
        }));
        let w = (-ss / (2.0 * b2)).exp();
        density += w;
        for (g, (&zi, &xi)) in grad.iter_mut().zip(z.iter().zip(x)) {
            *g -= w * (zi - alpha * xi) / b2;
        }
    }
    for (k, (&s, g)) in score.iter().zip(&grad).enumerate() {
        let exact = g / density;
        if (s - exact).abs() > 1e-12 * exact.abs().max(1.0) {
            return Err(format!(
                "component {k}: score {s:.15e} vs mixture gradient {exact:.15e}"
            ));
        }
    }

    // Independent finite-difference probe of grad log p.
    let h = 1e-6;
    for k in 0..dim {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[k] += h;
        zm[k] -= h;
        let fd = (mixture_log_density(&zp, &xs, alpha, beta)
            - mixture_log_density(&zm, &xs, alpha, beta))
            / (2.0 * h);
        if (score[k] - fd).abs() > 1e-5 * score[k].abs().max(1.0) {
            return Err(format!(
                "component {k}: score {:.8e} vs finite difference {fd:.8e}",
                score[k]
            ));
        }
    }
    Ok(())
}

fn check_likelihood_gradients() -> std::result::Result<(), String> {
    use rand::Rng;
    let mesh = build_mesh(2.0, 1.0, 4, 2, 1.0, CellKind::Triangle).map_err(|e| e.to_string())?;
    let dofs = build_dof_map(&mesh);
    let variance: f64 = 0.01;
    let mut rng = substream(43, "verify/likelihood", &[]);
    for kind in [
        ObservationKind::Full,
        ObservationKind::RandomMask { fraction: 0.5 },
        ObservationKind::MixedArctan { fraction: 0.5 },
    ] {
        let model = ObservationModel::build(kind, &dofs, variance.sqrt(), 3);
        let state: Vec<f64> = (0..dofs.n_dofs)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let y: Vec<f64> = model
            .observe(&state)
            .iter()
            .map(|v| v + 0.05)
            .collect();
        let grad = model
            .log_likelihood_grad(&state, &y, variance)
            .map_err(|e| e.to_string())?;
        let h = 1e-6;
        for k in (0..dofs.n_dofs).step_by(7) {
            let mut sp = state.clone();
            let mut sm = state.clone();
            sp[k] += h;
            sm[k] -= h;
            let fd = (model.log_likelihood(&sp, &y, variance).map_err(|e| e.to_string())?
                - model.log_likelihood(&sm, &y, variance).map_err(|e| e.to_string())?)
                / (2.0 * h);
            if (grad[k] - fd).abs() > 1e-5 * grad[k].abs().max(1.0) {
                return Err(format!(
                    "{kind:?} dof {k}: gradient {:.8e} vs finite difference {fd:.8e}",
                    grad[k]
                ));
            }
        }
    }
    Ok(())
}

fn check_generative() -> std::result::Result<(), String> {
    let sched = DiffusionSchedule::new(100);
    let mut rng = substream(17, "verify/generative", &[]);
    let dim = 2;
    let n = 2000;
    // The diffused standard normal stays Gaussian, so its score is linear.
    let samples = ensf::sample_with_score(
        dim,
        n,
        |z, t, out| {
            let (a, b) = (sched.alpha(t), sched.beta(t));
            let v = a * a + b * b;
            for c in 0..n {
                let zc = z.col_as_slice(c);
                for (o, &zi) in out.col_as_slice_mut(c).iter_mut().zip(zc) {
                    *o = -zi / v;
                }
            }
            Ok(())
        },
        &sched,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    for k in 0..dim {
        let values: Vec<f64> = samples.iter().map(|s| s[k]).collect();
        let mean = stats::mean(&values);
        let var = stats::mean(
            &values
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .collect::<Vec<_>>(),
        );
        if mean.abs() >= 0.05 {
            return Err(format!("component {k}: sample mean {mean:.4}"));
        }
        if (var - 1.0).abs() >= 0.1 {
            return Err(format!("component {k}: sample variance {var:.4}"));
        }
    }
    Ok(())
}

fn check_direct_filter() -> std::result::Result<(), String> {
    let truth = 0.7;
    let mut ps = ParticleSet::from_guess(&[0.3], 200, vec![(0.0, 2.0)]).map_err(|e| e.to_string())?;
    let mut noise = ParameterNoise {
        gamma: vec![0.1],
        decay: 0.97,
        floor: vec![0.002],
    };
    let cfg = LikelihoodConfig::new(0.05);
    let mut rng = substream(23, "verify/direct", &[]);
    let mut solver = |prev: &[f64], theta: &[f64]| Ok(vec![theta[0] * prev[0]]);
    for _ in 0..30 {
        direct_filter::update(&mut ps, &noise, &[truth], &[1.0], &mut solver, &cfg, &mut rng)
            .map_err(|e| e.to_string())?;
        noise.shrink();
    }
    let estimate = direct_filter::estimate(&ps.particles)[0];
    let rel = (estimate - truth).abs() / truth;
    if rel < 0.05 {
        Ok(())
    } else {
        Err(format!("estimate {estimate:.4}, relative error {rel:.3}"))
    }
}

fn check_resampling() -> std::result::Result<(), String> {
    let weights = [0.1, 0.2, 0.3, 0.25, 0.15];
    let particles: Vec<Vec<f64>> = (0..weights.len()).map(|k| vec![k as f64]).collect();
    let mut counts = [0usize; 5];
    let mut rng = substream(29, "verify/resample", &[]);
    let rounds = 2000;
    for _ in 0..rounds {
        let drawn = direct_filter::resample(&particles, &weights, &mut rng)
            .map_err(|e| e.to_string())?;
        for d in drawn {
            counts[d[0] as usize] += 1;
        }
    }
    let total = (rounds * weights.len()) as f64;
    let chi2: f64 = weights
        .iter()
        .zip(&counts)
        .map(|(&w, &c)| {
            let expected = w * total;
            (c as f64 - expected) * (c as f64 - expected) / expected
        })
        .sum();
    // 1% critical value of chi-square with 4 degrees of freedom.
    if chi2 < 13.2767 {
        Ok(())
    } else {
        Err(format!("chi-square statistic {chi2:.2} at {total} draws"))
    }
}
