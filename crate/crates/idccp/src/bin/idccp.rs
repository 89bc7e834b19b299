//! Command-line entry point: training, evaluation, model reports, and the
//! self-test suite.

use clap::{Parser, Subcommand};
use idccp::checkpoint::Checkpoint;
use idccp::config::TrainConfig;
use idccp::data::{load_image_folder, Dataset};
use idccp::error::Error;
use idccp::trainer::{self, EpochRecord};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "idccp",
    about = "Group-invariant covariance-pooling image classifier",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory for the checkpoint and metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Either a class-per-subdirectory image folder or "synthetic".
        #[arg(long)]
        data: String,
    },
    /// Print the parameter/compression accounting for a config.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; everything else is usage.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { config, resume, out } => run_train(&config, resume.as_deref(), out.as_deref()),
        Command::Eval { ckpt, data } => run_eval(&ckpt, &data),
        Command::Report { config } => run_report(&config),
        Command::Selftest => selftest::run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage/config, 2 data, 3 numerical divergence.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data(_) | Error::Io(_) => 2,
        Error::Divergence(_) | Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn run_train(config_path: &Path, resume: Option<&Path>, out: Option<&Path>) -> idccp::Result<()> {
    let config = TrainConfig::load(config_path).map_err(config_error)?;
    let resume_ckpt = match resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    println!("{:>5}  {:>10}  {:>8}  {:>11}", "epoch", "loss", "acc", "inv-error");
    let mut history: Vec<EpochRecord> = Vec::new();
    let outcome = trainer::train(&config, resume_ckpt, |r| {
        println!(
            "{:>5}  {:>10.6}  {:>8.4}  {:>11.3e}",
            r.epoch, r.loss, r.accuracy, r.invariance_error
        );
        history.push(*r);
    })?;
    println!("\nheld-out metrics:\n{}", outcome.metrics);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let ckpt_path = dir.join("model.ckpt");
        outcome.checkpoint.save(&ckpt_path)?;
        let mut csv = String::from("epoch,loss,accuracy,invariance_error\n");
        for r in &history {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.loss, r.accuracy, r.invariance_error
            ));
        }
        std::fs::write(dir.join("metrics.csv"), csv)?;
        println!("checkpoint written to {}", ckpt_path.display());
    }
    Ok(())
}

fn run_eval(ckpt_path: &Path, data: &str) -> idccp::Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let dataset: Dataset = if data == "synthetic" {
        // Regenerate the configured dataset and score the held-out split.
        let full = trainer::load_dataset(&ckpt.config)?;
        let (_, test) = full.split(ckpt.config.train_ratio, ckpt.config.seed.wrapping_add(1))?;
        test
    } else {
        let (ds, _) = load_image_folder(Path::new(data), ckpt.config.image_size, ckpt.config.channels)?;
        ds
    };
    let metrics = trainer::evaluate(&ckpt, &dataset)?;
    println!("{}", metrics);
    Ok(())
}

fn run_report(config_path: &Path) -> idccp::Result<()> {
    let config = TrainConfig::load(config_path).map_err(config_error)?;
    println!("{}", trainer::model_report(&config)?);
    Ok(())
}

/// File-not-found while reading a config is a usage problem, not a data
/// problem; rewrap so the exit code is 1.
fn config_error(e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Config(format!("cannot read config: {}", io)),
        other => other,
    }
}

mod selftest {
    use idccp::backbone::ConvNetParams;
    use idccp::classifier::{self, ClassifierWeights};
    use idccp::config::default_backbone_spec;
    use idccp::covpool::SpdMatrix;
    use idccp::error::{Error, Result};
    use idccp::group::{
        self, decompose_multiplicities, irrep_table, tensor_product_irrep, trivial_project,
        Character, ELEMENTS,
    };
    use idccp::isqrt::newton_schulz_sqrt;
    use idccp::linalg::Matrix;
    use idccp::oracles::{brute_force_invariance, eig_sqrt};
    use idccp::pipeline::{self, Model, PipelineSettings};
    use idccp::rng::SeededRng;
    use idccp::stiefel::{self, init_stiefel};
    use idccp::tensor::ImageTensor;

    struct Suite {
        failures: usize,
    }

    impl Suite {
        fn check(&mut self, name: &str, measured: f64, bound: f64) {
            let ok = measured <= bound && measured.is_finite();
            if !ok {
                self.failures += 1;
            }
            println!(
                "{}  {:<28} measured {:>11.3e}  bound {:>9.1e}",
                if ok { "PASS" } else { "FAIL" },
                name,
                measured,
                bound
            );
        }
    }

    pub fn run() -> Result<()> {
        let mut suite = Suite { failures: 0 };
        suite.check("group-characters", character_orthogonality()?, 1e-14);
        suite.check("tensor-decomposition", tensor_decomposition()?, 0.0);
        suite.check("trivial-projector", trivial_projector()?, 1e-12);
        suite.check("backbone-equivariance", equivariance()?, 1e-12);
        let (inv, ablation) = invariance()?;
        suite.check("pipeline-invariance", inv, 1e-6);
        // The ablation must EXCEED 1e-3; report the shortfall from the bound.
        suite.check("ablation-control", if ablation > 1e-3 { 0.0 } else { 1.0 }, 0.0);
        suite.check("newton-schulz-oracle", newton_schulz_oracle()?, 1e-3);
        suite.check("stiefel-geometry", stiefel_geometry()?, 1e-8);
        suite.check("classifier-gradcheck", classifier_gradcheck()?, 1e-5);
        if suite.failures > 0 {
            Err(Error::InvalidInput(format!("{} self-test failures", suite.failures)))
        } else {
            println!("all self-tests passed");
            Ok(())
        }
    }

    fn character_orthogonality() -> Result<f64> {
        let table = irrep_table();
        let mut worst = 0.0f64;
        for (i, a) in table.iter().enumerate() {
            for (j, b) in table.iter().enumerate() {
                let inner: f64 = ELEMENTS
                    .iter()
                    .map(|&g| a.character().value(g) * b.character().value(g))
                    .sum::<f64>()
                    / 8.0;
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((inner - expect).abs());
            }
        }
        Ok(worst)
    }

    fn tensor_decomposition() -> Result<f64> {
        let table = irrep_table();
        let mut mismatches = 0u32;
        for a in &table {
            for b in &table {
                let prod = tensor_product_irrep(a, b);
                let mults = decompose_multiplicities(&Character::of_rep(&prod))?;
                let total: u64 = mults
                    .iter()
                    .map(|(name, m)| m * name.degree() as u64)
                    .sum();
                if total != (a.name.degree() * b.name.degree()) as u64 {
                    mismatches += 1;
                }
            }
        }
        Ok(mismatches as f64)
    }

    fn trivial_projector() -> Result<f64> {
        let table = irrep_table();
        let rho2 = &table[4];
        let mut rep = [(); 8].map(|_| Matrix::zeros(2, 2));
        for &g in &ELEMENTS {
            rep[g.index()] = rho2.matrix(g).clone();
        }
        let p = trivial_project(&rep)?;
        let mut worst = p.max_abs();
        let regular = regular_representation();
        let pr = trivial_project(&regular)?;
        let idem = pr.matmul(&pr)?.sub(&pr)?.max_abs();
        worst = worst.max(idem);
        Ok(worst)
    }

    fn regular_representation() -> [Matrix; 8] {
        let mut rep = [(); 8].map(|_| Matrix::zeros(8, 8));
        for &g in &ELEMENTS {
            let mut m = Matrix::zeros(8, 8);
            for &h in &ELEMENTS {
                m.set(group::compose(g, h).index(), h.index(), 1.0);
            }
            rep[g.index()] = m;
        }
        rep
    }

    fn equivariance() -> Result<f64> {
        let mut rng = SeededRng::new(17);
        let params = ConvNetParams::init(&default_backbone_spec(8), 1, &mut rng)?;
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let img = ImageTensor::new(16, 16, 1, (0..256).map(|_| rng.normal()).collect())?;
            worst = worst.max(idccp::backbone::check_equivariance(&params, &img)?);
        }
        Ok(worst)
    }

    fn toy_model(seed: u64) -> Result<Model> {
        let mut rng = SeededRng::new(seed);
        let backbone = ConvNetParams::init(&default_backbone_spec(12), 1, &mut rng)?;
        let w = init_stiefel(12, 6, seed + 1)?;
        let mut classifier = ClassifierWeights::zeros(3, 6)?;
        for wk in &mut classifier.weights {
            *wk = Matrix::from_fn(6, 6, |_, _| 0.2 * rng.normal());
        }
        Ok(Model { backbone, w, classifier })
    }

    fn invariance() -> Result<(f64, f64)> {
        let model = toy_model(23)?;
        let settings = PipelineSettings::default();
        let ablated = PipelineSettings { branch_e_only: true, ..Default::default() };
        let mut rng = SeededRng::new(29);
        let mut worst = 0.0f64;
        let mut worst_ablated = 0.0f64;
        for _ in 0..10 {
            let img = ImageTensor::new(16, 16, 1, (0..256).map(|_| rng.normal()).collect())?;
            let dev = brute_force_invariance(
                |x| {
                    let z = pipeline::forward_logits(&model, &settings, x)?;
                    Matrix::from_rows(&[&z])
                },
                &img,
            )?;
            worst = worst.max(dev);
            let dev_ab = brute_force_invariance(
                |x| {
                    let z = pipeline::forward_logits(&model, &ablated, x)?;
                    Matrix::from_rows(&[&z])
                },
                &img,
            )?;
            worst_ablated = worst_ablated.max(dev_ab);
        }
        Ok((worst, worst_ablated))
    }

    fn newton_schulz_oracle() -> Result<f64> {
        let mut rng = SeededRng::new(31);
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let d = 32;
            let gauss = Matrix::from_fn(d, d, |_, _| rng.normal());
            let (q, _) = gauss.qr_positive()?;
            let mut lambda = Matrix::zeros(d, d);
            for i in 0..d {
                lambda.set(i, i, 100f64.powf(i as f64 / (d - 1) as f64));
            }
            let sigma = SpdMatrix::new(
                q.matmul(&lambda)?.matmul(&q.transpose())?.symmetrize()?,
            )?;
            let (c_hat, _) = newton_schulz_sqrt(&sigma, 20)?;
            let oracle = eig_sqrt(&sigma)?;
            worst = worst.max(
                c_hat.matrix().sub(oracle.matrix())?.frobenius_norm()
                    / oracle.matrix().frobenius_norm(),
            );
        }
        Ok(worst)
    }

    fn stiefel_geometry() -> Result<f64> {
        let mut w = init_stiefel(32, 8, 37)?;
        let mut rng = SeededRng::new(41);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let g = Matrix::from_fn(32, 8, |_, _| rng.normal());
            let v = stiefel::riemannian_grad(&w, &g)?;
            // Tangency: W^T V skew.
            let wtv = w.matrix().transpose().matmul(&v.v)?;
            let skew = wtv.add(&wtv.transpose())?.max_abs();
            worst = worst.max(skew);
            w = stiefel::retract(&w, &v, 0.1)?;
        }
        Ok(worst.max(w.orthogonality_drift()))
    }

    fn classifier_gradcheck() -> Result<f64> {
        let mut rng = SeededRng::new(43);
        let d = 4;
        let a = Matrix::from_fn(d, d, |_, _| rng.normal());
        let c = SpdMatrix::new(
            a.matmul(&a.transpose())?.add(&Matrix::identity(d).scale(0.5))?.symmetrize()?,
        )?;
        let mut weights = ClassifierWeights::zeros(3, d)?;
        for wk in &mut weights.weights {
            *wk = Matrix::from_fn(d, d, |_, _| 0.3 * rng.normal());
        }
        let batch = vec![(c, 1usize)];
        let (_, grads, _) = classifier::loss_and_grads(&batch, &weights, 0.0005)?;
        let h = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..3 {
            for r in 0..d {
                for col in 0..d {
                    let base = weights.weights[k].get(r, col);
                    let mut wp = weights.clone();
                    wp.weights[k].set(r, col, base + h);
                    let fp = classifier::loss_and_grads(&batch, &wp, 0.0005)?.0.total;
                    let mut wm = weights.clone();
                    wm.weights[k].set(r, col, base - h);
                    let fm = classifier::loss_and_grads(&batch, &wm, 0.0005)?.0.total;
                    let numeric = (fp - fm) / (2.0 * h);
                    let analytic = grads.weights[k].get(r, col);
                    worst = worst
                        .max((analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8));
                }
            }
        }
        Ok(worst)
    }
}
