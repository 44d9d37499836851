use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use arphmm::io::{
    load_id_values, load_labels, load_library, load_model, load_prior, load_series, save_labels, save_library,
    save_score_report, save_series, write_atomic, DatasetInstance, DatasetManifest, LoadedInstance,
};
use arphmm::lattice::{posteriors_emissions, viterbi_emissions};
use arphmm::priors::{from_labels, sample_noisy, vacuous};
use arphmm::prognostics::{
    build_library, estimate_rul_fusion_weighted, predict_direct, reduced_log_emissions, FusionWeighting, RulEstimate,
    TestPrior,
};
use arphmm::synth::{FleetConfig, N_STAGES};
use arphmm::{score_set, FitConfig, LabelSequence, ScoreReport, SoftPrior};

use crate::{
    CliError, CliResult, DecodeArgs, EvaluateArgs, FitArgs, Method, PredictArgs, PriorSource, SynthArgs, TrainArgs,
    Weighting,
};

impl FitArgs {
    fn config(&self) -> CliResult<FitConfig> {
        if self.k == 0 {
            return Err(CliError::validation("--k must be at least 1"));
        }
        let config = FitConfig {
            max_iters: self.max_iters,
            tol: self.tol,
            sigma_floor: self.sigma_floor,
            init: self.init,
            seed: self.seed,
            restarts: self.restarts,
            ..FitConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

/// Seed of the label corruption of instance `i`.
fn instance_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

fn require_labels<'a>(inst: &'a LoadedInstance, id: &str) -> CliResult<&'a LabelSequence> {
    inst.labels
        .as_ref()
        .ok_or_else(|| CliError::validation(format!("instance {id} has no labels file")))
}

fn require_prior<'a>(inst: &'a LoadedInstance, id: &str) -> CliResult<&'a SoftPrior> {
    inst.prior
        .as_ref()
        .ok_or_else(|| CliError::validation(format!("instance {id} has no prior file")))
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let config = args.fit.config()?;
    let k = args.fit.k;
    let mut manifest = DatasetManifest::load(&args.manifest)?;
    if manifest.instances.is_empty() {
        return Err(CliError::validation("the manifest lists no instances"));
    }
    let source = args
        .prior
        .unwrap_or(if manifest.instances.iter().all(|i| i.labels.is_some()) {
            PriorSource::Labels
        } else {
            PriorSource::Vacuous
        });
    // files the chosen prior does not read are not validated against K
    for inst in &mut manifest.instances {
        if source != PriorSource::Labels {
            inst.labels = None;
        }
        if source != PriorSource::File {
            inst.prior = None;
        }
    }
    let instances = manifest.load_instances(k)?;
    if let Some(rho) = args.rho {
        if !(0.0..=1.0).contains(&rho) {
            return Err(CliError::validation(format!("--rho must lie in [0, 1], got {rho}")));
        }
        if source != PriorSource::Labels {
            return Err(CliError::validation("--rho applies to label priors only"));
        }
    }
    let mut priors = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let id = inst.series.id();
        let w = match source {
            PriorSource::Vacuous => vacuous(inst.series.len(), k)?,
            PriorSource::Labels => {
                let labels = require_labels(inst, id)?;
                match args.rho {
                    Some(rho) => sample_noisy(labels, k, rho, instance_seed(args.fit.seed, i))?,
                    None => from_labels(labels, k)?,
                }
            }
            PriorSource::File => require_prior(inst, id)?.clone(),
            PriorSource::Training => {
                return Err(CliError::validation("--prior training only applies to predict"));
            }
        };
        priors.push(w);
    }
    let series: Vec<_> = instances.into_iter().map(|i| i.series).collect();
    let library = build_library(&series, Some(&priors), k, args.fit.delta, &config)?;
    save_library(&args.out, &library)?;
    for (id, err) in &library.failures {
        eprintln!("fit failed for {id}: {err}");
    }
    println!(
        "trained {} of {} instances into {}",
        library.len(),
        series.len(),
        args.out.display()
    );
    if args.fail_on_any && !library.failures.is_empty() {
        return Err(CliError::runtime(format!(
            "{} instance(s) failed to fit",
            library.failures.len()
        )));
    }
    Ok(())
}

fn contributors_cell(est: &RulEstimate) -> String {
    est.contributors
        .iter()
        .map(|c| format!("{}:{}:{}", c.id, c.score, c.candidate_rul))
        .collect::<Vec<_>>()
        .join(";")
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Fusion => "fusion",
        Method::Direct => "direct",
    }
}

fn default_sidecar(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions");
    out.with_file_name(format!("{stem}.trajectories.csv"))
}

pub fn predict(args: &PredictArgs) -> CliResult<()> {
    if args.top_k == 0 {
        return Err(CliError::validation("--top-k must be at least 1"));
    }
    let library = load_library(&args.library)?;
    if library.is_empty() {
        return Err(arphmm::Error::EmptyLibrary.into());
    }
    let k = library.entries()[0].params.n_states;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let instances = manifest.load_instances(k)?;
    let weighting = match args.weighting {
        Weighting::Mean => FusionWeighting::Mean,
        Weighting::Softmax => FusionWeighting::Softmax,
    };
    let mut table = String::from("id,rul_hat,method,contributors\n");
    let mut trajectories = String::from("id,t,rul\n");
    for inst in &instances {
        let test = inst.series.without_rul();
        let id = test.id().to_string();
        let external;
        let prior = match args.prior {
            PriorSource::Training => TestPrior::Training,
            PriorSource::Vacuous => TestPrior::Vacuous,
            PriorSource::Labels => {
                external = from_labels(require_labels(inst, &id)?, k)?;
                TestPrior::External(&external)
            }
            PriorSource::File => TestPrior::External(require_prior(inst, &id)?),
        };
        let est = match args.method {
            Method::Fusion => estimate_rul_fusion_weighted(&library, &test, prior, args.top_k, weighting)?,
            Method::Direct => {
                let (est, traj) = predict_direct(&library, &test, prior, args.top_k)?;
                for (t, r) in traj.iter().enumerate() {
                    let _ = writeln!(trajectories, "{id},{},{r}", t + 1);
                }
                est
            }
        };
        let _ = writeln!(
            table,
            "{id},{},{},{}",
            est.rul_hat,
            method_name(args.method),
            contributors_cell(&est)
        );
    }
    write_atomic(&args.out, table.as_bytes())?;
    if args.method == Method::Direct {
        let path = args.trajectories.clone().unwrap_or_else(|| default_sidecar(&args.out));
        write_atomic(&path, trajectories.as_bytes())?;
    }
    println!("wrote {} predictions to {}", instances.len(), args.out.display());
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<ScoreReport> {
    let hats = load_id_values(&args.predictions)?;
    let truth: HashMap<String, f64> = load_id_values(&args.truth)?.into_iter().collect();
    let mut triples = Vec::with_capacity(hats.len());
    for (id, hat) in hats {
        let t = truth
            .get(&id)
            .ok_or_else(|| CliError::validation(format!("no true RUL for {id}")))?;
        triples.push((id, *t, hat));
    }
    let report = score_set(&triples)?;
    if let Some(out) = &args.out {
        save_score_report(out.with_extension("csv"), out.with_extension("json"), &report)?;
    }
    println!(
        "n={} S={:.3} MAPE={:.3}% accuracy={:.3} fpr_early={:.3}",
        report.per_instance.len(),
        report.total_s,
        report.mape,
        report.accuracy,
        report.fpr_early
    );
    Ok(report)
}

fn write_manifest(
    dir: &Path,
    name: &str,
    instances: Vec<DatasetInstance>,
    k: usize,
    delta: Option<usize>,
) -> CliResult<()> {
    let manifest = DatasetManifest {
        name: name.into(),
        instances,
        k_hint: Some(k),
        delta_hint: delta,
        root: dir.to_path_buf(),
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    fs::create_dir_all(&args.out).map_err(|e| CliError::runtime(format!("{}: {e}", args.out.display())))?;
    match &args.params {
        Some(path) => synth_from_model(args, path),
        None => synth_fleet(args),
    }
}

fn synth_from_model(args: &SynthArgs, path: &Path) -> CliResult<()> {
    if args.len == 0 {
        return Err(CliError::validation("--len must be at least 1"));
    }
    let params = load_model(path)?;
    let mut instances = Vec::with_capacity(args.n);
    for i in 0..args.n {
        let id = format!("seq_{:03}", i + 1);
        let (series, states) = params.sample(args.len, instance_seed(args.seed, i))?;
        let series_path = PathBuf::from(format!("{id}.csv"));
        let labels_path = PathBuf::from(format!("{id}.labels.csv"));
        save_series(args.out.join(&series_path), &series.with_id(id.clone()))?;
        save_labels(
            args.out.join(&labels_path),
            &LabelSequence::new(states, params.n_states)?,
        )?;
        instances.push(DatasetInstance {
            id,
            series: series_path,
            labels: Some(labels_path),
            prior: None,
            lifetime: None,
        });
    }
    write_manifest(&args.out, "sampled", instances, params.n_states, Some(params.order))?;
    println!("sampled {} sequences into {}", args.n, args.out.display());
    Ok(())
}

fn synth_fleet(args: &SynthArgs) -> CliResult<()> {
    let fleet = FleetConfig {
        n_train: args.n,
        n_test: args.n_test,
        seed: args.seed,
        ..FleetConfig::default()
    }
    .generate()?;
    let train_dir = args.out.join("train");
    let test_dir = args.out.join("test");
    let mut train = Vec::new();
    for u in &fleet.train {
        let id = u.series.id().to_string();
        let (s, l) = (
            PathBuf::from(format!("{id}.csv")),
            PathBuf::from(format!("{id}.labels.csv")),
        );
        save_series(train_dir.join(&s), &u.series)?;
        save_labels(train_dir.join(&l), &u.labels)?;
        train.push(DatasetInstance {
            id,
            series: s,
            labels: Some(l),
            prior: None,
            lifetime: Some(u.lifetime),
        });
    }
    let mut test = Vec::new();
    let mut truth = String::from("id,true_rul\n");
    for u in &fleet.test {
        let id = u.series.id().to_string();
        let (s, l) = (
            PathBuf::from(format!("{id}.csv")),
            PathBuf::from(format!("{id}.labels.csv")),
        );
        save_series(test_dir.join(&s), &u.series.without_rul())?;
        save_labels(test_dir.join(&l), &u.labels)?;
        let _ = writeln!(truth, "{id},{}", u.true_rul);
        test.push(DatasetInstance {
            id,
            series: s,
            labels: Some(l),
            prior: None,
            lifetime: Some(u.lifetime),
        });
    }
    write_manifest(&train_dir, "fleet-train", train, N_STAGES, None)?;
    write_manifest(&test_dir, "fleet-test", test, N_STAGES, None)?;
    write_atomic(&args.out.join("truth.csv"), truth.as_bytes())?;
    println!(
        "generated {} training and {} test units into {}",
        fleet.train.len(),
        fleet.test.len(),
        args.out.display()
    );
    Ok(())
}

pub fn decode(args: &DecodeArgs) -> CliResult<()> {
    let params = load_model(&args.model)?;
    let full = load_series(&args.series)?;
    let series = full.without_rul();
    let k = params.n_states;
    let prior = match args.prior {
        PriorSource::Vacuous => vacuous(series.len(), k)?,
        PriorSource::Labels => {
            let path = args
                .labels
                .as_ref()
                .ok_or_else(|| CliError::validation("--prior labels needs --labels"))?;
            from_labels(&load_labels(path, k)?, k)?
        }
        PriorSource::File => {
            let path = args
                .prior_file
                .as_ref()
                .ok_or_else(|| CliError::validation("--prior file needs --prior-file"))?;
            load_prior(path, k)?
        }
        PriorSource::Training => return Err(CliError::validation("--prior training only applies to predict")),
    };
    let log_b = if params.dim == series.dim() + 1 {
        let lifetime = args
            .lifetime
            .or_else(|| full.lifetime())
            .ok_or_else(|| CliError::validation("the model has a RUL channel; pass --lifetime"))?;
        reduced_log_emissions(&params, &series, lifetime)?
    } else {
        params.log_emissions(&series)?
    };
    let (path, score) = viterbi_emissions(&params, &log_b, &prior)?;
    let lat = posteriors_emissions(&params, &log_b, &prior)?;
    let mut out = String::from("t,state");
    for i in 1..=k {
        let _ = write!(out, ",gamma_{i}");
    }
    out.push('\n');
    for (t, s) in path.iter().enumerate() {
        let _ = write!(out, "{},{}", t + 1, s + 1);
        for i in 0..k {
            let _ = write!(out, ",{}", lat.gamma[(t, i)]);
        }
        out.push('\n');
    }
    write_atomic(&args.out, out.as_bytes())?;
    println!("loglik={} path_score={}", lat.loglik, score);
    Ok(())
}
