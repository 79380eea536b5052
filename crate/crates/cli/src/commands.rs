use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::json;

use momentflow_core::analysis::{
    entropy_grid, entropy_kde, linearity_probe, optimize_batch, predictive_entropy, sensitivity_csv,
    sensitivity_pgm, SensitivityOptions,
};
use momentflow_core::fit::{
    fit_laplace, linear_layer_indices, mle_noise, train_map, training_log_csv, Curvature, LaplaceConfig, Loss,
    Structure, TrainConfig,
};
use momentflow_core::heads::{
    compute_metrics, fit_variance_scale, predict_analytic_batch, records_jsonl, write_metrics_csv, MetricRow,
    PredictiveDist,
};
use momentflow_core::model::{
    load_dataset_csv, load_model, save_model, write_atomic, Activation, Dataset, DatasetSchema, NetworkModel,
    Shape, Split, Targets, Task,
};
use momentflow_core::numerics::{log_grid, Matrix};
use momentflow_core::oracle::{bench_runtime, mc_predict, write_bench_csv, BenchConfig, McConfig, Strategy};
use momentflow_core::posterior::{load_posterior, save_posterior};
use momentflow_core::propagate::{CovMode, PropagationConfig};
use momentflow_core::{Error, Execution, PosteriorSpec, Result, SeededRng};

use crate::{
    BenchArgs, Cli, Command, DataArgs, EvalArgs, LaplaceArgs, Method, OodArgs, PredictArgs, PredictOpts,
    ProbeArgs, SensitivityArgs, TaskArg, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let exec = executor(cli.threads)?;
    let started = Instant::now();
    let (name, out_dir) = match &cli.command {
        Command::Train(a) => ("train", &a.out.out_dir),
        Command::Laplace(a) => ("laplace", &a.out.out_dir),
        Command::Predict(a) => ("predict", &a.out.out_dir),
        Command::Eval(a) => ("eval", &a.out.out_dir),
        Command::Ood(a) => ("ood", &a.out.out_dir),
        Command::Sensitivity(a) => ("sensitivity", &a.out.out_dir),
        Command::Probe(a) => ("probe", &a.out.out_dir),
        Command::Bench(a) => ("bench", &a.out.out_dir),
    };
    let out_dir = out_dir.clone();
    match cli.command {
        Command::Train(a) => train(a),
        Command::Laplace(a) => laplace(a),
        Command::Predict(a) => predict(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Ood(a) => ood(a, exec),
        Command::Sensitivity(a) => sensitivity(a, exec),
        Command::Probe(a) => probe(a),
        Command::Bench(a) => bench(a),
    }?;
    // Wall-clock data lives here so the other outputs stay byte-reproducible.
    let timing = json!({
        "command": name,
        "runtime_ms": started.elapsed().as_secs_f64() * 1e3,
        "finished_unix": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    });
    write_json(&out_dir.join("timing.json"), &timing)
}

fn executor(threads: usize) -> Result<Execution> {
    if threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    if threads == 1 {
        return Ok(Execution::Sequential);
    }
    #[cfg(feature = "parallel")]
    {
        // A pool may already exist when embedded; its size then wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        Ok(Execution::Parallel)
    }
    #[cfg(not(feature = "parallel"))]
    Ok(Execution::Sequential)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("json value serialises");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn load_data(args: &DataArgs, task: Task) -> Result<Dataset> {
    let mut schema = DatasetSchema::new(args.target.clone(), task);
    schema.split_column = Some(args.split_column.clone());
    schema.standardize = args.standardize;
    load_dataset_csv(&args.data, &schema)
}

/// Test rows when tagged, otherwise every row.
fn eval_rows(data: &Dataset) -> Dataset {
    let test = data.split_indices(Split::Test);
    if test.is_empty() {
        data.clone()
    } else {
        data.subset(&test)
    }
}

fn check_dims(net: &NetworkModel, data: &Dataset) -> Result<()> {
    if net.input_dim() != data.dim() {
        return Err(Error::Config(format!(
            "model expects {} features, data has {}",
            net.input_dim(),
            data.dim()
        )));
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| Error::Config(format!("invalid {what} '{v}'"))))
        .collect()
}

fn load_post(path: &Option<std::path::PathBuf>, net: &NetworkModel) -> Result<PosteriorSpec> {
    match path {
        Some(p) => {
            let post = load_posterior(p)?;
            post.validate(net)?;
            Ok(post)
        }
        None => Ok(PosteriorSpec::new()),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let task = match a.task {
        TaskArg::Regression => Task::Regression,
        TaskArg::Classification => Task::Classification,
    };
    let arch: Vec<usize> = parse_list(&a.arch.replace('-', ","), "layer width")?;
    let activation = Activation::parse(&a.activation).map_err(|e| Error::Config(e.to_string()))?;
    let data = load_data(&a.data, task)?;
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("no training rows".into()));
    }
    if arch.len() < 2 || arch[0] != data.dim() {
        return Err(Error::Config(format!(
            "architecture must start with the feature count ({})",
            data.dim()
        )));
    }
    if let Targets::Classification { num_classes, .. } = &data.targets {
        if *arch.last().unwrap() < *num_classes {
            return Err(Error::Config(format!("need at least {num_classes} outputs")));
        }
    }
    let mut rng = SeededRng::new(a.seed, 1);
    let net = NetworkModel::mlp(&arch, activation, task, &mut rng)?;
    let mut cfg = TrainConfig::new(Loss::for_task(task));
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.learning_rate = a.lr;
    cfg.weight_decay = a.weight_decay;
    cfg.seed = a.seed;
    let (net, log) = train_map(&net, &train, &cfg)?;
    prepare_dir(&a.out.out_dir)?;
    save_model(&net, a.out.out_dir.join("model.json"))?;
    write_atomic(&a.out.out_dir.join("train_log.csv"), &training_log_csv(&log))?;
    if let Some(last) = log.last() {
        println!("trained {} epochs, final loss {:.6}", log.len(), last.loss);
    }
    Ok(())
}

fn layer_subset(net: &NetworkModel, spec: &str) -> Result<Option<Vec<usize>>> {
    let linear = linear_layer_indices(net);
    if spec == "all" {
        return Ok(None);
    }
    if let Some(n) = spec.strip_prefix("last") {
        let n: usize = n.parse().map_err(|_| Error::Config(format!("invalid layer selection '{spec}'")))?;
        if n == 0 || n > linear.len() {
            return Err(Error::Config(format!("network has {} linear layers", linear.len())));
        }
        return Ok(Some(linear[linear.len() - n..].to_vec()));
    }
    parse_list(spec, "layer index").map(Some)
}

fn laplace(a: LaplaceArgs) -> Result<()> {
    let structure: Structure = a.structure.parse()?;
    let curvature: Curvature = a.curvature.parse()?;
    let net = load_model(&a.model)?;
    let data = load_data(&a.data, net.task())?;
    check_dims(&net, &data)?;
    if a.prior_points == 0 || !(a.prior_min > 0.0) || !(a.prior_max >= a.prior_min) {
        return Err(Error::Config("invalid prior precision grid".into()));
    }
    let cfg = LaplaceConfig {
        structure,
        prior_precision_grid: log_grid(a.prior_min, a.prior_max, a.prior_points),
        layer_subset: layer_subset(&net, &a.layers)?,
        curvature,
        obs_noise: a.obs_noise,
        include_bias: !a.no_bias,
        ..LaplaceConfig::default()
    };
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    let fit = fit_laplace(&net, &train, (!val.is_empty()).then_some(&val), &cfg)?;
    prepare_dir(&a.out.out_dir)?;
    save_posterior(&fit.posterior, a.out.out_dir.join("posterior.json"))?;
    let summary = json!({
        "structure": structure.to_string(),
        "layers": fit.posterior.iter().map(|(i, _)| i).collect::<Vec<_>>(),
        "prior_precision": fit.prior_precision,
        "obs_noise": fit.obs_noise,
        "grid": fit.grid_nlpd.iter().map(|(l, n)| json!({"prior_precision": l, "nlpd": n})).collect::<Vec<_>>(),
    });
    write_json(&a.out.out_dir.join("laplace.json"), &summary)?;
    println!("prior precision {}, observation noise {}", fit.prior_precision, fit.obs_noise);
    Ok(())
}

fn observation_noise(net: &NetworkModel, data: &Dataset, given: Option<f64>) -> Result<f64> {
    if net.task() == Task::Classification {
        return Ok(0.0);
    }
    match given {
        Some(v) if v >= 0.0 => Ok(v),
        Some(v) => Err(Error::Config(format!("observation noise must be nonnegative, got {v}"))),
        None => mle_noise(net, &data.split(Split::Train)),
    }
}

struct Predictor {
    net: NetworkModel,
    post: PosteriorSpec,
    obs_noise: f64,
}

impl Predictor {
    fn new(opts: &PredictOpts, data: &Dataset) -> Result<Self> {
        if opts.method == Method::Mc && opts.samples == 0 {
            return Err(Error::Config("--samples must be at least 1".into()));
        }
        let net = load_model(&opts.model)?;
        check_dims(&net, data)?;
        let post = load_post(&opts.posterior, &net)?;
        let obs_noise = observation_noise(&net, data, opts.obs_noise)?;
        Ok(Predictor { net, post, obs_noise })
    }

    fn predict(&self, opts: &PredictOpts, xs: &Matrix, exec: Execution) -> Result<Vec<PredictiveDist>> {
        let cfg = match opts.cov_mode {
            CovMode::Diag => PropagationConfig::diag(),
            CovMode::Full => PropagationConfig::full(),
        }
        .with_value_cov(opts.value_cov);
        match opts.method {
            Method::Ours => predict_analytic_batch(&self.net, &self.post, xs, &cfg, self.obs_noise, 1.0, exec),
            Method::Map => predict_analytic_batch(&self.net, &PosteriorSpec::new(), xs, &cfg, self.obs_noise, 1.0, exec),
            Method::Mc => {
                let mc = McConfig::new(opts.samples, opts.seed);
                exec.try_map_indexed(xs.rows(), |n| {
                    mc_predict(&self.net, &self.post, xs.row(n), &mc, self.obs_noise).map(|p| p.dist)
                })
            }
        }
    }
}

fn method_label(opts: &PredictOpts) -> String {
    match opts.method {
        Method::Ours => format!("ours-{}", opts.cov_mode),
        Method::Mc => format!("mc-{}", opts.samples),
        Method::Map => "map".to_string(),
    }
}

fn prediction_json(index: usize, p: &PredictiveDist) -> serde_json::Value {
    match p {
        PredictiveDist::Regression { mean, variance, obs_noise, scale } => json!({
            "index": index,
            "mean": mean,
            "model_variance": variance,
            "obs_noise": obs_noise,
            "total_variance": p.total_variance(),
            "scale": scale,
        }),
        PredictiveDist::Classification { probs, logit_mean, logit_var, scale } => json!({
            "index": index,
            "probs": probs.as_slice(),
            "logit_mean": logit_mean.as_slice(),
            "logit_var": logit_var.as_slice(),
            "scale": scale,
        }),
    }
}

fn predict(a: PredictArgs, exec: Execution) -> Result<()> {
    let net = load_model(&a.predict.model)?;
    let data = load_data(&a.data, net.task())?;
    let p = Predictor::new(&a.predict, &data)?;
    let preds = p.predict(&a.predict, &data.features, exec)?;
    let mut out = Vec::new();
    for (i, d) in preds.iter().enumerate() {
        out.extend(serde_json::to_vec(&prediction_json(i, d)).expect("json value serialises"));
        out.push(b'\n');
    }
    prepare_dir(&a.out.out_dir)?;
    write_atomic(&a.out.out_dir.join("predictions.jsonl"), &out)?;
    println!("wrote {} predictions", preds.len());
    Ok(())
}

fn eval(a: EvalArgs, exec: Execution) -> Result<()> {
    let net = load_model(&a.predict.model)?;
    let data = load_data(&a.data, net.task())?;
    let p = Predictor::new(&a.predict, &data)?;
    let test = eval_rows(&data);
    if test.is_empty() {
        return Err(Error::Config("no rows to evaluate".into()));
    }
    let val = data.split(Split::Val);
    let mut scale = 1.0;
    if !a.no_scale && a.predict.method == Method::Ours && !val.is_empty() {
        if a.scale_points == 0 || !(a.scale_min > 0.0) || !(a.scale_max >= a.scale_min) {
            return Err(Error::Config("invalid scale grid".into()));
        }
        let grid = log_grid(a.scale_min, a.scale_max, a.scale_points);
        let val_preds = p.predict(&a.predict, &val.features, exec)?;
        scale = fit_variance_scale(&val_preds, &val.targets, &grid)?;
    }
    let preds: Vec<PredictiveDist> = p
        .predict(&a.predict, &test.features, exec)?
        .iter()
        .map(|d| d.rescaled(scale))
        .collect::<Result<_>>()?;
    let report = compute_metrics(&preds, &test.targets)?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.data.data.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
    });
    let row = MetricRow::new(&name, &method_label(&a.predict), &report, scale);
    prepare_dir(&a.out.out_dir)?;
    write_metrics_csv(a.out.out_dir.join("metrics.csv"), std::slice::from_ref(&row))?;
    write_atomic(&a.out.out_dir.join("records.jsonl"), &records_jsonl(&report.records))?;
    println!(
        "{} {}: nlpd {:.4}{}{}",
        row.dataset,
        row.method,
        row.nlpd,
        row.acc.map_or(String::new(), |v| format!(", acc {v:.4}")),
        row.rmse.map_or(String::new(), |v| format!(", rmse {v:.4}")),
    );
    Ok(())
}

fn entropy_of(p: &PredictiveDist) -> f64 {
    match p {
        PredictiveDist::Classification { probs, .. } => predictive_entropy(probs),
        PredictiveDist::Regression { .. } => {
            let v = p.total_variance().unwrap_or(0.0);
            0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * v).ln()
        }
    }
}

fn ood(a: OodArgs, exec: Execution) -> Result<()> {
    if !(a.bandwidth > 0.0) {
        return Err(Error::Config("--bandwidth must be positive".into()));
    }
    let net = load_model(&a.predict.model)?;
    let data = load_data(&a.data, net.task())?;
    let p = Predictor::new(&a.predict, &data)?;
    let inside = eval_rows(&data);
    let mut schema = DatasetSchema::new(a.data.target.clone(), net.task());
    schema.split_column = Some(a.data.split_column.clone());
    let outside = load_dataset_csv(&a.ood, &schema)?;
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::Config("in-distribution and OOD data must both be nonempty".into()));
    }
    check_dims(&net, &outside)?;
    let mut outside_x = outside.features.clone();
    if let Some(s) = &data.standardization {
        for r in 0..outside_x.rows() {
            for (c, v) in outside_x.row_mut(r).iter_mut().enumerate() {
                *v = (*v - s.feature_mean[c]) / s.feature_std[c];
            }
        }
    }
    let e_in: Vec<f64> = p.predict(&a.predict, &inside.features, exec)?.iter().map(entropy_of).collect();
    let e_out: Vec<f64> = p.predict(&a.predict, &outside_x, exec)?.iter().map(entropy_of).collect();
    let all: Vec<f64> = e_in.iter().chain(&e_out).copied().collect();
    let grid = entropy_grid(&all, a.bandwidth, a.grid_points);
    let k_in = entropy_kde(&e_in, &grid, a.bandwidth)?;
    let k_out = entropy_kde(&e_out, &grid, a.bandwidth)?;
    prepare_dir(&a.out.out_dir)?;
    k_in.write_csv(a.out.out_dir.join("kde_in.csv"))?;
    k_out.write_csv(a.out.out_dir.join("kde_ood.csv"))?;
    let mut csv = String::from("set,index,entropy\n");
    for (set, es) in [("in", &e_in), ("ood", &e_out)] {
        for (i, e) in es.iter().enumerate() {
            csv.push_str(&format!("{set},{i},{e}\n"));
        }
    }
    write_atomic(&a.out.out_dir.join("entropies.csv"), csv.as_bytes())?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean entropy: in {:.4}, ood {:.4}", mean(&e_in), mean(&e_out));
    Ok(())
}

fn image_dims(net: &NetworkModel, width: Option<usize>, height: Option<usize>) -> Result<(usize, usize)> {
    let n = net.input_dim();
    let dims = match (width, height, net.input()) {
        (Some(w), Some(h), _) => (w, h),
        (Some(w), None, _) if w > 0 => (w, n / w),
        (None, Some(h), _) if h > 0 => (n / h, h),
        (None, None, Shape::Image { channels: 1, height, width }) => (width, height),
        (None, None, _) => {
            let s = (n as f64).sqrt().round() as usize;
            if s * s == n {
                (s, s)
            } else {
                (n, 1)
            }
        }
        _ => (0, 0),
    };
    if dims.0 * dims.1 != n {
        return Err(Error::Config(format!("image size {}x{} does not cover {n} inputs", dims.0, dims.1)));
    }
    Ok(dims)
}

fn sensitivity(a: SensitivityArgs, exec: Execution) -> Result<()> {
    let net = load_model(&a.model)?;
    let data = load_data(&a.data, net.task())?;
    check_dims(&net, &data)?;
    let post = load_post(&a.posterior, &net)?;
    let (width, height) = image_dims(&net, a.width, a.height)?;
    let rows: Vec<usize> = match &a.indices {
        Some(s) => parse_list(s, "row index")?,
        None => (0..a.limit.min(data.len())).collect(),
    };
    if rows.is_empty() || rows.iter().any(|&r| r >= data.len()) {
        return Err(Error::Config("row selection is empty or out of range".into()));
    }
    let Targets::Classification { labels, .. } = &data.targets else {
        return Err(Error::Config("sensitivity maps need a classification dataset".into()));
    };
    let subset = data.subset(&rows);
    let ys: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    let opts = SensitivityOptions {
        threshold: a.threshold,
        learning_rate: a.lr,
        max_iterations: a.max_iter,
        value_cov: a.value_cov,
        ..SensitivityOptions::default()
    };
    let maps = optimize_batch(&net, &post, &subset.features, &ys, &opts, exec)?;
    prepare_dir(&a.out.out_dir)?;
    let mut summary = String::from("index,label,iterations,final_nlpd_gap\n");
    for ((row, y), m) in rows.iter().zip(&ys).zip(&maps) {
        write_atomic(&a.out.out_dir.join(format!("sensitivity_{row}.pgm")), &sensitivity_pgm(m, width, height)?)?;
        write_atomic(&a.out.out_dir.join(format!("sensitivity_{row}.csv")), &sensitivity_csv(m))?;
        summary.push_str(&format!("{row},{y},{},{}\n", m.iterations, m.final_nlpd_gap));
    }
    write_atomic(&a.out.out_dir.join("sensitivity_summary.csv"), summary.as_bytes())?;
    println!("wrote {} sensitivity maps", maps.len());
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<()> {
    let eps: Vec<f64> = parse_list(&a.eps, "eps")?;
    let net = load_model(&a.model)?;
    let data = load_data(&a.data, net.task())?;
    check_dims(&net, &data)?;
    let mut rows: Vec<usize> = (0..data.len()).collect();
    if let Some(k) = a.limit {
        SeededRng::new(a.seed, 0).shuffle(&mut rows);
        rows.truncate(k);
        rows.sort_unstable();
    }
    let probe = linearity_probe(&net, &data.subset(&rows).features, &eps)?;
    prepare_dir(&a.out.out_dir)?;
    write_atomic(&a.out.out_dir.join("probe.csv"), &probe.to_csv())?;
    println!(
        "probed {} inputs (input range {:.4}) at {} eps values",
        rows.len(),
        probe.input_range,
        eps.len()
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let samples: Vec<usize> = parse_list(&a.samples, "sample count")?;
    let net = load_model(&a.model)?;
    let data = load_data(&a.data, net.task())?;
    check_dims(&net, &data)?;
    let post = load_post(&a.posterior, &net)?;
    let rows: Vec<usize> = (0..a.limit.min(data.len())).collect();
    let xs = data.subset(&rows).features;
    let cfg = match a.cov_mode {
        CovMode::Diag => PropagationConfig::diag(),
        CovMode::Full => PropagationConfig::full(),
    };
    let mut strategies = vec![Strategy::Map, Strategy::Analytic(cfg)];
    strategies.extend(samples.into_iter().map(Strategy::Mc));
    let bench_cfg = BenchConfig {
        warmup: a.warmup,
        repeats: a.repeats,
        seed: a.seed,
    };
    let rows = bench_runtime(&net, &post, &xs, &strategies, &bench_cfg)?;
    prepare_dir(&a.out.out_dir)?;
    write_bench_csv(a.out.out_dir.join("bench.csv"), &rows)?;
    for r in &rows {
        println!("{:<16} {:>6} samples  {:.4} ± {:.4} ms", r.strategy, r.samples, r.mean_ms, r.std_ms);
    }
    Ok(())
}
