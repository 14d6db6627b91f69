//! Command implementations, callable without argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use wxnet_core::data::{
    load_dataset, prepare, prepare_with_scaler, read_dataset, synthetic_cube, IngestReport, Prepared, Scaler,
    SynthOptions, WeatherCube,
};
use wxnet_core::explain::{
    lag_maps, occlusion_map, valid_patch_sizes, Labels, OcclusionMode, OcclusionSpec, OcclusionTarget,
    SaliencyMap, ScoremaxConfig,
};
use wxnet_core::layers::container::{Metadata, ParamContainer};
use wxnet_core::training::{evaluate, predict_all, table_csv, train, EvalTable, TrainLog};
use wxnet_core::{explain, Forecaster, ModelGraph, Variant};

use crate::config::{RunConfig, SyntheticSection, DATA_DIR_ENV};
use crate::error::{CliError, Result};
use crate::manifest::{InputRecord, Manifest};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.wxn";
pub const SCALER_FILE: &str = "scaler.wxn";
pub const LOG_FILE: &str = "train_log.csv";
pub const TABLE_FILE: &str = "table.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// A loaded cube and where it came from.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub cube: WeatherCube,
    pub input: InputRecord,
    pub synthetic: bool,
    pub report: Option<IngestReport>,
}

fn synthetic_dataset(s: &SyntheticSection, cfg: &RunConfig) -> Result<Dataset> {
    let mut opts = match (s.features, s.cities) {
        (None, None) => SynthOptions::full(s.days, s.seed),
        (f, c) => SynthOptions::small(s.days, f.unwrap_or(18), c.unwrap_or(18), s.seed),
    };
    opts.noise = s.noise;
    let cube = synthetic_cube(&opts)?;
    let mut bytes = Vec::new();
    cube.write_csv(&mut bytes)?;
    // Re-read so city / feature selection behaves exactly as for files.
    let (cube, _) = read_dataset(bytes.as_slice(), cfg.data.cities.as_deref(), cfg.data.features.as_deref())?;
    let source = format!(
        "synthetic:days={},seed={},noise={},features={},cities={}",
        s.days,
        s.seed,
        s.noise,
        opts.features.len(),
        opts.cities.len()
    );
    Ok(Dataset {
        cube,
        input: InputRecord::from_bytes("data", source, &bytes),
        synthetic: true,
        report: None,
    })
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(s) = &cfg.data.synthetic {
        return synthetic_dataset(s, cfg);
    }
    let path = cfg.resolve_data_path().ok_or_else(|| {
        CliError::usage(format!(
            "no data source: set data.path or data.synthetic in the config, pass --data, or set {DATA_DIR_ENV}"
        ))
    })?;
    let (cube, report) = load_dataset(&path, cfg.data.cities.as_deref(), cfg.data.features.as_deref())?;
    Ok(Dataset {
        cube,
        input: InputRecord::from_file("data", &path)?,
        synthetic: false,
        report: Some(report),
    })
}

/// Target feature and target city indices within the cube.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub feature: usize,
    pub cities: Vec<usize>,
}

pub fn resolve_task(cfg: &RunConfig, cube: &WeatherCube) -> Result<Task> {
    let feature = cube.feature_index(&cfg.task.target).map_err(|_| {
        CliError::usage(format!(
            "unknown target feature `{}`; available: {}",
            cfg.task.target,
            cube.features().join(", ")
        ))
    })?;
    let cities = cube.city_indices(&cfg.task.target_cities).map_err(|_| {
        CliError::usage(format!(
            "target cities {:?} are not all in the data ({})",
            cfg.task.target_cities,
            cube.cities().join(", ")
        ))
    })?;
    Ok(Task { feature, cities })
}

fn checkpoint_meta(cfg: &RunConfig) -> Metadata {
    let mut meta = Metadata::new();
    meta.set("target", &cfg.task.target);
    meta.set("horizon", cfg.task.horizon);
    meta.set("target_cities", cfg.task.target_cities.join(","));
    meta.set("seed", cfg.seed);
    meta
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub log: TrainLog,
    pub table: EvalTable,
    pub synthetic: bool,
}

/// Trains one configured model and writes checkpoint, scaler, log, test
/// table, resolved config and manifest into the run directory.
pub fn train_run(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let cube = &data.cube;
    let task = resolve_task(cfg, cube)?;
    let prep = prepare(
        cube,
        cfg.task.lags,
        cfg.task.horizon,
        task.feature,
        &task.cities,
        cfg.data.split,
    )?;
    let mcfg = cfg.model_config(cube.features().len(), cube.cities().len())?;
    let variant = mcfg.variant;
    let mut model = ModelGraph::seeded(mcfg, cfg.seed)?;
    log::info!(
        "training {} ({} parameters) on {} windows, validating on {}",
        variant,
        model.count_params(),
        prep.train.len(),
        prep.val.len()
    );
    let log = train(&mut model, &prep.train, &prep.val, &cfg.train_config()?)?;
    let mse = evaluate(&model, &prep.test, &prep.scaler, cube.cities())?;
    let table = EvalTable {
        feature: cfg.task.target.clone(),
        horizon: cfg.task.horizon,
        model: variant.title().to_string(),
        cities: cfg.task.target_cities.clone(),
        mse,
    };

    let dir = cfg.run_dir();
    create_dir(&dir)?;
    write(&dir.join(CONFIG_FILE), cfg.to_toml())?;
    write(&dir.join(CHECKPOINT_FILE), model.to_container(&checkpoint_meta(cfg)).to_bytes())?;
    write(&dir.join(SCALER_FILE), prep.scaler.to_container()?.to_bytes())?;
    write(&dir.join(LOG_FILE), log.to_csv())?;
    write(&dir.join(TABLE_FILE), table.to_csv())?;
    let mut manifest = Manifest::new("train", cfg.seed);
    manifest.synthetic_data = data.synthetic;
    manifest.inputs.push(data.input);
    manifest.outputs = [CONFIG_FILE, CHECKPOINT_FILE, SCALER_FILE, LOG_FILE, TABLE_FILE]
        .map(String::from)
        .to_vec();
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(TrainOutcome {
        dir,
        log,
        table,
        synthetic: data.synthetic,
    })
}

/// Everything a trained run directory provides.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub model: ModelGraph,
    pub scaler: Scaler,
    pub data: Dataset,
    pub task: Task,
    pub prep: Prepared,
    pub inputs: Vec<InputRecord>,
}

impl LoadedRun {
    pub fn labels(&self) -> Labels {
        Labels {
            features: self.data.cube.features().to_vec(),
            cities: self.data.cube.cities().to_vec(),
            targets: self.cfg.task.target_cities.clone(),
        }
    }

    fn manifest(&self, command: &str) -> Manifest {
        let mut m = Manifest::new(command, self.cfg.seed);
        m.synthetic_data = self.data.synthetic;
        m.inputs = self.inputs.clone();
        m
    }

    fn variant(&self) -> Variant {
        self.model.config.variant
    }

    fn describe(&self, map: SaliencyMap) -> SaliencyMap {
        map.with_meta("variant", self.variant().name())
            .with_meta("target_feature", &self.cfg.task.target)
            .with_meta("horizon", self.cfg.task.horizon)
    }
}

pub fn open_run(dir: &Path, checkpoint: Option<&Path>) -> Result<LoadedRun> {
    let config_path = dir.join(CONFIG_FILE);
    if !config_path.is_file() {
        return Err(CliError::usage(format!("{} is not a run directory (no {CONFIG_FILE})", dir.display())));
    }
    let scaler_path = dir.join(SCALER_FILE);
    if !scaler_path.is_file() {
        return Err(CliError::usage(format!("missing scaler {}", scaler_path.display())));
    }
    let ckpt_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    if !ckpt_path.is_file() {
        return Err(CliError::usage(format!("missing checkpoint {}", ckpt_path.display())));
    }
    let cfg = RunConfig::load(&config_path)?;
    let model = ModelGraph::from_container(&ParamContainer::load(&ckpt_path)?)?;
    let scaler = Scaler::load(&scaler_path)?;
    let data = load_data(&cfg)?;
    let task = resolve_task(&cfg, &data.cube)?;
    let prep = prepare_with_scaler(
        &data.cube,
        scaler.clone(),
        cfg.task.lags,
        cfg.task.horizon,
        task.feature,
        &task.cities,
        cfg.data.split,
    )?;
    let expect = (cfg.task.lags, data.cube.features().len(), data.cube.cities().len());
    if model.input_dims() != expect || model.output_len() != task.cities.len() {
        return Err(CliError::usage(format!(
            "checkpoint expects inputs {:?} and {} outputs, data gives {:?} and {}",
            model.input_dims(),
            model.output_len(),
            expect,
            task.cities.len()
        )));
    }
    let inputs = vec![
        data.input.clone(),
        InputRecord::from_file("checkpoint", &ckpt_path)?,
        InputRecord::from_file("scaler", &scaler_path)?,
    ];
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        cfg,
        model,
        scaler,
        data,
        task,
        prep,
        inputs,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub table: EvalTable,
    /// One `date,actual,predicted` file per target city.
    pub series: Vec<PathBuf>,
    pub windows: usize,
}

/// Descaled test-split MSE table plus actual-vs-predicted series.
pub fn eval_run(dir: &Path, checkpoint: Option<&Path>) -> Result<EvalOutcome> {
    let run = open_run(dir, checkpoint)?;
    let test = &run.prep.test;
    let cube = &run.data.cube;
    let mse = evaluate(&run.model, test, &run.scaler, cube.cities())?;
    let table = EvalTable {
        feature: run.cfg.task.target.clone(),
        horizon: run.cfg.task.horizon,
        model: run.variant().title().to_string(),
        cities: run.cfg.task.target_cities.clone(),
        mse,
    };
    let pred = predict_all(&run.model, &test.inputs, 64)?;
    let pred = run.scaler.descale_predictions(&pred, run.task.feature, &run.task.cities)?;
    let truth = run.scaler.descale_predictions(&test.targets, run.task.feature, &run.task.cities)?;

    let out = dir.join("eval");
    create_dir(&out)?;
    write(&out.join(TABLE_FILE), table.to_csv())?;
    let mut manifest = run.manifest("eval");
    manifest.outputs.push(TABLE_FILE.into());
    let mut series = Vec::new();
    for (k, city) in run.cfg.task.target_cities.iter().enumerate() {
        let mut s = String::from("date,actual,predicted\n");
        for i in 0..test.len() {
            s.push_str(&format!(
                "{},{},{}\n",
                cube.dates()[test.target_day(i)],
                truth.get(&[i, k]),
                pred.get(&[i, k])
            ));
        }
        let path = out.join(format!("predictions_{city}.csv"));
        write(&path, s)?;
        manifest.outputs.push(file_name(&path));
        series.push(path);
    }
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(EvalOutcome {
        table,
        series,
        windows: test.len(),
    })
}

pub fn parse_mode(mode: &str, patch_size: Option<usize>) -> Result<OcclusionMode> {
    let m = match (mode, patch_size) {
        ("patch", Some(p)) => OcclusionMode::Patch(p),
        ("patch", None) => return Err(CliError::usage("--mode patch needs --patch-size")),
        (_, Some(_)) => return Err(CliError::usage("--patch-size is only valid with --mode patch")),
        ("feature_row", None) => OcclusionMode::FeatureRow,
        ("city_column", None) => OcclusionMode::CityColumn,
        ("temporal", None) => OcclusionMode::Temporal,
        (other, None) => {
            return Err(CliError::usage(format!(
                "unknown occlusion mode `{other}` (feature_row, city_column, patch, temporal)"
            )))
        }
    };
    Ok(m)
}

#[derive(Clone, Debug, Default)]
pub struct OccludeOptions {
    pub mode: String,
    pub patch_size: Option<usize>,
    /// Restrict to one target city.
    pub city: Option<String>,
    /// Also emit the map for the error over all targets.
    pub all_targets: bool,
    pub checkpoint: Option<PathBuf>,
}

fn save_map(map: &SaliencyMap, dir: &Path, stem: &str, manifest: &mut Manifest) -> Result<Vec<PathBuf>> {
    let csv = dir.join(format!("{stem}.csv"));
    let svg = dir.join(format!("{stem}.svg"));
    map.save_csv(&csv)?;
    map.save_svg(&svg)?;
    manifest.outputs.push(file_name(&csv));
    manifest.outputs.push(file_name(&svg));
    Ok(vec![csv, svg])
}

/// Occlusion maps on the test windows; returns the written files.
pub fn occlude_run(dir: &Path, opts: &OccludeOptions) -> Result<Vec<PathBuf>> {
    let mode = parse_mode(&opts.mode, opts.patch_size)?;
    let run = open_run(dir, opts.checkpoint.as_deref())?;
    let (f, c) = (run.data.cube.features().len(), run.data.cube.cities().len());
    if let OcclusionMode::Patch(p) = mode {
        let valid = valid_patch_sizes(f, c);
        if !valid.contains(&p) {
            return Err(CliError::usage(format!(
                "patch size {p} does not tile the {f}x{c} grid; valid sizes: {}",
                valid.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
            )));
        }
    }
    let targets: Vec<usize> = match &opts.city {
        Some(name) => vec![run
            .cfg
            .task
            .target_cities
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| {
                CliError::usage(format!(
                    "`{name}` is not a target city ({})",
                    run.cfg.task.target_cities.join(", ")
                ))
            })?],
        None => (0..run.cfg.task.target_cities.len()).collect(),
    };
    let set = match run.cfg.explain.samples {
        Some(n) => run.prep.test.take(n),
        None => run.prep.test.clone(),
    };
    let labels = run.labels();
    let out = dir.join("explain");
    create_dir(&out)?;
    let tag = match mode {
        OcclusionMode::Patch(p) => format!("occlusion_patch{p}"),
        m => format!("occlusion_{}", m.name()),
    };
    let mut manifest = run.manifest(&format!("explain occlude {}", mode.name()));
    let mut written = Vec::new();
    let mut per_city = Vec::new();
    for &t in &targets {
        let spec = OcclusionSpec {
            mode,
            target: OcclusionTarget::City(t),
            fill: run.cfg.fill(),
        };
        let map = run.describe(occlusion_map(&run.model, &spec, &set.inputs, &set.targets, &labels)?);
        written.extend(save_map(&map, &out, &format!("{tag}_{}", labels.targets[t]), &mut manifest)?);
        per_city.push(map);
    }
    if per_city.len() > 1 {
        let title = format!("Occlusion ({}) by target city", mode.name());
        let combined = match mode {
            OcclusionMode::FeatureRow => Some(SaliencyMap::stack_cols(title, "target", &per_city)?),
            OcclusionMode::CityColumn | OcclusionMode::Temporal => {
                Some(SaliencyMap::stack_rows(title, "target", &per_city)?)
            }
            OcclusionMode::Patch(_) => None,
        };
        if let Some(mut m) = combined {
            m.meta.retain(|(k, _)| k != "target");
            written.extend(save_map(&m, &out, &format!("{tag}_by_city"), &mut manifest)?);
        }
    }
    if opts.all_targets {
        let spec = OcclusionSpec {
            mode,
            target: OcclusionTarget::AllTargets,
            fill: run.cfg.fill(),
        };
        let map = run.describe(occlusion_map(&run.model, &spec, &set.inputs, &set.targets, &labels)?);
        written.extend(save_map(&map, &out, &format!("{tag}_all"), &mut manifest)?);
    }
    manifest.write(&out.join(format!("manifest_{tag}.toml")))?;
    Ok(written)
}

#[derive(Clone, Debug, Default)]
pub struct ScoremaxOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    /// 1-based lags to render; empty means first, middle and last.
    pub lags: Vec<usize>,
    /// Test window to start from; defaults to the configured one.
    pub sample: Option<usize>,
    pub random_init: Option<u64>,
    pub checkpoint: Option<PathBuf>,
}

pub fn default_lags(l: usize) -> Vec<usize> {
    let mut v = vec![1, l.div_ceil(2), l];
    v.dedup();
    v
}

/// Score maximization from one test window; writes one `F×C` map per lag
/// and the score trace.
pub fn scoremax_run(dir: &Path, opts: &ScoremaxOptions) -> Result<Vec<PathBuf>> {
    let run = open_run(dir, opts.checkpoint.as_deref())?;
    let test = &run.prep.test;
    let idx = opts.sample.unwrap_or(run.cfg.explain.scoremax_sample);
    if idx >= test.len() {
        return Err(CliError::usage(format!("sample {idx} out of range: {} test windows", test.len())));
    }
    let lags = if opts.lags.is_empty() {
        default_lags(run.cfg.task.lags)
    } else {
        opts.lags.clone()
    };
    if let Some(&bad) = lags.iter().find(|&&l| l == 0 || l > run.cfg.task.lags) {
        return Err(CliError::usage(format!("lag {bad} outside 1..={}", run.cfg.task.lags)));
    }
    let [lo, hi] = run.cfg.explain.bounds;
    let cfg = ScoremaxConfig {
        iterations: opts.iterations,
        learning_rate: opts.learning_rate,
        bounds: (lo, hi),
        random_init: opts.random_init.or(run.cfg.explain.scoremax_random_init),
    };
    let sample = test.inputs.index_first(idx);
    let truth = test.targets.index_first(idx);
    let result = explain::score_maximize(&run.model, &sample, truth.data(), &cfg)?;
    let date = run.data.cube.dates()[test.target_day(idx)];
    let maps = lag_maps(&result, &lags, &run.labels())?;

    let out = dir.join("explain");
    create_dir(&out)?;
    let mut manifest = run.manifest("explain scoremax");
    let mut written = Vec::new();
    for (map, lag) in maps.into_iter().zip(&lags) {
        let map = run
            .describe(map)
            .with_meta("anchor_date", date)
            .with_meta("iterations", opts.iterations)
            .with_meta("lr", opts.learning_rate);
        written.extend(save_map(&map, &out, &format!("scoremax_lag{lag}"), &mut manifest)?);
    }
    let mut trace = String::from("iteration,score\n");
    for (i, h) in result.trace.iter().enumerate() {
        trace.push_str(&format!("{},{h}\n", i + 1));
    }
    trace.push_str(&format!("final,{}\n", result.final_score));
    let trace_path = out.join("scoremax_trace.csv");
    write(&trace_path, trace)?;
    manifest.outputs.push(file_name(&trace_path));
    written.push(trace_path);
    manifest.write(&out.join("manifest_scoremax.toml"))?;
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct RehearsalOptions {
    pub targets: Vec<String>,
    pub horizons: Vec<usize>,
    pub variants: Vec<Variant>,
    /// Run whose explanations are rendered; defaults to the first
    /// attention variant at the first target and horizon.
    pub explain_variant: Option<Variant>,
    pub scoremax_iterations: usize,
}

impl Default for RehearsalOptions {
    fn default() -> Self {
        RehearsalOptions {
            targets: vec!["wind_speed".into(), "avg_temp".into()],
            horizons: vec![2, 4, 6],
            variants: Variant::ALL.to_vec(),
            explain_variant: None,
            scoremax_iterations: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RehearsalOutcome {
    pub synthetic: bool,
    pub tables: Vec<EvalTable>,
    /// One combined CSV per target feature.
    pub table_files: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

/// Every (target, horizon, variant) pipeline, combined tables, then
/// feature-row, patch, temporal and score-maximization artifacts for one
/// trained model. Runs go under `<output>/runs`.
pub fn rehearse(base: &RunConfig, opts: &RehearsalOptions) -> Result<RehearsalOutcome> {
    base.validate()?;
    let root = base.output.clone();
    let mut tables = Vec::new();
    let mut synthetic = false;
    let mut dirs = Vec::new();
    for target in &opts.targets {
        for &h in &opts.horizons {
            for &v in &opts.variants {
                let mut cfg = base.clone();
                cfg.output = root.join("runs");
                cfg.task.target = target.clone();
                cfg.task.horizon = h;
                cfg.model.variant = v.name().into();
                log::info!("rehearsal: {} {} h{}", v, target, h);
                let outcome = train_run(&cfg)?;
                synthetic |= outcome.synthetic;
                dirs.push((target.clone(), h, v, outcome.dir));
                tables.push(outcome.table);
            }
        }
    }
    create_dir(&root)?;
    let mut table_files = Vec::new();
    for target in &opts.targets {
        let mine: Vec<EvalTable> = tables.iter().filter(|t| &t.feature == target).cloned().collect();
        let path = root.join(format!("table_{target}.csv"));
        write(&path, table_csv(&mine))?;
        table_files.push(path);
    }

    let wanted = opts
        .explain_variant
        .or_else(|| opts.variants.iter().copied().find(|v| v.has_attention()))
        .or_else(|| opts.variants.first().copied());
    let mut artifacts = Vec::new();
    if let Some((_, _, _, dir)) = dirs.iter().find(|(_, _, v, _)| Some(*v) == wanted) {
        let run = open_run(dir, None)?;
        let (f, c) = (run.data.cube.features().len(), run.data.cube.cities().len());
        let valid = valid_patch_sizes(f, c);
        let patch = if valid.contains(&3) {
            3
        } else {
            valid.iter().copied().filter(|&p| p < f.min(c)).max().unwrap_or(1)
        };
        drop(run);
        for (mode, p) in [("feature_row", None), ("patch", Some(patch)), ("temporal", None)] {
            let o = OccludeOptions {
                mode: mode.into(),
                patch_size: p,
                all_targets: mode == "feature_row",
                ..Default::default()
            };
            artifacts.extend(occlude_run(dir, &o)?);
        }
        let s = ScoremaxOptions {
            iterations: opts.scoremax_iterations,
            learning_rate: 0.01,
            ..Default::default()
        };
        artifacts.extend(scoremax_run(dir, &s)?);
    }
    Ok(RehearsalOutcome {
        synthetic,
        tables,
        table_files,
        artifacts,
    })
}
