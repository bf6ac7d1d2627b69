//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fcdn_core::connectivity::{band_plv, channel_weights, strong_edges};
use fcdn_core::data::{load_epochset, save_epochset, synth_generate, Coupling, SynthSpec};
use fcdn_core::eval::{
    carve_validation, kfold, loso, permutation_test_paired, pseudo_online, split_62_2, FcdnWindowClassifier, OnlineSpec, Pipeline,
    WindowClassifier,
};
use fcdn_core::model::{DistillSign, FcdnConfig, FcdnModel};
use fcdn_core::nn::Precision;
use fcdn_core::rng::derive_seed;
use fcdn_core::{BandSpec, EpochSet};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::exit::CliError;

type Res<T> = Result<T, CliError>;

/// Resolved configuration plus output verbosity.
pub struct Ctx {
    pub cfg: RunConfig,
    pub quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn seed(&self) -> Res<u64> {
        self.cfg.get("seed")
    }

    /// Report skeleton carrying the command, seed and full configuration.
    fn report(&self, command: &str, body: Value) -> Res<Value> {
        let mut v = json!({
            "command": command,
            "seed": self.seed()?,
            "config_sha256": self.cfg.hash(),
            "config": self.cfg.to_json(),
        });
        if let (Value::Object(dst), Value::Object(src)) = (&mut v, body) {
            dst.extend(src);
        }
        Ok(v)
    }
}

fn write_file(path: impl AsRef<Path>, text: &str) -> Res<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| CliError::other(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: impl AsRef<Path>, v: &Value) -> Res<()> {
    let mut text = serde_json::to_string_pretty(v).expect("report serializes");
    text.push('\n');
    write_file(path, &text)
}

/// `base` with `suffix` appended to the file name.
fn sibling(base: &str, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{base}{suffix}"))
}

fn band(name: &str) -> Res<BandSpec> {
    BandSpec::by_name(name).ok_or_else(|| CliError::usage(format!("unknown band `{name}` (expected delta, theta or alpha)")))
}

fn pipeline(cfg: &RunConfig) -> Res<Pipeline> {
    let bands = cfg.list::<String>("bands")?.iter().map(|b| band(b)).collect::<Res<Vec<_>>>()?;
    if bands.len() != 3 {
        return Err(CliError::usage(format!("`bands` must name exactly 3 bands, got {}", bands.len())));
    }
    Ok(Pipeline {
        bands,
        fir_order: cfg.get("fir_order")?,
        augment_factor: cfg.get("augment.factor")?,
        sigma_rel: cfg.get("augment.sigma_rel")?,
        use_fc: cfg.get("fc")?,
    })
}

fn triple(cfg: &RunConfig, key: &str) -> Res<Option<[usize; 3]>> {
    if cfg.str(key) == "preset" {
        return Ok(None);
    }
    let v: Vec<usize> = cfg.list(key)?;
    v.try_into()
        .map(Some)
        .map_err(|_| CliError::usage(format!("`{key}` needs 3 values")))
}

/// Network configuration: preset, then explicit keys, with the data's
/// channel count, trial length and class count.
pub fn model_config(cfg: &RunConfig, set: &EpochSet) -> Res<FcdnConfig> {
    let mut m = match cfg.str("model.preset") {
        "tiny" => FcdnConfig::tiny(),
        "small_250" => FcdnConfig::small_250(),
        "reference" => FcdnConfig::reference(),
        other => return Err(CliError::usage(format!("unknown model.preset `{other}`"))),
    };
    if let Some(v) = triple(cfg, "model.conv_channels")? {
        m.conv_channels = v;
    }
    if let Some(v) = triple(cfg, "model.kernel_widths")? {
        m.kernel_widths = v;
    }
    if cfg.str("model.pool_widths") != "preset" {
        let v: Vec<usize> = cfg.list("model.pool_widths")?;
        m.pool_widths = v.try_into().map_err(|_| CliError::usage("`model.pool_widths` needs 2 values"))?;
    }
    macro_rules! scalar {
        ($key:literal, $field:ident) => {
            if let Some(v) = cfg.preset_override($key)? {
                m.$field = v;
            }
        };
    }
    scalar!("model.dropout", dropout);
    scalar!("model.resize", resize);
    scalar!("model.patch", patch);
    scalar!("model.embed_dim", embed_dim);
    scalar!("model.depth", depth);
    scalar!("model.heads", heads);
    scalar!("model.mlp_ratio", mlp_ratio);
    scalar!("model.alpha", alpha);
    scalar!("model.beta", beta);
    scalar!("train.epochs", epochs);
    scalar!("train.batch_size", batch_size);
    scalar!("train.lr", lr);
    match cfg.str("model.distill_sign") {
        "preset" => {}
        s => m.distill_sign = DistillSign::parse(s).ok_or_else(|| CliError::usage(format!("unknown model.distill_sign `{s}`")))?,
    }
    match cfg.str("model.precision") {
        "preset" => {}
        "f32" => m.precision = Precision::F32,
        "f64" => m.precision = Precision::F64,
        s => return Err(CliError::usage(format!("unknown model.precision `{s}`"))),
    }
    m.n_channels = set.n_channels();
    m.n_samples = set.n_samples();
    m.n_classes = set.n_classes();
    m.seed = cfg.get("seed")?;
    m.validate()?;
    Ok(m)
}

fn load_one(cfg: &RunConfig) -> Res<EpochSet> {
    let paths: Vec<String> = cfg.list("data")?;
    match paths.as_slice() {
        [] => Err(CliError::usage("`data` is required (flag or config key)")),
        [p] => Ok(load_epochset(p)?),
        _ => Err(CliError::usage(format!("this mode takes one dataset, got {}", paths.len()))),
    }
}

fn load_model(cfg: &RunConfig, key: &str) -> Res<FcdnModel> {
    Ok(FcdnModel::load(cfg.path(key)?)?)
}

pub fn synth(ctx: &Ctx) -> Res<()> {
    let cfg = &ctx.cfg;
    let out = cfg.path("out")?;
    let classes: usize = cfg.get("synth.classes")?;
    let pairs: Vec<String> = cfg.list("synth.pairs")?;
    if pairs.len() != classes {
        return Err(CliError::usage(format!(
            "`synth.pairs` lists {} pairs for {classes} classes",
            pairs.len()
        )));
    }
    let coupling_band = band(cfg.str("synth.band"))?;
    let couplings = pairs
        .iter()
        .enumerate()
        .map(|(class, p)| {
            let (a, b) = p
                .split_once('-')
                .ok_or_else(|| CliError::usage(format!("pair `{p}` is not `a-b`")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::usage(format!("pair `{p}` is not `a-b`")))
            };
            Ok(Coupling {
                class,
                channels: (parse(a)?, parse(b)?),
                band: coupling_band.clone(),
                phase_offset: cfg.get("synth.phase_offset")?,
                amplitude: cfg.get("synth.amplitude")?,
            })
        })
        .collect::<Res<Vec<_>>>()?;
    let subjects: usize = cfg.get("synth.subjects")?;
    if subjects == 0 {
        return Err(CliError::usage("`synth.subjects` must be at least 1"));
    }
    let seed = ctx.seed()?;
    for s in 0..subjects {
        let spec = SynthSpec {
            n_channels: cfg.get("synth.channels")?,
            n_samples: cfg.get("synth.samples")?,
            fs_hz: cfg.get("synth.fs_hz")?,
            n_per_class: cfg.get("synth.per_class")?,
            n_classes: classes,
            couplings: couplings.clone(),
            noise_amplitude: cfg.get("synth.noise")?,
            seed: derive_seed(seed, s as u64),
        };
        let set = synth_generate(&spec)?;
        let path = if subjects == 1 { out.to_string() } else { format!("{out}_s{s}") };
        save_epochset(&set, &path)?;
        ctx.say(format!(
            "wrote {path}: {} trials x {} channels x {} samples at {} Hz, {} classes",
            set.n_trials(),
            set.n_channels(),
            set.n_samples(),
            set.fs_hz(),
            set.n_classes()
        ));
    }
    Ok(())
}

pub fn connectivity(ctx: &Ctx) -> Res<()> {
    let cfg = &ctx.cfg;
    let threshold: f64 = cfg.get("connectivity.threshold")?;
    if !(0.0..1.0).contains(&threshold) {
        return Err(CliError::usage(format!(
            "connectivity threshold must lie in [0, 1), got {threshold}"
        )));
    }
    let b = band(cfg.str("connectivity.band"))?;
    let out = cfg.path("out")?;
    let set = load_one(cfg)?;
    let plv = band_plv(&set, &b, cfg.get("fir_order")?)?;
    let weights = channel_weights(&plv);
    let edges = strong_edges(&plv, threshold)?;
    let names = set.montage().names();
    let wjson = json!({
        "band": b.name,
        "channels": names,
        "weights": weights.w,
    });
    write_json(sibling(out, ".weights.json"), &wjson)?;
    write_file(sibling(out, ".edges.csv"), &edges.to_csv(set.montage()))?;
    let report = ctx.report(
        "connectivity",
        json!({
            "band": b.name,
            "threshold": threshold,
            "n_edges": edges.edges.len(),
            "weights": weights.w,
        }),
    )?;
    write_json(sibling(out, ".report.json"), &report)?;
    ctx.say(format!(
        "{} band: {} edges above {threshold}, weights written to {out}.weights.json",
        b.name,
        edges.edges.len()
    ));
    Ok(())
}

/// Teacher checkpoint, checked against `beta` before any work starts.
fn teacher(cfg: &RunConfig, beta: f64) -> Res<Option<FcdnModel>> {
    match (beta > 0.0, cfg.str("teacher").is_empty()) {
        (true, true) => Err(CliError::usage(
            "model.beta > 0 requires a teacher checkpoint (`--teacher` or `teacher`)",
        )),
        (false, false) => Err(CliError::usage("a teacher is only used when model.beta > 0")),
        (true, false) => Ok(Some(load_model(cfg, "teacher")?)),
        (false, true) => Ok(None),
    }
}

pub fn train(ctx: &Ctx) -> Res<()> {
    let cfg = &ctx.cfg;
    let out = cfg.path("out")?;
    let pipe = pipeline(cfg)?;
    let set = load_one(cfg)?;
    let mc = model_config(cfg, &set)?;
    let teacher = teacher(cfg, mc.beta)?;
    let seed = ctx.seed()?;
    let plan = split_62_2(&set, derive_seed(seed, 10))?;
    let log_path = match cfg.str("log") {
        "" => sibling(out, ".log.jsonl"),
        p => PathBuf::from(p),
    };
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::other(format!("cannot create {}: {e}", log_path.display())))?;
    let fitted = pipe.fit(
        &mc,
        &set.select(&plan.train)?,
        &set.select(&plan.val)?,
        teacher.as_ref(),
        Some(&mut log as &mut dyn Write),
    )?;
    log.flush().map_err(|e| CliError::other(e.to_string()))?;
    let test_acc = pipe.accuracy(&fitted.model, &set.select(&plan.test)?)?;
    fitted.model.save(out)?;
    let report = ctx.report(
        "train",
        json!({
            "split": {"train": plan.train.len(), "val": plan.val.len(), "test": plan.test.len()},
            "best_epoch": fitted.history.best_epoch,
            "history": fitted.history,
            "test_accuracy": test_acc,
        }),
    )?;
    write_json(sibling(out, ".report.json"), &report)?;
    ctx.say(format!(
        "trained {} epochs (best {}), test accuracy {test_acc:.4}; checkpoint {out}",
        fitted.history.len(),
        fitted.history.best_epoch
    ));
    Ok(())
}

/// Accuracy of `classifier` on the test part of the seeded 60/20/20 split.
pub fn holdout_report(classifier: &dyn WindowClassifier, set: &EpochSet, seed: u64) -> Res<Value> {
    let plan = split_62_2(set, derive_seed(seed, 10))?;
    let test = set.select(&plan.test)?;
    let probs = classifier.classify(&test, 0)?;
    let pred: Vec<usize> = probs
        .iter()
        .map(|p| p.iter().enumerate().fold(0, |b, (i, &v)| if v > p[b] { i } else { b }))
        .collect();
    let acc = fcdn_core::eval::accuracy(&pred, test.labels())?;
    Ok(json!({"mode": "holdout", "n_test": test.n_trials(), "accuracy": acc, "predictions": pred}))
}

pub fn evaluate(ctx: &Ctx) -> Res<()> {
    let cfg = &ctx.cfg;
    let out = cfg.path("out")?;
    let mode = cfg.str("eval.mode").to_string();
    let seed = ctx.seed()?;
    let pipe = pipeline(cfg)?;
    let body = match mode.as_str() {
        "holdout" => {
            let model = load_model(cfg, "model")?;
            let set = load_one(cfg)?;
            let clf = FcdnWindowClassifier {
                model: &model,
                bands: &pipe.bands,
                fir_order: pipe.fir_order,
            };
            holdout_report(&clf, &set, seed)?
        }
        "cv5" => cross_validate(cfg, &pipe, seed)?,
        "loso" => leave_subject_out(cfg, &pipe)?,
        "pseudo-online" => {
            let model = load_model(cfg, "model")?;
            let set = load_one(cfg)?;
            let spec = OnlineSpec {
                window_s: cfg.get("online.window_s")?,
                overlap: cfg.get("online.overlap")?,
                success_threshold: cfg.get("online.threshold")?,
                strict: cfg.get("online.strict")?,
            };
            let clf = FcdnWindowClassifier {
                model: &model,
                bands: &pipe.bands,
                fir_order: pipe.fir_order,
            };
            let result = pseudo_online(&clf, &set, &spec)?;
            let csv = Path::new(out).with_extension("csv");
            write_file(&csv, &result.to_csv())?;
            json!({"mode": "pseudo-online", "csv": csv.display().to_string(), "result": result})
        }
        other => {
            return Err(CliError::usage(format!(
                "unknown evaluation mode `{other}` (holdout, cv5, loso, pseudo-online)"
            )))
        }
    };
    let summary = summary_line(&body);
    write_json(out, &ctx.report("evaluate", body)?)?;
    ctx.say(format!("{mode}: {summary}; report {out}"));
    Ok(())
}

fn summary_line(body: &Value) -> String {
    let mut s = String::new();
    for key in ["accuracy", "mean_accuracy", "p_value"] {
        if let Some(v) = body.get(key).and_then(Value::as_f64) {
            let _ = write!(s, "{key} {v:.4} ");
        }
    }
    if let Some(v) = body.pointer("/result/success_rate").and_then(Value::as_f64) {
        let _ = write!(s, "success rate {v:.4}");
    }
    s.trim_end().to_string()
}

fn cross_validate(cfg: &RunConfig, pipe: &Pipeline, seed: u64) -> Res<Value> {
    let set = load_one(cfg)?;
    let mc = model_config(cfg, &set)?;
    let teacher = teacher(cfg, mc.beta)?;
    let k: usize = cfg.get("eval.folds")?;
    let compare: bool = cfg.get("eval.compare_fc")?;
    let folds = kfold(&set, k, derive_seed(seed, 12))?;
    let (mut with_fc, mut without_fc, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for (f, plan) in folds.iter().enumerate() {
        let (tr, va) = carve_validation(&set.select(&plan.train)?, derive_seed(seed, 20 + f as u64))?;
        let test = set.select(&plan.test)?;
        let fitted = pipe.fit(&mc, &tr, &va, teacher.as_ref(), None)?;
        let acc = pipe.accuracy(&fitted.model, &test)?;
        with_fc.push(acc);
        let mut row = json!({"fold": f, "n_train": tr.n_trials(), "n_val": va.n_trials(), "n_test": test.n_trials(), "accuracy": acc});
        if compare {
            let ablated = Pipeline {
                use_fc: false,
                ..pipe.clone()
            };
            let fitted = ablated.fit(&mc, &tr, &va, teacher.as_ref(), None)?;
            let acc0 = ablated.accuracy(&fitted.model, &test)?;
            without_fc.push(acc0);
            row["accuracy_without_fc"] = json!(acc0);
        }
        rows.push(row);
    }
    let mean = with_fc.iter().sum::<f64>() / with_fc.len() as f64;
    let mut body = json!({"mode": "cv5", "folds": rows, "mean_accuracy": mean});
    if compare {
        let p = permutation_test_paired(&with_fc, &without_fc, cfg.get("eval.n_perm")?, derive_seed(seed, 13))?;
        body["mean_accuracy_without_fc"] = json!(without_fc.iter().sum::<f64>() / without_fc.len() as f64);
        body["p_value"] = json!(p);
    }
    Ok(body)
}

fn leave_subject_out(cfg: &RunConfig, pipe: &Pipeline) -> Res<Value> {
    let paths: Vec<String> = cfg.list("data")?;
    if paths.len() < 2 {
        return Err(CliError::usage(format!(
            "loso needs at least 2 subject datasets in `data`, got {}",
            paths.len()
        )));
    }
    let subjects = paths.iter().map(load_epochset).collect::<fcdn_core::Result<Vec<_>>>()?;
    let mc = model_config(cfg, &subjects[0])?;
    let teacher = teacher(cfg, mc.beta)?;
    let seed = mc.seed;
    let mut rows = Vec::new();
    let mut accs = Vec::new();
    for (target, path) in paths.iter().enumerate() {
        let (train_all, test) = loso(&subjects, target)?;
        let (tr, va) = carve_validation(&train_all, derive_seed(seed, 30 + target as u64))?;
        let fitted = pipe.fit(&mc, &tr, &va, teacher.as_ref(), None)?;
        let acc = pipe.accuracy(&fitted.model, &test)?;
        accs.push(acc);
        rows.push(json!({"subject": target, "data": path, "n_train": tr.n_trials(), "n_test": test.n_trials(), "accuracy": acc}));
    }
    Ok(json!({"mode": "loso", "subjects": rows, "mean_accuracy": accs.iter().sum::<f64>() / accs.len() as f64}))
}

pub fn export_features(ctx: &Ctx) -> Res<()> {
    let cfg = &ctx.cfg;
    let out = cfg.path("out")?;
    let pipe = pipeline(cfg)?;
    let model = load_model(cfg, "model")?;
    let set = load_one(cfg)?;
    let stages = model.stage_features(&pipe.band_sets(&set)?)?;
    let mut csv = String::from("trial,label");
    for (name, width, _) in &stages {
        for i in 0..*width {
            let _ = write!(csv, ",{name}_{i}");
        }
    }
    csv.push('\n');
    for n in 0..set.n_trials() {
        let _ = write!(csv, "{n},{}", set.labels()[n]);
        for (_, width, rows) in &stages {
            for v in &rows[n * width..(n + 1) * width] {
                let _ = write!(csv, ",{v}");
            }
        }
        csv.push('\n');
    }
    write_file(out, &csv)?;
    let dims: Vec<String> = stages.iter().map(|(n, w, _)| format!("{n} {w}")).collect();
    ctx.say(format!("wrote {} rows to {out} ({})", set.n_trials(), dims.join(", ")));
    Ok(())
}
