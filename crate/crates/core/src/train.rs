//! Training runs, evaluation, and model snapshots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, DatasetKind, RunConfig};
use crate::data::{self, affine_augment, DataError, Dataset, Split};
use crate::losses::{
    discriminant_ratio, one_hot, softmax_cross_entropy, LossComponent, LossError, Objective, Reduction, DEFAULT_EPSILON,
};
use crate::network::{ArchitectureSpec, Mode, Network, NetworkError, TapPoint, Taps};
use crate::optim::{OptimError, Sgd};
use crate::rng::{streams, Rng};
use crate::stats::{CenterBank, NeuronClassStats, StatsError};
use crate::tensor::{argmax, Tensor, TensorError};

pub const EPOCH_LOG: &str = "epochs.csv";
pub const STEP_LOG: &str = "steps.csv";
pub const SUMMARY: &str = "summary.csv";
pub const RESOLVED_CONFIG: &str = "config.txt";
pub const MODEL: &str = "model.ckpt";

/// Batch size of evaluation passes; does not affect results.
const EVAL_BATCH: usize = 250;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(LossError),
    #[error(transparent)]
    Optim(OptimError),
    #[error("non-finite {component} at epoch {epoch}, step {step}")]
    NonFinite {
        component: String,
        epoch: usize,
        step: usize,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Mismatch(String),
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}

impl TrainError {
    /// Process exit code: 2 for configuration problems, 3 for non-finite
    /// training values, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Config(_) => 2,
            TrainError::NonFinite { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads the train and test splits a config describes.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Synth => {
            let s = &cfg.synth;
            let all = data::synth_blobs(
                s.classes,
                s.shape,
                s.per_class + s.test_per_class,
                s.separation,
                cfg.seed,
            )?;
            // Samples are generated class-interleaved, so any prefix that is
            // a multiple of the class count stays balanced.
            let split = s.per_class * s.classes;
            let train: Vec<usize> = (0..split).collect();
            let test: Vec<usize> = (split..all.len()).collect();
            (all.subset(&train)?, all.subset(&test)?)
        }
        kind => {
            let dir = data::data_root(cfg.data_dir.as_deref()).ok_or_else(|| {
                DataError::Invalid(format!(
                    "dataset {} needs data_dir or {}",
                    kind.name(),
                    data::DATA_DIR_ENV
                ))
            })?;
            let classes = kind.classes().unwrap_or(0);
            (
                data::load_idx_split(&dir, Split::Train, classes)?,
                data::load_idx_split(&dir, Split::Test, classes)?,
            )
        }
    };
    let limit = |ds: Dataset, n: usize| -> Result<Dataset> {
        if n == 0 || n >= ds.len() {
            Ok(ds)
        } else {
            Ok(ds.subset(&(0..n).collect::<Vec<_>>())?)
        }
    };
    let train = limit(train, cfg.train_limit)?;
    let test = limit(test, cfg.test_limit)?;
    if train.sample_shape() != test.sample_shape() {
        return Err(TrainError::Mismatch(format!(
            "train samples are {:?} but test samples are {:?}",
            train.sample_shape(),
            test.sample_shape()
        )));
    }
    let classes = train.classes.max(test.classes);
    let relabel = |ds: Dataset| Dataset::new(ds.images, ds.labels, classes);
    Ok((relabel(train)?, relabel(test)?))
}

/// Loss and accuracy of an evaluation-mode pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Mean softmax cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    /// Sum over output neurons of within-class over total variance of the
    /// logits, over the whole split.
    pub discriminant_ratio: f64,
}

/// Evaluation-mode logits and hidden features for every sample.
pub fn infer_all(net: &Network, ds: &Dataset) -> Result<Taps> {
    let mut logits = Vec::with_capacity(ds.len() * ds.classes);
    let mut hidden = Vec::new();
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, _) = ds.batch(chunk)?;
        let taps = net.infer(&x)?;
        logits.extend_from_slice(taps.logits().data());
        hidden.extend_from_slice(taps.get(TapPoint::HiddenPreact).expect("always recorded").data());
    }
    let n = ds.len();
    let mut taps = Taps::default();
    taps.insert(TapPoint::Logits, Tensor::new(vec![n, logits.len() / n.max(1)], logits)?);
    taps.insert(
        TapPoint::HiddenPreact,
        Tensor::new(vec![n, hidden.len() / n.max(1)], hidden)?,
    );
    Ok(taps)
}

pub fn evaluate(net: &Network, ds: &Dataset) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(TrainError::Mismatch("cannot evaluate an empty dataset".into()));
    }
    check_data(net, ds)?;
    let spec = net.spec();
    let taps = infer_all(net, ds)?;
    let z = taps.logits();
    let t = one_hot(&ds.labels, spec.classes);
    let (loss, _) = softmax_cross_entropy(z, &t, Reduction::Mean)?;
    let correct = (0..ds.len())
        .filter(|&i| argmax(z.row(i).iter().copied()) == ds.labels[i])
        .count();
    Ok(Metrics {
        loss,
        accuracy: correct as f64 / ds.len() as f64,
        discriminant_ratio: discriminant_ratio(z, &t, DEFAULT_EPSILON)?,
    })
}

/// One row of the epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: Metrics,
    pub test: Metrics,
    /// Mean training objective over the epoch's steps.
    pub objective: f64,
    pub components: BTreeMap<LossComponent, f64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub epochs: Vec<EpochRecord>,
}

impl RunSummary {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }

    pub fn best(&self) -> &EpochRecord {
        self.epochs
            .iter()
            .fold(None::<&EpochRecord>, |best, r| match best {
                Some(b) if b.test.accuracy >= r.test.accuracy => Some(b),
                _ => Some(r),
            })
            .expect("at least one epoch")
    }
}

/// A trained network with the statistics and optimizer state of its run.
pub struct Model {
    pub config: RunConfig,
    pub network: Network,
    pub objective: Objective,
    pub optimizer: Sgd,
    pub epochs_done: usize,
}

impl Model {
    pub fn new(config: &RunConfig, input: [usize; 3], classes: usize) -> Result<Model> {
        let spec = config.architecture(input, classes);
        let network = Network::build(&spec, config.seed)?;
        let center_dim = match config.objective.center.map(|c| c.tap) {
            Some(TapPoint::Logits) => classes,
            _ => spec.hidden_width,
        };
        let objective = Objective::new(config.objective.clone(), classes, center_dim)?;
        let optimizer = Sgd::new(config.sgd, &network.params());
        Ok(Model {
            config: config.clone(),
            network,
            objective,
            optimizer,
            epochs_done: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let spec = self.network.spec();
        let mut c = Checkpoint::default();
        c.set("arch", spec.id.name());
        c.set(
            "input",
            format!("{}x{}x{}", spec.input[0], spec.input[1], spec.input[2]),
        );
        c.set("classes", spec.classes);
        c.set(
            "conv_widths",
            spec.conv_widths
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        c.set("fc_width", spec.fc_width);
        c.set("hidden_width", spec.hidden_width);
        c.set("keep_prob", spec.keep_prob);
        c.set("seed", self.network.seed());
        c.set("epochs_done", self.epochs_done);
        c.sections.insert("config".into(), self.config.to_text().into_bytes());
        for (name, t) in self.network.state_tensors() {
            c.put_tensor(&format!("net/{name}"), &t);
        }
        for (i, v) in self.optimizer.velocities().iter().enumerate() {
            c.put_tensor(&format!("velocity/{i:04}"), v);
        }
        if let Some(s) = self.objective.neuron_stats() {
            let mut buf = Vec::new();
            s.write_to(&mut buf).expect("in-memory write");
            c.sections.insert("neuron_stats".into(), buf);
        }
        if let Some(b) = self.objective.centers() {
            let mut buf = Vec::new();
            b.write_to(&mut buf).expect("in-memory write");
            c.sections.insert("centers".into(), buf);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Model> {
        let text = String::from_utf8_lossy(c.section("config")?).into_owned();
        let config = RunConfig::parse_text(&text, None)?;
        let malformed = |what: &str| CheckpointError::Malformed(format!("bad {what} in manifest"));
        let dims: Vec<usize> = c
            .get("input")?
            .split('x')
            .map(|d| d.parse().map_err(|_| malformed("input")))
            .collect::<std::result::Result<_, _>>()?;
        let input: [usize; 3] = dims.try_into().map_err(|_| malformed("input"))?;
        let classes: usize = c.get("classes")?.parse().map_err(|_| malformed("classes"))?;
        let mut model = Model::new(&config, input, classes)?;
        let expected = ArchitectureSpec {
            id: c.get("arch")?.parse()?,
            ..model.network.spec().clone()
        };
        if &expected != model.network.spec() {
            return Err(malformed("architecture").into());
        }
        model.network.load_state(&c.tensors_with_prefix("net/")?)?;
        let velocities: Vec<Tensor> = c.tensors_with_prefix("velocity/")?.into_values().collect();
        model.optimizer.set_velocities(velocities).map_err(TrainError::Optim)?;
        let stats = match c.sections.get("neuron_stats") {
            Some(b) => Some(NeuronClassStats::read_from(b.as_slice())?),
            None => None,
        };
        let centers = match c.sections.get("centers") {
            Some(b) => Some(CenterBank::read_from(b.as_slice())?),
            None => None,
        };
        model.objective.restore_state(stats, centers);
        model.epochs_done = c.get("epochs_done")?.parse().map_err(|_| malformed("epochs_done"))?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Overflow inside a layer is a divergence, not a bug.
fn network_nonfinite(e: NetworkError, pass: &str, epoch: usize, step: usize) -> TrainError {
    match e {
        NetworkError::Tensor(TensorError::NonFinite { op }) => nonfinite(&format!("{pass} ({op})"), epoch, step),
        e => e.into(),
    }
}

fn nonfinite(component: &str, epoch: usize, step: usize) -> TrainError {
    TrainError::NonFinite {
        component: component.to_string(),
        epoch,
        step,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Trains per `cfg`, writing logs, the resolved config and the final
/// checkpoint into `run_dir`.
pub fn train(cfg: &RunConfig, run_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let (train_set, test_set) = load_datasets(cfg)?;
    let mut model = Model::new(cfg, train_set.sample_shape(), train_set.classes)?;

    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let config_path = run_dir.join(RESOLVED_CONFIG);
    std::fs::write(&config_path, cfg.to_text()).map_err(io_err(&config_path))?;

    let mut step_log = csv::Writer::from_path(run_dir.join(STEP_LOG))?;
    let mut epoch_log = csv::Writer::from_path(run_dir.join(EPOCH_LOG))?;
    let columns: Vec<&str> = LossComponent::ALL.iter().map(|c| c.column()).collect();
    let mut header = vec!["epoch", "step", "lr", "objective"];
    header.extend(&columns);
    step_log.write_record(&header)?;
    let mut header = vec![
        "epoch",
        "lr",
        "train_loss",
        "train_acc",
        "test_loss",
        "test_acc",
        "test_discriminant_ratio",
        "objective",
    ];
    header.extend(&columns);
    epoch_log.write_record(&header)?;

    let mut shuffle_rng = Rng::derive(cfg.seed, streams::SHUFFLE);
    let mut augment_rng = Rng::derive(cfg.seed, streams::AUGMENT);
    let [h, w, c] = train_set.sample_shape();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    let mut global_step = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.sgd.schedule.lr_at_epoch(epoch);
        model.objective.start_epoch();
        shuffle_rng.shuffle(&mut order);
        let mut sums: BTreeMap<LossComponent, f64> = BTreeMap::new();
        let mut objective_sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (mut x, t) = train_set.batch(batch)?;
            if let Some(aug) = &cfg.augment {
                let per = h * w * c;
                for sample in x.data_mut().chunks_exact_mut(per) {
                    let out = affine_augment(sample, h, w, c, &mut augment_rng, aug);
                    sample.copy_from_slice(&out);
                }
            }
            let taps = model
                .network
                .forward(&x, Mode::Train)
                .map_err(|e| network_nonfinite(e, "forward pass", epoch, global_step))?;
            let report = match model.objective.evaluate(&taps, &t) {
                Ok(r) => r,
                Err(LossError::NonFinite(what)) => return Err(nonfinite(what, epoch, global_step)),
                Err(e) => return Err(e.into()),
            };
            if !report.total.is_finite() {
                return Err(nonfinite("total loss", epoch, global_step));
            }
            model
                .network
                .backward(&report.gradients)
                .map_err(|e| network_nonfinite(e, "backward pass", epoch, global_step))?;
            match model.optimizer.step(&mut model.network.params_mut(), lr) {
                Ok(()) => {}
                Err(OptimError::NonFiniteGradient(i)) => {
                    return Err(nonfinite(&format!("gradient of parameter {i}"), epoch, global_step))
                }
                Err(e) => return Err(TrainError::Optim(e)),
            }
            model.objective.after_step(&taps, &t)?;

            let mut row = vec![
                epoch.to_string(),
                global_step.to_string(),
                lr.to_string(),
                report.total.to_string(),
            ];
            row.extend(LossComponent::ALL.iter().map(|c| fmt_opt(report.component(*c))));
            step_log.write_record(&row)?;
            for (c, v) in &report.components {
                *sums.entry(*c).or_default() += v;
            }
            objective_sum += report.total;
            steps += 1;
            global_step += 1;
        }
        step_log.flush().map_err(io_err(run_dir))?;
        model.epochs_done = epoch + 1;

        let eval = |ds: &Dataset| match evaluate(&model.network, ds) {
            Err(TrainError::Network(e)) => Err(network_nonfinite(e, "evaluation", epoch, global_step)),
            r => r,
        };
        let record = EpochRecord {
            epoch,
            lr,
            train: eval(&train_set)?,
            test: eval(&test_set)?,
            objective: objective_sum / steps as f64,
            components: sums.into_iter().map(|(c, s)| (c, s / steps as f64)).collect(),
        };
        let mut row = vec![
            epoch.to_string(),
            lr.to_string(),
            record.train.loss.to_string(),
            record.train.accuracy.to_string(),
            record.test.loss.to_string(),
            record.test.accuracy.to_string(),
            record.test.discriminant_ratio.to_string(),
            record.objective.to_string(),
        ];
        row.extend(
            LossComponent::ALL
                .iter()
                .map(|c| fmt_opt(record.components.get(c).copied())),
        );
        epoch_log.write_record(&row)?;
        epoch_log.flush().map_err(io_err(run_dir))?;
        records.push(record);
    }

    model.to_checkpoint().save(&run_dir.join(MODEL))?;
    let summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        epochs: records,
    };
    let mut out = csv::Writer::from_path(run_dir.join(SUMMARY))?;
    out.write_record(["which", "epoch", "test_loss", "test_acc", "test_discriminant_ratio"])?;
    for (which, r) in [("final", summary.last()), ("best", summary.best())] {
        out.write_record([
            which.to_string(),
            r.epoch.to_string(),
            r.test.loss.to_string(),
            r.test.accuracy.to_string(),
            r.test.discriminant_ratio.to_string(),
        ])?;
    }
    out.flush().map_err(io_err(run_dir))?;
    Ok(summary)
}

/// Loads the data a checkpoint should be evaluated on: `data_dir` when
/// given, otherwise the dataset recorded in the checkpoint's config.
pub fn dataset_for(model: &Model, data_dir: Option<&Path>, split: Split) -> Result<Dataset> {
    let mut cfg = model.config.clone();
    if let Some(dir) = data_dir {
        cfg.data_dir = Some(dir.to_path_buf());
        // An explicit directory always means IDX files.
        if cfg.dataset == DatasetKind::Synth {
            cfg.dataset = DatasetKind::Mnist;
        }
    }
    let (train, test) = load_datasets(&cfg)?;
    Ok(match split {
        Split::Train => train,
        Split::Test => test,
    })
}

/// Writes `z,is_target` for output neuron `neuron` over every sample.
pub fn export_histogram(model: &Model, ds: &Dataset, neuron: usize, out: &Path) -> Result<usize> {
    let classes = model.network.spec().classes;
    if neuron >= classes {
        return Err(TrainError::Mismatch(format!(
            "neuron {neuron} does not exist; the output layer has {classes} neurons"
        )));
    }
    check_data(&model.network, ds)?;
    let taps = infer_all(&model.network, ds)?;
    let z = taps.logits();
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["z", "is_target"])?;
    for i in 0..ds.len() {
        w.write_record([
            z.row(i)[neuron].to_string(),
            u8::from(ds.labels[i] == neuron).to_string(),
        ])?;
    }
    w.flush().map_err(io_err(out))?;
    Ok(ds.len())
}

/// Companion file of a scatter export holding per-class means.
pub fn means_path(scatter: &Path) -> PathBuf {
    let stem = scatter
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    scatter.with_file_name(format!("{stem}_means.csv"))
}

/// Writes `x1,x2,class` hidden features and per-class means (`class,x1,x2`
/// next to `out`). Requires a 2-wide hidden layer.
pub fn export_scatter(model: &Model, ds: &Dataset, out: &Path) -> Result<PathBuf> {
    let width = model.network.spec().hidden_width;
    if width != 2 {
        return Err(TrainError::Mismatch(format!(
            "scatter export needs hidden_width = 2, model has {width}"
        )));
    }
    check_data(&model.network, ds)?;
    let taps = infer_all(&model.network, ds)?;
    let x = taps.get(TapPoint::HiddenPreact).expect("always recorded");
    let classes = model.network.spec().classes;
    let mut sums = vec![[0.0f64; 2]; classes];
    let mut counts = vec![0usize; classes];
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["x1", "x2", "class"])?;
    for i in 0..ds.len() {
        let (a, b) = (x.row(i)[0], x.row(i)[1]);
        let k = ds.labels[i];
        w.write_record([a.to_string(), b.to_string(), k.to_string()])?;
        sums[k][0] += a;
        sums[k][1] += b;
        counts[k] += 1;
    }
    w.flush().map_err(io_err(out))?;
    let means = means_path(out);
    let mut w = csv::Writer::from_path(&means)?;
    w.write_record(["class", "x1", "x2"])?;
    for k in 0..classes {
        let n = counts[k].max(1) as f64;
        w.write_record([
            k.to_string(),
            (sums[k][0] / n).to_string(),
            (sums[k][1] / n).to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&means))?;
    Ok(means)
}

fn check_data(net: &Network, ds: &Dataset) -> Result<()> {
    let spec = net.spec();
    if ds.sample_shape() != spec.input || ds.classes > spec.classes {
        return Err(TrainError::Mismatch(format!(
            "model expects {:?} inputs with {} classes, data has {:?} with {} classes",
            spec.input,
            spec.classes,
            ds.sample_shape(),
            ds.classes
        )));
    }
    Ok(())
}
