//! The `robust-lr` command line: `gen`, `corrupt`, `train`, `audit`, `report`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::data::{gen_blobs, load_csv, load_noisy_csv, save_csv, CsvOptions, LabeledDataset, Split};
use crate::dynamics::{
    argmax_rows, audit_top_losses, read_records, records_to_csv, run_with_records, write_records, EpochRecord,
};
use crate::loss_model::{confidence_all, fit_gmm_em, losses_from_probs, EmConfig, LossVector};
use crate::model_io::{load_model, save_model};
use crate::nn::{predict_probs, Activation};
use crate::noise::{effective_noise_rate, load_transition_csv, InstanceRule, NoiseKind, NoiseSpec};
use crate::refurbish::{RegWeight, Temperature};
use crate::trainer::{ConfidenceSource, Preset, PseudoSource, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "robust-lr", version, about = "Label refurbishment for learning with noisy labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a Gaussian-blob dataset.
    Gen(GenArgs),
    /// Corrupt the observed labels of a dataset.
    Corrupt(CorruptArgs),
    /// Train from a config file and write records and models.
    Train(TrainArgs),
    /// List the examples with the largest losses under a trained model.
    Audit(AuditArgs),
    /// Flatten a records file into CSV.
    Report(ReportArgs),
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    pub dim: u64,
    #[arg(long, default_value_t = 0.6)]
    pub spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseKindArg {
    Symmetric,
    Asymmetric,
    Instance,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub kind: NoiseKindArg,
    /// Symmetric redraw probability.
    #[arg(long, value_parser = parse_unit)]
    pub rate: Option<f64>,
    /// Headerless C x C transition matrix (asymmetric).
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Instance-dependent rule name.
    #[arg(long, default_value = "boundary")]
    pub rule: String,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class count; inferred from the labels when omitted.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub no_gmm: bool,
    #[arg(long)]
    pub no_refurbish: bool,
    #[arg(long)]
    pub no_strong_aug: bool,
    #[arg(long)]
    pub no_cotrain: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Light,
    Heavy,
    Custom,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Light => Preset::Light,
            PresetArg::Heavy => Preset::Heavy,
            PresetArg::Custom => Preset::Custom,
        }
    }
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Second model; predictions are averaged when given.
    #[arg(long)]
    pub peer_model: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(short, long, default_value_t = 50)]
    pub k: usize,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Also write `index,raw_loss,normalized_loss,w` for every example.
    #[arg(long)]
    pub losses_out: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub records: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Flat key-value run configuration, read from TOML.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub classes: Option<usize>,

    pub gen_classes: Option<usize>,
    pub gen_per_class: Option<usize>,
    pub gen_test_per_class: Option<usize>,
    pub gen_dim: Option<usize>,
    pub gen_spread: Option<f64>,
    pub gen_seed: Option<u64>,

    pub noise_kind: Option<String>,
    pub noise_rate: Option<f64>,
    pub noise_matrix: Option<PathBuf>,
    pub noise_rule: Option<String>,
    pub noise_strength: Option<f64>,
    pub noise_seed: Option<u64>,

    pub out_dir: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub temperature: Option<f64>,
    pub reg_weight: Option<f64>,

    pub warm_iters: Option<usize>,
    pub round_iters: Option<usize>,
    pub rounds: Option<usize>,
    pub seed: Option<u64>,
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<Activation>,

    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,

    pub weak_sigma: Option<f64>,
    pub strong_sigma: Option<f64>,
    pub strong_mask_prob: Option<f64>,

    pub use_refurbishment: Option<bool>,
    pub use_strong_aug: Option<bool>,
    pub use_gmm: Option<bool>,
    pub use_cotrain: Option<bool>,
    pub confidence_source: Option<ConfidenceSource>,
    pub pseudo_source: Option<PseudoSource>,
    pub fixed_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Files {
        train: PathBuf,
        test: PathBuf,
        classes: Option<usize>,
    },
    Generate {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub noise: Option<NoiseSpec>,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub preset: Preset,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Resolves the file into a [`RunConfig`]. Relative paths are taken
    /// relative to `base`.
    pub fn resolve(self, base: &Path) -> anyhow::Result<RunConfig> {
        let rel = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let data = match (self.train_data, self.gen_classes) {
            (Some(_), Some(_)) => bail!("set either train_data or gen_classes, not both"),
            (Some(train), None) => DataSource::Files {
                train: rel(train),
                test: rel(self.test_data.context("train_data needs a test_data file for evaluation")?),
                classes: self.classes,
            },
            (None, Some(classes)) => DataSource::Generate {
                classes,
                per_class: self.gen_per_class.unwrap_or(500),
                test_per_class: self.gen_test_per_class.unwrap_or(200),
                dim: self.gen_dim.unwrap_or(2),
                spread: self.gen_spread.unwrap_or(0.6),
                seed: self.gen_seed.unwrap_or(0),
            },
            (None, None) => bail!("config needs train_data/test_data or gen_classes"),
        };

        let noise_seed = self.noise_seed.unwrap_or(0);
        let noise = match self.noise_kind.as_deref() {
            None | Some("none") => None,
            Some("symmetric") => {
                let rate = self.noise_rate.context("symmetric noise needs noise_rate")?;
                parse_unit(&rate.to_string()).map_err(anyhow::Error::msg)?;
                Some(NoiseKind::Symmetric { rate })
            }
            Some("asymmetric") => {
                let path = rel(self.noise_matrix.context("asymmetric noise needs noise_matrix")?);
                Some(NoiseKind::Asymmetric {
                    transition: load_transition_csv(&path)?,
                })
            }
            Some("instance") => Some(NoiseKind::Instance {
                rule: self.noise_rule.as_deref().unwrap_or("boundary").parse::<InstanceRule>()?,
                strength: self.noise_strength.context("instance noise needs noise_strength")?,
            }),
            Some(other) => bail!("unknown noise_kind `{other}`"),
        }
        .map(|kind| NoiseSpec { kind, seed: noise_seed });

        let preset = self.preset.unwrap_or_default();
        let mut train = TrainConfig::default().with_preset(preset);
        match preset {
            Preset::Custom => {
                if let Some(t) = self.temperature {
                    train.temperature = Temperature::new(t)?;
                }
                if let Some(r) = self.reg_weight {
                    train.reg_weight = RegWeight::new(r)?;
                }
            }
            _ if self.temperature.is_some() || self.reg_weight.is_some() => {
                bail!("temperature and reg_weight can only be set with preset = \"custom\"")
            }
            _ => {}
        }
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$src { train.$($dst).+ = v; })*
            };
        }
        set!(
            warm_iters => warm_iters,
            round_iters => round_iters,
            rounds => rounds,
            seed => seed,
            hidden => hidden,
            activation => activation,
            learning_rate => sgd.learning_rate,
            momentum => sgd.momentum,
            weight_decay => sgd.weight_decay,
            batch_size => sgd.batch_size,
            weak_sigma => aug.weak_sigma,
            strong_sigma => aug.strong_sigma,
            strong_mask_prob => aug.strong_mask_prob,
            use_refurbishment => ablation.use_refurbishment,
            use_strong_aug => ablation.use_strong_aug,
            use_gmm => ablation.use_gmm,
            use_cotrain => ablation.use_cotrain,
            confidence_source => ablation.confidence_source,
            pseudo_source => ablation.pseudo_source,
            fixed_confidence => ablation.fixed_confidence,
        );
        train.validate()?;
        Ok(RunConfig {
            data,
            noise,
            train,
            out_dir: rel(self.out_dir.unwrap_or_else(|| PathBuf::from("run"))),
            preset,
        })
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file = RunConfigFile::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        file.resolve(base)
    }

    /// Training and test sets, with the configured noise applied to training.
    pub fn datasets(&self) -> anyhow::Result<(LabeledDataset, LabeledDataset)> {
        let (train, test) = match &self.data {
            DataSource::Files { train, test, classes } => {
                let train = load_csv(train, CsvOptions { class_count: *classes, split: Split::Train })?;
                let classes = classes.or(Some(train.class_count()));
                let test = load_csv(test, CsvOptions { class_count: classes, split: Split::Test })?;
                (train, test)
            }
            DataSource::Generate { classes, per_class, test_per_class, dim, spread, seed } => {
                let train = gen_blobs(*classes, *per_class, *dim, *spread, *seed)?;
                let test = gen_blobs(*classes, *test_per_class, *dim, *spread, seed.wrapping_add(0x5eed))?
                    .with_split(Split::Test);
                (train, test)
            }
        };
        let train = match &self.noise {
            Some(spec) => spec.apply(&train)?,
            None => train,
        };
        if train.dim() != test.dim() {
            bail!("training data has {} features, test data {}", train.dim(), test.dim());
        }
        Ok((train, test))
    }
}

/// Best, mean of the last three, and final noise estimate.
pub fn summary_line(records: &[EpochRecord]) -> String {
    let accs: Vec<f64> = records.iter().map(|r| r.test_acc_ensemble).collect();
    let best = accs.iter().copied().fold(0.0, f64::max);
    let tail = &accs[accs.len().saturating_sub(3)..];
    let last = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    let est = records.last().map_or(0.0, |r| r.est_noise_fraction);
    format!("best_acc={best:.4} last3_mean_acc={last:.4} final_est_noise_fraction={est:.4}")
}

pub fn cmd_gen(args: &GenArgs) -> anyhow::Result<()> {
    let ds = gen_blobs(args.classes as usize, args.per_class, args.dim as usize, args.spread, args.seed)?;
    save_csv(&ds, &args.output)?;
    println!("N={} C={} D={}", ds.len(), ds.class_count(), ds.dim());
    Ok(())
}

pub fn cmd_corrupt(args: &CorruptArgs) -> anyhow::Result<()> {
    let ds = load_csv(&args.input, CsvOptions { class_count: args.classes, split: Split::Train })?;
    let kind = match args.kind {
        NoiseKindArg::Symmetric => NoiseKind::Symmetric {
            rate: args.rate.context("--kind symmetric needs --rate")?,
        },
        NoiseKindArg::Asymmetric => NoiseKind::Asymmetric {
            transition: load_transition_csv(args.matrix.as_ref().context("--kind asymmetric needs --matrix")?)?,
        },
        NoiseKindArg::Instance => NoiseKind::Instance {
            rule: args.rule.parse()?,
            strength: args.strength.context("--kind instance needs --strength")?,
        },
    };
    let noisy = NoiseSpec { kind, seed: args.seed }.apply(&ds)?;
    save_csv(&noisy, &args.output)?;
    println!("effective_noise_rate={:.4}", effective_noise_rate(&noisy));
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(p) = args.preset {
        let preset = Preset::from(p);
        cfg.preset = preset;
        cfg.train = cfg.train.with_preset(preset);
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(r) = args.rounds {
        cfg.train.rounds = r;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    let flags = &mut cfg.train.ablation;
    flags.use_gmm &= !args.no_gmm;
    flags.use_refurbishment &= !args.no_refurbish;
    flags.use_strong_aug &= !args.no_strong_aug;
    flags.use_cotrain &= !args.no_cotrain;

    let (train, test) = cfg.datasets()?;
    let (state, records) = run_with_records(&train, &test, &cfg.train)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write_records(&records, cfg.out_dir.join("records.jsonl"))?;
    let last = state.peers.len() - 1;
    save_model(&state.peers[0].params, cfg.out_dir.join("model0.mlp"))?;
    save_model(&state.peers[last].params, cfg.out_dir.join("model1.mlp"))?;
    println!("{}", summary_line(&records));
    Ok(())
}

pub fn cmd_audit(args: &AuditArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let ds = load_noisy_csv(&args.data, args.classes.or(Some(model.class_count())))?;
    let mut probs = predict_probs(&model, ds.features())?;
    if let Some(peer) = &args.peer_model {
        let other = predict_probs(&load_model(peer)?, ds.features())?;
        let avg: Vec<f64> = probs.as_slice().iter().zip(other.as_slice()).map(|(a, b)| 0.5 * (a + b)).collect();
        probs = crate::matrix::Matrix::from_vec(probs.rows(), probs.cols(), avg)?;
    }
    let losses = LossVector::from_raw(losses_from_probs(&probs, ds.labels()))?;
    let w = if losses.len() >= 4 {
        confidence_all(&fit_gmm_em(&losses, EmConfig::default())?, &losses).w
    } else {
        vec![0.5; losses.len()]
    };
    let report = audit_top_losses(&losses.raw, &w, &probs, ds.labels(), args.k)?;
    report.write_csv(&args.output)?;
    if let Some(path) = &args.losses_out {
        let mut out = String::from("index,raw_loss,normalized_loss,w\n");
        for (i, ((raw, norm), w)) in losses.raw.iter().zip(&losses.normalized).zip(&w).enumerate() {
            out.push_str(&format!("{i},{raw},{norm},{w}\n"));
        }
        fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    }
    let flagged = argmax_rows(&probs).iter().zip(ds.labels()).filter(|(p, o)| p != o).count();
    println!("audited={} disagreements={flagged}", report.entries.len());
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    let records = read_records(&args.records)?;
    fs::write(&args.output, records_to_csv(&records))
        .with_context(|| format!("writing {}", args.output.display()))?;
    println!("rows={}", records.len());
    Ok(())
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::Train(a) => cmd_train(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Report(a) => cmd_report(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_values_are_locked() {
        let f = RunConfigFile::parse("gen_classes = 4\npreset = \"heavy\"\n").unwrap();
        let cfg = f.resolve(Path::new(".")).unwrap();
        assert_eq!(cfg.train.temperature.get(), 1.0 / 3.0);
        assert_eq!(cfg.train.reg_weight.get(), 10.0);
        let f = RunConfigFile::parse("gen_classes = 4\ntemperature = 0.5\n").unwrap();
        assert!(f.resolve(Path::new(".")).is_err());
        let f = RunConfigFile::parse("gen_classes = 4\npreset = \"custom\"\ntemperature = 0.5\n").unwrap();
        assert_eq!(f.resolve(Path::new(".")).unwrap().train.temperature.get(), 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfigFile::parse("gen_clases = 4\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let f = RunConfigFile::parse(
            "gen_classes = 3\nrounds = 2\nlearning_rate = 0.1\nuse_gmm = false\nconfidence_source = \"self\"\nhidden = [8]\n",
        )
        .unwrap();
        let cfg = f.resolve(Path::new("/tmp")).unwrap();
        assert_eq!(cfg.train.rounds, 2);
        assert_eq!(cfg.train.sgd.learning_rate, 0.1);
        assert!(!cfg.train.ablation.use_gmm);
        assert_eq!(cfg.train.ablation.confidence_source, ConfidenceSource::Own);
        assert_eq!(cfg.train.hidden, vec![8]);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/run"));
    }

    #[test]
    fn summary_uses_last_three() {
        let mk = |acc: f64| EpochRecord {
            round: 0,
            groups: Default::default(),
            test_acc_model0: acc,
            test_acc_ensemble: acc,
            est_noise_fraction: 0.25,
            mean_w_clean: 0.0,
            mean_w_noisy: 0.0,
            degenerate_gmm: false,
        };
        let line = summary_line(&[mk(0.9), mk(0.5), mk(0.6), mk(0.7)]);
        assert_eq!(line, "best_acc=0.9000 last3_mean_acc=0.6000 final_est_noise_fraction=0.2500");
    }
}
