use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use alignsup::corpus::PharaohOrder;
use alignsup::training::{parse_key_values, TrainConfig};

/// Everything `train` reads from its config file. Relative paths are taken
/// relative to the config file's directory.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    /// Pharaoh alignments, transformed on the fly with the configured mode.
    pub train_align: Option<PathBuf>,
    /// Precomputed supervision matrices, one per kept pair.
    pub train_sup: Option<PathBuf>,
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
    pub vocab_size: usize,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub output: PathBuf,
    pub log: Option<PathBuf>,
    pub max_len: Option<usize>,
    pub align_order: PharaohOrder,
}

fn opt_display(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let mut train = TrainConfig::default();
        let mut train_src = None;
        let mut train_tgt = None;
        let mut output = None;
        let mut cfg = RunConfig {
            train: TrainConfig::default(),
            train_src: PathBuf::new(),
            train_tgt: PathBuf::new(),
            train_align: None,
            train_sup: None,
            src_vocab: None,
            tgt_vocab: None,
            vocab_size: 30000,
            dev_src: None,
            dev_tgt: None,
            output: PathBuf::new(),
            log: None,
            max_len: Some(50),
            align_order: PharaohOrder::SourceTarget,
        };
        for (line, key, value) in parse_key_values(text)? {
            let known = train
                .set(&key, &value)
                .with_context(|| format!("line {line}"))?;
            if known {
                continue;
            }
            match key.as_str() {
                "train_src" => train_src = Some(resolve(&value)),
                "train_tgt" => train_tgt = Some(resolve(&value)),
                "train_align" => cfg.train_align = Some(resolve(&value)),
                "train_sup" => cfg.train_sup = Some(resolve(&value)),
                "src_vocab" => cfg.src_vocab = Some(resolve(&value)),
                "tgt_vocab" => cfg.tgt_vocab = Some(resolve(&value)),
                "dev_src" => cfg.dev_src = Some(resolve(&value)),
                "dev_tgt" => cfg.dev_tgt = Some(resolve(&value)),
                "output" => output = Some(resolve(&value)),
                "log" => cfg.log = Some(resolve(&value)),
                "vocab_size" => {
                    cfg.vocab_size = value
                        .parse()
                        .with_context(|| format!("line {line}: vocab_size={value}"))?
                }
                "max_len" => {
                    cfg.max_len = if value == "none" {
                        None
                    } else {
                        Some(
                            value
                                .parse()
                                .with_context(|| format!("line {line}: max_len={value}"))?,
                        )
                    }
                }
                "align_order" => {
                    cfg.align_order = match value.as_str() {
                        "src-tgt" => PharaohOrder::SourceTarget,
                        "tgt-src" => PharaohOrder::TargetSource,
                        _ => bail!("line {line}: align_order must be src-tgt or tgt-src"),
                    }
                }
                _ => bail!("line {line}: unknown key {key:?}"),
            }
        }
        cfg.train_src = train_src.context("missing required key train_src")?;
        cfg.train_tgt = train_tgt.context("missing required key train_tgt")?;
        cfg.output = output.context("missing required key output")?;
        if cfg.train_align.is_some() && cfg.train_sup.is_some() {
            bail!("give at most one of train_align and train_sup");
        }
        if cfg.dev_src.is_some() != cfg.dev_tgt.is_some() {
            bail!("dev_src and dev_tgt must be given together");
        }
        cfg.train = train;
        Ok(cfg)
    }

    /// The resolved configuration, one `key=value` per line.
    pub fn resolved_lines(&self) -> Vec<String> {
        let mut out = self.train.to_kv_lines();
        out.extend([
            format!("train_src={}", self.train_src.display()),
            format!("train_tgt={}", self.train_tgt.display()),
            format!("train_align={}", opt_display(&self.train_align)),
            format!("train_sup={}", opt_display(&self.train_sup)),
            format!("src_vocab={}", opt_display(&self.src_vocab)),
            format!("tgt_vocab={}", opt_display(&self.tgt_vocab)),
            format!("vocab_size={}", self.vocab_size),
            format!("dev_src={}", opt_display(&self.dev_src)),
            format!("dev_tgt={}", opt_display(&self.dev_tgt)),
            format!("output={}", self.output.display()),
            format!("log={}", opt_display(&self.log)),
            format!(
                "max_len={}",
                self.max_len
                    .map_or_else(|| "none".into(), |m| m.to_string())
            ),
            format!(
                "align_order={}",
                match self.align_order {
                    PharaohOrder::SourceTarget => "src-tgt",
                    PharaohOrder::TargetSource => "tgt-src",
                }
            ),
        ]);
        out
    }
}
