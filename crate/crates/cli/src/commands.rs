use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};

use alignsup::corpus::{
    encode_pair, format_pharaoh, load_parallel, parse_pharaoh, parse_pharaoh_links, read_lines,
    LoadOptions, PharaohOrder, Vocab,
};
use alignsup::eval::{
    bleu, corpus_alignment_f1, dump_attention, extract_alignment, greedy_decode, map_sentences,
    AlignmentSet, EvalError,
};
use alignsup::model::ModelParams;
use alignsup::supervision::{
    build_supervision, read_matrices, write_matrix_text, SmoothingConfig, SupervisionMatrix,
};
use alignsup::synth::{generate, SynthSpec};
use alignsup::training::{format_log, load_checkpoint, run_schedule, TrainData};

use crate::config::RunConfig;
use crate::{
    DumpArgs, ModeArg, ModelArgs, PrepareArgs, ScoreAlignArgs, ScoreBleuArgs, SynthArgs, TrainArgs,
    TransformArgs, TranslateArgs,
};

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_lines<I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn same_count(a: &Path, na: usize, b: &Path, nb: usize) -> Result<()> {
    ensure!(
        na == nb,
        "line-count mismatch: {} has {na} lines, {} has {nb}",
        a.display(),
        b.display()
    );
    Ok(())
}

fn words(line: &str) -> usize {
    line.split_whitespace().count()
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let src = read_lines(&a.src)?;
    let tgt = read_lines(&a.tgt)?;
    same_count(&a.src, src.len(), &a.tgt, tgt.len())?;
    let align = match &a.align {
        Some(p) => {
            let lines = read_lines(p)?;
            same_count(&a.src, src.len(), p, lines.len())?;
            Some(lines)
        }
        None => None,
    };
    let order = PharaohOrder::from(a.order);
    let (mut ks, mut kt, mut ka) = (Vec::new(), Vec::new(), Vec::new());
    let (mut empty, mut long) = (0, 0);
    for (n, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let (ls, lt) = (words(s), words(t));
        if let Some(al) = &align {
            parse_pharaoh(&al[n], ls, lt, order)
                .with_context(|| format!("alignment line {}", n + 1))?;
        }
        if ls == 0 || lt == 0 {
            empty += 1;
            continue;
        }
        if ls > a.max_len || lt > a.max_len {
            long += 1;
            continue;
        }
        ks.push(s.trim().to_string());
        kt.push(t.trim().to_string());
        if let Some(al) = &align {
            ka.push(al[n].trim().to_string());
        }
    }
    ensure!(!ks.is_empty(), "no pairs left after filtering");
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let sv = Vocab::build(ks.iter().map(String::as_str), a.src_vocab_size)?;
    let tv = Vocab::build(kt.iter().map(String::as_str), a.tgt_vocab_size)?;
    sv.write(&a.out_dir.join("src.vocab"))?;
    tv.write(&a.out_dir.join("tgt.vocab"))?;
    write_lines(&a.out_dir.join("train.src"), &ks)?;
    write_lines(&a.out_dir.join("train.tgt"), &kt)?;
    if align.is_some() {
        write_lines(&a.out_dir.join("train.align"), &ka)?;
    }
    println!(
        "kept={} skipped_empty={empty} skipped_long={long} src_vocab={} tgt_vocab={}",
        ks.len(),
        sv.len(),
        tv.len()
    );
    Ok(())
}

pub fn transform_align(a: &TransformArgs) -> Result<()> {
    let align = read_lines(&a.align)?;
    let src = read_lines(&a.src)?;
    let tgt = read_lines(&a.tgt)?;
    same_count(&a.align, align.len(), &a.src, src.len())?;
    same_count(&a.align, align.len(), &a.tgt, tgt.len())?;
    let smoothing = match a.mode {
        ModeArg::Simple => None,
        ModeArg::Smooth => {
            let c = SmoothingConfig {
                window: a.window,
                sigma: a.sigma,
            };
            c.validate()?;
            Some(c)
        }
    };
    let order = PharaohOrder::from(a.order);
    let mut out = String::new();
    for (n, line) in align.iter().enumerate() {
        let raw = parse_pharaoh(line, words(&src[n]), words(&tgt[n]), order)
            .with_context(|| format!("{} line {}", a.align.display(), n + 1))?;
        out.push_str(&build_supervision(&raw, smoothing.as_ref())?.to_text());
    }
    emit(Some(&a.out), &out)?;
    println!("matrices={}", align.len());
    Ok(())
}

fn load_or_build_vocab(
    path: Option<&Path>,
    corpus: &Path,
    size: usize,
    out: &Path,
) -> Result<Vocab> {
    match path {
        Some(p) => Ok(Vocab::read(p)?),
        None => {
            let v = Vocab::build_from_file(corpus, size)?;
            v.write(out)?;
            log::info!("wrote vocabulary {}", out.display());
            Ok(v)
        }
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(w) = a.workers {
        cfg.train.workers = w;
    }
    cfg.train.validate()?;
    for line in cfg.resolved_lines() {
        log::info!("config {line}");
    }
    let schedule = cfg.train.parsed_schedule()?;
    if schedule.needs_supervision() && cfg.train_align.is_none() && cfg.train_sup.is_none() {
        bail!(
            "schedule {schedule} has alignment phases but neither train_align nor train_sup is set"
        );
    }

    let sv = load_or_build_vocab(
        cfg.src_vocab.as_deref(),
        &cfg.train_src,
        cfg.vocab_size,
        &with_suffix(&cfg.output, ".src.vocab"),
    )?;
    let tv = load_or_build_vocab(
        cfg.tgt_vocab.as_deref(),
        &cfg.train_tgt,
        cfg.vocab_size,
        &with_suffix(&cfg.output, ".tgt.vocab"),
    )?;
    let opts = LoadOptions {
        max_len: cfg.max_len,
        order: cfg.align_order,
    };
    let pd = load_parallel(
        &cfg.train_src,
        &cfg.train_tgt,
        cfg.train_align.as_deref(),
        &sv,
        &tv,
        &opts,
    )?;
    log::info!(
        "loaded {} pairs ({} empty and {} long skipped)",
        pd.pairs.len(),
        pd.skipped_empty,
        pd.skipped_long
    );
    let supervision = if let Some(al) = &pd.alignments {
        let sup: Vec<SupervisionMatrix> = al
            .iter()
            .map(|a| build_supervision(a, cfg.train.smoothing.as_ref()))
            .collect::<Result<_, _>>()?;
        Some(sup)
    } else if let Some(path) = &cfg.train_sup {
        ensure!(
            pd.skipped_empty + pd.skipped_long == 0,
            "train_sup must match the corpus line for line, but {} pairs were filtered; run prepare first",
            pd.skipped_empty + pd.skipped_long
        );
        let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let sup = read_matrices(BufReader::new(f))?
            .into_iter()
            .map(SupervisionMatrix::from_tensor)
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("reading {}", path.display()))?;
        Some(sup)
    } else {
        None
    };
    let data = TrainData::new(pd.pairs, supervision)?;
    let dev = match (&cfg.dev_src, &cfg.dev_tgt) {
        (Some(s), Some(t)) => {
            let d = load_parallel(s, t, None, &sv, &tv, &opts)?;
            Some(TrainData::new(d.pairs, None)?)
        }
        _ => None,
    };

    let mut params = cfg
        .train
        .arch
        .init_params(sv.len(), tv.len(), cfg.train.seed)?;
    let report = run_schedule(
        &mut params,
        &data,
        &cfg.train,
        dev.as_ref(),
        Some(&cfg.output),
    )?;
    if let Some(log_path) = &cfg.log {
        fs::write(log_path, format_log(&report))
            .with_context(|| format!("writing {}", log_path.display()))?;
    }
    if let Some(e) = report.last_epoch() {
        println!("{}", e.log_line());
    }
    println!("checkpoint={}", cfg.output.display());
    Ok(())
}

struct Loaded {
    params: ModelParams,
    sv: Vocab,
    tv: Vocab,
}

fn load_model(a: &ModelArgs) -> Result<Loaded> {
    let ck = load_checkpoint(&a.model)?;
    let sv = Vocab::read(&a.src_vocab)?;
    let tv = Vocab::read(&a.tgt_vocab)?;
    let d = ck.params.dims;
    ensure!(
        d.src_vocab == sv.len() && d.tgt_vocab == tv.len(),
        "vocabulary sizes {}/{} do not match the checkpoint's {}/{}",
        sv.len(),
        tv.len(),
        d.src_vocab,
        d.tgt_vocab
    );
    Ok(Loaded {
        params: ck.params,
        sv,
        tv,
    })
}

pub fn translate(a: &TranslateArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    let input = read_lines(&a.input)?;
    let srcs: Vec<Vec<usize>> = input.iter().map(|l| m.sv.encode(l)).collect();
    let hyps = map_sentences(srcs.len(), a.model.workers, |k| {
        greedy_decode(&srcs[k], &m.params, a.max_len)
    })?;
    let lines: Vec<String> = hyps.iter().map(|h| m.tv.decode(&h.ids)).collect();
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    emit(a.output.as_deref(), &text)
}

pub fn dump_attn(a: &DumpArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    let src = read_lines(&a.src)?;
    let tgt = read_lines(&a.tgt)?;
    same_count(&a.src, src.len(), &a.tgt, tgt.len())?;
    let pairs = src
        .iter()
        .zip(&tgt)
        .enumerate()
        .map(|(n, (s, t))| {
            encode_pair(s, t, &m.sv, &m.tv, n).with_context(|| format!("pair {}", n + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let attn = map_sentences(pairs.len(), a.model.workers, |k| -> Result<_, EvalError> {
        dump_attention(&pairs[k], &m.params)
    })?;
    let text: String = attn.iter().map(write_matrix_text).collect();
    emit(a.out.as_deref(), &text)?;
    if let Some(p) = &a.align_out {
        let order = PharaohOrder::from(a.order);
        let lines = attn
            .iter()
            .map(|t| format_pharaoh(&extract_alignment(t, a.threshold).links, order));
        write_lines(p, lines)?;
    }
    Ok(())
}

fn read_alignment_sets(path: &Path, order: PharaohOrder) -> Result<Vec<AlignmentSet>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(n, l)| {
            let links = parse_pharaoh_links(l, order)
                .with_context(|| format!("{} line {}", path.display(), n + 1))?;
            Ok(AlignmentSet::new(links))
        })
        .collect()
}

pub fn score_align(a: &ScoreAlignArgs) -> Result<()> {
    let order = PharaohOrder::from(a.order);
    let hyp = read_alignment_sets(&a.hyp, order)?;
    let gold = read_alignment_sets(&a.gold, order)?;
    same_count(&a.hyp, hyp.len(), &a.gold, gold.len())?;
    println!("{}", corpus_alignment_f1(&hyp, &gold)?);
    Ok(())
}

pub fn score_bleu(a: &ScoreBleuArgs) -> Result<()> {
    let tok = |p: &Path| -> Result<Vec<Vec<String>>> {
        Ok(read_lines(p)?
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect())
    };
    let hyp = tok(&a.hyp)?;
    let refs = tok(&a.reference)?;
    same_count(&a.hyp, hyp.len(), &a.reference, refs.len())?;
    println!("{}", bleu(&hyp, &refs, 4)?);
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        task: a.task.into(),
        vocab: a.vocab,
        min_len: a.min_len,
        max_len: a.max_len,
        pairs: a.pairs,
        seed: a.seed,
    };
    let c = generate(&spec)?;
    if let Some(dir) = a.out_prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    write_lines(&with_suffix(&a.out_prefix, ".src"), &c.src)?;
    write_lines(&with_suffix(&a.out_prefix, ".tgt"), &c.tgt)?;
    write_lines(&with_suffix(&a.out_prefix, ".align"), &c.align)?;
    println!("pairs={} task={}", c.src.len(), spec.task);
    Ok(())
}
