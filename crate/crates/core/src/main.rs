use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use nartlab::config::LabConfig;
use nartlab::data::{generate_synthetic, load_corpus, save_corpus, tokenize, write_atomic, Corpus, EncodedCorpus, SentencePair, Vocabulary};
use nartlab::eval::{attention_entropy, export_attention, similarity_matrix, similarity_quantiles, EvalReport};
use nartlab::inference::{default_length_bias, latency_report, predict_length, translate};
use nartlab::train::{distill_corpus, AblationMode, Checkpoint, StudentTrainer, TeacherTrainer};
use nartlab::{Student, Teacher};

#[derive(Parser)]
#[command(name = "nartlab", version, about = "Hint-trained non-autoregressive translation lab")]
struct Cli {
    /// Seed for data generation and both trainers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory for corpora, checkpoints and reports.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/valid/test splits of the synthetic task.
    GenData,
    /// Train the autoregressive teacher on train.tsv.
    TrainTeacher {
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Replace training targets by teacher greedy decodes.
    Distill,
    /// Train the non-autoregressive student on distilled.tsv.
    TrainStudent {
        #[arg(long)]
        ablation: Option<AblationMode>,
        #[arg(long)]
        steps: Option<u64>,
        /// Checkpoint name inside the output directory.
        #[arg(long, default_value = "student.ckpt")]
        name: String,
    },
    /// Translate source sentences, one per line.
    Translate {
        /// Input file; standard input when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "student.ckpt")]
        student: String,
        /// Decode only the `T_x + C` candidate.
        #[arg(long)]
        no_rescore: bool,
        #[arg(long)]
        halfwidth: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        length_bias: Option<i64>,
    },
    /// Score translations; prints BLEU ×100 and repetition statistics.
    Evaluate {
        /// Hypothesis file, one sentence per line.
        #[arg(long, requires = "reference")]
        hypothesis: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Student checkpoint to translate test.tsv with when no files are given.
        #[arg(long, default_value = "student.ckpt")]
        student: String,
        #[arg(long)]
        no_rescore: bool,
    },
    /// Export attention and similarity grids plus similarity statistics.
    Diagnose {
        #[arg(long, default_value = "student.ckpt")]
        student: String,
        /// Number of test sentences to export grids for.
        #[arg(long, default_value_t = 3)]
        sentences: usize,
    },
    /// Batch-1 latency of teacher greedy decoding against the student.
    BenchLatency {
        #[arg(long, default_value = "student.ckpt")]
        student: String,
        #[arg(long)]
        no_rescore: bool,
        #[arg(long, default_value_t = 100)]
        sentences: usize,
    },
}

struct Lab {
    cfg: LabConfig,
    out: PathBuf,
}

impl Lab {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn corpus(&self, name: &str) -> anyhow::Result<Corpus> {
        let path = self.path(name);
        let (corpus, skipped) = load_corpus(&path).with_context(|| format!("reading {}", path.display()))?;
        if skipped > 0 {
            eprintln!("{}: skipped {skipped} lines with an empty side", path.display());
        }
        Ok(corpus)
    }

    fn checkpoint(&self, name: &str) -> anyhow::Result<Checkpoint> {
        let path = self.path(name);
        Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))
    }

    fn teacher(&self) -> anyhow::Result<(Teacher, Vocabulary)> {
        let ck = self.checkpoint("teacher.ckpt")?;
        Ok((ck.teacher()?, Vocabulary::from_tokens(ck.vocab.clone())))
    }

    fn student(&self, name: &str) -> anyhow::Result<(Student, Vocabulary, Option<i64>)> {
        let ck = self.checkpoint(name)?;
        Ok((ck.student()?, Vocabulary::from_tokens(ck.vocab.clone()), ck.length_bias))
    }

    fn write(&self, name: &str, text: &str) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out)?;
        write_atomic(&self.path(name), text.as_bytes())?;
        Ok(())
    }
}

fn gen_data(lab: &Lab) -> anyhow::Result<()> {
    let splits = generate_synthetic(&lab.cfg.data)?;
    std::fs::create_dir_all(&lab.out)?;
    for (name, c) in [("train.tsv", &splits.train), ("valid.tsv", &splits.valid), ("test.tsv", &splits.test)] {
        save_corpus(&lab.path(name), c)?;
        println!("{name}\t{}", c.len());
    }
    Ok(())
}

fn log_lines(log: &mut String) -> impl FnMut(&nartlab::train::StepLog) + '_ {
    |l| {
        let _ = writeln!(log, "{l}");
    }
}

fn train_teacher(lab: &Lab, steps: Option<u64>) -> anyhow::Result<()> {
    let corpus = lab.corpus("train.tsv")?;
    let vocab = Vocabulary::build(&corpus);
    let mut model = lab.cfg.model.clone();
    model.src_vocab = vocab.len();
    model.tgt_vocab = vocab.len();
    let mut cfg = lab.cfg.teacher.clone();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let mut log = String::new();
    let mut trainer = TeacherTrainer::new(model, EncodedCorpus::encode(&corpus, &vocab), cfg)?
        .with_vocab(vocab.tokens().to_vec());
    let result = trainer.run(&mut log_lines(&mut log));
    lab.write("teacher.log", &log)?;
    result?;
    let mut ck = trainer.checkpoint();
    ck.length_bias = Some(default_length_bias(&corpus));
    ck.save(&lab.path("teacher.ckpt"))?;
    println!("teacher.ckpt\tstep {}", ck.step);
    Ok(())
}

fn distill(lab: &Lab) -> anyhow::Result<()> {
    let (teacher, vocab) = lab.teacher()?;
    let corpus = lab.corpus("train.tsv")?;
    let distilled = distill_corpus(&teacher, &EncodedCorpus::encode(&corpus, &vocab))?;
    let to_corpus = |pick: fn(&nartlab::train::DistilledPair) -> &Vec<usize>| {
        Corpus::new(
            distilled
                .pairs
                .iter()
                .map(|p| SentencePair {
                    source: vocab.decode(&p.source),
                    target: vocab.decode(pick(p)),
                })
                .collect(),
        )
    };
    save_corpus(&lab.path("distilled.tsv"), &to_corpus(|p| &p.target))?;
    save_corpus(&lab.path("distilled.orig.tsv"), &to_corpus(|p| &p.original))?;
    println!("distilled\t{}\ndropped\t{}", distilled.pairs.len(), distilled.dropped);
    Ok(())
}

fn train_student(lab: &Lab, ablation: Option<AblationMode>, steps: Option<u64>, name: &str) -> anyhow::Result<()> {
    let mut cfg = lab.cfg.student.clone();
    if let Some(a) = ablation {
        cfg.ablation = a;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let corpus = lab.corpus("distilled.tsv")?;
    let (teacher, vocab) = if cfg.ablation.needs_teacher() {
        let (t, v) = lab.teacher()?;
        (Some(t), v)
    } else {
        (None, lab.checkpoint("teacher.ckpt").map(|c| Vocabulary::from_tokens(c.vocab)).unwrap_or_else(|_| Vocabulary::build(&corpus)))
    };
    let mut model = lab.cfg.model.clone();
    model.src_vocab = vocab.len();
    model.tgt_vocab = vocab.len();
    if let Some(t) = &teacher {
        model = t.config().clone();
    }
    let mut log = String::new();
    let mut trainer = StudentTrainer::new(model, teacher, EncodedCorpus::encode(&corpus, &vocab), cfg)?
        .with_vocab(vocab.tokens().to_vec());
    let result = trainer.run(&mut log_lines(&mut log));
    lab.write(&format!("{name}.log"), &log)?;
    result?;
    let mut ck = trainer.checkpoint();
    ck.length_bias = Some(default_length_bias(&corpus));
    ck.save(&lab.path(name))?;
    println!("{name}\tstep {}", ck.step);
    Ok(())
}

fn inference_config(lab: &Lab, bias: Option<i64>, no_rescore: bool) -> nartlab::inference::InferenceConfig {
    let mut inf = lab.cfg.inference.resolve(bias.unwrap_or(0));
    if no_rescore {
        inf.rescore = false;
    }
    inf
}

fn encode_line(vocab: &Vocabulary, line: &str) -> Vec<usize> {
    vocab.encode(&tokenize(line))
}

fn translate_cmd(
    lab: &Lab,
    input: Option<&Path>,
    student: &str,
    no_rescore: bool,
    halfwidth: Option<usize>,
    length_bias: Option<i64>,
) -> anyhow::Result<()> {
    let (model, vocab, bias) = lab.student(student)?;
    let mut inf = inference_config(lab, bias, no_rescore);
    if let Some(b) = halfwidth {
        inf.halfwidth = b;
    }
    if let Some(c) = length_bias {
        inf.length_bias = c;
    }
    let teacher = if inf.rescore { Some(lab.teacher()?.0) } else { None };
    let lines: Vec<String> = match input {
        Some(p) => std::fs::read_to_string(p)?.lines().map(str::to_owned).collect(),
        None => std::io::stdin().lock().lines().collect::<Result<_, _>>()?,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in lines {
        if line.trim().is_empty() {
            writeln!(out)?;
            continue;
        }
        let tr = translate(&encode_line(&vocab, &line), &model, teacher.as_ref(), &inf)?;
        writeln!(out, "{}", vocab.decode(tr.output()).join(" "))?;
    }
    Ok(())
}

fn read_sentences(path: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    Ok(std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .map(tokenize)
        .collect())
}

fn evaluate(lab: &Lab, hyp: Option<&Path>, reference: Option<&Path>, student: &str, no_rescore: bool) -> anyhow::Result<()> {
    let report = match (hyp, reference) {
        (Some(h), Some(r)) => {
            let (h, r) = (read_sentences(h)?, read_sentences(r)?);
            EvalReport::score(&h, &r)?
        }
        (None, None) => {
            let (model, vocab, bias) = lab.student(student)?;
            let inf = inference_config(lab, bias, no_rescore);
            let teacher = if inf.rescore { Some(lab.teacher()?.0) } else { None };
            let test = lab.corpus("test.tsv")?;
            let mut hyps = Vec::with_capacity(test.len());
            for p in &test.pairs {
                let tr = translate(&vocab.encode(&p.source), &model, teacher.as_ref(), &inf)?;
                hyps.push(vocab.decode(tr.output()));
            }
            let refs: Vec<Vec<String>> = test.pairs.iter().map(|p| p.target.clone()).collect();
            let text: String = hyps.iter().map(|h| h.join(" ") + "\n").collect();
            lab.write(&format!("{student}.test.hyp"), &text)?;
            EvalReport::score(&hyps, &refs)?
        }
        _ => bail!("--hypothesis and --reference go together"),
    };
    println!("BLEU\t{:.2}", report.bleu * 100.0);
    print!("{}", report.to_text());
    Ok(())
}

fn diagnose(lab: &Lab, student: &str, sentences: usize) -> anyhow::Result<()> {
    let (model, vocab, bias) = lab.student(student)?;
    let (teacher, _) = lab.teacher()?;
    let test = lab.corpus("test.tsv")?;
    let c = bias.unwrap_or(0);
    let dir = lab.path("diagnostics");
    std::fs::create_dir_all(&dir)?;
    let n_layers = model.config().dec_layers;
    let mut report = EvalReport::default();
    let mut teacher_sims = Vec::new();
    let mut student_sims = Vec::new();
    for (i, p) in test.pairs.iter().enumerate() {
        let src = vocab.encode(&p.source);
        let teacher_out = teacher.greedy_decode(&src, teacher.config().max_len)?;
        let y: Vec<usize> = if teacher_out.tokens().is_empty() {
            continue;
        } else {
            teacher_out.tokens().to_vec()
        };
        let t_trace = teacher.forced_decode(&src, &y)?;
        let s_len = predict_length(src.len(), c).min(model.config().max_len);
        let s_trace = model.parallel_decode_forward(&src, s_len)?;
        teacher_sims.push(similarity_matrix(&t_trace, n_layers, "teacher")?);
        student_sims.push(similarity_matrix(&s_trace, n_layers, "student")?);
        if i < sentences {
            let s_out = vocab.decode(&nartlab::student::predict_tokens(&s_trace));
            let t_out = vocab.decode(&y);
            for l in 1..=n_layers {
                for h in 1..=model.config().heads {
                    let g = export_attention(&t_trace, l, h, &p.source, &t_out, "teacher")?;
                    write_atomic(&dir.join(format!("s{i}.teacher.attn.l{l}.h{h}.tsv")), g.to_text().as_bytes())?;
                    let g = export_attention(&s_trace, l, h, &p.source, &s_out, "student")?;
                    write_atomic(&dir.join(format!("s{i}.student.attn.l{l}.h{h}.tsv")), g.to_text().as_bytes())?;
                }
            }
            let g = teacher_sims.last().expect("pushed").to_grid(&t_out)?;
            write_atomic(&dir.join(format!("s{i}.teacher.sim.tsv")), g.to_text().as_bytes())?;
            let g = student_sims.last().expect("pushed").to_grid(&s_out)?;
            write_atomic(&dir.join(format!("s{i}.student.sim.tsv")), g.to_text().as_bytes())?;
            if i == 0 {
                report.attention_entropy = attention_entropy(&s_trace);
            }
        }
    }
    let mean = |m: &[nartlab::eval::SimilarityMatrix]| m.iter().map(|s| s.mean_off_diagonal()).sum::<f64>() / m.len().max(1) as f64;
    report.mean_similarity = vec![("teacher".into(), mean(&teacher_sims)), ("student".into(), mean(&student_sims))];
    report.quantiles = Some(similarity_quantiles(&teacher_sims)?);
    let text = report.to_text();
    let text: String = text.lines().filter(|l| !l.starts_with("bleu") && !l.starts_with("repetition")).map(|l| format!("{l}\n")).collect();
    lab.write("diagnostics/report.tsv", &text)?;
    print!("{text}");
    Ok(())
}

fn bench_latency(lab: &Lab, student: &str, no_rescore: bool, sentences: usize) -> anyhow::Result<()> {
    let (model, vocab, bias) = lab.student(student)?;
    let (teacher, _) = lab.teacher()?;
    let inf = inference_config(lab, bias, no_rescore);
    let test = lab.corpus("test.tsv")?;
    let sources: Vec<Vec<usize>> = test.pairs.iter().take(sentences).map(|p| vocab.encode(&p.source)).collect();
    let report = latency_report(&model, &teacher, &sources, &inf)?;
    print!("{}", report.to_text());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => LabConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => LabConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if cli.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let lab = Lab { cfg, out: cli.out };
    match cli.command.expect("checked by caller") {
        Command::GenData => gen_data(&lab),
        Command::TrainTeacher { steps } => train_teacher(&lab, steps),
        Command::Distill => distill(&lab),
        Command::TrainStudent { ablation, steps, name } => train_student(&lab, ablation, steps, &name),
        Command::Translate {
            input,
            student,
            no_rescore,
            halfwidth,
            length_bias,
        } => translate_cmd(&lab, input.as_deref(), &student, no_rescore, halfwidth, length_bias),
        Command::Evaluate {
            hypothesis,
            reference,
            student,
            no_rescore,
        } => evaluate(&lab, hypothesis.as_deref(), reference.as_deref(), &student, no_rescore),
        Command::Diagnose { student, sentences } => diagnose(&lab, &student, sentences),
        Command::BenchLatency {
            student,
            no_rescore,
            sentences,
        } => bench_latency(&lab, &student, no_rescore, sentences),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.command.is_none() && !cli.dump_config {
        use clap::CommandFactory;
        let _ = Cli::command().print_help();
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
