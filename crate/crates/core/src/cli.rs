//! Command-line front end.
//!
//! Every subcommand takes the same option set; each one checks for the
//! options it needs. Options may also come from a TOML file given with
//! `--config`, whose keys are the long flag names with `_` for `-`. Flags win
//! over the file. Each run writes its artifacts, a `manifest.json` and a
//! `config.toml` with the merged options into `--out`, so passing
//! that `config.toml` back reproduces the run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{load_library, load_model, save_library, save_model};
use crate::augment::{build_library, AugmentMode, UnitLibrary};
use crate::autoencoder::{collision_rate, interpolate, rank_at_50, reconstruct, AutoencoderModel};
use crate::corpus::{corpus_hash, load_corpus, save_corpus, save_pieces, Corpus};
use crate::dssm::DssmModel;
use crate::error::{Error, Result};
use crate::eval::{make_probes, next_unit_ranking, RankingReport, Regime, Scorers};
use crate::index::EmbeddedLibrary;
use crate::lm::LmModel;
use crate::music::{validate_piece, Piece, Unit};
use crate::pipeline::{self, PipelineConfig};
use crate::rng;
use crate::select::{generate_note_level, GenerationConfig, SelectionMode, Selector};
use crate::toy;

#[derive(Debug, Parser)]
#[command(name = "unitsel", version, about = "Melody generation by unit selection and concatenation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a unit library from a corpus.
    BuildLib(Options),
    /// Train the autoencoder on a unit library.
    TrainAe(Options),
    /// Train the relevance model on adjacent unit pairs.
    TrainDssm(Options),
    /// Train the note-level language model.
    TrainLm(Options),
    /// Rebuild pieces from library units picked by the autoencoder.
    Reconstruct(Options),
    /// Walk the autoencoder embedding between two units.
    Interpolate(Options),
    /// Extend a seed passage by unit selection.
    Generate(Options),
    /// Extend a seed passage note by note with the language model.
    GenerateNotes(Options),
    /// Autoencoder identity retrieval among 50 candidates.
    EvalRank50(Options),
    /// Next-unit ranking for every scoring regime.
    EvalNextunit(Options),
    /// Write a seeded synthetic corpus.
    ToyCorpus(Options),
}

impl Command {
    fn split(self) -> (&'static str, Options) {
        match self {
            Command::BuildLib(o) => ("build-lib", o),
            Command::TrainAe(o) => ("train-ae", o),
            Command::TrainDssm(o) => ("train-dssm", o),
            Command::TrainLm(o) => ("train-lm", o),
            Command::Reconstruct(o) => ("reconstruct", o),
            Command::Interpolate(o) => ("interpolate", o),
            Command::Generate(o) => ("generate", o),
            Command::GenerateNotes(o) => ("generate-notes", o),
            Command::EvalRank50(o) => ("eval-rank50", o),
            Command::EvalNextunit(o) => ("eval-nextunit", o),
            Command::ToyCorpus(o) => ("toy-corpus", o),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Mode {
    Full,
    TransposeOnly,
}

/// Options shared by all subcommands. `None` means "not given".
#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Options {
    /// TOML file of options; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    #[serde(skip)]
    threads: Option<usize>,

    /// Global seed; every random choice derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus file, one piece per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Unit library written by build-lib or a training command.
    #[arg(long)]
    library: Option<PathBuf>,
    /// Autoencoder model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Relevance model.
    #[arg(long)]
    dssm: Option<PathBuf>,
    /// Language model.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Pieces to reconstruct.
    #[arg(long)]
    input: Option<PathBuf>,
    /// File whose first piece is the generation seed.
    #[arg(long)]
    seed_piece: Option<PathBuf>,
    /// File whose first piece starts the interpolation.
    #[arg(long)]
    from: Option<PathBuf>,
    /// File whose first piece ends the interpolation.
    #[arg(long)]
    to: Option<PathBuf>,

    /// Measures per unit.
    #[arg(long)]
    unit_length: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Transposition shifts in semitones, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    shifts: Option<Vec<i32>>,
    #[arg(long, action = clap::ArgAction::Set)]
    double_time: Option<bool>,
    /// Fraction of pieces used for training in eval-nextunit.
    #[arg(long)]
    train_fraction: Option<f64>,

    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    dropout_keep: Option<f64>,
    /// Global gradient-norm bound.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Epochs for the language model only.
    #[arg(long)]
    lm_epochs: Option<usize>,
    /// Learning rate for the language model only.
    #[arg(long)]
    lm_learning_rate: Option<f64>,

    #[arg(long)]
    ae_hidden: Option<usize>,
    #[arg(long)]
    ae_embedding: Option<usize>,
    #[arg(long)]
    dssm_width: Option<usize>,
    #[arg(long)]
    lm_hidden: Option<usize>,
    #[arg(long)]
    lm_layers: Option<usize>,
    #[arg(long)]
    lm_stride: Option<usize>,

    /// Units to append.
    #[arg(long)]
    units: Option<usize>,
    /// Measures to append (generate-notes, or generate in whole units).
    #[arg(long)]
    measures: Option<usize>,
    /// Interpolation points, endpoints included.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    shortlist_fraction: Option<f64>,
    /// Notes of each candidate scored by the concatenation cost.
    #[arg(long)]
    concat_notes: Option<usize>,
    /// Sample with this temperature instead of taking the best candidate.
    #[arg(long)]
    temperature: Option<f64>,

    /// toy-corpus: number of pieces.
    #[arg(long)]
    pieces: Option<usize>,
    /// toy-corpus: measures per piece.
    #[arg(long)]
    piece_measures: Option<usize>,
}

macro_rules! prefer {
    ($a:expr, $b:expr; $($f:ident),* $(,)?) => {
        Options { config: $a.config, threads: $a.threads, $($f: $a.$f.or($b.$f)),* }
    };
}

impl Options {
    fn merged(self, file: Options) -> Options {
        prefer!(self, file;
            seed, out, corpus, library, model, dssm, lm, input, seed_piece, from, to,
            unit_length, mode, shifts, double_time, train_fraction,
            epochs, learning_rate, batch_size, negatives, dropout_keep, clip_norm, lm_epochs, lm_learning_rate,
            ae_hidden, ae_embedding, dssm_width, lm_hidden, lm_layers, lm_stride,
            units, measures, steps, shortlist_fraction, concat_notes, temperature,
            pieces, piece_measures)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn unit_length(&self) -> usize {
        self.unit_length.unwrap_or(1)
    }

    fn need<'a>(&self, v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        v.as_deref().ok_or_else(|| Error::Invalid(format!("missing --{flag}")))
    }

    fn pipeline(&self) -> PipelineConfig {
        let mut c = PipelineConfig {
            unit_length: self.unit_length(),
            ..Default::default()
        };
        if let Some(f) = self.train_fraction {
            c.train_fraction = f;
        }
        if let Some(s) = &self.shifts {
            c.shifts = s.clone();
        }
        for t in [&mut c.ae_train, &mut c.dssm_train, &mut c.lm_train] {
            if let Some(v) = self.epochs {
                t.epochs = v;
            }
            if let Some(v) = self.learning_rate {
                t.learning_rate = v;
            }
            if let Some(v) = self.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = self.negatives {
                t.negatives = v;
            }
            if let Some(v) = self.dropout_keep {
                t.dropout_keep = v;
            }
            if self.clip_norm.is_some() {
                t.clip_norm = self.clip_norm;
            }
        }
        if let Some(v) = self.lm_epochs {
            c.lm_train.epochs = v;
        }
        if let Some(v) = self.lm_learning_rate {
            c.lm_train.learning_rate = v;
        }
        if let Some(v) = self.ae_hidden {
            c.ae_shape.hidden = v;
        }
        if let Some(v) = self.ae_embedding {
            c.ae_shape.embedding = v;
        }
        if let Some(v) = self.dssm_width {
            c.dssm_width = v;
        }
        if let Some(v) = self.lm_hidden {
            c.lm_shape.hidden = v;
        }
        if let Some(v) = self.lm_layers {
            c.lm_shape.layers = v;
        }
        if let Some(v) = self.lm_stride {
            c.lm_shape.stride = v;
        }
        c.seeded(self.seed())
    }

    fn augment(&self) -> crate::augment::AugmentConfig {
        let p = self.pipeline();
        let mode = match self.mode.unwrap_or(Mode::TransposeOnly) {
            Mode::Full => AugmentMode::Full,
            Mode::TransposeOnly => AugmentMode::TransposeOnly,
        };
        let mut a = p.augment(mode);
        if let Some(d) = self.double_time {
            a.enable_double_time = d;
        }
        a
    }

    fn generation(&self) -> GenerationConfig {
        let mut g = GenerationConfig::default();
        if let Some(f) = self.shortlist_fraction {
            g.shortlist_fraction = f;
        }
        if let Some(j) = self.concat_notes {
            g.concat_notes = j;
        }
        if let Some(t) = self.temperature {
            g.mode = SelectionMode::Sampled {
                temperature: t,
                seed: rng::derive_seed(self.seed(), "select"),
            };
        }
        g
    }
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Collects artifact hashes while a command runs and writes the manifest.
struct Run {
    command: &'static str,
    opts: Options,
    out: PathBuf,
    corpus_hash: Option<String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    corpus_hash: Option<&'a str>,
    config: &'a serde_json::Value,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

impl Run {
    fn new(command: &'static str, opts: Options) -> Result<Self> {
        let out = opts.out();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Run {
            command,
            opts,
            out,
            corpus_hash: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn corpus(&mut self) -> Result<Corpus> {
        let path = self.opts.need(&self.opts.corpus, "corpus")?.to_path_buf();
        let c = load_corpus(&path)?;
        self.corpus_hash = Some(corpus_hash(&c));
        Ok(c)
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    fn first_piece(&mut self, path: &Path) -> Result<Piece> {
        self.input(path)?;
        let c = load_corpus(path)?;
        Ok(c.pieces.into_iter().next().expect("corpora are non-empty"))
    }

    fn library(&mut self) -> Result<UnitLibrary> {
        let path = self.opts.need(&self.opts.library, "library")?.to_path_buf();
        self.input(&path)?;
        load_library(&path)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn wrote(&mut self, name: &str) -> Result<()> {
        let h = file_hash(&self.path(name))?;
        self.outputs.insert(name.to_string(), h);
        Ok(())
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        self.wrote(name)
    }

    fn pieces(&mut self, name: &str, pieces: &[Piece]) -> Result<()> {
        for p in pieces {
            let v = validate_piece(p);
            if !v.is_empty() {
                return Err(Error::Shape(format!("emitted piece {} is invalid: {}", p.id, v[0])));
            }
        }
        save_pieces(self.path(name), pieces)?;
        self.wrote(name)
    }

    fn finish(self) -> Result<()> {
        let config = toml::to_string(&self.opts).map_err(|e| Error::Shape(e.to_string()))?;
        let mut given = serde_json::to_value(&self.opts).map_err(|e| Error::Shape(e.to_string()))?;
        let fields = given.as_object_mut().expect("options serialize to a map");
        fields.retain(|_, v| !v.is_null());
        // The output directory does not influence any artifact.
        let mut hashed = fields.clone();
        hashed.remove("out");
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.opts.seed(),
            config_hash: hex(format!("{}\n{}", self.command, serde_json::Value::Object(hashed)).as_bytes()),
            corpus_hash: self.corpus_hash.as_deref(),
            config: &given,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Shape(e.to_string()))?;
        let write = |name: &str, text: &str| {
            let p = self.out.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("config.toml", &config)?;
        write("manifest.json", &(json + "\n"))
    }
}

fn load<M>(
    run: &mut Run,
    path: fn(&Options) -> &Option<PathBuf>,
    flag: &str,
    from: fn(&crate::archive::ModelArchive) -> Result<M>,
) -> Result<M> {
    let p = run.opts.need(path(&run.opts), flag)?.to_path_buf();
    run.input(&p)?;
    from(&load_model(&p)?)
}

fn save_archive(run: &mut Run, name: &str, a: &crate::archive::ModelArchive) -> Result<()> {
    save_model(a, run.path(name))?;
    run.wrote(name)
}

fn save_lib(run: &mut Run, lib: &UnitLibrary) -> Result<()> {
    save_library(lib, run.path("library.bin"))?;
    run.wrote("library.bin")
}

/// The library from `--library`, or one built from `--corpus`.
fn library_or_build(run: &mut Run) -> Result<UnitLibrary> {
    if run.opts.library.is_some() {
        return run.library();
    }
    let c = run.corpus()?;
    let lib = build_library(&c, &run.opts.augment())?;
    save_lib(run, &lib)?;
    Ok(lib)
}

fn build_lib(run: &mut Run) -> Result<()> {
    let c = run.corpus()?;
    let lib = build_library(&c, &run.opts.augment())?;
    save_lib(run, &lib)?;
    println!("{} units of {} measure(s)", lib.len(), lib.unit_length);
    Ok(())
}

fn train_ae(run: &mut Run) -> Result<()> {
    let lib = library_or_build(run)?;
    let m: AutoencoderModel<f64> = pipeline::train_target_model(&lib, &run.opts.pipeline())?;
    save_archive(run, "ae.model", &m.to_archive())?;
    println!("final loss {:.6}", m.loss_history.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

/// Transposition-only library of the corpus plus relevance and language models.
fn sequence_models(run: &mut Run) -> Result<(UnitLibrary, DssmModel<f64>, LmModel<f64>)> {
    let c = run.corpus()?;
    let cfg = run.opts.pipeline();
    let lib = build_library(&c, &cfg.augment(AugmentMode::TransposeOnly))?;
    let (dssm, lm) = pipeline::train_sequence_models(&c, &lib, &cfg)?;
    Ok((lib, dssm, lm))
}

fn train_dssm(run: &mut Run) -> Result<()> {
    let c = run.corpus()?;
    let cfg = run.opts.pipeline();
    let lib = build_library(&c, &cfg.augment(AugmentMode::TransposeOnly))?;
    let aug = pipeline::transposed(&c, &cfg.shifts)?;
    let m: DssmModel<f64> = pipeline::train_relevance(&aug, &lib, &cfg)?;
    save_lib(run, &lib)?;
    save_archive(run, "dssm.model", &m.to_archive())?;
    println!("final loss {:.6}", m.loss_history.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn train_lm(run: &mut Run) -> Result<()> {
    let c = run.corpus()?;
    let cfg = run.opts.pipeline();
    let aug = pipeline::transposed(&c, &cfg.shifts)?;
    let m: LmModel<f64> = pipeline::train_language(&aug, &cfg)?;
    save_archive(run, "lm.model", &m.to_archive())?;
    println!("final perplexity {:.4}", m.perplexity_history.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn reconstruct_cmd(run: &mut Run) -> Result<()> {
    let lib = run.library()?;
    let m = load(run, |o| &o.model, "model", AutoencoderModel::<f64>::from_archive)?;
    let input = run.opts.need(&run.opts.input, "input")?.to_path_buf();
    run.input(&input)?;
    let pieces = load_corpus(&input)?.pieces;
    let emb = EmbeddedLibrary::build(&lib, &m)?;
    let out = pieces.iter().map(|p| reconstruct(p, &emb, &m)).collect::<Result<Vec<_>>>()?;
    run.pieces("reconstructed.cor", &out)
}

fn leading_unit(p: &Piece, l: usize) -> Result<Unit> {
    if p.measures.len() < l {
        return Err(Error::Invalid(format!("piece {} is shorter than one unit", p.id)));
    }
    Ok(Unit::new(p.measures[..l].to_vec()))
}

fn interpolate_cmd(run: &mut Run) -> Result<()> {
    let lib = run.library()?;
    let m = load(run, |o| &o.model, "model", AutoencoderModel::<f64>::from_archive)?;
    let (from, to) = (run.opts.need(&run.opts.from, "from")?.to_path_buf(), run.opts.need(&run.opts.to, "to")?.to_path_buf());
    let a = leading_unit(&run.first_piece(&from)?, lib.unit_length)?;
    let b = leading_unit(&run.first_piece(&to)?, lib.unit_length)?;
    let steps = run.opts.steps.unwrap_or(5);
    if steps < 2 {
        return Err(Error::Invalid("--steps must be at least 2".into()));
    }
    let emb = EmbeddedLibrary::build(&lib, &m)?;
    let out = (0..steps)
        .map(|i| {
            let alpha = i as f64 / (steps - 1) as f64;
            let hit = interpolate(&a, &b, alpha, &emb, &m)?;
            Ok(Piece::from_units(format!("interp-{i}"), [lib.unit(hit.index)]))
        })
        .collect::<Result<Vec<_>>>()?;
    run.pieces("interpolation.cor", &out)
}

fn appended_units(o: &Options, l: usize) -> Result<usize> {
    match (o.units, o.measures) {
        (Some(u), _) => Ok(u),
        (None, Some(m)) if m % l == 0 => Ok(m / l),
        (None, Some(m)) => Err(Error::Invalid(format!("{m} measures is not a whole number of {l}-measure units"))),
        (None, None) => Err(Error::Invalid("missing --units".into())),
    }
}

fn generate_cmd(run: &mut Run) -> Result<()> {
    let seed_path = run.opts.need(&run.opts.seed_piece, "seed-piece")?.to_path_buf();
    let seed = run.first_piece(&seed_path)?;
    let (lib, dssm, lm) = if run.opts.corpus.is_some() && run.opts.library.is_none() {
        sequence_models(run)?
    } else {
        let lib = run.library()?;
        let dssm = load(run, |o| &o.dssm, "dssm", DssmModel::<f64>::from_archive)?;
        let lm = load(run, |o| &o.lm, "lm", LmModel::<f64>::from_archive)?;
        (lib, dssm, lm)
    };
    let n = appended_units(&run.opts, lib.unit_length)?;
    let emb = EmbeddedLibrary::build(&lib, &dssm)?;
    let sel = Selector::new(&emb, &dssm, &lm)?;
    let g = sel.continue_measures(&seed.measures, n, &run.opts.generation())?;
    let piece = Piece { id: format!("{}-generated", seed.id), ..g.piece };
    run.pieces("generated.cor", &[piece])?;
    let trace = serde_json::to_string_pretty(&g.trace).map_err(|e| Error::Shape(e.to_string()))?;
    run.write("trace.json", &(trace + "\n"))
}

fn generate_notes_cmd(run: &mut Run) -> Result<()> {
    let seed_path = run.opts.need(&run.opts.seed_piece, "seed-piece")?.to_path_buf();
    let seed = run.first_piece(&seed_path)?;
    let lm = if run.opts.lm.is_some() {
        load(run, |o| &o.lm, "lm", LmModel::<f64>::from_archive)?
    } else {
        let c = run.corpus()?;
        let cfg = run.opts.pipeline();
        pipeline::train_language(&pipeline::transposed(&c, &cfg.shifts)?, &cfg)?
    };
    let n = run.opts.measures.or(run.opts.units.map(|u| u * run.opts.unit_length())).ok_or_else(|| Error::Invalid("missing --measures".into()))?;
    let mode = run.opts.generation().mode;
    let mut piece = generate_note_level(&Unit::new(seed.measures.clone()), n, &lm, mode)?;
    piece.id = format!("{}-notes", seed.id);
    run.pieces("generated.cor", &[piece])
}

fn eval_rank50(run: &mut Run) -> Result<()> {
    let lib = library_or_build(run)?;
    let m = if run.opts.model.is_some() {
        load(run, |o| &o.model, "model", AutoencoderModel::<f64>::from_archive)?
    } else {
        let m = pipeline::train_target_model(&lib, &run.opts.pipeline())?;
        save_archive(run, "ae.model", &m.to_archive())?;
        m
    };
    let emb = EmbeddedLibrary::build(&lib, &m)?;
    let probes: Vec<Unit> = lib.units().cloned().collect();
    let s = rank_at_50(&m, &emb, &probes, rng::derive_seed(run.opts.seed(), "rank50"))?;
    let col = collision_rate(&emb);
    let text = format!(
        "probes {}\nmean rank {:.4}\naccuracy {:.4}\ncolliding units per 100k {:.3}\n",
        s.probes, s.mean_rank, s.accuracy, col.per_100k
    );
    print!("{text}");
    run.write("rank50.txt", &text)?;
    let json = serde_json::json!({ "summary": s, "collisions": col });
    run.write("rank50.json", &(json.to_string() + "\n"))
}

fn eval_nextunit(run: &mut Run) -> Result<()> {
    let c = run.corpus()?;
    let cfg = run.opts.pipeline();
    let seed = run.opts.seed();
    let prep = pipeline::prepare::<f64>(&c, &cfg, seed)?;
    let emb = EmbeddedLibrary::build(&prep.library, &prep.dssm)?;
    let scorers = Scorers {
        dssm: Some((&prep.dssm, &emb)),
        lm: Some(&prep.lm),
    };
    let probes = make_probes(&prep.test, cfg.unit_length);
    let rows = Regime::LEARNED
        .iter()
        .chain([&Regime::Random])
        .map(|&r| next_unit_ranking(&probes, &prep.library, &scorers, r, seed))
        .collect::<Result<Vec<_>>>()?;
    let report = RankingReport { rows };
    let text = report.render_text();
    print!("{text}");
    run.write("nextunit.txt", &text)?;
    run.write("nextunit.json", &(report.to_json() + "\n"))
}

fn toy_corpus(run: &mut Run) -> Result<()> {
    let c = toy::corpus(run.opts.pieces.unwrap_or(40), run.opts.piece_measures.unwrap_or(16), run.opts.seed());
    run.corpus_hash = Some(corpus_hash(&c));
    save_corpus(run.path("corpus.cor"), &c)?;
    run.wrote("corpus.cor")
}

fn execute(command: &'static str, opts: Options) -> Result<()> {
    let opts = match &opts.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file: Options = toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?;
            opts.merged(file)
        }
        None => opts,
    };
    let threads = opts.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut run = Run::new(command, opts)?;
        match command {
            "build-lib" => build_lib(&mut run),
            "train-ae" => train_ae(&mut run),
            "train-dssm" => train_dssm(&mut run),
            "train-lm" => train_lm(&mut run),
            "reconstruct" => reconstruct_cmd(&mut run),
            "interpolate" => interpolate_cmd(&mut run),
            "generate" => generate_cmd(&mut run),
            "generate-notes" => generate_notes_cmd(&mut run),
            "eval-rank50" => eval_rank50(&mut run),
            "eval-nextunit" => eval_nextunit(&mut run),
            "toy-corpus" => toy_corpus(&mut run),
            _ => unreachable!("every subcommand is dispatched"),
        }?;
        run.finish()
    })
}

/// Runs the tool on `args` (program name first) and returns the exit status:
/// 0 on success, 1 for bad input, 2 for internal failures.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (command, opts) = cli.command.split();
    match panic::catch_unwind(AssertUnwindSafe(|| execute(command, opts))) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
        Err(_) => {
            eprintln!("error: internal failure in {command}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_the_config_file() {
        let flags = Options {
            seed: Some(7),
            ..Default::default()
        };
        let file: Options = toml::from_str("seed = 3\nunit_length = 2\nshifts = [-1, 1]\n").unwrap();
        let m = flags.merged(file);
        assert_eq!(m.seed, Some(7));
        assert_eq!(m.unit_length, Some(2));
        assert_eq!(m.pipeline().shifts, vec![-1, 1]);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<Options>("sed = 3\n").is_err());
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["unitsel", "no-such-command"]), 1);
        assert_eq!(run(["unitsel", "build-lib", "--unit-length", "x"]), 1);
    }

    #[test]
    fn appended_units_from_measures() {
        let o = Options {
            measures: Some(4),
            ..Default::default()
        };
        assert_eq!(appended_units(&o, 2).unwrap(), 2);
        assert!(appended_units(&o, 3).is_err());
    }
}
