use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use bwe_core::audio_io::{read_wav, write_wav, AudioBuffer};
use bwe_core::dsp::{degrade, log_mel, resample, DegradationMode, DegradationSpec};
use bwe_core::evalkit::{compare_conditions_band, render_spectrogram, write_report, EvalRow};
use bwe_core::mushra::{build_test, MushraStore, TestDefinition, TrialSource};
use bwe_core::sampler::synthesize_with;
use bwe_core::trainer::{
    filter_by_duration, read_manifest, train, write_manifest, Corpus, ManifestEntry, TrainOutput,
    TrainRunConfig,
};
use bwe_core::wavenet::{load_checkpoint, WaveNet};
use bwe_core::PipelineConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::*;
use crate::{server, CliError};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Degrade(a) => cmd_degrade(&cfg, &a),
        Command::Train(a) => cmd_train(&cfg, &a),
        Command::Synthesize(a) => cmd_synthesize(&cfg, &a),
        Command::Evaluate(a) => cmd_evaluate(&cfg, &a),
        Command::MushraPrepare(a) => cmd_mushra_prepare(&cfg, &a),
        Command::ServeMushra(a) => cmd_serve(&a),
        Command::Config(a) => {
            let out = match a.preset {
                Some(Preset::Desk) => PipelineConfig::desk(),
                Some(Preset::Full) => PipelineConfig::full(),
                None => cfg,
            };
            print!("{}", out.to_toml().map_err(CliError::data)?);
            Ok(())
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::desk()),
        Some(p) => {
            require_file(p, "config")?;
            PipelineConfig::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// `*.wav` files of a directory, sorted by name.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|x| x.eq_ignore_ascii_case("wav"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Runs `f` over `items` on `jobs` threads, keeping input order.
fn run_jobs<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>> {
    use rayon::prelude::*;
    if jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(CliError::data)?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

/// Logs each failure and turns any into a data error.
fn report_failures(failures: &[String], total: usize) -> Result<()> {
    for f in failures {
        log::error!("{f}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{} of {total} files failed", failures.len())))
    }
}

fn cmd_degrade(cfg: &PipelineConfig, a: &DegradeArgs) -> Result<()> {
    require_dir(&a.in_dir, "--in-dir")?;
    let mut spec = cfg.dsp.degradation.clone();
    if let Some(cmd) = &a.codec_cmd {
        spec = DegradationSpec::external(spec.target_rate_hz, cmd.clone());
    }
    match a.mode {
        Some(ModeArg::BandLimit) => spec = DegradationSpec::band_limit(spec.target_rate_hz),
        Some(ModeArg::Codec) => spec.mode = DegradationMode::ExternalCodec,
        None => {}
    }
    if spec.mode == DegradationMode::ExternalCodec && spec.external_codec_command.is_none() {
        return Err(CliError::usage("codec mode needs --codec-cmd or dsp.degradation.external_codec_command"));
    }
    create_dir(&a.out_dir)?;
    let files = list_wavs(&a.in_dir)?;
    let results = run_jobs(a.jobs, &files, |path| -> std::result::Result<Option<ManifestEntry>, String> {
        let fail = |e: &dyn std::fmt::Display| format!("{}: {e}", path.display());
        let buf = read_wav(path).map_err(|e| fail(&e))?;
        if !a.filter.keeps(buf.duration_ms()) {
            log::info!("{}: {:.0} ms outside the duration filter, skipped", path.display(), buf.duration_ms());
            return Ok(None);
        }
        let lo = degrade(&buf, &spec).map_err(|e| fail(&e))?;
        let out = a.out_dir.join(path.file_name().expect("listed files have names"));
        write_wav(&lo, &out).map_err(|e| fail(&e))?;
        Ok(Some(ManifestEntry {
            path: out,
            duration_ms: lo.duration_ms(),
        }))
    })?;
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(Some(e)) => entries.push(e),
            Ok(None) => {}
            Err(e) => failures.push(e),
        }
    }
    let manifest = a.out_dir.join("manifest.tsv");
    write_manifest(&manifest, &entries).map_err(CliError::data)?;
    println!("degraded {} files into {}", entries.len(), a.out_dir.display());
    report_failures(&failures, files.len())
}

/// Manifest entries for a directory or manifest file.
fn corpus_entries(corpus: &Path) -> Result<Vec<ManifestEntry>> {
    if corpus.is_dir() {
        list_wavs(corpus)?
            .into_iter()
            .map(|path| {
                let buf = read_wav(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                Ok(ManifestEntry {
                    path,
                    duration_ms: buf.duration_ms(),
                })
            })
            .collect()
    } else {
        require_file(corpus, "--corpus")?;
        read_manifest(corpus).map_err(CliError::data)
    }
}

fn cmd_train(cfg: &PipelineConfig, a: &TrainArgs) -> Result<()> {
    if !a.corpus.exists() {
        return Err(CliError::Usage(format!("--corpus {} does not exist", a.corpus.display())));
    }
    let out = TrainOutput { dir: a.out.clone() };
    let (mut model, start, mut run_cfg) = match &a.resume {
        Some(path) => {
            let path = path.clone().unwrap_or_else(|| out.latest_checkpoint());
            require_file(&path, "checkpoint")?;
            let ckpt = load_checkpoint(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let run_cfg: TrainRunConfig = match ckpt.trainer {
                Some(v) => serde_json::from_value(v).map_err(CliError::data)?,
                None => cfg.trainer.clone(),
            };
            log::info!("resuming from {} at step {}", path.display(), ckpt.train_step);
            (ckpt.model, ckpt.train_step, run_cfg)
        }
        None => (
            WaveNet::new(cfg.wavenet.clone()).map_err(CliError::usage)?,
            0,
            cfg.trainer.clone(),
        ),
    };
    if let Some(steps) = a.steps {
        run_cfg.steps = steps;
    }
    check_model_matches(cfg, &model)?;

    let (lo, hi) = a.filter.bounds();
    let entries = filter_by_duration(&corpus_entries(&a.corpus)?, lo, hi);
    let corpus = Corpus::load(
        &entries,
        &cfg.dsp.degradation,
        model.config().output_rate_hz,
        run_cfg.crop_ms,
        cfg.dsp.mel.clone(),
    )
    .map_err(CliError::data)?;
    log::info!(
        "training {} parameters on {} utterances, steps {start}..{}",
        model.params().num_scalars(),
        corpus.pairs.len(),
        run_cfg.steps
    );
    let summary = train(&mut model, &corpus, &run_cfg, start, Some(&out), |r| {
        if r.step % 10 == 0 {
            log::info!("step {} loss {:.4} ({:.0} ms)", r.step, r.loss_nats, r.wall_ms);
        }
    })
    .map_err(CliError::data)?;
    match summary.records.last() {
        Some(r) => println!("step {} loss {:.4}; checkpoint {}", r.step, r.loss_nats, out.latest_checkpoint().display()),
        None => println!("nothing to do: already at step {}", summary.final_step),
    }
    Ok(())
}

fn check_model_matches(cfg: &PipelineConfig, model: &WaveNet) -> Result<()> {
    let m = model.config();
    if m.mel_bins != cfg.dsp.mel.num_bins || (cfg.dsp.mel.frame_rate_hz() - m.cond_rate_hz as f64).abs() > 1e-9 {
        return Err(CliError::Usage(format!(
            "model expects {} mel bins at {} Hz but the config extracts {} at {} Hz",
            m.mel_bins,
            m.cond_rate_hz,
            cfg.dsp.mel.num_bins,
            cfg.dsp.mel.frame_rate_hz()
        )));
    }
    Ok(())
}

fn cmd_synthesize(cfg: &PipelineConfig, a: &SynthesizeArgs) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.input, "input")?;
    let ckpt = load_checkpoint(&a.checkpoint).map_err(|e| CliError::Data(format!("{}: {e}", a.checkpoint.display())))?;
    let model = ckpt.model;
    check_model_matches(cfg, &model)?;
    let mut lo = read_wav(&a.input).map_err(|e| CliError::Data(format!("{}: {e}", a.input.display())))?;
    if lo.sample_rate_hz() != cfg.dsp.mel.sample_rate_hz {
        log::info!("resampling input from {} Hz to {} Hz", lo.sample_rate_hz(), cfg.dsp.mel.sample_rate_hz);
        lo = resample(&lo, cfg.dsp.mel.sample_rate_hz).map_err(CliError::data)?;
    }
    let mel = log_mel(&lo, &cfg.dsp.mel).map_err(CliError::data)?;
    let seed = a.seed.unwrap_or(cfg.sampler.seed);
    let temperature = a.temperature.unwrap_or(cfg.sampler.temperature);
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CliError::usage("--temperature must be positive"));
    }
    let audio = synthesize_with(&model, &mel, seed, temperature, |done, total| {
        if done % 24000 == 0 {
            log::info!("{done}/{total} samples");
        }
    })
    .map_err(CliError::data)?;
    let out_rate = model.config().output_rate_hz;
    let len = (lo.len() as u64 * out_rate as u64 / lo.sample_rate_hz() as u64) as usize;
    let audio = audio.truncated(len);
    write_wav(&audio, &a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    println!("wrote {} samples at {out_rate} Hz to {}", audio.len(), a.out.display());
    Ok(())
}

fn check_labels(conds: &[LabeledDir]) -> Result<()> {
    let mut seen = HashSet::new();
    for c in conds {
        if !seen.insert(c.label.as_str()) {
            return Err(CliError::Usage(format!("duplicate condition label {:?}", c.label)));
        }
        require_dir(&c.dir, &format!("condition {:?}", c.label))?;
    }
    Ok(())
}

fn read_at(path: &Path) -> std::result::Result<AudioBuffer, String> {
    read_wav(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn evaluate_one(
    cfg: &PipelineConfig,
    a: &EvaluateArgs,
    ref_path: &Path,
) -> std::result::Result<Vec<EvalRow>, String> {
    let name = ref_path.file_name().expect("listed files have names");
    let utt = stem(ref_path);
    let reference = read_at(ref_path)?;
    let conds = a
        .cond_dirs
        .iter()
        .map(|c| Ok((c.label.clone(), read_at(&c.dir.join(name))?)))
        .collect::<std::result::Result<Vec<_>, String>>()?;
    if let Some(dir) = &a.spectrograms {
        let fail = |e: &dyn std::fmt::Display| format!("{utt}: {e}");
        render_spectrogram(&reference, &dir.join(format!("{utt}__reference.pgm"))).map_err(|e| fail(&e))?;
        for (label, audio) in &conds {
            render_spectrogram(audio, &dir.join(format!("{utt}__{label}.pgm"))).map_err(|e| fail(&e))?;
        }
    }
    compare_conditions_band(&utt, &reference, &conds, cfg.evalkit.low_band_hz).map_err(|e| format!("{utt}: {e}"))
}

fn cmd_evaluate(cfg: &PipelineConfig, a: &EvaluateArgs) -> Result<()> {
    require_dir(&a.ref_dir, "--ref-dir")?;
    check_labels(&a.cond_dirs)?;
    if let Some(dir) = &a.spectrograms {
        create_dir(dir)?;
    }
    let refs = list_wavs(&a.ref_dir)?;
    let results = run_jobs(a.jobs, &refs, |p| evaluate_one(cfg, a, p))?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(r) => rows.extend(r),
            Err(e) => failures.push(e),
        }
    }
    write_report(&a.out, &rows).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    println!("{} rows written to {}", rows.len(), a.out.display());
    report_failures(&failures, refs.len())
}

fn absolute(path: &Path) -> std::result::Result<PathBuf, String> {
    fs::canonicalize(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_mushra_prepare(cfg: &PipelineConfig, a: &MushraPrepareArgs) -> Result<()> {
    require_dir(&a.ref_dir, "--ref-dir")?;
    let mut conds = a.cond_dirs.clone();
    if !conds.iter().any(|c| c.label == a.hidden_reference) {
        conds.insert(
            0,
            LabeledDir {
                label: a.hidden_reference.clone(),
                dir: a.ref_dir.clone(),
            },
        );
    }
    check_labels(&conds)?;
    if !conds.iter().any(|c| c.label == a.anchor) {
        return Err(CliError::Usage(format!("anchor {:?} is not among the conditions", a.anchor)));
    }
    let mut sources = Vec::new();
    let mut failures = Vec::new();
    let refs = list_wavs(&a.ref_dir)?;
    for r in &refs {
        let name = r.file_name().expect("listed files have names");
        let source = (|| -> std::result::Result<Option<TrialSource>, String> {
            let duration = read_at(r)?.duration_ms();
            if !a.filter.keeps(duration) {
                return Ok(None);
            }
            let conditions = conds
                .iter()
                .map(|c| {
                    let p = c.dir.join(name);
                    read_at(&p)?;
                    Ok((c.label.clone(), absolute(&p)?))
                })
                .collect::<std::result::Result<Vec<_>, String>>()?;
            Ok(Some(TrialSource {
                utterance: stem(r),
                reference: absolute(r)?,
                conditions,
            }))
        })();
        match source {
            Ok(Some(s)) => sources.push(s),
            Ok(None) => log::info!("{}: outside the duration filter, skipped", r.display()),
            Err(e) => failures.push(e),
        }
    }
    report_failures(&failures, refs.len())?;
    if sources.is_empty() {
        return Err(CliError::Data(format!("no usable utterances in {}", a.ref_dir.display())));
    }
    let mut rng = match a.seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => ChaCha8Rng::from_os_rng(),
    };
    let mut def = build_test(&a.test_id, &a.hidden_reference, &a.anchor, &sources, &mut rng).map_err(CliError::usage)?;
    def.screening = cfg.mushra.screening.clone();
    def.save(&a.out).map_err(CliError::data)?;
    println!(
        "{} trials x {} stimuli written to {}",
        def.trials.len(),
        def.conditions.len(),
        a.out.display()
    );
    Ok(())
}

/// Loads a definition, resolving relative audio paths against its directory.
pub fn load_test(path: &Path) -> Result<TestDefinition> {
    require_file(path, "test definition")?;
    let mut def = TestDefinition::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for t in &mut def.trials {
        if t.reference.path.is_relative() {
            t.reference.path = base.join(&t.reference.path);
        }
        for s in &mut t.stimuli {
            if s.path.is_relative() {
                s.path = base.join(&s.path);
            }
        }
    }
    Ok(def)
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let mut store = MushraStore::new();
    for p in &a.tests {
        store.add_test(load_test(p)?).map_err(CliError::data)?;
    }
    if let Some(parent) = a.journal.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    store.attach_journal(&a.journal).map_err(CliError::data)?;
    if let Some(dir) = &a.static_dir {
        require_dir(dir, "--static-dir")?;
    }
    let app = server::router(store, a.static_dir.as_deref());
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::data)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {}: {e}", a.addr)))?;
        let local = listener.local_addr().map_err(CliError::data)?;
        println!("serving MUSHRA on http://{local}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(CliError::data)
    })
}
